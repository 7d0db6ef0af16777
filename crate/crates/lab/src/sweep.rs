//! Validation accuracy under inference-time shuffling.

use std::fmt::Write as _;
use std::path::Path;

use mjp_core::mjp::ShuffleSpec;
use mjp_core::model::TransformerModel;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{LabError, LabResult};
use crate::train::evaluate;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub gamma: f64,
    pub loss: f64,
    pub accuracy: f64,
}

/// One evaluation per ratio, all from the same eval seed so points differ only in γ.
pub fn ratio_sweep(model: &TransformerModel, data: &Dataset, spec: &ShuffleSpec, gammas: &[f64], seed: u64, batch_size: usize) -> LabResult<Vec<SweepPoint>> {
    if let Some(g) = gammas.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(LabError::Config(format!("sweep ratio {g} is outside [0, 1]")));
    }
    gammas
        .par_iter()
        .map(|&gamma| {
            let (loss, accuracy) = evaluate(model, data, spec, gamma, seed, batch_size)?;
            Ok(SweepPoint { gamma, loss, accuracy })
        })
        .collect()
}

/// Accuracy at ratio `from` minus accuracy at ratio `to`.
pub fn accuracy_drop(points: &[SweepPoint], from: f64, to: f64) -> Option<f64> {
    let at = |g: f64| points.iter().find(|p| p.gamma == g).map(|p| p.accuracy);
    Some(at(from)? - at(to)?)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("gamma,loss,accuracy\n");
    for p in points {
        writeln!(out, "{},{},{}", p.gamma, p.loss, p.accuracy).expect("writing to a string");
    }
    out
}

pub fn write_sweep_csv(points: &[SweepPoint], path: &Path) -> LabResult<()> {
    std::fs::write(path, sweep_csv(points)).map_err(|e| LabError::io(path, e))
}
