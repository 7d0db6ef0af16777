//! Reconstruction scores and position-embedding geometry.

mod image;
mod pca;
mod text;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use image::{fft2d_cos, image_metrics, mse, psnr, ssim, PSNR_SATURATED, SSIM_C1, SSIM_C2, SSIM_WINDOW};
pub use pca::{explained_variance_table, pca_fit_project, pe_similarity_scatter, EvRow, PcaProjection, SimilarityScatter};
pub use text::{bleu, lcs_len, rouge_l, rouge_n, text_metrics, token_accuracy, BLEU_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

/// Named scalar scores for one reconstruction.
///
/// `saturated` lists entries pinned at a cap (psnr of identical images);
/// `absent` lists metrics deliberately not computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub modality: Modality,
    pub entries: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub saturated: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub absent: Vec<String>,
}

impl MetricReport {
    pub fn new(modality: Modality) -> Self {
        MetricReport {
            modality,
            entries: BTreeMap::new(),
            saturated: Vec::new(),
            absent: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.get(name).copied()
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.entries.insert(name.to_string(), value);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metric report serializes")
    }

    /// Entry-wise mean of same-modality reports; `saturated` keeps names saturated in every input.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        let first = reports.first()?;
        let mut out = MetricReport::new(first.modality);
        for name in first.entries.keys() {
            let vals: Vec<f64> = reports.iter().filter_map(|r| r.get(name)).collect();
            if vals.len() == reports.len() {
                out.set(name, vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        out.saturated = first
            .saturated
            .iter()
            .filter(|n| reports.iter().all(|r| r.saturated.contains(n)))
            .cloned()
            .collect();
        out.absent = first.absent.clone();
        Some(out)
    }
}
