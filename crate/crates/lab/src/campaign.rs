//! Attack campaigns: every (setting, client ratio, sample) cell, then per-row means.

use std::fmt::Write as _;
use std::path::Path;

use mjp_core::attack::{run_attack_setting, AttackConfig, AttackResult, Setting};
use mjp_core::metrics::MetricReport;
use mjp_core::mjp::ShuffleSpec;
use mjp_core::model::TransformerModel;
use mjp_core::RngKey;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{LabError, LabResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub setting: Setting,
    /// Client shuffle ratio; 0 for setting a.
    pub gamma: f64,
    /// Index into the attacked split.
    pub sample: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignRow {
    pub setting: Setting,
    pub gamma: f64,
    pub succeeded: usize,
    pub failed: usize,
    /// Mean over succeeded cells; absent when none succeeded.
    pub mean: Option<MetricReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub rows: Vec<CampaignRow>,
    pub cells: Vec<CellRecord>,
}

/// Rows in table order: setting a once, then b and c for each client ratio.
fn grid(settings: &[Setting], gammas: &[f64]) -> Vec<(Setting, f64)> {
    let mut out = Vec::new();
    if settings.contains(&Setting::A) {
        out.push((Setting::A, 0.0));
    }
    for &g in gammas {
        for s in [Setting::B, Setting::C] {
            if settings.contains(&s) {
                out.push((s, g));
            }
        }
    }
    out
}

/// Attack seed of one sample; shared by all settings so rows are paired.
pub fn sample_seed(base: u64, sample: usize) -> u64 {
    RngKey::new(base).fold_str("campaign").fold(sample as u64).raw()
}

/// Run every cell on a worker pool. A failing cell is recorded and the rest carry on.
/// With `out`, each cell's result is saved under `cells/<setting>-g<ratio>-s<sample>`.
#[allow(clippy::too_many_arguments)]
pub fn attack_campaign(
    model: &TransformerModel,
    data: &Dataset,
    samples: &[usize],
    settings: &[Setting],
    gammas: &[f64],
    spec: &ShuffleSpec,
    base: &AttackConfig,
    out: Option<&Path>,
) -> LabResult<Campaign> {
    if let Some(&i) = samples.iter().find(|&&i| i >= data.len()) {
        return Err(LabError::Config(format!("campaign sample {i} is out of range for {} samples", data.len())));
    }
    let rows = grid(settings, gammas);
    let jobs: Vec<(Setting, f64, usize)> = rows.iter().flat_map(|&(s, g)| samples.iter().map(move |&i| (s, g, i))).collect();
    let run_cell = |&(setting, gamma, sample): &(Setting, f64, usize)| -> CellRecord {
        let seed = sample_seed(base.seed, sample);
        let cfg = AttackConfig { setting, seed, ..base.clone() };
        let cell_spec = ShuffleSpec { gamma, ..spec.clone() };
        let result: LabResult<AttackResult> = (|| {
            let r = run_attack_setting(model, &data.sample(sample), data.labels[sample], Some(&cell_spec), &cfg)?;
            if let Some(dir) = out {
                r.save(&dir.join("cells").join(format!("{setting:?}-g{gamma}-s{sample}").to_lowercase()))?;
            }
            Ok(r)
        })();
        match result {
            Ok(r) => CellRecord {
                setting,
                gamma,
                sample,
                seed,
                metrics: Some(r.summary.metrics),
                error: None,
            },
            Err(e) => {
                log::warn!("attack cell {setting:?} γ={gamma} sample {sample} failed: {e}");
                CellRecord {
                    setting,
                    gamma,
                    sample,
                    seed,
                    metrics: None,
                    error: Some(e.to_string()),
                }
            }
        }
    };
    let cells: Vec<CellRecord> = jobs.par_iter().map(run_cell).collect();
    let rows = rows
        .into_iter()
        .map(|(setting, gamma)| {
            let mine: Vec<&CellRecord> = cells.iter().filter(|c| c.setting == setting && c.gamma == gamma).collect();
            let ok: Vec<MetricReport> = mine.iter().filter_map(|c| c.metrics.clone()).collect();
            CampaignRow {
                setting,
                gamma,
                succeeded: ok.len(),
                failed: mine.len() - ok.len(),
                mean: MetricReport::mean(&ok),
            }
        })
        .collect();
    Ok(Campaign { rows, cells })
}

fn row_label(setting: Setting, gamma: f64) -> String {
    match setting {
        Setting::A => "(a) raw gradients, raw reference".into(),
        Setting::B => format!("(b) shuffled gradients γ={gamma}, shuffled reference"),
        Setting::C => format!("(c) shuffled gradients γ={gamma}, raw reference"),
    }
}

impl Campaign {
    /// Markdown table, one row per (setting, ratio), one column per metric.
    pub fn table(&self) -> String {
        let metrics: Vec<String> = self
            .rows
            .iter()
            .find_map(|r| r.mean.as_ref())
            .map(|m| m.entries.keys().cloned().collect())
            .unwrap_or_default();
        let mut out = String::from("| row | n |");
        for m in &metrics {
            write!(out, " {m} |").expect("writing to a string");
        }
        out.push_str("\n|---|---|");
        out.push_str(&"---|".repeat(metrics.len()));
        out.push('\n');
        for r in &self.rows {
            write!(out, "| {} | {}", row_label(r.setting, r.gamma), r.succeeded).expect("writing to a string");
            if r.failed > 0 {
                write!(out, " ({} failed)", r.failed).expect("writing to a string");
            }
            out.push_str(" |");
            for m in &metrics {
                match r.mean.as_ref().and_then(|x| x.get(m)) {
                    Some(v) => write!(out, " {v:.4} |"),
                    None => write!(out, " - |"),
                }
                .expect("writing to a string");
            }
            out.push('\n');
        }
        out
    }

    /// `campaign.json` and `table.md` into `dir`.
    pub fn save(&self, dir: &Path) -> LabResult<()> {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        let mut json = serde_json::to_string_pretty(self).map_err(mjp_core::Error::from)?;
        json.push('\n');
        let p = dir.join("campaign.json");
        std::fs::write(&p, json).map_err(|e| LabError::io(&p, e))?;
        let p = dir.join("table.md");
        std::fs::write(&p, self.table()).map_err(|e| LabError::io(&p, e))
    }
}
