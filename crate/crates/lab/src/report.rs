//! One markdown summary of whatever the other subcommands left in an output root.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{LabError, LabResult};
use crate::train::RunRecord;

fn read_optional(path: &Path) -> LabResult<Option<String>> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(LabError::io(path, e)),
    }
}

/// CSV rendered as a markdown table.
fn csv_table(csv: &str) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        writeln!(out, "| {} |", cells.join(" | ")).expect("writing to a string");
        if i == 0 {
            writeln!(out, "|{}", "---|".repeat(cells.len())).expect("writing to a string");
        }
    }
    out
}

/// Summarize `train/`, `eval/`, `sweep/`, `attack/` and `export-pe/` under `root`.
pub fn build_report(root: &Path) -> LabResult<String> {
    let mut out = String::from("# Experiment report\n");
    let mut sections = 0;
    if let Some(text) = read_optional(&root.join("train/run.json"))? {
        let rec: RunRecord = serde_json::from_str(&text).map_err(|e| LabError::Malformed {
            path: root.join("train/run.json").display().to_string(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        writeln!(out, "\n## Training\n\nconfig `{}`, seed {}, MJP {}\n", rec.config_hash, rec.seed, if rec.mjp { "on" } else { "off" }).unwrap();
        out.push_str("| epoch | train loss | train acc | val loss | val acc |\n|---|---|---|---|---|\n");
        for e in &rec.epochs {
            writeln!(out, "| {} | {:.4} | {:.4} | {:.4} | {:.4} |", e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc).unwrap();
        }
        sections += 1;
    }
    if let Some(text) = read_optional(&root.join("eval/eval.json"))? {
        writeln!(out, "\n## Evaluation\n\n```json\n{}```", text).unwrap();
        sections += 1;
    }
    if let Some(csv) = read_optional(&root.join("sweep/sweep.csv"))? {
        writeln!(out, "\n## Inference-time shuffle sweep\n\n{}", csv_table(&csv)).unwrap();
        sections += 1;
    }
    if let Some(table) = read_optional(&root.join("attack/table.md"))? {
        writeln!(out, "\n## Gradient inversion\n\n{table}").unwrap();
        sections += 1;
    }
    if let Some(csv) = read_optional(&root.join("export-pe/variance.csv"))? {
        writeln!(out, "\n## Position-embedding explained variance\n\n{}", csv_table(&csv)).unwrap();
        sections += 1;
    }
    if sections == 0 {
        log::warn!("{} holds no experiment outputs; the report is empty", root.display());
        out.push_str("\nNo outputs found.\n");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collects_present_sections_only() {
        let dir = tempfile::tempdir().unwrap();
        assert!(build_report(dir.path()).unwrap().contains("No outputs found."));
        fs::create_dir_all(dir.path().join("sweep")).unwrap();
        fs::write(dir.path().join("sweep/sweep.csv"), "gamma,loss,accuracy\n0,0.1,0.9\n").unwrap();
        let r = build_report(dir.path()).unwrap();
        assert!(r.contains("| gamma | loss | accuracy |\n|---|---|---|\n| 0 | 0.1 | 0.9 |"));
        assert!(!r.contains("## Training"));
    }

    #[test]
    fn malformed_run_record_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("train")).unwrap();
        fs::write(dir.path().join("train/run.json"), "{").unwrap();
        assert!(matches!(build_report(dir.path()), Err(LabError::Malformed { .. })));
    }
}
