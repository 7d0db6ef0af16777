//! Labeled datasets and their on-disk formats.
//!
//! Text: one sample per line, space-separated token ids, a tab, the label.
//! Images: a directory of tensor files (`H×W×C`, values in `[0, 1]`) and a
//! `labels.csv` with `file,label` rows.

use std::fs;
use std::path::Path;

use mjp_core::attack::Sample;
use mjp_core::model::{patchify, InputBatch, Mode, ModelConfig};
use mjp_core::Tensor;

use crate::error::{LabError, LabResult};

#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    Tokens(Vec<Vec<usize>>),
    /// Pixels `[H, W, C]` with their patch rows `[L, P]` precomputed.
    Images { pixels: Vec<Tensor>, patches: Vec<Tensor>, patch: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Inputs,
    pub labels: Vec<usize>,
}

/// Train and validation splits of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
}

impl Dataset {
    pub fn text(tokens: Vec<Vec<usize>>, labels: Vec<usize>) -> Self {
        Dataset {
            inputs: Inputs::Tokens(tokens),
            labels,
        }
    }

    pub fn images(pixels: Vec<Tensor>, labels: Vec<usize>, patch: usize) -> LabResult<Self> {
        let patches = pixels.iter().map(|p| patchify(p, patch)).collect::<Result<_, _>>()?;
        Ok(Dataset {
            inputs: Inputs::Images { pixels, patches, patch },
            labels,
        })
    }

    pub fn modality(&self) -> Mode {
        match self.inputs {
            Inputs::Tokens(_) => Mode::Text,
            Inputs::Images { .. } => Mode::Vision,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Model batch for the given sample indices.
    pub fn batch(&self, idx: &[usize]) -> LabResult<InputBatch> {
        Ok(match &self.inputs {
            Inputs::Tokens(t) => InputBatch::Tokens(idx.iter().map(|&i| t[i].clone()).collect()),
            Inputs::Images { patches, .. } => {
                let rows: Vec<&Tensor> = idx.iter().map(|&i| &patches[i]).collect();
                let stacked = Tensor::concat(&rows, 0)?;
                let (l, p) = (patches[idx[0]].shape()[0], patches[idx[0]].shape()[1]);
                InputBatch::Patches(stacked.reshape(&[idx.len(), l, p])?)
            }
        })
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn sample(&self, i: usize) -> Sample {
        match &self.inputs {
            Inputs::Tokens(t) => Sample::Text(t[i].clone()),
            Inputs::Images { pixels, patch, .. } => Sample::Image {
                pixels: pixels[i].clone(),
                patch: *patch,
            },
        }
    }

    /// Enforce the model's vocabulary, sequence length, input shape and label range.
    pub fn check(&self, cfg: &ModelConfig) -> LabResult<()> {
        if self.modality() != cfg.mode {
            return Err(LabError::Config("dataset modality does not match the model".into()));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l >= cfg.num_classes) {
            return Err(LabError::Config(format!("label {bad} ≥ num_classes {}", cfg.num_classes)));
        }
        match &self.inputs {
            Inputs::Tokens(t) => {
                for (i, s) in t.iter().enumerate() {
                    if s.len() != cfg.seq_len {
                        return Err(LabError::Config(format!("sample {i} has {} tokens, model expects {}", s.len(), cfg.seq_len)));
                    }
                    if let Some(id) = s.iter().find(|&&id| id >= cfg.vocab_size) {
                        return Err(LabError::Config(format!("sample {i}: token id {id} ≥ vocab_size {}", cfg.vocab_size)));
                    }
                }
            }
            Inputs::Images { patches, .. } => {
                for (i, p) in patches.iter().enumerate() {
                    if p.shape() != [cfg.seq_len, cfg.patch_dim] {
                        return Err(LabError::Config(format!(
                            "image {i} gives patch rows {:?}, model expects [{}, {}]",
                            p.shape(),
                            cfg.seq_len,
                            cfg.patch_dim
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn malformed(path: &Path, line: usize, reason: impl Into<String>) -> LabError {
    LabError::Malformed {
        path: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}

/// Parse `"5 9 2\t1"` into `([5, 9, 2], 1)`.
pub fn parse_text_line(line: &str) -> Result<(Vec<usize>, usize), String> {
    let (ids, label) = line.split_once('\t').ok_or("expected `<ids>\\t<label>`")?;
    let tokens = ids
        .split_whitespace()
        .map(|s| s.parse::<usize>().map_err(|_| format!("bad token id {s:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    if tokens.is_empty() {
        return Err("no tokens".into());
    }
    let label = label.trim().parse::<usize>().map_err(|_| format!("bad label {:?}", label.trim()))?;
    Ok((tokens, label))
}

pub fn load_text(path: &Path) -> LabResult<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let (mut tokens, mut labels) = (Vec::new(), Vec::new());
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (t, l) = parse_text_line(line).map_err(|r| malformed(path, n + 1, r))?;
        tokens.push(t);
        labels.push(l);
    }
    if labels.is_empty() {
        log::warn!("{} holds no samples; dataset is empty", path.display());
    }
    Ok(Dataset::text(tokens, labels))
}

pub fn load_images(dir: &Path, patch: usize) -> LabResult<Dataset> {
    let csv = dir.join("labels.csv");
    let text = fs::read_to_string(&csv).map_err(|e| LabError::io(&csv, e))?;
    let (mut pixels, mut labels) = (Vec::new(), Vec::new());
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line == "file,label") {
            continue;
        }
        let (file, label) = line.split_once(',').ok_or_else(|| malformed(&csv, n + 1, "expected `file,label`"))?;
        let label = label.trim().parse::<usize>().map_err(|_| malformed(&csv, n + 1, format!("bad label {label:?}")))?;
        let file = file.trim();
        if file.contains('/') || file.contains('\\') {
            return Err(malformed(&csv, n + 1, "image file must sit in the dataset directory"));
        }
        let path = dir.join(file);
        let bytes = fs::read(&path).map_err(|e| LabError::io(&path, e))?;
        let img = Tensor::from_bytes(&bytes).map_err(|e| malformed(&csv, n + 1, format!("{file}: {e}")))?;
        if img.ndim() != 3 {
            return Err(malformed(&csv, n + 1, format!("{file}: expected H×W×C, got {:?}", img.shape())));
        }
        pixels.push(img);
        labels.push(label);
    }
    if labels.is_empty() {
        log::warn!("{} lists no images; dataset is empty", csv.display());
    }
    Dataset::images(pixels, labels, patch)
}

/// Write a text dataset in the line format read by [`load_text`].
pub fn save_text(ds: &Dataset, path: &Path) -> LabResult<()> {
    let Inputs::Tokens(t) = &ds.inputs else {
        return Err(LabError::Config("save_text needs a text dataset".into()));
    };
    let mut out = String::new();
    for (s, l) in t.iter().zip(&ds.labels) {
        let ids: Vec<String> = s.iter().map(usize::to_string).collect();
        out.push_str(&format!("{}\t{l}\n", ids.join(" ")));
    }
    fs::write(path, out).map_err(|e| LabError::io(path, e))
}

/// Write an image dataset as `NNNNN.tensor` files plus `labels.csv`.
pub fn save_images(ds: &Dataset, dir: &Path) -> LabResult<()> {
    let Inputs::Images { pixels, .. } = &ds.inputs else {
        return Err(LabError::Config("save_images needs an image dataset".into()));
    };
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let mut csv = String::from("file,label\n");
    for (i, (p, l)) in pixels.iter().zip(&ds.labels).enumerate() {
        let name = format!("{i:05}.tensor");
        let path = dir.join(&name);
        fs::write(&path, p.to_bytes()).map_err(|e| LabError::io(&path, e))?;
        csv.push_str(&format!("{name},{l}\n"));
    }
    let path = dir.join("labels.csv");
    fs::write(&path, csv).map_err(|e| LabError::io(&path, e))
}
