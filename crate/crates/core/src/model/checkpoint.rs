use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TransformerModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    parameters: Vec<ParamEntry>,
}

/// Write `manifest.json` plus one `<name>.tensor` file per parameter into `dir`.
pub fn save_checkpoint(model: &TransformerModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut parameters = Vec::with_capacity(model.params().len());
    for (name, t) in model.params() {
        let file = format!("{name}.tensor");
        let mut w = BufWriter::new(fs::File::create(dir.join(&file))?);
        t.write_to(&mut w)?;
        w.flush()?;
        parameters.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        config: model.config.clone(),
        parameters,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<TransformerModel> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?;
    let mut params = BTreeMap::new();
    for p in manifest.parameters {
        if p.file.contains('/') || p.file.contains('\\') {
            return Err(Error::Format(format!("parameter file {:?} escapes the checkpoint", p.file)));
        }
        let t = Tensor::read_from(&mut BufReader::new(fs::File::open(dir.join(&p.file))?))?;
        if t.shape() != p.shape {
            return Err(Error::ShapeMismatch {
                left: t.shape().to_vec(),
                right: p.shape,
                context: "checkpoint tensor vs manifest",
            });
        }
        params.insert(p.name, t);
    }
    TransformerModel::from_params(manifest.config, params)
}
