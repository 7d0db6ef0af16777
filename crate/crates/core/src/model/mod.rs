//! Encoder-only transformer classifier for patch grids (vision) or token ids (text).
//!
//! Parameters live in a name-keyed registry; a forward pass binds them onto a
//! [`Tape`] so the same model value serves training, evaluation and attacks.

mod checkpoint;
mod forward;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::rng::{trunc_normal_tensor, xavier_uniform, RngKey};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{patchify, patchify_taped, unpatchify, Encoded, InputBatch, ModelInput};

/// Standard deviation of the truncated-normal init for embeddings and PEs.
pub const EMBED_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Vision,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    /// Content tokens per sequence (patches in vision mode, excluding CLS).
    pub seq_len: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default)]
    pub patch_dim: usize,
    #[serde(default)]
    pub grid_side: usize,
    pub num_classes: usize,
    /// Adds the linear position regressor used by the localization losses.
    #[serde(default)]
    pub localization_head: bool,
}

fn default_mlp_ratio() -> usize {
    4
}

impl ModelConfig {
    pub fn text(vocab_size: usize, seq_len: usize, embed_dim: usize, heads: usize, layers: usize, num_classes: usize) -> Self {
        ModelConfig {
            mode: Mode::Text,
            seq_len,
            embed_dim,
            heads,
            layers,
            mlp_ratio: default_mlp_ratio(),
            vocab_size,
            patch_dim: 0,
            grid_side: 0,
            num_classes,
            localization_head: false,
        }
    }

    pub fn vision(grid_side: usize, patch_dim: usize, embed_dim: usize, heads: usize, layers: usize, num_classes: usize) -> Self {
        ModelConfig {
            mode: Mode::Vision,
            seq_len: grid_side * grid_side,
            embed_dim,
            heads,
            layers,
            mlp_ratio: default_mlp_ratio(),
            vocab_size: 0,
            patch_dim,
            grid_side,
            num_classes,
            localization_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seq_len == 0 || self.embed_dim == 0 || self.heads == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return bad("seq_len, embed_dim, heads, mlp_ratio and num_classes must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!("embed_dim {} is not divisible by heads {}", self.embed_dim, self.heads));
        }
        match self.mode {
            Mode::Text if self.vocab_size == 0 => bad("text mode needs vocab_size > 0".into()),
            Mode::Vision if self.patch_dim == 0 => bad("vision mode needs patch_dim > 0".into()),
            Mode::Vision if self.grid_side * self.grid_side != self.seq_len => bad(format!(
                "vision grid_side {} does not match seq_len {}",
                self.grid_side, self.seq_len
            )),
            _ => Ok(()),
        }
    }

    /// Rows of the position table: one per content token, plus the CLS slot in vision mode.
    pub fn pe_rows(&self) -> usize {
        self.seq_len + self.cls_offset()
    }

    /// Index of the first content token in the encoded sequence.
    pub fn cls_offset(&self) -> usize {
        match self.mode {
            Mode::Vision => 1,
            Mode::Text => 0,
        }
    }

    /// Output width of the position regressor: grid (row, col) or sequence index.
    pub fn coord_dims(&self) -> usize {
        match self.mode {
            Mode::Vision => 2,
            Mode::Text => 1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

pub mod names {
    pub const TOKEN_EMBED: &str = "tok_embed";
    pub const PATCH_WEIGHT: &str = "patch_proj.weight";
    pub const PATCH_BIAS: &str = "patch_proj.bias";
    pub const CLS: &str = "cls_token";
    pub const POS: &str = "pos_embed";
    pub const UNK: &str = "unk_pos_embed";
    pub const NORM_WEIGHT: &str = "norm.weight";
    pub const NORM_BIAS: &str = "norm.bias";
    pub const HEAD_WEIGHT: &str = "head.weight";
    pub const HEAD_BIAS: &str = "head.bias";
    pub const LOC_WEIGHT: &str = "loc.weight";
    pub const LOC_BIAS: &str = "loc.bias";

    pub fn block(i: usize, part: &str) -> String {
        format!("blocks.{i}.{part}")
    }
}

/// True for parameters that weight decay must skip: biases and layer-norm affines.
pub fn is_no_decay(name: &str) -> bool {
    name.ends_with(".bias") || name.contains(".ln") || name.starts_with("norm.")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    params: BTreeMap<String, Tensor>,
}

impl TransformerModel {
    /// Fresh model: truncated-normal embeddings and PEs, Xavier-uniform linear maps,
    /// zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, key: RngKey) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let h = d * config.mlp_ratio;
        let mut rng = key.fold_str("init").rng();
        let mut p = BTreeMap::new();
        let mut put = |name: String, t: Tensor| {
            p.insert(name, t);
        };
        match config.mode {
            Mode::Text => put(names::TOKEN_EMBED.into(), trunc_normal_tensor(&[config.vocab_size, d], EMBED_INIT_STD, &mut rng)),
            Mode::Vision => {
                put(names::PATCH_WEIGHT.into(), xavier_uniform(config.patch_dim, d, &mut rng));
                put(names::PATCH_BIAS.into(), Tensor::zeros(&[d]));
                put(names::CLS.into(), trunc_normal_tensor(&[1, d], EMBED_INIT_STD, &mut rng));
            }
        }
        put(names::POS.into(), trunc_normal_tensor(&[config.pe_rows(), d], EMBED_INIT_STD, &mut rng));
        put(names::UNK.into(), trunc_normal_tensor(&[1, d], EMBED_INIT_STD, &mut rng));
        for i in 0..config.layers {
            put(names::block(i, "ln1.weight"), Tensor::ones(&[d]));
            put(names::block(i, "ln1.bias"), Tensor::zeros(&[d]));
            put(names::block(i, "attn.qkv.weight"), xavier_uniform(d, 3 * d, &mut rng));
            put(names::block(i, "attn.qkv.bias"), Tensor::zeros(&[3 * d]));
            put(names::block(i, "attn.out.weight"), xavier_uniform(d, d, &mut rng));
            put(names::block(i, "attn.out.bias"), Tensor::zeros(&[d]));
            put(names::block(i, "ln2.weight"), Tensor::ones(&[d]));
            put(names::block(i, "ln2.bias"), Tensor::zeros(&[d]));
            put(names::block(i, "mlp.fc1.weight"), xavier_uniform(d, h, &mut rng));
            put(names::block(i, "mlp.fc1.bias"), Tensor::zeros(&[h]));
            put(names::block(i, "mlp.fc2.weight"), xavier_uniform(h, d, &mut rng));
            put(names::block(i, "mlp.fc2.bias"), Tensor::zeros(&[d]));
        }
        put(names::NORM_WEIGHT.into(), Tensor::ones(&[d]));
        put(names::NORM_BIAS.into(), Tensor::zeros(&[d]));
        put(names::HEAD_WEIGHT.into(), xavier_uniform(d, config.num_classes, &mut rng));
        put(names::HEAD_BIAS.into(), Tensor::zeros(&[config.num_classes]));
        if config.localization_head {
            put(names::LOC_WEIGHT.into(), xavier_uniform(d, config.coord_dims(), &mut rng));
            put(names::LOC_BIAS.into(), Tensor::zeros(&[config.coord_dims()]));
        }
        Ok(TransformerModel { config, params: p })
    }

    /// Model from explicit parameters; every expected name must be present with its expected shape.
    pub fn from_params(config: ModelConfig, params: BTreeMap<String, Tensor>) -> Result<Self> {
        let template = TransformerModel::init(config.clone(), RngKey::new(0))?;
        if template.params.len() != params.len() {
            let missing = template.params.keys().find(|k| !params.contains_key(*k));
            let extra = params.keys().find(|k| !template.params.contains_key(*k));
            return Err(Error::UnknownParameter(
                missing.or(extra).cloned().unwrap_or_else(|| "parameter count mismatch".into()),
            ));
        }
        for (name, t) in &template.params {
            let got = params.get(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if got.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    left: got.shape().to_vec(),
                    right: t.shape().to_vec(),
                    context: "model parameter",
                });
            }
        }
        Ok(TransformerModel { config, params })
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.params.get_mut(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                left: value.shape().to_vec(),
                right: slot.shape().to_vec(),
                context: "set_param",
            });
        }
        *slot = value.detach();
        Ok(())
    }

    /// Mutate the whole registry (e.g. an optimizer step); names and shapes must survive.
    pub fn update(&mut self, f: impl FnOnce(&mut BTreeMap<String, Tensor>) -> Result<()>) -> Result<()> {
        let before: Vec<(String, Vec<usize>)> = self.params.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect();
        f(&mut self.params)?;
        let after = self.params.iter().map(|(k, v)| (k, v.shape()));
        if before.len() != self.params.len() || !before.iter().zip(after).all(|((a, sa), (b, sb))| a == b && sa.as_slice() == sb) {
            return Err(Error::Config("parameter update changed the registry layout".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Register every parameter on `tape` as a named, differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            config: self.config.clone(),
            map: self.params.iter().map(|(k, v)| (k.clone(), tape.param(k, v))).collect(),
        }
    }

    /// Register every parameter as a constant; nothing downstream is differentiated.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            config: self.config.clone(),
            map: self.params.iter().map(|(k, v)| (k.clone(), tape.constant(v))).collect(),
        }
    }
}

/// Model parameters as tensors on one tape.
pub struct Bound {
    pub config: ModelConfig,
    map: BTreeMap<String, Tensor>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn block(&self, i: usize, part: &str) -> Result<&Tensor> {
        self.get(&names::block(i, part))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }
}
