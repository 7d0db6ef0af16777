use super::{names, Bound, Mode};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::mjp::masked_position_rows;
use crate::tensor::Tensor;

/// What the model consumes, before position embeddings.
#[derive(Clone, Copy, Debug)]
pub enum ModelInput<'a> {
    /// Token ids, one `Vec` per sequence (text mode).
    Tokens(&'a [Vec<usize>]),
    /// Projected content tokens `[B, L, D]`; the continuous relaxation attacks optimize.
    Embedded(&'a Tensor),
    /// Flattened patches `[B, L, patch_dim]` (vision mode).
    Patches(&'a Tensor),
}

/// Owned raw inputs: what a client holds before any shuffling.
#[derive(Clone, Debug, PartialEq)]
pub enum InputBatch {
    Tokens(Vec<Vec<usize>>),
    /// `[B, L, patch_dim]`.
    Patches(Tensor),
}

impl InputBatch {
    pub fn as_input(&self) -> ModelInput<'_> {
        match self {
            InputBatch::Tokens(t) => ModelInput::Tokens(t),
            InputBatch::Patches(p) => ModelInput::Patches(p),
        }
    }

    pub fn batch_size(&self) -> usize {
        match self {
            InputBatch::Tokens(t) => t.len(),
            InputBatch::Patches(p) => p.shape().first().copied().unwrap_or(0),
        }
    }

    /// Content tokens per sequence.
    pub fn seq_len(&self) -> usize {
        match self {
            InputBatch::Tokens(t) => t.first().map_or(0, Vec::len),
            InputBatch::Patches(p) => p.shape().get(1).copied().unwrap_or(0),
        }
    }
}

/// Encoder output and the attention maps that produced it.
pub struct Encoded {
    /// Final-layer-normed hidden states `[B, L', D]`.
    pub hidden: Tensor,
    /// One `[B, heads, L', L']` map per block.
    pub attention: Vec<Tensor>,
}

impl Bound {
    /// Content-token features `[B, L, D]` (no CLS, no PEs).
    pub fn token_features(&self, tape: &mut Tape, input: ModelInput<'_>) -> Result<Tensor> {
        let cfg = &self.config;
        let d = cfg.embed_dim;
        let feats = match (cfg.mode, input) {
            (Mode::Text, ModelInput::Tokens(seqs)) => {
                let mut ids = Vec::with_capacity(seqs.len() * cfg.seq_len);
                for s in seqs {
                    if s.len() != cfg.seq_len {
                        return Err(Error::LengthMismatch {
                            expected: cfg.seq_len,
                            actual: s.len(),
                            context: "token sequence",
                        });
                    }
                    ids.extend_from_slice(s);
                }
                let rows = tape.gather(self.get(names::TOKEN_EMBED)?, &ids)?;
                tape.reshape(&rows, &[seqs.len(), cfg.seq_len, d])?
            }
            (Mode::Text, ModelInput::Embedded(x)) => x.clone(),
            (Mode::Vision, ModelInput::Patches(p)) => {
                if p.ndim() != 3 || p.shape()[1] != cfg.seq_len || p.shape()[2] != cfg.patch_dim {
                    return Err(Error::ShapeMismatch {
                        left: p.shape().to_vec(),
                        right: vec![0, cfg.seq_len, cfg.patch_dim],
                        context: "patch batch [B, L, patch_dim]",
                    });
                }
                tape.linear(p, self.get(names::PATCH_WEIGHT)?, Some(self.get(names::PATCH_BIAS)?))?
            }
            (Mode::Vision, ModelInput::Embedded(x)) => x.clone(),
            (mode, _) => return Err(Error::Config(format!("input kind does not match {mode:?} mode"))),
        };
        let s = feats.shape();
        if s.len() != 3 || s[1] != cfg.seq_len || s[2] != d {
            return Err(Error::ShapeMismatch {
                left: s.to_vec(),
                right: vec![s.first().copied().unwrap_or(0), cfg.seq_len, d],
                context: "token features [B, L, D]",
            });
        }
        Ok(feats)
    }

    /// Encoder input: CLS prepended (vision), then position embeddings added.
    ///
    /// `masks[b][l]` marks content token `l` of sequence `b` as shuffled; those rows
    /// take the shared unknown embedding. With no mask, or no marked entry, this is
    /// exactly `features + pos_embed`.
    pub fn embed(&self, tape: &mut Tape, feats: &Tensor, masks: Option<&[Vec<bool>]>) -> Result<Tensor> {
        let cfg = &self.config;
        let (b, d) = (feats.shape()[0], cfg.embed_dim);
        let z = match cfg.mode {
            Mode::Vision => {
                let cls = tape.reshape(self.get(names::CLS)?, &[1, 1, d])?;
                let cls = tape.broadcast_to(&cls, &[b, 1, d])?;
                tape.concat(&[&cls, feats], 1)?
            }
            Mode::Text => feats.clone(),
        };
        let pos = self.get(names::POS)?;
        match masks {
            Some(m) if m.iter().any(|row| row.iter().any(|&x| x)) => {
                if m.len() != b {
                    return Err(Error::LengthMismatch {
                        expected: b,
                        actual: m.len(),
                        context: "mask batch",
                    });
                }
                let rows = masked_position_rows(tape, pos, self.get(names::UNK)?, m, cfg.cls_offset())?;
                tape.add(&z, &rows)
            }
            _ => tape.add(&z, pos),
        }
    }

    /// Multi-head self-attention over already-normalized `x: [B, L', D]`.
    /// Returns the block output and the `[B, heads, L', L']` attention map.
    pub fn attention(&self, tape: &mut Tape, layer: usize, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let cfg = &self.config;
        let (b, l, d) = (x.shape()[0], x.shape()[1], cfg.embed_dim);
        let (h, dh) = (cfg.heads, cfg.head_dim());
        let qkv = tape.linear(x, self.block(layer, "attn.qkv.weight")?, Some(self.block(layer, "attn.qkv.bias")?))?;
        let q = tape.narrow(&qkv, -1, 0, d)?;
        let k = tape.narrow(&qkv, -1, d, d)?;
        let v = tape.narrow(&qkv, -1, 2 * d, d)?;
        let (q, kt, v) = if h == 1 {
            let kt = tape.transpose(&k)?;
            (q, kt, v)
        } else {
            let split = |tape: &mut Tape, t: &Tensor, perm: &[usize]| -> Result<Tensor> {
                let t = tape.reshape(t, &[b, l, h, dh])?;
                tape.permute(&t, perm)
            };
            (split(tape, &q, &[0, 2, 1, 3])?, split(tape, &k, &[0, 2, 3, 1])?, split(tape, &v, &[0, 2, 1, 3])?)
        };
        let scores = tape.matmul(&q, &kt)?;
        let scores = tape.scale(&scores, 1.0 / (dh as f64).sqrt())?;
        let att = tape.softmax(&scores, -1)?;
        let mixed = tape.matmul(&att, &v)?;
        let (mixed, att) = if h == 1 {
            let att = tape.reshape(&att, &[b, 1, l, l])?;
            (mixed, att)
        } else {
            let m = tape.permute(&mixed, &[0, 2, 1, 3])?;
            (tape.reshape(&m, &[b, l, d])?, att)
        };
        let out = tape.linear(&mixed, self.block(layer, "attn.out.weight")?, Some(self.block(layer, "attn.out.bias")?))?;
        Ok((out, att))
    }

    fn mlp(&self, tape: &mut Tape, layer: usize, x: &Tensor) -> Result<Tensor> {
        let h = tape.linear(x, self.block(layer, "mlp.fc1.weight")?, Some(self.block(layer, "mlp.fc1.bias")?))?;
        let h = tape.gelu(&h)?;
        tape.linear(&h, self.block(layer, "mlp.fc2.weight")?, Some(self.block(layer, "mlp.fc2.bias")?))
    }

    /// Pre-norm encoder stack followed by the final layer norm.
    pub fn encode(&self, tape: &mut Tape, z: &Tensor) -> Result<Encoded> {
        if !z.is_finite() {
            return Err(Error::NonFinite("encoder input"));
        }
        let mut x = z.clone();
        let mut attention = Vec::with_capacity(self.config.layers);
        for i in 0..self.config.layers {
            let n = tape.layer_norm(&x, self.block(i, "ln1.weight")?, self.block(i, "ln1.bias")?)?;
            let (a, att) = self.attention(tape, i, &n)?;
            attention.push(att);
            x = tape.add(&x, &a)?;
            let n = tape.layer_norm(&x, self.block(i, "ln2.weight")?, self.block(i, "ln2.bias")?)?;
            let m = self.mlp(tape, i, &n)?;
            x = tape.add(&x, &m)?;
        }
        let hidden = tape.layer_norm(&x, self.get(names::NORM_WEIGHT)?, self.get(names::NORM_BIAS)?)?;
        Ok(Encoded { hidden, attention })
    }

    /// Logits `[B, C]` read from sequence slot 0 (CLS in vision, first token in text).
    pub fn classify(&self, tape: &mut Tape, hidden: &Tensor) -> Result<Tensor> {
        let (b, d) = (hidden.shape()[0], self.config.embed_dim);
        let first = tape.narrow(hidden, 1, 0, 1)?;
        let first = tape.reshape(&first, &[b, d])?;
        tape.linear(&first, self.get(names::HEAD_WEIGHT)?, Some(self.get(names::HEAD_BIAS)?))
    }

    /// Full forward pass to logits.
    pub fn forward(&self, tape: &mut Tape, input: ModelInput<'_>, masks: Option<&[Vec<bool>]>) -> Result<Tensor> {
        let feats = self.token_features(tape, input)?;
        let z = self.embed(tape, &feats, masks)?;
        let enc = self.encode(tape, &z)?;
        self.classify(tape, &enc.hidden)
    }
}

fn check_patch_dims(shape: &[usize], patch: usize) -> Result<(usize, usize, usize, usize)> {
    let r = shape.len();
    if !(3..=4).contains(&r) || patch == 0 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "expected an H×W×C image (optionally batched) and a positive patch size".into(),
        });
    }
    let (h, w, c) = (shape[r - 3], shape[r - 2], shape[r - 1]);
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("image sides are not divisible by patch size {patch}"),
        });
    }
    let b = if r == 4 { shape[0] } else { 1 };
    Ok((b, h, w, c))
}

/// `[.., H, W, C]` image to `[.., L, p·p·C]` patch rows in row-major grid order.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, h, w, c) = check_patch_dims(image.shape(), patch)?;
    let (gh, gw) = (h / patch, w / patch);
    let t = image.reshape(&[b, gh, patch, gw, patch, c])?.permute(&[0, 1, 3, 2, 4, 5])?;
    let out = t.reshape(&[b, gh * gw, patch * patch * c])?;
    if image.ndim() == 3 {
        out.reshape(&[gh * gw, patch * patch * c])
    } else {
        Ok(out)
    }
}

/// Differentiable [`patchify`] of a batched `[B, H, W, C]` image.
pub fn patchify_taped(tape: &mut Tape, image: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, h, w, c) = check_patch_dims(image.shape(), patch)?;
    if image.ndim() != 4 {
        return Err(Error::InvalidShape {
            shape: image.shape().to_vec(),
            reason: "taped patchify expects [B, H, W, C]".into(),
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    let t = tape.reshape(image, &[b, gh, patch, gw, patch, c])?;
    let t = tape.permute(&t, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(&t, &[b, gh * gw, patch * patch * c])
}

/// Inverse of [`patchify`] for an unbatched `[L, p·p·C]` patch matrix.
pub fn unpatchify(patches: &Tensor, patch: usize, height: usize, width: usize, channels: usize) -> Result<Tensor> {
    let (gh, gw) = (height / patch, width / patch);
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) || patches.shape() != [gh * gw, patch * patch * channels] {
        return Err(Error::InvalidShape {
            shape: patches.shape().to_vec(),
            reason: format!("cannot unpatchify into {height}×{width}×{channels} with patch {patch}"),
        });
    }
    patches
        .reshape(&[gh, gw, patch, patch, channels])?
        .permute(&[0, 2, 1, 3, 4])?
        .reshape(&[height, width, channels])
}
