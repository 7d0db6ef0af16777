//! Masked jigsaw puzzle: shuffle a fraction of the tokens and hide their positions.
//!
//! A [`ShuffleSpec`] selects exactly `round(γ·n)` content tokens per window,
//! permutes them uniformly among their own slots, and marks those slots so the
//! model adds the shared *unknown* position embedding there instead of the slot's
//! own row. Unselected tokens keep both their place and their embedding.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{Bound, InputBatch, Mode};
use crate::rng::RngKey;
use crate::tensor::Tensor;

/// Text n-gram window.
pub const DEFAULT_WINDOW: usize = 32;
pub const DEFAULT_VISION_GAMMA: f64 = 0.03;
pub const DEFAULT_TEXT_GAMMA: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShuffleMode {
    #[default]
    Tokenwise,
    /// 2×2 patch blocks on the vision grid move as units.
    Blockwise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShuffleSpec {
    pub gamma: f64,
    /// Non-overlapping window length; `None` shuffles across the whole sequence.
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default)]
    pub mode: ShuffleMode,
    #[serde(default)]
    pub seed: u64,
}

impl ShuffleSpec {
    pub fn tokenwise(gamma: f64, seed: u64) -> Self {
        ShuffleSpec {
            gamma,
            window: None,
            mode: ShuffleMode::Tokenwise,
            seed,
        }
    }

    pub fn text_default(seed: u64) -> Self {
        ShuffleSpec {
            window: Some(DEFAULT_WINDOW),
            ..Self::tokenwise(DEFAULT_TEXT_GAMMA, seed)
        }
    }

    pub fn vision_default(seed: u64) -> Self {
        Self::tokenwise(DEFAULT_VISION_GAMMA, seed)
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = Some(window);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("shuffle gamma {} is outside [0, 1]", self.gamma)));
        }
        if matches!(self.window, Some(w) if w < 2) {
            return Err(Error::Config("shuffle window must be at least 2".into()));
        }
        if self.mode == ShuffleMode::Blockwise && self.window.is_some() {
            return Err(Error::Config("blockwise shuffling does not take a window".into()));
        }
        Ok(())
    }

    /// Stream for one training step; sequences fold in their batch index.
    pub fn step_key(&self, step: u64) -> RngKey {
        RngKey::new(self.seed).fold_str("shuffle").fold(step)
    }

    /// `round(γ·len)` with ties to even.
    pub fn count(&self, len: usize) -> usize {
        selection_count(self.gamma, len)
    }
}

pub fn selection_count(gamma: f64, len: usize) -> usize {
    ((gamma * len as f64).round_ties_even() as usize).min(len)
}

/// `[start, end)` ranges of the non-overlapping windows covering `len` tokens.
pub fn windows(len: usize, window: Option<usize>) -> impl Iterator<Item = (usize, usize)> {
    let w = window.unwrap_or(len).max(1);
    (0..len).step_by(w).map(move |s| (s, (s + w).min(len)))
}

/// Exactly `round(γ·n)` marked positions per window, uniform without replacement.
pub fn tokenwise_mask(len: usize, gamma: f64, window: Option<usize>, rng: &mut impl Rng) -> Vec<bool> {
    let mut mask = vec![false; len];
    for (s, e) in windows(len, window) {
        let k = selection_count(gamma, e - s);
        for i in sample(rng, e - s, k) {
            mask[s + i] = true;
        }
    }
    mask
}

/// A shuffled sequence. `perm[i]` is the original index of the token now at `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shuffled<T> {
    pub tokens: Vec<T>,
    pub mask: Vec<bool>,
    pub perm: Vec<usize>,
}

impl<T: Clone> Shuffled<T> {
    /// Original order, recovered through the inverse permutation.
    pub fn unshuffle(&self) -> Vec<T> {
        let mut out = self.tokens.clone();
        for (i, &src) in self.perm.iter().enumerate() {
            out[src] = self.tokens[i].clone();
        }
        out
    }
}

fn apply_perm<T: Clone>(tokens: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&p| tokens[p].clone()).collect()
}

/// Uniform permutation (identity included) of the marked tokens among their own
/// slots, independently inside each window.
pub fn jigsaw_puzzle<T: Clone>(tokens: &[T], mask: &[bool], window: Option<usize>, rng: &mut impl Rng) -> Result<Shuffled<T>> {
    if mask.len() != tokens.len() {
        return Err(Error::LengthMismatch {
            expected: tokens.len(),
            actual: mask.len(),
            context: "jigsaw mask",
        });
    }
    let mut perm: Vec<usize> = (0..tokens.len()).collect();
    for (s, e) in windows(tokens.len(), window) {
        let slots: Vec<usize> = (s..e).filter(|&i| mask[i]).collect();
        let mut sources = slots.clone();
        sources.shuffle(rng);
        for (&dst, &src) in slots.iter().zip(&sources) {
            perm[dst] = src;
        }
    }
    Ok(Shuffled {
        tokens: apply_perm(tokens, &perm),
        mask: mask.to_vec(),
        perm,
    })
}

/// Mask then jigsaw one sequence, per `spec` (windows honoured, tokenwise mode).
pub fn shuffle_sequence<T: Clone>(tokens: &[T], spec: &ShuffleSpec, rng: &mut impl Rng) -> Result<Shuffled<T>> {
    spec.validate()?;
    let mask = tokenwise_mask(tokens.len(), spec.gamma, spec.window, rng);
    jigsaw_puzzle(tokens, &mask, spec.window, rng)
}

/// Windowed shuffle: the sequence is cut into non-overlapping `window`-grams and
/// each is shuffled on its own, so no token leaves its window.
pub fn ngram_shuffle<T: Clone>(tokens: &[T], spec: &ShuffleSpec, rng: &mut impl Rng) -> Result<Shuffled<T>> {
    if spec.window.is_none() {
        return Err(Error::Config("n-gram shuffling needs a window".into()));
    }
    shuffle_sequence(tokens, spec, rng)
}

/// Shuffle 2×2 blocks of a `side × side` row-major grid. Whole blocks are
/// selected and permuted; a token keeps its offset inside its block.
pub fn blockwise_shuffle<T: Clone>(tokens: &[T], side: usize, gamma: f64, rng: &mut impl Rng) -> Result<Shuffled<T>> {
    if side * side != tokens.len() || !side.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "blockwise shuffling needs an even square grid, got {} tokens",
            tokens.len()
        )));
    }
    let per_row = side / 2;
    let n_blocks = per_row * per_row;
    let chosen: Vec<usize> = {
        let mut c: Vec<usize> = sample(rng, n_blocks, selection_count(gamma, n_blocks)).into_vec();
        c.sort_unstable();
        c
    };
    let mut sources = chosen.clone();
    sources.shuffle(rng);
    let cell = |block: usize, dy: usize, dx: usize| (2 * (block / per_row) + dy) * side + 2 * (block % per_row) + dx;
    let mut perm: Vec<usize> = (0..tokens.len()).collect();
    let mut mask = vec![false; tokens.len()];
    for (&dst, &src) in chosen.iter().zip(&sources) {
        for dy in 0..2 {
            for dx in 0..2 {
                perm[cell(dst, dy, dx)] = cell(src, dy, dx);
                mask[cell(dst, dy, dx)] = true;
            }
        }
    }
    Ok(Shuffled {
        tokens: apply_perm(tokens, &perm),
        mask,
        perm,
    })
}

/// Per-sequence shuffles for a batch; sequence `b` draws from `stream.fold(b)`,
/// so its shuffle does not depend on the rest of the batch.
pub fn shuffle_tokens<T: Clone>(
    batch: &[Vec<T>],
    spec: &ShuffleSpec,
    grid_side: Option<usize>,
    stream: RngKey,
) -> Result<Vec<Shuffled<T>>> {
    spec.validate()?;
    batch
        .iter()
        .enumerate()
        .map(|(b, seq)| {
            let mut rng = stream.fold(b as u64).rng();
            match spec.mode {
                ShuffleMode::Tokenwise => shuffle_sequence(seq, spec, &mut rng),
                ShuffleMode::Blockwise => {
                    let side = grid_side.ok_or_else(|| Error::Config("blockwise shuffling needs a vision grid".into()))?;
                    blockwise_shuffle(seq, side, spec.gamma, &mut rng)
                }
            }
        })
        .collect()
}

/// A shuffled client batch with its private masks and permutations.
#[derive(Clone, Debug, PartialEq)]
pub struct ShuffledBatch {
    pub input: InputBatch,
    pub masks: Vec<Vec<bool>>,
    pub perms: Vec<Vec<usize>>,
}

/// Apply `spec` to every sequence of `input` (token ids or patch rows).
pub fn shuffle_batch(input: &InputBatch, spec: &ShuffleSpec, grid_side: Option<usize>, stream: RngKey) -> Result<ShuffledBatch> {
    let (b, l) = (input.batch_size(), input.seq_len());
    let index_rows: Vec<Vec<usize>> = vec![(0..l).collect(); b];
    let shuffled = shuffle_tokens(&index_rows, spec, grid_side, stream)?;
    let perms: Vec<Vec<usize>> = shuffled.iter().map(|s| s.perm.clone()).collect();
    let masks: Vec<Vec<bool>> = shuffled.into_iter().map(|s| s.mask).collect();
    let out = match input {
        InputBatch::Tokens(seqs) => InputBatch::Tokens(seqs.iter().zip(&perms).map(|(s, p)| apply_perm(s, p)).collect()),
        InputBatch::Patches(p) => {
            let width = p.shape()[2];
            let ids: Vec<usize> = perms.iter().enumerate().flat_map(|(bi, pm)| pm.iter().map(move |&j| bi * l + j)).collect();
            let rows = p.reshape(&[b * l, width])?.gather_rows(&ids)?;
            InputBatch::Patches(rows.reshape(&[b, l, width])?)
        }
    };
    Ok(ShuffledBatch { input: out, masks, perms })
}

/// Position rows `[B, L', D]` with marked content slots replaced by `unk`.
///
/// `offset` leading rows (the vision CLS slot) are never replaced. Gradients to
/// `unk` accumulate over every replaced row.
pub fn masked_position_rows(tape: &mut Tape, pos: &Tensor, unk: &Tensor, masks: &[Vec<bool>], offset: usize) -> Result<Tensor> {
    let (rows, d) = (pos.shape()[0], pos.shape()[1]);
    let mut ids = Vec::with_capacity(masks.len() * rows);
    for m in masks {
        if m.len() + offset != rows {
            return Err(Error::LengthMismatch {
                expected: rows - offset,
                actual: m.len(),
                context: "position mask",
            });
        }
        ids.extend(0..offset);
        ids.extend(m.iter().enumerate().map(|(l, &hit)| if hit { rows } else { l + offset }));
    }
    let table = tape.concat(&[pos, unk], 0)?;
    let gathered = tape.gather_shared(&table, Arc::new(ids))?;
    tape.reshape(&gathered, &[masks.len(), rows, d])
}

/// Untaped single-sequence form of [`masked_position_rows`]: `[L', D]`.
pub fn mjp_position_embeddings(pos: &Tensor, unk: &Tensor, mask: &[bool], offset: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let rows = masked_position_rows(&mut tape, pos, unk, std::slice::from_ref(&mask.to_vec()), offset)?;
    rows.detach().reshape(pos.shape())
}

/// MJP input layer: shuffle the batch, project the shuffled tokens and add the
/// masked position embeddings. Returns the encoder input and the shuffle record.
pub fn mjp_input_layer(tape: &mut Tape, model: &Bound, input: &InputBatch, spec: &ShuffleSpec, stream: RngKey) -> Result<(Tensor, ShuffledBatch)> {
    let grid = (model.config.mode == Mode::Vision).then_some(model.config.grid_side);
    let shuffled = shuffle_batch(input, spec, grid, stream)?;
    let feats = model.token_features(tape, shuffled.input.as_input())?;
    let z = model.embed(tape, &feats, Some(&shuffled.masks))?;
    Ok((z, shuffled))
}
