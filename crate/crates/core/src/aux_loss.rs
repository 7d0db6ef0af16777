//! Position-localization auxiliary losses on the position table.
//!
//! A linear regressor maps each position embedding back to its normalized
//! coordinate: `(row, col) / (K - 1)` on the vision grid, `l / (L - 1)` in text.
//! DAL penalizes the absolute ℓ₁ error, DRL the error of pairwise differences.
//! Only unshuffled positions contribute; shuffled slots see the unknown
//! embedding, not their own row.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{names, Bound, Mode, ModelConfig};
use crate::tensor::Tensor;

pub const DEFAULT_LAMBDA: f64 = 0.01;
/// Above this many positions DRL samples pairs instead of enumerating them.
pub const DRL_ALL_PAIRS_MAX_LEN: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxKind {
    #[default]
    None,
    Dal,
    Drl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxConfig {
    #[serde(default)]
    pub kind: AuxKind,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Stop localization gradients at the position table; only the regressor learns.
    #[serde(default)]
    pub dal_detach_pe: bool,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig {
            kind: AuxKind::None,
            lambda: DEFAULT_LAMBDA,
            dal_detach_pe: false,
        }
    }
}

impl AuxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("aux lambda must be finite and nonnegative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Normalized target coordinates `[L, dims]` for the content positions.
pub fn target_coords(cfg: &ModelConfig) -> Result<Tensor> {
    let norm = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    match cfg.mode {
        Mode::Vision => {
            let k = cfg.grid_side;
            if k * k != cfg.seq_len {
                return Err(Error::Config(format!("vision localization needs a square grid, got L = {}", cfg.seq_len)));
            }
            let mut data = Vec::with_capacity(2 * cfg.seq_len);
            for r in 0..cfg.seq_len {
                data.push(norm(r / k, k));
                data.push(norm(r % k, k));
            }
            Tensor::new(vec![cfg.seq_len, 2], data)
        }
        Mode::Text => Ok(Tensor::from_fn(&[cfg.seq_len, 1], |l| norm(l, cfg.seq_len))),
    }
}

/// Regressor residuals `g(pe_l) - coord_l`, `[L, dims]`, for content rows only.
fn residuals(tape: &mut Tape, pos: &Tensor, weight: &Tensor, bias: &Tensor, cfg: &ModelConfig, detach_pe: bool) -> Result<Tensor> {
    if pos.shape() != [cfg.pe_rows(), cfg.embed_dim] {
        return Err(Error::ShapeMismatch {
            left: pos.shape().to_vec(),
            right: vec![cfg.pe_rows(), cfg.embed_dim],
            context: "position table",
        });
    }
    let coords = target_coords(cfg)?;
    let pos = if detach_pe { tape.constant(&pos.detach()) } else { pos.clone() };
    let content = tape.narrow(&pos, 0, cfg.cls_offset(), cfg.seq_len)?;
    let pred = tape.linear(&content, weight, Some(bias))?;
    tape.sub(&pred, &coords)
}

fn check_masks(masks: &[Vec<bool>], len: usize) -> Result<()> {
    if masks.is_empty() {
        return Err(Error::Empty("localization masks"));
    }
    match masks.iter().find(|m| m.len() != len) {
        Some(m) => Err(Error::LengthMismatch {
            expected: len,
            actual: m.len(),
            context: "localization mask",
        }),
        None => Ok(()),
    }
}

/// DAL: mean over unshuffled positions of `‖g(pe_l) - coord_l‖₁`, averaged over
/// the masks of a batch. A fully shuffled sequence contributes 0.
pub fn dal_loss(tape: &mut Tape, pos: &Tensor, weight: &Tensor, bias: &Tensor, masks: &[Vec<bool>], cfg: &ModelConfig, detach_pe: bool) -> Result<Tensor> {
    check_masks(masks, cfg.seq_len)?;
    let mut w = vec![0.0; cfg.seq_len];
    for m in masks {
        let kept = m.iter().filter(|&&x| !x).count();
        if kept == 0 {
            continue;
        }
        let share = 1.0 / (kept as f64 * masks.len() as f64);
        for (wl, &hit) in w.iter_mut().zip(m) {
            if !hit {
                *wl += share;
            }
        }
    }
    if w.iter().all(|&v| v == 0.0) {
        return Ok(tape.constant(&Tensor::scalar(0.0)));
    }
    let r = residuals(tape, pos, weight, bias, cfg, detach_pe)?;
    let a = tape.abs(&r)?;
    let weights = Tensor::new(vec![cfg.seq_len, 1], w)?;
    let weighted = tape.mul(&a, &weights)?;
    tape.sum_all(&weighted)
}

/// Unshuffled position pairs for DRL: every pair up to [`DRL_ALL_PAIRS_MAX_LEN`]
/// positions, otherwise `4·L` pairs drawn uniformly.
pub fn drl_pairs(mask: &[bool], rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let kept: Vec<usize> = (0..mask.len()).filter(|&i| !mask[i]).collect();
    if kept.len() < 2 {
        return Vec::new();
    }
    if mask.len() <= DRL_ALL_PAIRS_MAX_LEN {
        let mut out = Vec::with_capacity(kept.len() * (kept.len() - 1) / 2);
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                out.push((a, b));
            }
        }
        return out;
    }
    (0..4 * mask.len())
        .map(|_| {
            let i = rng.random_range(0..kept.len());
            let mut j = rng.random_range(0..kept.len() - 1);
            if j >= i {
                j += 1;
            }
            (kept[i], kept[j])
        })
        .collect()
}

/// DRL: mean over unshuffled pairs of `‖(g(pe_a) - g(pe_b)) - (coord_a - coord_b)‖₁`.
/// Sequences with fewer than two unshuffled positions contribute 0.
#[allow(clippy::too_many_arguments)]
pub fn drl_loss(
    tape: &mut Tape,
    pos: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    masks: &[Vec<bool>],
    cfg: &ModelConfig,
    detach_pe: bool,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    check_masks(masks, cfg.seq_len)?;
    let (mut left, mut right, mut w) = (Vec::new(), Vec::new(), Vec::new());
    for m in masks {
        let pairs = drl_pairs(m, rng);
        if pairs.is_empty() {
            continue;
        }
        let share = 1.0 / (pairs.len() as f64 * masks.len() as f64);
        for (a, b) in pairs {
            left.push(a);
            right.push(b);
            w.push(share);
        }
    }
    if w.is_empty() {
        return Ok(tape.constant(&Tensor::scalar(0.0)));
    }
    let n = w.len();
    let r = residuals(tape, pos, weight, bias, cfg, detach_pe)?;
    let ra = tape.gather_shared(&r, Arc::new(left))?;
    let rb = tape.gather_shared(&r, Arc::new(right))?;
    let diff = tape.sub(&ra, &rb)?;
    let a = tape.abs(&diff)?;
    let weighted = tape.mul(&a, &Tensor::new(vec![n, 1], w)?)?;
    tape.sum_all(&weighted)
}

/// `ce + λ·aux`; exactly `ce` when `λ = 0`.
pub fn total_loss(tape: &mut Tape, ce: &Tensor, aux: &Tensor, lambda: f64) -> Result<Tensor> {
    if ce.numel() != 1 || aux.numel() != 1 {
        return Err(Error::NonScalarLoss(if ce.numel() != 1 { ce.shape() } else { aux.shape() }.to_vec()));
    }
    if lambda == 0.0 {
        return Ok(ce.clone());
    }
    let weighted = tape.scale(aux, lambda)?;
    tape.add(ce, &weighted)
}

/// The configured auxiliary loss for a bound model, or `None` when disabled.
pub fn model_aux_loss(tape: &mut Tape, model: &Bound, masks: &[Vec<bool>], aux: &AuxConfig, rng: &mut impl Rng) -> Result<Option<Tensor>> {
    if aux.kind == AuxKind::None {
        return Ok(None);
    }
    let cfg = model.config.clone();
    let pos = model.get(names::POS)?.clone();
    let (w, b) = (model.get(names::LOC_WEIGHT)?.clone(), model.get(names::LOC_BIAS)?.clone());
    let loss = match aux.kind {
        AuxKind::Dal => dal_loss(tape, &pos, &w, &b, masks, &cfg, aux.dal_detach_pe)?,
        AuxKind::Drl => drl_loss(tape, &pos, &w, &b, masks, &cfg, aux.dal_detach_pe, rng)?,
        AuxKind::None => unreachable!(),
    };
    Ok(Some(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, RngKey};
    use proptest::prelude::*;
    use rand::Rng;

    fn vision(k: usize, d: usize) -> ModelConfig {
        ModelConfig::vision(k, 4, d, 1, 1, 2)
    }

    /// Regressor that reads coordinates straight out of the first PE columns.
    fn exact_setup(cfg: &ModelConfig, offset: f64) -> (Tensor, Tensor, Tensor) {
        let coords = target_coords(cfg).unwrap();
        let dims = cfg.coord_dims();
        let d = cfg.embed_dim;
        let pos = Tensor::from_fn(&[cfg.pe_rows(), d], |i| {
            let (r, c) = (i / d, i % d);
            if r >= cfg.cls_offset() && c < dims {
                coords.at(&[r - cfg.cls_offset(), c])
            } else {
                0.37
            }
        });
        let w = Tensor::from_fn(&[d, dims], |i| if i / dims == i % dims { 1.0 } else { 0.0 });
        (pos, w, Tensor::full(&[dims], offset))
    }

    #[test]
    fn coords_are_row_major_and_normalized() {
        let c = target_coords(&vision(3, 4)).unwrap();
        assert_eq!(c.row(1), &[0.0, 0.5]);
        assert_eq!(c.row(3), &[0.5, 0.0]);
        assert_eq!(c.row(8), &[1.0, 1.0]);
        let t = target_coords(&ModelConfig::text(5, 5, 4, 1, 1, 2)).unwrap();
        assert_eq!(t.data(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn dal_is_zero_for_an_exact_inverse() {
        let cfg = vision(3, 4);
        let (pos, w, b) = exact_setup(&cfg, 0.0);
        let mut tape = Tape::new();
        let l = dal_loss(&mut tape, &pos, &w, &b, &[vec![false; 9]], &cfg, false).unwrap();
        assert!(l.item().unwrap().abs() < 1e-15);
    }

    #[test]
    fn dal_with_zero_regressor_on_two_by_two_grid_is_one() {
        let cfg = vision(2, 3);
        let mut rng = RngKey::new(0).rng();
        let pos = normal_tensor(&[5, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let l = dal_loss(&mut tape, &pos, &Tensor::zeros(&[3, 2]), &Tensor::zeros(&[2]), &[vec![false; 4]], &cfg, false).unwrap();
        assert!((l.item().unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fully_masked_dal_and_short_drl_are_zero() {
        let cfg = vision(2, 3);
        let pos = Tensor::ones(&[5, 3]);
        let (w, b) = (Tensor::ones(&[3, 2]), Tensor::ones(&[2]));
        let mut tape = Tape::new();
        assert_eq!(dal_loss(&mut tape, &pos, &w, &b, &[vec![true; 4]], &cfg, false).unwrap().item().unwrap(), 0.0);
        let one_left = vec![true, true, false, true];
        let mut rng = RngKey::new(0).rng();
        assert_eq!(drl_loss(&mut tape, &pos, &w, &b, &[one_left], &cfg, false, &mut rng).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn drl_ignores_constant_offsets() {
        let cfg = ModelConfig::text(4, 6, 3, 1, 1, 2);
        let (pos, w, b) = exact_setup(&cfg, 0.8);
        let mut tape = Tape::new();
        let mut rng = RngKey::new(0).rng();
        let l = drl_loss(&mut tape, &pos, &w, &b, &[vec![false; 6]], &cfg, false, &mut rng).unwrap();
        assert!(l.item().unwrap().abs() < 1e-15);
        let d = dal_loss(&mut tape, &pos, &w, &b, &[vec![false; 6]], &cfg, false).unwrap();
        assert!((d.item().unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn drl_matches_all_pairs_brute_force() {
        let cfg = ModelConfig::text(4, 3, 5, 1, 1, 2);
        let mut rng = RngKey::new(21).rng();
        let pos = normal_tensor(&[3, 5], 1.0, &mut rng);
        let w = normal_tensor(&[5, 1], 1.0, &mut rng);
        let b = normal_tensor(&[1], 1.0, &mut rng);
        let mut tape = Tape::new();
        let got = drl_loss(&mut tape, &pos, &w, &b, &[vec![false; 3]], &cfg, false, &mut rng).unwrap().item().unwrap();
        let g: Vec<f64> = (0..3).map(|l| (0..5).map(|j| pos.at(&[l, j]) * w.at(&[j, 0])).sum::<f64>() + b.at(&[0])).collect();
        let c = [0.0, 0.5, 1.0];
        let pairs = [(0, 1), (0, 2), (1, 2)];
        let expect = pairs.iter().map(|&(a, b)| ((g[a] - g[b]) - (c[a] - c[b])).abs()).sum::<f64>() / 3.0;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn sampled_pairs_above_cutoff() {
        let mask = vec![false; 80];
        let pairs = drl_pairs(&mask, &mut RngKey::new(1).rng());
        assert_eq!(pairs.len(), 320);
        assert!(pairs.iter().all(|(a, b)| a != b));
        assert_eq!(drl_pairs(&[false; 5], &mut RngKey::new(1).rng()).len(), 10);
    }

    #[test]
    fn masked_rows_get_no_dal_gradient_and_detach_blocks_pe() {
        let cfg = vision(2, 3);
        let mut rng = RngKey::new(2).rng();
        for detach in [false, true] {
            let mut tape = Tape::new();
            let pos = tape.param("pos", &normal_tensor(&[5, 3], 1.0, &mut rng));
            let w = tape.param("w", &normal_tensor(&[3, 2], 1.0, &mut rng));
            let b = tape.param("b", &Tensor::zeros(&[2]));
            let mask = vec![false, true, false, true];
            let l = dal_loss(&mut tape, &pos, &w, &b, &[mask], &cfg, detach).unwrap();
            let g = tape.backward(&l).unwrap();
            let gp = g.get("pos").unwrap();
            assert!(gp.row(0).iter().all(|&v| v == 0.0), "CLS row");
            assert!(gp.row(2).iter().all(|&v| v == 0.0));
            assert!(gp.row(4).iter().all(|&v| v == 0.0));
            assert_eq!(gp.row(1).iter().all(|&v| v == 0.0), detach);
            assert!(g.get("w").unwrap().data().iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::new();
        let ce = Tensor::scalar(1.0);
        let aux = Tensor::scalar(2.0);
        assert_eq!(total_loss(&mut tape, &ce, &aux, 0.0).unwrap().item().unwrap(), 1.0);
        assert!((total_loss(&mut tape, &ce, &aux, 0.01).unwrap().item().unwrap() - 1.02).abs() < 1e-15);
        assert!(total_loss(&mut tape, &Tensor::zeros(&[2]), &aux, 0.1).is_err());
    }

    proptest! {
        #[test]
        fn dal_nonnegative_and_drl_offset_invariant(seed in any::<u64>(), shift in -3.0f64..3.0) {
            let cfg = vision(3, 4);
            let mut rng = RngKey::new(seed).rng();
            let pos = normal_tensor(&[10, 4], 1.0, &mut rng);
            let w = normal_tensor(&[4, 2], 1.0, &mut rng);
            let b = normal_tensor(&[2], 1.0, &mut rng);
            let mask: Vec<bool> = (0..9).map(|_| rng.random_bool(0.3)).collect();
            let mut tape = Tape::new();
            let dal = dal_loss(&mut tape, &pos, &w, &b, std::slice::from_ref(&mask), &cfg, false).unwrap().item().unwrap();
            prop_assert!(dal >= 0.0);
            let shifted = b.map(|v| v + shift);
            let mut r1 = RngKey::new(seed).rng();
            let mut r2 = RngKey::new(seed).rng();
            let a = drl_loss(&mut tape, &pos, &w, &b, std::slice::from_ref(&mask), &cfg, false, &mut r1).unwrap().item().unwrap();
            let c = drl_loss(&mut tape, &pos, &w, &shifted, &[mask], &cfg, false, &mut r2).unwrap().item().unwrap();
            prop_assert!((a - c).abs() < 1e-12);
        }
    }
}
