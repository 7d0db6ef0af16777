//! Seeded synthetic tasks.
//!
//! Text ("sentiment"): 16 tokens over a 128-word vocabulary. Each sample holds
//! three words from its label's sentiment set and one from the other set,
//! among random fillers. Label words are sometimes preceded by an intensifier,
//! planting bigram cues that agree with the bag of words.
//!
//! Vision ("orientation"): 16×16 grayscale square-wave patterns with random
//! period, phase and contrast plus Gaussian noise. Classes: horizontal stripes,
//! vertical stripes, diagonal stripes, checkerboard.

use mjp_core::{RngKey, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::DataConfig;
use crate::data::{load_images, load_text, Dataset, Splits};
use crate::error::LabResult;

pub const TEXT_VOCAB: usize = 128;
pub const TEXT_LEN: usize = 16;
pub const POSITIVE: std::ops::Range<usize> = 1..9;
pub const NEGATIVE: std::ops::Range<usize> = 9..17;
pub const INTENSIFIER: std::ops::Range<usize> = 17..19;
pub const FILLER: std::ops::Range<usize> = 19..TEXT_VOCAB;

pub const IMAGE_SIDE: usize = 16;
pub const IMAGE_CLASSES: usize = 4;

/// One sentiment sample for `label` (0 negative, 1 positive).
fn text_sample(label: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut s: Vec<usize> = (0..TEXT_LEN).map(|_| rng.random_range(FILLER)).collect();
    let (own, other) = if label == 1 { (POSITIVE, NEGATIVE) } else { (NEGATIVE, POSITIVE) };
    // Even slots host cue words so an intensifier always fits in front.
    let mut slots: Vec<usize> = (1..TEXT_LEN).step_by(2).collect();
    slots.shuffle(rng);
    for &i in &slots[..3] {
        s[i] = rng.random_range(own.clone());
        if rng.random_bool(0.5) {
            s[i - 1] = rng.random_range(INTENSIFIER);
        }
    }
    s[slots[3]] = rng.random_range(other);
    s
}

pub fn synthetic_text(n: usize, key: RngKey) -> Dataset {
    let mut rng = key.rng();
    let (mut tokens, mut labels) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let label = rng.random_range(0..2);
        tokens.push(text_sample(label, &mut rng));
        labels.push(label);
    }
    Dataset::text(tokens, labels)
}

fn pattern(class: usize, i: usize, j: usize, period: f64, phase: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let wave = |t: f64| if (tau * t / period + phase).sin() >= 0.0 { 1.0 } else { -1.0 };
    let (y, x) = (i as f64, j as f64);
    match class {
        0 => wave(y),
        1 => wave(x),
        2 => wave((x + y) / std::f64::consts::SQRT_2),
        _ => wave(y) * wave(x),
    }
}

/// `[IMAGE_SIDE, IMAGE_SIDE, 1]` pattern image for `class`, values in `[0, 1]`.
pub fn orientation_image(class: usize, rng: &mut impl Rng) -> Tensor {
    let period = [2.0, 3.0, 4.0][rng.random_range(0..3)];
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let contrast = rng.random_range(0.3..0.5);
    Tensor::from_fn(&[IMAGE_SIDE, IMAGE_SIDE, 1], |k| {
        let (i, j) = (k / IMAGE_SIDE, k % IMAGE_SIDE);
        let noise: f64 = StandardNormal.sample(rng);
        (0.5 + contrast * pattern(class, i, j, period, phase) + 0.05 * noise).clamp(0.0, 1.0)
    })
}

pub fn synthetic_vision(n: usize, patch: usize, key: RngKey) -> LabResult<Dataset> {
    let mut rng = key.rng();
    let (mut pixels, mut labels) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let label = rng.random_range(0..IMAGE_CLASSES);
        pixels.push(orientation_image(label, &mut rng));
        labels.push(label);
    }
    Dataset::images(pixels, labels, patch)
}

/// Build or load the splits named by `data`; synthetic splits derive from `seed`.
pub fn load_splits(data: &DataConfig, seed: u64) -> LabResult<Splits> {
    let key = RngKey::new(seed).fold_str("data");
    Ok(match data {
        DataConfig::SyntheticText { train, val } => Splits {
            train: synthetic_text(*train, key.fold_str("train")),
            val: synthetic_text(*val, key.fold_str("val")),
        },
        DataConfig::SyntheticVision { train, val, patch } => Splits {
            train: synthetic_vision(*train, *patch, key.fold_str("train"))?,
            val: synthetic_vision(*val, *patch, key.fold_str("val"))?,
        },
        DataConfig::Text { train, val } => Splits {
            train: load_text(train)?,
            val: load_text(val)?,
        },
        DataConfig::Images { train, val, patch } => Splits {
            train: load_images(train, *patch)?,
            val: load_images(val, *patch)?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Inputs;

    /// Full-batch softmax regression on standardized features; returns held-out accuracy.
    fn logistic_accuracy(train: &[Vec<f64>], ytr: &[usize], test: &[Vec<f64>], yte: &[usize], classes: usize) -> f64 {
        let d = train[0].len();
        let n = train.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|x| x[j]).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..d)
            .map(|j| (train.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-9))
            .collect();
        let norm = |x: &Vec<f64>| -> Vec<f64> { (0..d).map(|j| (x[j] - mean[j]) / std[j]).collect() };
        let (xtr, xte): (Vec<_>, Vec<_>) = (train.iter().map(norm).collect(), test.iter().map(norm).collect());
        let mut w = vec![vec![0.0; d + 1]; classes];
        let scores = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> { w.iter().map(|wc| wc[d] + x.iter().zip(wc).map(|(a, b)| a * b).sum::<f64>()).collect() };
        for _ in 0..300 {
            let mut g = vec![vec![0.0; d + 1]; classes];
            for (x, &y) in xtr.iter().zip(ytr) {
                let s = scores(&w, x);
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                for c in 0..classes {
                    let p = (s[c] - m).exp() / z - if c == y { 1.0 } else { 0.0 };
                    for j in 0..d {
                        g[c][j] += p * x[j];
                    }
                    g[c][d] += p;
                }
            }
            for c in 0..classes {
                for j in 0..=d {
                    w[c][j] -= 0.5 * (g[c][j] / n + 1e-3 * if j < d { w[c][j] } else { 0.0 });
                }
            }
        }
        let hits = xte
            .iter()
            .zip(yte)
            .filter(|(x, &y)| {
                let s = scores(&w, x);
                (0..classes).fold(0, |b, c| if s[c] > s[b] { c } else { b }) == y
            })
            .count();
        hits as f64 / yte.len() as f64
    }

    /// Unigram counts over the cue vocabulary.
    fn text_features(s: &[usize]) -> Vec<f64> {
        let mut f = vec![0.0; FILLER.start];
        for &t in s {
            if t < FILLER.start {
                f[t] += 1.0;
            }
        }
        f
    }

    /// 2-D DFT power spectrum (phase-invariant orientation features).
    fn spectrum(img: &Tensor) -> Vec<f64> {
        let n = IMAGE_SIDE;
        let tau = std::f64::consts::TAU;
        let mut out = Vec::with_capacity(n * n);
        for u in 0..n {
            for v in 0..n {
                let (mut re, mut im) = (0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let a = -tau * ((u * i + v * j) as f64) / n as f64;
                        re += img.data()[i * n + j] * a.cos();
                        im += img.data()[i * n + j] * a.sin();
                    }
                }
                out.push((re * re + im * im).sqrt());
            }
        }
        out
    }

    #[test]
    fn generators_are_seeded() {
        assert_eq!(synthetic_text(50, RngKey::new(1)), synthetic_text(50, RngKey::new(1)));
        assert_ne!(synthetic_text(50, RngKey::new(1)), synthetic_text(50, RngKey::new(2)));
        assert_eq!(synthetic_vision(5, 2, RngKey::new(1)).unwrap(), synthetic_vision(5, 2, RngKey::new(1)).unwrap());
    }

    #[test]
    fn sentiment_words_follow_the_label() {
        let mut rng = RngKey::new(4).rng();
        for label in [0, 1] {
            for _ in 0..200 {
                let s = text_sample(label, &mut rng);
                let pos = s.iter().filter(|t| POSITIVE.contains(t)).count();
                let neg = s.iter().filter(|t| NEGATIVE.contains(t)).count();
                assert_eq!(if label == 1 { (pos, neg) } else { (neg, pos) }, (3, 1));
                assert!(s.iter().all(|&t| t < TEXT_VOCAB));
            }
        }
    }

    #[test]
    fn text_task_is_separable_by_a_logistic_baseline() {
        let feats = |ds: &Dataset| match &ds.inputs {
            Inputs::Tokens(t) => t.iter().map(|s| text_features(s)).collect::<Vec<_>>(),
            _ => unreachable!(),
        };
        let (tr, te) = (synthetic_text(1024, RngKey::new(10)), synthetic_text(512, RngKey::new(11)));
        let acc = logistic_accuracy(&feats(&tr), &tr.labels, &feats(&te), &te.labels, 2);
        assert!(acc > 0.9, "logistic accuracy {acc}");
    }

    #[test]
    fn vision_task_is_separable_by_a_logistic_baseline() {
        let feats = |ds: &Dataset| match &ds.inputs {
            Inputs::Images { pixels, .. } => pixels.iter().map(spectrum).collect::<Vec<_>>(),
            _ => unreachable!(),
        };
        let (tr, te) = (synthetic_vision(400, 2, RngKey::new(12)).unwrap(), synthetic_vision(200, 2, RngKey::new(13)).unwrap());
        let acc = logistic_accuracy(&feats(&tr), &tr.labels, &feats(&te), &te.labels, IMAGE_CLASSES);
        assert!(acc > 0.9, "logistic accuracy {acc}");
    }
}
