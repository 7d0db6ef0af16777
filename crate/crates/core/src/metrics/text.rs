use std::collections::HashMap;

use super::{MetricReport, Modality};
use crate::error::{Error, Result};

/// Additive smoothing for BLEU's n-gram precisions.
pub const BLEU_EPS: f64 = 1e-9;

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if n == 0 || seq.len() < n {
        return m;
    }
    for g in seq.windows(n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

/// Size of the clipped (multiset) n-gram intersection, with the n-gram totals.
fn overlap(recovered: &[usize], truth: &[usize], n: usize) -> (usize, usize, usize) {
    let (r, t) = (ngram_counts(recovered, n), ngram_counts(truth, n));
    let hit = r.iter().map(|(g, &c)| c.min(t.get(g).copied().unwrap_or(0))).sum();
    (hit, recovered.len().saturating_sub(n - 1), truth.len().saturating_sub(n - 1))
}

fn f1(hit: usize, rec_total: usize, truth_total: usize) -> f64 {
    if hit == 0 {
        return 0.0;
    }
    let p = hit as f64 / rec_total as f64;
    let r = hit as f64 / truth_total as f64;
    2.0 * p * r / (p + r)
}

/// Multiset overlap divided by the truth length.
pub fn token_accuracy(recovered: &[usize], truth: &[usize]) -> f64 {
    let (hit, _, _) = overlap(recovered, truth, 1);
    hit as f64 / truth.len().max(1) as f64
}

/// ROUGE-n F1. When neither sequence has an n-gram the score is 1 for equal sequences, else 0.
pub fn rouge_n(recovered: &[usize], truth: &[usize], n: usize) -> f64 {
    let (hit, rt, tt) = overlap(recovered, truth, n);
    if rt == 0 && tt == 0 {
        return if recovered == truth { 1.0 } else { 0.0 };
    }
    f1(hit, rt, tt)
}

pub fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Longest-common-subsequence F1.
pub fn rouge_l(recovered: &[usize], truth: &[usize]) -> f64 {
    f1(lcs_len(recovered, truth), recovered.len(), truth.len())
}

/// Sentence BLEU: geometric mean of smoothed 1–4-gram precisions times the brevity penalty.
pub fn bleu(recovered: &[usize], truth: &[usize]) -> f64 {
    if recovered.is_empty() {
        return 0.0;
    }
    let log_p: f64 = (1..=4)
        .map(|n| {
            let (hit, rt, _) = overlap(recovered, truth, n);
            ((hit as f64 + BLEU_EPS) / (rt as f64 + BLEU_EPS)).ln()
        })
        .sum::<f64>()
        / 4.0;
    let (c, r) = (recovered.len() as f64, truth.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    (bp * log_p.exp()).clamp(0.0, 1.0)
}

pub fn text_metrics(recovered: &[usize], truth: &[usize]) -> Result<MetricReport> {
    if recovered.is_empty() || truth.is_empty() {
        return Err(Error::Empty("text metric sequence"));
    }
    let mut r = MetricReport::new(Modality::Text);
    r.set("token_ac", token_accuracy(recovered, truth));
    r.set("rouge1", rouge_n(recovered, truth, 1));
    r.set("rouge2", rouge_n(recovered, truth, 2));
    r.set("rougeL", rouge_l(recovered, truth));
    r.set("bleu", bleu(recovered, truth));
    Ok(r)
}
