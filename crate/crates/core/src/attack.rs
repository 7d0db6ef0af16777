//! Gradient-inversion attacks on a single client update.
//!
//! A client computes one gradient snapshot on its private sample (optionally
//! through the MJP input layer). The adversary knows the model parameters and
//! the label but not the client's shuffle, and optimizes a dummy input so the
//! gradients it induces under the plain forward pass match the snapshot.
//! Text dummies are continuous token embeddings; vision dummies are pixels.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, Tape};
use crate::aux_loss::{model_aux_loss, total_loss, AuxConfig};
use crate::error::{Error, Result};
use crate::metrics::{image_metrics, text_metrics, MetricReport};
use crate::mjp::{shuffle_batch, ShuffleSpec, ShuffledBatch};
use crate::model::{names, patchify, patchify_taped, unpatchify, InputBatch, Mode, ModelInput, TransformerModel};
use crate::optim::AdamW;
use crate::rng::{normal_tensor, uniform_tensor, RngKey};
use crate::tensor::Tensor;

pub const PIXEL_LR: f64 = 0.1;
pub const EMBEDDING_LR: f64 = 0.01;
pub const DEFAULT_ALPHA: f64 = 0.01;
/// Adam moment decays for the dummy. Heavier momentum than training: the matching
/// objective is deterministic and badly conditioned.
pub const ATTACK_BETAS: (f64, f64) = (0.97, 0.99);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    L2,
    L2PlusAlphaL1,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// Attack the raw-input gradient, score against the raw input.
    #[default]
    A,
    /// Attack the shuffled-input gradient, score against the shuffled input.
    B,
    /// Attack the shuffled-input gradient, score against the raw input.
    C,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DummyInit {
    #[default]
    Gaussian,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub iterations: usize,
    /// Step size; `None` picks the modality default (pixels 0.1, embeddings 0.01).
    #[serde(default)]
    pub lr: Option<f64>,
    /// Cosine-anneal the step size to zero over the run.
    #[serde(default)]
    pub lr_decay: bool,
    #[serde(default)]
    pub distance: Distance,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub setting: Setting,
    #[serde(default)]
    pub init: DummyInit,
    #[serde(default = "default_true")]
    pub label_known: bool,
    #[serde(default)]
    pub seed: u64,
    /// Stop once the matching objective falls below this value (0 disables).
    #[serde(default)]
    pub tolerance: f64,
    /// Random starts screened on half the budget; the best one gets the other half.
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_restarts() -> usize {
    1
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_true() -> bool {
    true
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            iterations: 1000,
            lr: None,
            lr_decay: false,
            distance: Distance::L2,
            alpha: DEFAULT_ALPHA,
            setting: Setting::A,
            init: DummyInit::Gaussian,
            label_known: true,
            seed: 0,
            tolerance: 0.0,
            restarts: 1,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("attack iterations must be at least 1".into()));
        }
        if self.restarts == 0 || (self.restarts > 1 && self.iterations < 2 * self.restarts) {
            return Err(Error::Config("attack restarts must be at least 1 and leave each start two iterations".into()));
        }
        if !(0.0..).contains(&self.alpha) {
            return Err(Error::Config(format!("attack alpha must be nonnegative, got {}", self.alpha)));
        }
        if matches!(self.lr, Some(lr) if !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config("attack learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One client's local computation: the batch it fed the model and the gradients it sent.
#[derive(Clone, Debug)]
pub struct ClientStep {
    pub input: InputBatch,
    pub labels: Vec<usize>,
    pub snapshot: GradientMap,
    /// Present when the MJP input layer shuffled the batch.
    pub shuffle: Option<ShuffledBatch>,
}

impl ClientStep {
    /// The batch the encoder actually saw (shuffled when MJP was on).
    pub fn fed_input(&self) -> &InputBatch {
        self.shuffle.as_ref().map_or(&self.input, |s| &s.input)
    }
}

/// Gradients of `CE (+ λ·aux)` for one client batch. With `spec`, the batch goes
/// through the MJP shuffle and masked position embeddings first.
pub fn client_gradients(
    model: &TransformerModel,
    input: &InputBatch,
    labels: &[usize],
    spec: Option<&ShuffleSpec>,
    aux: Option<&AuxConfig>,
    stream: RngKey,
) -> Result<ClientStep> {
    let cfg = &model.config;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let grid = (cfg.mode == Mode::Vision).then_some(cfg.grid_side);
    let shuffle = spec.map(|s| shuffle_batch(input, s, grid, stream)).transpose()?;
    let (fed, masks) = match &shuffle {
        Some(s) => (&s.input, s.masks.clone()),
        None => (input, vec![vec![false; cfg.seq_len]; input.batch_size()]),
    };
    let logits = bound.forward(&mut tape, fed.as_input(), Some(&masks))?;
    let ce = tape.cross_entropy(&logits, labels)?;
    let loss = match aux {
        Some(a) => match model_aux_loss(&mut tape, &bound, &masks, a, &mut stream.fold_str("aux").rng())? {
            Some(l) => total_loss(&mut tape, &ce, &l, a.lambda)?,
            None => ce,
        },
        None => ce,
    };
    let snapshot = tape.backward(&loss)?;
    Ok(ClientStep {
        input: input.clone(),
        labels: labels.to_vec(),
        snapshot,
        shuffle,
    })
}

/// Output of the generic inversion loop.
#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    /// Best-objective iterate.
    pub recovered: Tensor,
    /// Best objective seen so far, one entry per optimizer step; nonincreasing.
    pub trace: Vec<f64>,
    pub best_objective: f64,
    /// The objective became non-finite and the run stopped early.
    pub diverged: bool,
}

/// Gradient-matching distance between `grads` and the `target` entries of the same names.
fn matching_distance(tape: &mut Tape, grads: &[(String, Tensor)], target: &GradientMap, distance: Distance, alpha: f64) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (name, g) in grads {
        let t = target.get(name).ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        let diff = tape.sub(g, t)?;
        let sq = tape.mul(&diff, &diff)?;
        let mut term = tape.sum_all(&sq)?;
        if distance == Distance::L2PlusAlphaL1 && alpha > 0.0 {
            let a = tape.abs(&diff)?;
            let l1 = tape.sum_all(&a)?;
            let l1 = tape.scale(&l1, alpha)?;
            term = tape.add(&term, &l1)?;
        }
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(&acc, &term)?,
        });
    }
    total.ok_or(Error::Empty("matched gradients"))
}

/// Shared state of one inversion across its starts.
struct Descent<'a, F, P> {
    target: &'a GradientMap,
    cfg: &'a AttackConfig,
    project: P,
    victim: F,
    /// Best objective over every step so far, one entry per step.
    trace: Vec<f64>,
    best: (f64, Option<Tensor>),
    /// Tolerance reached or the objective went non-finite.
    stop: bool,
    diverged: bool,
}

impl<F, P> Descent<'_, F, P>
where
    F: FnMut(&mut Tape, &Tensor) -> Result<(Tensor, Vec<(String, Tensor)>)>,
    P: Fn(Tensor) -> Tensor,
{
    /// Up to `steps` Adam steps from `x`; returns this leg's best objective and iterate.
    fn descend(&mut self, mut x: Tensor, steps: usize, lr: f64, decay: bool) -> Result<(f64, Tensor)> {
        let mut opt = AdamW::adam();
        (opt.beta1, opt.beta2) = ATTACK_BETAS;
        let mut leg = (f64::INFINITY, x.clone());
        for it in 0..steps {
            let mut tape = Tape::new();
            let dummy = tape.leaf(&x);
            let (loss, params) = (self.victim)(&mut tape, &dummy)?;
            let handles: Vec<&Tensor> = params.iter().map(|(_, t)| t).collect();
            let grads = tape.grad(&loss, &handles, true)?;
            let named: Vec<(String, Tensor)> = params.iter().map(|(n, _)| n.clone()).zip(grads).collect();
            let dist = matching_distance(&mut tape, &named, self.target, self.cfg.distance, self.cfg.alpha)?;
            let objective = dist.item()?;
            if !objective.is_finite() {
                self.diverged = true;
                self.stop = true;
                break;
            }
            if objective < leg.0 {
                leg = (objective, x.clone());
            }
            if objective < self.best.0 {
                self.best = (objective, Some(x.clone()));
            }
            self.trace.push(self.best.0);
            if objective < self.cfg.tolerance {
                self.stop = true;
                break;
            }
            let gx = tape.grad(&dist, &[&dummy], false)?.remove(0);
            if !gx.is_finite() {
                self.diverged = true;
                self.stop = true;
                break;
            }
            let step_lr = if decay {
                0.5 * lr * (1.0 + (std::f64::consts::PI * it as f64 / steps as f64).cos())
            } else {
                lr
            };
            x = (self.project)(opt.step_one("dummy", &x, &gx, step_lr)?);
        }
        Ok(leg)
    }
}

/// Adam on a dummy input so that the gradients produced by `victim` match `target`.
///
/// `victim(tape, dummy)` returns the training loss and the parameter handles whose
/// gradients are compared. `project` is applied after every step (e.g. a box clamp).
/// `init` is called once per start. With several starts, each runs at constant step
/// size on an equal share of half the budget, and the lowest objective continues
/// from its best iterate for the rest. The trace covers every step taken.
pub fn invert_with<F>(target: &GradientMap, mut init: impl FnMut() -> Tensor, cfg: &AttackConfig, lr: f64, project: impl Fn(Tensor) -> Tensor, victim: F) -> Result<Inversion>
where
    F: FnMut(&mut Tape, &Tensor) -> Result<(Tensor, Vec<(String, Tensor)>)>,
{
    cfg.validate()?;
    let first = project(init());
    // Returned when the very first objective is already non-finite.
    let fallback = first.clone();
    let mut run = Descent {
        target,
        cfg,
        project,
        victim,
        trace: Vec::with_capacity(cfg.iterations),
        best: (f64::INFINITY, None),
        stop: false,
        diverged: false,
    };
    if cfg.restarts == 1 {
        run.descend(first, cfg.iterations, lr, cfg.lr_decay)?;
    } else {
        let share = cfg.iterations / (2 * cfg.restarts);
        let mut winner = run.descend(first, share, lr, false)?;
        for _ in 1..cfg.restarts {
            if run.stop {
                break;
            }
            let x = (run.project)(init());
            let leg = run.descend(x, share, lr, false)?;
            if leg.0 < winner.0 {
                winner = leg;
            }
        }
        if !run.stop {
            run.descend(winner.1, cfg.iterations - share * cfg.restarts, lr, cfg.lr_decay)?;
        }
    }
    let (best_objective, recovered) = run.best;
    Ok(Inversion {
        recovered: recovered.unwrap_or(fallback),
        trace: run.trace,
        best_objective,
        diverged: run.diverged,
    })
}

/// The label with the most negative head-bias gradient (the only negative entry under CE
/// for a single sample).
pub fn infer_label(snapshot: &GradientMap) -> Result<usize> {
    let g = snapshot.get(names::HEAD_BIAS).ok_or_else(|| Error::UnknownParameter(names::HEAD_BIAS.into()))?;
    Ok(g.data().iter().enumerate().fold(0, |best, (i, &v)| if v < g.data()[best] { i } else { best }))
}

/// Parameters whose gradients the adversary matches. The token table is left
/// out: a continuous embedding dummy never routes gradient through it.
fn matched_names(model: &TransformerModel) -> Vec<String> {
    model.params().keys().filter(|n| n.as_str() != names::TOKEN_EMBED).cloned().collect()
}

/// Shape of the private sample the attack tries to recover.
#[derive(Clone, Debug, PartialEq)]
pub enum Sample {
    Text(Vec<usize>),
    /// `[H, W, C]` pixels in `[0, 1]` and the patch size.
    Image { pixels: Tensor, patch: usize },
}

impl Sample {
    pub fn to_batch(&self) -> Result<InputBatch> {
        Ok(match self {
            Sample::Text(t) => InputBatch::Tokens(vec![t.clone()]),
            Sample::Image { pixels, patch } => {
                let p = patchify(pixels, *patch)?;
                let (l, w) = (p.shape()[0], p.shape()[1]);
                InputBatch::Patches(p.reshape(&[1, l, w])?)
            }
        })
    }

    /// The sample rebuilt from a batch-of-one (e.g. after shuffling).
    fn like_batch(&self, batch: &InputBatch) -> Result<Sample> {
        Ok(match (self, batch) {
            (Sample::Text(_), InputBatch::Tokens(t)) => Sample::Text(t[0].clone()),
            (Sample::Image { pixels, patch }, InputBatch::Patches(p)) => {
                let s = pixels.shape();
                let rows = p.reshape(&p.shape()[1..])?;
                Sample::Image {
                    pixels: unpatchify(&rows, *patch, s[0], s[1], s[2])?,
                    patch: *patch,
                }
            }
            _ => return Err(Error::Config("sample and batch modalities differ".into())),
        })
    }
}

/// Invert a transformer client snapshot for a batch-of-one sample shaped like `like`.
pub fn invert_gradients(target: &GradientMap, model: &TransformerModel, like: &Sample, label: usize, cfg: &AttackConfig) -> Result<Inversion> {
    let mc = &model.config;
    let matched = matched_names(model);
    let mut rng = RngKey::new(cfg.seed).fold_str("dummy").rng();
    let labels = [label];
    let run = |init: &mut dyn FnMut() -> Tensor, lr: f64, project: &dyn Fn(Tensor) -> Tensor, patch: Option<usize>| {
        invert_with(target, init, cfg, lr, project, |tape, dummy| {
            let bound = model.bind(tape);
            let logits = match patch {
                Some(p) => {
                    let patches = patchify_taped(tape, dummy, p)?;
                    bound.forward(tape, ModelInput::Patches(&patches), None)?
                }
                None => bound.forward(tape, ModelInput::Embedded(dummy), None)?,
            };
            let loss = tape.cross_entropy(&logits, &labels)?;
            let params = matched.iter().map(|n| Ok((n.clone(), bound.get(n)?.clone()))).collect::<Result<_>>()?;
            Ok((loss, params))
        })
    };
    match (mc.mode, like) {
        (Mode::Text, Sample::Text(t)) => {
            if t.len() != mc.seq_len {
                return Err(Error::LengthMismatch {
                    expected: mc.seq_len,
                    actual: t.len(),
                    context: "attack sample",
                });
            }
            let table = model.param(names::TOKEN_EMBED)?;
            let std = (table.data().iter().map(|v| v * v).sum::<f64>() / table.numel() as f64).sqrt();
            let shape = [1, mc.seq_len, mc.embed_dim];
            let mut init = || match cfg.init {
                DummyInit::Gaussian => normal_tensor(&shape, std, &mut rng),
                DummyInit::Uniform => uniform_tensor(&shape, -std * 3f64.sqrt(), std * 3f64.sqrt(), &mut rng),
            };
            run(&mut init, cfg.lr.unwrap_or(EMBEDDING_LR), &|x| x, None)
        }
        (Mode::Vision, Sample::Image { pixels, patch }) => {
            let mut shape = vec![1];
            shape.extend_from_slice(pixels.shape());
            let mut init = || match cfg.init {
                DummyInit::Gaussian => normal_tensor(&shape, 0.25, &mut rng).map(|v| v + 0.5),
                DummyInit::Uniform => uniform_tensor(&shape, 0.0, 1.0, &mut rng),
            };
            let inv = run(&mut init, cfg.lr.unwrap_or(PIXEL_LR), &|x: Tensor| x.map(|v| v.clamp(0.0, 1.0)), Some(*patch))?;
            Ok(Inversion {
                recovered: inv.recovered.reshape(pixels.shape())?,
                ..inv
            })
        }
        _ => Err(Error::Config("attack sample does not match the model mode".into())),
    }
}

/// Nearest table row by cosine similarity for each recovered row; ties go to the lowest id.
pub fn decode_tokens(recovered: &Tensor, table: &Tensor) -> Result<Vec<usize>> {
    let d = *table.shape().last().ok_or(Error::Empty("embedding table"))?;
    if table.ndim() != 2 || table.shape()[0] == 0 {
        return Err(Error::Empty("embedding table"));
    }
    if recovered.shape().last() != Some(&d) {
        return Err(Error::ShapeMismatch {
            left: recovered.shape().to_vec(),
            right: table.shape().to_vec(),
            context: "decode_tokens",
        });
    }
    let norms: Vec<f64> = (0..table.shape()[0]).map(|i| table.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    Ok(recovered
        .data()
        .chunks(d)
        .map(|r| {
            let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut best = (f64::NEG_INFINITY, 0);
            for (i, &tn) in norms.iter().enumerate() {
                let dot: f64 = r.iter().zip(table.row(i)).map(|(a, b)| a * b).sum();
                let cos = if rn == 0.0 || tn == 0.0 { 0.0 } else { dot / (rn * tn) };
                if cos > best.0 {
                    best = (cos, i);
                }
            }
            best.1
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub setting: Setting,
    pub config: AttackConfig,
    pub label: usize,
    pub diverged: bool,
    pub best_objective: f64,
    pub metrics: MetricReport,
    pub trace: Vec<f64>,
}

/// A scored attack: recovered input, its decoding, and metrics against the setting's reference.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub summary: AttackSummary,
    /// Embeddings `[1, L, D]` (text) or pixels `[H, W, C]` (vision).
    pub recovered: Tensor,
    pub decoded: Option<Vec<usize>>,
    pub reference: Sample,
}

impl AttackResult {
    pub fn metrics(&self) -> &MetricReport {
        &self.summary.metrics
    }

    /// `result.json`, `recovered.tensor` and, for text, `recovered.txt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut json = serde_json::to_string_pretty(&self.summary)?;
        json.push('\n');
        fs::write(dir.join("result.json"), json)?;
        fs::write(dir.join("recovered.tensor"), self.recovered.to_bytes())?;
        if let Some(ids) = &self.decoded {
            let line: Vec<String> = ids.iter().map(usize::to_string).collect();
            fs::write(dir.join("recovered.txt"), line.join(" ") + "\n")?;
        }
        Ok(())
    }
}

/// Simulate the client (with `spec` for settings b/c), attack its snapshot, and score
/// the recovery against the setting's reference.
pub fn run_attack_setting(model: &TransformerModel, sample: &Sample, label: usize, spec: Option<&ShuffleSpec>, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let stream = RngKey::new(cfg.seed).fold_str("client");
    let client_spec = match cfg.setting {
        Setting::A => None,
        Setting::B | Setting::C => Some(spec.ok_or_else(|| Error::Config("settings b and c need a shuffle spec".into()))?),
    };
    let batch = sample.to_batch()?;
    let step = client_gradients(model, &batch, &[label], client_spec, None, stream)?;
    let shuffled = sample.like_batch(step.fed_input())?;
    let reference = match cfg.setting {
        Setting::A | Setting::C => sample.clone(),
        Setting::B => shuffled,
    };
    let label = if cfg.label_known { label } else { infer_label(&step.snapshot)? };
    let inv = invert_gradients(&step.snapshot, model, sample, label, cfg)?;
    let (metrics, decoded) = match &reference {
        Sample::Text(truth) => {
            let ids = decode_tokens(&inv.recovered, model.param(names::TOKEN_EMBED)?)?;
            (text_metrics(&ids, truth)?, Some(ids))
        }
        Sample::Image { pixels, .. } => (image_metrics(&inv.recovered, pixels)?, None),
    };
    Ok(AttackResult {
        summary: AttackSummary {
            setting: cfg.setting,
            config: cfg.clone(),
            label,
            diverged: inv.diverged,
            best_objective: inv.best_objective,
            metrics,
            trace: inv.trace,
        },
        recovered: inv.recovered,
        decoded,
        reference,
    })
}

/// Random sample for smoke tests and campaigns: uniform token ids or pixels.
pub fn random_sample(mode: Mode, model: &TransformerModel, patch: usize, rng: &mut impl Rng) -> Sample {
    let c = &model.config;
    match mode {
        Mode::Text => Sample::Text((0..c.seq_len).map(|_| rng.random_range(0..c.vocab_size)).collect()),
        Mode::Vision => {
            let side = c.grid_side * patch;
            let channels = c.patch_dim / (patch * patch);
            Sample::Image {
                pixels: uniform_tensor(&[side, side, channels], 0.0, 1.0, rng),
                patch,
            }
        }
    }
}
