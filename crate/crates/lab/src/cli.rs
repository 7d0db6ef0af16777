//! Command-line surface. Each subcommand writes into `<root>/<subcommand>/` and
//! finishes with a `manifest.json` over everything it wrote there.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use mjp_core::attack::{AttackConfig, Setting};
use mjp_core::aux_loss::AuxKind;
use mjp_core::model::{load_checkpoint, TransformerModel};
use mjp_core::RngKey;
use serde::Serialize;

use crate::campaign::attack_campaign;
use crate::config::ExperimentConfig;
use crate::error::{LabError, LabResult};
use crate::export::export_pe;
use crate::manifest::write_manifest;
use crate::report::build_report;
use crate::sweep::{ratio_sweep, write_sweep_csv};
use crate::synth::load_splits;
use crate::train::{evaluate, train};

/// Environment variable naming the output root when `--out` is absent.
pub const OUT_ENV: &str = "MJP_LAB_OUT";

#[derive(Parser, Debug)]
#[command(name = "mjp-lab", version, about = "Masked jigsaw puzzle experiments on toy transformers")]
pub struct Cli {
    /// Output root; falls back to $MJP_LAB_OUT, then the config's output_dir, then ./runs.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Log progress (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and checkpoint every epoch.
    Train(Common),
    /// Validation loss and accuracy at one inference-time shuffle ratio.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gamma: f64,
        #[command(flatten)]
        from: FromCheckpoint,
    },
    /// Validation accuracy across inference-time shuffle ratios.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Ratios to evaluate; defaults to eval.gammas.
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
        #[command(flatten)]
        from: FromCheckpoint,
    },
    /// Gradient-inversion campaign over validation samples.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        from: FromCheckpoint,
        /// Attack the seed-initialized weights (a first federated round) instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        round_zero: bool,
    },
    /// PCA projection, explained variance and scatter plot of the position table.
    ExportPe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        from: FromCheckpoint,
        #[arg(long, default_value_t = 2)]
        dims: usize,
    },
    /// Markdown summary of the outputs under the output root.
    Report,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    Text,
    Vision,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AuxArg {
    None,
    Dal,
    Drl,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SettingArg {
    A,
    B,
    C,
}

/// Where the config comes from, plus flags that override its keys.
#[derive(Args, Debug)]
pub struct Common {
    /// Experiment config file (TOML).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in toy experiment instead of a config file.
    #[arg(long)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Training shuffle ratio (shuffle.gamma).
    #[arg(long)]
    pub shuffle_gamma: Option<f64>,
    #[arg(long)]
    pub aux: Option<AuxArg>,
    /// Localization loss weight (aux.lambda).
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub attack_iterations: Option<usize>,
    #[arg(long)]
    pub attack_lr: Option<f64>,
    /// Validation samples attacked (campaign.samples).
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub settings: Option<Vec<SettingArg>>,
    /// Client shuffle ratios for settings b and c (campaign.gammas).
    #[arg(long, value_delimiter = ',')]
    pub client_gammas: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct FromCheckpoint {
    /// Checkpoint directory; defaults to `<root>/train/checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

impl Common {
    pub fn resolve(&self) -> LabResult<ExperimentConfig> {
        let mut cfg = match (&self.config, self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(Preset::Text)) => ExperimentConfig::text_toy(self.seed.unwrap_or(0)),
            (None, Some(Preset::Vision)) => ExperimentConfig::vision_toy(self.seed.unwrap_or(0)),
            (None, None) => return Err(LabError::Config("pass --config or --preset".into())),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.shuffle.seed = s;
            if let Some(a) = cfg.attack.as_mut() {
                a.seed = s;
            }
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.shuffle_gamma {
            cfg.shuffle.gamma = v;
        }
        if let Some(v) = self.aux {
            cfg.aux.kind = match v {
                AuxArg::None => AuxKind::None,
                AuxArg::Dal => AuxKind::Dal,
                AuxArg::Drl => AuxKind::Drl,
            };
        }
        if let Some(v) = self.lambda {
            cfg.aux.lambda = v;
        }
        if self.attack_iterations.is_some() || self.attack_lr.is_some() {
            let a = cfg.attack.get_or_insert_with(AttackConfig::default);
            if let Some(v) = self.attack_iterations {
                a.iterations = v;
            }
            if self.attack_lr.is_some() {
                a.lr = self.attack_lr;
            }
        }
        if let Some(v) = self.samples {
            cfg.campaign.samples = v;
        }
        if let Some(v) = &self.settings {
            cfg.campaign.settings = v
                .iter()
                .map(|s| match s {
                    SettingArg::A => Setting::A,
                    SettingArg::B => Setting::B,
                    SettingArg::C => Setting::C,
                })
                .collect();
        }
        if let Some(v) = &self.client_gammas {
            cfg.campaign.gammas = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `--out`, then the environment, then the config, then `./runs`.
pub fn output_root(flag: Option<&Path>, cfg: Option<&ExperimentConfig>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn fresh_dir(dir: &Path) -> LabResult<()> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> LabResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(mjp_core::Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| LabError::io(path, e))
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> LabResult<()> {
    let mut c = cfg.clone();
    c.output_dir = None;
    let p = dir.join("config.toml");
    std::fs::write(&p, c.canonical()).map_err(|e| LabError::io(&p, e))
}

fn load_model(from: &FromCheckpoint, root: &Path, cfg: &ExperimentConfig) -> LabResult<TransformerModel> {
    let dir = from.checkpoint.clone().unwrap_or_else(|| root.join("train").join("checkpoint"));
    let model = load_checkpoint(&dir).map_err(|e| match e {
        mjp_core::Error::Io(source) => LabError::Io {
            path: dir.display().to_string(),
            source,
        },
        e => e.into(),
    })?;
    if model.config != cfg.model {
        return Err(LabError::Config(format!("checkpoint {} was trained with a different model config", dir.display())));
    }
    Ok(model)
}

#[derive(Serialize)]
struct EvalRecord {
    config_hash: String,
    gamma: f64,
    eval_seed: u64,
    loss: f64,
    accuracy: f64,
}

/// Run one parsed command; returns the directory it wrote.
pub fn run(cli: &Cli) -> LabResult<PathBuf> {
    if let Command::Report = cli.command {
        let root = output_root(cli.out.as_deref(), None);
        let dir = root.join("report");
        let text = build_report(&root)?;
        fresh_dir(&dir)?;
        let p = dir.join("report.md");
        std::fs::write(&p, text).map_err(|e| LabError::io(&p, e))?;
        let manifest = crate::manifest::Manifest {
            command: "report".into(),
            config_hash: String::new(),
            seed: 0,
            artifacts: crate::manifest::checksums(&dir)?,
        };
        write_json(&dir.join(crate::manifest::MANIFEST), &manifest)?;
        return Ok(dir);
    }
    let (name, common) = match &cli.command {
        Command::Train(c) => ("train", c),
        Command::Eval { common, .. } => ("eval", common),
        Command::Sweep { common, .. } => ("sweep", common),
        Command::Attack { common, .. } => ("attack", common),
        Command::ExportPe { common, .. } => ("export-pe", common),
        Command::Report => unreachable!("handled above"),
    };
    let cfg = common.resolve()?;
    let root = output_root(cli.out.as_deref(), Some(&cfg));
    let dir = root.join(name);
    match &cli.command {
        Command::Train(_) => {
            let data = load_splits(&cfg.data, cfg.seed)?;
            fresh_dir(&dir)?;
            let t = train(&cfg, &data, Some(&dir))?;
            log::info!("final validation accuracy {:.4}", t.record.final_val_acc());
        }
        Command::Eval { gamma, from, .. } => {
            if !(0.0..=1.0).contains(gamma) {
                return Err(LabError::Config(format!("--gamma {gamma} is outside [0, 1]")));
            }
            let model = load_model(from, &root, &cfg)?;
            let data = load_splits(&cfg.data, cfg.seed)?;
            let (loss, accuracy) = evaluate(&model, &data.val, &cfg.shuffle, *gamma, cfg.eval.seed, cfg.eval.batch_size)?;
            fresh_dir(&dir)?;
            let rec = EvalRecord {
                config_hash: cfg.hash(),
                gamma: *gamma,
                eval_seed: cfg.eval.seed,
                loss,
                accuracy,
            };
            write_json(&dir.join("eval.json"), &rec)?;
            log::info!("γ={gamma}: loss {loss:.4}, accuracy {accuracy:.4}");
        }
        Command::Sweep { gammas, from, .. } => {
            let model = load_model(from, &root, &cfg)?;
            let data = load_splits(&cfg.data, cfg.seed)?;
            let gammas = gammas.clone().unwrap_or_else(|| cfg.eval.gammas.clone());
            let points = ratio_sweep(&model, &data.val, &cfg.shuffle, &gammas, cfg.eval.seed, cfg.eval.batch_size)?;
            fresh_dir(&dir)?;
            write_sweep_csv(&points, &dir.join("sweep.csv"))?;
        }
        Command::Attack { from, round_zero, .. } => {
            let model = if *round_zero {
                TransformerModel::init(cfg.model.clone(), RngKey::new(cfg.seed))?
            } else {
                load_model(from, &root, &cfg)?
            };
            let data = load_splits(&cfg.data, cfg.seed)?;
            let samples: Vec<usize> = (0..cfg.campaign.samples.min(data.val.len())).collect();
            let gammas = if cfg.campaign.gammas.is_empty() { vec![cfg.shuffle.gamma] } else { cfg.campaign.gammas.clone() };
            let attack = cfg.attack.clone().unwrap_or_default();
            fresh_dir(&dir)?;
            let campaign = attack_campaign(&model, &data.val, &samples, &cfg.campaign.settings, &gammas, &cfg.shuffle, &attack, Some(&dir))?;
            campaign.save(&dir)?;
            log::info!("attack campaign:\n{}", campaign.table());
        }
        Command::ExportPe { from, dims, .. } => {
            let model = load_model(from, &root, &cfg)?;
            fresh_dir(&dir)?;
            export_pe(&model, *dims, &dir)?;
        }
        Command::Report => unreachable!("handled above"),
    }
    write_config(&dir, &cfg)?;
    write_manifest(&dir, name, &cfg)?;
    Ok(dir)
}

/// Parse arguments, run, and map the outcome to a process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
