//! Command-line front end: flat key=value configuration with overrides, and
//! the train / eval / forecast / synth / gradcheck / bench subcommands.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error,
//! 5 verification failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    fit_apply_standardizer, fmt_g17, load_series_csv, split_series, synth_mixture, write_matrix_csv,
    write_series_csv, SplitMode, SplitSpec, SynthMode, SynthSpec, WindowSet,
};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, PathMode};
use crate::ssm::SsmConfig;
use crate::tensor::Tape;
use crate::train::{
    checkpoint_load, checkpoint_save, evaluate, fit, restore_training_state, training_state_params,
    Checkpoint, Metrics, OptimState, TrainConfig, Trainer, CHECKPOINT_VERSION,
};
use crate::verify::{bench_scan, gradcheck_suite, scan_equivalence, GRADCHECK_TOL};

// ── Config keys ─────────────────────────────────────────────────────────

pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub about: &'static str,
}

/// Every key the parser accepts. `--help` renders this same table, so the
/// documented set and the accepted set cannot drift apart.
pub const CONFIG_KEYS: &[KeySpec] = &[
    KeySpec { name: "data", default: "", about: "path to the input CSV (date column + numeric channels)" },
    KeySpec { name: "seed", default: "0", about: "RNG seed for init, batching and synthesis" },
    KeySpec { name: "split.mode", default: "ratio", about: "ett_hour | ett_minute | ratio" },
    KeySpec { name: "split.train", default: "0.7", about: "train fraction (ratio mode)" },
    KeySpec { name: "split.val", default: "0.1", about: "validation fraction (ratio mode)" },
    KeySpec { name: "split.test", default: "0.2", about: "test fraction (ratio mode)" },
    KeySpec { name: "model.t", default: "96", about: "history length in steps" },
    KeySpec { name: "model.h", default: "96", about: "horizon length in steps" },
    KeySpec { name: "model.n", default: "auto", about: "channel count; auto = infer from data" },
    KeySpec { name: "model.k1", default: "8", about: "temporal basis count (time path)" },
    KeySpec { name: "model.k2", default: "8", about: "channel basis count (channel path)" },
    KeySpec { name: "model.patch_len", default: "16", about: "steps per patch token" },
    KeySpec { name: "model.patch_stride", default: "8", about: "patch stride; (t - patch_len) must divide" },
    KeySpec { name: "model.lambda1", default: "1", about: "reconstruction loss weight" },
    KeySpec { name: "model.lambda2", default: "1", about: "prediction loss weight" },
    KeySpec { name: "model.path", default: "dual", about: "dual | time_only | channel_only" },
    KeySpec { name: "model.temporal_blocks", default: "1", about: "stacked blocks in the temporal encoder" },
    KeySpec { name: "model.channel_blocks", default: "1", about: "stacked blocks in the channel encoder" },
    KeySpec { name: "ssm.d_model", default: "32", about: "token embedding width" },
    KeySpec { name: "ssm.d_state", default: "16", about: "state dimension per inner channel" },
    KeySpec { name: "ssm.d_conv", default: "4", about: "causal conv kernel width" },
    KeySpec { name: "ssm.expand", default: "2", about: "inner width multiplier" },
    KeySpec { name: "ssm.use_skip", default: "true", about: "learnable skip term y += D·u" },
    KeySpec { name: "ssm.parallel_scan", default: "false", about: "run the recorded scan with the parallel engine" },
    KeySpec { name: "train.lr", default: "0.001", about: "Adam learning rate" },
    KeySpec { name: "train.beta1", default: "0.9", about: "Adam first-moment decay" },
    KeySpec { name: "train.beta2", default: "0.999", about: "Adam second-moment decay" },
    KeySpec { name: "train.eps", default: "1e-8", about: "Adam denominator epsilon" },
    KeySpec { name: "train.epochs", default: "10", about: "maximum training epochs" },
    KeySpec { name: "train.batch_size", default: "32", about: "windows per optimizer step" },
    KeySpec { name: "train.patience", default: "3", about: "early-stop patience; 0 disables" },
    KeySpec { name: "train.clip_norm", default: "5", about: "global-norm gradient clip; 0 disables" },
    KeySpec { name: "train.lr_halve_on_plateau", default: "false", about: "halve lr on validation plateau" },
    KeySpec { name: "train.stride", default: "1", about: "training window stride" },
    KeySpec { name: "eval.stride", default: "1", about: "val/test window stride" },
];

pub fn config_keys_help() -> String {
    let mut s = String::from("Config keys (config file or --set key=value):\n");
    for k in CONFIG_KEYS {
        let _ = writeln!(s, "  {:28} default {:8} {}", k.name, format!("`{}`", k.default), k.about);
    }
    s
}

/// Resolved flat configuration: defaults, then config file, then --set
/// overrides, then dedicated flags. Unknown keys are errors, not warnings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

fn lookup_key(name: &str) -> Result<&'static str> {
    CONFIG_KEYS
        .iter()
        .find(|k| k.name == name)
        .map(|k| k.name)
        .ok_or_else(|| Error::Config(format!("unknown config key `{name}`")))
}

impl Default for RunConfig {
    fn default() -> Self {
        let values = CONFIG_KEYS.iter().map(|k| (k.name, k.default.to_string())).collect();
        RunConfig { values }
    }
}

impl RunConfig {
    pub fn from_sources(file: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!("{}:{}: expected key=value, got `{line}`", path.display(), i + 1))
                })?;
                cfg.set(k.trim(), v.trim())?;
            }
        }
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{s}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = lookup_key(key)?;
        self.values.insert(key, value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(|s| s.as_str()).unwrap_or_default()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("config key `{key}`: cannot parse `{}`", self.get(key))))
    }

    fn parse_bool(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::Config(format!("config key `{key}`: expected bool, got `{other}`"))),
        }
    }

    /// Canonical echo: every key in table order, effective values.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        for k in CONFIG_KEYS {
            let _ = writeln!(s, "{}={}", k.name, self.values[k.name]);
        }
        s
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    pub fn data_path(&self) -> Result<PathBuf> {
        let p = self.get("data");
        if p.is_empty() {
            return Err(Error::Config("no dataset given: set `data` or pass --data".to_string()));
        }
        Ok(PathBuf::from(p))
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        Ok(SplitSpec {
            mode: SplitMode::parse(self.get("split.mode"))?,
            ratios: (self.parse("split.train")?, self.parse("split.val")?, self.parse("split.test")?),
        })
    }

    /// Model config with `n` resolved against the dataset when set to auto.
    pub fn model_config(&self, data_channels: Option<usize>) -> Result<ModelConfig> {
        let n = match self.get("model.n") {
            "auto" => data_channels.ok_or_else(|| {
                Error::Config("model.n=auto requires a dataset to infer the channel count".to_string())
            })?,
            v => {
                let n: usize = v
                    .parse()
                    .map_err(|_| Error::Config(format!("config key `model.n`: cannot parse `{v}`")))?;
                if let Some(dc) = data_channels {
                    if dc != n {
                        return Err(Error::dimension(
                            "model_config",
                            format!("model.n = {n} but the dataset has {dc} channels"),
                        ));
                    }
                }
                n
            }
        };
        let cfg = ModelConfig {
            t: self.parse("model.t")?,
            h: self.parse("model.h")?,
            n,
            k1: self.parse("model.k1")?,
            k2: self.parse("model.k2")?,
            patch_len: self.parse("model.patch_len")?,
            patch_stride: self.parse("model.patch_stride")?,
            lambda1: self.parse("model.lambda1")?,
            lambda2: self.parse("model.lambda2")?,
            ssm: SsmConfig {
                d_model: self.parse("ssm.d_model")?,
                d_state: self.parse("ssm.d_state")?,
                d_conv: self.parse("ssm.d_conv")?,
                expand: self.parse("ssm.expand")?,
                use_skip: self.parse_bool("ssm.use_skip")?,
                parallel_scan: self.parse_bool("ssm.parallel_scan")?,
            },
            temporal_blocks: self.parse("model.temporal_blocks")?,
            channel_blocks: self.parse("model.channel_blocks")?,
            path: PathMode::parse(self.get("model.path"))?,
        };
        for w in cfg.validate()? {
            eprintln!("warning: {w}");
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let clip: f64 = self.parse("train.clip_norm")?;
        let cfg = TrainConfig {
            lr: self.parse("train.lr")?,
            beta1: self.parse("train.beta1")?,
            beta2: self.parse("train.beta2")?,
            eps: self.parse("train.eps")?,
            epochs: self.parse("train.epochs")?,
            batch_size: self.parse("train.batch_size")?,
            patience: self.parse("train.patience")?,
            seed: self.seed()?,
            clip_norm: if clip > 0.0 { Some(clip) } else { None },
            lr_halve_on_plateau: self.parse_bool("train.lr_halve_on_plateau")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

// ── CLI surface ─────────────────────────────────────────────────────────

#[derive(Parser)]
#[command(
    name = "unmix",
    about = "Channel-time dual unmixing forecaster",
    after_help = config_keys_help()
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone)]
pub struct CommonArgs {
    /// Flat key=value config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; every artifact is written inside it
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Seed override (equivalent to --set seed=N)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override one config key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoint.bin, loss_log.csv and metrics.csv
    #[command(after_help = config_keys_help())]
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset CSV (equivalent to --set data=PATH)
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes metrics.csv and optional predictions
    #[command(after_help = config_keys_help())]
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also dump per-window test predictions to predictions.csv
        #[arg(long)]
        dump_predictions: bool,
    },
    /// Forecast the horizon after the end of a series; writes forecast.csv
    #[command(after_help = config_keys_help())]
    Forecast {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Generate a synthetic mixture dataset with ground-truth sidecars
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        /// time_mix | channel_mix | dual
        #[arg(long, default_value = "dual")]
        mode: String,
        #[arg(long, default_value_t = 384)]
        rows: usize,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
    /// Gradient-check every operation and the end-to-end toy model
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Time sequential vs parallel scans; writes bench.csv
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated sequence lengths
        #[arg(long, default_value = "1,2,3,17,256,1024,4096")]
        lengths: String,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

/// Parse argv, run, and map errors onto the exit-code contract.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { common, data } => cmd_train(&common, data.as_deref()),
        Command::Eval { common, checkpoint, data, dump_predictions } => {
            cmd_eval(&common, &checkpoint, data.as_deref(), dump_predictions)
        }
        Command::Forecast { common, checkpoint, data } => cmd_forecast(&common, &checkpoint, data.as_deref()),
        Command::Synth { common, mode, rows, channels, k, noise } => {
            cmd_synth(&common, &mode, rows, channels, k, noise)
        }
        Command::Gradcheck { common } => cmd_gradcheck(&common),
        Command::Bench { common, lengths, reps } => cmd_bench(&common, &lengths, reps),
    }
}

fn resolve_config(common: &CommonArgs, data: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_sources(common.config.as_deref(), &common.sets)?;
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(d) = data {
        cfg.set("data", &d.display().to_string())?;
    }
    Ok(cfg)
}

fn prepare_outdir(out: &Path, resolved: &str) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("resolved_config.txt"), resolved)?;
    Ok(())
}

fn metrics_csv(m: &Metrics) -> String {
    let mut s = String::from("horizon,mse,mae\n");
    let _ = writeln!(s, "all,{},{}", fmt_g17(m.mse), fmt_g17(m.mae));
    if let Some(ph) = &m.per_horizon {
        for (i, (mse, mae)) in ph.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", i + 1, fmt_g17(*mse), fmt_g17(*mae));
        }
    }
    s
}

struct Prepared {
    cfg: RunConfig,
    model_cfg: ModelConfig,
    train_windows: WindowSet,
    val_windows: WindowSet,
    test_windows: WindowSet,
}

fn prepare_data(cfg: RunConfig) -> Result<Prepared> {
    let series = load_series_csv(&cfg.data_path()?)?;
    let model_cfg = cfg.model_config(Some(series.channels()))?;
    let split = split_series(&series, &cfg.split_spec()?, model_cfg.t)?;
    let (split, _) = fit_apply_standardizer(&split)?;
    let train_stride: usize = cfg.parse("train.stride")?;
    let eval_stride: usize = cfg.parse("eval.stride")?;
    Ok(Prepared {
        train_windows: WindowSet::new(split.train, model_cfg.t, model_cfg.h, train_stride)?,
        val_windows: WindowSet::new(split.val, model_cfg.t, model_cfg.h, eval_stride)?,
        test_windows: WindowSet::new(split.test, model_cfg.t, model_cfg.h, eval_stride)?,
        cfg,
        model_cfg,
    })
}

pub fn cmd_train(common: &CommonArgs, data: Option<&Path>) -> Result<()> {
    let cfg = resolve_config(common, data)?;
    let p = prepare_data(cfg)?;
    // echo with the resolved channel count
    let mut echo_cfg = p.cfg.clone();
    echo_cfg.set("model.n", &p.model_cfg.n.to_string())?;
    prepare_outdir(&common.out, &echo_cfg.canonical_text())?;

    let train_cfg = p.cfg.train_config()?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut model = Model::init(&p.model_cfg, &mut rng)?;
    let mut trainer = Trainer::new(train_cfg, &model)?;
    eprintln!(
        "training: {} windows, {} val windows, {} parameters",
        p.train_windows.len(),
        p.val_windows.len(),
        model.param_count()
    );

    let result = fit(&mut model, &mut trainer, &p.train_windows, &p.val_windows)?;

    let mut log = String::from("epoch,train_loss,val_loss,val_mse,val_mae\n");
    for e in &result.log {
        let _ = writeln!(
            log,
            "{},{},{},{},{}",
            e.epoch,
            fmt_g17(e.train_loss),
            fmt_g17(e.val_loss),
            fmt_g17(e.val_mse),
            fmt_g17(e.val_mae)
        );
    }
    std::fs::write(common.out.join("loss_log.csv"), log)?;

    let test_metrics = evaluate(&result.best_model, &p.test_windows, true)?;
    std::fs::write(common.out.join("metrics.csv"), metrics_csv(&test_metrics))?;
    println!(
        "test mse {} mae {} (best epoch {}, val loss {})",
        fmt_g17(test_metrics.mse),
        fmt_g17(test_metrics.mae),
        result.best_epoch,
        fmt_g17(result.best_val_loss)
    );

    let mut text = echo_cfg.canonical_text();
    let _ = writeln!(text, "state.step={}", trainer.state.step);
    let _ = writeln!(text, "state.lr_scale={}", fmt_g17(trainer.lr_scale));
    let _ = writeln!(text, "state.best_val_loss={}", fmt_g17(result.best_val_loss));
    let _ = writeln!(text, "state.best_epoch={}", result.best_epoch);
    let _ = writeln!(text, "state.rng_seed={}", trainer.cfg.seed);
    let _ = writeln!(text, "state.rng_word_pos={}", trainer.rng.get_word_pos());
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        config_text: text,
        params: training_state_params(&result.best_model, &trainer.state),
    };
    checkpoint_save(&common.out.join("checkpoint.bin"), &ckpt)?;
    Ok(())
}

/// Rebuild a RunConfig (and the state lines) from a checkpoint's config text.
fn checkpoint_run_config(ckpt: &Checkpoint) -> Result<(RunConfig, BTreeMap<String, String>)> {
    let mut cfg = RunConfig::default();
    let mut state = BTreeMap::new();
    for line in ckpt.config_text.lines() {
        let Some((k, v)) = line.split_once('=') else { continue };
        if let Some(stripped) = k.strip_prefix("state.") {
            state.insert(stripped.to_string(), v.to_string());
        } else {
            cfg.set(k, v)?;
        }
    }
    Ok((cfg, state))
}

fn load_model_from_checkpoint(path: &Path) -> Result<(Model, OptimState, RunConfig, BTreeMap<String, String>)> {
    let ckpt = checkpoint_load(path)?;
    let (cfg, state_text) = checkpoint_run_config(&ckpt)?;
    let model_cfg = cfg.model_config(None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed()?);
    let mut model = Model::init(&model_cfg, &mut rng)?;
    let mut state = OptimState::new(&model);
    restore_training_state(&mut model, &mut state, &ckpt.params)?;
    if let Some(step) = state_text.get("step") {
        state.step = step
            .parse()
            .map_err(|_| Error::Data(format!("checkpoint state.step unparseable: {step}")))?;
    }
    Ok((model, state, cfg, state_text))
}

pub fn cmd_eval(
    common: &CommonArgs,
    checkpoint: &Path,
    data: Option<&Path>,
    dump_predictions: bool,
) -> Result<()> {
    let (model, _, mut cfg, _) = load_model_from_checkpoint(checkpoint)?;
    for s in &common.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{s}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(d) = data {
        cfg.set("data", &d.display().to_string())?;
    }
    prepare_outdir(&common.out, &cfg.canonical_text())?;

    let series = load_series_csv(&cfg.data_path()?)?;
    if series.channels() != model.cfg.n {
        return Err(Error::dimension(
            "cmd_eval",
            format!(
                "checkpoint was trained with {} channels but the dataset has {}",
                model.cfg.n,
                series.channels()
            ),
        ));
    }
    let split = split_series(&series, &cfg.split_spec()?, model.cfg.t)?;
    let (split, _) = fit_apply_standardizer(&split)?;
    let eval_stride: usize = cfg.parse("eval.stride")?;
    let test_windows = WindowSet::new(split.test, model.cfg.t, model.cfg.h, eval_stride)?;

    let metrics = evaluate(&model, &test_windows, true)?;
    std::fs::write(common.out.join("metrics.csv"), metrics_csv(&metrics))?;
    println!("test mse {} mae {}", fmt_g17(metrics.mse), fmt_g17(metrics.mae));
    if let Some(ph) = &metrics.per_horizon {
        for (i, (mse, mae)) in ph.iter().enumerate() {
            println!("h{} mse {} mae {}", i + 1, fmt_g17(*mse), fmt_g17(*mae));
        }
    }

    if dump_predictions {
        let mut out = String::from("index");
        for name in &series.channel_names {
            let _ = write!(out, ",{name}");
        }
        out.push('\n');
        for w in 0..test_windows.len() {
            let hist = test_windows.hist(w);
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, false);
            let fwd = model.forward(&mut tape, &vars, &hist)?;
            let pred = tape.value(fwd.pred);
            for t in 0..model.cfg.h {
                let _ = write!(out, "{}", t + 1);
                for c in 0..model.cfg.n {
                    let _ = write!(out, ",{}", fmt_g17(pred.get2(t, c)));
                }
                out.push('\n');
            }
        }
        std::fs::write(common.out.join("predictions.csv"), out)?;
    }
    Ok(())
}

pub fn cmd_forecast(common: &CommonArgs, checkpoint: &Path, data: Option<&Path>) -> Result<()> {
    let (model, _, mut cfg, _) = load_model_from_checkpoint(checkpoint)?;
    if let Some(d) = data {
        cfg.set("data", &d.display().to_string())?;
    }
    prepare_outdir(&common.out, &cfg.canonical_text())?;

    let series = load_series_csv(&cfg.data_path()?)?;
    if series.channels() != model.cfg.n {
        return Err(Error::dimension(
            "cmd_forecast",
            format!(
                "checkpoint was trained with {} channels but the dataset has {}",
                model.cfg.n,
                series.channels()
            ),
        ));
    }
    if series.rows() < model.cfg.t {
        return Err(Error::Data(format!(
            "series has {} rows; need at least the {}-step history",
            series.rows(),
            model.cfg.t
        )));
    }
    // standardize with the same protocol statistics the training run used
    let split = split_series(&series, &cfg.split_spec()?, model.cfg.t)?;
    let st = crate::data::Standardizer::fit(&split.train)?;
    let z = st.transform(&series.values)?;
    let start = series.rows() - model.cfg.t;
    let hist = crate::tensor::Tensor::from_fn(&[model.cfg.t, model.cfg.n], |idx| {
        z.data()[start * model.cfg.n + idx]
    });

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let out = model.forward(&mut tape, &vars, &hist)?;
    let pred_z = tape.value(out.pred).clone();
    let pred = st.inverse(&pred_z)?;

    let mut text = String::from("index");
    for name in &series.channel_names {
        let _ = write!(text, ",{name}");
    }
    text.push('\n');
    for t in 0..model.cfg.h {
        let _ = write!(text, "{}", t + 1);
        for c in 0..model.cfg.n {
            let _ = write!(text, ",{}", fmt_g17(pred.get2(t, c)));
        }
        text.push('\n');
    }
    std::fs::write(common.out.join("forecast.csv"), text)?;
    Ok(())
}

pub fn cmd_synth(
    common: &CommonArgs,
    mode: &str,
    rows: usize,
    channels: usize,
    k: usize,
    noise: f64,
) -> Result<()> {
    let cfg = resolve_config(common, None)?;
    let spec = SynthSpec {
        mode: SynthMode::parse(mode)?,
        rows,
        channels,
        k,
        noise_sigma: noise,
        seed: cfg.seed()?,
    };
    if k > channels {
        eprintln!("warning: k = {k} exceeds the channel count {channels}; basis is over-complete");
    }
    let mut echo = cfg.canonical_text();
    let _ = writeln!(
        echo,
        "synth.mode={mode}\nsynth.rows={rows}\nsynth.channels={channels}\nsynth.k={k}\nsynth.noise={}",
        fmt_g17(noise)
    );
    prepare_outdir(&common.out, &echo)?;

    let (series, truth) = synth_mixture(&spec)?;
    write_series_csv(&common.out.join("dataset.csv"), &series)?;
    match spec.mode {
        SynthMode::TimeMix => {
            let (a, s) = truth.time_factors.expect("time factors present");
            write_matrix_csv(&common.out.join("A_star.csv"), &a)?;
            write_matrix_csv(&common.out.join("S_star.csv"), &s)?;
        }
        SynthMode::ChannelMix => {
            let (a, s) = truth.chan_factors.expect("channel factors present");
            write_matrix_csv(&common.out.join("A_star.csv"), &a)?;
            write_matrix_csv(&common.out.join("S_star.csv"), &s)?;
        }
        SynthMode::Dual => {
            let (a, s) = truth.chan_factors.expect("channel factors present");
            write_matrix_csv(&common.out.join("A_star.csv"), &a)?;
            write_matrix_csv(&common.out.join("S_star.csv"), &s)?;
            let (a_t, s_t) = truth.time_factors.expect("time factors present");
            write_matrix_csv(&common.out.join("A_star_time.csv"), &a_t)?;
            write_matrix_csv(&common.out.join("S_star_time.csv"), &s_t)?;
        }
    }
    println!("wrote {} rows × {} channels ({})", rows, channels, spec.mode.as_str());
    Ok(())
}

pub fn cmd_gradcheck(common: &CommonArgs) -> Result<()> {
    let cfg = resolve_config(common, None)?;
    prepare_outdir(&common.out, &cfg.canonical_text())?;
    let checks = gradcheck_suite()?;
    let mut failed = Vec::new();
    let mut report = String::from("op,max_rel_err,tolerance,status\n");
    for c in &checks {
        let status = if c.passed() { "pass" } else { "FAIL" };
        println!("{:32} {:>12.3e}  {}", c.name, c.max_rel_err, status);
        let _ = writeln!(report, "{},{},{},{}", c.name, fmt_g17(c.max_rel_err), fmt_g17(GRADCHECK_TOL), status);
        if !c.passed() {
            failed.push(c.name);
        }
    }
    std::fs::write(common.out.join("gradcheck.csv"), report)?;
    if !failed.is_empty() {
        return Err(Error::Verification(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

pub fn cmd_bench(common: &CommonArgs, lengths: &str, reps: usize) -> Result<()> {
    let cfg = resolve_config(common, None)?;
    prepare_outdir(&common.out, &cfg.canonical_text())?;
    let lengths: Vec<usize> = lengths
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad length `{s}` in --lengths")))
        })
        .collect::<Result<_>>()?;
    if lengths.is_empty() {
        return Err(Error::Config("--lengths must name at least one length".to_string()));
    }
    let ssm = SsmConfig { d_model: 4, d_state: 8, d_conv: 3, expand: 2, ..Default::default() };
    // correctness gate before any timing
    scan_equivalence(&lengths, 3, &ssm, 1e-10)?;
    let rows = bench_scan(&lengths, reps, &ssm, 1e-10)?;
    let mut out = String::from("L,seq_ns,par_ns,speedup\n");
    for r in &rows {
        let _ = writeln!(out, "{},{},{},{}", r.length, r.seq_ns, r.par_ns, fmt_g17(r.speedup()));
        println!("L={:6} seq {:>12} ns  par {:>12} ns  speedup {:.3}", r.length, r.seq_ns, r.par_ns, r.speedup());
    }
    std::fs::write(common.out.join("bench.csv"), out)?;
    Ok(())
}
