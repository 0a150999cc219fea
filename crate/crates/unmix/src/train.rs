//! Optimization loop: Adam with bias correction, deterministic shuffled
//! batching, early stopping on validation loss, prediction metrics, and a
//! checksummed binary checkpoint format.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::model::{dual_l1_loss, Model, ModelVars};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    /// Global-norm gradient clip; `None` switches clipping off.
    pub clip_norm: Option<f64>,
    /// Halve the learning rate when validation loss fails to improve.
    pub lr_halve_on_plateau: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 10,
            batch_size: 32,
            patience: 3,
            seed: 0,
            clip_norm: Some(5.0),
            lr_halve_on_plateau: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.eps <= 0.0 {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config(format!(
                "epochs and batch_size must be >= 1, got {} and {}",
                self.epochs, self.batch_size
            )));
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// First/second moment buffers plus the step counter, aligned with the
/// model's parameter walk order.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(model: &Model) -> OptimState {
        let mut m = Vec::new();
        model.for_each_param(&mut |_, t| m.push(Tensor::zeros(t.shape())));
        OptimState { step: 0, m: m.clone(), v: m }
    }
}

/// In-place Adam update for one flat parameter. `step` is the post-increment
/// step count (1 on the first update).
pub fn adam_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..theta.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One optimizer step over every model parameter. `grads` must align with the
/// parameter walk; non-finite gradients abort, naming the parameter.
pub fn adam_step(
    model: &mut Model,
    grads: &[Tensor],
    state: &mut OptimState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut count = 0;
    model.for_each_param(&mut |_, _| count += 1);
    if grads.len() != count {
        return Err(Error::dimension(
            "adam_step",
            format!("{} gradients for {count} parameters", grads.len()),
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            let mut name = String::new();
            let mut k = 0;
            model.for_each_param(&mut |n, _| {
                if k == i {
                    name = n;
                }
                k += 1;
            });
            return Err(Error::numeric("adam_step", format!("non-finite gradient for parameter {name}")));
        }
    }
    state.step += 1;
    let step = state.step;
    let mut idx = 0;
    model.for_each_param_mut(&mut |_, t| {
        adam_update(
            t.data_mut(),
            grads[idx].data(),
            state.m[idx].data_mut(),
            state.v[idx].data_mut(),
            step,
            lr,
            cfg.beta1,
            cfg.beta2,
            cfg.eps,
        );
        idx += 1;
    });
    Ok(())
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

pub(crate) fn walk_vars(vars: &ModelVars, f: &mut impl FnMut(Var)) {
    // mirrors Model::for_each_param ordering exactly
    if let Some(enc) = &vars.temporal {
        f(enc.embed_w);
        f(enc.embed_b);
        for b in &enc.blocks {
            b.for_each_var(f);
        }
        f(enc.head_w);
        f(enc.head_b);
        f(vars.a_c.expect("channel path factors bound"));
        f(vars.a_p.expect("channel path factors bound"));
    }
    if let Some(enc) = &vars.channel {
        f(enc.embed_w);
        f(enc.embed_b);
        for b in &enc.blocks {
            b.fwd.for_each_var(f);
            b.bwd.for_each_var(f);
            f(b.fuse.w);
            f(b.fuse.b);
        }
        f(enc.head_w);
        f(enc.head_b);
        f(vars.s_t_raw.expect("time path factors bound"));
        f(vars.s_p_raw.expect("time path factors bound"));
    }
    f(vars.recon_head.w);
    f(vars.recon_head.b);
    f(vars.pred_head.w);
    f(vars.pred_head.b);
}

/// Gradients for every bound parameter after a backward pass, aligned with
/// the model's parameter walk. Zeros where no gradient flowed.
pub fn collect_grads(tape: &Tape, vars: &ModelVars) -> Vec<Tensor> {
    let mut grads = Vec::new();
    walk_vars(vars, &mut |v| {
        grads.push(match tape.grad(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        });
    });
    grads
}

/// Forward + loss + backward for one window; returns (loss, grads aligned
/// with the parameter walk).
pub fn window_loss_and_grads(
    model: &Model,
    hist: &Tensor,
    future: &Tensor,
    lambda1: f64,
    lambda2: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let out = model.forward(&mut tape, &vars, hist)?;
    let hist_leaf = tape.leaf(hist.clone(), false);
    let fut_leaf = tape.leaf(future.clone(), false);
    let loss = dual_l1_loss(&mut tape, &out, hist_leaf, fut_leaf, lambda1, lambda2)?;
    let loss_val = tape.value(loss).item()?;
    tape.backward(loss)?;

    let mut grads = Vec::new();
    walk_vars(&vars, &mut |v| {
        grads.push(match tape.grad(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        });
    });
    Ok((loss_val, grads))
}

/// Driver state for one training run: optimizer buffers, the shuffling RNG,
/// and the current learning-rate scale.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub state: OptimState,
    pub rng: ChaCha8Rng,
    pub lr_scale: f64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: &Model) -> Result<Trainer> {
        cfg.validate()?;
        Ok(Trainer {
            state: OptimState::new(model),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            lr_scale: 1.0,
        })
    }

    /// One pass over the training windows in a fresh shuffled order:
    /// forward, loss, backward, clip, Adam per batch. Returns the mean
    /// training loss.
    pub fn train_epoch(&mut self, model: &mut Model, windows: &WindowSet) -> Result<f64> {
        if windows.is_empty() {
            return Err(Error::Config("cannot train on an empty window set".to_string()));
        }
        let mut order: Vec<usize> = (0..windows.len()).collect();
        // Fisher-Yates with the trainer's own stream, so epoch order is a
        // pure function of (seed, draws so far)
        for i in (1..order.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let lambda1 = model.cfg.lambda1;
        let lambda2 = model.cfg.lambda2;
        let mut total_loss = 0.0;
        for (batch_idx, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let mut batch_grads: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            for &w in batch {
                let (loss, grads) =
                    window_loss_and_grads(model, &windows.hist(w), &windows.future(w), lambda1, lambda2)
                        .map_err(|e| {
                            Error::numeric(
                                "train_epoch",
                                format!("batch {batch_idx}, window {w}: {e}"),
                            )
                        })?;
                batch_loss += loss;
                match &mut batch_grads {
                    None => batch_grads = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (av, gv) in a.data_mut().iter_mut().zip(g.data()) {
                                *av += gv;
                            }
                        }
                    }
                }
            }
            let mut grads = batch_grads.expect("non-empty batch");
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            if let Some(max_norm) = self.cfg.clip_norm {
                clip_global_norm(&mut grads, max_norm);
            }
            adam_step(model, &grads, &mut self.state, self.cfg.lr * self.lr_scale, &self.cfg)?;
            total_loss += batch_loss;
        }
        Ok(total_loss / windows.len() as f64)
    }
}

/// MSE and MAE over predicted cells, standardized scale, prediction path only.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub per_horizon: Option<Vec<(f64, f64)>>,
}

pub fn evaluate(model: &Model, windows: &WindowSet, per_horizon: bool) -> Result<Metrics> {
    if windows.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty window set".to_string()));
    }
    let h = windows.h;
    let n = windows.segment.shape()[1];
    let mut sq = vec![0.0f64; h];
    let mut ab = vec![0.0f64; h];
    for i in 0..windows.len() {
        let hist = windows.hist(i);
        let future = windows.future(i);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let out = model.forward(&mut tape, &vars, &hist)?;
        let pred = tape.value(out.pred);
        for t in 0..h {
            for c in 0..n {
                let d = pred.get2(t, c) - future.get2(t, c);
                sq[t] += d * d;
                ab[t] += d.abs();
            }
        }
    }
    let cells_per_h = (windows.len() * n) as f64;
    let mse = sq.iter().sum::<f64>() / (cells_per_h * h as f64);
    let mae = ab.iter().sum::<f64>() / (cells_per_h * h as f64);
    let per_horizon = per_horizon.then(|| {
        sq.iter()
            .zip(&ab)
            .map(|(s, a)| (s / cells_per_h, a / cells_per_h))
            .collect()
    });
    Ok(Metrics { mse, mae, per_horizon })
}

/// Mean dual L1 over a window set, for validation tracking.
pub fn mean_loss(model: &Model, windows: &WindowSet) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Config("cannot score an empty window set".to_string()));
    }
    let mut total = 0.0;
    for i in 0..windows.len() {
        let hist = windows.hist(i);
        let future = windows.future(i);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let out = model.forward(&mut tape, &vars, &hist)?;
        let hist_leaf = tape.leaf(hist.clone(), false);
        let fut_leaf = tape.leaf(future.clone(), false);
        let loss = dual_l1_loss(&mut tape, &out, hist_leaf, fut_leaf, model.cfg.lambda1, model.cfg.lambda2)?;
        total += tape.value(loss).item()?;
    }
    Ok(total / windows.len() as f64)
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
}

#[derive(Debug)]
pub struct FitResult {
    /// Parameters from the best-validation epoch, not the last one.
    pub best_model: Model,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

/// Full training run with early stopping after `patience` consecutive epochs
/// without validation improvement.
pub fn fit(model: &mut Model, trainer: &mut Trainer, train: &WindowSet, val: &WindowSet) -> Result<FitResult> {
    let mut best_model = model.clone();
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut bad_epochs = 0;
    let mut log = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=trainer.cfg.epochs {
        let train_loss = trainer.train_epoch(model, train)?;
        let val_loss = mean_loss(model, val)?;
        let metrics = evaluate(model, val, false)?;
        log.push(EpochLog { epoch, train_loss, val_loss, val_mse: metrics.mse, val_mae: metrics.mae });

        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best_epoch = epoch;
            best_model = model.clone();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if trainer.cfg.lr_halve_on_plateau {
                trainer.lr_scale *= 0.5;
            }
            if bad_epochs >= trainer.cfg.patience && trainer.cfg.patience > 0 {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(FitResult { best_model, best_val_loss, best_epoch, log, stopped_early })
}

// ── Checkpoints ─────────────────────────────────────────────────────────

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTSU";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk training state: a canonical key=value text block (model config,
/// optimizer scalars, RNG position, best validation loss) plus every named
/// tensor — model parameters and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config_text: String,
    pub params: Vec<(String, Tensor)>,
}

fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

pub fn checkpoint_save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut body = Vec::new();
    body.extend_from_slice(CHECKPOINT_MAGIC);
    body.extend_from_slice(&ckpt.version.to_le_bytes());
    let cfg_bytes = ckpt.config_text.as_bytes();
    body.extend_from_slice(&(cfg_bytes.len() as u32).to_le_bytes());
    body.extend_from_slice(cfg_bytes);
    for (name, t) in &ckpt.params {
        let nb = name.as_bytes();
        body.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        body.extend_from_slice(nb);
        body.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            body.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, body)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data("checkpoint truncated mid-record".to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 {
        return Err(Error::Data(format!("{}: too short to be a checkpoint", path.display())));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    let actual = crc32(body);
    if stored != actual {
        return Err(Error::Data(format!(
            "{}: checksum mismatch (stored {stored:#010x}, computed {actual:#010x}); refusing partial state",
            path.display()
        )));
    }

    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Data(format!("{}: bad magic; not a checkpoint file", path.display())));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "{}: incompatible checkpoint version {version}, this build reads {CHECKPOINT_VERSION}",
            path.display()
        )));
    }
    let cfg_len = r.u32()? as usize;
    let config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|_| Error::Data("checkpoint config text is not UTF-8".to_string()))?;

    let mut params = Vec::new();
    while r.pos < body.len() {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Data("checkpoint parameter name is not UTF-8".to_string()))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")));
        }
        params.push((name, Tensor::new(shape, data)?));
    }
    Ok(Checkpoint { version, config_text, params })
}

/// Bundle the model and optimizer into checkpoint tensors: model parameters
/// under their own names, moments under `adam.m.` / `adam.v.` prefixes.
pub fn training_state_params(model: &Model, state: &OptimState) -> Vec<(String, Tensor)> {
    let mut params = model.named_params();
    let mut idx = 0;
    model.for_each_param(&mut |name, _| {
        params.push((format!("adam.m.{name}"), state.m[idx].clone()));
        params.push((format!("adam.v.{name}"), state.v[idx].clone()));
        idx += 1;
    });
    params
}

/// Restore model parameters and optimizer moments by name. Every model
/// parameter must be present; moments default to zero when absent (a
/// weights-only checkpoint).
pub fn restore_training_state(model: &mut Model, state: &mut OptimState, params: &[(String, Tensor)]) -> Result<()> {
    let lookup: std::collections::BTreeMap<&str, &Tensor> =
        params.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut missing = Vec::new();
    let mut shape_err = None;
    model.for_each_param_mut(&mut |name, t| {
        match lookup.get(name.as_str()) {
            Some(loaded) => {
                if loaded.shape() != t.shape() {
                    shape_err.get_or_insert(format!(
                        "parameter {name}: checkpoint shape {:?} vs model shape {:?}",
                        loaded.shape(),
                        t.shape()
                    ));
                } else {
                    *t = (*loaded).clone();
                }
            }
            None => missing.push(name),
        }
    });
    if let Some(msg) = shape_err {
        return Err(Error::dimension("checkpoint_load", msg));
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!("checkpoint is missing parameters: {}", missing.join(", "))));
    }
    let mut idx = 0;
    let mut moment_err = None;
    model.for_each_param(&mut |name, _| {
        for (prefix, buf) in [("adam.m.", &mut state.m), ("adam.v.", &mut state.v)] {
            if let Some(loaded) = lookup.get(format!("{prefix}{name}").as_str()) {
                if loaded.shape() == buf[idx].shape() {
                    buf[idx] = (*loaded).clone();
                } else {
                    moment_err.get_or_insert(format!("moment {prefix}{name} has wrong shape"));
                }
            }
        }
        idx += 1;
    });
    if let Some(msg) = moment_err {
        return Err(Error::dimension("checkpoint_load", msg));
    }
    Ok(())
}
