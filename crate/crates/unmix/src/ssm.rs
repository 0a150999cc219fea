//! Selective state-space primitives: ZOH discretization, sequential and
//! work-efficient parallel scans, and the gated Mamba / bidirectional Mamba
//! blocks both unmixing encoders are built from.
//!
//! The recurrence is diagonal per inner channel: for every (channel i, state j)
//!   h_t[i,j] = exp(Δ_t[i]·A[i,j]) · h_{t−1}[i,j] + Δ_t[i]·B_t[j]·u_t[i]
//!   y_t[i]   = Σ_j C_t[j]·h_t[i,j] + D[i]·u_t[i]
//! with Δ, B, C produced from the input at each step (the S6 selection rule).

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{linear, matmul_raw, Activation, CustomOp, Tape, Tensor, Var};

/// Block hyperparameters. `d_inner = expand · d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    /// Learnable skip term y += D ⊙ u. Off for ablations.
    pub use_skip: bool,
    /// Run the tape-recorded scan with the parallel engine instead of the
    /// sequential one. Both compute the same function.
    pub parallel_scan: bool,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig { d_model: 32, d_state: 16, d_conv: 4, expand: 2, use_skip: true, parallel_scan: false }
    }
}

impl SsmConfig {
    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model < 1 || self.d_state < 1 || self.d_conv < 1 || self.expand < 1 {
            return Err(Error::Config(format!(
                "ssm extents must all be >= 1: d_model={} d_state={} d_conv={} expand={}",
                self.d_model, self.d_state, self.d_conv, self.expand
            )));
        }
        Ok(())
    }
}

/// One block's learnables. A is stored as `a_log` with A = −exp(a_log), so the
/// state matrix is strictly negative and the discretized factor stays in (0,1).
#[derive(Debug, Clone)]
pub struct SsmParams {
    pub in_proj_w: Tensor,  // d_model × 2·d_inner
    pub in_proj_b: Tensor,  // 2·d_inner
    pub conv_w: Tensor,     // d_conv × d_inner (depthwise)
    pub conv_b: Tensor,     // d_inner
    pub delta_w: Tensor,    // d_inner × 1
    pub delta_b: Tensor,    // d_inner
    pub b_w: Tensor,        // d_inner × d_state
    pub c_w: Tensor,        // d_inner × d_state
    pub a_log: Tensor,      // d_inner × d_state
    pub d_skip: Tensor,     // d_inner
    pub out_proj_w: Tensor, // d_inner × d_model
    pub out_proj_b: Tensor, // d_model
    pub cfg: SsmConfig,
}

fn uniform_fan_in(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

/// Inverse of softplus: x such that ln(1 + e^x) = y.
fn softplus_inv(y: f64) -> f64 {
    y.exp_m1().ln()
}

impl SsmParams {
    pub fn init(cfg: &SsmConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let dm = cfg.d_model;
        let di = cfg.d_inner();
        let ds = cfg.d_state;
        // A rows initialized to −(1..d_state), S4 style.
        let a_log = Tensor::from_fn(&[di, ds], |idx| ((idx % ds + 1) as f64).ln());
        // softplus(delta_b) uniform in [1e-3, 1e-1] keeps the decay factor
        // away from both 0 and 1 at the start.
        let delta_b = Tensor::from_fn(&[di], |_| softplus_inv(rng.gen_range(1e-3..1e-1)));
        Ok(SsmParams {
            in_proj_w: uniform_fan_in(rng, &[dm, 2 * di], dm),
            in_proj_b: Tensor::zeros(&[2 * di]),
            conv_w: uniform_fan_in(rng, &[cfg.d_conv, di], cfg.d_conv),
            conv_b: Tensor::zeros(&[di]),
            delta_w: uniform_fan_in(rng, &[di, 1], di),
            delta_b,
            b_w: uniform_fan_in(rng, &[di, ds], di),
            c_w: uniform_fan_in(rng, &[di, ds], di),
            a_log,
            d_skip: Tensor::ones(&[di]),
            out_proj_w: uniform_fan_in(rng, &[di, dm], di),
            out_proj_b: Tensor::zeros(&[dm]),
            cfg: cfg.clone(),
        })
    }

    pub fn for_each(&self, prefix: &str, f: &mut impl FnMut(String, &Tensor)) {
        f(format!("{prefix}.in_proj_w"), &self.in_proj_w);
        f(format!("{prefix}.in_proj_b"), &self.in_proj_b);
        f(format!("{prefix}.conv_w"), &self.conv_w);
        f(format!("{prefix}.conv_b"), &self.conv_b);
        f(format!("{prefix}.delta_w"), &self.delta_w);
        f(format!("{prefix}.delta_b"), &self.delta_b);
        f(format!("{prefix}.b_w"), &self.b_w);
        f(format!("{prefix}.c_w"), &self.c_w);
        f(format!("{prefix}.a_log"), &self.a_log);
        if self.cfg.use_skip {
            f(format!("{prefix}.d_skip"), &self.d_skip);
        }
        f(format!("{prefix}.out_proj_w"), &self.out_proj_w);
        f(format!("{prefix}.out_proj_b"), &self.out_proj_b);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.in_proj_w"), &mut self.in_proj_w);
        f(format!("{prefix}.in_proj_b"), &mut self.in_proj_b);
        f(format!("{prefix}.conv_w"), &mut self.conv_w);
        f(format!("{prefix}.conv_b"), &mut self.conv_b);
        f(format!("{prefix}.delta_w"), &mut self.delta_w);
        f(format!("{prefix}.delta_b"), &mut self.delta_b);
        f(format!("{prefix}.b_w"), &mut self.b_w);
        f(format!("{prefix}.c_w"), &mut self.c_w);
        f(format!("{prefix}.a_log"), &mut self.a_log);
        if self.cfg.use_skip {
            f(format!("{prefix}.d_skip"), &mut self.d_skip);
        }
        f(format!("{prefix}.out_proj_w"), &mut self.out_proj_w);
        f(format!("{prefix}.out_proj_b"), &mut self.out_proj_b);
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> SsmVars {
        SsmVars {
            in_proj_w: tape.leaf(self.in_proj_w.clone(), trainable),
            in_proj_b: tape.leaf(self.in_proj_b.clone(), trainable),
            conv_w: tape.leaf(self.conv_w.clone(), trainable),
            conv_b: tape.leaf(self.conv_b.clone(), trainable),
            delta_w: tape.leaf(self.delta_w.clone(), trainable),
            delta_b: tape.leaf(self.delta_b.clone(), trainable),
            b_w: tape.leaf(self.b_w.clone(), trainable),
            c_w: tape.leaf(self.c_w.clone(), trainable),
            a_log: tape.leaf(self.a_log.clone(), trainable),
            d_skip: if self.cfg.use_skip {
                Some(tape.leaf(self.d_skip.clone(), trainable))
            } else {
                None
            },
            out_proj_w: tape.leaf(self.out_proj_w.clone(), trainable),
            out_proj_b: tape.leaf(self.out_proj_b.clone(), trainable),
            cfg: self.cfg.clone(),
        }
    }
}

/// Tape-bound view of [`SsmParams`].
pub struct SsmVars {
    pub in_proj_w: Var,
    pub in_proj_b: Var,
    pub conv_w: Var,
    pub conv_b: Var,
    pub delta_w: Var,
    pub delta_b: Var,
    pub b_w: Var,
    pub c_w: Var,
    pub a_log: Var,
    pub d_skip: Option<Var>,
    pub out_proj_w: Var,
    pub out_proj_b: Var,
    pub cfg: SsmConfig,
}

impl SsmVars {
    /// Visit every bound parameter in the same order as [`SsmParams::for_each`].
    pub fn for_each_var(&self, f: &mut impl FnMut(Var)) {
        f(self.in_proj_w);
        f(self.in_proj_b);
        f(self.conv_w);
        f(self.conv_b);
        f(self.delta_w);
        f(self.delta_b);
        f(self.b_w);
        f(self.c_w);
        f(self.a_log);
        if let Some(d) = self.d_skip {
            f(d);
        }
        f(self.out_proj_w);
        f(self.out_proj_b);
    }
}

/// Zero-order-hold step for one diagonal element: exact exponential on the
/// state path, Euler rule on the input path.
pub fn zoh_discretize(a: f64, delta: f64, b: f64, x: f64) -> Result<(f64, f64)> {
    if a >= 0.0 {
        return Err(Error::numeric(
            "zoh_discretize",
            format!("state coefficient must be strictly negative for stability, got {a}"),
        ));
    }
    if delta <= 0.0 {
        return Err(Error::numeric("zoh_discretize", format!("step size must be positive, got {delta}")));
    }
    Ok(((delta * a).exp(), delta * b * x))
}

// ── Input-dependent parameter computation ───────────────────────────────

/// Δ, B, C for every step, from the scan input. Value-level twin of the
/// projections that `scan_on_tape` records.
fn compute_dbc(u: &Tensor, p: &SsmParams) -> (Tensor, Tensor, Tensor) {
    let l = u.shape()[0];
    let di = p.cfg.d_inner();
    let ds = p.cfg.d_state;
    let s = matmul_raw(u.data(), p.delta_w.data(), l, di, 1);
    let mut delta = vec![0.0; l * di];
    for t in 0..l {
        for i in 0..di {
            delta[t * di + i] = crate::tensor::stable_softplus(s[t] + p.delta_b.data()[i]);
        }
    }
    let b = matmul_raw(u.data(), p.b_w.data(), l, di, ds);
    let c = matmul_raw(u.data(), p.c_w.data(), l, di, ds);
    (
        Tensor::from_parts(vec![l, di], delta),
        Tensor::from_parts(vec![l, ds], b),
        Tensor::from_parts(vec![l, ds], c),
    )
}

fn neg_exp(a_log: &Tensor) -> Tensor {
    Tensor::from_parts(a_log.shape().to_vec(), a_log.data().iter().map(|v| -v.exp()).collect())
}

// ── Scan cores ──────────────────────────────────────────────────────────

struct ScanOut {
    y: Tensor,
    /// h after each step, L × d_inner × d_state. Kept for the backward rule.
    h_traj: Vec<f64>,
}

fn scan_core_seq(
    u: &Tensor,
    delta: &Tensor,
    b: &Tensor,
    c: &Tensor,
    a: &Tensor,
    d_skip: Option<&Tensor>,
) -> Result<ScanOut> {
    let l = u.shape()[0];
    let di = u.shape()[1];
    let ds = b.shape()[1];
    let mut h = vec![0.0; di * ds];
    let mut h_traj = vec![0.0; l * di * ds];
    let mut y = vec![0.0; l * di];
    for t in 0..l {
        for i in 0..di {
            let dt = delta.data()[t * di + i];
            let ut = u.data()[t * di + i];
            let mut acc = 0.0;
            for j in 0..ds {
                let (a_bar, bx_bar) = zoh_discretize(a.data()[i * ds + j], dt, b.data()[t * ds + j], ut)
                    .map_err(|e| Error::numeric("selective_scan", format!("step {t}: {e}")))?;
                let hv = a_bar * h[i * ds + j] + bx_bar;
                h[i * ds + j] = hv;
                acc += c.data()[t * ds + j] * hv;
            }
            if let Some(d) = d_skip {
                acc += d.data()[i] * ut;
            }
            y[t * di + i] = acc;
        }
        let off = t * di * ds;
        h_traj[off..off + di * ds].copy_from_slice(&h);
        if let Some(bad) = h.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "selective_scan",
                format!("non-finite state at step {t}, element {bad}"),
            ));
        }
    }
    Ok(ScanOut { y: Tensor::from_parts(vec![l, di], y), h_traj })
}

/// Work-efficient inclusive scan over the affine maps h ↦ ā⊙h + k̄, composed
/// as (ā₂,k̄₂)∘(ā₁,k̄₁) = (ā₂ā₁, ā₂k̄₁+k̄₂). Up-sweep then down-sweep, with a
/// fixed combine order for reproducibility. Since h₀ = 0, the state after
/// step t is exactly the offset part of the composed prefix.
fn scan_core_parallel(
    u: &Tensor,
    delta: &Tensor,
    b: &Tensor,
    c: &Tensor,
    a: &Tensor,
    d_skip: Option<&Tensor>,
) -> Result<ScanOut> {
    let l = u.shape()[0];
    let di = u.shape()[1];
    let ds = b.shape()[1];
    let m = di * ds;

    // per-step affine elements
    let mut coef = vec![0.0; l * m];
    let mut off = vec![0.0; l * m];
    for t in 0..l {
        for i in 0..di {
            let dt = delta.data()[t * di + i];
            let ut = u.data()[t * di + i];
            for j in 0..ds {
                let (a_bar, bx_bar) = zoh_discretize(a.data()[i * ds + j], dt, b.data()[t * ds + j], ut)
                    .map_err(|e| Error::numeric("selective_scan", format!("step {t}: {e}")))?;
                coef[t * m + i * ds + j] = a_bar;
                off[t * m + i * ds + j] = bx_bar;
            }
        }
    }

    // compose element `dst` := element `dst` ∘ element `src` (src earlier)
    let compose = |coef: &mut [f64], off: &mut [f64], src: usize, dst: usize| {
        let (s, d) = (src * m, dst * m);
        for e in 0..m {
            off[d + e] += coef[d + e] * off[s + e];
            coef[d + e] *= coef[s + e];
        }
    };

    // up-sweep
    let mut stride = 1;
    while stride < l {
        let mut i = 2 * stride - 1;
        while i < l {
            compose(&mut coef, &mut off, i - stride, i);
            i += 2 * stride;
        }
        stride *= 2;
    }
    // down-sweep
    stride /= 2;
    while stride >= 1 {
        let mut i = 3 * stride - 1;
        while i < l {
            compose(&mut coef, &mut off, i - stride, i);
            i += 2 * stride;
        }
        if stride == 1 {
            break;
        }
        stride /= 2;
    }

    // h_t is the prefix offset; contract with C and add the skip term.
    let mut y = vec![0.0; l * di];
    for t in 0..l {
        for i in 0..di {
            let mut acc = 0.0;
            for j in 0..ds {
                acc += c.data()[t * ds + j] * off[t * m + i * ds + j];
            }
            if let Some(d) = d_skip {
                acc += d.data()[i] * u.data()[t * di + i];
            }
            y[t * di + i] = acc;
        }
        if let Some(bad) = off[t * m..(t + 1) * m].iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "selective_scan",
                format!("non-finite state at step {t}, element {bad}"),
            ));
        }
    }
    Ok(ScanOut { y: Tensor::from_parts(vec![l, di], y), h_traj: off })
}

// ── Public scan entry points ────────────────────────────────────────────

fn check_scan_input(u: &Tensor, p: &SsmParams) -> Result<()> {
    if u.rank() != 2 || u.shape()[1] != p.cfg.d_inner() {
        return Err(Error::dimension(
            "selective_scan",
            format!("expected L×{} input, got {:?}", p.cfg.d_inner(), u.shape()),
        ));
    }
    Ok(())
}

/// Sequential recurrence over the full selective pipeline: Δ/B/C from the
/// input, ZOH discretization, state update, readout.
pub fn selective_scan_seq(u: &Tensor, p: &SsmParams) -> Result<Tensor> {
    check_scan_input(u, p)?;
    let (delta, b, c) = compute_dbc(u, p);
    let a = neg_exp(&p.a_log);
    let skip = p.cfg.use_skip.then_some(&p.d_skip);
    Ok(scan_core_seq(u, &delta, &b, &c, &a, skip)?.y)
}

/// Same function as [`selective_scan_seq`], evaluated with the up/down-sweep
/// associative scan.
pub fn selective_scan_parallel(u: &Tensor, p: &SsmParams) -> Result<Tensor> {
    check_scan_input(u, p)?;
    let (delta, b, c) = compute_dbc(u, p);
    let a = neg_exp(&p.a_log);
    let skip = p.cfg.use_skip.then_some(&p.d_skip);
    Ok(scan_core_parallel(u, &delta, &b, &c, &a, skip)?.y)
}

// ── Tape integration ────────────────────────────────────────────────────

/// Recorded scan step. Inputs are [u, Δ, B, C, A] plus the skip vector when
/// present; the state trajectory is kept from the forward pass and the
/// adjoint recurrence runs backward over it.
#[derive(Debug)]
struct SelectiveScanOp {
    d_inner: usize,
    d_state: usize,
    has_skip: bool,
    h_traj: Vec<f64>,
}

impl CustomOp for SelectiveScanOp {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, g: &[f64], inputs: &[&Tensor]) -> Vec<Option<Vec<f64>>> {
        let (di, ds) = (self.d_inner, self.d_state);
        let u = inputs[0].data();
        let delta = inputs[1].data();
        let b = inputs[2].data();
        let c = inputs[3].data();
        let a = inputs[4].data();
        let d_skip = self.has_skip.then(|| inputs[5].data());
        let l = inputs[0].shape()[0];
        let m = di * ds;

        let mut du = vec![0.0; l * di];
        let mut ddelta = vec![0.0; l * di];
        let mut db = vec![0.0; l * ds];
        let mut dc = vec![0.0; l * ds];
        let mut da = vec![0.0; m];
        let mut dd = vec![0.0; di];

        // carry[i,j] = λ_{t+1}[i,j] · ābar_{t+1}[i,j]
        let mut carry = vec![0.0; m];
        for t in (0..l).rev() {
            for i in 0..di {
                let gt = g[t * di + i];
                let ut = u[t * di + i];
                let dt = delta[t * di + i];
                let mut ddelta_acc = 0.0;
                let mut du_acc = 0.0;
                for j in 0..ds {
                    let e = i * ds + j;
                    let lam = gt * c[t * ds + j] + carry[e];
                    let h_prev = if t > 0 { self.h_traj[(t - 1) * m + e] } else { 0.0 };
                    let a_bar = (dt * a[e]).exp();
                    let bt = b[t * ds + j];

                    ddelta_acc += lam * (h_prev * a_bar * a[e] + bt * ut);
                    da[e] += lam * h_prev * a_bar * dt;
                    db[t * ds + j] += lam * dt * ut;
                    dc[t * ds + j] += gt * self.h_traj[t * m + e];
                    du_acc += lam * dt * bt;
                    carry[e] = lam * a_bar;
                }
                if let Some(d) = d_skip {
                    du_acc += gt * d[i];
                    dd[i] += gt * ut;
                }
                ddelta[t * di + i] = ddelta_acc;
                du[t * di + i] = du_acc;
            }
        }

        let mut out = vec![Some(du), Some(ddelta), Some(db), Some(dc), Some(da)];
        if self.has_skip {
            out.push(Some(dd));
        }
        out
    }
}

/// Record the selective scan on the tape: projections as ordinary ops, the
/// recurrence itself as one custom op.
pub fn scan_on_tape(tape: &mut Tape, u: Var, v: &SsmVars) -> Result<Var> {
    let di = v.cfg.d_inner();
    if tape.shape(u).len() != 2 || tape.shape(u)[1] != di {
        return Err(Error::dimension(
            "selective_scan",
            format!("expected L×{di} input, got {:?}", tape.shape(u)),
        ));
    }
    let s = tape.matmul(u, v.delta_w)?;
    let s_wide = tape.broadcast_col(s, di)?;
    let delta_pre = tape.add_bias(s_wide, v.delta_b)?;
    let delta = tape.softplus_op(delta_pre)?;
    let b = tape.matmul(u, v.b_w)?;
    let c = tape.matmul(u, v.c_w)?;
    let a_exp = tape.exp(v.a_log)?;
    let a = tape.scale(a_exp, -1.0)?;

    let skip_tensor;
    let skip = match v.d_skip {
        Some(d) => {
            skip_tensor = tape.value(d).clone();
            Some(&skip_tensor)
        }
        None => None,
    };
    let core = if v.cfg.parallel_scan { scan_core_parallel } else { scan_core_seq };
    let out = core(tape.value(u), tape.value(delta), tape.value(b), tape.value(c), tape.value(a), skip)?;

    let mut inputs = vec![u, delta, b, c, a];
    if let Some(d) = v.d_skip {
        inputs.push(d);
    }
    tape.custom(
        out.y,
        inputs,
        Box::new(SelectiveScanOp {
            d_inner: di,
            d_state: v.cfg.d_state,
            has_skip: v.d_skip.is_some(),
            h_traj: out.h_traj,
        }),
    )
}

/// Gated Mamba block: expand, causal depthwise conv, SiLU, selective scan,
/// multiplicative gate, project back. `gate` is the activation on the gate
/// branch (SiLU in the temporal encoder, ReLU inside Bi-Mamba).
pub fn mamba_forward(tape: &mut Tape, x: Var, v: &SsmVars, gate: Activation) -> Result<Var> {
    let dm = v.cfg.d_model;
    let di = v.cfg.d_inner();
    if tape.shape(x).len() != 2 || tape.shape(x)[1] != dm {
        return Err(Error::dimension(
            "mamba_forward",
            format!("expected L×{dm} input, got {:?}", tape.shape(x)),
        ));
    }
    let xz = linear(tape, x, v.in_proj_w, v.in_proj_b)?;
    let u = tape.slice_cols(xz, 0, di)?;
    let z = tape.slice_cols(xz, di, di)?;
    let u_conv = tape.causal_conv1d(u, v.conv_w, v.conv_b)?;
    let u_act = tape.activation(u_conv, Activation::Silu)?;
    let y = scan_on_tape(tape, u_act, v)?;
    let g = tape.activation(z, gate)?;
    let gated = tape.mul(y, g)?;
    linear(tape, gated, v.out_proj_w, v.out_proj_b)
}

/// Tape-bound fusion layer of the bidirectional block.
pub struct BiFuseVars {
    pub w: Var,
    pub b: Var,
}

/// Bidirectional block: one branch over the sequence, one over its reversal
/// (un-reversed afterwards), summed and linearly fused. Branch gates are ReLU.
pub fn bimamba_forward(
    tape: &mut Tape,
    x: Var,
    fwd: &SsmVars,
    bwd: &SsmVars,
    fuse: &BiFuseVars,
) -> Result<Var> {
    let x_f = mamba_forward(tape, x, fwd, Activation::Relu)?;
    let x_rev = tape.reverse_rows(x)?;
    let x_b_rev = mamba_forward(tape, x_rev, bwd, Activation::Relu)?;
    let x_b = tape.reverse_rows(x_b_rev)?;
    let summed = tape.add(x_f, x_b)?;
    linear(tape, summed, fuse.w, fuse.b)
}
