//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured runtime. Run with `cargo test --test acceptance -- --nocapture`
//! to see the report.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unmix::data::{
    fit_apply_standardizer, split_series, synth_mixture, Split, SplitMode, SplitSpec, Standardizer,
    SynthMode, SynthSpec, WindowSet,
};
use unmix::model::{
    channel_encode, decode_channel, decode_time, dual_l1_loss, patchify, temporal_encode, Model,
    ModelConfig, PathMode,
};
use unmix::ssm::SsmConfig;
use unmix::tensor::{Tape, Tensor};
use unmix::train::{
    adam_step, clip_global_norm, evaluate, fit, window_loss_and_grads, OptimState, TrainConfig, Trainer,
};
use unmix::verify::{gradcheck_suite, scan_equivalence, GRADCHECK_TOL};

fn report(criterion: &str, detail: &str, start: Instant) -> f64 {
    let secs = start.elapsed().as_secs_f64();
    println!("criterion {criterion}: PASS — {detail} ({secs:.1} s)");
    secs
}

/// Criterion 1 — gradient integrity: every registered op and the end-to-end
/// toy model (T=16, H=8, N=3, k1=k2=2) at rel err < 1e-4, eps = 1e-5; < 60 s.
#[test]
fn criterion_1_gradient_integrity() {
    let start = Instant::now();
    let checks = gradcheck_suite().expect("gradcheck suite must run");
    let mut worst = ("", 0.0f64);
    for c in &checks {
        assert!(
            c.passed(),
            "criterion 1: FAIL — {} rel err {:e} >= {:e}",
            c.name,
            c.max_rel_err,
            GRADCHECK_TOL
        );
        if c.max_rel_err > worst.1 {
            worst = (c.name, c.max_rel_err);
        }
    }
    for required in ["matmul", "softmax_axis", "causal_conv1d", "selective_scan", "full_model"] {
        assert!(checks.iter().any(|c| c.name == required), "suite must cover {required}");
    }
    let secs = report(
        "1",
        &format!("{} ops checked, worst {} at {:.2e}", checks.len(), worst.0, worst.1),
        start,
    );
    assert!(secs < 60.0, "criterion 1 exceeded its 60 s budget: {secs:.1} s");
}

/// Criterion 2 — scan equivalence: parallel vs sequential, max abs diff
/// < 1e-10 for L ∈ {1,2,3,17,256,1024,4096} over 100 seeds; < 120 s.
#[test]
fn criterion_2_scan_equivalence() {
    let start = Instant::now();
    let cfg = SsmConfig { d_model: 4, d_state: 8, d_conv: 3, expand: 2, ..Default::default() };
    let lengths = [1usize, 2, 3, 17, 256, 1024, 4096];
    let rows = scan_equivalence(&lengths, 100, &cfg, 1e-10).expect("engines must agree");
    let worst = rows.iter().map(|r| r.max_abs_diff).fold(0.0f64, f64::max);
    assert_eq!(rows.len(), lengths.len());
    let secs = report("2", &format!("7 lengths × 100 seeds, worst diff {worst:.2e}"), start);
    assert!(secs < 120.0, "criterion 2 exceeded its 120 s budget: {secs:.1} s");
}

fn simplex_audit(t: &Tensor, tol: f64, what: &str, step: usize) {
    let (k, cols) = (t.shape()[0], t.shape()[1]);
    for c in 0..cols {
        let mut sum = 0.0;
        for r in 0..k {
            let v = t.get2(r, c);
            assert!(v >= 0.0, "step {step}: {what} column {c} has negative entry {v:e}");
            sum += v;
        }
        assert!(
            (sum - 1.0).abs() < tol,
            "step {step}: {what} column {c} sums to {sum} (off by {:e})",
            (sum - 1.0).abs()
        );
    }
}

/// Criterion 3 — constraint suite: across a 50-step training run, S_c, S_t,
/// S_p columns stay nonnegative and sum to 1 within 1e-6; < 60 s.
#[test]
fn criterion_3_simplex_constraints_during_training() {
    let start = Instant::now();
    let cfg = ModelConfig {
        t: 48,
        h: 24,
        n: 4,
        k1: 3,
        k2: 3,
        patch_len: 8,
        patch_stride: 8,
        ssm: SsmConfig { d_model: 8, d_state: 4, d_conv: 2, expand: 2, ..Default::default() },
        ..Default::default()
    };
    let (series, _) = synth_mixture(&SynthSpec {
        mode: SynthMode::Dual,
        rows: 220,
        channels: cfg.n,
        k: 3,
        noise_sigma: 0.05,
        seed: 7,
    })
    .unwrap();
    let st = Standardizer::fit(&series.values).unwrap();
    let z = st.transform(&series.values).unwrap();
    let windows = WindowSet::new(z, cfg.t, cfg.h, 1).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = Model::init(&cfg, &mut rng).unwrap();
    let tcfg = TrainConfig { lr: 5e-3, ..Default::default() };
    let mut state = OptimState::new(&model);

    for step in 0..50 {
        let w = step % windows.len();
        let hist = windows.hist(w);
        let future = windows.future(w);

        // the forward pass under audit
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let out = model.forward(&mut tape, &vars, &hist).unwrap();
        simplex_audit(tape.value(out.s_c.unwrap()), 1e-6, "S_c", step);
        simplex_audit(tape.value(out.s_t.unwrap()), 1e-6, "S_t", step);
        simplex_audit(tape.value(out.s_p.unwrap()), 1e-6, "S_p", step);

        let hl = tape.leaf(hist.clone(), false);
        let fl = tape.leaf(future.clone(), false);
        let loss = dual_l1_loss(&mut tape, &out, hl, fl, 1.0, 1.0).unwrap();
        tape.backward(loss).unwrap();
        let mut grads = unmix::train::collect_grads(&tape, &vars);
        clip_global_norm(&mut grads, 5.0);
        adam_step(&mut model, &grads, &mut state, tcfg.lr, &tcfg).unwrap();
    }
    let secs = report("3", "S_c, S_t, S_p columns on the simplex at every one of 50 steps", start);
    assert!(secs < 60.0, "criterion 3 exceeded its 60 s budget: {secs:.1} s");
}

/// Criterion 4 — shared-factor contract: both paths consume the identical
/// S_c and A_t instances; perturbing A_c moves only the reconstruction; < 10 s.
#[test]
fn criterion_4_shared_factor_contract() {
    let start = Instant::now();
    let cfg = ModelConfig {
        t: 16,
        h: 8,
        n: 3,
        k1: 2,
        k2: 2,
        patch_len: 8,
        patch_stride: 8,
        ssm: SsmConfig { d_model: 4, d_state: 3, d_conv: 2, expand: 2, ..Default::default() },
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = Model::init(&cfg, &mut rng).unwrap();
    let x = Tensor::from_fn(&[cfg.t, cfg.n], |_| rng.gen_range(-1.0..1.0));

    // stage-level: one encoder output feeds both decode products
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let patches = patchify(&x, &cfg).unwrap();
    let s_c = temporal_encode(&mut tape, &patches, vars.temporal.as_ref().unwrap(), &cfg).unwrap();
    let a_t = channel_encode(&mut tape, &x, vars.channel.as_ref().unwrap(), &cfg).unwrap();
    let (xc_h, xc_f) = decode_channel(&mut tape, s_c, vars.a_c.unwrap(), vars.a_p.unwrap()).unwrap();
    let td = decode_time(&mut tape, a_t, vars.s_t_raw.unwrap(), vars.s_p_raw.unwrap()).unwrap();

    let eps = 1e-3;
    let bump_sc = tape.leaf(Tensor::full(&[cfg.k2, cfg.n], eps), false);
    let s_c_pert = tape.add(s_c, bump_sc).unwrap();
    let (xc_h2, xc_f2) = decode_channel(&mut tape, s_c_pert, vars.a_c.unwrap(), vars.a_p.unwrap()).unwrap();
    let dh = tape.value(xc_h2).max_abs_diff(tape.value(xc_h)).unwrap();
    let df = tape.value(xc_f2).max_abs_diff(tape.value(xc_f)).unwrap();
    assert!(dh > 0.0 && df > 0.0, "perturbing the shared S_c must move both path outputs");

    let bump_at = tape.leaf(Tensor::full(&[cfg.n, cfg.k1], eps), false);
    let a_t_pert = tape.add(a_t, bump_at).unwrap();
    let td2 = decode_time(&mut tape, a_t_pert, vars.s_t_raw.unwrap(), vars.s_p_raw.unwrap()).unwrap();
    assert!(tape.value(td2.hist).max_abs_diff(tape.value(td.hist)).unwrap() > 0.0);
    assert!(tape.value(td2.fut).max_abs_diff(tape.value(td.fut)).unwrap() > 0.0);
    drop(tape);

    // model-level: A_c only feeds the reconstruction, so pred is bitwise
    // unchanged when A_c moves, while recon is not
    let forward_once = |m: &Model| {
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape, false);
        let out = m.forward(&mut tape, &vars, &x).unwrap();
        (
            tape.value(out.recon).data().to_vec(),
            tape.value(out.pred).data().to_vec(),
        )
    };
    let (recon0, pred0) = forward_once(&model);
    for v in model.factors.a_c.data_mut() {
        *v += 0.05;
    }
    let (recon1, pred1) = forward_once(&model);
    assert_ne!(recon0, recon1, "A_c must move the reconstruction");
    assert_eq!(pred0, pred1, "A_c must not reach the prediction path");

    // and an encoder parameter (upstream of the shared S_c) moves both
    model
        .temporal_enc
        .as_mut()
        .unwrap()
        .head_b
        .data_mut()[0] += 0.05;
    let (recon2, pred2) = forward_once(&model);
    assert_ne!(recon1, recon2, "shared S_c must affect the reconstruction");
    assert_ne!(pred1, pred2, "shared S_c must affect the prediction");

    let secs = report("4", "identical S_c/A_t feed both paths; A_c touches recon only", start);
    assert!(secs < 10.0, "criterion 4 exceeded its 10 s budget: {secs:.1} s");
}

fn singular_values(rows: usize, cols: usize, data: &[f64]) -> Vec<f64> {
    let m = nalgebra::DMatrix::from_row_slice(rows, cols, data);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

/// Criterion 5 — rank bound: the stacked channel-path output has numerical
/// rank ≤ k2 and the time-path output rank ≤ k1; < 10 s.
#[test]
fn criterion_5_rank_bound() {
    let start = Instant::now();
    let cfg = ModelConfig {
        t: 24,
        h: 12,
        n: 6,
        k1: 2,
        k2: 3,
        patch_len: 8,
        patch_stride: 8,
        ssm: SsmConfig { d_model: 8, d_state: 4, d_conv: 2, expand: 2, ..Default::default() },
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = Model::init(&cfg, &mut rng).unwrap();
    let x = Tensor::from_fn(&[cfg.t, cfg.n], |_| rng.gen_range(-1.0..1.0));

    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let out = model.forward(&mut tape, &vars, &x).unwrap();

    let stack = |a: &Tensor, b: &Tensor| {
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        data
    };
    let chan = stack(tape.value(out.x_c_hist.unwrap()), tape.value(out.x_c_fut.unwrap()));
    let sv = singular_values(cfg.t + cfg.h, cfg.n, &chan);
    for (i, s) in sv.iter().enumerate().skip(cfg.k2) {
        assert!(
            *s < 1e-8 * sv[0],
            "channel path σ{} = {s:e} exceeds 1e-8·σ_max ({:e})",
            i + 1,
            1e-8 * sv[0]
        );
    }
    let time = stack(tape.value(out.x_t_hist.unwrap()), tape.value(out.x_t_fut.unwrap()));
    let sv_t = singular_values(cfg.t + cfg.h, cfg.n, &time);
    for (i, s) in sv_t.iter().enumerate().skip(cfg.k1) {
        assert!(
            *s < 1e-8 * sv_t[0],
            "time path σ{} = {s:e} exceeds 1e-8·σ_max ({:e})",
            i + 1,
            1e-8 * sv_t[0]
        );
    }
    let secs = report(
        "5",
        &format!(
            "channel σ{}/σ1 = {:.1e}, time σ{}/σ1 = {:.1e}",
            cfg.k2 + 1,
            sv[cfg.k2] / sv[0],
            cfg.k1 + 1,
            sv_t[cfg.k1] / sv_t[0]
        ),
        start,
    );
    assert!(secs < 10.0, "criterion 5 exceeded its 10 s budget: {secs:.1} s");
}

/// Single-window oracle recovery run shared by the two halves of criterion 6.
/// Returns (prediction L1, reconstruction L1) in the generator's raw units.
fn recovery_run(mode: SynthMode, path: PathMode, epochs: usize, lr: f64) -> (f64, f64) {
    let sigma = 0.05;
    let (series, _) = synth_mixture(&SynthSpec {
        mode,
        rows: 192,
        channels: 4,
        k: 3,
        noise_sigma: sigma,
        seed: 29,
    })
    .unwrap();
    let st = Standardizer::fit(&series.values).unwrap();
    let z = st.transform(&series.values).unwrap();
    let windows = WindowSet::new(z, 96, 96, 1).unwrap();
    assert_eq!(windows.len(), 1, "192 rows hold exactly one 96+96 window");

    let cfg = ModelConfig {
        t: 96,
        h: 96,
        n: 4,
        k1: 4,
        k2: 4,
        patch_len: 16,
        patch_stride: 8,
        path,
        ssm: SsmConfig { d_model: 16, d_state: 8, d_conv: 4, expand: 2, ..Default::default() },
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut model = Model::init(&cfg, &mut rng).unwrap();
    let tcfg = TrainConfig { lr, epochs, batch_size: 1, seed: 5, ..Default::default() };
    let mut trainer = Trainer::new(tcfg, &model).unwrap();
    for e in 0..epochs {
        let l = trainer.train_epoch(&mut model, &windows).unwrap();
        if std::env::var("ACCEPT_DEBUG").is_ok() && (e + 1) % 25 == 0 {
            eprintln!("  recovery {:?} epoch {} train_loss {l:.4}", path, e + 1);
        }
    }

    // score on the raw scale, where the injected σ lives
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let out = model.forward(&mut tape, &vars, &windows.hist(0)).unwrap();
    let pred_raw = st.inverse(tape.value(out.pred)).unwrap();
    let recon_raw = st.inverse(tape.value(out.recon)).unwrap();
    let hist_raw = st.inverse(&windows.hist(0)).unwrap();
    let fut_raw = st.inverse(&windows.future(0)).unwrap();
    let l1 = |a: &Tensor, b: &Tensor| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / a.numel() as f64
    };
    (l1(&pred_raw, &fut_raw), l1(&recon_raw, &hist_raw))
}

/// Criterion 6 — synthetic recovery: a single-path model on its matching
/// mixture reaches prediction (and reconstruction) L1 ≤ 1.5·σ in 200 epochs;
/// < 10 min.
#[test]
fn criterion_6_synthetic_recovery() {
    let start = Instant::now();
    let sigma = 0.05;
    let bound = 1.5 * sigma;

    let (pred_l1, recon_l1) = recovery_run(SynthMode::TimeMix, PathMode::TimeOnly, 200, 1e-2);
    assert!(
        pred_l1 <= bound,
        "time-path recovery: prediction L1 {pred_l1:.4} > 1.5σ = {bound:.4}"
    );
    assert!(
        recon_l1 <= bound,
        "time-path recovery: reconstruction L1 {recon_l1:.4} > 1.5σ = {bound:.4}"
    );
    let time_detail = format!("time path pred L1 {pred_l1:.4}");

    let (pred_l1c, recon_l1c) = recovery_run(SynthMode::ChannelMix, PathMode::ChannelOnly, 200, 1e-2);
    assert!(
        pred_l1c <= bound,
        "channel-path recovery: prediction L1 {pred_l1c:.4} > 1.5σ = {bound:.4}"
    );
    assert!(
        recon_l1c <= bound,
        "channel-path recovery: reconstruction L1 {recon_l1c:.4} > 1.5σ = {bound:.4}"
    );

    let secs = report(
        "6",
        &format!("{time_detail}, channel path pred L1 {pred_l1c:.4}, bound {bound:.4}"),
        start,
    );
    assert!(secs < 600.0, "criterion 6 exceeded its 10 min budget: {secs:.1} s");
}

/// One ablation training run on shared dual-mixture data; returns val MSE.
#[allow(clippy::too_many_arguments)]
fn ablation_run(
    split: &Split,
    path: PathMode,
    t: usize,
    h: usize,
    seed: u64,
    epochs: usize,
    patience: usize,
    dims: (usize, usize, usize),
    train_stride: usize,
) -> f64 {
    let (k1, k2, d_model) = dims;
    let cfg = ModelConfig {
        t,
        h,
        n: split.train.shape()[1],
        k1,
        k2,
        patch_len: 16,
        patch_stride: 8,
        path,
        ssm: SsmConfig { d_model, d_state: 8, d_conv: 4, expand: 2, ..Default::default() },
        ..Default::default()
    };
    let train_w = WindowSet::new(split.train.clone(), t, h, train_stride).unwrap();
    let val_w = WindowSet::new(split.val.clone(), t, h, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::init(&cfg, &mut rng).unwrap();
    let tcfg = TrainConfig {
        lr: 2e-3,
        epochs,
        batch_size: 32,
        patience,
        seed,
        ..Default::default()
    };
    let mut trainer = Trainer::new(tcfg, &model).unwrap();
    // fixed budget, scored by the best validation MSE seen across epochs —
    // the same selection rule for every variant
    let mut best_mse = f64::INFINITY;
    let mut best_epoch = 0;
    let mut bad = 0usize;
    for epoch in 1..=epochs {
        trainer.train_epoch(&mut model, &train_w).unwrap();
        let mse = evaluate(&model, &val_w, false).unwrap().mse;
        if mse < best_mse {
            best_mse = mse;
            best_epoch = epoch;
            bad = 0;
        } else {
            bad += 1;
            if patience > 0 && bad >= patience {
                break;
            }
        }
    }
    if std::env::var("ACCEPT_DEBUG").is_ok() {
        eprintln!(
            "  run: {} T={t} seed={seed} best_epoch={best_epoch} val_mse={best_mse:.4}",
            cfg.path.as_str()
        );
    }
    best_mse
}

fn dual_split(rows: usize, lookback: usize, data_seed: u64) -> Split {
    let (series, _) = synth_mixture(&SynthSpec {
        mode: SynthMode::Dual,
        rows,
        channels: 4,
        k: 3,
        noise_sigma: 0.05,
        seed: data_seed,
    })
    .unwrap();
    let split = split_series(&series, &SplitSpec::default(), lookback).unwrap();
    let (split, _) = fit_apply_standardizer(&split).unwrap();
    split
}

/// Criterion 7 — ablation direction: on dual-mixture data, the full model's
/// validation MSE beats both single-path ablations, margins averaged over
/// 3 seeds; < 20 min.
#[test]
fn criterion_7_ablation_direction() {
    let start = Instant::now();
    let split = dual_split(2400, 96, 101);
    let seeds = [0u64, 1, 2];
    // identical fixed budget for every variant: no early stopping
    let epochs = 40;

    let mean = |path: PathMode| {
        seeds
            .iter()
            .map(|&s| ablation_run(&split, path, 96, 96, s, epochs, 0, (2, 4, 8), 2))
            .sum::<f64>()
            / seeds.len() as f64
    };
    let full = mean(PathMode::Dual);
    let time_only = mean(PathMode::TimeOnly);
    let channel_only = mean(PathMode::ChannelOnly);

    assert!(
        full < time_only,
        "full model must beat the time-only ablation: {full:.4} vs {time_only:.4}"
    );
    assert!(
        full < channel_only,
        "full model must beat the channel-only ablation: {full:.4} vs {channel_only:.4}"
    );
    let secs = report(
        "7",
        &format!(
            "val MSE full {full:.4} < time-only {time_only:.4} and < channel-only {channel_only:.4} (3 seeds)"
        ),
        start,
    );
    assert!(secs < 1200.0, "criterion 7 exceeded its 20 min budget: {secs:.1} s");
}

/// Criterion 8 — ETTh1 smoke: 96→96, 3 epochs, training loss halves from the
/// first batch and validation MSE is finite and < 1.0; < 30 min. The dataset
/// is user-supplied: set ETTH1_CSV (or place data/ETTh1.csv) to enable.
#[test]
fn criterion_8_etth1_smoke() {
    let start = Instant::now();
    let path = std::env::var("ETTH1_CSV")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|_| std::path::PathBuf::from("data/ETTh1.csv"));
    if !path.exists() {
        println!(
            "criterion 8: SKIP — real ETTh1 CSV not supplied; set ETTH1_CSV=/path/to/ETTh1.csv to run"
        );
        return;
    }
    let series = unmix::data::load_series_csv(&path).unwrap();
    let split = split_series(
        &series,
        &SplitSpec { mode: SplitMode::EttHour, ratios: (0.0, 0.0, 0.0) },
        96,
    )
    .unwrap();
    let (split, _) = fit_apply_standardizer(&split).unwrap();
    let cfg = ModelConfig { n: series.channels(), ..Default::default() };
    let train_w = WindowSet::new(split.train, cfg.t, cfg.h, 1).unwrap();
    let val_w = WindowSet::new(split.val, cfg.t, cfg.h, 1).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::init(&cfg, &mut rng).unwrap();
    let tcfg = TrainConfig { epochs: 3, ..Default::default() };

    // first-batch loss at initialization
    let first_batch: f64 = (0..tcfg.batch_size.min(train_w.len()))
        .map(|i| {
            window_loss_and_grads(&model, &train_w.hist(i), &train_w.future(i), 1.0, 1.0)
                .unwrap()
                .0
        })
        .sum::<f64>()
        / tcfg.batch_size.min(train_w.len()) as f64;

    let mut trainer = Trainer::new(tcfg, &model).unwrap();
    let mut last = f64::INFINITY;
    for _ in 0..3 {
        last = trainer.train_epoch(&mut model, &train_w).unwrap();
    }
    assert!(
        last <= 0.5 * first_batch,
        "training loss after 3 epochs ({last:.4}) above 50% of the first-batch loss ({first_batch:.4})"
    );
    let metrics = evaluate(&model, &val_w, false).unwrap();
    assert!(metrics.mse.is_finite() && metrics.mse < 1.0, "val MSE {} out of bounds", metrics.mse);
    let secs = report(
        "8",
        &format!("loss {first_batch:.3} → {last:.3}, val MSE {:.3}", metrics.mse),
        start,
    );
    assert!(secs < 1800.0, "criterion 8 exceeded its 30 min budget: {secs:.1} s");
}

/// Criterion 9 (stretch, optional) — full ETTh1 96→96 training toward the
/// headline test MSE. Documented target: MSE ≤ 0.45 within 50 epochs.
/// Ignored by default: it is an hours-long run and needs the real dataset.
#[test]
#[ignore = "stretch target: full ETTh1 training; supply ETTH1_CSV and run explicitly"]
fn criterion_9_etth1_full_training_stretch() {
    let path = std::env::var("ETTH1_CSV")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|_| std::path::PathBuf::from("data/ETTh1.csv"));
    assert!(path.exists(), "criterion 9 needs the real ETTh1 CSV (set ETTH1_CSV)");
    let series = unmix::data::load_series_csv(&path).unwrap();
    let split = split_series(
        &series,
        &SplitSpec { mode: SplitMode::EttHour, ratios: (0.0, 0.0, 0.0) },
        96,
    )
    .unwrap();
    let (split, _) = fit_apply_standardizer(&split).unwrap();
    let cfg = ModelConfig { n: series.channels(), ..Default::default() };
    let train_w = WindowSet::new(split.train, cfg.t, cfg.h, 1).unwrap();
    let val_w = WindowSet::new(split.val, cfg.t, cfg.h, 1).unwrap();
    let test_w = WindowSet::new(split.test, cfg.t, cfg.h, 1).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::init(&cfg, &mut rng).unwrap();
    let tcfg = TrainConfig { epochs: 50, patience: 5, ..Default::default() };
    let mut trainer = Trainer::new(tcfg, &model).unwrap();
    let result = fit(&mut model, &mut trainer, &train_w, &val_w).unwrap();
    let metrics = evaluate(&result.best_model, &test_w, false).unwrap();
    println!("criterion 9 (stretch): test MSE {:.4} MAE {:.4}", metrics.mse, metrics.mae);
    assert!(metrics.mse <= 0.45, "stretch target missed: test MSE {:.4} > 0.45", metrics.mse);
}

/// Criterion 10 — lookback trend: on long-structured dual-mixture data,
/// T=336 validation MSE ≤ T=96 at H=96, averaged over 3 seeds; < 30 min.
#[test]
fn criterion_10_lookback_monotonicity() {
    let start = Instant::now();
    let seeds = [0u64, 1, 2];
    // matched optimizer budgets: no early stopping, and epochs scaled so both
    // lookbacks take the same number of gradient steps
    let run_t = |t: usize, epochs: usize| {
        let split = dual_split(1400, t, 211);
        seeds
            .iter()
            .map(|&s| ablation_run(&split, PathMode::Dual, t, 96, s, epochs, 0, (4, 4, 16), 1))
            .sum::<f64>()
            / seeds.len() as f64
    };
    let mse_96 = run_t(96, 50);
    let mse_336 = run_t(336, 72);
    assert!(
        mse_336 <= mse_96,
        "longer lookback must not hurt: T=336 MSE {mse_336:.4} > T=96 MSE {mse_96:.4}"
    );
    let secs = report(
        "10",
        &format!("val MSE T=336 {mse_336:.4} <= T=96 {mse_96:.4} (3 seeds)"),
        start,
    );
    assert!(secs < 1800.0, "criterion 10 exceeded its 30 min budget: {secs:.1} s");
}

/// Criterion 11 — determinism and persistence: byte-identical metrics.csv on
/// fixed-seed reruns; checkpoint save/load/resume matches an uninterrupted
/// run's next optimizer step exactly; < 5 min.
#[test]
fn criterion_11_determinism_and_persistence() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data_path = dir.path().join("dataset.csv");
    let (series, _) = synth_mixture(&SynthSpec {
        mode: SynthMode::Dual,
        rows: 400,
        channels: 3,
        k: 2,
        noise_sigma: 0.05,
        seed: 77,
    })
    .unwrap();
    unmix::data::write_series_csv(&data_path, &series).unwrap();

    let run = |out: &std::path::Path| {
        let common = unmix::cli::CommonArgs {
            config: None,
            out: out.to_path_buf(),
            seed: Some(9),
            sets: vec![
                "model.t=48".into(),
                "model.h=24".into(),
                "model.k1=3".into(),
                "model.k2=3".into(),
                "model.patch_len=8".into(),
                "model.patch_stride=8".into(),
                "ssm.d_model=8".into(),
                "ssm.d_state=4".into(),
                "ssm.d_conv=2".into(),
                "train.epochs=3".into(),
            ],
        };
        unmix::cli::cmd_train(&common, Some(&data_path)).unwrap();
    };
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run(&out_a);
    run(&out_b);
    for artifact in ["metrics.csv", "loss_log.csv", "checkpoint.bin", "resolved_config.txt"] {
        let a = std::fs::read(out_a.join(artifact)).unwrap();
        let b = std::fs::read(out_b.join(artifact)).unwrap();
        assert_eq!(a, b, "fixed-seed reruns must produce byte-identical {artifact}");
    }

    // resume equivalence: 2 epochs + save/load + 1 epoch == 3 epochs straight
    let cfg = ModelConfig {
        t: 48,
        h: 24,
        n: 3,
        k1: 3,
        k2: 3,
        patch_len: 8,
        patch_stride: 8,
        ssm: SsmConfig { d_model: 8, d_state: 4, d_conv: 2, expand: 2, ..Default::default() },
        ..Default::default()
    };
    let st = Standardizer::fit(&series.values).unwrap();
    let z = st.transform(&series.values).unwrap();
    let windows = WindowSet::new(z, cfg.t, cfg.h, 1).unwrap();
    let tcfg = TrainConfig { epochs: 3, batch_size: 16, seed: 4, ..Default::default() };

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut straight = Model::init(&cfg, &mut rng).unwrap();
    let mut trainer_s = Trainer::new(tcfg.clone(), &straight).unwrap();
    for _ in 0..3 {
        trainer_s.train_epoch(&mut straight, &windows).unwrap();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut resumed = Model::init(&cfg, &mut rng).unwrap();
    let mut trainer_r = Trainer::new(tcfg.clone(), &resumed).unwrap();
    trainer_r.train_epoch(&mut resumed, &windows).unwrap();
    trainer_r.train_epoch(&mut resumed, &windows).unwrap();

    let ckpt_path = dir.path().join("resume.ckpt");
    let ckpt = unmix::train::Checkpoint {
        version: unmix::train::CHECKPOINT_VERSION,
        config_text: format!(
            "state.step={}\nstate.rng_word_pos={}\n",
            trainer_r.state.step,
            trainer_r.rng.get_word_pos()
        ),
        params: unmix::train::training_state_params(&resumed, &trainer_r.state),
    };
    unmix::train::checkpoint_save(&ckpt_path, &ckpt).unwrap();
    let loaded = unmix::train::checkpoint_load(&ckpt_path).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(555);
    let mut restored = Model::init(&cfg, &mut rng).unwrap();
    let mut trainer_c = Trainer::new(tcfg, &restored).unwrap();
    unmix::train::restore_training_state(&mut restored, &mut trainer_c.state, &loaded.params).unwrap();
    for line in loaded.config_text.lines() {
        if let Some(v) = line.strip_prefix("state.step=") {
            trainer_c.state.step = v.parse().unwrap();
        }
        if let Some(v) = line.strip_prefix("state.rng_word_pos=") {
            trainer_c.rng.set_word_pos(v.parse().unwrap());
        }
    }
    trainer_c.train_epoch(&mut restored, &windows).unwrap();

    let mut flat_s = Vec::new();
    straight.for_each_param(&mut |_, t| flat_s.extend_from_slice(t.data()));
    let mut flat_r = Vec::new();
    restored.for_each_param(&mut |_, t| flat_r.extend_from_slice(t.data()));
    assert_eq!(flat_s, flat_r, "resumed training must match the uninterrupted run exactly");

    let secs = report("11", "byte-identical reruns; resume matches uninterrupted run", start);
    assert!(secs < 300.0, "criterion 11 exceeded its 5 min budget: {secs:.1} s");
}
