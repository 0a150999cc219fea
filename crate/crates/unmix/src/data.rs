//! Dataset ingestion, protocol splits, standardization, sliding windows, and
//! a ground-truth synthetic mixture generator for oracle tests.
//!
//! CSV format: UTF-8, comma-separated, header row required, first column is
//! the timestamp, remaining columns are numeric channels. No imputation: a
//! gap anywhere is a load error.

use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A loaded series: rows × channels, gap-free.
#[derive(Debug, Clone)]
pub struct RawSeries {
    pub timestamps: Vec<String>,
    pub values: Tensor, // rows × N
    pub channel_names: Vec<String>,
}

impl RawSeries {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }
}

pub fn load_series_csv(path: &Path) -> Result<RawSeries> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 {
        return Err(Error::Data(format!(
            "{}: header must have a timestamp column plus at least one channel",
            path.display()
        )));
    }
    let channel_names: Vec<String> = cols[1..].iter().map(|s| s.trim().to_string()).collect();
    let n = channel_names.len();

    let mut timestamps = Vec::new();
    let mut data = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let row = lineno + 2; // 1-based file line
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n + 1 {
            return Err(Error::Data(format!(
                "{}: row {row} has {} columns, expected {}",
                path.display(),
                cells.len(),
                n + 1
            )));
        }
        timestamps.push(cells[0].to_string());
        for (c, cell) in cells[1..].iter().enumerate() {
            let trimmed = cell.trim();
            if trimmed.is_empty() {
                return Err(Error::Data(format!(
                    "{}: missing value at row {row}, column `{}`",
                    path.display(),
                    channel_names[c]
                )));
            }
            let v: f64 = trimmed.parse().map_err(|_| {
                Error::Data(format!(
                    "{}: unparseable cell `{trimmed}` at row {row}, column `{}`",
                    path.display(),
                    channel_names[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "{}: non-finite value at row {row}, column `{}`",
                    path.display(),
                    channel_names[c]
                )));
            }
            data.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let rows = timestamps.len();
    Ok(RawSeries {
        timestamps,
        values: Tensor::new(vec![rows, n], data)?,
        channel_names,
    })
}

/// Serialize a series in the same CSV schema the loader reads.
pub fn write_series_csv(path: &Path, series: &RawSeries) -> Result<()> {
    let mut out = String::new();
    out.push_str("date");
    for name in &series.channel_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    let n = series.channels();
    for r in 0..series.rows() {
        out.push_str(&series.timestamps[r]);
        for c in 0..n {
            let _ = write!(out, ",{}", fmt_g17(series.values.get2(r, c)));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Plain numeric CSV, row-major, no header. Used for factor sidecars.
pub fn write_matrix_csv(path: &Path, m: &Tensor) -> Result<()> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut out = String::new();
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", fmt_g17(m.get2(r, c)));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_matrix_csv(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut data = Vec::new();
    let mut cols = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|cell| {
                cell.trim()
                    .parse()
                    .map_err(|_| Error::Data(format!("{}: bad cell on line {}", path.display(), i + 1)))
            })
            .collect::<Result<_>>()?;
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(Error::Data(format!("{}: ragged row on line {}", path.display(), i + 1)))
            }
            _ => {}
        }
        data.extend(row);
    }
    let cols = cols.ok_or_else(|| Error::Data(format!("{}: no rows", path.display())))?;
    let rows = data.len() / cols;
    Tensor::new(vec![rows, cols], data)
}

/// 17 significant digits; round-trips f64 exactly.
pub fn fmt_g17(v: f64) -> String {
    format!("{v:.16e}")
}

// ── Splits ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    /// 12/4/4 months at hourly rate: 8640/2880/2880 target rows.
    EttHour,
    /// The same months at 15-minute rate: 34560/11520/11520 target rows.
    EttMinute,
    /// Contiguous fractions of the whole file.
    Ratio,
}

impl SplitMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitMode::EttHour => "ett_hour",
            SplitMode::EttMinute => "ett_minute",
            SplitMode::Ratio => "ratio",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ett_hour" => Ok(SplitMode::EttHour),
            "ett_minute" => Ok(SplitMode::EttMinute),
            "ratio" => Ok(SplitMode::Ratio),
            other => Err(Error::Config(format!(
                "unknown split mode `{other}` (expected ett_hour, ett_minute or ratio)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub ratios: (f64, f64, f64),
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { mode: SplitMode::Ratio, ratios: (0.7, 0.1, 0.2) }
    }
}

/// Train/val/test segments. Val and test are prefixed with the `lookback`
/// rows immediately before them so their first windows have full history;
/// `val_core`/`test_core` count the rows each segment actually owns.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Tensor,
    pub val: Tensor,
    pub test: Tensor,
    pub lookback: usize,
    pub val_core: usize,
    pub test_core: usize,
}

fn slice_rows(values: &Tensor, start: usize, end: usize) -> Tensor {
    let n = values.shape()[1];
    Tensor::from_fn(&[end - start, n], |idx| values.data()[start * n + idx])
}

pub fn split_series(s: &RawSeries, spec: &SplitSpec, lookback: usize) -> Result<Split> {
    let rows = s.rows();
    let (train_len, val_len, test_len) = match spec.mode {
        SplitMode::EttHour => {
            let month = 30 * 24;
            (12 * month, 4 * month, 4 * month)
        }
        SplitMode::EttMinute => {
            let month = 30 * 96;
            (12 * month, 4 * month, 4 * month)
        }
        SplitMode::Ratio => {
            let (r_train, r_val, r_test) = spec.ratios;
            if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "split ratios must sum to 1, got {r_train} + {r_val} + {r_test}"
                )));
            }
            if r_train <= 0.0 || r_val <= 0.0 || r_test <= 0.0 {
                return Err(Error::Config("all split ratios must be positive".to_string()));
            }
            let n_train = (rows as f64 * r_train).floor() as usize;
            let n_test = (rows as f64 * r_test).floor() as usize;
            let n_val = rows - n_train - n_test;
            (n_train, n_val, n_test)
        }
    };

    let needed = train_len + val_len + test_len;
    if rows < needed {
        return Err(Error::Config(format!(
            "series has {rows} rows but split {} needs {needed}",
            spec.mode.as_str()
        )));
    }
    if train_len < lookback {
        return Err(Error::Config(format!(
            "train segment ({train_len} rows) shorter than lookback {lookback}"
        )));
    }

    let val_start = train_len - lookback;
    let val_end = train_len + val_len;
    let test_start = val_end - lookback;
    let test_end = val_end + test_len;
    Ok(Split {
        train: slice_rows(&s.values, 0, train_len),
        val: slice_rows(&s.values, val_start, val_end),
        test: slice_rows(&s.values, test_start, test_end),
        lookback,
        val_core: val_len,
        test_core: test_len,
    })
}

// ── Standardization ─────────────────────────────────────────────────────

/// Per-channel z-score with statistics from the training split only.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl Standardizer {
    pub fn fit(train: &Tensor) -> Result<Standardizer> {
        let (rows, n) = (train.shape()[0], train.shape()[1]);
        if rows == 0 {
            return Err(Error::Config("cannot fit standardizer on an empty segment".to_string()));
        }
        let mut mean = vec![0.0; n];
        for r in 0..rows {
            for c in 0..n {
                mean[c] += train.get2(r, c);
            }
        }
        for m in &mut mean {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; n];
        for r in 0..rows {
            for c in 0..n {
                let d = train.get2(r, c) - mean[c];
                var[c] += d * d;
            }
        }
        let std = var
            .into_iter()
            .map(|v| (v / rows as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn transform(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.shape()[1];
        if n != self.mean.len() {
            return Err(Error::dimension(
                "Standardizer::transform",
                format!("{} channels vs {} statistics", n, self.mean.len()),
            ));
        }
        Ok(Tensor::from_fn(x.shape(), |idx| {
            let c = idx % n;
            (x.data()[idx] - self.mean[c]) / self.std[c]
        }))
    }

    pub fn inverse(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.shape()[1];
        if n != self.mean.len() {
            return Err(Error::dimension(
                "Standardizer::inverse",
                format!("{} channels vs {} statistics", n, self.mean.len()),
            ));
        }
        Ok(Tensor::from_fn(x.shape(), |idx| {
            let c = idx % n;
            x.data()[idx] * self.std[c] + self.mean[c]
        }))
    }
}

/// Fit on train, transform all three segments.
pub fn fit_apply_standardizer(split: &Split) -> Result<(Split, Standardizer)> {
    let st = Standardizer::fit(&split.train)?;
    Ok((
        Split {
            train: st.transform(&split.train)?,
            val: st.transform(&split.val)?,
            test: st.transform(&split.test)?,
            lookback: split.lookback,
            val_core: split.val_core,
            test_core: split.test_core,
        },
        st,
    ))
}

// ── Windows ─────────────────────────────────────────────────────────────

/// Start offsets of every (history, future) window in a segment.
pub fn make_windows(segment_len: usize, t: usize, h: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::Config("window stride must be >= 1".to_string()));
    }
    if segment_len < t + h {
        return Err(Error::Config(format!(
            "segment of {segment_len} rows cannot hold a {t}+{h} window"
        )));
    }
    Ok((0..=(segment_len - t - h)).step_by(stride).collect())
}

/// A segment plus its enumerated windows; histories and futures are extracted
/// on demand and are contiguous, adjacent slices of the segment.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub segment: Tensor,
    pub starts: Vec<usize>,
    pub t: usize,
    pub h: usize,
}

impl WindowSet {
    pub fn new(segment: Tensor, t: usize, h: usize, stride: usize) -> Result<WindowSet> {
        let starts = make_windows(segment.shape()[0], t, h, stride)?;
        Ok(WindowSet { segment, starts, t, h })
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn hist(&self, i: usize) -> Tensor {
        slice_rows(&self.segment, self.starts[i], self.starts[i] + self.t)
    }

    pub fn future(&self, i: usize) -> Tensor {
        slice_rows(&self.segment, self.starts[i] + self.t, self.starts[i] + self.t + self.h)
    }
}

// ── Synthetic mixtures ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthMode {
    TimeMix,
    ChannelMix,
    Dual,
}

impl SynthMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SynthMode::TimeMix => "time_mix",
            SynthMode::ChannelMix => "channel_mix",
            SynthMode::Dual => "dual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "time_mix" => Ok(SynthMode::TimeMix),
            "channel_mix" => Ok(SynthMode::ChannelMix),
            "dual" => Ok(SynthMode::Dual),
            other => Err(Error::Config(format!(
                "unknown synth mode `{other}` (expected time_mix, channel_mix or dual)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub mode: SynthMode,
    /// Total rows (at least history plus horizon for the smallest task).
    pub rows: usize,
    pub channels: usize,
    pub k: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Ground-truth factors, in the orientation of the generating equation:
/// time mixing X[t,c] = Σ_j S[j,t]·A[c,j];
/// channel mixing X[t,c] = Σ_j A[t,j]·S[j,c].
#[derive(Debug, Clone)]
pub struct SynthTruth {
    /// (A: N×k channel bases, S: k×rows simplex columns per tick)
    pub time_factors: Option<(Tensor, Tensor)>,
    /// (A: rows×k basis curves, S: k×N simplex columns per channel)
    pub chan_factors: Option<(Tensor, Tensor)>,
}

const SIMPLEX_DEN_BITS: u32 = 40;
const SIMPLEX_DEN: u64 = 1 << SIMPLEX_DEN_BITS;

/// One uniform simplex sample as integer parts of a power-of-two total, so
/// every weight is m·2⁻⁴⁰, all partial sums are exactly representable, and
/// the float sum is exactly 1. Built from k−1 uniform cuts.
fn simplex_ints(rng: &mut ChaCha8Rng, k: usize) -> Vec<u64> {
    if k == 1 {
        return vec![SIMPLEX_DEN];
    }
    loop {
        let mut cuts: Vec<u64> = (0..k - 1).map(|_| rng.gen_range(1..SIMPLEX_DEN)).collect();
        cuts.sort_unstable();
        cuts.dedup();
        if cuts.len() != k - 1 {
            continue; // duplicate cut would make a zero weight; redraw
        }
        let mut parts = Vec::with_capacity(k);
        let mut prev = 0u64;
        for &c in &cuts {
            parts.push(c - prev);
            prev = c;
        }
        parts.push(SIMPLEX_DEN - prev);
        return parts;
    }
}

fn ints_to_weights(parts: &[u64]) -> Vec<f64> {
    let scale = 1.0 / SIMPLEX_DEN as f64;
    parts.iter().map(|&p| p as f64 * scale).collect()
}

/// Column-simplex matrix, k × cols, columns drawn independently.
fn simplex_matrix(rng: &mut ChaCha8Rng, k: usize, cols: usize) -> Tensor {
    let mut m = Tensor::zeros(&[k, cols]);
    for c in 0..cols {
        let w = ints_to_weights(&simplex_ints(rng, k));
        for (j, v) in w.into_iter().enumerate() {
            m.set2(j, c, v);
        }
    }
    m
}

/// Smooth column-simplex path, k × len: uniform anchors spaced along the
/// axis, linearly interpolated in integer space with the total re-pinned to
/// the exact denominator, so every column still sums to exactly 1 while the
/// coefficients drift instead of resampling each tick. Anchor spacing is a
/// quarter of the series, so within any forecasting window the drift is
/// close to linear.
fn simplex_path(rng: &mut ChaCha8Rng, k: usize, len: usize) -> Tensor {
    let spacing = (len / 8).max(16);
    let n_anchors = len / spacing + 2;
    let anchors: Vec<Vec<u64>> = (0..n_anchors).map(|_| simplex_ints(rng, k)).collect();

    let mut m = Tensor::zeros(&[k, len]);
    for t in 0..len {
        let seg = t / spacing;
        let alpha = (t % spacing) as f64 / spacing as f64;
        let (a, b) = (&anchors[seg], &anchors[seg + 1]);
        let mut parts: Vec<u64> = (0..k)
            .map(|j| ((1.0 - alpha) * a[j] as f64 + alpha * b[j] as f64).round() as u64)
            .collect();
        let total: u64 = parts.iter().sum();
        let argmax = (0..k).fold(0, |best, j| if parts[j] > parts[best] { j } else { best });
        parts[argmax] = (parts[argmax] as i64 + (SIMPLEX_DEN as i64 - total as i64)) as u64;
        for (j, v) in ints_to_weights(&parts).into_iter().enumerate() {
            m.set2(j, t, v);
        }
    }
    m
}

/// Smooth basis curves: each column is a sum of three random-phase sinusoids.
/// Periods scale with the series length (log-uniform on [rows/24, rows/2],
/// floored at 8), so long series carry genuinely long-range cycles that a
/// short history cannot resolve.
fn sinusoid_basis(rng: &mut ChaCha8Rng, rows: usize, k: usize) -> Tensor {
    let hi = (rows as f64 / 2.0).max(16.0);
    let lo = (rows as f64 / 24.0).clamp(8.0, hi / 2.0);
    let mut m = Tensor::zeros(&[rows, k]);
    for j in 0..k {
        let comps: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                let period = rng.gen_range(lo.ln()..hi.ln()).exp();
                let amp = rng.gen_range(0.5..1.5);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                (amp, period, phase)
            })
            .collect();
        for t in 0..rows {
            let v: f64 = comps
                .iter()
                .map(|(amp, period, phase)| amp * (std::f64::consts::TAU * t as f64 / period + phase).sin())
                .sum();
            m.set2(t, j, v);
        }
    }
    m
}

fn synth_timestamps(rows: usize) -> Vec<String> {
    let start = NaiveDate::from_ymd_opt(2016, 7, 1)
        .expect("valid date")
        .and_hms_opt(0, 0, 0)
        .expect("valid time");
    (0..rows)
        .map(|i| {
            (start + chrono::Duration::hours(i as i64))
                .format("%Y-%m-%d %H:%M:%S")
                .to_string()
        })
        .collect()
}

pub fn synth_mixture(spec: &SynthSpec) -> Result<(RawSeries, SynthTruth)> {
    if spec.rows < 2 || spec.channels < 1 || spec.k < 1 {
        return Err(Error::Config(format!(
            "synth dims must be positive and rows >= 2: rows={} channels={} k={}",
            spec.rows, spec.channels, spec.k
        )));
    }
    if spec.noise_sigma < 0.0 {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {}", spec.noise_sigma)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (rows, n, k) = (spec.rows, spec.channels, spec.k);

    let time_factors = matches!(spec.mode, SynthMode::TimeMix | SynthMode::Dual).then(|| {
        let dist = rand_distr::Normal::new(0.0, 1.0).expect("valid sigma");
        let a = Tensor::from_fn(&[n, k], |_| rand_distr::Distribution::sample(&dist, &mut rng));
        // coefficients drift smoothly along time: the temporal mixture is
        // trends and cycles, not a fresh draw each tick
        let s = simplex_path(&mut rng, k, rows);
        (a, s)
    });
    let chan_factors = matches!(spec.mode, SynthMode::ChannelMix | SynthMode::Dual).then(|| {
        let a = sinusoid_basis(&mut rng, rows, k);
        let s = simplex_matrix(&mut rng, k, n);
        (a, s)
    });

    let weight = if spec.mode == SynthMode::Dual { 0.5 } else { 1.0 };
    let mut x = Tensor::zeros(&[rows, n]);
    if let Some((a, s)) = &time_factors {
        for t in 0..rows {
            for c in 0..n {
                let mut acc = 0.0;
                for j in 0..k {
                    acc += a.get2(c, j) * s.get2(j, t);
                }
                x.set2(t, c, x.get2(t, c) + weight * acc);
            }
        }
    }
    if let Some((a, s)) = &chan_factors {
        for t in 0..rows {
            for c in 0..n {
                let mut acc = 0.0;
                for j in 0..k {
                    acc += a.get2(t, j) * s.get2(j, c);
                }
                x.set2(t, c, x.get2(t, c) + weight * acc);
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let dist = rand_distr::Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
        for v in x.data_mut() {
            *v += rand_distr::Distribution::sample(&dist, &mut rng);
        }
    }

    let series = RawSeries {
        timestamps: synth_timestamps(rows),
        values: x,
        channel_names: (0..n).map(|c| format!("ch{c}")).collect(),
    };
    Ok((series, SynthTruth { time_factors, chan_factors }))
}
