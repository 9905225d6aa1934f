//! Wall-clock benchmarks. Every timed computation is first checked against
//! a reference route; a failed check aborts the benchmark.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::max_relative_error;
use crate::cells::CellKind;
use crate::dynamics::{normalize_dataset, simulate_advection, AdvectionConfig};
use crate::error::{Error, Result};
use crate::network::{Model, ModelSpec};
use crate::report::CsvRow;
use crate::scan::{scan, Backend, ScanCoeffs};
use crate::tensor::{Scalar, Tensor};
use crate::trainer::{TrainConfig, Trainer};

/// Single-worker speed-ups outside this band are flagged.
pub const SANITY_BAND: (f64, f64) = (0.3, 3.0);

/// Run `f` on a dedicated pool of `workers` threads.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if workers == 0 {
        return Err(Error::Config("worker count must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Median seconds over `repeats` calls after one untimed warm-up call.
pub fn median_seconds<E>(repeats: usize, mut f: impl FnMut() -> std::result::Result<(), E>) -> std::result::Result<f64, E> {
    f()?;
    let mut times = Vec::with_capacity(repeats.max(1));
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(median(&mut times))
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanBenchConfig {
    pub sizes: Vec<usize>,
    pub batch: usize,
    pub time: usize,
    pub channels: usize,
    pub repeats: usize,
    pub backends: Vec<Backend>,
    pub seed: u64,
}

impl Default for ScanBenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![4, 16, 32, 64],
            batch: 4,
            time: 100,
            channels: 1,
            repeats: 10,
            backends: Backend::ALL.to_vec(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanBenchRow {
    pub size: usize,
    pub backend: String,
    pub workers: usize,
    pub repeats: usize,
    pub median_ms: f64,
    /// Sequential median over this backend's median.
    pub speedup: f64,
    /// Cross-check error against the sequential scan, relative to max |h|.
    pub check_error: f64,
    pub flag: String,
}

impl CsvRow for ScanBenchRow {
    const HEADER: &'static [&'static str] =
        &["size", "backend", "workers", "repeats", "median_ms", "speedup", "check_error", "flag"];
}

/// Allowed cross-check error per backend for f32 scans.
pub fn scan_tolerance(backend: Backend) -> f64 {
    match backend {
        Backend::Sequential | Backend::Blelloch => 1e-5,
        Backend::LogDomain => 1e-4,
    }
}

/// Time scans of (B, T, C, H, W) coefficients with a ∈ (0, 1) and
/// b ∈ [−1, 1] for each size and backend.
pub fn bench_scan(cfg: &ScanBenchConfig, workers: usize) -> Result<Vec<ScanBenchRow>> {
    with_workers(workers, || bench_scan_inner(cfg, workers))?
}

fn bench_scan_inner(cfg: &ScanBenchConfig, workers: usize) -> Result<Vec<ScanBenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for &size in &cfg.sizes {
        let shape = [cfg.batch, cfg.time, cfg.channels, size, size];
        let a = Tensor::<f32>::from_fn(&shape, |_| rng.random_range(1e-3..1.0f32));
        let b = Tensor::<f32>::uniform(&shape, -1.0, 1.0, &mut rng);
        let h0 = Tensor::zeros(&[cfg.batch, cfg.channels, size, size]);
        let linear = ScanCoeffs::linear(a, b, h0.clone())?;
        let (log_a, log_b) = linear.to_log()?;
        let log = ScanCoeffs::log(log_a, log_b, h0)?;
        let coeffs = |be: Backend| if be == Backend::LogDomain { &log } else { &linear };

        let reference = scan(&linear, Backend::Sequential)?;
        let scale = reference.max_abs().as_f64().max(1.0);
        let seq_time = median_seconds(cfg.repeats, || scan(&linear, Backend::Sequential).map(|_| ()))?;
        for &be in &cfg.backends {
            let out = scan(coeffs(be), be)?;
            let err = out.max_abs_diff(&reference).as_f64() / scale;
            if !(err <= scan_tolerance(be)) {
                return Err(Error::Contract(format!(
                    "{} scan disagrees with sequential at size {size}: {err:e}",
                    be.name()
                )));
            }
            let t = if be == Backend::Sequential {
                seq_time
            } else {
                median_seconds(cfg.repeats, || scan(coeffs(be), be).map(|_| ()))?
            };
            let speedup = seq_time / t;
            let flag = if workers == 1 && !(SANITY_BAND.0..=SANITY_BAND.1).contains(&speedup) {
                "outside-sanity-band"
            } else {
                ""
            };
            rows.push(ScanBenchRow {
                size,
                backend: be.name().into(),
                workers,
                repeats: cfg.repeats,
                median_ms: t * 1e3,
                speedup,
                check_error: err,
                flag: flag.into(),
            });
        }
    }
    Ok(rows)
}

/// Differences between a model's timed route and an independent one: the
/// sequential scan for minimal cells, an f64 copy for reference cells.
pub fn cross_check_model(model: &Model<f32>, frames: &Tensor<f32>) -> Result<f64> {
    let out = model.forward_tf(frames)?;
    let (reference, tol) = if model.spec.kind.is_minimal() {
        let mut seq = model.clone();
        seq.spec.backend = Backend::Sequential;
        (seq.forward_tf(frames)?, 1e-5)
    } else {
        let m64 = model.cast::<f64>();
        (m64.forward_tf(&frames.cast())?.cast::<f32>(), 1e-4)
    };
    let scale = reference.max_abs().as_f64().max(1.0);
    let err = out.max_abs_diff(&reference).as_f64() / scale;
    if !(err <= tol) {
        return Err(Error::Contract(format!(
            "{} {} forward disagrees with its reference route: {err:e}",
            model.spec.kind,
            model.spec.backend.name()
        )));
    }
    Ok(err)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochBenchRow {
    pub model: String,
    pub backend: String,
    pub epoch: usize,
    pub seconds: f64,
    pub seed: u64,
    pub workers: usize,
}

impl CsvRow for EpochBenchRow {
    const HEADER: &'static [&'static str] = &["model", "backend", "epoch", "seconds", "seed", "workers"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub model: String,
    pub backend: String,
    /// Epochs (1-based) included in the statistics.
    pub epochs: Vec<usize>,
    pub mean_seconds: f64,
    pub std_seconds: f64,
}

/// Epochs 2..=6 when available; the first epoch is treated as warm-up.
pub fn summary_epochs(total: usize) -> std::ops::RangeInclusive<usize> {
    if total >= 2 {
        2..=total.min(6)
    } else {
        1..=total
    }
}

/// Train each model for `cfg.epochs` epochs and report per-epoch seconds.
pub fn bench_epoch(
    specs: &[ModelSpec],
    data: &Tensor<f32>,
    cfg: &TrainConfig,
    workers: usize,
) -> Result<(Vec<EpochBenchRow>, Vec<EpochSummary>)> {
    with_workers(workers, || {
        let mut rows = Vec::new();
        let mut summaries = Vec::new();
        for spec in specs {
            let model = Model::<f32>::build(*spec, cfg.seed)?;
            cross_check_model(&model, &data.narrow(0, 0, 1)?.narrow(1, 0, cfg.crop)?)?;
            let mut tr = Trainer::new(model, cfg.clone())?;
            let stats = tr.fit(data)?;
            let seconds: Vec<f64> = stats.iter().map(|s| s.seconds).collect();
            for (e, s) in seconds.iter().enumerate() {
                rows.push(EpochBenchRow {
                    model: spec.kind.name().into(),
                    backend: spec.backend.name().into(),
                    epoch: e + 1,
                    seconds: *s,
                    seed: cfg.seed,
                    workers,
                });
            }
            let used: Vec<usize> = summary_epochs(seconds.len()).collect();
            let picked: Vec<f64> = used.iter().map(|&e| seconds[e - 1]).collect();
            let (mean, std) = mean_std(&picked);
            summaries.push(EpochSummary {
                model: spec.kind.name().into(),
                backend: spec.backend.name().into(),
                epochs: used,
                mean_seconds: mean,
                std_seconds: std,
            });
        }
        Ok((rows, summaries))
    })?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepBenchConfig {
    pub kinds: Vec<CellKind>,
    /// Teacher-forced input frames per step.
    pub frames: usize,
    pub size: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for StepBenchConfig {
    fn default() -> Self {
        Self {
            kinds: CellKind::ALL.to_vec(),
            frames: 100,
            size: 16,
            repeats: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepBenchRow {
    pub model: String,
    pub backend: String,
    pub workers: usize,
    pub frames: usize,
    pub size: usize,
    pub params: usize,
    pub median_ms: f64,
    /// ConvLSTM (sequential) median over this model's median.
    pub speedup_vs_convlstm: f64,
    pub check_error: f64,
}

impl CsvRow for StepBenchRow {
    const HEADER: &'static [&'static str] = &[
        "model",
        "backend",
        "workers",
        "frames",
        "size",
        "params",
        "median_ms",
        "speedup_vs_convlstm",
        "check_error",
    ];
}

/// Gradient agreement between the timed model and its reference route.
fn cross_check_grads(tr: &Trainer<f32>, crop: &Tensor<f32>) -> Result<f64> {
    let (_, grads) = tr.loss_and_grads(crop)?;
    let (reference, tol) = if tr.model.spec.kind.is_minimal() {
        let mut seq = Trainer::new(tr.model.clone(), tr.cfg.clone())?;
        seq.model.spec.backend = Backend::Sequential;
        (seq.loss_and_grads(crop)?.1, 1e-4)
    } else {
        let t64 = Trainer::new(tr.model.cast::<f64>(), tr.cfg.clone())?;
        let g = t64.loss_and_grads(&crop.cast())?.1;
        (g.iter().map(|t| t.cast::<f32>()).collect(), 1e-3)
    };
    let err = max_relative_error(&grads, &reference);
    if !(err <= tol) {
        return Err(Error::Contract(format!(
            "{} gradients disagree with their reference route: {err:e}",
            tr.model.spec.kind
        )));
    }
    Ok(err)
}

/// Full-sequence training step (forward over `frames` inputs, backward,
/// AdamW) for the four-layer presets; ConvLSTM is always measured as the
/// baseline.
pub fn bench_train_step(cfg: &StepBenchConfig, workers: usize) -> Result<Vec<StepBenchRow>> {
    with_workers(workers, || {
        let adv = AdvectionConfig {
            n: cfg.size,
            frames: cfg.frames + 1,
            seed: cfg.seed,
            ..AdvectionConfig::default()
        };
        let seq = simulate_advection(&adv)?;
        let s = seq.shape().to_vec();
        let seq = seq.reshape(&[1, s[0], s[1], s[2], s[3]])?;
        let (seq, _) = normalize_dataset(&seq, None)?;
        let crop = seq.cast::<f32>();
        let train_cfg = TrainConfig {
            crop: cfg.frames + 1,
            tf: cfg.frames,
            ..TrainConfig::navier_stokes(1, cfg.seed)
        };

        let mut kinds = vec![CellKind::ConvLstm];
        kinds.extend(cfg.kinds.iter().copied().filter(|&k| k != CellKind::ConvLstm));
        let mut rows: Vec<StepBenchRow> = Vec::new();
        let mut baseline = f64::NAN;
        for kind in kinds {
            let spec = ModelSpec::navier_stokes(kind);
            let model = Model::<f32>::build(spec, cfg.seed)?;
            let params = model.param_count();
            let mut tr = Trainer::new(model, train_cfg.clone())?;
            let err = cross_check_grads(&tr, &crop)?;
            let t = median_seconds(cfg.repeats, || tr.train_step(&crop, train_cfg.lr0).map(|_| ()))?;
            if kind == CellKind::ConvLstm {
                baseline = t;
            }
            rows.push(StepBenchRow {
                model: kind.name().into(),
                backend: spec.backend.name().into(),
                workers,
                frames: cfg.frames,
                size: cfg.size,
                params,
                median_ms: t * 1e3,
                speedup_vs_convlstm: baseline / t,
                check_error: err,
            });
        }
        rows.retain(|r| r.model != CellKind::ConvLstm.name() || cfg.kinds.contains(&CellKind::ConvLstm));
        Ok(rows)
    })?
}
