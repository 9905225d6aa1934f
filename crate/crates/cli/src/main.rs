mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use minconv::bench::{bench_epoch, bench_scan, bench_train_step, ScanBenchConfig, StepBenchConfig};
use minconv::conv::Padding;
use minconv::dynamics::{
    generate_dataset, geo_windows, ingest_raw_grid, read_stdf, split_path, DatasetConfig, Split, StdfDataset,
};
use minconv::report::{metric_rows, write_csv, CsvRow, MetricRow};
use minconv::trainer::{evaluate, Evaluation, MetricsRecord, Persistence, TrainConfig, Trainer};
use minconv::{Backend, CellKind, Model, ModelSpec};
use serde::{Deserialize, Serialize};

use config::{Overrides, Paths, RunConfig, Task, PRESETS};

#[derive(Parser)]
#[command(name = "minconv", version, about = "Train and benchmark minimal convolutional recurrent forecasters")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and write train/val/test STDF files.
    Generate(Flags),
    /// Train models and write metrics and checkpoints.
    Train(Flags),
    /// Evaluate a checkpoint on a dataset.
    Eval(Flags),
    /// Time the scan backends on random coefficients.
    BenchScan(Flags),
    /// Time training epochs per model.
    BenchEpoch(Flags),
}

#[derive(Args, Clone, Default)]
struct Flags {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cell kinds, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    model: Vec<CellKind>,
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    preset: Option<String>,
    /// Scan backend for the minimal cells.
    #[arg(long, value_parser = parse_backend)]
    backend: Option<Backend>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, env = "MINCONV_WORKERS")]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training STDF file; `.val.stdf` and `.test.stdf` siblings are picked up.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Flat little-endian f32 grid for `geo-desk`.
    #[arg(long)]
    raw: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    tf: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    samples_per_epoch: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    raw_height: Option<usize>,
    #[arg(long)]
    raw_width: Option<usize>,
    #[arg(long)]
    raw_stride: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    /// Also time single full-sequence training steps.
    #[arg(long)]
    step: bool,
    #[arg(long)]
    step_frames: Option<usize>,
}

fn parse_kind(s: &str) -> Result<CellKind, String> {
    CellKind::parse(s).map_err(|e| e.to_string())
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    Backend::parse(s).map_err(|e| e.to_string())
}

impl Flags {
    fn into_config(self, task: Task) -> RunConfig {
        RunConfig {
            task: Some(task),
            model: self.model,
            preset: self.preset,
            backend: self.backend,
            seed: self.seed,
            seeds: self.seeds,
            epochs: self.epochs,
            workers: self.workers,
            paths: Paths {
                data: self.data,
                out: self.out,
                raw: self.raw,
                checkpoint: self.checkpoint,
            },
            overrides: Overrides {
                lr0: self.lr,
                crop: self.crop,
                tf: self.tf,
                horizon: self.horizon,
                samples_per_epoch: self.samples_per_epoch,
                sizes: self.sizes,
                repeats: self.repeats,
                raw_height: self.raw_height,
                raw_width: self.raw_width,
                raw_stride: self.raw_stride,
                window: self.window,
                step: self.step.then_some(true),
                step_frames: self.step_frames,
            },
        }
    }
}

/// Bad invocation or configuration; exits with status 1.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{}", e.render());
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            report(&e);
            eprintln!("run `minconv --help` for usage");
            ExitCode::from(1)
        }
        Err(e) => {
            report(&e);
            ExitCode::from(2)
        }
    }
}

/// Print the error chain, skipping causes already quoted by their parent.
fn report(e: &anyhow::Error) {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    eprintln!("error: {msg}");
}

fn run(command: Command) -> anyhow::Result<()> {
    let (task, flags) = match command {
        Command::Generate(f) => (Task::Generate, f),
        Command::Train(f) => (Task::Train, f),
        Command::Eval(f) => (Task::Eval, f),
        Command::BenchScan(f) => (Task::BenchScan, f),
        Command::BenchEpoch(f) => (Task::BenchEpoch, f),
    };
    let base = match &flags.config {
        Some(path) => RunConfig::load(path).map_err(|e| usage(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    let mut cfg = base.merge(flags.into_config(task));
    cfg.check(task).map_err(|e| usage(e.to_string()))?;
    let workers = cfg.workers.unwrap_or_else(default_workers);
    if workers == 0 {
        return Err(usage("--workers must be positive"));
    }
    cfg.workers = Some(workers);
    if matches!(task, Task::Generate | Task::Train | Task::Eval) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .context("starting the worker pool")?;
    }
    match task {
        Task::Generate => generate(cfg),
        Task::Train => train(cfg),
        Task::Eval => eval(cfg),
        Task::BenchScan => scan_bench(cfg),
        Task::BenchEpoch => epoch_bench(cfg),
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    p.as_deref().ok_or_else(|| usage(format!("--{flag} is required")))
}

fn model_spec(kind: CellKind, preset: &str, backend: Option<Backend>) -> ModelSpec {
    let spec = match preset {
        "ns-paper" => ModelSpec::navier_stokes(kind),
        "geo-desk" => ModelSpec::desk(kind).with_padding(Padding::LATLON),
        _ => ModelSpec::desk(kind),
    };
    match backend {
        Some(b) if kind.is_minimal() => spec.with_backend(b),
        _ => spec,
    }
}

fn train_config(cfg: &RunConfig, seed: u64) -> TrainConfig {
    let epochs = cfg.epochs.unwrap_or(5);
    let mut tc = if cfg.preset() == "geo-desk" {
        TrainConfig::geopotential(epochs, seed)
    } else {
        TrainConfig::navier_stokes(epochs, seed)
    };
    let o = &cfg.overrides;
    tc.lr0 = o.lr0.unwrap_or(tc.lr0);
    tc.crop = o.crop.unwrap_or(tc.crop);
    tc.tf = o.tf.unwrap_or(tc.tf);
    tc.samples_per_epoch = o.samples_per_epoch.or(tc.samples_per_epoch);
    tc
}

/// Fill the training fields of the resolved config from `tc`.
fn record_training(cfg: &mut RunConfig, tc: &TrainConfig) {
    cfg.epochs = Some(tc.epochs);
    cfg.overrides.lr0 = Some(tc.lr0);
    cfg.overrides.crop = Some(tc.crop);
    cfg.overrides.tf = Some(tc.tf);
    cfg.overrides.samples_per_epoch = tc.samples_per_epoch;
}

fn out_dir(cfg: &RunConfig, default: &str) -> PathBuf {
    cfg.paths.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn generate(mut cfg: RunConfig) -> anyhow::Result<()> {
    let preset = cfg.preset().to_string();
    cfg.preset = Some(preset.clone());
    let out = cfg
        .paths
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("data/{preset}.stdf")));
    let data = if preset == "geo-desk" {
        let raw = require(&cfg.paths.raw, "raw")?.to_path_buf();
        let o = &mut cfg.overrides;
        let (Some(h), Some(w)) = (o.raw_height, o.raw_width) else {
            return Err(usage("geo-desk needs --raw-height and --raw-width"));
        };
        let stride = *o.raw_stride.get_or_insert(1);
        let window = *o.window.get_or_insert(49);
        let series = ingest_raw_grid(&raw, h, w, stride)?;
        geo_windows(&series, window, (0.7, 0.15))?
    } else {
        let mut dc = DatasetConfig::preset(&preset)?;
        dc.base_seed = *cfg.seed.get_or_insert(0);
        generate_dataset(&dc)?
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    data.write(&out)?;
    cfg.paths.out = Some(out.clone());
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    cfg.write(&out.with_file_name(format!("{stem}.config.json")))?;
    for split in Split::ALL {
        println!("{} {:?} {}", split.name(), data.get(split).dims(), split_path(&out, split).display());
    }
    Ok(())
}

/// Model, persistence and raw-unit rows for one evaluation.
fn eval_rows(
    record: &MetricsRecord,
    baseline: &Evaluation,
    test: &StdfDataset<f32>,
) -> Vec<MetricRow> {
    let mut rows = metric_rows(std::slice::from_ref(record));
    let base = MetricsRecord {
        eval: Some(baseline.clone()),
        ..MetricsRecord::from_epochs(record.model, record.seed, &[])
    };
    for mut r in metric_rows(&[base]) {
        r.model = "persistence".into();
        rows.push(r);
    }
    let single = test.stats.len() == 1 && test.stats[0].normalized;
    if let (true, Some(ev)) = (single, &record.eval) {
        let scale = test.stats[0].std;
        for (name, v) in [("rmse_tf_raw", ev.rmse_tf), ("rmse_cl_raw", ev.rmse_cl)] {
            rows.push(MetricRow {
                model: record.model.name().into(),
                seed: record.seed,
                metric: name.into(),
                step: 0,
                value: v * scale,
            });
        }
    }
    rows
}

fn test_split(data: &Path) -> anyhow::Result<Option<StdfDataset<f32>>> {
    let path = split_path(data, Split::Test);
    Ok(if path.exists() { Some(read_stdf(&path)?) } else { None })
}

fn train(mut cfg: RunConfig) -> anyhow::Result<()> {
    let data_path = require(&cfg.paths.data, "data")?.to_path_buf();
    let data = read_stdf::<f32>(&data_path)?;
    let test = test_split(&data_path)?;
    let out = out_dir(&cfg, "runs/train");
    let models = cfg.models_or_all();
    let seeds = cfg.seed_list();
    let preset = cfg.preset().to_string();
    let mut rows = Vec::new();
    for &kind in &models {
        for &seed in &seeds {
            let tc = train_config(&cfg, seed);
            record_training(&mut cfg, &tc);
            let spec = model_spec(kind, &preset, cfg.backend);
            let mut trainer = Trainer::new(Model::<f32>::build(spec, seed)?, tc.clone())?;
            let mut epochs = Vec::new();
            while trainer.epoch < tc.epochs {
                let s = trainer.train_epoch(&data.data)?;
                println!(
                    "{kind} seed {seed} epoch {} loss {:.6} skipped {} {:.1}s",
                    trainer.epoch, s.loss, s.skipped, s.seconds
                );
                epochs.push(s);
            }
            let mut record = MetricsRecord::from_epochs(kind, seed, &epochs);
            let ckpt = out.join(format!("{kind}-seed{seed}.mcwt"));
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            trainer.model.save(&ckpt)?;
            match &test {
                Some(t) if t.frames() > tc.tf => {
                    let horizon = cfg.overrides.horizon.unwrap_or(t.frames() - 1);
                    cfg.overrides.horizon = Some(horizon);
                    let ev = evaluate(&trainer.model, &t.data, tc.tf, horizon)?;
                    let base = evaluate(&Persistence, &t.data, tc.tf, horizon)?;
                    println!(
                        "{kind} seed {seed} test rmse_tf {:.5} rmse_cl {:.5} (persistence {:.5} / {:.5})",
                        ev.rmse_tf, ev.rmse_cl, base.rmse_tf, base.rmse_cl
                    );
                    record.eval = Some(ev);
                    rows.extend(eval_rows(&record, &base, t));
                }
                _ => rows.extend(metric_rows(&[record])),
            }
        }
    }
    cfg.model = models;
    cfg.seeds = seeds;
    cfg.preset = Some(preset);
    cfg.paths.out = Some(out.clone());
    write_csv(&out.join("metrics.csv"), &rows)?;
    cfg.write(&out.join("config.json"))?;
    println!("wrote {}", out.join("metrics.csv").display());
    Ok(())
}

fn eval(mut cfg: RunConfig) -> anyhow::Result<()> {
    let ckpt = require(&cfg.paths.checkpoint, "checkpoint")?.to_path_buf();
    let data_path = require(&cfg.paths.data, "data")?.to_path_buf();
    let mut model = Model::<f32>::load(&ckpt)?;
    if let Some(b) = cfg.backend.filter(|_| model.spec.kind.is_minimal()) {
        model.spec.backend = b;
    }
    let data = read_stdf::<f32>(&data_path)?;
    let tf = *cfg.overrides.tf.get_or_insert(20);
    let horizon = *cfg.overrides.horizon.get_or_insert(data.frames().saturating_sub(1));
    let ev = evaluate(&model, &data.data, tf, horizon)?;
    let base = evaluate(&Persistence, &data.data, tf, horizon)?;
    println!(
        "{} rmse_tf {:.5} rmse_cl {:.5} (persistence {:.5} / {:.5})",
        model.spec.kind, ev.rmse_tf, ev.rmse_cl, base.rmse_tf, base.rmse_cl
    );
    let seed = *cfg.seed.get_or_insert(0);
    let record = MetricsRecord {
        eval: Some(ev),
        ..MetricsRecord::from_epochs(model.spec.kind, seed, &[])
    };
    let out = out_dir(&cfg, "runs/eval");
    cfg.model = vec![model.spec.kind];
    cfg.paths.out = Some(out.clone());
    write_csv(&out.join("metrics.csv"), &eval_rows(&record, &base, &data))?;
    cfg.write(&out.join("config.json"))?;
    Ok(())
}

fn scan_bench(mut cfg: RunConfig) -> anyhow::Result<()> {
    let mut sc = ScanBenchConfig::default();
    if let Some(s) = &cfg.overrides.sizes {
        sc.sizes = s.clone();
    }
    sc.repeats = cfg.overrides.repeats.unwrap_or(sc.repeats);
    if let Some(b) = cfg.backend {
        sc.backends = vec![Backend::Sequential];
        if b != Backend::Sequential {
            sc.backends.push(b);
        }
    }
    sc.seed = *cfg.seed.get_or_insert(0);
    cfg.overrides.sizes = Some(sc.sizes.clone());
    cfg.overrides.repeats = Some(sc.repeats);
    let workers = cfg.workers.unwrap_or(1);
    let rows = bench_scan(&sc, workers)?;
    for r in &rows {
        println!(
            "{:>3}x{:<3} {:<10} {:>9.3} ms  x{:<7.2} err {:.1e} {}",
            r.size, r.size, r.backend, r.median_ms, r.speedup, r.check_error, r.flag
        );
    }
    let out = out_dir(&cfg, "runs/bench-scan");
    cfg.paths.out = Some(out.clone());
    write_csv(&out.join("scan.csv"), &rows)?;
    cfg.write(&out.join("config.json"))?;
    Ok(())
}

/// Epoch statistics as a flat CSV row.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SummaryRow {
    model: String,
    backend: String,
    epochs: String,
    mean_seconds: f64,
    std_seconds: f64,
    workers: usize,
}

impl CsvRow for SummaryRow {
    const HEADER: &'static [&'static str] = &["model", "backend", "epochs", "mean_seconds", "std_seconds", "workers"];
}

fn epoch_bench(mut cfg: RunConfig) -> anyhow::Result<()> {
    let preset = cfg.preset().to_string();
    let train = match &cfg.paths.data {
        Some(p) => read_stdf::<f32>(p)?.data,
        None => {
            let mut dc = DatasetConfig::preset(&preset).map_err(|e| usage(e.to_string()))?;
            dc.base_seed = cfg.seed.unwrap_or(0);
            generate_dataset(&dc)?.train.data
        }
    };
    let seed = *cfg.seed.get_or_insert(0);
    if cfg.epochs.is_none() {
        cfg.epochs = Some(6);
    }
    let tc = train_config(&cfg, seed);
    record_training(&mut cfg, &tc);
    let models = cfg.models_or_all();
    let specs: Vec<ModelSpec> = models.iter().map(|&k| model_spec(k, &preset, cfg.backend)).collect();
    let workers = cfg.workers.unwrap_or(1);
    let (rows, summaries) = bench_epoch(&specs, &train, &tc, workers)?;
    let summary_rows: Vec<SummaryRow> = summaries
        .iter()
        .map(|s| SummaryRow {
            model: s.model.clone(),
            backend: s.backend.clone(),
            epochs: match (s.epochs.first(), s.epochs.last()) {
                (Some(a), Some(b)) => format!("{a}-{b}"),
                _ => String::new(),
            },
            mean_seconds: s.mean_seconds,
            std_seconds: s.std_seconds,
            workers,
        })
        .collect();
    for s in &summary_rows {
        println!(
            "{:<15} {:<10} epochs {:<4} {:.3} ± {:.3} s",
            s.model, s.backend, s.epochs, s.mean_seconds, s.std_seconds
        );
    }
    let out = out_dir(&cfg, "runs/bench-epoch");
    write_csv(&out.join("epoch.csv"), &rows)?;
    write_csv(&out.join("epoch_summary.csv"), &summary_rows)?;
    if cfg.overrides.step == Some(true) {
        let sc = StepBenchConfig {
            kinds: models.clone(),
            frames: *cfg.overrides.step_frames.get_or_insert(100),
            repeats: *cfg.overrides.repeats.get_or_insert(5),
            seed,
            ..StepBenchConfig::default()
        };
        let steps = bench_train_step(&sc, workers)?;
        for r in &steps {
            println!(
                "step {:<15} {:<10} {:>9.1} ms  x{:.2} vs convlstm",
                r.model, r.backend, r.median_ms, r.speedup_vs_convlstm
            );
        }
        write_csv(&out.join("step.csv"), &steps)?;
    }
    cfg.model = models;
    cfg.preset = Some(preset);
    cfg.paths.out = Some(out.clone());
    cfg.write(&out.join("config.json"))?;
    Ok(())
}
