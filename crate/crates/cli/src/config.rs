//! Run configuration: an optional JSON document merged with command-line
//! flags (flags win), then filled with defaults and written next to the
//! outputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use minconv::{Backend, CellKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Generate,
    Train,
    Eval,
    BenchScan,
    BenchEpoch,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Generate => "generate",
            Task::Train => "train",
            Task::Eval => "eval",
            Task::BenchScan => "bench-scan",
            Task::BenchEpoch => "bench-epoch",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub raw: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Overrides {
    pub lr0: Option<f64>,
    pub crop: Option<usize>,
    pub tf: Option<usize>,
    pub horizon: Option<usize>,
    pub samples_per_epoch: Option<usize>,
    pub sizes: Option<Vec<usize>>,
    pub repeats: Option<usize>,
    /// Raw grid geometry for `geo-desk`.
    pub raw_height: Option<usize>,
    pub raw_width: Option<usize>,
    pub raw_stride: Option<usize>,
    /// Frames per window cut from an ingested series.
    pub window: Option<usize>,
    /// Also time single full-sequence training steps in `bench-epoch`.
    pub step: Option<bool>,
    pub step_frames: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Option<Task>,
    pub model: Vec<CellKind>,
    pub preset: Option<String>,
    pub backend: Option<Backend>,
    pub seed: Option<u64>,
    pub seeds: Vec<u64>,
    pub epochs: Option<usize>,
    pub workers: Option<usize>,
    pub paths: Paths,
    pub overrides: Overrides,
}

pub const PRESETS: [&str; 4] = ["ns-desk", "ns-paper", "geo-desk", "adv-desk"];

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Fields set in `flags` replace those in `self`.
    pub fn merge(mut self, flags: RunConfig) -> Self {
        fn pick<T>(base: &mut Option<T>, new: Option<T>) {
            if new.is_some() {
                *base = new;
            }
        }
        pick(&mut self.task, flags.task);
        if !flags.model.is_empty() {
            self.model = flags.model;
        }
        pick(&mut self.preset, flags.preset);
        pick(&mut self.backend, flags.backend);
        pick(&mut self.seed, flags.seed);
        if !flags.seeds.is_empty() {
            self.seeds = flags.seeds;
        }
        pick(&mut self.epochs, flags.epochs);
        pick(&mut self.workers, flags.workers);
        let (p, f) = (&mut self.paths, flags.paths);
        pick(&mut p.data, f.data);
        pick(&mut p.out, f.out);
        pick(&mut p.raw, f.raw);
        pick(&mut p.checkpoint, f.checkpoint);
        let (o, f) = (&mut self.overrides, flags.overrides);
        pick(&mut o.lr0, f.lr0);
        pick(&mut o.crop, f.crop);
        pick(&mut o.tf, f.tf);
        pick(&mut o.horizon, f.horizon);
        pick(&mut o.samples_per_epoch, f.samples_per_epoch);
        pick(&mut o.sizes, f.sizes);
        pick(&mut o.repeats, f.repeats);
        pick(&mut o.raw_height, f.raw_height);
        pick(&mut o.raw_width, f.raw_width);
        pick(&mut o.raw_stride, f.raw_stride);
        pick(&mut o.window, f.window);
        pick(&mut o.step, f.step);
        pick(&mut o.step_frames, f.step_frames);
        self
    }

    /// Check the task against the subcommand and the preset name.
    pub fn check(&self, task: Task) -> anyhow::Result<()> {
        if let Some(t) = self.task {
            if t != task {
                bail!("config is for task {}, but {} was requested", t.name(), task.name());
            }
        }
        if let Some(p) = &self.preset {
            if !PRESETS.contains(&p.as_str()) {
                bail!("unknown preset {p:?}; expected one of {}", PRESETS.join(", "));
            }
        }
        Ok(())
    }

    pub fn preset(&self) -> &str {
        self.preset.as_deref().unwrap_or("ns-desk")
    }

    /// `seeds` when given, otherwise the single `seed` (default 0).
    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed.unwrap_or(0)]
        } else {
            self.seeds.clone()
        }
    }

    pub fn models_or_all(&self) -> Vec<CellKind> {
        if self.model.is_empty() {
            CellKind::ALL.to_vec()
        } else {
            self.model.clone()
        }
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
