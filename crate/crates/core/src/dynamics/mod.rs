//! Dataset generation, preprocessing and persistence.

pub mod advection;
pub mod fft;
pub mod navier_stokes;
pub mod stdf;

use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use advection::{simulate_advection, AdvectionConfig};
pub use navier_stokes::{simulate_navier_stokes, NsConfig};
pub use stdf::{read_stdf, write_stdf, ChannelStats, Dtype, StdfDataset};

use crate::binio;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Non-overlapping block mean over the last two axes.
pub fn downsample<T: Scalar>(seq: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let shape = seq.shape();
    if shape.len() < 2 {
        return Err(Error::Shape(format!("downsample needs a spatial tensor, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Config(format!("grid {h}x{w} is not divisible by factor {factor}")));
    }
    if factor == 1 {
        return Ok(seq.clone());
    }
    let (oh, ow) = (h / factor, w / factor);
    let planes = seq.len() / (h * w).max(1);
    let inv = 1.0 / (factor * factor) as f64;
    let src = seq.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for v in &plane[(oy * factor + dy) * w + ox * factor..][..factor] {
                        acc += v.as_f64();
                    }
                }
                out.push(T::of(acc * inv));
            }
        }
    }
    let mut out_shape = shape.to_vec();
    let r = out_shape.len();
    out_shape[r - 2] = oh;
    out_shape[r - 1] = ow;
    Tensor::new(&out_shape, out)
}

fn check_nt_chw(d: &Tensor<impl Scalar>) -> Result<usize> {
    if d.rank() != 5 {
        return Err(Error::Shape(format!("dataset must be (N,T,C,H,W), got {:?}", d.shape())));
    }
    Ok(d.shape()[2])
}

/// Per-channel population mean and std, accumulated in f64.
pub fn channel_stats<T: Scalar>(d: &Tensor<T>) -> Result<Vec<ChannelStats>> {
    let c = check_nt_chw(d)?;
    let plane = d.shape()[3] * d.shape()[4];
    let mut sum = vec![0.0f64; c];
    let mut count = vec![0usize; c];
    for (i, chunk) in d.data().chunks(plane.max(1)).enumerate() {
        let ch = i % c;
        sum[ch] += chunk.iter().map(|v| v.as_f64()).sum::<f64>();
        count[ch] += chunk.len();
    }
    let mean: Vec<f64> = (0..c).map(|k| if count[k] > 0 { sum[k] / count[k] as f64 } else { 0.0 }).collect();
    let mut sq = vec![0.0f64; c];
    for (i, chunk) in d.data().chunks(plane.max(1)).enumerate() {
        let ch = i % c;
        sq[ch] += chunk.iter().map(|v| (v.as_f64() - mean[ch]).powi(2)).sum::<f64>();
    }
    Ok((0..c)
        .map(|k| {
            let std = if count[k] > 0 { (sq[k] / count[k] as f64).sqrt() } else { 0.0 };
            let degenerate = !(std > 1e-12 * (1.0 + mean[k].abs()));
            ChannelStats {
                mean: mean[k],
                std: if degenerate { 1.0 } else { std },
                std_fallback: degenerate,
                normalized: true,
            }
        })
        .collect())
}

fn apply_per_channel<T: Scalar>(d: &Tensor<T>, stats: &[ChannelStats], f: impl Fn(f64, &ChannelStats) -> f64) -> Result<Tensor<T>> {
    let c = check_nt_chw(d)?;
    if stats.len() != c {
        return Err(Error::Shape(format!("{} channel stats for {c} channels", stats.len())));
    }
    let plane = (d.shape()[3] * d.shape()[4]).max(1);
    let mut out = d.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let s = &stats[i % c];
        chunk.iter_mut().for_each(|v| *v = T::of(f(v.as_f64(), s)));
    }
    Ok(out)
}

/// Per-channel z-score. Without `stats` they are computed from `d`;
/// validation and test splits pass the training statistics.
pub fn normalize_dataset<T: Scalar>(d: &Tensor<T>, stats: Option<&[ChannelStats]>) -> Result<(Tensor<T>, Vec<ChannelStats>)> {
    let stats = match stats {
        Some(s) => s.iter().map(|s| ChannelStats { normalized: true, ..*s }).collect(),
        None => channel_stats(d)?,
    };
    let out = apply_per_channel(d, &stats, |v, s| (v - s.mean) / s.std)?;
    Ok((out, stats))
}

pub fn denormalize<T: Scalar>(d: &Tensor<T>, stats: &[ChannelStats]) -> Result<Tensor<T>> {
    apply_per_channel(d, stats, |v, s| v * s.std + s.mean)
}

/// Read a flat little-endian f32 file of `h`×`w` frames, block-average by
/// `stride` and z-score it. The result is one sequence (1, frames, 1, h/stride, w/stride).
pub fn ingest_raw_grid(path: &Path, h: usize, w: usize, stride: usize) -> Result<StdfDataset<f32>> {
    if h == 0 || w == 0 {
        return Err(Error::Config("raw grid extents must be positive".into()));
    }
    let bytes = binio::read_file(path)?;
    let frame_bytes = h * w * 4;
    if bytes.len() % frame_bytes != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{} bytes is not a whole number of {h}x{w} f32 frames", bytes.len()),
        });
    }
    let frames = bytes.len() / frame_bytes;
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let grid = Tensor::new(&[1, frames, 1, h, w], data)?;
    if let Some(i) = grid.non_finite_index() {
        return Err(Error::Numeric {
            context: format!("raw grid {}", path.display()),
            index: i,
        });
    }
    let grid = downsample(&grid, stride)?;
    let (norm, stats) = normalize_dataset(&grid, None)?;
    StdfDataset::new(norm, stats)
}

/// Write frames as flat little-endian f32, the format read by [`ingest_raw_grid`].
pub fn write_raw_grid<T: Scalar>(path: &Path, frames: &Tensor<T>) -> Result<()> {
    let mut out = Vec::with_capacity(frames.len() * 4);
    for v in frames.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    binio::write_file(path, &out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Sample counts per split. Simulations draw their seeds from consecutive,
/// non-overlapping ranges starting at `base_seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub const FULL: SplitSizes = SplitSizes {
        train: 1000,
        val: 50,
        test: 200,
    };
    pub const DESK: SplitSizes = SplitSizes {
        train: 200,
        val: 20,
        test: 50,
    };

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn seeds(&self, split: Split, base_seed: u64) -> Range<u64> {
        let before: usize = Split::ALL
            .iter()
            .take_while(|&&s| s != split)
            .map(|&s| self.count(s))
            .sum();
        let start = base_seed + before as u64;
        start..start + self.count(split) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Source {
    NavierStokes { ns: NsConfig, downsample: usize },
    Advection { advection: AdvectionConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: Source,
    pub splits: SplitSizes,
    pub base_seed: u64,
}

impl DatasetConfig {
    /// 64² simulations averaged down to 16², 50 frames.
    pub fn navier_stokes(splits: SplitSizes) -> Self {
        Self {
            source: Source::NavierStokes {
                ns: NsConfig::default(),
                downsample: 4,
            },
            splits,
            base_seed: 0,
        }
    }

    pub fn advection_desk() -> Self {
        Self {
            source: Source::Advection {
                advection: AdvectionConfig::default(),
            },
            splits: SplitSizes::DESK,
            base_seed: 0,
        }
    }

    /// `ns-desk`, `ns-paper` or `adv-desk`. `geo-desk` goes through
    /// [`geo_windows`] since it needs an external grid.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ns-desk" => Ok(Self::navier_stokes(SplitSizes::DESK)),
            "ns-paper" => Ok(Self::navier_stokes(SplitSizes::FULL)),
            "adv-desk" => Ok(Self::advection_desk()),
            "geo-desk" => Err(Error::Config("preset geo-desk is built from a raw grid file".into())),
            other => Err(Error::Config(format!("unknown dataset preset {other:?}"))),
        }
    }

    pub fn frames(&self) -> usize {
        match &self.source {
            Source::NavierStokes { ns, .. } => ns.frames,
            Source::Advection { advection } => advection.frames,
        }
    }

    /// One sequence (T, 1, H, W) for `seed`.
    pub fn simulate(&self, seed: u64) -> Result<Tensor<f64>> {
        match &self.source {
            Source::NavierStokes { ns, downsample: f } => {
                let seq = simulate_navier_stokes(&NsConfig { seed, ..*ns })?;
                downsample(&seq, *f)
            }
            Source::Advection { advection } => simulate_advection(&AdvectionConfig { seed, ..*advection }),
        }
    }

    /// Raw (unnormalized) samples of one split, (N, T, 1, H, W), generated
    /// in parallel across seeds.
    pub fn generate_split(&self, split: Split) -> Result<Tensor<f64>> {
        let seeds: Vec<u64> = self.splits.seeds(split, self.base_seed).collect();
        let seqs = seeds.par_iter().map(|&s| self.simulate(s)).collect::<Result<Vec<_>>>()?;
        stack(&seqs)
    }
}

fn stack(seqs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let Some(first) = seqs.first() else {
        return Err(Error::Contract("stack needs at least one sequence".into()));
    };
    let parts: Vec<Tensor<f64>> = seqs
        .iter()
        .map(|s| {
            let mut shape = vec![1];
            shape.extend_from_slice(s.shape());
            s.reshape(&shape)
        })
        .collect::<Result<_>>()?;
    if parts.iter().any(|p| p.shape()[1..] != first.shape()[..]) {
        return Err(Error::Shape("sequences differ in shape".into()));
    }
    Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
}

/// Train/val/test datasets, normalized with the training statistics.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: StdfDataset<f32>,
    pub val: StdfDataset<f32>,
    pub test: StdfDataset<f32>,
}

impl SplitData {
    pub fn get(&self, split: Split) -> &StdfDataset<f32> {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn from_raw(train: Tensor<f64>, val: Tensor<f64>, test: Tensor<f64>) -> Result<Self> {
        let (train, stats) = normalize_dataset(&train, None)?;
        let (val, _) = normalize_dataset(&val, Some(&stats))?;
        let (test, _) = normalize_dataset(&test, Some(&stats))?;
        Ok(Self {
            train: StdfDataset::new(train.cast(), stats.clone())?,
            val: StdfDataset::new(val.cast(), stats.clone())?,
            test: StdfDataset::new(test.cast(), stats)?,
        })
    }

    /// `<stem>.val.stdf` and `<stem>.test.stdf` are written next to `train`.
    pub fn write(&self, train_path: &Path) -> Result<()> {
        for split in Split::ALL {
            write_stdf(&split_path(train_path, split), self.get(split))?;
        }
        Ok(())
    }
}

/// File holding `split` for a dataset whose training file is `train_path`.
pub fn split_path(train_path: &Path, split: Split) -> std::path::PathBuf {
    if split == Split::Train {
        return train_path.to_path_buf();
    }
    let stem = train_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    train_path.with_file_name(format!("{stem}.{}.stdf", split.name()))
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<SplitData> {
    let train = cfg.generate_split(Split::Train)?;
    let val = cfg.generate_split(Split::Val)?;
    let test = cfg.generate_split(Split::Test)?;
    SplitData::from_raw(train, val, test)
}

/// Cut an ingested series (1, T, C, H, W) into non-overlapping windows of
/// `frames`, assigned to train, val and test in time order by the given
/// fractions. Statistics come from the training windows.
pub fn geo_windows(series: &StdfDataset<f32>, frames: usize, fractions: (f64, f64)) -> Result<SplitData> {
    if series.samples() != 1 || frames == 0 {
        return Err(Error::Config("expected one continuous series and a positive window".into()));
    }
    let raw = denormalize(&series.data.cast::<f64>(), &series.stats)?;
    let windows = series.frames() / frames;
    let n_train = (windows as f64 * fractions.0).floor() as usize;
    let n_val = (windows as f64 * fractions.1).floor() as usize;
    if n_train == 0 || windows <= n_train + n_val {
        return Err(Error::Config(format!(
            "{} frames give {windows} windows of {frames}; not enough for three splits",
            series.frames()
        )));
    }
    let cut = |r: Range<usize>| -> Result<Tensor<f64>> {
        let parts: Vec<Tensor<f64>> = r
            .map(|i| raw.narrow(1, i * frames, frames))
            .collect::<Result<_>>()?;
        Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
    };
    SplitData::from_raw(
        cut(0..n_train)?,
        cut(n_train..n_train + n_val)?,
        cut(n_train + n_val..windows)?,
    )
}
