//! AdamW, the cosine schedule, crop-based training and RMSE evaluation.

use std::f64::consts::PI;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::cells::CellKind;
use crate::error::{Error, Result};
use crate::network::{forward_tf_cl, Model};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Updates applied so far.
    pub step: u64,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &[&Tensor<T>]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }
}

/// One AdamW update. Decay `p -= lr·λ·p` is applied first and separately
/// from the bias-corrected adaptive step. Returns `false`, leaving
/// parameters and state untouched, if any gradient is non-finite.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<bool> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
        }
    }
    if grads.iter().any(|g| g.non_finite_index().is_some()) {
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let g = gv.as_f64();
            let mut x = pv.as_f64();
            x -= lr * cfg.weight_decay * x;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            x -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            *pv = T::of(x);
        }
    }
    Ok(true)
}

/// η0 · ½(1 + cos(π e / E)); `e` may be fractional.
pub fn cosine_lr(e: f64, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("cosine schedule needs at least one epoch".into()));
    }
    if !(0.0..=total as f64).contains(&e) {
        return Err(Error::Config(format!("epoch {e} outside 0..={total}")));
    }
    Ok(lr0 * 0.5 * (1.0 + (PI * e / total as f64).cos()))
}

pub fn rmse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("rmse of {:?} vs {:?}", pred.shape(), target.shape())));
    }
    if pred.is_empty() {
        return Err(Error::Shape("rmse of empty tensors".into()));
    }
    let ss: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok((ss / pred.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub adamw: AdamWConfig,
    /// Frames per random crop; the first `tf` are fed as ground truth and
    /// the remaining `crop - 1 - tf` inputs are the model's own predictions.
    pub crop: usize,
    pub tf: usize,
    pub seed: u64,
    /// Cap on samples drawn per epoch; `None` means one pass over the data.
    pub samples_per_epoch: Option<usize>,
}

impl TrainConfig {
    pub fn navier_stokes(epochs: usize, seed: u64) -> Self {
        Self {
            epochs,
            lr0: 5e-4,
            adamw: AdamWConfig::default(),
            crop: 25,
            tf: 20,
            seed,
            samples_per_epoch: None,
        }
    }

    pub fn geopotential(epochs: usize, seed: u64) -> Self {
        Self {
            crop: 24,
            ..Self::navier_stokes(epochs, seed)
        }
    }

    pub fn cl(&self) -> usize {
        self.crop.saturating_sub(1 + self.tf)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.tf == 0 || self.crop < self.tf + 1 {
            return Err(Error::Config(format!(
                "crop {} must exceed teacher-forcing steps {} >= 1",
                self.crop, self.tf
            )));
        }
        if !(self.lr0 >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// Mean loss over samples whose update was applied.
    pub loss: f64,
    pub losses: Vec<f64>,
    pub updates: usize,
    pub skipped: usize,
    pub seconds: f64,
}

/// Training state carried across epochs.
pub struct Trainer<T> {
    pub model: Model<T>,
    pub cfg: TrainConfig,
    pub opt: AdamState,
    pub epoch: usize,
}

fn is_numeric(e: &Error) -> bool {
    matches!(e, Error::Numeric { .. } | Error::Domain { .. })
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamState::new(&model.tensors());
        Ok(Self {
            model,
            cfg,
            opt,
            epoch: 0,
        })
    }

    /// Loss and gradients for one crop (1, crop, C, H, W).
    pub fn loss_and_grads(&self, crop: &Tensor<T>) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let vars = self.model.bind(&mut tape);
        let frames = tape.constant(crop.clone());
        let preds = forward_tf_cl(&mut tape, self.model.spec, &vars, frames, self.cfg.tf, self.cfg.cl())?;
        let n = self.cfg.tf + self.cfg.cl();
        let target = tape.narrow(frames, 1, 1, n)?;
        let loss = tape.mse(preds, target)?;
        let value = tape.value(loss).item()?.as_f64();
        if !value.is_finite() {
            return Err(Error::Numeric {
                context: "training loss".into(),
                index: 0,
            });
        }
        Ok((value, tape.backward(loss)?.into_vec()))
    }

    /// Forward, backward and one AdamW update on a crop. Returns `None` when
    /// the loss or a gradient is non-finite and the update was skipped.
    pub fn train_step(&mut self, crop: &Tensor<T>, lr: f64) -> Result<Option<f64>> {
        match self.loss_and_grads(crop) {
            Ok((loss, grads)) => {
                let applied = adamw_step(&mut self.model.tensors_mut(), &grads, &mut self.opt, lr, &self.cfg.adamw)?;
                Ok(applied.then_some(loss))
            }
            Err(e) if is_numeric(&e) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// One pass in a seeded random order, each sample cropped at a uniform
    /// random start. The learning rate follows the cosine schedule per
    /// update, reaching zero after the final epoch.
    pub fn train_epoch(&mut self, data: &Tensor<T>) -> Result<EpochStats> {
        if data.rank() != 5 {
            return Err(Error::Shape(format!("dataset must be (N,T,C,H,W), got {:?}", data.shape())));
        }
        let (n, frames) = (data.shape()[0], data.shape()[1]);
        if frames < self.cfg.crop {
            return Err(Error::Config(format!("sequences of {frames} frames are shorter than crop {}", self.cfg.crop)));
        }
        if n == 0 {
            return Err(Error::Config("empty training set".into()));
        }
        if self.epoch >= self.cfg.epochs {
            return Err(Error::Contract(format!("all {} epochs already trained", self.cfg.epochs)));
        }
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epoch as u64 + 1);
        let count = self.cfg.samples_per_epoch.unwrap_or(n);
        let mut order: Vec<usize> = Vec::with_capacity(count);
        while order.len() < count {
            let mut pass: Vec<usize> = (0..n).collect();
            pass.shuffle(&mut rng);
            order.extend(pass.into_iter().take(count - order.len()));
        }
        let mut losses = Vec::with_capacity(count);
        let mut skipped = 0;
        for (i, &idx) in order.iter().enumerate() {
            let t0 = rng.random_range(0..=frames - self.cfg.crop);
            let crop = data.narrow(0, idx, 1)?.narrow(1, t0, self.cfg.crop)?;
            let progress = self.epoch as f64 + i as f64 / count as f64;
            let lr = cosine_lr(progress, self.cfg.epochs, self.cfg.lr0)?;
            match self.train_step(&crop, lr)? {
                Some(loss) => losses.push(loss),
                None => skipped += 1,
            }
        }
        self.epoch += 1;
        let loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        Ok(EpochStats {
            loss,
            updates: losses.len(),
            losses,
            skipped,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Train all remaining epochs.
    pub fn fit(&mut self, data: &Tensor<T>) -> Result<Vec<EpochStats>> {
        let mut out = Vec::new();
        while self.epoch < self.cfg.epochs {
            out.push(self.train_epoch(data)?);
        }
        Ok(out)
    }
}

/// Something that turns the first `tf` frames of a sequence into
/// `horizon` next-frame predictions; step `k` (1-based) targets frame `k`.
pub trait Forecaster<T: Scalar>: Sync {
    fn name(&self) -> String;

    /// `frames` is (1, T, C, H, W); returns (1, horizon, C, H, W).
    fn forecast(&self, frames: &Tensor<T>, tf: usize, horizon: usize) -> Result<Tensor<T>>;
}

impl<T: Scalar> Forecaster<T> for Model<T> {
    fn name(&self) -> String {
        self.spec.kind.name().to_string()
    }

    fn forecast(&self, frames: &Tensor<T>, tf: usize, horizon: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape);
        let x = tape.constant(frames.narrow(1, 0, tf)?);
        let preds = forward_tf_cl(&mut tape, self.spec, &vars, x, tf, horizon - tf)?;
        Ok(tape.value(preds).clone())
    }
}

/// Predicts the current input frame; in closed loop it repeats the last
/// teacher-forced frame.
pub struct Persistence;

impl<T: Scalar> Forecaster<T> for Persistence {
    fn name(&self) -> String {
        "persistence".into()
    }

    fn forecast(&self, frames: &Tensor<T>, tf: usize, horizon: usize) -> Result<Tensor<T>> {
        let tf_part = frames.narrow(1, 0, tf)?;
        let last = frames.narrow(1, tf - 1, 1)?;
        let mut parts = vec![&tf_part];
        parts.extend(std::iter::repeat_n(&last, horizon - tf));
        Tensor::concat(&parts, 1)
    }
}

/// Always predicts zeros.
pub struct ZeroForecast;

impl<T: Scalar> Forecaster<T> for ZeroForecast {
    fn name(&self) -> String {
        "zero".into()
    }

    fn forecast(&self, frames: &Tensor<T>, _tf: usize, horizon: usize) -> Result<Tensor<T>> {
        let mut shape = frames.shape().to_vec();
        shape[1] = horizon;
        Ok(Tensor::zeros(&shape))
    }
}

/// Returns the true future frames; its error is zero by construction.
pub struct GroundTruth;

impl<T: Scalar> Forecaster<T> for GroundTruth {
    fn name(&self) -> String {
        "ground-truth".into()
    }

    fn forecast(&self, frames: &Tensor<T>, _tf: usize, horizon: usize) -> Result<Tensor<T>> {
        frames.narrow(1, 1, horizon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// RMSE at steps 1..=horizon over all samples and pixels.
    pub per_step: Vec<f64>,
    pub tf: usize,
    pub rmse_tf: f64,
    pub rmse_cl: f64,
}

/// Per-step RMSE over a (N, T, C, H, W) test set. Samples run in parallel;
/// squared errors are summed in sample order.
pub fn evaluate<T: Scalar, F: Forecaster<T> + ?Sized>(
    forecaster: &F,
    data: &Tensor<T>,
    tf: usize,
    horizon: usize,
) -> Result<Evaluation> {
    if data.rank() != 5 || data.shape()[0] == 0 {
        return Err(Error::Shape(format!("test set must be non-empty (N,T,C,H,W), got {:?}", data.shape())));
    }
    let frames = data.shape()[1];
    if horizon + 1 > frames {
        return Err(Error::Config(format!("horizon {horizon} needs {} frames, sequences have {frames}", horizon + 1)));
    }
    if tf == 0 || tf > horizon {
        return Err(Error::Config(format!("teacher forcing {tf} must lie in 1..={horizon}")));
    }
    let n = data.shape()[0];
    let per_sample: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>> {
            let seq = data.narrow(0, i, 1)?;
            let pred = forecaster.forecast(&seq, tf, horizon)?;
            let target = seq.narrow(1, 1, horizon)?;
            if pred.shape() != target.shape() {
                return Err(Error::Shape(format!(
                    "{} forecast {:?}, expected {:?}",
                    forecaster.name(),
                    pred.shape(),
                    target.shape()
                )));
            }
            let plane = pred.len() / horizon;
            Ok((0..horizon)
                .map(|k| {
                    let a = &pred.data()[k * plane..(k + 1) * plane];
                    let b = &target.data()[k * plane..(k + 1) * plane];
                    a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>()
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let plane = data.len() / (n * frames);
    let mut sums = vec![0.0; horizon];
    for s in &per_sample {
        for (acc, v) in sums.iter_mut().zip(s) {
            *acc += v;
        }
    }
    let per_step: Vec<f64> = sums.iter().map(|s| (s / (n * plane) as f64).sqrt()).collect();
    let mean = |xs: &[f64]| if xs.is_empty() { f64::NAN } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    Ok(Evaluation {
        rmse_tf: mean(&per_step[..tf]),
        rmse_cl: mean(&per_step[tf..]),
        per_step,
        tf,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub model: CellKind,
    pub seed: u64,
    pub train_loss: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub skipped: Vec<usize>,
    pub eval: Option<Evaluation>,
}

impl MetricsRecord {
    pub fn from_epochs(model: CellKind, seed: u64, epochs: &[EpochStats]) -> Self {
        Self {
            model,
            seed,
            train_loss: epochs.iter().map(|e| e.loss).collect(),
            epoch_seconds: epochs.iter().map(|e| e.seconds).collect(),
            skipped: epochs.iter().map(|e| e.skipped).collect(),
            eval: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{generate_dataset, DatasetConfig, SplitSizes};
    use crate::network::ModelSpec;

    fn reference_adamw(p0: f64, g: f64, steps: usize, lr: f64, c: &AdamWConfig) -> f64 {
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for t in 1..=steps {
            p *= 1.0 - lr * c.weight_decay;
            m = c.beta1 * m + (1.0 - c.beta1) * g;
            v = c.beta2 * v + (1.0 - c.beta2) * g * g;
            let mh = m / (1.0 - c.beta1.powi(t as i32));
            let vh = v / (1.0 - c.beta2.powi(t as i32));
            p -= lr * mh / (vh.sqrt() + c.eps);
        }
        p
    }

    #[test]
    fn adamw_matches_reference_equations() {
        let cfg = AdamWConfig::default();
        let mut p = Tensor::<f64>::new(&[3], vec![0.5, -1.25, 2.0]).unwrap();
        let g = Tensor::<f64>::new(&[3], vec![0.3, -0.7, 1e-3]).unwrap();
        let mut st = AdamState::new(&[&p]);
        for _ in 0..3 {
            assert!(adamw_step(&mut [&mut p], std::slice::from_ref(&g), &mut st, 5e-4, &cfg).unwrap());
        }
        for i in 0..3 {
            let want = reference_adamw([0.5, -1.25, 2.0][i], g.data()[i], 3, 5e-4, &cfg);
            assert!((p.data()[i] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn adamw_decay_only_and_no_op() {
        let p0 = Tensor::<f64>::new(&[2], vec![1.0, -3.0]).unwrap();
        let zero = Tensor::<f64>::zeros(&[2]);
        let mut p = p0.clone();
        let mut st = AdamState::new(&[&p]);
        let no_decay = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(&mut [&mut p], std::slice::from_ref(&zero), &mut st, 5e-4, &no_decay).unwrap();
        assert_eq!(p, p0);
        adamw_step(&mut [&mut p], &[zero], &mut st, 5e-4, &AdamWConfig::default()).unwrap();
        for (a, b) in p.data().iter().zip(p0.data()) {
            assert!((a - b * (1.0 - 5e-6)).abs() <= 1e-15);
        }
    }

    #[test]
    fn adamw_skips_non_finite_gradients() {
        let mut p = Tensor::<f32>::ones(&[2]);
        let mut st = AdamState::new(&[&p]);
        let g = Tensor::<f32>::new(&[2], vec![1.0, f32::NAN]).unwrap();
        assert!(!adamw_step(&mut [&mut p], &[g], &mut st, 1e-3, &AdamWConfig::default()).unwrap());
        assert_eq!(st.step, 0);
        assert_eq!(p, Tensor::ones(&[2]));
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0.0, 10, 5e-4).unwrap(), 5e-4);
        assert!(cosine_lr(10.0, 10, 5e-4).unwrap().abs() < 1e-20);
        assert!((cosine_lr(5.0, 10, 5e-4).unwrap() - 2.5e-4).abs() < 1e-18);
        assert!(matches!(cosine_lr(0.0, 0, 5e-4), Err(Error::Config(_))));
        assert!(cosine_lr(11.0, 10, 5e-4).is_err());
    }

    #[test]
    fn rmse_basics() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 4], |i| (i as f64).sin());
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert!((rmse(&a.map(|v| v + 1.0), &a).unwrap() - 1.0).abs() < 1e-15);
        let b = Tensor::<f64>::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).cos());
        let mut ss = 0.0;
        for i in 0..24 {
            let d = a.data()[i] - b.data()[i];
            ss += d * d;
        }
        assert!((rmse(&a, &b).unwrap() - (ss / 24.0).sqrt()).abs() <= 1e-12);
        assert!(matches!(rmse(&a, &Tensor::zeros(&[24])), Err(Error::Shape(_))));
    }

    fn tiny_data(n: usize) -> Tensor<f32> {
        let mut cfg = DatasetConfig::advection_desk();
        cfg.splits = SplitSizes { train: n, val: 1, test: 1 };
        if let crate::dynamics::Source::Advection { advection } = &mut cfg.source {
            advection.n = 8;
            advection.frames = 10;
        }
        generate_dataset(&cfg).unwrap().train.data
    }

    fn tiny_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            crop: 6,
            tf: 4,
            ..TrainConfig::navier_stokes(epochs, 3)
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = tiny_data(3);
        let model = Model::<f32>::build(ModelSpec::new(CellKind::MinConvGru, 4, 1), 1).unwrap();
        let before = model.to_bytes();
        let mut tr = Trainer::new(model, TrainConfig { lr0: 0.0, ..tiny_cfg(1) }).unwrap();
        let st = tr.train_epoch(&data).unwrap();
        assert_eq!(st.updates + st.skipped, 3);
        assert_eq!(tr.model.to_bytes(), before);
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_data(3);
        let run = || {
            let model = Model::<f32>::build(ModelSpec::new(CellKind::ConvGru, 4, 1), 2).unwrap();
            let mut tr = Trainer::new(model, tiny_cfg(2)).unwrap();
            let eps = tr.fit(&data).unwrap();
            (eps.iter().flat_map(|e| e.losses.clone()).collect::<Vec<_>>(), tr.model.to_bytes())
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn stubs_behave_as_documented() {
        let data = tiny_data(2).cast::<f64>();
        let ev = evaluate(&GroundTruth, &data, 4, 9).unwrap();
        assert!(ev.per_step.iter().all(|&v| v == 0.0));
        let ev = evaluate(&ZeroForecast, &data, 4, 9).unwrap();
        assert_eq!(ev.per_step.len(), 9);
        assert!(matches!(evaluate(&ZeroForecast, &data, 4, 10), Err(Error::Config(_))));
        let _ = evaluate(&Persistence, &data, 4, 9).unwrap();
    }
}
