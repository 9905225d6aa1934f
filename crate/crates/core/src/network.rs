//! Forecasting network: 1×1 encoder, layer norm, a stack of residual cell
//! layers each followed by group norm, and a 1×1 decoder.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, Tape, Var};
use crate::binio::{self, ByteReader};
use crate::cells::{cell_sequence_vars, CellKind, CellParams, CellSpec, CellVars, StateVars};
use crate::conv::{ConvKernel, PadMode, Padding};
use crate::error::{Error, Result};
use crate::norm::{resolve_groups, DEFAULT_EPS};
use crate::scan::Backend;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MCWT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: CellKind,
    pub channels: usize,
    pub layers: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Requested group count; the nearest divisor of `channels` is used.
    pub groups: usize,
    pub padding: Padding,
    pub backend: Backend,
    /// Decoder output is added to the current input frame.
    pub predict_delta: bool,
    /// Apply tanh to each layer's normalized output before the residual add.
    pub inter_layer_tanh: bool,
}

impl ModelSpec {
    pub fn new(kind: CellKind, channels: usize, layers: usize) -> Self {
        Self {
            kind,
            channels,
            layers,
            in_channels: 1,
            out_channels: 1,
            groups: 4,
            padding: Padding::PERIODIC,
            backend: kind.default_backend(),
            predict_delta: false,
            inter_layer_tanh: false,
        }
    }

    /// Four layers sized to roughly 175k parameters.
    pub fn navier_stokes(kind: CellKind) -> Self {
        let c = match kind {
            CellKind::ConvGru => 28,
            CellKind::ConvLstm => 25,
            CellKind::MinConvGru => 49,
            CellKind::MinConvLstm | CellKind::MinConvExpLstm => 40,
        };
        Self::new(kind, c, 4)
    }

    /// Three layers; zero padding across latitude, periodic in longitude.
    pub fn geopotential(kind: CellKind) -> Self {
        let c = match kind {
            CellKind::ConvGru => 14,
            CellKind::ConvLstm => 12,
            CellKind::MinConvGru => 24,
            CellKind::MinConvLstm | CellKind::MinConvExpLstm => 20,
        };
        Self {
            padding: Padding::LATLON,
            ..Self::new(kind, c, 3)
        }
    }

    /// Two-layer model with the geopotential widths, small enough for
    /// single-machine experiments.
    pub fn desk(kind: CellKind) -> Self {
        Self {
            layers: 2,
            ..Self::geopotential(kind)
        }
        .with_padding(Padding::PERIODIC)
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_backend(mut self, backend: Backend) -> Self {
        self.backend = backend;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("latent channels must be positive".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("the model needs at least one layer".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("input and output channels must be positive".into()));
        }
        if self.groups == 0 {
            return Err(Error::Config("group count must be positive".into()));
        }
        if self.predict_delta && self.in_channels != self.out_channels {
            return Err(Error::Config(
                "delta prediction needs matching input and output channels".into(),
            ));
        }
        Ok(())
    }

    pub fn resolved_groups(&self) -> usize {
        resolve_groups(self.channels, self.groups)
    }

    pub fn cell_spec(&self) -> CellSpec {
        CellSpec::new(self.kind, self.channels, self.padding)
    }

    /// Parameter total computed from the architecture alone.
    pub fn param_count_formula(&self) -> usize {
        let c = self.channels;
        let k2 = 9;
        let cell = match self.kind {
            CellKind::ConvLstm => 4 * (2 * k2 * c * c + c),
            CellKind::ConvGru => 3 * (2 * k2 * c * c + c),
            CellKind::MinConvGru => 2 * (k2 * c * c + c),
            CellKind::MinConvLstm | CellKind::MinConvExpLstm => 3 * (k2 * c * c + c),
        };
        let encoder = self.in_channels * c + c;
        let layer_norm = 2 * c;
        let decoder = c * self.out_channels + self.out_channels;
        encoder + layer_norm + self.layers * (cell + 2 * c) + decoder
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub cell: CellParams<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub encoder: ConvKernel<T>,
    pub enc_gamma: Tensor<T>,
    pub enc_beta: Tensor<T>,
    pub layers: Vec<Layer<T>>,
    pub decoder: ConvKernel<T>,
}

/// Model parameters bound to a tape.
#[derive(Debug, Clone)]
pub struct ModelVars {
    enc: (Var, Var),
    enc_norm: (Var, Var),
    layers: Vec<(CellVars, Var, Var)>,
    dec: (Var, Var),
}

/// Per-layer recurrent state as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<T> {
    pub h: Tensor<T>,
    pub s: Option<Tensor<T>>,
}

pub fn build_model<T: Scalar>(spec: ModelSpec, seed: u64) -> Result<Model<T>> {
    Model::build(spec, seed)
}

pub fn count_params<T: Scalar>(model: &Model<T>) -> usize {
    model.param_count()
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialization from `seed`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = spec.channels;
        let encoder = ConvKernel::init(c, spec.in_channels, 1, spec.padding, &mut rng)?;
        let mut layers = Vec::with_capacity(spec.layers);
        for _ in 0..spec.layers {
            layers.push(Layer {
                cell: CellParams::init(spec.cell_spec(), &mut rng)?,
                gamma: Tensor::ones(&[c]),
                beta: Tensor::zeros(&[c]),
            });
        }
        let decoder = ConvKernel::init(spec.out_channels, c, 1, spec.padding, &mut rng)?;
        Ok(Self {
            spec,
            encoder,
            enc_gamma: Tensor::ones(&[c]),
            enc_beta: Tensor::zeros(&[c]),
            layers,
            decoder,
        })
    }

    /// Parameters in declaration order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.encoder.weight, &self.encoder.bias, &self.enc_gamma, &self.enc_beta];
        for l in &self.layers {
            v.extend(l.cell.tensors());
            v.push(&l.gamma);
            v.push(&l.beta);
        }
        v.push(&self.decoder.weight);
        v.push(&self.decoder.bias);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![
            &mut self.encoder.weight,
            &mut self.encoder.bias,
            &mut self.enc_gamma,
            &mut self.enc_beta,
        ];
        for l in &mut self.layers {
            v.extend(l.cell.tensors_mut());
            v.push(&mut l.gamma);
            v.push(&mut l.beta);
        }
        v.push(&mut self.decoder.weight);
        v.push(&mut self.decoder.bias);
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let conv = |k: &ConvKernel<T>| ConvKernel {
            weight: k.weight.cast(),
            bias: k.bias.cast(),
            padding: k.padding,
        };
        Model {
            spec: self.spec,
            encoder: conv(&self.encoder),
            enc_gamma: self.enc_gamma.cast(),
            enc_beta: self.enc_beta.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    cell: CellParams {
                        spec: l.cell.spec,
                        convs: l.cell.convs.iter().map(conv).collect(),
                    },
                    gamma: l.gamma.cast(),
                    beta: l.beta.cast(),
                })
                .collect(),
            decoder: conv(&self.decoder),
        }
    }

    /// Register every parameter as a trainable leaf; ids follow
    /// [`Model::tensors`] order.
    pub fn bind(&self, tape: &mut Tape<T>) -> ModelVars {
        let mut next = 0usize;
        let mut p = |tape: &mut Tape<T>, t: &Tensor<T>| {
            let v = tape.param(ParamId(next), t);
            next += 1;
            v
        };
        let enc = (p(tape, &self.encoder.weight), p(tape, &self.encoder.bias));
        let enc_norm = (p(tape, &self.enc_gamma), p(tape, &self.enc_beta));
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let convs = l
                .cell
                .convs
                .iter()
                .map(|k| (p(tape, &k.weight), p(tape, &k.bias)))
                .collect();
            let cell = CellVars {
                spec: l.cell.spec,
                convs,
            };
            let g = p(tape, &l.gamma);
            let b = p(tape, &l.beta);
            layers.push((cell, g, b));
        }
        let dec = (p(tape, &self.decoder.weight), p(tape, &self.decoder.bias));
        ModelVars {
            enc,
            enc_norm,
            layers,
            dec,
        }
    }

    pub fn bind_constants(&self, tape: &mut Tape<T>) -> ModelVars {
        let mut c = |t: &Tensor<T>| tape.constant(t.clone());
        let enc = (c(&self.encoder.weight), c(&self.encoder.bias));
        let enc_norm = (c(&self.enc_gamma), c(&self.enc_beta));
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let convs = l.cell.convs.iter().map(|k| (c(&k.weight), c(&k.bias))).collect();
                (
                    CellVars {
                        spec: l.cell.spec,
                        convs,
                    },
                    c(&l.gamma),
                    c(&l.beta),
                )
            })
            .collect();
        let dec = (c(&self.decoder.weight), c(&self.decoder.bias));
        ModelVars {
            enc,
            enc_norm,
            layers,
            dec,
        }
    }

    /// Next-frame predictions for every input frame of a (B, T, C, H, W)
    /// sequence, starting from zero state.
    pub fn forward_tf(&self, frames: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape);
        let x = tape.constant(frames.clone());
        let (preds, _) = forward_vars(&mut tape, self.spec, &vars, x, None)?;
        Ok(tape.value(preds).clone())
    }

    /// Consume `context` and return a rollout positioned after it.
    pub fn warm_up(&self, context: &Tensor<T>) -> Result<Rollout<'_, T>> {
        let mut tape = Tape::new();
        let vars = self.bind_constants(&mut tape);
        let x = tape.constant(context.clone());
        let (preds, states) = forward_vars(&mut tape, self.spec, &vars, x, None)?;
        let t = tape.shape(preds)[1];
        let next = tape.value(preds).narrow(1, t - 1, 1)?;
        Ok(Rollout {
            model: self,
            states: states_to_tensors(&tape, &states),
            next,
        })
    }

    /// `steps` closed-loop frames after `context`, as (B, steps, C, H, W).
    pub fn rollout(&self, context: &Tensor<T>, steps: usize) -> Result<Tensor<T>> {
        self.warm_up(context)?.advance(steps)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        binio::put_u32(&mut out, CHECKPOINT_VERSION);
        for v in encode_spec(&self.spec) {
            binio::put_u32(&mut out, v);
        }
        let ts = self.tensors();
        binio::put_u32(&mut out, ts.len() as u32);
        for t in ts {
            binio::put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                binio::put_u32(&mut out, d as u32);
            }
            for &v in t.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = binio::read_file(path)?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let mut rec = [0u32; SPEC_WORDS];
        for v in &mut rec {
            *v = r.u32()?;
        }
        let spec = decode_spec(&rec).map_err(|e| r.format_error(e))?;
        spec.validate().map_err(|e| r.format_error(e.to_string()))?;
        if spec.channels > 1 << 12 || spec.layers > 256 || spec.in_channels > 256 || spec.out_channels > 256 {
            return Err(r.format_error(format!("implausible architecture {spec:?}")));
        }
        // Reject before allocating: every parameter needs at least 4 bytes.
        let needed = spec.param_count_formula() as u64 * 4;
        if needed > r.remaining() as u64 {
            return Err(Error::Length {
                path: path.to_path_buf(),
                expected: r.position() as u64 + needed,
                found: bytes.len() as u64,
            });
        }
        let mut model = Model::<T>::build(spec, 0)?;
        let n = r.u32()? as usize;
        let expected = model.tensors().len();
        if n != expected {
            return Err(r.format_error(format!("{n} tensors stored, architecture has {expected}")));
        }
        for (i, t) in model.tensors_mut().into_iter().enumerate() {
            let rank = r.u32()? as usize;
            if rank > crate::tensor::MAX_RANK {
                return Err(r.format_error(format!("tensor {i} has rank {rank}")));
            }
            let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            if dims != t.shape() {
                return Err(r.format_error(format!(
                    "tensor {i} stored as {dims:?}, architecture expects {:?}",
                    t.shape()
                )));
            }
            let raw = r.take(t.len() * 4)?;
            for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *dst = T::of(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64);
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Length {
                path: path.to_path_buf(),
                expected: r.position() as u64,
                found: bytes.len() as u64,
            });
        }
        Ok(model)
    }
}

const SPEC_WORDS: usize = 10;

fn pad_code(m: PadMode) -> u32 {
    match m {
        PadMode::Periodic => 0,
        PadMode::Zero => 1,
    }
}

fn encode_spec(s: &ModelSpec) -> [u32; SPEC_WORDS] {
    let kind = CellKind::ALL.iter().position(|&k| k == s.kind).expect("known kind") as u32;
    let backend = Backend::ALL.iter().position(|&b| b == s.backend).expect("known backend") as u32;
    let flags = s.predict_delta as u32 | (s.inter_layer_tanh as u32) << 1;
    [
        kind,
        s.channels as u32,
        s.layers as u32,
        s.in_channels as u32,
        s.out_channels as u32,
        s.groups as u32,
        pad_code(s.padding.rows),
        pad_code(s.padding.cols),
        backend,
        flags,
    ]
}

fn decode_spec(r: &[u32; SPEC_WORDS]) -> std::result::Result<ModelSpec, String> {
    let kind = *CellKind::ALL
        .get(r[0] as usize)
        .ok_or_else(|| format!("unknown cell kind code {}", r[0]))?;
    let pad = |v: u32| match v {
        0 => Ok(PadMode::Periodic),
        1 => Ok(PadMode::Zero),
        other => Err(format!("unknown padding code {other}")),
    };
    let backend = *Backend::ALL
        .get(r[8] as usize)
        .ok_or_else(|| format!("unknown backend code {}", r[8]))?;
    if r[9] > 3 {
        return Err(format!("unknown flag bits {:#x}", r[9]));
    }
    Ok(ModelSpec {
        kind,
        channels: r[1] as usize,
        layers: r[2] as usize,
        in_channels: r[3] as usize,
        out_channels: r[4] as usize,
        groups: r[5] as usize,
        padding: Padding {
            rows: pad(r[6])?,
            cols: pad(r[7])?,
        },
        backend,
        predict_delta: r[9] & 1 != 0,
        inter_layer_tanh: r[9] & 2 != 0,
    })
}

fn states_to_tensors<T: Scalar>(tape: &Tape<T>, states: &[StateVars]) -> Vec<LayerState<T>> {
    states
        .iter()
        .map(|s| LayerState {
            h: tape.value(s.h).clone(),
            s: s.s.map(|v| tape.value(v).clone()),
        })
        .collect()
}

fn fold<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<(Var, [usize; 5])> {
    let s = tape.shape(x).to_vec();
    if s.len() != 5 {
        return Err(Error::Shape(format!("expected (B,T,C,H,W), got {s:?}")));
    }
    let dims = [s[0], s[1], s[2], s[3], s[4]];
    Ok((tape.reshape(x, &[s[0] * s[1], s[2], s[3], s[4]])?, dims))
}

fn layer_checked<T: Scalar>(tape: &Tape<T>, v: Var, layer: &str) -> Result<Var> {
    match tape.value(v).non_finite_index() {
        None => Ok(v),
        Some(index) => Err(Error::Numeric {
            context: format!("layer {layer}"),
            index,
        }),
    }
}

/// Predictions for every frame of `frames` (B, T, C, H, W), continuing from
/// `states` when given. Returns predictions and the final per-layer states.
pub fn forward_vars<T: Scalar>(
    tape: &mut Tape<T>,
    spec: ModelSpec,
    vars: &ModelVars,
    frames: Var,
    states: Option<&[StateVars]>,
) -> Result<(Var, Vec<StateVars>)> {
    let (flat, [b, t, ci, h, w]) = fold(tape, frames)?;
    if ci != spec.in_channels {
        return Err(Error::Shape(format!(
            "model takes {} input channels, frames have {ci}",
            spec.in_channels
        )));
    }
    if let Some(s) = states {
        if s.len() != vars.layers.len() {
            return Err(Error::Shape(format!(
                "{} layer states for {} layers",
                s.len(),
                vars.layers.len()
            )));
        }
    }
    let c = spec.channels;
    let eps = T::of(DEFAULT_EPS);
    let enc = tape.conv2d(flat, vars.enc.0, vars.enc.1, spec.padding)?;
    let enc = tape.group_norm(enc, 1, vars.enc_norm.0, vars.enc_norm.1, eps)?;
    let mut x = tape.reshape(enc, &[b, t, c, h, w])?;
    x = layer_checked(tape, x, "encoder")?;
    let groups = spec.resolved_groups();
    let mut out_states = Vec::with_capacity(vars.layers.len());
    for (l, (cell, gamma, beta)) in vars.layers.iter().enumerate() {
        let st = states.map(|s| s[l]);
        let (hs, st) = cell_sequence_vars(tape, cell, x, st, spec.backend)?;
        out_states.push(st);
        let (hf, _) = fold(tape, hs)?;
        let mut y = tape.group_norm(hf, groups, *gamma, *beta, eps)?;
        if spec.inter_layer_tanh {
            y = tape.tanh(y)?;
        }
        let y = tape.reshape(y, &[b, t, c, h, w])?;
        x = tape.add(y, x)?;
        x = layer_checked(tape, x, &l.to_string())?;
    }
    let (xf, _) = fold(tape, x)?;
    let dec = tape.conv2d(xf, vars.dec.0, vars.dec.1, spec.padding)?;
    let mut preds = tape.reshape(dec, &[b, t, spec.out_channels, h, w])?;
    if spec.predict_delta {
        preds = tape.add(preds, frames)?;
    }
    let preds = layer_checked(tape, preds, "decoder")?;
    Ok((preds, out_states))
}

/// Teacher forcing over the first `tf` frames, then `cl` steps that feed
/// each prediction back as the next input. Returns all `tf + cl`
/// predictions; prediction `k` targets frame `k + 1`.
pub fn forward_tf_cl<T: Scalar>(
    tape: &mut Tape<T>,
    spec: ModelSpec,
    vars: &ModelVars,
    frames: Var,
    tf: usize,
    cl: usize,
) -> Result<Var> {
    if tf == 0 {
        return Err(Error::Config("teacher forcing needs at least one frame".into()));
    }
    let s = tape.shape(frames).to_vec();
    if s.len() != 5 || s[1] < tf {
        return Err(Error::Shape(format!("{tf} teacher-forcing frames requested from {s:?}")));
    }
    let ctx = tape.narrow(frames, 1, 0, tf)?;
    let (preds, mut states) = forward_vars(tape, spec, vars, ctx, None)?;
    let mut all = vec![preds];
    let mut last = tape.narrow(preds, 1, tf - 1, 1)?;
    for _ in 0..cl {
        let (p, st) = forward_vars(tape, spec, vars, last, Some(&states))?;
        states = st;
        all.push(p);
        last = p;
    }
    tape.concat(&all, 1)
}

/// Closed-loop state carried between calls.
pub struct Rollout<'m, T> {
    model: &'m Model<T>,
    states: Vec<LayerState<T>>,
    /// Prediction for the frame after the last consumed input.
    next: Tensor<T>,
}

impl<T: Scalar> Rollout<'_, T> {
    pub fn states(&self) -> &[LayerState<T>] {
        &self.states
    }

    /// Emit `n` frames, feeding each one back as the following input.
    pub fn advance(&mut self, n: usize) -> Result<Tensor<T>> {
        if n == 0 {
            return Err(Error::Contract("rollout needs at least one step".into()));
        }
        let mut outs = Vec::with_capacity(n);
        for _ in 0..n {
            let frame = self.next.clone();
            let mut tape = Tape::new();
            let vars = self.model.bind_constants(&mut tape);
            let st: Vec<StateVars> = self
                .states
                .iter()
                .map(|s| StateVars {
                    h: tape.constant(s.h.clone()),
                    s: s.s.as_ref().map(|v| tape.constant(v.clone())),
                })
                .collect();
            let x = tape.constant(frame.clone());
            let (p, st) = forward_vars(&mut tape, self.model.spec, &vars, x, Some(&st))?;
            self.states = states_to_tensors(&tape, &st);
            self.next = tape.value(p).clone();
            outs.push(frame);
        }
        Tensor::concat(&outs.iter().collect::<Vec<_>>(), 1)
    }
}

pub fn model_forward_tf<T: Scalar>(model: &Model<T>, frames: &Tensor<T>) -> Result<Tensor<T>> {
    model.forward_tf(frames)
}

pub fn model_rollout<T: Scalar>(model: &Model<T>, context: &Tensor<T>, steps: usize) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(Error::Contract("rollout needs at least one step".into()));
    }
    model.rollout(context, steps)
}
