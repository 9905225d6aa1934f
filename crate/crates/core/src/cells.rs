//! Convolutional recurrent cells.
//!
//! The reference cells (ConvLSTM, ConvGRU) convolve the concatenation
//! `[x_t; h_{t-1}]` and must be stepped through time. The minimal cells
//! convolve `x_t` alone, so every gate of every step is computed in one
//! time-folded convolution and the state update reduces to a linear scan.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, Tape, Var};
use crate::conv::{ConvKernel, Padding};
use crate::error::{Error, Result};
use crate::scan::{Backend, ScanCoeffs, SignedLog};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    ConvGru,
    ConvLstm,
    MinConvGru,
    MinConvLstm,
    MinConvExpLstm,
}

impl CellKind {
    pub const ALL: [CellKind; 5] = [
        CellKind::ConvGru,
        CellKind::ConvLstm,
        CellKind::MinConvGru,
        CellKind::MinConvLstm,
        CellKind::MinConvExpLstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CellKind::ConvGru => "convgru",
            CellKind::ConvLstm => "convlstm",
            CellKind::MinConvGru => "minconvgru",
            CellKind::MinConvLstm => "minconvlstm",
            CellKind::MinConvExpLstm => "minconvexplstm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        CellKind::ALL
            .into_iter()
            .find(|k| k.name() == lower)
            .ok_or_else(|| Error::Config(format!("unknown cell kind `{s}`")))
    }

    pub fn is_minimal(self) -> bool {
        matches!(self, CellKind::MinConvGru | CellKind::MinConvLstm | CellKind::MinConvExpLstm)
    }

    /// Gate convolutions, in parameter order.
    pub fn conv_names(self) -> &'static [&'static str] {
        match self {
            CellKind::ConvLstm => &["forget", "input", "output", "candidate"],
            CellKind::ConvGru => &["update", "reset", "candidate"],
            CellKind::MinConvGru => &["update", "candidate"],
            CellKind::MinConvLstm | CellKind::MinConvExpLstm => &["forget", "input", "candidate"],
        }
    }

    pub fn conv_count(self) -> usize {
        self.conv_names().len()
    }

    /// Input channels of each gate convolution as a multiple of `c`.
    pub fn input_factor(self) -> usize {
        if self.is_minimal() {
            1
        } else {
            2
        }
    }

    /// Backend used when none is requested.
    pub fn default_backend(self) -> Backend {
        if self.is_minimal() {
            Backend::Blelloch
        } else {
            Backend::Sequential
        }
    }
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub kind: CellKind,
    pub channels: usize,
    pub kernel: usize,
    pub padding: Padding,
}

impl CellSpec {
    pub fn new(kind: CellKind, channels: usize, padding: Padding) -> Self {
        Self {
            kind,
            channels,
            kernel: 3,
            padding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("cell needs at least one channel".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel)));
        }
        Ok(())
    }

    /// (weight shape, bias shape) per gate convolution.
    pub fn conv_shapes(&self) -> Vec<([usize; 4], [usize; 1])> {
        let c = self.channels;
        let k = self.kernel;
        (0..self.kind.conv_count())
            .map(|_| ([c, c * self.kind.input_factor(), k, k], [c]))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.conv_shapes()
            .iter()
            .map(|(w, b)| w.iter().product::<usize>() + b[0])
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellParams<T> {
    pub spec: CellSpec,
    pub convs: Vec<ConvKernel<T>>,
}

impl<T: Scalar> CellParams<T> {
    pub fn init(spec: CellSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let convs = spec
            .conv_shapes()
            .iter()
            .map(|(w, _)| ConvKernel::init(w[0], w[1], w[2], spec.padding, rng))
            .collect::<Result<_>>()?;
        Ok(Self { spec, convs })
    }

    pub fn zeros(spec: CellSpec) -> Result<Self> {
        spec.validate()?;
        let convs = spec
            .conv_shapes()
            .iter()
            .map(|(w, b)| ConvKernel::new(Tensor::zeros(w), Tensor::zeros(b), spec.padding))
            .collect::<Result<_>>()?;
        Ok(Self { spec, convs })
    }

    /// Weights and biases interleaved in gate order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.convs.iter().flat_map(|k| [&k.weight, &k.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.convs
            .iter_mut()
            .flat_map(|k| [&mut k.weight, &mut k.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(ConvKernel::param_count).sum()
    }

    /// Register every tensor as a trainable leaf, ids starting at `first`.
    pub fn bind(&self, tape: &mut Tape<T>, first: usize) -> CellVars {
        let convs = self
            .convs
            .iter()
            .enumerate()
            .map(|(i, k)| {
                (
                    tape.param(ParamId(first + 2 * i), &k.weight),
                    tape.param(ParamId(first + 2 * i + 1), &k.bias),
                )
            })
            .collect();
        CellVars {
            spec: self.spec,
            convs,
        }
    }

    pub fn bind_constants(&self, tape: &mut Tape<T>) -> CellVars {
        let convs = self
            .convs
            .iter()
            .map(|k| (tape.constant(k.weight.clone()), tape.constant(k.bias.clone())))
            .collect();
        CellVars {
            spec: self.spec,
            convs,
        }
    }
}

/// Cell parameters as tape handles: (weight, bias) per gate convolution.
#[derive(Debug, Clone)]
pub struct CellVars {
    pub spec: CellSpec,
    pub convs: Vec<(Var, Var)>,
}

/// Recurrent state on a tape. `s` is the ConvLSTM cell state.
#[derive(Debug, Clone, Copy)]
pub struct StateVars {
    pub h: Var,
    pub s: Option<Var>,
}

fn checked<T: Scalar>(tape: &Tape<T>, v: Var, kind: CellKind, what: &str) -> Result<Var> {
    match tape.value(v).non_finite_index() {
        None => Ok(v),
        Some(index) => Err(Error::Numeric {
            context: format!("{kind} {what}"),
            index,
        }),
    }
}

/// One convolution with the gate kernels stacked on the output axis, split
/// back into per-gate pre-activations.
fn fused_preacts<T: Scalar>(
    tape: &mut Tape<T>,
    input: Var,
    convs: &[(Var, Var)],
    padding: Padding,
) -> Result<Vec<Var>> {
    let ws: Vec<Var> = convs.iter().map(|c| c.0).collect();
    let bs: Vec<Var> = convs.iter().map(|c| c.1).collect();
    let w = tape.concat(&ws, 0)?;
    let b = tape.concat(&bs, 0)?;
    let y = tape.conv2d(input, w, b, padding)?;
    let mut out = Vec::with_capacity(convs.len());
    let mut start = 0;
    for &wv in &ws {
        let n = tape.shape(wv)[0];
        out.push(tape.narrow(y, 1, start, n)?);
        start += n;
    }
    Ok(out)
}

/// One ConvLSTM step on (B, c, H, W) tensors; returns (h_t, s_t).
pub fn convlstm_step_vars<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &CellVars,
    x: Var,
    h: Var,
    s: Var,
) -> Result<(Var, Var)> {
    let kind = CellKind::ConvLstm;
    let xh = tape.concat(&[x, h], 1)?;
    let g = fused_preacts(tape, xh, &vars.convs, vars.spec.padding)?;
    let f = tape.sigmoid(g[0])?;
    let f = checked(tape, f, kind, "forget gate")?;
    let i = tape.sigmoid(g[1])?;
    let i = checked(tape, i, kind, "input gate")?;
    let o = tape.sigmoid(g[2])?;
    let o = checked(tape, o, kind, "output gate")?;
    let cand = tape.tanh(g[3])?;
    let cand = checked(tape, cand, kind, "candidate")?;
    let keep = tape.mul(f, s)?;
    let write = tape.mul(i, cand)?;
    let s_new = tape.add(keep, write)?;
    let s_new = checked(tape, s_new, kind, "cell state")?;
    let ts = tape.tanh(s_new)?;
    let h_new = tape.mul(o, ts)?;
    Ok((h_new, s_new))
}

/// One ConvGRU step on (B, c, H, W) tensors.
pub fn convgru_step_vars<T: Scalar>(tape: &mut Tape<T>, vars: &CellVars, x: Var, h: Var) -> Result<Var> {
    let kind = CellKind::ConvGru;
    let xh = tape.concat(&[x, h], 1)?;
    let g = fused_preacts(tape, xh, &vars.convs[..2], vars.spec.padding)?;
    let z = tape.sigmoid(g[0])?;
    let z = checked(tape, z, kind, "update gate")?;
    let r = tape.sigmoid(g[1])?;
    let r = checked(tape, r, kind, "reset gate")?;
    let rh = tape.mul(r, h)?;
    let xrh = tape.concat(&[x, rh], 1)?;
    let (w, b) = vars.convs[2];
    let pre = tape.conv2d(xrh, w, b, vars.spec.padding)?;
    let cand = tape.tanh(pre)?;
    let cand = checked(tape, cand, kind, "candidate")?;
    let keep = tape.one_minus(z);
    let keep = tape.mul(keep, h)?;
    let write = tape.mul(z, cand)?;
    tape.add(keep, write)
}

/// Coefficients of a minimal cell for a whole (B, T, c, H, W) sequence.
///
/// `b = weight ⊙ candidate`; `log_a`, when requested, is computed directly
/// from the pre-activations rather than as `ln a`.
#[derive(Debug, Clone, Copy)]
pub struct MinCoeffVars {
    pub a: Var,
    pub log_a: Option<Var>,
    pub weight: Var,
    pub candidate: Var,
    pub b: Var,
}

/// `(log φ̂, log ι̂)` from forget and input pre-activations.
pub fn normalized_log_gates_vars<T: Scalar>(tape: &mut Tape<T>, pf: Var, pi: Var) -> Result<(Var, Var)> {
    Ok((tape.log_gate(pf, pi)?, tape.log_gate(pi, pf)?))
}

pub fn min_coeff_vars<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &CellVars,
    x_seq: Var,
    with_log: bool,
) -> Result<MinCoeffVars> {
    let kind = vars.spec.kind;
    if !kind.is_minimal() {
        return Err(Error::Contract(format!("{kind} has no time-parallel coefficients")));
    }
    let shape = tape.shape(x_seq).to_vec();
    if shape.len() != 5 {
        return Err(Error::Shape(format!("sequence must be (B,T,C,H,W), got {shape:?}")));
    }
    let (bt, c, h, w) = (shape[0] * shape[1], shape[2], shape[3], shape[4]);
    let folded = tape.reshape(x_seq, &[bt, c, h, w])?;
    let g = fused_preacts(tape, folded, &vars.convs, vars.spec.padding)?;
    let (a, log_a, weight, candidate) = match kind {
        CellKind::MinConvGru => {
            let z = tape.sigmoid(g[0])?;
            let a = tape.one_minus(z);
            let log_a = if with_log {
                let sp = tape.softplus(g[0])?;
                Some(tape.neg(sp)?)
            } else {
                None
            };
            (a, log_a, z, g[1])
        }
        CellKind::MinConvLstm => {
            let gates = tape.min_lstm_gates(g[0], g[1])?;
            let a = tape.narrow(gates, 0, 0, bt)?;
            let wgt = tape.narrow(gates, 0, bt, bt)?;
            let log_a = if with_log { Some(tape.log_gate(g[0], g[1])?) } else { None };
            (a, log_a, wgt, g[2])
        }
        CellKind::MinConvExpLstm => {
            let d = tape.sub(g[0], g[1])?;
            let f = tape.sigmoid(d)?;
            let wgt = tape.one_minus(f);
            let log_a = if with_log {
                let nd = tape.neg(d)?;
                let sp = tape.softplus(nd)?;
                Some(tape.neg(sp)?)
            } else {
                None
            };
            (f, log_a, wgt, g[2])
        }
        _ => unreachable!(),
    };
    let a = checked(tape, a, kind, "forget gate")?;
    let candidate = checked(tape, candidate, kind, "candidate")?;
    let b = tape.mul(weight, candidate)?;
    let unfold = |tape: &mut Tape<T>, v: Var| tape.reshape(v, &[shape[0], shape[1], c, h, w]);
    Ok(MinCoeffVars {
        a: unfold(tape, a)?,
        log_a: log_a.map(|v| unfold(tape, v)).transpose()?,
        weight: unfold(tape, weight)?,
        candidate: unfold(tape, candidate)?,
        b: unfold(tape, b)?,
    })
}

/// Run a cell over a (B, T, c, H, W) sequence starting from `state`
/// (zeros when `None`). Returns all hidden states and the final state.
pub fn cell_sequence_vars<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &CellVars,
    x_seq: Var,
    state: Option<StateVars>,
    backend: Backend,
) -> Result<(Var, StateVars)> {
    let kind = vars.spec.kind;
    let shape = tape.shape(x_seq).to_vec();
    if shape.len() != 5 || shape[2] != vars.spec.channels {
        return Err(Error::Shape(format!(
            "{kind} with {} channels cannot take sequence {shape:?}",
            vars.spec.channels
        )));
    }
    let (b, t, c, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    if t == 0 {
        return Err(Error::Shape("empty sequence".into()));
    }
    let state = match state {
        Some(s) => s,
        None => {
            let h0 = tape.constant(Tensor::zeros(&[b, c, h, w]));
            let s0 = (kind == CellKind::ConvLstm).then(|| tape.constant(Tensor::zeros(&[b, c, h, w])));
            StateVars { h: h0, s: s0 }
        }
    };
    if tape.shape(state.h) != [b, c, h, w] {
        return Err(Error::Shape(format!(
            "initial state {:?} does not match sequence {shape:?}",
            tape.shape(state.h)
        )));
    }

    if kind.is_minimal() {
        let co = min_coeff_vars(tape, vars, x_seq, backend == Backend::LogDomain)?;
        let hs = match (backend, co.log_a) {
            (Backend::LogDomain, Some(log_a)) => tape.log_scan(log_a, co.b, state.h)?,
            (other, _) => tape.linear_scan(co.a, co.b, state.h, other)?,
        };
        let last = tape.narrow(hs, 1, t - 1, 1)?;
        let last = tape.reshape(last, &[b, c, h, w])?;
        return Ok((hs, StateVars { h: last, s: None }));
    }

    if backend != Backend::Sequential {
        return Err(Error::Contract(format!(
            "{kind} has a hidden-state dependency and only runs with the sequential backend, not {}",
            backend.name()
        )));
    }
    let mut hv = state.h;
    let mut sv = match (kind, state.s) {
        (CellKind::ConvLstm, Some(s)) => Some(s),
        (CellKind::ConvLstm, None) => Some(tape.constant(Tensor::zeros(&[b, c, h, w]))),
        _ => None,
    };
    let mut outs = Vec::with_capacity(t);
    for step in 0..t {
        let xt = tape.narrow(x_seq, 1, step, 1)?;
        let xt = tape.reshape(xt, &[b, c, h, w])?;
        match kind {
            CellKind::ConvLstm => {
                let (hn, sn) = convlstm_step_vars(tape, vars, xt, hv, sv.expect("cell state"))?;
                hv = hn;
                sv = Some(sn);
            }
            _ => hv = convgru_step_vars(tape, vars, xt, hv)?,
        }
        outs.push(tape.reshape(hv, &[b, 1, c, h, w])?);
    }
    let hs = tape.concat(&outs, 1)?;
    Ok((hs, StateVars { h: hv, s: sv }))
}

fn require_kind<T>(params: &CellParams<T>, kinds: &[CellKind]) -> Result<()> {
    if kinds.contains(&params.spec.kind) {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "parameters belong to {}, expected {:?}",
            params.spec.kind,
            kinds.iter().map(|k| k.name()).collect::<Vec<_>>()
        )))
    }
}

/// One ConvLSTM step on plain tensors; returns (h_t, s_t).
pub fn convlstm_step<T: Scalar>(
    x: &Tensor<T>,
    h_prev: &Tensor<T>,
    s_prev: &Tensor<T>,
    params: &CellParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    require_kind(params, &[CellKind::ConvLstm])?;
    let mut tape = Tape::new();
    let vars = params.bind_constants(&mut tape);
    let (x, h, s) = (
        tape.constant(x.clone()),
        tape.constant(h_prev.clone()),
        tape.constant(s_prev.clone()),
    );
    let (h, s) = convlstm_step_vars(&mut tape, &vars, x, h, s)?;
    Ok((tape.value(h).clone(), tape.value(s).clone()))
}

pub fn convgru_step<T: Scalar>(x: &Tensor<T>, h_prev: &Tensor<T>, params: &CellParams<T>) -> Result<Tensor<T>> {
    require_kind(params, &[CellKind::ConvGru])?;
    let mut tape = Tape::new();
    let vars = params.bind_constants(&mut tape);
    let (x, h) = (tape.constant(x.clone()), tape.constant(h_prev.clone()));
    let h = convgru_step_vars(&mut tape, &vars, x, h)?;
    Ok(tape.value(h).clone())
}

/// Plain-tensor coefficients of a minimal cell.
#[derive(Debug, Clone)]
pub struct MinCoeffs<T> {
    pub a: Tensor<T>,
    pub log_a: Tensor<T>,
    pub weight: Tensor<T>,
    pub candidate: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> MinCoeffs<T> {
    pub fn linear(&self, h0: Tensor<T>) -> Result<ScanCoeffs<T>> {
        ScanCoeffs::linear(self.a.clone(), self.b.clone(), h0)
    }

    pub fn log(&self, h0: Tensor<T>) -> Result<ScanCoeffs<T>> {
        ScanCoeffs::log(self.log_a.clone(), SignedLog::from_linear(&self.b), h0)
    }
}

pub fn min_coeffs<T: Scalar>(x_seq: &Tensor<T>, params: &CellParams<T>) -> Result<MinCoeffs<T>> {
    let mut tape = Tape::new();
    let vars = params.bind_constants(&mut tape);
    let x = tape.constant(x_seq.clone());
    let v = min_coeff_vars(&mut tape, &vars, x, true)?;
    let log_a = v.log_a.ok_or_else(|| Error::Contract("log decay was not built".into()))?;
    Ok(MinCoeffs {
        a: tape.value(v.a).clone(),
        log_a: tape.value(log_a).clone(),
        weight: tape.value(v.weight).clone(),
        candidate: tape.value(v.candidate).clone(),
        b: tape.value(v.b).clone(),
    })
}

fn seq_h0<T: Scalar>(x_seq: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x_seq.shape();
    if s.len() != 5 {
        return Err(Error::Shape(format!("sequence must be (B,T,C,H,W), got {s:?}")));
    }
    Ok(Tensor::zeros(&[s[0], s[2], s[3], s[4]]))
}

/// `a = 1 − z`, `b = z ⊙ h̃` with zero initial state.
pub fn minconvgru_coeffs<T: Scalar>(x_seq: &Tensor<T>, params: &CellParams<T>) -> Result<ScanCoeffs<T>> {
    require_kind(params, &[CellKind::MinConvGru])?;
    min_coeffs(x_seq, params)?.linear(seq_h0(x_seq)?)
}

/// Per-step `(log φ̂, log ι̂)` of a MinConvLSTM.
pub fn minconvlstm_log_gates<T: Scalar>(
    x_seq: &Tensor<T>,
    params: &CellParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    require_kind(params, &[CellKind::MinConvLstm])?;
    let c = min_coeffs(x_seq, params)?;
    let log_i = c.weight.map(|v| v.ln());
    Ok((c.log_a, log_i))
}

/// `log φ̂, log ι̂` from raw pre-activations.
pub fn normalized_log_gates<T: Scalar>(pf: &Tensor<T>, pi: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut tape = Tape::new();
    let (f, i) = (tape.constant(pf.clone()), tape.constant(pi.clone()));
    let (lf, li) = normalized_log_gates_vars(&mut tape, f, i)?;
    Ok((tape.value(lf).clone(), tape.value(li).clone()))
}

/// `σ(u − v)` and its complement: the normalized exponential gates.
pub fn exp_gates<T: Scalar>(pf: &Tensor<T>, pi: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let f = pf.zip_binary(pi, crate::tensor::BinaryOp::Sub)?.map_unary(crate::tensor::UnaryOp::Sigmoid)?;
    let i = f.map(|v| T::one() - v);
    Ok((f, i))
}

pub fn minconvlstm_coeffs<T: Scalar>(x_seq: &Tensor<T>, params: &CellParams<T>) -> Result<ScanCoeffs<T>> {
    require_kind(params, &[CellKind::MinConvLstm])?;
    min_coeffs(x_seq, params)?.linear(seq_h0(x_seq)?)
}

pub fn minconvexplstm_coeffs<T: Scalar>(x_seq: &Tensor<T>, params: &CellParams<T>) -> Result<ScanCoeffs<T>> {
    require_kind(params, &[CellKind::MinConvExpLstm])?;
    min_coeffs(x_seq, params)?.linear(seq_h0(x_seq)?)
}

/// All hidden states of a cell over a (B, T, c, H, W) sequence.
pub fn cell_forward_sequence<T: Scalar>(
    params: &CellParams<T>,
    x_seq: &Tensor<T>,
    h0: Option<&Tensor<T>>,
    backend: Backend,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = params.bind_constants(&mut tape);
    let x = tape.constant(x_seq.clone());
    let state = h0.map(|h| StateVars {
        h: tape.constant(h.clone()),
        s: None,
    });
    let (hs, _) = cell_sequence_vars(&mut tape, &vars, x, state, backend)?;
    Ok(tape.value(hs).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::conv2d_reference;
    use crate::scan::scan_sequential;
    use crate::tensor::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_params(kind: CellKind, c: usize, seed: u64) -> CellParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = CellParams::init(CellSpec::new(kind, c, Padding::PERIODIC), &mut rng).unwrap();
        for k in &mut p.convs {
            k.bias = Tensor::uniform(&[c], -0.5, 0.5, &mut rng);
        }
        p
    }

    fn conv_ref(x: &Tensor<f64>, k: &ConvKernel<f64>) -> Tensor<f64> {
        conv2d_reference(x, k).unwrap()
    }

    fn cat(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        Tensor::concat(&[a, b], 1).unwrap()
    }

    fn zip(a: &Tensor<f64>, b: &Tensor<f64>, f: impl Fn(f64, f64) -> f64) -> Tensor<f64> {
        Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()).unwrap()
    }

    fn frame(x: &Tensor<f64>, t: usize) -> Tensor<f64> {
        let s = x.shape();
        x.narrow(1, t, 1).unwrap().reshape(&[s[0], s[2], s[3], s[4]]).unwrap()
    }

    #[test]
    fn conv_count_audit() {
        let want = [3, 4, 2, 3, 3];
        for (kind, n) in CellKind::ALL.into_iter().zip(want) {
            let spec = CellSpec::new(kind, 5, Padding::PERIODIC);
            let p = CellParams::<f64>::zeros(spec).unwrap();
            assert_eq!(p.convs.len(), n);
            for k in &p.convs {
                assert_eq!(k.weight.shape(), &[5, 5 * kind.input_factor(), 3, 3]);
                assert_eq!(k.bias.shape(), &[5]);
            }
            assert_eq!(p.param_count(), spec.param_count());
        }
    }

    #[test]
    fn convlstm_zero_params() {
        let p = CellParams::<f64>::zeros(CellSpec::new(CellKind::ConvLstm, 2, Padding::PERIODIC)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let h = Tensor::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let s = Tensor::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let (hn, sn) = convlstm_step(&x, &h, &s, &p).unwrap();
        for ((&hv, &sv), &s0) in hn.data().iter().zip(sn.data()).zip(s.data()) {
            assert!((sv - 0.5 * s0).abs() < 1e-15);
            assert!((hv - 0.5 * (0.5 * s0).tanh()).abs() < 1e-15);
        }
        let z = Tensor::zeros(&[1, 2, 3, 3]);
        let (hz, _) = convlstm_step(&z, &h, &z, &p).unwrap();
        assert!(hz.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn convlstm_matches_equation_oracle() {
        let p = rand_params(CellKind::ConvLstm, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[2, 3, 4, 5], -1.0, 1.0, &mut rng);
        let h = Tensor::uniform(&[2, 3, 4, 5], -1.0, 1.0, &mut rng);
        let s = Tensor::uniform(&[2, 3, 4, 5], -1.0, 1.0, &mut rng);
        let xh = cat(&x, &h);
        let f = conv_ref(&xh, &p.convs[0]).map(sigmoid);
        let i = conv_ref(&xh, &p.convs[1]).map(sigmoid);
        let o = conv_ref(&xh, &p.convs[2]).map(sigmoid);
        let sc = conv_ref(&xh, &p.convs[3]).map(f64::tanh);
        let s_ref = zip(&zip(&f, &s, |a, b| a * b), &zip(&i, &sc, |a, b| a * b), |a, b| a + b);
        let h_ref = zip(&o, &s_ref, |a, b| a * b.tanh());
        let (hn, sn) = convlstm_step(&x, &h, &s, &p).unwrap();
        assert!(hn.max_abs_diff(&h_ref) <= 1e-6);
        assert!(sn.max_abs_diff(&s_ref) <= 1e-6);
    }

    #[test]
    fn convgru_zero_params_and_saturation() {
        let spec = CellSpec::new(CellKind::ConvGru, 2, Padding::PERIODIC);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let h = Tensor::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng);
        let p = CellParams::<f64>::zeros(spec).unwrap();
        let hn = convgru_step(&x, &h, &p).unwrap();
        assert!(hn.max_abs_diff(&h.scale(0.5)) < 1e-15);

        let mut p = rand_params(CellKind::ConvGru, 2, 5);
        p.convs[0].bias = Tensor::full(&[2], 30.0);
        p.convs[0].weight = Tensor::zeros(p.convs[0].weight.shape());
        let hn = convgru_step(&x, &h, &p).unwrap();
        let r = conv_ref(&cat(&x, &h), &p.convs[1]).map(sigmoid);
        let cand = conv_ref(&cat(&x, &zip(&r, &h, |a, b| a * b)), &p.convs[2]).map(f64::tanh);
        assert!(hn.max_abs_diff(&cand) <= 1e-9);
    }

    #[test]
    fn convgru_matches_equation_oracle() {
        let p = rand_params(CellKind::ConvGru, 3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::uniform(&[2, 3, 5, 4], -1.0, 1.0, &mut rng);
        let h = Tensor::uniform(&[2, 3, 5, 4], -1.0, 1.0, &mut rng);
        let xh = cat(&x, &h);
        let z = conv_ref(&xh, &p.convs[0]).map(sigmoid);
        let r = conv_ref(&xh, &p.convs[1]).map(sigmoid);
        let cand = conv_ref(&cat(&x, &zip(&r, &h, |a, b| a * b)), &p.convs[2]).map(f64::tanh);
        let want = zip(&zip(&z, &h, |zz, hh| (1.0 - zz) * hh), &zip(&z, &cand, |a, b| a * b), |a, b| a + b);
        assert!(convgru_step(&x, &h, &p).unwrap().max_abs_diff(&want) <= 1e-6);
    }

    /// Loop over time applying the minimal-cell update literally.
    fn min_step_loop(kind: CellKind, p: &CellParams<f64>, x: &Tensor<f64>, h0: &Tensor<f64>) -> Tensor<f64> {
        let t = x.shape()[1];
        let mut h = h0.clone();
        let mut outs = Vec::new();
        for step in 0..t {
            let xt = frame(x, step);
            let cand_idx = kind.conv_count() - 1;
            let cand = conv_ref(&xt, &p.convs[cand_idx]);
            let (keep, write) = match kind {
                CellKind::MinConvGru => {
                    let z = conv_ref(&xt, &p.convs[0]).map(sigmoid);
                    (z.map(|v| 1.0 - v), z)
                }
                CellKind::MinConvLstm => {
                    let f = conv_ref(&xt, &p.convs[0]).map(sigmoid);
                    let i = conv_ref(&xt, &p.convs[1]).map(sigmoid);
                    (zip(&f, &i, |a, b| a / (a + b)), zip(&f, &i, |a, b| b / (a + b)))
                }
                _ => {
                    let f = conv_ref(&xt, &p.convs[0]).map(f64::exp);
                    let i = conv_ref(&xt, &p.convs[1]).map(f64::exp);
                    (zip(&f, &i, |a, b| a / (a + b)), zip(&f, &i, |a, b| b / (a + b)))
                }
            };
            h = zip(&zip(&keep, &h, |a, b| a * b), &zip(&write, &cand, |a, b| a * b), |a, b| a + b);
            let s = h.shape().to_vec();
            outs.push(h.reshape(&[s[0], 1, s[1], s[2], s[3]]).unwrap());
        }
        Tensor::concat(&outs.iter().collect::<Vec<_>>(), 1).unwrap()
    }

    #[test]
    fn minimal_cells_match_step_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::uniform(&[2, 6, 3, 4, 4], -1.0, 1.0, &mut rng);
        let h0 = Tensor::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
        for (i, kind) in [CellKind::MinConvGru, CellKind::MinConvLstm, CellKind::MinConvExpLstm]
            .into_iter()
            .enumerate()
        {
            let p = rand_params(kind, 3, 10 + i as u64);
            let want = min_step_loop(kind, &p, &x, &h0);
            let co = min_coeffs(&x, &p).unwrap().linear(h0.clone()).unwrap();
            let got = scan_sequential(&co).unwrap();
            assert!(got.max_abs_diff(&want) <= 1e-12, "{kind}");
            for backend in Backend::ALL {
                let got = cell_forward_sequence(&p, &x, Some(&h0), backend).unwrap();
                assert!(got.max_abs_diff(&want) <= 1e-10, "{kind} {}", backend.name());
            }
        }
    }

    #[test]
    fn minconvgru_zero_params_and_saturation() {
        let spec = CellSpec::new(CellKind::MinConvGru, 2, Padding::PERIODIC);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::uniform(&[1, 4, 2, 3, 3], -1.0, 1.0, &mut rng);
        let c = minconvgru_coeffs(&x, &CellParams::zeros(spec).unwrap()).unwrap();
        let (a, b) = c.to_linear();
        assert!(a.data().iter().all(|&v| v == 0.5));
        assert!(b.data().iter().all(|&v| v == 0.0));

        let mut p = rand_params(CellKind::MinConvGru, 2, 11);
        p.convs[0].weight = Tensor::zeros(p.convs[0].weight.shape());
        p.convs[0].bias = Tensor::full(&[2], 30.0);
        let hs = scan_sequential(&minconvgru_coeffs(&x, &p).unwrap()).unwrap();
        let cand = min_coeffs(&x, &p).unwrap().candidate;
        assert!(hs.max_abs_diff(&cand) <= 1e-9);
    }

    #[test]
    fn log_gates_symmetry_saturation_and_ratio() {
        let u = Tensor::new(&[3], vec![-2.0, 0.0, 4.0]).unwrap();
        let (lf, li) = normalized_log_gates(&u, &u).unwrap();
        for (&f, &i) in lf.data().iter().zip(li.data()) {
            assert!((f + std::f64::consts::LN_2).abs() < 1e-15);
            assert!((i + std::f64::consts::LN_2).abs() < 1e-15);
        }
        let (lf, li) = normalized_log_gates(&Tensor::<f64>::scalar(30.0), &Tensor::scalar(-30.0)).unwrap();
        assert!(lf.data()[0].exp() > 1.0 - 1e-12);
        // ι = σ(−30) ≈ e^−30 while φ ≈ 1
        assert!((li.data()[0] + 30.0).abs() < 1e-9, "{}", li.data()[0]);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pf = Tensor::<f32>::uniform(&[4096], -10.0, 10.0, &mut rng);
        let pi = Tensor::<f32>::uniform(&[4096], -10.0, 10.0, &mut rng);
        let (lf, li) = normalized_log_gates(&pf, &pi).unwrap();
        for k in 0..4096 {
            let (sf, si) = (sigmoid(pf.data()[k] as f64), sigmoid(pi.data()[k] as f64));
            let want = sf / (sf + si);
            let got = (lf.data()[k] as f64).exp();
            assert!(((got - want) / want).abs() <= 1e-6);
            let sum = got + (li.data()[k] as f64).exp();
            assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn min_lstm_gates_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::uniform(&[1, 3, 2, 4, 4], -1.0, 1.0, &mut rng);
        let p = CellParams::<f64>::zeros(CellSpec::new(CellKind::MinConvLstm, 2, Padding::PERIODIC)).unwrap();
        let c = minconvlstm_coeffs(&x, &p).unwrap();
        let (a, b) = c.to_linear();
        assert!(a.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        assert!(b.data().iter().all(|&v| v == 0.0));

        let p = rand_params(CellKind::MinConvLstm, 2, 14);
        let c = min_coeffs(&x, &p).unwrap();
        assert!(c.a.data().iter().zip(c.weight.data()).all(|(f, i)| (f + i - 1.0).abs() <= 1e-6));
        let (lf, li) = minconvlstm_log_gates(&x, &p).unwrap();
        assert!(lf.data().iter().zip(li.data()).all(|(f, i)| (f.exp() + i.exp() - 1.0).abs() <= 1e-12));
    }

    #[test]
    fn exp_gates_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let u = Tensor::<f64>::uniform(&[2000], -5.0, 5.0, &mut rng);
        let v = Tensor::<f64>::uniform(&[2000], -5.0, 5.0, &mut rng);
        let (f, i) = exp_gates(&u, &v).unwrap();
        for k in 0..2000 {
            let (eu, ev) = (u.data()[k].exp(), v.data()[k].exp());
            let want = eu / (eu + ev);
            assert!(((f.data()[k] - want) / want).abs() <= 1e-6);
            assert_eq!(f.data()[k] + i.data()[k], 1.0);
        }
        let same = exp_gates(&u, &u).unwrap().0;
        assert!(same.data().iter().all(|&g| g == 0.5));
    }

    #[test]
    fn exp_lstm_weights_sum_to_one_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = Tensor::<f64>::uniform(&[1, 5, 3, 4, 4], -2.0, 2.0, &mut rng);
        let p = rand_params(CellKind::MinConvExpLstm, 3, 17);
        let c = min_coeffs(&x, &p).unwrap();
        assert!(c.a.data().iter().zip(c.weight.data()).all(|(f, i)| f + i == 1.0));
    }

    #[test]
    fn reference_cells_reject_parallel_backends() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2, 3, 3]);
        for kind in [CellKind::ConvLstm, CellKind::ConvGru] {
            let p = CellParams::zeros(CellSpec::new(kind, 2, Padding::PERIODIC)).unwrap();
            for backend in [Backend::Blelloch, Backend::LogDomain] {
                assert!(matches!(
                    cell_forward_sequence(&p, &x, None, backend),
                    Err(Error::Contract(_))
                ));
            }
            assert!(cell_forward_sequence(&p, &x, None, Backend::Sequential).is_ok());
        }
    }

    #[test]
    fn zero_input_gives_zero_states() {
        let x = Tensor::<f64>::zeros(&[2, 4, 3, 4, 4]);
        for kind in [CellKind::MinConvGru, CellKind::MinConvLstm, CellKind::MinConvExpLstm] {
            let mut p = rand_params(kind, 3, 18);
            for k in &mut p.convs {
                k.bias = Tensor::zeros(&[3]);
            }
            for backend in Backend::ALL {
                let hs = cell_forward_sequence(&p, &x, None, backend).unwrap();
                assert!(hs.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn single_step_sequence() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = Tensor::<f64>::uniform(&[1, 1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let h0 = Tensor::<f64>::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let p = rand_params(CellKind::ConvGru, 2, 20);
        let hs = cell_forward_sequence(&p, &x, Some(&h0), Backend::Sequential).unwrap();
        let one = convgru_step(&frame(&x, 0), &h0, &p).unwrap();
        assert_eq!(hs.data(), one.data());
    }

    #[test]
    fn coefficients_are_pointwise_in_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::<f64>::uniform(&[1, 6, 2, 4, 4], -1.0, 1.0, &mut rng);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let frames: Vec<Tensor<f64>> = perm.iter().map(|&t| x.narrow(1, t, 1).unwrap()).collect();
        let xp = Tensor::concat(&frames.iter().collect::<Vec<_>>(), 1).unwrap();
        for kind in [CellKind::MinConvGru, CellKind::MinConvLstm, CellKind::MinConvExpLstm] {
            let p = rand_params(kind, 2, 22);
            let base = min_coeffs(&x, &p).unwrap();
            let shuffled = min_coeffs(&xp, &p).unwrap();
            for (pos, &t) in perm.iter().enumerate() {
                for (u, v) in [(&base.a, &shuffled.a), (&base.b, &shuffled.b)] {
                    let want = u.narrow(1, t, 1).unwrap();
                    let got = v.narrow(1, pos, 1).unwrap();
                    assert_eq!(want.data(), got.data());
                }
            }
        }
    }
}
