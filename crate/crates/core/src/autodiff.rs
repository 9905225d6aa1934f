//! Reverse-mode differentiation over a closed operation vocabulary.
//!
//! A [`Tape`] records every value it produces together with the operation
//! that produced it. Node inputs always precede the node, so the backward
//! sweep is a single pass in reverse creation order.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::conv::{self, Padding};
use crate::error::{Error, Result};
use crate::norm::{self, GroupStats};
use crate::scan::{self, Backend, ScanCoeffs, SignedLog};
use crate::tensor::{sigmoid, softplus, unbroadcast, BinaryOp, Scalar, Tensor, UnaryOp};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    /// Normalized log gate `-softplus(softplus(-keep) - softplus(-other))`.
    LogGate(Var, Var),
    /// Normalized gate pair stacked on axis 0; `cache` holds φ̂ι̂, σ(−keep)
    /// and σ(−other) per element.
    MinLstmGates {
        keep: Var,
        other: Var,
        cache: Vec<[T; 3]>,
    },
    /// `scale * x + shift`; only the scale matters for the adjoint.
    Affine(Var, T),
    Sum(Var),
    Mean(Var),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        padding: Padding,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupStats<T>,
    },
    Scan {
        a: Var,
        b: Var,
        h0: Var,
        backend: Backend,
    },
    LogScan {
        log_a: Var,
        b: Var,
        h0: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
}

/// Gradient of a scalar loss with respect to every registered parameter.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(|g| g.non_finite_index().is_none())
    }

    pub fn into_vec(self) -> Vec<Tensor<T>> {
        self.grads.into_values().collect()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Register a trainable leaf. Registering the same id twice returns the
    /// original handle.
    pub fn param(&mut self, id: ParamId, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let y = self.value(x).map_unary(op)?;
        Ok(self.push(y, Op::Unary(op, x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Softplus, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Negate, x)
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_binary(self.value(b), op)?;
        Ok(self.push(y, Op::Binary(op, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    /// `log(σ(keep) / (σ(keep) + σ(other)))` written with softplus only.
    /// Evaluated in f64 and rounded once, so f32 results stay within an ulp.
    pub fn log_gate(&mut self, keep: Var, other: Var) -> Result<Var> {
        let (k, o) = (self.value(keep), self.value(other));
        if k.shape() != o.shape() {
            return Err(Error::Shape(format!("log gate: {:?} vs {:?}", k.shape(), o.shape())));
        }
        let data = k
            .data()
            .iter()
            .zip(o.data())
            .map(|(&a, &b)| T::of(log_gate_f64(a.as_f64(), b.as_f64())))
            .collect();
        let y = Tensor::new(k.shape(), data)?;
        Ok(self.push(y, Op::LogGate(keep, other)))
    }

    /// `[φ̂; ι̂]` stacked along axis 0: the normalized forget and input gates
    /// `σ(f) / (σ(f) + σ(i))` and `σ(i) / (σ(f) + σ(i))`. The pair is formed
    /// as `1/(1+r)`, `r/(1+r)` with `r ≤ 2`, so it sums to one within an ulp
    /// and stays finite for any finite pre-activations.
    pub fn min_lstm_gates(&mut self, forget: Var, input: Var) -> Result<Var> {
        let (f, i) = (self.value(forget), self.value(input));
        if f.shape() != i.shape() || f.rank() == 0 {
            return Err(Error::Shape(format!("gate pair: {:?} vs {:?}", f.shape(), i.shape())));
        }
        let n = f.len();
        let mut out = vec![T::zero(); 2 * n];
        let mut cache = vec![[T::zero(); 3]; n];
        let (of, oi) = out.split_at_mut(n);
        const CHUNK: usize = 4096;
        of.par_chunks_mut(CHUNK)
            .zip(oi.par_chunks_mut(CHUNK))
            .zip(cache.par_chunks_mut(CHUNK))
            .zip(f.data().par_chunks(CHUNK).zip(i.data().par_chunks(CHUNK)))
            .for_each(|(((of, oi), cc), (fa, ib))| {
                for ((((pf, pi), c), &a), &b) in of.iter_mut().zip(oi).zip(cc).zip(fa).zip(ib) {
                    let (v, k) = min_lstm_gate(a, b);
                    (*pf, *pi, *c) = (v[0], v[1], k);
                }
            });
        let mut shape = f.shape().to_vec();
        shape[0] *= 2;
        let y = Tensor::new(&shape, out)?;
        Ok(self.push(
            y,
            Op::MinLstmGates {
                keep: forget,
                other: input,
                cache,
            },
        ))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let y = self.value(x).map(|v| scale * v + shift);
        self.push(y, Op::Affine(x, scale))
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::one())
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = Tensor::scalar(self.value(x).sum_all());
        self.push(s, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = Tensor::scalar(self.value(x).mean_all());
        self.push(s, Op::Mean(x))
    }

    /// Mean squared difference.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::Shape(format!(
                "mse: {:?} vs {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: Padding) -> Result<Var> {
        let y = conv::forward_parts(self.value(x), self.value(w), self.value(b), padding)?;
        Ok(self.push(y, Op::Conv { x, w, b, padding }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat(&vals, axis)?;
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        if start == 0 && self.shape(x).get(axis) == Some(&len) {
            return Ok(x);
        }
        let y = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(y, Op::Narrow { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(x) == shape {
            return Ok(x);
        }
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x)))
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (y, stats) = norm::forward_parts(self.value(x), groups, self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            y,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
        ))
    }

    /// `h_t = a_t h_{t-1} + b_t` over axis 1 of (B, T, ...) sequences.
    pub fn linear_scan(&mut self, a: Var, b: Var, h0: Var, backend: Backend) -> Result<Var> {
        let c = ScanCoeffs::linear(self.value(a).clone(), self.value(b).clone(), self.value(h0).clone())?;
        let y = scan::scan(&c, backend)?;
        Ok(self.push(y, Op::Scan { a, b, h0, backend }))
    }

    /// Same recurrence, fed with log decays; evaluated by the log-domain scan.
    pub fn log_scan(&mut self, log_a: Var, b: Var, h0: Var) -> Result<Var> {
        let c = ScanCoeffs::log(
            self.value(log_a).clone(),
            SignedLog::from_linear(self.value(b)),
            self.value(h0).clone(),
        )?;
        let y = scan::scan_logdomain(&c)?;
        Ok(self.push(y, Op::LogScan { log_a, b, h0 }))
    }

    /// Gradients of the scalar `loss` for every registered parameter.
    /// Parameters the loss does not depend on receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let contributions = self.node_vjp(node, &g)?;
            for (v, gv) in contributions {
                accumulate(&mut grads[v.0], gv)?;
            }
            // Leaves keep their gradient.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let mut out = BTreeMap::new();
        for (&id, &v) in &self.params {
            let g = grads
                .get_mut(v.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.shape(v)));
            out.insert(id, g);
        }
        Ok(Gradients { grads: out })
    }

    fn node_vjp(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let y = &node.value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Unary(op, x) => {
                let xv = self.value(*x);
                let d: Vec<T> = match op {
                    UnaryOp::Sigmoid => zip3(g, y, |gi, yi| gi * yi * (T::one() - yi)),
                    UnaryOp::Tanh => zip3(g, y, |gi, yi| gi * (T::one() - yi * yi)),
                    UnaryOp::Softplus => zip3(g, xv, |gi, xi| gi * sigmoid(xi)),
                    UnaryOp::Exp => zip3(g, y, |gi, yi| gi * yi),
                    UnaryOp::Log => zip3(g, xv, |gi, xi| gi / xi),
                    UnaryOp::Negate => g.data().iter().map(|&gi| -gi).collect(),
                };
                vec![(*x, Tensor::new(xv.shape(), d)?)]
            }
            Op::Binary(op, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ga, gb_full) = match op {
                    BinaryOp::Add => (g.clone(), g.clone()),
                    BinaryOp::Sub => (g.clone(), g.map(|v| -v)),
                    BinaryOp::Mul => (g.mul(bv)?, g.mul(av)?),
                    BinaryOp::Div => {
                        let ga = g.zip_binary(bv, BinaryOp::Div)?;
                        let gb = ga.mul(y)?.map(|v| -v);
                        (ga, gb)
                    }
                };
                vec![(*a, ga), (*b, unbroadcast(&gb_full, bv.shape())?)]
            }
            Op::LogGate(keep, other) => {
                let (k, o) = (self.value(*keep), self.value(*other));
                let mut gk = Vec::with_capacity(k.len());
                let mut go = Vec::with_capacity(k.len());
                for ((&gi, &a), &b) in g.data().iter().zip(k.data()).zip(o.data()) {
                    let (a, b) = (a.as_f64(), b.as_f64());
                    let d = softplus(-a) - softplus(-b);
                    let s = sigmoid(d) * gi.as_f64();
                    gk.push(T::of(s * sigmoid(-a)));
                    go.push(T::of(-s * sigmoid(-b)));
                }
                vec![(*keep, Tensor::new(k.shape(), gk)?), (*other, Tensor::new(o.shape(), go)?)]
            }
            Op::MinLstmGates { keep, other, cache } => {
                let n = cache.len();
                let gd = g.data();
                let (gk, go): (Vec<T>, Vec<T>) = cache
                    .par_iter()
                    .enumerate()
                    .with_min_len(4096)
                    .map(|(j, &[p, sna, snb])| {
                        let q = (gd[j] - gd[n + j]) * p;
                        (q * sna, -q * snb)
                    })
                    .unzip();
                let shape = self.shape(*keep);
                vec![(*keep, Tensor::new(shape, gk)?), (*other, Tensor::new(shape, go)?)]
            }
            Op::Affine(x, scale) => {
                let s = *scale;
                vec![(*x, g.map(|v| v * s))]
            }
            Op::Sum(x) => {
                let gs = g.data()[0];
                vec![(*x, Tensor::full(self.shape(*x), gs))]
            }
            Op::Mean(x) => {
                let n = T::of(self.value(*x).len() as f64);
                vec![(*x, Tensor::full(self.shape(*x), g.data()[0] / n))]
            }
            Op::Conv { x, w, b, padding } => {
                let cg = conv::backward_parts(g, self.value(*x), self.value(*w), *padding)?;
                vec![(*x, cg.input), (*w, cg.weight), (*b, cg.bias)]
            }
            Op::Concat { parts, axis } => {
                let mut out = Vec::with_capacity(parts.len());
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    out.push((p, g.narrow(*axis, start, len)?));
                    start += len;
                }
                out
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let len = g.shape()[*axis];
                let mut pieces = Vec::with_capacity(3);
                let mut shape = xs.clone();
                let before = Tensor::zeros(&{
                    shape[*axis] = *start;
                    shape.clone()
                });
                let after = Tensor::zeros(&{
                    shape[*axis] = xs[*axis] - start - len;
                    shape.clone()
                });
                if *start > 0 {
                    pieces.push(&before);
                }
                pieces.push(g);
                if xs[*axis] > start + len {
                    pieces.push(&after);
                }
                vec![(*x, Tensor::concat(&pieces, *axis)?)]
            }
            Op::Reshape(x) => vec![(*x, g.reshape(self.shape(*x))?)],
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (gx, gg, gb) =
                    norm::backward_parts(g, self.value(*x), *groups, self.value(*gamma), stats)?;
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Scan { a, b, h0, backend } => {
                let sg = scan::scan_backward(self.value(*a), y, self.value(*h0), g, *backend)?;
                vec![(*a, sg.a), (*b, sg.b), (*h0, sg.h0)]
            }
            Op::LogScan { log_a, b, h0 } => {
                let a = self.value(*log_a).map(|v| v.exp());
                let sg = scan::scan_backward(&a, y, self.value(*h0), g, Backend::Sequential)?;
                let g_log_a = sg.a.mul(&a)?;
                vec![(*log_a, g_log_a), (*b, sg.b), (*h0, sg.h0)]
            }
        })
    }
}

/// Gates `[φ̂, ι̂]` and the backward cache `[φ̂ι̂, σ(−a), σ(−b)]` for forget
/// pre-activation `a` and input pre-activation `b`.
#[inline]
fn min_lstm_gate<T: Scalar>(a: T, b: T) -> ([T; 2], [T; 3]) {
    let (zero, one) = (T::zero(), T::one());
    let (ea, eb) = ((-a.abs()).exp(), (-b.abs()).exp());
    let sna = if a >= zero { ea / (one + ea) } else { one / (one + ea) };
    let snb = if b >= zero { eb / (one + eb) } else { one / (one + eb) };
    // σ(i)/σ(f) = exp(m) (1 + ea) / (1 + eb); invert it when m > 0
    let m = (-a).max(zero) - (-b).max(zero);
    let s = (-m.abs()).exp();
    let (pf, pi) = if m <= zero {
        let r = s * (one + ea) / (one + eb);
        (one / (one + r), r / (one + r))
    } else {
        let r = s * (one + eb) / (one + ea);
        (r / (one + r), one / (one + r))
    };
    ([pf, pi], [pf * pi, sna, snb])
}

fn log_gate_f64(keep: f64, other: f64) -> f64 {
    -softplus(softplus(-keep) - softplus(-other))
}

fn zip3<T: Scalar>(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect()
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} vs {:?}",
                    acc.shape(),
                    g.shape()
                )));
            }
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
    }
    Ok(())
}

/// Central differences `(f(p + ε e_i) − f(p − ε e_i)) / 2ε` for every scalar
/// in every parameter tensor.
pub fn finite_diff_grad<T: Scalar>(
    mut f: impl FnMut(&[Tensor<T>]) -> Result<T>,
    params: &[Tensor<T>],
    eps: T,
) -> Result<Vec<Tensor<T>>> {
    if !(eps > T::zero()) {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    let two_eps = eps + eps;
    for pi in 0..params.len() {
        let mut g = Tensor::zeros(params[pi].shape());
        for i in 0..params[pi].len() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + eps;
            let fp = f(&work)?;
            work[pi].data_mut()[i] = orig - eps;
            let fm = f(&work)?;
            work[pi].data_mut()[i] = orig;
            g.data_mut()[i] = (fp - fm) / two_eps;
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest per-tensor relative error `‖a − b‖∞ / max(‖b‖∞, tiny)`.
pub fn max_relative_error<T: Scalar>(a: &[Tensor<T>], b: &[Tensor<T>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let scale = y.max_abs().as_f64().max(1e-300);
            x.max_abs_diff(y).as_f64() / scale
        })
        .fold(0.0, f64::max)
}
