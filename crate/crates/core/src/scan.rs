//! Linear recurrences `h_t = a_t * h_{t-1} + b_t` evaluated along the time
//! axis of (B, T, ...) tensors, lane by lane.
//!
//! Three forward evaluators are provided: a plain sequential loop, a
//! work-efficient Blelloch scan over the pair operator
//! `(a1, b1) ∘ (a2, b2) = (a1 a2, a2 b1 + b2)`, and a log-domain evaluator
//! that carries positive and negative mass in two log-sum-exp accumulators.
//! The adjoint is itself a linear recurrence run backwards in time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Lanes per parallel task.
const LANE_BLOCK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Sequential,
    #[default]
    Blelloch,
    #[serde(rename = "logdomain")]
    LogDomain,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::Sequential, Backend::Blelloch, Backend::LogDomain];

    pub fn name(self) -> &'static str {
        match self {
            Backend::Sequential => "sequential",
            Backend::Blelloch => "blelloch",
            Backend::LogDomain => "logdomain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Backend::Sequential),
            "blelloch" => Ok(Backend::Blelloch),
            "logdomain" => Ok(Backend::LogDomain),
            other => Err(Error::Config(format!("unknown backend `{other}`"))),
        }
    }
}

/// Magnitude/sign pairs; a zero value has sign 0 and log-magnitude
/// [`log_zero`].
#[derive(Debug, Clone, PartialEq)]
pub struct SignedLog<T> {
    pub log_mag: Tensor<T>,
    pub sign: Vec<i8>,
}

/// Stand-in for `log(0)`: the most negative finite value.
#[inline]
pub fn log_zero<T: Scalar>() -> T {
    T::min_value()
}

impl<T: Scalar> SignedLog<T> {
    pub fn from_linear(v: &Tensor<T>) -> Self {
        let sign = v
            .data()
            .iter()
            .map(|&x| {
                if x > T::zero() {
                    1
                } else if x < T::zero() {
                    -1
                } else {
                    0
                }
            })
            .collect();
        let log_mag = v.map(|x| if x == T::zero() { log_zero() } else { x.abs().ln() });
        Self { log_mag, sign }
    }

    pub fn to_linear(&self) -> Tensor<T> {
        let mut out = self.log_mag.clone();
        for (v, &s) in out.data_mut().iter_mut().zip(&self.sign) {
            *v = match s {
                0 => T::zero(),
                s => T::of(s as f64) * v.exp(),
            };
        }
        out
    }
}

#[derive(Debug, Clone)]
pub enum ScanCoeffs<T> {
    Linear {
        a: Tensor<T>,
        b: Tensor<T>,
        h0: Tensor<T>,
    },
    /// `log_a` holds log decays (must be <= 0), `b` the signed-log inputs.
    Log {
        log_a: Tensor<T>,
        b: SignedLog<T>,
        h0: Tensor<T>,
    },
}

/// (batch, time, lanes) of a (B, T, ...) sequence tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub batch: usize,
    pub time: usize,
    pub lanes: usize,
}

fn layout_of(seq: &[usize], h0: &[usize]) -> Result<Layout> {
    if seq.len() < 2 || h0.len() + 1 != seq.len() || seq[0] != h0[0] || seq[2..] != h0[1..] {
        return Err(Error::Shape(format!(
            "scan coefficients {seq:?} incompatible with initial state {h0:?}"
        )));
    }
    Ok(Layout {
        batch: seq[0],
        time: seq[1],
        lanes: seq[2..].iter().product(),
    })
}

impl<T: Scalar> ScanCoeffs<T> {
    pub fn linear(a: Tensor<T>, b: Tensor<T>, h0: Tensor<T>) -> Result<Self> {
        if a.shape() != b.shape() {
            return Err(Error::Shape(format!(
                "decay {:?} and input {:?} differ",
                a.shape(),
                b.shape()
            )));
        }
        layout_of(a.shape(), h0.shape())?;
        Ok(ScanCoeffs::Linear { a, b, h0 })
    }

    pub fn log(log_a: Tensor<T>, b: SignedLog<T>, h0: Tensor<T>) -> Result<Self> {
        if log_a.shape() != b.log_mag.shape() || b.sign.len() != b.log_mag.len() {
            return Err(Error::Shape(format!(
                "log decay {:?} and input {:?} differ",
                log_a.shape(),
                b.log_mag.shape()
            )));
        }
        layout_of(log_a.shape(), h0.shape())?;
        Ok(ScanCoeffs::Log { log_a, b, h0 })
    }

    pub fn h0(&self) -> &Tensor<T> {
        match self {
            ScanCoeffs::Linear { h0, .. } | ScanCoeffs::Log { h0, .. } => h0,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            ScanCoeffs::Linear { a, .. } => a.shape(),
            ScanCoeffs::Log { log_a, .. } => log_a.shape(),
        }
    }

    pub fn layout(&self) -> Result<Layout> {
        layout_of(self.shape(), self.h0().shape())
    }

    /// Linear (a, b); log decays are exponentiated.
    pub fn to_linear(&self) -> (Tensor<T>, Tensor<T>) {
        match self {
            ScanCoeffs::Linear { a, b, .. } => (a.clone(), b.clone()),
            ScanCoeffs::Log { log_a, b, .. } => (
                log_a.map(|v| if v == log_zero() { T::zero() } else { v.exp() }),
                b.to_linear(),
            ),
        }
    }

    /// Log decays and signed-log inputs. Fails unless every decay lies in [0, 1].
    pub fn to_log(&self) -> Result<(Tensor<T>, SignedLog<T>)> {
        match self {
            ScanCoeffs::Log { log_a, b, .. } => Ok((log_a.clone(), b.clone())),
            ScanCoeffs::Linear { a, b, .. } => {
                if let Some(i) = a.data().iter().position(|&v| !(v >= T::zero() && v <= T::one())) {
                    return Err(Error::Contract(format!(
                        "log-domain scan requires decays in (0, 1], found {:?} at index {i}",
                        a.data()[i]
                    )));
                }
                let log_a = a.map(|v| if v == T::zero() { log_zero() } else { v.ln() });
                Ok((log_a, SignedLog::from_linear(b)))
            }
        }
    }
}

/// The associative pair operator: apply `first`, then `second`.
#[inline]
pub fn combine<T: Scalar>(first: (T, T), second: (T, T)) -> (T, T) {
    (first.0 * second.0, second.0 * first.1 + second.1)
}

/// [`combine`] with decay products below the smallest normal flushed to
/// zero. Long products of decays in (0, 1) otherwise drift into subnormals,
/// which are two orders of magnitude slower on common hardware.
#[inline]
fn combine_flush<T: Scalar>(first: (T, T), second: (T, T)) -> (T, T) {
    let (a, b) = combine(first, second);
    if a.abs() < T::min_positive_value() {
        (T::zero(), b)
    } else {
        (a, b)
    }
}

pub fn scan<T: Scalar>(c: &ScanCoeffs<T>, backend: Backend) -> Result<Tensor<T>> {
    match backend {
        Backend::Sequential => scan_sequential(c),
        Backend::Blelloch => scan_blelloch(c),
        Backend::LogDomain => scan_logdomain(c),
    }
}

fn check_output<T: Scalar>(out: &Tensor<T>, lay: Layout) -> Result<()> {
    match out.non_finite_index() {
        None => Ok(()),
        Some(i) => Err(Error::Numeric {
            context: format!("linear scan step {}", (i / lay.lanes.max(1)) % lay.time.max(1) + 1),
            index: i,
        }),
    }
}

pub fn scan_sequential<T: Scalar>(c: &ScanCoeffs<T>) -> Result<Tensor<T>> {
    let lay = c.layout()?;
    let (a, b) = c.to_linear();
    let out = sequential_raw(a.data(), b.data(), c.h0().data(), lay);
    let out = Tensor::new(a.shape(), out)?;
    check_output(&out, lay)?;
    Ok(out)
}

pub(crate) fn sequential_raw<T: Scalar>(a: &[T], b: &[T], h0: &[T], lay: Layout) -> Vec<T> {
    let Layout { batch, time, lanes } = lay;
    let mut out = vec![T::zero(); batch * time * lanes];
    if lanes == 0 || time == 0 {
        return out;
    }
    let blocks = lanes.div_ceil(LANE_BLOCK);
    // (batch, lane block) tasks write disjoint lanes; split the output by batch.
    out.par_chunks_mut(time * lanes)
        .enumerate()
        .for_each(|(bi, ob)| {
            let base = bi * time * lanes;
            // Within a batch every time row is shared by all blocks, so blocks run in turn.
            for blk in 0..blocks {
                let l0 = blk * LANE_BLOCK;
                let l1 = (l0 + LANE_BLOCK).min(lanes);
                let mut h: Vec<T> = h0[bi * lanes + l0..bi * lanes + l1].to_vec();
                for t in 0..time {
                    let r = base + t * lanes;
                    let (ar, br) = (&a[r + l0..r + l1], &b[r + l0..r + l1]);
                    for ((hv, &av), &bv) in h.iter_mut().zip(ar).zip(br) {
                        *hv = av * *hv + bv;
                    }
                    ob[t * lanes + l0..t * lanes + l1].copy_from_slice(&h);
                }
            }
        });
    out
}

pub fn scan_blelloch<T: Scalar>(c: &ScanCoeffs<T>) -> Result<Tensor<T>> {
    let lay = c.layout()?;
    let (a, b) = c.to_linear();
    let out = blelloch_raw(a.data(), b.data(), c.h0().data(), lay);
    let out = Tensor::new(a.shape(), out)?;
    check_output(&out, lay)?;
    Ok(out)
}

/// Elements below which a parallel task is not worth splitting off.
const PAR_GRAIN: usize = 1 << 14;

/// Minimum chunks per task for chunks of `chunk` elements.
fn min_chunks(chunk: usize) -> usize {
    (PAR_GRAIN / chunk.max(1)).max(1)
}

/// Up-sweep/down-sweep over time rows of one batch entry. Rows `[0, T)` hold
/// the coefficients; rows `[T, n)` are identity padding `(1, 0)`. Leaves
/// exclusive prefixes in place.
fn blelloch_rows<T: Scalar>(pa: &mut [T], pb: &mut [T], n: usize, lanes: usize) {
    let serial = n * lanes <= PAR_GRAIN;
    let sweep = |pa: &mut [T], pb: &mut [T], chunk: usize, f: &(dyn Fn(&mut [T], &mut [T]) + Sync)| {
        if serial {
            pa.chunks_mut(chunk).zip(pb.chunks_mut(chunk)).for_each(|(ca, cb)| f(ca, cb));
        } else {
            pa.par_chunks_mut(chunk)
                .zip(pb.par_chunks_mut(chunk))
                .with_min_len(min_chunks(chunk))
                .for_each(|(ca, cb)| f(ca, cb));
        }
    };

    let mut half = 1;
    while half < n {
        let stride = 2 * half;
        sweep(pa, pb, stride * lanes, &|ca, cb| {
            let (la, ra) = ca.split_at_mut((stride - 1) * lanes);
            let (lb, rb) = cb.split_at_mut((stride - 1) * lanes);
            let la = &la[(half - 1) * lanes..half * lanes];
            let lb = &lb[(half - 1) * lanes..half * lanes];
            for (((ra, rb), &la), &lb) in ra.iter_mut().zip(rb.iter_mut()).zip(la).zip(lb) {
                (*ra, *rb) = combine_flush((la, lb), (*ra, *rb));
            }
        });
        half = stride;
    }

    pa[(n - 1) * lanes..].iter_mut().for_each(|v| *v = T::one());
    pb[(n - 1) * lanes..].iter_mut().for_each(|v| *v = T::zero());

    let mut half = n / 2;
    while half >= 1 {
        let stride = 2 * half;
        sweep(pa, pb, stride * lanes, &|ca, cb| {
            let (la, ra) = ca.split_at_mut((stride - 1) * lanes);
            let (lb, rb) = cb.split_at_mut((stride - 1) * lanes);
            let la = &mut la[(half - 1) * lanes..half * lanes];
            let lb = &mut lb[(half - 1) * lanes..half * lanes];
            for (((ra, rb), la), lb) in ra.iter_mut().zip(rb.iter_mut()).zip(la.iter_mut()).zip(lb.iter_mut()) {
                let left = (*la, *lb);
                (*la, *lb) = (*ra, *rb);
                (*ra, *rb) = combine_flush((*la, *lb), left);
            }
        });
        half /= 2;
    }
}

pub(crate) fn blelloch_raw<T: Scalar>(a: &[T], b: &[T], h0: &[T], lay: Layout) -> Vec<T> {
    let Layout { batch, time, lanes } = lay;
    let mut out = vec![T::zero(); batch * time * lanes];
    if lanes == 0 || time == 0 {
        return out;
    }
    let n = time.next_power_of_two();
    out.par_chunks_mut(time * lanes)
        .enumerate()
        .for_each(|(bi, ob)| {
            let base = bi * time * lanes;
            let mut pa = vec![T::one(); n * lanes];
            let mut pb = vec![T::zero(); n * lanes];
            pa[..time * lanes].copy_from_slice(&a[base..base + time * lanes]);
            pb[..time * lanes].copy_from_slice(&b[base..base + time * lanes]);
            blelloch_rows(&mut pa, &mut pb, n, lanes);
            let h0 = &h0[bi * lanes..(bi + 1) * lanes];
            let finish = |(t, row): (usize, &mut [T])| {
                let (r, p) = (base + t * lanes, t * lanes);
                let coeffs = a[r..r + lanes].iter().zip(&b[r..r + lanes]);
                let excl = pa[p..p + lanes].iter().zip(&pb[p..p + lanes]);
                for (((out, (&ea, &eb)), (&ca, &cb)), &h) in row.iter_mut().zip(excl).zip(coeffs).zip(h0) {
                    let (ia, ib) = combine((ea, eb), (ca, cb));
                    *out = ia * h + ib;
                }
            };
            if time * lanes <= PAR_GRAIN {
                ob.chunks_mut(lanes).enumerate().for_each(finish);
            } else {
                ob.par_chunks_mut(lanes).enumerate().with_min_len(min_chunks(lanes)).for_each(finish);
            }
        });
    out
}

/// `log(exp(x) + exp(y))`, treating [`log_zero`] as an empty accumulator.
#[inline]
fn log_add_exp<T: Scalar>(x: T, y: T) -> T {
    let z = log_zero::<T>();
    if x == z {
        return y;
    }
    if y == z {
        return x;
    }
    let m = x.max(y);
    m + (-(x - y).abs()).exp().ln_1p()
}

#[inline]
fn decay<T: Scalar>(acc: T, log_a: T) -> T {
    let z = log_zero::<T>();
    if acc == z || log_a == z {
        z
    } else {
        (acc + log_a).max(z)
    }
}

pub fn scan_logdomain<T: Scalar>(c: &ScanCoeffs<T>) -> Result<Tensor<T>> {
    let lay = c.layout()?;
    let (log_a, b) = c.to_log()?;
    if let Some(i) = log_a.data().iter().position(|&v| !(v <= T::zero())) {
        return Err(Error::Contract(format!(
            "log-domain scan requires log decays <= 0, found {:?} at index {i}",
            log_a.data()[i]
        )));
    }
    let h0 = SignedLog::from_linear(c.h0());
    let out = logdomain_raw(log_a.data(), &b, &h0, lay);
    let out = Tensor::new(log_a.shape(), out)?;
    check_output(&out, lay)?;
    Ok(out)
}

fn logdomain_raw<T: Scalar>(log_a: &[T], b: &SignedLog<T>, h0: &SignedLog<T>, lay: Layout) -> Vec<T> {
    let Layout { batch, time, lanes } = lay;
    let mut out = vec![T::zero(); batch * time * lanes];
    if lanes == 0 || time == 0 {
        return out;
    }
    let z = log_zero::<T>();
    let lb = b.log_mag.data();
    let (h0m, h0s) = (h0.log_mag.data(), &h0.sign);
    out.par_chunks_mut(time * lanes)
        .enumerate()
        .for_each(|(bi, ob)| {
            let base = bi * time * lanes;
            // Positive and negative mass, each as a log-sum-exp accumulator.
            let mut pos = vec![z; lanes];
            let mut neg = vec![z; lanes];
            for l in 0..lanes {
                match h0s[bi * lanes + l] {
                    1 => pos[l] = h0m[bi * lanes + l],
                    -1 => neg[l] = h0m[bi * lanes + l],
                    _ => {}
                }
            }
            for t in 0..time {
                let r = base + t * lanes;
                for l in 0..lanes {
                    let la = log_a[r + l];
                    pos[l] = decay(pos[l], la);
                    neg[l] = decay(neg[l], la);
                    match b.sign[r + l] {
                        1 => pos[l] = log_add_exp(pos[l], lb[r + l]),
                        -1 => neg[l] = log_add_exp(neg[l], lb[r + l]),
                        _ => {}
                    }
                    let p = if pos[l] == z { T::zero() } else { pos[l].exp() };
                    let n = if neg[l] == z { T::zero() } else { neg[l].exp() };
                    ob[t * lanes + l] = p - n;
                }
            }
        });
    out
}

#[derive(Debug, Clone)]
pub struct ScanGrads<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub h0: Tensor<T>,
}

/// Adjoint of the recurrence given the forward states `h_seq`.
///
/// `λ_T = g_T`, `λ_t = g_t + a_{t+1} λ_{t+1}`; then `∂b_t = λ_t`,
/// `∂a_t = λ_t h_{t-1}`, `∂h0 = a_1 λ_1`. The λ recurrence runs through the
/// same scan machinery on reversed time; the sequential backend reproduces a
/// naive reverse loop bit for bit.
pub fn scan_backward<T: Scalar>(
    a: &Tensor<T>,
    h_seq: &Tensor<T>,
    h0: &Tensor<T>,
    grad_h: &Tensor<T>,
    backend: Backend,
) -> Result<ScanGrads<T>> {
    let lay = layout_of(a.shape(), h0.shape())?;
    if h_seq.shape() != a.shape() || grad_h.shape() != a.shape() {
        return Err(Error::Shape(format!(
            "scan_backward: a {:?}, h {:?}, grad {:?}",
            a.shape(),
            h_seq.shape(),
            grad_h.shape()
        )));
    }
    let Layout { batch, time, lanes } = lay;
    let (ad, hd, gd) = (a.data(), h_seq.data(), grad_h.data());
    let n = batch * time * lanes;
    let mut ra = vec![T::zero(); n];
    let mut rb = vec![T::zero(); n];
    for bi in 0..batch {
        for s in 0..time {
            let t = time - 1 - s;
            let dst = (bi * time + s) * lanes;
            rb[dst..dst + lanes].copy_from_slice(&gd[(bi * time + t) * lanes..][..lanes]);
            if s > 0 {
                ra[dst..dst + lanes].copy_from_slice(&ad[(bi * time + t + 1) * lanes..][..lanes]);
            }
        }
    }
    let zero_h = vec![T::zero(); batch * lanes];
    let rev = match backend {
        Backend::Blelloch => blelloch_raw(&ra, &rb, &zero_h, lay),
        Backend::Sequential | Backend::LogDomain => sequential_raw(&ra, &rb, &zero_h, lay),
    };

    let mut grad_b = vec![T::zero(); n];
    let mut grad_a = vec![T::zero(); n];
    let mut grad_h0 = vec![T::zero(); batch * lanes];
    let h0d = h0.data();
    for bi in 0..batch {
        for t in 0..time {
            let src = (bi * time + (time - 1 - t)) * lanes;
            let dst = (bi * time + t) * lanes;
            let lam = &rev[src..src + lanes];
            grad_b[dst..dst + lanes].copy_from_slice(lam);
            let prev = if t == 0 { &h0d[bi * lanes..][..lanes] } else { &hd[dst - lanes..dst] };
            for ((g, &l), &p) in grad_a[dst..dst + lanes].iter_mut().zip(lam).zip(prev) {
                *g = l * p;
            }
            if t == 0 {
                for ((g, &l), &av) in grad_h0[bi * lanes..][..lanes].iter_mut().zip(lam).zip(&ad[dst..dst + lanes]) {
                    *g = av * l;
                }
            }
        }
    }
    Ok(ScanGrads {
        a: Tensor::new(a.shape(), grad_a)?,
        b: Tensor::new(a.shape(), grad_b)?,
        h0: Tensor::new(h0.shape(), grad_h0)?,
    })
}
