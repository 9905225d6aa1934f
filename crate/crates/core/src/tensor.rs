//! Dense row-major tensors and the pointwise/reduction kernels the rest of
//! the crate is built from.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Maximum supported rank. Sequences use (batch, time, channel, height, width).
pub const MAX_RANK: usize = 5;

/// Element count above which pointwise kernels are split across workers.
const PAR_THRESHOLD: usize = 1 << 15;

/// Floating point element type: implemented for `f32` and `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Sum + Send + Sync + 'static
{
    const NAME: &'static str;

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// `c ← alpha·a·b + beta·c` for an m×k by k×n product with explicit
    /// row and column strides.
    ///
    /// # Safety
    /// Every strided index of the three operands must be in bounds; callers
    /// go through [`crate::gemm::matmul`], which checks this.
    #[doc(hidden)]
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        unsafe { matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc) }
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        unsafe { matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc) }
    }
}

/// Overflow-safe softplus, `max(x, 0) + log1p(exp(-|x|))`.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
    Log,
    Negate,
}

impl UnaryOp {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Tanh => x.tanh(),
            UnaryOp::Softplus => softplus(x),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Negate => -x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Tanh => "tanh",
            UnaryOp::Softplus => "softplus",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Negate => "negate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    #[inline]
    pub fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= SHOW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..SHOW])
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_rank(shape: &[usize]) -> Result<()> {
    if shape.len() > MAX_RANK {
        return Err(Error::Shape(format!(
            "rank {} exceeds maximum {MAX_RANK}",
            shape.len()
        )));
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_rank(shape)?;
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.len() <= MAX_RANK, "rank {} > {MAX_RANK}", shape.len());
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        assert!(shape.len() <= MAX_RANK, "rank {} > {MAX_RANK}", shape.len());
        Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::of(rng.random_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_rank(shape)?;
        if numel(shape) != self.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn into_reshaped(mut self, shape: &[usize]) -> Result<Self> {
        check_rank(shape)?;
        if numel(shape) != self.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// First non-finite element, if any.
    pub fn non_finite_index(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn ensure_finite(&self, context: impl FnOnce() -> String) -> Result<()> {
        match self.non_finite_index() {
            None => Ok(()),
            Some(index) => Err(Error::Numeric {
                context: context(),
                index,
            }),
        }
    }

    /// Elementwise map, parallel over the flat range for large tensors.
    pub fn map(&self, f: impl Fn(T) -> T + Sync + Send) -> Self {
        let data = if self.len() >= PAR_THRESHOLD {
            self.data.par_iter().with_min_len(4096).map(|&v| f(v)).collect()
        } else {
            self.data.iter().map(|&v| f(v)).collect()
        };
        Self {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn map_unary(&self, op: UnaryOp) -> Result<Self> {
        if op == UnaryOp::Log {
            if let Some(index) = self.data.iter().position(|&v| !(v > T::zero())) {
                return Err(Error::Domain { op: "log", index });
            }
        }
        Ok(self.map(|v| op.apply(v)))
    }

    /// Elementwise `self op other`, where `other` may have extent 1 on any
    /// axis of `self` (same rank required).
    pub fn zip_binary(&self, other: &Self, op: BinaryOp) -> Result<Self> {
        if self.shape == other.shape {
            let data = if self.len() >= PAR_THRESHOLD {
                self.data
                    .par_iter()
                    .zip(other.data.par_iter())
                    .with_min_len(4096)
                    .map(|(&a, &b)| op.apply(a, b))
                    .collect()
            } else {
                self.data
                    .iter()
                    .zip(&other.data)
                    .map(|(&a, &b)| op.apply(a, b))
                    .collect()
            };
            return Ok(Self {
                shape: self.shape.clone(),
                data,
            });
        }
        let map = broadcast_index_map(&self.shape, &other.shape)?;
        let data = self
            .data
            .iter()
            .zip(&map)
            .map(|(&a, &j)| op.apply(a, other.data[j]))
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_binary(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_binary(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_binary(other, BinaryOp::Mul)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Reduce over `axes`, removing them from the shape. An empty axis set
    /// returns a copy.
    pub fn reduce(&self, axes: &[usize], op: ReduceOp) -> Result<Self> {
        if axes.is_empty() {
            return Ok(self.clone());
        }
        let mut reduced = vec![false; self.rank()];
        for &ax in axes {
            if ax >= self.rank() {
                return Err(Error::Shape(format!(
                    "axis {ax} out of range for rank {}",
                    self.rank()
                )));
            }
            reduced[ax] = true;
        }
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let kept_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(&reduced)
            .map(|(&d, &r)| if r { 1 } else { d })
            .collect();
        let count: usize = self
            .shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product();
        let map = broadcast_index_map(&self.shape, &kept_shape)?;
        let n_out = numel(&out_shape);
        let init = match op {
            ReduceOp::Max => T::neg_infinity(),
            _ => T::zero(),
        };
        let mut acc = vec![init; n_out];
        for (&v, &j) in self.data.iter().zip(&map) {
            acc[j] = match op {
                ReduceOp::Max => acc[j].max(v),
                _ => acc[j] + v,
            };
        }
        if op == ReduceOp::Mean {
            let c = T::of(count as f64);
            acc.iter_mut().for_each(|v| *v = *v / c);
        }
        Ok(Self {
            shape: out_shape,
            data: acc,
        })
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean_all(&self) -> T {
        self.sum_all() / T::of(self.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(Error::Shape(format!(
                "narrow(axis={axis}, {start}..{}) out of range for {:?}",
                start + len,
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let extent = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        if axis >= first.rank() {
            return Err(Error::Shape(format!(
                "concat axis {axis} out of range for {:?}",
                first.shape
            )));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p
                    .shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::Shape(format!(
                    "concat along {axis}: {:?} vs {:?}",
                    p.shape, first.shape
                )));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }

    /// Cyclic shift of the last two axes by `(dy, dx)`.
    pub fn roll2d(&self, dy: isize, dx: isize) -> Self {
        let r = self.rank();
        assert!(r >= 2, "roll2d needs rank >= 2");
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        let plane = h * w;
        let mut out = vec![T::zero(); self.len()];
        for (src, dst) in self
            .data
            .chunks(plane.max(1))
            .zip(out.chunks_mut(plane.max(1)))
        {
            for y in 0..h {
                let ny = (y as isize + dy).rem_euclid(h as isize) as usize;
                for x in 0..w {
                    let nx = (x as isize + dx).rem_euclid(w as isize) as usize;
                    dst[ny * w + nx] = src[y * w + x];
                }
            }
        }
        Self {
            shape: self.shape.clone(),
            data: out,
        }
    }
}

/// For each flat index of `full`, the flat index into a tensor of shape
/// `small` obtained by clamping singleton axes.
pub(crate) fn broadcast_index_map(full: &[usize], small: &[usize]) -> Result<Vec<usize>> {
    if full.len() != small.len() || full.iter().zip(small).any(|(&f, &s)| s != f && s != 1) {
        return Err(Error::Shape(format!(
            "{small:?} does not broadcast to {full:?}"
        )));
    }
    let rank = full.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        strides[i] = if small[i] == 1 { 0 } else { acc };
        acc *= small[i];
    }
    let n = numel(full);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        out.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < full[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(out)
}

/// Sum `grad` (shaped like `full`) down onto the broadcast shape `small`.
pub(crate) fn unbroadcast<T: Scalar>(grad: &Tensor<T>, small: &[usize]) -> Result<Tensor<T>> {
    if grad.shape() == small {
        return Ok(grad.clone());
    }
    let map = broadcast_index_map(grad.shape(), small)?;
    let mut out = vec![T::zero(); numel(small)];
    for (&g, &j) in grad.data().iter().zip(&map) {
        out[j] = out[j] + g;
    }
    Tensor::new(small, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_and_softplus_at_zero() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(0.0f32) - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn log_sigmoid_identity_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst = 0.0f32;
        for _ in 0..1000 {
            let x: f32 = rng.random_range(-10.0..10.0);
            let lhs = -softplus(-x);
            let rhs = sigmoid(x).ln();
            worst = worst.max((lhs - rhs).abs());
        }
        assert!(worst <= 1e-6, "worst {worst}");
    }

    #[test]
    fn softplus_asymptotes() {
        for i in -300..=300 {
            let x = i as f64 / 10.0;
            assert!(softplus(x) >= x.max(0.0));
        }
        assert!((softplus(30.0f64) - 30.0).abs() <= 1e-12);
    }

    #[test]
    fn log_of_non_positive_names_index() {
        let t = Tensor::new(&[3], vec![1.0f64, 0.0, 2.0]).unwrap();
        match t.map_unary(UnaryOp::Log) {
            Err(Error::Domain { op: "log", index: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn identities_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::<f64>::uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        assert_eq!(a.mul(&Tensor::ones(&[2, 3, 4])).unwrap(), a);
        let neg = a.map_unary(UnaryOp::Negate).unwrap();
        assert_eq!(a.add(&neg).unwrap(), Tensor::zeros(&[2, 3, 4]));
    }

    #[test]
    fn sum_matches_scalar_loop_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f64>::uniform(&[5, 7], -3.0, 3.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[5, 7], -3.0, 3.0, &mut rng);
        let c = a.add(&b).unwrap();
        for i in 0..a.len() {
            assert_eq!(c.data()[i].to_bits(), (a.data()[i] + b.data()[i]).to_bits());
        }
    }

    #[test]
    fn broadcasting_singleton_axes_only() {
        let a = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        let b = Tensor::new(&[1, 3], vec![10.0, 20.0, 30.0]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        let bad = Tensor::<f64>::zeros(&[3]);
        assert!(matches!(a.add(&bad), Err(Error::Shape(_))));
        let bad = Tensor::<f64>::zeros(&[2, 2]);
        assert!(matches!(a.add(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn division_by_zero_is_flagged_not_fatal() {
        let a = Tensor::new(&[2], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::new(&[2], vec![1.0f64, 0.0]).unwrap();
        let c = a.zip_binary(&b, BinaryOp::Div).unwrap();
        assert!(c.data()[1].is_infinite());
        assert_eq!(c.non_finite_index(), Some(1));
        assert!(matches!(c.ensure_finite(|| "div".into()), Err(Error::Numeric { index: 1, .. })));
    }

    #[test]
    fn reductions() {
        let c = Tensor::<f64>::full(&[2, 3, 4], 1.75);
        let all = c.reduce(&[0, 1, 2], ReduceOp::Mean).unwrap();
        assert_eq!(all.shape(), &[] as &[usize]);
        assert_eq!(all.item().unwrap(), 1.75);
        let z = Tensor::<f64>::zeros(&[3, 4]).reduce(&[1], ReduceOp::Sum).unwrap();
        assert_eq!(z, Tensor::zeros(&[3]));
        assert_eq!(c.reduce(&[], ReduceOp::Sum).unwrap(), c);
        let t = Tensor::new(&[2, 2], vec![1.0f64, 5.0, -2.0, 3.0]).unwrap();
        assert_eq!(t.reduce(&[0], ReduceOp::Max).unwrap().data(), &[1.0, 5.0]);
        assert_eq!(t.reduce(&[1], ReduceOp::Sum).unwrap().data(), &[6.0, 1.0]);
    }

    /// Kahan-compensated two-pass mean as an independent reference.
    fn kahan_mean(v: &[f64]) -> f64 {
        let (mut s, mut comp) = (0.0f64, 0.0f64);
        for &x in v {
            let y = x - comp;
            let t = s + y;
            comp = (t - s) - y;
            s = t;
        }
        let m = s / v.len() as f64;
        // second pass corrects residual bias
        let r: f64 = v.iter().map(|x| x - m).sum::<f64>() / v.len() as f64;
        m + r
    }

    #[test]
    fn mean_matches_kahan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = Tensor::<f64>::uniform(&[4, 8, 16, 16], -5.0, 5.0, &mut rng);
        let m = t.reduce(&[0, 1, 2, 3], ReduceOp::Mean).unwrap().item().unwrap();
        let reference = kahan_mean(t.data());
        assert!(((m - reference) / reference).abs() <= 1e-12);
    }

    #[test]
    fn narrow_concat_inverse() {
        let t = Tensor::<f64>::from_fn(&[2, 5, 3], |i| i as f64);
        let a = t.narrow(1, 0, 2).unwrap();
        let b = t.narrow(1, 2, 3).unwrap();
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap(), t);
        assert!(t.narrow(1, 4, 2).is_err());
    }

    #[test]
    fn rank_limit() {
        assert!(Tensor::<f32>::new(&[1, 1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
    }
}
