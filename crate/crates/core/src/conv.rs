//! Same-size 2-D convolution over (batch, channel, height, width) tensors
//! with periodic or zero padding, chosen independently per spatial axis.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gemm::{matmul, View};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Periodic,
    Zero,
}

/// Boundary handling for the row (height) and column (width) axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Padding {
    pub rows: PadMode,
    pub cols: PadMode,
}

impl Padding {
    pub const PERIODIC: Padding = Padding {
        rows: PadMode::Periodic,
        cols: PadMode::Periodic,
    };
    pub const ZERO: Padding = Padding {
        rows: PadMode::Zero,
        cols: PadMode::Zero,
    };
    /// Zero padding across latitude (rows), wraparound in longitude (columns).
    pub const LATLON: Padding = Padding {
        rows: PadMode::Zero,
        cols: PadMode::Periodic,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T> {
    /// (out-channels, in-channels, kH, kW)
    pub weight: Tensor<T>,
    /// (out-channels)
    pub bias: Tensor<T>,
    pub padding: Padding,
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, padding: Padding) -> Result<Self> {
        check_kernel(&weight, &bias)?;
        Ok(Self {
            weight,
            bias,
            padding,
        })
    }

    /// Uniform init in ±1/sqrt(fan_in), zero bias.
    pub fn init(
        c_out: usize,
        c_in: usize,
        k: usize,
        padding: Padding,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let weight = Tensor::uniform(&[c_out, c_in, k, k], -bound, bound, rng);
        Self::new(weight, Tensor::zeros(&[c_out]), padding)
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

fn check_kernel<T: Scalar>(weight: &Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    let ws = weight.shape();
    if ws.len() != 4 {
        return Err(Error::Shape(format!("kernel weight must be rank 4, got {ws:?}")));
    }
    if ws[2].is_multiple_of(2) || ws[3].is_multiple_of(2) {
        return Err(Error::Contract(format!(
            "kernel extents must be odd, got {}x{}",
            ws[2], ws[3]
        )));
    }
    if bias.shape() != [ws[0]] {
        return Err(Error::Shape(format!(
            "bias shape {:?} does not match {} output channels",
            bias.shape(),
            ws[0]
        )));
    }
    Ok(())
}

fn check_input<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("conv input must be (B,C,H,W), got {s:?}")));
    }
    if s[1] != weight.shape()[1] {
        return Err(Error::Shape(format!(
            "conv input has {} channels, kernel expects {}",
            s[1],
            weight.shape()[1]
        )));
    }
    if s[2] == 0 || s[3] == 0 {
        return Err(Error::Shape(format!("empty spatial extent {s:?}")));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Source index for padded coordinate `p` (offset by `pad`) along an axis of
/// length `n`, or `None` when it falls in a zero-padded border.
#[inline]
fn source_index(p: usize, pad: usize, n: usize, mode: PadMode) -> Option<usize> {
    let i = p as isize - pad as isize;
    match mode {
        PadMode::Periodic => Some(i.rem_euclid(n as isize) as usize),
        PadMode::Zero => (0..n as isize).contains(&i).then_some(i as usize),
    }
}

/// For every kernel tap and output pixel, the flat source index in the
/// input plane, or `NONE` where the tap reads zero padding.
struct TapTable {
    idx: Vec<usize>,
    plane: usize,
    taps: usize,
}

const NONE: usize = usize::MAX;

impl TapTable {
    fn new(h: usize, w: usize, kh: usize, kw: usize, padding: Padding) -> Self {
        let (ph, pw) = (kh / 2, kw / 2);
        let plane = h * w;
        let mut idx = Vec::with_capacity(kh * kw * plane);
        for ky in 0..kh {
            for kx in 0..kw {
                for y in 0..h {
                    let sy = source_index(y + ky, ph, h, padding.rows);
                    for x in 0..w {
                        let sx = source_index(x + kx, pw, w, padding.cols);
                        idx.push(match (sy, sx) {
                            (Some(sy), Some(sx)) => sy * w + sx,
                            _ => NONE,
                        });
                    }
                }
            }
        }
        Self {
            idx,
            plane,
            taps: kh * kw,
        }
    }

    /// Unfold one (C, H, W) image into a (C·taps, H·W) column matrix.
    fn im2col<T: Scalar>(&self, image: &[T], c_in: usize, cols: &mut [T]) {
        let p = self.plane;
        for ci in 0..c_in {
            let src = &image[ci * p..(ci + 1) * p];
            for t in 0..self.taps {
                let dst = &mut cols[(ci * self.taps + t) * p..][..p];
                for (d, &i) in dst.iter_mut().zip(&self.idx[t * p..(t + 1) * p]) {
                    *d = if i == NONE { T::zero() } else { src[i] };
                }
            }
        }
    }

    /// Adjoint of [`TapTable::im2col`]: scatter-add columns onto the image.
    fn col2im<T: Scalar>(&self, cols: &[T], c_in: usize, image: &mut [T]) {
        let p = self.plane;
        for ci in 0..c_in {
            let dst = &mut image[ci * p..(ci + 1) * p];
            for t in 0..self.taps {
                let src = &cols[(ci * self.taps + t) * p..][..p];
                for (&v, &i) in src.iter().zip(&self.idx[t * p..(t + 1) * p]) {
                    if i != NONE {
                        dst[i] = dst[i] + v;
                    }
                }
            }
        }
    }
}

/// Batch items per weight-gradient partial sum; fixed so the reduction
/// order does not depend on the worker count.
const WEIGHT_GRAD_CHUNK: usize = 4;

/// Forward pass over raw parts; used by both the eager API and the tape.
pub(crate) fn forward_parts<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    check_kernel(weight, bias)?;
    let (b, c_in, h, w) = check_input(input, weight)?;
    let ws = weight.shape();
    let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
    if kh * kw == 1 {
        return pointwise(input, weight, bias);
    }
    let table = TapTable::new(h, w, kh, kw, padding);
    let (plane, depth) = (h * w, c_in * kh * kw);
    let (x, wd, bd) = (input.data(), weight.data(), bias.data());

    let mut out = vec![T::zero(); b * c_out * plane];
    out.par_chunks_mut(c_out * plane).enumerate().for_each(|(bi, dst)| {
        let mut cols = vec![T::zero(); depth * plane];
        table.im2col(&x[bi * c_in * plane..(bi + 1) * c_in * plane], c_in, &mut cols);
        for (co, row) in dst.chunks_mut(plane).enumerate() {
            row.iter_mut().for_each(|v| *v = bd[co]);
        }
        matmul(wd, View::new(c_out, depth), &cols, View::new(depth, plane), dst, T::one());
    });
    Tensor::new(&[b, c_out, h, w], out)
}

/// Backward pass over raw parts; returns (grad_input, grad_weight, grad_bias).
pub(crate) fn backward_parts<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    padding: Padding,
) -> Result<ConvGrads<T>> {
    let (b, c_in, h, w) = check_input(input, weight)?;
    let ws = weight.shape();
    let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
    if grad_out.shape() != [b, c_out, h, w] {
        return Err(Error::Shape(format!(
            "grad_out shape {:?}, expected {:?}",
            grad_out.shape(),
            [b, c_out, h, w]
        )));
    }
    let table = TapTable::new(h, w, kh, kw, padding);
    let (plane, depth) = (h * w, c_in * kh * kw);
    let (x, gd, wd) = (input.data(), grad_out.data(), weight.data());

    let grad_bias: Vec<T> = (0..c_out)
        .map(|co| {
            (0..b).fold(T::zero(), |s, bi| {
                s + gd[(bi * c_out + co) * plane..(bi * c_out + co + 1) * plane]
                    .iter()
                    .copied()
                    .sum::<T>()
            })
        })
        .collect();

    // Each chunk of batch items yields grad_input for its items and a
    // partial weight gradient; partials are added in chunk order.
    let mut grad_input = vec![T::zero(); b * c_in * plane];
    let partials: Vec<Vec<T>> = grad_input
        .par_chunks_mut(WEIGHT_GRAD_CHUNK * c_in * plane)
        .enumerate()
        .map(|(chunk, gi)| {
            let mut gw = vec![T::zero(); c_out * depth];
            let mut cols = vec![T::zero(); depth * plane];
            for (j, gi) in gi.chunks_mut(c_in * plane).enumerate() {
                let bi = chunk * WEIGHT_GRAD_CHUNK + j;
                let go = &gd[bi * c_out * plane..(bi + 1) * c_out * plane];
                table.im2col(&x[bi * c_in * plane..(bi + 1) * c_in * plane], c_in, &mut cols);
                matmul(go, View::new(c_out, plane), &cols, View::new(depth, plane).t(), &mut gw, T::one());
                matmul(wd, View::new(c_out, depth).t(), go, View::new(c_out, plane), &mut cols, T::zero());
                table.col2im(&cols, c_in, gi);
            }
            gw
        })
        .collect();
    let mut grad_weight = vec![T::zero(); c_out * depth];
    for p in &partials {
        for (g, v) in grad_weight.iter_mut().zip(p) {
            *g = *g + *v;
        }
    }

    Ok(ConvGrads {
        input: Tensor::new(&[b, c_in, h, w], grad_input)?,
        weight: Tensor::new(ws, grad_weight)?,
        bias: Tensor::new(&[c_out], grad_bias)?,
    })
}

pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, k: &ConvKernel<T>) -> Result<Tensor<T>> {
    forward_parts(input, &k.weight, &k.bias, k.padding)
}

pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    k: &ConvKernel<T>,
) -> Result<ConvGrads<T>> {
    backward_parts(grad_out, input, &k.weight, k.padding)
}

/// Literal definition of the padded convolution, one output element at a time.
pub fn conv2d_reference<T: Scalar>(input: &Tensor<T>, k: &ConvKernel<T>) -> Result<Tensor<T>> {
    check_kernel(&k.weight, &k.bias)?;
    let (b, c_in, h, w) = check_input(input, &k.weight)?;
    let ws = k.weight.shape();
    let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let x = input.data();
    let wt = k.weight.data();
    let mut out = vec![T::zero(); b * c_out * h * w];
    for bi in 0..b {
        for co in 0..c_out {
            for y in 0..h {
                for xo in 0..w {
                    let mut acc = k.bias.data()[co];
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let sy = source_index(y + ky, ph, h, k.padding.rows);
                                let sx = source_index(xo + kx, pw, w, k.padding.cols);
                                if let (Some(sy), Some(sx)) = (sy, sx) {
                                    acc = acc
                                        + wt[((co * c_in + ci) * kh + ky) * kw + kx]
                                            * x[((bi * c_in + ci) * h + sy) * w + sx];
                                }
                            }
                        }
                    }
                    out[((bi * c_out + co) * h + y) * w + xo] = acc;
                }
            }
        }
    }
    Tensor::new(&[b, c_out, h, w], out)
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// Pointwise channel mixing with a 1x1 kernel.
pub fn conv1x1<T: Scalar>(input: &Tensor<T>, k: &ConvKernel<T>) -> Result<Tensor<T>> {
    let ws = k.weight.shape();
    if ws.len() != 4 || ws[2] != 1 || ws[3] != 1 {
        return Err(Error::Contract(format!("conv1x1 needs a 1x1 kernel, got {ws:?}")));
    }
    check_kernel(&k.weight, &k.bias)?;
    check_input(input, &k.weight)?;
    pointwise(input, &k.weight, &k.bias)
}

fn pointwise<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    let (b, c_in, h, w) = (s[0], s[1], s[2], s[3]);
    let c_out = weight.shape()[0];
    let plane = h * w;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![T::zero(); b * c_out * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (bi, co) = (idx / c_out, idx % c_out);
        dst.iter_mut().for_each(|v| *v = bias.data()[co]);
        for ci in 0..c_in {
            let src = &x[(bi * c_in + ci) * plane..(bi * c_in + ci + 1) * plane];
            axpy(dst, wt[co * c_in + ci], src);
        }
    });
    Tensor::new(&[b, c_out, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn delta_kernel(c: usize, padding: Padding) -> ConvKernel<f64> {
        let mut w = Tensor::zeros(&[c, c, 3, 3]);
        for i in 0..c {
            w.data_mut()[((i * c + i) * 3 + 1) * 3 + 1] = 1.0;
        }
        ConvKernel::new(w, Tensor::zeros(&[c]), padding).unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::uniform(&[2, 3, 5, 4], -1.0, 1.0, &mut rng);
        for p in [Padding::PERIODIC, Padding::ZERO, Padding::LATLON] {
            let k = delta_kernel(3, p);
            assert_eq!(conv2d_forward(&x, &k).unwrap(), x);
            assert_eq!(conv2d_reference(&x, &k).unwrap(), x);
        }
    }

    #[test]
    fn ones_kernel_on_constant_field() {
        let x = Tensor::<f64>::full(&[1, 1, 6, 6], 2.0);
        let k = ConvKernel::new(
            Tensor::ones(&[1, 1, 3, 3]),
            Tensor::full(&[1], 0.5),
            Padding::PERIODIC,
        )
        .unwrap();
        let y = conv2d_forward(&x, &k).unwrap();
        assert!(y.data().iter().all(|&v| v == 18.5));
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let x = Tensor::<f64>::full(&[2, 2, 3, 3], 7.0);
        let k = ConvKernel::new(
            Tensor::zeros(&[2, 2, 3, 3]),
            Tensor::new(&[2], vec![1.5, -2.0]).unwrap(),
            Padding::ZERO,
        )
        .unwrap();
        let y = conv2d_reference(&x, &k).unwrap();
        assert!(y.narrow(1, 0, 1).unwrap().data().iter().all(|&v| v == 1.5));
        assert!(y.narrow(1, 1, 1).unwrap().data().iter().all(|&v| v == -2.0));
    }

    #[test]
    fn zero_padding_corner_tap_count() {
        let x = Tensor::<f64>::ones(&[1, 1, 5, 5]);
        let k = ConvKernel::new(Tensor::ones(&[1, 1, 3, 3]), Tensor::zeros(&[1]), Padding::ZERO).unwrap();
        let y = conv2d_forward(&x, &k).unwrap();
        let r = conv2d_reference(&x, &k).unwrap();
        assert_eq!(y, r);
        // ceil(3/2)^2 valid taps at each corner
        for idx in [0, 4, 20, 24] {
            assert_eq!(y.data()[idx], 4.0);
        }
        assert_eq!(y.data()[12], 9.0);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let k = delta_kernel(3, Padding::PERIODIC);
        assert!(matches!(conv2d_forward(&x, &k), Err(Error::Shape(_))));
        assert!(matches!(conv2d_reference(&x, &k), Err(Error::Shape(_))));
    }

    #[test]
    fn even_kernel_rejected() {
        let w = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(matches!(
            ConvKernel::new(w, Tensor::zeros(&[1]), Padding::ZERO),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn conv1x1_identity_scale_and_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f32>::uniform(&[2, 3, 4, 5], -1.0, 1.0, &mut rng);
        let mut eye = Tensor::zeros(&[3, 3, 1, 1]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let k = ConvKernel::new(eye, Tensor::zeros(&[3]), Padding::ZERO).unwrap();
        assert_eq!(conv1x1(&x, &k).unwrap(), x);

        let one = x.narrow(1, 0, 1).unwrap();
        let k2 = ConvKernel::new(Tensor::full(&[1, 1, 1, 1], 2.0f32), Tensor::zeros(&[1]), Padding::PERIODIC).unwrap();
        assert_eq!(conv1x1(&one, &k2).unwrap(), one.scale(2.0));

        let kr = ConvKernel::<f32>::init(4, 3, 1, Padding::PERIODIC, &mut rng).unwrap();
        let a = conv1x1(&x, &kr).unwrap();
        let b = conv2d_forward(&x, &kr).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));

        let k3 = ConvKernel::<f32>::init(4, 3, 3, Padding::PERIODIC, &mut rng).unwrap();
        assert!(matches!(conv1x1(&x, &k3), Err(Error::Contract(_))));
    }

    #[test]
    fn periodic_shift_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::uniform(&[1, 2, 7, 6], -1.0, 1.0, &mut rng);
        let k = ConvKernel::<f64>::init(3, 2, 3, Padding::PERIODIC, &mut rng).unwrap();
        for (dy, dx) in [(1, 0), (0, 2), (-3, 5)] {
            let a = conv2d_forward(&x.roll2d(dy, dx), &k).unwrap();
            let b = conv2d_forward(&x, &k).unwrap().roll2d(dy, dx);
            assert!(a.max_abs_diff(&b) <= 1e-12);
        }
    }

    #[test]
    fn linearity_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::<f64>::uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let y = Tensor::<f64>::uniform(&[1, 2, 5, 5], -1.0, 1.0, &mut rng);
        let k = ConvKernel::<f64>::init(2, 2, 3, Padding::ZERO, &mut rng).unwrap();
        let (alpha, beta) = (0.7, -1.3);
        let lhs = conv2d_forward(&x.scale(alpha).add(&y.scale(beta)).unwrap(), &k).unwrap();
        let rhs = conv2d_forward(&x, &k)
            .unwrap()
            .scale(alpha)
            .add(&conv2d_forward(&y, &k).unwrap().scale(beta))
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::<f64>::uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut rng);
        let k = ConvKernel::<f64>::init(3, 2, 3, Padding::PERIODIC, &mut rng).unwrap();
        let g = conv2d_backward(&Tensor::zeros(&[2, 3, 4, 4]), &x, &k).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_backward_matches_dense_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (b, ci, co, h, w) = (2, 3, 2, 3, 4);
        let x = Tensor::<f64>::uniform(&[b, ci, h, w], -1.0, 1.0, &mut rng);
        let k = ConvKernel::<f64>::init(co, ci, 1, Padding::ZERO, &mut rng).unwrap();
        let go = Tensor::<f64>::uniform(&[b, co, h, w], -1.0, 1.0, &mut rng);
        let g = conv2d_backward(&go, &x, &k).unwrap();
        let p = h * w;
        for o in 0..co {
            for i in 0..ci {
                let mut expect = 0.0;
                for bi in 0..b {
                    for s in 0..p {
                        expect += go.data()[(bi * co + o) * p + s] * x.data()[(bi * ci + i) * p + s];
                    }
                }
                assert!((g.weight.data()[o * ci + i] - expect).abs() < 1e-12);
            }
        }
        for bi in 0..b {
            for i in 0..ci {
                for s in 0..p {
                    let expect: f64 = (0..co)
                        .map(|o| k.weight.data()[o * ci + i] * go.data()[(bi * co + o) * p + s])
                        .sum();
                    assert!((g.input.data()[(bi * ci + i) * p + s] - expect).abs() < 1e-12);
                }
            }
        }
    }
}
