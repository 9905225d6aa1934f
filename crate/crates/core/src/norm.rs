//! Group normalization over (B, C, H, W) with per-channel affine terms.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Per-(batch, group) statistics saved for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct GroupStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

fn dims<T: Scalar>(x: &Tensor<T>, groups: usize) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("group norm expects (B,C,H,W), got {s:?}")));
    }
    if groups == 0 || !s[1].is_multiple_of(groups) {
        return Err(Error::Config(format!(
            "{} channels are not divisible into {groups} groups",
            s[1]
        )));
    }
    Ok((s[0], s[1], s[2] * s[3]))
}

pub(crate) fn forward_parts<T: Scalar>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, GroupStats<T>)> {
    let (b, c, plane) = dims(x, groups)?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "affine terms {:?}/{:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    let cg = c / groups;
    let n = T::of((cg * plane) as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    let mut mean = Vec::with_capacity(b * groups);
    let mut rstd = Vec::with_capacity(b * groups);
    for bi in 0..b {
        for gi in 0..groups {
            let start = (bi * c + gi * cg) * plane;
            let seg = &xd[start..start + cg * plane];
            let m = seg.iter().copied().sum::<T>() / n;
            let var = seg.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            for ch in 0..cg {
                let ci = gi * cg + ch;
                let (gm, bt) = (gamma.data()[ci], beta.data()[ci]);
                let off = start + ch * plane;
                for (o, &v) in out[off..off + plane].iter_mut().zip(&xd[off..off + plane]) {
                    *o = gm * ((v - m) * r) + bt;
                }
            }
            mean.push(m);
            rstd.push(r);
        }
    }
    Ok((Tensor::new(x.shape(), out)?, GroupStats { mean, rstd }))
}

/// Returns (grad_x, grad_gamma, grad_beta).
pub(crate) fn backward_parts<T: Scalar>(
    grad: &Tensor<T>,
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    stats: &GroupStats<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, plane) = dims(x, groups)?;
    let cg = c / groups;
    let n = T::of((cg * plane) as f64);
    let (xd, gd) = (x.data(), grad.data());
    let mut gx = vec![T::zero(); xd.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for bi in 0..b {
        for gi in 0..groups {
            let (m, r) = (stats.mean[bi * groups + gi], stats.rstd[bi * groups + gi]);
            let start = (bi * c + gi * cg) * plane;
            // means of dxhat and dxhat * xhat over the group
            let (mut s1, mut s2) = (T::zero(), T::zero());
            for ch in 0..cg {
                let ci = gi * cg + ch;
                let off = start + ch * plane;
                let gm = gamma.data()[ci];
                let (mut gg, mut gb) = (T::zero(), T::zero());
                for i in off..off + plane {
                    let xh = (xd[i] - m) * r;
                    let dxh = gd[i] * gm;
                    s1 = s1 + dxh;
                    s2 = s2 + dxh * xh;
                    gg = gg + gd[i] * xh;
                    gb = gb + gd[i];
                }
                ggamma[ci] = ggamma[ci] + gg;
                gbeta[ci] = gbeta[ci] + gb;
            }
            let (s1, s2) = (s1 / n, s2 / n);
            for ch in 0..cg {
                let ci = gi * cg + ch;
                let off = start + ch * plane;
                let gm = gamma.data()[ci];
                for i in off..off + plane {
                    let xh = (xd[i] - m) * r;
                    gx[i] = r * (gd[i] * gm - s1 - xh * s2);
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), gx)?,
        Tensor::new(&[c], ggamma)?,
        Tensor::new(&[c], gbeta)?,
    ))
}

/// Standardize each (batch, group) block over its (C/G, H, W) elements, then
/// apply the per-channel affine map.
pub fn group_norm<T: Scalar>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    forward_parts(x, groups, gamma, beta, eps).map(|(y, _)| y)
}

/// Divisor of `channels` closest to `requested`, ties resolved upwards.
pub fn resolve_groups(channels: usize, requested: usize) -> usize {
    (1..=channels)
        .filter(|g| channels.is_multiple_of(*g))
        .min_by_key(|&g| (g.abs_diff(requested), std::cmp::Reverse(g)))
        .unwrap_or(1)
}
