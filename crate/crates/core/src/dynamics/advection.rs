//! Gaussian blobs carried by a constant velocity on a periodic grid, with
//! optional diffusion. Every frame is evaluated in closed form.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvectionConfig {
    pub n: usize,
    pub frames: usize,
    /// Pixels per frame along (x, y).
    pub velocity: (f64, f64),
    /// Diffusivity in pixels² per frame.
    pub diffusion: f64,
    pub blobs: usize,
    pub seed: u64,
}

impl Default for AdvectionConfig {
    fn default() -> Self {
        Self {
            n: 16,
            frames: 25,
            velocity: (1.0, 0.5),
            diffusion: 0.05,
            blobs: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    cx: f64,
    cy: f64,
    sigma2: f64,
    amp: f64,
}

/// Sum over periodic images of a 1-D Gaussian factor at integer offset
/// `p` from a center at fractional position `c`.
fn wrapped(p: usize, c: f64, n: usize, sigma2: f64) -> f64 {
    let nf = n as f64;
    let reach = ((8.0 * sigma2.sqrt()) / nf).ceil() as i64 + 1;
    (-reach..=reach)
        .map(|m| {
            let d = p as f64 - c + m as f64 * nf;
            (-d * d / (2.0 * sigma2)).exp()
        })
        .sum()
}

/// Split a displacement into a whole-pixel shift and the remainder.
fn split_shift(s: f64, n: usize) -> (usize, f64) {
    let whole = s.floor();
    let idx = (whole as i64).rem_euclid(n as i64) as usize;
    (idx, s - whole)
}

/// Frames (T, 1, n, n).
pub fn simulate_advection(cfg: &AdvectionConfig) -> Result<Tensor<f64>> {
    let n = cfg.n;
    if n == 0 || cfg.frames == 0 {
        return Err(Error::Config("advection grid and frame count must be positive".into()));
    }
    if !(cfg.diffusion >= 0.0) || !cfg.velocity.0.is_finite() || !cfg.velocity.1.is_finite() {
        return Err(Error::Config("velocity must be finite and diffusion non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let nf = n as f64;
    let blobs: Vec<Blob> = (0..cfg.blobs)
        .map(|_| {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let sigma: f64 = rng.random_range(1.5..3.0);
            Blob {
                cx: rng.random_range(0.0..nf),
                cy: rng.random_range(0.0..nf),
                sigma2: sigma * sigma,
                amp: sign * rng.random_range(0.5..1.5),
            }
        })
        .collect();

    let mut data = vec![0.0; cfg.frames * n * n];
    for t in 0..cfg.frames {
        let frame = &mut data[t * n * n..(t + 1) * n * n];
        let (sx, fx) = split_shift(cfg.velocity.0 * t as f64, n);
        let (sy, fy) = split_shift(cfg.velocity.1 * t as f64, n);
        for b in &blobs {
            let s2 = b.sigma2 + 2.0 * cfg.diffusion * t as f64;
            let amp = b.amp * b.sigma2 / s2;
            // evaluated on the unshifted lattice, then placed `sx, sy` pixels over
            let gx: Vec<f64> = (0..n).map(|p| wrapped(p, b.cx + fx, n, s2)).collect();
            let gy: Vec<f64> = (0..n).map(|p| wrapped(p, b.cy + fy, n, s2)).collect();
            for y in 0..n {
                let row = (y + sy) % n;
                for x in 0..n {
                    frame[row * n + (x + sx) % n] += amp * gy[y] * gx[x];
                }
            }
        }
    }
    Tensor::new(&[cfg.frames, 1, n, n], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn still_field_is_constant_in_time() {
        let cfg = AdvectionConfig {
            velocity: (0.0, 0.0),
            diffusion: 0.0,
            ..AdvectionConfig::default()
        };
        let t = simulate_advection(&cfg).unwrap();
        let f0 = t.narrow(0, 0, 1).unwrap();
        for k in 1..cfg.frames {
            assert_eq!(t.narrow(0, k, 1).unwrap().data(), f0.data());
        }
    }

    #[test]
    fn unit_velocity_is_an_exact_shift() {
        let cfg = AdvectionConfig {
            velocity: (1.0, 0.0),
            diffusion: 0.0,
            seed: 4,
            ..AdvectionConfig::default()
        };
        let t = simulate_advection(&cfg).unwrap();
        let f0 = t.narrow(0, 0, 1).unwrap();
        for k in 0..cfg.frames {
            let want = f0.roll2d(0, k as isize);
            assert_eq!(t.narrow(0, k, 1).unwrap().data(), want.data());
        }
    }

    #[test]
    fn mass_is_conserved() {
        for diffusion in [0.0, 0.05] {
            let cfg = AdvectionConfig {
                velocity: (0.37, -0.81),
                diffusion,
                seed: 5,
                ..AdvectionConfig::default()
            };
            let t = simulate_advection(&cfg).unwrap();
            let m0 = t.narrow(0, 0, 1).unwrap().sum_all();
            for k in 1..cfg.frames {
                assert!((t.narrow(0, k, 1).unwrap().sum_all() - m0).abs() <= 1e-10);
            }
        }
    }
}
