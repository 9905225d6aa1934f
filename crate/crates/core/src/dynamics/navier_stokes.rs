//! Pseudo-spectral solver for 2-D incompressible flow in vorticity form on
//! the periodic square [0, 2π)²:
//!
//! ∂ω/∂t + u·∇ω = ν∇²ω,  ∇²ψ = −ω,  u = ∂ψ/∂y,  v = −∂ψ/∂x.
//!
//! The product u·∇ω is formed on the grid and truncated with the 2/3 rule;
//! the state stays band-limited to the retained modes, so the discrete
//! nonlinear term conserves energy and enstrophy and only viscosity removes
//! them. Time stepping is classical RK4.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::fft::{wavenumber, Fft2};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const REYNOLDS: f64 = 1e3;
/// Vorticity magnitude treated as a blow-up.
pub const UNSTABLE_ABS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NsConfig {
    /// Grid points per side; a power of two.
    pub n: usize,
    /// Output frames, the first being the initial condition.
    pub frames: usize,
    pub viscosity: f64,
    pub dt: f64,
    /// Solver steps between output frames.
    pub steps_per_frame: usize,
    pub seed: u64,
    /// Inclusive wavenumber shell of the random initial field.
    pub band: (usize, usize),
    /// RMS of the initial vorticity.
    pub amplitude: f64,
}

impl Default for NsConfig {
    fn default() -> Self {
        Self {
            n: 64,
            frames: 50,
            viscosity: 1.0 / REYNOLDS,
            dt: 1e-3,
            steps_per_frame: 20,
            seed: 0,
            band: (1, 4),
            amplitude: 5.0,
        }
    }
}

impl NsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 4 || !self.n.is_power_of_two() {
            return Err(Error::Config(format!("grid size {} must be a power of two >= 4", self.n)));
        }
        if self.frames == 0 || self.steps_per_frame == 0 {
            return Err(Error::Config("frames and steps per frame must be positive".into()));
        }
        if !(self.dt > 0.0) || !(self.viscosity >= 0.0) {
            return Err(Error::Config("dt must be positive and viscosity non-negative".into()));
        }
        let kmax = cutoff(self.n);
        if self.band.0 == 0 || self.band.0 > self.band.1 || self.band.1 as i64 > kmax {
            return Err(Error::Config(format!(
                "initial band {:?} must lie within 1..={kmax}",
                self.band
            )));
        }
        // Explicit-diffusion limit of RK4 at the highest retained mode.
        let k2max = 2.0 * (kmax * kmax) as f64;
        if self.viscosity * k2max * self.dt > 2.5 {
            return Err(Error::Config(format!(
                "dt {} exceeds the viscous stability bound {:.3e}",
                self.dt,
                2.5 / (self.viscosity * k2max)
            )));
        }
        Ok(())
    }
}

/// Largest retained wavenumber per axis under the 2/3 rule.
pub fn cutoff(n: usize) -> i64 {
    ((n - 1) / 3) as i64
}

/// Conserved and dissipated quantities, one entry per solver step
/// (index 0 is the initial state).
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    /// ½ mean |u|²
    pub energy: Vec<f64>,
    /// ½ mean ω²
    pub enstrophy: Vec<f64>,
    pub mean_vorticity: Vec<f64>,
}

pub struct NsSolver {
    n: usize,
    fft: Fft2,
    kx: Vec<f64>,
    ky: Vec<f64>,
    k2: Vec<f64>,
    keep: Vec<bool>,
    nu: f64,
    dt: f64,
    vel: Vec<Complex64>,
    grad: Vec<Complex64>,
    stages: [Vec<Complex64>; 4],
    tmp: Vec<Complex64>,
}

impl NsSolver {
    pub fn new(n: usize, viscosity: f64, dt: f64) -> Result<Self> {
        let fft = Fft2::new(n)?;
        let kmax = cutoff(n);
        let len = n * n;
        let (mut kx, mut ky, mut k2, mut keep) = (vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![false; len]);
        for y in 0..n {
            for x in 0..n {
                let i = y * n + x;
                let (a, b) = (wavenumber(x, n), wavenumber(y, n));
                kx[i] = a as f64;
                ky[i] = b as f64;
                k2[i] = (a * a + b * b) as f64;
                keep[i] = a.abs() <= kmax && b.abs() <= kmax;
            }
        }
        let z = vec![Complex64::default(); len];
        Ok(Self {
            n,
            fft,
            kx,
            ky,
            k2,
            keep,
            nu: viscosity,
            dt,
            vel: z.clone(),
            grad: z.clone(),
            stages: [z.clone(), z.clone(), z.clone(), z.clone()],
            tmp: z,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Band-limited spectrum of a physical field.
    pub fn to_spectral(&mut self, w: &[f64]) -> Vec<Complex64> {
        let mut d: Vec<Complex64> = w.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft.forward(&mut d);
        for (v, &k) in d.iter_mut().zip(&self.keep) {
            if !k {
                *v = Complex64::default();
            }
        }
        d
    }

    pub fn to_physical(&mut self, w_hat: &[Complex64]) -> Vec<f64> {
        let mut d = w_hat.to_vec();
        self.fft.inverse(&mut d);
        d.iter().map(|c| c.re).collect()
    }

    /// dω̂/dt.
    fn rhs(&mut self, w: &[Complex64], out: &mut [Complex64]) {
        let i1 = Complex64::new(0.0, 1.0);
        // u + i v and ω_x + i ω_y packed into one complex field each
        for i in 0..w.len() {
            let psi = if self.k2[i] > 0.0 { w[i] / self.k2[i] } else { Complex64::default() };
            let u = i1 * self.ky[i] * psi;
            let v = -i1 * self.kx[i] * psi;
            self.vel[i] = u + i1 * v;
            let wx = i1 * self.kx[i] * w[i];
            let wy = i1 * self.ky[i] * w[i];
            self.grad[i] = wx + i1 * wy;
        }
        self.fft.inverse(&mut self.vel);
        self.fft.inverse(&mut self.grad);
        for i in 0..w.len() {
            let (u, v) = (self.vel[i].re, self.vel[i].im);
            let (wx, wy) = (self.grad[i].re, self.grad[i].im);
            self.tmp[i] = Complex64::new(u * wx + v * wy, 0.0);
        }
        self.fft.forward(&mut self.tmp);
        for i in 0..w.len() {
            out[i] = if self.keep[i] {
                -self.tmp[i] - self.nu * self.k2[i] * w[i]
            } else {
                Complex64::default()
            };
        }
    }

    /// One RK4 step in place.
    pub fn step(&mut self, w: &mut [Complex64]) {
        let dt = self.dt;
        let mut st = std::mem::take(&mut self.stages);
        let mut stage_in = vec![Complex64::default(); w.len()];
        self.rhs(w, &mut st[0]);
        for (i, s) in stage_in.iter_mut().enumerate() {
            *s = w[i] + 0.5 * dt * st[0][i];
        }
        self.rhs(&stage_in, &mut st[1]);
        for (i, s) in stage_in.iter_mut().enumerate() {
            *s = w[i] + 0.5 * dt * st[1][i];
        }
        self.rhs(&stage_in, &mut st[2]);
        for (i, s) in stage_in.iter_mut().enumerate() {
            *s = w[i] + dt * st[2][i];
        }
        self.rhs(&stage_in, &mut st[3]);
        for i in 0..w.len() {
            w[i] += dt / 6.0 * (st[0][i] + 2.0 * st[1][i] + 2.0 * st[2][i] + st[3][i]);
        }
        self.stages = st;
    }

    fn norm(&self) -> f64 {
        let nn = (self.n * self.n) as f64;
        nn * nn
    }

    pub fn enstrophy(&self, w: &[Complex64]) -> f64 {
        0.5 * w.iter().map(|c| c.norm_sqr()).sum::<f64>() / self.norm()
    }

    pub fn energy(&self, w: &[Complex64]) -> f64 {
        0.5 * w
            .iter()
            .zip(&self.k2)
            .filter(|(_, &k)| k > 0.0)
            .map(|(c, &k)| c.norm_sqr() / k)
            .sum::<f64>()
            / self.norm()
    }

    pub fn mean(&self, w: &[Complex64]) -> f64 {
        w[0].re / (self.n * self.n) as f64
    }

    fn record(&self, w: &[Complex64], d: &mut Diagnostics) {
        d.energy.push(self.energy(w));
        d.enstrophy.push(self.enstrophy(w));
        d.mean_vorticity.push(self.mean(w));
    }

    fn check_stable(&mut self, w: &[Complex64], step: usize) -> Result<()> {
        // Σ|ω̂| / n² bounds max |ω| from above; only inspect the grid when it trips.
        let bound = w.iter().map(|c| c.norm()).sum::<f64>() / (self.n * self.n) as f64;
        if bound.is_finite() && bound <= UNSTABLE_ABS {
            return Ok(());
        }
        let phys = self.to_physical(w);
        let max_abs = phys.iter().fold(0.0f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY });
        if max_abs > UNSTABLE_ABS {
            return Err(Error::Unstable { step, max_abs });
        }
        Ok(())
    }
}

/// Random real field whose spectrum occupies the shell `band.0 ≤ |k| ≤ band.1`,
/// scaled to the requested RMS.
pub fn random_initial_vorticity(n: usize, band: (usize, usize), amplitude: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (band.0 as i64, band.1 as i64);
    let mut field = vec![0.0; n * n];
    let tau = 2.0 * std::f64::consts::PI;
    for ky in -hi..=hi {
        for kx in 0..=hi {
            // one representative of each ±k pair
            if kx == 0 && ky <= 0 {
                continue;
            }
            let k2 = kx * kx + ky * ky;
            if k2 < lo * lo || k2 > hi * hi {
                continue;
            }
            let amp: f64 = rng.random_range(0.5..1.5);
            let phase: f64 = rng.random_range(0.0..tau);
            for y in 0..n {
                for x in 0..n {
                    let th = tau * (kx as f64 * x as f64 + ky as f64 * y as f64) / n as f64 + phase;
                    field[y * n + x] += amp * th.cos();
                }
            }
        }
    }
    let rms = (field.iter().map(|v| v * v).sum::<f64>() / field.len() as f64).sqrt();
    if rms > 0.0 {
        field.iter_mut().for_each(|v| *v *= amplitude / rms);
    }
    field
}

/// Evolve `w0` and return frames (T, 1, n, n) plus per-step diagnostics.
pub fn simulate_from(cfg: &NsConfig, w0: &[f64]) -> Result<(Tensor<f64>, Diagnostics)> {
    cfg.validate()?;
    let n = cfg.n;
    if w0.len() != n * n {
        return Err(Error::Shape(format!("initial field has {} values, grid needs {}", w0.len(), n * n)));
    }
    let mut solver = NsSolver::new(n, cfg.viscosity, cfg.dt)?;
    let mut w = solver.to_spectral(w0);
    let mut diag = Diagnostics::default();
    solver.record(&w, &mut diag);
    let mut data = Vec::with_capacity(cfg.frames * n * n);
    data.extend(solver.to_physical(&w));
    let mut step = 0;
    for _ in 1..cfg.frames {
        for _ in 0..cfg.steps_per_frame {
            solver.step(&mut w);
            step += 1;
            solver.check_stable(&w, step)?;
            solver.record(&w, &mut diag);
        }
        data.extend(solver.to_physical(&w));
    }
    Ok((Tensor::new(&[cfg.frames, 1, n, n], data)?, diag))
}

/// Simulate from the random initial condition drawn from `cfg.seed`.
pub fn simulate_navier_stokes(cfg: &NsConfig) -> Result<Tensor<f64>> {
    cfg.validate()?;
    let w0 = random_initial_vorticity(cfg.n, cfg.band, cfg.amplitude, cfg.seed);
    simulate_from(cfg, &w0).map(|(t, _)| t)
}
