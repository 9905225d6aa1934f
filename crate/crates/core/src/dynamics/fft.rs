//! Two-dimensional complex FFT on square power-of-two grids.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub struct Fft2 {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
    transposed: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 || !n.is_power_of_two() {
            return Err(Error::Config(format!("grid size {n} is not a power of two")));
        }
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let len = forward.get_inplace_scratch_len().max(inverse.get_inplace_scratch_len());
        Ok(Self {
            n,
            forward,
            inverse,
            scratch: vec![Complex64::default(); len],
            transposed: vec![Complex64::default(); n * n],
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn both_axes(&mut self, data: &mut [Complex64], inverse: bool) {
        assert_eq!(data.len(), self.n * self.n, "fft buffer size");
        let plan = if inverse { &self.inverse } else { &self.forward };
        plan.process_with_scratch(data, &mut self.scratch);
        transpose(data, &mut self.transposed, self.n);
        plan.process_with_scratch(&mut self.transposed, &mut self.scratch);
        transpose(&self.transposed, data, self.n);
    }

    /// Unnormalized forward transform, row-major (y, x) layout.
    pub fn forward(&mut self, data: &mut [Complex64]) {
        self.both_axes(data, false);
    }

    /// Inverse transform including the 1/n² factor.
    pub fn inverse(&mut self, data: &mut [Complex64]) {
        self.both_axes(data, true);
        let s = 1.0 / (self.n * self.n) as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

fn transpose(src: &[Complex64], dst: &mut [Complex64], n: usize) {
    for y in 0..n {
        for x in 0..n {
            dst[x * n + y] = src[y * n + x];
        }
    }
}

/// Signed integer wavenumber of FFT bin `i` on an `n`-point grid.
pub fn wavenumber(i: usize, n: usize) -> i64 {
    if i < n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}
