//! Bounds-checked dense matrix product over row-major slices.

use crate::tensor::Scalar;

/// A row-major m×n view, optionally read transposed.
#[derive(Debug, Clone, Copy)]
pub(crate) struct View {
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl View {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Logical (rows, cols) after the optional transpose.
    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c ← a·b + beta·c` where `c` is a plain row-major m×n buffer.
pub(crate) fn matmul<T: Scalar>(a: &[T], av: View, b: &[T], bv: View, c: &mut [T], beta: T) {
    let (m, k) = av.dims();
    let (k2, n) = bv.dims();
    assert_eq!(k, k2, "inner dimensions differ");
    assert!(a.len() >= av.rows * av.cols && b.len() >= bv.rows * bv.cols && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = av.strides();
    let (rsb, csb) = bv.strides();
    // SAFETY: lengths checked above cover every strided index.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}
