//! Unitary 2-D DFT, centered by default.
//!
//! Index `n / 2` is the zero coordinate on both sides of the transform:
//! `F[k] = N^{-1/2} Σ_i f[i] exp(-2πj (i - c)(k - c) / N)` per axis. That is
//! `fftshift(fft(ifftshift(f)))` with orthonormal scaling, so the inverse is
//! also the adjoint.

use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub struct Fft2 {
    centered: bool,
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish()
    }
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self::build(rows, cols, true)
    }

    /// Same transform without the centering shifts (index 0 is the origin).
    pub fn uncentered(rows: usize, cols: usize) -> Self {
        Self::build(rows, cols, false)
    }

    fn build(rows: usize, cols: usize, centered: bool) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            centered,
            rows,
            cols,
            row_fwd: planner.plan_fft_forward(cols),
            row_inv: planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn forward(&self, input: &Array2<Complex64>) -> Array2<Complex64> {
        self.transform(input, false)
    }

    /// Inverse transform; equal to the adjoint of [`forward`](Self::forward).
    pub fn inverse(&self, input: &Array2<Complex64>) -> Array2<Complex64> {
        self.transform(input, true)
    }

    fn transform(&self, input: &Array2<Complex64>, inverse: bool) -> Array2<Complex64> {
        let (rows, cols) = (self.rows, self.cols);
        assert_eq!(input.dim(), (rows, cols), "transform size mismatch");
        let (cr, cc) = if self.centered {
            (rows / 2, cols / 2)
        } else {
            (0, 0)
        };
        let (row_fft, col_fft) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };

        // ifftshift into a contiguous row-major buffer.
        let mut buf = vec![Complex64::new(0.0, 0.0); rows * cols];
        for r in 0..rows {
            let src = (r + cr) % rows;
            let dst_row = &mut buf[r * cols..(r + 1) * cols];
            for (c, slot) in dst_row.iter_mut().enumerate() {
                *slot = input[[src, (c + cc) % cols]];
            }
        }

        let mut scratch = vec![
            Complex64::new(0.0, 0.0);
            row_fft
                .get_inplace_scratch_len()
                .max(col_fft.get_inplace_scratch_len())
        ];
        row_fft.process_with_scratch(&mut buf, &mut scratch);

        let mut transposed = vec![Complex64::new(0.0, 0.0); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                transposed[c * rows + r] = buf[r * cols + c];
            }
        }
        col_fft.process_with_scratch(&mut transposed, &mut scratch);

        let scale = 1.0 / ((rows * cols) as f64).sqrt();
        let mut out = Array2::<Complex64>::zeros((rows, cols));
        for c in 0..cols {
            let dst_c = (c + cc) % cols;
            for r in 0..rows {
                out[[(r + cr) % rows, dst_c]] = transposed[c * rows + r] * scale;
            }
        }
        out
    }
}
