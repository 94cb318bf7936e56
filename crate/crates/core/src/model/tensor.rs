//! Row-major `f32` matrices and the row-wise kernels every forward path shares.
//!
//! All kernels work one output row at a time with a fixed accumulation order, so
//! a token's result does not depend on which other tokens share the batch. That
//! property is what makes batched prefill, incremental decode and hidden-state
//! restoration produce bit-identical KV entries.

use std::sync::atomic::{AtomicU64, Ordering};

use super::ModelError;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, ModelError> {
        if data.len() != rows * cols {
            return Err(ModelError::ShapeMismatch(format!(
                "{} elements for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Rows `[start, end)` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        max_abs_diff(&self.data, &other.data)
    }
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Dot product with eight fixed partial sums and a fixed reduction tree.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y = x · wᵀ + bias`, with `w` stored as `out × in`.
pub fn linear(x: &Matrix, w: &Matrix, bias: Option<&[f32]>) -> Result<Matrix, ModelError> {
    if x.cols != w.cols {
        return Err(ModelError::ShapeMismatch(format!(
            "linear: input width {} vs weight input width {}",
            x.cols, w.cols
        )));
    }
    if let Some(b) = bias {
        if b.len() != w.rows {
            return Err(ModelError::ShapeMismatch(format!(
                "linear: bias length {} vs output width {}",
                b.len(),
                w.rows
            )));
        }
    }
    let mut out = Matrix::zeros(x.rows, w.rows);
    for i in 0..x.rows {
        let xr = x.row(i);
        let yr = out.row_mut(i);
        for (o, y) in yr.iter_mut().enumerate() {
            *y = dot(xr, w.row(o));
        }
        if let Some(b) = bias {
            for (y, bb) in yr.iter_mut().zip(b) {
                *y += bb;
            }
        }
    }
    Ok(out)
}

/// Counts floating-point operations charged by the forward kernels.
///
/// A multiply-add is two operations. Norms, activations, rotary embedding,
/// softmax and residual adds are charged zero.
#[derive(Debug, Default)]
pub struct FlopCounter(AtomicU64);

impl FlopCounter {
    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) -> u64 {
        self.0.swap(0, Ordering::Relaxed)
    }
}

/// Operation counts charged by the kernels, exposed so the accounting can be
/// evaluated for shapes too large to execute.
pub mod flops {
    use crate::model::ModelConfig;

    pub fn linear(n: u64, d_in: u64, d_out: u64) -> u64 {
        2 * n * d_in * d_out
    }

    /// Attention core (scores and weighted values) for `n_q` queries over a
    /// context of `n_ctx` keys: the dense `n_q × n_ctx` block at `d_hidden`
    /// operations per entry.
    pub fn attention_core(n_q: u64, n_ctx: u64, d_hidden: u64) -> u64 {
        n_q * n_ctx * d_hidden
    }

    /// Hidden states to K and V for `n` tokens.
    pub fn projection(n: u64, cfg: &ModelConfig) -> u64 {
        let d = cfg.d_hidden as u64;
        2 * linear(n, d, d)
    }

    /// One full transformer layer for `n_q` new tokens whose context ends at `n_ctx`.
    pub fn layer(n_q: u64, n_ctx: u64, cfg: &ModelConfig) -> u64 {
        let d = cfg.d_hidden as u64;
        let f = cfg.d_ffn as u64;
        4 * linear(n_q, d, d) + linear(n_q, d, f) + linear(n_q, f, d) + attention_core(n_q, n_ctx, d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_on_odd_lengths() {
        for len in [1usize, 7, 8, 9, 31, 256] {
            let a: Vec<f32> = (0..len).map(|i| (i as f32 * 0.37).sin()).collect();
            let b: Vec<f32> = (0..len).map(|i| (i as f32 * 0.11).cos()).collect();
            let naive: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
            assert!((dot(&a, &b) as f64 - naive).abs() < 1e-4);
        }
    }

    #[test]
    fn linear_rows_are_batch_independent() {
        let x = Matrix::from_vec(3, 4, (0..12).map(|i| i as f32 * 0.1 - 0.5).collect()).unwrap();
        let w = Matrix::from_vec(2, 4, vec![0.3, -0.2, 0.9, 0.1, -0.7, 0.5, 0.2, 0.4]).unwrap();
        let full = linear(&x, &w, Some(&[0.5, -0.5])).unwrap();
        for i in 0..3 {
            let one = linear(&x.slice_rows(i, i + 1), &w, Some(&[0.5, -0.5])).unwrap();
            assert_eq!(one.row(0), full.row(i));
        }
    }

    #[test]
    fn linear_shape_errors() {
        let x = Matrix::zeros(2, 3);
        let w = Matrix::zeros(2, 4);
        assert!(linear(&x, &w, None).is_err());
        let w = Matrix::zeros(2, 3);
        assert!(linear(&x, &w, Some(&[0.0])).is_err());
    }
}
