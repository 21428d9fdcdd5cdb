//! Dense numeric primitives: affine layers, row softmax and multi-head
//! attention, each with a hand-derived backward pass.

mod matrix;
mod mha;

pub use matrix::{dot, l2_norm, Matrix};
pub use mha::{mha_backward, mha_forward, mha_forward_taped, MhaGrads, MhaOutput, MhaParams, MhaTape};

use crate::error::{Error, Result};

/// `x · w + b`, with `b` broadcast over rows.
pub fn linear(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if x.cols() != w.rows() {
        return Err(Error::dim("linear", format!("x {}", x.shape_str()), format!("w {}", w.shape_str())));
    }
    if b.len() != w.cols() {
        return Err(Error::dim("linear", format!("w {}", w.shape_str()), format!("b len {}", b.len())));
    }
    let mut out = x.matmul(w)?;
    for r in 0..out.rows() {
        for (o, bias) in out.row_mut(r).iter_mut().zip(b) {
            *o += bias;
        }
    }
    Ok(out)
}

/// Gradients of [`linear`] given the upstream gradient `d_out`.
/// Returns `(d_x, d_w, d_b)`.
pub fn linear_backward(x: &Matrix, w: &Matrix, d_out: &Matrix) -> Result<(Matrix, Matrix, Vec<f64>)> {
    let d_x = d_out.matmul_t(w)?;
    let d_w = x.t_matmul(d_out)?;
    Ok((d_x, d_w, d_out.col_sums()))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Backward of [`softmax_rows`] from its output `y` and upstream `d_y`.
pub fn softmax_rows_backward(y: &Matrix, d_y: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let gr = d_y.row(r);
        let inner = dot(yr, gr);
        for ((o, &yv), &gv) in out.row_mut(r).iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - inner);
        }
    }
    out
}
