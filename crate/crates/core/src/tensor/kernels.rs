//! Value kernels used by both the tape and detached evaluation.

use super::Tensor;
use crate::error::{Error, Result};

fn require_matrix(t: &Tensor, what: &str) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::dim(format!("{what} expects a matrix, got shape {:?}", t.shape())))
    }
}

/// Row-major `C = A·B` on raw slices, with arbitrary strides on the inputs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    // SAFETY: callers pass slices covering every index reachable through
    // the given dimensions and strides; `c` is a fresh m×n row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_matrix(a, "matmul")?;
    require_matrix(b, "matmul")?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let c = gemm(
        m,
        k,
        n,
        a.data(),
        (k as isize, 1),
        b.data(),
        (n as isize, 1),
    );
    Tensor::matrix(m, n, c)
}

pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    require_matrix(x, "add_bias")?;
    let n = x.cols();
    if bias.shape() != [n] {
        return Err(Error::dim(format!(
            "bias of shape {:?} does not match width of {:?}",
            bias.shape(),
            x.shape()
        )));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        for (v, b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn scale(x: &Tensor, s: f64) -> Tensor {
    x.map(|v| v * s)
}

/// Per-row log-softmax with max subtraction.
pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    require_matrix(x, "log_softmax_rows")?;
    if !x.all_finite() {
        return Err(Error::numeric("log_softmax_rows: non-finite input"));
    }
    let n = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(out)
}

/// Per-row softmax, derived from [`log_softmax_rows`].
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    Ok(log_softmax_rows(x)?.map(f64::exp))
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(x: &Tensor) -> Vec<usize> {
    (0..x.rows())
        .map(|i| {
            let row = x.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
