//! Slice-level numeric kernels shared by the forward and backward passes.
//! Every reduction accumulates in `f64`.

use crate::scalar::Scalar;

/// `a[n×k] · b[k×m]`
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * m);
    let mut acc = vec![0f64; m];
    for i in 0..n {
        acc.iter_mut().for_each(|x| *x = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let av = av.to_f64_lossy();
            let brow = &b[p * m..(p + 1) * m];
            for (slot, &bv) in acc.iter_mut().zip(brow) {
                *slot += av * bv.to_f64_lossy();
            }
        }
        out.extend(acc.iter().map(|&x| T::from_f64_lossy(x)));
    }
    out
}

/// `a[n×k] · b[m×k]ᵀ`
pub(crate) fn matmul_bt<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out.push(T::from_f64_lossy(crate::scalar::dot_wide(arow, brow)));
        }
    }
    out
}

/// `a[n×k]ᵀ · b[n×m]`
pub(crate) fn matmul_at<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut acc = vec![0f64; k * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let av = av.to_f64_lossy();
            let slot = &mut acc[p * m..(p + 1) * m];
            for (s, &bv) in slot.iter_mut().zip(brow) {
                *s += av * bv.to_f64_lossy();
            }
        }
    }
    acc.into_iter().map(T::from_f64_lossy).collect()
}

pub(crate) fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Row-wise softmax with max subtraction. Columns flagged `false` in
/// `key_mask` receive probability exactly zero.
pub(crate) fn softmax_rows<T: Scalar>(
    x: &[T],
    rows: usize,
    cols: usize,
    key_mask: Option<&[bool]>,
) -> Vec<T> {
    let keep = |j: usize| key_mask.is_none_or(|m| m[j]);
    let mut out = vec![T::zero(); x.len()];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let max = (0..cols)
            .filter(|&j| keep(j))
            .map(|j| row[j].to_f64_lossy())
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut exps = vec![0f64; cols];
        let mut total = 0f64;
        for j in (0..cols).filter(|&j| keep(j)) {
            let e = (row[j].to_f64_lossy() - max).exp();
            exps[j] = e;
            total += e;
        }
        for j in 0..cols {
            out[i * cols + j] = T::from_f64_lossy(exps[j] / total);
        }
    }
    out
}

pub(crate) fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut dx = Vec::with_capacity(y.len());
    for i in 0..rows {
        let yr = &y[i * cols..(i + 1) * cols];
        let dyr = &dy[i * cols..(i + 1) * cols];
        let inner = crate::scalar::dot_wide(yr, dyr);
        dx.extend(
            yr.iter()
                .zip(dyr)
                .map(|(&yv, &g)| T::from_f64_lossy(yv.to_f64_lossy() * (g.to_f64_lossy() - inner))),
        );
    }
    dx
}

/// Per-row mean and inverse standard deviation.
pub(crate) fn row_moments<T: Scalar>(row: &[T], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = crate::scalar::sum_wide(row) / n;
    let var = row
        .iter()
        .map(|&x| {
            let d = x.to_f64_lossy() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn layer_norm_rows<T: Scalar>(x: &[T], rows: usize, cols: usize, eps: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let (mean, inv_std) = row_moments(row, eps);
        out.extend(
            row.iter()
                .map(|&v| T::from_f64_lossy((v.to_f64_lossy() - mean) * inv_std)),
        );
    }
    out
}

pub(crate) fn layer_norm_rows_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    rows: usize,
    cols: usize,
    eps: f64,
) -> Vec<T> {
    let n = cols as f64;
    let mut dx = Vec::with_capacity(x.len());
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let g = &dy[i * cols..(i + 1) * cols];
        let (mean, inv_std) = row_moments(row, eps);
        let xhat: Vec<f64> = row
            .iter()
            .map(|&v| (v.to_f64_lossy() - mean) * inv_std)
            .collect();
        let mean_g = crate::scalar::sum_wide(g) / n;
        let mean_gx = g
            .iter()
            .zip(&xhat)
            .map(|(&gv, &xh)| gv.to_f64_lossy() * xh)
            .sum::<f64>()
            / n;
        dx.extend(
            g.iter()
                .zip(&xhat)
                .map(|(&gv, &xh)| T::from_f64_lossy(inv_std * (gv.to_f64_lossy() - mean_g - xh * mean_gx))),
        );
    }
    dx
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}
