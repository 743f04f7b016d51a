//! Small dense linear-algebra and differentiation helpers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot threshold below which a matrix is treated as singular.
const SINGULAR_RCOND: f64 = 1e-13;

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Ratio of the largest to the smallest singular value.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn check_conditioning(a: &DMatrix<f64>, context: &str) -> Result<()> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(context.to_string()));
    }
    if a.nrows() > 0 && condition_number(a) * SINGULAR_RCOND > 1.0 {
        return Err(Error::Singular {
            context: context.to_string(),
        });
    }
    Ok(())
}

/// Solves `a x = b`, rejecting numerically singular `a`.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    check_conditioning(a, context)?;
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Singular {
            context: context.to_string(),
        })
}

pub fn inverse(a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    check_conditioning(a, context)?;
    a.clone().try_inverse().ok_or_else(|| Error::Singular {
        context: context.to_string(),
    })
}

/// Step used for central differences around `x`.
pub fn fd_step(x: f64) -> f64 {
    1e-6 * (1.0 + x.abs())
}

/// Central-difference Jacobian of `f` at `x`; column `j` is `∂f/∂x_j`.
pub fn jacobian_fd<F>(f: F, x: &DVector<f64>) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut cols = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        let h = fd_step(x[j]);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let fp = f(&xp)?;
        let fm = f(&xm)?;
        cols.push((fp - fm) / (2.0 * h));
    }
    if cols.is_empty() {
        return Ok(DMatrix::zeros(0, 0));
    }
    let m = cols[0].len();
    Ok(DMatrix::from_fn(m, x.len(), |i, j| cols[j][i]))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Row-wise mean of an `n × p` matrix as a `p`-vector, summed in row order.
pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows().max(1) as f64;
    DVector::from_fn(m.ncols(), |j, _| m.column(j).iter().sum::<f64>() / n)
}

/// Rows per block in [`par_sum_rows`]; fixed so results do not depend on thread count.
const SUM_BLOCK: usize = 512;

/// `Σ_i f(i)` over `0..n`, evaluated in parallel over fixed blocks and
/// reduced in block order, so the floating-point result is reproducible.
pub fn par_sum_rows<F>(n: usize, dim: usize, f: F) -> Result<DVector<f64>>
where
    F: Fn(usize) -> Result<DVector<f64>> + Sync,
{
    use rayon::prelude::*;
    let blocks: Vec<Result<DVector<f64>>> = (0..n.div_ceil(SUM_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut acc = DVector::zeros(dim);
            for i in b * SUM_BLOCK..((b + 1) * SUM_BLOCK).min(n) {
                acc += f(i)?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = DVector::zeros(dim);
    for b in blocks {
        total += b?;
    }
    Ok(total)
}

/// Evaluates `f` at every row in parallel, keeping row order.
pub fn par_map_rows<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(|i| f(i)).collect()
}

/// `log(1 + exp(x))` without overflow.
pub fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
