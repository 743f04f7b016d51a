//! Sandwich variance, nonparametric bootstrap and Wald intervals.
//!
//! The sandwich is reported on the scale of `Var(β̂)` itself:
//! `Γ̂^{-1} Ω̂ Γ̂^{-T} / n`, where `Γ̂ = ∂ P_n ψ / ∂β` and `Ω̂ = P_n φ φ'` with
//! `φ_i = ψ_i + D_α IF_α,i + D_η IF_η,i` adding the first-order effect of the
//! estimated nuisances. All derivatives are central finite differences.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::PatternedDataset;
use crate::error::{Error, Result};
use crate::estimators::Equation;
use crate::numeric::{condition_number, inverse, jacobian_fd, symmetrize};

/// `Φ^{-1}(0.975)`.
pub const Z_975: f64 = 1.959_963_984_540_054;

/// Largest tolerated share of failed bootstrap replicates.
pub const MAX_BOOT_FAILURE: f64 = 0.10;

/// Components of a sandwich computation.
#[derive(Clone, Debug)]
pub struct SandwichParts {
    pub gamma: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub d_alpha: Option<DMatrix<f64>>,
    pub d_eta: Option<DMatrix<f64>>,
    pub gamma_condition: f64,
    /// `max |A − A'| / max |A|` before symmetrization.
    pub asymmetry: f64,
}

/// Sandwich variance of the root `beta` of `eq`.
///
/// `alpha_influence` is the `n × dim α` influence matrix of the nonresponse
/// fit; the law's influence functions are taken from the law itself.
pub fn sandwich(
    eq: &Equation<'_>,
    beta: &DVector<f64>,
    alpha_influence: Option<&DMatrix<f64>>,
) -> Result<(DMatrix<f64>, SandwichParts)> {
    let d = eq.d;
    let n = d.n();
    let resp = eq.response.as_ref();
    let law = eq.law.as_ref();

    let gamma = jacobian_fd(|b| eq.mean_with(b, resp, law), beta)?;
    let gamma_condition = condition_number(&gamma);
    let gamma_inv = inverse(&gamma, "sandwich bread matrix")?;

    let mut phi = eq.contributions(beta, resp, law)?;

    let d_alpha = match (resp, alpha_influence) {
        (Some(r), _) if r.n_params() == 0 => None,
        (Some(r), Some(inf)) => {
            if inf.nrows() != n || inf.ncols() != r.n_params() {
                return Err(Error::Invalid(
                    "nonresponse influence functions do not match the data".into(),
                ));
            }
            let da = jacobian_fd(|a| eq.mean_with(beta, Some(&r.with_params(a)), law), &r.params())?;
            phi += inf * da.transpose();
            Some(da)
        }
        (Some(_), None) => {
            return Err(Error::Invalid(
                "nonresponse influence functions are required for the sandwich".into(),
            ))
        }
        _ => None,
    };

    let d_eta = match law {
        Some(l) if l.n_params(eq.est.estimand()) > 0 => {
            let est = eq.est.estimand();
            let inf = l.influence(d, est, beta)?;
            let de = jacobian_fd(|e| eq.mean_with(beta, resp, Some(&l.with_params(e))), &l.params(est))?;
            phi += inf * de.transpose();
            Some(de)
        }
        _ => None,
    };

    let omega = phi.transpose() * &phi / n as f64;
    let raw = &gamma_inv * &omega * gamma_inv.transpose() / n as f64;
    let scale = raw.amax();
    let asymmetry = if scale > 0.0 {
        (&raw - raw.transpose()).amax() / scale
    } else {
        0.0
    };
    let vcov = symmetrize(&raw);
    Ok((
        vcov,
        SandwichParts {
            gamma,
            omega,
            d_alpha,
            d_eta,
            gamma_condition,
            asymmetry,
        },
    ))
}

/// Wald intervals `β̂_j ± z · sqrt(V_jj)` at the given level.
pub fn wald_ci(beta: &DVector<f64>, vcov: &DMatrix<f64>, level: f64) -> Result<Vec<[f64; 2]>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Invalid(format!("confidence level {level} outside (0, 1)")));
    }
    let z = if level == 0.95 {
        Z_975
    } else {
        Normal::standard().inverse_cdf(1.0 - (1.0 - level) / 2.0)
    };
    (0..beta.len())
        .map(|j| {
            let v = vcov[(j, j)];
            if v < 0.0 {
                return Err(Error::Invalid(format!("negative variance {v} for coordinate {j}")));
            }
            let h = z * v.sqrt();
            Ok([beta[j] - h, beta[j] + h])
        })
        .collect()
}

/// Replicate estimates with summary statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub b: usize,
    pub failed: usize,
    pub seed: u64,
    /// Successful replicate estimates, in replicate order.
    pub replicates: Vec<Vec<f64>>,
    pub sd: Vec<f64>,
    /// 2.5% and 97.5% percentiles.
    pub percentile_ci: Vec<[f64; 2]>,
}

/// Row indices of bootstrap replicate `b`; a pure function of `(seed, b)`.
pub fn resample_indices(n: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Nonparametric case-resampling bootstrap of `estimate`.
///
/// Replicates run in parallel; each owns the RNG stream `(seed, b)`, so the
/// output does not depend on the number of worker threads. Failed replicates
/// are dropped and counted; more than 10% failures is an error.
pub fn bootstrap<F>(d: &PatternedDataset, b: usize, seed: u64, estimate: F) -> Result<BootstrapResult>
where
    F: Fn(&PatternedDataset) -> Result<DVector<f64>> + Sync,
{
    if b < 50 {
        return Err(Error::Invalid(format!("at least 50 bootstrap replicates required, got {b}")));
    }
    let outcomes: Vec<Option<Vec<f64>>> = (0..b)
        .into_par_iter()
        .map(|k| {
            let idx = resample_indices(d.n(), seed, k);
            d.resample(&idx)
                .and_then(|r| estimate(&r))
                .ok()
                .filter(|v| v.iter().all(|x| x.is_finite()))
                .map(|v| v.iter().copied().collect())
        })
        .collect();
    let failed = outcomes.iter().filter(|o| o.is_none()).count();
    if failed as f64 > MAX_BOOT_FAILURE * b as f64 {
        return Err(Error::TooManyFailures { failed, total: b });
    }
    let replicates: Vec<Vec<f64>> = outcomes.into_iter().flatten().collect();
    let p = replicates.first().map_or(0, Vec::len);
    let m = replicates.len() as f64;
    let mut sd = Vec::with_capacity(p);
    let mut percentile_ci = Vec::with_capacity(p);
    for j in 0..p {
        let col: Vec<f64> = replicates.iter().map(|r| r[j]).collect();
        let mean = col.iter().sum::<f64>() / m;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
        sd.push(var.sqrt());
        let mut sorted = col;
        sorted.sort_by(f64::total_cmp);
        percentile_ci.push([quantile(&sorted, 0.025), quantile(&sorted, 0.975)]);
    }
    Ok(BootstrapResult {
        b,
        failed,
        seed,
        replicates,
        sd,
        percentile_ci,
    })
}
