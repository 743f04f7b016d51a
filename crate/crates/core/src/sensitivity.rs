//! Sensitivity analysis for departures from the complete-case missing value
//! restriction.
//!
//! Pattern `r` receives a selection-bias factor
//! `θ_r(L) = exp(φ · t_r(L_(−r)))` on the odds against the complete case:
//! `Π_r / Π_1 = θ_r Odds_r`. At `φ = 0` every factor is exactly 1 and the
//! ordinary estimators are recovered. Then
//! `Π_1* = {1 + Σ_r θ_r Π_r/Π_1}^{-1}` and `Π_r* = θ_r (Π_r/Π_1) Π_1*`, and
//! the conditional law of the missing values under pattern `r` is the
//! complete-case law tilted by `θ_r`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cc_law::CompleteCaseLaw;
use crate::data::{PatternMask, PatternedDataset};
use crate::design::Design;
use crate::error::{Error, Result};
use crate::estimand::EstimandSpec;
use crate::estimators::{solve_with_sandwich, EstimateReport, Equation, Method};
use crate::ldcm::{
    fit_pairwise_logistic, NonresponseFit, OddsEntry, OddsModel, OddsModelSpec, PatternFitInfo, ResponseModel,
};
use crate::numeric::{expit, inverse, max_abs, solve};

/// Exponential tilt at a fixed `φ`: `θ_r = exp(φ · Σ_k t_rk(L))` where
/// `t_rk` are the columns of pattern `r`'s feature design. Patterns without a
/// feature have `θ_r ≡ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpTilt {
    pub phi: f64,
    pub features: Vec<(PatternMask, Design)>,
}

impl ExpTilt {
    pub fn new(phi: f64, features: Vec<(PatternMask, Design)>) -> Result<Self> {
        for (mask, design) in &features {
            if let Some(j) = design.variables().into_iter().find(|&j| mask.is_observed(j)) {
                return Err(Error::Spec {
                    pattern: mask.to_string(),
                    message: format!(
                        "tilt feature uses variable #{} which is observed under this pattern; tilts act on missing values",
                        j + 1
                    ),
                });
            }
        }
        Ok(Self { phi, features })
    }

    /// The null tilt (`θ ≡ 1`).
    pub fn null() -> Self {
        Self {
            phi: 0.0,
            features: Vec::new(),
        }
    }

    pub fn is_null(&self) -> bool {
        self.phi == 0.0 || self.features.is_empty()
    }

    pub fn feature(&self, mask: &PatternMask) -> Option<&Design> {
        self.features.iter().find(|(m, _)| m == mask).map(|(_, d)| d)
    }

    /// `θ_r` at a fully specified row.
    pub fn theta(&self, mask: &PatternMask, row: &[f64]) -> Result<f64> {
        match self.feature(mask) {
            None => Ok(1.0),
            Some(t) => {
                let v = (self.phi * t.eval_full(row)?.sum()).exp();
                if v.is_finite() && v > 0.0 {
                    Ok(v)
                } else {
                    Err(Error::NonFinite(format!("selection-bias factor of pattern {mask}")))
                }
            }
        }
    }

    pub fn at(&self, phi: f64) -> Self {
        Self {
            phi,
            features: self.features.clone(),
        }
    }
}

/// Tilt features plus the grid of `φ` values to sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionBiasSpec {
    pub features: Vec<(PatternMask, Design)>,
    pub grid: Vec<f64>,
}

/// Parses `"r=2: phi*Y"` (or `"mask=10: phi*Y"`); terms after `phi*` may be
/// joined with `+` and use the usual term syntax.
pub fn parse_tilt(d: &PatternedDataset, text: &str) -> Result<(PatternMask, Design)> {
    let bad = |m: &str| Error::Invalid(format!("tilt `{text}`: {m}"));
    let (lhs, rhs) = text.split_once(':').ok_or_else(|| bad("expected `r=ID: phi*TERM`"))?;
    let (key, value) = lhs.split_once('=').ok_or_else(|| bad("expected `r=ID` before the colon"))?;
    let mask = match key.trim() {
        "r" => {
            let id: usize = value.trim().parse().map_err(|_| bad("pattern id must be an integer"))?;
            d.pattern(id)
                .ok_or_else(|| bad("no such pattern in the data"))?
                .mask
                .clone()
        }
        "mask" => PatternMask::parse(value.trim())?,
        _ => return Err(bad("left-hand side must be `r=ID` or `mask=BITS`")),
    };
    if mask.is_complete() {
        return Err(bad("the complete-case pattern cannot be tilted"));
    }
    let body = rhs.trim();
    let terms = body
        .strip_prefix("phi*")
        .or_else(|| body.strip_prefix("phi *"))
        .ok_or_else(|| bad("right-hand side must start with `phi*`"))?;
    let terms = terms.trim().trim_start_matches('(').trim_end_matches(')');
    let list: Vec<&str> = terms.split('+').map(str::trim).collect();
    let design = Design::parse(d.schema(), &list)?;
    if design.has_intercept() {
        return Err(bad("an intercept in the tilt is not identified separately from the odds"));
    }
    ExpTilt::new(0.0, vec![(mask.clone(), design.clone())])?;
    Ok((mask, design))
}

/// Parses `start:stop:step` (inclusive) or a comma-separated list.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::Invalid(format!("grid `{text}` must be start:stop:step or a comma list"));
    let parts: Vec<&str> = text.split(':').collect();
    let grid = if parts.len() == 3 {
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        let (a, b, s) = (nums[0], nums[1], nums[2]);
        if !(s > 0.0) || b < a {
            return Err(bad());
        }
        let k = ((b - a) / s + 1e-9).floor() as usize;
        (0..=k).map(|i| a + i as f64 * s).map(|v| if v.abs() < 1e-12 { 0.0 } else { v }).collect()
    } else {
        text.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?
    };
    if grid.is_empty() {
        return Err(bad());
    }
    Ok(grid)
}

const THETA_TOL: f64 = 1e-10;

/// Solves the tilted moments
/// `P_n G_r [1{R=r} − 1{R=1} θ_r Odds_r] = 0` per pattern with
/// `G_r = q_r / (1 + Odds_r)`, starting from the pairwise logistic fit.
///
/// At `θ ≡ 1` these moments coincide with the pairwise logistic scores, so the
/// starting point is already the root and is returned unchanged.
pub fn fit_alpha_theta(d: &PatternedDataset, spec: &OddsModelSpec, tilt: &ExpTilt) -> Result<NonresponseFit> {
    let base = fit_pairwise_logistic(d, spec)?;
    refit_alpha_theta(d, &base, tilt)
}

/// Same as [`fit_alpha_theta`] from an existing pairwise fit.
pub fn refit_alpha_theta(d: &PatternedDataset, base: &NonresponseFit, tilt: &ExpTilt) -> Result<NonresponseFit> {
    let model = base.model().as_logit().ok_or_else(|| {
        Error::Unsupported("sensitivity analysis requires the logit nonresponse model".into())
    })?;
    let n = d.n();
    let nf = n as f64;
    let dim = model.n_params();
    let mut influence = DMatrix::zeros(n, dim);
    let mut entries = Vec::new();
    let mut diagnostics = Vec::new();
    let mut offset = 0;
    for e in model.entries() {
        let rows: Vec<usize> = (0..n)
            .filter(|&i| d.is_complete(i) || d.mask_of_row(i) == &e.mask)
            .collect();
        let p = e.coef.len();
        let mut q = DMatrix::zeros(rows.len(), p);
        let mut is_r = Vec::with_capacity(rows.len());
        let mut theta = Vec::with_capacity(rows.len());
        for (k, &i) in rows.iter().enumerate() {
            q.row_mut(k).copy_from(&e.design.eval(d.row(i))?.transpose());
            let complete = d.is_complete(i);
            is_r.push(!complete);
            theta.push(if complete {
                tilt.theta(&e.mask, &d.full_row(i).unwrap())?
            } else {
                1.0
            });
        }
        let row_moment = |k: usize, a: &DVector<f64>| -> DVector<f64> {
            let qk = q.row(k).transpose();
            let eta = qk.dot(a);
            let c = if is_r[k] { expit(-eta) } else { -theta[k] * expit(eta) };
            qk * c
        };
        let moments = |a: &DVector<f64>| -> Result<DVector<f64>> {
            let mut m = DVector::zeros(p);
            for k in 0..rows.len() {
                m += row_moment(k, a);
            }
            let m = m / nf;
            if m.iter().all(|v| v.is_finite()) {
                Ok(m)
            } else {
                Err(Error::NonFinite(format!("tilted moments of pattern {}", e.mask)))
            }
        };
        let jac = |a: &DVector<f64>| -> DMatrix<f64> {
            let mut j = DMatrix::zeros(p, p);
            for k in 0..rows.len() {
                let qk = q.row(k).transpose();
                let eta = qk.dot(a);
                let w = expit(eta) * expit(-eta) * if is_r[k] { 1.0 } else { theta[k] };
                j.ger(-w, &qk, &qk, 1.0);
            }
            j / nf
        };

        let mut a = e.coef.clone();
        let mut m = moments(&a)?;
        let mut iterations = 0;
        let context = format!("tilted odds fit of pattern {}", e.mask);
        while max_abs(&m) > THETA_TOL {
            if iterations >= 100 {
                return Err(Error::NoConvergence {
                    context,
                    iterations,
                    residual: max_abs(&m),
                });
            }
            let step = solve(&jac(&a), &(-&m), &context)?;
            let n0 = m.norm();
            let mut t = 1.0;
            let mut next = &a + &step;
            let mut mn = moments(&next);
            let mut halvings = 0;
            while !matches!(&mn, Ok(v) if v.norm() < n0) && halvings < 40 {
                t *= 0.5;
                next = &a + &step * t;
                mn = moments(&next);
                halvings += 1;
            }
            let mn = mn?;
            if mn.norm() >= n0 {
                return Err(Error::NoConvergence {
                    context,
                    iterations,
                    residual: max_abs(&m),
                });
            }
            a = next;
            m = mn;
            iterations += 1;
        }
        let jinv = inverse(&jac(&a), &context)?;
        for (k, &i) in rows.iter().enumerate() {
            let inf = -(&jinv * row_moment(k, &a));
            for j in 0..p {
                influence[(i, offset + j)] = inf[j];
            }
        }
        offset += p;
        diagnostics.push(PatternFitInfo {
            mask: e.mask.to_string(),
            iterations,
            gradient_norm: max_abs(&m),
            terms: e.design.names().to_vec(),
            estimates: a.iter().copied().collect(),
        });
        entries.push(OddsEntry {
            mask: e.mask.clone(),
            design: e.design.clone(),
            coef: a,
        });
    }
    Ok(NonresponseFit::new(
        ResponseModel::Logit(OddsModel::new(entries)?),
        diagnostics,
        influence,
    ))
}

fn sens_estimate(
    d: &PatternedDataset,
    method: Method,
    fit_theta: &NonresponseFit,
    law: Option<&CompleteCaseLaw>,
    est: &EstimandSpec,
    tilt: &ExpTilt,
) -> Result<EstimateReport> {
    if !matches!(method, Method::Ipw | Method::Pm | Method::Dr) {
        return Err(Error::Invalid(format!(
            "sensitivity analysis supports ipw, pm and dr, not {method}"
        )));
    }
    let eq = Equation::new(d, method, est, Some(fit_theta), law, Some(tilt))?;
    Ok(solve_with_sandwich(&eq, Some(fit_theta))?.0)
}

/// IPW with `Π_1` replaced by `Π_1*`; `fit_theta` comes from [`fit_alpha_theta`].
pub fn ipw_sens(
    d: &PatternedDataset,
    fit_theta: &NonresponseFit,
    est: &EstimandSpec,
    tilt: &ExpTilt,
) -> Result<EstimateReport> {
    sens_estimate(d, Method::Ipw, fit_theta, None, est, tilt)
}

/// Pattern-mixture estimator with tilted conditional expectations.
pub fn pm_sens(
    d: &PatternedDataset,
    law: &CompleteCaseLaw,
    est: &EstimandSpec,
    tilt: &ExpTilt,
) -> Result<EstimateReport> {
    let eq = Equation::new(d, Method::Pm, est, None, Some(law), Some(tilt))?;
    Ok(solve_with_sandwich(&eq, None)?.0)
}

/// Doubly robust estimator with `Π_1*`, `Π_r*` and tilted expectations.
pub fn dr_sens(
    d: &PatternedDataset,
    fit_theta: &NonresponseFit,
    law: &CompleteCaseLaw,
    est: &EstimandSpec,
    tilt: &ExpTilt,
) -> Result<EstimateReport> {
    sens_estimate(d, Method::Dr, fit_theta, Some(law), est, tilt)
}

/// `Π_1*` and `(Π_r*)_r` at a complete row.
pub fn tilted_probabilities(model: &OddsModel, tilt: &ExpTilt, row: &[f64]) -> Result<(f64, Vec<f64>)> {
    let opt: Vec<Option<f64>> = row.iter().map(|v| Some(*v)).collect();
    let odds = model.odds_all(&opt)?;
    let ratios: Vec<f64> = model
        .masks()
        .iter()
        .zip(&odds)
        .map(|(m, o)| tilt.theta(m, row).map(|t| t * o))
        .collect::<Result<_>>()?;
    let pi1 = 1.0 / (1.0 + ratios.iter().sum::<f64>());
    Ok((pi1, ratios.iter().map(|r| r * pi1).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodFailure {
    pub method: Method,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub phi: f64,
    pub reports: Vec<EstimateReport>,
    pub failures: Vec<MethodFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCurve {
    pub points: Vec<SensitivityPoint>,
}

impl SensitivityCurve {
    /// `(φ, β̂_j)` pairs for one method, skipping failed points.
    pub fn series(&self, method: Method, coord: usize) -> Vec<(f64, f64)> {
        self.points
            .iter()
            .filter_map(|p| {
                p.reports
                    .iter()
                    .find(|r| r.method == method)
                    .map(|r| (p.phi, r.beta_hat[coord]))
            })
            .collect()
    }
}

/// Evaluates every requested method at every grid point.
///
/// Grid points are independent and run in parallel, each starting from the
/// pairwise logistic fit; failures at a point are recorded, not fatal.
pub fn sweep(
    d: &PatternedDataset,
    methods: &[Method],
    spec: &SelectionBiasSpec,
    odds: &OddsModelSpec,
    law: Option<&CompleteCaseLaw>,
    est: &EstimandSpec,
) -> Result<SensitivityCurve> {
    if spec.grid.is_empty() {
        return Err(Error::Invalid("sensitivity grid is empty".into()));
    }
    if !spec.grid.contains(&0.0) {
        return Err(Error::Invalid("sensitivity grid must contain 0".into()));
    }
    let base_tilt = ExpTilt::new(0.0, spec.features.clone())?;
    let base = fit_pairwise_logistic(d, odds)?;
    let points = spec
        .grid
        .par_iter()
        .map(|&phi| {
            let tilt = base_tilt.at(phi);
            let mut reports = Vec::new();
            let mut failures = Vec::new();
            let fit = refit_alpha_theta(d, &base, &tilt);
            for &m in methods {
                let res = match (&fit, m) {
                    (_, Method::Pm) => match law {
                        Some(l) => pm_sens(d, l, est, &tilt),
                        None => Err(Error::Invalid("complete-case law required for pm".into())),
                    },
                    (Ok(f), Method::Ipw) => ipw_sens(d, f, est, &tilt),
                    (Ok(f), Method::Dr) => match law {
                        Some(l) => dr_sens(d, f, l, est, &tilt),
                        None => Err(Error::Invalid("complete-case law required for dr".into())),
                    },
                    (Ok(_), other) => Err(Error::Invalid(format!(
                        "sensitivity analysis supports ipw, pm and dr, not {other}"
                    ))),
                    (Err(e), _) => Err(Error::Invalid(format!("tilted odds fit failed: {e}"))),
                };
                match res {
                    Ok(r) => reports.push(r),
                    Err(e) => failures.push(MethodFailure {
                        method: m,
                        error: e.to_string(),
                    }),
                }
            }
            SensitivityPoint { phi, reports, failures }
        })
        .collect();
    Ok(SensitivityCurve { points })
}
