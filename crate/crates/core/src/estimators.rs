//! IPW, pattern-mixture, doubly robust and multiply robust estimating equations.
//!
//! Every method reduces to `P_n ψ(β) = 0` for a per-row contribution `ψ_i`:
//!
//! * IPW: `1(R=1) U / Π_1`
//! * PM: `Σ_r I(R=r) E[U | L_(r), R=1]` (complete cases contribute `U`)
//! * DR: `1(R=1) U / Π_1 − 1(R=1) Σ_{r≠1} Odds_r E_r + Σ_{r≠1} I(R=r) E_r`
//! * MR: DR with pattern-specific regressions for `E_r`
//!
//! Under an exponential tilt `θ_r` the odds become `θ_r Odds_r` and the
//! conditional expectations are tilted accordingly; with no tilt every `θ_r`
//! is exactly 1 and the arithmetic is unchanged.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cc_law::CompleteCaseLaw;
use crate::data::{PatternMask, PatternedDataset};
use crate::error::{Error, Result};
use crate::estimand::EstimandSpec;
use crate::inference::{sandwich, wald_ci, BootstrapResult, SandwichParts, Z_975};
use crate::ldcm::{NonresponseFit, ResponseModel};
use crate::numeric::{jacobian_fd, max_abs, par_sum_rows, solve};
use crate::sensitivity::ExpTilt;

/// Residual max-norm required of every estimating-equation solve.
pub const SOLVE_TOL: f64 = 1e-10;
const SOLVE_MAX_ITER: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ipw,
    Pm,
    Dr,
    Mr,
    Mle,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ipw => "ipw",
            Method::Pm => "pm",
            Method::Dr => "dr",
            Method::Mr => "mr",
            Method::Mle => "mle",
        }
    }

    pub fn needs_response(&self) -> bool {
        matches!(self, Method::Ipw | Method::Dr | Method::Mr)
    }

    pub fn needs_law(&self) -> bool {
        matches!(self, Method::Pm | Method::Dr | Method::Mr)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ipw" => Ok(Method::Ipw),
            "pm" => Ok(Method::Pm),
            "dr" => Ok(Method::Dr),
            "mr" => Ok(Method::Mr),
            "mle" => Ok(Method::Mle),
            other => Err(Error::Invalid(format!("unknown method `{other}`"))),
        }
    }
}

/// Solver and model diagnostics attached to a report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub residual_norm: f64,
    pub models: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_condition: Option<f64>,
}

/// Point estimate with variance, Wald intervals and diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub method: Method,
    pub names: Vec<String>,
    pub beta_hat: Vec<f64>,
    /// Sandwich (or observed-information) variance of `β̂`.
    pub vcov: Option<Vec<Vec<f64>>>,
    pub se: Vec<f64>,
    /// 95% Wald intervals from `vcov`, or from the bootstrap SD when no `vcov`.
    pub ci: Vec<[f64; 2]>,
    pub diagnostics: Diagnostics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapResult>,
}

impl EstimateReport {
    pub fn new(
        method: Method,
        names: Vec<String>,
        beta_hat: &DVector<f64>,
        vcov: Option<&DMatrix<f64>>,
        diagnostics: Diagnostics,
    ) -> Result<Self> {
        let (se, ci) = match vcov {
            Some(v) => {
                let ci = wald_ci(beta_hat, v, 0.95)?;
                let se = (0..v.nrows()).map(|j| v[(j, j)].max(0.0).sqrt()).collect();
                (se, ci)
            }
            None => (vec![f64::NAN; beta_hat.len()], vec![[f64::NAN; 2]; beta_hat.len()]),
        };
        Ok(Self {
            method,
            names,
            beta_hat: beta_hat.iter().copied().collect(),
            vcov: vcov.map(|v| (0..v.nrows()).map(|i| v.row(i).iter().copied().collect()).collect()),
            se,
            ci,
            diagnostics,
            bootstrap: None,
        })
    }

    /// Attaches a bootstrap result; without a sandwich the intervals use its SD.
    pub fn with_bootstrap(mut self, boot: BootstrapResult) -> Self {
        if self.vcov.is_none() {
            self.se = boot.sd.clone();
            self.ci = self
                .beta_hat
                .iter()
                .zip(&boot.sd)
                .map(|(b, s)| [b - Z_975 * s, b + Z_975 * s])
                .collect();
        }
        self.bootstrap = Some(boot);
        self
    }

    pub fn beta(&self) -> DVector<f64> {
        DVector::from_vec(self.beta_hat.clone())
    }
}

/// The estimating equation of one method with its plugged-in nuisances.
#[derive(Clone)]
pub struct Equation<'a> {
    pub d: &'a PatternedDataset,
    pub method: Method,
    pub est: &'a EstimandSpec,
    pub response: Option<ResponseModel>,
    pub law: Option<CompleteCaseLaw>,
    pub tilt: Option<&'a ExpTilt>,
}

impl<'a> Equation<'a> {
    pub fn new(
        d: &'a PatternedDataset,
        method: Method,
        est: &'a EstimandSpec,
        fit: Option<&NonresponseFit>,
        law: Option<&CompleteCaseLaw>,
        tilt: Option<&'a ExpTilt>,
    ) -> Result<Self> {
        if method == Method::Mle {
            return Err(Error::Invalid(
                "the MLE is computed from the joint likelihood, not an estimating equation".into(),
            ));
        }
        if method.needs_response() && fit.is_none() {
            return Err(Error::Invalid(format!("nonresponse model required for {method}")));
        }
        if method.needs_law() && law.is_none() {
            return Err(Error::Invalid(format!("complete-case law required for {method}")));
        }
        if matches!(method, Method::Dr | Method::Mr) && !fit.is_some_and(|f| f.model().is_logit()) {
            return Err(Error::Unsupported(format!(
                "{method} requires the logit nonresponse model"
            )));
        }
        if method == Method::Mr && !law.is_some_and(CompleteCaseLaw::is_per_pattern) {
            return Err(Error::Invalid("mr requires a per_pattern_regression law".into()));
        }
        if method == Method::Dr && law.is_some_and(CompleteCaseLaw::is_per_pattern) {
            return Err(Error::Invalid(
                "dr requires a joint complete-case law; use mr with per-pattern regressions".into(),
            ));
        }
        if let Some(f) = fit {
            for p in d.patterns().iter().skip(1) {
                if !f.model().masks().contains(&p.mask) {
                    return Err(Error::Spec {
                        pattern: p.id.to_string(),
                        message: "pattern has no nonresponse model".into(),
                    });
                }
            }
        }
        Ok(Self {
            d,
            method,
            est,
            response: if method.needs_response() { fit.map(|f| f.model().clone()) } else { None },
            law: if method.needs_law() { law.cloned() } else { None },
            tilt,
        })
    }

    /// Tilt factors `θ_r` at a complete row, aligned with the response model's masks.
    fn thetas(&self, masks: &[PatternMask], full: &[f64]) -> Result<Vec<f64>> {
        masks
            .iter()
            .map(|m| match self.tilt {
                Some(t) => t.theta(m, full),
                None => Ok(1.0),
            })
            .collect()
    }

    fn row_contribution(
        &self,
        i: usize,
        beta: &DVector<f64>,
        response: Option<&ResponseModel>,
        engine: Option<&crate::cc_law::ExpectationEngine<'_>>,
    ) -> Result<DVector<f64>> {
        let d = self.d;
        let row = d.row(i);
        let p = self.est.dim();
        let complete = d.is_complete(i);
        match self.method {
            Method::Ipw => {
                if !complete {
                    return Ok(DVector::zeros(p));
                }
                let response = response.expect("checked");
                let full = d.full_row(i).expect("complete");
                let odds = response.odds_all(row)?;
                let th = self.thetas(&response.masks(), &full)?;
                let s: f64 = odds.iter().zip(&th).map(|(o, t)| t * o).sum();
                let w = 1.0 + s;
                if !w.is_finite() {
                    return Err(Error::NonFinite("inverse probability weight".into()));
                }
                Ok(self.est.value(&full, beta)? * w)
            }
            Method::Pm => {
                let engine = engine.expect("checked");
                engine.cond_expectation(d.mask_of_row(i), row)
            }
            Method::Dr | Method::Mr => {
                let engine = engine.expect("checked");
                if !complete {
                    return engine.cond_expectation(d.mask_of_row(i), row);
                }
                let response = response.expect("checked");
                let full = d.full_row(i).expect("complete");
                let masks = response.masks();
                let odds = response.odds_all(row)?;
                let th = self.thetas(&masks, &full)?;
                let s: f64 = odds.iter().zip(&th).map(|(o, t)| t * o).sum();
                let w = 1.0 + s;
                if !w.is_finite() {
                    return Err(Error::NonFinite("inverse probability weight".into()));
                }
                let mut v = self.est.value(&full, beta)? * w;
                for ((mask, o), t) in masks.iter().zip(&odds).zip(&th) {
                    let e = engine.cond_expectation(mask, row)?;
                    v.axpy(-(t * o), &e, 1.0);
                }
                Ok(v)
            }
            Method::Mle => unreachable!("rejected in Equation::new"),
        }
    }

    /// Per-row contributions `ψ_i(β)` as an `n × p` matrix.
    pub fn contributions(
        &self,
        beta: &DVector<f64>,
        response: Option<&ResponseModel>,
        law: Option<&CompleteCaseLaw>,
    ) -> Result<DMatrix<f64>> {
        let engine = law.map(|l| l.engine(self.est.estimand(), beta, self.tilt)).transpose()?;
        let rows = crate::numeric::par_map_rows(self.d.n(), |i| {
            self.row_contribution(i, beta, response, engine.as_ref())
        })?;
        let p = self.est.dim();
        Ok(DMatrix::from_fn(self.d.n(), p, |i, j| rows[i][j]))
    }

    /// `P_n ψ(β)` with the given nuisance models.
    pub fn mean_with(
        &self,
        beta: &DVector<f64>,
        response: Option<&ResponseModel>,
        law: Option<&CompleteCaseLaw>,
    ) -> Result<DVector<f64>> {
        let engine = law.map(|l| l.engine(self.est.estimand(), beta, self.tilt)).transpose()?;
        let s = par_sum_rows(self.d.n(), self.est.dim(), |i| {
            self.row_contribution(i, beta, response, engine.as_ref())
        })?;
        let m = s / self.d.n() as f64;
        if m.iter().all(|v| v.is_finite()) {
            Ok(m)
        } else {
            Err(Error::NonFinite(format!("{} estimating equation", self.method)))
        }
    }

    pub fn mean(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        self.mean_with(beta, self.response.as_ref(), self.law.as_ref())
    }

    fn model_labels(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(r) = &self.response {
            out.push(match r {
                ResponseModel::Logit(_) => "nonresponse:logit".to_string(),
                ResponseModel::General(g) => format!("nonresponse:{}", g.distribution().name()),
            });
        }
        if let Some(l) = &self.law {
            out.push(format!("law:{}", l.kind()));
        }
        if let Some(t) = self.tilt {
            out.push(format!("tilt:phi={}", t.phi));
        }
        out
    }
}

/// Complete-case solution of `Σ_{R=1} U(L; β) = 0`, used as a starting point.
pub fn complete_case_estimate(d: &PatternedDataset, est: &EstimandSpec) -> Result<DVector<f64>> {
    let rows: Vec<Vec<f64>> = d.complete_rows().iter().map(|&i| d.full_row(i).unwrap()).collect();
    let p = est.dim();
    let f = |beta: &DVector<f64>| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mut g = DVector::zeros(p);
        let mut h = DMatrix::zeros(p, p);
        for r in &rows {
            g += est.value(r, beta)?;
            h += est.jacobian(r, beta)?;
        }
        Ok((g / rows.len() as f64, h / rows.len() as f64))
    };
    let mut beta = DVector::zeros(p);
    for _ in 0..SOLVE_MAX_ITER {
        let (g, h) = f(&beta)?;
        if max_abs(&g) <= SOLVE_TOL {
            return Ok(beta);
        }
        let step = solve(&h, &(-&g), "complete-case estimating equation")?;
        let n0 = g.norm();
        let mut t = 1.0;
        let mut next = &beta + &step;
        while f(&next)?.0.norm() >= n0 && t > 1e-10 {
            t *= 0.5;
            next = &beta + &step * t;
        }
        beta = next;
    }
    let (g, _) = f(&beta)?;
    if max_abs(&g) <= 1e-8 {
        Ok(beta)
    } else {
        Err(Error::NoConvergence {
            context: "complete-case estimating equation".into(),
            iterations: SOLVE_MAX_ITER,
            residual: max_abs(&g),
        })
    }
}

/// Root of a mean estimating equation by damped Newton with a central-difference
/// Jacobian; scalar problems fall back to bracketing and bisection.
pub fn solve_equation<F>(g: F, start: DVector<f64>, context: &str) -> Result<(DVector<f64>, usize, f64)>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    match newton(&g, start.clone(), context) {
        Ok(r) => Ok(r),
        Err(e) if start.len() == 1 && !matches!(e, Error::NonFinite(_) | Error::Unsupported(_)) => {
            bisection(&g, start[0], context)
        }
        Err(e) => Err(e),
    }
}

fn newton<F>(g: &F, mut beta: DVector<f64>, context: &str) -> Result<(DVector<f64>, usize, f64)>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut val = g(&beta)?;
    let mut iterations = 0;
    while max_abs(&val) > SOLVE_TOL {
        if iterations >= SOLVE_MAX_ITER {
            return Err(Error::NoConvergence {
                context: context.to_string(),
                iterations,
                residual: max_abs(&val),
            });
        }
        let jac = jacobian_fd(g, &beta)?;
        let step = solve(&jac, &(-&val), context)?;
        let n0 = val.norm();
        let mut t = 1.0;
        let mut next = &beta + &step;
        let mut next_val = g(&next);
        let mut halvings = 0;
        while !matches!(&next_val, Ok(v) if v.norm() < n0) && halvings < 40 {
            t *= 0.5;
            next = &beta + &step * t;
            next_val = g(&next);
            halvings += 1;
        }
        let next_val = next_val?;
        if next_val.norm() >= n0 {
            return Err(Error::NoConvergence {
                context: format!("{context} (line search stalled)"),
                iterations,
                residual: max_abs(&val),
            });
        }
        beta = next;
        val = next_val;
        iterations += 1;
    }
    // one more full step drives the root well below the tolerance, so the
    // estimate does not depend on where the iterations happened to stop
    if let Ok(jac) = jacobian_fd(g, &beta) {
        if let Ok(step) = solve(&jac, &(-&val), context) {
            let polished = &beta + step;
            if let Ok(pv) = g(&polished) {
                if max_abs(&pv) <= max_abs(&val) {
                    beta = polished;
                    val = pv;
                }
            }
        }
    }
    let r = max_abs(&val);
    Ok((beta, iterations, r))
}

fn bisection<F>(g: &F, start: f64, context: &str) -> Result<(DVector<f64>, usize, f64)>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let eval = |b: f64| g(&DVector::from_element(1, b)).map(|v| v[0]);
    let f0 = eval(start)?;
    let mut width = 1.0 + start.abs();
    let mut bracket = None;
    for _ in 0..60 {
        for other in [start - width, start + width] {
            if let Ok(fo) = eval(other) {
                if fo.signum() != f0.signum() {
                    bracket = Some(if other < start { (other, start) } else { (start, other) });
                }
            }
        }
        if bracket.is_some() {
            break;
        }
        width *= 2.0;
    }
    let (mut lo, mut hi) = bracket.ok_or_else(|| Error::NoConvergence {
        context: format!("{context} (no sign change found)"),
        iterations: 0,
        residual: f0.abs(),
    })?;
    let mut flo = eval(lo)?;
    let mut iterations = 0;
    loop {
        let mid = 0.5 * (lo + hi);
        let fm = eval(mid)?;
        iterations += 1;
        if fm.abs() <= SOLVE_TOL {
            return Ok((DVector::from_element(1, mid), iterations, fm.abs()));
        }
        if hi - lo <= f64::EPSILON * (1.0 + mid.abs()) || iterations > 400 {
            return Err(Error::NoConvergence {
                context: context.to_string(),
                iterations,
                residual: fm.abs(),
            });
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
}

/// Point estimate only (no variance); used inside bootstrap replicates.
pub fn point_estimate(eq: &Equation<'_>) -> Result<(DVector<f64>, usize, f64)> {
    let start = complete_case_estimate(eq.d, eq.est)?;
    solve_equation(|b| eq.mean(b), start, &format!("{} estimating equation", eq.method))
}

/// Solves the equation and attaches the sandwich variance.
pub fn solve_with_sandwich(
    eq: &Equation<'_>,
    fit: Option<&NonresponseFit>,
) -> Result<(EstimateReport, SandwichParts)> {
    let (beta, iterations, residual) = point_estimate(eq)?;
    let alpha_if = if eq.method.needs_response() {
        fit.map(|f| f.influence().clone())
    } else {
        None
    };
    let (vcov, parts) = sandwich(eq, &beta, alpha_if.as_ref())?;
    let diagnostics = Diagnostics {
        iterations,
        residual_norm: residual,
        models: eq.model_labels(),
        gamma_condition: Some(parts.gamma_condition),
    };
    let report = EstimateReport::new(eq.method, eq.est.names(), &beta, Some(&vcov), diagnostics)?;
    Ok((report, parts))
}

pub fn solve_ipw(d: &PatternedDataset, fit: &NonresponseFit, est: &EstimandSpec) -> Result<EstimateReport> {
    let eq = Equation::new(d, Method::Ipw, est, Some(fit), None, None)?;
    Ok(solve_with_sandwich(&eq, Some(fit))?.0)
}

pub fn solve_pm(d: &PatternedDataset, law: &CompleteCaseLaw, est: &EstimandSpec) -> Result<EstimateReport> {
    let eq = Equation::new(d, Method::Pm, est, None, Some(law), None)?;
    Ok(solve_with_sandwich(&eq, None)?.0)
}

pub fn solve_dr(
    d: &PatternedDataset,
    fit: &NonresponseFit,
    law: &CompleteCaseLaw,
    est: &EstimandSpec,
) -> Result<EstimateReport> {
    let eq = Equation::new(d, Method::Dr, est, Some(fit), Some(law), None)?;
    Ok(solve_with_sandwich(&eq, Some(fit))?.0)
}

pub fn solve_mr(
    d: &PatternedDataset,
    fit: &NonresponseFit,
    per_pattern_law: &CompleteCaseLaw,
    est: &EstimandSpec,
) -> Result<EstimateReport> {
    let eq = Equation::new(d, Method::Mr, est, Some(fit), Some(per_pattern_law), None)?;
    Ok(solve_with_sandwich(&eq, Some(fit))?.0)
}
