//! Joint law of `(R, L)` on a finite support.
//!
//! Combining a complete-case law `f(l | R=1; η)` with the odds models gives
//!
//! ```text
//! f(r, l) = Odds_r(l_(r); α_r) f(l | R=1; η) / Z,   Odds_1 ≡ 1,
//! Z       = Σ_l f(l | R=1) {1 + Σ_{r≠1} Odds_r(l_(r))}.
//! ```
//!
//! Only the observed-data marginals `(r, l_(r))` enter the likelihood; missing
//! coordinates are summed out cell by cell.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cc_law::DiscreteLaw;
use crate::data::{PatternMask, PatternedDataset};
use crate::design::Design;
use crate::error::{Error, Result};
use crate::estimand::EstimandSpec;
use crate::estimators::{complete_case_estimate, solve_equation, Diagnostics, EstimateReport, Method};
use crate::ldcm::{fit_pairwise_logistic, OddsModel, OddsModelSpec, ResponseModel};
use crate::numeric::{fd_step, inverse, jacobian_fd, max_abs, solve, symmetrize};

/// Gradient tolerance of the likelihood maximization.
pub const MLE_GRAD_TOL: f64 = 1e-6;

/// Odds models plus a discrete complete-case law, with cached normalizer.
#[derive(Clone, Debug)]
pub struct JointLawModel {
    odds: OddsModel,
    law: DiscreteLaw,
    /// `Odds_r` at every cell, `[cell][entry]`.
    cell_odds: Vec<Vec<f64>>,
    normalizer: f64,
}

fn as_option(cell: &[f64]) -> Vec<Option<f64>> {
    cell.iter().map(|v| Some(*v)).collect()
}

impl JointLawModel {
    pub fn new(odds: OddsModel, law: DiscreteLaw) -> Result<Self> {
        let mut cell_odds = Vec::with_capacity(law.cells().len());
        let mut z = 0.0;
        for (cell, &p) in law.cells().iter().zip(law.probabilities()) {
            let o = odds.odds_all(&as_option(cell))?;
            z += p * (1.0 + o.iter().sum::<f64>());
            cell_odds.push(o);
        }
        if !(z.is_finite() && z > 0.0) {
            return Err(Error::NonFinite("joint-law normalizer".into()));
        }
        Ok(Self {
            odds,
            law,
            cell_odds,
            normalizer: z,
        })
    }

    pub fn odds(&self) -> &OddsModel {
        &self.odds
    }

    pub fn law(&self) -> &DiscreteLaw {
        &self.law
    }

    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    pub fn cells(&self) -> &[Vec<f64>] {
        self.law.cells()
    }

    /// Pattern masks with the complete pattern first.
    pub fn masks(&self) -> Vec<PatternMask> {
        let mut out = vec![PatternMask::complete(self.law.levels().len())];
        out.extend(self.odds.masks());
        out
    }

    fn entry_index(&self, mask: &PatternMask) -> Result<Option<usize>> {
        if mask.is_complete() {
            return Ok(None);
        }
        self.odds
            .masks()
            .iter()
            .position(|m| m == mask)
            .map(Some)
            .ok_or_else(|| Error::Spec {
                pattern: mask.to_string(),
                message: "pattern has no odds model in the joint law".into(),
            })
    }

    fn density_at(&self, entry: Option<usize>, k: usize) -> f64 {
        let o = entry.map_or(1.0, |e| self.cell_odds[k][e]);
        o * self.law.probabilities()[k] / self.normalizer
    }

    /// `f(R = r, L = l)`.
    pub fn joint_density(&self, mask: &PatternMask, cell: &[f64]) -> Result<f64> {
        let entry = self.entry_index(mask)?;
        let k = self
            .law
            .cell_index(cell)
            .ok_or_else(|| Error::Invalid("cell outside the support of the law".into()))?;
        Ok(self.density_at(entry, k))
    }

    /// `f(l) = Σ_r f(r, l)`.
    pub fn full_data_density(&self, cell: &[f64]) -> Result<f64> {
        let k = self
            .law
            .cell_index(cell)
            .ok_or_else(|| Error::Invalid("cell outside the support of the law".into()))?;
        Ok(self.law.probabilities()[k] * (1.0 + self.cell_odds[k].iter().sum::<f64>()) / self.normalizer)
    }

    /// `Σ_{l_(−r)} f(r, l)` for observed values `row` (missing entries ignored).
    pub fn observed_mass(&self, mask: &PatternMask, row: &[Option<f64>]) -> Result<f64> {
        let entry = self.entry_index(mask)?;
        let observed = mask.observed();
        let mut total = 0.0;
        for (k, cell) in self.law.cells().iter().enumerate() {
            if observed.iter().all(|&j| row[j] == Some(cell[j])) {
                total += self.density_at(entry, k);
            }
        }
        Ok(total)
    }

    /// Mean observed-data log-likelihood over the rows of `d`.
    pub fn observed_loglik(&self, d: &PatternedDataset) -> Result<f64> {
        let groups = observed_groups(d);
        self.grouped_loglik(&groups, d.n())
    }

    fn grouped_loglik(&self, groups: &ObservedGroups, n: usize) -> Result<f64> {
        let mut total = 0.0;
        for ((bits, values), &count) in groups {
            let mask = PatternMask::new(bits.clone());
            let row: Vec<Option<f64>> = values.iter().map(|v| v.map(f64::from_bits)).collect();
            let m = self.observed_mass(&mask, &row)?;
            if !(m > 0.0) {
                return Err(Error::NonFinite(format!(
                    "observed-data probability of pattern {mask} is zero"
                )));
            }
            total += count as f64 * m.ln();
        }
        Ok(total / n as f64)
    }

    /// `θ = (η, α)`.
    pub fn theta(&self) -> DVector<f64> {
        let eta = self.law.eta();
        let alpha = self.odds.params();
        DVector::from_iterator(eta.len() + alpha.len(), eta.iter().chain(alpha.iter()).copied())
    }

    pub fn with_theta(&self, theta: &DVector<f64>) -> Result<Self> {
        let p = self.law.eta().len();
        let eta = theta.rows(0, p).into_owned();
        let alpha = theta.rows(p, theta.len() - p).into_owned();
        Self::new(self.odds.with_params(&alpha), self.law.with_eta(&eta))
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self.law.design().names().iter().map(|t| format!("eta[{t}]")).collect();
        out.extend(self.odds.param_names());
        out
    }
}

type ObservedGroups = BTreeMap<(Vec<bool>, Vec<Option<u64>>), usize>;

fn observed_groups(d: &PatternedDataset) -> ObservedGroups {
    let mut groups = BTreeMap::new();
    for i in 0..d.n() {
        let key = (
            d.mask_of_row(i).bits().to_vec(),
            d.row(i).iter().map(|v| v.map(f64::to_bits)).collect(),
        );
        *groups.entry(key).or_insert(0) += 1;
    }
    groups
}

/// Model structure for [`fit_mle`]: law terms and per-pattern odds designs.
#[derive(Clone, Debug)]
pub struct JointSkeleton {
    pub law_design: Design,
    pub odds: OddsModelSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MleDiagnostics {
    pub iterations: usize,
    pub gradient_norm: f64,
    pub loglik: f64,
    pub min_information_eigenvalue: f64,
}

/// Fitted joint model with the inverse observed information.
#[derive(Clone, Debug)]
pub struct MleFit {
    pub model: JointLawModel,
    pub vcov: DMatrix<f64>,
    pub diagnostics: MleDiagnostics,
}

impl MleFit {
    pub fn se(&self) -> DVector<f64> {
        self.vcov.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

fn gradient_fd<F>(f: &F, x: &DVector<f64>) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    let mut g = DVector::zeros(x.len());
    for j in 0..x.len() {
        let h = fd_step(x[j]);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        g[j] = (f(&xp)? - f(&xm)?) / (2.0 * h);
    }
    Ok(g)
}

fn hessian_fd<F>(f: &F, x: &DVector<f64>) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    let p = x.len();
    let h: Vec<f64> = x.iter().map(|v| 1e-4 * (1.0 + v.abs())).collect();
    let at = |dj: (usize, f64), dk: (usize, f64)| -> Result<f64> {
        let mut y = x.clone();
        y[dj.0] += dj.1;
        y[dk.0] += dk.1;
        f(&y)
    };
    let mut hess = DMatrix::zeros(p, p);
    for j in 0..p {
        for k in j..p {
            let v = (at((j, h[j]), (k, h[k]))? - at((j, h[j]), (k, -h[k]))? - at((j, -h[j]), (k, h[k]))?
                + at((j, -h[j]), (k, -h[k]))?)
                / (4.0 * h[j] * h[k]);
            hess[(j, k)] = v;
            hess[(k, j)] = v;
        }
    }
    Ok(hess)
}

/// Maximizes the observed-data log-likelihood by BFGS with central-difference
/// gradients, starting from the complete-case log-linear fit and the pairwise
/// logistic odds fits. The variance is the inverse observed information.
pub fn fit_mle(d: &PatternedDataset, skeleton: &JointSkeleton) -> Result<MleFit> {
    if !d.schema().is_discrete() {
        return Err(Error::Unsupported(
            "the joint-likelihood MLE requires every variable to be binary or categorical".into(),
        ));
    }
    let law0 = DiscreteLaw::fit(d, skeleton.law_design.clone())?;
    let odds0 = match fit_pairwise_logistic(d, &skeleton.odds)?.model() {
        ResponseModel::Logit(m) => m.clone(),
        ResponseModel::General(_) => unreachable!("pairwise fit is always logit"),
    };
    let base = JointLawModel::new(odds0, law0)?;
    let groups = observed_groups(d);
    let n = d.n();
    let negll = |t: &DVector<f64>| -> Result<f64> { Ok(-base.with_theta(t)?.grouped_loglik(&groups, n)?) };

    let mut x = base.theta();
    let p = x.len();
    let mut fx = negll(&x)?;
    let mut g = gradient_fd(&negll, &x)?;
    let mut hinv = DMatrix::<f64>::identity(p, p);
    let mut iterations = 0;
    while max_abs(&g) > MLE_GRAD_TOL {
        if iterations >= 500 {
            return Err(Error::NoConvergence {
                context: "joint-likelihood maximization".into(),
                iterations,
                residual: max_abs(&g),
            });
        }
        let mut dir = -(&hinv * &g);
        if dir.dot(&g) >= 0.0 {
            hinv = DMatrix::identity(p, p);
            dir = -g.clone();
        }
        let slope = dir.dot(&g);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &x + &dir * t;
            if let Ok(fc) = negll(&cand) {
                if fc <= fx + 1e-4 * t * slope {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            t *= 0.5;
        }
        let (xn, fxn) = accepted.ok_or_else(|| Error::NoConvergence {
            context: "joint-likelihood line search".into(),
            iterations,
            residual: max_abs(&g),
        })?;
        let gn = gradient_fd(&negll, &xn)?;
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(p, p);
            let a = &i - &s * y.transpose() * rho;
            let b = &i - &y * s.transpose() * rho;
            hinv = &a * &hinv * &b + &s * s.transpose() * rho;
        }
        x = xn;
        fx = fxn;
        g = gn;
        iterations += 1;
    }

    let hess = symmetrize(&hessian_fd(&negll, &x)?);
    let eig = SymmetricEigen::new(hess.clone()).eigenvalues;
    let max_eig = eig.max();
    let min_eig = eig.min();
    if !(min_eig > 1e-10 * max_eig.abs().max(1e-300)) {
        return Err(Error::RankDeficient {
            context: format!(
                "observed information of the joint likelihood (smallest eigenvalue {min_eig:.3e})"
            ),
        });
    }
    let vcov = symmetrize(&(inverse(&hess, "observed information")? / n as f64));
    Ok(MleFit {
        model: base.with_theta(&x)?,
        vcov,
        diagnostics: MleDiagnostics {
            iterations,
            gradient_norm: max_abs(&g),
            loglik: -fx,
            min_information_eigenvalue: min_eig * n as f64,
        },
    })
}

fn population_equation(model: &JointLawModel, est: &EstimandSpec, beta: &DVector<f64>) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(est.dim());
    for cell in model.cells() {
        let w = model.full_data_density(cell)?;
        g.axpy(w, &est.value(cell, beta)?, 1.0);
    }
    Ok(g)
}

/// Plug-in estimate solving `Σ_l f(l; θ̂) U(l; β) = 0`, with delta-method
/// variance from the inverse observed information.
pub fn mle_estimate(d: &PatternedDataset, fit: &MleFit, est: &EstimandSpec) -> Result<EstimateReport> {
    let start = complete_case_estimate(d, est)?;
    let (beta, iterations, residual) = solve_equation(
        |b| population_equation(&fit.model, est, b),
        start,
        "joint-likelihood plug-in equation",
    )?;
    let jb = jacobian_fd(|b| population_equation(&fit.model, est, b), &beta)?;
    let theta = fit.model.theta();
    let jt = jacobian_fd(
        |t| population_equation(&fit.model.with_theta(t)?, est, &beta),
        &theta,
    )?;
    let mut dbeta = DMatrix::zeros(beta.len(), theta.len());
    for k in 0..theta.len() {
        let col = solve(&jb, &(-jt.column(k).into_owned()), "plug-in equation Jacobian")?;
        dbeta.set_column(k, &col);
    }
    let vcov = symmetrize(&(&dbeta * &fit.vcov * dbeta.transpose()));
    let diagnostics = Diagnostics {
        iterations,
        residual_norm: residual,
        models: vec!["joint:loglinear+logit".into()],
        gamma_condition: None,
    };
    EstimateReport::new(Method::Mle, est.names(), &beta, Some(&vcov), diagnostics)
}
