//! End-to-end estimation: nuisance fits, the estimating-equation solve and the
//! requested variance, for one method on one dataset.
//!
//! Pattern designs are resolved once against the analysed dataset and keyed by
//! mask, so bootstrap resamples (whose pattern ids can differ) reuse them.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::cc_law::{fit_complete_case_mle, fit_pattern_specific, CompleteCaseLaw, LawSpec};
use crate::data::PatternedDataset;
use crate::design::Design;
use crate::error::{Error, Result};
use crate::estimand::EstimandSpec;
use crate::estimators::{point_estimate, solve_with_sandwich, EstimateReport, Equation, Method};
use crate::general_dcm::{gmm_fit, ErrorDistribution, GmmOptions, UtilityDiffSpec};
use crate::inference::bootstrap;
use crate::joint::{fit_mle, mle_estimate, JointSkeleton};
use crate::ldcm::{designs_for, fit_pairwise_logistic, NonresponseFit, PatternDesigns};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMode {
    #[default]
    Sandwich,
    Bootstrap,
    Both,
}

/// How the nonresponse model is fitted.
#[derive(Clone, Debug)]
pub enum NonresponseChoice {
    /// Pairwise logistic regressions (logit errors).
    Logit,
    /// Moment estimation under a general error law.
    Gmm(ErrorDistribution),
}

/// The complete-case law, resolved against a dataset.
#[derive(Clone, Debug)]
pub enum LawChoice {
    Joint(LawSpec),
    PerPattern(PatternDesigns),
}

impl LawChoice {
    pub fn resolve(d: &PatternedDataset, spec: &LawSpec) -> Result<Self> {
        Ok(match spec {
            LawSpec::PerPatternRegression { default, patterns } => {
                LawChoice::PerPattern(designs_for(d, *default, patterns)?)
            }
            other => LawChoice::Joint(other.clone()),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Pipeline {
    pub method: Method,
    pub estimand: EstimandSpec,
    pub odds: PatternDesigns,
    pub nonresponse: NonresponseChoice,
    pub law: Option<LawChoice>,
}

/// Designs of `designs` for the incomplete patterns present in `d`.
fn restrict(designs: &PatternDesigns, d: &PatternedDataset) -> Result<PatternDesigns> {
    designs.covers(d)?;
    let present: Vec<_> = d.patterns().iter().map(|p| p.mask.clone()).collect();
    let entries = designs
        .entries()
        .iter()
        .filter(|(m, _)| present.contains(m))
        .cloned()
        .collect();
    PatternDesigns::from_entries(d.schema(), entries)
}

fn loglinear_design(d: &PatternedDataset, terms: &[String]) -> Result<Design> {
    if terms.is_empty() {
        let all: Vec<usize> = (0..d.k()).collect();
        Ok(Design::main_effects(d.schema(), &all))
    } else {
        Design::parse(d.schema(), terms)
    }
}

impl Pipeline {
    pub fn new(
        method: Method,
        estimand: EstimandSpec,
        odds: PatternDesigns,
        nonresponse: NonresponseChoice,
        law: Option<LawChoice>,
    ) -> Result<Self> {
        if method.needs_law() && law.is_none() {
            return Err(Error::Invalid(format!("complete-case law required for {method}")));
        }
        match (method, &law) {
            (Method::Mr, Some(LawChoice::Joint(_))) => {
                return Err(Error::Invalid("mr requires a per_pattern_regression law".into()))
            }
            (Method::Dr, Some(LawChoice::PerPattern(_))) => {
                return Err(Error::Invalid(
                    "dr requires a joint complete-case law; use mr with per-pattern regressions".into(),
                ))
            }
            (Method::Mle, Some(LawChoice::Joint(LawSpec::DiscreteLoglinear { .. }))) => {}
            (Method::Mle, _) => {
                return Err(Error::Invalid("mle requires a discrete_loglinear law".into()))
            }
            _ => {}
        }
        if matches!(method, Method::Dr | Method::Mr | Method::Mle)
            && !matches!(nonresponse, NonresponseChoice::Logit)
        {
            return Err(Error::Unsupported(format!("{method} requires the logit nonresponse model")));
        }
        Ok(Self {
            method,
            estimand,
            odds,
            nonresponse,
            law,
        })
    }

    fn fit_response(&self, d: &PatternedDataset) -> Result<Option<NonresponseFit>> {
        if !self.method.needs_response() {
            return Ok(None);
        }
        let designs = restrict(&self.odds, d)?;
        Ok(Some(match &self.nonresponse {
            NonresponseChoice::Logit => fit_pairwise_logistic(d, &designs)?,
            NonresponseChoice::Gmm(dist) => {
                gmm_fit(d, dist.clone(), &UtilityDiffSpec::new(designs), &GmmOptions::default())?
                    .into_nonresponse_fit()
            }
        }))
    }

    fn fit_law(&self, d: &PatternedDataset) -> Result<Option<CompleteCaseLaw>> {
        if !self.method.needs_law() {
            return Ok(None);
        }
        match self.law.as_ref().expect("checked in new") {
            LawChoice::Joint(spec) => fit_complete_case_mle(d, spec).map(Some),
            LawChoice::PerPattern(designs) => fit_pattern_specific(d, &restrict(designs, d)?).map(Some),
        }
    }

    fn skeleton(&self, d: &PatternedDataset) -> Result<JointSkeleton> {
        let terms = match &self.law {
            Some(LawChoice::Joint(LawSpec::DiscreteLoglinear { terms })) => terms,
            _ => return Err(Error::Invalid("mle requires a discrete_loglinear law".into())),
        };
        Ok(JointSkeleton {
            law_design: loglinear_design(d, terms)?,
            odds: restrict(&self.odds, d)?,
        })
    }

    /// Point estimate only.
    pub fn point(&self, d: &PatternedDataset) -> Result<DVector<f64>> {
        if self.method == Method::Mle {
            let fit = fit_mle(d, &self.skeleton(d)?)?;
            return Ok(mle_estimate(d, &fit, &self.estimand)?.beta());
        }
        let fit = self.fit_response(d)?;
        let law = self.fit_law(d)?;
        let eq = Equation::new(d, self.method, &self.estimand, fit.as_ref(), law.as_ref(), None)?;
        Ok(point_estimate(&eq)?.0)
    }

    /// Full report with the requested variance.
    pub fn run(&self, d: &PatternedDataset, variance: VarianceMode, boot_reps: usize, seed: u64) -> Result<EstimateReport> {
        let mut report = if self.method == Method::Mle {
            let fit = fit_mle(d, &self.skeleton(d)?)?;
            mle_estimate(d, &fit, &self.estimand)?
        } else {
            let fit = self.fit_response(d)?;
            let law = self.fit_law(d)?;
            let eq = Equation::new(d, self.method, &self.estimand, fit.as_ref(), law.as_ref(), None)?;
            if variance == VarianceMode::Bootstrap {
                let (beta, iterations, residual) = point_estimate(&eq)?;
                let diagnostics = crate::estimators::Diagnostics {
                    iterations,
                    residual_norm: residual,
                    models: Vec::new(),
                    gamma_condition: None,
                };
                EstimateReport::new(self.method, self.estimand.names(), &beta, None, diagnostics)?
            } else {
                solve_with_sandwich(&eq, fit.as_ref())?.0
            }
        };
        if variance == VarianceMode::Bootstrap && self.method == Method::Mle {
            report.vcov = None;
        }
        if matches!(variance, VarianceMode::Bootstrap | VarianceMode::Both) {
            let boot = bootstrap(d, boot_reps, seed, |r| self.point(r))?;
            report = report.with_bootstrap(boot);
        }
        Ok(report)
    }
}
