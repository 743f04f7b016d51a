//! Semiparametric estimation for nonmonotone, nonignorable missing data using
//! discrete choice models for the missingness pattern.
//!
//! The pattern `R` is treated as a choice among the observed-data patterns;
//! each incomplete pattern `r` is compared with the complete-case pattern
//! through `Odds_r = Π_r / Π_1`, which may depend only on the variables
//! observed under `r`. Combined with a model for the complete-case law this
//! yields IPW, pattern-mixture, doubly robust and multiply robust estimators
//! of a full-data parameter `β` defined by `E U(L; β) = 0`.
//!
//! ```no_run
//! use choicemiss::{
//!     fit_law, fit_pairwise_logistic, solve_dr, EstimandSpec, LawSpec, PatternDesigns, DefaultDesign,
//! };
//! # fn main() -> choicemiss::Result<()> {
//! let d = choicemiss::sim::simulate_dataset(2000, 7, 0)?;
//! let odds = PatternDesigns::for_dataset(&d, DefaultDesign::MainEffects);
//! let fit = fit_pairwise_logistic(&d, &odds)?;
//! let law = fit_law(&d, &LawSpec::GaussianLinear { outcome: "Y".into(), predictors: vec!["X".into()] })?;
//! let est = EstimandSpec::mean(d.schema(), "Y")?;
//! let report = solve_dr(&d, &fit, &law, &est)?;
//! println!("{:?} ± {:?}", report.beta_hat, report.se);
//! # Ok(())
//! # }
//! ```

pub mod cc_law;
pub mod data;
pub mod design;
pub mod error;
pub mod estimand;
pub mod estimators;
pub mod general_dcm;
pub mod inference;
pub mod joint;
pub mod ldcm;
pub mod numeric;
pub mod pipeline;
pub mod quadrature;
pub mod sensitivity;
pub mod sim;

pub use cc_law::{fit_complete_case_mle, fit_law, fit_pattern_specific, CompleteCaseLaw, DiscreteLaw, GaussianLaw, LawSpec};
pub use data::{
    check_positivity, infer_schema, ingest_csv, ingest_reader, tabulate_patterns, PatternMask, PatternRow,
    PatternedDataset, PositivityReport, VarKind, Variable, VariableSchema,
};
pub use design::{Design, Term};
pub use error::{Error, Result};
pub use estimand::{Estimand, EstimandSpec};
pub use estimators::{
    complete_case_estimate, solve_dr, solve_ipw, solve_mr, solve_pm, EstimateReport, Equation, Method,
};
pub use general_dcm::{gmm_fit, ErrorDistribution, GeneralDcm, GmmFit, GmmOptions, Instrument, UtilityDiffSpec};
pub use inference::{bootstrap, sandwich, wald_ci, BootstrapResult};
pub use joint::{fit_mle, mle_estimate, JointLawModel, JointSkeleton, MleFit};
pub use ldcm::{
    designs_for, fit_pairwise_logistic, DefaultDesign, NonresponseFit, OddsModel, OddsModelSpec, PatternDesigns,
    PatternTerms, ResponseModel,
};
pub use pipeline::{LawChoice, NonresponseChoice, Pipeline, VarianceMode};
pub use sensitivity::{fit_alpha_theta, parse_grid, parse_tilt, sweep, ExpTilt, SelectionBiasSpec, SensitivityCurve};
