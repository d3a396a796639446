//! Estimation and simulation for stepped-wedge cluster randomized trials
//! with time-varying treatment effects.

pub mod correlation;
pub mod design;
pub mod dgp;
pub mod error;
pub mod gls;
pub mod mc;
pub mod variance;
pub mod weights;

pub use correlation::{CorrelationKind, CorrelationSpec};
pub use design::{build_design, design_matrix, DesignMatrix, DesignSpec, StructureKind, TreatmentStructure};
pub use dgp::{simulate_replicate, simulate_trial, Estimand, ScenarioSpec, TrialData};
pub use error::{Error, Result};
pub use gls::{fit_feasible_gls, fit_gls, fit_ols, FitResult};
pub use mc::{analytic_bias_check, run_study, AnalysisSpec, BiasCheck, SimReport};
pub use variance::{DofRule, VarianceMethod, VarianceReport};
pub use weights::{WeightFamily, WeightMethod, WeightProfile};
