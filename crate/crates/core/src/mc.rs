//! Monte Carlo evaluation of the estimators: bias, precision, coverage.
//!
//! Replicates run in parallel; each draws from its own substreams and the
//! summaries are folded in replicate order, so results do not depend on
//! the thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::CorrelationKind;
use crate::design::{design_matrix, DesignMatrix, StructureKind};
use crate::dgp::{simulate_replicate, ScenarioSpec};
use crate::error::{Error, Result};
use crate::gls::{fit_feasible_gls, fit_gls, fit_ols, FitResult};
use crate::variance::{variance_report, VarianceMethod};
use crate::weights::{expected_misspecified_estimate, lambda_decomposition, FinalPeriod};

pub const DEFAULT_BASE_SEED: u64 = 20240101;

/// Truths closer to zero than this report absolute bias only.
pub const NEAR_ZERO_ESTIMAND: f64 = 1e-8;

/// One analysis model applied to every replicate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisSpec {
    pub structure: StructureKind,
    /// `Independence` fits by OLS; the exchangeable kinds fit by feasible
    /// GLS with a REML estimate of `gamma`.
    pub correlation: CorrelationKind,
    pub methods: Vec<VarianceMethod>,
}

impl AnalysisSpec {
    pub fn new(structure: StructureKind, correlation: CorrelationKind, methods: &[VarianceMethod]) -> Self {
        Self {
            structure,
            correlation,
            methods: methods.to_vec(),
        }
    }

    pub fn fit(&self, dm: &DesignMatrix, means: &nalgebra::DMatrix<f64>) -> Result<FitResult> {
        match self.correlation {
            CorrelationKind::Independence => fit_ols(dm, means),
            _ => fit_feasible_gls(dm, means),
        }
    }
}

/// Every structure under exchangeable and independence working models.
pub fn standard_analyses(methods: &[VarianceMethod]) -> Vec<AnalysisSpec> {
    let mut out = Vec::new();
    for corr in [CorrelationKind::Exchangeable, CorrelationKind::Independence] {
        for s in StructureKind::ALL {
            out.push(AnalysisSpec::new(s, corr, methods));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub scenario: String,
    pub estimator: StructureKind,
    pub correlation: CorrelationKind,
    pub method: VarianceMethod,
    pub n_reps: usize,
    pub n_failed: usize,
    pub mean_estimate: f64,
    pub true_estimand: f64,
    /// `None` when the truth is too close to zero to divide by.
    pub percent_bias: Option<f64>,
    pub absolute_bias: f64,
    /// Reciprocal of the mean estimated variance.
    pub precision: f64,
    pub coverage: f64,
    /// Standard deviation of the estimates.
    pub mc_se: f64,
}

struct MethodOutcome {
    variance: f64,
    covered: bool,
}

struct AnalysisOutcome {
    estimate: f64,
    methods: Vec<MethodOutcome>,
}

fn evaluate_analysis(
    analysis: &AnalysisSpec,
    dm: &DesignMatrix,
    means: &nalgebra::DMatrix<f64>,
    truth: f64,
) -> Result<AnalysisOutcome> {
    let fit = analysis.fit(dm, means)?;
    let estimate = fit.estimate();
    let methods = analysis
        .methods
        .iter()
        .map(|&m| {
            let r = variance_report(&fit, dm, means, m)?;
            Ok(MethodOutcome {
                variance: r.se * r.se,
                covered: r.covers(truth),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AnalysisOutcome { estimate, methods })
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        f64::NAN
    };
    (mean, sd)
}

/// Simulates `n_reps` datasets from `scenario` (with its seed replaced by
/// `base_seed`) and summarizes every analysis and variance method. A
/// replicate whose fit or variance fails is excluded from that analysis
/// and counted in `n_failed`.
pub fn run_study(
    scenario: &ScenarioSpec,
    analyses: &[AnalysisSpec],
    n_reps: usize,
    base_seed: u64,
) -> Result<Vec<SimReport>> {
    if n_reps == 0 {
        return Err(Error::DegenerateDesign("n_reps must be at least 1".into()));
    }
    scenario.validate()?;
    let mut scenario = scenario.clone();
    scenario.seed = base_seed;
    let truth = scenario.true_estimand();
    let matrices = analyses
        .iter()
        .map(|a| design_matrix(&scenario.design, a.structure, false))
        .collect::<Result<Vec<_>>>()?;

    let per_rep: Vec<Vec<Option<AnalysisOutcome>>> = (0..n_reps as u64)
        .into_par_iter()
        .map(|r| {
            let data = simulate_replicate(&scenario, r)?;
            Ok(analyses
                .iter()
                .zip(&matrices)
                .map(|(a, dm)| evaluate_analysis(a, dm, data.means(), truth).ok())
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut reports = Vec::new();
    for (k, analysis) in analyses.iter().enumerate() {
        let ok: Vec<&AnalysisOutcome> = per_rep.iter().filter_map(|rep| rep[k].as_ref()).collect();
        let n_failed = n_reps - ok.len();
        let estimates: Vec<f64> = ok.iter().map(|o| o.estimate).collect();
        let (mean, sd) = mean_sd(&estimates);
        let absolute_bias = mean - truth;
        let percent_bias = (truth.abs() >= NEAR_ZERO_ESTIMAND).then(|| 100.0 * absolute_bias / truth);
        for (mi, &method) in analysis.methods.iter().enumerate() {
            let variances: Vec<f64> = ok.iter().map(|o| o.methods[mi].variance).collect();
            let covered = ok.iter().filter(|o| o.methods[mi].covered).count();
            let (mean_var, _) = mean_sd(&variances);
            reports.push(SimReport {
                scenario: scenario.name.clone(),
                estimator: analysis.structure,
                correlation: analysis.correlation,
                method,
                n_reps,
                n_failed,
                mean_estimate: mean,
                true_estimand: truth,
                percent_bias,
                absolute_bias,
                precision: 1.0 / mean_var,
                coverage: covered as f64 / ok.len() as f64,
                mc_se: sd,
            });
        }
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCheck {
    /// Weight-engine expectation of the estimator.
    pub expected_estimate: f64,
    pub mc_mean: f64,
    pub mc_sd: f64,
    pub n_reps: usize,
    pub z_score: f64,
}

/// Compares the weight-engine expectation of an analysis under the
/// scenario's truth with the Monte Carlo mean of the same estimator. Both
/// sides use GLS at the given `gamma` on all cluster-period cells, which is
/// the setting in which the expectation is exact.
pub fn analytic_bias_check(
    scenario: &ScenarioSpec,
    analysis: StructureKind,
    gamma: f64,
    n_reps: usize,
    base_seed: u64,
) -> Result<BiasCheck> {
    if n_reps < 2 {
        return Err(Error::DegenerateDesign("need at least 2 replicates".into()));
    }
    scenario.validate()?;
    let decomposition = lambda_decomposition(
        &scenario.design,
        analysis,
        scenario.structure.kind(),
        gamma,
        FinalPeriod::Retain,
    )?;
    let expected = expected_misspecified_estimate(&decomposition.profile, &scenario.structure)?;
    let dm = design_matrix(&scenario.design, analysis, false)?;
    let mut scenario = scenario.clone();
    scenario.seed = base_seed;
    let estimates: Vec<f64> = (0..n_reps as u64)
        .into_par_iter()
        .map(|r| {
            let data = simulate_replicate(&scenario, r)?;
            Ok(fit_gls(&dm, data.means(), gamma)?.estimate())
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean, sd) = mean_sd(&estimates);
    Ok(BiasCheck {
        expected_estimate: expected,
        mc_mean: mean,
        mc_sd: sd,
        n_reps,
        z_score: (mean - expected) / (sd / (n_reps as f64).sqrt()),
    })
}
