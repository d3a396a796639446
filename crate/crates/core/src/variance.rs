//! Model-based and cluster-robust variances, and confidence intervals.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::correlation::precision_offdiag_factor;
use crate::design::{DesignMatrix, StructureKind};
use crate::error::{Error, Result};
use crate::gls::FitResult;

/// Eigenvalue floor for the leverage adjustment.
pub const LEVERAGE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VarianceMethod {
    ModelBased,
    CR0,
    CR2,
    CR3,
}

impl VarianceMethod {
    pub fn label(self) -> &'static str {
        match self {
            VarianceMethod::ModelBased => "model",
            VarianceMethod::CR0 => "CR0",
            VarianceMethod::CR2 => "CR2",
            VarianceMethod::CR3 => "CR3",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "MODEL" | "MODEL-BASED" | "MODELBASED" => Some(VarianceMethod::ModelBased),
            "CR0" => Some(VarianceMethod::CR0),
            "CR2" => Some(VarianceMethod::CR2),
            "CR3" => Some(VarianceMethod::CR3),
            _ => None,
        }
    }

    /// Normal quantiles for model-based intervals, `t(I - 1)` for the
    /// sandwich estimators.
    pub fn default_dof(self, n_clusters: usize) -> DofRule {
        match self {
            VarianceMethod::ModelBased => DofRule::Normal,
            _ => DofRule::StudentT {
                df: n_clusters.saturating_sub(1).max(1) as f64,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DofRule {
    Normal,
    StudentT { df: f64 },
}

impl DofRule {
    /// Two-sided 95% critical value.
    pub fn critical_value(self) -> f64 {
        match self {
            DofRule::Normal => Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.975),
            DofRule::StudentT { df } => StudentsT::new(0.0, 1.0, df)
                .expect("positive degrees of freedom")
                .inverse_cdf(0.975),
        }
    }

    pub fn label(self) -> String {
        match self {
            DofRule::Normal => "normal".into(),
            DofRule::StudentT { df } => format!("t({df})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub estimator: StructureKind,
    pub point: f64,
    pub se: f64,
    pub method: VarianceMethod,
    pub ci_low: f64,
    pub ci_high: f64,
    pub dof_rule: DofRule,
}

impl VarianceReport {
    pub fn covers(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }
}

/// `scale * (Z' V^-1 Z)^-1`.
pub fn model_vcov(fit: &FitResult) -> Result<DMatrix<f64>> {
    Ok(fit.unscaled_covariance()? * fit.scale())
}

/// `f(a I + b 11')` for an `m x m` matrix, via its two eigenvalues.
fn exchangeable_function(a: f64, b: f64, m: usize, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let fa = f(a);
    let fo = f(a + b * m as f64);
    let off = (fo - fa) / m as f64;
    DMatrix::from_fn(m, m, |r, c| if r == c { fa + off } else { off })
}

/// Sandwich `B^-1 (sum_i Z_i' W_i A_i e_i e_i' A_i' W_i Z_i) B^-1` with
/// `B = Z' W Z` and `W` the scale-free working precision.
///
/// `A_i` is the identity (CR0), the principal inverse square root of
/// `I - H_ii` (CR2) or its inverse (CR3), where `H_ii = Z_i B^-1 Z_i' W_i`.
/// `I - H_ii` is similar to the symmetric `I - W_i^1/2 Z_i B^-1 Z_i' W_i^1/2`,
/// whose eigendecomposition supplies both adjustments.
pub fn cluster_robust_vcov(
    fit: &FitResult,
    dm: &DesignMatrix,
    means: &DMatrix<f64>,
    method: VarianceMethod,
) -> Result<DMatrix<f64>> {
    if method == VarianceMethod::ModelBased {
        return model_vcov(fit);
    }
    if means.nrows() != dm.n_clusters() || means.ncols() != dm.n_periods() {
        return Err(Error::DimensionMismatch {
            what: "cluster-period means".into(),
            expected: dm.n_clusters() * dm.n_periods(),
            found: means.nrows() * means.ncols(),
        });
    }
    if dm.n_columns() != fit.coefficients().len() {
        return Err(Error::DimensionMismatch {
            what: "design columns".into(),
            expected: fit.coefficients().len(),
            found: dm.n_columns(),
        });
    }
    let active: Vec<usize> = (0..dm.n_clusters())
        .filter(|&c| !dm.active_periods(c).is_empty())
        .collect();
    if active.len() < 2 {
        return Err(Error::TooFewClusters(active.len()));
    }
    let gamma = fit.gamma();
    let s = 1.0 / (1.0 - gamma);
    let bread = fit.unscaled_covariance()?;
    let beta = fit.coefficients();
    let p = beta.len();
    let mut meat = DMatrix::zeros(p, p);
    for &c in &active {
        let periods = dm.active_periods(c);
        let m = periods.len();
        let zi = dm.cluster_block(c);
        let ei = DVector::from_iterator(m, periods.iter().map(|&j| means[(c, j - 1)]))
            - &zi * beta;
        let cf = precision_offdiag_factor(gamma, m);
        // W_i = s I - s c 11'
        let wi = exchangeable_function(s, -s * cf, m, |x| x);
        let adjusted = match method {
            VarianceMethod::CR0 => ei,
            VarianceMethod::CR2 | VarianceMethod::CR3 => {
                let w_half = exchangeable_function(s, -s * cf, m, f64::sqrt);
                let w_mhalf = exchangeable_function(s, -s * cf, m, |x| 1.0 / x.sqrt());
                let sym = DMatrix::identity(m, m) - &w_half * &zi * &bread * zi.transpose() * &w_half;
                let sym = (&sym + sym.transpose()) * 0.5;
                let eig = sym.symmetric_eigen();
                if eig.eigenvalues.iter().any(|&v| v < LEVERAGE_FLOOR) {
                    return Err(Error::LeverageSingular { cluster: c });
                }
                let power = if method == VarianceMethod::CR2 { -0.5 } else { -1.0 };
                let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.powf(power)));
                let root = &eig.eigenvectors * d * eig.eigenvectors.transpose();
                &w_mhalf * root * &w_half * ei
            }
            VarianceMethod::ModelBased => unreachable!(),
        };
        let u = zi.transpose() * (&wi * adjusted);
        meat += &u * u.transpose();
    }
    let v = &bread * meat * &bread;
    Ok((&v + v.transpose()) * 0.5)
}

/// `c' Sigma c`, floored at zero.
pub fn contrast_variance(vcov: &DMatrix<f64>, contrast: &DVector<f64>) -> Result<f64> {
    if vcov.nrows() != contrast.len() || vcov.ncols() != contrast.len() {
        return Err(Error::DimensionMismatch {
            what: "contrast".into(),
            expected: vcov.nrows(),
            found: contrast.len(),
        });
    }
    Ok((contrast.transpose() * vcov * contrast)[(0, 0)].max(0.0))
}

pub fn confidence_interval(point: f64, se: f64, dof: DofRule) -> (f64, f64) {
    if se == 0.0 {
        return (point, point);
    }
    let h = dof.critical_value() * se;
    (point - h, point + h)
}

/// Point estimate, standard error and interval for the fit's scalar
/// estimator.
pub fn variance_report(
    fit: &FitResult,
    dm: &DesignMatrix,
    means: &DMatrix<f64>,
    method: VarianceMethod,
) -> Result<VarianceReport> {
    let dof = method.default_dof(fit.n_clusters());
    contrast_report(fit, dm, means, method, dof, &fit.contrast())
}

/// Like [`variance_report`] for an arbitrary contrast of the coefficients,
/// e.g. a single effect on an effect curve.
pub fn contrast_report(
    fit: &FitResult,
    dm: &DesignMatrix,
    means: &DMatrix<f64>,
    method: VarianceMethod,
    dof: DofRule,
    contrast: &DVector<f64>,
) -> Result<VarianceReport> {
    let vcov = cluster_robust_vcov(fit, dm, means, method)?;
    let point = contrast.dot(fit.coefficients());
    let se = contrast_variance(&vcov, contrast)?.sqrt();
    let (ci_low, ci_high) = confidence_interval(point, se, dof);
    Ok(VarianceReport {
        estimator: fit.kind(),
        point,
        se,
        method,
        ci_low,
        ci_high,
        dof_rule: dof,
    })
}
