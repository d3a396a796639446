//! Within-cluster correlation of cluster-period means.
//!
//! Under a random cluster intercept (optionally plus a cluster-period
//! intercept) the means of one cluster are exchangeable with correlation
//! `gamma`. Point estimation depends on `gamma` only; the common scale
//! `Var(Ybar_ij)` is needed for model-based variances.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper clamp applied to gamma computed from variance components.
pub const GAMMA_CLAMP: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CorrelationKind {
    Exchangeable,
    NestedExchangeable,
    Independence,
}

impl CorrelationKind {
    pub fn label(self) -> &'static str {
        match self {
            CorrelationKind::Exchangeable => "exchangeable",
            CorrelationKind::NestedExchangeable => "nested-exchangeable",
            CorrelationKind::Independence => "independence",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        match label.trim().to_ascii_lowercase().as_str() {
            "exchangeable" | "exch" => Some(CorrelationKind::Exchangeable),
            "nested-exchangeable" | "nested" => Some(CorrelationKind::NestedExchangeable),
            "independence" | "ind" => Some(CorrelationKind::Independence),
            _ => None,
        }
    }

    /// Variance parameters counted by information criteria.
    pub fn n_variance_params(self) -> usize {
        match self {
            CorrelationKind::Exchangeable => 2,
            CorrelationKind::NestedExchangeable => 3,
            CorrelationKind::Independence => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSpec {
    pub kind: CorrelationKind,
    /// Cluster random-intercept variance.
    pub tau_alpha_sq: f64,
    /// Cluster-period variance (nested exchangeable only).
    pub tau_omega_sq: f64,
    /// Individual residual variance.
    pub sigma_e_sq: f64,
}

impl CorrelationSpec {
    pub fn exchangeable(tau_alpha_sq: f64, sigma_e_sq: f64) -> Self {
        Self {
            kind: CorrelationKind::Exchangeable,
            tau_alpha_sq,
            tau_omega_sq: 0.0,
            sigma_e_sq,
        }
    }

    pub fn nested(tau_alpha_sq: f64, tau_omega_sq: f64, sigma_e_sq: f64) -> Self {
        Self {
            kind: CorrelationKind::NestedExchangeable,
            tau_alpha_sq,
            tau_omega_sq,
            sigma_e_sq,
        }
    }

    pub fn independence(sigma_e_sq: f64) -> Self {
        Self {
            kind: CorrelationKind::Independence,
            tau_alpha_sq: 0.0,
            tau_omega_sq: 0.0,
            sigma_e_sq,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let comps = [
            ("tau_alpha_sq", self.tau_alpha_sq),
            ("tau_omega_sq", self.tau_omega_sq),
            ("sigma_e_sq", self.sigma_e_sq),
        ];
        for (name, v) in comps {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidVariance(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if self.sigma_e_sq <= 0.0 {
            return Err(Error::InvalidVariance(format!(
                "sigma_e_sq must be positive, got {}",
                self.sigma_e_sq
            )));
        }
        Ok(())
    }

    /// Correlation between two cluster-period means of one cluster, for
    /// cells of `k` individuals.
    pub fn gamma(&self, k: usize) -> Result<f64> {
        self.validate()?;
        let k = k as f64;
        let g = match self.kind {
            CorrelationKind::Independence => 0.0,
            CorrelationKind::Exchangeable => {
                self.tau_alpha_sq / (self.tau_alpha_sq + self.sigma_e_sq / k)
            }
            CorrelationKind::NestedExchangeable => {
                self.tau_alpha_sq / (self.tau_alpha_sq + self.tau_omega_sq + self.sigma_e_sq / k)
            }
        };
        Ok(g.clamp(0.0, GAMMA_CLAMP))
    }

    /// `Var(Ybar_ij)` for cells of `k` individuals.
    pub fn cell_mean_variance(&self, k: usize) -> Result<f64> {
        self.validate()?;
        let within = self.sigma_e_sq / k as f64;
        Ok(match self.kind {
            CorrelationKind::Independence => within,
            CorrelationKind::Exchangeable => self.tau_alpha_sq + within,
            CorrelationKind::NestedExchangeable => self.tau_alpha_sq + self.tau_omega_sq + within,
        })
    }

    /// Individual-level intracluster correlation. Read-only summary.
    pub fn icc(&self) -> f64 {
        match self.kind {
            CorrelationKind::Independence => 0.0,
            _ => self.tau_alpha_sq / (self.tau_alpha_sq + self.tau_omega_sq + self.sigma_e_sq),
        }
    }

    /// Same spec with every component multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            kind: self.kind,
            tau_alpha_sq: self.tau_alpha_sq * c,
            tau_omega_sq: self.tau_omega_sq * c,
            sigma_e_sq: self.sigma_e_sq * c,
        }
    }
}

pub fn gamma(spec: &CorrelationSpec, k: usize) -> Result<f64> {
    spec.gamma(k)
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_finite() && (0.0..1.0).contains(&gamma) {
        Ok(())
    } else {
        Err(Error::InvalidGamma(gamma))
    }
}

/// `(1 - gamma) I + gamma 11'` of size `n`.
pub fn cluster_correlation_matrix(gamma: f64, n: usize) -> Result<DMatrix<f64>> {
    check_gamma(gamma)?;
    Ok(DMatrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { gamma }))
}

/// Closed-form inverse of [`cluster_correlation_matrix`].
pub fn cluster_precision_matrix(gamma: f64, n: usize) -> Result<DMatrix<f64>> {
    check_gamma(gamma)?;
    let c = precision_offdiag_factor(gamma, n);
    let s = 1.0 / (1.0 - gamma);
    Ok(DMatrix::from_fn(n, n, |r, col| {
        if r == col {
            s * (1.0 - c)
        } else {
            -s * c
        }
    }))
}

/// `gamma / (1 + (n - 1) gamma)`, the rank-one coefficient of the inverse.
pub(crate) fn precision_offdiag_factor(gamma: f64, n: usize) -> f64 {
    gamma / (1.0 + (n as f64 - 1.0) * gamma)
}

/// `log det` of the exchangeable block of size `n`.
pub(crate) fn log_det_block(gamma: f64, n: usize) -> f64 {
    let n = n as f64;
    (n - 1.0) * (1.0 - gamma).ln() + (1.0 + (n - 1.0) * gamma).ln()
}
