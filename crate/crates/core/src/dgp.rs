//! Data-generating processes and true estimands.

use std::ops::RangeInclusive;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::correlation::CorrelationSpec;
use crate::design::{DesignSpec, StructureKind, TreatmentStructure};
use crate::error::{Error, Result};

pub const PRESET_NAMES: [&str; 3] = ["sim1-immediate", "sim2-exposure", "sim3-calendar"];

/// Linear calendar trend used by the presets, `5, 6, ..., 14`.
pub fn preset_period_effects() -> Vec<f64> {
    (5..=14).map(f64::from).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub design: DesignSpec,
    pub structure: TreatmentStructure,
    /// One fixed effect per period.
    pub period_effects: Vec<f64>,
    pub correlation: CorrelationSpec,
    pub seed: u64,
}

impl ScenarioSpec {
    /// One of the three named simulation presets: 18 clusters, 10 periods,
    /// 30 individuals per cell, cluster variance 1/9, residual variance 1.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let design = DesignSpec::new(18, 10, 30)?;
        Self::preset_with_design(name, design, seed)
    }

    /// A preset's effect vectors and variance components on a caller-chosen
    /// design, which must have 10 periods.
    pub fn preset_with_design(name: &str, design: DesignSpec, seed: u64) -> Result<Self> {
        let structure = match name {
            "sim1-immediate" => TreatmentStructure::Immediate { theta: 6.0 },
            "sim2-exposure" => TreatmentStructure::ExposureVarying {
                delta: vec![0.0, 0.0, 0.5, 1.0, 2.0, 4.0, 6.0, 6.0, 6.0],
            },
            "sim3-calendar" => TreatmentStructure::CalendarVarying {
                xi: vec![6.0, 3.0, 1.0, 0.5, 0.1, 0.0, 0.0, 0.0],
            },
            other => {
                return Err(Error::UndefinedEstimand(format!(
                    "unknown scenario preset {other:?}"
                )))
            }
        };
        let spec = Self {
            name: name.to_string(),
            design,
            structure,
            period_effects: preset_period_effects(),
            correlation: CorrelationSpec::exchangeable(1.0 / 9.0, 1.0),
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.design.n_periods();
        if self.period_effects.len() != j {
            return Err(Error::DimensionMismatch {
                what: "period effects".into(),
                expected: j,
                found: self.period_effects.len(),
            });
        }
        self.structure.validate(j)?;
        self.correlation.validate()
    }

    /// `E[Ybar_ij]` for a cluster (0-based) and period (1-based).
    pub fn expected_mean(&self, cluster: usize, period: usize) -> f64 {
        let q = self.design.sequence_of(cluster);
        self.structure.effect(q, period, self.design.n_periods()) + self.period_effects[period - 1]
    }

    /// Expected cluster-period means as an `I x J` matrix.
    pub fn expected_means(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.design.n_clusters(), self.design.n_periods(), |c, j| {
            self.expected_mean(c, j + 1)
        })
    }

    /// Natural scalar estimand of the truth structure.
    pub fn true_estimand(&self) -> f64 {
        true_estimand(&self.structure, None).expect("validated structure has a default estimand")
    }
}

/// Individual outcomes and their cluster-period means.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialData {
    n_clusters: usize,
    n_periods: usize,
    cell_size: usize,
    outcomes: Vec<f64>,
    means: DMatrix<f64>,
}

impl TrialData {
    /// Wraps individual outcomes stored cluster-major, then period, then
    /// individual.
    pub fn from_outcomes(
        n_clusters: usize,
        n_periods: usize,
        cell_size: usize,
        outcomes: Vec<f64>,
    ) -> Result<Self> {
        let expected = n_clusters * n_periods * cell_size;
        if outcomes.len() != expected || cell_size == 0 {
            return Err(Error::DimensionMismatch {
                what: "individual outcomes".into(),
                expected,
                found: outcomes.len(),
            });
        }
        let means = DMatrix::from_fn(n_clusters, n_periods, |c, j| {
            let start = (c * n_periods + j) * cell_size;
            outcomes[start..start + cell_size].iter().sum::<f64>() / cell_size as f64
        });
        Ok(Self {
            n_clusters,
            n_periods,
            cell_size,
            outcomes,
            means,
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn cell_size(&self) -> usize {
        self.cell_size
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    /// Outcome of individual `k` (0-based) in cluster `c`, period `j` (1-based).
    pub fn outcome(&self, c: usize, j: usize, k: usize) -> f64 {
        self.outcomes[(c * self.n_periods + (j - 1)) * self.cell_size + k]
    }

    pub fn cell(&self, c: usize, j: usize) -> &[f64] {
        let start = (c * self.n_periods + (j - 1)) * self.cell_size;
        &self.outcomes[start..start + self.cell_size]
    }

    /// `I x J` cluster-period means.
    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of the substream for one cluster of one replicate.
pub fn substream_seed(seed: u64, replicate: u64, cluster: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ replicate) ^ cluster)
}

/// Replicate 0 of the scenario.
pub fn simulate_trial(scenario: &ScenarioSpec) -> Result<TrialData> {
    simulate_replicate(scenario, 0)
}

/// Draws one dataset. Each cluster consumes its own ChaCha8 stream: first
/// the cluster intercept, then the residuals in period-major order, all as
/// ziggurat standard normals.
pub fn simulate_replicate(scenario: &ScenarioSpec, replicate: u64) -> Result<TrialData> {
    scenario.validate()?;
    let d = &scenario.design;
    let (n_i, n_j, n_k) = (d.n_clusters(), d.n_periods(), d.cell_size());
    let tau = scenario.correlation.tau_alpha_sq.sqrt();
    let omega = scenario.correlation.tau_omega_sq.sqrt();
    let sigma = scenario.correlation.sigma_e_sq.sqrt();
    let nested = omega > 0.0
        && scenario.correlation.kind == crate::correlation::CorrelationKind::NestedExchangeable;
    let use_alpha = scenario.correlation.kind != crate::correlation::CorrelationKind::Independence;
    let mut outcomes = Vec::with_capacity(n_i * n_j * n_k);
    for c in 0..n_i {
        let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(scenario.seed, replicate, c as u64));
        let z: f64 = rng.sample(StandardNormal);
        let alpha = if use_alpha { tau * z } else { 0.0 };
        for j in 1..=n_j {
            let cell_shift = if nested {
                let w: f64 = rng.sample(StandardNormal);
                omega * w
            } else {
                0.0
            };
            let mu = scenario.expected_mean(c, j) + alpha + cell_shift;
            for _ in 0..n_k {
                let e: f64 = rng.sample(StandardNormal);
                outcomes.push(mu + sigma * e);
            }
        }
    }
    TrialData::from_outcomes(n_i, n_j, n_k, outcomes)
}

/// Scalar summaries of a treatment effect structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimand {
    Immediate,
    Etate,
    Ctate,
}

impl Estimand {
    pub fn label(self) -> &'static str {
        match self {
            Estimand::Immediate => "IT",
            Estimand::Etate => "ETATE",
            Estimand::Ctate => "CTATE",
        }
    }

    /// The estimand a model's scalar estimator targets.
    pub fn of_model(kind: StructureKind) -> Self {
        match kind {
            StructureKind::Immediate => Estimand::Immediate,
            StructureKind::ExposureVarying => Estimand::Etate,
            StructureKind::CalendarVarying => Estimand::Ctate,
        }
    }
}

/// Natural estimand of a structure: `theta`, the mean of `delta` over
/// exposure times (default `1..=J-1`) or the mean of `xi` over calendar
/// periods (default `2..=J-1`). Interval bounds use the structure's own
/// labels.
pub fn true_estimand(
    structure: &TreatmentStructure,
    interval: Option<RangeInclusive<usize>>,
) -> Result<f64> {
    let target = Estimand::of_model(structure.kind());
    true_estimand_for(structure, target, interval)
}

/// Like [`true_estimand`] with an explicit target. A time-averaged target
/// of the other time scale is undefined; an immediate effect supports every
/// target.
pub fn true_estimand_for(
    structure: &TreatmentStructure,
    target: Estimand,
    interval: Option<RangeInclusive<usize>>,
) -> Result<f64> {
    let (values, first_label) = match (structure, target) {
        (TreatmentStructure::Immediate { theta }, _) => return Ok(*theta),
        (TreatmentStructure::ExposureVarying { delta }, Estimand::Etate) => (delta, 1usize),
        (TreatmentStructure::CalendarVarying { xi }, Estimand::Ctate) => (xi, 2usize),
        (s, t) => {
            return Err(Error::UndefinedEstimand(format!(
                "{} is not defined under a {} truth",
                t.label(),
                s.kind().model_label()
            )))
        }
    };
    let last_label = first_label + values.len() - 1;
    let range = interval.unwrap_or(first_label..=last_label);
    if range.is_empty() || *range.start() < first_label || *range.end() > last_label {
        return Err(Error::IndexOutOfRange {
            what: "estimand interval",
            index: *range.end(),
            max: last_label,
        });
    }
    let slice = &values[range.start() - first_label..=range.end() - first_label];
    Ok(slice.iter().sum::<f64>() / slice.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimands() {
        let s2 = ScenarioSpec::preset("sim2-exposure", 1).unwrap();
        assert!((s2.true_estimand() - 17.0 / 6.0).abs() < 1e-12);
        let s3 = ScenarioSpec::preset("sim3-calendar", 1).unwrap();
        assert!((s3.true_estimand() - 1.325).abs() < 1e-12);
        let it = TreatmentStructure::Immediate { theta: 6.0 };
        assert_eq!(true_estimand(&it, None).unwrap(), 6.0);
        assert_eq!(true_estimand_for(&it, Estimand::Ctate, None).unwrap(), 6.0);
        assert!(matches!(
            true_estimand_for(&s3.structure, Estimand::Etate, None),
            Err(Error::UndefinedEstimand(_))
        ));
        assert!(matches!(
            true_estimand_for(&s2.structure, Estimand::Ctate, None),
            Err(Error::UndefinedEstimand(_))
        ));
        let sub = true_estimand(&s2.structure, Some(7..=9)).unwrap();
        assert_eq!(sub, 6.0);
        assert!(true_estimand(&s2.structure, Some(0..=3)).is_err());
        assert!(true_estimand(&s3.structure, Some(2..=10)).is_err());
    }

    #[test]
    fn unknown_preset() {
        assert!(ScenarioSpec::preset("sim4", 0).is_err());
    }

    #[test]
    fn dimension_checks() {
        let mut s = ScenarioSpec::preset("sim2-exposure", 1).unwrap();
        s.period_effects.pop();
        assert!(matches!(
            simulate_trial(&s),
            Err(Error::DimensionMismatch { .. })
        ));
        let mut s = ScenarioSpec::preset("sim3-calendar", 1).unwrap();
        s.structure = TreatmentStructure::CalendarVarying { xi: vec![1.0; 9] };
        assert!(simulate_trial(&s).is_err());
    }

    #[test]
    fn noiseless_recovery() {
        let mut s = ScenarioSpec::preset("sim1-immediate", 3).unwrap();
        s.correlation = CorrelationSpec::exchangeable(0.0, 1e-20);
        let data = simulate_trial(&s).unwrap();
        for c in 0..18 {
            let q = s.design.sequence_of(c);
            for j in 1..=10 {
                let want = s.period_effects[j - 1] + if j > q { 6.0 } else { 0.0 };
                assert!((data.means()[(c, j - 1)] - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn means_are_cell_averages() {
        let s = ScenarioSpec::preset("sim2-exposure", 11).unwrap();
        let data = simulate_replicate(&s, 4).unwrap();
        for c in [0, 7, 17] {
            for j in [1, 5, 10] {
                let cell = data.cell(c, j);
                let m = cell.iter().sum::<f64>() / cell.len() as f64;
                assert_eq!(m, data.means()[(c, j - 1)]);
                assert_eq!(data.outcome(c, j, 3), cell[3]);
            }
        }
    }

    #[test]
    fn reproducible_and_distinct() {
        let s = ScenarioSpec::preset("sim3-calendar", 42).unwrap();
        let a = simulate_replicate(&s, 5).unwrap();
        let b = simulate_replicate(&s, 5).unwrap();
        assert_eq!(a, b);
        let c = simulate_replicate(&s, 6).unwrap();
        assert_ne!(a.outcomes(), c.outcomes());
    }

    #[test]
    fn constant_exposure_equals_immediate() {
        let mut a = ScenarioSpec::preset("sim1-immediate", 9).unwrap();
        a.structure = TreatmentStructure::Immediate { theta: 2.5 };
        let mut b = a.clone();
        b.structure = TreatmentStructure::ExposureVarying {
            delta: vec![2.5; 9],
        };
        assert_eq!(simulate_replicate(&a, 3).unwrap(), simulate_replicate(&b, 3).unwrap());
    }
}
