//! Estimand-weight decompositions of (possibly misspecified) estimators.
//!
//! A model's scalar estimator is linear in the cluster-period means,
//! `est = a' Y` with `a = V^-1 Z (Z' V^-1 Z)^-1 c`. Its expectation under a
//! truth structure is the sum of `a_ij` times the true cell mean. Period
//! effects drop out because `a` is orthogonal to every period column, so
//! the expectation is a weighted sum of the truth's per-time effects.
//!
//! Two closed forms exist for any number of sequences: the IT estimator
//! under exposure-time effects (`w1`) and under calendar-time effects
//! (`w2`). The ETATE estimator under calendar effects (`w3`) and the CTATE
//! estimator under exposure effects (`w4`) come from the numeric engine;
//! for three sequences they also have rational closed forms.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::correlation::{check_gamma, precision_offdiag_factor};
use crate::design::{design_matrix, DesignSpec, StructureKind, TreatmentStructure};
use crate::error::{Error, Result};
use crate::gls::estimator_contrast;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightMethod {
    Analytic,
    Numeric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightFamily {
    W1,
    W2,
    W3,
    W4,
}

impl WeightFamily {
    pub const ALL: [WeightFamily; 4] = [
        WeightFamily::W1,
        WeightFamily::W2,
        WeightFamily::W3,
        WeightFamily::W4,
    ];

    pub fn label(self) -> &'static str {
        match self {
            WeightFamily::W1 => "w1",
            WeightFamily::W2 => "w2",
            WeightFamily::W3 => "w3",
            WeightFamily::W4 => "w4",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "w1" => Some(WeightFamily::W1),
            "w2" => Some(WeightFamily::W2),
            "w3" => Some(WeightFamily::W3),
            "w4" => Some(WeightFamily::W4),
            _ => None,
        }
    }

    /// `(analysis, truth)` pair the family decomposes.
    pub fn pair(self) -> (StructureKind, StructureKind) {
        use StructureKind::*;
        match self {
            WeightFamily::W1 => (Immediate, ExposureVarying),
            WeightFamily::W2 => (Immediate, CalendarVarying),
            WeightFamily::W3 => (ExposureVarying, CalendarVarying),
            WeightFamily::W4 => (CalendarVarying, ExposureVarying),
        }
    }

    /// Multiplier that puts a uniform weight at 1: `J - 1` for `w1`,
    /// `J - 2` for the others.
    pub fn scale_factor(self, n_sequences: usize) -> f64 {
        let j = n_sequences as f64 + 1.0;
        match self {
            WeightFamily::W1 => j - 1.0,
            _ => j - 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightProfile {
    pub analysis: StructureKind,
    pub truth: StructureKind,
    pub gamma: f64,
    /// Estimand labels: exposure times `s`, calendar periods `j`, or `1`
    /// for an immediate truth.
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub method: WeightMethod,
}

impl WeightProfile {
    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn weight(&self, index: usize) -> Option<f64> {
        self.indices
            .iter()
            .position(|&i| i == index)
            .map(|k| self.weights[k])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices.iter().copied().zip(self.weights.iter().copied())
    }
}

fn check_sequences(q: usize) -> Result<()> {
    if q < 2 {
        return Err(Error::DegenerateDesign(format!(
            "weights need at least 2 sequences, got {q}"
        )));
    }
    Ok(())
}

/// Closed-form weights of the IT estimator on exposure-time effects,
/// `s = 1..=Q`.
pub fn w1_exposure_weights(q: usize, gamma: f64) -> Result<WeightProfile> {
    check_sequences(q)?;
    check_gamma(gamma)?;
    let qf = q as f64;
    let denom = qf * (qf + 1.0) * (gamma * qf * qf + 2.0 * qf - gamma * qf - 2.0);
    let weights = (1..=q)
        .map(|s| {
            let s = s as f64;
            6.0 * (s - qf - 1.0) * ((1.0 + 2.0 * gamma * qf) * s - (1.0 + gamma + gamma * qf) * qf)
                / denom
        })
        .collect();
    Ok(WeightProfile {
        analysis: StructureKind::Immediate,
        truth: StructureKind::ExposureVarying,
        gamma,
        indices: (1..=q).collect(),
        weights,
        method: WeightMethod::Analytic,
    })
}

/// Closed-form weights of the IT estimator on calendar-time effects,
/// `j = 2..=Q`. They do not depend on `gamma`.
pub fn w2_calendar_weights(q: usize) -> Result<WeightProfile> {
    check_sequences(q)?;
    let qf = q as f64;
    let denom = qf * (qf + 1.0) * (qf - 1.0);
    let weights = (2..=q)
        .map(|j| {
            let j = j as f64;
            6.0 * (j - 1.0) * (qf + 1.0 - j) / denom
        })
        .collect();
    Ok(WeightProfile {
        analysis: StructureKind::Immediate,
        truth: StructureKind::CalendarVarying,
        gamma: f64::NAN,
        indices: (2..=q).collect(),
        weights,
        method: WeightMethod::Analytic,
    })
}

/// ETATE weights `(w3(2), w3(3))` for three sequences and four periods.
/// Defined on the closed interval `[0, 1]`.
pub fn w3_closed_form_q3(gamma: f64) -> [f64; 2] {
    let g2 = gamma * gamma;
    let d = 2.0 * (9.0 * g2 + 39.0 * gamma + 13.0);
    [
        (-9.0 * g2 + 30.0 * gamma + 12.0) / d,
        (27.0 * g2 + 48.0 * gamma + 14.0) / d,
    ]
}

/// CTATE weights `(w4(1), w4(2))` for three sequences with period 4
/// excluded. Defined on the closed interval `[0, 1]`.
pub fn w4_closed_form_q3(gamma: f64) -> [f64; 2] {
    let g2 = gamma * gamma;
    let d = 2.0 * (3.0 * g2 + 8.0 * gamma + 4.0);
    [
        (9.0 * g2 + 15.0 * gamma + 6.0) / d,
        (-3.0 * g2 + gamma + 2.0) / d,
    ]
}

/// Whether the final period's cells enter the analysis model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinalPeriod {
    Retain,
    Exclude,
}

/// Full output of the numeric engine.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaDecomposition {
    pub profile: WeightProfile,
    /// Per-sequence aggregate weights `lambda_qj` of the scalar estimator,
    /// `Q x J`, zero in excluded cells.
    pub sequence_weights: DMatrix<f64>,
    /// Per-coefficient rows of `(Z'V^-1 Z)^-1 Z'V^-1` for the treatment
    /// block, collapsed to sequences: one `Q x J` matrix per coefficient.
    pub coefficient_weights: Vec<DMatrix<f64>>,
    /// Sum of the estimator weights over each period; the weight carried by
    /// each period effect of the truth.
    pub period_weight_sums: Vec<f64>,
}

/// Numeric decomposition with the default final-period convention: the
/// CTI analysis drops period `J`, the other analyses keep it.
pub fn lambda_weights(
    design: &DesignSpec,
    analysis: StructureKind,
    truth: StructureKind,
    gamma: f64,
) -> Result<WeightProfile> {
    let final_period = if analysis == StructureKind::CalendarVarying {
        FinalPeriod::Exclude
    } else {
        FinalPeriod::Retain
    };
    Ok(lambda_decomposition(design, analysis, truth, gamma, final_period)?.profile)
}

pub fn lambda_decomposition(
    design: &DesignSpec,
    analysis: StructureKind,
    truth: StructureKind,
    gamma: f64,
    final_period: FinalPeriod,
) -> Result<LambdaDecomposition> {
    check_gamma(gamma)?;
    let dm = design_matrix(design, analysis, final_period == FinalPeriod::Exclude)?;
    let n_j = design.n_periods();
    let n_q = design.n_sequences();
    let z = dm.matrix();
    let p = z.ncols();
    let t = dm.n_treatment_columns();
    let s = 1.0 / (1.0 - gamma);

    // W Z per cluster (only active rows), and B = Z' W Z.
    let mut info = DMatrix::zeros(p, p);
    let mut wz_blocks = Vec::with_capacity(dm.n_clusters());
    for c in 0..dm.n_clusters() {
        let periods = dm.active_periods(c);
        let block = dm.cluster_block(c);
        let cf = precision_offdiag_factor(gamma, periods.len());
        let colsum = block.row_sum();
        let mut wz = block.clone();
        for r in 0..wz.nrows() {
            for k in 0..p {
                wz[(r, k)] = s * (block[(r, k)] - cf * colsum[k]);
            }
        }
        info += block.transpose() * &wz;
        wz_blocks.push((periods, wz));
    }
    let chol = nalgebra::Cholesky::new(info).ok_or(Error::SingularDesign)?;
    // rows of B^-1 for the treatment block, as columns
    let mut rhs = DMatrix::zeros(p, t);
    for k in 0..t {
        rhs[(k, k)] = 1.0;
    }
    let binv_t = chol.solve(&rhs);
    let contrast = estimator_contrast(t, p);
    let binv_c: DVector<f64> = chol.solve(&contrast);

    let mut sequence_weights = DMatrix::zeros(n_q, n_j);
    let mut coefficient_weights = vec![DMatrix::zeros(n_q, n_j); t];
    for (c, (periods, wz)) in wz_blocks.iter().enumerate() {
        let q = design.sequence_of(c);
        let agg = wz * &binv_c;
        let per_coef = wz * &binv_t;
        for (r, &j) in periods.iter().enumerate() {
            sequence_weights[(q - 1, j - 1)] += agg[r];
            for k in 0..t {
                coefficient_weights[k][(q - 1, j - 1)] += per_coef[(r, k)];
            }
        }
    }

    let period_weight_sums = (0..n_j).map(|j| sequence_weights.column(j).sum()).collect();

    let mut indices: Vec<usize> = match truth {
        StructureKind::Immediate => vec![1],
        StructureKind::CalendarVarying => (2..n_j).collect(),
        StructureKind::ExposureVarying => {
            let max_s = (0..n_q)
                .flat_map(|qi| (0..n_j).map(move |ji| (qi, ji)))
                .filter(|&(qi, ji)| ji > qi && dm_active(&dm, design, qi + 1, ji + 1))
                .map(|(qi, ji)| ji - qi)
                .max()
                .unwrap_or(0);
            (1..=max_s).collect()
        }
    };
    indices.sort_unstable();
    let mut weights = vec![0.0; indices.len()];
    for qi in 1..=n_q {
        for j in (qi + 1)..=n_j {
            let label = match truth {
                StructureKind::Immediate => 1,
                StructureKind::ExposureVarying => j - qi,
                StructureKind::CalendarVarying => {
                    if j == n_j {
                        continue;
                    }
                    j
                }
            };
            if let Some(pos) = indices.iter().position(|&i| i == label) {
                weights[pos] += sequence_weights[(qi - 1, j - 1)];
            }
        }
    }
    Ok(LambdaDecomposition {
        profile: WeightProfile {
            analysis,
            truth,
            gamma,
            indices,
            weights,
            method: WeightMethod::Numeric,
        },
        sequence_weights,
        coefficient_weights,
        period_weight_sums,
    })
}

fn dm_active(dm: &crate::design::DesignMatrix, design: &DesignSpec, q: usize, j: usize) -> bool {
    design
        .assignment()
        .iter()
        .position(|&s| s == q)
        .map(|c| dm.row_mask()[dm.row_index(c, j)])
        .unwrap_or(false)
}

/// ETATE estimator weights on calendar-time effects.
pub fn w3_etate_weights(design: &DesignSpec, gamma: f64) -> Result<WeightProfile> {
    lambda_weights(
        design,
        StructureKind::ExposureVarying,
        StructureKind::CalendarVarying,
        gamma,
    )
}

/// CTATE estimator weights on exposure-time effects, with the final
/// period's cells excluded from the CTI fit.
pub fn w4_ctate_weights(design: &DesignSpec, gamma: f64) -> Result<WeightProfile> {
    Ok(lambda_decomposition(
        design,
        StructureKind::CalendarVarying,
        StructureKind::ExposureVarying,
        gamma,
        FinalPeriod::Exclude,
    )?
    .profile)
}

/// `sum_k weight_k * effect_k`, matching profile labels to the truth's.
pub fn expected_misspecified_estimate(
    profile: &WeightProfile,
    truth: &TreatmentStructure,
) -> Result<f64> {
    let effects = truth.labelled_effects();
    let lookup = |label: usize| -> Option<f64> {
        match truth {
            TreatmentStructure::Immediate { theta } => Some(*theta),
            _ => effects.iter().find(|(l, _)| *l == label).map(|(_, v)| *v),
        }
    };
    if truth.kind() != profile.truth && truth.kind() != StructureKind::Immediate {
        return Err(Error::DimensionMismatch {
            what: format!(
                "profile built for a {} truth applied to a {} truth",
                profile.truth.model_label(),
                truth.kind().model_label()
            ),
            expected: profile.indices.len(),
            found: effects.len(),
        });
    }
    let mut total = 0.0;
    for (label, w) in profile.iter() {
        let v = lookup(label).ok_or_else(|| Error::DimensionMismatch {
            what: format!("truth has no effect at index {label}"),
            expected: profile.indices.len(),
            found: effects.len(),
        })?;
        total += w * v;
    }
    Ok(total)
}

/// The complete standard design with `Q` sequences, one cluster each.
pub fn reference_design(n_sequences: usize) -> Result<DesignSpec> {
    check_sequences(n_sequences)?;
    DesignSpec::new(n_sequences, n_sequences + 1, 1)
}

/// A family's weights for `Q` sequences at `gamma`.
pub fn family_weights(family: WeightFamily, n_sequences: usize, gamma: f64) -> Result<WeightProfile> {
    match family {
        WeightFamily::W1 => w1_exposure_weights(n_sequences, gamma),
        WeightFamily::W2 => {
            check_gamma(gamma)?;
            let mut p = w2_calendar_weights(n_sequences)?;
            p.gamma = gamma;
            Ok(p)
        }
        WeightFamily::W3 => w3_etate_weights(&reference_design(n_sequences)?, gamma),
        WeightFamily::W4 => w4_ctate_weights(&reference_design(n_sequences)?, gamma),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub family: WeightFamily,
    pub n_sequences: usize,
    pub gamma: f64,
    pub index: usize,
    pub weight: f64,
    pub scaled_weight: f64,
}

/// One row per `(Q, gamma, estimand index)`, in the order given.
pub fn weight_curve_table(
    family: WeightFamily,
    q_list: &[usize],
    gamma_list: &[f64],
) -> Result<Vec<WeightRow>> {
    let mut rows = Vec::new();
    for &q in q_list {
        for &g in gamma_list {
            let profile = family_weights(family, q, g)?;
            let factor = family.scale_factor(q);
            rows.extend(profile.iter().map(|(index, weight)| WeightRow {
                family,
                n_sequences: q,
                gamma: g,
                index,
                weight,
                scaled_weight: factor * weight,
            }));
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn w1_spot_values() {
        // gamma = 0 form: 6 (s-Q-1)(s-Q) / (Q (Q+1) (2Q-2)) at Q=9, s=1
        let direct = 6.0 * (1.0 - 10.0) * (1.0 - 9.0) / (9.0 * 10.0 * 16.0);
        let p = w1_exposure_weights(9, 0.0).unwrap();
        assert!(close(p.weights[0], direct, 1e-15));
        assert!(close(p.weights[0], 0.3, 1e-12));
        for q in 2..=12 {
            let p = w1_exposure_weights(q, 0.0).unwrap();
            assert!(p.weights[q - 1].abs() < 1e-15);
        }
        let p = w1_exposure_weights(2, 0.999_999_999).unwrap();
        assert!(close(p.weights[0], 1.5, 1e-6));
        assert!(close(p.weights[1], -0.5, 1e-6));
        assert!(close(p.sum(), 1.0, 1e-12));
    }

    #[test]
    fn w2_spot_values() {
        let p = w2_calendar_weights(3).unwrap();
        assert_eq!(p.weights, vec![0.5, 0.5]);
        let p = w2_calendar_weights(9).unwrap();
        assert!(close(p.weights[0], 1.0 / 15.0, 1e-15));
        assert!(p.weights.iter().all(|&w| w >= 0.0));
        assert!(close(p.sum(), 1.0, 1e-14));
        assert!(matches!(
            w2_calendar_weights(1),
            Err(Error::DegenerateDesign(_))
        ));
        assert!(w1_exposure_weights(1, 0.2).is_err());
        assert!(matches!(
            w1_exposure_weights(3, 1.0),
            Err(Error::InvalidGamma(_))
        ));
    }

    #[test]
    fn closed_forms_at_ends() {
        let a = w3_closed_form_q3(0.0);
        assert!(close(a[0], 6.0 / 13.0, 1e-15) && close(a[1], 7.0 / 13.0, 1e-15));
        let b = w3_closed_form_q3(1.0);
        assert!(close(b[0], 33.0 / 122.0, 1e-15) && close(b[1], 89.0 / 122.0, 1e-15));
        let c = w4_closed_form_q3(0.0);
        assert!(close(c[0], 0.75, 1e-15) && close(c[1], 0.25, 1e-15));
        let d = w4_closed_form_q3(1.0);
        assert!(close(d[0], 1.0, 1e-15) && close(d[1], 0.0, 1e-15));
    }

    #[test]
    fn numeric_matches_closed_forms() {
        let d = reference_design(3).unwrap();
        for g in [0.0, 0.25, 0.5, 0.75, 1.0 - 1e-6] {
            let w3 = w3_etate_weights(&d, g).unwrap();
            assert_eq!(w3.indices, vec![2, 3]);
            let cf = w3_closed_form_q3(g);
            assert!(close(w3.weights[0], cf[0], 1e-9), "{g}: {:?} vs {cf:?}", w3.weights);
            assert!(close(w3.weights[1], cf[1], 1e-9));
            let w4 = w4_ctate_weights(&d, g).unwrap();
            assert_eq!(w4.indices, vec![1, 2]);
            let cf = w4_closed_form_q3(g);
            assert!(close(w4.weights[0], cf[0], 1e-9), "{g}: {:?} vs {cf:?}", w4.weights);
            assert!(close(w4.weights[1], cf[1], 1e-9));
        }
    }

    #[test]
    fn engine_matches_analytic() {
        let g = 10.0 / 13.0;
        let d = reference_design(9).unwrap();
        let num = lambda_weights(&d, StructureKind::Immediate, StructureKind::ExposureVarying, g).unwrap();
        let ana = w1_exposure_weights(9, g).unwrap();
        assert_eq!(num.indices, ana.indices);
        for (a, b) in num.weights.iter().zip(&ana.weights) {
            assert!(close(*a, *b, 1e-9));
        }
        for g in [0.0, 0.3, 10.0 / 13.0] {
            let num = lambda_weights(&d, StructureKind::Immediate, StructureKind::CalendarVarying, g).unwrap();
            let ana = w2_calendar_weights(9).unwrap();
            assert_eq!(num.indices, ana.indices);
            for (a, b) in num.weights.iter().zip(&ana.weights) {
                assert!(close(*a, *b, 1e-9));
            }
        }
    }

    #[test]
    fn multiple_clusters_per_sequence_agree() {
        let one = reference_design(5).unwrap();
        let three = DesignSpec::new(15, 6, 1).unwrap();
        for family in WeightFamily::ALL {
            let (a, t) = family.pair();
            let x = lambda_weights(&one, a, t, 0.4).unwrap();
            let y = lambda_weights(&three, a, t, 0.4).unwrap();
            for (u, v) in x.weights.iter().zip(&y.weights) {
                assert!(close(*u, *v, 1e-10));
            }
        }
    }

    #[test]
    fn correctly_specified_is_uniform() {
        let d = reference_design(6).unwrap();
        for kind in StructureKind::ALL {
            for g in [0.0, 0.5, 0.9] {
                let p = lambda_weights(&d, kind, kind, g).unwrap();
                let n = p.weights.len() as f64;
                for w in &p.weights {
                    assert!(close(*w, 1.0 / n, 1e-10), "{kind:?} {g}: {:?}", p.weights);
                }
            }
        }
    }

    #[test]
    fn period_effects_annihilated() {
        let d = reference_design(7).unwrap();
        for a in StructureKind::ALL {
            for fp in [FinalPeriod::Retain, FinalPeriod::Exclude] {
                let dec = lambda_decomposition(&d, a, StructureKind::ExposureVarying, 0.6, fp).unwrap();
                for s in &dec.period_weight_sums {
                    assert!(s.abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn expected_estimates() {
        let c = TreatmentStructure::ExposureVarying { delta: vec![2.0; 9] };
        let p = w1_exposure_weights(9, 0.7).unwrap();
        assert!(close(expected_misspecified_estimate(&p, &c).unwrap(), 2.0, 1e-12));
        let xi = TreatmentStructure::CalendarVarying { xi: vec![3.7, -1.2] };
        let p = w2_calendar_weights(3).unwrap();
        assert!(close(
            expected_misspecified_estimate(&p, &xi).unwrap(),
            (3.7 - 1.2) / 2.0,
            1e-15
        ));
        let delta = TreatmentStructure::ExposureVarying {
            delta: vec![0.0, 0.0, 0.5, 1.0, 2.0, 4.0, 6.0, 6.0, 6.0],
        };
        let p = w1_exposure_weights(9, 10.0 / 13.0).unwrap();
        assert!(expected_misspecified_estimate(&p, &delta).unwrap() < 0.0);
        // wrong dimension
        let short = TreatmentStructure::ExposureVarying { delta: vec![1.0; 3] };
        assert!(matches!(
            expected_misspecified_estimate(&p, &short),
            Err(Error::DimensionMismatch { .. })
        ));
        // immediate truth works with any profile
        let theta = TreatmentStructure::Immediate { theta: -4.0 };
        assert!(close(expected_misspecified_estimate(&p, &theta).unwrap(), -4.0, 1e-12));
    }

    #[test]
    fn table_rows() {
        let rows = weight_curve_table(WeightFamily::W2, &[3], &[0.0]).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| close(r.scaled_weight, 1.0, 1e-15)));
        let rows = weight_curve_table(WeightFamily::W1, &[9], &[0.0]).unwrap();
        let last = rows.iter().find(|r| r.index == 9).unwrap();
        assert_eq!(last.scaled_weight, 0.0);
        let rows = weight_curve_table(WeightFamily::W3, &[3], &[0.0]).unwrap();
        assert!(close(rows[0].scaled_weight, 12.0 / 13.0, 1e-9));
        assert!(close(rows[1].scaled_weight, 14.0 / 13.0, 1e-9));
    }
}
