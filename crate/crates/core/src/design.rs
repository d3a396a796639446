//! Complete stepped-wedge designs and their cluster-period design matrices.
//!
//! All indices on the public surface are 1-based: sequences `q = 1..=Q`,
//! periods `j = 1..=J`, exposure times `s = 1..=J-1`. Clusters are 0-based
//! row blocks. Sequence `q` crosses over to treatment at period `q + 1`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of a complete, balanced stepped-wedge trial.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesignSpec {
    n_clusters: usize,
    n_periods: usize,
    n_sequences: usize,
    clusters_per_sequence: usize,
    cell_size: usize,
    /// Sequence (1-based) of each cluster.
    assignment: Vec<usize>,
}

impl DesignSpec {
    /// Builds the standard design with `Q = J - 1` sequences and clusters
    /// assigned round-robin: cluster `c` goes to sequence `(c mod Q) + 1`.
    pub fn new(n_clusters: usize, n_periods: usize, cell_size: usize) -> Result<Self> {
        let n_sequences = Self::check_geometry(n_clusters, n_periods, cell_size)?;
        let assignment = (0..n_clusters).map(|c| c % n_sequences + 1).collect();
        Ok(Self {
            n_clusters,
            n_periods,
            n_sequences,
            clusters_per_sequence: n_clusters / n_sequences,
            cell_size,
            assignment,
        })
    }

    /// Builds a design from an explicit cluster to sequence map. Every
    /// sequence must receive the same number of clusters.
    pub fn with_assignment(n_periods: usize, cell_size: usize, assignment: Vec<usize>) -> Result<Self> {
        let n_clusters = assignment.len();
        let n_sequences = Self::check_geometry(n_clusters, n_periods, cell_size)?;
        let mut counts = vec![0usize; n_sequences];
        for &q in &assignment {
            if q == 0 || q > n_sequences {
                return Err(Error::IndexOutOfRange {
                    what: "sequence",
                    index: q,
                    max: n_sequences,
                });
            }
            counts[q - 1] += 1;
        }
        let per = n_clusters / n_sequences;
        if counts.iter().any(|&c| c != per) {
            return Err(Error::NonDivisibleAllocation {
                clusters: n_clusters,
                sequences: n_sequences,
            });
        }
        Ok(Self {
            n_clusters,
            n_periods,
            n_sequences,
            clusters_per_sequence: per,
            cell_size,
            assignment,
        })
    }

    fn check_geometry(n_clusters: usize, n_periods: usize, cell_size: usize) -> Result<usize> {
        if n_periods < 3 {
            return Err(Error::DegenerateDesign(format!(
                "need at least 3 periods, got {n_periods}"
            )));
        }
        if n_clusters == 0 || cell_size == 0 {
            return Err(Error::DegenerateDesign(
                "cluster count and cell size must be positive".into(),
            ));
        }
        let q = n_periods - 1;
        if !n_clusters.is_multiple_of(q) {
            return Err(Error::NonDivisibleAllocation {
                clusters: n_clusters,
                sequences: q,
            });
        }
        Ok(q)
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn n_sequences(&self) -> usize {
        self.n_sequences
    }

    pub fn clusters_per_sequence(&self) -> usize {
        self.clusters_per_sequence
    }

    pub fn cell_size(&self) -> usize {
        self.cell_size
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Sequence (1-based) of a 0-based cluster.
    pub fn sequence_of(&self, cluster: usize) -> usize {
        self.assignment[cluster]
    }

    pub fn treatment_indicator(&self, q: usize, j: usize) -> Result<bool> {
        self.check_cell(q, j)?;
        Ok(j > q)
    }

    /// Periods since crossover, 0 when untreated.
    pub fn exposure_time(&self, q: usize, j: usize) -> Result<usize> {
        self.check_cell(q, j)?;
        Ok(j.saturating_sub(q))
    }

    /// Number of treated cluster-period cells.
    pub fn treated_cells(&self) -> usize {
        self.assignment
            .iter()
            .map(|&q| self.n_periods - q)
            .sum()
    }

    fn check_cell(&self, q: usize, j: usize) -> Result<()> {
        if q == 0 || q > self.n_sequences {
            return Err(Error::IndexOutOfRange {
                what: "sequence",
                index: q,
                max: self.n_sequences,
            });
        }
        if j == 0 || j > self.n_periods {
            return Err(Error::IndexOutOfRange {
                what: "period",
                index: j,
                max: self.n_periods,
            });
        }
        Ok(())
    }
}

pub fn build_design(n_clusters: usize, n_periods: usize, cell_size: usize) -> Result<DesignSpec> {
    DesignSpec::new(n_clusters, n_periods, cell_size)
}

/// The three treatment-effect structures, used both as analysis models and
/// as data-generating truths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StructureKind {
    Immediate,
    ExposureVarying,
    CalendarVarying,
}

impl StructureKind {
    pub const ALL: [StructureKind; 3] = [
        StructureKind::Immediate,
        StructureKind::ExposureVarying,
        StructureKind::CalendarVarying,
    ];

    /// Model label: IT, ETI or CTI.
    pub fn model_label(self) -> &'static str {
        match self {
            StructureKind::Immediate => "IT",
            StructureKind::ExposureVarying => "ETI",
            StructureKind::CalendarVarying => "CTI",
        }
    }

    /// Label of the scalar estimator the model produces.
    pub fn estimator_label(self) -> &'static str {
        match self {
            StructureKind::Immediate => "IT",
            StructureKind::ExposureVarying => "ETATE",
            StructureKind::CalendarVarying => "CTATE",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        match label.trim().to_ascii_uppercase().as_str() {
            "IT" | "IMMEDIATE" => Some(StructureKind::Immediate),
            "ETI" | "ETATE" | "EXPOSURE" => Some(StructureKind::ExposureVarying),
            "CTI" | "CTATE" | "CALENDAR" => Some(StructureKind::CalendarVarying),
            _ => None,
        }
    }

    /// Number of treatment columns in a `J`-period design matrix.
    pub fn n_treatment_columns(self, n_periods: usize) -> usize {
        match self {
            StructureKind::Immediate => 1,
            StructureKind::ExposureVarying => n_periods - 1,
            StructureKind::CalendarVarying => n_periods - 2,
        }
    }

    /// Index labels of the treatment columns (exposure times for ETI,
    /// calendar periods for CTI, `1` for the single IT column).
    pub fn treatment_labels(self, n_periods: usize) -> Vec<usize> {
        match self {
            StructureKind::Immediate => vec![1],
            StructureKind::ExposureVarying => (1..n_periods).collect(),
            StructureKind::CalendarVarying => (2..n_periods).collect(),
        }
    }
}

/// A treatment-effect specification with its payload.
///
/// `delta[s - 1]` is the effect at exposure time `s` (length `J - 1`);
/// `xi[j - 2]` is the effect in calendar period `j` for `j = 2..=J-1`
/// (length `J - 2`, the final-period effect is fixed at zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreatmentStructure {
    Immediate { theta: f64 },
    ExposureVarying { delta: Vec<f64> },
    CalendarVarying { xi: Vec<f64> },
}

impl TreatmentStructure {
    pub fn kind(&self) -> StructureKind {
        match self {
            TreatmentStructure::Immediate { .. } => StructureKind::Immediate,
            TreatmentStructure::ExposureVarying { .. } => StructureKind::ExposureVarying,
            TreatmentStructure::CalendarVarying { .. } => StructureKind::CalendarVarying,
        }
    }

    pub fn validate(&self, n_periods: usize) -> Result<()> {
        let (found, expected, what) = match self {
            TreatmentStructure::Immediate { theta } => {
                if !theta.is_finite() {
                    return Err(Error::InvalidVariance("theta must be finite".into()));
                }
                return Ok(());
            }
            TreatmentStructure::ExposureVarying { delta } => (delta, n_periods - 1, "delta"),
            TreatmentStructure::CalendarVarying { xi } => (xi, n_periods - 2, "xi"),
        };
        if found.len() != expected {
            return Err(Error::DimensionMismatch {
                what: what.into(),
                expected,
                found: found.len(),
            });
        }
        if found.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidVariance(format!("{what} must be finite")));
        }
        Ok(())
    }

    /// Treatment effect in the cell of sequence `q`, period `j` of a
    /// `J`-period design.
    pub fn effect(&self, q: usize, j: usize, n_periods: usize) -> f64 {
        if j <= q {
            return 0.0;
        }
        match self {
            TreatmentStructure::Immediate { theta } => *theta,
            TreatmentStructure::ExposureVarying { delta } => delta[j - q - 1],
            TreatmentStructure::CalendarVarying { xi } => {
                if j < n_periods {
                    xi[j - 2]
                } else {
                    0.0
                }
            }
        }
    }

    /// Effect values keyed by their estimand labels.
    pub fn labelled_effects(&self) -> Vec<(usize, f64)> {
        match self {
            TreatmentStructure::Immediate { theta } => vec![(1, *theta)],
            TreatmentStructure::ExposureVarying { delta } => {
                delta.iter().enumerate().map(|(k, &d)| (k + 1, d)).collect()
            }
            TreatmentStructure::CalendarVarying { xi } => {
                xi.iter().enumerate().map(|(k, &x)| (k + 2, x)).collect()
            }
        }
    }
}

/// Cluster-period level design matrix `Z`: treatment columns followed by
/// period indicators, rows ordered cluster-major then period. Columns with
/// no active rows are dropped, so excluding the final period also removes
/// its period indicator and any effect seen only in that period.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    z: DMatrix<f64>,
    kind: StructureKind,
    n_clusters: usize,
    n_periods: usize,
    assignment: Vec<usize>,
    row_mask: Vec<bool>,
    treatment_labels: Vec<usize>,
    period_labels: Vec<usize>,
}

impl DesignMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn kind(&self) -> StructureKind {
        self.kind
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    pub fn n_rows(&self) -> usize {
        self.z.nrows()
    }

    pub fn n_columns(&self) -> usize {
        self.z.ncols()
    }

    pub fn n_treatment_columns(&self) -> usize {
        self.treatment_labels.len()
    }

    /// Index (`1`, exposure time or period) of each treatment column.
    pub fn treatment_labels(&self) -> Vec<usize> {
        self.treatment_labels.clone()
    }

    /// Period of each period-effect column.
    pub fn period_labels(&self) -> &[usize] {
        &self.period_labels
    }

    /// `true` for rows that take part in estimation.
    pub fn row_mask(&self) -> &[bool] {
        &self.row_mask
    }

    pub fn n_active_rows(&self) -> usize {
        self.row_mask.iter().filter(|&&m| m).count()
    }

    pub fn sequence_of(&self, cluster: usize) -> usize {
        self.assignment[cluster]
    }

    pub fn row_index(&self, cluster: usize, period: usize) -> usize {
        cluster * self.n_periods + (period - 1)
    }

    /// Active periods (1-based) of a cluster.
    pub fn active_periods(&self, cluster: usize) -> Vec<usize> {
        (1..=self.n_periods)
            .filter(|&j| self.row_mask[self.row_index(cluster, j)])
            .collect()
    }

    /// The active rows of one cluster, as a dense block.
    pub fn cluster_block(&self, cluster: usize) -> DMatrix<f64> {
        let periods = self.active_periods(cluster);
        let p = self.z.ncols();
        DMatrix::from_fn(periods.len(), p, |r, c| {
            self.z[(self.row_index(cluster, periods[r]), c)]
        })
    }

    /// Same matrix with a cluster's rows deactivated.
    pub fn without_cluster(&self, cluster: usize) -> DesignMatrix {
        let mut out = self.clone();
        for j in 1..=self.n_periods {
            let r = self.row_index(cluster, j);
            out.row_mask[r] = false;
        }
        out
    }

    /// Numerical rank of the active rows.
    pub fn active_rank(&self) -> usize {
        let rows: Vec<usize> = (0..self.n_rows()).filter(|&r| self.row_mask[r]).collect();
        let active = DMatrix::from_fn(rows.len(), self.z.ncols(), |r, c| self.z[(rows[r], c)]);
        active.rank(1e-9)
    }
}

pub fn design_matrix(
    design: &DesignSpec,
    kind: StructureKind,
    exclude_final_period: bool,
) -> Result<DesignMatrix> {
    let n_periods = design.n_periods();
    let n_clusters = design.n_clusters();
    if n_periods < 3 {
        return Err(Error::DegenerateDesign(format!(
            "need at least 3 periods, got {n_periods}"
        )));
    }
    let n_treat = kind.n_treatment_columns(n_periods);
    let p = n_treat + n_periods;
    let mut z = DMatrix::zeros(n_clusters * n_periods, p);
    let mut row_mask = vec![true; n_clusters * n_periods];
    for c in 0..n_clusters {
        let q = design.sequence_of(c);
        for j in 1..=n_periods {
            let r = c * n_periods + (j - 1);
            if j > q {
                match kind {
                    StructureKind::Immediate => z[(r, 0)] = 1.0,
                    StructureKind::ExposureVarying => z[(r, j - q - 1)] = 1.0,
                    StructureKind::CalendarVarying => {
                        if j < n_periods {
                            z[(r, j - 2)] = 1.0;
                        }
                    }
                }
            }
            z[(r, n_treat + j - 1)] = 1.0;
            if exclude_final_period && j == n_periods {
                row_mask[r] = false;
            }
        }
    }
    let keep: Vec<usize> = (0..p)
        .filter(|&k| (0..z.nrows()).any(|r| row_mask[r] && z[(r, k)] != 0.0))
        .collect();
    let all_labels = kind.treatment_labels(n_periods);
    let treatment_labels = keep.iter().filter(|&&k| k < n_treat).map(|&k| all_labels[k]).collect();
    let period_labels = keep.iter().filter(|&&k| k >= n_treat).map(|&k| k - n_treat + 1).collect();
    let z = z.select_columns(keep.iter());
    Ok(DesignMatrix {
        z,
        kind,
        n_clusters,
        n_periods,
        assignment: design.assignment().to_vec(),
        row_mask,
        treatment_labels,
        period_labels,
    })
}
