//! Generalized least squares on cluster-period means.
//!
//! Every cluster contributes an exchangeable block over its active periods,
//! with precision `(I - c 11') / (1 - gamma)` where
//! `c = gamma / (1 + (m - 1) gamma)`. The normal equations are assembled
//! from per-cluster sufficient statistics so that evaluating a new `gamma`
//! costs one `p x p` accumulation and a Cholesky factorization.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::correlation::{check_gamma, log_det_block, precision_offdiag_factor, CorrelationKind, CorrelationSpec};
use crate::design::{DesignMatrix, StructureKind};
use crate::error::{Error, Result};

/// Upper end of the variance component search.
pub const GAMMA_SEARCH_MAX: f64 = 1.0 - 1e-6;
/// Absolute tolerance of the search on `gamma`.
pub const GAMMA_SEARCH_TOL: f64 = 1e-8;
pub const GAMMA_SEARCH_MAX_ITER: usize = 200;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    kind: StructureKind,
    correlation: CorrelationKind,
    coefficients: DVector<f64>,
    unscaled_information: DMatrix<f64>,
    gamma: f64,
    scale: f64,
    n_clusters: usize,
    n_obs: usize,
    n_periods: usize,
    treatment_labels: Vec<usize>,
    log_likelihood: Option<f64>,
    reml_log_likelihood: Option<f64>,
    at_boundary: bool,
}

impl FitResult {
    pub fn kind(&self) -> StructureKind {
        self.kind
    }

    pub fn correlation(&self) -> CorrelationKind {
        self.correlation
    }

    /// Treatment block followed by the period effects.
    pub fn coefficients(&self) -> &DVector<f64> {
        &self.coefficients
    }

    pub fn n_treatment(&self) -> usize {
        self.treatment_labels.len()
    }

    pub fn treatment_effects(&self) -> &[f64] {
        &self.coefficients.as_slice()[..self.n_treatment()]
    }

    pub fn period_effects(&self) -> &[f64] {
        &self.coefficients.as_slice()[self.n_treatment()..]
    }

    pub fn treatment_labels(&self) -> &[usize] {
        &self.treatment_labels
    }

    /// `Z' V^-1 Z` with `V` the scale-free correlation.
    pub fn unscaled_information(&self) -> &DMatrix<f64> {
        &self.unscaled_information
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `Var(Ybar_ij)`, known or estimated.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    /// Number of cluster-period means used.
    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_periods(&self) -> usize {
        self.n_periods
    }

    /// Maximized (full) log-likelihood of the means.
    pub fn log_likelihood(&self) -> Option<f64> {
        self.log_likelihood
    }

    /// Maximized restricted log-likelihood, feasible fits only.
    pub fn reml_log_likelihood(&self) -> Option<f64> {
        self.reml_log_likelihood
    }

    /// `true` when the estimated `gamma` sits on an end of the search range
    /// or the residual scale is zero.
    pub fn at_boundary(&self) -> bool {
        self.at_boundary
    }

    /// Number of mean plus variance parameters.
    pub fn n_parameters(&self) -> usize {
        self.coefficients.len() + self.correlation.n_variance_params()
    }

    /// Averaging contrast of the model's scalar estimator: `theta`, the
    /// unweighted mean of `delta_s` or the unweighted mean of `xi_j`.
    pub fn contrast(&self) -> DVector<f64> {
        estimator_contrast(self.n_treatment(), self.coefficients.len())
    }

    /// IT, ETATE or CTATE depending on the model.
    pub fn estimate(&self) -> f64 {
        self.contrast().dot(&self.coefficients)
    }

    /// `(Z' V^-1 Z)^-1`.
    pub fn unscaled_covariance(&self) -> Result<DMatrix<f64>> {
        let chol = factor(&self.unscaled_information)?;
        Ok(chol.inverse())
    }

    /// Replaces the scale, e.g. with a known `Var(Ybar_ij)`.
    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }
}

/// Contrast averaging the first `t` of `p` coefficients.
pub fn estimator_contrast(t: usize, p: usize) -> DVector<f64> {
    let mut c = DVector::zeros(p);
    for k in 0..t {
        c[k] = 1.0 / t as f64;
    }
    c
}

struct ClusterStats {
    m: usize,
    ztz: DMatrix<f64>,
    zsum: DVector<f64>,
    zty: DVector<f64>,
    yty: f64,
    ysum: f64,
}

/// Per-cluster cross products of the active rows.
struct Sufficient {
    clusters: Vec<ClusterStats>,
    n: usize,
    p: usize,
}

struct Evaluation {
    info: DMatrix<f64>,
    beta: DVector<f64>,
    quad: f64,
    log_det_info: f64,
    log_det_v: f64,
}

fn check_means(dm: &DesignMatrix, means: &DMatrix<f64>) -> Result<()> {
    if means.nrows() != dm.n_clusters() || means.ncols() != dm.n_periods() {
        return Err(Error::DimensionMismatch {
            what: "cluster-period means".into(),
            expected: dm.n_clusters() * dm.n_periods(),
            found: means.nrows() * means.ncols(),
        });
    }
    Ok(())
}

fn factor(info: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let chol = Cholesky::new(info.clone()).ok_or(Error::SingularDesign)?;
    let max_diag = info.diagonal().iter().cloned().fold(0.0, f64::max);
    let l = chol.l_dirty();
    let min_pivot = (0..info.nrows()).map(|k| l[(k, k)] * l[(k, k)]).fold(f64::INFINITY, f64::min);
    if min_pivot.is_nan() || min_pivot <= 1e-11 * max_diag.max(f64::MIN_POSITIVE) {
        return Err(Error::SingularDesign);
    }
    Ok(chol)
}

impl Sufficient {
    fn new(dm: &DesignMatrix, means: &DMatrix<f64>) -> Result<Self> {
        check_means(dm, means)?;
        let z = dm.matrix();
        let p = z.ncols();
        let mut clusters = Vec::with_capacity(dm.n_clusters());
        let mut n = 0;
        for c in 0..dm.n_clusters() {
            let periods = dm.active_periods(c);
            if periods.is_empty() {
                continue;
            }
            let mut ztz = DMatrix::zeros(p, p);
            let mut zsum = DVector::zeros(p);
            let mut zty = DVector::zeros(p);
            let (mut yty, mut ysum) = (0.0, 0.0);
            for &j in &periods {
                let r = dm.row_index(c, j);
                let y = means[(c, j - 1)];
                for a in 0..p {
                    let za = z[(r, a)];
                    if za == 0.0 {
                        continue;
                    }
                    zsum[a] += za;
                    zty[a] += za * y;
                    for b in 0..p {
                        ztz[(a, b)] += za * z[(r, b)];
                    }
                }
                yty += y * y;
                ysum += y;
            }
            n += periods.len();
            clusters.push(ClusterStats {
                m: periods.len(),
                ztz,
                zsum,
                zty,
                yty,
                ysum,
            });
        }
        Ok(Self { clusters, n, p })
    }

    fn evaluate(&self, gamma: f64) -> Result<Evaluation> {
        let p = self.p;
        let s = 1.0 / (1.0 - gamma);
        let mut info = DMatrix::zeros(p, p);
        let mut rhs = DVector::zeros(p);
        let mut ywy = 0.0;
        let mut log_det_v = 0.0;
        for cl in &self.clusters {
            let c = precision_offdiag_factor(gamma, cl.m);
            info += (&cl.ztz - (&cl.zsum * cl.zsum.transpose()) * c) * s;
            rhs += (&cl.zty - &cl.zsum * (c * cl.ysum)) * s;
            ywy += s * (cl.yty - c * cl.ysum * cl.ysum);
            log_det_v += log_det_block(gamma, cl.m);
        }
        let chol = factor(&info)?;
        let beta = chol.solve(&rhs);
        let quad = (ywy - rhs.dot(&beta)).max(0.0);
        let l = chol.l_dirty();
        let log_det_info = 2.0 * (0..p).map(|k| l[(k, k)].ln()).sum::<f64>();
        Ok(Evaluation {
            info,
            beta,
            quad,
            log_det_info,
            log_det_v,
        })
    }

    fn reml(&self, e: &Evaluation) -> f64 {
        let df = (self.n - self.p) as f64;
        -0.5 * (df * (LN_2PI + (e.quad / df).ln() + 1.0) + e.log_det_v + e.log_det_info)
    }

    fn ml(&self, e: &Evaluation) -> f64 {
        let n = self.n as f64;
        -0.5 * (n * (LN_2PI + (e.quad / n).ln() + 1.0) + e.log_det_v)
    }
}

/// Weighted residual sum of squares `r' V^-1 r`, from the rows directly.
fn weighted_rss(dm: &DesignMatrix, means: &DMatrix<f64>, beta: &DVector<f64>, gamma: f64) -> f64 {
    let z = dm.matrix();
    let s = 1.0 / (1.0 - gamma);
    let mut total = 0.0;
    for c in 0..dm.n_clusters() {
        let periods = dm.active_periods(c);
        if periods.is_empty() {
            continue;
        }
        let cf = precision_offdiag_factor(gamma, periods.len());
        let (mut ss, mut sum) = (0.0, 0.0);
        for &j in &periods {
            let r = dm.row_index(c, j);
            let fitted: f64 = (0..z.ncols()).map(|k| z[(r, k)] * beta[k]).sum();
            let e = means[(c, j - 1)] - fitted;
            ss += e * e;
            sum += e;
        }
        total += s * (ss - cf * sum * sum);
    }
    total.max(0.0)
}

/// Residuals below round-off of the response count as an exact fit.
fn is_exact_fit(rss: f64, suff: &Sufficient) -> bool {
    let tss: f64 = suff.clusters.iter().map(|c| c.yty).sum();
    rss <= 1e-24 * tss.max(1.0)
}

fn build_fit(
    dm: &DesignMatrix,
    means: &DMatrix<f64>,
    suff: &Sufficient,
    gamma: f64,
    correlation: CorrelationKind,
) -> Result<(FitResult, Evaluation)> {
    let eval = suff.evaluate(gamma)?;
    let mut rss = weighted_rss(dm, means, &eval.beta, gamma);
    if is_exact_fit(rss, suff) {
        rss = 0.0;
    }
    let df = suff.n.saturating_sub(suff.p).max(1) as f64;
    let log_likelihood = if rss > 0.0 {
        let n = suff.n as f64;
        Some(-0.5 * (n * (LN_2PI + (rss / n).ln() + 1.0) + eval.log_det_v))
    } else {
        None
    };
    let fit = FitResult {
        kind: dm.kind(),
        correlation,
        coefficients: eval.beta.clone(),
        unscaled_information: eval.info.clone(),
        gamma,
        scale: rss / df,
        n_clusters: suff.clusters.len(),
        n_obs: suff.n,
        n_periods: dm.n_periods(),
        treatment_labels: dm.treatment_labels(),
        log_likelihood,
        reml_log_likelihood: None,
        at_boundary: rss == 0.0,
    };
    Ok((fit, eval))
}

/// GLS at a fixed `gamma`. The scale is estimated by `r' V^-1 r / (n - p)`;
/// replace it with [`FitResult::with_scale`] when the components are known.
pub fn fit_gls(dm: &DesignMatrix, means: &DMatrix<f64>, gamma: f64) -> Result<FitResult> {
    check_gamma(gamma)?;
    let suff = Sufficient::new(dm, means)?;
    Ok(build_fit(dm, means, &suff, gamma, CorrelationKind::Exchangeable)?.0)
}

/// Ordinary least squares: the independence working model.
pub fn fit_ols(dm: &DesignMatrix, means: &DMatrix<f64>) -> Result<FitResult> {
    let suff = Sufficient::new(dm, means)?;
    Ok(build_fit(dm, means, &suff, 0.0, CorrelationKind::Independence)?.0)
}

/// GLS with `gamma` and scale implied by known variance components for
/// cells of `k` individuals.
pub fn fit_gls_with_components(
    dm: &DesignMatrix,
    means: &DMatrix<f64>,
    spec: &CorrelationSpec,
    k: usize,
) -> Result<FitResult> {
    let gamma = spec.gamma(k)?;
    let scale = spec.cell_mean_variance(k)?;
    let suff = Sufficient::new(dm, means)?;
    let correlation = match spec.kind {
        CorrelationKind::Independence => CorrelationKind::Independence,
        _ => CorrelationKind::Exchangeable,
    };
    Ok(build_fit(dm, means, &suff, gamma, correlation)?.0.with_scale(scale))
}

/// Brent's minimizer (golden section with parabolic steps) on `[a, b]`.
fn brent_minimize<F>(mut f: F, a: f64, b: f64, tol: f64, max_iter: usize) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> f64,
{
    const CGOLD: f64 = 0.381_966_011_250_105_1;
    let (mut a, mut b) = (a, b);
    let mut x = a + CGOLD * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e): (f64, f64) = (0.0, 0.0);
    for _ in 0..max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = tol * 0.5 + 1e-12 * x.abs();
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            return Ok((x, fx));
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (a - x) && p < q * (b - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm - x >= 0.0 { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else {
            x + if d >= 0.0 { tol1 } else { -tol1 }
        };
        let fu = f(u);
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
    })
}

/// Maximizes `objective` over `[0, GAMMA_SEARCH_MAX]`: a coarse grid picks
/// the bracket, Brent refines it, and the range ends are kept when they
/// beat the interior optimum. Returns `(gamma, value, at_boundary)`.
fn maximize_gamma<F>(mut objective: F) -> Result<(f64, f64, bool)>
where
    F: FnMut(f64) -> f64,
{
    const GRID: usize = 24;
    let grid: Vec<f64> = (0..=GRID)
        .map(|k| GAMMA_SEARCH_MAX * k as f64 / GRID as f64)
        .collect();
    let values: Vec<f64> = grid.iter().map(|&g| objective(g)).collect();
    let mut best = 0;
    for k in 1..values.len() {
        if values[k] > values[best] || values[best].is_nan() {
            best = k;
        }
    }
    if !values[best].is_finite() {
        return Err(Error::NonConvergence { iterations: 0 });
    }
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(GRID)];
    let (g, neg) = brent_minimize(
        |g| {
            let v = objective(g);
            if v.is_finite() {
                -v
            } else {
                f64::INFINITY
            }
        },
        lo,
        hi,
        GAMMA_SEARCH_TOL,
        GAMMA_SEARCH_MAX_ITER,
    )?;
    let mut out = (g, -neg, false);
    for edge in [0.0, GAMMA_SEARCH_MAX] {
        if (edge - g).abs() < 1e-6 {
            let v = objective(edge);
            if v >= out.1 {
                out = (edge, v, true);
            }
        }
    }
    Ok(out)
}

/// Feasible GLS: `gamma` maximizes the restricted likelihood of the
/// random-intercept model on the cluster-period means, profiled over the
/// scale. The full log-likelihood stored on the fit is maximized separately
/// so that information criteria compare fixed-effect structures on a common
/// footing.
///
/// A response fitted exactly at `gamma = 0` has no residual scale; that fit
/// is returned at `gamma = 0` with zero scale and the boundary flag set.
pub fn fit_feasible_gls(dm: &DesignMatrix, means: &DMatrix<f64>) -> Result<FitResult> {
    let suff = Sufficient::new(dm, means)?;
    if suff.clusters.len() < 2 {
        return Err(Error::TooFewClusters(suff.clusters.len()));
    }
    if suff.n <= suff.p {
        return Err(Error::SingularDesign);
    }
    let base = suff.evaluate(0.0)?;
    let base_rss = weighted_rss(dm, means, &base.beta, 0.0);
    if is_exact_fit(base_rss, &suff) {
        let (mut fit, _) = build_fit(dm, means, &suff, 0.0, CorrelationKind::Exchangeable)?;
        fit.scale = 0.0;
        fit.at_boundary = true;
        fit.log_likelihood = None;
        return Ok(fit);
    }
    let objective = |f: fn(&Sufficient, &Evaluation) -> f64| {
        let suff = &suff;
        move |g: f64| match suff.evaluate(g) {
            Ok(e) if e.quad > 0.0 => f(suff, &e),
            _ => f64::NEG_INFINITY,
        }
    };
    let (gamma, reml, boundary) = maximize_gamma(objective(Sufficient::reml))?;
    let (_, ml, _) = maximize_gamma(objective(Sufficient::ml))?;
    let (mut fit, eval) = build_fit(dm, means, &suff, gamma, CorrelationKind::Exchangeable)?;
    drop(eval);
    fit.reml_log_likelihood = Some(reml);
    fit.log_likelihood = Some(ml);
    fit.at_boundary = boundary;
    Ok(fit)
}

pub fn aggregate_etate(fit: &FitResult) -> Result<f64> {
    if fit.kind() != StructureKind::ExposureVarying {
        return Err(Error::WrongStructure {
            expected: "ETI",
            found: fit.kind().model_label(),
        });
    }
    Ok(fit.estimate())
}

pub fn aggregate_ctate(fit: &FitResult) -> Result<f64> {
    if fit.kind() != StructureKind::CalendarVarying {
        return Err(Error::WrongStructure {
            expected: "CTI",
            found: fit.kind().model_label(),
        });
    }
    Ok(fit.estimate())
}

/// `(AIC, BIC)` from the fit's maximized log-likelihood, counting mean
/// parameters plus variance parameters (2 exchangeable, 1 independence).
pub fn information_criteria(fit: &FitResult, n_obs: usize) -> Result<(f64, f64)> {
    let ll = fit.log_likelihood().ok_or(Error::MissingLikelihood)?;
    Ok(criteria_from_likelihood(ll, fit.n_parameters(), n_obs))
}

pub fn criteria_from_likelihood(log_likelihood: f64, n_params: usize, n_obs: usize) -> (f64, f64) {
    let p = n_params as f64;
    (
        -2.0 * log_likelihood + 2.0 * p,
        -2.0 * log_likelihood + p * (n_obs as f64).ln(),
    )
}

/// Cluster-period means of individual outcomes laid out cluster-major,
/// then period, then individual.
pub fn collapse_to_means(
    outcomes: &[f64],
    n_clusters: usize,
    n_periods: usize,
    cell_size: usize,
) -> Result<DMatrix<f64>> {
    let data = crate::dgp::TrialData::from_outcomes(n_clusters, n_periods, cell_size, outcomes.to_vec())?;
    Ok(data.means().clone())
}
