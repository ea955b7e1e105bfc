//! Minimum-trace approximation of the Frisch decomposition.
//!
//! Given a covariance (in practice, a sample correlation) matrix `Σ`, find the
//! diagonal `D` with the largest trace such that `Σ - D` stays positive
//! semidefinite and `0 ≤ D_jj ≤ Σ_jj`. The diagonal plays the role of the
//! idiosyncratic variances and `Σ - D` the shared low-rank part.
//!
//! The problem is solved by a log-barrier Newton method on `d = diag(D)`.
//! The gradient and Hessian of `-log det(Σ - D)` are `diag((Σ - D)⁻¹)` and
//! the elementwise square of `(Σ - D)⁻¹`, so each step costs one `p × p`
//! inversion.
//!
//! A singular `Σ` has no strictly feasible point. For a null vector `v`,
//! `vᵗ(Σ - D)v ≥ 0` forces `Dv = 0`, so every coordinate touched by the null
//! space is fixed at zero and the barrier runs on the remaining ones,
//! restricted to the range of `Σ`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{max_asymmetry, min_eigenvalue, sym_eigen_desc, symmetrize};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrischError {
    #[error("instrument row {0} has zero sample variance")]
    ZeroVarianceRow(usize),
    #[error("need at least 2 observations, got {0}")]
    TooFewObservations(usize),
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("no convergence after {max_iter} sweeps (last change {last_change:e}, psd violation {psd_violation:e})")]
    NoConvergence {
        max_iter: usize,
        last_d: Vec<f64>,
        last_change: f64,
        psd_violation: f64,
    },
    #[error("rank {k} out of range for dimension {p} (need 1 ≤ k < p)")]
    RankOutOfRange { k: usize, p: usize },
    #[error("invalid solver option: {0}")]
    InvalidOption(String),
}

const SYMMETRY_TOL: f64 = 1e-12;

/// A finite symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix(DMatrix<f64>);

impl SymmetricMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self, FrischError> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(FrischError::NotSymmetric(f64::INFINITY));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(FrischError::NonFinite);
        }
        let asym = max_asymmetry(&m);
        if asym > SYMMETRY_TOL {
            return Err(FrischError::NotSymmetric(asym));
        }
        Ok(Self(symmetrize(&m)))
    }

    /// Symmetrizes before validating; for matrices produced by products such
    /// as `Z Zᵗ` that are symmetric up to rounding.
    pub fn from_symmetrized(m: &DMatrix<f64>) -> Result<Self, FrischError> {
        Self::new(symmetrize(m))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

/// Row means and (population) standard deviations removed by standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardization {
    /// Map coefficients on standardized rows back to raw-instrument units.
    pub fn to_raw_coefficients(&self, delta_std: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(delta_std.len(), delta_std.iter().zip(&self.sds).map(|(d, s)| d / s))
    }
}

#[derive(Debug, Clone)]
pub struct SampleCorrelation {
    pub corr: SymmetricMatrix,
    pub scaling: Standardization,
}

/// Center each row of `z` and scale it to unit population variance.
pub fn standardize(z: &DMatrix<f64>) -> Result<(DMatrix<f64>, Standardization), FrischError> {
    let (p, n) = z.shape();
    if n < 2 {
        return Err(FrischError::TooFewObservations(n));
    }
    let mut out = z.clone();
    let mut means = Vec::with_capacity(p);
    let mut sds = Vec::with_capacity(p);
    for j in 0..p {
        let row = z.row(j);
        let mean = row.sum() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if !sd.is_finite() || sd <= 1e-12 * (1.0 + mean.abs()) {
            return Err(FrischError::ZeroVarianceRow(j));
        }
        for v in out.row_mut(j).iter_mut() {
            *v = (*v - mean) / sd;
        }
        means.push(mean);
        sds.push(sd);
    }
    Ok((out, Standardization { means, sds }))
}

/// Sample correlation of the rows of a `p × n` instrument matrix.
pub fn sample_correlation(z: &DMatrix<f64>) -> Result<SampleCorrelation, FrischError> {
    let (zs, scaling) = standardize(z)?;
    let n = zs.ncols() as f64;
    let mut corr = symmetrize(&(&zs * zs.transpose() / n));
    for i in 0..corr.nrows() {
        for j in 0..corr.ncols() {
            corr[(i, j)] = if i == j { 1.0 } else { corr[(i, j)].clamp(-1.0, 1.0) };
        }
    }
    Ok(SampleCorrelation {
        corr: SymmetricMatrix::new(corr)?,
        scaling,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Bound on the duality gap of the barrier method, relative to
    /// `mean(diag Σ)`.
    pub tol: f64,
    /// Allowed negative eigenvalue of `Σ - D`.
    pub tol_psd: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            tol_psd: 1e-8,
            max_iter: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrischDecomposition {
    /// Diagonal of `D*`.
    pub d_star: DVector<f64>,
    /// `Σ - D*`.
    pub low_rank: DMatrix<f64>,
    /// Eigenvalues of `low_rank`, descending.
    pub eigvals: DVector<f64>,
    pub eigvecs: DMatrix<f64>,
    pub iterations: usize,
}

impl FrischDecomposition {
    pub fn dim(&self) -> usize {
        self.d_star.len()
    }

    pub fn trace_d(&self) -> f64 {
        self.d_star.sum()
    }

    /// `D* + (Σ - D*)`.
    pub fn sigma(&self) -> DMatrix<f64> {
        &self.low_rank + DMatrix::from_diagonal(&self.d_star)
    }
}

/// Euclidean projection onto the PSD cone: clip negative eigenvalues.
pub fn psd_project(m: &SymmetricMatrix) -> SymmetricMatrix {
    SymmetricMatrix(psd_project_raw(m.as_matrix()))
}

fn psd_project_raw(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return m.clone();
    }
    let p = m.nrows();
    let mut out = DMatrix::zeros(p, p);
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > 0.0 {
            let v = eig.eigenvectors.column(i);
            out.ger(lambda, &v, &v, 1.0);
        }
    }
    symmetrize(&out)
}

/// Eigenvalues of `Σ` at or below this multiple of `mean(diag Σ)` are
/// treated as exact zeros.
const NULL_EIGENVALUE: f64 = 1e-10;
/// A coordinate whose squared weight across the null space of `Σ` is at or
/// below this is orthogonal to it.
const NULL_SUPPORT: f64 = 1e-10;
/// Growth factor of the barrier weight between centering steps.
const BARRIER_GROWTH: f64 = 10.0;
/// Half the squared Newton decrement at which a centering step ends.
const NEWTON_DECREMENT: f64 = 1e-12;
/// Squared Newton decrement below which the undamped step is taken.
const QUADRATIC_REGION: f64 = 0.25;
/// Relative step size treated as no progress, ending a centering step.
const STALL: f64 = 1e-15;

/// Solve `max trace(D)` s.t. `D` diagonal, `0 ≤ D ≤ diag(Σ)`, `Σ - D ⪰ 0`.
///
/// Stops once the duality gap bound of the barrier method falls below
/// `tol · mean(diag Σ)`; `iterations` counts Newton steps.
pub fn solve_min_trace(sigma: &SymmetricMatrix, opts: &SolverOptions) -> Result<FrischDecomposition, FrischError> {
    if !(opts.tol > 0.0) || !(opts.tol_psd >= 0.0) || opts.max_iter == 0 {
        return Err(FrischError::InvalidOption(format!("{opts:?}")));
    }
    let s = sigma.as_matrix();
    let p = s.nrows();
    let (eigvals, eigvecs) = sym_eigen_desc(s);
    let min_eig = eigvals[p - 1];
    if min_eig < -opts.tol_psd {
        return Err(FrischError::NotPsd {
            min_eigenvalue: min_eig,
        });
    }
    let scale = s.diagonal().mean().max(f64::MIN_POSITIVE);
    let rank = eigvals.iter().filter(|&&l| l > NULL_EIGENVALUE * scale).count();
    let problem = if rank == p {
        Barrier {
            lambda: s.clone(),
            coords: None,
            free: (0..p).collect(),
        }
    } else {
        // Dv = 0 on the null space, so only coordinates orthogonal to it can
        // carry a positive d_j.
        let null = eigvecs.columns(rank, p - rank);
        let free: Vec<usize> = (0..p).filter(|&j| null.row(j).norm_squared() <= NULL_SUPPORT).collect();
        let range = eigvecs.columns(0, rank);
        Barrier {
            lambda: DMatrix::from_diagonal(&eigvals.rows(0, rank)),
            coords: Some(DMatrix::from_fn(rank, free.len(), |i, c| range[(free[c], i)])),
            free,
        }
    };
    let mut d = DVector::zeros(p);
    let mut steps = 0;
    if !problem.free.is_empty() {
        let upper = DVector::from_iterator(problem.free.len(), problem.free.iter().map(|&j| s[(j, j)]));
        let scatter = |sub: &DVector<f64>| {
            let mut full = DVector::zeros(p);
            for (c, &j) in problem.free.iter().enumerate() {
                full[j] = sub[c];
            }
            full
        };
        match problem.solve(&upper, scale, opts) {
            Ok((sub, n)) => {
                d = scatter(&sub);
                steps = n;
            }
            Err(Stalled { d: sub, last_change }) => {
                return Err(FrischError::NoConvergence {
                    max_iter: opts.max_iter,
                    last_d: scatter(&sub).iter().copied().collect(),
                    last_change,
                    psd_violation: 0.0,
                })
            }
        }
    }
    let violation = (-min_eigenvalue(&(s - DMatrix::from_diagonal(&d)))).max(0.0);
    Ok(finish(s, d, violation, steps))
}

/// Last barrier iterate when the step budget runs out.
struct Stalled {
    d: DVector<f64>,
    last_change: f64,
}

/// `max Σd` s.t. `Λ - A diag(d) Aᵗ ≻ 0`, `0 < d < upper`, where the columns
/// of `A` are the free coordinate axes expressed in an orthonormal basis of
/// the range of `Σ` (`A = I` when `Σ` is nonsingular).
struct Barrier {
    lambda: DMatrix<f64>,
    coords: Option<DMatrix<f64>>,
    free: Vec<usize>,
}

impl Barrier {
    fn slack(&self, d: &DVector<f64>) -> DMatrix<f64> {
        match &self.coords {
            None => &self.lambda - DMatrix::from_diagonal(d),
            Some(a) => &self.lambda - a * DMatrix::from_diagonal(d) * a.transpose(),
        }
    }

    /// `-t·Σd - log det(slack) - Σ log d - Σ log(upper - d)`, or `None`
    /// outside the open feasible set.
    fn value(&self, d: &DVector<f64>, upper: &DVector<f64>, t: f64) -> Option<f64> {
        let mut box_term = 0.0;
        for j in 0..d.len() {
            let room = upper[j] - d[j];
            if !(d[j] > 0.0 && room > 0.0) {
                return None;
            }
            box_term += d[j].ln() + room.ln();
        }
        let chol = self.slack(d).cholesky()?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        Some(-t * d.sum() - log_det - box_term)
    }

    fn solve(&self, upper: &DVector<f64>, scale: f64, opts: &SolverOptions) -> Result<(DVector<f64>, usize), Stalled> {
        let m = upper.len();
        let min_eig = min_eigenvalue(&self.lambda);
        // ‖A diag(d) Aᵗ‖ ≤ max d because A has orthonormal rows.
        let mut d = DVector::from_element(m, (0.5 * min_eig).min(0.5 * upper.min()));
        // log det contributes its dimension to the barrier parameter, the box
        // two per coordinate.
        let barrier_parameter = (self.lambda.nrows() + 2 * m) as f64;
        let mut t = 1.0 / scale;
        let mut steps = 0;
        let mut last_change = f64::INFINITY;
        loop {
            loop {
                if steps == opts.max_iter {
                    return Err(Stalled { d, last_change });
                }
                steps += 1;
                let inv = self
                    .slack(&d)
                    .cholesky()
                    .expect("iterate stays strictly feasible")
                    .inverse();
                // Gram matrix of the free axes in the slack's inverse metric.
                let g = match &self.coords {
                    None => inv,
                    Some(a) => a.transpose() * inv * a,
                };
                let grad = DVector::from_fn(m, |j, _| -t + g[(j, j)] - 1.0 / d[j] + 1.0 / (upper[j] - d[j]));
                let mut hess = g.component_mul(&g);
                for j in 0..m {
                    hess[(j, j)] += d[j].powi(-2) + (upper[j] - d[j]).powi(-2);
                }
                // Positive definite in exact arithmetic; a failed factorization
                // means the iterate is too close to the boundary to progress.
                let Some(chol) = hess.cholesky() else {
                    return Err(Stalled { d, last_change });
                };
                let step = -chol.solve(&grad);
                let decrement = -grad.dot(&step);
                if decrement / 2.0 <= NEWTON_DECREMENT {
                    break;
                }
                // Inside the quadratic region the pure Newton step is feasible
                // and the Armijo test would only compare rounding noise.
                let full = &d + &step;
                let next = if decrement < QUADRATIC_REGION && self.value(&full, upper, t).is_some() {
                    full
                } else {
                    let f0 = self.value(&d, upper, t).expect("iterate stays strictly feasible");
                    let mut alpha = 1.0;
                    loop {
                        let trial = &d + &step * alpha;
                        match self.value(&trial, upper, t) {
                            Some(f) if f <= f0 - 0.25 * alpha * decrement => break trial,
                            _ if alpha < 1e-12 => break d.clone(),
                            _ => alpha *= 0.5,
                        }
                    }
                };
                last_change = (&next - &d).amax();
                if last_change <= STALL * scale {
                    break;
                }
                d = next;
            }
            if barrier_parameter / t <= opts.tol * scale {
                return Ok((d, steps));
            }
            t *= BARRIER_GROWTH;
        }
    }
}

fn finish(sigma: &DMatrix<f64>, mut d: DVector<f64>, violation: f64, iterations: usize) -> FrischDecomposition {
    // Shift the residual infeasibility into D so the PSD constraint holds.
    for (j, dj) in d.iter_mut().enumerate() {
        *dj = (*dj - violation).clamp(0.0, sigma[(j, j)]);
    }
    let low_rank = symmetrize(&(sigma - DMatrix::from_diagonal(&d)));
    let (eigvals, eigvecs) = sym_eigen_desc(&low_rank);
    FrischDecomposition {
        d_star: d,
        low_rank,
        eigvals,
        eigvecs,
        iterations,
    }
}

/// How many leading eigenvectors of `Σ - D*` to retain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "snake_case")]
pub enum RankRule {
    FixedRank(usize),
    /// Keep eigenvalues above this fraction of the largest one.
    Threshold(f64),
}

/// A fifth of the leading eigenvalue. On correlation matrices estimated from
/// a few dozen observations, smaller cutoffs admit many sampling-noise
/// directions.
impl Default for RankRule {
    fn default() -> Self {
        RankRule::Threshold(0.2)
    }
}

impl fmt::Display for RankRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankRule::FixedRank(k) => write!(f, "fixed:{k}"),
            RankRule::Threshold(t) => write!(f, "threshold:{t}"),
        }
    }
}

impl FromStr for RankRule {
    type Err = String;

    /// Accepts `fixed:K` or `threshold:T`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| format!("expected fixed:K or threshold:T, got `{s}`"))?;
        match kind {
            "fixed" => value
                .parse()
                .map(RankRule::FixedRank)
                .map_err(|e| format!("bad rank `{value}`: {e}")),
            "threshold" => {
                let t: f64 = value.parse().map_err(|e| format!("bad threshold `{value}`: {e}"))?;
                if !(0.0..1.0).contains(&t) {
                    return Err(format!("threshold must lie in [0, 1), got {t}"));
                }
                Ok(RankRule::Threshold(t))
            }
            other => Err(format!("unknown rank rule `{other}`")),
        }
    }
}

/// Orthonormal basis for the retained loadings directions.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingsBasis {
    /// `p × k`, orthonormal columns.
    pub b_tilde: DMatrix<f64>,
    pub k: usize,
    /// Retained eigenvalues of `Σ - D*`.
    pub eigvals: DVector<f64>,
    /// Largest absolute off-diagonal entry of `Σ - B̃ diag(eigvals) B̃ᵗ`.
    pub residual_offdiag: f64,
}

pub fn choose_rank(eigvals: &DVector<f64>, rule: RankRule) -> Result<usize, FrischError> {
    let p = eigvals.len();
    match rule {
        RankRule::FixedRank(k) => {
            if k < 1 || k >= p {
                Err(FrischError::RankOutOfRange { k, p })
            } else {
                Ok(k)
            }
        }
        RankRule::Threshold(tau) => {
            if p < 2 {
                return Err(FrischError::RankOutOfRange { k: 1, p });
            }
            let top = eigvals[0];
            let kept = if top > 0.0 {
                eigvals.iter().filter(|&&l| l > tau * top).count()
            } else {
                0
            };
            Ok(kept.clamp(1, p - 1))
        }
    }
}

pub fn truncate_loadings(dec: &FrischDecomposition, rule: RankRule) -> Result<LoadingsBasis, FrischError> {
    let p = dec.dim();
    let k = choose_rank(&dec.eigvals, rule)?;
    let b_tilde = dec.eigvecs.columns(0, k).into_owned();
    let eigvals = dec.eigvals.rows(0, k).into_owned();
    let fitted = &b_tilde * DMatrix::from_diagonal(&eigvals) * b_tilde.transpose();
    let psi2 = dec.sigma() - fitted;
    let mut residual_offdiag: f64 = 0.0;
    for i in 0..p {
        for j in 0..p {
            if i != j {
                residual_offdiag = residual_offdiag.max(psi2[(i, j)].abs());
            }
        }
    }
    Ok(LoadingsBasis {
        b_tilde,
        k,
        eigvals,
        residual_offdiag,
    })
}
