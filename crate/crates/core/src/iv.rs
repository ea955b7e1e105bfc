//! Importance resampler for the Bayesian linear IV model.
//!
//! The joint likelihood factors as `f(y | x, z) f(x | z)` with
//!
//! ```text
//! x_i | z_i    ~ N(z_iᵗδ, σ²ₓ)
//! y_i | x_i, z_i ~ N(x_i β + α (x_i - z_iᵗδ), ξ²)
//! ```
//!
//! Draws of `δ` from the first-stage regression of `x` on `z` are reweighted
//! by the conjugate marginal likelihood of `y` and then completed with
//! `(α, β, ξ²)` drawn from their normal-inverse-gamma conditional.
//!
//! With `x̃_i = (x_i, x_i - z_iᵗδ)`, prior `(β, α) | ξ² ~ N(0, ξ² c I)` and
//! `ξ² ~ IG(v/2, s/2)`:
//!
//! ```text
//! M = I/c + x̃ᵗx̃      b = s + yᵗy - yᵗx̃ M⁻¹ x̃ᵗy      a = n + v
//! log w = -½ log det M - (a/2) log b
//! ξ² | y ~ IG(a/2, b/2)      (β, α) | ξ², y ~ N(M⁻¹x̃ᵗy, ξ² M⁻¹)
//! ```
//!
//! The inverse-gamma uses shape `a/2` and scale `b/2`; this is the only
//! assignment under which `y` is marginally multivariate-t with `a` degrees
//! of freedom, as the weight formula requires.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{collapse_coefficients, enrich, DesignError, EnrichedDesign};
use crate::frisch::{
    sample_correlation, solve_min_trace, standardize, truncate_loadings, FrischDecomposition, FrischError,
    LoadingsBasis, RankRule, SolverOptions, Standardization,
};
use crate::horseshoe::{run_chain_on, ChainConfig, HorseshoeError, Regression};
use crate::rng::substream;
use crate::stats::{equal_tailed_interval, log_sum_exp, mean, std_dev};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IvError {
    #[error("frisch stage: {0}")]
    Frisch(#[from] FrischError),
    #[error("design stage: {0}")]
    Design(#[from] DesignError),
    #[error("first-stage chain: {0}")]
    Horseshoe(#[from] HorseshoeError),
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("second-stage b is not positive ({0:e})")]
    NonPositiveB(f64),
    #[error("no importance weights to resample")]
    EmptyWeights,
    #[error("log weight {0} is not finite")]
    NonFiniteWeight(usize),
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
}

/// Normal-inverse-gamma prior on `(β, α, ξ²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NigPrior {
    /// Prior variance multiplier of `(β, α)`.
    pub c: f64,
    /// Prior sum of squares; `ξ²` has inverse-gamma scale `s/2`.
    pub s: f64,
    /// Prior degrees of freedom; `ξ²` has inverse-gamma shape `v/2`.
    pub v: f64,
}

impl Default for NigPrior {
    fn default() -> Self {
        Self {
            c: 25.0,
            s: 1.0,
            v: 1.0,
        }
    }
}

impl NigPrior {
    pub fn validate(&self) -> Result<(), IvError> {
        if self.c > 0.0 && self.s > 0.0 && self.v > 0.0 && self.c.is_finite() {
            Ok(())
        } else {
            Err(IvError::InvalidPrior(format!("{self:?}")))
        }
    }
}

/// Rows `(x_i, x_i - z_iᵗδ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedRegressors {
    /// `n × 2`.
    pub x_tilde: DMatrix<f64>,
}

fn check_dims(x: &DVector<f64>, z: &DMatrix<f64>, delta: &DVector<f64>) -> Result<(), IvError> {
    if x.len() != z.ncols() {
        return Err(IvError::DimensionMismatch {
            what: "observations",
            expected: z.ncols(),
            actual: x.len(),
        });
    }
    if delta.len() != z.nrows() {
        return Err(IvError::DimensionMismatch {
            what: "instruments",
            expected: z.nrows(),
            actual: delta.len(),
        });
    }
    Ok(())
}

pub fn augmented_regressors(
    x: &DVector<f64>,
    z: &DMatrix<f64>,
    delta: &DVector<f64>,
) -> Result<AugmentedRegressors, IvError> {
    check_dims(x, z, delta)?;
    let resid = x - z.tr_mul(delta);
    let mut x_tilde = DMatrix::zeros(x.len(), 2);
    x_tilde.set_column(0, x);
    x_tilde.set_column(1, &resid);
    Ok(AugmentedRegressors { x_tilde })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightComponents {
    /// `M = I/c + x̃ᵗx̃`.
    pub m_mat: Matrix2<f64>,
    pub b_scalar: f64,
    pub a_scalar: f64,
    pub log_weight: f64,
    /// `M⁻¹x̃ᵗy`, ordered `(β, α)`.
    pub coef_mean: Vector2<f64>,
    pub n: usize,
}

impl WeightComponents {
    /// Full log density of `y` given `(x, Z, δ)`, including the constants
    /// that cancel in the importance weights.
    pub fn log_marginal_density(&self, prior: &NigPrior) -> f64 {
        use crate::stats::ln_gamma;
        let n = self.n as f64;
        let half_v = prior.v / 2.0;
        -0.5 * n * (2.0 * std::f64::consts::PI).ln() - prior.c.ln()
            + self.log_weight
            + half_v * (prior.s / 2.0).ln()
            + ln_gamma(self.a_scalar / 2.0)
            - ln_gamma(half_v)
            + (self.a_scalar / 2.0) * 2f64.ln()
    }
}

/// Sufficient statistics of the second-stage regression shared by every `δ`.
#[derive(Debug, Clone)]
pub struct SecondStage<'a> {
    x: &'a DVector<f64>,
    y: &'a DVector<f64>,
    z: &'a DMatrix<f64>,
    prior: NigPrior,
    xx: f64,
    xy: f64,
    yy: f64,
}

impl<'a> SecondStage<'a> {
    pub fn new(
        x: &'a DVector<f64>,
        y: &'a DVector<f64>,
        z: &'a DMatrix<f64>,
        prior: NigPrior,
    ) -> Result<Self, IvError> {
        prior.validate()?;
        if y.len() != x.len() {
            return Err(IvError::DimensionMismatch {
                what: "outcome",
                expected: x.len(),
                actual: y.len(),
            });
        }
        if x.len() != z.ncols() {
            return Err(IvError::DimensionMismatch {
                what: "observations",
                expected: z.ncols(),
                actual: x.len(),
            });
        }
        if x.is_empty() {
            return Err(IvError::DimensionMismatch {
                what: "observations",
                expected: 1,
                actual: 0,
            });
        }
        Ok(Self {
            x,
            y,
            z,
            prior,
            xx: x.dot(x),
            xy: x.dot(y),
            yy: y.dot(y),
        })
    }

    pub fn components(&self, delta: &DVector<f64>) -> Result<WeightComponents, IvError> {
        check_dims(self.x, self.z, delta)?;
        let resid = self.x - self.z.tr_mul(delta);
        let xr = self.x.dot(&resid);
        let rr = resid.dot(&resid);
        let ry = resid.dot(self.y);
        let inv_c = 1.0 / self.prior.c;
        let m_mat = Matrix2::new(inv_c + self.xx, xr, xr, inv_c + rr);
        let g = Vector2::new(self.xy, ry);
        let det = m_mat[(0, 0)] * m_mat[(1, 1)] - m_mat[(0, 1)] * m_mat[(1, 0)];
        let coef_mean = Vector2::new(
            (m_mat[(1, 1)] * g[0] - m_mat[(0, 1)] * g[1]) / det,
            (m_mat[(0, 0)] * g[1] - m_mat[(1, 0)] * g[0]) / det,
        );
        let mut b = self.prior.s + self.yy - g.dot(&coef_mean);
        if !(b > 1e-10 * (self.prior.s + self.yy)) {
            // Cancellation: use s + ‖y - x̃θ̂‖² + ‖θ̂‖²/c, a sum of non-negatives.
            let fit = self.x * coef_mean[0] + &resid * coef_mean[1];
            b = self.prior.s + (self.y - fit).norm_squared() + coef_mean.norm_squared() * inv_c;
        }
        if !(b > 0.0 && b.is_finite()) || !(det > 0.0) {
            return Err(IvError::NonPositiveB(b));
        }
        let n = self.x.len();
        let a = n as f64 + self.prior.v;
        Ok(WeightComponents {
            m_mat,
            b_scalar: b,
            a_scalar: a,
            log_weight: -0.5 * det.ln() - 0.5 * a * b.ln(),
            coef_mean,
            n,
        })
    }
}

pub fn log_weight(
    x: &DVector<f64>,
    y: &DVector<f64>,
    z: &DMatrix<f64>,
    delta: &DVector<f64>,
    prior: &NigPrior,
) -> Result<WeightComponents, IvError> {
    SecondStage::new(x, y, z, *prior)?.components(delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructuralDraw {
    pub alpha: f64,
    pub beta: f64,
    pub xi_sq: f64,
}

/// Draw `ξ² ~ IG(a/2, b/2)` then `(β, α) ~ N(M⁻¹x̃ᵗy, ξ²M⁻¹)`.
pub fn draw_from_components<R: Rng + ?Sized>(w: &WeightComponents, rng: &mut R) -> StructuralDraw {
    let g: f64 = Gamma::new(w.a_scalar / 2.0, 1.0).expect("positive shape").sample(rng);
    let xi_sq = (w.b_scalar / 2.0) / g;
    // M = LLᵗ; θ = mean + ξ L⁻ᵗ ε.
    let l11 = w.m_mat[(0, 0)].sqrt();
    let l21 = w.m_mat[(1, 0)] / l11;
    let l22 = (w.m_mat[(1, 1)] - l21 * l21).sqrt();
    let e1: f64 = rng.sample(StandardNormal);
    let e2: f64 = rng.sample(StandardNormal);
    let t2 = e2 / l22;
    let t1 = (e1 - l21 * t2) / l11;
    let xi = xi_sq.sqrt();
    StructuralDraw {
        beta: w.coef_mean[0] + xi * t1,
        alpha: w.coef_mean[1] + xi * t2,
        xi_sq,
    }
}

pub fn draw_structural<R: Rng + ?Sized>(
    x: &DVector<f64>,
    y: &DVector<f64>,
    z: &DMatrix<f64>,
    delta: &DVector<f64>,
    prior: &NigPrior,
    rng: &mut R,
) -> Result<StructuralDraw, IvError> {
    let w = log_weight(x, y, z, delta, prior)?;
    Ok(draw_from_components(&w, rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResampleOutcome {
    pub indices: Vec<usize>,
    /// Normalized weights of the input draws.
    pub weights: Vec<f64>,
    /// `(Σw)² / Σw²`.
    pub ess: f64,
    /// One draw carries more than 99.9% of the mass.
    pub degenerate: bool,
    /// ESS below 5% of the number of draws.
    pub low_ess: bool,
}

pub const DEGENERATE_MASS: f64 = 0.999;
pub const LOW_ESS_FRACTION: f64 = 0.05;

/// Multinomial resampling with replacement.
pub fn resample<R: Rng + ?Sized>(log_weights: &[f64], n_out: usize, rng: &mut R) -> Result<ResampleOutcome, IvError> {
    if log_weights.is_empty() {
        return Err(IvError::EmptyWeights);
    }
    if let Some(i) = log_weights.iter().position(|w| !w.is_finite()) {
        return Err(IvError::NonFiniteWeight(i));
    }
    let lse = log_sum_exp(log_weights);
    let weights: Vec<f64> = log_weights.iter().map(|w| (w - lse).exp()).collect();
    let total: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let ess = (1.0 / weights.iter().map(|w| w * w).sum::<f64>()).clamp(1.0, weights.len() as f64);
    let mut cumulative = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in &weights {
        acc += w;
        cumulative.push(acc);
    }
    let last = weights.len() - 1;
    let indices = (0..n_out)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * acc;
            cumulative.partition_point(|&c| c <= u).min(last)
        })
        .collect();
    let max_w = weights.iter().copied().fold(0.0, f64::max);
    Ok(ResampleOutcome {
        indices,
        ess,
        degenerate: max_w > DEGENERATE_MASS,
        low_ess: ess < LOW_ESS_FRACTION * weights.len() as f64,
        weights,
    })
}

/// Prior used for the first-stage regression of `x` on the instruments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstStage {
    /// Horseshoe on the enriched design.
    FactorShrinkage,
    /// Horseshoe on the standardized instruments.
    HorseshoeRaw,
    /// Horseshoe on the retained factor projections alone.
    FactorsOnly,
}

impl FirstStage {
    pub fn name(&self) -> &'static str {
        match self {
            FirstStage::FactorShrinkage => "factor_shrinkage",
            FirstStage::HorseshoeRaw => "horseshoe_raw",
            FirstStage::FactorsOnly => "factors_only",
        }
    }

    pub fn needs_basis(&self) -> bool {
        !matches!(self, FirstStage::HorseshoeRaw)
    }
}

impl std::str::FromStr for FirstStage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "factor_shrinkage" => Ok(FirstStage::FactorShrinkage),
            "horseshoe_raw" => Ok(FirstStage::HorseshoeRaw),
            "factors_only" => Ok(FirstStage::FactorsOnly),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

/// Standardized instruments and, when requested, their loadings basis.
#[derive(Debug, Clone)]
pub struct PreparedInstruments {
    /// Rows with mean 0 and unit population variance.
    pub z_std: DMatrix<f64>,
    pub scaling: Standardization,
    pub frisch: Option<FrischDecomposition>,
    pub basis: Option<LoadingsBasis>,
}

pub fn prepare_instruments(
    z: &DMatrix<f64>,
    rank_rule: RankRule,
    solver: &SolverOptions,
    with_basis: bool,
) -> Result<PreparedInstruments, IvError> {
    let (z_std, scaling) = standardize(z)?;
    let (frisch, basis) = if with_basis {
        let corr = sample_correlation(z)?;
        let dec = solve_min_trace(&corr.corr, solver)?;
        let basis = truncate_loadings(&dec, rank_rule)?;
        (Some(dec), Some(basis))
    } else {
        (None, None)
    };
    Ok(PreparedInstruments {
        z_std,
        scaling,
        frisch,
        basis,
    })
}

/// First-stage posterior draws of `δ` on the standardized instrument scale.
#[derive(Debug, Clone)]
pub struct FirstStageFit {
    pub method: FirstStage,
    pub delta_draws: Vec<DVector<f64>>,
    pub noise_var_draws: Vec<f64>,
    pub rank: Option<usize>,
    pub mean_ess: f64,
}

impl FirstStageFit {
    pub fn posterior_mean(&self) -> DVector<f64> {
        let p = self.delta_draws.first().map_or(0, |d| d.len());
        let mut acc = DVector::zeros(p);
        for d in &self.delta_draws {
            acc += d;
        }
        acc / self.delta_draws.len().max(1) as f64
    }
}

/// Maps a coefficient draw on the fitted design back to the instruments.
type Collapse = dyn Fn(&DVector<f64>) -> Result<DVector<f64>, IvError>;

pub fn fit_first_stage(
    prepared: &PreparedInstruments,
    x: &DVector<f64>,
    method: FirstStage,
    chain: &ChainConfig,
) -> Result<FirstStageFit, IvError> {
    let z = &prepared.z_std;
    if x.len() != z.ncols() {
        return Err(IvError::DimensionMismatch {
            what: "observations",
            expected: z.ncols(),
            actual: x.len(),
        });
    }
    let basis = || {
        prepared.basis.as_ref().ok_or(IvError::DimensionMismatch {
            what: "loadings basis",
            expected: 1,
            actual: 0,
        })
    };
    let (design, collapse): (DMatrix<f64>, Box<Collapse>) = match method {
        FirstStage::HorseshoeRaw => (z.clone(), Box::new(|d: &DVector<f64>| Ok(d.clone()))),
        FirstStage::FactorShrinkage => {
            let enriched: EnrichedDesign = enrich(z, basis()?)?;
            let design = enriched.z_tilde.clone();
            (
                design,
                Box::new(move |d: &DVector<f64>| Ok(collapse_coefficients(d, &enriched)?)),
            )
        }
        FirstStage::FactorsOnly => {
            let b = basis()?.b_tilde.clone();
            let design = b.transpose() * z;
            (design, Box::new(move |d: &DVector<f64>| Ok(&b * d)))
        }
    };
    let reg = Regression::new(design, x.clone())?;
    let fit = run_chain_on(&reg, chain)?;
    let delta_draws = fit
        .draws
        .iter()
        .map(|d| collapse(&d.coeffs))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FirstStageFit {
        method,
        noise_var_draws: fit.draws.iter().map(|d| d.noise_var).collect(),
        delta_draws,
        rank: prepared.basis.as_ref().filter(|_| method.needs_basis()).map(|b| b.k),
        mean_ess: fit.mean_ess(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IvConfig {
    pub chain: ChainConfig,
    pub prior: NigPrior,
    pub rank_rule: RankRule,
    pub solver: SolverOptions,
    pub first_stage: FirstStage,
    pub resample_seed: u64,
    /// Resampled draw count; defaults to the number of first-stage draws.
    pub n_out: Option<usize>,
}

impl Default for IvConfig {
    fn default() -> Self {
        Self {
            chain: ChainConfig::default(),
            prior: NigPrior::default(),
            rank_rule: RankRule::default(),
            solver: SolverOptions::default(),
            first_stage: FirstStage::FactorShrinkage,
            resample_seed: 0,
            n_out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvDraw {
    /// On the standardized instrument scale.
    pub delta: DVector<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub xi_sq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    pub q05: f64,
    pub q95: f64,
}

impl ParamSummary {
    pub fn from_samples(xs: &[f64]) -> Self {
        let (q025, q975) = equal_tailed_interval(xs, 0.95);
        let (q05, q95) = equal_tailed_interval(xs, 0.90);
        Self {
            mean: mean(xs),
            sd: std_dev(xs),
            q025,
            q975,
            q05,
            q95,
        }
    }

    pub fn width95(&self) -> f64 {
        self.q975 - self.q025
    }

    pub fn width90(&self) -> f64 {
        self.q95 - self.q05
    }
}

#[derive(Debug, Clone)]
pub struct IvPosterior {
    pub draws: Vec<IvDraw>,
    /// Normalized importance weights of the first-stage draws.
    pub weights: Vec<f64>,
    pub ess: f64,
    pub degenerate: bool,
    pub low_ess: bool,
    pub resample_seed: u64,
    pub rank: Option<usize>,
    pub first_stage_ess: f64,
    pub scaling: Standardization,
}

impl IvPosterior {
    pub fn betas(&self) -> Vec<f64> {
        self.draws.iter().map(|d| d.beta).collect()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.draws.iter().map(|d| d.alpha).collect()
    }

    pub fn beta_summary(&self) -> ParamSummary {
        ParamSummary::from_samples(&self.betas())
    }

    pub fn alpha_summary(&self) -> ParamSummary {
        ParamSummary::from_samples(&self.alphas())
    }

    pub fn xi_sq_summary(&self) -> ParamSummary {
        ParamSummary::from_samples(&self.draws.iter().map(|d| d.xi_sq).collect::<Vec<_>>())
    }
}

fn centered(v: &DVector<f64>) -> DVector<f64> {
    let m = v.mean();
    v.map(|x| x - m)
}

/// Weight each first-stage draw by the second-stage marginal likelihood.
pub fn weigh_draws(stage: &SecondStage<'_>, deltas: &[DVector<f64>]) -> Result<Vec<WeightComponents>, IvError> {
    deltas.iter().map(|d| stage.components(d)).collect()
}

/// Complete resampling pipeline on already-fitted first-stage draws. `x` and
/// `y` must be on the same (centered) scale the first stage used.
pub fn resample_structural(
    fit: &FirstStageFit,
    prepared: &PreparedInstruments,
    x: &DVector<f64>,
    y: &DVector<f64>,
    prior: &NigPrior,
    resample_seed: u64,
    n_out: Option<usize>,
) -> Result<IvPosterior, IvError> {
    let stage = SecondStage::new(x, y, &prepared.z_std, *prior)?;
    let comps = weigh_draws(&stage, &fit.delta_draws)?;
    let log_w: Vec<f64> = comps.iter().map(|c| c.log_weight).collect();
    let n_out = n_out.unwrap_or(log_w.len());
    let outcome = resample(&log_w, n_out, &mut substream(resample_seed, 1))?;
    let mut rng = substream(resample_seed, 2);
    let draws = outcome
        .indices
        .iter()
        .map(|&i| {
            let s = draw_from_components(&comps[i], &mut rng);
            IvDraw {
                delta: fit.delta_draws[i].clone(),
                alpha: s.alpha,
                beta: s.beta,
                xi_sq: s.xi_sq,
            }
        })
        .collect();
    Ok(IvPosterior {
        draws,
        weights: outcome.weights,
        ess: outcome.ess,
        degenerate: outcome.degenerate,
        low_ess: outcome.low_ess,
        resample_seed,
        rank: fit.rank,
        first_stage_ess: fit.mean_ess,
        scaling: prepared.scaling.clone(),
    })
}

/// Standardize → Frisch → enrich → first-stage chain → reweight → resample →
/// structural draws. `x` and `y` are centered; no intercepts are fitted.
pub fn run_iv(x: &DVector<f64>, y: &DVector<f64>, z: &DMatrix<f64>, cfg: &IvConfig) -> Result<IvPosterior, IvError> {
    cfg.prior.validate()?;
    if x.len() != z.ncols() || y.len() != z.ncols() {
        return Err(IvError::DimensionMismatch {
            what: "observations",
            expected: z.ncols(),
            actual: if x.len() != z.ncols() { x.len() } else { y.len() },
        });
    }
    let prepared = prepare_instruments(z, cfg.rank_rule, &cfg.solver, cfg.first_stage.needs_basis())?;
    let xc = centered(x);
    let yc = centered(y);
    let fit = fit_first_stage(&prepared, &xc, cfg.first_stage, &cfg.chain)?;
    resample_structural(&fit, &prepared, &xc, &yc, &cfg.prior, cfg.resample_seed, cfg.n_out)
}
