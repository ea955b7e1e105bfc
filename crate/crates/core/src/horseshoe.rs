//! Gibbs sampler for Gaussian linear regression under the horseshoe prior.
//!
//! Model, for an `m × n` design `X` (one predictor per row) and response `x`:
//!
//! ```text
//! x | δ, σ²    ~ N(Xᵗδ, σ² I)
//! δ_j | λ_j, s ~ N(0, s² λ_j²)
//! λ_j, s       ~ C⁺(0, 1)
//! σ²           ~ IG(a₀, b₀)
//! ```
//!
//! Each half-Cauchy scale is written as a pair of inverse-gamma variables
//! (`λ² | ν ~ IG(1/2, 1/ν)`, `ν ~ IG(1/2, 1)`), which makes every full
//! conditional a standard draw. The coefficient block is sampled jointly in
//! the prior-scaled coordinates `δ = diag(sλ) u`, where the conditional
//! precision `I + diag(sλ) XXᵗ diag(sλ) / σ²` has all eigenvalues ≥ 1.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::seeded;
use crate::stats::effective_sample_size;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HorseshoeError {
    #[error("design has {design} observations but response has {response}")]
    DimensionMismatch { design: usize, response: usize },
    #[error("conditional precision factorization failed at sweep {sweep}")]
    NumericalBreakdown { sweep: usize },
    #[error("invalid chain configuration: {0}")]
    InvalidConfig(String),
}

/// Scales are kept inside `[SCALE_FLOOR, SCALE_CEIL]` so a single extreme
/// inverse-gamma draw cannot overflow the precision matrix.
const SCALE_FLOOR: f64 = 1e-100;
const SCALE_CEIL: f64 = 1e100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseGammaPrior {
    pub shape: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub n_burn: usize,
    pub thin: usize,
    pub seed: u64,
    pub noise_prior: InverseGammaPrior,
    /// Hold `σ²` at this value instead of sampling it.
    #[serde(default)]
    pub fixed_noise_var: Option<f64>,
    /// Hold the global scale `s` at this value instead of sampling it.
    #[serde(default)]
    pub fixed_global_scale: Option<f64>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            n_iter: 6000,
            n_burn: 1000,
            thin: 1,
            seed: 0,
            noise_prior: InverseGammaPrior { shape: 0.5, scale: 0.5 },
            fixed_noise_var: None,
            fixed_global_scale: None,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<(), HorseshoeError> {
        if self.n_iter <= self.n_burn {
            return Err(HorseshoeError::InvalidConfig(format!(
                "n_iter ({}) must exceed n_burn ({})",
                self.n_iter, self.n_burn
            )));
        }
        if self.thin == 0 {
            return Err(HorseshoeError::InvalidConfig("thin must be at least 1".into()));
        }
        let InverseGammaPrior { shape, scale } = self.noise_prior;
        if !(shape > 0.0 && scale > 0.0) {
            return Err(HorseshoeError::InvalidConfig("noise prior must be proper".into()));
        }
        for fixed in [self.fixed_noise_var, self.fixed_global_scale].into_iter().flatten() {
            if !(fixed > 0.0 && fixed.is_finite()) {
                return Err(HorseshoeError::InvalidConfig(format!(
                    "fixed scale {fixed} must be positive"
                )));
            }
        }
        Ok(())
    }

    /// Number of retained draws.
    pub fn n_draws(&self) -> usize {
        (self.n_iter - self.n_burn) / self.thin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorseshoeState {
    pub coeffs: DVector<f64>,
    /// `λ_j`.
    pub local_scales: DVector<f64>,
    /// `s`.
    pub global_scale: f64,
    pub noise_var: f64,
    /// `ν_j`, one per local scale.
    pub local_aux: DVector<f64>,
    /// Auxiliary for the global scale.
    pub global_aux: f64,
}

impl HorseshoeState {
    pub fn initial(m: usize, noise_var: f64, global_scale: f64) -> Self {
        Self {
            coeffs: DVector::zeros(m),
            local_scales: DVector::from_element(m, 1.0),
            global_scale,
            noise_var,
            local_aux: DVector::from_element(m, 1.0),
            global_aux: 1.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        self.local_scales.iter().all(|&v| ok(v))
            && self.local_aux.iter().all(|&v| ok(v))
            && ok(self.global_scale)
            && ok(self.global_aux)
            && ok(self.noise_var)
            && self.coeffs.iter().all(|v| v.is_finite())
    }
}

/// A regression problem with its sufficient statistics precomputed.
#[derive(Debug, Clone)]
pub struct Regression {
    /// `m × n`.
    pub design: DMatrix<f64>,
    pub response: DVector<f64>,
    gram: DMatrix<f64>,
    cross: DVector<f64>,
}

impl Regression {
    pub fn new(design: DMatrix<f64>, response: DVector<f64>) -> Result<Self, HorseshoeError> {
        if design.ncols() != response.len() {
            return Err(HorseshoeError::DimensionMismatch {
                design: design.ncols(),
                response: response.len(),
            });
        }
        let gram = &design * design.transpose();
        let cross = &design * &response;
        Ok(Self {
            design,
            response,
            gram,
            cross,
        })
    }

    pub fn n_predictors(&self) -> usize {
        self.design.nrows()
    }

    pub fn n_obs(&self) -> usize {
        self.design.ncols()
    }
}

fn inv_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    let g: f64 = Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
    (rate / g).clamp(SCALE_FLOOR, SCALE_CEIL)
}

/// One full sweep: coefficients, local scales, global scale, noise variance.
pub fn gibbs_step<R: Rng + ?Sized>(
    state: &HorseshoeState,
    reg: &Regression,
    cfg: &ChainConfig,
    rng: &mut R,
) -> Result<HorseshoeState, HorseshoeError> {
    let m = reg.n_predictors();
    let n = reg.n_obs();
    let mut next = state.clone();

    // Coefficients: δ = d ∘ u with u ~ N(C⁻¹ d∘Xx / σ², C⁻¹).
    let s = state.global_scale;
    let d = state.local_scales.map(|l| s * l);
    let inv_var = 1.0 / state.noise_var;
    let mut c = DMatrix::<f64>::zeros(m, m);
    for j in 0..m {
        for i in 0..m {
            c[(i, j)] = d[i] * reg.gram[(i, j)] * d[j] * inv_var;
        }
        c[(j, j)] += 1.0;
    }
    let rhs = DVector::from_iterator(m, (0..m).map(|j| d[j] * reg.cross[j] * inv_var));
    let chol = c.cholesky().ok_or(HorseshoeError::NumericalBreakdown { sweep: 0 })?;
    let mean = chol.solve(&rhs);
    let eps = DVector::from_iterator(m, (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let noise = chol
        .l()
        .tr_solve_lower_triangular(&eps)
        .ok_or(HorseshoeError::NumericalBreakdown { sweep: 0 })?;
    next.coeffs = (mean + noise).component_mul(&d);
    if next.coeffs.iter().any(|v| !v.is_finite()) {
        return Err(HorseshoeError::NumericalBreakdown { sweep: 0 });
    }

    // Local scales.
    let s2 = s * s;
    for j in 0..m {
        let beta = next.coeffs[j];
        let lambda2 = inv_gamma(rng, 1.0, 1.0 / state.local_aux[j] + beta * beta / (2.0 * s2));
        next.local_aux[j] = inv_gamma(rng, 1.0, 1.0 + 1.0 / lambda2);
        next.local_scales[j] = lambda2.sqrt();
    }

    // Global scale.
    if let Some(fixed) = cfg.fixed_global_scale {
        next.global_scale = fixed;
    } else {
        let ssq: f64 = (0..m)
            .map(|j| next.coeffs[j].powi(2) / next.local_scales[j].powi(2))
            .sum();
        let tau2 = inv_gamma(rng, (m as f64 + 1.0) / 2.0, 1.0 / state.global_aux + ssq / 2.0);
        next.global_aux = inv_gamma(rng, 1.0, 1.0 + 1.0 / tau2);
        next.global_scale = tau2.sqrt();
    }

    // Noise variance.
    if let Some(fixed) = cfg.fixed_noise_var {
        next.noise_var = fixed;
    } else {
        let fitted = reg.design.tr_mul(&next.coeffs);
        let rss = (&reg.response - fitted).norm_squared();
        let prior = cfg.noise_prior;
        next.noise_var = inv_gamma(rng, prior.shape + n as f64 / 2.0, prior.scale + rss / 2.0);
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorseshoeDraw {
    pub coeffs: DVector<f64>,
    pub noise_var: f64,
    pub global_scale: f64,
    pub local_scales: DVector<f64>,
}

impl HorseshoeDraw {
    /// `κ_j = 1 / (1 + s²λ_j²)`.
    pub fn shrinkage_factors(&self) -> DVector<f64> {
        let s2 = self.global_scale * self.global_scale;
        self.local_scales.map(|l| 1.0 / (1.0 + s2 * l * l))
    }
}

#[derive(Debug, Clone)]
pub struct HorseshoeChain {
    pub draws: Vec<HorseshoeDraw>,
    /// Effective sample size of each coefficient trace.
    pub ess: Vec<f64>,
}

impl HorseshoeChain {
    pub fn posterior_mean(&self) -> DVector<f64> {
        let m = self.draws.first().map_or(0, |d| d.coeffs.len());
        let mut acc = DVector::zeros(m);
        for d in &self.draws {
            acc += &d.coeffs;
        }
        acc / self.draws.len() as f64
    }

    pub fn coefficient_trace(&self, j: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d.coeffs[j]).collect()
    }

    pub fn mean_ess(&self) -> f64 {
        crate::stats::mean(&self.ess)
    }
}

/// Run a seeded chain and keep the thinned post-burn-in draws.
pub fn run_chain(
    design: &DMatrix<f64>,
    response: &DVector<f64>,
    cfg: &ChainConfig,
) -> Result<HorseshoeChain, HorseshoeError> {
    cfg.validate()?;
    let reg = Regression::new(design.clone(), response.clone())?;
    run_chain_on(&reg, cfg)
}

pub fn run_chain_on(reg: &Regression, cfg: &ChainConfig) -> Result<HorseshoeChain, HorseshoeError> {
    cfg.validate()?;
    let m = reg.n_predictors();
    let mut rng = seeded(cfg.seed);
    let init_noise = cfg.fixed_noise_var.unwrap_or_else(|| {
        let v = reg.response.norm_squared() / reg.n_obs().max(1) as f64;
        if v > 0.0 && v.is_finite() {
            v
        } else {
            1.0
        }
    });
    let mut state = HorseshoeState::initial(m, init_noise, cfg.fixed_global_scale.unwrap_or(1.0));
    let mut draws = Vec::with_capacity(cfg.n_draws());
    for sweep in 0..cfg.n_iter {
        state = gibbs_step(&state, reg, cfg, &mut rng).map_err(|e| match e {
            HorseshoeError::NumericalBreakdown { .. } => HorseshoeError::NumericalBreakdown { sweep },
            other => other,
        })?;
        if sweep >= cfg.n_burn && (sweep - cfg.n_burn + 1).is_multiple_of(cfg.thin) {
            draws.push(HorseshoeDraw {
                coeffs: state.coeffs.clone(),
                noise_var: state.noise_var,
                global_scale: state.global_scale,
                local_scales: state.local_scales.clone(),
            });
        }
    }
    let ess = (0..m)
        .map(|j| effective_sample_size(&draws.iter().map(|d| d.coeffs[j]).collect::<Vec<_>>()))
        .collect();
    Ok(HorseshoeChain { draws, ess })
}

/// `κ = 1 / (1 + λ²)`.
pub fn shrinkage_factor(lambda: f64) -> f64 {
    1.0 / (1.0 + lambda * lambda)
}

/// Prior draws of the shrinkage factor under `λ ~ C⁺(0, 1)`.
pub fn prior_shrinkage_sample(n_draws: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    (0..n_draws)
        .map(|_| {
            let u: f64 = rng.random();
            let lambda = (std::f64::consts::FRAC_PI_2 * u).tan();
            shrinkage_factor(lambda)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::stats::{mean, quantile};

    #[test]
    fn shrinkage_factor_algebra() {
        assert_eq!(shrinkage_factor(1.0), 0.5);
        assert!((shrinkage_factor(3.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn draw_count_follows_burn_and_thin() {
        let cfg = ChainConfig {
            n_iter: 100,
            n_burn: 50,
            thin: 5,
            ..ChainConfig::default()
        };
        let x = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, -1.0, 0.5, 0.2, 1.0, 0.3, -0.4]);
        let y = DVector::from_vec(vec![1.0, 0.1, -0.8, 0.4]);
        let chain = run_chain(&x, &y, &cfg).unwrap();
        assert_eq!(chain.draws.len(), 10);
        assert_eq!(cfg.n_draws(), 10);
    }

    #[test]
    fn same_seed_same_chain() {
        let cfg = ChainConfig {
            n_iter: 200,
            n_burn: 20,
            seed: 11,
            ..ChainConfig::default()
        };
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, -1.0, 0.2, 1.0, 0.3]);
        let y = DVector::from_vec(vec![1.0, 0.1, -0.8]);
        let a = run_chain(&x, &y, &cfg).unwrap();
        let b = run_chain(&x, &y, &cfg).unwrap();
        assert_eq!(a.draws, b.draws);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = ChainConfig {
            n_iter: 10,
            n_burn: 10,
            ..ChainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ChainConfig {
            thin: 0,
            ..ChainConfig::default()
        };
        assert!(bad.validate().is_err());
        let x = DMatrix::zeros(2, 3);
        let y = DVector::zeros(4);
        assert!(matches!(
            run_chain(&x, &y, &ChainConfig::default()),
            Err(HorseshoeError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn scales_stay_positive_and_finite() {
        let mut rng = substream(5, 1);
        let design = DMatrix::from_fn(6, 10, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let response = DVector::from_fn(10, |i, _| i as f64 * 0.1);
        let reg = Regression::new(design, response).unwrap();
        let cfg = ChainConfig::default();
        let mut state = HorseshoeState::initial(6, 1.0, 1.0);
        for _ in 0..500 {
            state = gibbs_step(&state, &reg, &cfg, &mut rng).unwrap();
            assert!(state.is_valid());
        }
    }

    #[test]
    fn pure_noise_is_shrunk() {
        let mut rng = substream(17, 2);
        let n = 40;
        let m = 5;
        let design = DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let response = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let cfg = ChainConfig {
            n_iter: 21_000,
            n_burn: 1_000,
            seed: 3,
            ..ChainConfig::default()
        };
        let chain = run_chain(&design, &response, &cfg).unwrap();
        for j in 0..m {
            let kappas: Vec<f64> = chain.draws.iter().map(|d| d.shrinkage_factors()[j]).collect();
            let med = quantile(&kappas, 0.5);
            assert!(med > 0.5, "coefficient {j}: median shrinkage {med}");
        }
    }

    #[test]
    fn strong_signal_is_recovered() {
        let mut rng = substream(23, 4);
        let n = 50;
        let m = 4;
        let design = DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let response = DVector::from_fn(n, |i, _| {
            10.0 * design[(0, i)] + 0.1 * rng.sample::<f64, _>(StandardNormal)
        });
        let cfg = ChainConfig {
            n_iter: 4000,
            n_burn: 1000,
            seed: 9,
            ..ChainConfig::default()
        };
        let chain = run_chain(&design, &response, &cfg).unwrap();
        let post = chain.posterior_mean();
        assert!((post[0] - 10.0).abs() < 0.5, "{post}");
        for j in 1..m {
            assert!(post[j].abs() < 0.1, "{post}");
        }
        assert!(mean(&chain.ess) > 100.0);
    }
}
