//! Synthetic data for the simulation studies.
//!
//! Instruments follow a Gaussian factor model `z ~ N(0, BBᵗ + Ψ²)` whose
//! parameters are drawn as
//!
//! ```text
//! a_jg ~ N(0, 1)          B = A W,  W = diag(w_1 ≥ … ≥ w_k)
//! w_g  = 1 + |ε_g|,       ε_g ~ Student-t(5)
//! ψ_j  = ‖b_j‖ / u_j,     u_j ~ Unif(1/2, 7/4)
//! ```
//!
//! The treatment loads on one latent factor, so its regression on `z` has
//! coefficients `δ = Σ⁻¹Bθ` and residual variance `θᵗθ - θᵗMθ + σ_f²` with
//! `M = BᵗΣ⁻¹B`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("instrument covariance is singular")]
    SingularCovariance,
    #[error("implied residual variance {0} is not positive")]
    NegativeVariance(f64),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid regime: {0}")]
    InvalidSpec(String),
}

/// Structural parameters used when generating an outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IvParams {
    pub alpha: f64,
    pub beta: f64,
    /// Outcome noise s.d.
    pub xi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub p: usize,
    pub n: usize,
    pub k: usize,
    pub theta: Vec<f64>,
    /// Noise s.d. of the treatment given the latent factors.
    pub sigma_resid: f64,
    pub iv_params: Option<IvParams>,
    pub seed: u64,
}

impl RegimeSpec {
    /// p = 30, n = 60, k = 3; the dominant factor drives the treatment.
    pub fn regime1(seed: u64) -> Self {
        Self {
            p: 30,
            n: 60,
            k: 3,
            theta: vec![1.0, 0.0, 0.0],
            sigma_resid: 0.2,
            iv_params: None,
            seed,
        }
    }

    /// p = 30, n = 60, k = 10; the weakest factor drives the treatment.
    pub fn regime2(seed: u64) -> Self {
        let mut theta = vec![0.0; 10];
        theta[9] = 1.0;
        Self {
            p: 30,
            n: 60,
            k: 10,
            theta,
            sigma_resid: 0.2,
            iv_params: None,
            seed,
        }
    }

    /// The coverage study: p = 20, n = 60, k = 3, α = -0.08, β = 0.2.
    pub fn iv_study(seed: u64) -> Self {
        Self {
            p: 20,
            iv_params: Some(IvParams {
                alpha: -0.08,
                beta: 0.2,
                xi: 0.2,
            }),
            ..Self::regime1(seed)
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.p == 0 || self.n == 0 || self.k == 0 {
            return Err(SimError::InvalidSpec("dimensions must be positive".into()));
        }
        if self.theta.len() != self.k {
            return Err(SimError::InvalidSpec(format!(
                "theta has length {} but k = {}",
                self.theta.len(),
                self.k
            )));
        }
        if !(self.sigma_resid >= 0.0) {
            return Err(SimError::InvalidSpec("sigma_resid must be non-negative".into()));
        }
        Ok(())
    }

    pub fn theta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.theta)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorParams {
    /// `p × k` loadings `A W`.
    pub b: DMatrix<f64>,
    /// Idiosyncratic variances `ψ_j²`.
    pub psi2: DVector<f64>,
    /// Factor scales, descending in absolute value.
    pub w: DVector<f64>,
    /// The uniform draws `u_j` behind `ψ_j`.
    pub u: DVector<f64>,
}

impl FactorParams {
    pub fn p(&self) -> usize {
        self.b.nrows()
    }

    pub fn k(&self) -> usize {
        self.b.ncols()
    }

    /// `BBᵗ + Ψ²`.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.b * self.b.transpose() + DMatrix::from_diagonal(&self.psi2)
    }
}

pub fn gen_factor_params<R: Rng + ?Sized>(spec: &RegimeSpec, rng: &mut R) -> FactorParams {
    let (p, k) = (spec.p, spec.k);
    let a = DMatrix::from_fn(p, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let t5 = StudentT::<f64>::new(5.0).expect("valid dof");
    let mut w: Vec<f64> = (0..k).map(|_| 1.0 + t5.sample(rng).abs()).collect();
    w.sort_by(|x, y| y.abs().total_cmp(&x.abs()));
    let w = DVector::from_vec(w);
    let b = a * DMatrix::from_diagonal(&w);
    let unif = Uniform::new(0.5, 1.75).expect("valid range");
    let u = DVector::from_fn(p, |_, _| unif.sample(rng));
    let psi2 = DVector::from_fn(p, |j, _| {
        let psi = b.row(j).norm() / u[j];
        psi * psi
    });
    FactorParams { b, psi2, w, u }
}

/// `n` i.i.d. draws `z = Bf + Ψε`, returned as a `p × n` matrix.
pub fn gen_instruments<R: Rng + ?Sized>(params: &FactorParams, n: usize, rng: &mut R) -> DMatrix<f64> {
    let (p, k) = (params.p(), params.k());
    let f = DMatrix::from_fn(k, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let eps = DMatrix::from_fn(p, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let psi = params.psi2.map(f64::sqrt);
    &params.b * f + DMatrix::from_diagonal(&psi) * eps
}

/// `Σ⁻¹ B` via a Cholesky solve.
fn solve_loadings(params: &FactorParams) -> Result<DMatrix<f64>, SimError> {
    let chol = params.covariance().cholesky().ok_or(SimError::SingularCovariance)?;
    Ok(chol.solve(&params.b))
}

/// `δ = Σ⁻¹Bθ`, the population regression of `θᵗf` on `z`.
pub fn implied_delta(params: &FactorParams, theta: &DVector<f64>) -> Result<DVector<f64>, SimError> {
    if theta.len() != params.k() {
        return Err(SimError::DimensionMismatch {
            expected: params.k(),
            actual: theta.len(),
        });
    }
    Ok(solve_loadings(params)? * theta)
}

/// `M = BᵗΣ⁻¹B`.
pub fn factor_information(params: &FactorParams) -> Result<DMatrix<f64>, SimError> {
    Ok(params.b.transpose() * solve_loadings(params)?)
}

/// Residual s.d. of `x = θᵗf + σ_f ε` given `z`: `√(θᵗθ - θᵗMθ + σ_f²)`.
pub fn conditional_sigma(params: &FactorParams, theta: &DVector<f64>, sigma_factor: f64) -> Result<f64, SimError> {
    let m = factor_information(params)?;
    let explained = (theta.transpose() * &m * theta)[(0, 0)];
    let var = theta.norm_squared() - explained + sigma_factor * sigma_factor;
    if var > 0.0 {
        Ok(var.sqrt())
    } else {
        Err(SimError::NegativeVariance(var))
    }
}

/// `√(1 - m + 1/25)` with `m` the diagonal entry of `M` for the regime's
/// predictive factor.
pub fn theoretical_sigma(params: &FactorParams, spec: &RegimeSpec) -> Result<f64, SimError> {
    conditional_sigma(params, &spec.theta_vector(), spec.sigma_resid)
}

/// `x = Zᵗδ + N(0, σ²)`.
pub fn gen_response<R: Rng + ?Sized>(
    z: &DMatrix<f64>,
    delta: &DVector<f64>,
    sigma: f64,
    rng: &mut R,
) -> Result<DVector<f64>, SimError> {
    if delta.len() != z.nrows() {
        return Err(SimError::DimensionMismatch {
            expected: z.nrows(),
            actual: delta.len(),
        });
    }
    let mean = z.tr_mul(delta);
    Ok(mean.map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal)))
}

/// `y = xβ + α(x - Zᵗδ) + N(0, ξ²)`.
pub fn gen_iv_outcome<R: Rng + ?Sized>(
    x: &DVector<f64>,
    z: &DMatrix<f64>,
    delta: &DVector<f64>,
    params: IvParams,
    rng: &mut R,
) -> Result<DVector<f64>, SimError> {
    if delta.len() != z.nrows() {
        return Err(SimError::DimensionMismatch {
            expected: z.nrows(),
            actual: delta.len(),
        });
    }
    if x.len() != z.ncols() {
        return Err(SimError::DimensionMismatch {
            expected: z.ncols(),
            actual: x.len(),
        });
    }
    let fitted = z.tr_mul(delta);
    Ok(DVector::from_fn(x.len(), |i, _| {
        x[i] * params.beta + params.alpha * (x[i] - fitted[i]) + params.xi * rng.sample::<f64, _>(StandardNormal)
    }))
}

/// One simulated data set with its generating truth.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub params: FactorParams,
    /// `p × n`.
    pub z: DMatrix<f64>,
    pub x: DVector<f64>,
    pub y: Option<DVector<f64>>,
    pub delta: DVector<f64>,
    /// Residual s.d. of `x` given `z`.
    pub sigma: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn regimes_are_valid() {
        for spec in [RegimeSpec::regime1(0), RegimeSpec::regime2(0), RegimeSpec::iv_study(0)] {
            spec.validate().unwrap();
        }
        let mut bad = RegimeSpec::regime1(0);
        bad.theta.push(0.0);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_factor_scale_at_least_one() {
        let spec = RegimeSpec {
            k: 1,
            theta: vec![1.0],
            ..RegimeSpec::regime1(0)
        };
        let params = gen_factor_params(&spec, &mut substream(1, 1));
        assert!(params.w[0] >= 1.0);
    }

    #[test]
    fn scales_sorted_and_psi_bounded() {
        let mut rng = substream(2, 1);
        for _ in 0..50 {
            let params = gen_factor_params(&RegimeSpec::regime2(0), &mut rng);
            for g in 1..params.k() {
                assert!(params.w[g - 1].abs() >= params.w[g].abs());
            }
            for j in 0..params.p() {
                let ratio = params.psi2[j].sqrt() / params.b.row(j).norm();
                assert!((4.0 / 7.0 - 1e-12..=2.0 + 1e-12).contains(&ratio));
            }
        }
    }

    #[test]
    fn degenerate_rank_one_instruments_are_collinear() {
        let params = FactorParams {
            b: DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 0.5]),
            psi2: DVector::zeros(3),
            w: DVector::from_element(1, 1.0),
            u: DVector::from_element(3, 1.0),
        };
        let z = gen_instruments(&params, 20, &mut substream(3, 1));
        assert_eq!(crate::linalg::numerical_rank(&z, 1e-10), 1);
    }

    #[test]
    fn generators_are_seed_deterministic() {
        let spec = RegimeSpec::regime1(0);
        let a = gen_factor_params(&spec, &mut substream(4, 1));
        let b = gen_factor_params(&spec, &mut substream(4, 1));
        assert_eq!(a, b);
        let za = gen_instruments(&a, 10, &mut substream(4, 2));
        let zb = gen_instruments(&b, 10, &mut substream(4, 2));
        assert_eq!(za, zb);
        let delta = implied_delta(&a, &spec.theta_vector()).unwrap();
        let xa = gen_response(&za, &delta, 0.2, &mut substream(4, 3)).unwrap();
        let xb = gen_response(&zb, &delta, 0.2, &mut substream(4, 3)).unwrap();
        assert_eq!(xa, xb);
    }

    #[test]
    fn zero_theta_gives_zero_delta() {
        let params = gen_factor_params(&RegimeSpec::regime1(0), &mut substream(5, 1));
        let delta = implied_delta(&params, &DVector::zeros(3)).unwrap();
        assert_eq!(delta, DVector::zeros(30));
    }

    #[test]
    fn scalar_delta() {
        let params = FactorParams {
            b: DMatrix::from_element(1, 1, 2.0),
            psi2: DVector::from_element(1, 0.5),
            w: DVector::from_element(1, 2.0),
            u: DVector::from_element(1, 1.0),
        };
        let delta = implied_delta(&params, &DVector::from_element(1, 3.0)).unwrap();
        assert!((delta[0] - 3.0 * 2.0 / (4.0 + 0.5)).abs() < 1e-14);
    }

    #[test]
    fn sigma_tends_to_noise_floor_for_huge_idiosyncrasies() {
        let params = FactorParams {
            b: DMatrix::from_element(2, 1, 1.0),
            psi2: DVector::from_element(2, 1e12),
            w: DVector::from_element(1, 1.0),
            u: DVector::from_element(2, 1.0),
        };
        let s = conditional_sigma(&params, &DVector::from_element(1, 1.0), 0.2).unwrap();
        assert!((s - (1.0f64 + 1.0 / 25.0).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn negative_variance_is_reported() {
        let params = FactorParams {
            b: DMatrix::from_element(1, 1, 1.0),
            psi2: DVector::from_element(1, 1.0),
            w: DVector::from_element(1, 1.0),
            u: DVector::from_element(1, 1.0),
        };
        // No signal and no noise leaves nothing to scale by.
        assert!(conditional_sigma(&params, &DVector::from_element(1, 1.0), 0.0).is_ok());
        let err = conditional_sigma(&params, &DVector::from_element(1, 0.0), 0.0).unwrap_err();
        assert!(matches!(err, SimError::NegativeVariance(_)));
    }

    #[test]
    fn noiseless_outcome_is_beta_times_x() {
        let mut rng = substream(6, 1);
        let z = DMatrix::from_fn(3, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
        let delta = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let params = IvParams {
            alpha: 0.0,
            beta: 0.7,
            xi: 0.0,
        };
        let y = gen_iv_outcome(&x, &z, &delta, params, &mut rng).unwrap();
        assert!((y - &x * 0.7).amax() < 1e-15);
        let x0 = gen_response(&z, &delta, 0.0, &mut rng).unwrap();
        assert!((x0 - z.tr_mul(&delta)).amax() < 1e-15);
    }
}
