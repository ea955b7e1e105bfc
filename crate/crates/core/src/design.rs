//! Enriched (over-complete) instrument design.
//!
//! The `(p + k) × n` design stacks the factor projections `B̃ᵗZ` on top of the
//! residual instruments `(I - B̃B̃ᵗ)Z`. Its rows span exactly the row space of
//! `Z`; the residual block has rank `p - k` and is kept whole.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::frisch::LoadingsBasis;
use crate::linalg::orthonormality_defect;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

/// Columns of `b_tilde` count as orthonormal within this tolerance.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct EnrichedDesign {
    /// `(p + k) × n`.
    pub z_tilde: DMatrix<f64>,
    pub b_tilde: DMatrix<f64>,
    /// `B̃B̃ᵗ`.
    pub projector: DMatrix<f64>,
    pub p: usize,
    pub k: usize,
    pub n: usize,
}

impl EnrichedDesign {
    pub fn is_orthonormal(&self) -> bool {
        orthonormality_defect(&self.b_tilde) <= ORTHONORMAL_TOL
    }

    pub fn factor_block(&self) -> DMatrix<f64> {
        self.z_tilde.rows(0, self.k).into_owned()
    }

    pub fn residual_block(&self) -> DMatrix<f64> {
        self.z_tilde.rows(self.k, self.p).into_owned()
    }
}

pub fn enrich(z: &DMatrix<f64>, basis: &LoadingsBasis) -> Result<EnrichedDesign, DesignError> {
    enrich_with_basis(z, &basis.b_tilde)
}

/// Build the design from an explicit `p × k` basis. `k = 0` is allowed and
/// yields `Z` itself as the residual block.
pub fn enrich_with_basis(z: &DMatrix<f64>, b_tilde: &DMatrix<f64>) -> Result<EnrichedDesign, DesignError> {
    let (p, n) = z.shape();
    if b_tilde.nrows() != p {
        return Err(DesignError::DimensionMismatch {
            expected: p,
            actual: b_tilde.nrows(),
        });
    }
    let k = b_tilde.ncols();
    let projector = b_tilde * b_tilde.transpose();
    let factors = b_tilde.transpose() * z;
    let residual = z - &projector * z;
    let mut z_tilde = DMatrix::zeros(p + k, n);
    z_tilde.rows_mut(0, k).copy_from(&factors);
    z_tilde.rows_mut(k, p).copy_from(&residual);
    Ok(EnrichedDesign {
        z_tilde,
        b_tilde: b_tilde.clone(),
        projector,
        p,
        k,
        n,
    })
}

/// Enriched-space coefficients split into factor and residual parts, with
/// their image in the original instrument space.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMap {
    pub delta_tilde: DVector<f64>,
    pub delta_f: DVector<f64>,
    pub delta_r: DVector<f64>,
    pub delta: DVector<f64>,
}

impl CoefficientMap {
    pub fn new(delta_tilde: DVector<f64>, design: &EnrichedDesign) -> Result<Self, DesignError> {
        let delta = collapse_coefficients(&delta_tilde, design)?;
        let delta_f = delta_tilde.rows(0, design.k).into_owned();
        let delta_r = delta_tilde.rows(design.k, design.p).into_owned();
        Ok(Self {
            delta_tilde,
            delta_f,
            delta_r,
            delta,
        })
    }
}

/// `δ = B̃δ̃_f + (I - B̃B̃ᵗ)δ̃_r`, so that `Zᵗδ = Z̃ᵗδ̃`.
pub fn collapse_coefficients(delta_tilde: &DVector<f64>, design: &EnrichedDesign) -> Result<DVector<f64>, DesignError> {
    let (p, k) = (design.p, design.k);
    if delta_tilde.len() != p + k {
        return Err(DesignError::DimensionMismatch {
            expected: p + k,
            actual: delta_tilde.len(),
        });
    }
    let delta_f = delta_tilde.rows(0, k);
    let delta_r = delta_tilde.rows(k, p);
    Ok(&design.b_tilde * delta_f + delta_r - &design.projector * delta_r)
}

/// Prior covariance of `δ` when every enriched coefficient has unit prior
/// variance: `B̃B̃ᵗ + (I - B̃B̃ᵗ)(I - B̃B̃ᵗ)ᵗ`, the identity for an orthonormal
/// basis.
pub fn implied_prior_covariance(design: &EnrichedDesign) -> DMatrix<f64> {
    let p = design.p;
    let complement = DMatrix::<f64>::identity(p, p) - &design.projector;
    &design.projector + &complement * complement.transpose()
}
