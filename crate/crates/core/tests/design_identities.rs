use fsiv::design::{collapse_coefficients, enrich_with_basis, implied_prior_covariance, CoefficientMap};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

/// Orthonormal `p × k` basis from the QR factor of a random matrix.
fn basis(p: usize, k: usize, data: &[f64]) -> DMatrix<f64> {
    let a = DMatrix::from_row_slice(p, k, &data[..p * k]);
    a.qr().q().columns(0, k).into_owned()
}

fn instance() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>)> {
    (2usize..12).prop_flat_map(|p| {
        (1..p, 2usize..30).prop_flat_map(move |(k, n)| {
            (
                Just(p),
                Just(k),
                Just(n),
                prop::collection::vec(-2.0f64..2.0, p * k + p * n + p + k),
            )
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn enrichment_identities_hold((p, k, n, data) in instance()) {
        let b = basis(p, k, &data);
        prop_assume!(b.column_iter().all(|c| c.norm() > 0.5));
        let z = DMatrix::from_row_slice(p, n, &data[p * k..p * k + p * n]);
        let design = enrich_with_basis(&z, &b).unwrap();
        prop_assert!(design.is_orthonormal());
        prop_assert_eq!(design.z_tilde.shape(), (p + k, n));

        let cov = implied_prior_covariance(&design);
        prop_assert!((cov - DMatrix::<f64>::identity(p, p)).amax() < 1e-10);

        let recon = &b * design.factor_block() + design.residual_block();
        prop_assert!((recon - &z).amax() < 1e-10 * (1.0 + z.amax()));

        // The residual block is orthogonal to the loadings.
        prop_assert!((b.transpose() * design.residual_block()).amax() < 1e-10 * (1.0 + z.amax()));

        let delta_tilde = DVector::from_column_slice(&data[p * k + p * n..]);
        let delta = collapse_coefficients(&delta_tilde, &design).unwrap();
        let lhs = z.tr_mul(&delta);
        let rhs = design.z_tilde.tr_mul(&delta_tilde);
        prop_assert!((lhs - rhs).amax() < 1e-10 * (1.0 + z.amax() * delta_tilde.amax()));

        let map = CoefficientMap::new(delta_tilde.clone(), &design).unwrap();
        prop_assert_eq!(map.delta_f.len(), k);
        prop_assert_eq!(map.delta_r.len(), p);
        prop_assert_eq!(map.delta, delta);
    }
}

#[test]
fn wrong_coefficient_length_is_rejected() {
    let z = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
    let b = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
    let design = enrich_with_basis(&z, &b).unwrap();
    assert!(collapse_coefficients(&DVector::zeros(2), &design).is_err());
}
