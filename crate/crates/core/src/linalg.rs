//! Dense symmetric helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order and eigenvectors permuted to match.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let p = m.nrows();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = DVector::from_iterator(p, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(p, p);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// `(m + mᵗ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Largest absolute entry of `aᵗa - I`.
pub fn orthonormality_defect(a: &DMatrix<f64>) -> f64 {
    let gram = a.transpose() * a;
    let k = gram.nrows();
    (gram - DMatrix::<f64>::identity(k, k)).amax()
}

/// Numerical rank from singular values, relative to the largest one.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}
