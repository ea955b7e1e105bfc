//! Independent oracles shared by the integration tests. None of these call
//! into the algorithms they check.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Random 3×3 correlation matrix from `AAᵗ` with `A` a 3×5 Gaussian matrix.
pub fn random_correlation_3x3<R: Rng>(rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(3, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
    let s = &a * a.transpose();
    DMatrix::from_fn(3, 3, |i, j| {
        if i == j {
            1.0
        } else {
            let v = s[(i, j)] / (s[(i, i)] * s[(j, j)]).sqrt();
            // Exact symmetry regardless of rounding order.
            let w = s[(j, i)] / (s[(j, j)] * s[(i, i)]).sqrt();
            0.5 * (v + w)
        }
    })
}

/// Largest `d1 + d2 + d3` with `0 ≤ d_j ≤ S_jj` and `S - diag(d) ⪰ 0`.
///
/// `d1, d2` run over a grid of the given step; for each, the largest
/// feasible `d3` is the Schur complement `S33 - vᵗK⁻¹v` of the leading
/// 2×2 block `K`, which must be positive definite.
pub fn brute_force_min_trace_3x3(s: &DMatrix<f64>, step: f64) -> f64 {
    let steps1 = (s[(0, 0)] / step).floor() as usize;
    let steps2 = (s[(1, 1)] / step).floor() as usize;
    let mut best = f64::NEG_INFINITY;
    for i in 0..=steps1 {
        let d1 = i as f64 * step;
        let k11 = s[(0, 0)] - d1;
        if k11 <= 0.0 {
            continue;
        }
        for j in 0..=steps2 {
            let d2 = j as f64 * step;
            let k22 = s[(1, 1)] - d2;
            let k12 = s[(0, 1)];
            let det = k11 * k22 - k12 * k12;
            if k22 <= 0.0 || det <= 0.0 {
                continue;
            }
            let (v1, v2) = (s[(0, 2)], s[(1, 2)]);
            let quad = (k22 * v1 * v1 - 2.0 * k12 * v1 * v2 + k11 * v2 * v2) / det;
            let d3_max = s[(2, 2)] - quad;
            if d3_max < 0.0 {
                continue;
            }
            best = best.max(d1 + d2 + d3_max.min(s[(2, 2)]));
        }
    }
    best
}

/// Composite Simpson rule on `[a, b]` with `m` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, m: usize) -> f64 {
    assert!(m.is_multiple_of(2));
    let h = (b - a) / m as f64;
    let mut acc = f(a) + f(b);
    for i in 1..m {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// `E(θ | y)` for `y ~ N(θ, 1)`, `θ ~ N(0, λ²)`, `λ ~ C⁺(0, 1)`.
///
/// With `κ = 1/(1+λ²)` the posterior of `κ` is proportional to
/// `(1-κ)^{-1/2} exp(-κy²/2)`; substituting `κ = 1 - u²` removes the
/// endpoint singularity, and `E(θ | y) = (1 - E(κ | y)) y`.
pub fn horseshoe_posterior_mean(y: f64) -> f64 {
    let y2 = y * y;
    // Both integrands carry a factor exp(-y²/2); drop it to stay O(1).
    let num = simpson(|u| 2.0 * (1.0 - u * u) * (u * u * y2 / 2.0).exp(), 0.0, 1.0, 200_000);
    let den = simpson(|u| 2.0 * (u * u * y2 / 2.0).exp(), 0.0, 1.0, 200_000);
    (1.0 - num / den) * y
}

/// CDF of Beta(1/2, 1/2): `(2/π) asin(√x)`.
pub fn arcsine_cdf(x: f64) -> f64 {
    2.0 / std::f64::consts::PI * x.clamp(0.0, 1.0).sqrt().asin()
}

/// One-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log p(y | x, z, δ)` up to a constant that does not depend on `δ`, by
/// numerical integration over `(β, α, ξ²)` of
///
/// ```text
/// N(y | x̃θ, ξ² I) · N(θ | 0, ξ² c I) · IG(ξ² | v/2, s/2)
/// ```
///
/// with `x̃_i = (x_i, x_i - z_iᵗδ)`. The outer integral runs over
/// `t = log ξ²` by the trapezoid rule; for each `t` the inner integral is
/// taken over `u = θ/ξ` on a grid aligned with the axes of the integrand,
/// whose centre and spread come from a hand-rolled 2×2 least-squares solve.
pub fn numeric_log_marginal(
    x: &DVector<f64>,
    y: &DVector<f64>,
    z: &DMatrix<f64>,
    delta: &DVector<f64>,
    c: f64,
    s: f64,
    v: f64,
) -> f64 {
    let n = x.len();
    let fitted = z.tr_mul(delta);
    let cols: Vec<[f64; 2]> = (0..n).map(|i| [x[i], x[i] - fitted[i]]).collect();

    // P = x̃ᵗx̃ + I/c and q = x̃ᵗy.
    let mut p = [[1.0 / c, 0.0], [0.0, 1.0 / c]];
    let mut q = [0.0; 2];
    for (i, r) in cols.iter().enumerate() {
        for a in 0..2 {
            q[a] += r[a] * y[i];
            for b in 0..2 {
                p[a][b] += r[a] * r[b];
            }
        }
    }
    let det = p[0][0] * p[1][1] - p[0][1] * p[1][0];
    let centre_unit = [
        (p[1][1] * q[0] - p[0][1] * q[1]) / det,
        (p[0][0] * q[1] - p[1][0] * q[0]) / det,
    ];
    // Eigen-decomposition of the symmetric 2×2 P.
    let tr = p[0][0] + p[1][1];
    let disc = ((p[0][0] - p[1][1]).powi(2) / 4.0 + p[0][1] * p[0][1]).sqrt();
    let eig = [tr / 2.0 + disc, tr / 2.0 - disc];
    let vecs = if p[0][1].abs() > 1e-300 {
        let v0 = [eig[0] - p[1][1], p[0][1]];
        let n0 = (v0[0] * v0[0] + v0[1] * v0[1]).sqrt();
        let v0 = [v0[0] / n0, v0[1] / n0];
        [v0, [-v0[1], v0[0]]]
    } else if p[0][0] >= p[1][1] {
        [[1.0, 0.0], [0.0, 1.0]]
    } else {
        [[0.0, 1.0], [1.0, 0.0]]
    };
    let sd = [1.0 / eig[0].sqrt(), 1.0 / eig[1].sqrt()];

    let half_width = 9.0;
    let h_w = 0.5;
    let m_w = (2.0 * half_width / h_w) as usize;
    let t_lo = -30.0;
    let t_hi = 30.0;
    let h_t = 0.01;
    let m_t = ((t_hi - t_lo) / h_t) as usize;
    let log_2pi = (2.0 * std::f64::consts::PI).ln();

    let mut outer = Vec::with_capacity(m_t + 1);
    let mut inner = Vec::with_capacity((m_w + 1) * (m_w + 1));
    for it in 0..=m_t {
        let t = t_lo + it as f64 * h_t;
        let xi2 = t.exp();
        let xi = xi2.sqrt();
        let centre = [centre_unit[0] / xi, centre_unit[1] / xi];
        inner.clear();
        for a in 0..=m_w {
            let wa = -half_width + a as f64 * h_w;
            for b in 0..=m_w {
                let wb = -half_width + b as f64 * h_w;
                let u = [
                    centre[0] + vecs[0][0] * sd[0] * wa + vecs[1][0] * sd[1] * wb,
                    centre[1] + vecs[0][1] * sd[0] * wa + vecs[1][1] * sd[1] * wb,
                ];
                let mut rss = 0.0;
                for (i, r) in cols.iter().enumerate() {
                    let e = y[i] - xi * (r[0] * u[0] + r[1] * u[1]);
                    rss += e * e;
                }
                let log_lik = -0.5 * n as f64 * (log_2pi + t) - rss / (2.0 * xi2);
                let log_prior = -(log_2pi + c.ln()) - (u[0] * u[0] + u[1] * u[1]) / (2.0 * c);
                let edge = (a == 0 || a == m_w) as u8 + (b == 0 || b == m_w) as u8;
                inner.push(log_lik + log_prior - edge as f64 * std::f64::consts::LN_2);
            }
        }
        let log_inner = log_sum_exp(&inner) + (h_w * h_w * sd[0] * sd[1]).ln();
        // IG(v/2, s/2) density of ξ² without its normalizing constant, times
        // the Jacobian dξ²/dt = ξ².
        let log_prior_t = -(v / 2.0) * t - s / (2.0 * xi2);
        let edge = if it == 0 || it == m_t {
            std::f64::consts::LN_2
        } else {
            0.0
        };
        outer.push(log_inner + log_prior_t - edge);
    }
    log_sum_exp(&outer) + h_t.ln()
}
