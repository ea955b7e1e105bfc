//! Inputs shared by the benchmarks, built from one replication of a
//! simulation regime.

use fsiv::design::{enrich, EnrichedDesign};
use fsiv::frisch::{sample_correlation, solve_min_trace, truncate_loadings, RankRule, SolverOptions, SymmetricMatrix};
use fsiv::harness::generate_replication;
use fsiv::simgen::RegimeSpec;
use nalgebra::{DMatrix, DVector};

pub struct Fixture {
    pub z: DMatrix<f64>,
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub corr: SymmetricMatrix,
    pub design: EnrichedDesign,
}

/// Replication 0 of the coverage study (p = 20, n = 60) with `p` and `n`
/// overridden.
pub fn fixture(p: usize, n: usize) -> Fixture {
    let spec = RegimeSpec {
        p,
        n,
        ..RegimeSpec::iv_study(1)
    };
    let rep = generate_replication(&spec, 0).expect("fixture generates");
    let corr = sample_correlation(&rep.data.z).expect("nonconstant rows").corr;
    let dec = solve_min_trace(&corr, &SolverOptions::default()).expect("solver converges");
    let basis = truncate_loadings(&dec, RankRule::default()).expect("rank in range");
    let design = enrich(&rep.data.z, &basis).expect("orthonormal basis");
    Fixture {
        z: rep.data.z,
        x: rep.data.x,
        y: rep.data.y.expect("coverage regime has an outcome"),
        corr,
        design,
    }
}
