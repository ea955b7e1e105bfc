//! Replication loops for the RMSE and coverage studies, and single fits.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::report::{
    input_hash, CoverageComparison, FitSummary, MethodSummary, PairedDifference, ReplicationRecord, StudyReport,
    SCHEMA_VERSION,
};
use super::{HarnessError, IvData, StudyConfig, StudyKind};
use crate::horseshoe::ChainConfig;
use crate::iv::{fit_first_stage, prepare_instruments, resample_structural, FirstStage, IvError, PreparedInstruments};
use crate::rng::{derived_seed, stream_id, substream, Purpose};
use crate::simgen::{
    gen_factor_params, gen_instruments, gen_iv_outcome, gen_response, implied_delta, theoretical_sigma, Dataset,
    RegimeSpec, SimError,
};
use crate::stats::{mean, std_error};

/// Parameter draws with a non-positive residual variance are redrawn up to
/// this many times per replication.
pub const MAX_PARAMETER_ATTEMPTS: u16 = 1000;

/// `√(σ² + n⁻¹ Σ_i (z_iᵗ(δ - δ̂))²) / σ`, with `z` stored `p × n`.
///
/// # Panics
///
/// If the dimensions disagree or `sigma` is not positive.
pub fn scaled_rmse(delta_hat: &DVector<f64>, delta_true: &DVector<f64>, z: &DMatrix<f64>, sigma: f64) -> f64 {
    assert_eq!(delta_hat.len(), z.nrows(), "delta_hat length");
    assert_eq!(delta_true.len(), z.nrows(), "delta_true length");
    assert!(sigma > 0.0, "sigma must be positive");
    let err = z.tr_mul(&(delta_true - delta_hat));
    let n = z.ncols() as f64;
    (sigma * sigma + err.norm_squared() / n).sqrt() / sigma
}

/// One simulated data set plus the number of rejected parameter draws.
#[derive(Debug, Clone)]
pub struct Replication {
    pub index: usize,
    pub data: Dataset,
    pub rejected: usize,
}

/// Generate replication `index` of `spec`. Every piece of randomness comes
/// from a substream of `spec.seed` addressed by `(index, attempt, purpose)`.
///
/// The treatment is `x = zᵗδ + e` with `e ~ N(0, σ²)` and `σ` the
/// theoretical residual s.d.; this is the conditional law of `x` given `z`
/// when `x = θᵗf + σ_f ε` and `z` loads on the same factors `f`.
pub fn generate_replication(spec: &RegimeSpec, index: usize) -> Result<Replication, SimError> {
    spec.validate()?;
    let theta = spec.theta_vector();
    let rep = index as u64;
    let mut last = SimError::NegativeVariance(f64::NAN);
    for attempt in 0..MAX_PARAMETER_ATTEMPTS {
        let stream = |purpose| substream(spec.seed, stream_id(rep, attempt, purpose, 0));
        let params = gen_factor_params(spec, &mut stream(Purpose::Parameters));
        let sigma = match theoretical_sigma(&params, spec) {
            Ok(s) => s,
            Err(e @ (SimError::NegativeVariance(_) | SimError::SingularCovariance)) => {
                last = e;
                continue;
            }
            Err(e) => return Err(e),
        };
        let delta = implied_delta(&params, &theta)?;
        let z = gen_instruments(&params, spec.n, &mut stream(Purpose::Instruments));
        let x = gen_response(&z, &delta, sigma, &mut stream(Purpose::Treatment))?;
        let y = spec
            .iv_params
            .map(|p| gen_iv_outcome(&x, &z, &delta, p, &mut stream(Purpose::Outcome)))
            .transpose()?;
        return Ok(Replication {
            index,
            data: Dataset {
                params,
                z,
                x,
                y,
                delta,
                sigma,
            },
            rejected: attempt as usize,
        });
    }
    Err(last)
}

/// Fixed stream slot per method so that adding or reordering methods does
/// not change any other method's draws.
fn method_slot(method: FirstStage) -> u8 {
    match method {
        FirstStage::FactorShrinkage => 0,
        FirstStage::HorseshoeRaw => 1,
        FirstStage::FactorsOnly => 2,
    }
}

fn chain_for(cfg: &StudyConfig, rep: usize, method: FirstStage) -> ChainConfig {
    ChainConfig {
        seed: derived_seed(cfg.seed, stream_id(rep as u64, 0, Purpose::Chain, method_slot(method))),
        ..cfg.chain.clone()
    }
}

fn resample_seed_for(cfg: &StudyConfig, rep: usize, method: FirstStage) -> u64 {
    derived_seed(
        cfg.seed,
        stream_id(rep as u64, 0, Purpose::Resample, method_slot(method)),
    )
}

fn centered(v: &DVector<f64>) -> DVector<f64> {
    let m = v.mean();
    v.map(|x| x - m)
}

/// Standardize and, when any method needs it, solve for the loadings basis.
/// A failed basis only fails the methods that use it.
fn prepare(cfg: &StudyConfig, z: &DMatrix<f64>) -> Result<(PreparedInstruments, Option<IvError>), IvError> {
    let wants_basis = cfg.methods.iter().any(|m| m.needs_basis());
    match prepare_instruments(z, cfg.rank_rule, &cfg.solver, wants_basis) {
        Ok(p) => Ok((p, None)),
        Err(e) if wants_basis => {
            let p = prepare_instruments(z, cfg.rank_rule, &cfg.solver, false)?;
            Ok((p, Some(e)))
        }
        Err(e) => Err(e),
    }
}

struct RepOutcome {
    records: Vec<ReplicationRecord>,
    rejected: usize,
}

fn failed_rep(cfg: &StudyConfig, rep: usize, err: &dyn std::fmt::Display) -> RepOutcome {
    log::warn!("replication {rep} failed: {err}");
    RepOutcome {
        records: cfg
            .methods
            .iter()
            .map(|m| ReplicationRecord::failed(rep, m.name(), err.to_string()))
            .collect(),
        rejected: 0,
    }
}

/// Runs `body` for every method, turning errors into failed records.
fn per_method(
    cfg: &StudyConfig,
    rep: usize,
    basis_error: &Option<IvError>,
    mut body: impl FnMut(FirstStage) -> Result<ReplicationRecord, IvError>,
) -> Vec<ReplicationRecord> {
    cfg.methods
        .iter()
        .map(|&method| {
            let result = match basis_error {
                Some(e) if method.needs_basis() => Err(e.clone()),
                _ => body(method),
            };
            result.unwrap_or_else(|e| {
                log::warn!("replication {rep}, {}: {e}", method.name());
                ReplicationRecord::failed(rep, method.name(), e.to_string())
            })
        })
        .collect()
}

fn rmse_replication(cfg: &StudyConfig, spec: &RegimeSpec, rep: usize) -> RepOutcome {
    let sim = match generate_replication(spec, rep) {
        Ok(s) => s,
        Err(e) => return failed_rep(cfg, rep, &e),
    };
    let data = &sim.data;
    let (prepared, basis_error) = match prepare(cfg, &data.z) {
        Ok(p) => p,
        Err(e) => return failed_rep(cfg, rep, &e),
    };
    let xc = centered(&data.x);
    let records = per_method(cfg, rep, &basis_error, |method| {
        let fit = fit_first_stage(&prepared, &xc, method, &chain_for(cfg, rep, method))?;
        let delta_hat = prepared.scaling.to_raw_coefficients(&fit.posterior_mean());
        Ok(ReplicationRecord {
            rmse: Some(scaled_rmse(&delta_hat, &data.delta, &data.z, data.sigma)),
            sigma: Some(data.sigma),
            ess: Some(fit.mean_ess),
            rank: fit.rank,
            ..ReplicationRecord::new(rep, method.name())
        })
    });
    RepOutcome {
        records,
        rejected: sim.rejected,
    }
}

fn coverage_replication(cfg: &StudyConfig, spec: &RegimeSpec, rep: usize) -> RepOutcome {
    let truth = spec.iv_params.expect("validated").beta;
    let sim = match generate_replication(spec, rep) {
        Ok(s) => s,
        Err(e) => return failed_rep(cfg, rep, &e),
    };
    let data = &sim.data;
    let y = data.y.as_ref().expect("iv regime generates an outcome");
    let (prepared, basis_error) = match prepare(cfg, &data.z) {
        Ok(p) => p,
        Err(e) => return failed_rep(cfg, rep, &e),
    };
    let xc = centered(&data.x);
    let yc = centered(y);
    let records = per_method(cfg, rep, &basis_error, |method| {
        let fit = fit_first_stage(&prepared, &xc, method, &chain_for(cfg, rep, method))?;
        let post = resample_structural(
            &fit,
            &prepared,
            &xc,
            &yc,
            &cfg.prior,
            resample_seed_for(cfg, rep, method),
            None,
        )?;
        let beta = post.beta_summary();
        Ok(ReplicationRecord {
            sigma: Some(data.sigma),
            covered95: Some(beta.q025 <= truth && truth <= beta.q975),
            covered90: Some(beta.q05 <= truth && truth <= beta.q95),
            beta: Some(beta),
            ess: Some(post.first_stage_ess),
            importance_ess: Some(post.ess),
            degenerate: Some(post.degenerate),
            low_ess: Some(post.low_ess),
            rank: post.rank,
            ..ReplicationRecord::new(rep, method.name())
        })
    });
    RepOutcome {
        records,
        rejected: sim.rejected,
    }
}

fn opt_mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| mean(xs))
}

fn opt_se(xs: &[f64]) -> Option<f64> {
    (xs.len() >= 2).then(|| std_error(xs))
}

fn rate(flags: &[bool]) -> Option<f64> {
    (!flags.is_empty()).then(|| flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64)
}

fn summarize(name: &str, records: &[&ReplicationRecord]) -> MethodSummary {
    let ok: Vec<&ReplicationRecord> = records.iter().copied().filter(|r| r.error.is_none()).collect();
    let collect = |f: &dyn Fn(&ReplicationRecord) -> Option<f64>| ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>();
    let flags = |f: &dyn Fn(&ReplicationRecord) -> Option<bool>| ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>();
    let rmse = collect(&|r| r.rmse);
    let width95 = collect(&|r| r.beta.map(|b| b.width95()));
    let width90 = collect(&|r| r.beta.map(|b| b.width90()));
    let covered95 = flags(&|r| r.covered95);
    let coverage = rate(&covered95);
    MethodSummary {
        name: name.to_owned(),
        replications_ok: ok.len(),
        failures: records.len() - ok.len(),
        rmse_mean: opt_mean(&rmse),
        rmse_se: opt_se(&rmse),
        coverage,
        coverage_se: coverage.map(|c| (c * (1.0 - c) / covered95.len() as f64).sqrt()),
        coverage90: rate(&flags(&|r| r.covered90)),
        width_mean: opt_mean(&width95),
        width_se: opt_se(&width95),
        width90_mean: opt_mean(&width90),
        ess_mean: opt_mean(&collect(&|r| r.ess)),
        importance_ess_mean: opt_mean(&collect(&|r| r.importance_ess)),
        degenerate_rate: rate(&flags(&|r| r.degenerate)),
        low_ess_rate: rate(&flags(&|r| r.low_ess)),
        rank_mean: opt_mean(&collect(&|r| r.rank.map(|k| k as f64))),
    }
}

/// Pairs of per-replication values for two methods, over replications
/// where both produced one.
fn paired_values(
    by_rep: &[Vec<ReplicationRecord>],
    a: &str,
    b: &str,
    metric: impl Fn(&ReplicationRecord) -> Option<f64>,
) -> Vec<(f64, f64)> {
    by_rep
        .iter()
        .filter_map(|recs| {
            let get = |name: &str| {
                recs.iter()
                    .find(|r| r.method == name && r.error.is_none())
                    .and_then(&metric)
            };
            Some((get(a)?, get(b)?))
        })
        .collect()
}

fn assemble(
    cfg: &StudyConfig,
    outcomes: Vec<RepOutcome>,
    metric: &str,
    value: impl Fn(&ReplicationRecord) -> Option<f64> + Copy,
    started: Instant,
) -> StudyReport {
    let rejected = outcomes.iter().map(|o| o.rejected).sum();
    let by_rep: Vec<Vec<ReplicationRecord>> = outcomes.into_iter().map(|o| o.records).collect();
    let all: Vec<&ReplicationRecord> = by_rep.iter().flatten().collect();
    let per_method: Vec<MethodSummary> = cfg
        .methods
        .iter()
        .map(|m| {
            let mine: Vec<&ReplicationRecord> = all.iter().copied().filter(|r| r.method == m.name()).collect();
            summarize(m.name(), &mine)
        })
        .collect();

    let mut paired_differences = Vec::new();
    let mut coverage_comparisons = Vec::new();
    for (i, a) in cfg.methods.iter().enumerate() {
        for b in &cfg.methods[i + 1..] {
            let pairs = paired_values(&by_rep, a.name(), b.name(), value);
            if pairs.is_empty() {
                continue;
            }
            let diffs: Vec<f64> = pairs.iter().map(|(x, y)| x - y).collect();
            paired_differences.push(PairedDifference {
                metric: metric.to_owned(),
                a: a.name().to_owned(),
                b: b.name().to_owned(),
                mean: mean(&diffs),
                se: if diffs.len() >= 2 { std_error(&diffs) } else { f64::NAN },
                n: diffs.len(),
            });
            if cfg.kind == StudyKind::IvCoverage {
                let n = pairs.len() as f64;
                let ratios: Vec<f64> = pairs.iter().map(|(x, y)| x / y).collect();
                let narrower = pairs.iter().filter(|(x, y)| x < y).count() as f64;
                let mean_a = pairs.iter().map(|p| p.0).sum::<f64>() / n;
                let mean_b = pairs.iter().map(|p| p.1).sum::<f64>() / n;
                coverage_comparisons.push(CoverageComparison {
                    method: a.name().to_owned(),
                    reference: b.name().to_owned(),
                    mean_width_ratio: mean(&ratios),
                    narrower_fraction: narrower / n,
                    width_reduction: 1.0 - mean_a / mean_b,
                    n: pairs.len(),
                });
            }
        }
    }

    let failures = all.iter().filter(|r| r.error.is_some()).count();
    StudyReport {
        schema: SCHEMA_VERSION.into(),
        study: cfg.kind,
        config: cfg.clone(),
        seed: cfg.seed,
        input_hash: input_hash(cfg, None),
        per_method,
        paired_differences,
        coverage_comparisons,
        fits: Vec::new(),
        failures,
        rejected_parameter_draws: rejected,
        runtime_sec: started.elapsed().as_secs_f64(),
        replications: by_rep.into_iter().flatten().collect(),
    }
}

fn simulation_spec(cfg: &StudyConfig, expected: &[StudyKind]) -> Result<RegimeSpec, HarnessError> {
    cfg.validate()?;
    if !expected.contains(&cfg.kind) {
        return Err(HarnessError::Config(format!(
            "study kind {} not handled here",
            cfg.kind.name()
        )));
    }
    cfg.regime_spec()
        .ok_or_else(|| HarnessError::Config("simulation study needs a regime".into()))
}

/// Scaled RMSE of the posterior-mean first-stage coefficients for every
/// method on `cfg.reps` simulated data sets.
pub fn run_rmse_study(cfg: &StudyConfig) -> Result<StudyReport, HarnessError> {
    let spec = simulation_spec(cfg, &[StudyKind::RmseRegime1, StudyKind::RmseRegime2])?;
    let started = Instant::now();
    log::info!("{}: {} replications, seed {}", cfg.kind.name(), cfg.reps, cfg.seed);
    let outcomes: Vec<RepOutcome> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| rmse_replication(cfg, &spec, rep))
        .collect();
    Ok(assemble(cfg, outcomes, "rmse", |r| r.rmse, started))
}

/// Coverage and width of equal-tailed intervals for β.
pub fn run_coverage_study(cfg: &StudyConfig) -> Result<StudyReport, HarnessError> {
    let spec = simulation_spec(cfg, &[StudyKind::IvCoverage])?;
    let started = Instant::now();
    log::info!("{}: {} replications, seed {}", cfg.kind.name(), cfg.reps, cfg.seed);
    let outcomes: Vec<RepOutcome> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| coverage_replication(cfg, &spec, rep))
        .collect();
    Ok(assemble(
        cfg,
        outcomes,
        "width95",
        |r| r.beta.map(|b| b.width95()),
        started,
    ))
}

/// Dispatch a simulation study on its kind.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport, HarnessError> {
    match cfg.kind {
        StudyKind::RmseRegime1 | StudyKind::RmseRegime2 => run_rmse_study(cfg),
        StudyKind::IvCoverage => run_coverage_study(cfg),
        StudyKind::FitCsv => Err(HarnessError::Config("fit needs input data; use run_fit".into())),
    }
}

/// Fit every configured method to one data set. `raw` is hashed into the
/// report when given.
pub fn run_fit(cfg: &StudyConfig, data: &IvData, raw: Option<&[u8]>) -> Result<StudyReport, HarnessError> {
    cfg.validate()?;
    let started = Instant::now();
    let xc = centered(&data.x);
    let yc = centered(&data.y);
    let wants_basis = cfg.methods.iter().any(|m| m.needs_basis());
    let prepared = prepare_instruments(&data.z, cfg.rank_rule, &cfg.solver, wants_basis)?;
    let mut fits = Vec::new();
    let mut per_method = Vec::new();
    for &method in &cfg.methods {
        let fit = fit_first_stage(&prepared, &xc, method, &chain_for(cfg, 0, method))?;
        let post = resample_structural(
            &fit,
            &prepared,
            &xc,
            &yc,
            &cfg.prior,
            resample_seed_for(cfg, 0, method),
            None,
        )?;
        if post.degenerate {
            log::warn!("{}: importance weights are degenerate", method.name());
        }
        let beta = post.beta_summary();
        fits.push(FitSummary {
            method: method.name().to_owned(),
            n: data.n(),
            p: data.p(),
            beta,
            alpha: post.alpha_summary(),
            xi_sq: post.xi_sq_summary(),
            importance_ess: post.ess,
            first_stage_ess: post.first_stage_ess,
            degenerate: post.degenerate,
            low_ess: post.low_ess,
            rank: post.rank,
            n_draws: post.draws.len(),
        });
        per_method.push(MethodSummary {
            replications_ok: 1,
            width_mean: Some(beta.width95()),
            width90_mean: Some(beta.width90()),
            ess_mean: Some(post.first_stage_ess),
            importance_ess_mean: Some(post.ess),
            degenerate_rate: Some(if post.degenerate { 1.0 } else { 0.0 }),
            low_ess_rate: Some(if post.low_ess { 1.0 } else { 0.0 }),
            rank_mean: post.rank.map(|k| k as f64),
            ..MethodSummary::empty(method.name())
        });
    }
    Ok(StudyReport {
        schema: SCHEMA_VERSION.into(),
        study: StudyKind::FitCsv,
        config: cfg.clone(),
        seed: cfg.seed,
        input_hash: input_hash(cfg, raw),
        per_method,
        paired_differences: Vec::new(),
        coverage_comparisons: Vec::new(),
        fits,
        failures: 0,
        rejected_parameter_draws: 0,
        runtime_sec: started.elapsed().as_secs_f64(),
        replications: Vec::new(),
    })
}
