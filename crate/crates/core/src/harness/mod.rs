//! Replication studies, CSV ingestion and report output.
//!
//! Each study is a pure function of its [`StudyConfig`]: replication `r`
//! draws all of its randomness from substreams of the master seed addressed
//! by `r`, so results do not depend on thread count or scheduling.

mod ingest;
mod report;
mod study;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frisch::{RankRule, SolverOptions};
use crate::horseshoe::ChainConfig;
use crate::iv::{FirstStage, IvError, NigPrior};
use crate::simgen::{RegimeSpec, SimError};

pub use ingest::{fixture_csv_string, ingest_csv, parse_csv, write_fixture_csv, IngestError, IvData};
pub use report::{
    emit_report, input_hash, render_report, CoverageComparison, FitSummary, MethodSummary, PairedDifference,
    ReplicationRecord, ReportFormat, StudyReport, CSV_METRICS, SCHEMA_VERSION,
};
pub use study::{
    generate_replication, run_coverage_study, run_fit, run_rmse_study, run_study, scaled_rmse, Replication,
    MAX_PARAMETER_ATTEMPTS,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(#[from] IngestError),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit code: 2 config, 3 data, 4 numerical. I/O problems count
    /// as data errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) | HarnessError::Io(_) => 3,
            HarnessError::Numerical(_) => 4,
        }
    }
}

impl From<IvError> for HarnessError {
    fn from(e: IvError) -> Self {
        match e {
            IvError::InvalidPrior(_) => HarnessError::Config(e.to_string()),
            IvError::Horseshoe(crate::horseshoe::HorseshoeError::InvalidConfig(_)) => {
                HarnessError::Config(e.to_string())
            }
            IvError::Frisch(
                crate::frisch::FrischError::InvalidOption(_) | crate::frisch::FrischError::RankOutOfRange { .. },
            ) => HarnessError::Config(e.to_string()),
            IvError::Frisch(
                crate::frisch::FrischError::ZeroVarianceRow(_) | crate::frisch::FrischError::TooFewObservations(_),
            )
            | IvError::DimensionMismatch { .. } => HarnessError::Data(IngestError::Invalid(e.to_string())),
            _ => HarnessError::Numerical(e.to_string()),
        }
    }
}

impl From<SimError> for HarnessError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidSpec(_) | SimError::DimensionMismatch { .. } => HarnessError::Config(e.to_string()),
            _ => HarnessError::Numerical(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    RmseRegime1,
    RmseRegime2,
    IvCoverage,
    FitCsv,
}

impl StudyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StudyKind::RmseRegime1 => "rmse_regime1",
            StudyKind::RmseRegime2 => "rmse_regime2",
            StudyKind::IvCoverage => "iv_coverage",
            StudyKind::FitCsv => "fit_csv",
        }
    }

    pub fn default_reps(&self) -> usize {
        match self {
            StudyKind::RmseRegime1 | StudyKind::RmseRegime2 => 200,
            StudyKind::IvCoverage => 250,
            StudyKind::FitCsv => 1,
        }
    }

    pub fn default_methods(&self) -> Vec<FirstStage> {
        match self {
            StudyKind::RmseRegime1 | StudyKind::RmseRegime2 => vec![
                FirstStage::FactorShrinkage,
                FirstStage::HorseshoeRaw,
                FirstStage::FactorsOnly,
            ],
            StudyKind::IvCoverage => vec![FirstStage::FactorShrinkage, FirstStage::HorseshoeRaw],
            StudyKind::FitCsv => vec![FirstStage::FactorShrinkage],
        }
    }

    /// Data-generating regime, or `None` for user data.
    pub fn default_regime(&self, seed: u64) -> Option<RegimeSpec> {
        match self {
            StudyKind::RmseRegime1 => Some(RegimeSpec::regime1(seed)),
            StudyKind::RmseRegime2 => Some(RegimeSpec::regime2(seed)),
            StudyKind::IvCoverage => Some(RegimeSpec::iv_study(seed)),
            StudyKind::FitCsv => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub kind: StudyKind,
    pub reps: usize,
    /// Master seed; every replication, chain and resampling stream derives
    /// from it.
    pub seed: u64,
    pub methods: Vec<FirstStage>,
    /// Per-replication chain seeds are derived from `seed`; `chain.seed` is
    /// ignored by the studies.
    pub chain: ChainConfig,
    pub prior: NigPrior,
    pub rank_rule: RankRule,
    pub solver: SolverOptions,
    /// Generating regime; its seed is overwritten by `seed`.
    pub regime: Option<RegimeSpec>,
    /// Where the caller intends to write the report. Not part of the echo.
    #[serde(skip)]
    pub output: Option<std::path::PathBuf>,
}

impl StudyConfig {
    pub fn new(kind: StudyKind, seed: u64) -> Self {
        Self {
            kind,
            reps: kind.default_reps(),
            seed,
            methods: kind.default_methods(),
            chain: ChainConfig::default(),
            prior: NigPrior::default(),
            rank_rule: RankRule::default(),
            solver: SolverOptions::default(),
            regime: kind.default_regime(seed),
            output: None,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.reps == 0 {
            return Err(HarnessError::Config("reps must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(HarnessError::Config("method list is empty".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(HarnessError::Config(format!("method {} listed twice", m.name())));
            }
        }
        self.chain.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.prior.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        match self.rank_rule {
            RankRule::Threshold(t) if !(0.0..1.0).contains(&t) => {
                return Err(HarnessError::Config(format!("rank threshold {t} outside [0, 1)")));
            }
            RankRule::FixedRank(0) => return Err(HarnessError::Config("fixed rank must be at least 1".into())),
            _ => {}
        }
        match (self.kind, &self.regime) {
            (StudyKind::FitCsv, _) => {}
            (_, None) => return Err(HarnessError::Config("simulation study needs a regime".into())),
            (kind, Some(spec)) => {
                spec.validate()?;
                if kind == StudyKind::IvCoverage && spec.iv_params.is_none() {
                    return Err(HarnessError::Config(
                        "coverage study needs structural parameters".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// The regime with its seed tied to the master seed.
    pub fn regime_spec(&self) -> Option<RegimeSpec> {
        self.regime.clone().map(|mut s| {
            s.seed = self.seed;
            s
        })
    }
}
