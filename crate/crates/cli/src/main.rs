//! `fsiv`: run the simulation studies, fit user data, export fixtures.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fsiv::frisch::RankRule;
use fsiv::harness::{
    generate_replication, parse_csv, render_report, run_fit, run_study, write_fixture_csv, HarnessError, ReportFormat,
    StudyConfig, StudyKind,
};
use fsiv::iv::FirstStage;

#[derive(Parser)]
#[command(
    name = "fsiv",
    version,
    about = "Factor shrinkage priors for Bayesian linear IV regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scaled first-stage RMSE study.
    Rmse {
        /// 1: dominant factor drives the treatment; 2: weakest of ten.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        regime: u8,
        #[command(flatten)]
        common: Common,
    },
    /// Coverage and width of the 95% and 90% intervals for β.
    Coverage {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the IV model to a CSV file with header `y,x,z1,...,zp`.
    Fit {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write one coverage-study replication as a CSV fixture.
    Simulate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Replication index within the study.
        #[arg(long, default_value_t = 0)]
        replication: usize,
        #[arg(long, default_value_t = -0.08, allow_negative_numbers = true)]
        alpha: f64,
        #[arg(long, default_value_t = 0.2, allow_negative_numbers = true)]
        beta: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replications (default 200 for rmse, 250 for coverage).
    #[arg(long)]
    reps: Option<usize>,
    /// Gibbs sweeps per chain, burn-in included.
    #[arg(long)]
    iters: Option<usize>,
    /// Burn-in sweeps (default: a sixth of --iters).
    #[arg(long)]
    burn: Option<usize>,
    /// `threshold:T` or `fixed:K`.
    #[arg(long, default_value = "threshold:0.2")]
    rank_rule: RankRule,
    /// Comma-separated first-stage methods.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<FirstStage>>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "json")]
    format: ReportFormat,
}

impl Common {
    fn config(&self, kind: StudyKind) -> StudyConfig {
        let mut cfg = StudyConfig::new(kind, self.seed);
        if let Some(r) = self.reps {
            cfg.reps = r;
        }
        if let Some(n) = self.iters {
            cfg.chain.n_iter = n;
            cfg.chain.n_burn = n / 6;
        }
        if let Some(b) = self.burn {
            cfg.chain.n_burn = b;
        }
        cfg.rank_rule = self.rank_rule;
        if let Some(m) = &self.methods {
            cfg.methods = m.clone();
        }
        cfg.output = self.out.clone();
        cfg
    }
}

fn emit(text: &str, out: Option<&PathBuf>) -> Result<(), HarnessError> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Rmse { regime, common } => {
            let kind = if regime == 1 {
                StudyKind::RmseRegime1
            } else {
                StudyKind::RmseRegime2
            };
            let report = run_study(&common.config(kind))?;
            emit(&render_report(&report, common.format)?, common.out.as_ref())
        }
        Command::Coverage { common } => {
            let report = run_study(&common.config(StudyKind::IvCoverage))?;
            emit(&render_report(&report, common.format)?, common.out.as_ref())
        }
        Command::Fit { input, common } => {
            let bytes = std::fs::read(&input).map_err(|e| {
                HarnessError::Data(fsiv::harness::IngestError::Io {
                    path: input.display().to_string(),
                    message: e.to_string(),
                })
            })?;
            let data = parse_csv(&bytes)?;
            log::info!("read {} observations of {} instruments", data.n(), data.p());
            let report = run_fit(&common.config(StudyKind::FitCsv), &data, Some(&bytes))?;
            emit(&render_report(&report, common.format)?, common.out.as_ref())
        }
        Command::Simulate {
            seed,
            replication,
            alpha,
            beta,
            out,
        } => {
            let mut spec = fsiv::simgen::RegimeSpec::iv_study(seed);
            if let Some(p) = spec.iv_params.as_mut() {
                p.alpha = alpha;
                p.beta = beta;
            }
            let sim = generate_replication(&spec, replication)?;
            let y = sim.data.y.expect("coverage regime has an outcome");
            write_fixture_csv(&out, &y, &sim.data.x, &sim.data.z)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
