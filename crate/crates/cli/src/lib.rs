//! `figlut-sim`: quantize matrices, run GEMM engines, verify the built-in
//! equivalence suites, sweep design points and normalize the results.
//!
//! Exit codes: 0 success, 1 validation error, 2 verification failure, 3 I/O error.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use figlut_core::engines::EngineKind;

use crate::config::{QuantMethod, RunConfig};
use crate::error::{exit, CliError, Result};

pub const THREADS_ENV: &str = "FIGLUT_SIM_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "figlut-sim",
    version,
    about = "LUT-based FP-INT GEMM simulator"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Overrides applied on top of the JSON config.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Engine(s); a comma-separated list for `sweep`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub engine: Vec<EngineKind>,
    /// Weight bit-width(s).
    #[arg(long, global = true, value_delimiter = ',')]
    pub q: Vec<u32>,
    /// LUT key width(s).
    #[arg(long, global = true, value_delimiter = ',')]
    pub mu: Vec<u32>,
    /// RACs per LUT.
    #[arg(long, global = true, value_delimiter = ',')]
    pub k: Vec<u32>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Cost model (JSON); the bundled sample model by default.
    #[arg(long = "cost-model", global = true)]
    pub cost_model: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize a dense matrix into a BCQ file.
    Quantize(QuantizeArgs),
    /// Run one engine on quantized weights and activations.
    Gemm(GemmArgs),
    /// Run the built-in equivalence suites.
    Verify(VerifyArgs),
    /// Evaluate every (engine, q, mu, k) point and write a CSV.
    Sweep(SweepArgs),
    /// Merge sweep CSVs and normalize by a baseline row.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct QuantizeArgs {
    /// Dense input matrix (FGLT).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<QuantMethod>,
    /// Alternating refinement rounds.
    #[arg(long)]
    pub iters: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GemmArgs {
    /// Weights: a BCQ file (FGBQ) or a dense matrix (FGLT) to quantize.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Activations (FGLT), `n × batch`.
    #[arg(long)]
    pub activations: Option<PathBuf>,
    /// Rows of generated weights.
    #[arg(long)]
    pub m: Option<usize>,
    /// Columns of generated weights.
    #[arg(long)]
    pub n: Option<usize>,
    /// Columns of generated activations.
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct VerifyArgs {
    /// Suite or property names to run (all by default).
    #[arg(long, value_delimiter = ',')]
    pub suite: Vec<String>,
    /// Negates one half-table entry before the symmetry suite.
    #[arg(long = "inject-fault", hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Sweep CSVs to merge.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Baseline selector `column=value`.
    #[arg(long, default_value = "engine=fpe")]
    pub baseline: String,
}

impl Common {
    /// Loads the config file and applies the single-valued overrides.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        if let Some(&kind) = single("--engine", &self.engine)? {
            cfg.engine.kind = kind;
        }
        if let Some(&q) = single("--q", &self.q)? {
            cfg.quant.q = q;
        }
        if let Some(&mu) = single("--mu", &self.mu)? {
            cfg.engine.mu = mu;
        }
        if let Some(&k) = single("--k", &self.k)? {
            cfg.engine.k = k;
        }
        self.apply_scalars(&mut cfg);
        Ok(cfg)
    }

    pub fn apply_scalars(&self, cfg: &mut RunConfig) {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        if let Some(cm) = &self.cost_model {
            cfg.cost_model = Some(cm.clone());
        }
    }
}

fn single<'a, T>(flag: &str, values: &'a [T]) -> Result<Option<&'a T>> {
    match values {
        [] => Ok(None),
        [v] => Ok(Some(v)),
        _ => Err(CliError::validation(format!(
            "{flag} takes a single value for this command"
        ))),
    }
}

/// Threads requested through the environment; `0` or unset lets rayon decide.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(0),
        Ok(v) => v.trim().parse().map_err(|_| {
            CliError::validation(format!("{THREADS_ENV}={v:?} is not a non-negative integer"))
        }),
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Quantize(a) => commands::quantize::run(&cli.common, a),
        Command::Gemm(a) => commands::gemm::run(&cli.common, a),
        Command::Verify(a) => commands::verify::run(&cli.common, a),
        Command::Sweep(a) => commands::sweep::run(&cli.common, a),
        Command::Report(a) => commands::report::run(&cli.common, a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                exit::VALIDATION
            } else {
                exit::SUCCESS
            };
        }
    };
    let threads = match threads_from_env() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return exit::VALIDATION;
        }
    };
    match pool.install(|| execute(&cli)) {
        Ok(()) => exit::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
