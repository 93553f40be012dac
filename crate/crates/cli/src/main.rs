//! `univharm`: tree validation, metric queries, builds, density reports,
//! span certificates and the double-genericity demo.
//!
//! Exit codes: 0 success, 1 parse or I/O error, 2 validation failure,
//! 3 infeasible schedule.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "univharm", version, about = "Universal harmonic functions on rooted trees at finite horizons")]
pub struct Cli {
    /// Overrides the depth cap of every tree configuration.
    #[arg(long, global = true, env = "UNIVHARM_DEPTH_CAP")]
    pub depth_cap: Option<usize>,

    /// Worker threads for level-parallel work.
    #[arg(long, global = true, env = "UNIVHARM_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Check that sector measures are consistent on every level up to a depth.
    TreeValidate {
        /// Tree configuration file, or `binary`.
        #[arg(long)]
        config: String,
        /// Deepest level to check; defaults to min(cap, 12).
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Distance P between two simple functions.
    Metric {
        #[arg(long)]
        config: String,
        /// First simple function file.
        #[arg(long)]
        a: PathBuf,
        /// Second simple function file.
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Exact)]
        mode: ModeArg,
    },
    /// Build a harmonic function whose projections visit the targets.
    Build(BuildArgs),
    /// Density profiles of visit sets from a build result or an index set.
    Density {
        /// `result.json` of a build, or an index set `{"horizon", "indices"}`.
        #[arg(long)]
        input: PathBuf,
        /// First index of the profile.
        #[arg(long, default_value_t = 1)]
        n0: u64,
    },
    /// Joint build with certificates for linear combinations.
    Span(SpanArgs),
    /// FM and X joint families over one tree, with random certified combinations.
    Demo(DemoArgs),
    /// Re-run a recorded command and compare its artifacts by hash.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for the new artifacts.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Exact,
    Float,
}

#[derive(Args, Debug, Clone)]
pub struct ScheduleArgs {
    /// Tree configuration file, or `binary`.
    #[arg(long, default_value = "binary")]
    pub config: String,
    #[arg(long)]
    pub horizon: Option<u64>,
    /// `x`, `fm`, `empty`, or a schedule file.
    #[arg(long, default_value = "x")]
    pub schedule: String,
    /// Tolerance ε of every block.
    #[arg(long, default_value = "1/10")]
    pub eps: String,
    /// FM stride.
    #[arg(long, default_value_t = 8)]
    pub stride: u64,
    /// Correction child: `argmin` or `fixed:I`.
    #[arg(long, default_value = "argmin")]
    pub policy: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct BuildArgs {
    #[command(flatten)]
    pub common: ScheduleArgs,
    /// `dense:I,J,…` for dense-family members, or a targets file.
    #[arg(long, default_value = "dense:300,41")]
    pub targets: String,
    /// Initial value at the root, one entry per coordinate.
    #[arg(long)]
    pub initial: Option<String>,
    #[arg(long, value_enum, default_value_t = ModeArg::Exact)]
    pub mode: ModeArg,
}

#[derive(Args, Debug, Clone)]
pub struct SpanArgs {
    #[command(flatten)]
    pub common: ScheduleArgs,
    /// `dense:I,J,…` (first tuple `(0,…,0,h_I)`, then dense tuples from `J`, …),
    /// or a tuples file.
    #[arg(long, default_value = "dense:300,41")]
    pub targets: String,
    /// Coordinates per tuple when targets are given as dense indices.
    #[arg(long, default_value_t = 2)]
    pub coords: usize,
    /// Explicit combinations, `;`-separated, coefficients `,`-separated;
    /// complex coefficients as `re:im`.
    #[arg(long)]
    pub coeffs: Option<String>,
    /// Random combinations to certify.
    #[arg(long, default_value_t = 8)]
    pub combos: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Skip the flattening offsets.
    #[arg(long)]
    pub no_flatten: bool,
    /// Also write each combination as a harmonic truncation file.
    #[arg(long)]
    pub write_combos: bool,
}

#[derive(Args, Debug, Clone)]
pub struct DemoArgs {
    #[arg(long, default_value = "binary")]
    pub config: String,
    #[arg(long, default_value_t = 5040)]
    pub horizon: u64,
    /// Targets per family.
    #[arg(long, default_value_t = 2)]
    pub targets: usize,
    /// Coordinates per family.
    #[arg(long, default_value_t = 2)]
    pub coords: usize,
    #[arg(long, default_value_t = 8)]
    pub stride: u64,
    #[arg(long, default_value = "1/10")]
    pub eps: String,
    /// Random combinations certified per family.
    #[arg(long, default_value_t = 8)]
    pub combos: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        std::env::set_var("RAYON_NUM_THREADS", n.to_string());
    }
    match commands::run(&cli, &argv[1..]) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
