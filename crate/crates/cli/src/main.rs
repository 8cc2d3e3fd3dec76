//! `regmod`: command-line front end emitting one JSON report per run.
//!
//! Exit codes: 0 when the analysis completed (whatever the verdict), 1 on
//! usage or parse errors, 2 on numerical failure.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use commands::{Failure, Out};
use report::{Report, SCHEMA_VERSION};

#[derive(Parser, Debug)]
#[command(name = "regmod", version, about = "Regularity analysis of parametric constraint systems")]
struct Cli {
    /// Write the JSON report to this file instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; affects speed only.
    #[arg(long, global = true, env = "REGMOD_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ProblemArg {
    /// Problem file, or the name of a built-in fixture.
    #[arg(long)]
    pub problem: String,
}

#[derive(Args, Debug, Clone)]
pub struct BasePoint {
    /// Comma-separated parameter vector (empty when dp = 0).
    #[arg(long, default_value = "", allow_hyphen_values = true)]
    pub p0: String,
    #[arg(long, allow_hyphen_values = true)]
    pub x0: String,
}

#[derive(Args, Debug, Clone)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 0.1)]
    pub r0: f64,
    #[arg(long, default_value_t = 0.5)]
    pub factor: f64,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    /// Samples per step.
    #[arg(long, default_value_t = 32)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse a problem file and report its structure.
    Validate(ProblemArg),
    /// Project a point onto F(p).
    Project {
        #[command(flatten)]
        problem: ProblemArg,
        #[arg(long, default_value = "", allow_hyphen_values = true)]
        p: String,
        #[arg(long, allow_hyphen_values = true)]
        v: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        n_starts: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol_feas: f64,
        #[arg(long, default_value_t = 1e-7)]
        tol_kkt: f64,
    },
    /// Check the relaxed constant rank condition on samples.
    Rcrcq {
        #[command(flatten)]
        problem: ProblemArg,
        #[command(flatten)]
        point: BasePoint,
        #[arg(long, default_value_t = 1e-2)]
        radius: f64,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-7)]
        rank_tol: f64,
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Estimate the R-regularity modulus and track multiplier norms.
    Rreg {
        #[command(flatten)]
        problem: ProblemArg,
        #[command(flatten)]
        point: BasePoint,
        #[command(flatten)]
        schedule: ScheduleArgs,
    },
    /// Estimate the Aubin modulus.
    Aubin {
        #[command(flatten)]
        problem: ProblemArg,
        #[command(flatten)]
        point: BasePoint,
        #[command(flatten)]
        schedule: ScheduleArgs,
        /// Initial parameter radius; overrides --r0.
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value_t = 0.5)]
        eps: f64,
    },
    /// Estimate the lower-Lipschitz constant.
    Lolip {
        #[command(flatten)]
        problem: ProblemArg,
        #[command(flatten)]
        point: BasePoint,
        #[command(flatten)]
        schedule: ScheduleArgs,
        /// Initial parameter radius; overrides --r0.
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Check lower semicontinuity on samples.
    Lsc {
        #[command(flatten)]
        problem: ProblemArg,
        #[command(flatten)]
        point: BasePoint,
        #[arg(long, default_value_t = 0.1)]
        delta: f64,
        #[arg(long, default_value_t = 0.5)]
        eps: f64,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare the linearized and sampled tangent cones.
    Cones {
        #[command(flatten)]
        problem: ProblemArg,
        #[command(flatten)]
        point: BasePoint,
        /// Evenly spaced circle directions (dx = 2 only).
        #[arg(long, default_value_t = 64)]
        directions: usize,
        /// Explicit unit direction; repeatable. Replaces --directions.
        #[arg(long = "dir", allow_hyphen_values = true)]
        dirs: Vec<String>,
        /// Comma-separated step schedule.
        #[arg(long, allow_hyphen_values = true)]
        t: Option<String>,
        /// Also run the constant rank check and flag contradictions.
        #[arg(long)]
        with_rcrcq: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Solve the lower-level problem at p.
    Value {
        #[command(flatten)]
        problem: ProblemArg,
        #[arg(long, default_value = "", allow_hyphen_values = true)]
        p: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Estimate the Lipschitz constant of the optimal value function.
    PhiLip {
        #[command(flatten)]
        problem: ProblemArg,
        #[arg(long, allow_hyphen_values = true)]
        p0: String,
        #[arg(long, default_value_t = 0.2)]
        delta: f64,
        #[arg(long, default_value_t = 32)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Search a penalty parameter grid for local optimality of (p*, x*).
    Penalty {
        #[command(flatten)]
        problem: ProblemArg,
        #[arg(long, allow_hyphen_values = true)]
        pstar: String,
        #[arg(long, allow_hyphen_values = true)]
        xstar: String,
        /// Comma-separated penalty values; defaults to 2^-4 .. 2^8.
        #[arg(long)]
        mu_grid: Option<String>,
        #[arg(long, default_value_t = 0.2)]
        radius: f64,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List the built-in fixtures.
    Fixtures,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate(_) => "validate",
            Command::Project { .. } => "project",
            Command::Rcrcq { .. } => "rcrcq",
            Command::Rreg { .. } => "rreg",
            Command::Aubin { .. } => "aubin",
            Command::Lolip { .. } => "lolip",
            Command::Lsc { .. } => "lsc",
            Command::Cones { .. } => "cones",
            Command::Value { .. } => "value",
            Command::PhiLip { .. } => "phi-lip",
            Command::Penalty { .. } => "penalty",
            Command::Fixtures => "fixtures",
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }

    let started = Instant::now();
    let mut out = Out::default();
    let code = match commands::run(&cli.command, &mut out) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
        Err(Failure::Numerical(msg)) => {
            out.result = json!({ "error": msg });
            2
        }
    };
    let report = Report {
        schema_version: SCHEMA_VERSION,
        command: cli.command.name().to_string(),
        problem_hash: out.problem_hash,
        params: out.params,
        result: out.result,
        witnesses: out.witnesses,
        warnings: out.warnings,
        wall_time_ms: started.elapsed().as_millis() as u64,
    };
    let mut text = serde_json::to_string_pretty(&report).expect("reports serialize");
    text.push('\n');
    match &cli.out {
        Some(path) => {
            if let Err(e) = std::fs::write(path, text) {
                eprintln!("error: cannot write {}: {e}", path.display());
                return ExitCode::from(1);
            }
        }
        None => print!("{text}"),
    }
    ExitCode::from(code)
}
