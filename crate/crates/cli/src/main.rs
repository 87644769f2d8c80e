//! `loopmorse`: run experiments from a TOML config and write JSON and CSV reports.
//!
//! Exit status: 0 when every check passes, 2 on an acceptance failure
//! (degenerate critical points, index instability, Lyapunov violation,
//! a boundary that does not square to zero, failed fits), 3 on a config error.

mod config;
mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use config::{load, parse_k_sweep, Overrides};
use report::{write_section, Section};
use run::Runner;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Command {
    Estimates,
    Operators,
    CriticalPoints,
    Flow,
    Connections,
    Complex,
    Continuation,
    Homogenize,
    All,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Self::Estimates => "estimates",
            Self::Operators => "operators",
            Self::CriticalPoints => "critical-points",
            Self::Flow => "flow",
            Self::Connections => "connections",
            Self::Complex => "complex",
            Self::Continuation => "continuation",
            Self::Homogenize => "homogenize",
            Self::All => "all",
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "loopmorse", version, about = "Morse homology experiments for the Hamiltonian action on loops in T*T^n")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// TOML file merged over the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report directory (overrides `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Random seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated truncations for the index sweep, e.g. "8,16,32".
    #[arg(long)]
    k_sweep: Option<String>,
}

const EXIT_FAILED: u8 = 2;
const EXIT_CONFIG: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let k_sweep = match cli.k_sweep.as_deref().map(parse_k_sweep).transpose() {
        Ok(k) => k,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let overrides = Overrides {
        out: cli.out,
        seed: cli.seed,
        k_sweep,
    };
    let cfg = match load(cli.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match execute(cli.command, cfg) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_FAILED),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(command: Command, cfg: config::ExperimentConfig) -> anyhow::Result<bool> {
    let out = cfg.out.clone();
    let mut runner = Runner::new(cfg);
    let names: Vec<&str> = match command {
        Command::All => run::all_commands().to_vec(),
        c => vec![c.name()],
    };
    let mut sections: Vec<Section> = Vec::new();
    for name in names {
        let section = runner.run(name)?;
        let written = write_section(&out, &runner.cfg, &section)?;
        println!("{name}: {}", if section.passed() { "PASS" } else { "FAIL" });
        for f in &section.failures {
            println!("  {f}");
        }
        for p in written {
            println!("  wrote {}", p.display());
        }
        sections.push(section);
    }
    if command == Command::All {
        let mut all = Section::new("all");
        all.result = run::summary(&sections);
        all.failures = sections.iter().flat_map(|s| s.failures.iter().map(move |f| format!("{}: {f}", s.command))).collect();
        write_section(&out, &runner.cfg, &all)?;
    }
    Ok(sections.iter().all(|s| s.passed()))
}
