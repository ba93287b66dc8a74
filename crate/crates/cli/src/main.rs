//! Batch experiment driver.
//!
//! Subcommands: `run` (single solve), `sweep` (parameter grid), `check`
//! (force constants and theorem hypothesis), `safedist` (randomized search
//! for a contractive update distribution). All outputs are plot-ready CSV
//! and JSON with the config echoed for reproducibility.
//!
//! Exit codes: 0 = experiment ran (converged or diverged), 2 = config error,
//! 3 = I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tdlab::config::ExperimentDoc;
use tdlab::experiment;

#[derive(Parser)]
#[command(
    name = "tdlab",
    about = "Iterative-optimization laboratory for TD value prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Path to the JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's "out"; default "out").
    #[arg(long)]
    out: Option<PathBuf>,
    /// RNG seed (overrides the config's "seed").
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweep grids.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured solve and write the trajectory.
    Run(Common),
    /// Run the configured sweep grid and write the verdict table.
    Sweep(Common),
    /// Report force constants, sigma_K, and the contraction hypothesis.
    Check(Common),
    /// Search for an update distribution with spectral radius below 1.
    Safedist {
        #[command(flatten)]
        common: Common,
        /// Number of sampled candidate distributions.
        #[arg(long, default_value_t = 200)]
        trials: usize,
    },
}

enum CliError {
    Config(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) => m,
        }
    }
}

impl From<tdlab::Error> for CliError {
    fn from(e: tdlab::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(common) => cmd_run(&common),
        Command::Sweep(common) => cmd_sweep(&common),
        Command::Check(common) => cmd_check(&common),
        Command::Safedist { common, trials } => cmd_safedist(&common, trials),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentDoc, CliError> {
    let text = fs::read_to_string(&common.config)
        .map_err(|e| CliError::Io(format!("reading {}: {e}", common.config.display())))?;
    let mut doc = ExperimentDoc::from_json(&text)?;
    if let Some(seed) = common.seed {
        doc.seed = seed;
    }
    Ok(doc)
}

fn out_dir(common: &Common, doc: &ExperimentDoc) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| doc.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents)
        .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
    Ok(path)
}

fn cmd_run(common: &Common) -> Result<(), CliError> {
    let doc = load_config(common)?;
    let out = experiment::run(&doc)?;
    let dir = out_dir(common, &doc);
    let csv_path = write_file(&dir, "trajectory.csv", &out.csv)?;
    let json_path = write_file(&dir, "run.json", &out.json)?;

    let traj = &out.trajectory;
    let status = if traj.diverged {
        "diverged"
    } else if traj.converged {
        "converged"
    } else {
        "ran to the step budget"
    };
    println!("{status} after {} outer steps", traj.len() - 1);
    if let Some(rho) = out.rho {
        println!(
            "spectral radius rho = {rho:.6} (predicts {})",
            if rho < 1.0 {
                "convergence"
            } else {
                "divergence"
            }
        );
    }
    if let Some(c) = &out.contraction {
        println!(
            "contraction: predicted sigma = {:.6}, max observed ratio = {:.6}, bound {} (margin {:.2e}){}",
            c.predicted_sigma,
            c.max_observed_ratio,
            if c.bound_satisfied { "satisfied" } else { "violated" },
            c.margin,
            if c.certified { "" } else { " [not a certified contraction]" },
        );
    }
    if traj.alpha_is_one_over_l == Some(false) {
        println!("note: step size differs from 1/L, outside the K-step bound's hypothesis");
    }
    println!("wrote {}", csv_path.display());
    println!("wrote {}", json_path.display());
    Ok(())
}

fn cmd_sweep(common: &Common) -> Result<(), CliError> {
    let doc = load_config(common)?;
    let out = experiment::sweep(&doc, common.workers)?;
    let dir = out_dir(common, &doc);
    let csv_path = write_file(&dir, "sweep.csv", &out.csv)?;
    let json_path = write_file(&dir, "sweep.json", &out.json)?;
    let agreements = out
        .rows
        .iter()
        .filter(|r| r.observed != "indeterminate" && r.observed == r.predicted)
        .count();
    let decided = out
        .rows
        .iter()
        .filter(|r| r.observed != "indeterminate")
        .count();
    println!(
        "{} cells; prediction matched observation on {agreements}/{decided} decided cells",
        out.rows.len()
    );
    println!("wrote {}", csv_path.display());
    println!("wrote {}", json_path.display());
    Ok(())
}

fn cmd_check(common: &Common) -> Result<(), CliError> {
    let doc = load_config(common)?;
    let out = experiment::check(&doc)?;
    print!("{}", out.table);
    let dir = out_dir(common, &doc);
    let json_path = write_file(&dir, "check.json", &out.json)?;
    println!("wrote {}", json_path.display());
    Ok(())
}

fn cmd_safedist(common: &Common, trials: usize) -> Result<(), CliError> {
    let doc = load_config(common)?;
    let out = experiment::safedist(&doc, trials)?;
    print!("{}", out.table);
    let dir = out_dir(common, &doc);
    let json_path = write_file(&dir, "safedist.json", &out.json)?;
    println!("wrote {}", json_path.display());
    Ok(())
}
