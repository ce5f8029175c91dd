//! `mfld`: train, baseline, self-check and plot mean-field Langevin experiments.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfld::experiment::config::{preset, Mode, RunConfig, PRESETS};
use mfld::experiment::plot::emit_plots;
use mfld::experiment::selfcheck::run_checks;
use mfld::experiment::{load_checkpoint, resume_experiment, run_batch, RunSummary};
use mfld::{Error, Result};

#[derive(Parser)]
#[command(name = "mfld", version, about = "Mean-field Langevin dynamics for two-layer networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with plain mean-field Langevin dynamics.
    Train(RunArgs),
    /// Train with the label-noise procedure (`tilde_sigma` from the config).
    TrainLn(RunArgs),
    /// Ridge regression on the frozen initial features.
    Baseline(RunArgs),
    /// Run the quick numerical self-checks.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render SVG charts from a metrics CSV.
    Plot {
        csv: PathBuf,
        /// Output directory (default: next to the CSV).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset; one of desk, paper-fig1, paper-fig1-full, paper-fig2,
    /// paper-fig2-full, separation. Default: desk.
    #[arg(long)]
    preset: Option<String>,
    /// Seed (for presets, the first of the seed range).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue a single-config run from this checkpoint file.
    #[arg(long, requires = "config")]
    resume: Option<PathBuf>,
}

fn configs(args: &RunArgs, mode: Mode) -> Result<(Vec<RunConfig>, PathBuf)> {
    let (mut cfgs, default_out) = match (&args.config, &args.preset) {
        (Some(path), _) => {
            let mut c = RunConfig::load(path)?;
            if let Some(s) = args.seed {
                c.seed = s;
            }
            let out = c.output.clone().unwrap_or_else(|| Path::new("runs").join(&c.run_id));
            (vec![c], out)
        }
        (None, name) => {
            let name = name.as_deref().unwrap_or("desk");
            if !PRESETS.contains(&name) {
                return Err(Error::Config(format!("unknown preset {name:?}; known: {}", PRESETS.join(", "))));
            }
            (preset(name, args.seed.unwrap_or(0))?, Path::new("runs").join(name))
        }
    };
    for c in &mut cfgs {
        c.mode = mode;
    }
    Ok((cfgs, args.out.clone().unwrap_or(default_out)))
}

fn report(summaries: &[RunSummary], out: &Path) {
    for s in summaries {
        match &s.last {
            Some(r) => eprintln!(
                "{:<28} step {:>6}  G {:.5}  test_mse {:.5}  align {:.4}  dof {:.2}  ({:.1}s)",
                s.run_id, r.step, r.g, r.test_mse, r.align_emp, r.dof, s.runtime_s
            ),
            None => eprintln!("{:<28} already complete", s.run_id),
        }
    }
    eprintln!("wrote {}", out.join("metrics.csv").display());
}

fn train(args: &RunArgs, mode: Mode) -> Result<()> {
    let (cfgs, out) = configs(args, mode)?;
    let summaries = match &args.resume {
        Some(ckpt) => vec![resume_experiment(&cfgs[0], load_checkpoint(ckpt)?, &out)?],
        None => run_batch(&cfgs, &out)?,
    };
    report(&summaries, &out);
    Ok(())
}

fn check(seed: u64) -> Result<bool> {
    let mut ok = true;
    for c in run_checks(seed)? {
        println!(
            "{:<40} {}  error {:.2e} (tolerance {:.0e})",
            c.name,
            if c.passed() { "PASS" } else { "FAIL" },
            c.error,
            c.tolerance
        );
        ok &= c.passed();
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(a) => train(&a, Mode::Mfld)?,
        Command::TrainLn(a) => train(&a, Mode::LabelNoise)?,
        Command::Baseline(a) => train(&a, Mode::Frozen)?,
        Command::Check { seed } => {
            if !check(seed)? {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Plot { csv, out } => {
            let dir = out.unwrap_or_else(|| csv.parent().map(Path::to_path_buf).unwrap_or_default());
            for p in emit_plots(&csv, &dir)? {
                eprintln!("wrote {}", p.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
