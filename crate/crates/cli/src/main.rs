use std::path::PathBuf;
use std::process::ExitCode;

use acdc_cli::commands::{self, Mode};
use acdc_cli::config::RunConfig;
use acdc_cli::{exec_for_jobs, rundir, CliError, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "acdc", version, about = "Autoregressive chunk generation with diffusion correction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (default: `$ACDC_OUT/run-<id>`, or `runs/run-<id>`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the story and video corpora.
    GenData,
    /// Fit the tokenizer, the ARMs and the diffusion models.
    Train,
    /// Run a pipeline over the evaluation stories.
    Run {
        #[arg(long, value_enum, default_value_t = ModeArg::Story)]
        mode: ModeArg,
    },
    /// Run the correction-count x memory ablation grid.
    Ablate,
    /// Check KL contraction, the deviation bounds and inpainting.
    VerifyTheory,
    /// Render frame grids and a metrics summary for a run directory.
    Report {
        /// Run directory (defaults to --out).
        dir: Option<PathBuf>,
    },
    /// Print the effective configuration.
    PrintConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Story,
    Video,
    Baseline,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Story => Mode::Story,
            ModeArg::Video => Mode::Video,
            ModeArg::Baseline => Mode::Baseline,
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    if let Command::Report { dir } = &cli.command {
        let dir = dir
            .clone()
            .or_else(|| cli.out.clone())
            .ok_or_else(|| CliError::Config("report needs a run directory".into()))?;
        let summary = acdc_cli::report::report(&dir)?;
        for w in &summary.warnings {
            eprintln!("warning: {w}");
        }
        println!("{} frame grids written to {}", summary.grids, dir.join("report").display());
        return Ok(());
    }
    let cfg = load_config(cli)?;
    let exec = exec_for_jobs(cli.jobs);
    let out = rundir::resolve(cli.out.as_deref(), &cfg);
    match &cli.command {
        Command::GenData => {
            let m = commands::gen_data(&cfg, &out)?;
            println!("{} stories and {} videos written to {}", m.stories.len(), m.videos.len(), out.join("corpus").display());
        }
        Command::Train => {
            let m = commands::train(&cfg, &out, exec)?;
            println!("checkpoints written to {} ({} training steps)", out.join("checkpoints").display(), m.training_steps);
        }
        Command::Run { mode } => {
            let s = commands::run(&cfg, &out, (*mode).into(), exec)?;
            println!(
                "{} run over {} stories: mean manifold distance {:.4}, mean frame consistency {:.4}",
                s.mode.name(),
                s.n_stories,
                s.mean_manifold_distance,
                s.mean_frame_consistency
            );
            println!("per-frame manifold distance: {:.4?}", s.manifold_curve);
        }
        Command::Ablate => {
            let rows = commands::ablate(&cfg, &out, exec)?;
            print!("{}", acdc_core::experiment::ablation_csv(&rows));
        }
        Command::VerifyTheory => {
            let o = commands::verify_theory(&cfg, &out, exec)?;
            print!("{}", o.summary);
            if !o.passed() {
                let failed: Vec<&str> = o.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
                return Err(CliError::Assertion(failed.join(", ")));
            }
        }
        Command::PrintConfig => print!("{}", cfg.to_toml()),
        Command::Report { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
