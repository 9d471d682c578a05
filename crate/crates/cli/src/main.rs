use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use u2traj_cli::commands;
use u2traj_cli::{init_threads, plot, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "u2traj", version, about = "Uncertainty-aware diffusion for multi-agent trajectory completion")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true, default_value = "u2traj.toml")]
    config: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate train and test scenes into data_dir.
    GenData,
    /// Train the denoiser.
    Train,
    /// Generate K modes per scene (default: every test scene).
    Sample { inputs: Vec<PathBuf> },
    /// Aggregate metrics over mode-set files (default: out_dir/modes).
    Eval { inputs: Vec<PathBuf> },
    /// Train the mode ranker on top of a trained denoiser.
    RankTrain,
    /// Score mode sets with the ranker.
    RankEval { inputs: Vec<PathBuf> },
    /// NLL and coverage for each variance start step.
    SweepShat { inputs: Vec<PathBuf> },
    /// Render a mode-set file to SVG.
    Plot {
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        /// Mode to draw ellipses for (default: lowest SADE).
        #[arg(long)]
        mode: Option<usize>,
        /// Draw the score-vs-SADE scatter instead of trajectories.
        #[arg(long)]
        scatter: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    if let Cmd::Plot { input, out, mode, scatter } = &cli.cmd {
        let f = u2traj::io::read_modeset(input)?;
        let svg = if *scatter { plot::scatter_svg(&f)? } else { plot::trajectories_svg(&f, *mode)? };
        std::fs::write(out, svg).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
        return Ok(());
    }
    let cfg = RunConfig::load(&cli.config)?;
    match cli.cmd {
        Cmd::GenData => {
            let (tr, te) = commands::gen_data(&cfg)?;
            println!("wrote {tr} train and {te} test scenes to {}", cfg.data_dir.display());
        }
        Cmd::Train => {
            let stats = commands::train(&cfg, |s| eprintln!("epoch {} loss {:.6}", s.epoch, s.loss.total))?;
            if let Some(last) = stats.last() {
                println!("final loss {:.6}; checkpoint {}", last.loss.total, cfg.checkpoint.display());
            }
        }
        Cmd::Sample { inputs } => {
            let out = commands::sample(&cfg, &inputs)?;
            println!("wrote {} mode sets to {}", out.len(), commands::modes_dir(&cfg).display());
        }
        Cmd::Eval { inputs } => print!("{}", commands::eval(&cfg, &inputs)?.to_text()),
        Cmd::RankTrain => {
            let losses = commands::rank_train(&cfg)?;
            for (i, l) in losses.iter().enumerate() {
                eprintln!("rank epoch {} loss {l:.6}", i + 1);
            }
            println!("checkpoint {}", cfg.rank_checkpoint.display());
        }
        Cmd::RankEval { inputs } => print!("{}", commands::rank_eval(&cfg, &inputs)?.to_text()),
        Cmd::SweepShat { inputs } => {
            println!("s_hat nll nll_observed acc_rate");
            for r in commands::sweep_shat(&cfg, &inputs)? {
                println!("{} {:.6} {:.6} {:.4}", r.s_hat, r.nll, r.nll_observed, r.acc_rate);
            }
        }
        Cmd::Plot { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
