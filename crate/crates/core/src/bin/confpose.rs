use clap::{Args, Parser, Subcommand};
use confpose::cli::{cmd_diag, cmd_eval, cmd_offline, cmd_robust, cmd_stream, Overrides};
use confpose::config::RunConfig;
use confpose::{Result, TopK};
use std::path::PathBuf;
use std::process::ExitCode;

/// Streaming relative-pose graph experiments on synthetic oracle scenes.
///
/// Values are resolved as: command-line flag, then config file, then the
/// built-in default. Without `--out` or an `out` key, runs go to
/// `$CONFPOSE_OUT/<command>-<seed>`, or `runs/<command>-<seed>`.
#[derive(Parser)]
#[command(name = "confpose", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Stream one scene causally through the keyframe bank.
    Stream {
        #[command(flatten)]
        common: Common,
        /// Fusion size: a positive integer or `all`.
        #[arg(long)]
        k: Option<TopK>,
    },
    /// Full-context aggregation, optionally refined, compared with streaming.
    Offline {
        #[command(flatten)]
        common: Common,
        /// Run only this fusion size instead of the configured sweep.
        #[arg(long)]
        k: Option<TopK>,
        /// Refine the last aggregation with the pose graph.
        #[arg(long)]
        refine: bool,
    },
    /// Distractor rejection rates over the configured sizes and trials.
    Robust {
        #[command(flatten)]
        common: Common,
    },
    /// Error by confidence bin on oracle edges.
    Diag {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bins: Option<usize>,
        /// Exit with status 1 unless mean error strictly decreases with
        /// confidence for both components.
        #[arg(long)]
        assert_monotone: bool,
    },
    /// Re-score an existing TUM estimate against a TUM reference.
    Eval {
        #[command(flatten)]
        common: Common,
        estimate: PathBuf,
        reference: PathBuf,
    },
}

fn load(common: &Common, overrides: Overrides) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    Overrides {
        seed: common.seed,
        out: common.out.clone(),
        ..overrides
    }
    .apply(&mut config)?;
    Ok(config)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Stream { common, k } => {
            let s = cmd_stream(&load(&common, Overrides { k, ..Default::default() })?)?;
            println!(
                "ate_rmse {:.6} frames {} accepted {} rejected {} resets {} max_bank {}",
                s.report.ate_rmse,
                s.stats.frames,
                s.stats.accepted,
                s.stats.rejected,
                s.stats.resets,
                s.stats.max_bank
            );
            println!("wrote {}", s.dir.display());
        }
        Command::Offline { common, k, refine } => {
            let s = cmd_offline(&load(&common, Overrides { k, refine, ..Default::default() })?)?;
            for m in &s.methods {
                println!("{:<12} mean_ate {:.6} win_rate {:.3}", m.method, m.mean_ate, m.win_rate);
            }
            println!("wrote {}", s.dir.display());
        }
        Command::Robust { common } => {
            let s = cmd_robust(&load(&common, Overrides::default())?)?;
            for r in &s.settings {
                println!(
                    "{:<8} n={:<3} SR {:.3} BFS {:.3} clean_accept {:.3}",
                    r.setting, r.size, r.sr, r.bfs, r.clean_accept
                );
            }
            println!("wrote {}", s.dir.display());
        }
        Command::Diag {
            common,
            bins,
            assert_monotone,
        } => {
            let s = cmd_diag(&load(&common, Overrides { bins, ..Default::default() })?)?;
            for summary in [&s.rotation, &s.translation] {
                let means: Vec<String> =
                    summary.bins.iter().map(|b| format!("{:.3e}", b.mean_error)).collect();
                println!("{:?}: {}", summary.component, means.join(" "));
            }
            println!("wrote {}", s.dir.display());
            if assert_monotone && !s.monotone() {
                eprintln!("error: mean error does not strictly decrease with confidence");
                return Ok(ExitCode::from(1));
            }
        }
        Command::Eval {
            common,
            estimate,
            reference,
        } => {
            let s = cmd_eval(&load(&common, Overrides::default())?, &estimate, &reference)?;
            let r = s.report;
            println!(
                "ate_rmse {:.6} ate_norm {:.4} rpe_t {:.6} rpe_r {:.4} rot_rmse {:.4} frames {}",
                r.ate_rmse, r.ate_norm, r.rpe_t, r.rpe_r, r.rot_rmse, r.frames
            );
            println!("wrote {}", s.dir.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
