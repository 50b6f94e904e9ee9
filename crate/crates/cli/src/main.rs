use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use maukf::config::Config;
use maukf::dynamics::{write_dataset, Regime};
use maukf::pipeline;
use maukf::policy::Checkpoint;
use maukf::train::TrainState;
use maukf::Error;

#[derive(Parser)]
#[command(name = "maukf", version, about = "Meta-adaptive UKF experiments")]
struct Cli {
    /// TOML config; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Overrides the episode count of the verb.
    #[arg(long, global = true)]
    episodes: Option<usize>,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    TrainCt,
    EvalWeave,
}

#[derive(Subcommand)]
enum Verb {
    /// Write a benchmark dataset.
    Gen {
        #[arg(long, value_enum, default_value = "train-ct")]
        regime: RegimeArg,
    },
    /// Train the weight policy.
    Train {
        /// Continue from a saved `train_state.json`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Random-search the baseline UKF and IMM parameters.
    Tune,
    /// Evaluate every method on both regimes and write the report.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the table from an existing `report.csv`.
    Report,
    /// Summarize a policy checkpoint.
    InspectCkpt { path: PathBuf },
}

/// 1 config, 2 numerical abort, 3 I/O.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => 1,
        Some(Error::Io(_) | Error::Json(_) | Error::Format(_)) => 3,
        Some(_) => 2,
        None if e.downcast_ref::<std::io::Error>().is_some() => 3,
        None => 1,
    }
}

fn load_config(cli: &Cli) -> Result<Config, Error> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.episodes {
        match cli.verb {
            Verb::Train { .. } => cfg.train.episodes = n,
            Verb::Tune => cfg.bench.tune_episodes = n,
            _ => cfg.bench.episodes = n,
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("building the worker pool")?;
    }
    let out = cli.out.as_path();
    match &cli.verb {
        Verb::Gen { regime } => {
            let cfg = load_config(cli)?;
            let regime = match regime {
                RegimeArg::TrainCt => Regime::TrainCt,
                RegimeArg::EvalWeave => Regime::EvalWeave,
            };
            let eps = pipeline::bench_episodes(&cfg, regime, cfg.bench.episodes)?;
            let dir = out.join(regime.name());
            let seed = eps.first().map_or(0, |e| e.seed);
            write_dataset(&dir, regime, seed, &cfg.hash()?, &eps)?;
            info!("wrote {} episodes to {}", eps.len(), dir.display());
        }
        Verb::Train { resume } => {
            let cfg = load_config(cli)?;
            let state = match resume {
                Some(p) => Some(TrainState::from_json(&fs::read_to_string(p).map_err(Error::from)?)?),
                None => None,
            };
            let st = pipeline::train_policy(&cfg, Some(out), state)?;
            println!(
                "best validation ARMSE {:.3} at epoch {} -> {}",
                st.best_val,
                st.best_epoch,
                out.join("best.json").display()
            );
        }
        Verb::Tune => {
            let cfg = load_config(cli)?;
            let (ukf, imm) = pipeline::tune_both(&cfg)?;
            fs::create_dir_all(out).map_err(Error::from)?;
            fs::write(out.join("trial_log.csv"), maukf::bench::trial_log_csv(&[&ukf, &imm])).map_err(Error::from)?;
            for r in [&ukf, &imm] {
                let b = r.best;
                println!(
                    "{:?}: trial {} α={} β={} κ={} Π_ii={} ARMSE {:.3}",
                    b.kind, b.index, b.alpha, b.beta, b.kappa, b.stay, b.mean_armse
                );
            }
        }
        Verb::Bench { checkpoint } => {
            let cfg = load_config(cli)?;
            let path = checkpoint
                .clone()
                .or_else(|| cfg.bench.checkpoint.clone())
                .ok_or_else(|| Error::Config("no policy checkpoint: pass --checkpoint or set bench.checkpoint".into()))?;
            let ck = Checkpoint::load(&path)?;
            let outcome = pipeline::run_bench(&cfg, &ck.params, out)?;
            print!("{}", outcome.report.to_text());
        }
        Verb::Report => print_report(out)?,
        Verb::InspectCkpt { path } => {
            let ck = Checkpoint::load(path)?;
            println!("dims {:?}, seed {}, {} parameters", ck.params.dims, ck.seed, ck.params.count());
            for (k, v) in &ck.meta {
                println!("  {k} = {v}");
            }
            for (p, t) in ck.params.iter() {
                println!("  {:<14} {:>3}x{:<3} |θ| {:.6}", p.name(), t.rows(), t.cols(), t.frobenius_norm());
            }
        }
    }
    Ok(())
}

fn print_report(dir: &Path) -> anyhow::Result<()> {
    let text = fs::read_to_string(dir.join("report.csv")).map_err(Error::from)?;
    let rows = maukf::bench::BenchReport::rows_from_csv(&text)?;
    let report = maukf::bench::BenchReport {
        rows,
        ..Default::default()
    };
    let table = report.to_text();
    fs::write(dir.join("report.txt"), &table).map_err(Error::from)?;
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
