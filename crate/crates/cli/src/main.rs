use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use drlmcts::agent::{training_log_csv, AgentNets, Trainer};
use drlmcts::bench::{count_symbol_errors, draw_instance, emit_csv, run_sweep, Detector, Scenario};
use drlmcts::Error;

/// Caps the worker pool used for training and sweeps.
const THREADS_ENV: &str = "DRLMCTS_THREADS";

#[derive(Parser)]
#[command(name = "drlmcts", version, about = "MIMO detection with tree search and a self-play agent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the agent networks for a scenario.
    Train {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-update loss log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run the scenario's SER sweep and write one CSV row per detector and SNR.
    Bench {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect a few instances at one SNR and print every detector's estimate.
    Detect {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        snr: f64,
        #[arg(long, default_value_t = 1)]
        n: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        return fail(&e);
    }
    let result = match cli.command {
        Command::Train { scenario, out, log } => train(&scenario, &out, log.as_deref()),
        Command::Bench { scenario, ckpt, out } => bench(&scenario, ckpt.as_deref(), &out),
        Command::Detect { scenario, ckpt, snr, n } => detect(&scenario, ckpt.as_deref(), snr, n),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_numerical() { 3 } else { 2 })
}

fn configure_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Error::Configuration(format!("{THREADS_ENV}={value} is not a positive count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Configuration(e.to_string()))
}

fn train(scenario: &Path, out: &Path, log_path: Option<&Path>) -> Result<(), Error> {
    let sc = Scenario::load(scenario)?;
    let mut trainer = Trainer::new(sc.train.clone(), sc.training_scenario()?)?;
    let total = sc.train.total_updates;
    let every = (total / 20).max(1);
    let mut logs = Vec::with_capacity(total);
    for _ in 0..total {
        match trainer.run_update() {
            Ok(log) => {
                if log.update % every == 0 || log.update + 1 == total {
                    eprintln!(
                        "update {:>6}  critic {:.4e}  actor {:+.4e}  value {:.4e}  return {:.3}",
                        log.update, log.critic_loss, log.actor_loss, log.state_value_loss, log.mean_return
                    );
                }
                logs.push(log);
            }
            Err(e) => {
                // Keep what was learned before the failing round.
                trainer.nets().save(out)?;
                write_log(log_path, &logs)?;
                eprintln!("saved last good networks after {} updates to {}", trainer.updates_done(), out.display());
                return Err(e);
            }
        }
    }
    trainer.nets().save(out)?;
    write_log(log_path, &logs)
}

fn write_log(path: Option<&Path>, logs: &[drlmcts::agent::UpdateLog]) -> Result<(), Error> {
    if let Some(path) = path {
        std::fs::write(path, training_log_csv(logs))?;
    }
    Ok(())
}

fn load_nets(ckpt: Option<&Path>) -> Result<Option<AgentNets>, Error> {
    ckpt.map(|p| {
        AgentNets::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Configuration(format!("cannot read checkpoint {}: {io}", p.display())),
            other => other,
        })
    })
    .transpose()
}

fn bench(scenario: &Path, ckpt: Option<&Path>, out: &Path) -> Result<(), Error> {
    let sc = Scenario::load(scenario)?;
    let nets = load_nets(ckpt)?;
    let sweep = run_sweep(&sc, nets.as_ref())?;
    if sweep.resamples > 0 {
        eprintln!("resampled {} degenerate channels", sweep.resamples);
    }
    emit_csv(&sweep.results, out)
}

fn detect(scenario: &Path, ckpt: Option<&Path>, snr: f64, n: usize) -> Result<(), Error> {
    let mut sc = Scenario::load(scenario)?;
    let nets = load_nets(ckpt)?;
    match &nets {
        Some(nets) => nets.check_dims(sc.dims())?,
        None if sc.detectors.iter().any(|d| d.needs_networks()) => {
            return Err(Error::Configuration("scenario has DRL detectors but no checkpoint was given".into()))
        }
        None => {}
    }
    sc.snr_grid_db = vec![snr];
    let channel = sc.base_channel()?;
    let real = sc.constellation().is_real();
    println!("trial,detector,symbol_errors,estimate");
    for trial in 0..n {
        let inst = draw_instance(&sc, &channel, 0, trial)?;
        let truth = inst.sys.x_true().expect("sampled systems carry truth");
        println!("{trial},truth,0,{}", join(truth));
        for spec in &sc.detectors {
            let d = Detector { spec, nets: nets.as_ref(), reward_scale: sc.train.reward_scale };
            let x = d.detect(&inst.sys, inst.detector_seed)?;
            let errors = count_symbol_errors(&x, truth, sc.n_t, real);
            println!("{trial},{},{errors},{}", spec.label(), join(&x));
        }
    }
    Ok(())
}

fn join(x: &[f64]) -> String {
    x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}
