use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use hji_core::approximator::{adaptive_refine, nn_controller, train, Batch, Checkpoint, Network, TrainReport, TrainingMeta};
use hji_core::closedloop::{decay_rate, discounted_gain, gain_horizon, simulate, track, DecayFit};
use hji_core::io::{self, AnalyzeReport, RunConfig};
use hji_core::manifold::{generate_dataset_with, sample_sphere};
use hji_core::model::{ControlSystem, Gamma, Vector};
use hji_core::signal::parse_signal;
use hji_core::{Error, Result};

#[derive(Parser)]
#[command(name = "hji", version, about = "Discounted H-infinity feedback via the stable manifold method")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed of the stage being run.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Linear analysis: alpha_bar, GARE solution, margins and spectra.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Samples trajectories on the stable manifold and writes a JSONL dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        radius: Option<f64>,
        /// Also write one CSV per accepted trajectory into this directory.
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
    /// Fits the costate network; writes a checkpoint and `<out>.loss.csv`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Validation set; defaults to every tenth trajectory of `--data`.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Closed-loop runs from random initial states; fits decay rates.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        disturbance: Option<String>,
        #[arg(long)]
        x0_radius: Option<f64>,
        #[arg(long)]
        draws: Option<usize>,
    },
    /// Discounted L2-gain certificate from x0 = 0.
    Gain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        disturbance: Option<String>,
        #[arg(long)]
        gamma_threshold: Option<f64>,
    },
    /// Sampled-reference tracking; writes the error trace as CSV.
    Track {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        reference: Option<String>,
        /// Reference update rate in Hz.
        #[arg(long)]
        rate: Option<f64>,
    },
}

/// Failures of the inputs themselves exit with 2, everything else with 1.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Format { .. }
        | Error::Io(_)
        | Error::Json(_)
        | Error::Syntax { .. }
        | Error::UnknownIdentifier { .. }
        | Error::InvalidConfig(_) => 2,
        _ => 1,
    }
}

enum Outcome {
    Pass,
    Fail(String),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    let (name, log_target) = match &cli.command {
        Command::Analyze { out, .. } => ("analyze", out.clone()),
        Command::GenData { out, .. } => ("gen-data", Some(out.clone())),
        Command::Train { out, .. } => ("train", Some(out.clone())),
        Command::Simulate { out, .. } => ("simulate", Some(out.clone())),
        Command::Gain { out, .. } => ("gain", Some(out.clone())),
        Command::Track { out, .. } => ("track", Some(out.clone())),
    };
    let result = run(cli.command);
    let (code, status) = match &result {
        Ok(Outcome::Pass) => (0, "ok".to_string()),
        Ok(Outcome::Fail(msg)) => {
            eprintln!("hji {name}: validation failed: {msg}");
            (1, format!("failed: {msg}"))
        }
        Err(e) => {
            eprintln!("hji {name}: error: {e}");
            (exit_code(e), format!("error: {e}"))
        }
    };
    if let Some(out) = log_target {
        write_log(&out, name, started, &status);
    }
    ExitCode::from(code)
}

/// Timestamps live only in this sidecar so the artifacts stay reproducible.
fn write_log(out: &Path, name: &str, started: Instant, status: &str) {
    let unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let text = format!(
        "command={name}\nfinished_unix={unix}\nelapsed_s={:.3}\nstatus={status}\n",
        started.elapsed().as_secs_f64()
    );
    let _ = std::fs::write(sibling(out, "log"), text);
}

/// `dir/stem.ext` → `dir/stem.<suffix>`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn load(common: &Common) -> Result<RunConfig> {
    RunConfig::load(&common.config)
}

fn load_controller(cfg: &RunConfig, path: &Path) -> Result<(ControlSystem, Network)> {
    let (sys, _) = cfg.system.build()?;
    let ck = io::read_checkpoint(path)?;
    let net = ck.to_network()?;
    if net.input() != sys.n() {
        return Err(Error::Format {
            file: path.display().to_string(),
            message: format!("field `input` is {}, but the configured system has n = {}", net.input(), sys.n()),
        });
    }
    Ok((sys, net))
}

/// Parses a scalar signal and broadcasts it to `dim` channels.
fn uniform_signal(src: &str, dim: usize) -> Result<impl Fn(f64) -> Vector + Sync> {
    let expr = parse_signal(src)?;
    expr.eval(0.0)?;
    Ok(move |t: f64| Vector::from_element(dim, expr.eval(t).unwrap_or(f64::NAN)))
}

fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::Analyze { common, out } => {
            let cfg = load(&common)?;
            let (_, la) = cfg.system.build()?;
            let report = AnalyzeReport::new(&la, cfg.system.alpha_fraction(), cfg.generation.tail_tol)?;
            match out {
                Some(path) => {
                    io::write_json(&path, &report)?;
                    println!(
                        "alpha_bar = {:.6}, alpha = {:.6}, horizon_margin = {:.6}, T_inf = {}",
                        report.alpha_bar, report.alpha, report.horizon_margin, report.horizon
                    );
                }
                None => println!("{}", io::to_json(&report)?),
            }
            Ok(Outcome::Pass)
        }

        Command::GenData {
            common,
            out,
            count,
            radius,
            trajectories,
        } => {
            let cfg = load(&common)?;
            let mut gen = cfg.generation.clone();
            if let Some(s) = common.seed {
                gen.seed = s;
            }
            if let Some(c) = count {
                gen.count = c;
            }
            if let Some(r) = radius {
                gen.radius = r;
            }
            let (sys, la) = cfg.system.build()?;
            let result = generate_dataset_with(&sys, &la, &gen, trajectories.is_some())?;
            io::write_dataset(&out, &result.dataset)?;
            if let Some(dir) = trajectories {
                std::fs::create_dir_all(&dir)?;
                for (i, traj) in &result.trajectories {
                    io::write_text(&dir.join(format!("traj_{i:05}.csv")), &io::trajectory_csv(traj, &sys))?;
                }
            }
            let meta = &result.dataset.meta;
            println!(
                "{} samples from {}/{} trajectories (T_inf = {}); rejections: {}",
                result.dataset.len(),
                meta.accepted,
                meta.attempted,
                meta.horizon,
                result.diagnostics()
            );
            Ok(Outcome::Pass)
        }

        Command::Train {
            common,
            out,
            data,
            val,
            epochs,
        } => {
            let cfg = load(&common)?;
            let mut tc = cfg.training.clone();
            if let Some(s) = common.seed {
                tc.seed = s;
            }
            if let Some(e) = epochs {
                tc.epochs = e;
            }
            let (sys, la) = cfg.system.build()?;
            let full = io::read_dataset(&data)?;
            if full.meta.n != sys.n() {
                return Err(Error::Format {
                    file: data.display().to_string(),
                    message: format!("field `meta.n` is {}, but the configured system has n = {}", full.meta.n, sys.n()),
                });
            }
            let (mut train_ds, val_ds) = match &val {
                Some(path) => (full, io::read_dataset(path)?),
                None => full.split_by_trajectory(10),
            };
            let val_batch = Batch::from_dataset(&val_ds)?;
            let p = &la.cert.p;
            let net0 = Network::new(sys.n(), &tc.hidden, tc.seed);
            let (mut net, mut report) = train(&net0, &Batch::from_dataset(&train_ds)?, &val_batch, p, &tc)?;
            for round in 0..cfg.refine.rounds {
                let mut rc = cfg.refine.config();
                rc.seed = rc.seed.wrapping_add(round as u64);
                let refined = adaptive_refine(&net, &train_ds, &sys, &la, &cfg.generation, &rc)?;
                println!("refine round {round}: {}/{} new trajectories", refined.accepted, refined.attempted);
                train_ds = refined.dataset;
                let (next, rep) = train(&net, &Batch::from_dataset(&train_ds)?, &val_batch, p, &tc)?;
                net = next;
                append_report(&mut report, rep);
            }
            let meta = TrainingMeta {
                init_seed: tc.seed,
                train_seed: tc.seed,
                epochs: report.train_loss.len(),
                final_train_loss: report.final_train_loss,
                final_val_loss: report.final_val_loss,
                max_pointwise_error: report.max_pointwise_error,
                jacobian_gap: report.jacobian_gap,
            };
            io::write_checkpoint(&out, &Checkpoint::from_network(&net, meta))?;
            io::write_text(&sibling(&out, "loss.csv"), &io::loss_csv(&report))?;
            println!(
                "train loss {:.3e}, validation loss {:.3e}, jacobian gap {:.3e}",
                report.final_train_loss, report.final_val_loss, report.jacobian_gap
            );
            Ok(Outcome::Pass)
        }

        Command::Simulate {
            common,
            out,
            checkpoint,
            disturbance,
            x0_radius,
            draws,
        } => {
            let cfg = load(&common)?;
            let sc = &cfg.simulation;
            let (sys, net) = load_controller(&cfg, &checkpoint)?;
            let ctl = nn_controller(&net, &sys)?;
            let d = uniform_signal(disturbance.as_deref().unwrap_or(&sc.disturbance), sys.l())?;
            let radius = x0_radius.unwrap_or(sc.x0_radius);
            let mut rng = ChaCha8Rng::seed_from_u64(common.seed.unwrap_or(0));
            let control = |x: &Vector| ctl.control(x);
            let dist = |t: f64, _: &Vector| d(t);
            let mut runs = Vec::new();
            let mut failures = Vec::new();
            for k in 0..draws.unwrap_or(sc.draws) {
                let x0 = sample_sphere(&mut rng, sys.n(), radius);
                let (fit, status) = match simulate(&sys, &control, &dist, &x0, sc.horizon, &sc.options) {
                    Ok(sim) => {
                        io::write_text(&sibling(&out, &format!("trace_{k:03}.csv")), &io::trace_csv(&sim))?;
                        match decay_rate(&sim) {
                            Ok(fit) => (Some(fit), "decaying".to_string()),
                            Err(e) => (None, e.to_string()),
                        }
                    }
                    Err(e @ Error::InstabilityDetected { .. }) => (None, e.to_string()),
                    Err(e) => return Err(e),
                };
                if status != "decaying" {
                    failures.push(format!("draw {k}: {status}"));
                }
                runs.push(Run {
                    x0: x0.as_slice().to_vec(),
                    fit,
                    status,
                });
            }
            io::write_json(&out, &runs)?;
            let worst = runs.iter().filter_map(|r| r.fit.and_then(|f| f.rate)).fold(f64::NEG_INFINITY, f64::max);
            println!("{} runs, slowest decay rate {:.4}", runs.len(), worst);
            Ok(if failures.is_empty() { Outcome::Pass } else { Outcome::Fail(failures.join("; ")) })
        }

        Command::Gain {
            common,
            out,
            checkpoint,
            disturbance,
            gamma_threshold,
        } => {
            let cfg = load(&common)?;
            let sc = &cfg.simulation;
            let (sys, net) = load_controller(&cfg, &checkpoint)?;
            let gamma = match (gamma_threshold.or(sc.gamma_threshold), sys.gamma()) {
                (Some(g), _) => g,
                (None, Gamma::Finite(g)) => g,
                (None, Gamma::Infinite) => {
                    return Err(Error::InvalidConfig(
                        "gamma_threshold is required when the system has gamma = inf".into(),
                    ))
                }
            };
            let ctl = nn_controller(&net, &sys)?;
            let d = uniform_signal(disturbance.as_deref().unwrap_or(&sc.gain_disturbance), sys.l())?;
            let horizon = gain_horizon(sys.alpha(), sc.horizon_tol)?;
            let control = |x: &Vector| ctl.control(x);
            let dist = |t: f64, _: &Vector| d(t);
            let sim = simulate(&sys, &control, &dist, &Vector::zeros(sys.n()), horizon, &sc.options)?;
            let cert = discounted_gain(&sim, gamma, sc.epsilon, None);
            io::write_gain_certificate(&out, &cert)?;
            io::write_text(&sibling(&out, "trace.csv"), &io::trace_csv(&sim))?;
            println!(
                "I_z = {:.6e}, I_d = {:.6e}, ratio = {}, threshold^2 = {:.4}",
                cert.i_z,
                cert.i_d,
                cert.ratio.map_or("n/a".into(), |r| format!("{r:.6}")),
                cert.gamma_threshold * cert.gamma_threshold
            );
            Ok(if cert.pass {
                Outcome::Pass
            } else {
                Outcome::Fail(format!("gain ratio exceeds ({} + {})^2", gamma, sc.epsilon))
            })
        }

        Command::Track {
            common,
            out,
            checkpoint,
            reference,
            rate,
        } => {
            let cfg = load(&common)?;
            let sc = &cfg.simulation;
            let (sys, net) = load_controller(&cfg, &checkpoint)?;
            let ctl = nn_controller(&net, &sys)?;
            let expr = parse_signal(reference.as_deref().unwrap_or(&sc.reference))?;
            expr.eval(0.0)?;
            let r = |_: usize, t: f64| expr.eval(t).unwrap_or(f64::NAN);
            let control = |x: &Vector| ctl.control(x);
            let res = track(
                &sys,
                &control,
                &r,
                &Vector::zeros(sys.n()),
                rate.unwrap_or(sc.update_rate_hz),
                sc.track_horizon,
                sc.reconstruction,
                &sc.options,
            )?;
            io::write_text(&out, &io::tracking_csv(&res))?;
            let half = 0.5 * sc.track_horizon;
            println!(
                "max error {:.4e}; after t = {half}: {:.4e}",
                res.max_error_after(0.0),
                res.max_error_after(half)
            );
            Ok(Outcome::Pass)
        }
    }
}

#[derive(Serialize)]
struct Run {
    x0: Vec<f64>,
    fit: Option<DecayFit>,
    status: String,
}

fn append_report(acc: &mut TrainReport, next: TrainReport) {
    acc.lr.extend(next.lr);
    acc.train_loss.extend(next.train_loss);
    acc.val_loss.extend(next.val_loss);
    acc.final_train_loss = next.final_train_loss;
    acc.final_val_loss = next.final_val_loss;
    acc.max_pointwise_error = next.max_pointwise_error;
    acc.jacobian_gap = next.jacobian_gap;
}
