//! Command-line front end: channel generation, training, evaluation, the
//! SNR and refinement-depth sweeps, and the gradient-oracle check.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use beamsim::error::Error;
use beamsim::harness::{
    self, generate_dataset, preset_spec, run_gradcheck, sweep_q, sweep_snr, train_baseline,
    Baseline, ExperimentSpec, Preset, Scale,
};
use beamsim::nets::checkpoint::Checkpoint;
use beamsim::training::InferenceOptions;

#[derive(Parser)]
#[command(
    name = "beamsim",
    about = "Multi-user MIMO downlink beamforming simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// JSON experiment config; overrides --preset/--scale entirely.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario preset (miso-sc, miso-sd, mimo-sc, mimo-sd, hybrid-ff, hybrid-nf).
    #[arg(long, default_value = "miso-sd")]
    preset: String,
    /// Problem size: desk (minutes on a laptop) or paper (full size).
    #[arg(long, default_value = "desk")]
    scale: String,
    /// Overrides the experiment seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a channel dataset and write it in the binary record format.
    Generate {
        #[command(flatten)]
        common: CommonOpts,
        /// Number of samples.
        #[arg(long, default_value_t = 256)]
        count: usize,
    },
    /// Train one baseline end to end; writes metrics, checkpoints, manifest.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Which scheme to train (kd-edn, unsupervised, supervised, kd-edn-q0).
        #[arg(long, default_value = "kd-edn")]
        baseline: String,
    },
    /// Evaluate a checkpoint across the SNR grid.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        /// Checkpoint to evaluate (defaults to <out>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sum rate versus SNR for every configured baseline.
    SweepSnr {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Sum rate versus inference refinement depth.
    SweepQ {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Run every gradient-oracle suite and report worst errors.
    Gradcheck {
        /// Seed for the oracle instances.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn resolve_spec(common: &CommonOpts) -> Result<ExperimentSpec, Error> {
    let mut spec = match &common.config {
        Some(path) => ExperimentSpec::load(path)?,
        None => {
            let preset: Preset = common.preset.parse()?;
            let scale: Scale = common.scale.parse()?;
            preset_spec(preset, scale)
        }
    };
    if let Some(seed) = common.seed {
        spec.eval.seeds = vec![seed];
        spec.train.config.seed = seed;
    }
    spec.validate()?;
    Ok(spec)
}

fn ensure_out(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate { common, count } => {
            let spec = resolve_spec(&common)?;
            ensure_out(&common.out)?;
            let seed = spec.eval.seeds[0];
            let ds = generate_dataset(&spec, seed, count)?;
            let path = common.out.join("channels.bin");
            ds.save(&path)?;
            println!(
                "wrote {count} samples ({} users x {}x{}) to {} (sha256 {})",
                spec.system.config.k,
                ds.samples[0].h[0].nrows(),
                ds.samples[0].h[0].ncols(),
                path.display(),
                ds.content_hash()?
            );
            Ok(())
        }
        Command::Train { common, baseline } => {
            let spec = resolve_spec(&common)?;
            ensure_out(&common.out)?;
            let baseline: Baseline = baseline.parse()?;
            if !baseline.is_trained() {
                return Err(Error::Config(format!(
                    "baseline {} does not train",
                    baseline.name()
                )));
            }
            let seed = spec.eval.seeds[0];
            let (model, outputs) = train_with_checkpoints(&spec, baseline, seed, &common.out)?;
            harness::write_metrics_csv(&outputs.stage1, &common.out.join("metrics.csv"))?;
            harness::write_timings_csv(&outputs.stage1_seconds, &common.out.join("timings.csv"))?;
            let chandec_rows: Vec<String> = outputs
                .chandec_curve
                .iter()
                .enumerate()
                .map(|(i, l)| format!("{i},{l}"))
                .collect();
            std::fs::write(
                common.out.join("chandec_loss.csv"),
                format!("step,loss\n{}\n", chandec_rows.join("\n")),
            )?;
            let ckpt = Checkpoint {
                nets: model.nets.clone(),
                seed,
                alpha: 1.0f64.min(spec.train.config.epochs as f64 * spec.train.config.alpha_step),
                epoch: spec.train.config.epochs as u64,
            };
            ckpt.save(&common.out.join("model.ckpt"))?;
            spec.save(&common.out.join("spec.json"))?;
            println!(
                "trained {} for {} epochs (final mean rate {:.4} bits/s/Hz); \
                 checkpoint at {}",
                baseline.name(),
                spec.train.config.epochs,
                outputs.stage1.last().map_or(f64::NAN, |m| m.mean_rate),
                common.out.join("model.ckpt").display()
            );
            Ok(())
        }
        Command::Eval { common, checkpoint } => {
            let spec = resolve_spec(&common)?;
            ensure_out(&common.out)?;
            let path = checkpoint.unwrap_or_else(|| common.out.join("model.ckpt"));
            if !path.exists() {
                return Err(Error::MissingCheckpoint(path));
            }
            let ckpt = Checkpoint::load(&path, None)?;
            let model = beamsim::training::TrainedEdn {
                nets: ckpt.nets,
                power: spec.system.config.p,
            };
            let seed = spec.eval.seeds[0];
            let tests = harness::test_sets_for(&spec, seed)?;
            let fixed_analog = harness::fixed_analog_for(&spec)?;
            let opts = InferenceOptions {
                q_i: spec.train.config.q_i,
                eta_ga: spec.train.config.eta_ga,
                feedback: spec.feedback,
                project: false,
                oracle_channel: false,
            };
            let mut rows = Vec::new();
            for test in &tests {
                let res =
                    harness::evaluate_model(&model, test, &opts, seed, fixed_analog.as_ref())?;
                println!(
                    "SNR {:>5} dB: mean rate {:.4} (std {:.4}) over {} samples",
                    test.snr_db,
                    res.mean,
                    res.std,
                    res.rates.len()
                );
                rows.push(harness::ResultRow {
                    baseline: "checkpoint".into(),
                    snr_db: test.snr_db,
                    q_t: None,
                    q_i: Some(opts.q_i),
                    mean_rate: res.mean,
                    std_rate: res.std,
                    n_samples: res.rates.len(),
                    seconds: res.seconds,
                    w0_power_max_dev: res.w0_power_max_dev,
                    post_norm_mean: res.post_norm_mean,
                    post_norm_max: res.post_norm_max,
                });
            }
            harness::write_snr_csv(&rows, &common.out.join("eval.csv"))?;
            Ok(())
        }
        Command::SweepSnr { common } => {
            let spec = resolve_spec(&common)?;
            ensure_out(&common.out)?;
            let out = sweep_snr(&spec)?;
            harness::write_snr_csv(&out.rows, &common.out.join("sweep_snr.csv"))?;
            std::fs::write(
                common.out.join("manifest.json"),
                serde_json::to_string_pretty(&out.manifest)?,
            )?;
            for r in &out.rows {
                println!(
                    "{:<14} {:>5} dB: mean rate {:.4} (std {:.4})",
                    r.baseline, r.snr_db, r.mean_rate, r.std_rate
                );
            }
            println!("wrote {}", common.out.join("sweep_snr.csv").display());
            Ok(())
        }
        Command::SweepQ { common } => {
            let spec = resolve_spec(&common)?;
            ensure_out(&common.out)?;
            let out = sweep_q(&spec)?;
            harness::write_q_csv(&out.rows, &common.out.join("sweep_q.csv"))?;
            std::fs::write(
                common.out.join("manifest.json"),
                serde_json::to_string_pretty(&out.manifest)?,
            )?;
            for r in &out.rows {
                println!(
                    "{:<8} q_t {:>2} q_i {:>2}: mean rate {:.4}",
                    r.baseline,
                    r.q_t.map_or("-".into(), |q: usize| q.to_string()),
                    r.q_i.map_or("-".into(), |q: usize| q.to_string()),
                    r.mean_rate
                );
            }
            println!("wrote {}", common.out.join("sweep_q.csv").display());
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let suites = run_gradcheck(seed)?;
            let mut all_ok = true;
            for s in &suites {
                let status = if s.passed() { "PASS" } else { "FAIL" };
                println!(
                    "[{status}] {:<68} worst rel err {:.3e} (tolerance {:.0e})",
                    s.name, s.worst_rel_err, s.tolerance
                );
                all_ok &= s.passed();
            }
            if all_ok {
                println!("all gradient oracle suites passed");
                Ok(())
            } else {
                Err(Error::NumericFailure(
                    "one or more gradient oracle suites failed".into(),
                ))
            }
        }
    }
}

/// Runs both training stages, writing periodic checkpoints when configured.
fn train_with_checkpoints(
    spec: &ExperimentSpec,
    baseline: Baseline,
    seed: u64,
    out: &Path,
) -> Result<(beamsim::training::TrainedEdn, beamsim::training::TrainOutputs), Error> {
    let every = spec.train.config.checkpoint_every;
    if every == 0 {
        return train_baseline(spec, baseline, seed, None);
    }
    // Same training stream as train_baseline, with on-disk snapshots.
    let gen = harness::generator_from_spec(spec, seed, None)?;
    let nets = harness::nets_for_spec(spec, &gen, seed)?;
    let mut cfg = spec.train.config.clone();
    cfg.seed = seed;
    if baseline == Baseline::KdEdnQ0 {
        cfg.q_t = 0;
    }
    let schedule = match baseline {
        Baseline::KdEdn | Baseline::KdEdnQ0 => {
            beamsim::training::LossSchedule::KdRamp { step: cfg.alpha_step }
        }
        Baseline::Unsupervised => beamsim::training::LossSchedule::FixedAlpha { alpha: 1.0 },
        Baseline::Supervised => beamsim::training::LossSchedule::FixedAlpha { alpha: 0.0 },
        Baseline::Mmse => unreachable!("checked by caller"),
    };
    let out_dir = out.to_path_buf();
    let outputs = beamsim::training::run_algorithm_with(
        nets,
        &gen,
        &cfg,
        schedule,
        move |epoch, nets, metrics| {
            if (epoch + 1) % every == 0 {
                let ckpt = Checkpoint {
                    nets: nets.clone(),
                    seed,
                    alpha: metrics.alpha,
                    epoch: epoch as u64,
                };
                ckpt.save(&out_dir.join(format!("ckpt-epoch{:05}.ckpt", epoch + 1)))?;
            }
            Ok(())
        },
    )?;
    Ok((outputs.model.clone(), outputs))
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("BEAMSIM_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NumericFailure(_)
                | Error::DegenerateChannel(_)
                | Error::DegenerateOutput(_)
                | Error::DegenerateGeometry(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
