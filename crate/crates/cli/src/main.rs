use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ncdg::autodiff::set_backward_perturbation;
use ncdg::config::{parse_override, RunConfig, DATA_ROOT_ENV};
use ncdg::coverage::NormScope;
use ncdg::gradcheck::{run_gradcheck, GradcheckSettings};
use ncdg::nn::checkpoint;
use ncdg::run::{load_dataset, model_spec, train_run, RunManifest, MANIFEST};
use ncdg::training::{dataset_coverage, evaluate};
use ncdg::Error;
use serde_json::json;

const EXIT_ERROR: u8 = 1;
const EXIT_NON_FINITE: u8 = 2;
const EXIT_GRADCHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "ncdg", version, about = "Neuron coverage-guided domain generalization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Reproduce the run described by an existing manifest.
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Classification accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// mnist-train, mnist-test, usps-train, usps-test or source.
        #[arg(long)]
        dataset: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Neuron coverage of a checkpoint over one pass of a dataset.
    CoverageReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long, default_value_t = 0.005)]
        t: f64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck {
        #[arg(long, default_value = "mlp-small")]
        preset: String,
        #[arg(long, hide = true, default_value_t = 0.0)]
        perturb_backward: f64,
    },
}

enum Failure {
    Lib(Error),
    Gradcheck,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn overrides(args: &ConfigArgs) -> Result<Vec<(String, String)>, Error> {
    args.set.iter().map(|s| parse_override(s)).collect()
}

fn env_root() -> Option<String> {
    std::env::var(DATA_ROOT_ENV).ok()
}

/// Config for commands that read a checkpoint: an explicit file wins,
/// otherwise the manifest next to the checkpoint, otherwise defaults.
fn checkpoint_config(args: &ConfigArgs, ckpt: &Path) -> Result<RunConfig, Error> {
    let sets = overrides(args)?;
    let sibling = ckpt.parent().map(|d| d.join(MANIFEST)).filter(|m| m.is_file());
    match (&args.config, sibling) {
        (None, Some(m)) => {
            let mut cfg = RunManifest::load(&m)?.run_config()?;
            if let Some(root) = env_root().filter(|r| !r.is_empty()) {
                cfg.data.data_root = root.into();
            }
            for (k, v) in &sets {
                cfg.set(k, v)?;
            }
            Ok(cfg)
        }
        (file, _) => RunConfig::resolve(file.as_deref(), env_root().as_deref(), &sets),
    }
}

fn print(value: serde_json::Value) {
    println!("{value}");
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { cfg, manifest, out } => {
            let config = match manifest {
                Some(m) => {
                    let mut c = RunManifest::load(&m)?.run_config()?;
                    for (k, v) in overrides(&cfg)? {
                        c.set(&k, &v)?;
                    }
                    c
                }
                None => RunConfig::resolve(cfg.config.as_deref(), env_root().as_deref(), &overrides(&cfg)?)?,
            };
            eprintln!("training into {}", out.display());
            let outcome = train_run(&config, &out)?;
            for c in &outcome.coverage {
                eprintln!("epoch {}: coverage {:.4}", c.epoch, c.global_ratio);
            }
            let last = outcome.metrics.last();
            print(json!({
                "out_dir": out.display().to_string(),
                "iterations": outcome.metrics.len(),
                "final_total": last.map(|m| m.total),
                "final_coverage_ratio": last.map(|m| m.coverage_ratio),
            }));
        }
        Command::Eval {
            checkpoint: ckpt,
            dataset,
            cfg,
        } => {
            let config = checkpoint_config(&cfg, &ckpt)?;
            let spec = model_spec(&config)?;
            let params = checkpoint::load(&ckpt, &spec)?;
            let (ds, _) = load_dataset(&config, &dataset)?;
            let r = evaluate(&spec, &params, &ds)?;
            print(json!({"dataset": dataset, "accuracy": r.accuracy, "n": r.n}));
        }
        Command::CoverageReport {
            checkpoint: ckpt,
            dataset,
            t,
            cfg,
        } => {
            let config = checkpoint_config(&cfg, &ckpt)?;
            let spec = model_spec(&config)?;
            let params = checkpoint::load(&ckpt, &spec)?;
            let (ds, _) = load_dataset(&config, &dataset)?;
            let scope: NormScope = config.train.norm_scope;
            let stats = dataset_coverage(&spec, &params, &ds, t, scope)?;
            print(json!({
                "dataset": dataset,
                "t": t,
                "n": ds.len(),
                "per_layer": stats.per_layer,
                "global_ratio": stats.global_ratio,
            }));
        }
        Command::Gradcheck {
            preset,
            perturb_backward,
        } => {
            let settings = GradcheckSettings::preset(&preset)?;
            set_backward_perturbation(perturb_backward);
            let report = run_gradcheck(&settings)?;
            print(serde_json::to_value(&report).map_err(Error::from)?);
            if !report.pass {
                eprintln!(
                    "gradcheck failed: first order {:e}, second order {:e}, tolerance {:e}",
                    report.first_order.max_rel_err, report.second_order.max_rel_err, settings.tolerance
                );
                return Err(Failure::Gradcheck);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Gradcheck) => ExitCode::from(EXIT_GRADCHECK),
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::NonFinite { .. } => EXIT_NON_FINITE,
                _ => EXIT_ERROR,
            })
        }
    }
}
