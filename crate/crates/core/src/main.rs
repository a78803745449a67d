use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use metaaug::eval::{classify_eval, forecast_eval, render_forecast_table, Featurizer};
use metaaug::oracles::{binomial_band, check_concrete_limit, check_criteria_gradient, sweep_properties, GradientToy};
use metaaug::plot::{plot_augmentation_strips, plot_criteria_scatter, plot_policy_trajectory, SweepPoint};
use metaaug::runner::{
    ablation_sweep, criteria_sweep, load_dataset, render_ablation_table, resolve_registry, run, ExperimentConfig,
    LoadedData,
};
use metaaug::train::{fit, read_csv, Mode, PolicyRecord, TrainState};
use metaaug::Error;

#[derive(Parser)]
#[command(name = "metaaug", version, about = "Contrastive time-series representations with a learned augmentation policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder; writes checkpoint.json, loss.csv and policy.csv.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ridge forecasting with a trained encoder.
    EvalForecast {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// SVM classification with a trained encoder.
    EvalClassify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Oracle checks; exits 1 on any violation.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Ablation grid or single-augmentation criteria sweep.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = SweepKind::Ablation)]
        kind: SweepKind,
        /// Transform specs for the criteria sweep, e.g. `subsequence:ratio=0.3`.
        #[arg(long, value_delimiter = ';')]
        specs: Vec<String>,
        #[arg(long)]
        force: bool,
    },
    /// Render figures from logged CSVs.
    Plot {
        #[command(subcommand)]
        what: PlotKind,
    },
    /// Fit then evaluate, recording the run in the results store.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        force: bool,
        /// Run the ablation grid instead of a single configuration.
        #[arg(long)]
        ablation_sweep: bool,
    },
}

#[derive(Subcommand)]
enum PlotKind {
    /// Policy weights per epoch from policy.csv.
    Policy {
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Criteria scatter from a sweep CSV (label, criteria, metric).
    Scatter {
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "metric")]
        metric: String,
    },
    /// One transformed example per candidate transform.
    Strips {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        instance: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Properties,
    Concrete,
    Gradients,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum SweepKind {
    Ablation,
    Criteria,
}

/// Failures that should exit with status 1 rather than 2.
#[derive(Debug)]
struct Violation(String);

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Violation {}

fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)
        .map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })
        .with_context(|| format!("loading {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn verify(suite: Suite, seed: u64) -> anyhow::Result<()> {
    match suite {
        Suite::Properties => {
            let s = sweep_properties(1000, seed)?;
            println!(
                "cases {} | property 1 violations {} (max residual {:.2e}) | property 2 violations {} (max residual {:.2e}) | negative control violates: {} (residual {:.3})",
                s.cases,
                s.property1_violations,
                s.max_residual1,
                s.property2_violations,
                s.max_residual2,
                s.negative_control_violates,
                s.negative_control_residual
            );
            if !s.ok() {
                return Err(Violation("property sweep failed".into()).into());
            }
        }
        Suite::Concrete => {
            let n = 100_000;
            let mut ok = true;
            for p in [0.1, 0.3, 0.5, 0.7, 0.9] {
                let f = check_concrete_limit(p, 0.01, n, seed.wrapping_add((p * 10.0) as u64))?;
                let band = binomial_band(p, n);
                let pass = (f - p).abs() <= band;
                ok &= pass;
                println!("p={p}: P(a>0.5)={f:.5} band ±{band:.5} {}", if pass { "ok" } else { "VIOLATION" });
            }
            if !ok {
                return Err(Violation("concrete limit outside the binomial band".into()).into());
            }
        }
        Suite::Gradients => {
            let mut ok = true;
            for mode in [Mode::Unsupervised, Mode::Supervised] {
                let c = check_criteria_gradient(&GradientToy { mode, seed, ..GradientToy::default() })?;
                let pass = c.max_rel_err <= 1e-3;
                ok &= pass;
                println!("{mode:?}: max relative error {:.3e} {}", c.max_rel_err, if pass { "ok" } else { "VIOLATION" });
            }
            if !ok {
                return Err(Violation("criteria gradient disagrees with finite differences".into()).into());
            }
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Fit { config, out } => {
            let cfg = load_config(&config)?;
            let data = load_dataset(&cfg.dataset)?;
            let registry = resolve_registry(&cfg.registry)?;
            let fitted = fit(&data.training_set(), &registry, cfg.train.clone(), Some(&out))?;
            if let Some(last) = fitted.epochs.last() {
                println!("final epoch: L_total {:.4} criteria {:.4}", last.l_total, last.criteria);
            }
            println!("checkpoint: {}", out.join("checkpoint.json").display());
        }
        Command::EvalForecast { config, checkpoint } => {
            let cfg = load_config(&config)?;
            let state = TrainState::load(&checkpoint)?;
            let LoadedData::Series { name, split, .. } = load_dataset(&cfg.dataset)? else {
                return Err(Error::Config("forecasting needs a series dataset".into()).into());
            };
            let task = match cfg.eval {
                metaaug::runner::EvalSpec::Forecast(t) => t,
                _ => metaaug::eval::ForecastTask::default(),
            };
            let f = Featurizer::Encoder { encoder: &state.encoder, pooling: state.encoder.config.pooling };
            print!("{}", render_forecast_table(&forecast_eval(f, &split, &name, &task)?));
        }
        Command::EvalClassify { config, checkpoint } => {
            let cfg = load_config(&config)?;
            let state = TrainState::load(&checkpoint)?;
            let LoadedData::Labelled(ds) = load_dataset(&cfg.dataset)? else {
                return Err(Error::Config("classification needs a labelled dataset".into()).into());
            };
            let r = classify_eval(&state.encoder, &ds)?;
            println!("{}: accuracy {:.4} (C = {})", r.dataset, r.accuracy, r.c);
        }
        Command::Verify { suite, seed } => verify(suite, seed)?,
        Command::Sweep { config, kind, specs, force } => {
            let cfg = load_config(&config)?;
            match kind {
                SweepKind::Ablation => print!("{}", render_ablation_table(&ablation_sweep(&cfg, force)?)),
                SweepKind::Criteria => {
                    if specs.len() < 2 {
                        return Err(Error::Config("criteria sweep needs at least two --specs".into()).into());
                    }
                    let (points, rho) = criteria_sweep(&cfg, &specs, force)?;
                    for p in &points {
                        println!("{}: criteria {:.4} metric {:.4}", p.label, p.criteria, p.metric);
                    }
                    println!("spearman(-criteria, metric) = {}", rho.map_or("NA".into(), |r| format!("{r:.3}")));
                }
            }
        }
        Command::Plot { what } => match what {
            PlotKind::Policy { csv, out } => {
                let rows: Vec<PolicyRecord> = read_csv(&csv)?;
                plot_policy_trajectory(&rows, &out)?;
            }
            PlotKind::Scatter { csv, out, metric } => {
                let rows: Vec<SweepPoint> = read_csv(&csv)?;
                let rho = plot_criteria_scatter(&rows, &metric, &out, &out.with_extension("csv"))?;
                println!("spearman = {}", rho.map_or("NA".into(), |r| format!("{r:.3}")));
            }
            PlotKind::Strips { config, instance, out } => {
                let cfg = load_config(&config)?;
                let ds = load_dataset(&cfg.dataset)?.training_set();
                let ts = ds
                    .instances
                    .get(instance)
                    .ok_or_else(|| Error::Config(format!("instance {instance} out of range")))?;
                plot_augmentation_strips(ts, &resolve_registry(&cfg.registry)?, cfg.train.seed, &out)?;
            }
        },
        Command::Run { config, force, ablation_sweep: grid } => {
            let cfg = load_config(&config)?;
            if grid {
                print!("{}", render_ablation_table(&ablation_sweep(&cfg, force)?));
            } else {
                let out = run(&cfg, force)?;
                if out.skipped {
                    println!("skipped: identical config already ran as {} ({})", out.run_id, out.dir.display());
                } else {
                    println!("run {} -> {}", out.run_id, out.dir.display());
                }
                println!("{}", serde_json::to_string_pretty(&out.metrics)?);
            }
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Violation>().is_some() {
        return 1;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(_) | None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
