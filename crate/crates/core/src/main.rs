use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use stprune::config::ExperimentConfig;
use stprune::data::save_jsonl;
use stprune::model::{load_checkpoint_expecting, save_checkpoint, Checkpoint};
use stprune::pipeline::{
    evaluate, load_datasets, prune_spatial, prune_temporal, retrain, run_pipeline, stage_config, train_baseline,
    RetrainStage,
};
use stprune::report::{read_history, render_histories, write_history, write_json};
use stprune::studies::{self, Study};
use stprune::temporal::scale_plan;

/// Spatial and temporal pruning of spiking transformer encoders.
#[derive(Parser, Debug)]
#[command(name = "stprune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` settings applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an unpruned baseline.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Training history CSV; defaults to the checkpoint path with `.history.csv`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Select head and neuron masks under an ACs budget.
    PruneSpatial {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// ACs ratio budget; defaults to the configured `acs_constraint`.
        #[arg(long)]
        constraint: Option<f64>,
        /// Number of calibration samples.
        #[arg(long)]
        calib: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Allocate per-sublayer timesteps from trace complexity.
    PruneTemporal {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        base: Option<f64>,
        #[arg(long)]
        variance: Option<f64>,
        #[arg(long)]
        calib: Option<usize>,
        /// Multiply the allocated plan by this factor.
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Retrain a pruned checkpoint.
    Retrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// spatial, temporal or joint.
        #[arg(long, default_value = "spatial")]
        stage: RetrainStage,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Sequential-simulation metrics on the test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render history CSVs into one CSV per figure family.
    Report {
        /// History CSVs, optionally labelled as `label=path`.
        #[arg(long = "history", required = true)]
        histories: Vec<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the whole pipeline, writing every artifact into a directory.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out_dir: PathBuf,
        /// Prune spatially and temporally before a single retraining.
        #[arg(long)]
        joint: bool,
    },
    /// Parameter sweeps and ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        study: Study,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write the configured datasets as JSON Lines.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
}

/// Configuration problems are usage errors (exit 2); everything else that
/// fails after the inputs were accepted exits 1.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

use Failure::Usage;

fn load_config(c: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(ExperimentConfig::toy()),
    }
    .map_err(Usage)?;
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Usage(anyhow::anyhow!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| Usage(e.into()))?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| Usage(e.into()))?;
    Ok(cfg)
}

fn load(path: &Path, cfg: &ExperimentConfig) -> anyhow::Result<Checkpoint> {
    load_checkpoint_expecting(path, &cfg.model).with_context(|| format!("loading {}", path.display()))
}

fn history_path(out: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| out.with_extension("history.csv"))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg_of = |c: &Common| load_config(c);
    let result: anyhow::Result<()> = match cli.command {
        Command::Train { common, out, history } => {
            if common.config.is_none() {
                return Err(Usage(anyhow::anyhow!("train needs --config")));
            }
            let cfg = cfg_of(&common)?;
            (|| {
                let data = load_datasets(&cfg)?;
                let (ckpt, h) = train_baseline(&cfg, &data)?;
                save_checkpoint(&out, &ckpt)?;
                write_history(history_path(&out, history), &h)?;
                Ok(())
            })()
        }
        Command::PruneSpatial {
            common,
            ckpt,
            out,
            constraint,
            calib,
            report,
        } => {
            let cfg = cfg_of(&common)?;
            (|| {
                let base = load(&ckpt, &cfg)?;
                let data = load_datasets(&cfg)?;
                let calib = data.calibration(calib.unwrap_or(cfg.calib_size));
                let budget = constraint.unwrap_or(cfg.acs_constraint);
                let (pruned, rep) = prune_spatial(&base, calib, budget, cfg.baseline.batch_size)?;
                save_checkpoint(&out, &pruned)?;
                write_json(report.unwrap_or_else(|| out.with_extension("spatial.json")), &rep)?;
                println!(
                    "ACs ratio {:.4} -> {:.4}; kept heads {:?}, kept neurons {:?}",
                    rep.before.ratio, rep.after.ratio, rep.kept_heads, rep.kept_neurons
                );
                Ok(())
            })()
        }
        Command::PruneTemporal {
            common,
            ckpt,
            out,
            base,
            variance,
            calib,
            rho,
            report,
        } => {
            let cfg = cfg_of(&common)?;
            let base = base.unwrap_or(cfg.model.pca_base);
            if !(base > 1.0) {
                return Err(Usage(anyhow::anyhow!("--base must be greater than 1, got {base}")));
            }
            (|| {
                let input = load(&ckpt, &cfg)?;
                let data = load_datasets(&cfg)?;
                let calib = data.calibration(calib.unwrap_or(cfg.calib_size));
                let (mut pruned, mut rep) =
                    prune_temporal(&input, calib, base, variance.unwrap_or(cfg.model.variance_threshold))?;
                if let Some(r) = rho {
                    pruned.plan = scale_plan(&pruned.plan, r)?;
                    rep.timesteps = pruned.plan.flat();
                    rep.mean_timesteps = pruned.plan.mean_timesteps();
                    rep.acs = stprune::cost::acs_total(&cfg.model, &pruned.masks, &pruned.plan)?;
                }
                save_checkpoint(&out, &pruned)?;
                write_json(report.unwrap_or_else(|| out.with_extension("temporal.json")), &rep)?;
                println!("timesteps {:?} (mean {:.2})", rep.timesteps, rep.mean_timesteps);
                Ok(())
            })()
        }
        Command::Retrain {
            common,
            ckpt,
            out,
            stage,
            history,
        } => {
            let cfg = cfg_of(&common)?;
            (|| {
                let input = load(&ckpt, &cfg)?;
                let data = load_datasets(&cfg)?;
                let (ckpt, h) = retrain(&input, &data, cfg.calib_size, &stage_config(&cfg, stage))?;
                save_checkpoint(&out, &ckpt)?;
                write_history(history_path(&out, history), &h)?;
                Ok(())
            })()
        }
        Command::Eval { common, ckpt, out } => {
            let cfg = cfg_of(&common)?;
            (|| {
                let input = load(&ckpt, &cfg)?;
                let data = load_datasets(&cfg)?;
                let rep = evaluate(&input, &data.test, cfg.seed)?;
                match out {
                    Some(p) => write_json(p, &rep)?,
                    None => println!("{}", serde_json::to_string_pretty(&rep)?),
                }
                Ok(())
            })()
        }
        Command::Report { histories, out_dir } => (|| {
            let mut runs = Vec::new();
            for h in &histories {
                let (label, path) = match h.split_once('=') {
                    Some((l, p)) => (l.to_string(), PathBuf::from(p)),
                    None => {
                        let p = PathBuf::from(h);
                        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                        (stem, p)
                    }
                };
                let records = read_history(&path).with_context(|| format!("reading {}", path.display()))?;
                runs.push((label, records));
            }
            for p in render_histories(&runs, &out_dir)? {
                println!("{}", p.display());
            }
            Ok(())
        })(),
        Command::Pipeline { common, out_dir, joint } => {
            let cfg = cfg_of(&common)?;
            (|| {
                std::fs::create_dir_all(&out_dir)?;
                let data = load_datasets(&cfg)?;
                let run = run_pipeline(&cfg, &data, joint)?;
                save_checkpoint(out_dir.join("baseline.ckpt"), &run.baseline)?;
                save_checkpoint(out_dir.join("spatial.ckpt"), &run.spatial)?;
                save_checkpoint(out_dir.join("final.ckpt"), &run.temporal)?;
                write_json(out_dir.join("spatial.json"), &run.spatial_report)?;
                write_json(out_dir.join("temporal.json"), &run.temporal_report)?;
                for (name, h) in &run.histories {
                    write_history(out_dir.join(format!("{name}.csv")), h)?;
                }
                let evals: std::collections::BTreeMap<_, _> = run.evals.iter().cloned().collect();
                write_json(out_dir.join("eval.json"), &evals)?;
                render_histories(&run.histories, out_dir.join("figures"))?;
                for (name, e) in &run.evals {
                    println!(
                        "{name:>9}: accuracy {:.3}  ACs ratio {:.3}  normalized #C {:.4}  mean timesteps {:.2}",
                        e.accuracy, e.acs_ratio, e.normalized_c, e.mean_timesteps
                    );
                }
                Ok(())
            })()
        }
        Command::Ablate { common, study, out_dir } => {
            let cfg = cfg_of(&common)?;
            (|| {
                for p in studies::run_study(&cfg, study, &out_dir)? {
                    println!("{}", p.display());
                }
                Ok(())
            })()
        }
        Command::GenData { common, train, test } => {
            let cfg = cfg_of(&common)?;
            (|| {
                let data = load_datasets(&cfg)?;
                save_jsonl(&train, &data.train)?;
                save_jsonl(&test, &data.test)?;
                Ok(())
            })()
        }
    };
    result.map_err(Failure::Runtime)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            eprintln!("run `stprune --help` for usage");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
