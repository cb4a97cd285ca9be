//! Ablation studies: ACs budget and PCA base sweeps, the activity loss,
//! threshold adaptation at reduced timesteps and sequential versus joint
//! pruning. Each study writes CSV rows into an output directory.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{invalid, Error, Result};
use crate::model::Checkpoint;
use crate::pipeline::{
    evaluate, load_datasets, prune_spatial, prune_temporal, retrain, run_pipeline, stage_config, train_baseline,
    Datasets, EvalReport, RetrainStage,
};
use crate::report::{render_histories, write_history, write_rows};
use crate::temporal::scale_plan;
use crate::trainer::{EpochRecord, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Study {
    Constraints,
    Bases,
    Activity,
    Thresholds,
    Joint,
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constraints" => Ok(Self::Constraints),
            "bases" => Ok(Self::Bases),
            "activity" => Ok(Self::Activity),
            "thresholds" => Ok(Self::Thresholds),
            "joint" => Ok(Self::Joint),
            _ => Err(invalid(format!(
                "unknown study `{s}` (expected constraints, bases, activity, thresholds or joint)"
            ))),
        }
    }
}

pub const CONSTRAINTS: [f64; 5] = [0.4, 0.5, 0.6, 0.7, 0.8];
pub const BASES: [f64; 5] = [1.02, 1.05, 1.1, 1.2, 1.5];
pub const RHOS: [f64; 3] = [1.0, 0.5, 0.25];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRow {
    pub constraint: f64,
    pub acs_ratio: f64,
    pub pruned_accuracy: f64,
    pub retrained_accuracy: f64,
}

/// Spatial pruning of one baseline at each budget, before and after
/// retraining.
pub fn sweep_constraints(
    config: &ExperimentConfig,
    data: &Datasets,
    base: &Checkpoint,
    constraints: &[f64],
) -> Result<Vec<ConstraintRow>> {
    let calib = data.calibration(config.calib_size);
    constraints
        .iter()
        .map(|&c| {
            let (pruned, _) = prune_spatial(base, calib, c, config.baseline.batch_size)?;
            let pruned_eval = evaluate(&pruned, &data.test, config.seed)?;
            let tc = TrainConfig {
                budget: Some(c),
                ..stage_config(config, RetrainStage::Spatial)
            };
            let (re, _) = retrain(&pruned, data, config.calib_size, &tc)?;
            let eval = evaluate(&re, &data.test, config.seed)?;
            Ok(ConstraintRow {
                constraint: c,
                acs_ratio: eval.acs_ratio,
                pruned_accuracy: pruned_eval.accuracy,
                retrained_accuracy: eval.accuracy,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseRow {
    pub base: f64,
    pub mean_timesteps: f64,
    pub acs_ratio: f64,
    pub accuracy: f64,
}

/// Temporal pruning of one checkpoint at each PCA base, without retraining.
pub fn sweep_bases(config: &ExperimentConfig, data: &Datasets, ckpt: &Checkpoint, bases: &[f64]) -> Result<Vec<BaseRow>> {
    let calib = data.calibration(config.calib_size);
    bases
        .iter()
        .map(|&b| {
            let (pruned, rep) = prune_temporal(ckpt, calib, b, config.model.variance_threshold)?;
            let eval = evaluate(&pruned, &data.test, config.seed)?;
            Ok(BaseRow {
                base: b,
                mean_timesteps: rep.mean_timesteps,
                acs_ratio: eval.acs_ratio,
                accuracy: eval.accuracy,
            })
        })
        .collect()
}

/// Retraining runs of one checkpoint that differ only in the activity weight.
#[derive(Clone, Debug)]
pub struct ActivityRun {
    pub eta: f64,
    pub history: Vec<EpochRecord>,
    pub eval: EvalReport,
}

/// Retrains `ckpt` for `epochs` with masks and plan fixed, once per `eta`.
pub fn activity_comparison(
    config: &ExperimentConfig,
    data: &Datasets,
    ckpt: &Checkpoint,
    etas: &[f64],
    epochs: usize,
) -> Result<Vec<ActivityRun>> {
    etas.iter()
        .map(|&eta| {
            let tc = TrainConfig {
                eta,
                epochs,
                pca_interval: 0,
                ..stage_config(config, RetrainStage::Temporal)
            };
            let (re, history) = retrain(ckpt, data, config.calib_size, &tc)?;
            Ok(ActivityRun {
                eta,
                history,
                eval: evaluate(&re, &data.test, config.seed)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub rho: f64,
    pub mean_timesteps: f64,
    /// Accuracy at the unscaled plan.
    pub reference_accuracy: f64,
    /// Accuracy at the scaled plan with the trained thresholds kept.
    pub fixed_accuracy: f64,
    /// Accuracy at the scaled plan after retraining weights together with
    /// adaptive thresholds.
    pub adapted_accuracy: f64,
    /// Accuracy at the scaled plan after retraining the thresholds alone.
    pub threshold_only_accuracy: f64,
}

impl ThresholdRow {
    /// Share of the accuracy lost by scaling that adaptation won back; 1
    /// when nothing was lost.
    pub fn recovered(&self) -> f64 {
        let lost = self.reference_accuracy - self.fixed_accuracy;
        if lost <= 0.0 {
            1.0
        } else {
            (self.adapted_accuracy - self.fixed_accuracy) / lost
        }
    }
}

/// Retraining at a scaled plan with adaptive thresholds: masks and plan stay
/// fixed and no penalties apply. With `weights` false only the thresholds
/// move.
pub fn threshold_config(config: &ExperimentConfig, epochs: usize, weights: bool) -> TrainConfig {
    TrainConfig {
        epochs,
        train_weights: weights,
        train_masks: false,
        train_thresholds: true,
        lambda: 0.0,
        eta: 0.0,
        penalty_epochs: 0,
        pca_interval: 0,
        budget: None,
        timestep_aware: true,
        ..stage_config(config, RetrainStage::Temporal)
    }
}

/// Scales the plan of `ckpt` by `rho`, then compares fixed thresholds with
/// both kinds of adaptive retraining on the test set.
pub fn threshold_compensation(
    config: &ExperimentConfig,
    data: &Datasets,
    ckpt: &Checkpoint,
    rho: f64,
    epochs: usize,
) -> Result<ThresholdRow> {
    let reference = evaluate(ckpt, &data.test, config.seed)?;
    let scaled = Checkpoint {
        plan: scale_plan(&ckpt.plan, rho)?,
        ..ckpt.clone()
    };
    let fixed = evaluate(&scaled, &data.test, config.seed)?;
    let adapt = |weights: bool| -> Result<f64> {
        let tc = threshold_config(config, epochs, weights);
        let (adapted, _) = retrain(&scaled, data, config.calib_size, &tc)?;
        Ok(evaluate(&adapted, &data.test, config.seed)?.accuracy)
    };
    let adapted_accuracy = adapt(true)?;
    let threshold_only_accuracy = adapt(false)?;
    Ok(ThresholdRow {
        rho,
        mean_timesteps: scaled.plan.mean_timesteps(),
        reference_accuracy: reference.accuracy,
        fixed_accuracy: fixed.accuracy,
        adapted_accuracy,
        threshold_only_accuracy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: String,
    pub accuracy: f64,
    pub acs_ratio: f64,
    pub normalized_c: f64,
    pub mean_timesteps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct EvalLayerRow {
    run: String,
    layer: usize,
    asr: f64,
}

/// Runs `study` from a fresh baseline and returns the files written.
pub fn run_study(config: &ExperimentConfig, study: Study, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let data = load_datasets(config)?;
    let mut written = Vec::new();
    if study == Study::Joint {
        let mut rows = Vec::new();
        for (mode, joint) in [("sequential", false), ("joint", true)] {
            let run = run_pipeline(config, &data, joint)?;
            let (_, e) = run.evals.last().expect("the pipeline evaluates its result");
            rows.push(ModeRow {
                mode: mode.to_string(),
                accuracy: e.accuracy,
                acs_ratio: e.acs_ratio,
                normalized_c: e.normalized_c,
                mean_timesteps: e.mean_timesteps,
            });
        }
        let p = dir.join("joint.csv");
        write_rows(&p, &rows)?;
        written.push(p);
        return Ok(written);
    }
    let (base, _) = train_baseline(config, &data)?;
    match study {
        Study::Constraints => {
            let p = dir.join("constraints.csv");
            write_rows(&p, &sweep_constraints(config, &data, &base, &CONSTRAINTS)?)?;
            written.push(p);
        }
        Study::Bases => {
            let p = dir.join("bases.csv");
            write_rows(&p, &sweep_bases(config, &data, &base, &BASES)?)?;
            written.push(p);
        }
        Study::Activity => {
            let etas = [0.0, config.retrain.eta];
            let runs = activity_comparison(config, &data, &base, &etas, config.retrain.epochs)?;
            let mut labelled = Vec::new();
            let mut layers = Vec::new();
            for r in &runs {
                let label = format!("eta={}", r.eta);
                let p = dir.join(format!("activity_eta_{}.csv", r.eta));
                write_history(&p, &r.history)?;
                written.push(p);
                for (l, &asr) in r.eval.layer_asr.iter().enumerate() {
                    layers.push(EvalLayerRow {
                        run: label.clone(),
                        layer: l + 1,
                        asr,
                    });
                }
                labelled.push((label, r.history.clone()));
            }
            let p = dir.join("activity_eval.csv");
            write_rows(&p, &layers)?;
            written.push(p);
            written.extend(render_histories(&labelled, dir)?);
        }
        Study::Thresholds => {
            let rows = RHOS
                .iter()
                .map(|&rho| threshold_compensation(config, &data, &base, rho, config.retrain.epochs))
                .collect::<Result<Vec<_>>>()?;
            let p = dir.join("thresholds.csv");
            write_rows(&p, &rows)?;
            written.push(p);
        }
        Study::Joint => unreachable!("handled above"),
    }
    Ok(written)
}
