//! The two-stage pruning pipeline as composable stages: baseline training,
//! spatial pruning, temporal pruning, retraining and evaluation.

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::cost::{acs_total, normalized_c, sublayer_labels, sublayer_mean_rates, AcsReport};
use crate::data::{gen_keyword_task, load_jsonl, Example};
use crate::engine::{run_sequential, run_unrolled, Record, TimestepPlan};
use crate::error::{invalid, Result};
use crate::importance::{asr_factors, combine, fisher_diagonal, ImportanceScores};
use crate::model::{init_model, Checkpoint, MaskSet, Sublayer};
use crate::numerics::{Matrix, RandomStream};
use crate::spatial::{pruned_importance, refine_masks, select_masks, DEFAULT_MAX_ITERS};
use crate::trainer::{reallocate_plan, train, EpochRecord, TrainConfig};

#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl Datasets {
    /// The first `calib_size` training examples.
    pub fn calibration(&self, calib_size: usize) -> &[Example] {
        &self.train[..calib_size.min(self.train.len())]
    }
}

/// Loads the configured files, or generates the keyword task from the seed.
pub fn load_datasets(config: &ExperimentConfig) -> Result<Datasets> {
    let root = RandomStream::new(config.seed);
    let gen = |n: usize, stream: u64| {
        gen_keyword_task(
            config.model.vocab_size,
            config.model.seq_len,
            n,
            &mut root.derive(stream),
        )
    };
    let train = match &config.train_data {
        Some(p) => load_jsonl(p, &config.model)?,
        None => gen(config.train_size, 1)?,
    };
    let test = match &config.test_data {
        Some(p) => load_jsonl(p, &config.model)?,
        None => gen(config.test_size, 2)?,
    };
    if train.is_empty() {
        return Err(invalid("the training set is empty"));
    }
    Ok(Datasets { train, test })
}

/// Trains an unpruned model at uniform `T_conv`.
pub fn train_baseline(config: &ExperimentConfig, data: &Datasets) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    let model = init_model(&config.model, &mut RandomStream::new(config.seed).derive(3))?;
    let masks = MaskSet::ones_for(&model);
    let plan = TimestepPlan::uniform(config.model.num_layers, config.model.t_conv);
    let tc = TrainConfig {
        seed: config.seed,
        ..config.baseline.clone()
    };
    let out = train(&model, &masks, &plan, &data.train, data.calibration(config.calib_size), &tc)?;
    Ok((
        Checkpoint {
            model: out.model,
            masks: out.masks,
            plan: out.plan,
        },
        out.history,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialReport {
    pub constraint: f64,
    pub before: AcsReport,
    pub after: AcsReport,
    pub kept_heads: Vec<usize>,
    pub kept_neurons: Vec<usize>,
    /// Summed importance of the pruned units after refinement.
    pub pruned_importance: f64,
    /// The same sum for the greedy selection alone.
    pub greedy_pruned_importance: f64,
    pub scores: ImportanceScores,
}

/// Importance scores of every head and neuron of the unmasked model.
pub fn importance_scores(ckpt: &Checkpoint, calib: &[Example], batch_size: usize) -> Result<ImportanceScores> {
    if calib.is_empty() {
        return Err(invalid("spatial pruning needs calibration samples"));
    }
    let model = &ckpt.model;
    let ones = MaskSet::ones_for(model);
    let sims = calib
        .iter()
        .map(|ex| run_unrolled(model, &ones, &ex.tokens, model.config.t_conv, Record::Converged))
        .collect::<Result<Vec<_>>>()?;
    let batches: Vec<&[Example]> = calib.chunks(batch_size.max(1)).collect();
    combine(&fisher_diagonal(model, &batches)?, &asr_factors(model, &sims)?)
}

/// Post-training head and neuron selection under an ACs ratio budget.
pub fn prune_spatial(ckpt: &Checkpoint, calib: &[Example], constraint: f64, batch_size: usize) -> Result<(Checkpoint, SpatialReport)> {
    let cfg = &ckpt.model.config;
    let scores = importance_scores(ckpt, calib, batch_size)?;
    let greedy = select_masks(&scores, cfg, constraint)?;
    let masks = refine_masks(&greedy, &scores, cfg, constraint, DEFAULT_MAX_ITERS)?;
    let plan = TimestepPlan::uniform(cfg.num_layers, cfg.t_conv);
    let report = SpatialReport {
        constraint,
        before: acs_total(cfg, &MaskSet::ones(cfg), &plan)?,
        after: acs_total(cfg, &masks, &plan)?,
        kept_heads: (0..cfg.num_layers).map(|l| masks.active_heads(l)).collect(),
        kept_neurons: (0..cfg.num_layers).map(|l| masks.active_neurons(l)).collect(),
        pruned_importance: pruned_importance(&masks, &scores),
        greedy_pruned_importance: pruned_importance(&greedy, &scores),
        scores,
    };
    Ok((
        Checkpoint {
            model: ckpt.model.clone(),
            masks,
            plan,
        },
        report,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalReport {
    pub base: f64,
    pub variance_threshold: f64,
    pub sublayers: Vec<String>,
    pub components: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub mean_timesteps: f64,
    pub acs: AcsReport,
}

/// Post-training timestep allocation from unrolled `T_conv` traces.
pub fn prune_temporal(ckpt: &Checkpoint, calib: &[Example], base: f64, variance_threshold: f64) -> Result<(Checkpoint, TemporalReport)> {
    let (plan, c) = reallocate_plan(&ckpt.model, &ckpt.masks, calib, variance_threshold, base)?;
    let cfg = &ckpt.model.config;
    let report = TemporalReport {
        base,
        variance_threshold,
        sublayers: sublayer_labels(cfg.num_layers),
        components: c,
        timesteps: plan.flat(),
        mean_timesteps: plan.mean_timesteps(),
        acs: acs_total(cfg, &ckpt.masks, &plan)?,
    };
    Ok((
        Checkpoint {
            model: ckpt.model.clone(),
            masks: ckpt.masks.clone(),
            plan,
        },
        report,
    ))
}

/// Which retraining recipe to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrainStage {
    /// Masks train under the ACs penalty and budget; uniform timesteps.
    Spatial,
    /// Masks fixed; periodic reallocation and the activity loss.
    Temporal,
    /// Both at once, starting from the post-training result of both stages.
    Joint,
}

impl std::str::FromStr for RetrainStage {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Self::Spatial),
            "temporal" => Ok(Self::Temporal),
            "joint" => Ok(Self::Joint),
            _ => Err(invalid(format!("unknown retraining stage `{s}`"))),
        }
    }
}

/// The retraining schedule of `stage` derived from the configured one.
pub fn stage_config(config: &ExperimentConfig, stage: RetrainStage) -> TrainConfig {
    let base = TrainConfig {
        seed: config.seed,
        calibration_size: config.calib_size,
        ..config.retrain.clone()
    };
    match stage {
        RetrainStage::Spatial => TrainConfig {
            train_masks: true,
            budget: Some(config.acs_constraint),
            eta: 0.0,
            pca_interval: 0,
            ..base
        },
        RetrainStage::Temporal => TrainConfig {
            train_masks: false,
            budget: None,
            lambda: 0.0,
            penalty_epochs: 0,
            ..base
        },
        RetrainStage::Joint => TrainConfig {
            train_masks: true,
            budget: Some(config.acs_constraint),
            ..base
        },
    }
}

pub fn retrain(ckpt: &Checkpoint, data: &Datasets, calib_size: usize, tc: &TrainConfig) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    let out = train(
        &ckpt.model,
        &ckpt.masks,
        &ckpt.plan,
        &data.train,
        data.calibration(calib_size),
        tc,
    )?;
    Ok((
        Checkpoint {
            model: out.model,
            masks: out.masks,
            plan: out.plan,
        },
        out.history,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub accuracy: f64,
    pub acs_ratio: f64,
    pub normalized_c: f64,
    /// Mean timesteps across sublayers, the latency measure.
    pub mean_timesteps: f64,
    pub sublayer_rates: Vec<f64>,
    /// Mean output rate of each encoder layer.
    pub layer_asr: Vec<f64>,
}

/// Sequential simulation over `test`; example `i` draws from stream `i` of
/// `seed`, so results do not depend on batching.
pub fn evaluate(ckpt: &Checkpoint, test: &[Example], seed: u64) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(invalid("the test set is empty"));
    }
    let model = &ckpt.model;
    let root = RandomStream::new(seed);
    let mut correct = 0;
    let mut sums: Vec<Matrix> = Vec::new();
    for (i, ex) in test.iter().enumerate() {
        let sim = run_sequential(
            model,
            &ckpt.masks,
            &ckpt.plan,
            &ex.tokens,
            &mut root.derive(i as u64),
            Record::Converged,
        )?;
        correct += usize::from(sim.predicted_class() == ex.label);
        if sums.is_empty() {
            sums = sim.traces.iter().map(|t| Matrix::zeros(t.converged.rows(), t.converged.cols())).collect();
        }
        for (s, t) in sums.iter_mut().zip(&sim.traces) {
            s.add_assign(&t.converged);
        }
    }
    let inv = 1.0 / test.len() as f64;
    let means: Vec<Matrix> = sums.into_iter().map(|s| s.map(|v| v * inv)).collect();
    let rates = sublayer_mean_rates(&means, &ckpt.masks, model.head_dim())?;
    let acs = acs_total(&model.config, &ckpt.masks, &ckpt.plan)?;
    let weights: Vec<f64> = acs.sublayer_acs.iter().map(|&v| v as f64).collect();
    let out = Sublayer::Output.index();
    Ok(EvalReport {
        examples: test.len(),
        accuracy: correct as f64 * inv,
        acs_ratio: acs.ratio,
        normalized_c: normalized_c(&rates, &weights)?,
        mean_timesteps: ckpt.plan.mean_timesteps(),
        layer_asr: (0..model.layers.len()).map(|l| rates[6 * l + out]).collect(),
        sublayer_rates: rates,
    })
}

/// Artifacts of a full run.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub baseline: Checkpoint,
    pub spatial: Checkpoint,
    pub temporal: Checkpoint,
    pub spatial_report: SpatialReport,
    pub temporal_report: TemporalReport,
    pub histories: Vec<(String, Vec<EpochRecord>)>,
    pub evals: Vec<(String, EvalReport)>,
}

/// Baseline, then spatial pruning and retraining, then temporal pruning and
/// retraining, evaluating after each retraining. With `joint`, both pruning
/// steps run post-training and a single retraining follows.
pub fn run_pipeline(config: &ExperimentConfig, data: &Datasets, joint: bool) -> Result<PipelineRun> {
    let calib = data.calibration(config.calib_size);
    let bs = config.baseline.batch_size;
    let (base, h0) = train_baseline(config, data)?;
    let mut evals = vec![("baseline".to_string(), evaluate(&base, &data.test, config.seed)?)];
    let mut histories = vec![("baseline".to_string(), h0)];
    let (pruned, spatial_report) = prune_spatial(&base, calib, config.acs_constraint, bs)?;
    let (spatial, temporal, temporal_report) = if joint {
        let (both, tr) = prune_temporal(&pruned, calib, config.model.pca_base, config.model.variance_threshold)?;
        let (joint_ckpt, h) = retrain(&both, data, config.calib_size, &stage_config(config, RetrainStage::Joint))?;
        histories.push(("joint".to_string(), h));
        (pruned, joint_ckpt, tr)
    } else {
        let (spatial, h1) = retrain(&pruned, data, config.calib_size, &stage_config(config, RetrainStage::Spatial))?;
        histories.push(("spatial".to_string(), h1));
        evals.push(("spatial".to_string(), evaluate(&spatial, &data.test, config.seed)?));
        let (tp, tr) = prune_temporal(&spatial, calib, config.model.pca_base, config.model.variance_threshold)?;
        let (temporal, h2) = retrain(&tp, data, config.calib_size, &stage_config(config, RetrainStage::Temporal))?;
        histories.push(("temporal".to_string(), h2));
        (spatial, temporal, tr)
    };
    evals.push((
        if joint { "joint" } else { "temporal" }.to_string(),
        evaluate(&temporal, &data.test, config.seed)?,
    ));
    Ok(PipelineRun {
        baseline: base,
        spatial,
        temporal,
        spatial_report,
        temporal_report,
        histories,
        evals,
    })
}
