//! Training and retraining on the rate proxy.
//!
//! The loss is cross-entropy plus `λ` times the ACs of the relaxed masks plus
//! `η` times the summed 2-norms of every encoder layer's output rates. Masks
//! are parametrized as `σ(κ·z)`; the forward pass sees them thresholded at
//! 0.5 and the backward pass goes through the sigmoid.

use serde::{Deserialize, Serialize};

use crate::cost::{acs_total, fractional_acs, normalized_c, sublayer_mean_rates};
use crate::data::{batches, Example};
use crate::engine::{
    argmax, proxy_backward, proxy_forward_tape, run_unrolled, Gradients, Record, Resampler,
    TimestepPlan,
};
use crate::error::{invalid, Error, Result};
use crate::model::{MaskMode, MaskSet, MaskValues, RelaxedMasks, SpikingModel, Sublayer};
use crate::numerics::{finite_difference_gradient, Matrix, RandomStream};
use crate::temporal::{allocate_timesteps, layer_importance, mean_history, scale_plan};

pub const VTH_FLOOR: f64 = 1e-3;

/// Softmax cross-entropy of one example and its gradient on the logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(invalid(format!("label {label} outside {} classes", logits.len())));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    let grad = logits
        .iter()
        .enumerate()
        .map(|(i, v)| (v - lse).exp() - if i == label { 1.0 } else { 0.0 })
        .collect();
    Ok((lse - logits[label], grad))
}

/// Update rule shared by every trained parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// `v ← μv + g`, `p ← p − lr·v`.
    Momentum,
    /// Bias-corrected Adam with `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8`.
    /// Mask logits still take momentum steps so that `λ` keeps its scale.
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "momentum" | "sgd" => Ok(Self::Momentum),
            "adam" => Ok(Self::Adam),
            _ => Err(invalid(format!("unknown optimizer `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub eta: f64,
    pub learning_rate: f64,
    /// Step size of the mask logits.
    pub mask_learning_rate: f64,
    /// Step size of the firing thresholds.
    pub threshold_learning_rate: f64,
    pub optimizer: Optimizer,
    pub momentum: f64,
    pub epochs: usize,
    /// The ACs penalty is applied while `epoch < penalty_epochs`.
    pub penalty_epochs: usize,
    /// Epochs between timestep reallocations; 0 disables reallocation.
    pub pca_interval: usize,
    /// Sigmoid sharpness κ.
    pub temperature: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// When set, masks are kept within this ACs ratio after every step.
    pub budget: Option<f64>,
    pub pca_base: f64,
    pub variance_threshold: f64,
    /// Multiplier applied to reallocated plans.
    pub rho: f64,
    pub train_weights: bool,
    pub train_masks: bool,
    pub train_thresholds: bool,
    /// Let the proxy see the plan's finite timesteps.
    pub timestep_aware: bool,
    /// Calibration samples used for reallocation and history metrics.
    pub calibration_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            eta: 0.0,
            learning_rate: 0.003,
            mask_learning_rate: 0.05,
            threshold_learning_rate: 0.003,
            optimizer: Optimizer::Adam,
            momentum: 0.9,
            epochs: 10,
            penalty_epochs: 0,
            pca_interval: 2,
            temperature: 10.0,
            seed: 0,
            batch_size: 16,
            budget: None,
            pca_base: 1.02,
            variance_threshold: 0.99999,
            rho: 1.0,
            train_weights: true,
            train_masks: false,
            train_thresholds: true,
            timestep_aware: false,
            calibration_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.penalty_epochs > self.epochs {
            return Err(invalid("penalty_epochs may not exceed epochs"));
        }
        if !(self.temperature > 0.0) {
            return Err(invalid("temperature must be positive"));
        }
        if self.lambda < 0.0 || self.eta < 0.0 {
            return Err(invalid("lambda and eta must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(invalid("rho must lie in (0, 1]"));
        }
        if !(self.pca_base > 1.0) {
            return Err(invalid("pca_base must be greater than 1"));
        }
        Ok(())
    }
}

/// The three loss terms before weighting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub pred: f64,
    /// ACs of the relaxed masks under the plan.
    pub acs: f64,
    /// Σ over encoder layers of the 2-norm of the output rates.
    pub activity: f64,
}

/// `L_pred + λ·M + η·L_S`.
pub fn total_loss(terms: &LossTerms, lambda: f64, eta: f64) -> f64 {
    terms.pred + lambda * terms.acs + eta * terms.activity
}

/// Σ_l ‖a_l‖₂ and its gradient on each layer's rates.
pub fn activity_loss(outputs: &[&Matrix]) -> (f64, Vec<Matrix>) {
    let mut total = 0.0;
    let grads = outputs
        .iter()
        .map(|a| {
            let norm = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            total += norm;
            if norm > 0.0 {
                a.map(|v| v / norm)
            } else {
                Matrix::zeros(a.rows(), a.cols())
            }
        })
        .collect();
    (total, grads)
}

/// Loss and gradients of one batch.
#[derive(Clone, Debug)]
pub struct BatchResult {
    pub terms: LossTerms,
    pub loss: f64,
    /// Gradients of the total loss; mask entries are with respect to the
    /// mask values.
    pub grads: Gradients,
    pub correct: usize,
}

/// Mean loss over `batch`. `forward` masks enter the proxy; `relaxed` masks
/// enter the ACs term.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    model: &SpikingModel,
    forward: &MaskValues,
    relaxed: &MaskValues,
    plan: &TimestepPlan,
    batch: &[Example],
    lambda: f64,
    eta: f64,
    mut resampler: Option<&mut Resampler>,
) -> Result<BatchResult> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let inv = 1.0 / batch.len() as f64;
    let mut grads = Gradients::zeros(model);
    let mut pred = 0.0;
    let mut activity = 0.0;
    let mut correct = 0;
    for ex in batch {
        let x0 = model.encode_input(&ex.tokens)?;
        let tape = proxy_forward_tape(model, forward, &x0, resampler.as_deref_mut());
        let (ce, mut d) = cross_entropy(&tape.logits, ex.label)?;
        pred += ce * inv;
        correct += usize::from(argmax(&tape.logits) == ex.label);
        d.iter_mut().for_each(|g| *g *= inv);
        let extra: Vec<Option<Matrix>> = if eta > 0.0 {
            let outs: Vec<&Matrix> = tape.layers.iter().map(|l| &l.a6).collect();
            let (s, g) = activity_loss(&outs);
            activity += s * inv;
            g.into_iter().map(|m| Some(m.map(|v| v * eta * inv))).collect()
        } else {
            let outs: Vec<&Matrix> = tape.layers.iter().map(|l| &l.a6).collect();
            activity += activity_loss(&outs).0 * inv;
            Vec::new()
        };
        proxy_backward(model, forward, &tape, &d, &extra, &mut grads);
    }
    let (acs, dh, dn) = fractional_acs(&model.config, relaxed, plan);
    if lambda > 0.0 {
        for (g, c) in grads.heads.iter_mut().zip(&dh).chain(grads.neurons.iter_mut().zip(&dn)) {
            for (a, b) in g.iter_mut().zip(c) {
                *a += lambda * b;
            }
        }
    }
    let terms = LossTerms { pred, acs, activity };
    Ok(BatchResult {
        terms,
        loss: total_loss(&terms, lambda, eta),
        grads,
        correct,
    })
}

fn flatten(model: &SpikingModel, mv: &MaskValues) -> Vec<f64> {
    let mut v = Vec::new();
    for l in &model.layers {
        for t in l.tensors() {
            v.extend_from_slice(t);
        }
    }
    v.extend_from_slice(model.classifier.data());
    v.extend_from_slice(&model.classifier_bias);
    for m in mv.heads.iter().chain(&mv.neurons) {
        v.extend_from_slice(m);
    }
    v
}

fn flatten_grads(g: &Gradients) -> Vec<f64> {
    let mut v = Vec::new();
    for l in &g.layers {
        for t in l.tensors() {
            v.extend_from_slice(t);
        }
    }
    v.extend_from_slice(g.classifier.data());
    v.extend_from_slice(&g.classifier_bias);
    for m in g.heads.iter().chain(&g.neurons) {
        v.extend_from_slice(m);
    }
    v
}

fn unflatten(model: &mut SpikingModel, mv: &mut MaskValues, flat: &[f64]) {
    let mut it = flat.iter().copied();
    for l in &mut model.layers {
        for t in l.tensors_mut() {
            t.iter_mut().for_each(|p| *p = it.next().expect("length"));
        }
    }
    for p in model.classifier.data_mut().iter_mut().chain(model.classifier_bias.iter_mut()) {
        *p = it.next().expect("length");
    }
    for m in mv.heads.iter_mut().chain(mv.neurons.iter_mut()) {
        m.iter_mut().for_each(|p| *p = it.next().expect("length"));
    }
}

/// Largest relative difference `|g − f| / max(|g|, |f|, 1e-6)` between the
/// analytic gradient of the total loss and central finite differences
/// (`eps = 1e-5`), over every weight, bias, threshold and relaxed mask value.
pub fn gradcheck(
    model: &SpikingModel,
    masks: &MaskSet,
    plan: &TimestepPlan,
    batch: &[Example],
    lambda: f64,
    eta: f64,
) -> Result<f64> {
    masks.check_against(model)?;
    let mv = masks.values(MaskMode::Relaxed);
    let analytic = flatten_grads(&batch_loss(model, &mv, &mv, plan, batch, lambda, eta, None)?.grads);
    let x = flatten(model, &mv);
    let xm = Matrix::from_vec(1, x.len(), x)?;
    let numeric = finite_difference_gradient(
        |p: &Matrix| {
            let mut m = model.clone();
            let mut v = mv.clone();
            unflatten(&mut m, &mut v, p.data());
            Ok(batch_loss(&m, &v, &v, plan, batch, lambda, eta, None)?.loss)
        },
        &xm,
        1e-5,
    )?;
    Ok(analytic
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max))
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Training accuracy over the epoch's batches.
    pub accuracy: f64,
    pub acs_ratio: f64,
    pub normalized_c: f64,
    pub mean_timesteps: f64,
    /// Mean output rate of every encoder layer on the calibration samples.
    pub layer_asr: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SpikingModel,
    pub masks: MaskSet,
    pub plan: TimestepPlan,
    pub history: Vec<EpochRecord>,
}

struct OptimizerState {
    kind: Optimizer,
    momentum: f64,
    lr: Vec<f64>,
    /// Parameters from this index on are mask logits.
    mask_start: usize,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

impl OptimizerState {
    /// Learning rates follow the `flatten` layout.
    fn new(cfg: &TrainConfig, model: &SpikingModel, masks: &MaskSet) -> Self {
        let weight = if cfg.train_weights { cfg.learning_rate } else { 0.0 };
        let vth = if cfg.train_thresholds { cfg.threshold_learning_rate } else { 0.0 };
        let mask = if cfg.train_masks { cfg.mask_learning_rate } else { 0.0 };
        let mut lr = Vec::new();
        for layer in &model.layers {
            let tensors = layer.tensors();
            let last = tensors.len() - 1;
            for (k, t) in tensors.iter().enumerate() {
                lr.extend(std::iter::repeat_n(if k == last { vth } else { weight }, t.len()));
            }
        }
        lr.extend(std::iter::repeat_n(weight, model.classifier.len() + model.classifier_bias.len()));
        let mask_start = lr.len();
        let units: usize = masks.heads.iter().chain(&masks.neurons).map(Vec::len).sum();
        lr.extend(std::iter::repeat_n(mask, units));
        Self {
            kind: cfg.optimizer,
            momentum: cfg.momentum,
            mask_start,
            first: vec![0.0; lr.len()],
            second: vec![0.0; lr.len()],
            lr,
            steps: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.steps += 1;
        let adam_end = match self.kind {
            Optimizer::Momentum => 0,
            Optimizer::Adam => self.mask_start,
        };
        for i in adam_end..params.len() {
            let v = &mut self.first[i];
            *v = self.momentum * *v + grads[i];
            params[i] -= self.lr[i] * *v;
        }
        match self.kind {
            Optimizer::Momentum => {}
            Optimizer::Adam => {
                let (b1, b2) = (0.9f64, 0.999f64);
                let c1 = 1.0 - b1.powi(self.steps);
                let c2 = 1.0 - b2.powi(self.steps);
                for (i, (p, g)) in params[..adam_end].iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first[i];
                    let v = &mut self.second[i];
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= self.lr[i] * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
                }
            }
        }
    }
}

struct MaskLogits {
    heads: Vec<Vec<f64>>,
    neurons: Vec<Vec<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl MaskLogits {
    fn from_masks(masks: &MaskSet, kappa: f64) -> Self {
        let init = |bits: &Vec<Vec<bool>>, rel: Option<&Vec<Vec<f64>>>| -> Vec<Vec<f64>> {
            bits.iter()
                .enumerate()
                .map(|(l, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(i, &b)| match rel {
                            Some(r) => {
                                let m = r[l][i].clamp(1e-6, 1.0 - 1e-6);
                                (m / (1.0 - m)).ln() / kappa
                            }
                            None => {
                                if b {
                                    0.3
                                } else {
                                    -0.3
                                }
                            }
                        })
                        .collect()
                })
                .collect()
        };
        Self {
            heads: init(&masks.heads, masks.relaxed.as_ref().map(|r| &r.heads)),
            neurons: init(&masks.neurons, masks.relaxed.as_ref().map(|r| &r.neurons)),
        }
    }

    fn relaxed(&self, kappa: f64) -> RelaxedMasks {
        let f = |v: &Vec<Vec<f64>>| v.iter().map(|r| r.iter().map(|z| sigmoid(kappa * z)).collect()).collect();
        RelaxedMasks {
            heads: f(&self.heads),
            neurons: f(&self.neurons),
        }
    }

    fn masks(&self, kappa: f64) -> MaskSet {
        let bits = |v: &Vec<Vec<f64>>| v.iter().map(|r| r.iter().map(|&z| z >= 0.0).collect()).collect();
        MaskSet {
            heads: bits(&self.heads),
            neurons: bits(&self.neurons),
            relaxed: Some(self.relaxed(kappa)),
        }
    }

    /// Revives the most confident unit of any layer left without a head or
    /// without a neuron.
    fn enforce_floor(&mut self) {
        for row in self.heads.iter_mut().chain(self.neurons.iter_mut()) {
            if row.iter().all(|&z| z < 0.0) {
                let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)));
                if let Some(i) = best {
                    row[i] = 0.01;
                }
            }
        }
    }

    /// Prunes the least confident kept units until the hardened masks meet
    /// `budget`, keeping one head and one neuron per layer.
    fn enforce_budget(&mut self, model: &SpikingModel, plan: &TimestepPlan, budget: f64) -> Result<()> {
        loop {
            let m = self.masks(1.0).hardened();
            let ratio = acs_total(&model.config, &m, plan)?.ratio;
            if ratio <= budget {
                return Ok(());
            }
            let mut best: Option<(f64, bool, usize, usize)> = None;
            for (is_head, rows) in [(true, &self.heads), (false, &self.neurons)] {
                for (l, row) in rows.iter().enumerate() {
                    let kept = row.iter().filter(|&&z| z >= 0.0).count();
                    if kept <= 1 {
                        continue;
                    }
                    for (i, &z) in row.iter().enumerate() {
                        if z >= 0.0 && best.is_none_or(|b| z < b.0) {
                            best = Some((z, is_head, l, i));
                        }
                    }
                }
            }
            let Some((_, is_head, l, i)) = best else {
                return Err(Error::Infeasible("masks cannot meet the budget during retraining".into()));
            };
            let z = if is_head { &mut self.heads[l][i] } else { &mut self.neurons[l][i] };
            *z = -0.01;
        }
    }
}

/// Per-sublayer mean rates and encoder-output rates of the proxy on `calib`.
fn calibration_rates(model: &SpikingModel, masks: &MaskSet, calib: &[Example]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mv = masks.values(MaskMode::Binary);
    let l = model.layers.len();
    let mut sums: Vec<Matrix> = Vec::new();
    for ex in calib {
        let x0 = model.encode_input(&ex.tokens)?;
        let tape = proxy_forward_tape(model, &mv, &x0, None);
        let rates: Vec<&Matrix> = tape.layers.iter().flat_map(|t| t.rates()).collect();
        if sums.is_empty() {
            sums = rates.iter().map(|r| Matrix::zeros(r.rows(), r.cols())).collect();
        }
        for (s, r) in sums.iter_mut().zip(rates) {
            s.add_assign(r);
        }
    }
    let inv = 1.0 / calib.len().max(1) as f64;
    let means: Vec<Matrix> = sums.into_iter().map(|s| s.map(|v| v * inv)).collect();
    let sub = sublayer_mean_rates(&means, masks, model.head_dim())?;
    let layer = (0..l).map(|i| sub[i * 6 + Sublayer::Output.index()]).collect();
    Ok((sub, layer))
}

/// Recomputes the plan from unrolled `T_conv` traces averaged over `calib`.
pub fn reallocate_plan(
    model: &SpikingModel,
    masks: &MaskSet,
    calib: &[Example],
    variance_threshold: f64,
    base: f64,
) -> Result<(TimestepPlan, Vec<usize>)> {
    if calib.is_empty() {
        return Err(invalid("timestep reallocation needs calibration samples"));
    }
    let t_conv = model.config.t_conv;
    let sims = calib
        .iter()
        .map(|ex| run_unrolled(model, masks, &ex.tokens, t_conv, Record::History))
        .collect::<Result<Vec<_>>>()?;
    let mut averaged = sims[0].traces.clone();
    for (i, tr) in averaged.iter_mut().enumerate() {
        let hs: Vec<&Matrix> = sims.iter().map(|s| s.traces[i].history.as_ref().expect("recorded")).collect();
        tr.history = Some(mean_history(&hs)?);
    }
    let c = layer_importance(&averaged, variance_threshold)?;
    Ok((allocate_timesteps(&c, base, t_conv)?, c))
}

fn calibration_slice<'a>(data: &'a [Example], calib: &'a [Example], n: usize) -> &'a [Example] {
    let src = if calib.is_empty() { data } else { calib };
    &src[..n.min(src.len())]
}

/// Gradient descent on weights, mask logits and thresholds.
pub fn train(
    model: &SpikingModel,
    masks: &MaskSet,
    plan: &TimestepPlan,
    data: &[Example],
    calib: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    masks.check_against(model)?;
    plan.validate(model.layers.len(), model.config.t_conv)?;
    for ex in data {
        ex.validate(&model.config)?;
    }
    let mut model = model.clone();
    let mut plan = plan.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            masks: masks.clone(),
            plan,
            history,
        });
    }
    if data.is_empty() {
        return Err(invalid("no training data"));
    }
    let kappa = cfg.temperature;
    let mut logits = MaskLogits::from_masks(masks, kappa);
    let mut optimizer = OptimizerState::new(cfg, &model, masks);
    let calib = calibration_slice(data, calib, cfg.calibration_size);
    let root = RandomStream::new(cfg.seed);
    let mut resampler = Resampler {
        plan: plan.clone(),
        stream: root.derive(1),
    };

    for epoch in 0..cfg.epochs {
        let lambda = if epoch < cfg.penalty_epochs { cfg.lambda } else { 0.0 };
        let mut order_stream = root.derive(1000 + epoch as u64);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut seen = 0;
        for idx in batches(data.len(), cfg.batch_size, Some(&mut order_stream)) {
            let batch: Vec<Example> = idx.iter().map(|&i| data[i].clone()).collect();
            let current = logits.masks(kappa);
            let forward = if cfg.train_masks {
                current.values(MaskMode::Binary)
            } else {
                masks.values(MaskMode::Binary)
            };
            let relaxed = current.values(MaskMode::Relaxed);
            resampler.plan = plan.clone();
            let rs = cfg.timestep_aware.then_some(&mut resampler);
            let res = batch_loss(&model, &forward, &relaxed, &plan, &batch, lambda, cfg.eta, rs)?;
            if !res.loss.is_finite() || !res.grads.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("loss {} with non-finite gradients or value", res.loss),
                });
            }
            loss_sum += res.loss * batch.len() as f64;
            correct += res.correct;
            seen += batch.len();

            let mut grads = res.grads;
            if cfg.train_masks {
                // dL/dz = dL/dm · κσ(1 − σ)
                let rel = logits.relaxed(kappa);
                for (gs, ms) in grads
                    .heads
                    .iter_mut()
                    .zip(&rel.heads)
                    .chain(grads.neurons.iter_mut().zip(&rel.neurons))
                {
                    for (g, m) in gs.iter_mut().zip(ms) {
                        *g *= kappa * m * (1.0 - m);
                    }
                }
            }
            let mut z = MaskValues {
                heads: std::mem::take(&mut logits.heads),
                neurons: std::mem::take(&mut logits.neurons),
            };
            let mut params = flatten(&model, &z);
            optimizer.step(&mut params, &flatten_grads(&grads));
            unflatten(&mut model, &mut z, &params);
            logits.heads = z.heads;
            logits.neurons = z.neurons;
            model.clamp_thresholds(VTH_FLOOR);
            if cfg.train_masks {
                logits.enforce_floor();
            }
            if let Some(b) = cfg.budget.filter(|_| cfg.train_masks) {
                logits.enforce_budget(&model, &plan, b)?;
            }
        }

        let current = if cfg.train_masks { logits.masks(kappa).hardened() } else { masks.hardened() };
        if cfg.pca_interval > 0 && (epoch + 1) % cfg.pca_interval == 0 {
            let (p, _) = reallocate_plan(&model, &current, calib, cfg.variance_threshold, cfg.pca_base)?;
            plan = scale_plan(&p, cfg.rho)?;
        }
        let report = acs_total(&model.config, &current, &plan)?;
        let (sub_rates, layer_asr) = calibration_rates(&model, &current, calib)?;
        let acs: Vec<f64> = report.sublayer_acs.iter().map(|&v| v as f64).collect();
        history.push(EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
            acs_ratio: report.ratio,
            normalized_c: normalized_c(&sub_rates, &acs)?,
            mean_timesteps: plan.mean_timesteps(),
            layer_asr,
        });
    }
    let out_masks = if cfg.train_masks { logits.masks(kappa).hardened() } else { masks.hardened() };
    Ok(TrainOutcome {
        model,
        masks: out_masks,
        plan,
        history,
    })
}
