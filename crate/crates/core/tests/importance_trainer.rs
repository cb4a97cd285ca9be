//! Importance estimation and training on small models, checked against
//! finite differences and hand-built cases.

use stprune::data::{gen_keyword_task, Example};
use stprune::engine::{run_sequential, run_unrolled, Record, TimestepPlan};
use stprune::importance::{asr_factors, combine, fisher_diagonal, AsrAccumulator, UnitValues};
use stprune::model::{init_model, MaskMode, MaskSet, ModelConfig, RelaxedMasks, SpikingModel};
use stprune::numerics::RandomStream;
use stprune::trainer::{batch_loss, cross_entropy, total_loss, train, LossTerms, Optimizer, TrainConfig};

fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden_size: 8,
        num_heads: 4,
        intermediate_size: 6,
        seq_len: 6,
        vocab_size: 10,
        t_conv: 20,
        ..ModelConfig::toy()
    }
}

fn tiny(seed: u64) -> SpikingModel {
    init_model(&tiny_config(), &mut RandomStream::new(seed)).unwrap()
}

fn examples(n: usize, seed: u64) -> Vec<Example> {
    gen_keyword_task(10, 6, n, &mut RandomStream::new(seed)).unwrap()
}

#[test]
fn disconnected_head_has_zero_fisher() {
    let mut m = tiny(1);
    let h = m.head_dim();
    // head 3 of layer 0 feeds nothing
    for r in 2 * h..3 * h {
        m.layers[0].wo.row_mut(r).fill(0.0);
    }
    let data = examples(12, 2);
    let batches: Vec<&[Example]> = data.chunks(4).collect();
    let f = fisher_diagonal(&m, &batches).unwrap();
    assert_eq!(f.heads[0][2], 0.0);
    assert!(f.heads[0].iter().enumerate().any(|(i, &v)| i != 2 && v > 0.0));
}

#[test]
fn fisher_matches_finite_differences() {
    let m = tiny(3);
    let data = examples(8, 4);
    let batches: Vec<&[Example]> = data.chunks(4).collect();
    let f = fisher_diagonal(&m, &batches).unwrap();
    let plan = TimestepPlan::uniform(2, 20);
    let ones = MaskSet::ones_for(&m).values(MaskMode::Binary);
    let eps = 1e-6;
    let loss = |mv: &stprune::model::MaskValues, batch: &[Example]| {
        batch_loss(&m, mv, mv, &plan, batch, 0.0, 0.0, None).unwrap().loss
    };
    let mut oracle = UnitValues::zeros_like(&MaskSet::ones_for(&m));
    for batch in &batches {
        for l in 0..2 {
            for i in 0..4 {
                let (mut up, mut down) = (ones.clone(), ones.clone());
                up.heads[l][i] += eps;
                down.heads[l][i] -= eps;
                let g = (loss(&up, batch) - loss(&down, batch)) / (2.0 * eps);
                oracle.heads[l][i] += g * g / batches.len() as f64;
            }
            for j in 0..6 {
                let (mut up, mut down) = (ones.clone(), ones.clone());
                up.neurons[l][j] += eps;
                down.neurons[l][j] -= eps;
                let g = (loss(&up, batch) - loss(&down, batch)) / (2.0 * eps);
                oracle.neurons[l][j] += g * g / batches.len() as f64;
            }
        }
    }
    for (a, b) in f.heads.iter().flatten().zip(oracle.heads.iter().flatten()) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-8), "{a} vs {b}");
    }
    for (a, b) in f.neurons.iter().flatten().zip(oracle.neurons.iter().flatten()) {
        assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-8), "{a} vs {b}");
    }
}

#[test]
fn duplicated_batches_change_nothing() {
    let m = tiny(5);
    let data = examples(4, 6);
    let once = fisher_diagonal(&m, &[&data]).unwrap();
    let thrice = fisher_diagonal(&m, &[&data, &data, &data]).unwrap();
    for (a, b) in once.heads.iter().flatten().chain(once.neurons.iter().flatten()).zip(
        thrice.heads.iter().flatten().chain(thrice.neurons.iter().flatten()),
    ) {
        assert!((a - b).abs() <= 1e-15 * a.abs().max(1e-300));
    }
    assert!(fisher_diagonal(&m, &[]).is_err());
}

/// Intermediate neuron 0 never spikes and neuron 1 spikes every step.
fn extreme_neurons(seed: u64) -> SpikingModel {
    let mut m = tiny(seed);
    for layer in &mut m.layers {
        for r in 0..layer.w_inter.rows() {
            layer.w_inter.set(r, 0, 0.0);
            layer.w_inter.set(r, 1, 0.0);
        }
        layer.b_inter[0] = -50.0;
        layer.b_inter[1] = 50.0;
    }
    m
}

#[test]
fn silent_and_saturated_neurons_have_factors_zero_and_one() {
    let m = extreme_neurons(7);
    let masks = MaskSet::ones_for(&m);
    let plan = TimestepPlan::uniform(2, 20);
    let sims: Vec<_> = examples(5, 8)
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            run_sequential(&m, &masks, &plan, &ex.tokens, &mut RandomStream::new(i as u64), Record::Converged).unwrap()
        })
        .collect();
    let asr = asr_factors(&m, &sims).unwrap();
    for l in 0..2 {
        assert_eq!(asr.neurons[l][0], 0.0);
        assert_eq!(asr.neurons[l][1], 1.0);
        assert!(asr.heads[l].iter().chain(&asr.neurons[l]).all(|&v| (0.0..=1.0).contains(&v)));
    }
    assert!(asr_factors(&m, &[]).is_err());
}

#[test]
fn stored_traces_and_streaming_agree() {
    let m = tiny(11);
    let masks = MaskSet::ones_for(&m);
    let data = examples(7, 12);
    let sims: Vec<_> = data
        .iter()
        .map(|ex| run_unrolled(&m, &masks, &ex.tokens, 20, Record::Converged).unwrap())
        .collect();
    let stored = asr_factors(&m, &sims).unwrap();
    let mut acc = AsrAccumulator::new(&m);
    for s in &sims {
        acc.add(s).unwrap();
    }
    let streamed = acc.finish().unwrap();
    for (a, b) in stored
        .heads
        .iter()
        .flatten()
        .chain(stored.neurons.iter().flatten())
        .zip(streamed.heads.iter().flatten().chain(streamed.neurons.iter().flatten()))
    {
        assert!((a - b).abs() <= 1e-12);
    }
    assert!(AsrAccumulator::new(&m).finish().is_err());
}

#[test]
fn silent_unit_ranks_last_despite_high_fisher() {
    let fisher = UnitValues {
        heads: vec![vec![5.0, 1.0, 2.0]],
        neurons: vec![vec![0.5]],
    };
    let asr = UnitValues {
        heads: vec![vec![0.0, 0.6, 0.3]],
        neurons: vec![vec![0.2]],
    };
    let s = combine(&fisher, &asr).unwrap();
    let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
    let argmin = |v: &[f64]| (0..v.len()).min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
    assert_eq!(argmax(&fisher.heads[0]), 0);
    assert_eq!(argmin(&s.heads[0]), 0);
    assert_eq!(s.heads[0][0], 0.0);
}

#[test]
fn plain_loss_is_cross_entropy_bitwise() {
    let m = tiny(13);
    let data = examples(3, 14);
    let mv = MaskSet::ones_for(&m).values(MaskMode::Binary);
    let plan = TimestepPlan::uniform(2, 20);
    let res = batch_loss(&m, &mv, &mv, &plan, &data, 0.0, 0.0, None).unwrap();
    assert_eq!(res.loss, res.terms.pred);
    let mut ce = 0.0;
    for ex in &data {
        let out = stprune::engine::rate_proxy_forward(&m, &MaskSet::ones_for(&m), MaskMode::Binary, &ex.tokens).unwrap();
        ce += cross_entropy(&out.logits, ex.label).unwrap().0 / 3.0;
    }
    assert!((res.loss - ce).abs() < 1e-12);
    let t = LossTerms {
        pred: 1.0,
        acs: 1e12,
        activity: 0.0,
    };
    assert_eq!(total_loss(&t, 1e-12, 0.0), 2.0);
}

#[test]
fn saturated_rates_pass_no_gradient() {
    let m = extreme_neurons(15);
    let data = examples(4, 16);
    let mv = MaskSet::ones_for(&m).values(MaskMode::Binary);
    let plan = TimestepPlan::uniform(2, 20);
    let res = batch_loss(&m, &mv, &mv, &plan, &data, 0.0, 0.0, None).unwrap();
    for l in 0..2 {
        // both clipped neurons sit far from their kinks
        assert_eq!(res.grads.layers[l].b_inter[0], 0.0);
        assert_eq!(res.grads.layers[l].b_inter[1], 0.0);
        let eps = 1e-5;
        let mut up = m.clone();
        let mut down = m.clone();
        up.layers[l].b_inter[1] += eps;
        down.layers[l].b_inter[1] -= eps;
        let fd = (batch_loss(&up, &mv, &mv, &plan, &data, 0.0, 0.0, None).unwrap().loss
            - batch_loss(&down, &mv, &mv, &plan, &data, 0.0, 0.0, None).unwrap().loss)
            / (2.0 * eps);
        assert!(fd.abs() < 1e-9);
    }
}

fn penalty_config(lambda: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        lambda,
        epochs,
        penalty_epochs: epochs,
        pca_interval: 0,
        train_masks: true,
        train_weights: false,
        train_thresholds: false,
        optimizer: Optimizer::Momentum,
        mask_learning_rate: 0.01,
        batch_size: 8,
        seed: 3,
        calibration_size: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn heavy_acs_penalty_shrinks_the_network_every_epoch() {
    let m = tiny(17);
    // spread starting values so that units cross the threshold one by one
    let spread = |n: usize, l: usize| (0..n).map(|i| 0.6 + 0.39 * ((i + l) % n) as f64 / n as f64).collect();
    let relaxed = RelaxedMasks {
        heads: (0..2).map(|l| spread(4, l)).collect(),
        neurons: (0..2).map(|l| spread(6, l)).collect(),
    };
    let masks = MaskSet::ones_for(&m).with_relaxed(relaxed).unwrap();
    let plan = TimestepPlan::uniform(2, 20);
    let data = examples(32, 18);
    let out = train(&m, &masks, &plan, &data, &[], &penalty_config(1e-4, 4)).unwrap();
    let ratios: Vec<f64> = out.history.iter().map(|r| r.acs_ratio).collect();
    assert!(ratios.windows(2).all(|w| w[1] < w[0]), "{ratios:?}");
    assert!(ratios[0] < 1.0);
}

#[test]
fn relaxed_masks_and_thresholds_stay_in_range() {
    let m = tiny(19);
    let plan = TimestepPlan::uniform(2, 20);
    let data = examples(32, 20);
    let cfg = TrainConfig {
        threshold_learning_rate: 5.0,
        train_thresholds: true,
        ..penalty_config(1e-3, 2)
    };
    let out = train(&m, &MaskSet::ones_for(&m), &plan, &data, &[], &cfg).unwrap();
    assert!(out.model.layers.iter().all(|l| l.vth.iter().all(|&v| v >= 1e-3)));
    for l in 0..2 {
        assert!(out.masks.active_heads(l) >= 1 && out.masks.active_neurons(l) >= 1);
    }
    if let Some(r) = &out.masks.relaxed {
        assert!(r.heads.iter().chain(&r.neurons).flatten().all(|v| (0.0..=1.0).contains(v)));
    }
}
