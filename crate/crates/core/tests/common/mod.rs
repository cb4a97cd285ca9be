//! Oracles shared by the integration suites.
#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};

use stprune::cost::acs_total;
use stprune::engine::{LayerSteps, TimestepPlan};
use stprune::importance::ImportanceScores;
use stprune::model::{MaskSet, ModelConfig};
use stprune::numerics::{Matrix, RandomStream};
use stprune::spatial::{pruned_importance, refine_masks, select_masks, DEFAULT_MAX_ITERS};

pub fn eigen_count(x: &Matrix, threshold: f64) -> usize {
    let (n, d) = x.shape();
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = m.row_mean();
    let centered = DMatrix::from_fn(n, d, |r, c| m[(r, c)] - mean[c]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().map(|v| v.max(0.0)).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = ev.iter().sum();
    if total <= 0.0 {
        return 1;
    }
    let mut acc = 0.0;
    for (i, v) in ev.iter().enumerate() {
        acc += v;
        if acc / total >= threshold {
            return i + 1;
        }
    }
    ev.len()
}

pub fn low_rank(rows: usize, cols: usize, rank: usize, stream: &mut RandomStream) -> Matrix {
    let dirs: Vec<Vec<f64>> = (0..rank).map(|_| (0..cols).map(|_| stream.normal()).collect()).collect();
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let w: Vec<f64> = (0..rank).map(|_| stream.normal()).collect();
        for c in 0..cols {
            data.push((0..rank).map(|k| w[k] * dirs[k][c]).sum());
        }
    }
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Walks every multiply-accumulate slot of the forward pass of one layer,
/// one timestep at a time, and returns the count per spiking sublayer.
pub fn naive_layer_macs(n: usize, d: usize, h: usize, heads: &[bool], neurons: &[bool], t: LayerSteps) -> [u64; 6] {
    let mut c = [0u64; 6];
    let active: Vec<usize> = heads.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
    // key and value projections: every token row meets every input column
    // and every column of the surviving heads
    for (slot, steps) in [(0, t.t_k), (1, t.t_v)] {
        for _ in 0..steps {
            for _tok in 0..n {
                for _i in 0..d {
                    for _ in &active {
                        for _j in 0..h {
                            c[slot] += 1;
                        }
                    }
                }
            }
        }
    }
    // the attention sublayer owns the query projection, Q·Kᵀ and P·V
    for _ in 0..t.t_attn {
        for _tok in 0..n {
            for _i in 0..d {
                for _ in &active {
                    for _j in 0..h {
                        c[2] += 1;
                    }
                }
            }
        }
        for _ in &active {
            for _qi in 0..n {
                for _kj in 0..n {
                    for _e in 0..h {
                        c[2] += 2;
                    }
                }
            }
        }
    }
    for _ in 0..t.t_fc {
        for _tok in 0..n {
            for _ in &active {
                for _e in 0..h {
                    for _o in 0..d {
                        c[3] += 1;
                    }
                }
            }
        }
    }
    for _ in 0..t.t_inter {
        for _tok in 0..n {
            for _i in 0..d {
                for _ in neurons.iter().filter(|&&b| b) {
                    c[4] += 1;
                }
            }
        }
    }
    for _ in 0..t.t_output {
        for _tok in 0..n {
            for _ in neurons.iter().filter(|&&b| b) {
                for _o in 0..d {
                    c[5] += 1;
                }
            }
        }
    }
    c
}

/// Minimum pruned importance over every feasible mask, by enumeration.
pub fn exhaustive_optimum(config: &ModelConfig, scores: &ImportanceScores, budget: f64) -> f64 {
    let (l, nh, nn) = (config.num_layers, config.num_heads, config.intermediate_size);
    let units = l * (nh + nn);
    assert!(units <= 16);
    let plan = TimestepPlan::uniform(l, config.t_conv);
    let mut best = f64::INFINITY;
    for bitsv in 0u32..(1 << units) {
        let bit = |k: usize| bitsv >> k & 1 == 1;
        let mut m = MaskSet::ones(config);
        let mut k = 0;
        for layer in 0..l {
            for i in 0..nh {
                m.heads[layer][i] = bit(k);
                k += 1;
            }
            for i in 0..nn {
                m.neurons[layer][i] = bit(k);
                k += 1;
            }
        }
        if (0..l).any(|i| m.active_heads(i) == 0 || m.active_neurons(i) == 0) {
            continue;
        }
        if acs_total(config, &m, &plan).unwrap().ratio > budget {
            continue;
        }
        best = best.min(pruned_importance(&m, scores));
    }
    best
}

pub fn random_scores(config: &ModelConfig, s: &mut RandomStream) -> ImportanceScores {
    let mut draw = |k: usize| -> Vec<f64> {
        (0..k)
            .map(|_| {
                // heavy-tailed so that a few units dominate
                let u = s.uniform();
                u * u * u * 10.0
            })
            .collect()
    };
    let heads = (0..config.num_layers).map(|_| draw(config.num_heads)).collect();
    let neurons = (0..config.num_layers).map(|_| draw(config.intermediate_size)).collect();
    ImportanceScores::from_scores(heads, neurons)
}

pub fn micro_configs() -> Vec<ModelConfig> {
    let base = ModelConfig {
        t_conv: 4,
        ..ModelConfig::toy()
    };
    vec![
        ModelConfig {
            num_layers: 2,
            hidden_size: 8,
            num_heads: 2,
            intermediate_size: 4,
            seq_len: 4,
            ..base.clone()
        },
        ModelConfig {
            num_layers: 2,
            hidden_size: 4,
            num_heads: 2,
            intermediate_size: 4,
            seq_len: 8,
            ..base.clone()
        },
        ModelConfig {
            num_layers: 1,
            hidden_size: 8,
            num_heads: 4,
            intermediate_size: 8,
            seq_len: 2,
            ..base.clone()
        },
        ModelConfig {
            num_layers: 3,
            hidden_size: 6,
            num_heads: 2,
            intermediate_size: 2,
            seq_len: 3,
            ..base
        },
    ]
}

/// Compares `acs_total` with the naive counter over every geometry with
/// N, D, d_n ≤ 8 and 100 random mask and plan draws each. Returns the number
/// of comparisons.
pub fn acs_sweep(seed: u64) -> Result<usize, String> {
    let mut s = RandomStream::new(seed);
    let mut checked = 0;
    for n in 1..=8 {
        for d in 1..=8 {
            for heads in (1..=d).filter(|k| d % k == 0) {
                for dn in 1..=8 {
                    let config = ModelConfig {
                        num_layers: 2,
                        hidden_size: d,
                        num_heads: heads,
                        intermediate_size: dn,
                        seq_len: n,
                        t_conv: 3,
                        ..ModelConfig::toy()
                    };
                    let h = config.head_dim();
                    for _ in 0..100 {
                        let mut masks = MaskSet::ones(&config);
                        for v in masks.heads.iter_mut().chain(masks.neurons.iter_mut()).flatten() {
                            *v = s.bernoulli(0.6);
                        }
                        let flat: Vec<usize> = (0..12).map(|_| 1 + s.index(3)).collect();
                        let plan = TimestepPlan::from_flat(3, &flat).map_err(|e| e.to_string())?;
                        let report = acs_total(&config, &masks, &plan).map_err(|e| e.to_string())?;
                        let mut naive = Vec::new();
                        for l in 0..2 {
                            naive.extend(naive_layer_macs(n, d, h, &masks.heads[l], &masks.neurons[l], plan.layers[l]));
                        }
                        if report.sublayer_acs != naive || report.total != naive.iter().sum::<u64>() {
                            return Err(format!(
                                "N={n} D={d} heads={heads} d_n={dn}: {:?} vs naive {naive:?}",
                                report.sublayer_acs
                            ));
                        }
                        checked += 1;
                    }
                }
            }
        }
    }
    Ok(checked)
}

/// Greedy selection plus refinement against enumeration on every micro
/// geometry, 20 importance draws each at budget 0.6. Returns the number of
/// cases.
pub fn spatial_optimality_sweep(seed: u64) -> Result<usize, String> {
    let mut s = RandomStream::new(seed);
    let mut cases = 0;
    for config in micro_configs() {
        let plan = TimestepPlan::uniform(config.num_layers, config.t_conv);
        for case in 0..20 {
            let scores = random_scores(&config, &mut s);
            let greedy = select_masks(&scores, &config, 0.6).map_err(|e| e.to_string())?;
            let refined = refine_masks(&greedy, &scores, &config, 0.6, DEFAULT_MAX_ITERS).map_err(|e| e.to_string())?;
            let ratio = acs_total(&config, &refined, &plan).map_err(|e| e.to_string())?.ratio;
            if ratio > 0.6 {
                return Err(format!("case {case}: ratio {ratio} over budget"));
            }
            let got = pruned_importance(&refined, &scores);
            let best = exhaustive_optimum(&config, &scores, 0.6);
            if (got - best).abs() > 1e-9 * best.max(1.0) {
                return Err(format!("{config:?} case {case}: refined {got}, optimum {best}"));
            }
            cases += 1;
        }
    }
    Ok(cases)
}
