//! Accumulation-operation (ACs) accounting and the Normalized #C metric.
//!
//! Per encoder layer with `|h|` active heads, `|n|` active intermediate
//! neurons, sequence length `N`, hidden size `D` and head width `H`:
//!
//! ```text
//! ACs_h = |h| · ( N·D·H·(t_Q + t_K + t_V + t_FC) + 2·N²·H·t_Attn )
//! ACs_n = N·D·|n|·t_Inter + N·|n|·D·t_Output
//! ```
//!
//! with `t_Q = t_Attn`. Embedding and classifier costs are left out since
//! neither masks nor timesteps change them.

use serde::{Deserialize, Serialize};

use crate::engine::TimestepPlan;
use crate::error::{invalid, shape, Result};
use crate::model::{MaskSet, MaskValues, ModelConfig, Sublayer};
use crate::numerics::Matrix;

/// ACs of one encoder layer split by operation family.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerAcs {
    pub acs_qkv: u64,
    pub acs_attn: u64,
    pub acs_fc: u64,
    pub acs_neurons: u64,
}

impl LayerAcs {
    pub fn total(&self) -> u64 {
        self.acs_qkv + self.acs_attn + self.acs_fc + self.acs_neurons
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcsReport {
    pub layers: Vec<LayerAcs>,
    /// ACs of each spiking sublayer, layer-major.
    pub sublayer_acs: Vec<u64>,
    pub total: u64,
    /// All-ones masks at uniform `T_conv`.
    pub baseline: u64,
    pub ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalized_c: Option<f64>,
}

fn dims(config: &ModelConfig) -> (u64, u64, u64) {
    (
        config.seq_len as u64,
        config.hidden_size as u64,
        config.head_dim() as u64,
    )
}

/// ACs added by one head of `layer` under `plan`.
pub fn head_cost(config: &ModelConfig, plan: &TimestepPlan, layer: usize) -> u64 {
    let (n, d, h) = dims(config);
    let s = plan.layers[layer];
    n * d * h * (s.t_q() + s.t_k + s.t_v + s.t_fc) as u64 + 2 * n * n * h * s.t_attn as u64
}

/// ACs added by one intermediate neuron of `layer` under `plan`.
pub fn neuron_cost(config: &ModelConfig, plan: &TimestepPlan, layer: usize) -> u64 {
    let (n, d, _) = dims(config);
    let s = plan.layers[layer];
    n * d * (s.t_inter + s.t_output) as u64
}

fn check(config: &ModelConfig, masks: &MaskSet, plan: &TimestepPlan) -> Result<()> {
    let l = config.num_layers;
    if masks.heads.len() != l || masks.neurons.len() != l {
        return Err(shape(format!("masks cover {} layers, config has {l}", masks.heads.len())));
    }
    for i in 0..l {
        if masks.heads[i].len() != config.num_heads || masks.neurons[i].len() != config.intermediate_size {
            return Err(shape(format!("layer {i}: mask lengths do not match the configuration")));
        }
    }
    plan.validate(l, config.t_conv)
}

fn layer_acs(config: &ModelConfig, plan: &TimestepPlan, l: usize, heads: u64, neurons: u64) -> (LayerAcs, [u64; 6]) {
    let (n, d, h) = dims(config);
    let s = plan.layers[l];
    let per_head = n * d * h;
    let k = per_head * s.t_k as u64 * heads;
    let v = per_head * s.t_v as u64 * heads;
    let q = per_head * s.t_q() as u64 * heads;
    let scores = 2 * n * n * h * s.t_attn as u64 * heads;
    let fc = per_head * s.t_fc as u64 * heads;
    let inter = n * d * neurons * s.t_inter as u64;
    let out = n * neurons * d * s.t_output as u64;
    (
        LayerAcs {
            acs_qkv: q + k + v,
            acs_attn: scores,
            acs_fc: fc,
            acs_neurons: inter + out,
        },
        [k, v, q + scores, fc, inter, out],
    )
}

/// Structural ACs of `masks` under `plan` against the unpruned baseline.
pub fn acs_total(config: &ModelConfig, masks: &MaskSet, plan: &TimestepPlan) -> Result<AcsReport> {
    check(config, masks, plan)?;
    let mut layers = Vec::with_capacity(config.num_layers);
    let mut sublayer_acs = Vec::with_capacity(6 * config.num_layers);
    for l in 0..config.num_layers {
        let (acs, subs) = layer_acs(
            config,
            plan,
            l,
            masks.active_heads(l) as u64,
            masks.active_neurons(l) as u64,
        );
        layers.push(acs);
        sublayer_acs.extend(subs);
    }
    let total = layers.iter().map(LayerAcs::total).sum();
    let baseline = baseline_acs(config);
    Ok(AcsReport {
        layers,
        sublayer_acs,
        total,
        baseline,
        ratio: total as f64 / baseline as f64,
        normalized_c: None,
    })
}

/// `M(1, 1, T_conv)`.
pub fn baseline_acs(config: &ModelConfig) -> u64 {
    let plan = TimestepPlan::uniform(config.num_layers, config.t_conv);
    (0..config.num_layers)
        .map(|l| {
            layer_acs(
                config,
                &plan,
                l,
                config.num_heads as u64,
                config.intermediate_size as u64,
            )
            .0
            .total()
        })
        .sum()
}

/// ACs with mask values taken as fractional unit counts, and its gradient
/// with respect to every mask value.
pub fn fractional_acs(config: &ModelConfig, mv: &MaskValues, plan: &TimestepPlan) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut total = 0.0;
    let mut dh = Vec::with_capacity(mv.heads.len());
    let mut dn = Vec::with_capacity(mv.neurons.len());
    for l in 0..mv.heads.len() {
        let hc = head_cost(config, plan, l) as f64;
        let nc = neuron_cost(config, plan, l) as f64;
        total += hc * mv.head_count(l) + nc * mv.neuron_count(l);
        dh.push(vec![hc; mv.heads[l].len()]);
        dn.push(vec![nc; mv.neurons[l].len()]);
    }
    (total, dh, dn)
}

/// Activity-weighted fraction of operations over `N` sublayers
/// indexed from 1: `Σ_{l=2}^{N−1} a_l · ACs_{l+1} / Σ_l ACs_l`.
pub fn normalized_c(rates: &[f64], sublayer_acs: &[f64]) -> Result<f64> {
    if rates.len() != sublayer_acs.len() {
        return Err(shape(format!(
            "{} sublayer rates for {} sublayer costs",
            rates.len(),
            sublayer_acs.len()
        )));
    }
    let n = rates.len();
    if n < 3 {
        return Err(invalid("normalized #C needs at least three sublayers"));
    }
    let total: f64 = sublayer_acs.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    // zero-based: a[i] weights acs[i + 1] for i in 1..n-1
    let num: f64 = (1..n - 1).map(|i| rates[i] * sublayer_acs[i + 1]).sum();
    Ok(num / total)
}

/// Mean rate of each sublayer over its active units only, layer-major.
/// Masked heads are excluded from the key, value and attention sublayers and
/// masked neurons from the intermediate one, because their costs are already
/// gone from the ACs the rates weight.
pub fn sublayer_mean_rates(rates: &[Matrix], masks: &MaskSet, head_dim: usize) -> Result<Vec<f64>> {
    if rates.len() != 6 * masks.num_layers() {
        return Err(shape(format!(
            "{} sublayer rate matrices for {} layers",
            rates.len(),
            masks.num_layers()
        )));
    }
    let mut out = Vec::with_capacity(rates.len());
    for (i, r) in rates.iter().enumerate() {
        let l = i / 6;
        let keep: Vec<bool> = match Sublayer::ALL[i % 6] {
            Sublayer::Key | Sublayer::Value | Sublayer::Attention => (0..r.cols())
                .map(|c| masks.heads[l].get(c / head_dim).copied().unwrap_or(false))
                .collect(),
            Sublayer::Intermediate => (0..r.cols())
                .map(|c| masks.neurons[l].get(c).copied().unwrap_or(false))
                .collect(),
            _ => vec![true; r.cols()],
        };
        let kept = keep.iter().filter(|&&k| k).count() * r.rows();
        let sum: f64 = (0..r.rows())
            .map(|row| r.row(row).iter().zip(&keep).filter(|(_, &k)| k).map(|(v, _)| v).sum::<f64>())
            .sum();
        out.push(if kept == 0 { 0.0 } else { sum / kept as f64 });
    }
    Ok(out)
}

/// Names of the sublayer columns used in reports, layer-major.
pub fn sublayer_labels(num_layers: usize) -> Vec<String> {
    (0..num_layers)
        .flat_map(|l| Sublayer::ALL.iter().map(move |s| format!("L{}.{}", l + 1, s.name())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, d: usize, heads: usize, dn: usize) -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            hidden_size: d,
            num_heads: heads,
            intermediate_size: dn,
            seq_len: n,
            t_conv: 4,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn single_head_products() {
        let c = cfg(2, 4, 2, 3);
        let mut masks = MaskSet::ones(&c);
        masks.heads[0][1] = false;
        let plan = TimestepPlan::uniform(1, 1);
        let plan = TimestepPlan { t_conv: 4, ..plan };
        let r = acs_total(&c, &masks, &plan).unwrap();
        assert_eq!(r.layers[0].acs_qkv, 48);
        assert_eq!(r.layers[0].acs_attn, 16);
        assert_eq!(r.layers[0].acs_fc, 16);
        assert_eq!(r.layers[0].acs_neurons, 2 * 2 * 4 * 3);
        assert_eq!(r.total, r.sublayer_acs.iter().sum::<u64>());
    }

    #[test]
    fn doubling_timesteps_doubles_total() {
        let c = cfg(3, 4, 2, 5);
        let masks = MaskSet::ones(&c);
        let a = acs_total(&c, &masks, &TimestepPlan { t_conv: 4, ..TimestepPlan::uniform(1, 2) }).unwrap();
        let b = acs_total(&c, &masks, &TimestepPlan::uniform(1, 4)).unwrap();
        assert_eq!(b.total, 2 * a.total);
        assert_eq!(b.ratio, 1.0);
    }

    #[test]
    fn fractional_matches_binary_on_binary_masks() {
        let c = cfg(3, 4, 2, 5);
        let mut masks = MaskSet::ones(&c);
        masks.neurons[0][3] = false;
        let plan = TimestepPlan::uniform(1, 4);
        let (m, dh, dn) = fractional_acs(&c, &masks.values(crate::model::MaskMode::Binary), &plan);
        assert_eq!(m, acs_total(&c, &masks, &plan).unwrap().total as f64);
        assert_eq!(dh[0][0], head_cost(&c, &plan, 0) as f64);
        assert_eq!(dn[0][0], neuron_cost(&c, &plan, 0) as f64);
    }

    #[test]
    fn normalized_c_uniform_and_silent() {
        assert_eq!(normalized_c(&[1.0; 10], &[5.0; 10]).unwrap(), 0.8);
        assert_eq!(normalized_c(&[0.0; 10], &[5.0; 10]).unwrap(), 0.0);
        assert!(normalized_c(&[1.0; 2], &[1.0; 2]).is_err());
        assert!(normalized_c(&[1.0; 3], &[1.0; 4]).is_err());
    }
}
