use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::model::Sublayer;

/// Timesteps of the six spiking sublayers of one encoder layer.
///
/// The query projection runs inside the attention sublayer, so `t_Q` is
/// always `t_attn`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSteps {
    pub t_k: usize,
    pub t_v: usize,
    pub t_attn: usize,
    pub t_fc: usize,
    pub t_inter: usize,
    pub t_output: usize,
}

impl LayerSteps {
    pub fn uniform(t: usize) -> Self {
        Self::from_array([t; 6])
    }

    pub fn from_array(t: [usize; 6]) -> Self {
        Self {
            t_k: t[0],
            t_v: t[1],
            t_attn: t[2],
            t_fc: t[3],
            t_inter: t[4],
            t_output: t[5],
        }
    }

    /// Counts indexed by [`Sublayer::index`].
    pub fn to_array(self) -> [usize; 6] {
        [
            self.t_k,
            self.t_v,
            self.t_attn,
            self.t_fc,
            self.t_inter,
            self.t_output,
        ]
    }

    pub fn t_q(&self) -> usize {
        self.t_attn
    }

    pub fn get(&self, sub: Sublayer) -> usize {
        self.to_array()[sub.index()]
    }
}

/// Per-layer, per-sublayer timestep counts, all within `1..=t_conv`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepPlan {
    pub t_conv: usize,
    pub layers: Vec<LayerSteps>,
}

impl TimestepPlan {
    pub fn uniform(num_layers: usize, t: usize) -> Self {
        Self {
            t_conv: t,
            layers: vec![LayerSteps::uniform(t); num_layers],
        }
    }

    /// Builds a plan from a flat layer-major list of six counts per layer.
    pub fn from_flat(t_conv: usize, flat: &[usize]) -> Result<Self> {
        if flat.is_empty() || flat.len() % 6 != 0 {
            return Err(shape(format!(
                "{} sublayer counts do not form whole layers of six",
                flat.len()
            )));
        }
        let layers = flat
            .chunks(6)
            .map(|c| LayerSteps::from_array([c[0], c[1], c[2], c[3], c[4], c[5]]))
            .collect();
        Ok(Self { t_conv, layers })
    }

    /// Layer-major list of the six counts of every layer.
    pub fn flat(&self) -> Vec<usize> {
        self.layers.iter().flat_map(|l| l.to_array()).collect()
    }

    pub fn steps(&self, layer: usize, sub: Sublayer) -> usize {
        self.layers[layer].get(sub)
    }

    pub fn max_steps(&self) -> usize {
        self.flat().into_iter().max().unwrap_or(0)
    }

    /// Average timesteps over every spiking sublayer: the latency figure.
    pub fn mean_timesteps(&self) -> f64 {
        let flat = self.flat();
        flat.iter().sum::<usize>() as f64 / flat.len().max(1) as f64
    }

    pub fn validate(&self, num_layers: usize, t_conv: usize) -> Result<()> {
        if self.layers.len() != num_layers {
            return Err(shape(format!(
                "timestep plan covers {} layers, model has {num_layers}",
                self.layers.len()
            )));
        }
        if self.t_conv != t_conv {
            return Err(invalid(format!(
                "timestep plan was built for T_conv = {}, model uses {t_conv}",
                self.t_conv
            )));
        }
        for (l, steps) in self.layers.iter().enumerate() {
            for (sub, t) in Sublayer::ALL.iter().zip(steps.to_array()) {
                if t == 0 || t > self.t_conv {
                    return Err(invalid(format!(
                        "layer {l} {}: {t} timesteps outside 1..={}",
                        sub.name(),
                        self.t_conv
                    )));
                }
            }
        }
        Ok(())
    }
}
