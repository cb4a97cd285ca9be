use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::model::{ModelConfig, SpikingModel};

/// Real-valued mask relaxations in `[0, 1]`, present only while retraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxedMasks {
    pub heads: Vec<Vec<f64>>,
    pub neurons: Vec<Vec<f64>>,
}

/// Binary head and neuron masks, one vector per encoder layer.
///
/// When `relaxed` is present the binary masks are always its values
/// thresholded at 0.5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub heads: Vec<Vec<bool>>,
    pub neurons: Vec<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relaxed: Option<RelaxedMasks>,
}

/// Which mask values enter a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// 0/1 from the binary masks.
    Binary,
    /// The relaxed values themselves (falls back to binary when absent).
    Relaxed,
}

/// Per-unit mask multipliers as consumed by the engine.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskValues {
    pub heads: Vec<Vec<f64>>,
    pub neurons: Vec<Vec<f64>>,
}

impl MaskValues {
    pub fn head_count(&self, layer: usize) -> f64 {
        self.heads[layer].iter().sum()
    }

    pub fn neuron_count(&self, layer: usize) -> f64 {
        self.neurons[layer].iter().sum()
    }
}

fn as_f64(v: &[bool]) -> Vec<f64> {
    v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

impl MaskSet {
    /// All-ones masks sized from a configuration.
    pub fn ones(config: &ModelConfig) -> Self {
        Self {
            heads: vec![vec![true; config.num_heads]; config.num_layers],
            neurons: vec![vec![true; config.intermediate_size]; config.num_layers],
            relaxed: None,
        }
    }

    /// All-ones masks sized from a (possibly structurally pruned) model.
    pub fn ones_for(model: &SpikingModel) -> Self {
        let h = model.head_dim();
        Self {
            heads: model
                .layers
                .iter()
                .map(|l| vec![true; l.num_heads(h)])
                .collect(),
            neurons: model
                .layers
                .iter()
                .map(|l| vec![true; l.num_neurons()])
                .collect(),
            relaxed: None,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.heads.len()
    }

    pub fn kept_heads(&self, layer: usize) -> Vec<usize> {
        (0..self.heads[layer].len())
            .filter(|&i| self.heads[layer][i])
            .collect()
    }

    pub fn kept_neurons(&self, layer: usize) -> Vec<usize> {
        (0..self.neurons[layer].len())
            .filter(|&i| self.neurons[layer][i])
            .collect()
    }

    pub fn active_heads(&self, layer: usize) -> usize {
        self.heads[layer].iter().filter(|&&b| b).count()
    }

    pub fn active_neurons(&self, layer: usize) -> usize {
        self.neurons[layer].iter().filter(|&&b| b).count()
    }

    pub fn total_pruned(&self) -> usize {
        self.heads
            .iter()
            .chain(&self.neurons)
            .flatten()
            .filter(|&&b| !b)
            .count()
    }

    /// Attaches relaxed values and re-derives the binary masks from them.
    pub fn with_relaxed(mut self, relaxed: RelaxedMasks) -> Result<Self> {
        self.relaxed = Some(relaxed);
        self.sync_from_relaxed()?;
        Ok(self)
    }

    /// Drops the relaxation, keeping the thresholded binary masks.
    pub fn hardened(&self) -> Self {
        Self {
            heads: self.heads.clone(),
            neurons: self.neurons.clone(),
            relaxed: None,
        }
    }

    pub fn sync_from_relaxed(&mut self) -> Result<()> {
        let Some(r) = &self.relaxed else {
            return Ok(());
        };
        if r.heads.len() != self.heads.len() || r.neurons.len() != self.neurons.len() {
            return Err(shape("relaxed masks have a different layer count"));
        }
        for (bin, rel) in self
            .heads
            .iter_mut()
            .zip(&r.heads)
            .chain(self.neurons.iter_mut().zip(&r.neurons))
        {
            if bin.len() != rel.len() {
                return Err(shape("relaxed mask length differs from binary mask"));
            }
            if let Some(v) = rel.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(invalid(format!("relaxed mask value {v} outside [0, 1]")));
            }
            for (b, &v) in bin.iter_mut().zip(rel) {
                *b = v >= 0.5;
            }
        }
        Ok(())
    }

    pub fn values(&self, mode: MaskMode) -> MaskValues {
        match (mode, &self.relaxed) {
            (MaskMode::Relaxed, Some(r)) => MaskValues {
                heads: r.heads.clone(),
                neurons: r.neurons.clone(),
            },
            _ => MaskValues {
                heads: self.heads.iter().map(|v| as_f64(v)).collect(),
                neurons: self.neurons.iter().map(|v| as_f64(v)).collect(),
            },
        }
    }

    /// Checks that mask lengths match the model's per-layer head and neuron
    /// counts.
    pub fn check_against(&self, model: &SpikingModel) -> Result<()> {
        let h = model.head_dim();
        if self.heads.len() != model.layers.len() || self.neurons.len() != model.layers.len() {
            return Err(shape(format!(
                "masks cover {} layers, model has {}",
                self.heads.len(),
                model.layers.len()
            )));
        }
        for (l, layer) in model.layers.iter().enumerate() {
            if self.heads[l].len() != layer.num_heads(h) {
                return Err(shape(format!(
                    "layer {l}: head mask length {}, model has {} heads",
                    self.heads[l].len(),
                    layer.num_heads(h)
                )));
            }
            if self.neurons[l].len() != layer.num_neurons() {
                return Err(shape(format!(
                    "layer {l}: neuron mask length {}, model has {} neurons",
                    self.neurons[l].len(),
                    layer.num_neurons()
                )));
            }
        }
        if let Some(r) = &self.relaxed {
            let mut copy = self.clone();
            copy.sync_from_relaxed()?;
            if copy.heads != self.heads || copy.neurons != self.neurons {
                return Err(invalid("binary masks disagree with thresholded relaxed masks"));
            }
            let _ = r;
        }
        Ok(())
    }
}
