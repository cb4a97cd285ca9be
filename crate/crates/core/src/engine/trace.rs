use crate::model::Sublayer;
use crate::numerics::Matrix;

/// Whether a simulation keeps the per-timestep cumulative rates or only the
/// converged ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Record {
    Converged,
    History,
}

/// Average spiking rates of one sublayer.
#[derive(Clone, Debug, PartialEq)]
pub struct AsrTrace {
    pub layer: usize,
    pub sublayer: Sublayer,
    pub timesteps: usize,
    /// Final rates, one row per token position.
    pub converged: Matrix,
    /// Row `t − 1` holds the cumulative rate after `t` timesteps, flattened
    /// over positions and units.
    pub history: Option<Matrix>,
}

impl AsrTrace {
    pub fn mean_rate(&self) -> f64 {
        let d = self.converged.data();
        d.iter().sum::<f64>() / d.len().max(1) as f64
    }

    /// Mean converged rate of each unit over token positions.
    pub fn unit_means(&self) -> Vec<f64> {
        let n = self.converged.rows().max(1) as f64;
        self.converged.column_sums().into_iter().map(|s| s / n).collect()
    }
}

/// Result of one forward simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct SimOutput {
    pub logits: Vec<f64>,
    /// Layer-major, six sublayers per layer.
    pub traces: Vec<AsrTrace>,
}

impl SimOutput {
    pub fn trace(&self, layer: usize, sub: Sublayer) -> &AsrTrace {
        &self.traces[layer * 6 + sub.index()]
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Accumulates the cumulative-rate history of one sublayer.
pub(crate) struct HistoryBuffer {
    data: Vec<f64>,
    width: usize,
}

impl HistoryBuffer {
    pub fn new(width: usize, steps: usize) -> Self {
        Self {
            data: Vec::with_capacity(width * steps),
            width,
        }
    }

    pub fn push(&mut self, rates: &[f64]) {
        debug_assert_eq!(rates.len(), self.width);
        self.data.extend_from_slice(rates);
    }

    pub fn finish(self) -> Matrix {
        let rows = self.data.len() / self.width.max(1);
        Matrix::from_vec(rows, self.width, self.data).expect("rates are finite")
    }
}
