//! Unit importance for spatial pruning: the empirical Fisher diagonal of the
//! mask variables, weighted by each unit's average spiking rate.

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::engine::{proxy_backward, proxy_forward_tape, Gradients, SimOutput};
use crate::error::{invalid, shape, Result};
use crate::model::{MaskMode, MaskSet, SpikingModel, Sublayer};
use crate::trainer::cross_entropy;

/// One real value per head and per intermediate neuron of every layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitValues {
    pub heads: Vec<Vec<f64>>,
    pub neurons: Vec<Vec<f64>>,
}

impl UnitValues {
    pub fn zeros_like(masks: &MaskSet) -> Self {
        Self {
            heads: masks.heads.iter().map(|h| vec![0.0; h.len()]).collect(),
            neurons: masks.neurons.iter().map(|n| vec![0.0; n.len()]).collect(),
        }
    }

    fn same_shape(&self, other: &UnitValues) -> bool {
        let lens = |v: &Vec<Vec<f64>>| v.iter().map(Vec::len).collect::<Vec<_>>();
        lens(&self.heads) == lens(&other.heads) && lens(&self.neurons) == lens(&other.neurons)
    }

    fn zip_with(&self, other: &UnitValues, f: impl Fn(f64, f64) -> f64) -> UnitValues {
        let z = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.iter().zip(y).map(|(p, q)| f(*p, *q)).collect())
                .collect()
        };
        UnitValues {
            heads: z(&self.heads, &other.heads),
            neurons: z(&self.neurons, &other.neurons),
        }
    }
}

/// Combined scores with their two factors kept for inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub heads: Vec<Vec<f64>>,
    pub neurons: Vec<Vec<f64>>,
    pub fisher: UnitValues,
    pub asr: UnitValues,
}

impl ImportanceScores {
    pub fn num_layers(&self) -> usize {
        self.heads.len()
    }

    /// Scores taken as given, with both factors set to the scores and ones.
    pub fn from_scores(heads: Vec<Vec<f64>>, neurons: Vec<Vec<f64>>) -> Self {
        let fisher = UnitValues { heads, neurons };
        let asr = fisher.zip_with(&fisher, |_, _| 1.0);
        Self {
            heads: fisher.heads.clone(),
            neurons: fisher.neurons.clone(),
            fisher,
            asr,
        }
    }
}

/// Mean over batches of the squared gradient of the batch-mean prediction
/// loss with respect to each mask variable, taken at all-ones masks.
pub fn fisher_diagonal(model: &SpikingModel, batches: &[&[Example]]) -> Result<UnitValues> {
    if batches.is_empty() || batches.iter().any(|b| b.is_empty()) {
        return Err(invalid("Fisher estimation needs at least one non-empty calibration batch"));
    }
    let masks = MaskSet::ones_for(model);
    let mv = masks.values(MaskMode::Binary);
    let mut fisher = UnitValues::zeros_like(&masks);
    for batch in batches {
        let mut grads = Gradients::zeros(model);
        let inv = 1.0 / batch.len() as f64;
        for ex in batch.iter() {
            let x0 = model.encode_input(&ex.tokens)?;
            let tape = proxy_forward_tape(model, &mv, &x0, None);
            let (_, mut d) = cross_entropy(&tape.logits, ex.label)?;
            d.iter_mut().for_each(|g| *g *= inv);
            proxy_backward(model, &mv, &tape, &d, &[], &mut grads);
        }
        for (f, g) in fisher
            .heads
            .iter_mut()
            .zip(&grads.heads)
            .chain(fisher.neurons.iter_mut().zip(&grads.neurons))
        {
            for (a, b) in f.iter_mut().zip(g) {
                *a += b * b;
            }
        }
    }
    let inv = 1.0 / batches.len() as f64;
    Ok(fisher.zip_with(&fisher, |a, _| a * inv))
}

/// Streams calibration simulations into per-unit mean rates.
#[derive(Clone, Debug)]
pub struct AsrAccumulator {
    head_dim: usize,
    sums: UnitValues,
    samples: usize,
}

impl AsrAccumulator {
    pub fn new(model: &SpikingModel) -> Self {
        Self {
            head_dim: model.head_dim(),
            sums: UnitValues::zeros_like(&MaskSet::ones_for(model)),
            samples: 0,
        }
    }

    pub fn add(&mut self, sim: &SimOutput) -> Result<()> {
        let layers = self.sums.heads.len();
        if sim.traces.len() != 6 * layers {
            return Err(shape(format!(
                "simulation has {} sublayer traces, expected {}",
                sim.traces.len(),
                6 * layers
            )));
        }
        for l in 0..layers {
            let att = sim.trace(l, Sublayer::Attention).unit_means();
            let heads = &mut self.sums.heads[l];
            if att.len() != heads.len() * self.head_dim {
                return Err(shape(format!("layer {l}: attention width does not match head count")));
            }
            for (i, s) in heads.iter_mut().enumerate() {
                let cols = &att[i * self.head_dim..(i + 1) * self.head_dim];
                *s += cols.iter().sum::<f64>() / self.head_dim as f64;
            }
            let inter = sim.trace(l, Sublayer::Intermediate).unit_means();
            let neurons = &mut self.sums.neurons[l];
            if inter.len() != neurons.len() {
                return Err(shape(format!("layer {l}: intermediate width does not match neuron count")));
            }
            for (s, v) in neurons.iter_mut().zip(inter) {
                *s += v;
            }
        }
        self.samples += 1;
        Ok(())
    }

    pub fn finish(&self) -> Result<UnitValues> {
        if self.samples == 0 {
            return Err(invalid("no calibration simulations were accumulated"));
        }
        let inv = 1.0 / self.samples as f64;
        Ok(self.sums.zip_with(&self.sums, |a, _| a * inv))
    }
}

/// Head factor: mean converged rate of the head's attention-output units over
/// its `H` dimensions, token positions and samples. Neuron factor: mean
/// converged rate of the intermediate neuron over positions and samples.
pub fn asr_factors(model: &SpikingModel, sims: &[SimOutput]) -> Result<UnitValues> {
    let masks = MaskSet::ones_for(model);
    let h = model.head_dim();
    let mut out = UnitValues::zeros_like(&masks);
    if sims.is_empty() {
        return Err(invalid("no calibration simulations given"));
    }
    for l in 0..model.layers.len() {
        for (i, v) in out.heads[l].iter_mut().enumerate() {
            let mut total = 0.0;
            let mut count = 0usize;
            for sim in sims {
                let c = &sim.trace(l, Sublayer::Attention).converged;
                for r in 0..c.rows() {
                    total += c.row(r)[i * h..(i + 1) * h].iter().sum::<f64>();
                    count += h;
                }
            }
            *v = total / count as f64;
        }
        for (j, v) in out.neurons[l].iter_mut().enumerate() {
            let mut total = 0.0;
            let mut count = 0usize;
            for sim in sims {
                let c = &sim.trace(l, Sublayer::Intermediate).converged;
                for r in 0..c.rows() {
                    total += c.get(r, j);
                    count += 1;
                }
            }
            *v = total / count as f64;
        }
    }
    Ok(out)
}

/// `I(h_i) = F_ii · ASR_i` and `I(n_j) = F_jj · ASR_j`.
pub fn combine(fisher: &UnitValues, asr: &UnitValues) -> Result<ImportanceScores> {
    if !fisher.same_shape(asr) {
        return Err(shape("Fisher and rate factors cover different units"));
    }
    let prod = fisher.zip_with(asr, |f, a| f * a);
    Ok(ImportanceScores {
        heads: prod.heads,
        neurons: prod.neurons,
        fisher: fisher.clone(),
        asr: asr.clone(),
    })
}
