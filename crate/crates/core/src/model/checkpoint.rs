//! JSON checkpoints holding a model, its masks and its timestep plan.
//!
//! Numbers are written as shortest round-trip decimal doubles, so saving and
//! loading reproduces every field bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::TimestepPlan;
use crate::error::{shape, Error, Result};
use crate::model::{EncoderLayer, MaskSet, ModelConfig, SpikingModel};
use crate::numerics::Matrix;

/// Everything a pipeline stage hands to the next one.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SpikingModel,
    pub masks: MaskSet,
    pub plan: TimestepPlan,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    config: ModelConfig,
    embedding: Vec<Vec<f64>>,
    layers: Vec<LayerFile>,
    classifier: Vec<Vec<f64>>,
    classifier_bias: Vec<f64>,
    masks: MaskSet,
    timestep_plan: TimestepPlan,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    #[serde(rename = "WK")]
    wk: Vec<Vec<f64>>,
    #[serde(rename = "WV")]
    wv: Vec<Vec<f64>>,
    #[serde(rename = "WQ")]
    wq: Vec<Vec<f64>>,
    #[serde(rename = "WO")]
    wo: Vec<Vec<f64>>,
    #[serde(rename = "Winter")]
    w_inter: Vec<Vec<f64>>,
    #[serde(rename = "Wout")]
    w_out: Vec<Vec<f64>>,
    biases: BiasFile,
    ln: LayerNormFile,
    vth: [f64; 6],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BiasFile {
    k: Vec<f64>,
    v: Vec<f64>,
    q: Vec<f64>,
    o: Vec<f64>,
    inter: Vec<f64>,
    out: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerNormFile {
    gain1: Vec<f64>,
    shift1: Vec<f64>,
    gain2: Vec<f64>,
    shift2: Vec<f64>,
}

fn matrix(rows: &[Vec<f64>], path: &str) -> Result<Matrix> {
    Matrix::from_rows(rows).map_err(|e| match e {
        Error::ShapeMismatch(m) => shape(format!("{path}: {m}")),
        Error::NonFinite(m) => Error::Parse {
            path: path.to_string(),
            message: m,
        },
        other => other,
    })
}

impl From<&Checkpoint> for CheckpointFile {
    fn from(c: &Checkpoint) -> Self {
        let m = &c.model;
        CheckpointFile {
            config: m.config.clone(),
            embedding: m.embedding.to_rows(),
            layers: m
                .layers
                .iter()
                .map(|l| LayerFile {
                    wk: l.wk.to_rows(),
                    wv: l.wv.to_rows(),
                    wq: l.wq.to_rows(),
                    wo: l.wo.to_rows(),
                    w_inter: l.w_inter.to_rows(),
                    w_out: l.w_out.to_rows(),
                    biases: BiasFile {
                        k: l.bk.clone(),
                        v: l.bv.clone(),
                        q: l.bq.clone(),
                        o: l.bo.clone(),
                        inter: l.b_inter.clone(),
                        out: l.b_out.clone(),
                    },
                    ln: LayerNormFile {
                        gain1: l.ln1_gain.clone(),
                        shift1: l.ln1_shift.clone(),
                        gain2: l.ln2_gain.clone(),
                        shift2: l.ln2_shift.clone(),
                    },
                    vth: l.vth,
                })
                .collect(),
            classifier: m.classifier.to_rows(),
            classifier_bias: m.classifier_bias.clone(),
            masks: c.masks.clone(),
            timestep_plan: c.plan.clone(),
        }
    }
}

impl CheckpointFile {
    fn into_checkpoint(self) -> Result<Checkpoint> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let p = |k: &str| format!("layers[{i}].{k}");
                Ok(EncoderLayer {
                    wk: matrix(&l.wk, &p("WK"))?,
                    bk: l.biases.k.clone(),
                    wv: matrix(&l.wv, &p("WV"))?,
                    bv: l.biases.v.clone(),
                    wq: matrix(&l.wq, &p("WQ"))?,
                    bq: l.biases.q.clone(),
                    wo: matrix(&l.wo, &p("WO"))?,
                    bo: l.biases.o.clone(),
                    w_inter: matrix(&l.w_inter, &p("Winter"))?,
                    b_inter: l.biases.inter.clone(),
                    w_out: matrix(&l.w_out, &p("Wout"))?,
                    b_out: l.biases.out.clone(),
                    ln1_gain: l.ln.gain1.clone(),
                    ln1_shift: l.ln.shift1.clone(),
                    ln2_gain: l.ln.gain2.clone(),
                    ln2_shift: l.ln.shift2.clone(),
                    vth: l.vth,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = SpikingModel {
            config: self.config,
            embedding: matrix(&self.embedding, "embedding")?,
            layers,
            classifier: matrix(&self.classifier, "classifier")?,
            classifier_bias: self.classifier_bias,
        };
        model.validate()?;
        self.masks.check_against(&model)?;
        self.timestep_plan.validate(model.layers.len(), model.config.t_conv)?;
        Ok(Checkpoint {
            model,
            masks: self.masks,
            plan: self.timestep_plan,
        })
    }
}

/// Serializes a checkpoint to its JSON text.
pub fn checkpoint_to_string(c: &Checkpoint) -> String {
    serde_json::to_string(&CheckpointFile::from(c)).expect("checkpoint serialization cannot fail")
}

/// Parses checkpoint JSON text, reporting the offending key path on error.
pub fn checkpoint_from_str(text: &str) -> Result<Checkpoint> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: CheckpointFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let mut path = e.path().to_string();
        let message = e.inner().to_string();
        if let Some(field) = message
            .strip_prefix("missing field `")
            .and_then(|rest| rest.split('`').next())
        {
            path = if path == "." {
                field.to_string()
            } else {
                format!("{path}.{field}")
            };
        }
        Error::Parse { path, message }
    })?;
    file.into_checkpoint()
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let mut text = checkpoint_to_string(checkpoint);
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    checkpoint_from_str(&fs::read_to_string(path)?)
}

/// Loads a checkpoint and checks its architecture against `expected`.
pub fn load_checkpoint_expecting(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<Checkpoint> {
    let c = load_checkpoint(path)?;
    let got = &c.model.config;
    let pairs = [
        ("num_layers", got.num_layers, expected.num_layers),
        ("hidden_size", got.hidden_size, expected.hidden_size),
        ("num_heads", got.num_heads, expected.num_heads),
        ("intermediate_size", got.intermediate_size, expected.intermediate_size),
        ("seq_len", got.seq_len, expected.seq_len),
        ("vocab_size", got.vocab_size, expected.vocab_size),
        ("num_classes", got.num_classes, expected.num_classes),
    ];
    for (name, g, e) in pairs {
        if g != e {
            return Err(shape(format!(
                "checkpoint has {name} = {g}, configuration expects {e}"
            )));
        }
    }
    Ok(c)
}
