//! Per-sublayer timestep allocation from the temporal complexity of rate
//! traces: a sublayer whose cumulative rates need `c` principal components
//! gets `⌊T_conv · b^c / max_j b^{c_j}⌋` timesteps.

use crate::engine::{AsrTrace, TimestepPlan};
use crate::error::{invalid, shape, Result};
use crate::numerics::{pca_component_count, Matrix};

/// Guards floors against products like `0.29 · 100` landing a hair below an
/// integer.
const FLOOR_SLACK: f64 = 1e-12;

fn guarded_floor(x: f64) -> usize {
    (x * (1.0 + FLOOR_SLACK)).floor() as usize
}

/// PCA component count of every trace's `[timesteps × units]` history.
pub fn layer_importance(traces: &[AsrTrace], variance_threshold: f64) -> Result<Vec<usize>> {
    traces
        .iter()
        .map(|t| {
            let h = t.history.as_ref().ok_or_else(|| {
                invalid(format!(
                    "layer {} {} trace has no per-timestep history",
                    t.layer,
                    t.sublayer.name()
                ))
            })?;
            component_count(h, variance_threshold)
        })
        .collect()
}

/// PCA component count of one history matrix, rejecting traces shorter than
/// two timesteps.
pub fn component_count(history: &Matrix, variance_threshold: f64) -> Result<usize> {
    if history.rows() < 2 {
        return Err(invalid(format!(
            "a trace needs at least 2 timesteps, found {}",
            history.rows()
        )));
    }
    pca_component_count(history, variance_threshold)
}

/// Elementwise mean of per-sample histories of the same sublayer.
pub fn mean_history(histories: &[&Matrix]) -> Result<Matrix> {
    let first = histories.first().ok_or_else(|| invalid("no traces to average"))?;
    let mut acc = Matrix::zeros(first.rows(), first.cols());
    for h in histories {
        if h.shape() != first.shape() {
            return Err(shape("traces of one sublayer differ in shape"));
        }
        acc.add_assign(h);
    }
    let inv = 1.0 / histories.len() as f64;
    Ok(acc.map(|v| v * inv))
}

/// `t_i = max(1, ⌊T_conv · b^{c_i − max_j c_j}⌋)` for any list of counts.
pub fn allocate_counts(c: &[usize], base: f64, t_conv: usize) -> Result<Vec<usize>> {
    if !(base > 1.0) || !base.is_finite() {
        return Err(invalid(format!("PCA base must be greater than 1, got {base}")));
    }
    if t_conv == 0 {
        return Err(invalid("T_conv must be at least 1"));
    }
    let max = *c.iter().max().ok_or_else(|| invalid("no component counts given"))?;
    Ok(c.iter()
        .map(|&ci| {
            let ratio = base.powi(-((max - ci) as i32));
            guarded_floor(t_conv as f64 * ratio).clamp(1, t_conv)
        })
        .collect())
}

/// Builds a plan from layer-major component counts, six per layer.
pub fn allocate_timesteps(c: &[usize], base: f64, t_conv: usize) -> Result<TimestepPlan> {
    TimestepPlan::from_flat(t_conv, &allocate_counts(c, base, t_conv)?)
}

/// Multiplies every count by `rho`, rounding down but keeping at least one.
pub fn scale_plan(plan: &TimestepPlan, rho: f64) -> Result<TimestepPlan> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(invalid(format!("scale factor must lie in (0, 1], got {rho}")));
    }
    let flat: Vec<usize> = plan
        .flat()
        .into_iter()
        .map(|t| guarded_floor(rho * t as f64).max(1))
        .collect();
    TimestepPlan::from_flat(plan.t_conv, &flat)
}
