use crate::error::{shape, Result};
use crate::numerics::Matrix;

/// Membrane potentials and the previous timestep's spikes of a population.
#[derive(Clone, Debug, PartialEq)]
pub struct LifState {
    pub u: Matrix,
    pub s: Matrix,
}

impl LifState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            u: Matrix::zeros(rows, cols),
            s: Matrix::zeros(rows, cols),
        }
    }

    /// Advances one timestep in place. `current` is row-major over the same
    /// shape as the state; the new spikes are left in `self.s`.
    pub fn step(&mut self, current: &[f64], vth: f64, leak: f64) {
        debug_assert_eq!(current.len(), self.u.len());
        for ((u, s), &i) in self
            .u
            .data_mut()
            .iter_mut()
            .zip(self.s.data_mut())
            .zip(current)
        {
            *u = leak * *u + i - *s * vth;
            *s = if *u - vth >= 0.0 { 1.0 } else { 0.0 };
        }
    }
}

/// One LIF update with reset by subtraction; `H(0) = 1`.
pub fn lif_step(state: &LifState, current: &Matrix, vth: f64, leak: f64) -> Result<(LifState, Matrix)> {
    if current.shape() != state.u.shape() {
        return Err(shape(format!(
            "current {:?} does not match state {:?}",
            current.shape(),
            state.u.shape()
        )));
    }
    let mut next = state.clone();
    next.step(current.data(), vth, leak);
    let spikes = next.s.clone();
    Ok((next, spikes))
}

/// A population that also counts spikes, so its running average spiking rate
/// is `count / t`.
#[derive(Clone, Debug)]
pub(crate) struct Population {
    pub state: LifState,
    pub count: Vec<f64>,
    pub vth: f64,
    pub leak: f64,
}

impl Population {
    pub fn new(rows: usize, cols: usize, vth: f64, leak: f64) -> Self {
        Self {
            state: LifState::new(rows, cols),
            count: vec![0.0; rows * cols],
            vth,
            leak,
        }
    }

    /// Steps the population; spikes where `gate` is zero are suppressed from
    /// the output and the count.
    pub fn step(&mut self, current: &[f64], gate: Option<&[f64]>) {
        self.state.step(current, self.vth, self.leak);
        if let Some(g) = gate {
            let cols = self.state.s.cols();
            for (i, s) in self.state.s.data_mut().iter_mut().enumerate() {
                *s *= g[i % cols];
            }
        }
        for (c, &s) in self.count.iter_mut().zip(self.state.s.data()) {
            *c += s;
        }
    }

    pub fn rates_into(&self, t: usize, out: &mut [f64]) {
        let inv = 1.0 / t as f64;
        for (o, &c) in out.iter_mut().zip(&self.count) {
            *o = c * inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(u: f64, s: f64) -> LifState {
        LifState {
            u: Matrix::filled(1, 1, u),
            s: Matrix::filled(1, 1, s),
        }
    }

    #[test]
    fn zero_state_stays_silent() {
        let (next, spikes) = lif_step(&one(0.0, 0.0), &Matrix::zeros(1, 1), 0.7, 1.0).unwrap();
        assert_eq!(next.u.get(0, 0), 0.0);
        assert_eq!(spikes.get(0, 0), 0.0);
    }

    #[test]
    fn crossing_threshold_spikes() {
        let (next, spikes) = lif_step(&one(0.6, 0.0), &Matrix::filled(1, 1, 0.5), 1.0, 1.0).unwrap();
        assert!((next.u.get(0, 0) - 1.1).abs() < 1e-15);
        assert_eq!(spikes.get(0, 0), 1.0);
    }

    #[test]
    fn reset_by_subtraction() {
        let (next, spikes) = lif_step(&one(1.1, 1.0), &Matrix::filled(1, 1, 0.2), 1.0, 1.0).unwrap();
        assert!((next.u.get(0, 0) - 0.3).abs() < 1e-15);
        assert_eq!(spikes.get(0, 0), 0.0);
    }

    #[test]
    fn equality_at_threshold_spikes() {
        let (_, spikes) = lif_step(&one(0.0, 0.0), &Matrix::filled(1, 1, 1.0), 1.0, 1.0).unwrap();
        assert_eq!(spikes.get(0, 0), 1.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(lif_step(&one(0.0, 0.0), &Matrix::zeros(1, 2), 1.0, 1.0).is_err());
    }

    #[test]
    fn leak_scales_membrane() {
        let (next, _) = lif_step(&one(0.5, 0.0), &Matrix::zeros(1, 1), 1.0, 0.5).unwrap();
        assert_eq!(next.u.get(0, 0), 0.25);
    }

    #[test]
    fn constant_drive_rate_is_drive_over_threshold() {
        let mut p = Population::new(1, 1, 1.0, 1.0);
        for _ in 0..2000 {
            p.step(&[0.3], None);
        }
        assert!((p.count[0] / 2000.0 - 0.3).abs() < 1e-3);
    }
}
