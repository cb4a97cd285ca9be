//! Spiking simulation, the timestep plan, average-spiking-rate traces and
//! the differentiable rate proxy.

mod lif;
pub(crate) mod ops;
mod plan;
mod proxy;
mod sim;
mod trace;

pub use lif::{lif_step, LifState};
pub use plan::{LayerSteps, TimestepPlan};
pub use proxy::{
    proxy_backward, proxy_forward_tape, rate_proxy_forward, Gradients, LayerTape, ProxyOutput,
    ProxyTape, Resampler,
};
pub use sim::{
    run_sequential, run_sequential_with, run_unrolled, BernoulliSource, ReplaySource, SpikeSource,
};
pub use trace::{AsrTrace, Record, SimOutput};
pub(crate) use trace::argmax;
