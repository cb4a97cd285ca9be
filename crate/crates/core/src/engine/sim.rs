//! Spiking simulation in the two dataflows: complete unrolling, where every
//! sublayer advances once per global timestep, and sequential mapping, where
//! sublayers run one after another and only converged rates pass between
//! them.

use crate::engine::lif::Population;
use crate::engine::ops::{affine, attention, layer_norm, spike_matmul};
use crate::engine::trace::{AsrTrace, HistoryBuffer, Record, SimOutput};
use crate::engine::TimestepPlan;
use crate::error::{invalid, Result};
use crate::model::{EncoderLayer, MaskMode, MaskSet, MaskValues, SpikingModel, Sublayer};
use crate::numerics::{Matrix, RandomStream};

/// Produces input spike trains from converged rates in sequential mapping.
pub trait SpikeSource {
    /// Writes the spikes of step `tau` (1-based) of a train with the given
    /// rates into `out`.
    fn fill(&mut self, rates: &[f64], tau: usize, out: &mut [f64]);
}

/// Independent Bernoulli draws. Draws are taken row-major over
/// (timestep, unit), the same order as [`crate::numerics::bernoulli_matrix`].
pub struct BernoulliSource<'a>(pub &'a mut RandomStream);

impl SpikeSource for BernoulliSource<'_> {
    fn fill(&mut self, rates: &[f64], _tau: usize, out: &mut [f64]) {
        for (o, &p) in out.iter_mut().zip(rates) {
            *o = if self.0.bernoulli(p) { 1.0 } else { 0.0 };
        }
    }
}

/// Deterministic evenly spaced trains: a unit with rate `a` spikes at step
/// `τ` iff `⌊τa⌋ > ⌊(τ−1)a⌋`.
pub struct ReplaySource;

impl SpikeSource for ReplaySource {
    fn fill(&mut self, rates: &[f64], tau: usize, out: &mut [f64]) {
        let t = tau as f64;
        for (o, &a) in out.iter_mut().zip(rates) {
            *o = if (t * a).floor() > ((t - 1.0) * a).floor() { 1.0 } else { 0.0 };
        }
    }
}

fn mask_heads(ctx: &mut Matrix, head_mask: &[f64], head_dim: usize) {
    let cols = ctx.cols();
    for (i, v) in ctx.data_mut().iter_mut().enumerate() {
        *v *= head_mask[(i % cols) / head_dim];
    }
}

fn rates(pop: &Population, t: usize, rows: usize, cols: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    pop.rates_into(t, m.data_mut());
    m
}

fn add_into(a: &mut Matrix, b: &Matrix) {
    a.add_assign(b);
}

fn readout(model: &SpikingModel, last: &Matrix) -> Vec<f64> {
    let mut logits = model.classifier_bias.clone();
    for (j, &a) in last.row(0).iter().enumerate() {
        if a != 0.0 {
            for (o, &w) in logits.iter_mut().zip(model.classifier.row(j)) {
                *o += a * w;
            }
        }
    }
    logits
}

fn check(model: &SpikingModel, masks: &MaskSet) -> Result<MaskValues> {
    masks.check_against(model)?;
    Ok(masks.values(MaskMode::Binary))
}

struct UnrolledLayer {
    pops: [Population; 6],
    history: Option<Vec<HistoryBuffer>>,
}

/// Runs every sublayer for `t` synchronous timesteps. Spikes travel through
/// all layers within a timestep; attention and the Add & Norm sublayers read
/// the running rates of their inputs.
pub fn run_unrolled(
    model: &SpikingModel,
    masks: &MaskSet,
    tokens: &[u32],
    t: usize,
    record: Record,
) -> Result<SimOutput> {
    if t == 0 {
        return Err(invalid("simulation needs at least one timestep"));
    }
    let mv = check(model, masks)?;
    let x0 = model.encode_input(tokens)?;
    let n = model.config.seq_len;
    let d = model.config.hidden_size;
    let h = model.head_dim();
    let leak = model.config.leak;

    let mut input = Population::new(n, d, 1.0, leak);
    let mut layers: Vec<UnrolledLayer> = model
        .layers
        .iter()
        .map(|layer| {
            let widths = sublayer_widths(layer, d);
            UnrolledLayer {
                pops: std::array::from_fn(|i| Population::new(n, widths[i], layer.vth[i], leak)),
                history: (record == Record::History).then(|| {
                    widths.iter().map(|&w| HistoryBuffer::new(n * w, t)).collect()
                }),
            }
        })
        .collect();

    for step in 1..=t {
        input.step(x0.data(), None);
        let mut s_prev = input.state.s.clone();
        let mut a_prev = rates(&input, step, n, d);
        for (l, (layer, st)) in model.layers.iter().zip(layers.iter_mut()).enumerate() {
            let w = layer.attn_width();
            let dn = layer.num_neurons();
            let [pk, pv, pa, pao, pi, po] = &mut st.pops;

            pk.step(spike_matmul(&s_prev, &layer.wk, &layer.bk).data(), None);
            pv.step(spike_matmul(&s_prev, &layer.wv, &layer.bv).data(), None);

            let q = affine(&a_prev, &layer.wq, &layer.bq);
            let (mut ctx, _) = attention(&q, &rates(pk, step, n, w), &rates(pv, step, n, w), h);
            mask_heads(&mut ctx, &mv.heads[l], h);
            pa.step(ctx.data(), None);

            let mut z1 = affine(&rates(pa, step, n, w), &layer.wo, &layer.bo);
            add_into(&mut z1, &a_prev);
            let (c4, _, _) = layer_norm(&z1, &layer.ln1_gain, &layer.ln1_shift);
            pao.step(c4.data(), None);

            pi.step(
                spike_matmul(&pao.state.s, &layer.w_inter, &layer.b_inter).data(),
                Some(&mv.neurons[l]),
            );

            let a4 = rates(pao, step, n, d);
            let mut z2 = affine(&rates(pi, step, n, dn), &layer.w_out, &layer.b_out);
            add_into(&mut z2, &a4);
            let (c6, _, _) = layer_norm(&z2, &layer.ln2_gain, &layer.ln2_shift);
            po.step(c6.data(), None);

            if let Some(hist) = &mut st.history {
                for (buf, pop) in hist.iter_mut().zip(st.pops.iter()) {
                    let mut r = vec![0.0; pop.count.len()];
                    pop.rates_into(step, &mut r);
                    buf.push(&r);
                }
            }
            s_prev = st.pops[5].state.s.clone();
            a_prev = rates(&st.pops[5], step, n, d);
        }
    }

    let mut traces = Vec::with_capacity(6 * layers.len());
    for (l, st) in layers.into_iter().enumerate() {
        let mut hist = st.history.map(|v| v.into_iter());
        for (sub, pop) in Sublayer::ALL.iter().zip(st.pops.iter()) {
            let cols = pop.state.s.cols();
            traces.push(AsrTrace {
                layer: l,
                sublayer: *sub,
                timesteps: t,
                converged: rates(pop, t, n, cols),
                history: hist.as_mut().and_then(|it| it.next()).map(HistoryBuffer::finish),
            });
        }
    }
    let logits = readout(model, &traces.last().expect("at least one layer").converged);
    Ok(SimOutput { logits, traces })
}

fn sublayer_widths(layer: &EncoderLayer, d: usize) -> [usize; 6] {
    let w = layer.attn_width();
    [w, w, w, d, layer.num_neurons(), d]
}

/// Regenerated input trains for one sequential sublayer: each input's spikes
/// come from `source`, and its running rate is kept alongside.
struct Regenerated<'r> {
    rates: &'r Matrix,
    spikes: Matrix,
    count: Vec<f64>,
}

impl<'r> Regenerated<'r> {
    fn new(rates: &'r Matrix) -> Self {
        Self {
            rates,
            spikes: Matrix::zeros(rates.rows(), rates.cols()),
            count: vec![0.0; rates.len()],
        }
    }

    fn advance(&mut self, source: &mut dyn SpikeSource, tau: usize) {
        source.fill(self.rates.data(), tau, self.spikes.data_mut());
        for (c, &s) in self.count.iter_mut().zip(self.spikes.data()) {
            *c += s;
        }
    }

    fn running(&self, tau: usize) -> Matrix {
        let inv = 1.0 / tau as f64;
        let data = self.count.iter().map(|c| c * inv).collect();
        Matrix::from_vec(self.rates.rows(), self.rates.cols(), data).expect("finite")
    }
}

/// Runs one population for `t` steps with the current produced by `drive`.
fn run_population(
    t: usize,
    rows: usize,
    cols: usize,
    vth: f64,
    leak: f64,
    gate: Option<&[f64]>,
    record: Record,
    mut drive: impl FnMut(usize) -> Matrix,
) -> (Matrix, Option<Matrix>) {
    let mut pop = Population::new(rows, cols, vth, leak);
    let mut hist = (record == Record::History).then(|| HistoryBuffer::new(rows * cols, t));
    let mut r = vec![0.0; rows * cols];
    for tau in 1..=t {
        let current = drive(tau);
        pop.step(current.data(), gate);
        if let Some(hb) = &mut hist {
            pop.rates_into(tau, &mut r);
            hb.push(&r);
        }
    }
    (rates(&pop, t, rows, cols), hist.map(HistoryBuffer::finish))
}

/// Sequential mapping with Bernoulli regeneration of every input train.
pub fn run_sequential(
    model: &SpikingModel,
    masks: &MaskSet,
    plan: &TimestepPlan,
    tokens: &[u32],
    stream: &mut RandomStream,
    record: Record,
) -> Result<SimOutput> {
    run_sequential_with(model, masks, plan, tokens, &mut BernoulliSource(stream), record)
}

/// Sequential mapping: layers and sublayers run one at a time, each for its
/// own timestep count, with input trains regenerated by `source` from the
/// converged rates of the sublayers feeding it. The queries are computed from
/// the converged input rates.
pub fn run_sequential_with(
    model: &SpikingModel,
    masks: &MaskSet,
    plan: &TimestepPlan,
    tokens: &[u32],
    source: &mut dyn SpikeSource,
    record: Record,
) -> Result<SimOutput> {
    let mv = check(model, masks)?;
    plan.validate(model.layers.len(), model.config.t_conv)?;
    let n = model.config.seq_len;
    let d = model.config.hidden_size;
    let h = model.head_dim();
    let leak = model.config.leak;
    let mut a_in = model.encode_input(tokens)?;
    let mut traces = Vec::with_capacity(6 * model.layers.len());

    for (l, layer) in model.layers.iter().enumerate() {
        let w = layer.attn_width();
        let dn = layer.num_neurons();
        let steps = plan.layers[l].to_array();
        let vth = layer.vth;
        let mut push = |sub: Sublayer, (conv, hist): (Matrix, Option<Matrix>)| {
            traces.push(AsrTrace {
                layer: l,
                sublayer: sub,
                timesteps: steps[sub.index()],
                converged: conv.clone(),
                history: hist,
            });
            conv
        };

        let projection = |wm: &Matrix, b: &[f64], t: usize, vt: f64, source: &mut dyn SpikeSource| {
            let mut input = Regenerated::new(&a_in);
            run_population(t, n, w, vt, leak, None, record, |tau| {
                input.advance(source, tau);
                spike_matmul(&input.spikes, wm, b)
            })
        };
        let ak = push(Sublayer::Key, projection(&layer.wk, &layer.bk, steps[0], vth[0], source));
        let av = push(Sublayer::Value, projection(&layer.wv, &layer.bv, steps[1], vth[1], source));

        let q = affine(&a_in, &layer.wq, &layer.bq);
        let aa = {
            let mut kin = Regenerated::new(&ak);
            let mut vin = Regenerated::new(&av);
            push(
                Sublayer::Attention,
                run_population(steps[2], n, w, vth[2], leak, None, record, |tau| {
                    kin.advance(source, tau);
                    vin.advance(source, tau);
                    let (mut ctx, _) = attention(&q, &kin.running(tau), &vin.running(tau), h);
                    mask_heads(&mut ctx, &mv.heads[l], h);
                    ctx
                }),
            )
        };

        let a4 = {
            let mut ain = Regenerated::new(&aa);
            let mut rin = Regenerated::new(&a_in);
            push(
                Sublayer::AttentionOutput,
                run_population(steps[3], n, d, vth[3], leak, None, record, |tau| {
                    ain.advance(source, tau);
                    rin.advance(source, tau);
                    let mut z = affine(&ain.running(tau), &layer.wo, &layer.bo);
                    add_into(&mut z, &rin.running(tau));
                    layer_norm(&z, &layer.ln1_gain, &layer.ln1_shift).0
                }),
            )
        };

        let a5 = {
            let mut input = Regenerated::new(&a4);
            push(
                Sublayer::Intermediate,
                run_population(steps[4], n, dn, vth[4], leak, Some(&mv.neurons[l]), record, |tau| {
                    input.advance(source, tau);
                    spike_matmul(&input.spikes, &layer.w_inter, &layer.b_inter)
                }),
            )
        };

        let a6 = {
            let mut iin = Regenerated::new(&a5);
            let mut rin = Regenerated::new(&a4);
            push(
                Sublayer::Output,
                run_population(steps[5], n, d, vth[5], leak, None, record, |tau| {
                    iin.advance(source, tau);
                    rin.advance(source, tau);
                    let mut z = affine(&iin.running(tau), &layer.w_out, &layer.b_out);
                    add_into(&mut z, &rin.running(tau));
                    layer_norm(&z, &layer.ln2_gain, &layer.ln2_shift).0
                }),
            )
        };
        a_in = a6;
    }
    let logits = readout(model, &a_in);
    Ok(SimOutput { logits, traces })
}
