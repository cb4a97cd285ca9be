//! Steady-state rate proxy: every LIF sublayer is replaced by the map
//! `a = clip(c / V_th, 0, 1)` from its constant input current `c`, which is
//! the converged rate of an integrate-and-fire neuron with reset by
//! subtraction. The forward pass records a tape that [`proxy_backward`]
//! differentiates by hand.

use crate::engine::ops::{affine, attention, clip_rate, layer_norm};
use crate::engine::TimestepPlan;
use crate::error::Result;
use crate::model::{EncoderLayer, MaskMode, MaskSet, MaskValues, SpikingModel};
use crate::numerics::{Matrix, RandomStream};

/// Makes the proxy see finite timesteps: every sublayer input is replaced by
/// the empirical rate of a regenerated train of the sublayer's length, and
/// every output rate is rounded down to a whole spike count. Gradients pass
/// straight through both.
#[derive(Clone, Debug)]
pub struct Resampler {
    pub plan: TimestepPlan,
    pub stream: RandomStream,
}

impl Resampler {
    fn input(&mut self, a: &Matrix, t: usize) -> Matrix {
        let tf = t as f64;
        let data = a
            .data()
            .iter()
            .map(|&p| self.stream.binomial(t as u64, p) as f64 / tf)
            .collect();
        Matrix::from_vec(a.rows(), a.cols(), data).expect("rates are finite")
    }
}

fn quantize(a: &mut Matrix, t: usize) {
    let tf = t as f64;
    for v in a.data_mut() {
        *v = (tf * *v + 1e-9).floor().min(tf) / tf;
    }
}

fn rate_map(c: &Matrix, vth: f64) -> Matrix {
    c.map(|x| clip_rate(x, vth))
}

/// Forward values of one layer needed by the backward pass.
#[derive(Clone, Debug)]
pub struct LayerTape {
    a_in: Matrix,
    xk: Matrix,
    ck: Matrix,
    pub ak: Matrix,
    xv: Matrix,
    cv: Matrix,
    pub av: Matrix,
    q: Matrix,
    kin: Matrix,
    vin: Matrix,
    probs: Vec<Matrix>,
    ctx: Matrix,
    ca: Matrix,
    pub aa: Matrix,
    xa: Matrix,
    xhat1: Matrix,
    inv1: Vec<f64>,
    c4: Matrix,
    pub a4: Matrix,
    x5: Matrix,
    c5: Matrix,
    r5: Matrix,
    pub a5: Matrix,
    xi6: Matrix,
    xhat2: Matrix,
    inv2: Vec<f64>,
    c6: Matrix,
    pub a6: Matrix,
}

impl LayerTape {
    /// Output rates of the six sublayers in forward order.
    pub fn rates(&self) -> [&Matrix; 6] {
        [&self.ak, &self.av, &self.aa, &self.a4, &self.a5, &self.a6]
    }
}

#[derive(Clone, Debug)]
pub struct ProxyTape {
    pub layers: Vec<LayerTape>,
    pub logits: Vec<f64>,
}

/// Logits and the per-sublayer rates (layer-major, six per layer).
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyOutput {
    pub logits: Vec<f64>,
    pub rates: Vec<Matrix>,
}

/// Closed-form steady-state forward pass of one input sequence.
pub fn rate_proxy_forward(
    model: &SpikingModel,
    masks: &MaskSet,
    mode: MaskMode,
    tokens: &[u32],
) -> Result<ProxyOutput> {
    masks.check_against(model)?;
    let x0 = model.encode_input(tokens)?;
    let tape = proxy_forward_tape(model, &masks.values(mode), &x0, None);
    Ok(ProxyOutput {
        logits: tape.logits.clone(),
        rates: tape
            .layers
            .iter()
            .flat_map(|l| l.rates().map(Matrix::clone))
            .collect(),
    })
}

/// Forward pass recording everything the backward pass needs. `x0` is the
/// encoded input; masks are taken as given (no shape checks).
pub fn proxy_forward_tape(
    model: &SpikingModel,
    mv: &MaskValues,
    x0: &Matrix,
    mut resample: Option<&mut Resampler>,
) -> ProxyTape {
    let h = model.head_dim();
    let mut a_in = x0.clone();
    let mut layers = Vec::with_capacity(model.layers.len());
    for (l, layer) in model.layers.iter().enumerate() {
        let v = layer.vth;
        let steps = resample.as_ref().map(|r| r.plan.layers[l].to_array());
        let mut take = |a: &Matrix, sub: usize| match (resample.as_deref_mut(), steps) {
            (Some(r), Some(s)) => r.input(a, s[sub]),
            _ => a.clone(),
        };
        let out = |c: &Matrix, vth: f64, sub: usize| {
            let mut a = rate_map(c, vth);
            if let Some(s) = steps {
                quantize(&mut a, s[sub]);
            }
            a
        };

        let xk = take(&a_in, 0);
        let ck = affine(&xk, &layer.wk, &layer.bk);
        let ak = out(&ck, v[0], 0);
        let xv = take(&a_in, 1);
        let cv = affine(&xv, &layer.wv, &layer.bv);
        let av = out(&cv, v[1], 1);

        let q = affine(&a_in, &layer.wq, &layer.bq);
        let kin = take(&ak, 2);
        let vin = take(&av, 2);
        let (ctx, probs) = attention(&q, &kin, &vin, h);
        let mut ca = ctx.clone();
        let cols = ca.cols();
        for (i, x) in ca.data_mut().iter_mut().enumerate() {
            *x *= mv.heads[l][(i % cols) / h];
        }
        let aa = out(&ca, v[2], 2);

        let xa = take(&aa, 3);
        let xr1 = take(&a_in, 3);
        let mut z1 = affine(&xa, &layer.wo, &layer.bo);
        z1.add_assign(&xr1);
        let (c4, xhat1, inv1) = layer_norm(&z1, &layer.ln1_gain, &layer.ln1_shift);
        let a4 = out(&c4, v[3], 3);

        let x5 = take(&a4, 4);
        let c5 = affine(&x5, &layer.w_inter, &layer.b_inter);
        let r5 = out(&c5, v[4], 4);
        let mut a5 = r5.clone();
        let dn = a5.cols();
        for (i, x) in a5.data_mut().iter_mut().enumerate() {
            *x *= mv.neurons[l][i % dn];
        }

        let xi6 = take(&a5, 5);
        let xr6 = take(&a4, 5);
        let mut z2 = affine(&xi6, &layer.w_out, &layer.b_out);
        z2.add_assign(&xr6);
        let (c6, xhat2, inv2) = layer_norm(&z2, &layer.ln2_gain, &layer.ln2_shift);
        let a6 = out(&c6, v[5], 5);

        layers.push(LayerTape {
            a_in: std::mem::replace(&mut a_in, a6.clone()),
            xk,
            ck,
            ak,
            xv,
            cv,
            av,
            q,
            kin,
            vin,
            probs,
            ctx,
            ca,
            aa,
            xa,
            xhat1,
            inv1,
            c4,
            a4,
            x5,
            c5,
            r5,
            a5,
            xi6,
            xhat2,
            inv2,
            c6,
            a6,
        });
    }
    let last = &layers.last().expect("at least one layer").a6;
    let mut logits = model.classifier_bias.clone();
    for (j, &a) in last.row(0).iter().enumerate() {
        for (o, &w) in logits.iter_mut().zip(model.classifier.row(j)) {
            *o += a * w;
        }
    }
    ProxyTape { layers, logits }
}

/// Gradients of a scalar loss with respect to everything trainable. Layer
/// gradients reuse [`EncoderLayer`] so they line up with
/// [`EncoderLayer::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<EncoderLayer>,
    pub classifier: Matrix,
    pub classifier_bias: Vec<f64>,
    pub heads: Vec<Vec<f64>>,
    pub neurons: Vec<Vec<f64>>,
}

fn zeros_like(layer: &EncoderLayer) -> EncoderLayer {
    let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
    let zv = |v: &[f64]| vec![0.0; v.len()];
    EncoderLayer {
        wk: z(&layer.wk),
        bk: zv(&layer.bk),
        wv: z(&layer.wv),
        bv: zv(&layer.bv),
        wq: z(&layer.wq),
        bq: zv(&layer.bq),
        wo: z(&layer.wo),
        bo: zv(&layer.bo),
        w_inter: z(&layer.w_inter),
        b_inter: zv(&layer.b_inter),
        w_out: z(&layer.w_out),
        b_out: zv(&layer.b_out),
        ln1_gain: zv(&layer.ln1_gain),
        ln1_shift: zv(&layer.ln1_shift),
        ln2_gain: zv(&layer.ln2_gain),
        ln2_shift: zv(&layer.ln2_shift),
        vth: [0.0; 6],
    }
}

impl Gradients {
    pub fn zeros(model: &SpikingModel) -> Self {
        let h = model.head_dim();
        Self {
            layers: model.layers.iter().map(zeros_like).collect(),
            classifier: Matrix::zeros(model.classifier.rows(), model.classifier.cols()),
            classifier_bias: vec![0.0; model.classifier_bias.len()],
            heads: model.layers.iter().map(|l| vec![0.0; l.num_heads(h)]).collect(),
            neurons: model.layers.iter().map(|l| vec![0.0; l.num_neurons()]).collect(),
        }
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.tensors_mut().into_iter().zip(b.tensors()) {
                for (p, q) in x.iter_mut().zip(y) {
                    *p += scale * q;
                }
            }
        }
        let pairs = [
            (self.classifier.data_mut(), other.classifier.data()),
            (&mut self.classifier_bias[..], &other.classifier_bias[..]),
        ];
        for (x, y) in pairs {
            for (p, q) in x.iter_mut().zip(y) {
                *p += scale * q;
            }
        }
        for (x, y) in self
            .heads
            .iter_mut()
            .zip(&other.heads)
            .chain(self.neurons.iter_mut().zip(&other.neurons))
        {
            for (p, q) in x.iter_mut().zip(y) {
                *p += scale * q;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.tensors().iter().all(|t| t.iter().all(|v| v.is_finite())))
            && self.classifier.is_finite()
            && self.classifier_bias.iter().all(|v| v.is_finite())
    }
}

/// Accumulates `dL/dc` and `dL/dV_th` through `a = clip(c / v, 0, 1)`. The
/// kinks at 0 and 1 get zero slope.
fn clip_backward(da: &Matrix, c: &Matrix, v: f64, dv: &mut f64) -> Matrix {
    let mut dc = Matrix::zeros(c.rows(), c.cols());
    let inv = 1.0 / v;
    for ((o, &g), &x) in dc.data_mut().iter_mut().zip(da.data()).zip(c.data()) {
        let r = x * inv;
        if r > 0.0 && r < 1.0 {
            *o = g * inv;
            *dv -= g * x * inv * inv;
        }
    }
    dc
}

fn ln_backward(dc: &Matrix, xhat: &Matrix, inv: &[f64], gain: &[f64], dgain: &mut [f64], dshift: &mut [f64]) -> Matrix {
    let d = dc.cols();
    let df = d as f64;
    let mut dz = Matrix::zeros(dc.rows(), d);
    let mut dxh = vec![0.0; d];
    for r in 0..dc.rows() {
        let g = dc.row(r);
        let xh = xhat.row(r);
        for c in 0..d {
            dgain[c] += g[c] * xh[c];
            dshift[c] += g[c];
            dxh[c] = g[c] * gain[c];
        }
        let s1: f64 = dxh.iter().sum();
        let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
        for (c, o) in dz.row_mut(r).iter_mut().enumerate() {
            *o = inv[r] / df * (df * dxh[c] - s1 - xh[c] * s2);
        }
    }
    dz
}

/// `c = x·W + b`: accumulates `dW`, `db` and returns `dx`.
fn affine_backward(dc: &Matrix, x: &Matrix, w: &Matrix, dw: &mut Matrix, db: &mut [f64]) -> Matrix {
    dw.add_assign(&x.t_matmul(dc));
    for (b, s) in db.iter_mut().zip(dc.column_sums()) {
        *b += s;
    }
    dc.matmul_t(w)
}

/// Backward pass of [`proxy_forward_tape`]. `d_logits` is `dL/dlogits`;
/// `d_outputs[l]`, when present, is an extra gradient on layer `l`'s encoder
/// output rates. Results are added into `grads`.
pub fn proxy_backward(
    model: &SpikingModel,
    mv: &MaskValues,
    tape: &ProxyTape,
    d_logits: &[f64],
    d_outputs: &[Option<Matrix>],
    grads: &mut Gradients,
) {
    let h = model.head_dim();
    let scale = 1.0 / (h as f64).sqrt();
    let last = &tape.layers.last().expect("at least one layer").a6;
    let mut da6 = Matrix::zeros(last.rows(), last.cols());
    for (j, &a) in last.row(0).iter().enumerate() {
        let wrow = model.classifier.row(j);
        let g: f64 = wrow.iter().zip(d_logits).map(|(w, d)| w * d).sum();
        da6.set(0, j, g);
        for (o, &d) in grads.classifier.row_mut(j).iter_mut().zip(d_logits) {
            *o += a * d;
        }
    }
    for (b, &d) in grads.classifier_bias.iter_mut().zip(d_logits) {
        *b += d;
    }

    for l in (0..tape.layers.len()).rev() {
        let t = &tape.layers[l];
        let layer = &model.layers[l];
        let g = &mut grads.layers[l];
        if let Some(Some(extra)) = d_outputs.get(l) {
            da6.add_assign(extra);
        }
        let v = layer.vth;

        let dc6 = clip_backward(&da6, &t.c6, v[5], &mut g.vth[5]);
        let dz2 = ln_backward(&dc6, &t.xhat2, &t.inv2, &layer.ln2_gain, &mut g.ln2_gain, &mut g.ln2_shift);
        let da5 = affine_backward(&dz2, &t.xi6, &layer.w_out, &mut g.w_out, &mut g.b_out);
        let mut da4 = dz2;

        let dn = t.r5.cols();
        let mut dr5 = da5.clone();
        for (i, (o, &r)) in dr5.data_mut().iter_mut().zip(t.r5.data()).enumerate() {
            let j = i % dn;
            grads.neurons[l][j] += *o * r;
            *o *= mv.neurons[l][j];
        }
        let dc5 = clip_backward(&dr5, &t.c5, v[4], &mut g.vth[4]);
        da4.add_assign(&affine_backward(&dc5, &t.x5, &layer.w_inter, &mut g.w_inter, &mut g.b_inter));

        let dc4 = clip_backward(&da4, &t.c4, v[3], &mut g.vth[3]);
        let dz1 = ln_backward(&dc4, &t.xhat1, &t.inv1, &layer.ln1_gain, &mut g.ln1_gain, &mut g.ln1_shift);
        let daa = affine_backward(&dz1, &t.xa, &layer.wo, &mut g.wo, &mut g.bo);
        let mut da_in = dz1;

        let dca = clip_backward(&daa, &t.ca, v[2], &mut g.vth[2]);
        let w = dca.cols();
        let mut dctx = dca.clone();
        for (i, (o, &c)) in dctx.data_mut().iter_mut().zip(t.ctx.data()).enumerate() {
            let head = (i % w) / h;
            grads.heads[l][head] += *o * c;
            *o *= mv.heads[l][head];
        }

        let n = dctx.rows();
        let mut dq = Matrix::zeros(n, w);
        let mut dk = Matrix::zeros(n, w);
        let mut dv = Matrix::zeros(n, w);
        for (hd, p) in t.probs.iter().enumerate() {
            let off = hd * h;
            let cols: Vec<usize> = (off..off + h).collect();
            let dch = dctx.select_columns(&cols);
            let vh = t.vin.select_columns(&cols);
            let kh = t.kin.select_columns(&cols);
            let qh = t.q.select_columns(&cols);
            let dp = dch.matmul_t(&vh);
            let dvh = p.t_matmul(&dch);
            let mut ds = Matrix::zeros(n, n);
            for i in 0..n {
                let pr = p.row(i);
                let dpr = dp.row(i);
                let dot: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                for (j, o) in ds.row_mut(i).iter_mut().enumerate() {
                    *o = pr[j] * (dpr[j] - dot) * scale;
                }
            }
            let dqh = ds.matmul(&kh);
            let dkh = ds.t_matmul(&qh);
            for i in 0..n {
                dq.row_mut(i)[off..off + h].copy_from_slice(dqh.row(i));
                dk.row_mut(i)[off..off + h].copy_from_slice(dkh.row(i));
                dv.row_mut(i)[off..off + h].copy_from_slice(dvh.row(i));
            }
        }
        da_in.add_assign(&affine_backward(&dq, &t.a_in, &layer.wq, &mut g.wq, &mut g.bq));

        let dck = clip_backward(&dk, &t.ck, v[0], &mut g.vth[0]);
        da_in.add_assign(&affine_backward(&dck, &t.xk, &layer.wk, &mut g.wk, &mut g.bk));
        let dcv = clip_backward(&dv, &t.cv, v[1], &mut g.vth[1]);
        da_in.add_assign(&affine_backward(&dcv, &t.xv, &layer.wv, &mut g.wv, &mut g.bv));

        da6 = da_in;
    }
}
