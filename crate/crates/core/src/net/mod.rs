//! MLP score network `s(x, t; θ) = MLP([x; embed(t)])`.
//!
//! Differentiation uses layer-local rules only (see [`jet`]): forward tangents
//! for JVPs in `x` and `t`, reverse adjoints for parameter gradients and VJPs,
//! and reverse-over-forward for losses built from tangents.

pub mod checkpoint;
pub mod jet;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::field::ScoreField;
use crate::rng;

pub use jet::{Activation, Jet, JetLayout};
use jet::{activate, activate_backward, Dense};

/// Sinusoidal features `[sin(ω_k t), cos(ω_k t)]` with `width / 2`
/// frequencies log-spaced between `min_freq` and `max_freq`. An odd width
/// appends the raw time `t` as the last feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub width: usize,
    pub min_freq: f64,
    pub max_freq: f64,
}

impl Default for TimeEmbedding {
    fn default() -> Self {
        TimeEmbedding {
            width: 32,
            min_freq: 1.0,
            max_freq: 100.0,
        }
    }
}

impl TimeEmbedding {
    pub fn frequencies(&self) -> Vec<f64> {
        let half = self.width / 2;
        if half == 0 {
            return Vec::new();
        }
        if half == 1 {
            return vec![self.min_freq];
        }
        let ratio = self.max_freq / self.min_freq;
        (0..half)
            .map(|k| self.min_freq * ratio.powf(k as f64 / (half - 1) as f64))
            .collect()
    }

    /// Writes the embedding and its first two `t`-derivatives.
    fn eval(&self, freqs: &[f64], t: f64, value: &mut [f64], d1: &mut [f64], d2: &mut [f64]) {
        let half = freqs.len();
        for (k, &w) in freqs.iter().enumerate() {
            let (s, c) = (w * t).sin_cos();
            value[k] = s;
            value[half + k] = c;
            d1[k] = w * c;
            d1[half + k] = -w * s;
            d2[k] = -w * w * s;
            d2[half + k] = -w * w * c;
        }
        if self.width % 2 == 1 {
            value[2 * half] = t;
            d1[2 * half] = 1.0;
            d2[2 * half] = 0.0;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::invalid("network.embedding.width", "must be >= 1"));
        }
        if !(self.min_freq > 0.0 && self.max_freq >= self.min_freq) {
            return Err(Error::invalid(
                "network.embedding",
                "need 0 < min_freq <= max_freq",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub embedding: TimeEmbedding,
}

impl Architecture {
    /// `[D+32, 128, 128, 128, D]` with SiLU.
    pub fn default_for(data_dim: usize) -> Self {
        Architecture {
            data_dim,
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
            embedding: TimeEmbedding::default(),
        }
    }

    /// Layer widths `[D + E, hidden.., D]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.data_dim + self.embedding.width];
        w.extend(&self.hidden);
        w.push(self.data_dim);
        w
    }

    pub fn n_params(&self) -> usize {
        self.widths().windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 {
            return Err(Error::invalid("network.data_dim", "must be >= 1"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid("network.hidden", "widths must be >= 1"));
        }
        self.embedding.validate()
    }
}

/// Per-layer tangent and pre-activation jets recorded by the forward pass.
pub struct Trace {
    inputs: Vec<Jet>,
    pre: Vec<Jet>,
}

/// Input tangent for one direction, per batch row. Empty vectors mean zero.
#[derive(Debug, Clone, Default)]
pub struct Tangent {
    /// `batch × D`, row-major.
    pub x: Vec<f64>,
    /// `batch`.
    pub t: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ScoreNet {
    arch: Architecture,
    params: Vec<f64>,
    transposed: Vec<Vec<f64>>,
    freqs: Vec<f64>,
}

struct LayerSpan {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

impl ScoreNet {
    /// Weights `N(0, 2/fan_in)`, biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, "net-init");
        let mut params = Vec::with_capacity(arch.n_params());
        for w in arch.widths().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            params.extend((0..fan_in * fan_out).map(|_| normal.sample(&mut rng)));
            params.extend(std::iter::repeat(0.0).take(fan_out));
        }
        Self::from_params(arch, params)
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        check_len(arch.n_params(), params.len())?;
        let freqs = arch.embedding.frequencies();
        let mut net = ScoreNet {
            arch,
            params,
            transposed: Vec::new(),
            freqs,
        };
        net.refresh();
        Ok(net)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    /// Mutates θ in place and rebuilds cached transposes.
    pub fn update_params(&mut self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.params);
        self.refresh();
    }

    fn spans(&self) -> Vec<LayerSpan> {
        let mut off = 0;
        self.arch
            .widths()
            .windows(2)
            .map(|w| {
                let span = LayerSpan {
                    fan_in: w[0],
                    fan_out: w[1],
                    w: off,
                    b: off + w[0] * w[1],
                };
                off += (w[0] + 1) * w[1];
                span
            })
            .collect()
    }

    fn refresh(&mut self) {
        let spans = self.spans();
        self.transposed = spans
            .iter()
            .map(|s| {
                let w = &self.params[s.w..s.b];
                let mut t = vec![0.0; w.len()];
                for o in 0..s.fan_out {
                    for i in 0..s.fan_in {
                        t[i * s.fan_out + o] = w[o * s.fan_in + i];
                    }
                }
                t
            })
            .collect();
    }

    fn dense(&self, l: usize, s: &LayerSpan) -> Dense<'_> {
        Dense {
            fan_in: s.fan_in,
            fan_out: s.fan_out,
            w: &self.params[s.w..s.b],
            wt: &self.transposed[l],
            b: &self.params[s.b..s.b + s.fan_out],
        }
    }

    /// Input jet for points `xs` (`batch × D`) at times `ts`.
    ///
    /// Second-order input components are nonzero only through the
    /// embedding: `embed''(t)·vt_i·vt_k`.
    pub fn input_jet(&self, xs: &[f64], ts: &[f64], layout: JetLayout, tangents: &[Tangent]) -> Jet {
        let d = self.arch.data_dim;
        let e = self.arch.embedding.width;
        let batch = ts.len();
        assert_eq!(xs.len(), batch * d, "xs must be batch x D");
        assert_eq!(tangents.len(), layout.n_dirs, "one tangent per direction");
        let mut jet = Jet::zeros(layout, batch, d + e);
        let (mut emb, mut d1, mut d2) = (vec![0.0; e], vec![0.0; e], vec![0.0; e]);
        let pairs = jet.layout.pairs.clone();
        let nd = jet.layout.n_dirs;
        for b in 0..batch {
            self.arch.embedding.eval(&self.freqs, ts[b], &mut emb, &mut d1, &mut d2);
            let row = jet.row_mut(0, b);
            row[..d].copy_from_slice(&xs[b * d..(b + 1) * d]);
            row[d..].copy_from_slice(&emb);
            for (i, tan) in tangents.iter().enumerate() {
                let row = jet.row_mut(1 + i, b);
                if !tan.x.is_empty() {
                    row[..d].copy_from_slice(&tan.x[b * d..(b + 1) * d]);
                }
                if !tan.t.is_empty() && tan.t[b] != 0.0 {
                    for (r, v) in row[d..].iter_mut().zip(&d1) {
                        *r = v * tan.t[b];
                    }
                }
            }
            for (p, &(i, k)) in pairs.iter().enumerate() {
                let ti = tangents[i].t.get(b).copied().unwrap_or(0.0);
                let tk = tangents[k].t.get(b).copied().unwrap_or(0.0);
                if ti != 0.0 && tk != 0.0 {
                    let row = jet.row_mut(1 + nd + p, b);
                    for (r, v) in row[d..].iter_mut().zip(&d2) {
                        *r = v * ti * tk;
                    }
                }
            }
        }
        jet
    }

    /// Pushes a jet through the network. With `keep_trace` the intermediate
    /// jets needed by [`ScoreNet::backward_jet`] are retained.
    pub fn forward_jet(&self, input: Jet, keep_trace: bool) -> (Jet, Option<Trace>) {
        let spans = self.spans();
        let last = spans.len() - 1;
        let mut trace = Trace {
            inputs: Vec::new(),
            pre: Vec::new(),
        };
        let mut h = input;
        for (l, s) in spans.iter().enumerate() {
            let a = self.dense(l, s).forward(&h);
            if l == last {
                if keep_trace {
                    trace.inputs.push(h);
                }
                return (a, keep_trace.then_some(trace));
            }
            let next = activate(self.arch.activation, &a);
            if keep_trace {
                trace.inputs.push(h);
                trace.pre.push(a);
            }
            h = next;
        }
        unreachable!("network has at least one layer")
    }

    /// Reverse pass. Returns `∂loss/∂θ` and, if requested, the input adjoint.
    pub fn backward_jet(&self, trace: &Trace, out_bar: Jet, want_input: bool) -> (Vec<f64>, Option<Jet>) {
        let spans = self.spans();
        let mut grad = vec![0.0; self.params.len()];
        let mut bar = out_bar;
        for (l, s) in spans.iter().enumerate().rev() {
            let (gw, rest) = grad[s.w..].split_at_mut(s.b - s.w);
            let gb = &mut rest[..s.fan_out];
            let need = l > 0 || want_input;
            let in_bar = self
                .dense(l, s)
                .backward(&trace.inputs[l], &bar, gw, gb, need);
            match in_bar {
                Some(ib) if l > 0 => {
                    bar = activate_backward(self.arch.activation, &trace.pre[l - 1], &ib);
                }
                other => return (grad, other),
            }
        }
        unreachable!("network has at least one layer")
    }

    /// Reverse-mode gradient of a scalar loss of the output jet. The closure
    /// returns the loss value together with its adjoint `∂loss/∂output`.
    pub fn grad_params<F>(&self, input: Jet, loss: F) -> (f64, Vec<f64>)
    where
        F: FnOnce(&Jet) -> (f64, Jet),
    {
        let (out, trace) = self.forward_jet(input, true);
        let (value, bar) = loss(&out);
        let (grad, _) = self.backward_jet(&trace.expect("trace kept"), bar, false);
        (value, grad)
    }

    fn check_x(&self, x: &[f64], t: f64) -> Result<()> {
        check_len(self.arch.data_dim, x.len())?;
        if !t.is_finite() {
            return Err(Error::invalid("t", "must be finite"));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_x(x, t)?;
        Ok(self.forward_batch(x, &[t]))
    }

    /// Scores for a batch of points (`xs` is `batch × D`).
    pub fn forward_batch(&self, xs: &[f64], ts: &[f64]) -> Vec<f64> {
        let jet = self.input_jet(xs, ts, JetLayout::value_only(), &[]);
        self.forward_jet(jet, false).0.data
    }

    /// `(∂s/∂x) vx + (∂s/∂t) vt`.
    pub fn jvp(&self, x: &[f64], t: f64, vx: &[f64], vt: f64) -> Result<Vec<f64>> {
        self.check_x(x, t)?;
        check_len(self.arch.data_dim, vx.len())?;
        Ok(self.jvp_unchecked(x, t, vx, vt))
    }

    fn jvp_unchecked(&self, x: &[f64], t: f64, vx: &[f64], vt: f64) -> Vec<f64> {
        let tan = Tangent {
            x: vx.to_vec(),
            t: vec![vt],
        };
        let jet = self.input_jet(x, &[t], JetLayout::first_order(1), &[tan]);
        let (out, _) = self.forward_jet(jet, false);
        out.row(1, 0).to_vec()
    }

    /// `uᵀ (∂s/∂x)` by a reverse pass.
    pub fn vjp(&self, x: &[f64], t: f64, u: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x, t)?;
        check_len(self.arch.data_dim, u.len())?;
        Ok(self.vjp_unchecked(x, t, u))
    }

    fn vjp_unchecked(&self, x: &[f64], t: f64, u: &[f64]) -> Vec<f64> {
        let jet = self.input_jet(x, &[t], JetLayout::value_only(), &[]);
        let (out, trace) = self.forward_jet(jet, true);
        let mut bar = Jet::zeros_like(&out);
        bar.row_mut(0, 0).copy_from_slice(u);
        let (_, in_bar) = self.backward_jet(&trace.unwrap(), bar, true);
        in_bar.unwrap().row(0, 0)[..self.arch.data_dim].to_vec()
    }
}

impl ScoreField for ScoreNet {
    fn dim(&self) -> usize {
        self.arch.data_dim
    }

    fn score(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.forward_batch(x, &[t])
    }

    fn score_batch(&self, xs: &[f64], ts: &[f64]) -> Vec<f64> {
        self.forward_batch(xs, ts)
    }

    fn jvp_x(&self, x: &[f64], t: f64, v: &[f64]) -> Vec<f64> {
        self.jvp_unchecked(x, t, v, 0.0)
    }

    fn vjp_x(&self, x: &[f64], t: f64, u: &[f64]) -> Vec<f64> {
        self.vjp_unchecked(x, t, u)
    }

    fn dt_score(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.jvp_unchecked(x, t, &vec![0.0; self.arch.data_dim], 1.0)
    }

    fn grad_quadratic(&self, x: &[f64], t: f64, v: &[f64]) -> Vec<f64> {
        let d = self.arch.data_dim;
        // directions: v, e_1..e_D; pairs (v, e_i)
        let mut tangents = vec![Tangent {
            x: v.to_vec(),
            t: Vec::new(),
        }];
        for i in 0..d {
            let mut e = vec![0.0; d];
            e[i] = 1.0;
            tangents.push(Tangent { x: e, t: Vec::new() });
        }
        let layout = JetLayout {
            n_dirs: d + 1,
            pairs: (0..d).map(|i| (0, 1 + i)).collect(),
        };
        let jet = self.input_jet(x, &[t], layout, &tangents);
        let (out, _) = self.forward_jet(jet, false);
        (0..d)
            .map(|i| {
                let row = out.row(out.layout.pair(i), 0);
                row.iter().zip(v).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    fn jacobian(&self, x: &[f64], t: f64) -> Vec<f64> {
        let d = self.arch.data_dim;
        let tangents: Vec<Tangent> = (0..d)
            .map(|i| {
                let mut e = vec![0.0; d];
                e[i] = 1.0;
                Tangent { x: e, t: Vec::new() }
            })
            .collect();
        let jet = self.input_jet(x, &[t], JetLayout::first_order(d), &tangents);
        let (out, _) = self.forward_jet(jet, false);
        let mut jac = vec![0.0; d * d];
        for j in 0..d {
            for (i, v) in out.row(1 + j, 0).iter().enumerate() {
                jac[i * d + j] = *v;
            }
        }
        jac
    }
}
