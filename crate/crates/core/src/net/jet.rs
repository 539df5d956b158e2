//! Truncated multi-directional Taylor jets for the MLP.
//!
//! A [`Jet`] carries, for every batch row and every unit of a layer, the value
//! `y`, first-order tangents `∂_i y` along a set of input directions, and
//! selected second-order mixed tangents `∂_i ∂_k y`. Affine layers act on all
//! components with the same weight matrix (bias on the value only); an
//! elementwise activation `φ` acts as
//!
//! ```text
//! y      = φ(a)
//! ∂_i y  = φ'(a) ∂_i a
//! ∂_ik y = φ''(a) ∂_i a ∂_k a + φ'(a) ∂_ik a
//! ```
//!
//! The reverse pass differentiates these rules again, which is why the
//! activation needs a third derivative. Gradients of losses that contain
//! Jacobian-vector products or their spatial gradients come out exact.

use serde::{Deserialize, Serialize};

/// Smooth activation. Both options are C^∞.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
        }
    }

    #[inline]
    pub fn value(&self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Silu => a / (1.0 + (-a).exp()),
        }
    }

    /// `(φ, φ', φ'', φ''')` at `a`.
    #[inline]
    pub fn derivs(&self, a: f64) -> [f64; 4] {
        match self {
            Activation::Tanh => {
                let y = a.tanh();
                let q = 1.0 - y * y;
                [y, q, -2.0 * y * q, -2.0 * q * (1.0 - 3.0 * y * y)]
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-a).exp());
                let ds = s * (1.0 - s);
                let k = 1.0 - 2.0 * s;
                [
                    a * s,
                    s + a * ds,
                    ds * (2.0 + a * k),
                    ds * k * (2.0 + a * k) + ds * (k - 2.0 * a * ds),
                ]
            }
        }
    }
}

/// Which components a jet carries: `n_dirs` first-order tangents and the
/// listed pairs `(i, k)` of second-order mixed tangents.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct JetLayout {
    pub n_dirs: usize,
    pub pairs: Vec<(usize, usize)>,
}

impl JetLayout {
    pub fn value_only() -> Self {
        Self::default()
    }

    pub fn first_order(n_dirs: usize) -> Self {
        JetLayout {
            n_dirs,
            pairs: Vec::new(),
        }
    }

    pub fn n_comp(&self) -> usize {
        1 + self.n_dirs + self.pairs.len()
    }

    pub fn dir(&self, i: usize) -> usize {
        1 + i
    }

    pub fn pair(&self, p: usize) -> usize {
        1 + self.n_dirs + p
    }
}

/// Component-major storage: `data[(c * batch + b) * width + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub layout: JetLayout,
    pub batch: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Jet {
    pub fn zeros(layout: JetLayout, batch: usize, width: usize) -> Self {
        let n = layout.n_comp() * batch * width;
        Jet {
            layout,
            batch,
            width,
            data: vec![0.0; n],
        }
    }

    pub fn zeros_like(other: &Jet) -> Self {
        Self::zeros(other.layout.clone(), other.batch, other.width)
    }

    #[inline]
    pub fn offset(&self, c: usize, b: usize) -> usize {
        (c * self.batch + b) * self.width
    }

    #[inline]
    pub fn row(&self, c: usize, b: usize) -> &[f64] {
        let o = self.offset(c, b);
        &self.data[o..o + self.width]
    }

    #[inline]
    pub fn row_mut(&mut self, c: usize, b: usize) -> &mut [f64] {
        let o = self.offset(c, b);
        &mut self.data[o..o + self.width]
    }

    fn rows(&self) -> usize {
        self.layout.n_comp() * self.batch
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dense layer `out = W in + b` with `W` stored row-major as `fan_out × fan_in`
/// and `wt` its transpose.
pub(crate) struct Dense<'a> {
    pub fan_in: usize,
    pub fan_out: usize,
    pub w: &'a [f64],
    pub wt: &'a [f64],
    pub b: &'a [f64],
}

impl Dense<'_> {
    pub fn forward(&self, input: &Jet) -> Jet {
        debug_assert_eq!(input.width, self.fan_in);
        let mut out = Jet::zeros(input.layout.clone(), input.batch, self.fan_out);
        let batch = input.batch;
        for r in 0..input.rows() {
            let src = &input.data[r * self.fan_in..(r + 1) * self.fan_in];
            let dst = &mut out.data[r * self.fan_out..(r + 1) * self.fan_out];
            if r < batch {
                dst.copy_from_slice(self.b);
            }
            for (i, &h) in src.iter().enumerate() {
                if h != 0.0 {
                    axpy(h, &self.wt[i * self.fan_out..(i + 1) * self.fan_out], dst);
                }
            }
        }
        out
    }

    /// Accumulates `dW`, `db` into `grad_w`, `grad_b`; returns the input
    /// adjoint when requested.
    pub fn backward(
        &self,
        input: &Jet,
        out_bar: &Jet,
        grad_w: &mut [f64],
        grad_b: &mut [f64],
        want_input: bool,
    ) -> Option<Jet> {
        let batch = input.batch;
        for r in 0..input.rows() {
            let src = &input.data[r * self.fan_in..(r + 1) * self.fan_in];
            let bar = &out_bar.data[r * self.fan_out..(r + 1) * self.fan_out];
            if r < batch {
                for (g, a) in grad_b.iter_mut().zip(bar) {
                    *g += a;
                }
            }
            for (o, &a) in bar.iter().enumerate() {
                if a != 0.0 {
                    axpy(a, src, &mut grad_w[o * self.fan_in..(o + 1) * self.fan_in]);
                }
            }
        }
        if !want_input {
            return None;
        }
        let mut in_bar = Jet::zeros_like(input);
        for r in 0..input.rows() {
            let bar = &out_bar.data[r * self.fan_out..(r + 1) * self.fan_out];
            let dst = &mut in_bar.data[r * self.fan_in..(r + 1) * self.fan_in];
            for (o, &a) in bar.iter().enumerate() {
                if a != 0.0 {
                    axpy(a, &self.w[o * self.fan_in..(o + 1) * self.fan_in], dst);
                }
            }
        }
        Some(in_bar)
    }
}

pub(crate) fn activate(act: Activation, pre: &Jet) -> Jet {
    let mut out = Jet::zeros_like(pre);
    let nd = pre.layout.n_dirs;
    let pairs = &pre.layout.pairs;
    let (batch, width) = (pre.batch, pre.width);
    let idx = |c: usize, b: usize, j: usize| (c * batch + b) * width + j;
    if nd == 0 && pairs.is_empty() {
        for (o, &a) in out.data.iter_mut().zip(&pre.data) {
            *o = act.value(a);
        }
        return out;
    }
    for b in 0..batch {
        for j in 0..width {
            let a = pre.data[idx(0, b, j)];
            let [y, d1, d2, _] = act.derivs(a);
            out.data[idx(0, b, j)] = y;
            for i in 0..nd {
                let k = idx(1 + i, b, j);
                out.data[k] = d1 * pre.data[k];
            }
            for (p, &(i, k)) in pairs.iter().enumerate() {
                let c = idx(1 + nd + p, b, j);
                out.data[c] = d2 * pre.data[idx(1 + i, b, j)] * pre.data[idx(1 + k, b, j)]
                    + d1 * pre.data[c];
            }
        }
    }
    out
}

pub(crate) fn activate_backward(act: Activation, pre: &Jet, out_bar: &Jet) -> Jet {
    let mut bar = Jet::zeros_like(pre);
    let nd = pre.layout.n_dirs;
    let pairs = &pre.layout.pairs;
    let (batch, width) = (pre.batch, pre.width);
    let idx = |c: usize, b: usize, j: usize| (c * batch + b) * width + j;
    for b in 0..batch {
        for j in 0..width {
            let v0 = idx(0, b, j);
            let [_, d1, d2, d3] = act.derivs(pre.data[v0]);
            let mut a_bar = d1 * out_bar.data[v0];
            for i in 0..nd {
                let k = idx(1 + i, b, j);
                let yb = out_bar.data[k];
                a_bar += d2 * pre.data[k] * yb;
                bar.data[k] = d1 * yb;
            }
            for (p, &(i, k)) in pairs.iter().enumerate() {
                let c = idx(1 + nd + p, b, j);
                let yb = out_bar.data[c];
                if yb == 0.0 {
                    continue;
                }
                let ai = pre.data[idx(1 + i, b, j)];
                let ak = pre.data[idx(1 + k, b, j)];
                a_bar += (d3 * ai * ak + d2 * pre.data[c]) * yb;
                bar.data[idx(1 + i, b, j)] += d2 * ak * yb;
                bar.data[idx(1 + k, b, j)] += d2 * ai * yb;
                bar.data[c] = d1 * yb;
            }
            bar.data[v0] = a_bar;
        }
    }
    bar
}
