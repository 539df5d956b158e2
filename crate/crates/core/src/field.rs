//! Common interface for anything that can stand in for a score `s(x, t)`.
//!
//! The network, the closed-form mixture scores and small hand-written test
//! fields all implement [`ScoreField`], so losses, residuals, diagnostics and
//! the sampler are written once against this trait.

/// A time-dependent vector field on `R^D` with the first and second
/// derivatives required by the Fokker–Planck error.
pub trait ScoreField: Sync {
    fn dim(&self) -> usize;

    fn score(&self, x: &[f64], t: f64) -> Vec<f64>;

    /// Scores for many points; `xs` is `n × D` row-major, one time per row.
    fn score_batch(&self, xs: &[f64], ts: &[f64]) -> Vec<f64> {
        let d = self.dim();
        ts.iter()
            .enumerate()
            .flat_map(|(b, &t)| self.score(&xs[b * d..(b + 1) * d], t))
            .collect()
    }

    /// `J v` with `J = ∂s/∂x`.
    fn jvp_x(&self, x: &[f64], t: f64, v: &[f64]) -> Vec<f64>;

    /// `uᵀ J`.
    fn vjp_x(&self, x: &[f64], t: f64, u: &[f64]) -> Vec<f64>;

    /// `∂s/∂t`.
    fn dt_score(&self, x: &[f64], t: f64) -> Vec<f64>;

    /// `∇_x (vᵀ J(x) v)` for a fixed probe `v`.
    fn grad_quadratic(&self, x: &[f64], t: f64, v: &[f64]) -> Vec<f64>;

    /// Row-major `D × D` Jacobian, assembled from unit-vector JVPs.
    fn jacobian(&self, x: &[f64], t: f64) -> Vec<f64> {
        let d = self.dim();
        let mut jac = vec![0.0; d * d];
        let mut e = vec![0.0; d];
        for j in 0..d {
            e[j] = 1.0;
            let col = self.jvp_x(x, t, &e);
            for i in 0..d {
                jac[i * d + j] = col[i];
            }
            e[j] = 0.0;
        }
        jac
    }

    /// `tr J`.
    fn divergence(&self, x: &[f64], t: f64) -> f64 {
        let d = self.dim();
        let jac = self.jacobian(x, t);
        (0..d).map(|i| jac[i * d + i]).sum()
    }

    /// `∇_x tr J = Σ_i ∇_x(e_iᵀ J e_i)`.
    fn grad_divergence(&self, x: &[f64], t: f64) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        let mut e = vec![0.0; d];
        for i in 0..d {
            e[i] = 1.0;
            for (o, g) in out.iter_mut().zip(self.grad_quadratic(x, t, &e)) {
                *o += g;
            }
            e[i] = 0.0;
        }
        out
    }
}

impl<T: ScoreField + ?Sized> ScoreField for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn score(&self, x: &[f64], t: f64) -> Vec<f64> {
        (**self).score(x, t)
    }
    fn score_batch(&self, xs: &[f64], ts: &[f64]) -> Vec<f64> {
        (**self).score_batch(xs, ts)
    }
    fn jvp_x(&self, x: &[f64], t: f64, v: &[f64]) -> Vec<f64> {
        (**self).jvp_x(x, t, v)
    }
    fn vjp_x(&self, x: &[f64], t: f64, u: &[f64]) -> Vec<f64> {
        (**self).vjp_x(x, t, u)
    }
    fn dt_score(&self, x: &[f64], t: f64) -> Vec<f64> {
        (**self).dt_score(x, t)
    }
    fn grad_quadratic(&self, x: &[f64], t: f64, v: &[f64]) -> Vec<f64> {
        (**self).grad_quadratic(x, t, v)
    }
    fn jacobian(&self, x: &[f64], t: f64) -> Vec<f64> {
        (**self).jacobian(x, t)
    }
    fn divergence(&self, x: &[f64], t: f64) -> f64 {
        (**self).divergence(x, t)
    }
    fn grad_divergence(&self, x: &[f64], t: f64) -> Vec<f64> {
        (**self).grad_divergence(x, t)
    }
}

/// Time-independent linear field `s(x) = A x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearField {
    pub dim: usize,
    /// Row-major `D × D`.
    pub matrix: Vec<f64>,
}

impl LinearField {
    pub fn new(dim: usize, matrix: Vec<f64>) -> Self {
        assert_eq!(matrix.len(), dim * dim, "matrix must be D x D");
        LinearField { dim, matrix }
    }

    pub fn scaled_identity(dim: usize, c: f64) -> Self {
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            m[i * dim + i] = c;
        }
        Self::new(dim, m)
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| (0..d).map(|j| self.matrix[i * d + j] * v[j]).sum())
            .collect()
    }
}

impl ScoreField for LinearField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn score(&self, x: &[f64], _t: f64) -> Vec<f64> {
        self.apply(x)
    }
    fn jvp_x(&self, _x: &[f64], _t: f64, v: &[f64]) -> Vec<f64> {
        self.apply(v)
    }
    fn vjp_x(&self, _x: &[f64], _t: f64, u: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|j| (0..d).map(|i| u[i] * self.matrix[i * d + j]).sum())
            .collect()
    }
    fn dt_score(&self, _x: &[f64], _t: f64) -> Vec<f64> {
        vec![0.0; self.dim]
    }
    fn grad_quadratic(&self, _x: &[f64], _t: f64, _v: &[f64]) -> Vec<f64> {
        vec![0.0; self.dim]
    }
}

/// The zero field.
#[derive(Debug, Clone, Copy)]
pub struct ZeroField(pub usize);

impl ScoreField for ZeroField {
    fn dim(&self) -> usize {
        self.0
    }
    fn score(&self, _x: &[f64], _t: f64) -> Vec<f64> {
        vec![0.0; self.0]
    }
    fn jvp_x(&self, _x: &[f64], _t: f64, _v: &[f64]) -> Vec<f64> {
        vec![0.0; self.0]
    }
    fn vjp_x(&self, _x: &[f64], _t: f64, _u: &[f64]) -> Vec<f64> {
        vec![0.0; self.0]
    }
    fn dt_score(&self, _x: &[f64], _t: f64) -> Vec<f64> {
        vec![0.0; self.0]
    }
    fn grad_quadratic(&self, _x: &[f64], _t: f64, _v: &[f64]) -> Vec<f64> {
        vec![0.0; self.0]
    }
}
