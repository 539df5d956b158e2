//! Gaussian-mixture targets with closed-form marginals and scores.
//!
//! A mixture `Σ w_k N(m_k, C_k)` pushed through the transition kernel stays a
//! mixture: at time `t` the components are `N(α m_k, α² C_k + σ² I)`. With
//! component precisions `P_k`, component scores `u_k = −P_k (x − m_k)` and
//! responsibilities `γ_k(x)`, the marginal score and its Jacobian are
//!
//! ```text
//! s(x) = Σ γ_k u_k
//! J(x) = −Σ γ_k P_k + Σ γ_k u_k u_kᵀ − s sᵀ
//! ```
//!
//! and for a fixed direction `v`, with `a_k = (vᵀu_k)² − vᵀP_k v`,
//!
//! ```text
//! ∇_x (vᵀ J v) = Σ γ_k (u_k − s) a_k − 2 Σ γ_k (vᵀu_k) P_k v − 2 (vᵀs) J v.
//! ```
//!
//! Summing the last identity over `v = e_i` gives the gradient of the exact
//! divergence, which is what the Fokker–Planck identity check needs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::field::ScoreField;
use crate::rng;
use crate::sde::SdeSchedule;

const LN_2PI: f64 = 1.8378770664093453;

/// `Σ w_k N(m_k, C_k)` in `R^D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let gm = GaussianMixture {
            weights,
            means,
            covariances,
        };
        gm.validate()?;
        Ok(gm)
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 {
            return Err(Error::invalid("target.weights", "at least one component"));
        }
        if self.means.len() != k || self.covariances.len() != k {
            return Err(Error::invalid(
                "target",
                "weights, means and covariances must have equal length",
            ));
        }
        if self.weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::invalid("target.weights", "all weights must be > 0"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(
                "target.weights",
                format!("weights sum to {total}, expected 1"),
            ));
        }
        let d = self.dim();
        if d == 0 {
            return Err(Error::invalid("target.means", "dimension must be >= 1"));
        }
        for (i, (m, c)) in self.means.iter().zip(&self.covariances).enumerate() {
            if m.len() != d {
                return Err(Error::invalid(
                    format!("target.means[{i}]"),
                    format!("expected {d} entries"),
                ));
            }
            if c.len() != d || c.iter().any(|row| row.len() != d) {
                return Err(Error::invalid(
                    format!("target.covariances[{i}]"),
                    format!("expected a {d}x{d} matrix"),
                ));
            }
            for a in 0..d {
                for b in 0..a {
                    if (c[a][b] - c[b][a]).abs() > 1e-12 {
                        return Err(Error::invalid(
                            format!("target.covariances[{i}]"),
                            "matrix is not symmetric",
                        ));
                    }
                }
            }
            let eig = to_matrix(c).symmetric_eigen();
            if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
                return Err(Error::invalid(
                    format!("target.covariances[{i}]"),
                    "matrix is not positive definite",
                ));
            }
        }
        Ok(())
    }

    /// `N(0, I_D)`.
    pub fn standard_normal(dim: usize) -> Self {
        Self::isotropic(vec![1.0], vec![vec![0.0; dim]], 1.0)
    }

    /// Equal-weight pair at `(±2, 0)` with identity covariances.
    pub fn symmetric_pair() -> Self {
        Self::isotropic(
            vec![0.5, 0.5],
            vec![vec![2.0, 0.0], vec![-2.0, 0.0]],
            1.0,
        )
    }

    /// `n` equal-weight isotropic components evenly spaced on a circle.
    pub fn ring(n: usize, radius: f64, variance: f64) -> Self {
        let means = (0..n)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::isotropic(vec![1.0 / n as f64; n], means, variance)
    }

    /// Equal-weight pair at `(±1.5, 0)` whose covariances have eigenvalues
    /// `(1, 0.05)`, rotated by `±π/6`.
    pub fn anisotropic_pair() -> Self {
        let cov = |angle: f64| {
            let (s, c) = angle.sin_cos();
            let (l1, l2) = (1.0, 0.05);
            vec![
                vec![l1 * c * c + l2 * s * s, (l1 - l2) * c * s],
                vec![(l1 - l2) * c * s, l1 * s * s + l2 * c * c],
            ]
        };
        let a = std::f64::consts::PI / 6.0;
        GaussianMixture {
            weights: vec![0.5, 0.5],
            means: vec![vec![1.5, 0.0], vec![-1.5, 0.0]],
            covariances: vec![cov(a), cov(-a)],
        }
    }

    pub fn isotropic(weights: Vec<f64>, means: Vec<Vec<f64>>, variance: f64) -> Self {
        let d = means[0].len();
        let cov: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| if i == j { variance } else { 0.0 }).collect())
            .collect();
        let covariances = vec![cov; weights.len()];
        GaussianMixture {
            weights,
            means,
            covariances,
        }
    }

    /// The four standard test mixtures in 2-D.
    pub fn test_corpus() -> Vec<(&'static str, GaussianMixture)> {
        vec![
            ("standard_normal", Self::standard_normal(2)),
            ("symmetric_pair", Self::symmetric_pair()),
            ("ring5", Self::ring(5, 3.0, 0.09)),
            ("anisotropic_pair", Self::anisotropic_pair()),
        ]
    }

    /// The mixture itself, as a `t = 0` marginal.
    pub fn as_marginal(&self) -> MarginalMixture {
        MarginalMixture::build(
            0.0,
            &self.weights,
            self.means.iter().map(|m| DVector::from_column_slice(m)).collect(),
            self.covariances.iter().map(|c| to_matrix(c)).collect(),
        )
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        self.as_marginal().sample(n, rng)
    }

    /// Seeded draws.
    pub fn sample_seeded(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        self.sample(n, &mut rng::stream(seed, "target-sample"))
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let d = rows.len();
    DMatrix::from_fn(d, d, |i, j| rows[i][j])
}

/// Closed-form time-`t` marginal of a [`GaussianMixture`].
#[derive(Debug, Clone)]
pub struct MarginalMixture {
    pub t: f64,
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    precisions: Vec<DMatrix<f64>>,
    chol: Vec<DMatrix<f64>>,
    log_norm: Vec<f64>,
}

impl MarginalMixture {
    fn build(
        t: f64,
        weights: &[f64],
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Self {
        let d = means[0].len();
        let mut precisions = Vec::with_capacity(covariances.len());
        let mut chol = Vec::with_capacity(covariances.len());
        let mut log_norm = Vec::with_capacity(covariances.len());
        for (w, c) in weights.iter().zip(&covariances) {
            let ch = c
                .clone()
                .cholesky()
                .expect("covariance must be positive definite");
            let l = ch.l();
            let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            precisions.push(ch.inverse());
            log_norm.push(w.ln() - 0.5 * (d as f64 * LN_2PI + log_det));
            chol.push(l);
        }
        MarginalMixture {
            t,
            weights: weights.to_vec(),
            means,
            covariances,
            precisions,
            chol,
            log_norm,
        }
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn log_terms(&self, x: &DVector<f64>) -> Vec<f64> {
        self.means
            .iter()
            .zip(&self.precisions)
            .zip(&self.log_norm)
            .map(|((m, p), ln)| {
                let r = x - m;
                ln - 0.5 * r.dot(&(p * &r))
            })
            .collect()
    }

    /// `log p_t(x)` via log-sum-exp.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let terms = self.log_terms(&DVector::from_column_slice(x));
        log_sum_exp(&terms)
    }

    /// Responsibilities `γ_k(x)`.
    pub fn component_posterior(&self, x: &[f64]) -> Vec<f64> {
        self.posterior_dv(&DVector::from_column_slice(x))
    }

    fn posterior_dv(&self, x: &DVector<f64>) -> Vec<f64> {
        let terms = self.log_terms(x);
        let lse = log_sum_exp(&terms);
        terms.iter().map(|l| (l - lse).exp()).collect()
    }

    fn component_scores(&self, x: &DVector<f64>) -> Vec<DVector<f64>> {
        self.means
            .iter()
            .zip(&self.precisions)
            .map(|(m, p)| -(p * (x - m)))
            .collect()
    }

    pub fn exact_score(&self, x: &[f64]) -> Vec<f64> {
        let xv = DVector::from_column_slice(x);
        let gamma = self.posterior_dv(&xv);
        let u = self.component_scores(&xv);
        weighted_sum(&gamma, &u).as_slice().to_vec()
    }

    fn jacobian_parts(&self, x: &DVector<f64>) -> (Vec<f64>, Vec<DVector<f64>>, DVector<f64>, DMatrix<f64>) {
        let gamma = self.posterior_dv(x);
        let u = self.component_scores(x);
        let s = weighted_sum(&gamma, &u);
        let d = self.dim();
        let mut jac = DMatrix::<f64>::zeros(d, d);
        for ((g, p), uk) in gamma.iter().zip(&self.precisions).zip(&u) {
            jac -= p * *g;
            jac += uk * uk.transpose() * *g;
        }
        jac -= &s * s.transpose();
        (gamma, u, s, jac)
    }

    /// Row-major `D × D` Jacobian of the exact score.
    pub fn exact_jacobian(&self, x: &[f64]) -> Vec<f64> {
        let (_, _, _, jac) = self.jacobian_parts(&DVector::from_column_slice(x));
        // symmetric, so column-major storage equals row-major
        jac.as_slice().to_vec()
    }

    pub fn exact_divergence(&self, x: &[f64]) -> f64 {
        let (_, _, _, jac) = self.jacobian_parts(&DVector::from_column_slice(x));
        jac.trace()
    }

    /// `∇_x (vᵀ J v)` in closed form.
    pub fn grad_quadratic(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let xv = DVector::from_column_slice(x);
        let vv = DVector::from_column_slice(v);
        let (gamma, u, s, jac) = self.jacobian_parts(&xv);
        let vs = vv.dot(&s);
        let mut out = -(&jac * &vv) * (2.0 * vs);
        for ((g, uk), p) in gamma.iter().zip(&u).zip(&self.precisions) {
            let pv = p * &vv;
            let vu = vv.dot(uk);
            let a = vu * vu - vv.dot(&pv);
            out += (uk - &s) * (g * a);
            out -= pv * (2.0 * g * vu);
        }
        out.as_slice().to_vec()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        let d = self.dim();
        let mut cdf = Vec::with_capacity(self.weights.len());
        let mut acc = 0.0;
        for w in &self.weights {
            acc += w;
            cdf.push(acc);
        }
        (0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * acc;
                let k = cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1);
                let z = DVector::from_vec(rng::normal_vec(rng, d));
                let x = &self.means[k] + &self.chol[k] * z;
                x.as_slice().to_vec()
            })
            .collect()
    }
}

fn weighted_sum(gamma: &[f64], u: &[DVector<f64>]) -> DVector<f64> {
    let mut s = DVector::zeros(u[0].len());
    for (g, uk) in gamma.iter().zip(u) {
        s += uk * *g;
    }
    s
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

fn marginal_unchecked(gm: &GaussianMixture, sched: &SdeSchedule, t: f64) -> MarginalMixture {
    let (alpha, sigma) = sched.kernel_unchecked(t);
    let d = gm.dim();
    let means = gm
        .means
        .iter()
        .map(|m| DVector::from_column_slice(m) * alpha)
        .collect();
    let covariances = gm
        .covariances
        .iter()
        .map(|c| to_matrix(c) * (alpha * alpha) + DMatrix::identity(d, d) * (sigma * sigma))
        .collect();
    MarginalMixture::build(t, &gm.weights, means, covariances)
}

/// Component `k` of the result is `N(α m_k, α² C_k + σ² I)`.
pub fn marginal_at(gm: &GaussianMixture, sched: &SdeSchedule, t: f64) -> Result<MarginalMixture> {
    sched.kernel_params(t)?;
    Ok(marginal_unchecked(gm, sched, t))
}

/// Default step of the time finite difference.
pub const DT_STEP: f64 = 1e-5;

fn richardson_dt(gm: &GaussianMixture, sched: &SdeSchedule, t: f64, x: &[f64], h: f64) -> Vec<f64> {
    let central = |h: f64| -> Vec<f64> {
        let hi = marginal_unchecked(gm, sched, t + h).exact_score(x);
        let lo = marginal_unchecked(gm, sched, t - h).exact_score(x);
        hi.iter().zip(&lo).map(|(a, b)| (a - b) / (2.0 * h)).collect()
    };
    let coarse = central(h);
    let fine = central(0.5 * h);
    fine.iter()
        .zip(&coarse)
        .map(|(f, c)| (4.0 * f - c) / 3.0)
        .collect()
}

/// `∂_t ∇_x log p_t(x)` by Richardson-extrapolated central differences
/// (steps `h` and `h/2`, `h = 1e-5`).
///
/// The stencil needs `t − h ≥ 0`; it may step past `t_max` because the
/// kernel formulas are closed-form there.
pub fn exact_dt_score(
    gm: &GaussianMixture,
    sched: &SdeSchedule,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    check_len(gm.dim(), x.len())?;
    if !(t >= DT_STEP && t <= sched.t_max) {
        return Err(Error::TimeRange {
            t,
            lo: DT_STEP,
            hi: sched.t_max,
        });
    }
    Ok(richardson_dt(gm, sched, t, x, DT_STEP))
}

/// The exact score of a mixture under a schedule, as a [`ScoreField`].
#[derive(Debug, Clone)]
pub struct MixtureScore {
    pub target: GaussianMixture,
    pub schedule: SdeSchedule,
}

impl MixtureScore {
    pub fn new(target: GaussianMixture, schedule: SdeSchedule) -> Self {
        MixtureScore { target, schedule }
    }

    pub fn marginal(&self, t: f64) -> MarginalMixture {
        marginal_unchecked(&self.target, &self.schedule, t)
    }
}

impl ScoreField for MixtureScore {
    fn dim(&self) -> usize {
        self.target.dim()
    }
    fn score(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.marginal(t).exact_score(x)
    }
    fn jvp_x(&self, x: &[f64], t: f64, v: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let jac = self.marginal(t).exact_jacobian(x);
        (0..d)
            .map(|i| (0..d).map(|j| jac[i * d + j] * v[j]).sum())
            .collect()
    }
    fn vjp_x(&self, x: &[f64], t: f64, u: &[f64]) -> Vec<f64> {
        // J is symmetric
        self.jvp_x(x, t, u)
    }
    fn dt_score(&self, x: &[f64], t: f64) -> Vec<f64> {
        let h = DT_STEP.min(0.5 * t);
        richardson_dt(&self.target, &self.schedule, t, x, h)
    }
    fn grad_quadratic(&self, x: &[f64], t: f64, v: &[f64]) -> Vec<f64> {
        self.marginal(t).grad_quadratic(x, v)
    }
    fn jacobian(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.marginal(t).exact_jacobian(x)
    }
    fn divergence(&self, x: &[f64], t: f64) -> f64 {
        self.marginal(t).exact_divergence(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pair_1d() -> GaussianMixture {
        GaussianMixture::isotropic(vec![0.5, 0.5], vec![vec![2.0], vec![-2.0]], 1.0)
    }

    fn fd_score(mm: &MarginalMixture, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut hi = x.to_vec();
                let mut lo = x.to_vec();
                hi[i] += h;
                lo[i] -= h;
                (mm.log_density(&hi) - mm.log_density(&lo)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn validation_rejects_bad_mixtures() {
        let mut gm = GaussianMixture::symmetric_pair();
        assert!(gm.validate().is_ok());
        gm.weights = vec![0.6, 0.5];
        assert!(gm.validate().is_err());
        let mut gm = GaussianMixture::symmetric_pair();
        gm.covariances[0] = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(gm.validate().is_err());
        let mut gm = GaussianMixture::symmetric_pair();
        gm.covariances[1][0][1] = 0.1;
        assert!(gm.validate().is_err());
        for (_, gm) in GaussianMixture::test_corpus() {
            gm.validate().unwrap();
        }
    }

    #[test]
    fn marginal_examples() {
        let sched = SdeSchedule::vp(0.1, 20.0);
        let gm = GaussianMixture::anisotropic_pair();
        let m0 = marginal_at(&gm, &sched, 0.0).unwrap();
        for k in 0..2 {
            for i in 0..2 {
                assert_eq!(m0.means[k][i], gm.means[k][i]);
                for j in 0..2 {
                    assert_relative_eq!(m0.covariances[k][(i, j)], gm.covariances[k][i][j]);
                }
            }
        }
        let unit = GaussianMixture::standard_normal(2);
        let m = marginal_at(&unit, &sched, 0.37).unwrap();
        assert_relative_eq!(m.covariances[0][(0, 0)], 1.0, epsilon = 1e-14);
        assert_relative_eq!(m.covariances[0][(0, 1)], 0.0);

        // t where α = 0.5: ½(0.1 t + 9.95 t²) = ln 2
        let t = (-0.1 + (0.01 + 4.0 * 9.95 * 2.0 * 2f64.ln()).sqrt()) / (2.0 * 9.95);
        let (a, s) = sched.kernel_params(t).unwrap();
        assert_relative_eq!(a, 0.5, epsilon = 1e-12);
        let shifted = GaussianMixture::isotropic(vec![1.0], vec![vec![2.0, -4.0]], 1.0);
        let m = marginal_at(&shifted, &sched, t).unwrap();
        assert_relative_eq!(m.means[0][0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(m.means[0][1], -2.0, epsilon = 1e-12);
        assert_relative_eq!(m.covariances[0][(1, 1)], 0.25 + s * s, epsilon = 1e-12);
        assert!(marginal_at(&unit, &sched, 1.1).is_err());
    }

    #[test]
    fn score_examples() {
        let unit = GaussianMixture::standard_normal(2).as_marginal();
        assert_eq!(unit.exact_score(&[3.0, -1.0]), vec![-3.0, 1.0]);
        let pair = pair_1d().as_marginal();
        assert_eq!(pair.exact_score(&[0.0]), vec![0.0]);
        // d/dx log p at x = 2, high-precision reference
        assert_relative_eq!(
            pair.exact_score(&[2.0])[0],
            -0.001341400521865912,
            epsilon = 1e-14
        );
        let fd = fd_score(&pair, &[2.0], 1e-6);
        assert!((fd[0] - pair.exact_score(&[2.0])[0]).abs() < 1e-6);
    }

    #[test]
    fn score_matches_log_density_gradient_on_corpus() {
        let sched = SdeSchedule::vp(0.1, 20.0);
        let mut r = rng::stream(11, "test");
        for (_, gm) in GaussianMixture::test_corpus() {
            for &t in &[0.0, 1e-3, 0.1, 0.6] {
                let mm = marginal_at(&gm, &sched, t).unwrap();
                for x in gm.sample(10, &mut r) {
                    let fd = fd_score(&mm, &x, 1e-6);
                    for (a, b) in fd.iter().zip(mm.exact_score(&x)) {
                        assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn divergence_examples() {
        let unit = GaussianMixture::standard_normal(2).as_marginal();
        assert_relative_eq!(unit.exact_divergence(&[0.3, 0.1]), -2.0, epsilon = 1e-14);
        let scaled = GaussianMixture::isotropic(vec![1.0], vec![vec![0.0, 0.0]], 4.0).as_marginal();
        assert_relative_eq!(scaled.exact_divergence(&[0.3, 0.1]), -0.5, epsilon = 1e-14);
        let pair = pair_1d().as_marginal();
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.0] {
            let h = 1e-6;
            let fd = (pair.exact_score(&[x + h])[0] - pair.exact_score(&[x - h])[0]) / (2.0 * h);
            assert!((fd - pair.exact_divergence(&[x])).abs() < 1e-6);
        }
        // high-precision reference for d²/dx² log p at 2
        assert_relative_eq!(
            pair.exact_divergence(&[2.0]),
            -0.9946361972678964,
            epsilon = 1e-13
        );
    }

    #[test]
    fn grad_quadratic_matches_fd() {
        let sched = SdeSchedule::vp(0.1, 20.0);
        let mut r = rng::stream(5, "test");
        for (_, gm) in GaussianMixture::test_corpus() {
            let field = MixtureScore::new(gm.clone(), sched);
            for &t in &[1e-3, 0.2] {
                for x in gm.sample(5, &mut r) {
                    let v = rng::normal_vec(&mut r, 2);
                    let g = field.grad_quadratic(&x, t, &v);
                    let quad = |x: &[f64]| -> f64 {
                        let jv = field.jvp_x(x, t, &v);
                        jv.iter().zip(&v).map(|(a, b)| a * b).sum()
                    };
                    for i in 0..2 {
                        let h = 1e-5;
                        let mut hi = x.clone();
                        let mut lo = x.clone();
                        hi[i] += h;
                        lo[i] -= h;
                        let fd = (quad(&hi) - quad(&lo)) / (2.0 * h);
                        assert!((fd - g[i]).abs() < 1e-5 * (1.0 + g[i].abs()), "{fd} vs {}", g[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn divergence_matches_hutchinson_average() {
        let gm = GaussianMixture::anisotropic_pair();
        let field = MixtureScore::new(gm, SdeSchedule::default());
        let (x, t) = ([0.4, -0.3], 0.05);
        let exact = field.divergence(&x, t);
        let n = 100_000;
        let mut r = rng::stream(9, "test");
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let v = rng::normal_vec(&mut r, 2);
            let q: f64 = field.jvp_x(&x, t, &v).iter().zip(&v).map(|(a, b)| a * b).sum();
            sum += q;
            sq += q * q;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - exact).abs() < 4.0 * se);
    }

    #[test]
    fn dt_score_examples() {
        let vp = SdeSchedule::vp(0.1, 20.0);
        let unit = GaussianMixture::standard_normal(2);
        let d = exact_dt_score(&unit, &vp, 0.3, &[1.0, -2.0]).unwrap();
        assert!(d.iter().all(|v| v.abs() < 1e-6));
        assert!(exact_dt_score(&unit, &vp, 1e-6, &[1.0, -2.0]).is_err());
        assert!(exact_dt_score(&unit, &vp, 1.2, &[1.0, -2.0]).is_err());

        // VE: s = −x/(1+σ²), ∂_t s = x·(dσ²/dt)/(1+σ²)², dσ²/dt = 2 ln(σmax/σmin) σ²
        let ve = SdeSchedule::ve(0.01, 50.0);
        let x = [0.7, -1.3];
        for &t in &[0.1, 0.5, 0.9] {
            let s2 = ve.sigma(t).powi(2);
            let ds2 = 2.0 * 5000f64.ln() * s2;
            let d = exact_dt_score(&unit, &ve, t, &x).unwrap();
            for i in 0..2 {
                let want = x[i] * ds2 / (1.0 + s2).powi(2);
                assert!((d[i] - want).abs() < 1e-5 * (1.0 + want.abs()), "{} vs {want}", d[i]);
            }
        }
    }

    #[test]
    fn posterior_examples() {
        let unit = GaussianMixture::standard_normal(2).as_marginal();
        assert_eq!(unit.component_posterior(&[4.0, 1.0]), vec![1.0]);
        let pair = GaussianMixture::symmetric_pair().as_marginal();
        let g = pair.component_posterior(&[0.0, 0.0]);
        assert_relative_eq!(g[0], 0.5, epsilon = 1e-15);
        let far = GaussianMixture::isotropic(vec![0.5, 0.5], vec![vec![6.0, 0.0], vec![-6.0, 0.0]], 1.0)
            .as_marginal();
        assert!(far.component_posterior(&[6.0, 0.0])[0] > 0.999);
        // far-field stays finite through log-sum-exp
        let g = pair.component_posterior(&[400.0, 0.0]);
        assert!(g.iter().all(|v| v.is_finite()));
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sampling_statistics() {
        let unit = GaussianMixture::standard_normal(2);
        let n = 100_000;
        let xs = unit.sample_seeded(n, 1);
        for d in 0..2 {
            let mean = xs.iter().map(|x| x[d]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        }
        assert_eq!(xs, unit.sample_seeded(n, 1));

        let one_sided = GaussianMixture::isotropic(
            vec![1.0 - 1e-300, 1e-300],
            vec![vec![10.0, 0.0], vec![-10.0, 0.0]],
            1.0,
        );
        assert!(one_sided.sample_seeded(1000, 2).iter().all(|x| x[0] > 0.0));

        let gm = GaussianMixture::isotropic(vec![0.3, 0.7], vec![vec![8.0, 0.0], vec![-8.0, 0.0]], 1.0);
        let n = 20_000;
        let c = gm.sample_seeded(n, 3).iter().filter(|x| x[0] > 0.0).count();
        let p = c as f64 / n as f64;
        let se = (0.3 * 0.7 / n as f64).sqrt();
        assert!((p - 0.3).abs() < 4.0 * se);
    }
}
