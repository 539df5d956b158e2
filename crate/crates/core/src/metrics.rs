//! Sample-quality metrics in data space.
//!
//! Features are the raw coordinates. Distances inside density/coverage are
//! compared as squared Euclidean distances, which preserves every `≤` test.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::target::GaussianMixture;

pub const DEFAULT_K: usize = 5;
/// Ridge added to a covariance fit that is not positive definite.
pub const COV_RIDGE: f64 = 1e-9;

/// Sample mean and unbiased covariance.
pub fn gaussian_fit(points: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = points.len();
    let d = points[0].len();
    let mut mean = DVector::zeros(d);
    for p in points {
        mean += DVector::from_column_slice(p);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for p in points {
        let c = DVector::from_column_slice(p) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2 (Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
pub fn frechet_from_stats(mu1: &DVector<f64>, c1: &DMatrix<f64>, mu2: &DVector<f64>, c2: &DMatrix<f64>) -> f64 {
    let s1 = sym_sqrt(c1);
    let inner = &s1 * c2 * &s1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = inner
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let v = (mu1 - mu2).norm_squared() + c1.trace() + c2.trace() - 2.0 * cross;
    v.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frechet {
    pub value: f64,
    /// Set when a covariance fit needed the ridge `COV_RIDGE · I`.
    pub regularized: bool,
}

/// Adds the ridge when the smallest eigenvalue is not clearly positive.
fn regularize(c: DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let min = c.clone().symmetric_eigen().eigenvalues.min();
    if min > 1e-12 * c.trace().abs().max(f64::MIN_POSITIVE) {
        (c, false)
    } else {
        let d = c.nrows();
        (c + DMatrix::identity(d, d) * COV_RIDGE, true)
    }
}

/// Fréchet distance between Gaussian fits of two point sets.
pub fn frechet_gaussian(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<Frechet> {
    let d = check_sets(real, fake)?;
    for (name, set) in [("real", real), ("fake", fake)] {
        if set.len() < d + 1 {
            return Err(Error::invalid(name, format!("need at least D + 1 = {} points", d + 1)));
        }
    }
    let (m1, c1) = gaussian_fit(real);
    let (m2, c2) = gaussian_fit(fake);
    let (c1, r1) = regularize(c1);
    let (c2, r2) = regularize(c2);
    Ok(Frechet {
        value: frechet_from_stats(&m1, &c1, &m2, &c2),
        regularized: r1 || r2,
    })
}

fn check_sets(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<usize> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::invalid("samples", "point sets must be nonempty"));
    }
    let d = real[0].len();
    if let Some(p) = real.iter().chain(fake).find(|p| p.len() != d) {
        return Err(Error::Shape { expected: d, got: p.len() });
    }
    Ok(d)
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Squared k-NN radius of each real point within the real set, self excluded.
pub fn knn_radii2(real: &[Vec<f64>], k: usize) -> Vec<f64> {
    real.par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut ds: Vec<f64> = real
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| dist2(p, q))
                .collect();
            let (_, kth, _) = ds.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

/// `(density, coverage)` with k-NN balls around the real points.
pub fn density_coverage(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> Result<(f64, f64)> {
    check_sets(real, fake)?;
    if k == 0 || k >= real.len() {
        return Err(Error::invalid("k_neighbors", "need 1 <= k < n_real"));
    }
    let radii = knn_radii2(real, k);
    let hits: Vec<usize> = fake
        .par_iter()
        .map(|f| real.iter().zip(&radii).filter(|(r, &rad)| dist2(f, r) <= rad).count())
        .collect();
    let covered: Vec<bool> = real
        .par_iter()
        .zip(&radii)
        .map(|(r, &rad)| fake.iter().any(|f| dist2(f, r) <= rad))
        .collect();
    let density = hits.iter().sum::<usize>() as f64 / (k * fake.len()) as f64;
    let coverage = covered.iter().filter(|&&c| c).count() as f64 / real.len() as f64;
    Ok((density, coverage))
}

/// Component counts under argmax-posterior assignment at `t = 0`.
pub fn assignment_counts(fake: &[Vec<f64>], target: &GaussianMixture) -> Vec<usize> {
    let marginal = target.as_marginal();
    let mut counts = vec![0; target.n_components()];
    for x in fake {
        let post = marginal.component_posterior(x);
        let best = (0..post.len())
            .max_by(|&a, &b| post[a].total_cmp(&post[b]).then(b.cmp(&a)))
            .expect("at least one component");
        counts[best] += 1;
    }
    counts
}

/// Plug-in Shannon entropy (nats) of the empirical assignment distribution.
pub fn assignment_entropy(fake: &[Vec<f64>], target: &GaussianMixture) -> Result<f64> {
    if fake.is_empty() {
        return Err(Error::invalid("fake", "point set must be nonempty"));
    }
    Ok(entropy_of_counts(&assignment_counts(fake, target)))
}

pub fn entropy_of_counts(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frechet: f64,
    pub frechet_regularized: bool,
    pub density: f64,
    pub coverage: f64,
    pub entropy: f64,
    pub assignment_counts: Vec<usize>,
    pub k_neighbors: usize,
    pub n_real: usize,
    pub n_fake: usize,
    pub density_convention: String,
}

/// All four metrics for one pair of point sets.
pub fn evaluate(real: &[Vec<f64>], fake: &[Vec<f64>], target: &GaussianMixture, k: usize) -> Result<MetricReport> {
    let fr = frechet_gaussian(real, fake)?;
    let (density, coverage) = density_coverage(real, fake, k)?;
    let counts = assignment_counts(fake, target);
    Ok(MetricReport {
        frechet: fr.value,
        frechet_regularized: fr.regularized,
        density,
        coverage,
        entropy: entropy_of_counts(&counts),
        assignment_counts: counts,
        k_neighbors: k,
        n_real: real.len(),
        n_fake: fake.len(),
        density_convention: "raw ratio in [0, inf), not multiplied by 100".into(),
    })
}
