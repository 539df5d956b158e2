//! Randomized invariants across modules.

use fplab::diagnostics::{score_field_dump, GridSpec};
use fplab::metrics::{density_coverage, evaluate, frechet_gaussian};
use fplab::net::{Activation, Architecture, TimeEmbedding};
use fplab::objective::{draw_batch, penalty, ObjectiveSpec, Penalty};
use fplab::target::MixtureScore;
use fplab::{GaussianMixture, ScoreField, ScoreNet, SdeSchedule};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn small_net(seed: u64) -> ScoreNet {
    let arch = Architecture {
        data_dim: 2,
        hidden: vec![16, 16],
        activation: Activation::Silu,
        embedding: TimeEmbedding {
            width: 8,
            ..TimeEmbedding::default()
        },
    };
    ScoreNet::init(arch, seed).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn vec2() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, 2)
}

fn point_set(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(vec2(), n)
}

fn rotate(points: &[Vec<f64>], angle: f64, shift: [f64; 2]) -> Vec<Vec<f64>> {
    let (s, c) = angle.sin_cos();
    points
        .iter()
        .map(|p| vec![c * p[0] - s * p[1] + shift[0], s * p[0] + c * p[1] + shift[1]])
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn vp_variance_is_preserved(t in 1e-5..1.0f64) {
        let (a, s) = SdeSchedule::default().kernel_params(t).unwrap();
        prop_assert!((a * a + s * s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jvp_is_linear_in_the_tangent(
        seed in 0u64..1000, x in vec2(), t in 1e-4..1.0f64,
        v1 in vec2(), v2 in vec2(), a in -2.0..2.0f64, b in -2.0..2.0f64,
    ) {
        let net = small_net(seed);
        let mix: Vec<f64> = v1.iter().zip(&v2).map(|(p, q)| a * p + b * q).collect();
        let lhs = net.jvp_x(&x, t, &mix);
        let j1 = net.jvp_x(&x, t, &v1);
        let j2 = net.jvp_x(&x, t, &v2);
        for i in 0..2 {
            let rhs = a * j1[i] + b * j2[i];
            prop_assert!((lhs[i] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn jvp_and_vjp_give_the_same_bilinear_form(
        seed in 0u64..1000, x in vec2(), t in 1e-4..1.0f64, u in vec2(), v in vec2(),
    ) {
        let net = small_net(seed);
        let fwd = dot(&u, &net.jvp_x(&x, t, &v));
        let rev = dot(&net.vjp_x(&x, t, &u), &v);
        prop_assert!((fwd - rev).abs() <= 1e-10 * fwd.abs().max(1e-8));
    }

    #[test]
    fn penalties_are_nonnegative(seed in 0u64..1000, lambda in 0.0..2.0f64) {
        let net = small_net(seed);
        let sched = SdeSchedule::default();
        let gm = GaussianMixture::symmetric_pair();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for p in Penalty::ALL {
            let spec = ObjectiveSpec::with_penalty(p, lambda);
            let batch = draw_batch(&gm, &sched, &spec, 8, &mut rng);
            prop_assert!(penalty(&net, &sched, &batch, &spec) >= 0.0);
        }
    }

    #[test]
    fn frechet_is_symmetric(a in point_set(5..40), b in point_set(5..40)) {
        let ab = frechet_gaussian(&a, &b).unwrap().value;
        let ba = frechet_gaussian(&b, &a).unwrap().value;
        prop_assert!((ab - ba).abs() < 1e-9 * (1.0 + ab));
    }

    #[test]
    fn coverage_grows_with_k(real in point_set(8..30), fake in point_set(1..30)) {
        let mut last = 0.0;
        for k in 1..real.len().min(6) {
            let (_, c) = density_coverage(&real, &fake, k).unwrap();
            prop_assert!(c >= last);
            last = c;
        }
    }

    #[test]
    fn metrics_survive_rigid_motions(
        real in point_set(8..30), fake in point_set(8..30),
        angle in 0.0..std::f64::consts::TAU, shift in vec2(),
    ) {
        let shift = [shift[0], shift[1]];
        let (r2, f2) = (rotate(&real, angle, shift), rotate(&fake, angle, shift));
        let before = frechet_gaussian(&real, &fake).unwrap().value;
        let after = frechet_gaussian(&r2, &f2).unwrap().value;
        prop_assert!((before - after).abs() < 1e-9 * (1.0 + before));
        // A quarter turn keeps coordinates exact, so neighbourhood tests are
        // unchanged bit for bit; general angles round distances.
        let exact = |p: &[Vec<f64>]| p.iter().map(|v| vec![-v[1], v[0]]).collect::<Vec<_>>();
        prop_assert_eq!(
            density_coverage(&real, &fake, 3).unwrap(),
            density_coverage(&exact(&real), &exact(&fake), 3).unwrap()
        );
    }

    #[test]
    fn scaled_field_columns_are_exact_products(t in 1e-4..1.0f64) {
        let sched = SdeSchedule::default();
        let oracle = MixtureScore::new(GaussianMixture::symmetric_pair(), sched);
        let grid = GridSpec { nx: 5, ny: 4, ..GridSpec::default() };
        let sigma = sched.sigma(t);
        for r in score_field_dump(&oracle, &sched, &[t], &grid).unwrap() {
            prop_assert_eq!(r.s1_scaled, sigma * r.s1);
            prop_assert_eq!(r.s2_scaled, sigma * r.s2);
            prop_assert_eq!(r.d1_scaled, sigma * sigma * r.d1);
        }
    }
}

#[test]
fn assignment_entropy_is_bounded_by_log_components() {
    let gm = GaussianMixture::ring(5, 3.0, 0.09);
    let fake = gm.sample_seeded(500, 3);
    let real = gm.sample_seeded(500, 4);
    let r = evaluate(&real, &fake, &gm, 5).unwrap();
    assert!(r.entropy <= 5f64.ln() + 1e-12);
    assert_eq!(r.assignment_counts.iter().sum::<usize>(), 500);
}
