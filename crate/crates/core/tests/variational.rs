use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use vra_core::variational::{
    binned_objective, density_pair_from_samples, fit_histogram, gap_bound_check, make_density_pair,
    optimal_g, sample_gap, uniform_edges, variational_objective, DensityPair,
};
use vra_core::{RectifierSpec, ThresholdVector};

fn pair() -> impl Strategy<Value = (DensityPair, f64)> {
    (
        prop::collection::vec(-3.0..3.0f64, 1..60),
        prop::collection::vec(-2.0..4.0f64, 1..60),
        1usize..40,
        0.01..2.0f64,
        0.05..5.0f64,
    )
        .prop_map(|(a, b, bins, eps, lambda)| {
            (density_pair_from_samples(&a, &b, bins, eps).unwrap(), lambda)
        })
}

fn integral(pdf: &[f64], widths: &[f64]) -> f64 {
    pdf.iter().zip(widths).map(|(p, w)| p * w).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn densities_integrate_to_one((d, _) in pair()) {
        let w = d.widths();
        prop_assert!((integral(d.pdf_in(), &w) - 1.0).abs() <= 1e-12);
        prop_assert!((integral(d.pdf_out(), &w) - 1.0).abs() <= 1e-12);
        prop_assert!(d.pdf_in().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn doubling_lambda_doubles_the_displacement((d, lambda) in pair()) {
        let g1 = optimal_g(&d, lambda).unwrap();
        let g2 = optimal_g(&d, 2.0 * lambda).unwrap();
        for b in 0..d.bins() {
            prop_assert_eq!(g2.displacement()[b], 2.0 * g1.displacement()[b]);
            let mid = d.midpoints()[b];
            let tol = 1e-12 * mid.abs().max(1.0) * lambda.max(1.0);
            prop_assert!(((g2.values()[b] - mid) - 2.0 * (g1.values()[b] - mid)).abs() <= 4.0 * tol);
        }
    }

    #[test]
    fn gstar_is_satisfied_by_the_gap_bound((d, lambda) in pair()) {
        let b = gap_bound_check(&d, lambda).unwrap();
        prop_assert!(b.satisfied);
        // the binned minimizer makes the improvement exactly twice the bound
        let scale = b.bound.abs() + 1e-12 * (1.0 + b.gap_gstar.abs() + b.gap_identity.abs());
        prop_assert!((b.improvement - 2.0 * b.bound).abs() <= 1e-9 * scale);
    }
}

#[test]
fn gstar_beats_random_piecewise_competitors() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n_in = rng.random_range(5..200);
        let n_out = rng.random_range(5..200);
        let shift = rng.random_range(-2.0..2.0);
        let a: Vec<f64> = (0..n_in).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..n_out).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect();
        let bins = rng.random_range(2..50);
        let lambda = rng.random_range(0.1..3.0);
        let d = density_pair_from_samples(&a, &b, bins, 0.5).unwrap();
        let g = optimal_g(&d, lambda).unwrap();
        let best = binned_objective(&d, g.values(), lambda).unwrap();
        let mids = d.midpoints();
        for _ in 0..100 {
            let spread = rng.random_range(0.01..3.0);
            let candidate: Vec<f64> = g
                .values()
                .iter()
                .map(|v| v + spread * rng.sample::<f64, _>(StandardNormal))
                .collect();
            assert!(best <= binned_objective(&d, &candidate, lambda).unwrap());
        }
        let t = ThresholdVector::uniform(1, -0.5, 1.0).unwrap();
        for spec in [
            RectifierSpec::identity(1),
            RectifierSpec::react(vec![1.0]).unwrap(),
            RectifierSpec::vra(t.clone()),
            RectifierSpec::vra_plus(t, 0.3).unwrap(),
        ] {
            let values: Vec<f64> = mids.iter().map(|&z| spec.rectify_value(0, z)).collect();
            assert!(best <= binned_objective(&d, &values, lambda).unwrap());
        }
    }
}

#[test]
fn normal_histogram_matches_cdf_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let samples: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let edges = uniform_edges(-4.0, 4.0, 100).unwrap();
    let h = fit_histogram(&samples, &edges).unwrap();
    assert_eq!(h.total(), n as u64);
    let phi = Normal::new(0.0, 1.0).unwrap();
    let nb = edges.len() - 1;
    for b in 0..nb {
        // the edge bins also absorb the clamped tails
        let lo = if b == 0 { f64::NEG_INFINITY } else { edges[b] };
        let hi = if b + 1 == nb { f64::INFINITY } else { edges[b + 1] };
        let p = phi.cdf(hi) - phi.cdf(lo);
        let expected = n as f64 * p;
        let se = (n as f64 * p * (1.0 - p)).sqrt().max(1.0);
        let got = h.counts()[b] as f64;
        assert!((got - expected).abs() <= 5.0 * se, "bin {b}: {got} vs {expected}");
    }
}

#[test]
fn histogram_examples() {
    let h = fit_histogram(&[0.5, 1.5, 1.5], &[0.0, 1.0, 2.0]).unwrap();
    assert_eq!(h.counts(), &[1, 2]);
    let h = fit_histogram(&[1.0], &[0.0, 1.0, 2.0]).unwrap();
    assert_eq!(h.counts(), &[0, 1]);
    let h = fit_histogram(&[-7.0, 2.0, 9.0], &[0.0, 1.0, 2.0]).unwrap();
    assert_eq!(h.counts(), &[1, 2]);
    assert!(fit_histogram(&[1.0], &[0.0]).is_err());
}

#[test]
fn smoothing_arithmetic() {
    let edges = [0.0, 1.0, 2.0];
    let h_in = fit_histogram(&[1.5; 10], &edges).unwrap();
    let h_out = fit_histogram(&[0.5; 4], &edges).unwrap();
    let d = make_density_pair(&h_in, &h_out, 1.0).unwrap();
    assert!((d.pdf_in()[0] - 1.0 / 12.0).abs() < 1e-15);
    assert!((d.pdf_in()[1] - 11.0 / 12.0).abs() < 1e-15);
    let same = make_density_pair(&h_in, &h_in, 0.5).unwrap();
    assert_eq!(same.pdf_in(), same.pdf_out());
    let other = fit_histogram(&[0.5], &[0.0, 1.0, 3.0]).unwrap();
    assert!(make_density_pair(&h_in, &other, 0.5).is_err());
}

#[test]
fn gstar_examples() {
    let edges = [0.0, 1.0, 2.0];
    let h_in = fit_histogram(&[0.5, 1.5, 1.5, 1.5], &edges).unwrap();
    let h_out = fit_histogram(&[0.5, 0.5, 0.5, 1.5], &edges).unwrap();
    let d = make_density_pair(&h_in, &h_out, 0.5).unwrap();
    let g = optimal_g(&d, 0.5).unwrap();
    let ratio = d.pdf_out()[0] / d.pdf_in()[0];
    assert!((g.values()[0] - (0.5 + 0.5 * (1.0 - ratio))).abs() < 1e-15);
    assert!(optimal_g(&d, 0.0).is_err());

    let same = make_density_pair(&h_in, &h_in, 0.5).unwrap();
    let g = optimal_g(&same, 1.0).unwrap();
    assert_eq!(g.values(), same.midpoints().as_slice());
    let b = gap_bound_check(&same, 1.0).unwrap();
    assert_eq!((b.improvement, b.bound), (0.0, 0.0));
    assert!(b.satisfied);
}

#[test]
fn objective_examples() {
    let identity = |z: f64| z;
    let zero = |_: f64| 0.0;
    assert_eq!(variational_objective(&identity, &[1.0, 1.0], &[0.0, 0.0], 1.0).unwrap(), -2.0);
    assert_eq!(variational_objective(&zero, &[1.0, 1.0], &[0.0, 0.0], 1.0).unwrap(), 1.0);
    assert!(variational_objective(&identity, &[], &[0.0], 1.0).is_err());
}

#[test]
fn separated_normals_gain_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a: Vec<f64> = (0..5000).map(|_| 2.0 + rng.sample::<f64, _>(StandardNormal)).collect();
    let b: Vec<f64> = (0..5000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let d = density_pair_from_samples(&a, &b, 100, 0.5).unwrap();
    let bound = gap_bound_check(&d, 1.0).unwrap();
    assert!(bound.improvement > 0.0 && bound.satisfied);
    let g = optimal_g(&d, 1.0).unwrap();
    let (gap_g, gap_z) = sample_gap(&g, &a, &b).unwrap();
    assert!(gap_g > gap_z);
}
