mod common;

use proptest::prelude::*;
use sparse_prox::prox::{my_gradient, shrink_elementwise};
use sparse_prox::ThresholdConvention;

#[test]
fn shrink_minimizes_prox_objective() {
    common::prox_oracle(1000).assert();
}

#[test]
fn nonzero_count_falls_with_threshold() {
    common::threshold_monotone().assert();
}

/// Envelope `min_t gamma |t| + mu/(2 lambda) (t - w)^2`, by inner ternary search.
fn envelope(w: f64, gamma: f64, lambda: f64, mu: f64) -> f64 {
    let f = |t: f64| common::prox_objective(ThresholdConvention::Paper, t, w, gamma, lambda, mu);
    let span = 2.0 * w.abs() + 1.0;
    f(common::ternary_min(f, -span, span))
}

#[test]
fn envelope_gradient_matches_finite_differences() {
    let mut r = common::rng(21);
    let h = 1e-5;
    let mut checked = 0;
    while checked < 300 {
        use rand::Rng;
        let w: f64 = r.random_range(-4.0..4.0);
        let gamma = r.random_range(0.1..2.0);
        let lambda = r.random_range(0.1..1.5);
        let mu = r.random_range(0.5..3.0);
        let tau = ThresholdConvention::Paper.threshold(lambda, mu, gamma);
        if (w.abs() - tau).abs() < 10.0 * h {
            continue;
        }
        let fd = (envelope(w + h, gamma, lambda, mu) - envelope(w - h, gamma, lambda, mu)) / (2.0 * h);
        let p = shrink_elementwise(&[w], &[gamma], lambda, mu, ThresholdConvention::Paper).unwrap();
        // The envelope has prox step lambda / mu in this convention.
        let g = my_gradient(&[w], &p, lambda / mu).unwrap()[0];
        assert!((g - fd).abs() <= 1e-4, "w={w} gamma={gamma} lambda={lambda} mu={mu}: {g} vs {fd}");
        checked += 1;
    }
}

proptest! {
    #[test]
    fn second_shrink_keeps_zero_set_and_shrinks_by_tau(
        z in prop::collection::vec(-5.0f64..5.0, 1..40),
        g in 0.0f64..2.0,
        lambda in 0.05f64..1.0,
        mu in 0.2f64..4.0,
    ) {
        let gamma = vec![g; z.len()];
        let conv = ThresholdConvention::Paper;
        let tau = conv.threshold(lambda, mu, g);
        let once = shrink_elementwise(&z, &gamma, lambda, mu, conv).unwrap();
        let twice = shrink_elementwise(&once, &gamma, lambda, mu, conv).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            if *a == 0.0 {
                prop_assert_eq!(*b, 0.0);
            } else if *b != 0.0 {
                prop_assert!((a.abs() - b.abs() - tau).abs() <= 1e-12 * a.abs().max(1.0));
                prop_assert_eq!(a.signum(), b.signum());
            } else {
                prop_assert!(a.abs() <= tau);
            }
        }
    }

    #[test]
    fn textbook_threshold_grows_with_mu(z in -5.0f64..5.0, mu in 0.1f64..3.0) {
        let conv = ThresholdConvention::Textbook;
        let small = shrink_elementwise(&[z], &[1.0], 0.5, mu, conv).unwrap()[0];
        let large = shrink_elementwise(&[z], &[1.0], 0.5, 2.0 * mu, conv).unwrap()[0];
        prop_assert!(large.abs() <= small.abs());
    }
}
