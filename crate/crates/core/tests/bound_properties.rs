use proptest::prelude::*;
use scenario_vi::bounds::{certify, epsilon, BoundQuery, CertificateKind, ROOT_TOLERANCE};

// roots are located to float adjacency, so comparisons carry a few ulps of slack
const SLACK: f64 = 1e-12;

fn eps(k: usize, n: usize, beta: f64) -> f64 {
    epsilon(&BoundQuery::new(k, n, beta).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nondecreasing_in_k(n in 1usize..400, frac in 0.0f64..1.0, log_beta in -12.0f64..-0.1) {
        let beta = 10f64.powf(log_beta);
        let k = ((n as f64) * frac) as usize;
        prop_assert!(eps(k, n, beta) <= eps(k + 1, n, beta) + SLACK);
    }

    #[test]
    fn smaller_beta_never_shrinks_the_bound(
        n in 1usize..400, frac in 0.0f64..1.0, lo in -12.0f64..-0.1, gap in 0.0f64..4.0,
    ) {
        let k = ((n as f64) * frac) as usize;
        let (b_small, b_large) = (10f64.powf(lo - gap).max(1e-300), 10f64.powf(lo));
        prop_assert!(eps(k, n, b_small) + SLACK >= eps(k, n, b_large));
    }

    #[test]
    fn more_samples_never_grow_the_bound(
        n in 1usize..400, extra in 1usize..200, frac in 0.0f64..1.0, log_beta in -12.0f64..-0.1,
    ) {
        let beta = 10f64.powf(log_beta);
        let k = ((n as f64) * frac) as usize;
        prop_assert!(eps(k, n + extra, beta) <= eps(k, n, beta) + SLACK);
    }

    #[test]
    fn certificates_are_consistent_and_repeatable(
        n in 1usize..2000, frac in 0.0f64..1.2, log_beta in -12.0f64..-0.1,
    ) {
        let beta = 10f64.powf(log_beta);
        let k = ((n as f64) * frac) as usize;
        let c = certify(k, n, beta, CertificateKind::APosteriori).unwrap();
        prop_assert!((0.0..=1.0).contains(&c.t_value));
        prop_assert_eq!(c.epsilon, 1.0 - c.t_value);
        if k >= n {
            prop_assert_eq!(c.epsilon, 1.0);
        } else {
            prop_assert!(c.residual <= ROOT_TOLERANCE);
        }
        let again = certify(k, n, beta, CertificateKind::APosteriori).unwrap();
        prop_assert_eq!(c.t_value.to_bits(), again.t_value.to_bits());
    }
}
