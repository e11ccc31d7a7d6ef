use approx::assert_abs_diff_eq;
use headlab_core::delta_approx::*;
use headlab_core::numerics::RngStream;
use headlab_core::Error;
use proptest::prelude::*;

fn single(alpha: f64, beta: f64) -> ExpSum {
    ExpSum::new(vec![ExpTerm { alpha, beta }], 1, 200).unwrap()
}

// brute-force ℓ¹ distance over a long horizon, independent of l1_report
fn dense_l1(s: &ExpSum, upto: usize) -> f64 {
    (0..=upto)
        .map(|t| {
            let phi: f64 = s
                .terms()
                .iter()
                .map(|k| k.alpha * (-(k.beta) * (t as f64 - 1.0)).exp())
                .sum();
            let target = if t == s.target_lag() { 1.0 } else { 0.0 };
            (target - phi).abs()
        })
        .sum()
}

#[test]
fn evaluation_examples() {
    let s = single(1.0, 2f64.ln());
    assert_abs_diff_eq!(eval_exp_sum(&s, 1), 1.0, epsilon = 1e-15);
    assert_abs_diff_eq!(eval_exp_sum(&s, 3), 0.25, epsilon = 1e-15);
    let empty = ExpSum::new(Vec::new(), 2, 200).unwrap();
    assert_eq!(eval_exp_sum(&empty, 7), 0.0);
}

#[test]
fn zero_sum_report() {
    let z = ExpSum::zeros(3, 5, 200).unwrap();
    let r = l1_report(&z);
    assert_eq!(r.l1_error, 1.0);
    assert_abs_diff_eq!(r.certified_bound, 1.3 * 0.06f64.exp() / 5.0, epsilon = 1e-15);
}

#[test]
fn certificate_constants() {
    assert_abs_diff_eq!(certified_bound(4, 8), 0.1760, epsilon = 1e-4);
    assert_abs_diff_eq!(certified_bound(1, 64), 0.02073, epsilon = 1e-5);
    assert_abs_diff_eq!(certified_bound(1, 1), 1.3 * 0.02f64.exp(), epsilon = 1e-15);
}

#[test]
fn invalid_arguments_rejected() {
    assert!(ExpSum::new(vec![ExpTerm { alpha: 1.0, beta: 0.0 }], 1, 200).is_err());
    assert!(ExpSum::new(Vec::new(), 0, 200).is_err());
    assert!(ExpSum::new(Vec::new(), 30, 200).is_err());
    let rng = RngStream::new(0, 0);
    assert!(fit_exp_sum(2, 0, 200, &rng).is_err());
    assert!(fit_exp_sum(30, 4, 200, &rng).is_err());
}

#[test]
fn fits_meet_certificate_in_attainable_cells() {
    let rng = RngStream::new(11, 0);
    for (t, m) in [(1, 1), (1, 64), (4, 8), (2, 4), (8, 16)] {
        let s = fit_exp_sum(t, m, default_horizon(t), &rng).unwrap();
        let r = l1_report(&s);
        assert!(r.l1_error <= certified_bound(t, m), "T={t} m={m} err={}", r.l1_error);
        assert_eq!(s.m(), m);
        assert!(s.terms().iter().all(|k| k.beta >= BETA_MIN));
    }
}

#[test]
fn two_terms_cannot_certify_lag_two() {
    let err = fit_exp_sum(2, 2, 200, &RngStream::new(11, 0)).unwrap_err();
    match err {
        Error::Certification { t, m, best_l1, bound } => {
            assert_eq!((t, m), (2, 2));
            assert!(best_l1 > bound);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn report_is_upper_bound_on_dense_sum() {
    let path = fit_exp_sum_path(4, &[3, 6, 12], 200, &RngStream::new(3, 0)).unwrap();
    for (s, r) in &path {
        let dense = dense_l1(s, 20_000);
        assert!(r.l1_error + 1e-12 >= dense, "{} < {dense}", r.l1_error);
        assert!(r.l1_error - dense <= r.tail_bound + 1e-12);
    }
}

#[test]
fn horizon_doubling_is_within_tail() {
    let (s, r) = fit_exp_sum_best(4, 8, 200, &RngStream::new(5, 0)).unwrap();
    let r2 = l1_report(&s.with_horizon(400).unwrap());
    assert!((r2.l1_error - r.l1_error).abs() <= r.tail_bound + 1e-12);
}

#[test]
fn budget_monotone_and_request_independent() {
    let rng = RngStream::new(9, 0);
    let budgets = [1, 2, 3, 4, 6, 8, 16];
    let path = fit_exp_sum_path(2, &budgets, 200, &rng).unwrap();
    for w in path.windows(2) {
        assert!(w[1].1.l1_error <= w[0].1.l1_error + 1e-12);
    }
    let alone = fit_exp_sum_best(2, 6, 200, &rng).unwrap();
    assert_eq!(alone.0, path[4].0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn eval_matches_definition(
        terms in prop::collection::vec((-5.0f64..5.0, 1e-3f64..5.0), 0..6),
        t in 0usize..50,
    ) {
        let terms: Vec<ExpTerm> = terms.into_iter().map(|(alpha, beta)| ExpTerm { alpha, beta }).collect();
        let s = ExpSum::new(terms.clone(), 1, 200).unwrap();
        let want: f64 = terms.iter().map(|k| k.alpha * (-k.beta * (t as f64 - 1.0)).exp()).sum();
        prop_assert!((eval_exp_sum(&s, t) - want).abs() <= 1e-12 * want.abs().max(1.0));
    }

    #[test]
    fn tail_bound_dominates(
        terms in prop::collection::vec((-3.0f64..3.0, 0.05f64..5.0), 1..4),
    ) {
        let terms: Vec<ExpTerm> = terms.into_iter().map(|(alpha, beta)| ExpTerm { alpha, beta }).collect();
        let s = ExpSum::new(terms, 2, 200).unwrap();
        let r = l1_report(&s);
        let dense = dense_l1(&s, 5_000);
        prop_assert!(r.l1_error + 1e-12 >= dense);
    }
}
