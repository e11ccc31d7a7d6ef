use approx::assert_abs_diff_eq;
use headlab_core::numerics::{softmax_column, sphere_tokens, Matrix, RngStream};
use headlab_core::softmax_analysis::*;
use headlab_core::transformer::{random_model, TransformerParams};
use proptest::prelude::*;
use rand::Rng;

const NINF: f64 = f64::NEG_INFINITY;

fn probs_123() -> Vec<f64> {
    let e: Vec<f64> = [1f64, 2.0, 3.0].iter().map(|x| x.exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[test]
fn uniform_jacobian_closed_form() {
    let j = softmax_jacobian(&[0.3; 4]).unwrap();
    for a in 0..4 {
        for b in 0..4 {
            let want = if a == b { 0.25 } else { 0.0 } - 1.0 / 16.0;
            assert_abs_diff_eq!(j[(a, b)], want, epsilon = 1e-15);
        }
    }
    let r = jacobian_report(&[0.0; 10], 0).unwrap();
    assert_abs_diff_eq!(r.spectral_norm, 0.1, epsilon = 1e-12);
    assert_abs_diff_eq!(r.trace, 0.9, epsilon = 1e-15);
    assert_abs_diff_eq!(r.min_eig, 0.0, epsilon = 1e-12);
    assert!(r.gershgorin_ok);
}

#[test]
fn one_hot_jacobian_is_zero() {
    let j = softmax_jacobian(&[NINF, 5.0, NINF]).unwrap();
    assert!(j.data().iter().all(|&x| x == 0.0));
    let r = jacobian_report(&[NINF, 5.0, NINF], 1).unwrap();
    assert_eq!((r.spectral_norm, r.trace, r.min_eig, r.max_eig), (0.0, 0.0, 0.0, 0.0));
    assert!(r.gershgorin_ok);
}

#[test]
fn masked_rows_and_columns_are_zero() {
    let j = softmax_jacobian(&[0.5, NINF, -1.0, NINF]).unwrap();
    for k in 0..4 {
        assert_eq!(j[(1, k)], 0.0);
        assert_eq!(j[(k, 3)], 0.0);
    }
}

#[test]
fn three_logit_example() {
    let p = probs_123();
    let j = softmax_jacobian(&[1.0, 2.0, 3.0]).unwrap();
    assert_abs_diff_eq!(j[(0, 0)], p[0] - p[0] * p[0], epsilon = 1e-15);
    assert_abs_diff_eq!(j[(0, 1)], -p[0] * p[1], epsilon = 1e-15);
    assert_abs_diff_eq!(j[(0, 2)], -p[0] * p[2], epsilon = 1e-15);
    assert_abs_diff_eq!(j[(0, 0)], 0.08192, epsilon = 1e-5);
    assert_abs_diff_eq!(j[(0, 1)], -0.02203, epsilon = 1e-5);
    assert_abs_diff_eq!(j[(0, 2)], -0.05989, epsilon = 1e-5);
    let r = jacobian_report(&[1.0, 2.0, 3.0], 2).unwrap();
    assert_abs_diff_eq!(r.trace, 1.0 - p.iter().map(|x| x * x).sum::<f64>(), epsilon = 1e-15);
    assert_abs_diff_eq!(r.trace, 0.48946, epsilon = 1e-5);
}

#[test]
fn degenerate_column_errors() {
    assert!(jacobian_report(&[NINF; 2], 0).is_err());
}

#[test]
fn large_column_uses_iterative_extremes() {
    let mut r = RngStream::new(4, 0).rng();
    let z: Vec<f64> = (0..600).map(|_| r.random_range(-2.0..2.0)).collect();
    let rep = jacobian_report(&z, 599).unwrap();
    assert!(rep.min_eig >= -1e-8 && rep.max_eig <= 0.5);
    assert_abs_diff_eq!(rep.max_eig, rep.spectral_norm, epsilon = 1e-9);
    assert!(rep.gershgorin_ok);
}

fn zero_qk(d: usize) -> QkPair {
    QkPair::new(Matrix::zeros(2, d), Matrix::zeros(2, d)).unwrap()
}

#[test]
fn zero_qk_scan_has_slope_minus_one() {
    let lengths = [8, 16, 32, 64, 128];
    let scan = saturation_scan(&zero_qk(4), &lengths, 3, 1.0, &RngStream::new(1, 0)).unwrap();
    for (l, m) in scan.lengths.iter().zip(&scan.mean_spectral_norms) {
        assert_abs_diff_eq!(*m, 1.0 / *l as f64, epsilon = 1e-12);
    }
    assert_abs_diff_eq!(scan.fitted_slope, -1.0, epsilon = 1e-9);
    assert_eq!(scan.lengths.len(), scan.stds.len());
}

#[test]
fn random_scan_norms_bounded_and_slope_in_band() {
    let mut r = RngStream::new(8, 0).rng();
    let qk = QkPair::new(Matrix::gaussian(4, 8, 0.5, &mut r), Matrix::gaussian(4, 8, 0.5, &mut r)).unwrap();
    let lengths = [8, 16, 32, 64, 128, 256];
    let scan = saturation_scan(&qk, &lengths, 10, 1.0, &RngStream::new(8, 1)).unwrap();
    assert!(scan.mean_spectral_norms.iter().all(|&n| n <= 0.5));
    assert!((-1.25..=-0.75).contains(&scan.fitted_slope), "slope {}", scan.fitted_slope);
}

#[test]
fn scan_rejects_bad_lengths() {
    let rng = RngStream::new(0, 0);
    assert!(saturation_scan(&zero_qk(2), &[], 2, 1.0, &rng).is_err());
    assert!(saturation_scan(&zero_qk(2), &[8, 4], 2, 1.0, &rng).is_err());
}

#[test]
fn score_range_zero_query() {
    let x = sphere_tokens(4, 9, 1.0, &mut RngStream::new(2, 0).rng());
    let r = score_range_check(&Matrix::zeros(3, 4), &Matrix::gaussian(3, 4, 1.0, &mut RngStream::new(2, 1).rng()), &x, 1.0).unwrap();
    assert_eq!(r.delta, 0.0);
    assert!(r.min_ok && r.max_ok);
    assert_abs_diff_eq!(r.min_weight, 1.0 / 9.0, epsilon = 1e-15);
    assert_abs_diff_eq!(r.max_weight, 1.0 / 9.0, epsilon = 1e-15);
}

#[test]
fn score_range_delta_scales_with_bound_squared() {
    let mut r = RngStream::new(3, 0).rng();
    let (wq, wk) = (Matrix::gaussian(3, 5, 1.0, &mut r), Matrix::gaussian(3, 5, 1.0, &mut r));
    let x1 = sphere_tokens(5, 6, 1.0, &mut r);
    let x2 = x1.scale(2.0);
    let a = score_range_check(&wq, &wk, &x1, 1.0).unwrap();
    let b = score_range_check(&wq, &wk, &x2, 2.0).unwrap();
    assert_abs_diff_eq!(b.delta, 4.0 * a.delta, epsilon = 1e-9 * b.delta);
}

#[test]
fn score_range_thousand_trials() {
    let root = RngStream::new(5, 0);
    for i in 0..1000 {
        let mut r = root.child(i).rng();
        let len = r.random_range(2..40);
        let (dh, d) = (r.random_range(1..5), r.random_range(1..6));
        let wq = Matrix::gaussian(dh, d, 1.0, &mut r);
        let wk = Matrix::gaussian(dh, d, 1.0, &mut r);
        let x = sphere_tokens(d, len, 1.0, &mut r);
        let res = score_range_check(&wq, &wk, &x, 1.0).unwrap();
        assert!(res.min_ok && res.max_ok, "trial {i}: {res:?}");
    }
}

fn zero_qk_model(slope: f64) -> TransformerParams {
    let mut m = random_model(3, 6, &[2], 1, 4, &mut RngStream::new(1, 0).rng());
    let h = &mut m.layers[0].heads[0];
    h.w_q = Matrix::zeros(h.w_q.rows(), h.w_q.cols());
    h.w_k = Matrix::zeros(h.w_k.rows(), h.w_k.cols());
    h.slope = slope;
    m
}

#[test]
fn logits_norm_zero_qk_equals_rpe() {
    let slope = 0.25;
    let pts = logits_norm_scan(&zero_qk_model(slope), &[2, 7, 10], 3, 1.0, &RngStream::new(0, 0)).unwrap();
    for p in pts {
        let col = p.len.div_ceil(2) - 1;
        let want: f64 = (0..=col).map(|s| (slope * (col - s) as f64).powi(2)).sum::<f64>().sqrt();
        assert_abs_diff_eq!(p.mean_norm, want, epsilon = 1e-12);
    }
}

#[test]
fn logits_norm_length_two_has_single_entry() {
    let m = random_model(3, 6, &[2], 1, 4, &mut RngStream::new(9, 0).rng());
    let rng = RngStream::new(3, 0);
    let pts = logits_norm_scan(&m, &[2], 1, 1.0, &rng).unwrap();
    let x = sphere_tokens(3, 2, 1.0, &mut rng.child(0).child(0).rng());
    let cache = headlab_core::transformer::forward(&m, &x).unwrap();
    assert_abs_diff_eq!(pts[0].mean_norm, cache.layers[0].heads[0].logits[(0, 0)].abs(), epsilon = 1e-15);
}

#[test]
fn logits_norm_doubling_growth() {
    let mut m = zero_qk_model(0.0);
    let mut r = RngStream::new(12, 0).rng();
    let h = &mut m.layers[0].heads[0];
    h.w_q = Matrix::gaussian(h.w_q.rows(), h.w_q.cols(), 1.0, &mut r);
    h.w_k = Matrix::gaussian(h.w_k.rows(), h.w_k.cols(), 1.0, &mut r);
    let pts = logits_norm_scan(&m, &[64, 128], 400, 1.0, &RngStream::new(12, 1)).unwrap();
    let ratio = pts[1].mean_norm / pts[0].mean_norm;
    assert!(ratio <= 2f64.sqrt() * 1.1, "ratio {ratio}");
}

fn fd_jacobian(z: &[f64], h: f64) -> Matrix {
    let n = z.len();
    let mut j = Matrix::zeros(n, n);
    for c in 0..n {
        let mut zp = z.to_vec();
        let mut zm = z.to_vec();
        zp[c] += h;
        zm[c] -= h;
        let (pp, pm) = (softmax_column(&zp).unwrap(), softmax_column(&zm).unwrap());
        for r in 0..n {
            j[(r, c)] = (pp[r] - pm[r]) / (2.0 * h);
        }
    }
    j
}

fn random_column(len: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut r = RngStream::new(seed, 0).rng();
    (0..len).map(|_| r.random_range(-scale..scale)).collect()
}

// 10³ columns split across the property cases below
proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn jacobian_properties(len in 1usize..=128, scale in 0.01f64..8.0, seed in any::<u64>()) {
        let z = random_column(len, scale, seed);
        let p = softmax_column(&z).unwrap();
        let j = softmax_jacobian(&z).unwrap();
        let r = jacobian_report(&z, len - 1).unwrap();
        prop_assert!(r.min_eig >= -1e-10);
        prop_assert!(r.max_eig <= 0.5 + 1e-10);
        prop_assert!((r.trace - (1.0 - p.iter().map(|x| x * x).sum::<f64>())).abs() <= 1e-12);
        prop_assert!(r.trace <= 1.0 - 1.0 / len as f64 + 1e-12);
        prop_assert!(r.gershgorin_ok);
        for row in 0..len {
            prop_assert!(j.row(row).iter().sum::<f64>().abs() <= 1e-12);
        }
        if len <= 32 {
            let fd = fd_jacobian(&z, 1e-6);
            prop_assert!(fd.sub(&j).max_abs() <= 1e-7);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mean_value_consistency(len in 2usize..24, seed in any::<u64>()) {
        let z = random_column(len, 3.0, seed);
        let dir = random_column(len, 1.0, seed ^ 0x9e37);
        let nd = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        let step = 1e-3 / nd;
        let z2: Vec<f64> = z.iter().zip(&dir).map(|(a, b)| a + step * b).collect();
        let dz: f64 = z.iter().zip(&z2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let (p, q) = (softmax_column(&z).unwrap(), softmax_column(&z2).unwrap());
        let dp: f64 = p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let mut worst = 0.0f64;
        for k in 0..=64 {
            let t = k as f64 / 64.0;
            let zt: Vec<f64> = z.iter().zip(&z2).map(|(a, b)| a + t * (b - a)).collect();
            worst = worst.max(jacobian_report(&zt, 0).unwrap().spectral_norm);
        }
        prop_assert!(dp <= worst * dz * (1.0 + 1e-6));
    }
}
