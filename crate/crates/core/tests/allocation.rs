use approx::assert_abs_diff_eq;
use headlab_core::allocation::*;
use headlab_core::Error;
use proptest::prelude::*;

fn c(m: usize) -> f64 {
    1.3 * (0.02 * m as f64).exp()
}

#[test]
fn fourgram_bound_value() {
    let k = KernelSpec::ngram(4, 8, 1.0, 64).unwrap();
    let b = bound_eval(&k, &AllocationPlan::uniform(4, 8, 8), 0.05, false).unwrap();
    let want: f64 = (1..=4).map(|m| c(m) / 8.0).sum();
    assert_eq!(b.projection_term, 0.0);
    assert_eq!(b.truncation_term, 0.0);
    assert_abs_diff_eq!(b.attention_term, want, epsilon = 1e-15);
    assert_abs_diff_eq!(b.total, 0.6835, epsilon = 1e-4);
}

#[test]
fn projection_vanishes_when_dims_exceed_token_dim() {
    let k = KernelSpec::new(vec![0.0, 1.0, 0.5], 4, 1.0, 16).unwrap();
    let plan = AllocationPlan::new(vec![
        HeadGroup { heads: 2, dim: 5 },
        HeadGroup { heads: 1, dim: 9 },
    ]);
    for conc in [false, true] {
        assert_eq!(bound_eval(&k, &plan, 0.1, conc).unwrap().projection_term, 0.0);
    }
}

#[test]
fn single_lag_tradeoff_values() {
    let k = KernelSpec::new(vec![0.0, 1.0], 16, 1.0, 128).unwrap();
    let curve = tradeoff_curve(&k, 128, 1, &[1, 2, 4, 8, 16, 32, 64]).unwrap();
    assert!(curve.skipped.is_empty());
    let best = curve.argmin().unwrap();
    assert_eq!(best.heads, 8);
    assert_abs_diff_eq!(best.breakdown.total, c(1) / 8.0, epsilon = 1e-12);
    assert_abs_diff_eq!(best.breakdown.total, 0.1658, epsilon = 1e-4);
    let h4 = curve.points.iter().find(|p| p.heads == 4).unwrap();
    assert_abs_diff_eq!(h4.breakdown.total, 0.3316, epsilon = 1e-4);
    for p in &curve.points {
        let h = p.heads as f64;
        let proj = if p.d_m < 16 { (1.0 - p.d_m as f64 / 16.0).sqrt() } else { 0.0 };
        assert_abs_diff_eq!(p.breakdown.total, proj + c(1) / h, epsilon = 1e-12);
    }
    let wide = tradeoff_curve(&k, 128, 1, &[1, 2, 4, 8, 16, 32, 64, 128]).unwrap();
    let d1 = wide.points.iter().find(|p| p.d_m == 1).unwrap();
    assert!(wide.points.iter().all(|p| p.breakdown.projection_term <= d1.breakdown.projection_term));
}

#[test]
fn tradeoff_skips_non_divisible() {
    let k = KernelSpec::new(vec![0.0, 1.0], 16, 1.0, 128).unwrap();
    let curve = tradeoff_curve(&k, 96, 1, &[5, 8]).unwrap();
    assert_eq!(curve.points.len(), 1);
    assert_eq!(curve.skipped[0].heads, 5);
}

#[test]
fn fourgram_optimum() {
    let k = KernelSpec::ngram(4, 8, 1.0, 64).unwrap();
    let (plan, b) = optimize_allocation(&k, 256, 0.05, 4).unwrap();
    assert_eq!(plan, AllocationPlan::uniform(4, 8, 8));
    assert_eq!(plan.budget(), 256);
    assert_abs_diff_eq!(b.total, 0.6835, epsilon = 1e-4);
}

#[test]
fn small_budget_example() {
    let k = KernelSpec::new(vec![0.0, 1.0], 2, 1.0, 8).unwrap();
    let (plan, b) = optimize_allocation(&k, 4, 0.05, 1).unwrap();
    assert_eq!(plan, AllocationPlan::uniform(1, 2, 2));
    assert_abs_diff_eq!(b.total, c(1) / 2.0, epsilon = 1e-15);
    assert_abs_diff_eq!(b.total, 0.663, epsilon = 1e-3);
}

#[test]
fn zero_kernel_has_zero_total() {
    let k = KernelSpec::new(vec![0.0; 4], 3, 1.0, 8).unwrap();
    let (plan, b) = optimize_allocation(&k, 10, 0.05, 3).unwrap();
    assert_eq!(plan.budget(), 10);
    assert_eq!(b.total, 0.0);
}

#[test]
fn optimizer_errors() {
    let k = KernelSpec::ngram(2, 4, 1.0, 8).unwrap();
    assert!(matches!(optimize_allocation(&k, 0, 0.05, 2), Err(Error::Infeasible(_))));
    assert!(matches!(optimize_allocation(&k, 8, 0.05, 3), Err(Error::Config(_))));
    assert!(matches!(optimize_allocation(&k, 8, 1.5, 2), Err(Error::Config(_))));
    let unsorted = KernelSpec::new(vec![0.0, 0.5, 1.0], 4, 1.0, 8).unwrap();
    assert!(matches!(optimize_allocation(&unsorted, 8, 0.05, 2), Err(Error::Config(_))));
    assert!(bound_eval(&k, &AllocationPlan::uniform(3, 1, 1), 0.05, false).is_err());
}

#[test]
fn plan_json_schema() {
    let plan = AllocationPlan::uniform(2, 8, 4);
    let s = serde_json::to_string(&plan).unwrap();
    assert_eq!(s, r#"{"M":2,"groups":[{"H":8,"d":4},{"H":8,"d":4}]}"#);
    assert!(serde_json::from_str::<AllocationPlan>(r#"{"M":3,"groups":[{"H":1,"d":1}]}"#).is_err());
}

#[test]
fn concentration_factor_scales_projection() {
    let k = KernelSpec::new(vec![0.0, 1.0, 1.0], 16, 2.0, 32).unwrap();
    let plan = AllocationPlan::uniform(2, 2, 4);
    let a = bound_eval(&k, &plan, 0.05, false).unwrap();
    let b = bound_eval(&k, &plan, 0.05, true).unwrap();
    let eps = (2.0 * (2.0 * 2.0 * 32.0 / 0.05f64).ln() / 4.0).sqrt();
    assert_abs_diff_eq!(b.eps_delta, eps, epsilon = 1e-14);
    assert_abs_diff_eq!(b.projection_term, a.projection_term * (1.0 + eps), epsilon = 1e-12);
    assert_eq!(a.attention_term, b.attention_term);
}

#[test]
fn volterra_examples() {
    let plan = AllocationPlan::uniform(1, 8, 4);
    let first = VolterraKernelSpec::from_fn(1, 1, 4, 1.0, 16, |t| if t == [1] { 1.0 } else { 0.0 });
    let lin = KernelSpec::new(vec![0.0, 1.0], 4, 1.0, 16).unwrap();
    let a = volterra_bound_eval(&first, &plan, 0.05, 1).unwrap();
    let b = bound_eval(&lin, &plan, 0.05, false).unwrap();
    assert_abs_diff_eq!(a.attention_term, b.attention_term, epsilon = 1e-15);
    assert_eq!(a.projection_term, 0.0);

    let mut zero = VolterraKernelSpec::from_fn(2, 2, 4, 1.0, 16, |_| 0.0);
    zero.eps_h = 0.25;
    zero.eps_ffn = 0.125;
    assert_eq!(volterra_bound_eval(&zero, &plan, 0.05, 2).unwrap().total, 0.375);

    let mut pair = VolterraKernelSpec::from_fn(2, 1, 4, 1.0, 16, |t| if t == [1, 1] { 1.0 } else { 0.0 });
    pair.eps_h = 0.01;
    let eps_a = c(1) / 8.0;
    let got = volterra_bound_eval(&pair, &plan, 0.05, 1).unwrap().total;
    assert_abs_diff_eq!(got, (1.0 + eps_a).powi(2) - 1.0 + 0.01, epsilon = 1e-14);

    assert!(matches!(volterra_bound_eval(&pair, &plan, 0.05, 2), Err(Error::Config(_))));
}

// ---------------------------------------------------------------------------
// Exhaustive oracle
// ---------------------------------------------------------------------------

fn groups_for(budget: usize) -> Vec<HeadGroup> {
    (1..=budget)
        .filter(|h| budget % h == 0)
        .map(|h| HeadGroup { heads: h, dim: budget / h })
        .collect()
}

fn enumerate(remaining: usize, left: usize, prefix: &mut Vec<HeadGroup>, out: &mut Vec<Vec<HeadGroup>>) {
    if left == 0 {
        if remaining == 0 {
            out.push(prefix.clone());
        }
        return;
    }
    for b in 1..=remaining.saturating_sub(left - 1) {
        for g in groups_for(b) {
            prefix.push(g);
            enumerate(remaining - b, left - 1, prefix, out);
            prefix.pop();
        }
    }
}

fn brute_force(k: &KernelSpec, budget: usize, m_max: usize) -> (AllocationPlan, f64) {
    let mut best: Option<(Vec<HeadGroup>, f64)> = None;
    for m in 1..=m_max.min(budget) {
        let mut plans = Vec::new();
        enumerate(budget, m, &mut Vec::new(), &mut plans);
        for groups in plans {
            let total = bound_eval(k, &AllocationPlan::new(groups.clone()), 0.05, false).unwrap().total;
            let replace = match &best {
                None => true,
                Some((bg, bt)) => {
                    let tol = 1e-12 * total.abs().max(bt.abs()).max(1.0);
                    if total < bt - tol {
                        true
                    } else if total > bt + tol || m > bg.len() {
                        false
                    } else {
                        groups.iter().map(|g| g.dim).lt(bg.iter().map(|g| g.dim))
                    }
                }
            };
            if replace {
                best = Some((groups, total));
            }
        }
    }
    let (g, t) = best.unwrap();
    (AllocationPlan::new(g), t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn optimizer_matches_exhaustive_enumeration(
        budget in 1usize..=24,
        mut norms in prop::collection::vec(0.0f64..2.0, 1..=4),
        d in 1usize..=8,
        b in 0.5f64..2.0,
    ) {
        norms.sort_by(|a, b| b.total_cmp(a));
        let mut all = vec![0.3];
        all.extend(norms);
        let m_max = all.len() - 1;
        let k = KernelSpec::new(all, d, b, 32).unwrap();
        let (plan, bd) = optimize_allocation(&k, budget, 0.05, m_max).unwrap();
        let (oracle, total) = brute_force(&k, budget, m_max);
        prop_assert_eq!(plan.budget(), budget);
        prop_assert!((bd.total - total).abs() <= 1e-12 * total.max(1.0));
        prop_assert_eq!(plan, oracle);
    }

    #[test]
    fn breakdown_sums(
        heads in prop::collection::vec(1usize..10, 1..4),
        dims in prop::collection::vec(1usize..12, 4),
        d in 1usize..10,
        conc in any::<bool>(),
    ) {
        let groups: Vec<HeadGroup> = heads.iter().zip(&dims).map(|(&h, &dm)| HeadGroup { heads: h, dim: dm }).collect();
        let k = KernelSpec::new(vec![0.0, 1.0, 0.8, 0.5, 0.1], d, 1.0, 16).unwrap();
        let plan = AllocationPlan::new(groups.clone());
        let bd = bound_eval(&k, &plan, 0.05, conc).unwrap();
        prop_assert!((bd.total - (bd.projection_term + bd.attention_term + bd.truncation_term)).abs() < 1e-14);
        if groups.iter().all(|g| g.dim >= d) {
            prop_assert_eq!(bd.projection_term, 0.0);
        }
    }

    #[test]
    fn single_group_monotonicity(h in 1usize..30, dm in 1usize..15, d in 2usize..16) {
        let k = KernelSpec::new(vec![0.0, 1.0], d, 1.0, 16).unwrap();
        let at = |h: usize, dm: usize| bound_eval(&k, &AllocationPlan::uniform(1, h, dm), 0.05, false).unwrap();
        prop_assert!(at(h + 1, dm).attention_term <= at(h, dm).attention_term);
        prop_assert!(at(h, dm + 1).projection_term <= at(h, dm).projection_term);
    }
}
