use approx::assert_abs_diff_eq;
use headlab_core::allocation::{bound_eval, AllocationPlan};
use headlab_core::extractor::{build_extractor, ExtractorSpec};
use headlab_core::numerics::{norm2, Matrix, RngStream};
use headlab_core::tasks::*;
use headlab_core::transformer::forward;
use headlab_core::Error;
use proptest::prelude::*;

fn row(v: &[f64]) -> Matrix {
    Matrix::from_rows(&[v.to_vec()]).unwrap()
}

fn noiseless(mut spec: TaskSpec) -> TaskSpec {
    spec.noise_std = 0.0;
    spec
}

#[test]
fn ngram_examples() {
    let x = row(&[1.0, 2.0, 3.0, 4.0, 5.0]);
    assert_eq!(ngram_targets(&x, 4), row(&[0.0, 1.0, 3.0, 6.0, 10.0]));
    assert_eq!(ngram_targets(&x, 1), row(&[0.0, 1.0, 2.0, 3.0, 4.0]));
    let ds = gen_ngram(&noiseless(TaskSpec::ngram(1, 3, 10, 5, 1))).unwrap();
    for (x, y) in ds.inputs.iter().zip(&ds.targets) {
        assert!(y.col(0).iter().all(|&v| v == 0.0));
        for t in 1..10 {
            assert_eq!(y.col(t), x.col(t - 1));
        }
    }
}

#[test]
fn ngram_target_variance() {
    let (n, d, len, count) = (4, 4, 12, 10_000);
    let ds = gen_ngram(&noiseless(TaskSpec::ngram(n, d, len, count, 2))).unwrap();
    // sphere tokens of radius 1 have per-coordinate variance 1/d
    let input_var = 1.0 / d as f64;
    let want = n as f64 * input_var;
    let t = len - 1;
    for coord in 0..d {
        let ys: Vec<f64> = ds.targets.iter().map(|y| y[(coord, t)]).collect();
        let mean = ys.iter().sum::<f64>() / count as f64;
        let var = ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
        let se = want * (2.0 / count as f64).sqrt();
        assert!((var - want).abs() <= 4.0 * se, "coord {coord}: {var} vs {want}");
    }
}

#[test]
fn conv_examples() {
    let x = row(&[0.5, -1.0, 2.0, 3.0, 1.5, -0.5]);
    let delta = convolve(&x, &ConvKernel::Delta { lag: 2 }.weights(6).unwrap());
    assert_eq!(delta, row(&[0.0, 0.0, 0.5, -1.0, 2.0, 3.0]));

    let sharp = convolve(&x, &ConvKernel::Exp { rate: 50.0 }.weights(6).unwrap());
    for t in 0..6 {
        assert!((sharp[(0, t)] - x[(0, t)]).abs() < 1e-20);
    }

    let mut imp = Matrix::zeros(3, 10);
    imp[(1, 1)] = 1.0;
    let y = convolve(&imp, &ConvKernel::Exp { rate: 1.0 }.weights(10).unwrap());
    assert_eq!(norm2(&y.col(0)), 0.0);
    for t in 1..10 {
        assert_abs_diff_eq!(norm2(&y.col(t)), (-(t as f64 - 1.0)).exp(), epsilon = 1e-15);
    }

    let poly = ConvKernel::Poly { power: 2.0 }.weights(4).unwrap();
    assert_eq!(poly, vec![1.0, 0.25, 1.0 / 9.0, 1.0 / 16.0]);
}

#[test]
fn invalid_specs_rejected() {
    for k in [ConvKernel::Exp { rate: 0.0 }, ConvKernel::Poly { power: -1.0 }, ConvKernel::Delta { lag: 8 }] {
        let spec = TaskSpec::conv(k, 2, 8, 4, 0);
        assert!(matches!(gen_conv(&spec), Err(Error::Config(_))));
    }
    assert!(matches!(gen_ngram(&TaskSpec::ngram(8, 2, 8, 4, 0)), Err(Error::Config(_))));
    let mut ind = TaskSpec::induction_preset(0);
    ind.len = 5;
    ind.kind = TaskKind::Induction { n: 5, match_matrix: None, match_scale: 1.0, vocab: None, pattern_len: 1, repeats: 1 };
    assert!(matches!(gen_induction(&ind), Err(Error::Config(_))));
    assert!(gen_ngram(&TaskSpec::conv(ConvKernel::Exp { rate: 1.0 }, 2, 8, 4, 0)).is_err());
}

#[test]
fn induction_single_position_and_uniform() {
    let x = Matrix::gaussian(2, 8, 1.0, &mut RngStream::new(3, 0).rng());
    let w = Matrix::identity(2 * 2).scale(3.0);
    // n = 3: the first query with an admissible position is t = 3, v = 2
    let (first, pi) = induction_weights(&x, 3, 3, &w).unwrap();
    assert_eq!((first, pi.clone()), (2, vec![1.0]));
    let y = induction_targets(&x, 3, &w).unwrap();
    assert_eq!(y.col(3), x.col(2));
    for t in 0..3 {
        assert!(y.col(t).iter().all(|&v| v == 0.0));
    }

    let zero = Matrix::zeros(4, 4);
    let y = induction_targets(&x, 3, &zero).unwrap();
    for t in 3..8 {
        for r in 0..2 {
            let mean = (2..t).map(|v| x[(r, v)]).sum::<f64>() / (t - 2) as f64;
            assert_abs_diff_eq!(y[(r, t)], mean, epsilon = 1e-15);
        }
    }
}

#[test]
fn induction_hand_mixture() {
    // n = 2, L = 5, scalar tokens; at t = 4 the admissible v are 1, 2, 3
    // with score w·x_4·x_{v−1}
    let x = row(&[1.0, -1.0, 2.0, 0.5, 1.0]);
    let w = row(&[0.7]);
    let (first, pi) = induction_weights(&x, 4, 2, &w).unwrap();
    assert_eq!(first, 1);
    let e = [0.7f64.exp(), (-0.7f64).exp(), 1.4f64.exp()];
    let z: f64 = e.iter().sum();
    for k in 0..3 {
        assert_abs_diff_eq!(pi[k], e[k] / z, epsilon = 1e-15);
    }
    let y = induction_targets(&x, 2, &w).unwrap();
    let want = (e[0] * -1.0 + e[1] * 2.0 + e[2] * 0.5) / z;
    assert_abs_diff_eq!(y[(0, 4)], want, epsilon = 1e-15);
    assert_abs_diff_eq!(want, 0.15338, epsilon = 1e-5);
}

#[test]
fn induction_preset_embeds_patterns() {
    let mut spec = TaskSpec::induction_preset(4);
    assert_eq!((spec.d, spec.len, spec.count, spec.train_fraction), (10, 128, 10_000, 0.8));
    spec.count = 20;
    let ds = gen_induction(&spec).unwrap();
    assert_eq!(ds.train_count, 16);
    for x in &ds.inputs {
        for t in 0..128 {
            let c = x.col(t);
            assert_eq!(c.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(c.iter().filter(|&&v| v == 0.0).count(), 9);
        }
        // some 5-token window occurs at least 4 times
        let ids: Vec<usize> = (0..128).map(|t| x.col(t).iter().position(|&v| v == 1.0).unwrap()).collect();
        let best = (0..124)
            .map(|s| (0..124).filter(|&u| ids[u..u + 5] == ids[s..s + 5]).count())
            .max()
            .unwrap();
        assert!(best >= 4);
    }
}

#[test]
fn targets_are_exact_and_tokens_bounded() {
    let specs = [
        TaskSpec::ngram(3, 4, 16, 12, 5),
        TaskSpec::conv(ConvKernel::Poly { power: 1.5 }, 3, 16, 12, 6),
        TaskSpec { token_bound: 2.0, ..TaskSpec::conv(ConvKernel::Exp { rate: 0.3 }, 5, 16, 12, 7) },
        TaskSpec { count: 12, ..TaskSpec::induction_preset(8) },
    ];
    for spec in specs {
        let ds = gen_task(&spec).unwrap();
        assert_eq!(ds.inputs.len(), 12);
        for (i, x) in ds.inputs.iter().enumerate() {
            assert_eq!(compute_targets(&spec, x).unwrap(), ds.clean_targets[i]);
            for t in 0..x.cols() {
                assert!(norm2(&x.col(t)) <= spec.token_bound * (1.0 + 1e-12));
            }
        }
        let noise: Vec<f64> = ds
            .targets
            .iter()
            .zip(&ds.clean_targets)
            .flat_map(|(a, b)| a.sub(b).data().to_vec())
            .collect();
        let rms = (noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64).sqrt();
        assert!((rms - DEFAULT_NOISE_STD).abs() < 0.2 * DEFAULT_NOISE_STD);
        assert_eq!(gen_task(&spec).unwrap(), ds);
        let other = gen_task(&TaskSpec { seed: spec.seed + 100, ..spec.clone() }).unwrap();
        assert_ne!(other.inputs, ds.inputs);
    }
}

#[test]
fn spec_json_round_trip() {
    let spec = TaskSpec::conv(ConvKernel::Exp { rate: 0.5 }, 4, 32, 10, 9);
    let s = serde_json::to_string(&spec).unwrap();
    assert!(s.contains("\"L\":32"));
    assert_eq!(serde_json::from_str::<TaskSpec>(&s).unwrap(), spec);
    let bad = s.replacen("\"d\":4", "\"d\":4,\"extra\":1", 1);
    assert!(serde_json::from_str::<TaskSpec>(&bad).is_err());
    let minimal = r#"{"task":{"kind":"ngram","n":4},"d":8,"L":64,"count":3,"seed":1}"#;
    let parsed: TaskSpec = serde_json::from_str(minimal).unwrap();
    assert_eq!(parsed, TaskSpec::ngram(4, 8, 64, 3, 1));
}

#[test]
fn delta_task_through_extractor() {
    let (d, len) = (4, 48);
    let spec = TaskSpec { noise_std: 0.0, ..TaskSpec::conv(ConvKernel::Delta { lag: 2 }, d, len, 3, 10) };
    let ds = gen_conv(&spec).unwrap();
    let rho = vec![Matrix::zeros(d, d), Matrix::zeros(d, d), Matrix::identity(d)];
    let plan = AllocationPlan::uniform(2, 8, 4);
    let ext = ExtractorSpec::new(rho, 1.0, len, plan.clone(), 0.05, &RngStream::new(10, 1)).unwrap();
    let model = build_extractor(&ext, 64).unwrap();
    let attention = bound_eval(&ext.kernel().unwrap(), &plan, 0.05, true).unwrap().attention_term;
    let from = ext.burn_in().min(len - 1);
    for (x, y) in ds.inputs.iter().zip(&ds.targets) {
        let out = forward(&model, x).unwrap().output;
        for t in from..len {
            assert!(norm2(&out.sub(y).col(t)) <= attention);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ngram_matches_direct_sum(d in 1usize..4, len in 2usize..20, n_frac in 0.0f64..1.0, seed in any::<u64>()) {
        let n = 1 + ((len - 2) as f64 * n_frac) as usize;
        let x = Matrix::gaussian(d, len, 1.0, &mut RngStream::new(seed, 0).rng());
        let y = ngram_targets(&x, n);
        for t in 0..len {
            for r in 0..d {
                let want: f64 = (1..=n.min(t)).map(|i| x[(r, t - i)]).sum();
                prop_assert!((y[(r, t)] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn induction_weights_are_probabilities(len in 4usize..16, n in 2usize..4, seed in any::<u64>()) {
        let x = Matrix::gaussian(2, len, 1.0, &mut RngStream::new(seed, 0).rng());
        let w = Matrix::gaussian(2 * (n - 1), 2 * (n - 1), 1.0, &mut RngStream::new(seed, 1).rng());
        for t in 0..len {
            let (first, pi) = induction_weights(&x, t, n, &w).unwrap();
            prop_assert_eq!(pi.len(), t.saturating_sub(first));
            if !pi.is_empty() {
                prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(pi.iter().all(|&p| p >= 0.0));
            }
        }
    }
}
