use headlab_core::allocation::AllocationPlan;
use headlab_core::numerics::{Matrix, RngStream};
use headlab_core::transformer::*;
use rand::Rng;

/// Central differences on every trainable scalar.
fn finite_difference(
    p: &TransformerParams,
    xs: &[Matrix],
    ys: &[Matrix],
    mask: Option<&[Vec<bool>]>,
    h: f64,
) -> Vec<f64> {
    let base = p.flat();
    let mut out = Vec::with_capacity(base.len());
    let mut q = p.clone();
    for i in 0..base.len() {
        let mut v = base.clone();
        v[i] = base[i] + h;
        q.set_flat(&v);
        let lp = loss(&q, xs, ys, mask).unwrap();
        v[i] = base[i] - h;
        q.set_flat(&v);
        let lm = loss(&q, xs, ys, mask).unwrap();
        out.push((lp - lm) / (2.0 * h));
    }
    out
}

/// Relative error with a 1e-4 floor on the magnitude scale.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn check_grads(train_slopes: bool, seed: u64) -> f64 {
    let mut r = RngStream::new(seed, 9).rng();
    let mut p = random_model(3, 4, &[2, 2], 1, 5, &mut r);
    p.train_slopes = train_slopes;
    let xs: Vec<Matrix> = (0..2).map(|_| Matrix::gaussian(3, 3, 1.0, &mut r)).collect();
    let ys: Vec<Matrix> = (0..2).map(|_| Matrix::gaussian(3, 3, 1.0, &mut r)).collect();
    let mask = vec![vec![true, false, true], vec![true, true, true]];
    let (_, g) = loss_and_grads(&p, &xs, &ys, Some(&mask)).unwrap();
    let fd = finite_difference(&p, &xs, &ys, Some(&mask), 1e-6);
    g.flat()
        .iter()
        .zip(&fd)
        .map(|(a, b)| rel_err(*a, *b))
        .fold(0.0, f64::max)
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..5 {
        let e = check_grads(false, seed);
        assert!(e <= 1e-5, "seed {seed}: max relative error {e}");
    }
}

#[test]
fn slope_gradients_match_finite_differences() {
    for seed in 0..5 {
        let e = check_grads(true, seed);
        assert!(e <= 1e-5, "seed {seed}: max relative error {e}");
    }
}

#[test]
fn zero_model_outputs_zero() {
    let lay = grouped_head_layout(&AllocationPlan::uniform(1, 2, 2), 4).unwrap();
    let p = TransformerParams::zeros(2, 4, &[lay], 3, PositionalEncoding::Alibi);
    let mut r = RngStream::new(0, 0).rng();
    let x = Matrix::gaussian(2, 5, 1.0, &mut r);
    assert_eq!(predict(&p, &x).unwrap().max_abs(), 0.0);
}

#[test]
fn single_token_scores_are_one() {
    let mut r = RngStream::new(2, 0).rng();
    let p = random_model(2, 4, &[2, 1], 2, 3, &mut r);
    let x = Matrix::gaussian(2, 1, 1.0, &mut r);
    let c = forward(&p, &x).unwrap();
    for lc in &c.layers {
        for h in &lc.heads {
            assert_eq!(h.scores.data(), &[1.0]);
        }
    }
}

#[test]
fn scalar_model_matches_hand_computation() {
    // D = d = 1, one head of dimension 1, one layer, FFN width 1.
    let lay = grouped_head_layout(&AllocationPlan::uniform(1, 1, 1), 1).unwrap();
    let mut p = TransformerParams::zeros(1, 1, &[lay], 1, PositionalEncoding::Alibi);
    p.w_e = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
    p.b_e = vec![0.5];
    let h = &mut p.layers[0].heads[0];
    h.w_q = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
    h.w_k = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
    h.w_v = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
    h.slope = 0.25;
    p.layers[0].w_o = Matrix::from_vec(1, 1, vec![0.5]).unwrap();
    p.layers[0].ffn.w1 = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
    p.layers[0].ffn.b1 = vec![-1.0];
    p.layers[0].ffn.w2 = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
    p.layers[0].ffn.b2 = vec![0.1];
    p.w_r = Matrix::from_vec(1, 1, vec![1.5]).unwrap();
    p.b_r = vec![-0.2];
    let x = Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap();
    let y = predict(&p, &x).unwrap();

    // embedding: h = 2x + 0.5 -> (2.5, -1.5)
    // q = h, k = h/2, v = 3h
    // column 0 sees only s = 0: weight 1, head output 3*2.5 = 7.5
    // column 1: z_00 = q0*k1 - 0.25 = 2.5*(-0.75) - 0.25 = -2.125,
    //           z_11 = q1*k1 = (-1.5)(-0.75) = 1.125
    let z0: f64 = -2.125;
    let z1: f64 = 1.125;
    let w0 = z0.exp() / (z0.exp() + z1.exp());
    let w1 = 1.0 - w0;
    let a0 = 7.5;
    let a1 = w0 * 7.5 + w1 * (-4.5);
    // residual + W_O
    let half = [2.5 + 0.5 * a0, -1.5 + 0.5 * a1];
    // FFN: relu(half - 1) * 2 + 0.1
    let out: Vec<f64> = half
        .iter()
        .map(|&v: &f64| v + 2.0 * (v - 1.0).max(0.0) + 0.1)
        .collect();
    let expect: Vec<f64> = out.iter().map(|v| 1.5 * v - 0.2).collect();
    assert!((y[(0, 0)] - expect[0]).abs() < 1e-12);
    assert!((y[(0, 1)] - expect[1]).abs() < 1e-12);
}

#[test]
fn causality_is_exact() {
    let mut r = RngStream::new(4, 0).rng();
    let p = random_model(3, 6, &[2, 3], 2, 4, &mut r);
    let x = Matrix::gaussian(3, 7, 1.0, &mut r);
    let base = predict(&p, &x).unwrap();
    for t in 0..7 {
        let mut x2 = x.clone();
        for i in 0..3 {
            x2[(i, t)] += r.random_range(-1.0..1.0);
        }
        let y2 = predict(&p, &x2).unwrap();
        for s in 0..t {
            for i in 0..3 {
                assert_eq!(base[(i, s)], y2[(i, s)]);
            }
        }
    }
}

#[test]
fn scores_are_probability_columns() {
    let mut r = RngStream::new(5, 0).rng();
    let p = random_model(3, 6, &[2, 3], 2, 4, &mut r);
    let x = Matrix::gaussian(3, 9, 1.0, &mut r);
    let c = forward(&p, &x).unwrap();
    for lc in &c.layers {
        for h in &lc.heads {
            for l in 0..9 {
                let col = h.scores.col(l);
                assert!(col.iter().all(|v| *v >= 0.0));
                assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                assert!(col[l + 1..].iter().all(|v| *v == 0.0));
            }
        }
    }
}

#[test]
fn uniform_attention_is_prefix_average() {
    let lay = grouped_head_layout(&AllocationPlan::uniform(1, 1, 2), 3).unwrap();
    let mut r = RngStream::new(6, 0).rng();
    let mut p = TransformerParams::zeros(2, 3, &[lay], 2, PositionalEncoding::Alibi);
    p.w_e = Matrix::gaussian(3, 2, 1.0, &mut r);
    p.layers[0].heads[0].slope = 0.0;
    p.layers[0].heads[0].w_v = Matrix::gaussian(2, 3, 1.0, &mut r);
    p.layers[0].w_o = Matrix::gaussian(3, 3, 1.0, &mut r);
    p.w_r = Matrix::gaussian(2, 3, 1.0, &mut r);
    let x = Matrix::gaussian(2, 6, 1.0, &mut r);
    let y = predict(&p, &x).unwrap();
    let e = p.w_e.dot(&x);
    let v = p.layers[0].heads[0].w_v.dot(&e);
    for l in 0..6 {
        let mut avg = vec![0.0; 2];
        for s in 0..=l {
            for i in 0..2 {
                avg[i] += v[(i, s)] / (l + 1) as f64;
            }
        }
        let mut concat = vec![avg[0], avg[1], 0.0];
        let mixed = p.layers[0].w_o.matvec(&concat);
        for i in 0..3 {
            concat[i] = e[(i, l)] + mixed[i];
        }
        let out = p.w_r.matvec(&concat);
        for i in 0..2 {
            assert!((out[i] - y[(i, l)]).abs() < 1e-12);
        }
    }
}

#[test]
fn readout_gradient_is_least_squares_gradient() {
    let mut r = RngStream::new(7, 0).rng();
    let mut p = TransformerParams::zeros(2, 3, &[], 1, PositionalEncoding::Alibi);
    p.w_e = Matrix::gaussian(3, 2, 1.0, &mut r);
    p.w_r = Matrix::gaussian(2, 3, 1.0, &mut r);
    let x = Matrix::gaussian(2, 4, 1.0, &mut r);
    let y = Matrix::gaussian(2, 4, 1.0, &mut r);
    let (_, g) = loss_and_grads(&p, &[x.clone()], &[y.clone()], None).unwrap();
    let feats = p.w_e.dot(&x);
    let resid = p.w_r.dot(&feats).sub(&y);
    let expect = resid.dot_t(&feats).scale(2.0 / 8.0);
    assert!(g.w_r.sub(&expect).max_abs() < 1e-12);
}

#[test]
fn perfect_targets_give_zero_loss_and_gradient() {
    let mut r = RngStream::new(8, 0).rng();
    let p = random_model(2, 4, &[2], 1, 3, &mut r);
    let x = Matrix::gaussian(2, 5, 1.0, &mut r);
    let y = predict(&p, &x).unwrap();
    let (l, g) = loss_and_grads(&p, &[x], &[y], None).unwrap();
    assert_eq!(l, 0.0);
    assert!(g.flat().iter().all(|v| *v == 0.0));
}

fn identity_task(n: usize, seed: u64) -> (Vec<Matrix>, Vec<Matrix>) {
    let mut r = RngStream::new(seed, 0).rng();
    let xs: Vec<Matrix> = (0..n)
        .map(|_| headlab_core::numerics::sphere_tokens(2, 4, 1.0, &mut r))
        .collect();
    (xs.clone(), xs)
}

#[test]
fn identity_task_is_learned_by_zero_layer_model() {
    let (xs, ys) = identity_task(16, 1);
    let p0 = TransformerParams::init(2, 4, &[], 1, PositionalEncoding::Alibi, &RngStream::new(3, 0)).unwrap();
    let data = TrainData {
        train_inputs: &xs,
        train_targets: &ys,
        val_inputs: &xs,
        val_targets: &ys,
    };
    let cfg = TrainConfig {
        optimizer: Optimizer::Sgd,
        lr: 1e-2,
        epochs: 500,
        batch_size: 1,
    };
    let (_, hist) = train(&p0, &data, &cfg, &RngStream::new(3, 1)).unwrap();
    let last = *hist.train_loss.last().unwrap();
    assert!(last <= 1e-6, "final loss {last}");
}

#[test]
fn zero_epochs_leave_params_unchanged_and_runs_repeat() {
    let (xs, ys) = identity_task(6, 2);
    let lay = grouped_head_layout(&AllocationPlan::uniform(1, 2, 2), 4).unwrap();
    let p0 = TransformerParams::init(2, 4, &[lay], 4, PositionalEncoding::Sinusoidal, &RngStream::new(4, 0)).unwrap();
    let data = TrainData {
        train_inputs: &xs,
        train_targets: &ys,
        val_inputs: &[],
        val_targets: &[],
    };
    let mut cfg = TrainConfig {
        optimizer: Optimizer::adam(),
        lr: 1e-2,
        epochs: 0,
        batch_size: 2,
    };
    let (p1, h) = train(&p0, &data, &cfg, &RngStream::new(4, 1)).unwrap();
    assert_eq!(p1, p0);
    assert_eq!(h.train_loss.len(), 1);
    cfg.epochs = 5;
    let (_, a) = train(&p0, &data, &cfg, &RngStream::new(4, 1)).unwrap();
    let (_, b) = train(&p0, &data, &cfg, &RngStream::new(4, 1)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn divergence_is_reported() {
    let (xs, ys) = identity_task(4, 3);
    let lay = grouped_head_layout(&AllocationPlan::uniform(1, 2, 2), 4).unwrap();
    let p0 = TransformerParams::init(2, 4, &[lay], 4, PositionalEncoding::Alibi, &RngStream::new(5, 0)).unwrap();
    let data = TrainData {
        train_inputs: &xs,
        train_targets: &ys,
        val_inputs: &[],
        val_targets: &[],
    };
    let cfg = TrainConfig {
        optimizer: Optimizer::Sgd,
        lr: 1e3,
        epochs: 50,
        batch_size: 1,
    };
    assert!(train(&p0, &data, &cfg, &RngStream::new(5, 1)).is_err());
}
