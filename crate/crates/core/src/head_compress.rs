//! Teacher to student compression of a single attention head.
//!
//! The student's bilinear form `Ŵ_QᵀŴ_K` starts from the truncated SVD of
//! the teacher's `W_QᵀW_K` and may then be fine-tuned on the masked
//! attention-score MSE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mean_std, svd, Matrix};
use crate::transformer::{attention_scores, softmax_backward};

/// Query/key projections of one head, both `d × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct QkHead {
    pub w_q: Matrix,
    pub w_k: Matrix,
}

impl QkHead {
    pub fn new(w_q: Matrix, w_k: Matrix) -> Result<Self> {
        if w_q.shape() != w_k.shape() {
            return Err(Error::shape("W_Q and W_K must share a shape"));
        }
        Ok(QkHead { w_q, w_k })
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.cols()
    }

    /// The bilinear form `W_QᵀW_K` (`D × D`).
    pub fn bilinear(&self) -> Matrix {
        self.w_q.t_dot(&self.w_k)
    }

    pub fn scores(&self, x: &Matrix, slope: f64, causal: bool) -> Result<Matrix> {
        if x.rows() != self.model_dim() {
            return Err(Error::shape(format!(
                "tokens have {} rows, head expects {}",
                x.rows(),
                self.model_dim()
            )));
        }
        attention_scores(&self.w_q, &self.w_k, x, slope, causal)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadPair {
    pub teacher: QkHead,
    pub student: QkHead,
    /// Shared Alibi slope, held fixed during fine-tuning.
    pub slope: f64,
    pub causal: bool,
}

impl HeadPair {
    pub fn new(teacher: QkHead, student: QkHead, slope: f64, causal: bool) -> Result<Self> {
        if teacher.model_dim() != student.model_dim() {
            return Err(Error::shape("teacher and student differ in model dimension"));
        }
        if student.dim() > teacher.dim() {
            return Err(Error::shape("student dimension exceeds teacher dimension"));
        }
        Ok(HeadPair {
            teacher,
            student,
            slope,
            causal,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub d_h: usize,
    pub lambda_tail: f64,
    pub init_error: f64,
    pub tuned_error: f64,
    pub mse: f64,
    #[serde(rename = "L")]
    pub len: usize,
    pub steps: usize,
}

/// Truncated-SVD student: returns `(Ŵ_Q, Ŵ_K, Λ)` with `Λ` the tail sum of
/// singular values of `W_QᵀW_K` beyond `d_h`.
pub fn svd_init(teacher: &QkHead, d_h: usize) -> Result<(Matrix, Matrix, f64)> {
    if d_h == 0 || d_h > teacher.dim() {
        return Err(Error::shape(format!(
            "student dimension {d_h} outside 1..={}",
            teacher.dim()
        )));
    }
    let g = teacher.bilinear();
    let dec = svd(&g)?;
    let d = g.rows();
    let mut w_q = Matrix::zeros(d_h, d);
    let mut w_k = Matrix::zeros(d_h, d);
    for i in 0..d_h.min(dec.s.len()) {
        let r = dec.s[i].sqrt();
        for j in 0..d {
            w_q[(i, j)] = r * dec.u[(j, i)];
            w_k[(i, j)] = r * dec.v[(j, i)];
        }
    }
    // rank(W_QᵀW_K) ≤ d_H, so values past d_H are rounding noise
    let tail = dec.s.iter().take(teacher.dim()).skip(d_h).fold(0.0, |a, b| a + b);
    Ok((w_q, w_k, tail))
}

fn unmasked(s: usize, l: usize, causal: bool) -> bool {
    !causal || s <= l
}

/// `(max_l ‖(S_T − S_S)e_l‖₂, MSE over unmasked entries)` for one sequence.
pub fn compression_error(
    teacher: &QkHead,
    student: &QkHead,
    x: &Matrix,
    slope: f64,
    causal: bool,
) -> Result<(f64, f64)> {
    let st = teacher.scores(x, slope, causal)?;
    let ss = student.scores(x, slope, causal)?;
    Ok(score_gap(&st, &ss, causal))
}

fn score_gap(st: &Matrix, ss: &Matrix, causal: bool) -> (f64, f64) {
    let len = st.cols();
    let mut max_col = 0.0f64;
    let mut sq = 0.0;
    let mut count = 0usize;
    for l in 0..len {
        let mut col = 0.0;
        for s in 0..len {
            if unmasked(s, l, causal) {
                let e = st[(s, l)] - ss[(s, l)];
                col += e * e;
                count += 1;
            }
        }
        sq += col;
        max_col = max_col.max(col.sqrt());
    }
    (max_col, sq / count as f64)
}

/// Batch version: per-sequence max-column errors and MSEs averaged over
/// sequences.
pub fn batch_compression_error(pair: &HeadPair, data: &[Matrix]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::config("evaluation batch is empty"));
    }
    let mut cols = Vec::with_capacity(data.len());
    let mut mses = Vec::with_capacity(data.len());
    for x in data {
        let (c, m) = compression_error(&pair.teacher, &pair.student, x, pair.slope, pair.causal)?;
        cols.push(c);
        mses.push(m);
    }
    Ok((mean_std(&cols).0, mean_std(&mses).0))
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TuneOptimizer {
    /// Plain gradient descent; a step that raises the loss is rejected and
    /// the step size halved.
    GradientDescent,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    pub optimizer: TuneOptimizer,
    pub steps: usize,
    pub step_size: f64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            optimizer: TuneOptimizer::GradientDescent,
            steps: 100,
            step_size: 1.0,
        }
    }
}

struct Objective<'a> {
    data: &'a [Matrix],
    targets: Vec<Matrix>,
    slope: f64,
    causal: bool,
    count: f64,
}

impl<'a> Objective<'a> {
    fn new(pair: &HeadPair, data: &'a [Matrix]) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::config("training batch is empty"));
        }
        let targets = data
            .iter()
            .map(|x| pair.teacher.scores(x, pair.slope, pair.causal))
            .collect::<Result<Vec<_>>>()?;
        let count = data
            .iter()
            .map(|x| {
                let l = x.cols();
                if pair.causal {
                    l * (l + 1) / 2
                } else {
                    l * l
                }
            })
            .sum::<usize>() as f64;
        Ok(Objective {
            data,
            targets,
            slope: pair.slope,
            causal: pair.causal,
            count,
        })
    }

    fn loss(&self, student: &QkHead) -> Result<f64> {
        let mut total = 0.0;
        for (x, st) in self.data.iter().zip(&self.targets) {
            let ss = student.scores(x, self.slope, self.causal)?;
            for (a, b) in st.data().iter().zip(ss.data()) {
                total += (a - b) * (a - b);
            }
        }
        Ok(total / self.count)
    }

    fn loss_and_grads(&self, student: &QkHead) -> Result<(f64, Matrix, Matrix)> {
        let mut total = 0.0;
        let mut gq = Matrix::zeros(student.dim(), student.model_dim());
        let mut gk = gq.clone();
        for (x, st) in self.data.iter().zip(&self.targets) {
            let q = student.w_q.dot(x);
            let k = student.w_k.dot(x);
            let ss = student.scores(x, self.slope, self.causal)?;
            let diff = ss.sub(st);
            total += diff.data().iter().map(|e| e * e).sum::<f64>();
            let ds = diff.scale(2.0 / self.count);
            let dz = softmax_backward(&ss, &ds);
            // Z = QᵀK, so dQ = K dZᵀ and dK = Q dZ
            let dq = k.dot_t(&dz);
            let dk = q.dot(&dz);
            gq.axpy(1.0, &dq.dot_t(x));
            gk.axpy(1.0, &dk.dot_t(x));
        }
        Ok((total / self.count, gq, gk))
    }
}

/// Masked attention-score MSE of the student against the teacher and its
/// gradients with respect to `Ŵ_Q` and `Ŵ_K`.
pub fn student_loss_and_grads(pair: &HeadPair, data: &[Matrix]) -> Result<(f64, Matrix, Matrix)> {
    Objective::new(pair, data)?.loss_and_grads(&pair.student)
}

pub fn student_loss(pair: &HeadPair, data: &[Matrix]) -> Result<f64> {
    Objective::new(pair, data)?.loss(&pair.student)
}

fn check_finite(loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::numerical("non-finite fine-tune loss; reduce step_size"))
    }
}

/// Full-batch fine-tuning of the student. Returns the best iterate and the
/// loss trace (`trace[0]` is the initial loss, one entry per step after).
pub fn fine_tune(pair: &HeadPair, data: &[Matrix], cfg: &TuneConfig) -> Result<(HeadPair, Vec<f64>)> {
    if !(cfg.step_size > 0.0) {
        return Err(Error::config("step_size must be positive"));
    }
    let obj = Objective::new(pair, data)?;
    let (mut loss, mut gq, mut gk) = obj.loss_and_grads(&pair.student)?;
    check_finite(loss)?;
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    trace.push(loss);
    let mut current = pair.student.clone();
    let mut best = (loss, current.clone());

    match cfg.optimizer {
        TuneOptimizer::GradientDescent => {
            let mut eta = cfg.step_size;
            for _ in 0..cfg.steps {
                let mut trial = current.clone();
                trial.w_q.axpy(-eta, &gq);
                trial.w_k.axpy(-eta, &gk);
                let (l, tq, tk) = obj.loss_and_grads(&trial)?;
                check_finite(l)?;
                if l <= loss {
                    current = trial;
                    loss = l;
                    gq = tq;
                    gk = tk;
                } else {
                    eta *= 0.5;
                }
                trace.push(loss);
            }
            best = (loss, current);
        }
        TuneOptimizer::Adam { beta1, beta2, eps } => {
            let n = gq.data().len();
            let mut m = vec![0.0; 2 * n];
            let mut v = vec![0.0; 2 * n];
            for t in 1..=cfg.steps {
                let c1 = 1.0 - beta1.powi(t as i32);
                let c2 = 1.0 - beta2.powi(t as i32);
                let params = current.w_q.data_mut().iter_mut().chain(current.w_k.data_mut().iter_mut());
                let grads = gq.data().iter().chain(gk.data());
                for (i, (p, &g)) in params.zip(grads).enumerate() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    *p -= cfg.step_size * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
                let (l, tq, tk) = obj.loss_and_grads(&current)?;
                check_finite(l)?;
                loss = l;
                gq = tq;
                gk = tk;
                trace.push(loss);
                if loss < best.0 {
                    best = (loss, current.clone());
                }
            }
        }
    }
    let mut out = pair.clone();
    out.student = best.1;
    Ok((out, trace))
}

/// Compresses `teacher` to `d_h`, fine-tunes on `train`, and evaluates on
/// `eval`. The reported student is whichever of the SVD init and the tuned
/// head has the smaller evaluation error.
pub fn compress_head(
    teacher: &QkHead,
    d_h: usize,
    train: &[Matrix],
    eval: &[Matrix],
    tune: &TuneConfig,
    slope: f64,
) -> Result<(CompressionReport, HeadPair)> {
    let (w_q, w_k, tail) = svd_init(teacher, d_h)?;
    let init = HeadPair::new(teacher.clone(), QkHead::new(w_q, w_k)?, slope, true)?;
    let (init_error, init_mse) = batch_compression_error(&init, eval)?;
    let (tuned, _) = fine_tune(&init, train, tune)?;
    let (tuned_error, tuned_mse) = batch_compression_error(&tuned, eval)?;
    let (pair, err, mse) = if tuned_error <= init_error {
        (tuned, tuned_error, tuned_mse)
    } else {
        (init, init_error, init_mse)
    };
    let len = eval.iter().map(Matrix::cols).max().unwrap_or(0);
    Ok((
        CompressionReport {
            d_h,
            lambda_tail: tail,
            init_error,
            tuned_error: err,
            mse,
            len,
            steps: tune.steps,
        },
        pair,
    ))
}

/// One report per grid value, each from a fresh SVD init.
pub fn compression_sweep(
    teacher: &QkHead,
    d_h_grid: &[usize],
    train: &[Matrix],
    eval: &[Matrix],
    tune: &TuneConfig,
    slope: f64,
) -> Result<Vec<CompressionReport>> {
    d_h_grid
        .iter()
        .map(|&d_h| compress_head(teacher, d_h, train, eval, tune, slope).map(|r| r.0))
        .collect()
}
