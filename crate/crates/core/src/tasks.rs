//! Synthetic sequence tasks: n-gram sums, linear convolutions and the
//! generalized induction head.
//!
//! Sequence `i` draws its tokens from `RngStream::new(seed, 0).child(i)`
//! and its target noise from `.child(i).child(1)`, so datasets are
//! reproducible element by element.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sample_sphere, softmax_column, Matrix, RngStream};

pub const DEFAULT_NOISE_STD: f64 = 0.01;
pub const DEFAULT_MATCH_SCALE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConvKernel {
    /// `ρ_T = I`, all other lags zero.
    Delta { lag: usize },
    /// `ρ_i = e^{−a i}·I`.
    Exp { rate: f64 },
    /// `ρ_i = (1 + i)^{−a}·I`.
    Poly { power: f64 },
}

impl ConvKernel {
    /// Scalar weights `ρ̄_0..ρ̄_{len−1}`.
    pub fn weights(&self, len: usize) -> Result<Vec<f64>> {
        match *self {
            ConvKernel::Delta { lag } => {
                if lag >= len {
                    return Err(Error::config(format!("delta lag {lag} must be below L = {len}")));
                }
                let mut w = vec![0.0; len];
                w[lag] = 1.0;
                Ok(w)
            }
            ConvKernel::Exp { rate } => {
                if !(rate > 0.0 && rate.is_finite()) {
                    return Err(Error::config("exponential decay rate must be positive"));
                }
                Ok((0..len).map(|i| (-rate * i as f64).exp()).collect())
            }
            ConvKernel::Poly { power } => {
                if !(power > 0.0 && power.is_finite()) {
                    return Err(Error::config("polynomial decay power must be positive"));
                }
                Ok((0..len).map(|i| (1.0 + i as f64).powf(-power)).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskKind {
    Ngram {
        n: usize,
    },
    Conv {
        kernel: ConvKernel,
    },
    Induction {
        /// Pattern length `n`; matches compare windows of `n − 1` tokens.
        n: usize,
        /// `W*` of size `d(n−1) × d(n−1)`; `None` means `match_scale·I`.
        #[serde(default)]
        match_matrix: Option<Matrix>,
        #[serde(default = "default_match_scale")]
        match_scale: f64,
        /// One-hot vocabulary size; `None` samples sphere tokens.
        #[serde(default)]
        vocab: Option<usize>,
        /// Length of the embedded repeating pattern.
        #[serde(default = "default_pattern_len")]
        pattern_len: usize,
        /// Copies of the pattern placed in each sequence.
        #[serde(default = "default_repeats")]
        repeats: usize,
    },
}

fn default_match_scale() -> f64 {
    DEFAULT_MATCH_SCALE
}

fn default_pattern_len() -> usize {
    5
}

fn default_repeats() -> usize {
    4
}

fn default_bound() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    DEFAULT_NOISE_STD
}

fn default_train_fraction() -> f64 {
    0.8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    #[serde(rename = "task")]
    pub kind: TaskKind,
    pub d: usize,
    #[serde(rename = "L")]
    pub len: usize,
    #[serde(default = "default_bound")]
    pub token_bound: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    pub count: usize,
    pub seed: u64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

impl TaskSpec {
    pub fn ngram(n: usize, d: usize, len: usize, count: usize, seed: u64) -> Self {
        TaskSpec {
            kind: TaskKind::Ngram { n },
            d,
            len,
            token_bound: 1.0,
            noise_std: DEFAULT_NOISE_STD,
            count,
            seed,
            train_fraction: 0.8,
        }
    }

    pub fn conv(kernel: ConvKernel, d: usize, len: usize, count: usize, seed: u64) -> Self {
        TaskSpec {
            kind: TaskKind::Conv { kernel },
            ..TaskSpec::ngram(1, d, len, count, seed)
        }
    }

    /// Categorical induction preset: 10 one-hot tokens, `L = 128`, 5-token
    /// patterns, 10 000 sequences split 80/20.
    pub fn induction_preset(seed: u64) -> Self {
        TaskSpec {
            kind: TaskKind::Induction {
                n: 5,
                match_matrix: None,
                match_scale: DEFAULT_MATCH_SCALE,
                vocab: Some(10),
                pattern_len: 5,
                repeats: 4,
            },
            d: 10,
            len: 128,
            token_bound: 1.0,
            noise_std: DEFAULT_NOISE_STD,
            count: 10_000,
            seed,
            train_fraction: 0.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.len == 0 {
            return Err(Error::config("d and L must be positive"));
        }
        if !(self.token_bound > 0.0 && self.token_bound.is_finite()) {
            return Err(Error::config("token_bound must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::config("train_fraction must lie in [0, 1]"));
        }
        match &self.kind {
            TaskKind::Ngram { n } => {
                if *n == 0 || *n >= self.len {
                    return Err(Error::config(format!("n-gram window {n} must lie in 1..L = {}", self.len)));
                }
            }
            TaskKind::Conv { kernel } => {
                kernel.weights(self.len)?;
            }
            TaskKind::Induction {
                n,
                match_matrix,
                match_scale,
                vocab,
                pattern_len,
                repeats,
            } => {
                if *n < 2 || *n >= self.len {
                    return Err(Error::config(format!("pattern length {n} must lie in 2..L = {}", self.len)));
                }
                let w = self.d * (n - 1);
                if let Some(m) = match_matrix {
                    if m.shape() != (w, w) {
                        return Err(Error::shape(format!("W* must be {w} × {w}")));
                    }
                }
                if !match_scale.is_finite() {
                    return Err(Error::config("match_scale must be finite"));
                }
                if let Some(v) = vocab {
                    if *v == 0 || *v > self.d {
                        return Err(Error::config("vocab must lie in 1..=d for one-hot tokens"));
                    }
                }
                if pattern_len * repeats > self.len {
                    return Err(Error::config("pattern copies do not fit in the sequence"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub inputs: Vec<Matrix>,
    /// Noisy targets used for training.
    pub targets: Vec<Matrix>,
    /// Targets before noise, recomputable from `inputs`.
    pub clean_targets: Vec<Matrix>,
    pub train_count: usize,
}

impl Dataset {
    pub fn train_inputs(&self) -> &[Matrix] {
        &self.inputs[..self.train_count]
    }

    pub fn train_targets(&self) -> &[Matrix] {
        &self.targets[..self.train_count]
    }

    pub fn val_inputs(&self) -> &[Matrix] {
        &self.inputs[self.train_count..]
    }

    pub fn val_targets(&self) -> &[Matrix] {
        &self.targets[self.train_count..]
    }
}

/// Convolution `y_t = Σ_i w_i x_{t−i}` with zero padding.
pub fn convolve(x: &Matrix, weights: &[f64]) -> Matrix {
    let (d, len) = x.shape();
    let mut y = Matrix::zeros(d, len);
    for t in 0..len {
        for (i, &w) in weights.iter().enumerate().take(t + 1) {
            if w != 0.0 {
                for r in 0..d {
                    y[(r, t)] += w * x[(r, t - i)];
                }
            }
        }
    }
    y
}

/// `y_t = x_{t−1} + … + x_{t−n}` with zero padding.
pub fn ngram_targets(x: &Matrix, n: usize) -> Matrix {
    let mut w = vec![1.0; n + 1];
    w[0] = 0.0;
    convolve(x, &w)
}

fn window(x: &Matrix, start: usize, count: usize) -> Vec<f64> {
    (start..start + count).flat_map(|c| x.col(c)).collect()
}

/// Match weights `π_v` for query position `t` (0-based) over admissible
/// `v ∈ [n−1, t−1]`; returns `(first_v, weights)`, empty when none.
pub fn induction_weights(x: &Matrix, t: usize, n: usize, w_star: &Matrix) -> Result<(usize, Vec<f64>)> {
    let first = n - 1;
    if t <= first {
        return Ok((first, Vec::new()));
    }
    let query = w_star.t_matvec(&window(x, t + 2 - n, n - 1));
    let scores: Vec<f64> = (first..t)
        .map(|v| {
            let key = window(x, v + 1 - n, n - 1);
            query.iter().zip(&key).map(|(a, b)| a * b).sum()
        })
        .collect();
    Ok((first, softmax_column(&scores)?))
}

/// Generalized induction-head targets `y_t = Σ_v π_v x_v`.
pub fn induction_targets(x: &Matrix, n: usize, w_star: &Matrix) -> Result<Matrix> {
    let (d, len) = x.shape();
    let mut y = Matrix::zeros(d, len);
    for t in 0..len {
        let (first, pi) = induction_weights(x, t, n, w_star)?;
        for (k, p) in pi.iter().enumerate() {
            for r in 0..d {
                y[(r, t)] += p * x[(r, first + k)];
            }
        }
    }
    Ok(y)
}

fn match_matrix(spec: &TaskSpec) -> Option<Matrix> {
    match &spec.kind {
        TaskKind::Induction {
            n,
            match_matrix,
            match_scale,
            ..
        } => Some(
            match_matrix
                .clone()
                .unwrap_or_else(|| Matrix::identity(spec.d * (n - 1)).scale(*match_scale)),
        ),
        _ => None,
    }
}

/// Noise-free targets for `x` under `spec`.
pub fn compute_targets(spec: &TaskSpec, x: &Matrix) -> Result<Matrix> {
    match &spec.kind {
        TaskKind::Ngram { n } => Ok(ngram_targets(x, *n)),
        TaskKind::Conv { kernel } => Ok(convolve(x, &kernel.weights(x.cols())?)),
        TaskKind::Induction { n, .. } => induction_targets(x, *n, &match_matrix(spec).expect("induction")),
    }
}

fn one_hot(d: usize, k: usize, bound: f64) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[k] = bound;
    v
}

fn sample_inputs<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> Matrix {
    let (d, len, b) = (spec.d, spec.len, spec.token_bound);
    let token = |rng: &mut R| match &spec.kind {
        TaskKind::Induction { vocab: Some(v), .. } => one_hot(d, rng.random_range(0..*v), b),
        _ => sample_sphere(d, b, rng),
    };
    let mut x = Matrix::zeros(d, len);
    for t in 0..len {
        x.set_col(t, &token(rng));
    }
    if let TaskKind::Induction {
        pattern_len, repeats, ..
    } = spec.kind
    {
        if repeats > 0 && pattern_len > 0 {
            let pattern: Vec<Vec<f64>> = (0..pattern_len).map(|_| token(rng)).collect();
            // disjoint placements: split the free room into repeats + 1 gaps
            let free = len - pattern_len * repeats;
            let mut cuts: Vec<usize> = (0..repeats).map(|_| rng.random_range(0..=free)).collect();
            cuts.sort_unstable();
            for (k, &c) in cuts.iter().enumerate() {
                let start = c + k * pattern_len;
                for (j, tok) in pattern.iter().enumerate() {
                    x.set_col(start + j, tok);
                }
            }
        }
    }
    x
}

fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let base = RngStream::new(spec.seed, 0);
    let mut inputs = Vec::with_capacity(spec.count);
    let mut clean = Vec::with_capacity(spec.count);
    let mut noisy = Vec::with_capacity(spec.count);
    let normal = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config(e.to_string()))?;
    for i in 0..spec.count {
        let stream = base.child(i as u64);
        let x = sample_inputs(spec, &mut stream.rng());
        let y = compute_targets(spec, &x)?;
        let mut yn = y.clone();
        if spec.noise_std > 0.0 {
            let mut r = stream.child(1).rng();
            yn.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut r));
        }
        inputs.push(x);
        clean.push(y);
        noisy.push(yn);
    }
    let train_count = (spec.count as f64 * spec.train_fraction).floor() as usize;
    Ok(Dataset {
        spec: spec.clone(),
        inputs,
        targets: noisy,
        clean_targets: clean,
        train_count,
    })
}

fn expect_kind(spec: &TaskSpec, want: &str) -> Result<()> {
    let got = match spec.kind {
        TaskKind::Ngram { .. } => "ngram",
        TaskKind::Conv { .. } => "conv",
        TaskKind::Induction { .. } => "induction",
    };
    if got == want {
        Ok(())
    } else {
        Err(Error::config(format!("expected a {want} task, got {got}")))
    }
}

pub fn gen_ngram(spec: &TaskSpec) -> Result<Dataset> {
    expect_kind(spec, "ngram")?;
    generate(spec)
}

pub fn gen_conv(spec: &TaskSpec) -> Result<Dataset> {
    expect_kind(spec, "conv")?;
    generate(spec)
}

pub fn gen_induction(spec: &TaskSpec) -> Result<Dataset> {
    expect_kind(spec, "induction")?;
    generate(spec)
}

/// Dispatches on the task kind.
pub fn gen_task(spec: &TaskSpec) -> Result<Dataset> {
    generate(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_ngram_example() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0, 5.0]]).unwrap();
        assert_eq!(ngram_targets(&x, 4).row(0), &[0.0, 1.0, 3.0, 6.0, 10.0]);
    }

    #[test]
    fn window_too_long_rejected() {
        assert!(gen_ngram(&TaskSpec::ngram(5, 2, 5, 3, 0)).is_err());
    }

    #[test]
    fn wrong_kind_rejected() {
        assert!(gen_conv(&TaskSpec::ngram(2, 2, 5, 3, 0)).is_err());
    }
}
