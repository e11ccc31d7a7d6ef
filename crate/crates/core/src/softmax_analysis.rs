//! Column-wise softmax Jacobians and saturation scans.
//!
//! For a logits column `z` with scores `p = softmax(z)` the Jacobian is
//! `J = diag(p) − p pᵀ`. It is positive semidefinite, its eigenvalues lie in
//! `[0, max_i 2p_i(1−p_i)] ⊂ [0, 1/2]`, and its spectral norm decays like
//! `1/L` when the logits stay bounded.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    dot, mean_std, norm2, ols_line, psd_power_iteration, softmax_column, spectral_norm, sphere_tokens,
    sym_eigen, Matrix, RngStream,
};
use crate::transformer::{forward, TransformerParams};

/// Largest `L` for which [`jacobian_report`] runs a dense eigensolve.
pub const DENSE_EIGEN_MAX: usize = 512;
/// Relative tolerance used for power iterations in this module.
pub const POWER_TOL: f64 = 1e-10;

pub fn softmax_jacobian(z: &[f64]) -> Result<Matrix> {
    let p = softmax_column(z)?;
    Ok(jacobian_from_probs(&p))
}

fn jacobian_from_probs(p: &[f64]) -> Matrix {
    let n = p.len();
    let mut j = Matrix::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            j[(a, b)] = -p[a] * p[b];
        }
        j[(a, a)] += p[a];
    }
    j
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobianReport {
    #[serde(rename = "L")]
    pub len: usize,
    pub column: usize,
    pub spectral_norm: f64,
    pub trace: f64,
    pub min_eig: f64,
    pub max_eig: f64,
    pub gershgorin_ok: bool,
}

fn jacobian_apply(p: &[f64], v: &[f64]) -> Vec<f64> {
    let s = dot(p, v);
    p.iter().zip(v).map(|(pi, vi)| pi * (vi - s)).collect()
}

/// `‖diag(p) − ppᵀ‖₂` from the rank-one secular equation
/// `1 = Σ p_i²/(p_i − λ)`, whose top root lies between the two largest
/// entries of `p`. Bisection runs until the bracket stops shrinking.
pub fn jacobian_norm_from_probs(p: &[f64]) -> Result<f64> {
    if p.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("non-finite probabilities"));
    }
    let mut q: Vec<f64> = p.iter().copied().filter(|&x| x > 0.0).collect();
    if q.len() < 2 {
        return Ok(0.0);
    }
    q.sort_by(|a, b| b.total_cmp(a));
    let (mut lo, mut hi) = (q[1], q[0]);
    if lo == hi {
        return Ok(hi);
    }
    let secular = |lambda: f64| 1.0 - q.iter().map(|x| x * x / (x - lambda)).sum::<f64>();
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if secular(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Spectral norm, trace, eigenvalue extremes and the Gershgorin check for
/// one logits column. `column` is recorded as given.
pub fn jacobian_report(z: &[f64], column: usize) -> Result<JacobianReport> {
    let p = softmax_column(z)?;
    let n = p.len();
    let trace = 1.0 - p.iter().map(|x| x * x).sum::<f64>();
    let spectral = jacobian_norm_from_probs(&p)?;
    let (min_eig, max_eig) = if n <= DENSE_EIGEN_MAX {
        let e = sym_eigen(&jacobian_from_probs(&p))?;
        (e.values[0], e.values[n - 1])
    } else {
        // top·I − J is PSD; its top eigenvalue gives the bottom of J
        let top = spectral;
        let floor = (top * n as f64 - trace) / n as f64 * (1.0 - 1e-9);
        let apply = |v: &[f64]| {
            let jv = jacobian_apply(&p, v);
            v.iter().zip(jv).map(|(vi, ji)| top * vi - ji).collect()
        };
        (top - psd_power_iteration(n, apply, floor, POWER_TOL)?, top)
    };
    let disc = p.iter().map(|x| 2.0 * x * (1.0 - x)).fold(0.0, f64::max);
    let gershgorin_ok = min_eig >= -1e-10 && max_eig <= disc + 1e-10;
    Ok(JacobianReport {
        len: n,
        column,
        spectral_norm: spectral,
        trace,
        min_eig,
        max_eig,
        gershgorin_ok,
    })
}

// ---------------------------------------------------------------------------
// Query/key pairs
// ---------------------------------------------------------------------------

/// Raw query/key projections (`d_h × D`) with an optional Alibi slope.
#[derive(Debug, Clone, PartialEq)]
pub struct QkPair {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub slope: f64,
}

impl QkPair {
    pub fn new(w_q: Matrix, w_k: Matrix) -> Result<Self> {
        if w_q.shape() != w_k.shape() {
            return Err(Error::shape("W_Q and W_K must share a shape"));
        }
        Ok(QkPair {
            w_q,
            w_k,
            slope: 0.0,
        })
    }

    pub fn from_model(model: &TransformerParams, layer: usize, head: usize) -> Result<Self> {
        let h = model
            .layers
            .get(layer)
            .and_then(|l| l.heads.get(head))
            .ok_or_else(|| Error::config(format!("model has no head {head} in layer {layer}")))?;
        Ok(QkPair {
            w_q: h.w_q.clone(),
            w_k: h.w_k.clone(),
            slope: h.slope,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.cols()
    }

    /// Causal logits column for query position `l` (0-based).
    pub fn logits_column(&self, x: &Matrix, l: usize) -> Vec<f64> {
        let q = self.w_q.dot(x);
        let k = self.w_k.matvec(&x.col(l));
        (0..x.cols())
            .map(|s| {
                if s > l {
                    f64::NEG_INFINITY
                } else {
                    let mut v = 0.0;
                    for r in 0..q.rows() {
                        v += q[(r, s)] * k[r];
                    }
                    v - self.slope * (l - s) as f64
                }
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Saturation scan
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    #[serde(rename = "L")]
    pub len: usize,
    pub mean_spectral_norm: f64,
    pub std: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingScan {
    pub lengths: Vec<usize>,
    pub mean_spectral_norms: Vec<f64>,
    pub stds: Vec<f64>,
    pub samples: usize,
    pub fitted_slope: f64,
    pub fitted_intercept: f64,
    pub r2: f64,
}

impl ScalingScan {
    pub fn points(&self) -> Vec<ScanPoint> {
        self.lengths
            .iter()
            .zip(self.mean_spectral_norms.iter().zip(&self.stds))
            .map(|(&len, (&m, &s))| ScanPoint {
                len,
                mean_spectral_norm: m,
                std: s,
                samples: self.samples,
            })
            .collect()
    }
}

/// Mean Jacobian spectral norm of the last column at one length.
///
/// Sample `i` draws its tokens from `rng.child(i)`.
pub fn saturation_point(
    qk: &QkPair,
    len: usize,
    samples: usize,
    bound: f64,
    rng: &RngStream,
) -> Result<ScanPoint> {
    if len < 2 || samples == 0 {
        return Err(Error::config("need L >= 2 and at least one sample"));
    }
    let mut norms = Vec::with_capacity(samples);
    for i in 0..samples {
        let x = sphere_tokens(qk.model_dim(), len, bound, &mut rng.child(i as u64).rng());
        let z = qk.logits_column(&x, len - 1);
        norms.push(jacobian_norm_from_probs(&softmax_column(&z)?)?);
    }
    let (mean, std) = mean_std(&norms);
    Ok(ScanPoint {
        len,
        mean_spectral_norm: mean,
        std,
        samples,
    })
}

/// Fits `log(mean ‖J_L‖₂) ≈ slope·log L + intercept` over scan points.
pub fn fit_scan(points: &[ScanPoint]) -> Result<ScalingScan> {
    if points.is_empty() {
        return Err(Error::config("lengths list is empty"));
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.len as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.mean_spectral_norm.ln()).collect();
    let fit = ols_line(&xs, &ys)?;
    Ok(ScalingScan {
        lengths: points.iter().map(|p| p.len).collect(),
        mean_spectral_norms: points.iter().map(|p| p.mean_spectral_norm).collect(),
        stds: points.iter().map(|p| p.std).collect(),
        samples: points[0].samples,
        fitted_slope: fit.slope,
        fitted_intercept: fit.intercept,
        r2: fit.r2,
    })
}

/// Checks the scan lengths: nonempty, strictly increasing, each at least 2.
pub fn validate_lengths(lengths: &[usize]) -> Result<()> {
    if lengths.is_empty() {
        return Err(Error::config("lengths list is empty"));
    }
    if lengths[0] < 2 || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("lengths must be strictly increasing and >= 2"));
    }
    Ok(())
}

/// Last-column Jacobian norms over `lengths`, tokens on the radius-`bound`
/// sphere. Length `i` uses `rng.child(i)`.
pub fn saturation_scan(
    qk: &QkPair,
    lengths: &[usize],
    samples_per_length: usize,
    bound: f64,
    rng: &RngStream,
) -> Result<ScalingScan> {
    validate_lengths(lengths)?;
    let points = lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| saturation_point(qk, len, samples_per_length, bound, &rng.child(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    fit_scan(&points)
}

// ---------------------------------------------------------------------------
// Attention-score range
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRange {
    pub min_ok: bool,
    pub max_ok: bool,
    pub delta: f64,
    pub min_weight: f64,
    pub max_weight: f64,
    pub lower_bound: f64,
    pub upper_bound: f64,
}

/// Checks the full-support column against `[e^{−2Δ}/L, e^{2Δ}/L]` with
/// `Δ = ‖W_Q‖₂‖W_K‖₂B²` and zero relative bias.
pub fn score_range_check(w_q: &Matrix, w_k: &Matrix, x: &Matrix, bound: f64) -> Result<ScoreRange> {
    if w_q.cols() != x.rows() || w_k.cols() != x.rows() {
        return Err(Error::shape("projection width differs from token dimension"));
    }
    let len = x.cols();
    let delta = spectral_norm(w_q, 1e-12)? * spectral_norm(w_k, 1e-12)? * bound * bound;
    let qk = QkPair {
        w_q: w_q.clone(),
        w_k: w_k.clone(),
        slope: 0.0,
    };
    let p = softmax_column(&qk.logits_column(x, len - 1))?;
    let min_weight = p.iter().copied().fold(f64::INFINITY, f64::min);
    let max_weight = p.iter().copied().fold(0.0, f64::max);
    let lower_bound = (-2.0 * delta).exp() / len as f64;
    let upper_bound = (2.0 * delta).exp() / len as f64;
    // one ulp of slack for the Δ = 0 case where both sides equal 1/L
    let slack = 1e-15 / len as f64;
    Ok(ScoreRange {
        min_ok: min_weight >= lower_bound - slack,
        max_ok: max_weight <= upper_bound + slack,
        delta,
        min_weight,
        max_weight,
        lower_bound,
        upper_bound,
    })
}

// ---------------------------------------------------------------------------
// Logits-norm scan
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitsNormPoint {
    #[serde(rename = "L")]
    pub len: usize,
    pub mean_norm: f64,
    pub samples: usize,
}

/// ℓ₂ norm of the unmasked logits in column `⌈L/2⌉` (1-based) of layer 0,
/// head 0, averaged over token draws. Length `i` uses `rng.child(i)`.
pub fn logits_norm_scan(
    model: &TransformerParams,
    lengths: &[usize],
    samples_per_length: usize,
    bound: f64,
    rng: &RngStream,
) -> Result<Vec<LogitsNormPoint>> {
    if lengths.iter().any(|&l| l < 2) || samples_per_length == 0 {
        return Err(Error::config("need lengths >= 2 and at least one sample"));
    }
    if model.layers.first().map_or(true, |l| l.heads.is_empty()) {
        return Err(Error::config("model needs a head in layer 0"));
    }
    let d = model.token_dim();
    lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            let col = len.div_ceil(2) - 1;
            let stream = rng.child(i as u64);
            let mut norms = Vec::with_capacity(samples_per_length);
            for s in 0..samples_per_length {
                let x = sphere_tokens(d, len, bound, &mut stream.child(s as u64).rng());
                let cache = forward(model, &x)?;
                let z = &cache.layers[0].heads[0].logits;
                let entries: Vec<f64> = (0..=col).map(|r| z[(r, col)]).collect();
                norms.push(norm2(&entries));
            }
            Ok(LogitsNormPoint {
                len,
                mean_norm: mean_std(&norms).0,
                samples: samples_per_length,
            })
        })
        .collect()
}
