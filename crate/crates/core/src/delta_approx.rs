//! Exponential sums approximating the shifted delta kernel.
//!
//! An [`ExpSum`] evaluates `φ(t) = Σ_k α_k e^{−β_k (t−1)}` for `t ≥ 0`. The
//! fitter searches log-spaced node families inside `[β_min, β_max]`, solves
//! for α by iteratively reweighted least squares on the ℓ¹ objective, and
//! certifies the result against `1.3·e^{0.02T}/m`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{lstsq, pairwise_sum, Matrix, RngStream};

pub const BETA_MIN: f64 = 1e-3;
pub const BETA_MAX: f64 = 5.0;
pub const CERT_CONSTANT: f64 = 1.3;
pub const CERT_RATE: f64 = 0.02;

/// Number of IRLS passes for the final solve of a node family.
pub const IRLS_ITERS: usize = 50;
const SCREEN_ITERS: usize = 8;
const FINALISTS: usize = 2;
const RESTARTS: usize = 4;
/// Active term counts the search actually optimizes; other budgets reuse
/// the best smaller count padded with zero-weight terms.
const ACTIVE_COUNTS: &[usize] = &[
    1, 2, 3, 4, 5, 6, 7, 8, 10, 12, 14, 16, 18, 20, 24, 28, 32, 40, 48, 64,
];
const HI_GRID: &[f64] = &[1.0, 2.0, 3.0, 5.0];
const LO_GRID_LEN: usize = 14;
const LO_GRID_MIN: f64 = 0.02;
const LO_GRID_MAX: f64 = 4.5;

pub fn default_horizon(target_lag: usize) -> usize {
    (10 * target_lag).max(200)
}

/// The certificate `1.3·e^{0.02T}/m`.
pub fn certified_bound(target_lag: usize, m: usize) -> f64 {
    CERT_CONSTANT * (CERT_RATE * target_lag as f64).exp() / m as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpTerm {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpSum {
    terms: Vec<ExpTerm>,
    target_lag: usize,
    horizon: usize,
}

impl ExpSum {
    pub fn new(terms: Vec<ExpTerm>, target_lag: usize, horizon: usize) -> Result<Self> {
        if target_lag == 0 {
            return Err(Error::config("target lag must be at least 1"));
        }
        if horizon < 10 * target_lag {
            return Err(Error::config(format!(
                "horizon {horizon} is below 10*T = {}",
                10 * target_lag
            )));
        }
        for term in &terms {
            if !(term.beta > 0.0) || !term.beta.is_finite() || !term.alpha.is_finite() {
                return Err(Error::config(format!(
                    "invalid term alpha={}, beta={}",
                    term.alpha, term.beta
                )));
            }
        }
        Ok(ExpSum {
            terms,
            target_lag,
            horizon,
        })
    }

    /// `m` terms with zero weight.
    pub fn zeros(target_lag: usize, m: usize, horizon: usize) -> Result<Self> {
        let terms = vec![
            ExpTerm {
                alpha: 0.0,
                beta: BETA_MAX
            };
            m
        ];
        ExpSum::new(terms, target_lag, horizon)
    }

    pub fn terms(&self) -> &[ExpTerm] {
        &self.terms
    }

    pub fn target_lag(&self) -> usize {
        self.target_lag
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Number of terms, zero-weight ones included.
    pub fn m(&self) -> usize {
        self.terms.len()
    }

    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        ExpSum::new(self.terms.clone(), self.target_lag, horizon)
    }

    /// Smallest β among terms with nonzero weight.
    pub fn min_active_beta(&self) -> Option<f64> {
        self.terms
            .iter()
            .filter(|t| t.alpha != 0.0)
            .map(|t| t.beta)
            .min_by(f64::total_cmp)
    }

    /// Extends with zero-weight terms up to `m` terms.
    fn padded(mut self, m: usize) -> Self {
        while self.terms.len() < m {
            self.terms.push(ExpTerm {
                alpha: 0.0,
                beta: BETA_MAX,
            });
        }
        self
    }
}

/// `φ(t) = Σ_k α_k e^{−β_k (t−1)}`.
pub fn eval_exp_sum(s: &ExpSum, t: usize) -> f64 {
    let shift = t as f64 - 1.0;
    s.terms
        .iter()
        .map(|term| term.alpha * (-term.beta * shift).exp())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaFitReport {
    #[serde(rename = "T")]
    pub target_lag: usize,
    pub m: usize,
    pub l1_error: f64,
    pub certified_bound: f64,
    pub tail_bound: f64,
    pub horizon: usize,
}

impl DeltaFitReport {
    pub fn certified(&self) -> bool {
        self.l1_error <= self.certified_bound
    }
}

fn tail_bound(terms: &[ExpTerm], horizon: usize) -> f64 {
    let h = horizon as f64;
    terms
        .iter()
        .map(|t| t.alpha.abs() * (-t.beta * h).exp() / -(-t.beta).exp_m1())
        .sum()
}

/// ℓ¹ distance to `𝕀(·=T)` on `[0, horizon]` plus the geometric tail bound.
pub fn l1_report(s: &ExpSum) -> DeltaFitReport {
    let residuals: Vec<f64> = (0..=s.horizon)
        .map(|t| {
            let target = if t == s.target_lag { 1.0 } else { 0.0 };
            (target - eval_exp_sum(s, t)).abs()
        })
        .collect();
    let tail = tail_bound(&s.terms, s.horizon);
    DeltaFitReport {
        target_lag: s.target_lag,
        m: s.m(),
        l1_error: pairwise_sum(&residuals) + tail,
        certified_bound: certified_bound(s.target_lag, s.m()),
        tail_bound: tail,
        horizon: s.horizon,
    }
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

fn log_spaced(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..k)
        .map(|i| (a + (b - a) * i as f64 / (k - 1) as f64).exp())
        .collect()
}

/// Candidate node families for `k` active terms.
fn node_families(k: usize, rng: &RngStream) -> Vec<Vec<f64>> {
    let lo_grid = log_spaced(LO_GRID_MIN, LO_GRID_MAX, LO_GRID_LEN);
    let mut out = Vec::new();
    if k == 1 {
        for &lo in log_spaced(LO_GRID_MIN, BETA_MAX, 3 * LO_GRID_LEN).iter() {
            out.push(vec![lo]);
        }
        return out;
    }
    for &lo in &lo_grid {
        for &hi in HI_GRID {
            if hi > lo * 1.05 {
                out.push(log_spaced(lo, hi, k));
            }
        }
    }
    let mut r = rng.rng();
    for _ in 0..RESTARTS {
        let lo = (r.random_range(LO_GRID_MIN.ln()..LO_GRID_MAX.ln())).exp();
        let hi = (r.random_range((lo * 1.2).ln()..BETA_MAX.ln().max((lo * 1.3).ln()))).exp();
        out.push(log_spaced(lo, hi.min(BETA_MAX), k));
    }
    out
}

struct Design {
    /// Rows `t = 0..=horizon` followed by one tail-penalty row per node.
    a: Matrix,
    y: Vec<f64>,
    scale: Vec<f64>,
}

fn design(target_lag: usize, horizon: usize, betas: &[f64]) -> Design {
    let k = betas.len();
    let rows = horizon + 1 + k;
    let mut a = Matrix::zeros(rows, k);
    for t in 0..=horizon {
        for (j, &b) in betas.iter().enumerate() {
            a[(t, j)] = (-b * (t as f64 - 1.0)).exp();
        }
    }
    for (j, &b) in betas.iter().enumerate() {
        a[(horizon + 1 + j, j)] = (-b * horizon as f64).exp() / -(-b).exp_m1();
    }
    let scale: Vec<f64> = (0..k)
        .map(|j| {
            let c = a.col(j);
            c.iter().map(|x| x * x).sum::<f64>().sqrt()
        })
        .collect();
    for i in 0..rows {
        for j in 0..k {
            a[(i, j)] /= scale[j];
        }
    }
    let mut y = vec![0.0; rows];
    y[target_lag] = 1.0;
    Design { a, y, scale }
}

fn build_sum(betas: &[f64], coef: &[f64], scale: &[f64], target_lag: usize, horizon: usize) -> ExpSum {
    let terms = betas
        .iter()
        .zip(coef.iter().zip(scale))
        .map(|(&beta, (&c, &s))| ExpTerm {
            alpha: if c.is_finite() { c / s } else { 0.0 },
            beta,
        })
        .collect();
    ExpSum {
        terms,
        target_lag,
        horizon,
    }
}

/// IRLS for `min ‖y − A c‖₁` over the given nodes; returns the iterate with
/// the smallest certified ℓ¹ error.
fn irls_fit(target_lag: usize, horizon: usize, betas: &[f64], iters: usize) -> (ExpSum, f64) {
    let dsg = design(target_lag, horizon, betas);
    let (rows, k) = dsg.a.shape();
    let mut best = {
        let zero = ExpSum::zeros(target_lag, 0, horizon).expect("valid lag");
        (zero, 1.0)
    };
    let consider = |coef: &[f64], best: &mut (ExpSum, f64)| {
        let s = build_sum(betas, coef, &dsg.scale, target_lag, horizon);
        let e = l1_report(&s).l1_error;
        if e.is_finite() && e < best.1 {
            *best = (s, e);
        }
    };
    let Ok(mut coef) = lstsq(&dsg.a, &dsg.y, 1e-15) else {
        return best;
    };
    consider(&coef, &mut best);
    let mut eps = 1e-3;
    let mut weighted = Matrix::zeros(rows, k);
    let mut wy = vec![0.0; rows];
    for _ in 0..iters {
        let fit = dsg.a.matvec(&coef);
        for i in 0..rows {
            let r = (dsg.y[i] - fit[i]).abs();
            let u = 1.0 / r.max(eps).sqrt();
            for j in 0..k {
                weighted[(i, j)] = u * dsg.a[(i, j)];
            }
            wy[i] = u * dsg.y[i];
        }
        match lstsq(&weighted, &wy, 1e-15) {
            Ok(c) => coef = c,
            Err(_) => break,
        }
        consider(&coef, &mut best);
        eps = (eps * 0.3).max(1e-15);
    }
    best
}

/// Best fit using exactly `k` nodes (some weights may end at zero).
fn fit_active(target_lag: usize, k: usize, horizon: usize, rng: &RngStream) -> (ExpSum, f64) {
    let families = node_families(k, rng);
    let mut screened: Vec<(f64, usize)> = families
        .iter()
        .enumerate()
        .map(|(i, betas)| (irls_fit(target_lag, horizon, betas, SCREEN_ITERS).1, i))
        .collect();
    screened.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut best = (
        ExpSum::zeros(target_lag, 0, horizon).expect("valid lag"),
        1.0,
    );
    for &(_, i) in screened.iter().take(FINALISTS) {
        let cand = irls_fit(target_lag, horizon, &families[i], IRLS_ITERS);
        if cand.1 < best.1 {
            best = cand;
        }
    }
    best
}

fn validate_fit_args(target_lag: usize, m: usize, horizon: usize) -> Result<()> {
    if target_lag == 0 {
        return Err(Error::config("T must be at least 1"));
    }
    if m == 0 {
        return Err(Error::config("m must be at least 1"));
    }
    if horizon < 10 * target_lag {
        return Err(Error::config(format!(
            "horizon {horizon} is below 10*T = {}",
            10 * target_lag
        )));
    }
    Ok(())
}

/// Best fits for every budget in `budgets`, sharing work across budgets.
///
/// The fit for budget `m` is the best over active counts `k ≤ m`, padded to
/// `m` terms, so the reported error is nonincreasing in `m`. Results do not
/// depend on which other budgets are requested.
pub fn fit_exp_sum_path(
    target_lag: usize,
    budgets: &[usize],
    horizon: usize,
    rng: &RngStream,
) -> Result<Vec<(ExpSum, DeltaFitReport)>> {
    for &m in budgets {
        validate_fit_args(target_lag, m, horizon)?;
    }
    let m_max = budgets.iter().copied().max().unwrap_or(0);
    let mut best_upto: Vec<(usize, ExpSum, f64)> = Vec::new();
    let mut running = (
        ExpSum::zeros(target_lag, 0, horizon).expect("validated"),
        1.0,
    );
    for &k in ACTIVE_COUNTS.iter().filter(|&&k| k <= m_max) {
        let cand = fit_active(target_lag, k, horizon, &rng.child(k as u64));
        if cand.1 < running.1 {
            running = cand;
        }
        best_upto.push((k, running.0.clone(), running.1));
    }
    Ok(budgets
        .iter()
        .map(|&m| {
            let base = best_upto
                .iter()
                .rev()
                .find(|(k, _, _)| *k <= m)
                .map(|(_, s, _)| s.clone())
                .unwrap_or_else(|| ExpSum::zeros(target_lag, 0, horizon).expect("validated"));
            let s = base.padded(m);
            let report = l1_report(&s);
            (s, report)
        })
        .collect())
}

/// Best fit with `m` terms, whether or not it meets the certificate.
pub fn fit_exp_sum_best(
    target_lag: usize,
    m: usize,
    horizon: usize,
    rng: &RngStream,
) -> Result<(ExpSum, DeltaFitReport)> {
    Ok(fit_exp_sum_path(target_lag, &[m], horizon, rng)?
        .pop()
        .expect("one budget"))
}

/// Fit with `m` terms certified against `1.3·e^{0.02T}/m`.
pub fn fit_exp_sum(target_lag: usize, m: usize, horizon: usize, rng: &RngStream) -> Result<ExpSum> {
    let (s, report) = fit_exp_sum_best(target_lag, m, horizon, rng)?;
    if report.certified() {
        Ok(s)
    } else {
        Err(Error::Certification {
            t: target_lag,
            m,
            best_l1: report.l1_error,
            bound: report.certified_bound,
        })
    }
}
