//! Approximation-error bound for grouped attention heads and the budget
//! allocation problem built on it.
//!
//! A plan splits the width `D` into `M` groups of `H_m` heads of dimension
//! `d_m`. Group `m` is charged
//! `ρ̄_m·B·(1+ε_δ)·√(1−d_m/d)` for projecting tokens (only when `d_m < d`)
//! and `ρ̄_m·B·1.3·e^{0.02m}/H_m` for approximating the lag-`m` delta with
//! `H_m` exponentials; lags beyond `M` are charged in full.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default failure probability where the caller does not choose one.
pub const DEFAULT_DELTA: f64 = 0.05;

/// Tolerance under which two objective values count as a tie.
const TIE_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    /// `ρ̄_i = ‖ρ_i‖₂` for lags `i = 0..`.
    pub norms: Vec<f64>,
    pub token_dim: usize,
    pub token_bound: f64,
    pub seq_len: usize,
}

impl KernelSpec {
    pub fn new(norms: Vec<f64>, token_dim: usize, token_bound: f64, seq_len: usize) -> Result<Self> {
        let k = KernelSpec {
            norms,
            token_dim,
            token_bound,
            seq_len,
        };
        k.validate()?;
        Ok(k)
    }

    /// Unit weights on lags `1..=n`, zero elsewhere.
    pub fn ngram(n: usize, token_dim: usize, token_bound: f64, seq_len: usize) -> Result<Self> {
        let mut norms = vec![0.0; n + 1];
        norms[1..].iter_mut().for_each(|x| *x = 1.0);
        KernelSpec::new(norms, token_dim, token_bound, seq_len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.norms.is_empty() {
            return Err(Error::config("kernel needs at least the lag-0 norm"));
        }
        if self.norms.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::config("kernel norms must be finite and nonnegative"));
        }
        if self.token_dim == 0 {
            return Err(Error::config("token dimension must be positive"));
        }
        if !(self.token_bound > 0.0 && self.token_bound.is_finite()) {
            return Err(Error::config("token bound must be positive"));
        }
        if self.seq_len == 0 || self.norms.len() > self.seq_len + 1 {
            return Err(Error::config(format!(
                "kernel length {} exceeds seq_len + 1 = {}",
                self.norms.len(),
                self.seq_len + 1
            )));
        }
        Ok(())
    }

    /// Largest lag with a stored norm.
    pub fn max_lag(&self) -> usize {
        self.norms.len() - 1
    }

    fn lags_sorted(&self) -> bool {
        self.norms[1..].windows(2).all(|w| w[0] >= w[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadGroup {
    #[serde(rename = "H")]
    pub heads: usize,
    #[serde(rename = "d")]
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PlanJson", into = "PlanJson")]
pub struct AllocationPlan {
    pub groups: Vec<HeadGroup>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanJson {
    #[serde(rename = "M")]
    m: usize,
    groups: Vec<HeadGroup>,
}

impl TryFrom<PlanJson> for AllocationPlan {
    type Error = String;
    fn try_from(p: PlanJson) -> std::result::Result<Self, String> {
        if p.m != p.groups.len() {
            return Err(format!("M = {} but {} groups listed", p.m, p.groups.len()));
        }
        if p.groups.iter().any(|g| g.heads == 0 || g.dim == 0) {
            return Err("every group needs H >= 1 and d >= 1".into());
        }
        Ok(AllocationPlan { groups: p.groups })
    }
}

impl From<AllocationPlan> for PlanJson {
    fn from(p: AllocationPlan) -> Self {
        PlanJson {
            m: p.groups.len(),
            groups: p.groups,
        }
    }
}

impl AllocationPlan {
    pub fn new(groups: Vec<HeadGroup>) -> Self {
        AllocationPlan { groups }
    }

    /// `M` groups all shaped `(heads, dim)`.
    pub fn uniform(m: usize, heads: usize, dim: usize) -> Self {
        AllocationPlan {
            groups: vec![HeadGroup { heads, dim }; m],
        }
    }

    pub fn m(&self) -> usize {
        self.groups.len()
    }

    /// `Σ H_m·d_m`.
    pub fn budget(&self) -> usize {
        self.groups.iter().map(|g| g.heads * g.dim).sum()
    }

    pub fn total_heads(&self) -> usize {
        self.groups.iter().map(|g| g.heads).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundBreakdown {
    pub projection_term: f64,
    pub attention_term: f64,
    pub truncation_term: f64,
    pub total: f64,
    pub eps_delta: f64,
    pub delta: f64,
}

// ---------------------------------------------------------------------------
// Bound evaluation
// ---------------------------------------------------------------------------

/// `1.3·e^{0.02m}`, the per-lag delta-approximation constant.
pub fn lag_constant(m: usize) -> f64 {
    1.3 * (0.02 * m as f64).exp()
}

/// `√(2 ln(2ML/δ)/min_m d_m)`.
pub fn eps_delta(m: usize, seq_len: usize, delta: f64, min_dim: usize) -> f64 {
    if m == 0 || min_dim == 0 {
        return 0.0;
    }
    (2.0 * (2.0 * m as f64 * seq_len as f64 / delta).ln() / min_dim as f64).sqrt()
}

fn projection_factor(d_m: usize, d: usize) -> f64 {
    if d_m >= d {
        0.0
    } else {
        (1.0 - d_m as f64 / d as f64).sqrt()
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("delta must lie in (0,1), got {delta}")))
    }
}

pub fn bound_eval(
    kernel: &KernelSpec,
    plan: &AllocationPlan,
    delta: f64,
    include_concentration: bool,
) -> Result<BoundBreakdown> {
    kernel.validate()?;
    check_delta(delta)?;
    let m = plan.m();
    if m > kernel.max_lag() {
        return Err(Error::config(format!(
            "plan has {m} groups but the kernel only reaches lag {}",
            kernel.max_lag()
        )));
    }
    if plan.groups.iter().any(|g| g.heads == 0 || g.dim == 0) {
        return Err(Error::config("every group needs H >= 1 and d >= 1"));
    }
    let b = kernel.token_bound;
    let d = kernel.token_dim;
    let min_dim = plan.groups.iter().map(|g| g.dim).min().unwrap_or(0);
    let eps = eps_delta(m, kernel.seq_len, delta, min_dim);
    let conc = if include_concentration { 1.0 + eps } else { 1.0 };

    let mut projection = 0.0;
    let mut attention = 0.0;
    for (i, g) in plan.groups.iter().enumerate() {
        let lag = i + 1;
        let rho = kernel.norms[lag];
        projection += rho * b * conc * projection_factor(g.dim, d);
        attention += rho * b * lag_constant(lag) / g.heads as f64;
    }
    let truncation = kernel.norms[m + 1..].iter().fold(0.0, |acc, r| acc + r * b);
    Ok(BoundBreakdown {
        projection_term: projection,
        attention_term: attention,
        truncation_term: truncation,
        total: projection + attention + truncation,
        eps_delta: eps,
        delta,
    })
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

/// True if `(a, seq_a)` should replace `(b, seq_b)` under the tie rule.
fn better(a: f64, seq_a: &[HeadGroup], b: f64, seq_b: &[HeadGroup]) -> bool {
    let tol = TIE_TOL * a.abs().max(b.abs()).max(1.0);
    if a < b - tol {
        return true;
    }
    if a > b + tol {
        return false;
    }
    let da = seq_a.iter().map(|g| g.dim);
    let db = seq_b.iter().map(|g| g.dim);
    da.lt(db)
}

/// Minimizes the bound without the concentration factor over all plans with
/// `Σ H_m d_m = D` and `1 ≤ M ≤ M_max`.
///
/// Per-group costs are tabulated over every sub-budget `b` (all
/// factorizations `H·d = b`), then a dynamic program splits `D` across the
/// groups. Ties go to the smaller `M`, then to the lexicographically smaller
/// dimension sequence.
pub fn optimize_allocation(
    kernel: &KernelSpec,
    budget: usize,
    delta: f64,
    m_max: usize,
) -> Result<(AllocationPlan, BoundBreakdown)> {
    kernel.validate()?;
    check_delta(delta)?;
    if m_max == 0 || m_max > kernel.max_lag() {
        return Err(Error::config(format!(
            "M_max must lie in 1..={}, got {m_max}",
            kernel.max_lag()
        )));
    }
    if !kernel.lags_sorted() {
        return Err(Error::config(
            "kernel norms for lags >= 1 must be sorted nonincreasing",
        ));
    }
    if budget == 0 {
        return Err(Error::Infeasible("budget D = 0 admits no head".into()));
    }
    let b_tok = kernel.token_bound;
    let d_tok = kernel.token_dim;
    let m_cap = m_max.min(budget);

    // best single-group choice per (lag, sub-budget)
    let mut group_table: Vec<Vec<(f64, HeadGroup)>> = Vec::with_capacity(m_cap);
    for lag in 1..=m_cap {
        let rho = kernel.norms[lag];
        let mut row = Vec::with_capacity(budget + 1);
        row.push((f64::INFINITY, HeadGroup { heads: 0, dim: 0 }));
        for b in 1..=budget {
            let mut best: Option<(f64, HeadGroup)> = None;
            for dim in 1..=b {
                if b % dim != 0 {
                    continue;
                }
                let heads = b / dim;
                let cost = rho * b_tok * projection_factor(dim, d_tok)
                    + rho * b_tok * lag_constant(lag) / heads as f64;
                let g = HeadGroup { heads, dim };
                if best.map_or(true, |(c, bg)| better(cost, &[g], c, &[bg])) {
                    best = Some((cost, g));
                }
            }
            row.push(best.expect("b >= 1 has a factorization"));
        }
        group_table.push(row);
    }

    // layer[s] = best (cost, groups) using the first `m` groups on budget s
    let mut layer: Vec<Option<(f64, Vec<HeadGroup>)>> = vec![None; budget + 1];
    layer[0] = Some((0.0, Vec::new()));
    let mut best_plan: Option<(f64, Vec<HeadGroup>)> = None;
    for m in 1..=m_cap {
        let table = &group_table[m - 1];
        let mut next: Vec<Option<(f64, Vec<HeadGroup>)>> = vec![None; budget + 1];
        for s in m..=budget {
            let mut cell: Option<(f64, Vec<HeadGroup>)> = None;
            for b in 1..=s - (m - 1) {
                let Some((prev, seq)) = &layer[s - b] else {
                    continue;
                };
                let (gc, g) = table[b];
                let cost = prev + gc;
                let mut cand = seq.clone();
                cand.push(g);
                let replace = match &cell {
                    None => true,
                    Some((c, cs)) => better(cost, &cand, *c, cs),
                };
                if replace {
                    cell = Some((cost, cand));
                }
            }
            next[s] = cell;
        }
        layer = next;
        if let Some((cost, seq)) = &layer[budget] {
            let trunc: f64 = kernel.norms[m + 1..].iter().map(|r| r * b_tok).sum();
            let total = cost + trunc;
            let replace = match &best_plan {
                None => true,
                Some((c, _)) => {
                    // smaller M wins ties, so only a strict improvement counts
                    total < c - TIE_TOL * total.abs().max(c.abs()).max(1.0)
                }
            };
            if replace {
                best_plan = Some((total, seq.clone()));
            }
        }
    }
    let (_, groups) = best_plan.ok_or_else(|| Error::Infeasible("no feasible plan".into()))?;
    let plan = AllocationPlan::new(groups);
    let breakdown = bound_eval(kernel, &plan, delta, false)?;
    Ok((plan, breakdown))
}

// ---------------------------------------------------------------------------
// Trade-off curve
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    #[serde(rename = "H")]
    pub heads: usize,
    pub d_m: usize,
    pub breakdown: BoundBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPoint {
    #[serde(rename = "H")]
    pub heads: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCurve {
    pub points: Vec<TradeoffPoint>,
    pub skipped: Vec<SkippedPoint>,
}

impl TradeoffCurve {
    /// Grid point with the smallest total; earlier points win ties.
    pub fn argmin(&self) -> Option<&TradeoffPoint> {
        self.points.iter().fold(None, |best: Option<&TradeoffPoint>, p| match best {
            Some(b) if b.breakdown.total <= p.breakdown.total => Some(b),
            _ => Some(p),
        })
    }
}

/// Equal-split curve: every group gets `H` heads of dimension `D/(M·H)`.
pub fn tradeoff_curve(
    kernel: &KernelSpec,
    budget: usize,
    m: usize,
    h_grid: &[usize],
) -> Result<TradeoffCurve> {
    if m == 0 {
        return Err(Error::config("M must be at least 1"));
    }
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for &h in h_grid {
        if h == 0 || budget % (m * h) != 0 {
            skipped.push(SkippedPoint {
                heads: h,
                reason: format!("D = {budget} is not divisible by M*H = {}", m * h),
            });
            continue;
        }
        let d_m = budget / (m * h);
        let plan = AllocationPlan::uniform(m, h, d_m);
        let breakdown = bound_eval(kernel, &plan, DEFAULT_DELTA, false)?;
        points.push(TradeoffPoint {
            heads: h,
            d_m,
            breakdown,
        });
    }
    Ok(TradeoffCurve { points, skipped })
}

// ---------------------------------------------------------------------------
// Nonlinear (Volterra) bound
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolterraKernelSpec {
    pub order: usize,
    /// `‖H^{(n)}(τ₁,…,τ_n)‖₂` keyed by the lag tuple.
    pub norms: BTreeMap<Vec<usize>, f64>,
    pub token_bound: f64,
    pub token_dim: usize,
    /// Sequence length entering `ε_δ`.
    pub seq_len: usize,
    /// Truncation remainder, supplied by the caller.
    #[serde(default)]
    pub eps_h: f64,
    /// Feed-forward approximation error, supplied by the caller.
    #[serde(default)]
    pub eps_ffn: f64,
}

impl VolterraKernelSpec {
    /// Tabulates `f` on every lag tuple in `[0..=max_lag]^order`.
    pub fn from_fn(
        order: usize,
        max_lag: usize,
        token_dim: usize,
        token_bound: f64,
        seq_len: usize,
        f: impl Fn(&[usize]) -> f64,
    ) -> Self {
        let mut norms = BTreeMap::new();
        let mut idx = vec![0usize; order];
        loop {
            norms.insert(idx.clone(), f(&idx));
            let mut pos = 0;
            loop {
                if pos == order {
                    return VolterraKernelSpec {
                        order,
                        norms,
                        token_bound,
                        token_dim,
                        seq_len,
                        eps_h: 0.0,
                        eps_ffn: 0.0,
                    };
                }
                idx[pos] += 1;
                if idx[pos] <= max_lag {
                    break;
                }
                idx[pos] = 0;
                pos += 1;
            }
        }
    }
}

fn lag_tuples(order: usize, max_lag: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..order {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..=max_lag).map(move |l| {
                    let mut p = prefix.clone();
                    p.push(l);
                    p
                })
            })
            .collect();
    }
    out
}

/// Bound for an order-`n` Volterra target truncated at lag `M`.
///
/// The truncation slot of the breakdown carries `eps_H + eps_FFN`.
pub fn volterra_bound_eval(
    spec: &VolterraKernelSpec,
    plan: &AllocationPlan,
    delta: f64,
    m: usize,
) -> Result<BoundBreakdown> {
    check_delta(delta)?;
    let n = spec.order;
    if n == 0 {
        return Err(Error::config("Volterra order must be at least 1"));
    }
    if spec.norms.values().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::config("Volterra norms must be finite and nonnegative"));
    }
    if spec.eps_h < 0.0 || spec.eps_ffn < 0.0 {
        return Err(Error::config("eps_H and eps_FFN must be nonnegative"));
    }
    if plan.m() == 0 || plan.groups.iter().any(|g| g.heads == 0 || g.dim == 0) {
        return Err(Error::config("plan needs at least one nonempty group"));
    }
    let mut mass = 0.0;
    for tuple in lag_tuples(n, m) {
        match spec.norms.get(&tuple) {
            Some(v) => mass += v,
            None => {
                return Err(Error::config(format!(
                    "Volterra grid does not cover lag tuple {tuple:?}"
                )))
            }
        }
    }
    let b = spec.token_bound;
    let d = spec.token_dim;
    let min_dim = plan.groups.iter().map(|g| g.dim).min().expect("nonempty");
    let eps = eps_delta(m.max(1), spec.seq_len, delta, min_dim);
    let projection = if min_dim >= d {
        0.0
    } else {
        mass * (1.0 + eps).powi(n as i32) * (1.0 - (min_dim as f64 / d as f64).powi(n as i32)).sqrt()
    };
    let eps_attn = plan
        .groups
        .iter()
        .map(|g| lag_constant(m) / g.heads as f64)
        .fold(0.0, f64::max);
    let attention = mass * ((b + eps_attn).powi(n as i32) - b.powi(n as i32));
    let remainder = spec.eps_h + spec.eps_ffn;
    Ok(BoundBreakdown {
        projection_term: projection,
        attention_term: attention,
        truncation_term: remainder,
        total: projection + attention + remainder,
        eps_delta: eps,
        delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_json_round_trip() {
        let p = AllocationPlan::uniform(2, 8, 4);
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"M":2,"groups":[{"H":8,"d":4},{"H":8,"d":4}]}"#);
        let back: AllocationPlan = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<AllocationPlan>(r#"{"M":3,"groups":[]}"#).is_err());
    }

    #[test]
    fn zero_budget_is_infeasible() {
        let k = KernelSpec::ngram(4, 8, 1.0, 64).unwrap();
        assert!(matches!(
            optimize_allocation(&k, 0, 0.05, 4),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn unsorted_kernel_rejected() {
        let k = KernelSpec::new(vec![0.0, 0.5, 1.0], 4, 1.0, 16).unwrap();
        assert!(optimize_allocation(&k, 8, 0.05, 2).is_err());
    }

    #[test]
    fn too_many_groups_rejected() {
        let k = KernelSpec::ngram(2, 4, 1.0, 16).unwrap();
        assert!(bound_eval(&k, &AllocationPlan::uniform(3, 1, 1), 0.05, false).is_err());
    }
}
