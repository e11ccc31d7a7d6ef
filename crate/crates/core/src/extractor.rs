//! Explicit one-layer lag extractor built from Alibi heads.
//!
//! Group `m` approximates the lag-`m` indicator with an exponential sum of
//! `H_m` terms: head `h` has zero query/key maps, Alibi slope `β_{h,m}` and
//! value map `α_{h,m}·c_{h,m}·P_m·(I_d | 0)` with `c = e^β/(1 − e^{−β})`.
//! Far from the sequence start the group output is then
//! `Σ_{j≥0} φ_m(j)·P_m x_{t−j}` with `φ_m(j) = Σ_h α e^{−β(j−1)}`.

use serde::{Deserialize, Serialize};

use crate::allocation::{bound_eval, AllocationPlan, BoundBreakdown, KernelSpec};
use crate::delta_approx::{default_horizon, fit_exp_sum_best, ExpSum};
use crate::error::{Error, Result};
use crate::numerics::{random_projection, spectral_norm, sphere_tokens, Matrix, RngStream};
use crate::transformer::{forward, grouped_head_layout, PositionalEncoding, TransformerParams};

/// Positions are scored from `t_burn = ⌈BURN_IN_FACTOR/β_min⌉` onwards.
pub const BURN_IN_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorSpec {
    /// `ρ_i` for lags `i = 0..`, each `d × d`.
    pub rho: Vec<Matrix>,
    pub token_bound: f64,
    pub seq_len: usize,
    pub plan: AllocationPlan,
    pub delta: f64,
    pub exp_fits: Vec<ExpSum>,
    /// `P_m`, `d_m × d`.
    pub projections: Vec<Matrix>,
}

impl ExtractorSpec {
    /// Fits the exponential sums and draws the projections. Group `m` uses
    /// `rng.child(m)` for its fit and `rng.child(m).child(1)` for `P_m`;
    /// `P_m = (I_d; 0)` when `d_m ≥ d`.
    pub fn new(
        rho: Vec<Matrix>,
        token_bound: f64,
        seq_len: usize,
        plan: AllocationPlan,
        delta: f64,
        rng: &RngStream,
    ) -> Result<Self> {
        let d = rho
            .first()
            .ok_or_else(|| Error::config("kernel needs at least the lag-0 matrix"))?
            .rows();
        if rho.iter().any(|r| r.shape() != (d, d)) {
            return Err(Error::shape("every kernel matrix must be d × d"));
        }
        let mut exp_fits = Vec::with_capacity(plan.m());
        let mut projections = Vec::with_capacity(plan.m());
        for (i, g) in plan.groups.iter().enumerate() {
            let lag = i + 1;
            let stream = rng.child(lag as u64);
            let (fit, _) = fit_exp_sum_best(lag, g.heads, default_horizon(lag), &stream)?;
            exp_fits.push(fit);
            projections.push(draw_projection(d, g.dim, &stream.child(1))?);
        }
        let spec = ExtractorSpec {
            rho,
            token_bound,
            seq_len,
            plan,
            delta,
            exp_fits,
            projections,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `ρ_i = I` for `i = 1..=n`, `ρ_0 = 0`.
    pub fn ngram(
        n: usize,
        token_dim: usize,
        token_bound: f64,
        seq_len: usize,
        plan: AllocationPlan,
        delta: f64,
        rng: &RngStream,
    ) -> Result<Self> {
        let mut rho = vec![Matrix::zeros(token_dim, token_dim)];
        rho.extend((0..n).map(|_| Matrix::identity(token_dim)));
        ExtractorSpec::new(rho, token_bound, seq_len, plan, delta, rng)
    }

    pub fn token_dim(&self) -> usize {
        self.rho[0].rows()
    }

    /// Same spec with freshly drawn projections.
    pub fn redraw_projections(&self, rng: &RngStream) -> Result<Self> {
        let mut out = self.clone();
        for (i, g) in self.plan.groups.iter().enumerate() {
            out.projections[i] = draw_projection(self.token_dim(), g.dim, &rng.child(i as u64))?;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.token_dim();
        let m = self.plan.m();
        if self.exp_fits.len() != m || self.projections.len() != m {
            return Err(Error::config("need one exponential fit and one projection per group"));
        }
        if self.rho.len() < m + 1 {
            return Err(Error::config(format!(
                "plan has {m} groups but the kernel only reaches lag {}",
                self.rho.len() - 1
            )));
        }
        for (i, g) in self.plan.groups.iter().enumerate() {
            let fit = &self.exp_fits[i];
            if fit.m() != g.heads {
                return Err(Error::config(format!(
                    "group {} has {} heads but its fit has {} terms",
                    i + 1,
                    g.heads,
                    fit.m()
                )));
            }
            if fit.target_lag() != i + 1 {
                return Err(Error::config(format!("fit {} targets lag {}", i + 1, fit.target_lag())));
            }
            if self.projections[i].shape() != (g.dim, d) {
                return Err(Error::shape(format!("projection {} must be {} × {d}", i + 1, g.dim)));
            }
        }
        Ok(())
    }

    /// Kernel norms `‖ρ_i‖₂` for the bound.
    pub fn kernel(&self) -> Result<KernelSpec> {
        let norms = self
            .rho
            .iter()
            .map(|r| spectral_norm(r, 1e-12))
            .collect::<Result<Vec<_>>>()?;
        KernelSpec::new(norms, self.token_dim(), self.token_bound, self.seq_len)
    }

    /// `t_burn = ⌈10/β_min⌉` over terms with nonzero weight (0 if none).
    pub fn burn_in(&self) -> usize {
        self.exp_fits
            .iter()
            .filter_map(ExpSum::min_active_beta)
            .min_by(f64::total_cmp)
            .map_or(0, |b| (BURN_IN_FACTOR / b).ceil() as usize)
    }

    /// Exact target `Σ_i ρ_i x_{t−i}` with zero padding.
    pub fn target(&self, x: &Matrix) -> Matrix {
        let (d, len) = x.shape();
        let mut y = Matrix::zeros(d, len);
        for (lag, r) in self.rho.iter().enumerate() {
            if r.max_abs() == 0.0 {
                continue;
            }
            for t in lag..len {
                let v = r.matvec(&x.col(t - lag));
                for (i, vi) in v.into_iter().enumerate() {
                    y[(i, t)] += vi;
                }
            }
        }
        y
    }
}

fn draw_projection(d: usize, d_m: usize, rng: &RngStream) -> Result<Matrix> {
    if d_m >= d {
        let mut p = Matrix::zeros(d_m, d);
        for i in 0..d {
            p[(i, i)] = 1.0;
        }
        Ok(p)
    } else {
        random_projection(d, d_m, rng)
    }
}

/// Infinite-horizon softmax normalizer `e^β/(1 − e^{−β})`.
pub fn normalizer(beta: f64) -> f64 {
    beta.exp() / -(-beta).exp_m1()
}

/// Offset of group `m`'s slot in the residual stream.
fn slot_offsets(spec: &ExtractorSpec) -> Vec<usize> {
    let mut acc = spec.token_dim();
    spec.plan
        .groups
        .iter()
        .map(|g| {
            let o = acc;
            acc += g.dim;
            o
        })
        .collect()
}

/// One-layer model implementing the construction. Needs
/// `d + Σ d_m ≤ D` so the residual copy of `x_t` and the group slots fit.
pub fn build_extractor(spec: &ExtractorSpec, model_dim: usize) -> Result<TransformerParams> {
    spec.validate()?;
    let d = spec.token_dim();
    let slots_end = d + spec.plan.groups.iter().map(|g| g.dim).sum::<usize>();
    if slots_end > model_dim {
        return Err(Error::config(format!(
            "construction needs d + Σ d_m = {slots_end} <= D = {model_dim}"
        )));
    }
    let layout = grouped_head_layout(&spec.plan, model_dim)?;
    let mut p = TransformerParams::zeros(d, model_dim, &[layout.clone()], 1, PositionalEncoding::Alibi);
    for i in 0..d {
        p.w_e[(i, i)] = 1.0;
    }
    let slots = slot_offsets(spec);
    let layer = &mut p.layers[0];
    for (slot, head) in layout.slots.iter().zip(layer.heads.iter_mut()) {
        let term = spec.exp_fits[slot.group].terms()[slot.index];
        let proj = &spec.projections[slot.group];
        let scale = term.alpha * normalizer(term.beta);
        head.slope = term.beta;
        for r in 0..slot.dim {
            for c in 0..d {
                head.w_v[(r, c)] = scale * proj[(r, c)];
            }
            layer.w_o[(slots[slot.group] + r, slot.offset + r)] = 1.0;
        }
    }
    // readout: ρ_0 on the residual copy of x_t, ρ̃_m = ρ_m P_mᵀ on each slot
    for r in 0..d {
        for c in 0..d {
            p.w_r[(r, c)] = spec.rho[0][(r, c)];
        }
    }
    for (i, proj) in spec.projections.iter().enumerate() {
        let mapped = spec.rho[i + 1].dot_t(proj);
        for r in 0..d {
            for c in 0..proj.rows() {
                p.w_r[(r, slots[i] + c)] = mapped[(r, c)];
            }
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyOptions {
    /// Score every position instead of `t ≥ t_burn`.
    pub include_all_t: bool,
    /// Inputs have `t_burn + seq_len` tokens so that `seq_len` positions
    /// are scored, matching the union bound over `L` tokens.
    pub extend_by_burn_in: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            include_all_t: false,
            extend_by_burn_in: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorVerdict {
    /// Largest per-trial max-token error with the spec's projections.
    pub empirical_error: f64,
    pub theoretical_bound: f64,
    pub holds: bool,
    /// Fraction of trials exceeding the bound, fresh projections and inputs.
    pub failure_fraction: f64,
    /// Same with the spec's projections held fixed.
    pub input_failure_fraction: f64,
    /// `failure_fraction ≤ δ + 3·√(δ(1−δ)/trials)`.
    pub within_confidence: bool,
    pub trials: usize,
    pub t_burn: usize,
    pub eval_len: usize,
    pub breakdown: BoundBreakdown,
}

/// Max over scored positions of `‖model(X)_t − target_t‖₂`.
pub fn max_token_error(model: &TransformerParams, spec: &ExtractorSpec, x: &Matrix, from: usize) -> Result<f64> {
    let out = forward(model, x)?.output;
    let y = spec.target(x);
    let mut worst = 0.0f64;
    for t in from..x.cols() {
        let mut e = 0.0;
        for i in 0..y.rows() {
            let diff = out[(i, t)] - y[(i, t)];
            e += diff * diff;
        }
        worst = worst.max(e.sqrt());
    }
    Ok(worst)
}

/// Per-trial errors `(fixed projections, fresh projections)` for trial `i`,
/// drawn from `rng.child(i)`.
pub fn trial_errors(
    spec: &ExtractorSpec,
    fixed: &TransformerParams,
    model_dim: usize,
    opts: &VerifyOptions,
    rng: &RngStream,
) -> Result<(f64, f64)> {
    let t_burn = spec.burn_in();
    let len = eval_len(spec, opts);
    let from = if opts.include_all_t { 0 } else { t_burn.min(len - 1) };
    let x = sphere_tokens(spec.token_dim(), len, spec.token_bound, &mut rng.child(0).rng());
    let e_fixed = max_token_error(fixed, spec, &x, from)?;
    let fresh_spec = spec.redraw_projections(&rng.child(1))?;
    let fresh = build_extractor(&fresh_spec, model_dim)?;
    let x2 = sphere_tokens(spec.token_dim(), len, spec.token_bound, &mut rng.child(2).rng());
    let e_fresh = max_token_error(&fresh, &fresh_spec, &x2, from)?;
    Ok((e_fixed, e_fresh))
}

pub fn eval_len(spec: &ExtractorSpec, opts: &VerifyOptions) -> usize {
    if opts.extend_by_burn_in && !opts.include_all_t {
        spec.seq_len + spec.burn_in()
    } else {
        spec.seq_len
    }
}

/// Aggregates per-trial errors in trial order.
pub fn summarize_trials(
    spec: &ExtractorSpec,
    errors: &[(f64, f64)],
    opts: &VerifyOptions,
) -> Result<ExtractorVerdict> {
    if errors.is_empty() {
        return Err(Error::config("trials must be at least 1"));
    }
    let breakdown = bound_eval(&spec.kernel()?, &spec.plan, spec.delta, true)?;
    let bound = breakdown.total;
    let n = errors.len() as f64;
    let empirical = errors.iter().map(|e| e.0).fold(0.0, f64::max);
    let fresh_fail = errors.iter().filter(|e| e.1 > bound).count() as f64 / n;
    let fixed_fail = errors.iter().filter(|e| e.0 > bound).count() as f64 / n;
    let delta = spec.delta;
    let slack = 3.0 * (delta * (1.0 - delta) / n).sqrt();
    Ok(ExtractorVerdict {
        empirical_error: empirical,
        theoretical_bound: bound,
        holds: empirical <= bound,
        failure_fraction: fresh_fail,
        input_failure_fraction: fixed_fail,
        within_confidence: fresh_fail <= delta + slack,
        trials: errors.len(),
        t_burn: spec.burn_in(),
        eval_len: eval_len(spec, opts),
        breakdown,
    })
}

/// Builds the extractor and checks it against the concentration bound on
/// `trials` fresh input draws. Trial `i` uses `rng.child(i)`.
pub fn verify_extractor(
    spec: &ExtractorSpec,
    model_dim: usize,
    trials: usize,
    opts: &VerifyOptions,
    rng: &RngStream,
) -> Result<ExtractorVerdict> {
    if trials == 0 {
        return Err(Error::config("trials must be at least 1"));
    }
    let model = build_extractor(spec, model_dim)?;
    let errors = (0..trials)
        .map(|i| trial_errors(spec, &model, model_dim, opts, &rng.child(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    summarize_trials(spec, &errors, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizer_matches_series() {
        let b = 0.7f64;
        let series: f64 = (0..2000).map(|i| (-b * i as f64).exp()).sum::<f64>() * b.exp();
        assert!((normalizer(b) - series).abs() < 1e-12 * series);
    }
}
