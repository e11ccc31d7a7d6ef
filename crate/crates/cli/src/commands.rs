//! The ten experiment commands. Each reads its parameter block from the
//! run configuration, computes, and writes tables, plots and JSON summaries
//! into the output directory.
//!
//! Parallel work is split over independent units (grid cells, trials,
//! training runs) that each draw from their own child stream and are
//! collected in input order, so results do not depend on the thread count.

use headlab_core::allocation::{
    bound_eval, optimize_allocation, tradeoff_curve, AllocationPlan, HeadGroup, KernelSpec,
    DEFAULT_DELTA,
};
use headlab_core::archive::encode;
use headlab_core::delta_approx::{default_horizon, fit_exp_sum_path, DeltaFitReport};
use headlab_core::extractor::{build_extractor, summarize_trials, trial_errors, ExtractorSpec, VerifyOptions};
use headlab_core::head_compress::{compress_head, CompressionReport, QkHead, TuneConfig};
use headlab_core::numerics::{ols_line, sphere_tokens, LineFit, Matrix, RngStream};
use headlab_core::softmax_analysis::{
    fit_scan, logits_norm_scan, saturation_point, score_range_check, validate_lengths, QkPair,
};
use headlab_core::tasks::{gen_task, TaskSpec};
use headlab_core::transformer::{
    grouped_head_layout, train, Optimizer, PositionalEncoding, TrainConfig, TrainData, TransformerParams,
};
use headlab_core::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{Command, ExperimentConfig};
use crate::output::OutputDir;
use crate::svg::Plot;

// stream ids under the run seed, one per command
const STREAM_DELTA: u64 = 1;
const STREAM_JACOBIAN: u64 = 2;
const STREAM_SCORE: u64 = 3;
const STREAM_LOGITS: u64 = 4;
const STREAM_COMPRESS: u64 = 5;
const STREAM_TRAIN: u64 = 6;
const STREAM_CONSTRUCT: u64 = 7;

/// Runs the configured command; returns a one-line summary for stdout.
pub fn dispatch(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<String> {
    match cfg.command {
        Command::DeltaFit => delta_fit(cfg, &cfg.params()?, out),
        Command::Allocate => allocate(&cfg.params()?, out),
        Command::Tradeoff => tradeoff(&cfg.params()?, out),
        Command::JacobianScan => jacobian_scan(cfg, &cfg.params()?, out),
        Command::ScoreRange => score_range(cfg, &cfg.params()?, out),
        Command::LogitsNorm => logits_norm(cfg, &cfg.params()?, out),
        Command::Compress => compress(cfg, &cfg.params()?, out),
        Command::Train => train_cmd(cfg, &TrainParams::from_config(cfg)?, out),
        Command::Construct => construct(cfg, &cfg.params()?, out),
        Command::GenData => gen_data(&GenDataParams::from_config(cfg)?, out),
    }
}

// ---------------------------------------------------------------------------
// Shared parameter pieces
// ---------------------------------------------------------------------------

fn one() -> f64 {
    1.0
}

/// A lag kernel `ρ_i = w_i·I_d`, given either as an n-gram order (unit
/// weights on lags `1..=n`) or as explicit per-lag weights starting at lag 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelParams {
    pub d: usize,
    #[serde(rename = "B", default = "one")]
    pub token_bound: f64,
    #[serde(rename = "L")]
    pub seq_len: usize,
    #[serde(default)]
    pub ngram: Option<usize>,
    #[serde(default)]
    pub norms: Option<Vec<f64>>,
}

impl KernelParams {
    pub fn ngram(n: usize, d: usize, seq_len: usize) -> Self {
        KernelParams {
            d,
            token_bound: 1.0,
            seq_len,
            ngram: Some(n),
            norms: None,
        }
    }

    pub fn weights(&self) -> Result<Vec<f64>> {
        match (&self.ngram, &self.norms) {
            (Some(n), None) => {
                let mut w = vec![1.0; n + 1];
                w[0] = 0.0;
                Ok(w)
            }
            (None, Some(w)) => Ok(w.clone()),
            _ => Err(Error::config("kernel needs exactly one of `ngram` or `norms`")),
        }
    }

    pub fn spec(&self) -> Result<KernelSpec> {
        KernelSpec::new(self.weights()?, self.d, self.token_bound, self.seq_len)
    }

    pub fn rho(&self) -> Result<Vec<Matrix>> {
        Ok(self
            .weights()?
            .iter()
            .map(|&w| Matrix::identity(self.d).scale(w))
            .collect())
    }
}

/// Reads a task block, filling in the run seed when the block has none.
fn task_value(mut v: Value, seed: u64) -> Result<TaskSpec> {
    if let Value::Object(m) = &mut v {
        m.entry("seed").or_insert_with(|| seed.into());
    }
    let spec: TaskSpec = serde_json::from_value(v).map_err(|e| Error::config(format!("task: {e}")))?;
    spec.validate()?;
    Ok(spec)
}


#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
struct SlopeSummary {
    slope: f64,
    intercept: f64,
    r2: f64,
}

impl From<LineFit> for SlopeSummary {
    fn from(f: LineFit) -> Self {
        SlopeSummary {
            slope: f.slope,
            intercept: f.intercept,
            r2: f.r2,
        }
    }
}

fn log_log_fit(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    if ly.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("log-log fit needs positive values"));
    }
    ols_line(&lx, &ly)
}

fn nonempty<T>(v: &[T], what: &str) -> Result<()> {
    if v.is_empty() {
        Err(Error::config(format!("{what} must not be empty")))
    } else {
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// delta-fit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeltaFitParams {
    #[serde(rename = "T")]
    pub target_lags: Vec<usize>,
    pub m: Vec<usize>,
    /// Fit horizon; `None` uses the per-lag default.
    pub horizon: Option<usize>,
}

impl Default for DeltaFitParams {
    fn default() -> Self {
        DeltaFitParams {
            target_lags: vec![1, 2, 4, 8, 16],
            m: (1..=64).collect(),
            horizon: None,
        }
    }
}

#[derive(Serialize)]
struct DeltaRow {
    #[serde(rename = "T")]
    target_lag: usize,
    m: usize,
    l1_error: f64,
    certified_bound: f64,
    tail_bound: f64,
    horizon: usize,
    certified: bool,
}

impl From<DeltaFitReport> for DeltaRow {
    fn from(r: DeltaFitReport) -> Self {
        DeltaRow {
            target_lag: r.target_lag,
            m: r.m,
            l1_error: r.l1_error,
            certified_bound: r.certified_bound,
            tail_bound: r.tail_bound,
            horizon: r.horizon,
            certified: r.certified(),
        }
    }
}

pub const DELTA_COLUMNS: &[&str] = &["T", "m", "l1_error", "certified_bound", "tail_bound", "horizon", "certified"];

/// Fits every `(T, m)` cell; lag `T` draws from `child(T)`. The table is
/// written in full before a certificate failure is reported.
fn delta_fit(cfg: &ExperimentConfig, p: &DeltaFitParams, out: &mut OutputDir) -> Result<String> {
    nonempty(&p.target_lags, "T")?;
    nonempty(&p.m, "m")?;
    let root = RngStream::new(cfg.seed, STREAM_DELTA);
    let per_lag = p
        .target_lags
        .par_iter()
        .map(|&t| {
            let horizon = p.horizon.unwrap_or_else(|| default_horizon(t));
            fit_exp_sum_path(t, &p.m, horizon, &root.child(t as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<DeltaRow> = per_lag.into_iter().flatten().map(|(_, report)| report.into()).collect();
    out.write_table("delta_fit", DELTA_COLUMNS, &rows)?;
    let failed: Vec<&DeltaRow> = rows.iter().filter(|r| !r.certified).collect();
    if let Some(first) = failed.first() {
        eprintln!("{} of {} cells miss the certificate", failed.len(), rows.len());
        return Err(Error::Certification {
            t: first.target_lag,
            m: first.m,
            best_l1: first.l1_error,
            bound: first.certified_bound,
        });
    }
    Ok(format!("delta-fit: {} cells certified", rows.len()))
}

// ---------------------------------------------------------------------------
// allocate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocateParams {
    pub kernel: KernelParams,
    #[serde(rename = "D")]
    pub budget: usize,
    pub delta: f64,
    /// Largest number of groups; defaults to the kernel's largest lag.
    #[serde(rename = "M_max")]
    pub m_max: Option<usize>,
}

impl Default for AllocateParams {
    fn default() -> Self {
        AllocateParams {
            kernel: KernelParams::ngram(4, 8, 64),
            budget: 256,
            delta: DEFAULT_DELTA,
            m_max: None,
        }
    }
}

#[derive(Serialize)]
struct AllocationRow {
    variant: &'static str,
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "D")]
    budget: usize,
    projection_term: f64,
    attention_term: f64,
    truncation_term: f64,
    total: f64,
    eps_delta: f64,
    delta: f64,
}

pub const ALLOCATION_COLUMNS: &[&str] = &[
    "variant",
    "M",
    "D",
    "projection_term",
    "attention_term",
    "truncation_term",
    "total",
    "eps_delta",
    "delta",
];

/// Optimizes the plan under the bound without the concentration slack and
/// reports the chosen plan under both variants.
fn allocate(p: &AllocateParams, out: &mut OutputDir) -> Result<String> {
    let kernel = p.kernel.spec()?;
    let m_max = p.m_max.unwrap_or_else(|| kernel.max_lag());
    let (plan, plain) = optimize_allocation(&kernel, p.budget, p.delta, m_max)?;
    let conc = bound_eval(&kernel, &plan, p.delta, true)?;
    out.write_json("plan.json", &plan)?;
    let rows = [("bound", plain), ("with_concentration", conc)].map(|(variant, b)| AllocationRow {
        variant,
        m: plan.m(),
        budget: plan.budget(),
        projection_term: b.projection_term,
        attention_term: b.attention_term,
        truncation_term: b.truncation_term,
        total: b.total,
        eps_delta: b.eps_delta,
        delta: p.delta,
    });
    out.write_table("allocation", ALLOCATION_COLUMNS, &rows)?;
    Ok(format!(
        "allocate: M={} groups={} total={}",
        plan.m(),
        serde_json::to_string(&plan.groups).unwrap_or_default(),
        plain.total
    ))
}

// ---------------------------------------------------------------------------
// tradeoff
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TradeoffParams {
    pub kernel: KernelParams,
    #[serde(rename = "D")]
    pub budget: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "H_grid")]
    pub h_grid: Vec<usize>,
}

impl Default for TradeoffParams {
    fn default() -> Self {
        TradeoffParams {
            kernel: KernelParams::ngram(1, 16, 128),
            budget: 128,
            m: 1,
            h_grid: vec![1, 2, 4, 8, 16, 32, 64],
        }
    }
}

#[derive(Serialize)]
struct TradeoffRow {
    #[serde(rename = "H")]
    heads: usize,
    d_m: usize,
    projection_term: f64,
    attention_term: f64,
    truncation_term: f64,
    total: f64,
    eps_delta: f64,
}

pub const TRADEOFF_COLUMNS: &[&str] = &[
    "H",
    "d_m",
    "projection_term",
    "attention_term",
    "truncation_term",
    "total",
    "eps_delta",
];

#[derive(Serialize)]
struct TradeoffSummary {
    argmin_h: Option<usize>,
    argmin_d_m: Option<usize>,
    argmin_total: Option<f64>,
    skipped: Vec<headlab_core::allocation::SkippedPoint>,
}

fn tradeoff(p: &TradeoffParams, out: &mut OutputDir) -> Result<String> {
    nonempty(&p.h_grid, "H_grid")?;
    let kernel = p.kernel.spec()?;
    let curve = tradeoff_curve(&kernel, p.budget, p.m, &p.h_grid)?;
    let rows: Vec<TradeoffRow> = curve
        .points
        .iter()
        .map(|pt| TradeoffRow {
            heads: pt.heads,
            d_m: pt.d_m,
            projection_term: pt.breakdown.projection_term,
            attention_term: pt.breakdown.attention_term,
            truncation_term: pt.breakdown.truncation_term,
            total: pt.breakdown.total,
            eps_delta: pt.breakdown.eps_delta,
        })
        .collect();
    out.write_table("tradeoff", TRADEOFF_COLUMNS, &rows)?;
    let svg = Plot::new("Bound vs heads per group", "H", "bound")
        .log_x()
        .series(
            "total",
            curve.points.iter().map(|pt| (pt.heads as f64, pt.breakdown.total)).collect(),
        )
        .render();
    out.write_plot("tradeoff", &svg, TRADEOFF_COLUMNS, &rows)?;
    let best = curve.argmin();
    out.write_json(
        "tradeoff_summary.json",
        &TradeoffSummary {
            argmin_h: best.map(|b| b.heads),
            argmin_d_m: best.map(|b| b.d_m),
            argmin_total: best.map(|b| b.breakdown.total),
            skipped: curve.skipped.clone(),
        },
    )?;
    Ok(match best {
        Some(b) => format!("tradeoff: argmin H={} d_m={} total={}", b.heads, b.d_m, b.breakdown.total),
        None => "tradeoff: no admissible grid point".to_string(),
    })
}

// ---------------------------------------------------------------------------
// jacobian-scan
// ---------------------------------------------------------------------------

/// Query/key projections for the scans: all-zero, or Gaussian entries
/// with standard deviation `std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum QkParams {
    Zero {
        #[serde(rename = "D")]
        model_dim: usize,
        d_h: usize,
    },
    Random {
        #[serde(rename = "D")]
        model_dim: usize,
        d_h: usize,
        std: f64,
        #[serde(default)]
        slope: f64,
    },
}

impl QkParams {
    fn build(&self, rng: &RngStream) -> Result<QkPair> {
        match *self {
            QkParams::Zero { model_dim, d_h } => {
                check_dims(model_dim, d_h)?;
                QkPair::new(Matrix::zeros(d_h, model_dim), Matrix::zeros(d_h, model_dim))
            }
            QkParams::Random {
                model_dim,
                d_h,
                std,
                slope,
            } => {
                check_dims(model_dim, d_h)?;
                if !(std >= 0.0 && std.is_finite()) || !(slope >= 0.0 && slope.is_finite()) {
                    return Err(Error::config("std and slope must be finite and nonnegative"));
                }
                let mut r = rng.rng();
                let w_q = Matrix::gaussian(d_h, model_dim, std, &mut r);
                let w_k = Matrix::gaussian(d_h, model_dim, std, &mut r);
                let mut qk = QkPair::new(w_q, w_k)?;
                qk.slope = slope;
                Ok(qk)
            }
        }
    }
}

fn check_dims(model_dim: usize, d_h: usize) -> Result<()> {
    if model_dim == 0 || d_h == 0 {
        return Err(Error::config("D and d_h must be positive"));
    }
    Ok(())
}

fn default_lengths() -> Vec<usize> {
    vec![8, 16, 32, 64, 128, 256, 512, 1024]
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JacobianScanParams {
    pub qk: QkParams,
    pub lengths: Vec<usize>,
    pub samples: usize,
    #[serde(rename = "B")]
    pub token_bound: f64,
}

impl Default for JacobianScanParams {
    fn default() -> Self {
        JacobianScanParams {
            qk: QkParams::Random {
                model_dim: 8,
                d_h: 4,
                std: 0.5,
                slope: 0.0,
            },
            lengths: default_lengths(),
            samples: 16,
            token_bound: 1.0,
        }
    }
}

pub const JACOBIAN_COLUMNS: &[&str] = &["L", "mean_spectral_norm", "std", "samples"];

/// Projections from `child(0)`; length `i` draws its tokens from
/// `child(1).child(i)`, matching the core scan.
fn jacobian_scan(cfg: &ExperimentConfig, p: &JacobianScanParams, out: &mut OutputDir) -> Result<String> {
    validate_lengths(&p.lengths)?;
    let root = RngStream::new(cfg.seed, STREAM_JACOBIAN);
    let qk = p.qk.build(&root.child(0))?;
    let tokens = root.child(1);
    let points = p
        .lengths
        .par_iter()
        .enumerate()
        .map(|(i, &len)| saturation_point(&qk, len, p.samples, p.token_bound, &tokens.child(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let scan = fit_scan(&points)?;
    out.write_table("jacobian_scan", JACOBIAN_COLUMNS, &points)?;
    let svg = Plot::new("Softmax Jacobian norm vs length", "L", "mean spectral norm")
        .log_x()
        .log_y()
        .series(
            "mean ||J||",
            points.iter().map(|pt| (pt.len as f64, pt.mean_spectral_norm)).collect(),
        )
        .render();
    out.write_plot("jacobian_scan", &svg, JACOBIAN_COLUMNS, &points)?;
    out.write_json(
        "jacobian_slope.json",
        &SlopeSummary {
            slope: scan.fitted_slope,
            intercept: scan.fitted_intercept,
            r2: scan.r2,
        },
    )?;
    Ok(format!("jacobian-scan: slope={} r2={}", scan.fitted_slope, scan.r2))
}

// ---------------------------------------------------------------------------
// score-range
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreRangeParams {
    pub trials: usize,
    #[serde(rename = "D")]
    pub model_dim: usize,
    pub d_h: usize,
    #[serde(rename = "L")]
    pub seq_len: usize,
    #[serde(rename = "B")]
    pub token_bound: f64,
    /// Entry standard deviation of `W_Q` and `W_K`.
    pub std: f64,
}

impl Default for ScoreRangeParams {
    fn default() -> Self {
        ScoreRangeParams {
            trials: 1000,
            model_dim: 8,
            d_h: 4,
            seq_len: 32,
            token_bound: 1.0,
            std: 1.0,
        }
    }
}

#[derive(Serialize)]
struct ScoreRow {
    trial: usize,
    delta: f64,
    min_weight: f64,
    max_weight: f64,
    lower_bound: f64,
    upper_bound: f64,
    violations: usize,
}

pub const SCORE_COLUMNS: &[&str] = &[
    "trial",
    "delta",
    "min_weight",
    "max_weight",
    "lower_bound",
    "upper_bound",
    "violations",
];

#[derive(Serialize)]
struct ScoreSummary {
    trials: usize,
    violations: usize,
}

/// Trial `i` draws `W_Q`, `W_K` and `X` from `child(i)`.
fn score_range(cfg: &ExperimentConfig, p: &ScoreRangeParams, out: &mut OutputDir) -> Result<String> {
    if p.trials == 0 || p.seq_len == 0 {
        return Err(Error::config("trials and L must be positive"));
    }
    check_dims(p.model_dim, p.d_h)?;
    let root = RngStream::new(cfg.seed, STREAM_SCORE);
    let rows = (0..p.trials)
        .into_par_iter()
        .map(|i| {
            let mut r = root.child(i as u64).rng();
            let w_q = Matrix::gaussian(p.d_h, p.model_dim, p.std, &mut r);
            let w_k = Matrix::gaussian(p.d_h, p.model_dim, p.std, &mut r);
            let x = sphere_tokens(p.model_dim, p.seq_len, p.token_bound, &mut r);
            let s = score_range_check(&w_q, &w_k, &x, p.token_bound)?;
            Ok(ScoreRow {
                trial: i,
                delta: s.delta,
                min_weight: s.min_weight,
                max_weight: s.max_weight,
                lower_bound: s.lower_bound,
                upper_bound: s.upper_bound,
                violations: usize::from(!s.min_ok) + usize::from(!s.max_ok),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.write_table("score_range", SCORE_COLUMNS, &rows)?;
    let violations = rows.iter().map(|r| r.violations).sum();
    out.write_json(
        "score_range_summary.json",
        &ScoreSummary {
            trials: p.trials,
            violations,
        },
    )?;
    Ok(format!("score-range: {violations} violations over {} trials", p.trials))
}

// ---------------------------------------------------------------------------
// logits-norm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogitsNormParams {
    pub d: usize,
    #[serde(rename = "D")]
    pub model_dim: usize,
    pub d_h: usize,
    pub ffn_width: usize,
    pub positional: PositionalEncoding,
    pub lengths: Vec<usize>,
    pub samples: usize,
    #[serde(rename = "B")]
    pub token_bound: f64,
}

impl Default for LogitsNormParams {
    fn default() -> Self {
        LogitsNormParams {
            d: 4,
            model_dim: 16,
            d_h: 4,
            ffn_width: 16,
            positional: PositionalEncoding::Alibi,
            lengths: default_lengths(),
            samples: 16,
            token_bound: 1.0,
        }
    }
}

pub const LOGITS_COLUMNS: &[&str] = &["L", "mean_norm", "samples"];

/// Randomly initialized one-layer, one-head model from `child(0)`; the
/// scan draws from `child(1)`.
fn logits_norm(cfg: &ExperimentConfig, p: &LogitsNormParams, out: &mut OutputDir) -> Result<String> {
    validate_lengths(&p.lengths)?;
    let root = RngStream::new(cfg.seed, STREAM_LOGITS);
    let layout = grouped_head_layout(&AllocationPlan::uniform(1, 1, p.d_h), p.model_dim)?;
    let model = TransformerParams::init(p.d, p.model_dim, &[layout], p.ffn_width, p.positional, &root.child(0))?;
    let points = logits_norm_scan(&model, &p.lengths, p.samples, p.token_bound, &root.child(1))?;
    out.write_table("logits_norm", LOGITS_COLUMNS, &points)?;
    let svg = Plot::new("Attention logits norm vs length", "L", "mean logits norm")
        .log_x()
        .log_y()
        .series(
            "mean ||z||",
            points.iter().map(|pt| (pt.len as f64, pt.mean_norm)).collect(),
        )
        .render();
    out.write_plot("logits_norm", &svg, LOGITS_COLUMNS, &points)?;
    let xs: Vec<f64> = points.iter().map(|pt| pt.len as f64).collect();
    let ys: Vec<f64> = points.iter().map(|pt| pt.mean_norm).collect();
    let fit: SlopeSummary = if points.len() >= 2 {
        log_log_fit(&xs, &ys)?.into()
    } else {
        SlopeSummary {
            slope: f64::NAN,
            intercept: f64::NAN,
            r2: f64::NAN,
        }
    };
    out.write_json("logits_norm_slope.json", &fit)?;
    Ok(format!("logits-norm: slope={}", fit.slope))
}

// ---------------------------------------------------------------------------
// compress
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LengthScanParams {
    pub d_h: usize,
    pub lengths: Vec<usize>,
    pub count: usize,
    /// Fine-tuning steps at each length; 0 scores the SVD student.
    pub steps: usize,
}

impl Default for LengthScanParams {
    fn default() -> Self {
        LengthScanParams {
            d_h: 16,
            lengths: vec![64, 256, 1024],
            count: 4,
            steps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressParams {
    #[serde(rename = "D")]
    pub model_dim: usize,
    #[serde(rename = "d_H")]
    pub teacher_dim: usize,
    /// Entry standard deviation of the teacher projections.
    pub teacher_std: f64,
    pub grid: Vec<usize>,
    #[serde(rename = "L")]
    pub seq_len: usize,
    pub train_count: usize,
    pub eval_count: usize,
    #[serde(rename = "B")]
    pub token_bound: f64,
    pub slope: f64,
    pub tune: TuneConfig,
    pub length_scan: Option<LengthScanParams>,
}

impl Default for CompressParams {
    fn default() -> Self {
        CompressParams {
            model_dim: 64,
            teacher_dim: 64,
            teacher_std: 0.35,
            grid: vec![4, 8, 16, 24, 32, 48, 64],
            seq_len: 64,
            train_count: 8,
            eval_count: 8,
            token_bound: 1.0,
            slope: 0.0,
            tune: TuneConfig {
                steps: 30,
                ..TuneConfig::default()
            },
            length_scan: None,
        }
    }
}

pub const COMPRESS_COLUMNS: &[&str] = &["d_h", "lambda_tail", "init_error", "tuned_error", "mse", "L", "steps"];

fn token_batch(model_dim: usize, len: usize, count: usize, bound: f64, rng: &RngStream) -> Vec<Matrix> {
    (0..count)
        .map(|i| sphere_tokens(model_dim, len, bound, &mut rng.child(i as u64).rng()))
        .collect()
}

/// Teacher from `child(0)`; grid training and evaluation sequences from
/// `child(1)` and `child(2)`; the length scan from `child(3).child(j)` for
/// length `j` (training) and `child(4).child(j)` (evaluation).
fn compress(cfg: &ExperimentConfig, p: &CompressParams, out: &mut OutputDir) -> Result<String> {
    nonempty(&p.grid, "grid")?;
    check_dims(p.model_dim, p.teacher_dim)?;
    if p.seq_len == 0 || p.eval_count == 0 {
        return Err(Error::config("L and eval_count must be positive"));
    }
    let root = RngStream::new(cfg.seed, STREAM_COMPRESS);
    let mut r = root.child(0).rng();
    let teacher = QkHead::new(
        Matrix::gaussian(p.teacher_dim, p.model_dim, p.teacher_std, &mut r),
        Matrix::gaussian(p.teacher_dim, p.model_dim, p.teacher_std, &mut r),
    )?;
    let train_data = token_batch(p.model_dim, p.seq_len, p.train_count, p.token_bound, &root.child(1));
    let eval_data = token_batch(p.model_dim, p.seq_len, p.eval_count, p.token_bound, &root.child(2));
    let results = p
        .grid
        .par_iter()
        .map(|&d_h| compress_head(&teacher, d_h, &train_data, &eval_data, &p.tune, p.slope))
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<CompressionReport> = results.iter().map(|r| r.0.clone()).collect();
    out.write_table("compress", COMPRESS_COLUMNS, &reports)?;
    let svg = Plot::new("Compression error vs student dimension", "d_h", "max-column error")
        .series("init", reports.iter().map(|r| (r.d_h as f64, r.init_error)).collect())
        .series("tuned", reports.iter().map(|r| (r.d_h as f64, r.tuned_error)).collect())
        .render();
    out.write_plot("compress", &svg, COMPRESS_COLUMNS, &reports)?;
    let mut tensors = vec![
        ("teacher.w_q".to_string(), teacher.w_q.clone()),
        ("teacher.w_k".to_string(), teacher.w_k.clone()),
    ];
    for (report, pair) in &results {
        tensors.push((format!("student{}.w_q", report.d_h), pair.student.w_q.clone()));
        tensors.push((format!("student{}.w_k", report.d_h), pair.student.w_k.clone()));
    }
    out.write_bytes("compress_weights.bin", &encode(&tensors)?)?;

    let mut summary = format!("compress: {} grid points", reports.len());
    if let Some(ls) = &p.length_scan {
        let scan = length_scan(&teacher, p, ls, &root)?;
        out.write_table("compress_length", COMPRESS_COLUMNS, &scan)?;
        let xs: Vec<f64> = scan.iter().map(|r| r.len as f64).collect();
        let ys: Vec<f64> = scan.iter().map(|r| r.tuned_error).collect();
        let fit: SlopeSummary = log_log_fit(&xs, &ys)?.into();
        out.write_json("compress_length_slope.json", &fit)?;
        let svg = Plot::new("Compression error vs length", "L", "max-column error")
            .log_x()
            .log_y()
            .series(&format!("d_h = {}", ls.d_h), xs.iter().copied().zip(ys.iter().copied()).collect())
            .render();
        out.write_plot("compress_length", &svg, COMPRESS_COLUMNS, &scan)?;
        summary.push_str(&format!(", length slope={}", fit.slope));
    }
    Ok(summary)
}

fn length_scan(
    teacher: &QkHead,
    p: &CompressParams,
    ls: &LengthScanParams,
    root: &RngStream,
) -> Result<Vec<CompressionReport>> {
    if ls.lengths.len() < 2 || ls.count == 0 {
        return Err(Error::config("length scan needs two lengths and count >= 1"));
    }
    let tune = TuneConfig {
        steps: ls.steps,
        ..p.tune
    };
    ls.lengths
        .par_iter()
        .enumerate()
        .map(|(j, &len)| {
            let train = token_batch(p.model_dim, len, ls.count, p.token_bound, &root.child(3).child(j as u64));
            let eval = token_batch(p.model_dim, len, ls.count, p.token_bound, &root.child(4).child(j as u64));
            compress_head(teacher, ls.d_h, &train, &eval, &tune, p.slope).map(|r| r.0)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedAllocation {
    pub name: String,
    pub heads: Vec<HeadGroup>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainParamsRaw {
    task: Value,
    layers: usize,
    #[serde(rename = "D")]
    model_dim: usize,
    heads: Vec<HeadGroup>,
    allocations: Option<Vec<NamedAllocation>>,
    ffn_width: usize,
    positional: PositionalEncoding,
    train_slopes: bool,
    optimizer: Optimizer,
    lr: f64,
    lrs: Option<Vec<f64>>,
    epochs: usize,
    batch_size: usize,
    seeds: usize,
}

impl Default for TrainParamsRaw {
    fn default() -> Self {
        TrainParamsRaw {
            task: serde_json::json!({ "task": { "kind": "ngram", "n": 4 }, "d": 8, "L": 16, "count": 160 }),
            layers: 1,
            model_dim: 256,
            heads: AllocationPlan::uniform(4, 8, 8).groups,
            allocations: None,
            ffn_width: 16,
            positional: PositionalEncoding::Alibi,
            train_slopes: false,
            optimizer: Optimizer::adam(),
            lr: 1e-3,
            lrs: None,
            epochs: 10,
            batch_size: 16,
            seeds: 1,
        }
    }
}

/// Training sweep: every allocation × learning rate × seed replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub task: TaskSpec,
    pub layers: usize,
    pub model_dim: usize,
    pub allocations: Vec<NamedAllocation>,
    pub ffn_width: usize,
    pub positional: PositionalEncoding,
    pub train_slopes: bool,
    pub optimizer: Optimizer,
    pub lrs: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: usize,
}

impl TrainParams {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let raw: TrainParamsRaw = cfg.params()?;
        let allocations = raw.allocations.unwrap_or_else(|| {
            vec![NamedAllocation {
                name: "model".into(),
                heads: raw.heads.clone(),
            }]
        });
        nonempty(&allocations, "allocations")?;
        let lrs = raw.lrs.unwrap_or_else(|| vec![raw.lr]);
        nonempty(&lrs, "lrs")?;
        if raw.layers == 0 || raw.seeds == 0 {
            return Err(Error::config("layers and seeds must be at least 1"));
        }
        Ok(TrainParams {
            task: task_value(raw.task, cfg.seed)?,
            layers: raw.layers,
            model_dim: raw.model_dim,
            allocations,
            ffn_width: raw.ffn_width,
            positional: raw.positional,
            train_slopes: raw.train_slopes,
            optimizer: raw.optimizer,
            lrs,
            epochs: raw.epochs,
            batch_size: raw.batch_size,
            seeds: raw.seeds,
        })
    }
}

#[derive(Serialize)]
struct HistoryRow<'a> {
    config: &'a str,
    lr: f64,
    replicate: usize,
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
}

pub const HISTORY_COLUMNS: &[&str] = &["config", "lr", "replicate", "epoch", "train_loss", "val_loss"];

#[derive(Serialize)]
struct RunRow<'a> {
    config: &'a str,
    lr: f64,
    replicate: usize,
    best_val_loss: f64,
    best_epoch: usize,
    final_train_loss: f64,
}

pub const RUN_COLUMNS: &[&str] = &["config", "lr", "replicate", "best_val_loss", "best_epoch", "final_train_loss"];

#[derive(Serialize)]
struct SummaryRow<'a> {
    config: &'a str,
    runs: usize,
    median_best_val_loss: f64,
    min_best_val_loss: f64,
    best_lr: f64,
    best_replicate: usize,
    best_epoch: usize,
}

pub const SUMMARY_COLUMNS: &[&str] = &[
    "config",
    "runs",
    "median_best_val_loss",
    "min_best_val_loss",
    "best_lr",
    "best_replicate",
    "best_epoch",
];

struct Run {
    alloc: usize,
    lr: f64,
    replicate: usize,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Replicate `s` initializes from `child(s).child(0)` and shuffles with
/// `child(s).child(1)`, identically for every allocation and learning rate.
fn train_cmd(cfg: &ExperimentConfig, p: &TrainParams, out: &mut OutputDir) -> Result<String> {
    let data = gen_task(&p.task)?;
    let root = RngStream::new(cfg.seed, STREAM_TRAIN);
    let tc = |lr: f64| TrainConfig {
        optimizer: p.optimizer,
        lr,
        epochs: p.epochs,
        batch_size: p.batch_size,
    };
    let runs: Vec<Run> = (0..p.allocations.len())
        .flat_map(|alloc| {
            p.lrs
                .iter()
                .flat_map(move |&lr| (0..p.seeds).map(move |replicate| Run { alloc, lr, replicate }))
        })
        .collect();
    let results = runs
        .par_iter()
        .map(|run| {
            let alloc = &p.allocations[run.alloc];
            let layout = grouped_head_layout(&AllocationPlan::new(alloc.heads.clone()), p.model_dim)?;
            let layouts = vec![layout; p.layers];
            let stream = root.child(run.replicate as u64);
            let mut init = TransformerParams::init(
                p.task.d,
                p.model_dim,
                &layouts,
                p.ffn_width,
                p.positional,
                &stream.child(0),
            )?;
            init.train_slopes = p.train_slopes;
            let split = TrainData {
                train_inputs: data.train_inputs(),
                train_targets: data.train_targets(),
                val_inputs: data.val_inputs(),
                val_targets: data.val_targets(),
            };
            train(&init, &split, &tc(run.lr), &stream.child(1))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut history = Vec::new();
    let mut run_rows = Vec::new();
    for (run, (_, h)) in runs.iter().zip(&results) {
        let name = p.allocations[run.alloc].name.as_str();
        for (epoch, (tl, vl)) in h.train_loss.iter().zip(&h.val_loss).enumerate() {
            history.push(HistoryRow {
                config: name,
                lr: run.lr,
                replicate: run.replicate,
                epoch,
                train_loss: *tl,
                val_loss: *vl,
            });
        }
        run_rows.push(RunRow {
            config: name,
            lr: run.lr,
            replicate: run.replicate,
            best_val_loss: h.best_val_loss,
            best_epoch: h.best_epoch,
            final_train_loss: *h.train_loss.last().expect("initial loss recorded"),
        });
    }
    out.write_table("train_history", HISTORY_COLUMNS, &history)?;
    out.write_table("train_runs", RUN_COLUMNS, &run_rows)?;

    let mut summary = Vec::new();
    let mut plot = Plot::new("Validation loss of the best run per allocation", "epoch", "validation loss").log_y();
    for (a, alloc) in p.allocations.iter().enumerate() {
        let idx: Vec<usize> = (0..runs.len()).filter(|&i| runs[i].alloc == a).collect();
        let mut bests: Vec<f64> = idx.iter().map(|&i| results[i].1.best_val_loss).collect();
        let best = *idx
            .iter()
            .min_by(|&&i, &&j| results[i].1.best_val_loss.total_cmp(&results[j].1.best_val_loss))
            .expect("every allocation has runs");
        let h = &results[best].1;
        summary.push(SummaryRow {
            config: &alloc.name,
            runs: idx.len(),
            median_best_val_loss: median(&mut bests),
            min_best_val_loss: h.best_val_loss,
            best_lr: runs[best].lr,
            best_replicate: runs[best].replicate,
            best_epoch: h.best_epoch,
        });
        plot = plot.series(
            &alloc.name,
            h.val_loss.iter().enumerate().map(|(e, &v)| (e as f64, v)).collect(),
        );
        out.write_bytes(
            &format!("checkpoint_{}.bin", file_stem(&alloc.name)),
            &encode(&results[best].0.named_tensors())?,
        )?;
    }
    out.write_table("train_summary", SUMMARY_COLUMNS, &summary)?;
    out.write_plot("train_history", &plot.render(), HISTORY_COLUMNS, &history)?;
    let best = summary
        .iter()
        .min_by(|a, b| a.median_best_val_loss.total_cmp(&b.median_best_val_loss))
        .expect("nonempty");
    Ok(format!(
        "train: {} runs, best median validation loss {} ({})",
        runs.len(),
        best.median_best_val_loss,
        best.config
    ))
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

// ---------------------------------------------------------------------------
// construct
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstructParams {
    pub kernel: KernelParams,
    /// Head groups; `None` runs the allocation optimizer on `D`.
    pub heads: Option<Vec<HeadGroup>>,
    #[serde(rename = "D")]
    pub model_dim: usize,
    pub delta: f64,
    pub trials: usize,
    pub include_all_t: bool,
    pub extend_by_burn_in: bool,
}

impl Default for ConstructParams {
    fn default() -> Self {
        ConstructParams {
            kernel: KernelParams::ngram(4, 8, 64),
            heads: None,
            model_dim: 256,
            delta: DEFAULT_DELTA,
            trials: 200,
            include_all_t: false,
            extend_by_burn_in: true,
        }
    }
}

#[derive(Serialize)]
struct TrialRow {
    trial: usize,
    fixed_error: f64,
    fresh_error: f64,
    bound: f64,
}

pub const TRIAL_COLUMNS: &[&str] = &["trial", "fixed_error", "fresh_error", "bound"];

#[derive(Serialize)]
struct ConstructReport<'a> {
    plan: &'a AllocationPlan,
    #[serde(flatten)]
    verdict: &'a headlab_core::extractor::ExtractorVerdict,
}

/// The extractor draws from `child(0)`; trial `i` from `child(1).child(i)`.
fn construct(cfg: &ExperimentConfig, p: &ConstructParams, out: &mut OutputDir) -> Result<String> {
    if p.trials == 0 {
        return Err(Error::config("trials must be at least 1"));
    }
    let kernel = p.kernel.spec()?;
    let plan = match &p.heads {
        Some(groups) => AllocationPlan::new(groups.clone()),
        None => optimize_allocation(&kernel, p.model_dim, p.delta, kernel.max_lag().max(1))?.0,
    };
    let opts = VerifyOptions {
        include_all_t: p.include_all_t,
        extend_by_burn_in: p.extend_by_burn_in,
    };
    let root = RngStream::new(cfg.seed, STREAM_CONSTRUCT);
    let spec = ExtractorSpec::new(p.kernel.rho()?, p.kernel.token_bound, p.kernel.seq_len, plan, p.delta, &root.child(0))?;
    let model = build_extractor(&spec, p.model_dim)?;
    let trials = root.child(1);
    let errors = (0..p.trials)
        .into_par_iter()
        .map(|i| trial_errors(&spec, &model, p.model_dim, &opts, &trials.child(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let verdict = summarize_trials(&spec, &errors, &opts)?;
    let rows: Vec<TrialRow> = errors
        .iter()
        .enumerate()
        .map(|(i, &(fixed, fresh))| TrialRow {
            trial: i,
            fixed_error: fixed,
            fresh_error: fresh,
            bound: verdict.theoretical_bound,
        })
        .collect();
    out.write_table("construct_trials", TRIAL_COLUMNS, &rows)?;
    out.write_json(
        "construct_verdict.json",
        &ConstructReport {
            plan: &spec.plan,
            verdict: &verdict,
        },
    )?;
    Ok(format!(
        "construct: holds={} empirical={} bound={} failure_fraction={}",
        verdict.holds, verdict.empirical_error, verdict.theoretical_bound, verdict.failure_fraction
    ))
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

/// The parameter block is a task specification.
pub struct GenDataParams(pub TaskSpec);

impl GenDataParams {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let v = if cfg.params.is_null() {
            Value::Object(Default::default())
        } else {
            cfg.params.clone()
        };
        task_value(v, cfg.seed).map(GenDataParams)
    }
}

#[derive(Serialize)]
struct Split {
    train: usize,
    validation: usize,
}

#[derive(Serialize)]
struct DatasetManifest<'a> {
    task: &'static str,
    spec: &'a TaskSpec,
    seed: u64,
    count: usize,
    split: Split,
    archive: &'static str,
}

fn gen_data(p: &GenDataParams, out: &mut OutputDir) -> Result<String> {
    let spec = &p.0;
    let data = gen_task(spec)?;
    let mut tensors = Vec::with_capacity(3 * data.inputs.len());
    for (i, ((x, y), c)) in data.inputs.iter().zip(&data.targets).zip(&data.clean_targets).enumerate() {
        tensors.push((format!("input.{i}"), x.clone()));
        tensors.push((format!("target.{i}"), y.clone()));
        tensors.push((format!("clean_target.{i}"), c.clone()));
    }
    out.write_bytes("dataset.bin", &encode(&tensors)?)?;
    let kind = match spec.kind {
        headlab_core::tasks::TaskKind::Ngram { .. } => "ngram",
        headlab_core::tasks::TaskKind::Conv { .. } => "conv",
        headlab_core::tasks::TaskKind::Induction { .. } => "induction",
    };
    out.write_json(
        "dataset.json",
        &DatasetManifest {
            task: kind,
            spec,
            seed: spec.seed,
            count: data.inputs.len(),
            split: Split {
                train: data.train_count,
                validation: data.inputs.len() - data.train_count,
            },
            archive: "dataset.bin",
        },
    )?;
    Ok(format!(
        "gen-data: {} {kind} sequences ({} train)",
        data.inputs.len(),
        data.train_count
    ))
}
