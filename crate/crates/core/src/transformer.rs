//! A small Transformer with grouped heads, causal Alibi attention, residual
//! rectifier FFNs and hand-written reverse-mode gradients.
//!
//! Logits follow the bilinear convention `Z = (W_Q X)ᵀ (W_K X) + R`: entry
//! `(s, l)` pairs key position `s` with query position `l`, and softmax runs
//! down each column. Under causal masking column `l` sees rows `s ≤ l` with
//! Alibi bias `−p·(l − s)`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::AllocationPlan;
use crate::error::{Error, Result};
use crate::numerics::{pairwise_sum, softmax_column, Matrix, RngStream};

// ---------------------------------------------------------------------------
// Attention primitives
// ---------------------------------------------------------------------------

/// Pre-softmax logits `(W_Q X)ᵀ (W_K X) + R` as an `L × L` matrix.
pub fn attention_logits(w_q: &Matrix, w_k: &Matrix, x: &Matrix, slope: f64, causal: bool) -> Matrix {
    let q = w_q.dot(x);
    let k = w_k.dot(x);
    let mut z = q.t_dot(&k);
    apply_rpe(&mut z, slope, causal);
    z
}

/// Adds the relative bias and, when causal, the `-inf` mask above position.
pub fn apply_rpe(z: &mut Matrix, slope: f64, causal: bool) {
    let len = z.rows();
    for s in 0..len {
        for l in 0..len {
            if causal && s > l {
                z[(s, l)] = f64::NEG_INFINITY;
            } else if slope != 0.0 {
                z[(s, l)] -= slope * (l as f64 - s as f64).abs();
            }
        }
    }
}

/// Softmax applied to every column.
pub fn column_softmax(z: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for l in 0..z.cols() {
        out.set_col(l, &softmax_column(&z.col(l))?);
    }
    Ok(out)
}

/// Column-wise softmax scores of one head.
pub fn attention_scores(w_q: &Matrix, w_k: &Matrix, x: &Matrix, slope: f64, causal: bool) -> Result<Matrix> {
    column_softmax(&attention_logits(w_q, w_k, x, slope, causal))
}

/// Backpropagates through a column softmax: returns `dZ` given scores `S`
/// and `dS`. Masked entries (score 0) receive zero gradient.
pub fn softmax_backward(s: &Matrix, ds: &Matrix) -> Matrix {
    let (n, len) = s.shape();
    let mut dz = Matrix::zeros(n, len);
    for l in 0..len {
        let mut inner = 0.0;
        for r in 0..n {
            inner += s[(r, l)] * ds[(r, l)];
        }
        for r in 0..n {
            dz[(r, l)] = s[(r, l)] * (ds[(r, l)] - inner);
        }
    }
    dz
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PositionalEncoding {
    /// Position enters only through the Alibi bias.
    #[default]
    Alibi,
    /// Fixed sinusoidal table added after the embedding.
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub slope: f64,
}

impl HeadParams {
    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    /// Concatenated head outputs are zero-padded to `D` rows before this map.
    pub w_o: Matrix,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    pub w_e: Matrix,
    pub b_e: Vec<f64>,
    pub layers: Vec<LayerParams>,
    pub w_r: Matrix,
    pub b_r: Vec<f64>,
    pub positional: PositionalEncoding,
    /// Whether Alibi slopes receive gradient updates.
    pub train_slopes: bool,
}

/// Placement of one head inside a layer's concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSlot {
    pub group: usize,
    pub index: usize,
    pub dim: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub model_dim: usize,
    pub slots: Vec<HeadSlot>,
    /// Trailing zero rows appended to reach `D`.
    pub padding: usize,
}

/// Lays out `M` groups of `H_m` heads of dimension `d_m` back to back.
pub fn grouped_head_layout(plan: &AllocationPlan, model_dim: usize) -> Result<LayerLayout> {
    let used = plan.budget();
    if used > model_dim {
        return Err(Error::config(format!(
            "plan uses {used} rows but D = {model_dim}"
        )));
    }
    if plan.groups.iter().any(|g| g.heads == 0 || g.dim == 0) {
        return Err(Error::config("every group needs H >= 1 and d >= 1"));
    }
    let mut slots = Vec::with_capacity(plan.total_heads());
    let mut offset = 0;
    for (group, g) in plan.groups.iter().enumerate() {
        for index in 0..g.heads {
            slots.push(HeadSlot {
                group,
                index,
                dim: g.dim,
                offset,
            });
            offset += g.dim;
        }
    }
    Ok(LayerLayout {
        model_dim,
        slots,
        padding: model_dim - used,
    })
}

/// Standard geometric Alibi slopes `2^{−8i/n}` for `n` heads.
pub fn default_slopes(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| 2f64.powf(-8.0 * i as f64 / n as f64))
        .collect()
}

impl LayerParams {
    /// All-zero layer shaped by `layout`, with the given slopes.
    pub fn zeros(layout: &LayerLayout, ffn_width: usize, slopes: &[f64]) -> Self {
        let d_model = layout.model_dim;
        let heads = layout
            .slots
            .iter()
            .zip(slopes)
            .map(|(slot, &slope)| HeadParams {
                w_q: Matrix::zeros(slot.dim, d_model),
                w_k: Matrix::zeros(slot.dim, d_model),
                w_v: Matrix::zeros(slot.dim, d_model),
                slope,
            })
            .collect();
        LayerParams {
            heads,
            w_o: Matrix::zeros(d_model, d_model),
            ffn: FfnParams {
                w1: Matrix::zeros(ffn_width, d_model),
                b1: vec![0.0; ffn_width],
                w2: Matrix::zeros(d_model, ffn_width),
                b2: vec![0.0; d_model],
            },
        }
    }

    /// Offsets of each head's rows in the concatenation.
    fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.heads
            .iter()
            .map(|h| {
                let o = acc;
                acc += h.dim();
                o
            })
            .collect()
    }
}

impl TransformerParams {
    /// Zero model; useful as a skeleton for hand-built constructions.
    pub fn zeros(
        token_dim: usize,
        model_dim: usize,
        layouts: &[LayerLayout],
        ffn_width: usize,
        positional: PositionalEncoding,
    ) -> Self {
        let layers = layouts
            .iter()
            .map(|lay| LayerParams::zeros(lay, ffn_width, &default_slopes(lay.slots.len())))
            .collect();
        TransformerParams {
            w_e: Matrix::zeros(model_dim, token_dim),
            b_e: vec![0.0; model_dim],
            layers,
            w_r: Matrix::zeros(token_dim, model_dim),
            b_r: vec![0.0; token_dim],
            positional,
            train_slopes: false,
        }
    }

    /// Gaussian initialization with variance `1/fan_in`; biases start at 0.
    pub fn init(
        token_dim: usize,
        model_dim: usize,
        layouts: &[LayerLayout],
        ffn_width: usize,
        positional: PositionalEncoding,
        rng: &RngStream,
    ) -> Result<Self> {
        for lay in layouts {
            if lay.model_dim != model_dim {
                return Err(Error::config("layout width differs from model width"));
            }
        }
        if token_dim == 0 || model_dim == 0 {
            return Err(Error::config("dimensions must be positive"));
        }
        let mut p = TransformerParams::zeros(token_dim, model_dim, layouts, ffn_width, positional);
        let mut r = rng.rng();
        let fan = |n: usize| 1.0 / (n.max(1) as f64).sqrt();
        p.w_e = Matrix::gaussian(model_dim, token_dim, fan(token_dim), &mut r);
        for layer in &mut p.layers {
            for h in &mut layer.heads {
                let dh = h.dim();
                h.w_q = Matrix::gaussian(dh, model_dim, fan(model_dim), &mut r);
                h.w_k = Matrix::gaussian(dh, model_dim, fan(model_dim), &mut r);
                h.w_v = Matrix::gaussian(dh, model_dim, fan(model_dim), &mut r);
            }
            layer.w_o = Matrix::gaussian(model_dim, model_dim, fan(model_dim), &mut r);
            let f = layer.ffn.w1.rows();
            layer.ffn.w1 = Matrix::gaussian(f, model_dim, fan(model_dim), &mut r);
            layer.ffn.w2 = Matrix::gaussian(model_dim, f, fan(f), &mut r);
        }
        p.w_r = Matrix::gaussian(token_dim, model_dim, fan(model_dim), &mut r);
        Ok(p)
    }

    pub fn token_dim(&self) -> usize {
        self.w_e.cols()
    }

    pub fn model_dim(&self) -> usize {
        self.w_e.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (d_model, d) = self.w_e.shape();
        let bad = |what: &str| Err(Error::shape(format!("inconsistent parameter shape: {what}")));
        if self.b_e.len() != d_model || self.w_r.shape() != (d, d_model) || self.b_r.len() != d {
            return bad("embedding/readout");
        }
        for layer in &self.layers {
            let mut rows = 0;
            for h in &layer.heads {
                let dh = h.dim();
                if h.w_k.shape() != (dh, d_model) || h.w_v.shape() != (dh, d_model) || h.w_q.cols() != d_model {
                    return bad("head projections");
                }
                if !(h.slope >= 0.0) {
                    return Err(Error::config("Alibi slopes must be nonnegative"));
                }
                rows += dh;
            }
            if rows > d_model {
                return Err(Error::config(format!(
                    "heads use {rows} rows but D = {d_model}"
                )));
            }
            let f = layer.ffn.w1.rows();
            if layer.w_o.shape() != (d_model, d_model)
                || layer.ffn.w1.cols() != d_model
                || layer.ffn.b1.len() != f
                || layer.ffn.w2.shape() != (d_model, f)
                || layer.ffn.b2.len() != d_model
            {
                return bad("output map / FFN");
            }
        }
        Ok(())
    }

    /// Named tensors in a fixed order (biases as column vectors, slopes as
    /// a `1 × H` row per layer).
    pub fn named_tensors(&self) -> Vec<(String, Matrix)> {
        let mut out = vec![
            ("embed.w".to_string(), self.w_e.clone()),
            ("embed.b".to_string(), Matrix::column(&self.b_e)),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (j, h) in layer.heads.iter().enumerate() {
                out.push((format!("layer{i}.head{j}.w_q"), h.w_q.clone()));
                out.push((format!("layer{i}.head{j}.w_k"), h.w_k.clone()));
                out.push((format!("layer{i}.head{j}.w_v"), h.w_v.clone()));
            }
            let slopes: Vec<f64> = layer.heads.iter().map(|h| h.slope).collect();
            out.push((
                format!("layer{i}.slopes"),
                Matrix::from_vec(1, slopes.len(), slopes).expect("row"),
            ));
            out.push((format!("layer{i}.w_o"), layer.w_o.clone()));
            out.push((format!("layer{i}.ffn.w1"), layer.ffn.w1.clone()));
            out.push((format!("layer{i}.ffn.b1"), Matrix::column(&layer.ffn.b1)));
            out.push((format!("layer{i}.ffn.w2"), layer.ffn.w2.clone()));
            out.push((format!("layer{i}.ffn.b2"), Matrix::column(&layer.ffn.b2)));
        }
        out.push(("readout.w".to_string(), self.w_r.clone()));
        out.push(("readout.b".to_string(), Matrix::column(&self.b_r)));
        out
    }

    /// Mutable views of every trainable scalar block, in a fixed order.
    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let train_slopes = self.train_slopes;
        let mut out: Vec<&mut [f64]> = vec![self.w_e.data_mut(), &mut self.b_e];
        for layer in &mut self.layers {
            for h in &mut layer.heads {
                out.push(h.w_q.data_mut());
                out.push(h.w_k.data_mut());
                out.push(h.w_v.data_mut());
                if train_slopes {
                    out.push(std::slice::from_mut(&mut h.slope));
                }
            }
            out.push(layer.w_o.data_mut());
            out.push(layer.ffn.w1.data_mut());
            out.push(&mut layer.ffn.b1);
            out.push(layer.ffn.w2.data_mut());
            out.push(&mut layer.ffn.b2);
        }
        out.push(self.w_r.data_mut());
        out.push(&mut self.b_r);
        out
    }

    /// Every trainable scalar, flattened in the order of [`Self::blocks_mut`].
    pub fn flat(&self) -> Vec<f64> {
        let mut c = self.clone();
        c.blocks_mut().into_iter().flat_map(|b| b.to_vec()).collect()
    }

    /// Inverse of [`Self::flat`].
    pub fn set_flat(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for block in self.blocks_mut() {
            for x in block.iter_mut() {
                *x = *it.next().expect("flat length matches");
            }
        }
        assert!(it.next().is_none(), "flat length matches");
    }

    pub fn num_trainable(&self) -> usize {
        self.flat().len()
    }

    /// Same shapes, all entries zero; slopes zeroed as well.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for b in z.blocks_mut() {
            b.iter_mut().for_each(|x| *x = 0.0);
        }
        for layer in &mut z.layers {
            for h in &mut layer.heads {
                h.slope = 0.0;
            }
        }
        z
    }

    fn add_scaled(&mut self, s: f64, other: &TransformerParams) {
        let mut o = other.clone();
        let src: Vec<Vec<f64>> = o.blocks_mut().into_iter().map(|b| b.to_vec()).collect();
        for (dst, src) in self.blocks_mut().into_iter().zip(src) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += s * b;
            }
        }
    }
}

/// Sinusoidal table: `PE(pos, 2i) = sin(pos/10000^{2i/D})`, cosine on odd rows.
pub fn sinusoidal_table(model_dim: usize, len: usize) -> Matrix {
    let mut pe = Matrix::zeros(model_dim, len);
    for pos in 0..len {
        for r in 0..model_dim {
            let i = (r / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / model_dim as f64);
            pe[(r, pos)] = if r % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

// ---------------------------------------------------------------------------
// Sequences
// ---------------------------------------------------------------------------

/// Token matrices `d × L` whose columns all have norm at most `bound`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub samples: Vec<Matrix>,
    pub bound: f64,
}

impl SequenceBatch {
    pub fn new(samples: Vec<Matrix>, bound: f64) -> Result<Self> {
        for x in &samples {
            for t in 0..x.cols() {
                let n = crate::numerics::norm2(&x.col(t));
                if n > bound * (1.0 + 1e-12) {
                    return Err(Error::config(format!(
                        "token norm {n} exceeds bound {bound}"
                    )));
                }
            }
        }
        Ok(SequenceBatch { samples, bound })
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct HeadCache {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub logits: Matrix,
    pub scores: Matrix,
    pub out: Matrix,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    pub input: Matrix,
    pub heads: Vec<HeadCache>,
    pub concat: Matrix,
    pub half: Matrix,
    pub pre_act: Matrix,
    pub act: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Matrix,
    pub embedded: Matrix,
    pub layers: Vec<LayerCache>,
    pub last_hidden: Matrix,
    pub output: Matrix,
}

fn add_bias(m: &mut Matrix, b: &[f64]) {
    for (i, &bi) in b.iter().enumerate() {
        if bi != 0.0 {
            m.row_mut(i).iter_mut().for_each(|x| *x += bi);
        }
    }
}

fn row_sums_into(acc: &mut [f64], m: &Matrix) {
    for (i, a) in acc.iter_mut().enumerate() {
        *a += m.row(i).iter().sum::<f64>();
    }
}

fn layer_forward(layer: &LayerParams, x: &Matrix) -> Result<LayerCache> {
    let (d_model, len) = x.shape();
    let mut heads = Vec::with_capacity(layer.heads.len());
    let mut concat = Matrix::zeros(d_model, len);
    let mut offset = 0;
    for h in &layer.heads {
        let q = h.w_q.dot(x);
        let k = h.w_k.dot(x);
        let v = h.w_v.dot(x);
        let mut logits = q.t_dot(&k);
        apply_rpe(&mut logits, h.slope, true);
        let scores = column_softmax(&logits)?;
        let out = v.dot(&scores);
        for r in 0..out.rows() {
            concat.row_mut(offset + r).copy_from_slice(out.row(r));
        }
        offset += out.rows();
        heads.push(HeadCache {
            q,
            k,
            v,
            logits,
            scores,
            out,
        });
    }
    let half = x.add(&layer.w_o.dot(&concat));
    let mut pre_act = layer.ffn.w1.dot(&half);
    add_bias(&mut pre_act, &layer.ffn.b1);
    let mut act = pre_act.clone();
    act.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(LayerCache {
        input: x.clone(),
        heads,
        concat,
        half,
        pre_act,
        act,
    })
}

fn layer_output(layer: &LayerParams, cache: &LayerCache) -> Matrix {
    let mut out = cache.half.add(&layer.ffn.w2.dot(&cache.act));
    add_bias(&mut out, &layer.ffn.b2);
    out
}

/// Embedding → layers → readout, caching every intermediate.
pub fn forward(params: &TransformerParams, x: &Matrix) -> Result<ForwardCache> {
    if x.rows() != params.token_dim() {
        return Err(Error::shape(format!(
            "input has {} rows, model expects {}",
            x.rows(),
            params.token_dim()
        )));
    }
    if x.cols() == 0 {
        return Err(Error::shape("empty sequence"));
    }
    let mut h = params.w_e.dot(x);
    add_bias(&mut h, &params.b_e);
    if params.positional == PositionalEncoding::Sinusoidal {
        h = h.add(&sinusoidal_table(params.model_dim(), x.cols()));
    }
    let embedded = h.clone();
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let cache = layer_forward(layer, &h)?;
        h = layer_output(layer, &cache);
        layers.push(cache);
    }
    let mut output = params.w_r.dot(&h);
    add_bias(&mut output, &params.b_r);
    if !output.is_finite() {
        return Err(Error::numerical("non-finite model output"));
    }
    Ok(ForwardCache {
        input: x.clone(),
        embedded,
        layers,
        last_hidden: h,
        output,
    })
}

/// Output only.
pub fn predict(params: &TransformerParams, x: &Matrix) -> Result<Matrix> {
    Ok(forward(params, x)?.output)
}

// ---------------------------------------------------------------------------
// Loss and gradients
// ---------------------------------------------------------------------------

fn check_targets(inputs: &[Matrix], targets: &[Matrix], mask: Option<&[Vec<bool>]>) -> Result<()> {
    if inputs.len() != targets.len() {
        return Err(Error::shape("inputs and targets differ in count"));
    }
    if let Some(m) = mask {
        if m.len() != inputs.len() || m.iter().zip(inputs).any(|(mi, x)| mi.len() != x.cols()) {
            return Err(Error::shape("mask does not match sequence lengths"));
        }
    }
    Ok(())
}

fn masked_count(inputs: &[Matrix], mask: Option<&[Vec<bool>]>, d: usize) -> usize {
    match mask {
        Some(m) => m.iter().map(|mi| mi.iter().filter(|b| **b).count()).sum::<usize>() * d,
        None => inputs.iter().map(|x| x.cols()).sum::<usize>() * d,
    }
}

/// Mean squared error over masked positions, without gradients.
pub fn loss(
    params: &TransformerParams,
    inputs: &[Matrix],
    targets: &[Matrix],
    mask: Option<&[Vec<bool>]>,
) -> Result<f64> {
    check_targets(inputs, targets, mask)?;
    let n = masked_count(inputs, mask, params.token_dim());
    if n == 0 {
        return Err(Error::config("mask selects no positions"));
    }
    let mut parts = Vec::with_capacity(inputs.len());
    for (i, (x, y)) in inputs.iter().zip(targets).enumerate() {
        let out = predict(params, x)?;
        if out.shape() != y.shape() {
            return Err(Error::shape("target shape differs from output"));
        }
        let mut s = 0.0;
        for t in 0..out.cols() {
            if mask.map_or(true, |m| m[i][t]) {
                for r in 0..out.rows() {
                    s += (out[(r, t)] - y[(r, t)]).powi(2);
                }
            }
        }
        parts.push(s);
    }
    let value = pairwise_sum(&parts) / n as f64;
    if !value.is_finite() {
        return Err(Error::numerical("non-finite loss"));
    }
    Ok(value)
}

/// MSE over masked positions and its gradient for every trainable tensor.
///
/// Samples are processed in order and their gradients summed in that order.
pub fn loss_and_grads(
    params: &TransformerParams,
    inputs: &[Matrix],
    targets: &[Matrix],
    mask: Option<&[Vec<bool>]>,
) -> Result<(f64, TransformerParams)> {
    check_targets(inputs, targets, mask)?;
    let n = masked_count(inputs, mask, params.token_dim());
    if n == 0 {
        return Err(Error::config("mask selects no positions"));
    }
    let scale = 1.0 / n as f64;
    let mut grads = params.zeros_like();
    let mut parts = Vec::with_capacity(inputs.len());
    for (i, (x, y)) in inputs.iter().zip(targets).enumerate() {
        let cache = forward(params, x)?;
        let out = &cache.output;
        if out.shape() != y.shape() {
            return Err(Error::shape("target shape differs from output"));
        }
        let mut dy = Matrix::zeros(out.rows(), out.cols());
        let mut s = 0.0;
        for t in 0..out.cols() {
            if mask.map_or(true, |m| m[i][t]) {
                for r in 0..out.rows() {
                    let e = out[(r, t)] - y[(r, t)];
                    s += e * e;
                    dy[(r, t)] = 2.0 * e * scale;
                }
            }
        }
        parts.push(s);
        backward(params, &cache, &dy, &mut grads);
    }
    let value = pairwise_sum(&parts) * scale;
    if !value.is_finite() || grads.flat().iter().any(|g| !g.is_finite()) {
        return Err(Error::numerical("non-finite loss or gradient"));
    }
    Ok((value, grads))
}

/// Accumulates into `grads` the gradient for one sample given `dL/dY`.
pub fn backward(params: &TransformerParams, cache: &ForwardCache, dy: &Matrix, grads: &mut TransformerParams) {
    grads.w_r.axpy(1.0, &dy.dot_t(&cache.last_hidden));
    row_sums_into(&mut grads.b_r, dy);
    let mut dh = params.w_r.t_dot(dy);

    for (li, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        let g = &mut grads.layers[li];

        // FFN
        let mut dhalf = dh.clone();
        g.ffn.w2.axpy(1.0, &dh.dot_t(&lc.act));
        row_sums_into(&mut g.ffn.b2, &dh);
        let mut dpre = layer.ffn.w2.t_dot(&dh);
        for (d, &p) in dpre.data_mut().iter_mut().zip(lc.pre_act.data()) {
            if p <= 0.0 {
                *d = 0.0;
            }
        }
        g.ffn.w1.axpy(1.0, &dpre.dot_t(&lc.half));
        row_sums_into(&mut g.ffn.b1, &dpre);
        dhalf.axpy(1.0, &layer.ffn.w1.t_dot(&dpre));

        // attention
        let mut dx = dhalf.clone();
        g.w_o.axpy(1.0, &dhalf.dot_t(&lc.concat));
        let dconcat = layer.w_o.t_dot(&dhalf);
        let offsets = layer.offsets();
        for (hi, h) in layer.heads.iter().enumerate() {
            let hc = &lc.heads[hi];
            let dh_rows = h.dim();
            let dout = dconcat.row_block(offsets[hi], offsets[hi] + dh_rows);
            let dv = dout.dot_t(&hc.scores);
            let ds = hc.v.t_dot(&dout);
            let dz = softmax_backward(&hc.scores, &ds);
            let dq = hc.k.dot_t(&dz);
            let dk = hc.q.dot(&dz);
            let gh = &mut g.heads[hi];
            gh.w_q.axpy(1.0, &dq.dot_t(&lc.input));
            gh.w_k.axpy(1.0, &dk.dot_t(&lc.input));
            gh.w_v.axpy(1.0, &dv.dot_t(&lc.input));
            let len = dz.cols();
            let mut dslope = 0.0;
            for l in 0..len {
                for s in 0..=l {
                    dslope -= dz[(s, l)] * (l - s) as f64;
                }
            }
            gh.slope += dslope;
            dx.axpy(1.0, &h.w_q.t_dot(&dq));
            dx.axpy(1.0, &h.w_k.t_dot(&dk));
            dx.axpy(1.0, &h.w_v.t_dot(&dv));
        }
        dh = dx;
    }
    grads.w_e.axpy(1.0, &dh.dot_t(&cache.input));
    row_sums_into(&mut grads.b_e, &dh);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Optimizer {
    /// Plain minibatch gradient descent.
    Sgd,
    /// Adaptive moments with bias correction.
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

/// Loss history; index 0 holds the losses before any update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
}

/// Training split plus optional validation split.
pub struct TrainData<'a> {
    pub train_inputs: &'a [Matrix],
    pub train_targets: &'a [Matrix],
    pub val_inputs: &'a [Matrix],
    pub val_targets: &'a [Matrix],
}

const DIVERGENCE_FACTOR: f64 = 1e6;

/// Minibatch training with a shuffle order drawn from `rng` each epoch.
pub fn train(
    params: &TransformerParams,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<(TransformerParams, TrainHistory)> {
    params.validate()?;
    if data.train_inputs.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::config("batch_size and lr must be positive"));
    }
    let has_val = !data.val_inputs.is_empty();
    let eval_val = |p: &TransformerParams| -> Result<f64> {
        if has_val {
            loss(p, data.val_inputs, data.val_targets, None)
        } else {
            loss(p, data.train_inputs, data.train_targets, None)
        }
    };
    let mut p = params.clone();
    let initial = loss(&p, data.train_inputs, data.train_targets, None)?;
    let v0 = eval_val(&p)?;
    let mut history = TrainHistory {
        train_loss: vec![initial],
        val_loss: vec![v0],
        best_val_loss: v0,
        best_epoch: 0,
    };
    let mut order: Vec<usize> = (0..data.train_inputs.len()).collect();
    let mut r = rng.rng();
    let n_params = p.num_trainable();
    let mut m1 = vec![0.0; n_params];
    let mut m2 = vec![0.0; n_params];
    let mut step = 0i32;
    let limit = DIVERGENCE_FACTOR * initial.max(f64::MIN_POSITIVE);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut r);
        let mut batch_losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<Matrix> = chunk.iter().map(|&i| data.train_inputs[i].clone()).collect();
            let ys: Vec<Matrix> = chunk.iter().map(|&i| data.train_targets[i].clone()).collect();
            let (l, g) = loss_and_grads(&p, &xs, &ys, None)?;
            if !l.is_finite() || l > limit {
                return Err(Error::numerical(format!(
                    "training diverged at epoch {epoch}: loss {l:.3e} exceeds {DIVERGENCE_FACTOR:.0e} x initial {initial:.3e}"
                )));
            }
            batch_losses.push(l * chunk.len() as f64);
            match cfg.optimizer {
                Optimizer::Sgd => p.add_scaled(-cfg.lr, &g),
                Optimizer::Adam { beta1, beta2, eps } => {
                    step += 1;
                    let gflat = g.flat();
                    let mut pflat = p.flat();
                    let c1 = 1.0 - beta1.powi(step);
                    let c2 = 1.0 - beta2.powi(step);
                    for i in 0..n_params {
                        m1[i] = beta1 * m1[i] + (1.0 - beta1) * gflat[i];
                        m2[i] = beta2 * m2[i] + (1.0 - beta2) * gflat[i] * gflat[i];
                        let mh = m1[i] / c1;
                        let vh = m2[i] / c2;
                        pflat[i] -= cfg.lr * mh / (vh.sqrt() + eps);
                    }
                    p.set_flat(&pflat);
                }
            }
            if p.train_slopes {
                for layer in &mut p.layers {
                    for h in &mut layer.heads {
                        h.slope = h.slope.max(0.0);
                    }
                }
            }
        }
        let train_loss = pairwise_sum(&batch_losses) / data.train_inputs.len() as f64;
        let val = eval_val(&p)?;
        history.train_loss.push(train_loss);
        history.val_loss.push(val);
        if val < history.best_val_loss {
            history.best_val_loss = val;
            history.best_epoch = epoch;
        }
    }
    Ok((p, history))
}

/// Random model for tests and examples.
pub fn random_model<R: Rng + ?Sized>(
    token_dim: usize,
    model_dim: usize,
    head_dims: &[usize],
    layers: usize,
    ffn_width: usize,
    rng: &mut R,
) -> TransformerParams {
    let mut plan_groups = Vec::new();
    for &dh in head_dims {
        plan_groups.push(crate::allocation::HeadGroup { heads: 1, dim: dh });
    }
    let layout = grouped_head_layout(&AllocationPlan::new(plan_groups), model_dim).expect("fits");
    let layouts = vec![layout; layers];
    let mut p = TransformerParams::zeros(token_dim, model_dim, &layouts, ffn_width, PositionalEncoding::Alibi);
    {
        let mut fill = |m: &mut Matrix| *m = Matrix::gaussian(m.rows(), m.cols(), 0.5, rng);
        fill(&mut p.w_e);
        fill(&mut p.w_r);
        for layer in &mut p.layers {
            for h in &mut layer.heads {
                fill(&mut h.w_q);
                fill(&mut h.w_k);
                fill(&mut h.w_v);
            }
            fill(&mut layer.w_o);
            fill(&mut layer.ffn.w1);
            fill(&mut layer.ffn.w2);
        }
    }
    let mut fill_vec = |v: &mut Vec<f64>| {
        for x in v.iter_mut() {
            *x = 0.1 * rng.random_range(-1.0..1.0);
        }
    };
    fill_vec(&mut p.b_e);
    fill_vec(&mut p.b_r);
    for layer in &mut p.layers {
        fill_vec(&mut layer.ffn.b1);
        fill_vec(&mut layer.ffn.b2);
    }
    for layer in &mut p.layers {
        for h in &mut layer.heads {
            h.slope = rng.random_range(0.1..1.0);
        }
    }
    p
}
