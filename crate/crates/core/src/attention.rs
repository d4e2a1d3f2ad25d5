//! Thresholded cross-attention.
//!
//! Each row of the scaled score matrix keeps the shortest run of its highest
//! scores whose softmax mass reaches a threshold `T`; the rest are dropped
//! before the final softmax. `T = 1` keeps every entry and reduces to plain
//! scaled dot-product cross-attention.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::par::{map_indexed, Exec};
use crate::rng::{fan_in_uniform, TensorRng};
use crate::tensor::ops::{
    layer_norm_backward, layer_norm_parts, linear, linear_backward, matmul, matmul_backward,
    relu, relu_backward, softmax_rows, softmax_rows_backward,
};
use crate::tensor::{ParamSet, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.7;
pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_D_MODEL: usize = 64;
pub const FFN_EXPANSION: usize = 2;
pub const NORM_EPS: f64 = 1e-5;

/// Bounds of the learnable threshold.
pub const LEARNED_T_MIN: f64 = 0.05;
pub const LEARNED_T_MAX: f64 = 1.0;

/// Slack when comparing a cumulative mass against `T`, so that masses equal
/// to `T` up to rounding (e.g. seven of ten uniform entries at `T = 0.7`)
/// count as reaching it.
const MASS_EPS: f64 = 1e-12;

/// What the cumulative sum runs over when selecting retained entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cumulative {
    /// Softmax-normalized row mass.
    #[default]
    Mass,
    /// Raw scaled scores.
    Raw,
}

/// How dropped entries enter the final softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropMode {
    /// Dropped logits become `-inf`; kept weights renormalize.
    #[default]
    NegInf,
    /// Dropped logits become `0`.
    ZeroLogit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImcOptions {
    pub threshold: f64,
    pub cumulative: Cumulative,
    pub drop: DropMode,
}

impl Default for ImcOptions {
    fn default() -> Self {
        ImcOptions {
            threshold: DEFAULT_THRESHOLD,
            cumulative: Cumulative::Mass,
            drop: DropMode::NegInf,
        }
    }
}

impl ImcOptions {
    pub fn with_threshold(threshold: f64) -> Self {
        ImcOptions {
            threshold,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_threshold(self.threshold)
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("threshold T must lie in (0, 1], got {t}")))
    }
}

/// A threshold that can be trained, clamped to `(0.05, 1.0]`.
///
/// The retained set is piecewise constant in `T`, so no gradient reaches it
/// through the mask; updates come from whatever external signal drives it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnableThreshold {
    value: f64,
}

impl Default for LearnableThreshold {
    fn default() -> Self {
        LearnableThreshold {
            value: DEFAULT_THRESHOLD,
        }
    }
}

impl LearnableThreshold {
    pub fn new(value: f64) -> Self {
        let mut t = LearnableThreshold::default();
        t.set(value);
        t
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn set(&mut self, value: f64) {
        let lo = f64::from_bits(LEARNED_T_MIN.to_bits() + 1);
        self.value = if value.is_nan() {
            DEFAULT_THRESHOLD
        } else {
            value.clamp(lo, LEARNED_T_MAX)
        };
    }

    pub fn step(&mut self, delta: f64) {
        self.set(self.value + delta);
    }
}

/// Boolean keep-mask over an `m×n` score matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetainMask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl RetainMask {
    pub fn all(rows: usize, cols: usize) -> Self {
        RetainMask {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<bool>>) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if m == 0 || n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Parameter("retain mask rows must be non-empty and equal length".into()));
        }
        if rows.iter().any(|r| !r.iter().any(|&k| k)) {
            return Err(Error::Parameter("every retain-mask row must keep an entry".into()));
        }
        Ok(RetainMask {
            rows: m,
            cols: n,
            keep: rows.concat(),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.keep[i * self.cols..(i + 1) * self.cols]
    }

    pub fn retained_in_row(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&k| k).count()
    }

    pub fn count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Scaled scores together with their per-row retention decision.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScores {
    pub scores: Tensor,
    pub mask: RetainMask,
    pub threshold: f64,
    /// Score of the last retained element in each row.
    pub cutoffs: Vec<f64>,
}

impl AttentionScores {
    /// Logits fed to the final softmax, with dropped entries replaced.
    pub fn masked_logits(&self, drop: DropMode) -> Tensor {
        apply_mask(&self.scores, &self.mask, drop)
    }
}

fn apply_mask(scores: &Tensor, mask: &RetainMask, drop: DropMode) -> Tensor {
    let fill = match drop {
        DropMode::NegInf => f64::NEG_INFINITY,
        DropMode::ZeroLogit => 0.0,
    };
    Tensor::from_fn(scores.shape(), |i| {
        if mask.keep[i] {
            scores.data()[i]
        } else {
            fill
        }
    })
}

/// Column indices of `row` by descending score; equal scores keep the lower
/// index first.
pub fn descending_order(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    idx
}

/// Keep-flags and cutoff score for a single row.
pub fn retain_row(row: &[f64], threshold: f64, cumulative: Cumulative) -> (Vec<bool>, f64) {
    let n = row.len();
    let order = descending_order(row);
    let weights: Vec<f64> = match cumulative {
        Cumulative::Mass => {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        }
        Cumulative::Raw => row.to_vec(),
    };
    let keep_count = if cumulative == Cumulative::Mass && threshold >= 1.0 {
        n
    } else {
        let mut acc = 0.0;
        order
            .iter()
            .position(|&j| {
                acc += weights[j];
                acc >= threshold - MASS_EPS
            })
            .map_or(n, |p| p + 1)
    };
    let mut keep = vec![false; n];
    for &j in &order[..keep_count] {
        keep[j] = true;
    }
    (keep, row[order[keep_count - 1]])
}

/// Per-row retention over the scaled score matrix `scores` with softmax-mass
/// accumulation.
pub fn imc_mask(scores: &Tensor, threshold: f64) -> Result<AttentionScores> {
    imc_mask_with(scores, &ImcOptions::with_threshold(threshold))
}

pub fn imc_mask_with(scores: &Tensor, opts: &ImcOptions) -> Result<AttentionScores> {
    opts.validate()?;
    let (m, n) = scores.dims2()?;
    if !scores.all_finite() {
        return Err(Error::Evaluation("attention scores must be finite".into()));
    }
    let rows = map_indexed(Exec::default().for_work(m * n * 16), m, |i| {
        retain_row(scores.row(i), opts.threshold, opts.cumulative)
    });
    let mut keep = Vec::with_capacity(m * n);
    let mut cutoffs = Vec::with_capacity(m);
    for (k, c) in rows {
        keep.extend(k);
        cutoffs.push(c);
    }
    Ok(AttentionScores {
        scores: scores.clone(),
        mask: RetainMask { rows: m, cols: n, keep },
        threshold: opts.threshold,
        cutoffs,
    })
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<usize> {
    let (_, d) = q.dims2()?;
    let (n, dk) = k.dims2()?;
    let (nv, _) = v.dims2()?;
    if d == 0 {
        return dim_err("attention", q.shape(), k.shape());
    }
    if dk != d {
        return dim_err("attention", q.shape(), k.shape());
    }
    if nv != n {
        return dim_err("attention", k.shape(), v.shape());
    }
    Ok(d)
}

/// `QKᵀ/√d`.
pub fn scaled_scores(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (_, d) = q.dims2()?;
    Ok(matmul(q, &k.transpose()?)?.scale(1.0 / (d as f64).sqrt()))
}

/// `softmax(QKᵀ/√d)·V`.
pub fn cross_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_qkv(q, k, v)?;
    matmul(&softmax_rows(&scaled_scores(q, k)?)?, v)
}

/// Single-head forward intermediates.
#[derive(Debug, Clone)]
pub struct ImcForward {
    pub scores: AttentionScores,
    /// Row-stochastic attention weights after masking.
    pub weights: Tensor,
    pub output: Tensor,
}

/// Single-head thresholded attention with default options at threshold `t`.
pub fn imc(q: &Tensor, k: &Tensor, v: &Tensor, t: f64) -> Result<Tensor> {
    Ok(imc_forward(q, k, v, &ImcOptions::with_threshold(t), None)?.output)
}

/// Single-head forward. With `frozen`, that mask replaces the threshold
/// selection (used for gradient checks at a fixed retained set).
pub fn imc_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    opts: &ImcOptions,
    frozen: Option<&RetainMask>,
) -> Result<ImcForward> {
    check_qkv(q, k, v)?;
    let e = scaled_scores(q, k)?;
    let scores = match frozen {
        Some(mask) => {
            let (m, n) = e.dims2()?;
            if mask.shape() != (m, n) {
                return dim_err("imc", &[m, n], &[mask.rows, mask.cols]);
            }
            let cutoffs = (0..m)
                .map(|i| {
                    (0..n)
                        .filter(|&j| mask.get(i, j))
                        .map(|j| e.at2(i, j))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            AttentionScores {
                scores: e,
                mask: mask.clone(),
                threshold: opts.threshold,
                cutoffs,
            }
        }
        None => imc_mask_with(&e, opts)?,
    };
    let weights = softmax_rows(&scores.masked_logits(opts.drop))?;
    let output = matmul(&weights, v)?;
    Ok(ImcForward {
        scores,
        weights,
        output,
    })
}

/// Gradients `(dQ, dK, dV)` of a single head at its recorded mask.
pub fn imc_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    fwd: &ImcForward,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (dw, dv) = matmul_backward(&fwd.weights, v, g)?;
    let dlogits = softmax_rows_backward(&fwd.weights, &dw)?;
    let (_, d) = q.dims2()?;
    let inv = 1.0 / (d as f64).sqrt();
    let mask = &fwd.scores.mask;
    let de = Tensor::from_fn(dlogits.shape(), |i| {
        if mask.keep[i] {
            dlogits.data()[i] * inv
        } else {
            0.0
        }
    });
    let dq = matmul(&de, k)?;
    let dk = matmul(&de.transpose()?, q)?;
    Ok((dq, dk, dv))
}

/// Weights of one decoder-style block: multi-head projections, a two-layer
/// ReLU feed-forward network and two layer norms.
#[derive(Debug, Clone, PartialEq)]
pub struct StenParams {
    pub heads: usize,
    pub q_proj: Tensor,
    pub k_proj: Tensor,
    pub v_proj: Tensor,
    pub out_proj: Tensor,
    pub ffn1_weight: Tensor,
    pub ffn1_bias: Tensor,
    pub ffn2_weight: Tensor,
    pub ffn2_bias: Tensor,
    pub norm1_scale: Tensor,
    pub norm1_shift: Tensor,
    pub norm2_scale: Tensor,
    pub norm2_shift: Tensor,
}

const STEN_NAMES: [&str; 12] = [
    "q_proj",
    "k_proj",
    "v_proj",
    "out_proj",
    "ffn1.weight",
    "ffn1.bias",
    "ffn2.weight",
    "ffn2.bias",
    "norm1.scale",
    "norm1.shift",
    "norm2.scale",
    "norm2.shift",
];

impl StenParams {
    /// Seeded fan-in uniform projections; norms start at scale 1, shift 0.
    pub fn init(d_model: usize, heads: usize, rng: &mut TensorRng) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Parameter(format!(
                "d_model {d_model} must be divisible by head count {heads}"
            )));
        }
        let hidden = FFN_EXPANSION * d_model;
        Ok(StenParams {
            heads,
            q_proj: fan_in_uniform(rng, &[d_model, d_model], d_model),
            k_proj: fan_in_uniform(rng, &[d_model, d_model], d_model),
            v_proj: fan_in_uniform(rng, &[d_model, d_model], d_model),
            out_proj: fan_in_uniform(rng, &[d_model, d_model], d_model),
            ffn1_weight: fan_in_uniform(rng, &[d_model, hidden], d_model),
            ffn1_bias: fan_in_uniform(rng, &[hidden], d_model),
            ffn2_weight: fan_in_uniform(rng, &[hidden, d_model], hidden),
            ffn2_bias: fan_in_uniform(rng, &[d_model], hidden),
            norm1_scale: Tensor::full(&[d_model], 1.0),
            norm1_shift: Tensor::zeros(&[d_model]),
            norm2_scale: Tensor::full(&[d_model], 1.0),
            norm2_shift: Tensor::zeros(&[d_model]),
        })
    }

    pub fn d_model(&self) -> usize {
        self.q_proj.shape()[0]
    }

    pub fn d_head(&self) -> usize {
        self.d_model() / self.heads
    }

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.q_proj,
            &self.k_proj,
            &self.v_proj,
            &self.out_proj,
            &self.ffn1_weight,
            &self.ffn1_bias,
            &self.ffn2_weight,
            &self.ffn2_bias,
            &self.norm1_scale,
            &self.norm1_shift,
            &self.norm2_scale,
            &self.norm2_shift,
        ]
    }

    pub fn to_param_set(&self) -> ParamSet {
        STEN_NAMES
            .iter()
            .zip(self.tensors())
            .fold(ParamSet::new(), |ps, (n, t)| ps.with(*n, t.clone()))
    }

    pub fn from_param_set(ps: &ParamSet, heads: usize) -> Result<Self> {
        let g = |n: &str| ps.get(n).cloned();
        let p = StenParams {
            heads,
            q_proj: g("q_proj")?,
            k_proj: g("k_proj")?,
            v_proj: g("v_proj")?,
            out_proj: g("out_proj")?,
            ffn1_weight: g("ffn1.weight")?,
            ffn1_bias: g("ffn1.bias")?,
            ffn2_weight: g("ffn2.weight")?,
            ffn2_bias: g("ffn2.bias")?,
            norm1_scale: g("norm1.scale")?,
            norm1_shift: g("norm1.shift")?,
            norm2_scale: g("norm2.scale")?,
            norm2_shift: g("norm2.shift")?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Parameter(format!(
                "d_model {d} must be divisible by head count {}",
                self.heads
            )));
        }
        let hidden = self.ffn1_weight.shape().get(1).copied().unwrap_or(0);
        let expected: [&[usize]; 12] = [
            &[d, d],
            &[d, d],
            &[d, d],
            &[d, d],
            &[d, hidden],
            &[hidden],
            &[hidden, d],
            &[d],
            &[d],
            &[d],
            &[d],
            &[d],
        ];
        for ((name, t), shape) in STEN_NAMES.iter().zip(self.tensors()).zip(expected) {
            if t.shape() != shape {
                return Err(Error::Dimension {
                    op: name,
                    lhs: shape.to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Everything the backward pass of [`sten_forward`] needs.
#[derive(Debug, Clone)]
pub struct StenCache {
    pub query: Tensor,
    pub kv: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub heads: Vec<ImcForward>,
    pub concat: Tensor,
    pub norm1_xhat: Tensor,
    pub norm1_inv_std: Vec<f64>,
    pub x: Tensor,
    pub hidden_pre: Tensor,
    pub hidden: Tensor,
    pub norm2_xhat: Tensor,
    pub norm2_inv_std: Vec<f64>,
    pub output: Tensor,
}

impl StenCache {
    /// The per-head retain masks chosen by the forward pass.
    pub fn masks(&self) -> Vec<RetainMask> {
        self.heads.iter().map(|h| h.scores.mask.clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct StenGrads {
    pub params: ParamSet,
    pub query: Tensor,
    pub kv: Tensor,
}

/// Multi-head thresholded attention: project, split into heads, attend per
/// head, concatenate, project out.
pub fn multi_head_imc(query: &Tensor, kv: &Tensor, params: &StenParams, opts: &ImcOptions) -> Result<Tensor> {
    let (heads, concat, _, _, _) = multi_head_parts(query, kv, params, opts, None)?;
    drop(heads);
    matmul(&concat, &params.out_proj)
}

type HeadParts = (Vec<ImcForward>, Tensor, Tensor, Tensor, Tensor);

fn multi_head_parts(
    query: &Tensor,
    kv: &Tensor,
    params: &StenParams,
    opts: &ImcOptions,
    frozen: Option<&[RetainMask]>,
) -> Result<HeadParts> {
    opts.validate()?;
    let d = params.d_model();
    let (_, dq) = query.dims2()?;
    let (_, dkv) = kv.dims2()?;
    if dq != d || dkv != d {
        return dim_err("sten_block", query.shape(), kv.shape());
    }
    if let Some(f) = frozen {
        if f.len() != params.heads {
            return Err(Error::Parameter(format!(
                "{} frozen masks for {} heads",
                f.len(),
                params.heads
            )));
        }
    }
    let q = matmul(query, &params.q_proj)?;
    let k = matmul(kv, &params.k_proj)?;
    let v = matmul(kv, &params.v_proj)?;
    let dh = params.d_head();
    let heads = map_indexed(Exec::default(), params.heads, |h| {
        let (a, b) = (h * dh, (h + 1) * dh);
        imc_forward(
            &q.columns(a, b)?,
            &k.columns(a, b)?,
            &v.columns(a, b)?,
            opts,
            frozen.map(|f| &f[h]),
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let outs: Vec<Tensor> = heads.iter().map(|h| h.output.clone()).collect();
    let concat = Tensor::hconcat(&outs)?;
    Ok((heads, concat, q, k, v))
}

/// `X = Norm(IMC(Q,K,V) + query)`, `Y = Norm(FFN(X) + X)`.
pub fn sten_block(query: &Tensor, kv: &Tensor, params: &StenParams, opts: &ImcOptions) -> Result<Tensor> {
    Ok(sten_forward(query, kv, params, opts, None)?.output)
}

pub fn sten_forward(
    query: &Tensor,
    kv: &Tensor,
    params: &StenParams,
    opts: &ImcOptions,
    frozen: Option<&[RetainMask]>,
) -> Result<StenCache> {
    let (heads, concat, q, k, v) = multi_head_parts(query, kv, params, opts, frozen)?;
    let attended = matmul(&concat, &params.out_proj)?;
    let (x, norm1_xhat, norm1_inv_std) = layer_norm_parts(
        &attended.add(query)?,
        &params.norm1_scale,
        &params.norm1_shift,
        NORM_EPS,
    )?;
    let hidden_pre = linear(&x, &params.ffn1_weight, &params.ffn1_bias)?;
    let hidden = relu(&hidden_pre);
    let ffn = linear(&hidden, &params.ffn2_weight, &params.ffn2_bias)?;
    let (output, norm2_xhat, norm2_inv_std) =
        layer_norm_parts(&ffn.add(&x)?, &params.norm2_scale, &params.norm2_shift, NORM_EPS)?;
    Ok(StenCache {
        query: query.clone(),
        kv: kv.clone(),
        q,
        k,
        v,
        heads,
        concat,
        norm1_xhat,
        norm1_inv_std,
        x,
        hidden_pre,
        hidden,
        norm2_xhat,
        norm2_inv_std,
        output,
    })
}

/// Backward of [`sten_forward`] with the retain masks held fixed.
pub fn sten_backward(cache: &StenCache, params: &StenParams, g: &Tensor) -> Result<StenGrads> {
    let (dr2, dn2_scale, dn2_shift) =
        layer_norm_backward(&cache.norm2_xhat, &cache.norm2_inv_std, &params.norm2_scale, g)?;
    let (dhidden, dw2, db2) = linear_backward(&cache.hidden, &params.ffn2_weight, &dr2)?;
    let dpre = relu_backward(&cache.hidden_pre, &dhidden)?;
    let (dx_ffn, dw1, db1) = linear_backward(&cache.x, &params.ffn1_weight, &dpre)?;
    let dx = dr2.add(&dx_ffn)?;
    let (dr1, dn1_scale, dn1_shift) =
        layer_norm_backward(&cache.norm1_xhat, &cache.norm1_inv_std, &params.norm1_scale, &dx)?;
    let (dconcat, dwo) = matmul_backward(&cache.concat, &params.out_proj, &dr1)?;

    let dh = params.d_head();
    let per_head = (0..params.heads)
        .map(|h| {
            let (a, b) = (h * dh, (h + 1) * dh);
            imc_backward(
                &cache.q.columns(a, b)?,
                &cache.k.columns(a, b)?,
                &cache.v.columns(a, b)?,
                &cache.heads[h],
                &dconcat.columns(a, b)?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let cat = |sel: fn(&(Tensor, Tensor, Tensor)) -> &Tensor| {
        Tensor::hconcat(&per_head.iter().map(|p| sel(p).clone()).collect::<Vec<_>>())
    };
    let dq = cat(|p| &p.0)?;
    let dk = cat(|p| &p.1)?;
    let dv = cat(|p| &p.2)?;

    let (dquery_proj, dwq) = matmul_backward(&cache.query, &params.q_proj, &dq)?;
    let (dkv_k, dwk) = matmul_backward(&cache.kv, &params.k_proj, &dk)?;
    let (dkv_v, dwv) = matmul_backward(&cache.kv, &params.v_proj, &dv)?;

    let grads = ParamSet::new()
        .with("q_proj", dwq)
        .with("k_proj", dwk)
        .with("v_proj", dwv)
        .with("out_proj", dwo)
        .with("ffn1.weight", dw1)
        .with("ffn1.bias", db1)
        .with("ffn2.weight", dw2)
        .with("ffn2.bias", db2)
        .with("norm1.scale", dn1_scale)
        .with("norm1.shift", dn1_shift)
        .with("norm2.scale", dn2_scale)
        .with("norm2.shift", dn2_shift);
    Ok(StenGrads {
        params: grads,
        query: dr1.add(&dquery_proj)?,
        kv: dkv_k.add(&dkv_v)?,
    })
}
