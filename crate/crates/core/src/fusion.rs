//! Attention-guided fusion.
//!
//! Spatial fusion mixes a global (attention) branch and a local (CNN) branch
//! with per-pixel sigmoid weights. Channel fusion mixes a mixed template and
//! the original template with per-channel sigmoid weights from
//! compression-free 1-D channel attention.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::rng::{fan_in_uniform, TensorRng};
use crate::tensor::ops::{
    conv1d_channels, conv1d_channels_backward, conv2d, conv2d_backward, pool_over_channels,
    pool_over_channels_backward, sigmoid, sigmoid_backward, PoolMode,
};
use crate::tensor::{ParamSet, Tensor};

pub const CHANNEL_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    #[default]
    Attention,
    Sum,
    Concat,
}

/// What the two 1-D channel convolutions read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelInput {
    /// Both read `t_m + t_o`.
    #[default]
    Fused,
    /// Each reads its own template.
    PerBranch,
}

/// Global-branch and local-branch feature maps of identical `C×H×W` shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBranchFeatures {
    pub global: Tensor,
    pub local: Tensor,
}

impl DualBranchFeatures {
    pub fn new(global: Tensor, local: Tensor) -> Result<Self> {
        global.dims3()?;
        if global.shape() != local.shape() {
            return dim_err("dual_branch", global.shape(), local.shape());
        }
        Ok(DualBranchFeatures { global, local })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFusionWeights {
    /// `1×H×W` weight on the global branch.
    pub alpha: Tensor,
    /// `1×H×W` weight on the local branch.
    pub beta: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplatePair {
    pub mixed: Tensor,
    pub original: Tensor,
}

impl TemplatePair {
    pub fn new(mixed: Tensor, original: Tensor) -> Result<Self> {
        if mixed.rank() != 1 || mixed.shape() != original.shape() {
            return dim_err("template_pair", mixed.shape(), original.shape());
        }
        Ok(TemplatePair { mixed, original })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelFusionWeights {
    pub alpha: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsfamParams {
    /// `C/2×C×1×1` squeeze of the global branch.
    pub squeeze_global: Tensor,
    /// `C/2×C×1×1` squeeze of the local branch.
    pub squeeze_local: Tensor,
    /// `1×C×3×3` convolutional spatial response.
    pub spatial: Tensor,
    /// `2×3×3×3` map from `[conv, max, avg]` to the two branch logits.
    pub mix: Tensor,
}

fn even_channels(c: usize) -> Result<()> {
    if c % 2 != 0 || c == 0 {
        return Err(Error::Parameter(format!(
            "spatial fusion needs an even channel count, got {c}"
        )));
    }
    Ok(())
}

impl DsfamParams {
    pub fn init(channels: usize, rng: &mut TensorRng) -> Result<Self> {
        even_channels(channels)?;
        let half = channels / 2;
        Ok(DsfamParams {
            squeeze_global: fan_in_uniform(rng, &[half, channels, 1, 1], channels),
            squeeze_local: fan_in_uniform(rng, &[half, channels, 1, 1], channels),
            spatial: fan_in_uniform(rng, &[1, channels, 3, 3], channels * 9),
            mix: fan_in_uniform(rng, &[2, 3, 3, 3], 27),
        })
    }

    pub fn zeros(channels: usize) -> Result<Self> {
        even_channels(channels)?;
        let half = channels / 2;
        Ok(DsfamParams {
            squeeze_global: Tensor::zeros(&[half, channels, 1, 1]),
            squeeze_local: Tensor::zeros(&[half, channels, 1, 1]),
            spatial: Tensor::zeros(&[1, channels, 3, 3]),
            mix: Tensor::zeros(&[2, 3, 3, 3]),
        })
    }

    pub fn channels(&self) -> usize {
        self.squeeze_global.shape()[1]
    }

    pub fn to_param_set(&self) -> ParamSet {
        ParamSet::new()
            .with("squeeze_global", self.squeeze_global.clone())
            .with("squeeze_local", self.squeeze_local.clone())
            .with("spatial", self.spatial.clone())
            .with("mix", self.mix.clone())
    }

    pub fn from_param_set(ps: &ParamSet) -> Result<Self> {
        let p = DsfamParams {
            squeeze_global: ps.get("squeeze_global")?.clone(),
            squeeze_local: ps.get("squeeze_local")?.clone(),
            spatial: ps.get("spatial")?.clone(),
            mix: ps.get("mix")?.clone(),
        };
        let c = p.channels();
        even_channels(c)?;
        let half = c / 2;
        for (t, s) in [
            (&p.squeeze_global, vec![half, c, 1, 1]),
            (&p.squeeze_local, vec![half, c, 1, 1]),
            (&p.spatial, vec![1, c, 3, 3]),
            (&p.mix, vec![2, 3, 3, 3]),
        ] {
            if t.shape() != s.as_slice() {
                return dim_err("dsfam_params", &s, t.shape());
            }
        }
        Ok(p)
    }
}

/// Channel-concatenation of the two squeezed branches (`C` channels).
pub fn dsfam_fuse_input(global: &Tensor, local: &Tensor, params: &DsfamParams) -> Result<Tensor> {
    let (c, _, _) = global.dims3()?;
    if global.shape() != local.shape() {
        return dim_err("dsfam_fuse_input", global.shape(), local.shape());
    }
    even_channels(c)?;
    if params.channels() != c {
        return dim_err("dsfam_fuse_input", global.shape(), params.squeeze_global.shape());
    }
    let g = conv2d(global, &params.squeeze_global, 0)?;
    let l = conv2d(local, &params.squeeze_local, 0)?;
    Tensor::concat0(&[&g, &l])
}

struct WeightParts {
    stacked: Tensor,
    gates: Tensor,
    weights: SpatialFusionWeights,
}

fn dsfam_weight_parts(fused: &Tensor, params: &DsfamParams) -> Result<WeightParts> {
    let conv = conv2d(fused, &params.spatial, 1)?;
    let max = pool_over_channels(fused, PoolMode::Max)?;
    let avg = pool_over_channels(fused, PoolMode::Avg)?;
    let stacked = Tensor::concat0(&[&conv, &max, &avg])?;
    let gates = sigmoid(&conv2d(&stacked, &params.mix, 1)?);
    let weights = SpatialFusionWeights {
        alpha: gates.slice0(0, 1)?,
        beta: gates.slice0(1, 2)?,
    };
    Ok(WeightParts {
        stacked,
        gates,
        weights,
    })
}

/// Per-pixel branch weights from the fused feature.
pub fn dsfam_weights(fused: &Tensor, params: &DsfamParams) -> Result<SpatialFusionWeights> {
    Ok(dsfam_weight_parts(fused, params)?.weights)
}

/// `F_m[c,h,w] = α[h,w]·F_t[c,h,w] + β[h,w]·F_c[c,h,w]`.
pub fn dsfam_apply(global: &Tensor, local: &Tensor, w: &SpatialFusionWeights) -> Result<Tensor> {
    let (_, h, wd) = global.dims3()?;
    if global.shape() != local.shape() {
        return dim_err("dsfam_apply", global.shape(), local.shape());
    }
    if w.alpha.shape() != [1, h, wd] || w.beta.shape() != [1, h, wd] {
        return dim_err("dsfam_apply", global.shape(), w.alpha.shape());
    }
    let hw = h * wd;
    let (a, b) = (w.alpha.data(), w.beta.data());
    Ok(Tensor::from_fn(global.shape(), |i| {
        a[i % hw] * global.data()[i] + b[i % hw] * local.data()[i]
    }))
}

/// Forward intermediates of the full spatial fusion.
#[derive(Debug, Clone)]
pub struct DsfamForward {
    pub fused: Tensor,
    pub weights: SpatialFusionWeights,
    pub output: Tensor,
    stacked: Tensor,
    gates: Tensor,
}

pub fn dsfam_forward(global: &Tensor, local: &Tensor, params: &DsfamParams) -> Result<DsfamForward> {
    let fused = dsfam_fuse_input(global, local, params)?;
    let WeightParts {
        stacked,
        gates,
        weights,
    } = dsfam_weight_parts(&fused, params)?;
    let output = dsfam_apply(global, local, &weights)?;
    Ok(DsfamForward {
        fused,
        weights,
        output,
        stacked,
        gates,
    })
}

/// Spatial fusion under the selected strategy. `Concat` yields `2C` channels.
pub fn dsfam(global: &Tensor, local: &Tensor, params: &DsfamParams, mode: FusionMode) -> Result<Tensor> {
    match mode {
        FusionMode::Attention => Ok(dsfam_forward(global, local, params)?.output),
        FusionMode::Sum => fuse_baseline(global, local, FusionMode::Sum),
        FusionMode::Concat => fuse_baseline(global, local, FusionMode::Concat),
    }
}

#[derive(Debug, Clone)]
pub struct DsfamGrads {
    pub params: ParamSet,
    pub global: Tensor,
    pub local: Tensor,
}

pub fn dsfam_backward(
    global: &Tensor,
    local: &Tensor,
    params: &DsfamParams,
    fwd: &DsfamForward,
    g: &Tensor,
) -> Result<DsfamGrads> {
    let (c, h, w) = global.dims3()?;
    let hw = h * w;
    let (a, b) = (fwd.weights.alpha.data(), fwd.weights.beta.data());
    let gd = g.data();
    let mut dglobal = Tensor::from_fn(global.shape(), |i| a[i % hw] * gd[i]);
    let mut dlocal = Tensor::from_fn(local.shape(), |i| b[i % hw] * gd[i]);
    let dgates = Tensor::from_fn(&[2, h, w], |i| {
        let (branch, p) = (i / hw, i % hw);
        let src = if branch == 0 { global } else { local };
        (0..c).map(|ch| gd[ch * hw + p] * src.data()[ch * hw + p]).sum()
    });
    let dlogits = sigmoid_backward(&fwd.gates, &dgates)?;
    let (dstacked, dmix) = conv2d_backward(&fwd.stacked, &params.mix, 1, &dlogits)?;
    let (dfused_conv, dspatial) =
        conv2d_backward(&fwd.fused, &params.spatial, 1, &dstacked.slice0(0, 1)?)?;
    let dfused = dfused_conv
        .add(&pool_over_channels_backward(&fwd.fused, PoolMode::Max, &dstacked.slice0(1, 2)?)?)?
        .add(&pool_over_channels_backward(&fwd.fused, PoolMode::Avg, &dstacked.slice0(2, 3)?)?)?;
    let half = c / 2;
    let (dg2, dsq_g) =
        conv2d_backward(global, &params.squeeze_global, 0, &dfused.slice0(0, half)?)?;
    let (dl2, dsq_l) =
        conv2d_backward(local, &params.squeeze_local, 0, &dfused.slice0(half, c)?)?;
    dglobal = dglobal.add(&dg2)?;
    dlocal = dlocal.add(&dl2)?;
    Ok(DsfamGrads {
        params: ParamSet::new()
            .with("squeeze_global", dsq_g)
            .with("squeeze_local", dsq_l)
            .with("spatial", dspatial)
            .with("mix", dmix),
        global: dglobal,
        local: dlocal,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcfamParams {
    pub kernel_mixed: Tensor,
    pub kernel_original: Tensor,
}

impl DcfamParams {
    pub fn init(rng: &mut TensorRng) -> Self {
        DcfamParams {
            kernel_mixed: fan_in_uniform(rng, &[CHANNEL_KERNEL], CHANNEL_KERNEL),
            kernel_original: fan_in_uniform(rng, &[CHANNEL_KERNEL], CHANNEL_KERNEL),
        }
    }

    pub fn zeros() -> Self {
        DcfamParams {
            kernel_mixed: Tensor::zeros(&[CHANNEL_KERNEL]),
            kernel_original: Tensor::zeros(&[CHANNEL_KERNEL]),
        }
    }

    pub fn to_param_set(&self) -> ParamSet {
        ParamSet::new()
            .with("kernel_mixed", self.kernel_mixed.clone())
            .with("kernel_original", self.kernel_original.clone())
    }

    pub fn from_param_set(ps: &ParamSet) -> Result<Self> {
        Ok(DcfamParams {
            kernel_mixed: ps.get("kernel_mixed")?.clone(),
            kernel_original: ps.get("kernel_original")?.clone(),
        })
    }
}

pub fn dcfam_weights(t: &TemplatePair, params: &DcfamParams, input: ChannelInput) -> Result<ChannelFusionWeights> {
    if t.mixed.shape() != t.original.shape() {
        return dim_err("dcfam", t.mixed.shape(), t.original.shape());
    }
    let (src_m, src_o) = match input {
        ChannelInput::Fused => {
            let f = t.mixed.add(&t.original)?;
            (f.clone(), f)
        }
        ChannelInput::PerBranch => (t.mixed.clone(), t.original.clone()),
    };
    Ok(ChannelFusionWeights {
        alpha: sigmoid(&conv1d_channels(&src_m, &params.kernel_mixed)?),
        beta: sigmoid(&conv1d_channels(&src_o, &params.kernel_original)?),
    })
}

/// `t_g = α ⊙ t_m + β ⊙ t_o`.
pub fn dcfam_fuse(t: &TemplatePair, params: &DcfamParams, input: ChannelInput) -> Result<Tensor> {
    let w = dcfam_weights(t, params, input)?;
    w.alpha.mul(&t.mixed)?.add(&w.beta.mul(&t.original)?)
}

/// Channel fusion under the selected strategy. `Concat` yields `2C` entries.
pub fn dcfam(t: &TemplatePair, params: &DcfamParams, input: ChannelInput, mode: FusionMode) -> Result<Tensor> {
    match mode {
        FusionMode::Attention => dcfam_fuse(t, params, input),
        other => fuse_baseline(&t.mixed, &t.original, other),
    }
}

#[derive(Debug, Clone)]
pub struct DcfamGrads {
    pub params: ParamSet,
    pub mixed: Tensor,
    pub original: Tensor,
}

pub fn dcfam_backward(t: &TemplatePair, params: &DcfamParams, input: ChannelInput, g: &Tensor) -> Result<DcfamGrads> {
    let w = dcfam_weights(t, params, input)?;
    let mut dmixed = g.mul(&w.alpha)?;
    let mut doriginal = g.mul(&w.beta)?;
    let dza = sigmoid_backward(&w.alpha, &g.mul(&t.mixed)?)?;
    let dzb = sigmoid_backward(&w.beta, &g.mul(&t.original)?)?;
    let (src_m, src_o) = match input {
        ChannelInput::Fused => {
            let f = t.mixed.add(&t.original)?;
            (f.clone(), f)
        }
        ChannelInput::PerBranch => (t.mixed.clone(), t.original.clone()),
    };
    let (dsm, dkm) = conv1d_channels_backward(&src_m, &params.kernel_mixed, &dza)?;
    let (dso, dko) = conv1d_channels_backward(&src_o, &params.kernel_original, &dzb)?;
    match input {
        ChannelInput::Fused => {
            let ds = dsm.add(&dso)?;
            dmixed = dmixed.add(&ds)?;
            doriginal = doriginal.add(&ds)?;
        }
        ChannelInput::PerBranch => {
            dmixed = dmixed.add(&dsm)?;
            doriginal = doriginal.add(&dso)?;
        }
    }
    Ok(DcfamGrads {
        params: ParamSet::new()
            .with("kernel_mixed", dkm)
            .with("kernel_original", dko),
        mixed: dmixed,
        original: doriginal,
    })
}

/// Reference strategies: elementwise sum, or concatenation along the leading
/// (channel) axis.
pub fn fuse_baseline(a: &Tensor, b: &Tensor, mode: FusionMode) -> Result<Tensor> {
    match mode {
        FusionMode::Sum => a.add(b),
        FusionMode::Concat => Tensor::concat0(&[a, b]),
        FusionMode::Attention => Err(Error::Parameter(
            "attention fusion needs learned weights; use dsfam or dcfam".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::rng::{normal, seeded, uniform};
    use crate::tensor::grad_check;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn branches(seed: u64, c: usize, h: usize, w: usize) -> (Tensor, Tensor) {
        let mut rng = seeded(seed);
        (normal(&mut rng, &[c, h, w], 1.0), normal(&mut rng, &[c, h, w], 1.0))
    }

    /// Zero-padded 3×3 correlation at one output pixel, written out.
    fn conv3_at(x: &Tensor, k: &Tensor, co: usize, y: usize, xx: usize) -> f64 {
        let (cin, h, w) = x.dims3().unwrap();
        let mut acc = 0.0;
        for ci in 0..cin {
            for dy in 0..3 {
                for dx in 0..3 {
                    let (iy, ix) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        acc += x.at3(ci, iy as usize, ix as usize) * k.data()[((co * cin + ci) * 3 + dy) * 3 + dx];
                    }
                }
            }
        }
        acc
    }

    #[test]
    fn identity_squeeze_stacks_leading_channels() {
        let (g, l) = branches(1, 2, 3, 3);
        let mut p = DsfamParams::zeros(2).unwrap();
        p.squeeze_global = Tensor::from_vec(&[1, 2, 1, 1], vec![1.0, 0.0]).unwrap();
        p.squeeze_local = p.squeeze_global.clone();
        let f = dsfam_fuse_input(&g, &l, &p).unwrap();
        assert_eq!(f.slice0(0, 1).unwrap(), g.slice0(0, 1).unwrap());
        assert_eq!(f.slice0(1, 2).unwrap(), l.slice0(0, 1).unwrap());
    }

    #[test]
    fn zero_squeeze_gives_zero_fused_feature() {
        let (g, l) = branches(2, 4, 3, 3);
        let f = dsfam_fuse_input(&g, &l, &DsfamParams::zeros(4).unwrap()).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        assert_eq!(f.shape(), &[4, 3, 3]);
    }

    #[test]
    fn odd_channel_count_is_rejected() {
        assert!(matches!(DsfamParams::init(3, &mut seeded(0)), Err(Error::Parameter(_))));
        let (g, l) = branches(3, 3, 2, 2);
        let p = DsfamParams::zeros(4).unwrap();
        assert!(dsfam_fuse_input(&g, &l, &p).is_err());
    }

    #[test]
    fn fuse_input_matches_hand_composition() {
        let (g, l) = branches(4, 4, 3, 5);
        let p = DsfamParams::init(4, &mut seeded(40)).unwrap();
        let f = dsfam_fuse_input(&g, &l, &p).unwrap();
        for o in 0..4 {
            let (src, k, oc) = if o < 2 { (&g, &p.squeeze_global, o) } else { (&l, &p.squeeze_local, o - 2) };
            for y in 0..3 {
                for x in 0..5 {
                    let v: f64 = (0..4).map(|c| src.at3(c, y, x) * k.data()[oc * 4 + c]).sum();
                    assert!((f.at3(o, y, x) - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_kernels_give_half_weights() {
        let f = Tensor::zeros(&[4, 3, 3]);
        let w = dsfam_weights(&f, &DsfamParams::zeros(4).unwrap()).unwrap();
        assert!(w.alpha.data().iter().chain(w.beta.data()).all(|&v| v == 0.5));
    }

    #[test]
    fn weights_match_step_by_step_oracle() {
        let mut rng = seeded(5);
        let f = normal(&mut rng, &[4, 4, 3], 1.0);
        let p = DsfamParams::init(4, &mut rng).unwrap();
        let w = dsfam_weights(&f, &p).unwrap();
        let (h, wd) = (4, 3);
        let mut stacked = vec![0.0; 3 * h * wd];
        for y in 0..h {
            for x in 0..wd {
                let chans: Vec<f64> = (0..4).map(|c| f.at3(c, y, x)).collect();
                stacked[y * wd + x] = conv3_at(&f, &p.spatial, 0, y, x);
                stacked[h * wd + y * wd + x] = chans.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                stacked[2 * h * wd + y * wd + x] = chans.iter().sum::<f64>() / 4.0;
            }
        }
        let stacked = Tensor::from_vec(&[3, h, wd], stacked).unwrap();
        for y in 0..h {
            for x in 0..wd {
                assert!((w.alpha.at3(0, y, x) - sig(conv3_at(&stacked, &p.mix, 0, y, x))).abs() < 1e-12);
                assert!((w.beta.at3(0, y, x) - sig(conv3_at(&stacked, &p.mix, 1, y, x))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn apply_examples() {
        let (g, l) = branches(6, 3, 2, 2);
        let half = SpatialFusionWeights {
            alpha: Tensor::full(&[1, 2, 2], 0.5),
            beta: Tensor::full(&[1, 2, 2], 0.5),
        };
        let mid = dsfam_apply(&g, &l, &half).unwrap();
        let mean = g.add(&l).unwrap().scale(0.5);
        assert!(mid.max_abs_diff(&mean).unwrap() < 1e-15);

        let mut rng = seeded(7);
        let w = SpatialFusionWeights {
            alpha: uniform(&mut rng, &[1, 2, 2], 0.01, 0.99),
            beta: uniform(&mut rng, &[1, 2, 2], 0.01, 0.99),
        };
        let out = dsfam_apply(&g, &Tensor::zeros(g.shape()), &w).unwrap();
        for c in 0..3 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(out.at3(c, y, x), w.alpha.at3(0, y, x) * g.at3(c, y, x));
                }
            }
        }
        let out = dsfam_apply(&g, &l, &w).unwrap();
        for i in 0..out.len() {
            assert!(out.data()[i].abs() <= g.data()[i].abs() + l.data()[i].abs());
        }
        assert!(dsfam_apply(&g, &Tensor::zeros(&[3, 2, 3]), &w).is_err());
    }

    #[test]
    fn dcfam_examples() {
        let mut rng = seeded(8);
        let t = normal(&mut rng, &[6], 1.0);
        let p = DcfamParams::init(&mut rng);
        let pair = TemplatePair::new(t.clone(), t.clone()).unwrap();
        let w = dcfam_weights(&pair, &p, ChannelInput::Fused).unwrap();
        let tg = dcfam_fuse(&pair, &p, ChannelInput::Fused).unwrap();
        let expected = w.alpha.add(&w.beta).unwrap().mul(&t).unwrap();
        assert!(tg.max_abs_diff(&expected).unwrap() < 1e-15);

        let pair = TemplatePair::new(normal(&mut rng, &[6], 1.0), normal(&mut rng, &[6], 1.0)).unwrap();
        let tg = dcfam_fuse(&pair, &DcfamParams::zeros(), ChannelInput::Fused).unwrap();
        let mean = pair.mixed.add(&pair.original).unwrap().scale(0.5);
        assert!(tg.max_abs_diff(&mean).unwrap() < 1e-15);

        assert!(TemplatePair::new(Tensor::zeros(&[3]), Tensor::zeros(&[4])).is_err());
    }

    fn dcfam_oracle(pair: &TemplatePair, p: &DcfamParams, input: ChannelInput) -> Vec<f64> {
        let c = pair.mixed.len();
        let conv = |v: &[f64], k: &[f64], i: usize| -> f64 {
            (0..3)
                .filter_map(|j| {
                    let s = i as isize + j as isize - 1;
                    (s >= 0 && (s as usize) < c).then(|| k[j] * v[s as usize])
                })
                .sum()
        };
        let fused: Vec<f64> = (0..c).map(|i| pair.mixed.data()[i] + pair.original.data()[i]).collect();
        let (sm, so) = match input {
            ChannelInput::Fused => (fused.clone(), fused),
            ChannelInput::PerBranch => (pair.mixed.data().to_vec(), pair.original.data().to_vec()),
        };
        (0..c)
            .map(|i| {
                sig(conv(&sm, p.kernel_mixed.data(), i)) * pair.mixed.data()[i]
                    + sig(conv(&so, p.kernel_original.data(), i)) * pair.original.data()[i]
            })
            .collect()
    }

    #[test]
    fn dcfam_matches_hand_composed_oracle() {
        let mut rng = seeded(9);
        let pair = TemplatePair::new(normal(&mut rng, &[7], 1.0), normal(&mut rng, &[7], 1.0)).unwrap();
        let p = DcfamParams::init(&mut rng);
        for input in [ChannelInput::Fused, ChannelInput::PerBranch] {
            let got = dcfam_fuse(&pair, &p, input).unwrap();
            for (a, b) in got.data().iter().zip(dcfam_oracle(&pair, &p, input)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dcfam_relabeling_symmetry() {
        let mut rng = seeded(10);
        let pair = TemplatePair::new(normal(&mut rng, &[5], 1.0), normal(&mut rng, &[5], 1.0)).unwrap();
        let p = DcfamParams::init(&mut rng);
        let swapped_pair = TemplatePair::new(pair.original.clone(), pair.mixed.clone()).unwrap();
        let swapped_p = DcfamParams {
            kernel_mixed: p.kernel_original.clone(),
            kernel_original: p.kernel_mixed.clone(),
        };
        for input in [ChannelInput::Fused, ChannelInput::PerBranch] {
            let a = dcfam_fuse(&pair, &p, input).unwrap();
            let b = dcfam_fuse(&swapped_pair, &swapped_p, input).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
    }

    #[test]
    fn baselines() {
        let (g, _) = branches(11, 3, 2, 2);
        let s = fuse_baseline(&g, &g.scale(-1.0), FusionMode::Sum).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
        let c = fuse_baseline(&g, &g, FusionMode::Concat).unwrap();
        assert_eq!(c.shape(), &[6, 2, 2]);
        assert!(fuse_baseline(&g, &Tensor::zeros(&[3, 2, 3]), FusionMode::Sum).is_err());
        assert!(fuse_baseline(&g, &g, FusionMode::Attention).is_err());
    }

    #[test]
    fn sum_baseline_is_apply_with_unit_weights() {
        let (g, l) = branches(12, 4, 3, 3);
        let ones = SpatialFusionWeights {
            alpha: Tensor::full(&[1, 3, 3], 1.0),
            beta: Tensor::full(&[1, 3, 3], 1.0),
        };
        let a = dsfam_apply(&g, &l, &ones).unwrap();
        let b = fuse_baseline(&g, &l, FusionMode::Sum).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn channel_count_is_preserved() {
        let (g, l) = branches(13, 6, 4, 4);
        let p = DsfamParams::init(6, &mut seeded(1)).unwrap();
        assert_eq!(dsfam(&g, &l, &p, FusionMode::Attention).unwrap().shape(), &[6, 4, 4]);
        assert_eq!(dsfam(&g, &l, &p, FusionMode::Concat).unwrap().shape(), &[12, 4, 4]);
        let pair = TemplatePair::new(Tensor::full(&[6], 1.0), Tensor::full(&[6], 2.0)).unwrap();
        let q = DcfamParams::init(&mut seeded(2));
        assert_eq!(dcfam(&pair, &q, ChannelInput::Fused, FusionMode::Attention).unwrap().len(), 6);
    }

    pub(crate) fn dsfam_objective(
        global: Tensor,
        local: Tensor,
        readout: Tensor,
    ) -> impl Fn(&ParamSet) -> Result<(f64, ParamSet)> + Sync + Send {
        move |ps: &ParamSet| {
            let p = DsfamParams::from_param_set(ps)?;
            let fwd = dsfam_forward(&global, &local, &p)?;
            let g = dsfam_backward(&global, &local, &p, &fwd, &readout)?;
            Ok((fwd.output.mul(&readout)?.sum(), g.params))
        }
    }

    #[test]
    fn dsfam_gradients_match_central_differences() {
        let (g, l) = branches(14, 4, 3, 4);
        let p = DsfamParams::init(4, &mut seeded(15)).unwrap();
        let r = Tensor::full(&[4, 3, 4], 1.0);
        let rep = grad_check(dsfam_objective(g.clone(), l.clone(), r.clone()), &p.to_param_set(), 1e-5).unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");

        let ps = ParamSet::new().with("g", g).with("l", l);
        let f = |x: &ParamSet| {
            let (g, l) = (x.get("g")?, x.get("l")?);
            let fwd = dsfam_forward(g, l, &p)?;
            let gr = dsfam_backward(g, l, &p, &fwd, &r)?;
            Ok((fwd.output.sum(), ParamSet::new().with("g", gr.global).with("l", gr.local)))
        };
        assert!(grad_check(f, &ps, 1e-5).unwrap().max_rel_err < 1e-4);
    }

    #[test]
    fn dcfam_gradients_match_central_differences() {
        let mut rng = seeded(16);
        for input in [ChannelInput::Fused, ChannelInput::PerBranch] {
            let ps = DcfamParams::init(&mut rng)
                .to_param_set()
                .with("t_m", normal(&mut rng, &[6], 1.0))
                .with("t_o", normal(&mut rng, &[6], 1.0));
            let r = normal(&mut rng, &[6], 1.0);
            let f = |x: &ParamSet| {
                let p = DcfamParams::from_param_set(x)?;
                let pair = TemplatePair::new(x.get("t_m")?.clone(), x.get("t_o")?.clone())?;
                let g = dcfam_backward(&pair, &p, input, &r)?;
                let mut grads = g.params;
                grads.insert("t_m", g.mixed);
                grads.insert("t_o", g.original);
                Ok((dcfam_fuse(&pair, &p, input)?.mul(&r)?.sum(), grads))
            };
            assert!(grad_check(f, &ps, 1e-5).unwrap().max_rel_err < 1e-4);
        }
    }

    proptest! {
        #[test]
        fn prop_weights_strictly_inside_unit_interval(seed in any::<u64>(), scale in 0.01f64..20.0) {
            let mut rng = seeded(seed);
            let f = normal(&mut rng, &[4, 3, 3], scale);
            let w = dsfam_weights(&f, &DsfamParams::init(4, &mut rng).unwrap()).unwrap();
            prop_assert!(w.alpha.data().iter().chain(w.beta.data()).all(|&v| v > 0.0 && v < 1.0));
            let pair = TemplatePair::new(normal(&mut rng, &[5], scale), normal(&mut rng, &[5], scale)).unwrap();
            let cw = dcfam_weights(&pair, &DcfamParams::init(&mut rng), ChannelInput::Fused).unwrap();
            prop_assert!(cw.alpha.data().iter().chain(cw.beta.data()).all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn prop_apply_is_linear_at_fixed_weights(seed in any::<u64>(), s in -5.0f64..5.0) {
            let (g, l) = branches(seed, 3, 3, 3);
            let mut rng = seeded(seed ^ 1);
            let w = SpatialFusionWeights {
                alpha: uniform(&mut rng, &[1, 3, 3], 0.01, 0.99),
                beta: uniform(&mut rng, &[1, 3, 3], 0.01, 0.99),
            };
            let a = dsfam_apply(&g.scale(s), &l.scale(s), &w).unwrap();
            let b = dsfam_apply(&g, &l, &w).unwrap().scale(s);
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
        }
    }
}
