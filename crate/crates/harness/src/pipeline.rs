//! End-to-end tracker: backbone features, thresholded cross-attention in the
//! template and search branches, channel and spatial fusion, and an
//! argmax-response head.
//!
//! The head is a stand-in: the fused search map is summed over channels and
//! its peak, refined to sub-cell precision, gives the target center. Box
//! extents are copied from the initial annotation.

use irtrack_core::attention::{sten_forward, ImcOptions, RetainMask, StenParams};
use irtrack_core::distill::{toy_backbone, BackboneParams};
use irtrack_core::fusion::{dcfam, dcfam_fuse, dsfam, DcfamParams, DsfamParams, FusionMode, TemplatePair};
use irtrack_core::metrics::{BoundingBox, Prediction};
use irtrack_core::rng::{fan_in_uniform, substream, TensorRng};
use irtrack_core::Tensor;
use rand::Rng;

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::synth::{crop, SyntheticSequence};

/// How the attention blocks select keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionKind {
    /// Per-row mass thresholding at the configured `T`.
    #[default]
    Thresholded,
    /// Every key retained.
    Vanilla,
}

/// 3×3 center-surround kernel with zero sum.
fn center_surround() -> Tensor {
    Tensor::from_fn(&[1, 1, 3, 3], |i| if i == 4 { 1.0 } else { -0.125 })
}

/// Backbone for tracking: a zero-sum first stage that suppresses the smooth
/// background, followed by non-negative aggregation stages.
pub fn tracking_backbone(channels: usize, depth: usize, convs: usize, rng: &mut TensorRng) -> Result<BackboneParams> {
    let mut stages = Vec::with_capacity(depth);
    for s in 0..depth {
        let mut stage = Vec::with_capacity(convs);
        for j in 0..convs {
            let cin = if s == 0 && j == 0 { 1 } else { channels };
            let k = if s == 0 && j == 0 {
                let base = center_surround();
                let gains: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.5..1.5)).collect();
                Tensor::from_fn(&[channels, 1, 3, 3], |i| gains[i / 9] * base.data()[i % 9])
            } else {
                fan_in_uniform(rng, &[channels, cin, 3, 3], cin * 9).map(f64::abs)
            };
            stage.push(k);
        }
        stages.push(stage);
    }
    Ok(BackboneParams::from_kernels(stages)?)
}

#[derive(Debug, Clone)]
pub struct Tracker {
    pub backbone: BackboneParams,
    pub sten_template: StenParams,
    pub sten_search: StenParams,
    pub dsfam: DsfamParams,
    pub dcfam: DcfamParams,
    opts: ImcOptions,
    kind: AttentionKind,
    dsfam_mode: FusionMode,
    dcfam_mode: FusionMode,
    dcfam_input: irtrack_core::fusion::ChannelInput,
    template_size: usize,
    stride: usize,
    absent_ratio: f64,
}

/// Per-frame head output.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameResponse {
    /// Channel-summed fused map.
    pub response: Tensor,
    pub peak: f64,
    /// Refined peak location in frame pixels.
    pub center: (f64, f64),
}

fn mean_rows(t: &Tensor) -> Result<Tensor> {
    let (n, c) = t.dims2()?;
    Ok(Tensor::from_fn(&[c], |j| (0..n).map(|i| t.at2(i, j)).sum::<f64>() / n as f64))
}

impl Tracker {
    /// Seeded weights for the configured model.
    pub fn new(cfg: &RunConfig, kind: AttentionKind) -> Result<Tracker> {
        cfg.validate()?;
        let m = &cfg.model;
        let c = m.channels;
        Ok(Tracker {
            backbone: tracking_backbone(c, m.depth, m.convs_per_stage, &mut substream(cfg.seed, "backbone"))?,
            sten_template: StenParams::init(c, m.heads, &mut substream(cfg.seed, "sten.template"))?,
            sten_search: StenParams::init(c, m.heads, &mut substream(cfg.seed, "sten.search"))?,
            dsfam: DsfamParams::init(c, &mut substream(cfg.seed, "dsfam"))?,
            dcfam: DcfamParams::init(&mut substream(cfg.seed, "dcfam")),
            opts: cfg.imc.options(),
            kind,
            dsfam_mode: cfg.dsfam.fusion,
            dcfam_mode: cfg.dcfam.fusion,
            dcfam_input: cfg.dcfam.input,
            template_size: cfg.image.template_size,
            stride: m.stride(),
            absent_ratio: cfg.tracker.absent_ratio,
        })
    }

    fn features(&self, image: &Tensor) -> Result<Tensor> {
        let mut stages = toy_backbone(image, &self.backbone)?;
        Ok(stages.pop().expect("backbone has at least one stage"))
    }

    fn attend(&self, query: &Tensor, kv: &Tensor, params: &StenParams) -> Result<Tensor> {
        let frozen = match self.kind {
            AttentionKind::Thresholded => None,
            AttentionKind::Vanilla => {
                let (m, _) = query.dims2()?;
                let (n, _) = kv.dims2()?;
                Some(vec![RetainMask::all(m, n); params.heads])
            }
        };
        Ok(sten_forward(query, kv, params, &self.opts, frozen.as_deref())?.output)
    }

    /// Template tokens (`N_z×C`) from the first frame's target crop.
    pub fn template_tokens(&self, frame: &Tensor, gt: &BoundingBox) -> Result<Tensor> {
        let (cx, cy) = gt.center();
        let z = crop(frame, cx, cy, self.template_size)?;
        Ok(self.features(&z)?.to_tokens()?)
    }

    /// Fused search map and its channel-summed response for one frame.
    pub fn respond(&self, frame: &Tensor, z_tokens: &Tensor) -> Result<FrameResponse> {
        let fc = self.features(frame)?;
        let (c, h, w) = fc.dims3()?;
        let x_tokens = fc.to_tokens()?;

        let t_m = mean_rows(&self.attend(z_tokens, &x_tokens, &self.sten_template)?)?;
        let t_o = mean_rows(z_tokens)?;
        let pair = TemplatePair::new(t_m, t_o)?;
        let extra = match self.dcfam_mode {
            FusionMode::Attention => vec![dcfam_fuse(&pair, &self.dcfam, self.dcfam_input)?],
            FusionMode::Sum => vec![dcfam(&pair, &self.dcfam, self.dcfam_input, FusionMode::Sum)?],
            FusionMode::Concat => vec![pair.mixed.clone(), pair.original.clone()],
        };
        let mut kv_parts: Vec<Tensor> = vec![z_tokens.clone()];
        for t in &extra {
            kv_parts.push(t.reshape(&[1, c])?);
        }
        let kv = Tensor::concat0(&kv_parts.iter().collect::<Vec<_>>())?;

        let ft = Tensor::from_tokens(&self.attend(&x_tokens, &kv, &self.sten_search)?, h, w)?;
        let fm = dsfam(&ft, &fc, &self.dsfam, self.dsfam_mode)?;
        let (cm, _, _) = fm.dims3()?;
        let response = Tensor::from_fn(&[h, w], |p| (0..cm).map(|ch| fm.data()[ch * h * w + p]).sum());

        let (mut best, mut peak) = (0, f64::NEG_INFINITY);
        for (i, &v) in response.data().iter().enumerate() {
            if v > peak {
                best = i;
                peak = v;
            }
        }
        let (by, bx) = ((best / w) as f64, (best % w) as f64);
        let (ry, rx) = refine(&response, best / w, best % w, peak);
        // Cell (i, j) reads the frame pixel (stride·i, stride·j).
        let s = self.stride as f64;
        let center = ((bx + rx) * s + 0.5, (by + ry) * s + 0.5);
        Ok(FrameResponse { response, peak, center })
    }

    /// One prediction per frame. The first frame returns its annotation.
    pub fn track(&self, seq: &SyntheticSequence) -> Result<Vec<Prediction>> {
        let first = seq
            .annotations
            .first()
            .ok_or_else(|| HarnessError::Config("empty sequence".into()))?;
        let gt = match (first.visible, first.gt) {
            (true, Some(b)) => b,
            _ => {
                return Err(HarnessError::Config(
                    "first frame must show the target to initialize the template".into(),
                ))
            }
        };
        let z = self.template_tokens(&seq.frames[0], &gt)?;
        let peak0 = self.respond(&seq.frames[0], &z)?.peak;
        let mut out = vec![Some(gt)];
        for frame in &seq.frames[1..] {
            let r = self.respond(frame, &z)?;
            out.push(if peak0 > 0.0 && r.peak < self.absent_ratio * peak0 {
                None
            } else {
                Some(BoundingBox::centered(r.center.0, r.center.1, gt.w, gt.h)?)
            });
        }
        Ok(out)
    }
}

/// Sub-cell offset: centroid of the part of the 3×3 neighborhood above half
/// the peak.
fn refine(r: &Tensor, i: usize, j: usize, peak: f64) -> (f64, f64) {
    let (h, w) = (r.shape()[0], r.shape()[1]);
    let floor = 0.5 * peak;
    let (mut sw, mut sy, mut sx) = (0.0, 0.0, 0.0);
    for di in -1isize..=1 {
        for dj in -1isize..=1 {
            let (y, x) = (i as isize + di, j as isize + dj);
            if y < 0 || x < 0 || y as usize >= h || x as usize >= w {
                continue;
            }
            let v = (r.at2(y as usize, x as usize) - floor).max(0.0);
            sw += v;
            sy += v * di as f64;
            sx += v * dj as f64;
        }
    }
    if sw > 0.0 {
        (sy / sw, sx / sw)
    } else {
        (0.0, 0.0)
    }
}

pub fn run_pipeline(seq: &SyntheticSequence, cfg: &RunConfig) -> Result<Vec<Prediction>> {
    Tracker::new(cfg, AttentionKind::Thresholded)?.track(seq)
}

pub fn run_pipeline_with(seq: &SyntheticSequence, cfg: &RunConfig, kind: AttentionKind) -> Result<Vec<Prediction>> {
    Tracker::new(cfg, kind)?.track(seq)
}
