//! Target-aware contextual attention distillation.
//!
//! For each backbone stage, the target mask gates the template features; the
//! gated template acts as keys and values for every search position, and the
//! channel sum of the aggregated context goes through a sigmoid to give an
//! `H_x×W_x` attention map. The student is trained to match the teacher's
//! map under a mean absolute difference.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::par::{map_indexed, Exec};
use crate::rng::{fan_in_uniform, TensorRng};
use crate::tensor::ops::{
    conv2d, conv2d_backward, matmul, relu, relu_backward, resize_bilinear,
    resize_bilinear_backward, sigmoid, softmax_rows, softmax_rows_backward, subsample2,
    subsample2_backward,
};
use crate::tensor::{ParamSet, Tensor};

/// Binary `H×W` grid marking target pixels of a template.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMask {
    grid: Tensor,
}

impl TargetMask {
    pub fn new(grid: Tensor) -> Result<Self> {
        grid.dims2()?;
        if grid.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Precondition("target mask values must be 0 or 1".into()));
        }
        if !grid.data().iter().any(|&v| v == 1.0) {
            return Err(Error::Precondition("target mask has no target pixel".into()));
        }
        Ok(TargetMask { grid })
    }

    /// Mask with ones inside the half-open pixel rectangle `[y0,y1)×[x0,x1)`.
    pub fn rectangle(h: usize, w: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> Result<Self> {
        let grid = Tensor::from_fn(&[h, w], |i| {
            let (y, x) = (i / w, i % w);
            if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                1.0
            } else {
                0.0
            }
        });
        TargetMask::new(grid)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.grid.shape()[0], self.grid.shape()[1])
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    /// Nearest-neighbor resampling. If no target pixel survives, a single
    /// one is placed at the resampled centroid of the original mask.
    pub fn resample(&self, h2: usize, w2: usize) -> Result<TargetMask> {
        let (h, w) = self.shape();
        if (h, w) == (h2, w2) {
            return Ok(self.clone());
        }
        if h2 == 0 || w2 == 0 {
            return Err(Error::Parameter("mask resample to an empty grid".into()));
        }
        let src = |o: usize, n_out: usize, n_in: usize| {
            (((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
        };
        let grid = Tensor::from_fn(&[h2, w2], |i| {
            self.grid.at2(src(i / w2, h2, h), src(i % w2, w2, w))
        });
        if grid.sum() > 0.0 {
            return TargetMask::new(grid);
        }
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
        for y in 0..h {
            for x in 0..w {
                if self.grid.at2(y, x) == 1.0 {
                    sy += y as f64 + 0.5;
                    sx += x as f64 + 0.5;
                    n += 1.0;
                }
            }
        }
        let cy = ((sy / n) * h2 as f64 / h as f64).floor() as usize;
        let cx = ((sx / n) * w2 as f64 / w as f64).floor() as usize;
        let (cy, cx) = (cy.min(h2 - 1), cx.min(w2 - 1));
        TargetMask::rectangle(h2, w2, cy, cx, cy + 1, cx + 1)
    }

    /// Plain-text form: an `H W` header line, then `H` rows of `W`
    /// space-separated `0`/`1` values.
    pub fn to_text(&self) -> String {
        let (h, w) = self.shape();
        let mut s = format!("{h} {w}\n");
        for y in 0..h {
            let row: Vec<&str> = (0..w)
                .map(|x| if self.grid.at2(y, x) == 1.0 { "1" } else { "0" })
                .collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<TargetMask> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hl, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing `H W` header".into(),
        })?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: hl + 1,
                msg: format!("bad header: {e}"),
            })?;
        let [h, w] = dims[..] else {
            return Err(Error::Parse {
                line: hl + 1,
                msg: "header must be `H W`".into(),
            });
        };
        let mut data = Vec::with_capacity(h * w);
        let mut rows = 0;
        for (ln, line) in lines {
            if rows == h {
                return Err(Error::Parse {
                    line: ln + 1,
                    msg: format!("more than {h} rows"),
                });
            }
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != w {
                return Err(Error::Parse {
                    line: ln + 1,
                    msg: format!("expected {w} values, found {}", vals.len()),
                });
            }
            for v in vals {
                data.push(match v {
                    "0" => 0.0,
                    "1" => 1.0,
                    other => {
                        return Err(Error::Parse {
                            line: ln + 1,
                            msg: format!("mask value must be 0 or 1, got `{other}`"),
                        })
                    }
                });
            }
            rows += 1;
        }
        if rows != h {
            return Err(Error::Parse {
                line: text.lines().count() + 1,
                msg: format!("expected {h} rows, found {rows}"),
            });
        }
        TargetMask::new(Tensor::from_vec(&[h, w], data)?)
    }
}

/// Template and search features of one backbone stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageFeatures {
    pub template: Tensor,
    pub search: Tensor,
    pub stage_id: usize,
}

impl StageFeatures {
    pub fn new(template: Tensor, search: Tensor, stage_id: usize) -> Result<Self> {
        let (cz, _, _) = template.dims3()?;
        let (cx, _, _) = search.dims3()?;
        if cz != cx {
            return dim_err("stage_features", template.shape(), search.shape());
        }
        Ok(StageFeatures {
            template,
            search,
            stage_id,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMapPair {
    pub teacher: Tensor,
    pub student: Tensor,
}

impl AttentionMapPair {
    pub fn new(teacher: Tensor, student: Tensor) -> Result<Self> {
        teacher.dims2()?;
        if teacher.shape() != student.shape() {
            return dim_err("attention_map_pair", teacher.shape(), student.shape());
        }
        Ok(AttentionMapPair { teacher, student })
    }
}

/// Intermediates of [`target_attention_map`].
#[derive(Debug, Clone)]
pub struct AttentionMapForward {
    /// Gated template as `C×N_z` (the values; keys are its transpose).
    pub values: Tensor,
    /// Search features as `C×N_x` (the queries).
    pub queries: Tensor,
    /// `N_x×N_z`; row `j` is the softmax over template positions for search
    /// position `j`.
    pub weights: Tensor,
    pub map: Tensor,
    mask: TargetMask,
}

pub fn target_attention_map(f: &StageFeatures, mask: &TargetMask) -> Result<Tensor> {
    Ok(attention_map_forward(f, mask)?.map)
}

pub fn attention_map_forward(f: &StageFeatures, mask: &TargetMask) -> Result<AttentionMapForward> {
    let (c, hz, wz) = f.template.dims3()?;
    let (cx, hx, wx) = f.search.dims3()?;
    if c != cx {
        return dim_err("target_attention_map", f.template.shape(), f.search.shape());
    }
    if mask.shape() != (hz, wz) {
        return dim_err("target_attention_map", &[hz, wz], mask.grid.shape());
    }
    let nz = hz * wz;
    let m = mask.grid.data();
    let values = Tensor::from_fn(&[c, nz], |i| f.template.data()[i] * m[i % nz]);
    let queries = f.search.reshape(&[c, hx * wx])?;
    let scores = matmul(&queries.transpose()?, &values)?.scale(1.0 / (c as f64).sqrt());
    let weights = softmax_rows(&scores)?;
    let context_t = matmul(&weights, &values.transpose()?)?;
    let summed = Tensor::from_fn(&[hx, wx], |j| context_t.row(j).iter().sum());
    Ok(AttentionMapForward {
        values,
        queries,
        weights,
        map: sigmoid(&summed),
        mask: mask.clone(),
    })
}

/// Gradients `(d_template, d_search)` of a scalar whose gradient with respect
/// to the map is `g`.
pub fn attention_map_backward(
    f: &StageFeatures,
    fwd: &AttentionMapForward,
    g: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (c, _, _) = f.template.dims3()?;
    if g.shape() != fwd.map.shape() {
        return dim_err("attention_map_backward", fwd.map.shape(), g.shape());
    }
    let nx = fwd.map.len();
    let dsum: Vec<f64> = (0..nx)
        .map(|j| {
            let a = fwd.map.data()[j];
            g.data()[j] * a * (1.0 - a)
        })
        .collect();
    let dcontext_t = Tensor::from_fn(&[nx, c], |i| dsum[i / c]);
    let dweights = matmul(&dcontext_t, &fwd.values)?;
    let dvalues_ctx = matmul(&fwd.weights.transpose()?, &dcontext_t)?.transpose()?;
    let dscores = softmax_rows_backward(&fwd.weights, &dweights)?.scale(1.0 / (c as f64).sqrt());
    let dqueries = matmul(&fwd.values, &dscores.transpose()?)?;
    let dvalues = dvalues_ctx.add(&matmul(&fwd.queries, &dscores)?)?;
    let nz = fwd.values.shape()[1];
    let m = fwd.mask.grid.data();
    let dtemplate = Tensor::from_fn(f.template.shape(), |i| dvalues.data()[i] * m[i % nz]);
    Ok((dtemplate, dqueries.into_shape(f.search.shape())?))
}

/// Mean absolute difference between teacher and student maps.
pub fn tcakd_loss(pair: &AttentionMapPair) -> Result<f64> {
    let n = pair.teacher.len() as f64;
    Ok(pair.teacher.sub(&pair.student)?.data().iter().map(|v| v.abs()).sum::<f64>() / n)
}

/// Gradient of [`tcakd_loss`] with respect to the student map (`sign/N`,
/// zero where the maps agree).
pub fn tcakd_loss_grad(pair: &AttentionMapPair) -> Result<Tensor> {
    let n = pair.teacher.len() as f64;
    pair.student
        .zip_map(&pair.teacher, "tcakd_loss_grad", |s, t| {
            if s > t {
                1.0 / n
            } else if s < t {
                -1.0 / n
            } else {
                0.0
            }
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillLoss {
    pub total: f64,
    pub per_stage: Vec<f64>,
}

/// Loss of one stage and its gradient with respect to the student's
/// template and search features.
#[derive(Debug, Clone)]
pub struct StageGrad {
    pub loss: f64,
    pub template: Tensor,
    pub search: Tensor,
}

fn stage_maps(t: &StageFeatures, s: &StageFeatures, mask: &TargetMask) -> Result<(Tensor, AttentionMapForward, Tensor)> {
    let (_, thz, twz) = t.template.dims3()?;
    let (_, shz, swz) = s.template.dims3()?;
    let teacher = target_attention_map(t, &mask.resample(thz, twz)?)?;
    let fwd = attention_map_forward(s, &mask.resample(shz, swz)?)?;
    let (th, tw) = teacher.dims2()?;
    let student = if fwd.map.shape() == teacher.shape() {
        fwd.map.clone()
    } else {
        resize_bilinear(&fwd.map, th, tw)?
    };
    Ok((teacher, fwd, student))
}

fn check_stages(teacher: &[StageFeatures], student: &[StageFeatures]) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::Parameter(format!(
            "teacher has {} stages, student has {}",
            teacher.len(),
            student.len()
        )));
    }
    Ok(())
}

/// Sum over stages of the per-stage map loss. Student maps whose spatial
/// shape differs from the teacher's are resampled bilinearly first.
pub fn multistage_distill(teacher: &[StageFeatures], student: &[StageFeatures], mask: &TargetMask) -> Result<DistillLoss> {
    check_stages(teacher, student)?;
    let per_stage = map_indexed(Exec::default(), teacher.len(), |i| -> Result<f64> {
        let (t, _, s) = stage_maps(&teacher[i], &student[i], mask)?;
        tcakd_loss(&AttentionMapPair::new(t, s)?)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(DistillLoss {
        total: per_stage.iter().sum(),
        per_stage,
    })
}

/// Per-stage losses and student feature gradients.
pub fn multistage_distill_grad(teacher: &[StageFeatures], student: &[StageFeatures], mask: &TargetMask) -> Result<Vec<StageGrad>> {
    check_stages(teacher, student)?;
    map_indexed(Exec::default(), teacher.len(), |i| -> Result<StageGrad> {
        let (t, fwd, s) = stage_maps(&teacher[i], &student[i], mask)?;
        let pair = AttentionMapPair::new(t, s)?;
        let loss = tcakd_loss(&pair)?;
        let mut g = tcakd_loss_grad(&pair)?;
        if fwd.map.shape() != pair.teacher.shape() {
            let (h, w) = fwd.map.dims2()?;
            g = resize_bilinear_backward(h, w, &g)?;
        }
        let (template, search) = attention_map_backward(&student[i], &fwd, &g)?;
        Ok(StageGrad {
            loss,
            template,
            search,
        })
    })
    .into_iter()
    .collect()
}

/// Convolution kernels of a small stride-2 backbone. Each stage applies
/// `convs` 3×3 convolutions with ReLU, then keeps every second pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    stages: Vec<Vec<Tensor>>,
}

impl BackboneParams {
    /// Fan-in uniform kernels; `channels[i]` is the width of stage `i`.
    pub fn init(channels: &[usize], convs_per_stage: usize, rng: &mut TensorRng) -> Result<Self> {
        if channels.is_empty() || convs_per_stage == 0 {
            return Err(Error::Parameter("backbone needs at least one stage and conv".into()));
        }
        let mut cin = 1;
        let stages = channels
            .iter()
            .map(|&cout| {
                (0..convs_per_stage)
                    .map(|j| {
                        let ci = if j == 0 { cin } else { cout };
                        let k = fan_in_uniform(rng, &[cout, ci, 3, 3], ci * 9);
                        if j + 1 == convs_per_stage {
                            cin = cout;
                        }
                        k
                    })
                    .collect()
            })
            .collect();
        Ok(BackboneParams { stages })
    }

    pub fn from_kernels(stages: Vec<Vec<Tensor>>) -> Result<Self> {
        let mut cin = 1;
        for (i, stage) in stages.iter().enumerate() {
            if stage.is_empty() {
                return Err(Error::Parameter(format!("stage {i} has no convolution")));
            }
            for k in stage {
                match k.shape()[..] {
                    [co, ci, 3, 3] if ci == cin => cin = co,
                    _ => return dim_err("backbone_kernel", &[0, cin, 3, 3], k.shape()),
                }
            }
        }
        if stages.is_empty() {
            return Err(Error::Parameter("backbone needs at least one stage".into()));
        }
        Ok(BackboneParams { stages })
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.stages
            .iter()
            .map(|s| s.last().expect("non-empty stage").shape()[0])
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        BackboneParams {
            stages: self
                .stages
                .iter()
                .map(|s| s.iter().map(|k| Tensor::zeros(k.shape())).collect())
                .collect(),
        }
    }

    pub fn to_param_set(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        for (i, s) in self.stages.iter().enumerate() {
            for (j, k) in s.iter().enumerate() {
                ps.insert(format!("stage{i}.conv{j}"), k.clone());
            }
        }
        ps
    }

    /// Rebuilds from a [`ParamSet`] with the same layout as `self`.
    pub fn with_param_set(&self, ps: &ParamSet) -> Result<Self> {
        let stages = self
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                (0..s.len())
                    .map(|j| ps.get(&format!("stage{i}.conv{j}")).cloned())
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        BackboneParams::from_kernels(stages)
    }
}

#[derive(Debug, Clone)]
pub struct BackboneForward {
    pub stages: Vec<Tensor>,
    /// `(input, pre-activation)` of every convolution, per stage.
    convs: Vec<Vec<(Tensor, Tensor)>>,
    pre_subsample: Vec<Tensor>,
}

/// Per-stage outputs of the backbone for a `1×H×W` image.
pub fn toy_backbone(image: &Tensor, params: &BackboneParams) -> Result<Vec<Tensor>> {
    Ok(backbone_forward(image, params)?.stages)
}

pub fn backbone_forward(image: &Tensor, params: &BackboneParams) -> Result<BackboneForward> {
    let (c, h, w) = image.dims3()?;
    if c != 1 {
        return dim_err("toy_backbone", image.shape(), &[1, h, w]);
    }
    let f = 1usize << params.depth();
    if h % f != 0 || w % f != 0 {
        return Err(Error::Precondition(format!(
            "image {h}x{w} not divisible by 2^{} for the backbone depth",
            params.depth()
        )));
    }
    let mut x = image.clone();
    let mut stages = Vec::new();
    let mut convs = Vec::new();
    let mut pre_subsample = Vec::new();
    for stage in &params.stages {
        let mut cache = Vec::new();
        for k in stage {
            let pre = conv2d(&x, k, 1)?;
            let out = relu(&pre);
            cache.push((x, pre));
            x = out;
        }
        let down = subsample2(&x)?;
        pre_subsample.push(x);
        x = down.clone();
        stages.push(down);
        convs.push(cache);
    }
    Ok(BackboneForward {
        stages,
        convs,
        pre_subsample,
    })
}

/// Kernel gradients given per-stage output gradients (`None` = no signal).
pub fn backbone_backward(params: &BackboneParams, fwd: &BackboneForward, stage_grads: &[Option<Tensor>]) -> Result<ParamSet> {
    if stage_grads.len() != params.depth() {
        return Err(Error::Parameter("one gradient slot per stage required".into()));
    }
    let mut grads = params.zeros_like().to_param_set();
    let mut carry: Option<Tensor> = None;
    for i in (0..params.depth()).rev() {
        let g = match (&stage_grads[i], carry.take()) {
            (Some(a), Some(b)) => Some(a.add(&b)?),
            (Some(a), None) => Some(a.clone()),
            (None, b) => b,
        };
        let Some(g) = g else { continue };
        let mut g = subsample2_backward(fwd.pre_subsample[i].shape(), &g)?;
        for j in (0..params.stages[i].len()).rev() {
            let (input, pre) = &fwd.convs[i][j];
            let dpre = relu_backward(pre, &g)?;
            let (dx, dk) = conv2d_backward(input, &params.stages[i][j], 1, &dpre)?;
            grads.insert(format!("stage{i}.conv{j}"), dk);
            g = dx;
        }
        if i > 0 {
            carry = Some(g);
        }
    }
    Ok(grads)
}

/// Runs the backbone on a template and a search image and pairs the outputs
/// stage by stage.
pub fn backbone_stage_features(template: &Tensor, search: &Tensor, params: &BackboneParams) -> Result<Vec<StageFeatures>> {
    let z = toy_backbone(template, params)?;
    let x = toy_backbone(search, params)?;
    z.into_iter()
        .zip(x)
        .enumerate()
        .map(|(i, (t, s))| StageFeatures::new(t, s, i))
        .collect()
}
