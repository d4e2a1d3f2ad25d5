//! Teacher/student distillation on synthetic template/search pairs.
//!
//! The teacher is a wider backbone with more convolutions per stage; the
//! student is trained to match its target-aware attention maps stage by
//! stage. Steps use the analytic gradient with backtracking, so every
//! accepted step lowers the loss.

use irtrack_core::distill::{
    backbone_backward, backbone_forward, backbone_stage_features, multistage_distill, multistage_distill_grad,
    BackboneForward, BackboneParams, StageFeatures, TargetMask,
};
use irtrack_core::rng::substream;
use irtrack_core::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::synth::{crop, generate_sequence};

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillReport {
    pub seed: u64,
    pub teacher_channels: Vec<usize>,
    pub teacher_convs: usize,
    pub student_channels: Vec<usize>,
    pub student_convs: usize,
    pub pairs: usize,
    pub steps_requested: usize,
    pub steps_taken: usize,
    /// Loss before any step, then after each accepted step.
    pub losses: Vec<f64>,
    pub step_sizes: Vec<f64>,
    pub per_stage_initial: Vec<f64>,
    pub per_stage_final: Vec<f64>,
}

impl DistillReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least the initial loss")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

struct Pair {
    template: Tensor,
    search: Tensor,
    mask: TargetMask,
    teacher: Vec<StageFeatures>,
}

struct Objective {
    pairs: Vec<Pair>,
}

impl Objective {
    fn student_features(z: &BackboneForward, x: &BackboneForward) -> Result<Vec<StageFeatures>> {
        z.stages
            .iter()
            .zip(&x.stages)
            .enumerate()
            .map(|(i, (a, b))| Ok(StageFeatures::new(a.clone(), b.clone(), i)?))
            .collect()
    }

    /// Mean multistage loss and its per-stage split.
    fn loss(&self, student: &BackboneParams) -> Result<(f64, Vec<f64>)> {
        let mut total = 0.0;
        let mut per_stage = vec![0.0; student.depth()];
        for p in &self.pairs {
            let feats = backbone_stage_features(&p.template, &p.search, student)?;
            let l = multistage_distill(&p.teacher, &feats, &p.mask)?;
            total += l.total;
            for (acc, v) in per_stage.iter_mut().zip(&l.per_stage) {
                *acc += v;
            }
        }
        let n = self.pairs.len() as f64;
        Ok((total / n, per_stage.into_iter().map(|v| v / n).collect()))
    }

    fn gradient(&self, student: &BackboneParams) -> Result<ParamSet> {
        let mut grads = student.zeros_like().to_param_set();
        let scale = 1.0 / self.pairs.len() as f64;
        for p in &self.pairs {
            let fz = backbone_forward(&p.template, student)?;
            let fx = backbone_forward(&p.search, student)?;
            let g = multistage_distill_grad(&p.teacher, &Self::student_features(&fz, &fx)?, &p.mask)?;
            let gz: Vec<Option<Tensor>> = g.iter().map(|s| Some(s.template.clone())).collect();
            let gx: Vec<Option<Tensor>> = g.iter().map(|s| Some(s.search.clone())).collect();
            grads = grads.add_scaled(&backbone_backward(student, &fz, &gz)?, scale)?;
            grads = grads.add_scaled(&backbone_backward(student, &fx, &gx)?, scale)?;
        }
        Ok(grads)
    }
}

fn build_pairs(cfg: &RunConfig, teacher: &BackboneParams) -> Result<Vec<Pair>> {
    let seq = generate_sequence(cfg)?;
    let gt = seq.annotations[0]
        .gt
        .filter(|_| seq.annotations[0].visible)
        .ok_or_else(|| HarnessError::Config("first frame must show the target".into()))?;
    let size = cfg.image.template_size;
    let (cx, cy) = gt.center();
    let template = crop(&seq.frames[0], cx, cy, size)?;
    // Target box in crop coordinates, clipped, at least one pixel.
    let x0 = (cx - size as f64 / 2.0).round();
    let y0 = (cy - size as f64 / 2.0).round();
    let clip = |v: f64| (v.max(0.0) as usize).min(size);
    let (bx0, by0) = (clip(gt.x - x0), clip(gt.y - y0));
    let bx1 = clip((gt.x + gt.w - x0).ceil()).max(bx0 + 1).min(size);
    let by1 = clip((gt.y + gt.h - y0).ceil()).max(by0 + 1).min(size);
    let mask = TargetMask::rectangle(size, size, by0.min(size - 1), bx0.min(size - 1), by1, bx1)?;

    let n = cfg.distill.pairs.min(seq.len());
    (0..n)
        .map(|i| {
            let search = seq.frames[i * seq.len() / n].clone();
            let teacher = backbone_stage_features(&template, &search, teacher)?;
            Ok(Pair {
                template: template.clone(),
                search,
                mask: mask.clone(),
                teacher,
            })
        })
        .collect()
}

pub fn run_distill_demo(cfg: &RunConfig) -> Result<DistillReport> {
    cfg.validate()?;
    let d = &cfg.distill;
    let teacher = BackboneParams::init(&d.teacher_channels, d.teacher_convs, &mut substream(cfg.seed, "distill.teacher"))?;
    let (student_channels, student_convs, mut student) = if d.copy_teacher {
        (d.teacher_channels.clone(), d.teacher_convs, teacher.clone())
    } else {
        let s = BackboneParams::init(&d.student_channels, d.student_convs, &mut substream(cfg.seed, "distill.student"))?;
        (d.student_channels.clone(), d.student_convs, s)
    };
    let objective = Objective {
        pairs: build_pairs(cfg, &teacher)?,
    };

    let (mut loss, per_stage_initial) = objective.loss(&student)?;
    let mut per_stage_final = per_stage_initial.clone();
    let mut losses = vec![loss];
    let mut step_sizes = Vec::new();
    let mut lr = d.learning_rate;
    while step_sizes.len() < d.steps && loss > 0.0 {
        let g = objective.gradient(&student)?;
        let g2 = g.dot(&g)?;
        if !(g2 > 0.0) {
            break;
        }
        let params = student.to_param_set();
        let mut accepted = None;
        let mut eta = lr;
        for _ in 0..MAX_HALVINGS {
            let trial = params.add_scaled(&g, -eta)?;
            let candidate = student.with_param_set(&trial)?;
            let (l, split) = objective.loss(&candidate)?;
            if l < loss && l <= loss - ARMIJO_C * eta * g2 {
                accepted = Some((candidate, l, split));
                break;
            }
            eta *= 0.5;
        }
        let Some((candidate, l, split)) = accepted else { break };
        student = candidate;
        loss = l;
        per_stage_final = split;
        losses.push(l);
        step_sizes.push(eta);
        // Let the next step try a longer stride again.
        lr = (2.0 * eta).min(d.learning_rate * 16.0);
    }

    Ok(DistillReport {
        seed: cfg.seed,
        teacher_channels: d.teacher_channels.clone(),
        teacher_convs: d.teacher_convs,
        student_channels,
        student_convs,
        pairs: objective.pairs.len(),
        steps_requested: d.steps,
        steps_taken: step_sizes.len(),
        losses,
        step_sizes,
        per_stage_initial,
        per_stage_final,
    })
}
