//! Synthetic infrared-like sequences: a bright Gaussian blob moving over a
//! smooth low-frequency background, with optional noise, dimmer distractor
//! blobs and occlusion runs.

use std::f64::consts::PI;

use irtrack_core::metrics::{BoundingBox, FrameAnnotation};
use irtrack_core::rng::{substream, TensorRng};
use irtrack_core::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

/// Peak value of the background field; the target blob adds 1.0.
pub const BACKGROUND_PEAK: f64 = 0.2;
pub const TARGET_AMPLITUDE: f64 = 1.0;
const DISTRACTORS_AT_FULL_CLUTTER: f64 = 4.0;
const NOISE_AT_FULL_CLUTTER: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    /// `1×H×W` frames.
    pub frames: Vec<Tensor>,
    pub annotations: Vec<FrameAnnotation>,
    pub target_size: (usize, usize),
}

impl SyntheticSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Keeps the first `n` frames.
    pub fn truncated(&self, n: usize) -> SyntheticSequence {
        SyntheticSequence {
            frames: self.frames[..n.min(self.len())].to_vec(),
            annotations: self.annotations[..n.min(self.len())].to_vec(),
            target_size: self.target_size,
        }
    }

    /// Stacks the frames into one `N×H×W` tensor.
    pub fn stacked(&self) -> Result<Tensor> {
        let parts: Vec<&Tensor> = self.frames.iter().collect();
        Ok(Tensor::concat0(&parts)?)
    }

    pub fn from_stacked(frames: &Tensor, annotations: Vec<FrameAnnotation>) -> Result<SyntheticSequence> {
        let (n, _, _) = frames.dims3()?;
        if n != annotations.len() {
            return Err(HarnessError::Config(format!(
                "{n} frames but {} annotations",
                annotations.len()
            )));
        }
        let frames = (0..n).map(|i| frames.slice0(i, i + 1)).collect::<std::result::Result<Vec<_>, _>>()?;
        let target_size = annotations
            .iter()
            .find_map(|a| a.gt)
            .map_or((0, 0), |b| (b.w as usize, b.h as usize));
        Ok(SyntheticSequence {
            frames,
            annotations,
            target_size,
        })
    }
}

/// Moving point that reflects off the walls of `[lo, hi]²`.
#[derive(Debug, Clone, Copy)]
struct Mover {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
}

impl Mover {
    fn spawn(rng: &mut TensorRng, lo: (f64, f64), hi: (f64, f64), speed: f64) -> Mover {
        let angle = rng.gen_range(0.0..2.0 * PI);
        Mover {
            x: rng.gen_range(lo.0..=hi.0),
            y: rng.gen_range(lo.1..=hi.1),
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
        }
    }

    fn advance(&mut self, rng: &mut TensorRng, lo: (f64, f64), hi: (f64, f64), jitter: f64) {
        if jitter > 0.0 {
            self.vx += rng.gen_range(-jitter..jitter);
            self.vy += rng.gen_range(-jitter..jitter);
        }
        self.x += self.vx;
        self.y += self.vy;
        reflect(&mut self.x, &mut self.vx, lo.0, hi.0);
        reflect(&mut self.y, &mut self.vy, lo.1, hi.1);
    }
}

fn reflect(p: &mut f64, v: &mut f64, lo: f64, hi: f64) {
    if hi <= lo {
        *p = lo;
        return;
    }
    while *p < lo || *p > hi {
        if *p < lo {
            *p = 2.0 * lo - *p;
        } else {
            *p = 2.0 * hi - *p;
        }
        *v = -*v;
    }
}

struct Background {
    terms: Vec<(f64, f64, f64)>,
}

impl Background {
    fn new(rng: &mut TensorRng, size: usize) -> Background {
        // Up to two cycles across the frame keeps the field low-frequency.
        let max_freq = 2.0 * 2.0 * PI / size as f64;
        let terms = (0..3)
            .map(|_| {
                let a = rng.gen_range(0.0..2.0 * PI);
                let f = rng.gen_range(0.3..1.0) * max_freq;
                (f * a.cos(), f * a.sin(), rng.gen_range(0.0..2.0 * PI))
            })
            .collect();
        Background { terms }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let s: f64 = self.terms.iter().map(|(fx, fy, p)| (fx * x + fy * y + p).cos()).sum();
        BACKGROUND_PEAK * (0.5 + 0.5 * s / self.terms.len() as f64)
    }
}

/// A Gaussian blob whose `2·sigma` spans half the box.
fn blob(x: f64, y: f64, cx: f64, cy: f64, w: f64, h: f64) -> f64 {
    let (sx, sy) = (w / 4.0, h / 4.0);
    (-((x - cx).powi(2) / (2.0 * sx * sx) + (y - cy).powi(2) / (2.0 * sy * sy))).exp()
}

struct Distractor {
    mover: Mover,
    size: f64,
    amplitude: f64,
}

/// Deterministic under `cfg.seed`.
pub fn generate_sequence(cfg: &RunConfig) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let s = &cfg.sequence;
    let size = cfg.image.search_size;
    let mut rng = substream(cfg.seed, "sequence");

    let w = rng.gen_range(s.size_min..=s.size_max);
    let h = rng.gen_range(s.size_min..=s.size_max);
    let (fw, fh) = (w as f64, h as f64);
    let lo = (fw / 2.0, fh / 2.0);
    let hi = (size as f64 - fw / 2.0, size as f64 - fh / 2.0);
    let mut target = Mover::spawn(&mut rng, lo, hi, s.speed);

    let background = Background::new(&mut rng, size);
    let n_distractors = (DISTRACTORS_AT_FULL_CLUTTER * s.clutter).round() as usize;
    let mut distractors: Vec<Distractor> = (0..n_distractors)
        .map(|_| {
            let d = rng.gen_range(s.size_min..=s.size_max) as f64;
            Distractor {
                mover: Mover::spawn(&mut rng, (d / 2.0, d / 2.0), (size as f64 - d / 2.0, size as f64 - d / 2.0), s.speed),
                size: d,
                amplitude: rng.gen_range(0.4..0.8),
            }
        })
        .collect();
    let noise = NOISE_AT_FULL_CLUTTER * s.clutter;

    let mut frames = Vec::with_capacity(s.frames);
    let mut annotations = Vec::with_capacity(s.frames);
    let mut occluded_for = 0usize;
    for i in 0..s.frames {
        if i > 0 {
            target.advance(&mut rng, lo, hi, 0.1 * s.speed);
            for d in &mut distractors {
                let r = d.size / 2.0;
                d.mover.advance(&mut rng, (r, r), (size as f64 - r, size as f64 - r), 0.1 * s.speed);
            }
            if occluded_for > 0 {
                occluded_for -= 1;
            } else if s.occlusion > 0.0 && rng.gen_bool(s.occlusion) {
                occluded_for = rng.gen_range(3..=8);
            }
        }
        let visible = occluded_for == 0;
        let mut data = vec![0.0; size * size];
        for (p, v) in data.iter_mut().enumerate() {
            let (x, y) = ((p % size) as f64 + 0.5, (p / size) as f64 + 0.5);
            let mut val = background.at(x, y);
            for d in &distractors {
                val += d.amplitude * blob(x, y, d.mover.x, d.mover.y, d.size, d.size);
            }
            if visible {
                val += TARGET_AMPLITUDE * blob(x, y, target.x, target.y, fw, fh);
            }
            if noise > 0.0 {
                val += noise * rng.sample::<f64, _>(StandardNormal);
            }
            *v = val;
        }
        frames.push(Tensor::from_vec(&[1, size, size], data)?);
        annotations.push(if visible {
            FrameAnnotation::visible(i, BoundingBox::centered(target.x, target.y, fw, fh)?)
        } else {
            FrameAnnotation::invisible(i)
        });
    }
    Ok(SyntheticSequence {
        frames,
        annotations,
        target_size: (w, h),
    })
}

/// Crops a `size×size` window centered on `(cx, cy)`, zero outside the frame.
pub fn crop(frame: &Tensor, cx: f64, cy: f64, size: usize) -> Result<Tensor> {
    let (c, h, w) = frame.dims3()?;
    let x0 = (cx - size as f64 / 2.0).round() as isize;
    let y0 = (cy - size as f64 / 2.0).round() as isize;
    Ok(Tensor::from_fn(&[c, size, size], |i| {
        let ch = i / (size * size);
        let (y, x) = ((i / size) % size, i % size);
        let (sy, sx) = (y0 + y as isize, x0 + x as isize);
        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
            frame.at3(ch, sy as usize, sx as usize)
        } else {
            0.0
        }
    }))
}
