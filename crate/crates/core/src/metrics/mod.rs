//! Single-object tracking metrics: IoU success, center-error precision,
//! normalized precision, AUC and state accuracy.
//!
//! Conventions: precision counts `error <= t`; success counts `IoU > t`.
//! Frames where the target is invisible are left out of the precision and
//! success denominators and only scored by state accuracy. An empty
//! prediction on a visible frame has IoU 0 and no center, so it never counts
//! as a precision hit.

mod io;
#[cfg(test)]
mod tests;

pub use io::{read_frames, read_frames_str, write_curve_csv, write_frames, FrameRecord};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{map_indexed, Exec};

/// Threshold at which the headline precision score is read, in pixels.
pub const PRECISION_HEADLINE_PX: f64 = 5.0;

/// Axis-aligned box, top-left corner plus extents, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if ![x, y, w, h].iter().all(|v| v.is_finite()) || w < 0.0 || h < 0.0 {
            return Err(Error::Parameter(format!(
                "invalid box ({x}, {y}, {w}, {h})"
            )));
        }
        Ok(BoundingBox { x, y, w, h })
    }

    /// Box of extents `w×h` centered on `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        BoundingBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        BoundingBox {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }
}

/// A tracker output for one frame; `None` asserts the target is absent.
pub type Prediction = Option<BoundingBox>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub frame_index: usize,
    pub gt: Option<BoundingBox>,
    pub visible: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

impl FrameAnnotation {
    pub fn new(frame_index: usize, gt: Option<BoundingBox>, visible: bool) -> Result<Self> {
        if visible && gt.is_none() {
            return Err(Error::Parameter(format!(
                "frame {frame_index}: visible target without a box"
            )));
        }
        Ok(FrameAnnotation {
            frame_index,
            gt,
            visible,
            tags: Vec::new(),
        })
    }

    pub fn visible(frame_index: usize, gt: BoundingBox) -> Self {
        FrameAnnotation {
            frame_index,
            gt: Some(gt),
            visible: true,
            tags: Vec::new(),
        }
    }

    pub fn invisible(frame_index: usize) -> Self {
        FrameAnnotation {
            frame_index,
            gt: None,
            visible: false,
            tags: Vec::new(),
        }
    }

    fn visible_box(&self) -> Option<&BoundingBox> {
        if self.visible {
            self.gt.as_ref()
        } else {
            None
        }
    }
}

/// Sampled curve over ascending thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCurve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
}

impl MetricCurve {
    pub fn new(thresholds: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if thresholds.len() != values.len() {
            return Err(Error::Parameter("curve thresholds and values differ in length".into()));
        }
        if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Parameter("curve thresholds must be strictly ascending".into()));
        }
        Ok(MetricCurve { thresholds, values })
    }

    /// Value at the first threshold equal to `t`.
    pub fn value_at(&self, t: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&x| x == t)
            .map(|i| self.values[i])
    }
}

/// `{0, 1, …, 50}` pixels.
pub fn precision_thresholds() -> Vec<f64> {
    (0..=50).map(f64::from).collect()
}

/// `{0, 0.005, …, 0.5}`.
pub fn normalized_precision_thresholds() -> Vec<f64> {
    (0..=100).map(|i| f64::from(i) / 200.0).collect()
}

/// `{0, 0.05, …, 1.0}`.
pub fn success_thresholds() -> Vec<f64> {
    (0..=20).map(|i| f64::from(i) / 20.0).collect()
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    // Extents from the same endpoints as the overlap, so iou(a, a) is exactly 1.
    let span = |b: &BoundingBox| ((b.x + b.w) - b.x) * ((b.y + b.h) - b.y);
    let union = span(a) + span(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

fn require_box<'a>(b: &'a Prediction, what: &str) -> Result<&'a BoundingBox> {
    b.as_ref()
        .ok_or_else(|| Error::Precondition(format!("{what} is EMPTY")))
}

/// [`iou`] over possibly empty boxes; an EMPTY input is a contract error.
pub fn iou_checked(a: &Prediction, b: &Prediction) -> Result<f64> {
    Ok(iou(require_box(a, "first box")?, require_box(b, "second box")?))
}

/// Euclidean distance between box centers.
pub fn center_error(pred: &BoundingBox, gt: &BoundingBox) -> f64 {
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    (px - gx).hypot(py - gy)
}

pub fn center_error_checked(pred: &Prediction, gt: &Prediction) -> Result<f64> {
    Ok(center_error(require_box(pred, "prediction")?, require_box(gt, "ground truth")?))
}

/// Center offset divided by the ground-truth extents, then its norm.
pub fn normalized_center_error(pred: &BoundingBox, gt: &BoundingBox) -> Result<f64> {
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(Error::Precondition(format!(
            "normalized error needs positive ground-truth extents, got {}x{}",
            gt.w, gt.h
        )));
    }
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    Ok(((px - gx) / gt.w).hypot((py - gy) / gt.h))
}

fn check_lengths(preds: &[Prediction], annos: &[FrameAnnotation]) -> Result<()> {
    if preds.len() != annos.len() {
        return Err(Error::Parameter(format!(
            "{} predictions for {} annotated frames",
            preds.len(),
            annos.len()
        )));
    }
    Ok(())
}

/// Per counted (visible) frame: `Some(error)` or `None` for an EMPTY
/// prediction.
fn visible_errors(
    preds: &[Prediction],
    annos: &[FrameAnnotation],
    err: impl Fn(&BoundingBox, &BoundingBox) -> Result<f64>,
) -> Result<Vec<Option<f64>>> {
    check_lengths(preds, annos)?;
    let out: Vec<Option<f64>> = preds
        .iter()
        .zip(annos)
        .filter_map(|(p, a)| a.visible_box().map(|gt| (p, gt)))
        .map(|(p, gt)| p.as_ref().map(|p| err(p, gt)).transpose())
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::Evaluation("no frame with a visible target".into()));
    }
    Ok(out)
}

fn fraction_curve(samples: &[Option<f64>], thresholds: &[f64], hit: impl Fn(f64, f64) -> bool) -> Result<MetricCurve> {
    let n = samples.len() as f64;
    let values = thresholds
        .iter()
        .map(|&t| samples.iter().filter(|s| s.is_some_and(|v| hit(v, t))).count() as f64 / n)
        .collect();
    MetricCurve::new(thresholds.to_vec(), values)
}

/// Fraction of visible frames with center error `<= t`.
pub fn precision_curve(preds: &[Prediction], annos: &[FrameAnnotation], thresholds: &[f64]) -> Result<MetricCurve> {
    let errs = visible_errors(preds, annos, |p, g| Ok(center_error(p, g)))?;
    fraction_curve(&errs, thresholds, |e, t| e <= t)
}

/// Fraction of visible frames with normalized center error `<= t`.
pub fn normalized_precision_curve(preds: &[Prediction], annos: &[FrameAnnotation], thresholds: &[f64]) -> Result<MetricCurve> {
    let errs = visible_errors(preds, annos, normalized_center_error)?;
    fraction_curve(&errs, thresholds, |e, t| e <= t)
}

/// Fraction of visible frames with IoU strictly above `t`.
pub fn success_curve(preds: &[Prediction], annos: &[FrameAnnotation], thresholds: &[f64]) -> Result<MetricCurve> {
    let ious: Vec<Option<f64>> = visible_errors(preds, annos, |p, g| Ok(iou(p, g)))?
        .into_iter()
        .map(|v| Some(v.unwrap_or(0.0)))
        .collect();
    fraction_curve(&ious, thresholds, |v, t| v > t)
}

/// Mean of the sampled curve values.
pub fn auc(c: &MetricCurve) -> Result<f64> {
    if c.values.is_empty() {
        return Err(Error::Evaluation("AUC of an empty curve".into()));
    }
    Ok(c.values.iter().sum::<f64>() / c.values.len() as f64)
}

/// Mean per-frame state score: IoU on visible frames (0 for EMPTY), and on
/// invisible frames 1 if the prediction is EMPTY, else 0.
pub fn state_accuracy(preds: &[Prediction], annos: &[FrameAnnotation]) -> Result<f64> {
    check_lengths(preds, annos)?;
    if preds.is_empty() {
        return Err(Error::Evaluation("state accuracy of an empty sequence".into()));
    }
    let total: f64 = preds
        .iter()
        .zip(annos)
        .map(|(p, a)| match (a.visible_box(), p) {
            (Some(gt), Some(p)) => iou(p, gt),
            (Some(_), None) => 0.0,
            (None, None) => 1.0,
            (None, Some(_)) => 0.0,
        })
        .sum();
    Ok(total / preds.len() as f64)
}

/// Mean of per-sequence state accuracies.
pub fn msa(per_sequence: &[f64]) -> Result<f64> {
    if per_sequence.is_empty() {
        return Err(Error::Evaluation("mSA over zero sequences".into()));
    }
    Ok(per_sequence.iter().sum::<f64>() / per_sequence.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub sa: f64,
    pub msa: f64,
    pub auc_success: f64,
    pub auc_nprecision: f64,
    pub precision_at_5px: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceReport {
    pub summary: MetricSummary,
    pub success: MetricCurve,
    pub precision: MetricCurve,
    pub nprecision: MetricCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrids {
    pub precision: Vec<f64>,
    pub nprecision: Vec<f64>,
    pub success: Vec<f64>,
}

impl Default for ThresholdGrids {
    fn default() -> Self {
        ThresholdGrids {
            precision: precision_thresholds(),
            nprecision: normalized_precision_thresholds(),
            success: success_thresholds(),
        }
    }
}

/// All metrics of one sequence. `msa` equals `sa` for a single sequence.
pub fn evaluate_sequence(preds: &[Prediction], annos: &[FrameAnnotation], grids: &ThresholdGrids) -> Result<SequenceReport> {
    let success = success_curve(preds, annos, &grids.success)?;
    let precision = precision_curve(preds, annos, &grids.precision)?;
    let nprecision = normalized_precision_curve(preds, annos, &grids.nprecision)?;
    let sa = state_accuracy(preds, annos)?;
    let precision_at_5px = precision
        .value_at(PRECISION_HEADLINE_PX)
        .ok_or_else(|| Error::Parameter("precision grid lacks the 5 px threshold".into()))?;
    Ok(SequenceReport {
        summary: MetricSummary {
            sa,
            msa: sa,
            auc_success: auc(&success)?,
            auc_nprecision: auc(&nprecision)?,
            precision_at_5px,
        },
        success,
        precision,
        nprecision,
    })
}

/// Evaluates sequences independently (in parallel when enabled) and
/// averages the summaries; `msa` is the mean of per-sequence `sa`.
pub fn evaluate_sequences(seqs: &[(Vec<Prediction>, Vec<FrameAnnotation>)], grids: &ThresholdGrids) -> Result<(MetricSummary, Vec<SequenceReport>)> {
    let reports = map_indexed(Exec::default(), seqs.len(), |i| {
        evaluate_sequence(&seqs[i].0, &seqs[i].1, grids)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mean = |f: fn(&MetricSummary) -> f64| {
        reports.iter().map(|r| f(&r.summary)).sum::<f64>() / reports.len() as f64
    };
    let sas: Vec<f64> = reports.iter().map(|r| r.summary.sa).collect();
    let msa_value = msa(&sas)?;
    Ok((
        MetricSummary {
            sa: msa_value,
            msa: msa_value,
            auc_success: mean(|s| s.auc_success),
            auc_nprecision: mean(|s| s.auc_nprecision),
            precision_at_5px: mean(|s| s.precision_at_5px),
        },
        reports,
    ))
}
