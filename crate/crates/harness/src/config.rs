//! Run configuration, read from JSON. Every section is optional and falls
//! back to the desk-scale defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use irtrack_core::attention::{Cumulative, DropMode, ImcOptions, DEFAULT_HEADS};
use irtrack_core::fusion::{ChannelInput, FusionMode};
use irtrack_core::metrics::{
    normalized_precision_thresholds, precision_thresholds, success_thresholds, ThresholdGrids, PRECISION_HEADLINE_PX,
};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};

pub const DEFAULT_SEED: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub imc: ImcConfig,
    pub dsfam: DsfamConfig,
    pub dcfam: DcfamConfig,
    pub image: ImageConfig,
    pub model: ModelConfig,
    pub sequence: SequenceConfig,
    pub tracker: TrackerConfig,
    pub metrics: MetricsConfig,
    pub distill: DistillConfig,
    pub sweep: SweepConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImcConfig {
    #[serde(rename = "T", alias = "threshold")]
    pub threshold: f64,
    pub cumulative: Cumulative,
    pub drop: DropMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DsfamConfig {
    pub fusion: FusionMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcfamConfig {
    pub fusion: FusionMode,
    pub input: ChannelInput,
}

/// Square frame and template crop sizes in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageConfig {
    pub search_size: usize,
    pub template_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub convs_per_stage: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    pub frames: usize,
    /// Target extents are drawn from `[size_min, size_max]` pixels.
    pub size_min: usize,
    pub size_max: usize,
    /// Pixels per frame.
    pub speed: f64,
    /// 0 gives a smooth background only; 1 adds noise and four distractors.
    pub clutter: f64,
    /// Per-frame chance of starting an occlusion run.
    pub occlusion: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Frames whose peak response falls below this fraction of the first
    /// frame's peak are reported as target absent.
    pub absent_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub precision: Vec<f64>,
    pub nprecision: Vec<f64>,
    pub success: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub steps: usize,
    /// Template/search pairs drawn from the synthetic sequence.
    pub pairs: usize,
    pub learning_rate: f64,
    pub teacher_channels: Vec<usize>,
    pub teacher_convs: usize,
    pub student_channels: Vec<usize>,
    pub student_convs: usize,
    /// Start the student as an exact copy of the teacher.
    pub copy_teacher: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub thresholds: Vec<f64>,
    pub sequences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: DEFAULT_SEED,
            imc: ImcConfig::default(),
            dsfam: DsfamConfig::default(),
            dcfam: DcfamConfig::default(),
            image: ImageConfig::default(),
            model: ModelConfig::default(),
            sequence: SequenceConfig::default(),
            tracker: TrackerConfig::default(),
            metrics: MetricsConfig::default(),
            distill: DistillConfig::default(),
            sweep: SweepConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl Default for ImcConfig {
    fn default() -> Self {
        let o = ImcOptions::default();
        ImcConfig {
            threshold: o.threshold,
            cumulative: o.cumulative,
            drop: o.drop,
        }
    }
}

impl Default for DsfamConfig {
    fn default() -> Self {
        DsfamConfig {
            fusion: FusionMode::Attention,
        }
    }
}

impl Default for DcfamConfig {
    fn default() -> Self {
        DcfamConfig {
            fusion: FusionMode::Attention,
            input: ChannelInput::Fused,
        }
    }
}

impl Default for ImageConfig {
    fn default() -> Self {
        ImageConfig {
            search_size: 64,
            template_size: 32,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            depth: 3,
            heads: DEFAULT_HEADS,
            convs_per_stage: 1,
        }
    }
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            frames: 60,
            size_min: 6,
            size_max: 16,
            speed: 1.5,
            clutter: 0.0,
            occlusion: 0.0,
        }
    }
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig { absent_ratio: 0.25 }
    }
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            precision: precision_thresholds(),
            nprecision: normalized_precision_thresholds(),
            success: success_thresholds(),
        }
    }
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: 10,
            pairs: 3,
            learning_rate: 0.5,
            teacher_channels: vec![8, 12, 16],
            teacher_convs: 2,
            student_channels: vec![4, 8, 8],
            student_convs: 1,
            copy_teacher: false,
        }
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            thresholds: vec![0.5, 0.6, 0.7, 0.8, 1.0],
            sequences: 3,
        }
    }
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("runs") }
    }
}

impl ImcConfig {
    pub fn options(&self) -> ImcOptions {
        ImcOptions {
            threshold: self.threshold,
            cumulative: self.cumulative,
            drop: self.drop,
        }
    }
}

impl MetricsConfig {
    pub fn grids(&self) -> ThresholdGrids {
        ThresholdGrids {
            precision: self.precision.clone(),
            nprecision: self.nprecision.clone(),
            success: self.success.clone(),
        }
    }
}

impl ModelConfig {
    pub fn stride(&self) -> usize {
        1 << self.depth
    }
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

fn check_grid(name: &str, g: &[f64]) -> Result<()> {
    if g.is_empty() {
        return Err(bad(format!("metrics.{name} is empty")));
    }
    if g.iter().any(|t| !t.is_finite()) || g.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(bad(format!("metrics.{name} must be finite and strictly ascending")));
    }
    Ok(())
}

fn check_threshold(where_: &str, t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(bad(format!("{where_} must lie in (0, 1], got {t}")))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        RunConfig::from_json(&text).map_err(|e| match e {
            HarnessError::Config(m) => bad(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        check_threshold("imc.T", self.imc.threshold)?;

        let m = &self.model;
        if m.depth == 0 || m.depth > 6 {
            return Err(bad(format!("model.depth must be in 1..=6, got {}", m.depth)));
        }
        if m.convs_per_stage == 0 {
            return Err(bad("model.convs_per_stage must be positive"));
        }
        if m.heads == 0 || m.channels == 0 || m.channels % m.heads != 0 {
            return Err(bad(format!(
                "model.channels ({}) must be a positive multiple of model.heads ({})",
                m.channels, m.heads
            )));
        }
        if m.channels % 2 != 0 {
            return Err(bad("model.channels must be even"));
        }

        let im = &self.image;
        let stride = m.stride();
        for (name, v) in [("search_size", im.search_size), ("template_size", im.template_size)] {
            if v == 0 || v % stride != 0 {
                return Err(bad(format!("image.{name} ({v}) must be a positive multiple of {stride}")));
            }
        }
        if im.template_size > im.search_size {
            return Err(bad("image.template_size exceeds image.search_size"));
        }

        let s = &self.sequence;
        if s.frames == 0 {
            return Err(bad("sequence.frames must be positive"));
        }
        if s.size_min == 0 || s.size_min > s.size_max {
            return Err(bad(format!(
                "sequence size range [{}, {}] is empty",
                s.size_min, s.size_max
            )));
        }
        if s.size_max + 2 > im.search_size {
            return Err(bad(format!(
                "target size {} does not fit a {} px frame",
                s.size_max, im.search_size
            )));
        }
        if !(s.speed >= 0.0 && s.speed.is_finite()) {
            return Err(bad("sequence.speed must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&s.clutter) {
            return Err(bad("sequence.clutter must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&s.occlusion) {
            return Err(bad("sequence.occlusion must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.tracker.absent_ratio) {
            return Err(bad("tracker.absent_ratio must lie in [0, 1)"));
        }

        check_grid("precision", &self.metrics.precision)?;
        check_grid("nprecision", &self.metrics.nprecision)?;
        check_grid("success", &self.metrics.success)?;
        if !self.metrics.precision.contains(&PRECISION_HEADLINE_PX) {
            return Err(bad("metrics.precision must contain the 5 px threshold"));
        }

        let d = &self.distill;
        if d.teacher_channels.len() != m.depth || d.student_channels.len() != m.depth {
            return Err(bad(format!(
                "distill channel lists need one entry per stage ({})",
                m.depth
            )));
        }
        if d.teacher_channels.iter().chain(&d.student_channels).any(|&c| c == 0) {
            return Err(bad("distill channel counts must be positive"));
        }
        if d.teacher_convs == 0 || d.student_convs == 0 || d.pairs == 0 {
            return Err(bad("distill.teacher_convs, student_convs and pairs must be positive"));
        }
        if !(d.learning_rate > 0.0 && d.learning_rate.is_finite()) {
            return Err(bad("distill.learning_rate must be positive"));
        }

        if self.sweep.thresholds.is_empty() || self.sweep.sequences == 0 {
            return Err(bad("sweep needs at least one threshold and one sequence"));
        }
        for &t in &self.sweep.thresholds {
            check_threshold("sweep.thresholds", t)?;
        }
        Ok(())
    }
}
