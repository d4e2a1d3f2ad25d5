//! File-level evaluation and the threshold sweep.

use std::fs;
use std::path::{Path, PathBuf};

use irtrack_core::metrics::{
    evaluate_sequence, evaluate_sequences, read_frames, write_curve_csv, FrameAnnotation, MetricSummary, Prediction,
    SequenceReport, ThresholdGrids,
};
use irtrack_core::par::{map_indexed, Exec};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{input_err, io_err, HarnessError, Result};
use crate::pipeline::run_pipeline;
use crate::synth::{generate_sequence, SyntheticSequence};

pub const SUMMARY_FILE: &str = "summary.json";
pub const CURVE_FILES: [&str; 3] = ["success.csv", "precision.csv", "nprecision.csv"];
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_JSON: &str = "sweep.json";
pub const SWEEP_HEADER: &str = "T,sa,msa,auc_success,auc_nprecision,precision_at_5px";

pub fn read_annotations(path: &Path) -> Result<Vec<FrameAnnotation>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let recs = read_frames(f).map_err(input_err(path))?;
    Ok(recs.iter().map(|r| r.to_annotation()).collect())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let recs = read_frames(f).map_err(input_err(path))?;
    Ok(recs.iter().map(|r| r.to_prediction()).collect())
}

/// Writes `summary.json` and the three curve CSVs into `dir`.
pub fn write_report(report: &SequenceReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let summary = dir.join(SUMMARY_FILE);
    let mut text = serde_json::to_string_pretty(&report.summary)?;
    text.push('\n');
    fs::write(&summary, text).map_err(io_err(&summary))?;
    let mut written = vec![summary];
    for (name, curve) in CURVE_FILES.iter().zip([&report.success, &report.precision, &report.nprecision]) {
        let path = dir.join(name);
        let mut buf = Vec::new();
        write_curve_csv(curve, &mut buf)?;
        fs::write(&path, buf).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}

/// Scores a prediction file against an annotation file.
pub fn evaluate_files(pred_path: &Path, anno_path: &Path, grids: &ThresholdGrids) -> Result<SequenceReport> {
    let preds = read_predictions(pred_path)?;
    let annos = read_annotations(anno_path)?;
    if preds.len() != annos.len() {
        return Err(HarnessError::Input {
            path: pred_path.to_path_buf(),
            source: irtrack_core::Error::Parameter(format!(
                "{} predictions for {} annotated frames in {}",
                preds.len(),
                annos.len(),
                anno_path.display()
            )),
        });
    }
    Ok(evaluate_sequence(&preds, &annos, grids)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "T")]
    pub threshold: f64,
    #[serde(flatten)]
    pub summary: MetricSummary,
}

impl SweepRow {
    pub fn csv_line(&self) -> String {
        let s = &self.summary;
        format!(
            "{},{},{},{},{},{}",
            self.threshold, s.sa, s.msa, s.auc_success, s.auc_nprecision, s.precision_at_5px
        )
    }
}

/// The sequences a sweep runs on: seeds `seed, seed+1, …`.
pub fn sweep_sequences(cfg: &RunConfig) -> Result<Vec<SyntheticSequence>> {
    (0..cfg.sweep.sequences as u64)
        .map(|i| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(i);
            generate_sequence(&c)
        })
        .collect()
}

/// One summary row per configured `T`, all other settings held fixed.
pub fn run_t_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let seqs = sweep_sequences(cfg)?;
    let grids = cfg.metrics.grids();
    let ts = &cfg.sweep.thresholds;
    let n = seqs.len();
    let runs = map_indexed(Exec::default(), ts.len() * n, |k| {
        let mut c = cfg.clone();
        c.imc.threshold = ts[k / n];
        run_pipeline(&seqs[k % n], &c)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    ts.iter()
        .enumerate()
        .map(|(i, &t)| {
            let batch: Vec<(Vec<Prediction>, Vec<FrameAnnotation>)> = (0..n)
                .map(|j| (runs[i * n + j].clone(), seqs[j].annotations.clone()))
                .collect();
            let (summary, _) = evaluate_sequences(&batch, &grids)?;
            Ok(SweepRow { threshold: t, summary })
        })
        .collect()
}

pub fn write_sweep(rows: &[SweepRow], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv = dir.join(SWEEP_CSV);
    let mut text = String::from(SWEEP_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    fs::write(&csv, text).map_err(io_err(&csv))?;
    let json = dir.join(SWEEP_JSON);
    let mut body = serde_json::to_string_pretty(rows)?;
    body.push('\n');
    fs::write(&json, body).map_err(io_err(&json))?;
    Ok(vec![csv, json])
}
