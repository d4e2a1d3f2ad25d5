//! Command-line front end.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use irtrack_core::metrics::{evaluate_sequence, write_frames, FrameRecord, Prediction};
use irtrack_core::tensor::{read_tensor_bin, write_tensor_bin};

use crate::config::RunConfig;
use crate::distill_demo::run_distill_demo;
use crate::error::{input_err, io_err, HarnessError, Result};
use crate::evaluate::{evaluate_files, read_annotations, run_t_sweep, write_report, write_sweep};
use crate::pipeline::{run_pipeline_with, AttentionKind};
use crate::plot::{read_curve_csv, render_svg};
use crate::synth::{generate_sequence, SyntheticSequence};

pub const FRAMES_FILE: &str = "frames.bin";
pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
pub const LOSSES_FILE: &str = "losses.csv";

#[derive(Debug, Parser)]
#[command(name = "irtrack", version, about = "Infrared small-target tracking experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `<output.dir>/<command>-seed<seed>`.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Print nothing on success.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AttentionArg {
    Thresholded,
    Vanilla,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic sequence and its annotations.
    Gen,
    /// Run the tracker and write per-frame predictions.
    Track {
        /// Directory written by `gen`; a fresh sequence is generated if absent.
        #[arg(long)]
        sequence: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "thresholded")]
        attention: AttentionArg,
    },
    /// Teacher/student distillation demo.
    Distill,
    /// Score predictions against annotations.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        anno: PathBuf,
    },
    /// Tracking metrics for each threshold in `sweep.thresholds`.
    SweepT,
    /// Render `threshold,value` CSV curves as an SVG plot.
    Plot {
        /// Curve CSVs, optionally `label=path`.
        #[arg(long = "input", required = true)]
        inputs: Vec<String>,
        /// SVG file name inside the output directory.
        #[arg(long, default_value = "plot.svg")]
        name: String,
        #[arg(long, default_value = "")]
        title: String,
        #[arg(long, default_value = "threshold")]
        x_label: String,
        #[arg(long, default_value = "value")]
        y_label: String,
    },
}

impl Command {
    fn slug(&self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Track { .. } => "track",
            Command::Distill => "distill",
            Command::Eval { .. } => "eval",
            Command::SweepT => "sweep-t",
            Command::Plot { .. } => "plot",
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_err(path))
}

fn write_json(path: &Path, body: String) -> Result<()> {
    write_file(path, body + "\n")
}

fn write_records(path: &Path, records: &[FrameRecord]) -> Result<()> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    write_frames(records, BufWriter::new(f))?;
    Ok(())
}

pub fn save_sequence(seq: &SyntheticSequence, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let frames = dir.join(FRAMES_FILE);
    let f = fs::File::create(&frames).map_err(io_err(&frames))?;
    write_tensor_bin(&seq.stacked()?, BufWriter::new(f))?;
    let annos = dir.join(ANNOTATIONS_FILE);
    let records: Vec<FrameRecord> = seq.annotations.iter().map(FrameRecord::from_annotation).collect();
    write_records(&annos, &records)?;
    Ok(vec![frames, annos])
}

pub fn load_sequence(dir: &Path) -> Result<SyntheticSequence> {
    let frames_path = dir.join(FRAMES_FILE);
    let f = fs::File::open(&frames_path).map_err(io_err(&frames_path))?;
    let frames = read_tensor_bin(std::io::BufReader::new(f)).map_err(input_err(&frames_path))?;
    let annos = read_annotations(&dir.join(ANNOTATIONS_FILE))?;
    SyntheticSequence::from_stacked(&frames, annos)
}

fn predictions_to_records(preds: &[Prediction]) -> Vec<FrameRecord> {
    preds
        .iter()
        .enumerate()
        .map(|(i, p)| FrameRecord::from_prediction(i, p))
        .collect()
}

fn parse_input(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((label, path)) if !label.is_empty() => (label.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(spec);
            let label = path
                .file_stem()
                .map_or_else(|| spec.to_string(), |s| s.to_string_lossy().into_owned());
            (label, path)
        }
    }
}

/// Runs one command; returns the files written.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let out = cli
        .common
        .out_dir
        .clone()
        .unwrap_or_else(|| cfg.output.dir.join(format!("{}-seed{}", cli.command.slug(), cfg.seed)));
    fs::create_dir_all(&out).map_err(io_err(&out))?;

    let mut written = Vec::new();
    match &cli.command {
        Command::Gen => {
            let seq = generate_sequence(&cfg)?;
            written.extend(save_sequence(&seq, &out)?);
        }
        Command::Track { sequence, attention } => {
            let seq = match sequence {
                Some(dir) => load_sequence(dir)?,
                None => generate_sequence(&cfg)?,
            };
            let kind = match attention {
                AttentionArg::Thresholded => AttentionKind::Thresholded,
                AttentionArg::Vanilla => AttentionKind::Vanilla,
            };
            let preds = run_pipeline_with(&seq, &cfg, kind)?;
            let path = out.join(PREDICTIONS_FILE);
            write_records(&path, &predictions_to_records(&preds))?;
            written.push(path);
            if sequence.is_none() {
                written.extend(save_sequence(&seq, &out)?);
            }
            let report = evaluate_sequence(&preds, &seq.annotations, &cfg.metrics.grids())?;
            written.extend(write_report(&report, &out)?);
        }
        Command::Distill => {
            let report = run_distill_demo(&cfg)?;
            let path = out.join(REPORT_FILE);
            write_json(&path, report.to_json())?;
            written.push(path);
            let losses = out.join(LOSSES_FILE);
            let mut text = String::from("step,loss\n");
            for (i, l) in report.losses.iter().enumerate() {
                text.push_str(&format!("{i},{l}\n"));
            }
            write_file(&losses, text)?;
            written.push(losses);
        }
        Command::Eval { pred, anno } => {
            let report = evaluate_files(pred, anno, &cfg.metrics.grids())?;
            written.extend(write_report(&report, &out)?);
        }
        Command::SweepT => {
            let rows = run_t_sweep(&cfg)?;
            written.extend(write_sweep(&rows, &out)?);
        }
        Command::Plot {
            inputs,
            name,
            title,
            x_label,
            y_label,
        } => {
            let curves = inputs
                .iter()
                .map(|s| {
                    let (label, path) = parse_input(s);
                    Ok((label, read_curve_csv(&path)?))
                })
                .collect::<Result<Vec<_>>>()?;
            if Path::new(name).file_name().map(|f| f != name.as_str()).unwrap_or(true) {
                return Err(HarnessError::Config(format!("plot name `{name}` must be a bare file name")));
            }
            let path = out.join(name);
            write_file(&path, render_svg(&curves, title, x_label, y_label))?;
            written.push(path);
        }
    }
    let cfg_path = out.join(CONFIG_FILE);
    write_json(&cfg_path, cfg.to_json())?;
    written.push(cfg_path);
    Ok(written)
}
