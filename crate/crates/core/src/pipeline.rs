//! End-to-end commands: synthesize, train, predict, evaluate, visualize.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{load_dataset, summary_table, synth_dataset, validate_annotations, write_dataset, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, read_predictions, write_predictions, EvalReport, PredictedTrack};
use crate::model::Model;
use crate::train::{train, TrainReport};
use crate::viz::write_overlays;

pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const EVAL_FILE: &str = "eval.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

/// The configured dataset: read from `data.path`, or generated in memory.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.path {
        Some(p) => load_dataset(p),
        None => synth_dataset(&cfg.data.synth, cfg.data.n_clips, cfg.data.split),
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutcome {
    pub root: PathBuf,
    pub dataset: Dataset,
    /// Split statistics table.
    pub table: String,
}

/// Writes the synthetic dataset to `out` (or `data.path`).
pub fn cmd_synth(cfg: &RunConfig, out: Option<&Path>) -> Result<SynthOutcome> {
    let root = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.path.clone())
        .ok_or_else(|| Error::Config("synth needs --out or data.path".into()))?;
    let ds = synth_dataset(&cfg.data.synth, cfg.data.n_clips, cfg.data.split)?;
    write_dataset(&ds, &root)?;
    let report = validate_annotations(&ds);
    if !report.is_clean() {
        return Err(Error::Synth(format!(
            "generated data violates {} invariant(s)",
            report.violations.len()
        )));
    }
    let table = summary_table(&[(ds.split, report.summary)]);
    Ok(SynthOutcome {
        root,
        dataset: ds,
        table,
    })
}

fn resolve_checkpoint(cfg: &RunConfig, checkpoint: Option<&Path>) -> PathBuf {
    checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.io.checkpoint_path.clone())
}

fn resolve_out(cfg: &RunConfig, out: Option<&Path>) -> PathBuf {
    out.map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.io.output_dir.clone())
}

/// Trains from scratch, writes the checkpoint and a JSON-lines loss log.
pub fn cmd_train(cfg: &RunConfig, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<TrainReport> {
    let ckpt = resolve_checkpoint(cfg, checkpoint);
    let out = resolve_out(cfg, out);
    let ds = load_data(cfg)?;
    let mut model = Model::new(cfg, cfg.optim.seed)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let log_path = out.join(TRAIN_LOG_FILE);
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    let mut log_err = None;
    let report = train(&mut model, &ds, cfg, Some(&ckpt), |it, b| {
        let line = serde_json::json!({ "iteration": it, "loss": b });
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(Error::io(&log_path, e));
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    model.save(&ckpt, cfg)?;
    Ok(report)
}

/// Runs a trained model over every configured clip.
pub fn predict_dataset(model: &Model, ds: &Dataset, score_thresh: f64) -> Result<Vec<PredictedTrack>> {
    let mut preds = Vec::new();
    for entry in &ds.clips {
        preds.extend(model.predict(&entry.clip, score_thresh)?);
    }
    Ok(preds)
}

/// Writes `predictions.json` into the output directory and returns its path.
pub fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    out: Option<&Path>,
    score_thresh: Option<f64>,
) -> Result<PathBuf> {
    let thresh = score_thresh.unwrap_or(cfg.io.score_thresh);
    if !(thresh > 0.0 && thresh < 1.0) {
        return Err(Error::Config(format!("score threshold must lie in (0, 1), got {thresh}")));
    }
    let model = Model::load(&resolve_checkpoint(cfg, checkpoint), cfg)?;
    let ds = load_data(cfg)?;
    let preds = predict_dataset(&model, &ds, thresh)?;
    let path = resolve_out(cfg, out).join(PREDICTIONS_FILE);
    write_predictions(&path, &preds)?;
    Ok(path)
}

/// Scores `predictions.json` from the output directory; writes `eval.json` next to it.
pub fn cmd_eval(cfg: &RunConfig, out: Option<&Path>) -> Result<EvalReport> {
    let dir = resolve_out(cfg, out);
    let ds = load_data(cfg)?;
    let preds = read_predictions(&dir.join(PREDICTIONS_FILE), &ds)?;
    let report = evaluate(&preds, &ds, crate::eval::IOU_THRESHOLD)?;
    let path = dir.join(EVAL_FILE);
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Renders overlays of `predictions.json` into `<out>/viz/<clip_id>/`.
pub fn cmd_viz(cfg: &RunConfig, out: Option<&Path>) -> Result<Vec<PathBuf>> {
    let dir = resolve_out(cfg, out);
    let ds = load_data(cfg)?;
    let preds = read_predictions(&dir.join(PREDICTIONS_FILE), &ds)?;
    let mut written = Vec::new();
    for entry in &ds.clips {
        let id = &entry.clip.clip_id;
        let mine: Vec<PredictedTrack> = preds.iter().filter(|p| &p.clip_id == id).cloned().collect();
        written.extend(write_overlays(&dir.join("viz").join(id), &entry.clip, &mine)?);
    }
    Ok(written)
}
