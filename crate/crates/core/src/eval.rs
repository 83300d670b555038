//! Spatio-temporal IoU, greedy TP/FP assignment and average precision.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::io_util::{decode_mask_list, encode_mask_list};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mask::SpatioTemporalMask;

/// IoU threshold; a prediction is a true positive when its IoU is strictly greater.
pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedTrack {
    pub clip_id: String,
    pub track_id: u32,
    pub score: f64,
    pub mask: SpatioTemporalMask,
}

/// Intersection over union of two volumes, with counts summed over all frames.
///
/// Two empty volumes have IoU 1.
pub fn st_iou(m: &SpatioTemporalMask, gt: &SpatioTemporalMask) -> Result<f64> {
    if m.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction is {:?}, ground truth {:?}",
            m.shape(),
            gt.shape()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in m.data().iter().zip(gt.data().iter()) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Tp,
    Fp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    /// One label per prediction, in input order.
    pub labels: Vec<Label>,
    /// Matched ground-truth index and IoU for each true positive.
    pub matches: Vec<Option<(usize, f64)>>,
    pub false_negatives: usize,
}

/// Greedy assignment of score-sorted predictions to ground truth.
///
/// Each prediction takes the unmatched ground truth with the highest IoU; it is
/// a true positive iff that IoU exceeds `thresh`, which consumes the ground truth.
pub fn match_predictions(
    preds: &[&SpatioTemporalMask],
    gts: &[&SpatioTemporalMask],
    thresh: f64,
) -> Result<MatchOutcome> {
    let mut taken = vec![false; gts.len()];
    let mut labels = Vec::with_capacity(preds.len());
    let mut matches = Vec::with_capacity(preds.len());
    for p in preds {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let iou = st_iou(p, g)?;
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        match best {
            Some((j, iou)) if iou > thresh => {
                taken[j] = true;
                labels.push(Label::Tp);
                matches.push(Some((j, iou)));
            }
            _ => {
                labels.push(Label::Fp);
                matches.push(None);
            }
        }
    }
    Ok(MatchOutcome {
        labels,
        matches,
        false_negatives: taken.iter().filter(|&&t| !t).count(),
    })
}

/// Area under the precision-recall curve with the precision envelope
/// (all-point interpolation). `labels` must be in descending score order.
///
/// With no ground truth the result is 1 when there are no predictions and 0 otherwise.
pub fn average_precision(labels: &[Label], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if labels.is_empty() { 1.0 } else { 0.0 };
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(labels.len());
    let mut recall = Vec::with_capacity(labels.len());
    for (i, l) in labels.iter().enumerate() {
        if *l == Label::Tp {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipCounts {
    pub clip_id: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub n_gt: usize,
    pub n_pred: usize,
    pub per_clip: Vec<ClipCounts>,
    pub matched_ious: Vec<f64>,
}

/// Scores predictions against the hand-held object tracks of `ds`.
///
/// Predictions from all clips are pooled and ranked by score; matching happens
/// within each clip and a single dataset-level AP is reported.
pub fn evaluate(preds: &[PredictedTrack], ds: &Dataset, thresh: f64) -> Result<EvalReport> {
    let mut unknown = Vec::new();
    for p in preds {
        match ds.clip(&p.clip_id) {
            None => unknown.push(p.clip_id.clone()),
            Some(c) if c.clip.shape() != p.mask.shape() => {
                return Err(Error::Predictions(format!(
                    "clip {} track {}: mask shape {:?}, clip shape {:?}",
                    p.clip_id,
                    p.track_id,
                    p.mask.shape(),
                    c.clip.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(Error::Predictions(format!(
            "unknown clip_id(s): {}",
            unknown.join(", ")
        )));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));

    let mut labels = vec![Label::Fp; preds.len()];
    let mut per_clip = Vec::with_capacity(ds.clips.len());
    let mut matched_ious = Vec::new();
    let mut n_gt = 0;
    for entry in &ds.clips {
        let cid = &entry.clip.clip_id;
        let gts: Vec<&SpatioTemporalMask> = entry
            .tracks
            .iter()
            .filter(|t| t.is_hand_held_instance())
            .map(|t| &t.masks)
            .collect();
        n_gt += gts.len();
        let idx: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| &preds[i].clip_id == cid)
            .collect();
        let masks: Vec<&SpatioTemporalMask> = idx.iter().map(|&i| &preds[i].mask).collect();
        let outcome = match_predictions(&masks, &gts, thresh)?;
        for (k, &i) in idx.iter().enumerate() {
            labels[i] = outcome.labels[k];
            if let Some((_, iou)) = outcome.matches[k] {
                matched_ious.push(iou);
            }
        }
        let tp = outcome.labels.iter().filter(|&&l| l == Label::Tp).count();
        per_clip.push(ClipCounts {
            clip_id: cid.clone(),
            tp,
            fp: outcome.labels.len() - tp,
            fn_: outcome.false_negatives,
        });
    }
    let ranked: Vec<Label> = order.iter().map(|&i| labels[i]).collect();
    Ok(EvalReport {
        ap: average_precision(&ranked, n_gt),
        n_gt,
        n_pred: preds.len(),
        per_clip,
        matched_ious,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionRecord {
    clip_id: String,
    track_id: u32,
    score: f64,
    masks: Vec<Option<Vec<u64>>>,
}

pub fn predictions_to_json(preds: &[PredictedTrack]) -> String {
    let recs: Vec<PredictionRecord> = preds
        .iter()
        .map(|p| PredictionRecord {
            clip_id: p.clip_id.clone(),
            track_id: p.track_id,
            score: p.score,
            masks: encode_mask_list(&p.mask),
        })
        .collect();
    serde_json::to_string(&recs).expect("predictions serialize")
}

pub fn write_predictions(path: &Path, preds: &[PredictedTrack]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, predictions_to_json(preds)).map_err(|e| Error::io(path, e))
}

/// Parses a predictions document, resolving mask shapes from `ds`.
///
/// Every unknown clip id and malformed mask is collected into one error.
pub fn predictions_from_json(text: &str, ds: &Dataset) -> Result<Vec<PredictedTrack>> {
    let recs: Vec<PredictionRecord> =
        serde_json::from_str(text).map_err(|e| Error::Predictions(format!("schema: {e}")))?;
    let shapes: HashMap<&str, (usize, usize, usize)> = ds
        .clips
        .iter()
        .map(|c| (c.clip.clip_id.as_str(), c.clip.shape()))
        .collect();
    let mut problems = Vec::new();
    let mut out = Vec::with_capacity(recs.len());
    for (i, r) in recs.into_iter().enumerate() {
        let Some(&shape) = shapes.get(r.clip_id.as_str()) else {
            problems.push(format!("[{i}] unknown clip_id {}", r.clip_id));
            continue;
        };
        if !r.score.is_finite() {
            problems.push(format!("[{i}] non-finite score"));
            continue;
        }
        match decode_mask_list(&r.masks, shape) {
            Ok(mask) => out.push(PredictedTrack {
                clip_id: r.clip_id,
                track_id: r.track_id,
                score: r.score,
                mask,
            }),
            Err(e) => problems.push(format!("[{i}] clip {}: {e}", r.clip_id)),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Predictions(problems.join("; ")));
    }
    Ok(out)
}

pub fn read_predictions(path: &Path, ds: &Dataset) -> Result<Vec<PredictedTrack>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    predictions_from_json(&text, ds)
}

/// Reads a predictions file and evaluates it against `ds`.
pub fn evaluate_dataset(pred_file: &Path, ds: &Dataset, thresh: f64) -> Result<EvalReport> {
    let preds = read_predictions(pred_file, ds)?;
    evaluate(&preds, ds, thresh)
}
