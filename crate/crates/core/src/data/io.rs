use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

use super::{ClipEntry, Dataset, Split, TrackAnnotation, TrackKind, VideoClip};
use crate::error::{Error, Result};
use crate::mask::{BoundingBox, SpatioTemporalMask};
use crate::rle::{rle_decode, rle_encode_bool, RleMask};

pub const ANNOTATIONS_FILE: &str = "annotations.json";

const DEFAULT_FPS: f64 = 6.0;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationFile {
    clip_id: String,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "W")]
    w: usize,
    frames: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fps: Option<f64>,
    tracks: Vec<TrackRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrackRecord {
    track_id: u32,
    kind: TrackKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    held: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    held_by: Option<u32>,
    masks: Vec<Option<Vec<u64>>>,
    boxes: Vec<Option<BoundingBox>>,
}

/// Decodes a per-frame list of RLE counts (or null) into a volume.
pub(crate) fn decode_mask_list(
    masks: &[Option<Vec<u64>>],
    shape: (usize, usize, usize),
) -> Result<SpatioTemporalMask> {
    let (t, h, w) = shape;
    if masks.len() != t {
        return Err(Error::Shape(format!(
            "{} mask entries for {t} frames",
            masks.len()
        )));
    }
    let mut out = SpatioTemporalMask::zeros(t, h, w);
    for (ti, m) in masks.iter().enumerate() {
        if let Some(counts) = m {
            let frame = rle_decode(&RleMask {
                counts: counts.clone(),
                shape: (h, w),
            })?;
            out.data_mut()
                .index_axis_mut(Axis(0), ti)
                .assign(&frame.mapv(|v| v == 1));
        }
    }
    Ok(out)
}

/// Encodes a volume as per-frame RLE counts, `None` for empty frames.
pub(crate) fn encode_mask_list(mask: &SpatioTemporalMask) -> Vec<Option<Vec<u64>>> {
    (0..mask.shape().0)
        .map(|t| {
            if mask.frame_is_empty(t) {
                None
            } else {
                Some(rle_encode_bool(mask.frame(t)).counts)
            }
        })
        .collect()
}

fn frame_name(t: usize) -> String {
    format!("frame_{t:04}.png")
}

/// Writes one clip directory: PNG frames plus `annotations.json`.
pub fn write_clip(dir: &Path, entry: &ClipEntry) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let clip = &entry.clip;
    let (t, h, w) = clip.shape();
    let mut frames = Vec::with_capacity(t);
    for ti in 0..t {
        let name = frame_name(ti);
        let path = dir.join(&name);
        let raw: Vec<u8> = clip.frame(ti).iter().copied().collect();
        let img = image::RgbImage::from_raw(w as u32, h as u32, raw)
            .expect("frame buffer has H*W*3 bytes");
        img.save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
        frames.push(name);
    }
    let file = AnnotationFile {
        clip_id: clip.clip_id.clone(),
        t,
        h,
        w,
        frames,
        fps: Some(clip.fps),
        tracks: entry
            .tracks
            .iter()
            .map(|tr| TrackRecord {
                track_id: tr.track_id,
                kind: tr.kind,
                held: tr.held.clone(),
                held_by: tr.held_by,
                masks: encode_mask_list(&tr.masks),
                boxes: tr.boxes.clone(),
            })
            .collect(),
    };
    let path = dir.join(ANNOTATIONS_FILE);
    let json = serde_json::to_string(&file).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Writes every clip under `root/<clip_id>/`.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for entry in &ds.clips {
        write_clip(&root.join(&entry.clip.clip_id), entry)?;
    }
    Ok(())
}

fn clip_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(ANNOTATIONS_FILE).is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let rd = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let p = entry.path();
        if p.is_dir() && p.join(ANNOTATIONS_FILE).is_file() {
            dirs.push(p);
        }
    }
    if dirs.is_empty() {
        return Err(Error::NoAnnotations(root.to_path_buf()));
    }
    dirs.sort();
    Ok(dirs)
}

fn read_clip(dir: &Path) -> Result<ClipEntry> {
    let path = dir.join(ANNOTATIONS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: AnnotationFile = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    let cid = file.clip_id.clone();
    if file.t < 1 {
        return Err(Error::annotation(&cid, "T", "must be at least 1"));
    }
    if file.h < 16 || file.w < 16 {
        return Err(Error::annotation(&cid, "H/W", "frames must be at least 16x16"));
    }
    if file.frames.len() != file.t {
        return Err(Error::annotation(
            &cid,
            "frames",
            format!("{} entries for T={}", file.frames.len(), file.t),
        ));
    }
    let mut frames = Array4::<u8>::zeros((file.t, file.h, file.w, 3));
    for (ti, name) in file.frames.iter().enumerate() {
        let fp = dir.join(name);
        if !fp.is_file() {
            return Err(Error::annotation(
                &cid,
                format!("frames[{ti}]"),
                format!("dangling frame reference {name}"),
            ));
        }
        let img = image::open(&fp)
            .map_err(|source| Error::Image {
                path: fp.clone(),
                source,
            })?
            .to_rgb8();
        if img.width() as usize != file.w || img.height() as usize != file.h {
            return Err(Error::annotation(
                &cid,
                format!("frames[{ti}]"),
                format!(
                    "image is {}x{}, expected {}x{}",
                    img.width(),
                    img.height(),
                    file.w,
                    file.h
                ),
            ));
        }
        let view = ndarray::ArrayView3::from_shape((file.h, file.w, 3), img.as_raw())
            .expect("rgb8 buffer layout");
        frames.index_axis_mut(Axis(0), ti).assign(&view);
    }
    let shape = (file.t, file.h, file.w);
    let mut seen = HashSet::new();
    let mut tracks = Vec::with_capacity(file.tracks.len());
    for (i, rec) in file.tracks.into_iter().enumerate() {
        if !seen.insert(rec.track_id) {
            return Err(Error::annotation(
                &cid,
                format!("tracks[{i}].track_id"),
                format!("duplicate track_id {}", rec.track_id),
            ));
        }
        let masks = decode_mask_list(&rec.masks, shape)
            .map_err(|e| Error::annotation(&cid, format!("tracks[{i}].masks"), e.to_string()))?;
        if rec.boxes.len() != file.t {
            return Err(Error::annotation(
                &cid,
                format!("tracks[{i}].boxes"),
                format!("{} entries for T={}", rec.boxes.len(), file.t),
            ));
        }
        if let Some(h) = &rec.held {
            if h.len() != file.t {
                return Err(Error::annotation(
                    &cid,
                    format!("tracks[{i}].held"),
                    format!("{} entries for T={}", h.len(), file.t),
                ));
            }
        }
        if rec.kind == TrackKind::Object && rec.held.is_none() {
            return Err(Error::annotation(
                &cid,
                format!("tracks[{i}].held"),
                "object tracks need per-frame held flags",
            ));
        }
        tracks.push(TrackAnnotation {
            track_id: rec.track_id,
            kind: rec.kind,
            masks,
            boxes: rec.boxes,
            held: rec.held,
            held_by: rec.held_by,
        });
    }
    Ok(ClipEntry {
        clip: VideoClip {
            clip_id: cid,
            frames,
            fps: file.fps.unwrap_or(DEFAULT_FPS),
        },
        tracks,
    })
}

fn split_of(root: &Path) -> Split {
    root.file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.parse().ok())
        .unwrap_or_default()
}

/// Loads without checking the box/mask/held invariants.
pub fn load_dataset_unchecked(root: &Path) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::NoAnnotations(root.to_path_buf()));
    }
    let mut clips = Vec::new();
    let mut ids = HashSet::new();
    for dir in clip_dirs(root)? {
        let entry = read_clip(&dir)?;
        if !ids.insert(entry.clip.clip_id.clone()) {
            return Err(Error::annotation(
                &entry.clip.clip_id,
                "clip_id",
                "duplicate clip id in dataset",
            ));
        }
        clips.push(entry);
    }
    Ok(Dataset {
        clips,
        split: split_of(root),
    })
}

/// Loads a dataset directory and rejects any annotation invariant violation.
///
/// `root` is either a clip directory holding `annotations.json` or a directory
/// of such clip directories. The split is taken from the directory name
/// (`train`, `valid`, `test`) and defaults to train.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let ds = load_dataset_unchecked(root)?;
    let report = super::validate_annotations(&ds);
    if let Some(v) = report.violations.first() {
        return Err(Error::annotation(
            &v.clip_id,
            format!("track {}", v.track_id.map_or("-".into(), |t| t.to_string())),
            v.kind.to_string(),
        ));
    }
    Ok(ds)
}
