//! Clips, track annotations, datasets and their on-disk format.

mod io;
pub(crate) mod io_util {
    pub(crate) use super::io::{decode_mask_list, encode_mask_list};
}
mod synth;
mod validate;

pub use io::{load_dataset, load_dataset_unchecked, write_clip, write_dataset, ANNOTATIONS_FILE};
pub use synth::{synth_clip, synth_dataset, SynthConfig};
pub use validate::{validate_annotations, ValidationReport, Violation, ViolationKind};

use std::fmt;

use ndarray::{Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::mask::{BoundingBox, SpatioTemporalMask};

/// A `T×H×W×3` RGB clip.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub clip_id: String,
    pub frames: Array4<u8>,
    pub fps: f64,
}

impl VideoClip {
    /// `(T, H, W)`
    pub fn shape(&self) -> (usize, usize, usize) {
        let (t, h, w, _) = self.frames.dim();
        (t, h, w)
    }

    pub fn frame(&self, t: usize) -> ArrayView3<'_, u8> {
        self.frames.index_axis(Axis(0), t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackKind {
    Hand,
    Object,
}

/// One hand or object instance followed through a clip.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackAnnotation {
    pub track_id: u32,
    pub kind: TrackKind,
    pub masks: SpatioTemporalMask,
    pub boxes: Vec<Option<BoundingBox>>,
    /// Per-frame held flags; `None` for hands.
    pub held: Option<Vec<bool>>,
    /// Track id of the hand holding this object, when known.
    pub held_by: Option<u32>,
}

impl TrackAnnotation {
    /// Builds an annotation whose boxes are the tight boxes of `masks`.
    pub fn from_masks(
        track_id: u32,
        kind: TrackKind,
        masks: SpatioTemporalMask,
        held: Option<Vec<bool>>,
        held_by: Option<u32>,
    ) -> Self {
        let boxes = (0..masks.shape().0).map(|t| masks.frame_bbox(t)).collect();
        TrackAnnotation {
            track_id,
            kind,
            masks,
            boxes,
            held,
            held_by,
        }
    }

    /// Objects held in at least one frame; these are the evaluation targets.
    pub fn is_hand_held_instance(&self) -> bool {
        self.kind == TrackKind::Object
            && self
                .held
                .as_ref()
                .map(|h| h.iter().any(|&v| v))
                .unwrap_or_else(|| !self.masks.is_empty())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "val" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipEntry {
    pub clip: VideoClip,
    pub tracks: Vec<TrackAnnotation>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub clips: Vec<ClipEntry>,
    pub split: Split,
}

/// Counts in the layout of the dataset statistics table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct DatasetSummary {
    pub videos: usize,
    pub frames: usize,
    pub object_instances: usize,
}

impl Dataset {
    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            videos: self.clips.len(),
            frames: self.clips.iter().map(|c| c.clip.shape().0).sum(),
            object_instances: self
                .clips
                .iter()
                .flat_map(|c| &c.tracks)
                .filter(|t| t.is_hand_held_instance())
                .count(),
        }
    }

    pub fn clip(&self, clip_id: &str) -> Option<&ClipEntry> {
        self.clips.iter().find(|c| c.clip.clip_id == clip_id)
    }
}

/// Renders the statistics table: one column per split.
pub fn summary_table(columns: &[(Split, DatasetSummary)]) -> String {
    let mut out = format!("{:<22}", "");
    for (split, _) in columns {
        out.push_str(&format!("{:>10}", split.to_string()));
    }
    out.push('\n');
    let rows: [(&str, fn(&DatasetSummary) -> usize); 3] = [
        ("# Videos - total", |s| s.videos),
        ("# Frames", |s| s.frames),
        ("# Object Instances", |s| s.object_instances),
    ];
    for (name, get) in rows {
        out.push_str(&format!("{name:<22}"));
        for (_, s) in columns {
            out.push_str(&format!("{:>10}", get(s)));
        }
        out.push('\n');
    }
    out
}
