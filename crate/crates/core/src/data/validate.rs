use std::collections::HashSet;
use std::fmt;

use super::{Dataset, DatasetSummary, TrackKind};
use crate::mask::BoundingBox;

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    /// Stored box differs from the tight box of the frame mask.
    BoxMismatch {
        stored: Option<BoundingBox>,
        recomputed: Option<BoundingBox>,
    },
    /// Object marked not held while its mask has pixels.
    NotHeldButMasked,
    ShapeMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    LengthMismatch {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    DuplicateTrackId,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationKind::BoxMismatch { stored, recomputed } => write!(
                f,
                "box {:?} does not match tight mask box {:?}",
                stored.map(<[u32; 4]>::from),
                recomputed.map(<[u32; 4]>::from)
            ),
            ViolationKind::NotHeldButMasked => f.write_str("held=false but mask is not empty"),
            ViolationKind::ShapeMismatch { expected, found } => {
                write!(f, "mask shape {found:?}, clip shape {expected:?}")
            }
            ViolationKind::LengthMismatch {
                field,
                expected,
                found,
            } => write!(f, "{field} has {found} entries, expected {expected}"),
            ViolationKind::DuplicateTrackId => f.write_str("duplicate track_id"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub clip_id: String,
    pub track_id: Option<u32>,
    pub frame: Option<usize>,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub summary: DatasetSummary,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every annotation invariant violation in `ds`.
pub fn validate_annotations(ds: &Dataset) -> ValidationReport {
    let mut violations = Vec::new();
    for entry in &ds.clips {
        let cid = &entry.clip.clip_id;
        let shape = entry.clip.shape();
        let mut push = |track_id, frame, kind| {
            violations.push(Violation {
                clip_id: cid.clone(),
                track_id,
                frame,
                kind,
            })
        };
        let mut seen = HashSet::new();
        for tr in &entry.tracks {
            let id = Some(tr.track_id);
            if !seen.insert(tr.track_id) {
                push(id, None, ViolationKind::DuplicateTrackId);
            }
            if tr.masks.shape() != shape {
                push(
                    id,
                    None,
                    ViolationKind::ShapeMismatch {
                        expected: shape,
                        found: tr.masks.shape(),
                    },
                );
                continue;
            }
            if tr.boxes.len() != shape.0 {
                push(
                    id,
                    None,
                    ViolationKind::LengthMismatch {
                        field: "boxes",
                        expected: shape.0,
                        found: tr.boxes.len(),
                    },
                );
                continue;
            }
            for t in 0..shape.0 {
                let recomputed = tr.masks.frame_bbox(t);
                if recomputed != tr.boxes[t] {
                    push(
                        id,
                        Some(t),
                        ViolationKind::BoxMismatch {
                            stored: tr.boxes[t],
                            recomputed,
                        },
                    );
                }
            }
            if tr.kind == TrackKind::Object {
                match &tr.held {
                    Some(held) if held.len() != shape.0 => push(
                        id,
                        None,
                        ViolationKind::LengthMismatch {
                            field: "held",
                            expected: shape.0,
                            found: held.len(),
                        },
                    ),
                    Some(held) => {
                        for (t, &h) in held.iter().enumerate() {
                            if !h && !tr.masks.frame_is_empty(t) {
                                push(id, Some(t), ViolationKind::NotHeldButMasked);
                            }
                        }
                    }
                    None => push(
                        id,
                        None,
                        ViolationKind::LengthMismatch {
                            field: "held",
                            expected: shape.0,
                            found: 0,
                        },
                    ),
                }
            }
        }
    }
    ValidationReport {
        violations,
        summary: ds.summary(),
    }
}
