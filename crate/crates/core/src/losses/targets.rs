use ndarray::Array2;

use super::contact::contact_mask;
use crate::data::{ClipEntry, TrackAnnotation, TrackKind};
use crate::error::{Error, Result};
use crate::mask::SpatioTemporalMask;

/// Supervision for one held object at feature resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackTarget {
    pub object_track: u32,
    pub hand_track: Option<u32>,
    pub hand: SpatioTemporalMask,
    pub object: SpatioTemporalMask,
    pub contact: SpatioTemporalMask,
}

impl TrackTarget {
    /// Builds a target from masks already on the feature grid.
    pub fn new(
        hand: SpatioTemporalMask,
        object: SpatioTemporalMask,
        contact_radius: usize,
    ) -> Result<Self> {
        let contact = contact_mask(&hand, &object, contact_radius)?;
        Ok(TrackTarget {
            object_track: 0,
            hand_track: None,
            hand,
            object,
            contact,
        })
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        self.object.shape()
    }
}

/// Stacks one flattened `(t, y, x)` row per target.
pub(crate) fn stack_rows<'a>(
    masks: impl Iterator<Item = &'a SpatioTemporalMask>,
    len: usize,
) -> Array2<f64> {
    let rows: Vec<&SpatioTemporalMask> = masks.collect();
    let mut out = Array2::zeros((rows.len(), len));
    for (mut row, m) in out.rows_mut().into_iter().zip(rows) {
        for (o, &v) in row.iter_mut().zip(m.data().iter()) {
            *o = if v { 1.0 } else { 0.0 };
        }
    }
    out
}

fn to_grid(m: &SpatioTemporalMask, stride: usize, grid: (usize, usize, usize)) -> SpatioTemporalMask {
    let (_, gh, gw) = grid;
    m.pad_to(gh * stride, gw * stride).downsample(stride)
}

fn owner_hand<'a>(entry: &'a ClipEntry, object: &TrackAnnotation) -> Option<&'a TrackAnnotation> {
    let hands = entry.tracks.iter().filter(|t| t.kind == TrackKind::Hand);
    if let Some(id) = object.held_by {
        return entry.tracks.iter().find(|t| t.track_id == id && t.kind == TrackKind::Hand);
    }
    // without an explicit owner, take the hand touching the object most often
    hands
        .map(|h| {
            let c = contact_mask(&h.masks, &object.masks, 1).map(|c| c.area()).unwrap_or(0);
            (c, h)
        })
        .filter(|(c, _)| *c > 0)
        .max_by_key(|(c, h)| (*c, std::cmp::Reverse(h.track_id)))
        .map(|(_, h)| h)
}

/// One target per hand-held object of `entry`, downsampled to `grid`
/// (the padded feature grid for `stride`).
pub fn build_targets(
    entry: &ClipEntry,
    stride: usize,
    grid: (usize, usize, usize),
    contact_radius: usize,
) -> Result<Vec<TrackTarget>> {
    let (t, h, w) = entry.clip.shape();
    if grid.0 != t || grid.1 * stride < h || grid.2 * stride < w {
        return Err(Error::Shape(format!(
            "feature grid {grid:?} at stride {stride} does not cover clip ({t}, {h}, {w})"
        )));
    }
    let mut out = Vec::new();
    for obj in entry.tracks.iter().filter(|tr| tr.is_hand_held_instance()) {
        let hand_track = owner_hand(entry, obj);
        let hand = match hand_track {
            Some(ht) => to_grid(&ht.masks, stride, grid),
            None => SpatioTemporalMask::zeros(grid.0, grid.1, grid.2),
        };
        let object = to_grid(&obj.masks, stride, grid);
        let mut target = TrackTarget::new(hand, object, contact_radius)?;
        target.object_track = obj.track_id;
        target.hand_track = hand_track.map(|h| h.track_id);
        out.push(target);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_clip, SynthConfig};

    #[test]
    fn targets_follow_held_objects() {
        let cfg = SynthConfig {
            n_hands: 2,
            n_objects: 3,
            seed: 11,
            ..SynthConfig::default()
        };
        let (clip, tracks) = synth_clip(&cfg).unwrap();
        let entry = ClipEntry { clip, tracks };
        let targets = build_targets(&entry, 4, (4, 24, 24), 2).unwrap();
        let held = entry.tracks.iter().filter(|t| t.is_hand_held_instance()).count();
        assert_eq!(targets.len(), held);
        for tg in &targets {
            assert_eq!(tg.grid(), (4, 24, 24));
            let obj = entry.tracks.iter().find(|t| t.track_id == tg.object_track).unwrap();
            assert_eq!(tg.hand_track, obj.held_by);
        }
    }

    #[test]
    fn rejects_small_grid() {
        let (clip, tracks) = synth_clip(&SynthConfig::default()).unwrap();
        let entry = ClipEntry { clip, tracks };
        assert!(build_targets(&entry, 4, (4, 20, 24), 2).is_err());
    }
}
