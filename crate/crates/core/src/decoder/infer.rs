use ndarray::{Array2, Array3, ArrayView2};

use super::DecoderOutput;
use crate::eval::PredictedTrack;
use crate::mask::SpatioTemporalMask;

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn upsample_bilinear(src: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let coord = |o: usize, scale: f64, n: usize| {
        let c = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f64)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = coord(y, sy, h);
        let (x0, x1, fx) = coord(x, sx, w);
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Turns decoder output into clip-level tracks, one per confident query.
///
/// A query pair whose "track" probability exceeds `score_thresh` yields a
/// track with `track_id` equal to the query index; its final object soft mask
/// is upsampled to the padded clip size, thresholded at 0.5 and cropped.
pub fn infer_tracks(out: &DecoderOutput, clip_id: &str, score_thresh: f64) -> Vec<PredictedTrack> {
    let (t, h, w) = out.grid;
    let (ph, pw) = (h * out.stride, w * out.stride);
    let (ch, cw) = out.clip_hw;
    let soft = &out.final_layer().object_soft;
    let mut tracks = Vec::new();
    for (q, &score) in out.track_probs().iter().enumerate() {
        if score <= score_thresh {
            continue;
        }
        let row = soft.row(q);
        let mut vol = Array3::from_elem((t, ch, cw), false);
        for ti in 0..t {
            let plane = row
                .slice(ndarray::s![ti * h * w..(ti + 1) * h * w])
                .into_shape_with_order((h, w))
                .expect("frame plane");
            let up = upsample_bilinear(plane, ph, pw);
            for y in 0..ch {
                for x in 0..cw {
                    vol[[ti, y, x]] = up[[y, x]] > 0.5;
                }
            }
        }
        tracks.push(PredictedTrack {
            clip_id: clip_id.to_string(),
            track_id: q as u32,
            score,
            mask: SpatioTemporalMask::from_array(vol),
        });
    }
    tracks
}
