//! Per-frame overlays of predicted tracks.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::eval::PredictedTrack;

const OVERLAY_ALPHA: f64 = 0.6;

/// Fixed color of a track id: golden-ratio hue steps at full saturation.
pub fn track_color(track_id: u32) -> [u8; 3] {
    let hue = (track_id as f64 * 0.618_033_988_749_895 + 0.11).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

fn blend(base: u8, over: u8) -> u8 {
    (base as f64 * (1.0 - OVERLAY_ALPHA) + over as f64 * OVERLAY_ALPHA).round() as u8
}

/// One image per frame with every track of `clip` tinted in its color.
/// Tracks are drawn in the given order, later ones on top.
pub fn render_overlays(clip: &VideoClip, tracks: &[PredictedTrack]) -> Result<Vec<RgbImage>> {
    let (t, h, w) = clip.shape();
    for tr in tracks {
        if tr.clip_id != clip.clip_id || tr.mask.shape() != (t, h, w) {
            return Err(Error::Predictions(format!(
                "track {} of clip {} ({:?}) does not fit clip {} ({t}, {h}, {w})",
                tr.track_id,
                tr.clip_id,
                tr.mask.shape(),
                clip.clip_id
            )));
        }
    }
    let mut frames = Vec::with_capacity(t);
    for ti in 0..t {
        let src = clip.frame(ti);
        let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([src[[y, x, 0]], src[[y, x, 1]], src[[y, x, 2]]])
        });
        for tr in tracks {
            let color = track_color(tr.track_id);
            for ((y, x), &on) in tr.mask.frame(ti).indexed_iter() {
                if on {
                    let p = img.get_pixel_mut(x as u32, y as u32);
                    for c in 0..3 {
                        p.0[c] = blend(p.0[c], color[c]);
                    }
                }
            }
        }
        frames.push(img);
    }
    Ok(frames)
}

/// Writes `overlay_XXXX.png` files into `dir`; returns their paths.
pub fn write_overlays(dir: &Path, clip: &VideoClip, tracks: &[PredictedTrack]) -> Result<Vec<PathBuf>> {
    let frames = render_overlays(clip, tracks)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(frames.len());
    for (t, img) in frames.iter().enumerate() {
        let path = dir.join(format!("overlay_{t:04}.png"));
        img.save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::SpatioTemporalMask;
    use ndarray::Array4;

    fn gray_clip(t: usize) -> VideoClip {
        VideoClip {
            clip_id: "c".into(),
            frames: Array4::from_elem((t, 16, 16, 3), 128),
            fps: 6.0,
        }
    }

    fn track(id: u32, frames: std::ops::Range<usize>, t: usize) -> PredictedTrack {
        let mut m = SpatioTemporalMask::zeros(t, 16, 16);
        for ti in frames {
            for y in 2..6 {
                for x in 3..9 {
                    m.data_mut()[[ti, y + id as usize, x]] = true;
                }
            }
        }
        PredictedTrack {
            clip_id: "c".into(),
            track_id: id,
            score: 0.9,
            mask: m,
        }
    }

    fn changed(a: &RgbImage, clip: &VideoClip, t: usize) -> Vec<(usize, usize)> {
        let f = clip.frame(t);
        a.enumerate_pixels()
            .filter(|(x, y, p)| (0..3).any(|c| p.0[c] != f[[*y as usize, *x as usize, c]]))
            .map(|(x, y, _)| (y as usize, x as usize))
            .collect()
    }

    #[test]
    fn overlay_only_where_track_present() {
        let clip = gray_clip(8);
        let tr = track(0, 0..4, 8);
        let imgs = render_overlays(&clip, std::slice::from_ref(&tr)).unwrap();
        for (t, img) in imgs.iter().enumerate() {
            let px = changed(img, &clip, t);
            let expected: Vec<(usize, usize)> = tr
                .mask
                .frame(t)
                .indexed_iter()
                .filter(|(_, &v)| v)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(px, expected);
            assert_eq!(px.is_empty(), t >= 4);
        }
    }

    #[test]
    fn colors_are_distinct_and_stable() {
        let clip = gray_clip(3);
        let tracks = [track(1, 0..3, 3), track(5, 0..3, 3)];
        let imgs = render_overlays(&clip, &tracks).unwrap();
        let c1 = *imgs[0].get_pixel(3, 3);
        let c5 = *imgs[0].get_pixel(3, 8);
        assert_ne!(c1, c5);
        for img in &imgs {
            assert_eq!(*img.get_pixel(3, 3), c1);
            assert_eq!(*img.get_pixel(3, 8), c5);
        }
        let colors: std::collections::HashSet<_> = (0..8).map(track_color).collect();
        assert_eq!(colors.len(), 8);
    }

    #[test]
    fn rejects_foreign_tracks() {
        let clip = gray_clip(3);
        let mut tr = track(0, 0..1, 3);
        tr.clip_id = "other".into();
        assert!(render_overlays(&clip, &[tr]).is_err());
    }
}
