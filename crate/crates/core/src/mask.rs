//! Binary spatio-temporal masks and per-frame bounding boxes.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned pixel box `[x0, y0, x1, y1)`; `x1`/`y1` are exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BoundingBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl From<[u32; 4]> for BoundingBox {
    fn from(v: [u32; 4]) -> Self {
        BoundingBox {
            x0: v[0],
            y0: v[1],
            x1: v[2],
            y1: v[3],
        }
    }
}

impl From<BoundingBox> for [u32; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

/// Tight bounding box of the set pixels of a 2D mask, `None` when empty.
pub fn tight_bbox(frame: ArrayView2<bool>) -> Option<BoundingBox> {
    let mut bb: Option<BoundingBox> = None;
    for ((y, x), &v) in frame.indexed_iter() {
        if !v {
            continue;
        }
        let (x, y) = (x as u32, y as u32);
        bb = Some(match bb {
            None => BoundingBox {
                x0: x,
                y0: y,
                x1: x + 1,
                y1: y + 1,
            },
            Some(b) => BoundingBox {
                x0: b.x0.min(x),
                y0: b.y0.min(y),
                x1: b.x1.max(x + 1),
                y1: b.y1.max(y + 1),
            },
        });
    }
    bb
}

/// A `T×H×W` binary volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatioTemporalMask {
    data: Array3<bool>,
}

impl SpatioTemporalMask {
    pub fn zeros(t: usize, h: usize, w: usize) -> Self {
        SpatioTemporalMask {
            data: Array3::from_elem((t, h, w), false),
        }
    }

    pub fn from_array(data: Array3<bool>) -> Self {
        SpatioTemporalMask { data }
    }

    /// Builds a mask from per-frame 2D masks; all frames must share a shape.
    pub fn from_frames(frames: &[Array2<bool>]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Shape("a spatio-temporal mask needs at least one frame".into()))?;
        let (h, w) = first.dim();
        let mut data = Array3::from_elem((frames.len(), h, w), false);
        for (t, f) in frames.iter().enumerate() {
            if f.dim() != (h, w) {
                return Err(Error::Shape(format!(
                    "frame {t} is {:?}, expected {:?}",
                    f.dim(),
                    (h, w)
                )));
            }
            data.index_axis_mut(Axis(0), t).assign(f);
        }
        Ok(SpatioTemporalMask { data })
    }

    /// `(T, H, W)`
    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<bool> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<bool> {
        &mut self.data
    }

    pub fn into_array(self) -> Array3<bool> {
        self.data
    }

    pub fn frame(&self, t: usize) -> ArrayView2<'_, bool> {
        self.data.index_axis(Axis(0), t)
    }

    pub fn frame_area(&self, t: usize) -> usize {
        self.frame(t).iter().filter(|&&v| v).count()
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn frame_is_empty(&self, t: usize) -> bool {
        !self.frame(t).iter().any(|&v| v)
    }

    pub fn frame_bbox(&self, t: usize) -> Option<BoundingBox> {
        tight_bbox(self.frame(t))
    }

    /// Mask as 0.0/1.0 values.
    pub fn to_f64(&self) -> Array3<f64> {
        self.data.mapv(|v| if v { 1.0 } else { 0.0 })
    }

    /// Zero-pads on the bottom/right to `(h, w)`.
    pub fn pad_to(&self, h: usize, w: usize) -> Self {
        let (t, h0, w0) = self.shape();
        assert!(h >= h0 && w >= w0, "pad target smaller than mask");
        let mut out = Array3::from_elem((t, h, w), false);
        out.slice_mut(ndarray::s![.., ..h0, ..w0]).assign(&self.data);
        SpatioTemporalMask { data: out }
    }

    /// Crops the top-left `(h, w)` region.
    pub fn crop_to(&self, h: usize, w: usize) -> Self {
        SpatioTemporalMask {
            data: self.data.slice(ndarray::s![.., ..h, ..w]).to_owned(),
        }
    }

    /// Downsamples by `stride`: a cell is set when at least half of its pixels are set.
    pub fn downsample(&self, stride: usize) -> Self {
        let (t, h, w) = self.shape();
        let (ho, wo) = (h / stride, w / stride);
        let half = stride * stride;
        let mut out = Array3::from_elem((t, ho, wo), false);
        for ti in 0..t {
            for y in 0..ho {
                for x in 0..wo {
                    let mut n = 0;
                    for dy in 0..stride {
                        for dx in 0..stride {
                            if self.data[[ti, y * stride + dy, x * stride + dx]] {
                                n += 1;
                            }
                        }
                    }
                    out[[ti, y, x]] = 2 * n >= half;
                }
            }
        }
        SpatioTemporalMask { data: out }
    }
}
