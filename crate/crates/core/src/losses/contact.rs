use ndarray::Array3;

use crate::error::{Error, Result};
use crate::mask::SpatioTemporalMask;

/// Per-frame dilation with a `(2r+1)×(2r+1)` square, borders clipped.
pub fn dilate(mask: &SpatioTemporalMask, r: usize) -> SpatioTemporalMask {
    let (t, h, w) = mask.shape();
    let src = mask.data();
    let mut out = Array3::from_elem((t, h, w), false);
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                if !src[[ti, y, x]] {
                    continue;
                }
                for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                    for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                        out[[ti, yy, xx]] = true;
                    }
                }
            }
        }
    }
    SpatioTemporalMask::from_array(out)
}

/// Hand-object contact region: the intersection of both masks dilated by `r`.
pub fn contact_mask(
    hand: &SpatioTemporalMask,
    object: &SpatioTemporalMask,
    r: usize,
) -> Result<SpatioTemporalMask> {
    if hand.shape() != object.shape() {
        return Err(Error::Shape(format!(
            "hand mask {:?} vs object mask {:?}",
            hand.shape(),
            object.shape()
        )));
    }
    if r == 0 {
        return Err(Error::Config("contact radius must be at least 1".into()));
    }
    let a = dilate(hand, r);
    let b = dilate(object, r);
    let mut out = a.into_array();
    out.zip_mut_with(b.data(), |x, &y| *x = *x && y);
    Ok(SpatioTemporalMask::from_array(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn with_pixels(shape: (usize, usize, usize), px: &[(usize, usize, usize)]) -> SpatioTemporalMask {
        let mut m = SpatioTemporalMask::zeros(shape.0, shape.1, shape.2);
        for &(t, y, x) in px {
            m.data_mut()[[t, y, x]] = true;
        }
        m
    }

    #[test]
    fn neighbours_touch_in_the_middle_column() {
        let hand = with_pixels((1, 3, 3), &[(0, 0, 0)]);
        let obj = with_pixels((1, 3, 3), &[(0, 0, 2)]);
        let c = contact_mask(&hand, &obj, 1).unwrap();
        // both dilations cover column 1 in rows 0..=1
        let expected = with_pixels((1, 3, 3), &[(0, 0, 1), (0, 1, 1)]);
        assert_eq!(c, expected);
    }

    #[test]
    fn far_apart_masks_have_no_contact() {
        let hand = with_pixels((1, 10, 10), &[(0, 0, 0)]);
        let obj = with_pixels((1, 10, 10), &[(0, 0, 5)]);
        assert!(contact_mask(&hand, &obj, 2).unwrap().is_empty());
        // gap of exactly 2r still touches
        let obj = with_pixels((1, 10, 10), &[(0, 4, 4)]);
        assert!(!contact_mask(&hand, &obj, 2).unwrap().is_empty());
    }

    #[test]
    fn contact_is_per_frame() {
        let hand = with_pixels((2, 5, 5), &[(0, 2, 2)]);
        let obj = with_pixels((2, 5, 5), &[(1, 2, 3)]);
        assert!(contact_mask(&hand, &obj, 1).unwrap().is_empty());
    }

    #[test]
    fn errors() {
        let a = SpatioTemporalMask::zeros(1, 4, 4);
        let b = SpatioTemporalMask::zeros(1, 4, 5);
        assert!(contact_mask(&a, &b, 1).is_err());
        assert!(contact_mask(&a, &a, 0).is_err());
    }

    fn arb_mask() -> impl Strategy<Value = SpatioTemporalMask> {
        proptest::collection::vec(any::<bool>(), 2 * 7 * 6).prop_map(|v| {
            SpatioTemporalMask::from_array(Array3::from_shape_vec((2, 7, 6), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn symmetric(a in arb_mask(), b in arb_mask(), r in 1usize..4) {
            prop_assert_eq!(contact_mask(&a, &b, r).unwrap(), contact_mask(&b, &a, r).unwrap());
        }

        #[test]
        fn monotone_in_radius(a in arb_mask(), b in arb_mask(), r in 1usize..4) {
            let small = contact_mask(&a, &b, r).unwrap();
            let big = contact_mask(&a, &b, r + 1).unwrap();
            for (s, g) in small.data().iter().zip(big.data().iter()) {
                prop_assert!(!*s || *g);
            }
        }
    }
}
