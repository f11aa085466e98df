//! Label-map augmentations and spatial augmentations. Label augmentations
//! redefine what the "answer" of a segmentation episode looks like (edges,
//! complement, grown/shrunk masks) so a learner must read the convention
//! from the context rather than memorize one. Spatial augmentations apply
//! identically to input and output.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How a segmentation label map is post-processed for an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelAug {
    /// Edge magnitude of the mask (Sobel), normalized to peak 1.
    Sobel,
    /// Complement: 1 - mask.
    Invert,
    /// One-voxel dilation with 6-connectivity.
    Dilate1,
    /// One-voxel erosion with 6-connectivity.
    Erode1,
}

fn require_volume(x: &Tensor<f64>, op: &str) -> Result<(usize, usize, usize)> {
    if x.rank() != 4 || x.shape()[0] != 1 {
        return Err(Error::shape(format!(
            "{op} expects a single-channel volume [1, D, H, W], got {:?}",
            x.shape()
        )));
    }
    Ok((x.shape()[1], x.shape()[2], x.shape()[3]))
}

fn require_binary(x: &Tensor<f64>, op: &str) -> Result<()> {
    if x.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(format!(
            "{op} requires a binary mask (values 0 or 1)"
        )));
    }
    Ok(())
}

/// Apply one label augmentation to a binary mask.
pub fn augment_label(mask: &Tensor<f64>, aug: LabelAug) -> Result<Tensor<f64>> {
    require_volume(mask, "augment_label")?;
    require_binary(mask, "augment_label")?;
    match aug {
        LabelAug::Sobel => sobel_magnitude(mask),
        LabelAug::Invert => {
            let data: Vec<f64> = mask.data().iter().map(|&v| 1.0 - v).collect();
            Tensor::new(mask.shape().to_vec(), data)
        }
        LabelAug::Dilate1 => morph(mask, true),
        LabelAug::Erode1 => morph(mask, false),
    }
}

/// 6-connected dilation (`grow == true`) or erosion. Out-of-bounds
/// neighbors count as background, so erosion eats the volume boundary.
fn morph(mask: &Tensor<f64>, grow: bool) -> Result<Tensor<f64>> {
    let (d, h, w) = require_volume(mask, "morph")?;
    let src = mask.data();
    let at = |dd: isize, hh: isize, ww: isize| -> f64 {
        if dd < 0 || hh < 0 || ww < 0 || dd >= d as isize || hh >= h as isize || ww >= w as isize {
            0.0
        } else {
            src[((dd as usize) * h + hh as usize) * w + ww as usize]
        }
    };
    let mut out = vec![0.0f64; mask.numel()];
    for dd in 0..d as isize {
        for hh in 0..h as isize {
            for ww in 0..w as isize {
                let vals = [
                    at(dd, hh, ww),
                    at(dd - 1, hh, ww),
                    at(dd + 1, hh, ww),
                    at(dd, hh - 1, ww),
                    at(dd, hh + 1, ww),
                    at(dd, hh, ww - 1),
                    at(dd, hh, ww + 1),
                ];
                let v = if grow {
                    vals.iter().cloned().fold(0.0, f64::max)
                } else {
                    vals.iter().cloned().fold(1.0, f64::min)
                };
                out[((dd as usize) * h + hh as usize) * w + ww as usize] = v;
            }
        }
    }
    Tensor::new(mask.shape().to_vec(), out)
}

/// 3D Sobel gradient magnitude, max-normalized to [0, 1] (all zeros if the
/// mask is constant). Uses the separable [-1,0,1] x [1,2,1] x [1,2,1]
/// stencil per axis with zero padding.
fn sobel_magnitude(mask: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (d, h, w) = require_volume(mask, "sobel")?;
    let src = mask.data();
    let at = |dd: isize, hh: isize, ww: isize| -> f64 {
        if dd < 0 || hh < 0 || ww < 0 || dd >= d as isize || hh >= h as isize || ww >= w as isize {
            0.0
        } else {
            src[((dd as usize) * h + hh as usize) * w + ww as usize]
        }
    };
    let deriv = [-1.0, 0.0, 1.0];
    let smooth = [1.0, 2.0, 1.0];
    let mut out = vec![0.0f64; mask.numel()];
    let mut peak = 0.0f64;
    for dd in 0..d as isize {
        for hh in 0..h as isize {
            for ww in 0..w as isize {
                let mut g = [0.0f64; 3];
                for (ai, a) in (-1..=1).enumerate() {
                    for (bi, b) in (-1..=1).enumerate() {
                        for (ci, c) in (-1..=1).enumerate() {
                            let v = at(dd + a, hh + b, ww + c);
                            if v != 0.0 {
                                g[0] += deriv[ai] * smooth[bi] * smooth[ci] * v;
                                g[1] += smooth[ai] * deriv[bi] * smooth[ci] * v;
                                g[2] += smooth[ai] * smooth[bi] * deriv[ci] * v;
                            }
                        }
                    }
                }
                let m = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
                peak = peak.max(m);
                out[((dd as usize) * h + hh as usize) * w + ww as usize] = m;
            }
        }
    }
    if peak > 0.0 {
        for v in out.iter_mut() {
            *v /= peak;
        }
    }
    Tensor::new(mask.shape().to_vec(), out)
}

/// Reverse a volume along one spatial axis (1 = depth, 2 = height, 3 = width).
pub fn flip_axis(x: &Tensor<f64>, axis: usize) -> Result<Tensor<f64>> {
    let (d, h, w) = require_volume(x, "flip_axis")?;
    if !(1..=3).contains(&axis) {
        return Err(Error::invalid(format!("flip axis {axis} outside 1..=3")));
    }
    let src = x.data();
    let mut out = vec![0.0f64; x.numel()];
    for dd in 0..d {
        for hh in 0..h {
            for ww in 0..w {
                let (sd, sh, sw) = match axis {
                    1 => (d - 1 - dd, hh, ww),
                    2 => (dd, h - 1 - hh, ww),
                    _ => (dd, hh, w - 1 - ww),
                };
                out[(dd * h + hh) * w + ww] = src[(sd * h + sh) * w + sw];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Rotate a cubic volume by `quarters` quarter turns in the plane orthogonal
/// to `axis` (1 = depth, 2 = height, 3 = width).
pub fn rotate90(x: &Tensor<f64>, axis: usize, quarters: usize) -> Result<Tensor<f64>> {
    let (d, h, w) = require_volume(x, "rotate90")?;
    if !(d == h && h == w) {
        return Err(Error::shape(format!(
            "rotate90 expects a cubic volume, got {:?}",
            x.shape()
        )));
    }
    if !(1..=3).contains(&axis) {
        return Err(Error::invalid(format!("rotation axis {axis} outside 1..=3")));
    }
    let mut cur = x.clone();
    for _ in 0..quarters % 4 {
        let src = cur.data().to_vec();
        let s = d;
        let mut out = vec![0.0f64; cur.numel()];
        for dd in 0..s {
            for hh in 0..s {
                for ww in 0..s {
                    // One positive quarter turn: (a, b) -> (b, s-1-a) in the
                    // rotated plane, the axis coordinate fixed.
                    let (sd, sh, sw) = match axis {
                        1 => (dd, ww, s - 1 - hh),
                        2 => (ww, hh, s - 1 - dd),
                        _ => (hh, s - 1 - dd, ww),
                    };
                    out[(dd * s + hh) * s + ww] = src[(sd * s + sh) * s + sw];
                }
            }
        }
        cur = Tensor::new(cur.shape().to_vec(), out)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point_mask(side: usize, d: usize, h: usize, w: usize) -> Tensor<f64> {
        let mut data = vec![0.0; side * side * side];
        data[(d * side + h) * side + w] = 1.0;
        Tensor::new(vec![1, side, side, side], data).unwrap()
    }

    #[test]
    fn invert_is_an_involution() {
        let m = point_mask(4, 1, 2, 3);
        let inv = augment_label(&m, LabelAug::Invert).unwrap();
        assert_eq!(inv.data()[0], 1.0);
        let back = augment_label(&inv, LabelAug::Invert).unwrap();
        assert!(m.bitwise_eq(&back));
    }

    #[test]
    fn dilation_contains_and_erosion_is_contained() {
        let m = point_mask(5, 2, 2, 2);
        let grown = augment_label(&m, LabelAug::Dilate1).unwrap();
        let count: f64 = grown.data().iter().sum();
        assert_eq!(count, 7.0, "6-connected dilation of a point has 7 voxels");
        for (g, v) in grown.data().iter().zip(m.data()) {
            assert!(g >= v, "dilation must contain the original");
        }
        let shrunk = augment_label(&grown, LabelAug::Erode1).unwrap();
        for (s, g) in shrunk.data().iter().zip(grown.data()) {
            assert!(s <= g, "erosion must be contained in the original");
        }
        // Eroding the single point kills it.
        let gone = augment_label(&m, LabelAug::Erode1).unwrap();
        assert!(gone.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn erosion_of_a_solid_cube_strips_the_boundary() {
        let m = Tensor::full(&[1, 4, 4, 4], 1.0);
        let e = augment_label(&m, LabelAug::Erode1).unwrap();
        let interior: f64 = e.data().iter().sum();
        assert_eq!(interior, 8.0, "4^3 solid erodes to the 2^3 interior");
    }

    #[test]
    fn sobel_peaks_on_the_boundary_and_vanishes_in_flat_regions() {
        let mut data = vec![0.0; 6 * 6 * 6];
        for d in 0..6 {
            for h in 0..6 {
                for w in 0..3 {
                    data[(d * 6 + h) * 6 + w] = 1.0;
                }
            }
        }
        let m = Tensor::new(vec![1, 6, 6, 6], data).unwrap();
        let s = augment_label(&m, LabelAug::Sobel).unwrap();
        let at = |d: usize, h: usize, w: usize| s.data()[(d * 6 + h) * 6 + w];
        assert_eq!(at(3, 3, 1), 0.0, "deep inside the slab");
        assert!(at(3, 3, 2) > 0.5, "on the half-space boundary");
        assert!(s.data().iter().cloned().fold(0.0, f64::max) <= 1.0 + 1e-12);
    }

    #[test]
    fn non_binary_masks_are_rejected() {
        let m = Tensor::full(&[1, 3, 3, 3], 0.5);
        assert!(augment_label(&m, LabelAug::Invert).is_err());
    }

    #[test]
    fn flips_are_involutions_and_rotations_have_period_four() {
        let x = Tensor::from_fn(vec![1, 4, 4, 4], |i| i as f64);
        for axis in 1..=3 {
            let y = flip_axis(&flip_axis(&x, axis).unwrap(), axis).unwrap();
            assert!(x.bitwise_eq(&y), "double flip along {axis}");
            let r = rotate90(&x, axis, 4).unwrap();
            assert!(x.bitwise_eq(&r), "four quarter turns about {axis}");
            let once = rotate90(&x, axis, 1).unwrap();
            assert!(!x.bitwise_eq(&once));
            let thrice = rotate90(&once, axis, 3).unwrap();
            assert!(x.bitwise_eq(&thrice));
        }
    }
}
