//! Geometric and photometric augmentation. Geometry is applied identically to
//! RGB, depth and the ground-truth mask; zooming by `s` divides depth by `s`.

use super::Frame;
use crate::error::Result;
use crate::layers::ObservationMask;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Zoom factor, >= 1.
    pub scale: f64,
    /// Position of the zoom window inside the slack, each in [0, 1].
    pub crop_offset: (f64, f64),
    pub flip: bool,
    pub angle_deg: f64,
    pub gain: [f64; 3],
    pub offset: [f64; 3],
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            crop_offset: (0.0, 0.0),
            flip: false,
            angle_deg: 0.0,
            gain: [1.0; 3],
            offset: [0.0; 3],
        }
    }

    pub fn draw(seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let scale = rng.uniform(1.0, 1.5);
        let crop_offset = (rng.next_f64(), rng.next_f64());
        let flip = rng.bernoulli(0.5);
        let angle_deg = rng.uniform(-5.0, 5.0);
        let gain = [(); 3].map(|_| rng.uniform(0.9, 1.1));
        let offset = [(); 3].map(|_| rng.uniform(-0.05, 0.05));
        Self {
            scale,
            crop_offset,
            flip,
            angle_deg,
            gain,
            offset,
        }
    }
}

// Nearest-neighbor source coordinate for each output pixel, or None when it
// falls outside the image.
fn source_map(p: &AugmentParams, h: usize, w: usize) -> Vec<Option<usize>> {
    let (hf, wf) = (h as f64, w as f64);
    let slack_y = hf - hf / p.scale;
    let slack_x = wf - wf / p.scale;
    let (oy, ox) = (
        p.crop_offset.0.clamp(0.0, 1.0) * slack_y,
        p.crop_offset.1.clamp(0.0, 1.0) * slack_x,
    );
    let (sin, cos) = p.angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((hf - 1.0) / 2.0, (wf - 1.0) / 2.0);
    let mut map = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let xo = if p.flip { w - 1 - x } else { x };
            // undo rotation about the center
            let (dy, dx) = (y as f64 - cy, xo as f64 - cx);
            let ry = (cos * dy - sin * dx + cy).round();
            let rx = (sin * dy + cos * dx + cx).round();
            if ry < 0.0 || rx < 0.0 || ry >= hf || rx >= wf {
                map.push(None);
                continue;
            }
            // undo zoom
            let sy = ((oy + (ry + 0.5) / p.scale).floor() as usize).min(h - 1);
            let sx = ((ox + (rx + 0.5) / p.scale).floor() as usize).min(w - 1);
            map.push(Some(sy * w + sx));
        }
    }
    map
}

/// Draws parameters from `seed` and applies them.
pub fn augment(frame: &Frame, seed: u64) -> Result<Frame> {
    augment_with(frame, &AugmentParams::draw(seed))
}

/// Applies `p` to a single-batch frame. Pixels rotated in from outside the
/// image get zero RGB, zero depth and are marked invalid.
pub fn augment_with(frame: &Frame, p: &AugmentParams) -> Result<Frame> {
    let (h, w) = (frame.height(), frame.width());
    let map = source_map(p, h, w);
    let plane = h * w;
    let (rgb_in, depth_in) = (frame.rgb.data(), frame.depth_gt.data());
    let mut rgb = vec![0.0; 3 * plane];
    let mut depth = vec![0.0; plane];
    let mut bits = vec![false; plane];
    for (i, src) in map.iter().enumerate() {
        let Some(s) = *src else { continue };
        for c in 0..3 {
            rgb[c * plane + i] = (rgb_in[c * plane + s] * p.gain[c] + p.offset[c]).clamp(0.0, 1.0);
        }
        if frame.valid_gt.is_set(s) {
            depth[i] = depth_in[s] / p.scale;
            bits[i] = true;
        }
    }
    Frame::new(
        frame.id.clone(),
        Tensor::new(&[1, 3, h, w], rgb)?,
        Tensor::new(&[1, 1, h, w], depth)?,
        ObservationMask::from_bools(1, h, w, &bits)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_scene;

    #[test]
    fn identity_is_a_no_op() {
        let f = synth_scene(11, 32, 40, 1.0).unwrap();
        assert_eq!(augment_with(&f, &AugmentParams::identity()).unwrap(), f);
    }

    #[test]
    fn zoom_divides_depth() {
        let f = synth_scene(12, 32, 32, 1.0).unwrap();
        let p = AugmentParams {
            scale: 1.25,
            crop_offset: (0.5, 0.5),
            ..AugmentParams::identity()
        };
        let out = augment_with(&f, &p).unwrap();
        assert_eq!(out.valid_gt.count(), 32 * 32);
        let map = source_map(&p, 32, 32);
        for (i, src) in map.iter().enumerate() {
            assert_eq!(out.depth_gt.data()[i], f.depth_gt.data()[src.unwrap()] / 1.25);
        }
    }

    #[test]
    fn flip_mirrors_columns() {
        let f = synth_scene(13, 32, 32, 1.0).unwrap();
        let p = AugmentParams {
            flip: true,
            ..AugmentParams::identity()
        };
        let out = augment_with(&f, &p).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(out.depth_gt.data()[y * 32 + x], f.depth_gt.data()[y * 32 + 31 - x]);
            }
        }
        assert_eq!(augment_with(&out, &p).unwrap(), f);
    }

    #[test]
    fn rotation_invalidates_corners_only() {
        let f = synth_scene(14, 32, 32, 1.0).unwrap();
        let p = AugmentParams {
            angle_deg: 5.0,
            ..AugmentParams::identity()
        };
        let out = augment_with(&f, &p).unwrap();
        let lost = 32 * 32 - out.valid_gt.count();
        assert!(lost > 0 && lost < 60, "lost {lost}");
        // the center pixel does not move
        let c = 15 * 32 + 15;
        assert_eq!(out.depth_gt.data()[c], f.depth_gt.data()[c]);
        for i in 0..1024 {
            if !out.valid_gt.is_set(i) {
                assert_eq!(out.depth_gt.data()[i], 0.0);
            }
        }
    }

    #[test]
    fn seeded_augment_keeps_mask_consistent() {
        let f = synth_scene(15, 32, 32, 1.0).unwrap();
        for seed in 0..20 {
            let a = augment(&f, seed).unwrap();
            assert_eq!(a, augment(&f, seed).unwrap());
            for i in 0..1024 {
                assert_eq!(a.valid_gt.is_set(i), a.depth_gt.data()[i] > 0.0);
            }
        }
    }

    #[test]
    fn draws_are_seeded_and_in_range() {
        assert_eq!(AugmentParams::draw(3), AugmentParams::draw(3));
        for seed in 0..200 {
            let p = AugmentParams::draw(seed);
            assert!((1.0..=1.5).contains(&p.scale));
            assert!(p.angle_deg.abs() <= 5.0);
            assert!(p.gain.iter().all(|g| (0.9..=1.1).contains(g)));
        }
    }
}
