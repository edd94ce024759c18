//! Procedural scenes: a tilted ground plane plus flat-colored rectangles and
//! ellipses at distinct depths.
//!
//! Every scene is rendered in relative depth units and multiplied by a hidden
//! per-scene scale. Shading is a function of relative depth, so the RGB image
//! determines the scene's shape but not its absolute scale; the sparse depth
//! samples are what pin the scale down.

use std::path::Path;

use super::io::{write_pfm, write_ppm};
use super::manifest::{write_manifest, FrameRef, Split};
use super::Frame;
use crate::error::{Error, FormatError, Result};
use crate::layers::ObservationMask;
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;

pub const DEPTH_MIN: f64 = 0.5;
pub const DEPTH_MAX: f64 = 10.0;

const PALETTE: [[f64; 3]; 6] = [
    [1.0, 0.15, 0.1],
    [0.1, 0.9, 0.2],
    [0.15, 0.3, 1.0],
    [1.0, 0.9, 0.1],
    [0.9, 0.1, 0.9],
    [0.1, 0.9, 0.9],
];
const PLANE_COLOR: [f64; 3] = [0.55, 0.5, 0.45];
const OBJECT_LEVELS: [f64; 6] = [1.0, 1.3, 1.6, 1.9, 2.2, 2.5];
const PLANE_NEAR: f64 = 3.0;
const PLANE_FAR: f64 = 4.0;

fn shade(rel: f64) -> f64 {
    1.1 - 0.2 * rel
}

/// Deterministic procedural frame. `difficulty` in [0, 1] widens the object
/// count from exactly 2 up to 2..=6.
pub fn synth_scene(seed: u64, height: usize, width: usize, difficulty: f64) -> Result<Frame> {
    if height % 8 != 0 || width % 8 != 0 || height == 0 || width == 0 {
        return Err(Error::InvalidArgument {
            op: "synth_scene",
            msg: format!("size {height}x{width} must be a nonzero multiple of 8"),
        });
    }
    let mut rng = SplitMix64::new(seed);
    let scale = rng.uniform(0.8, 2.4);
    let tilt = rng.uniform(-0.15, 0.15);
    let extra = (4.0 * difficulty.clamp(0.0, 1.0)).round() as u64;
    let n_objects = 2 + rng.below(extra + 1) as usize;

    let (h, w) = (height, width);
    let mut rel = vec![0.0; h * w];
    let mut color = vec![PLANE_COLOR; h * w];
    for y in 0..h {
        for x in 0..w {
            let fy = y as f64 / (h - 1).max(1) as f64;
            let fx = x as f64 / (w - 1).max(1) as f64;
            rel[y * w + x] = PLANE_FAR - (PLANE_FAR - PLANE_NEAR) * fy + tilt * (fx - 0.5);
        }
    }

    let mut levels = OBJECT_LEVELS;
    rng.shuffle(&mut levels);
    let mut palette = PALETTE;
    rng.shuffle(&mut palette);
    let mut objects: Vec<(f64, [f64; 3])> = levels[..n_objects].iter().copied().zip(palette).collect();
    // Far objects first so nearer ones occlude them.
    objects.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (level, col) in objects {
        let cy = rng.uniform(0.15, 0.85) * h as f64;
        let cx = rng.uniform(0.15, 0.85) * w as f64;
        let ry = rng.uniform(0.1, 0.25) * h as f64;
        let rx = rng.uniform(0.1, 0.25) * w as f64;
        let ellipse = rng.bernoulli(0.5);
        for y in 0..h {
            for x in 0..w {
                let dy = (y as f64 + 0.5 - cy) / ry;
                let dx = (x as f64 + 0.5 - cx) / rx;
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    rel[y * w + x] = level;
                    color[y * w + x] = col;
                }
            }
        }
    }

    let mut rgb = vec![0.0; 3 * h * w];
    let mut depth = vec![0.0; h * w];
    for p in 0..h * w {
        let s = shade(rel[p]);
        for c in 0..3 {
            rgb[c * h * w + p] = (color[p][c] * s).clamp(0.0, 1.0);
        }
        depth[p] = (rel[p] * scale).clamp(DEPTH_MIN, DEPTH_MAX);
    }
    Frame::new(
        format!("synth-{seed:016x}"),
        Tensor::new(&[1, 3, h, w], rgb)?,
        Tensor::new(&[1, 1, h, w], depth)?,
        ObservationMask::ones(1, h, w),
    )
}

/// Marks pixels whose right or lower neighbor differs by more than
/// `threshold` in any channel. `t` is 1 x C x H x W.
pub fn edge_map(t: &Tensor, threshold: f64) -> Result<Vec<bool>> {
    let (_, c, h, w) = t.expect_rank4("edge_map")?;
    let d = t.data();
    let mut edges = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut hit = false;
            for ch in 0..c {
                let v = d[ch * h * w + p];
                if x + 1 < w && (d[ch * h * w + p + 1] - v).abs() > threshold {
                    hit = true;
                }
                if y + 1 < h && (d[ch * h * w + p + w] - v).abs() > threshold {
                    hit = true;
                }
            }
            edges[p] = hit;
        }
    }
    Ok(edges)
}

/// Writes `frames` synthetic frames (PPM + PFM) and a manifest into `out`.
/// The first 80% are train, the next 10% val, the rest test.
pub fn write_synth_dataset(
    out: &Path,
    frames: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<FrameRef>, FormatError> {
    std::fs::create_dir_all(out).map_err(|e| FormatError::io(out, e))?;
    let n_train = (frames as f64 * 0.8).round() as usize;
    let n_val = (frames as f64 * 0.9).round() as usize - n_train;
    let mut refs = Vec::with_capacity(frames);
    for i in 0..frames {
        let frame = synth_scene(derive_seed(seed, i as u64), height, width, 1.0)?;
        let id = format!("frame_{i:04}");
        let rgb_name = format!("{id}.ppm");
        let depth_name = format!("{id}.pfm");
        write_ppm(&out.join(&rgb_name), &frame.rgb)?;
        write_pfm(&out.join(&depth_name), &frame.depth_gt)?;
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        refs.push(FrameRef {
            id,
            rgb_path: rgb_name.into(),
            depth_path: depth_name.into(),
            split,
        });
    }
    write_manifest(out, &refs)?;
    Ok(refs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_frame() {
        let a = synth_scene(42, 32, 32, 1.0).unwrap();
        let b = synth_scene(42, 32, 32, 1.0).unwrap();
        assert_eq!(a, b);
        let c = synth_scene(43, 32, 32, 1.0).unwrap();
        assert_ne!(a.depth_gt, c.depth_gt);
    }

    #[test]
    fn depth_and_rgb_ranges() {
        for seed in 0..30 {
            let f = synth_scene(seed, 32, 48, 1.0).unwrap();
            assert!(f.depth_gt.data().iter().all(|&d| (DEPTH_MIN..=DEPTH_MAX).contains(&d)));
            assert!(f.rgb.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(f.valid_gt.count(), 32 * 48);
        }
    }

    #[test]
    fn rgb_edges_coincide_with_depth_edges() {
        for seed in 0..40 {
            for size in [32, 64] {
                let f = synth_scene(seed, size, size, 1.0).unwrap();
                let de = edge_map(&f.depth_gt, 0.15).unwrap();
                let ce = edge_map(&f.rgb, 0.08).unwrap();
                let inter = de.iter().zip(&ce).filter(|(a, b)| **a && **b).count();
                let union = de.iter().zip(&ce).filter(|(a, b)| **a || **b).count();
                let overlap = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
                assert!(overlap >= 0.95, "seed {seed} size {size}: overlap {overlap}");
            }
        }
    }

    #[test]
    fn rejects_indivisible_size() {
        assert!(synth_scene(0, 30, 32, 0.5).is_err());
    }

    // Objects are flat, the plane never repeats a value, so repeated depths
    // identify visible objects.
    fn flat_levels(f: &Frame) -> usize {
        let mut counts = std::collections::BTreeMap::new();
        for d in f.depth_gt.data() {
            *counts.entry(d.to_bits()).or_insert(0usize) += 1;
        }
        counts.values().filter(|&&n| n >= 3).count()
    }

    #[test]
    fn difficulty_controls_object_count() {
        let mut most = 0;
        for seed in 0..20 {
            assert!(flat_levels(&synth_scene(seed, 32, 32, 0.0).unwrap()) <= 2);
            most = most.max(flat_levels(&synth_scene(seed, 32, 32, 1.0).unwrap()));
        }
        assert!(most > 2);
    }
}
