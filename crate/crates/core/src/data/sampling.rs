//! Simulated LIDAR returns: exact-count uniform sampling and band crops.

use super::Frame;
use crate::error::{Error, Result};
use crate::layers::ObservationMask;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Uniform,
    /// Only rows `top..bottom` keep ground truth.
    Band {
        top: usize,
        bottom: usize,
    },
}

impl SampleMode {
    /// The middle quarter of `height` rows.
    pub fn middle_band(height: usize) -> Self {
        SampleMode::Band {
            top: height * 3 / 8,
            bottom: height * 5 / 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub samples: usize,
    pub seed: u64,
    pub mode: SampleMode,
}

impl SamplerConfig {
    pub fn uniform(samples: usize, seed: u64) -> Self {
        Self {
            samples,
            seed,
            mode: SampleMode::Uniform,
        }
    }
}

/// Draws exactly `cfg.samples` distinct valid pixels. Returns the sparse depth
/// (zero off the mask) and the mask.
pub fn uniform_sample(frame: &Frame, cfg: &SamplerConfig) -> Result<(Tensor, ObservationMask)> {
    let (h, w) = (frame.height(), frame.width());
    let mut valid: Vec<usize> = (0..h * w).filter(|&i| frame.valid_gt.is_set(i)).collect();
    if cfg.samples > valid.len() {
        return Err(Error::InvalidArgument {
            op: "uniform_sample",
            msg: format!(
                "requested {} samples but only {} valid pixels",
                cfg.samples,
                valid.len()
            ),
        });
    }
    let mut rng = SplitMix64::new(cfg.seed);
    // partial Fisher-Yates
    for i in 0..cfg.samples {
        let j = i + rng.below((valid.len() - i) as u64) as usize;
        valid.swap(i, j);
    }
    let gt = frame.depth_gt.data();
    let mut depth = vec![0.0; h * w];
    let mut bits = vec![false; h * w];
    for &p in &valid[..cfg.samples] {
        depth[p] = gt[p];
        bits[p] = true;
    }
    Ok((
        Tensor::new(&[1, 1, h, w], depth)?,
        ObservationMask::from_bools(1, h, w, &bits)?,
    ))
}

/// Zeroes the ground-truth mask outside rows `top..bottom`.
pub fn band_crop(frame: &Frame, top: usize, bottom: usize) -> Result<Frame> {
    let (h, w) = (frame.height(), frame.width());
    if top >= bottom || bottom > h {
        return Err(Error::InvalidArgument {
            op: "band_crop",
            msg: format!("band {top}..{bottom} is empty or outside 0..{h}"),
        });
    }
    let bits: Vec<bool> = (0..h * w)
        .map(|i| (top..bottom).contains(&(i / w)) && frame.valid_gt.is_set(i))
        .collect();
    let mut out = frame.clone();
    out.valid_gt = ObservationMask::from_bools(1, h, w, &bits)?;
    Ok(out)
}

/// Applies the configured mode and samples. The returned frame carries the
/// ground-truth mask that evaluation and training should use.
pub fn sample_inputs(frame: &Frame, cfg: &SamplerConfig) -> Result<(Frame, Tensor, ObservationMask)> {
    let frame = match cfg.mode {
        SampleMode::Uniform => frame.clone(),
        SampleMode::Band { top, bottom } => band_crop(frame, top, bottom)?,
    };
    let (sparse, mask) = uniform_sample(&frame, cfg)?;
    Ok((frame, sparse, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_scene;

    fn frame() -> Frame {
        synth_scene(5, 32, 32, 1.0).unwrap()
    }

    #[test]
    fn exact_count_and_values() {
        let f = frame();
        for s in [0, 1, 5, 20, 200, 1024] {
            let (sparse, mask) = uniform_sample(&f, &SamplerConfig::uniform(s, 9)).unwrap();
            assert_eq!(mask.count(), s);
            for i in 0..1024 {
                if mask.is_set(i) {
                    assert_eq!(sparse.data()[i], f.depth_gt.data()[i]);
                } else {
                    assert_eq!(sparse.data()[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn all_pixels_reproduces_ground_truth() {
        let f = frame();
        let (sparse, mask) = uniform_sample(&f, &SamplerConfig::uniform(1024, 4)).unwrap();
        assert_eq!(mask, f.valid_gt);
        assert_eq!(sparse, f.depth_gt);
    }

    #[test]
    fn too_many_samples_is_an_error() {
        assert!(uniform_sample(&frame(), &SamplerConfig::uniform(1025, 0)).is_err());
    }

    #[test]
    fn seeded_and_distinct() {
        let f = frame();
        let a = uniform_sample(&f, &SamplerConfig::uniform(50, 1)).unwrap();
        let b = uniform_sample(&f, &SamplerConfig::uniform(50, 1)).unwrap();
        let c = uniform_sample(&f, &SamplerConfig::uniform(50, 2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn band_restricts_samples_and_ground_truth() {
        let f = frame();
        let cfg = SamplerConfig {
            samples: 40,
            seed: 3,
            mode: SampleMode::middle_band(32),
        };
        let (cropped, _, mask) = sample_inputs(&f, &cfg).unwrap();
        assert_eq!(cropped.valid_gt.count(), 8 * 32);
        for i in 0..1024 {
            let row = i / 32;
            if !(12..20).contains(&row) {
                assert!(!mask.is_set(i) && !cropped.valid_gt.is_set(i));
            }
        }
        assert_eq!(mask.count(), 40);
        assert!(band_crop(&f, 5, 5).is_err());
        assert_eq!(band_crop(&f, 0, 32).unwrap(), f);
        let tall = synth_scene(6, 64, 48, 1.0).unwrap();
        assert_eq!(band_crop(&tall, 20, 28).unwrap().valid_gt.count(), 8 * 48);
        assert!(band_crop(&f, 0, 33).is_err());
    }
}
