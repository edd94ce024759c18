//! Synthetic scenes, LIDAR sparsity simulation, augmentation and dataset IO.

mod augment;
pub mod io;
mod manifest;
mod sampling;
mod synth;

pub use augment::{augment, augment_with, AugmentParams};
pub use manifest::{dataset_manifest, load_frame, load_split, write_manifest, FrameRef, Split, MANIFEST_FILE};
pub use sampling::{band_crop, sample_inputs, uniform_sample, SampleMode, SamplerConfig};
pub use synth::{edge_map, synth_scene, write_synth_dataset, DEPTH_MAX, DEPTH_MIN};

use crate::error::{Error, Result};
use crate::layers::ObservationMask;
use crate::tensor::Tensor;

/// One sample: RGB in [0, 1] (1 x 3 x H x W), ground-truth depth in meters
/// (1 x 1 x H x W) and the mask of pixels whose ground truth is real.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: String,
    pub rgb: Tensor,
    pub depth_gt: Tensor,
    pub valid_gt: ObservationMask,
}

impl Frame {
    pub fn new(id: impl Into<String>, rgb: Tensor, depth_gt: Tensor, valid_gt: ObservationMask) -> Result<Self> {
        let (_, c, h, w) = rgb.expect_rank4("Frame")?;
        if c != 3 {
            return Err(Error::ShapeMismatch {
                op: "Frame",
                dim: "channels",
                expected: 3,
                got: c,
            });
        }
        let (_, dc, dh, dw) = depth_gt.expect_rank4("Frame")?;
        for (dim, e, g) in [("channels", 1, dc), ("height", h, dh), ("width", w, dw)] {
            if e != g {
                return Err(Error::ShapeMismatch {
                    op: "Frame",
                    dim,
                    expected: e,
                    got: g,
                });
            }
        }
        valid_gt.check_aligned("Frame", &depth_gt)?;
        Ok(Self {
            id: id.into(),
            rgb,
            depth_gt,
            valid_gt,
        })
    }

    pub fn height(&self) -> usize {
        self.depth_gt.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.depth_gt.shape()[3]
    }
}
