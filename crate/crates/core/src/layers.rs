//! Sparsity-invariant convolution, mask propagation, masked pooling and the
//! residual building blocks shared by every network.

use crate::error::{Error, Result};
use crate::tensor::{out_dim, Graph, Tensor, Var};

/// Default normalizer guard for sparse convolution.
pub const SPARSE_CONV_EPS: f64 = 1e-8;

/// Binary per-pixel validity map, shape B x 1 x H x W. Carries no gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMask(Tensor);

impl ObservationMask {
    /// Wraps a B x 1 x H x W tensor, rejecting any value other than 0.0 or 1.0.
    pub fn new(t: Tensor) -> Result<Self> {
        let (_, c, _, _) = t.expect_rank4("ObservationMask")?;
        if c != 1 {
            return Err(Error::ShapeMismatch {
                op: "ObservationMask",
                dim: "channels",
                expected: 1,
                got: c,
            });
        }
        if let Some((index, &value)) = t.data().iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
            return Err(Error::NonBinaryMask { index, value });
        }
        Ok(Self(t.with_requires_grad(false)))
    }

    pub fn from_bools(batch: usize, height: usize, width: usize, bits: &[bool]) -> Result<Self> {
        let data = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Self::new(Tensor::new(&[batch, 1, height, width], data)?)
    }

    pub fn ones(batch: usize, height: usize, width: usize) -> Self {
        Self(Tensor::ones(&[batch, 1, height, width]))
    }

    pub fn zeros(batch: usize, height: usize, width: usize) -> Self {
        Self(Tensor::zeros(&[batch, 1, height, width]))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    /// (batch, height, width)
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[2], s[3])
    }

    pub fn count(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn density(&self) -> f64 {
        self.count() as f64 / self.0.len() as f64
    }

    pub fn is_set(&self, index: usize) -> bool {
        self.0.data()[index] == 1.0
    }

    /// Elementwise AND.
    pub fn and(&self, other: &ObservationMask) -> Result<ObservationMask> {
        if self.0.shape() != other.0.shape() {
            return Err(Error::InvalidArgument {
                op: "ObservationMask::and",
                msg: format!("shapes {:?} and {:?}", self.0.shape(), other.0.shape()),
            });
        }
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        Ok(Self(Tensor::new(self.0.shape(), data)?))
    }

    /// Checks that the mask's spatial dims match a B x C x H x W feature tensor.
    pub fn check_aligned(&self, op: &'static str, features: &Tensor) -> Result<()> {
        let (b, _, h, w) = features.expect_rank4(op)?;
        let (mb, mh, mw) = self.dims();
        for (dim, e, g) in [("batch", b, mb), ("height", h, mh), ("width", w, mw)] {
            if e != g {
                return Err(Error::ShapeMismatch {
                    op,
                    dim,
                    expected: e,
                    got: g,
                });
            }
        }
        Ok(())
    }
}

/// Weight (O x C x K x K) and bias (O) of a convolution bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub weight: Var,
    pub bias: Var,
}

impl ConvParams {
    pub fn apply(&self, g: &mut Graph, x: Var, stride: usize, pad: usize) -> Result<Var> {
        g.conv2d(x, self.weight, Some(self.bias), stride, pad)
    }

    /// Same-padded stride-1 convolution.
    pub fn same(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let k = g.shape(self.weight)[2];
        self.apply(g, x, 1, k / 2)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SparseConvParams {
    pub weight: Var,
    pub bias: Var,
    pub epsilon: f64,
}

/// Sliding-window sum of the mask: how many observed pixels each output window sees.
fn window_counts(mask: &ObservationMask, k: usize, stride: usize, pad: usize) -> Result<(Vec<f64>, usize, usize)> {
    let (b, h, w) = mask.dims();
    let bad = || Error::InvalidArgument {
        op: "sparse_conv",
        msg: format!("kernel {k} with pad {pad} does not fit {h}x{w}"),
    };
    let oh = out_dim(h, k, stride, pad).ok_or_else(bad)?;
    let ow = out_dim(w, k, stride, pad).ok_or_else(bad)?;
    let mut out = vec![0.0; b * oh * ow];
    for bi in 0..b {
        let m = &mask.data()[bi * h * w..(bi + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut n = 0.0;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            n += m[iy as usize * w + ix as usize];
                        }
                    }
                }
                out[(bi * oh + oy) * ow + ox] = n;
            }
        }
    }
    Ok((out, oh, ow))
}

/// Max-pools a binary mask: an output pixel is set when any pixel of its window is.
pub fn mask_maxpool(mask: &ObservationMask, k: usize, stride: usize, pad: usize) -> Result<ObservationMask> {
    let (b, _, _) = mask.dims();
    let (counts, oh, ow) = window_counts(mask, k, stride, pad)?;
    let data = counts.into_iter().map(|n| if n > 0.0 { 1.0 } else { 0.0 }).collect();
    ObservationMask::new(Tensor::new(&[b, 1, oh, ow], data)?)
}

/// Sparsity-invariant convolution.
///
/// Each output is the weighted sum over observed pixels of the window divided
/// by the number of observed pixels (plus `epsilon`), then biased. A window
/// with no observations yields exactly the bias. Unobserved feature values are
/// multiplied by zero before the convolution and cannot reach the output.
/// The returned mask is the input mask max-pooled over the same window.
pub fn sparse_conv(
    g: &mut Graph,
    features: Var,
    mask: &ObservationMask,
    p: &SparseConvParams,
    stride: usize,
    pad: usize,
) -> Result<(Var, ObservationMask)> {
    if !(p.epsilon > 0.0) {
        return Err(Error::InvalidArgument {
            op: "sparse_conv",
            msg: format!("epsilon must be positive, got {}", p.epsilon),
        });
    }
    mask.check_aligned("sparse_conv", g.value(features))?;
    let k = g.shape(p.weight)[2];
    let (counts, oh, ow) = window_counts(mask, k, stride, pad)?;
    let (b, _, _) = mask.dims();
    let norm = Tensor::new(&[b, 1, oh, ow], counts.iter().map(|n| 1.0 / (n + p.epsilon)).collect())?;
    let observed = g.mul_plane(features, mask.tensor())?;
    let summed = g.conv2d(observed, p.weight, None, stride, pad)?;
    let normalized = g.mul_plane(summed, &norm)?;
    let out = g.add_bias(normalized, p.bias)?;
    let out_mask = ObservationMask::new(Tensor::new(
        &[b, 1, oh, ow],
        counts.into_iter().map(|n| if n > 0.0 { 1.0 } else { 0.0 }).collect(),
    )?)?;
    Ok((out, out_mask))
}

/// Mean of the observed features in each non-overlapping `window` x `window`
/// tile (`window == 0`: the whole image), broadcast back over the tile.
/// Tiles without observations yield 0.
pub fn masked_avg_pool(g: &mut Graph, features: Var, mask: &ObservationMask, window: usize) -> Result<Var> {
    g.masked_avg_pool(features, mask.tensor(), window)
}

#[derive(Debug, Clone, Copy)]
pub struct ResidualBlockParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
}

/// `relu(x + conv2(relu(conv1(x))))` with 3x3 same-padded convolutions.
pub fn residual_block(g: &mut Graph, x: Var, p: &ResidualBlockParams) -> Result<Var> {
    let c = g.value(x).expect_rank4("residual_block")?.1;
    for conv in [p.conv1, p.conv2] {
        let ws = g.shape(conv.weight);
        if ws[0] != c || ws[1] != c {
            return Err(Error::ShapeMismatch {
                op: "residual_block",
                dim: "channels",
                expected: c,
                got: if ws[1] != c { ws[1] } else { ws[0] },
            });
        }
    }
    let h = p.conv1.same(g, x)?;
    let h = g.relu(h)?;
    let h = p.conv2.same(g, h)?;
    let sum = g.add(x, h)?;
    g.relu(sum)
}

/// Residual stride-2 downsampling block with a 1x1 projection shortcut.
#[derive(Debug, Clone, Copy)]
pub struct DownBlockParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub shortcut: ConvParams,
}

/// `relu(conv2(relu(conv1_s2(x))) + shortcut_s2(x))`; halves H and W.
pub fn residual_down_block(g: &mut Graph, x: Var, p: &DownBlockParams) -> Result<Var> {
    let h = p.conv1.apply(g, x, 2, 1)?;
    let h = g.relu(h)?;
    let h = p.conv2.same(g, h)?;
    let s = p.shortcut.apply(g, x, 2, 0)?;
    let sum = g.add(h, s)?;
    g.relu(sum)
}

#[derive(Debug, Clone, Copy)]
pub struct UpProjectionParams {
    /// 5x5, C -> C/2
    pub main1: ConvParams,
    /// 3x3, C/2 -> C/2
    pub main2: ConvParams,
    /// 5x5, C -> C/2
    pub projection: ConvParams,
}

/// Residual up-projection: nearest 2x upsampling, then
/// `relu(main2(relu(main1(u))) + projection(u))`. Doubles H and W, halves C.
pub fn residual_up_projection(g: &mut Graph, x: Var, p: &UpProjectionParams) -> Result<Var> {
    let c = g.value(x).expect_rank4("residual_up_projection")?.1;
    if c % 2 != 0 {
        return Err(Error::InvalidArgument {
            op: "residual_up_projection",
            msg: format!("channel count {c} is odd"),
        });
    }
    for conv in [p.main1, p.projection] {
        let ws = g.shape(conv.weight);
        if ws[1] != c || ws[0] != c / 2 {
            return Err(Error::ShapeMismatch {
                op: "residual_up_projection",
                dim: "channels",
                expected: c,
                got: ws[1],
            });
        }
    }
    let u = g.upsample2x(x)?;
    let m = p.main1.same(g, u)?;
    let m = g.relu(m)?;
    let m = p.main2.same(g, m)?;
    let s = p.projection.same(g, u)?;
    let sum = g.add(m, s)?;
    g.relu(sum)
}
