use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::conv::{conv2d_backward, conv2d_forward, out_dim, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Add(Var, Var),
    Concat(Var, Var),
    Upsample2x(Var),
    /// Multiplies every channel by a constant B x 1 x H x W plane.
    MulPlane {
        x: Var,
        plane: Vec<f64>,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    MaskedAvgPool {
        x: Var,
        mask: Vec<f64>,
        window: (usize, usize),
        counts: Vec<f64>,
    },
    L1Loss {
        pred: Var,
        target: Vec<f64>,
        valid: Vec<f64>,
        count: f64,
    },
    Sum(Var),
    DotConst {
        x: Var,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    freed: bool,
}

/// A single-use computation tape.
///
/// Nodes are appended in evaluation order; [`Graph::backward`] walks them in
/// reverse. After backward the intermediate buffers are released and only
/// leaf gradients and the loss value remain readable.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        return Ok(());
    }
    if a.shape().len() != b.shape().len() {
        return Err(Error::Rank {
            op,
            expected: a.shape().len(),
            got: b.shape().to_vec(),
        });
    }
    let (i, (&e, &g)) = a
        .shape()
        .iter()
        .zip(b.shape())
        .enumerate()
        .find(|(_, (x, y))| x != y)
        .expect("shapes differ");
    Err(Error::ShapeMismatch {
        op,
        dim: dim_name(a.shape().len(), i),
        expected: e,
        got: g,
    })
}

fn dim_name(rank: usize, i: usize) -> &'static str {
    if rank == 4 {
        ["batch", "channels", "height", "width"][i]
    } else {
        "dim"
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            freed: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::GraphConsumed)
        } else {
            Ok(())
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adds a leaf; it tracks gradients when `t.requires_grad()` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        assert!(!node.freed, "value of node {} was released by backward", v.0);
        &node.value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.check_live()?;
        let x = self.value(input);
        let w = self.value(weight);
        let (batch, in_ch, height, width) = x.expect_rank4("conv2d")?;
        let (out_ch, w_in, kh, kw) = w.expect_rank4("conv2d")?;
        if w_in != in_ch {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dim: "channels",
                expected: w_in,
                got: in_ch,
            });
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel must be square with odd size, got {kh}x{kw}"),
            });
        }
        if let Some(b) = bias {
            let bt = self.value(b);
            if bt.shape() != [out_ch] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    dim: "bias",
                    expected: out_ch,
                    got: bt.len(),
                });
            }
        }
        let bad = |dim: &'static str, size: usize| Error::InvalidArgument {
            op: "conv2d",
            msg: format!("{dim} {size} too small for kernel {kh} with pad {pad} and stride {stride}"),
        };
        let out_h = out_dim(height, kh, stride, pad).ok_or_else(|| bad("height", height))?;
        let out_w = out_dim(width, kh, stride, pad).ok_or_else(|| bad("width", width))?;
        let geom = ConvGeom {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            k: kh,
            stride,
            pad,
            out_h,
            out_w,
        };
        let data = conv2d_forward(&geom, x.data(), w.data(), bias.map(|b| self.value(b).data()));
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        let out = Tensor::new(&[batch, out_ch, out_h, out_w], data)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(x);
        Ok(self.push(out, Op::Relu(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (ba, ca, ha, wa) = ta.expect_rank4("concat_channels")?;
        let (bb, cb, hb, wb) = tb.expect_rank4("concat_channels")?;
        for (dim, e, g) in [("batch", ba, bb), ("height", ha, hb), ("width", wa, wb)] {
            if e != g {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    dim,
                    expected: e,
                    got: g,
                });
            }
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(ba * (ca + cb) * plane);
        for bi in 0..ba {
            data.extend_from_slice(&ta.data()[bi * ca * plane..(bi + 1) * ca * plane]);
            data.extend_from_slice(&tb.data()[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        let out = Tensor::new(&[ba, ca + cb, ha, wa], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let t = self.value(x);
        let (b, c, h, w) = t.expect_rank4("nearest_upsample2x")?;
        let mut data = vec![0.0; b * c * 4 * h * w];
        for (p, plane) in t.data().chunks(h * w).enumerate() {
            let dst = &mut data[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(&[b, c, 2 * h, 2 * w], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample2x(x), rg))
    }

    /// Multiplies each channel of `x` (B x C x H x W) by the constant plane (B x 1 x H x W).
    pub fn mul_plane(&mut self, x: Var, plane: &Tensor) -> Result<Var> {
        self.check_live()?;
        let t = self.value(x);
        let (b, c, h, w) = t.expect_rank4("mul_plane")?;
        let (pb, pc, ph, pw) = plane.expect_rank4("mul_plane")?;
        for (dim, e, g) in [
            ("batch", b, pb),
            ("channels", 1, pc),
            ("height", h, ph),
            ("width", w, pw),
        ] {
            if e != g {
                return Err(Error::ShapeMismatch {
                    op: "mul_plane",
                    dim,
                    expected: e,
                    got: g,
                });
            }
        }
        let hw = h * w;
        let mut data = t.data().to_vec();
        for bi in 0..b {
            let p = &plane.data()[bi * hw..(bi + 1) * hw];
            for ci in 0..c {
                let start = (bi * c + ci) * hw;
                data[start..start + hw].iter_mut().zip(p).for_each(|(v, m)| *v *= m);
            }
        }
        let out = Tensor::new(t.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::MulPlane {
                x,
                plane: plane.data().to_vec(),
            },
            rg,
        ))
    }

    /// Adds a per-channel bias (shape `[C]`) to a rank-4 tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check_live()?;
        let t = self.value(x);
        let bt = self.value(bias);
        let (b, c, h, w) = t.expect_rank4("add_bias")?;
        if bt.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                dim: "channels",
                expected: c,
                got: bt.len(),
            });
        }
        let mut data = t.data().to_vec();
        for (p, chunk) in data.chunks_mut(h * w).enumerate() {
            let bv = bt.data()[p % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let out = Tensor::new(&[b, c, h, w], data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias { x, bias }, rg))
    }

    /// Average of `x` over the observed pixels of each non-overlapping tile,
    /// broadcast back to every pixel of the tile.
    ///
    /// `mask` is B x 1 x H x W. `window == 0` means one tile covering the whole
    /// image. Within a tile the observed values are summed in ascending value
    /// order, so the result does not depend on which pixel holds which value.
    pub fn masked_avg_pool(&mut self, x: Var, mask: &Tensor, window: usize) -> Result<Var> {
        self.check_live()?;
        let t = self.value(x);
        let (b, c, h, w) = t.expect_rank4("masked_avg_pool")?;
        let (mb, mc, mh, mw) = mask.expect_rank4("masked_avg_pool")?;
        for (dim, e, g) in [
            ("batch", b, mb),
            ("channels", 1, mc),
            ("height", h, mh),
            ("width", w, mw),
        ] {
            if e != g {
                return Err(Error::ShapeMismatch {
                    op: "masked_avg_pool",
                    dim,
                    expected: e,
                    got: g,
                });
            }
        }
        let (th, tw) = if window == 0 { (h, w) } else { (window, window) };
        if h % th != 0 || w % tw != 0 {
            return Err(Error::InvalidArgument {
                op: "masked_avg_pool",
                msg: format!("window {window} does not divide {h}x{w}"),
            });
        }
        let (ny, nx) = (h / th, w / tw);
        let hw = h * w;
        let mut counts = vec![0.0; b * ny * nx];
        for bi in 0..b {
            let m = &mask.data()[bi * hw..(bi + 1) * hw];
            for (idx, &mv) in m.iter().enumerate() {
                let (y, xx) = (idx / w, idx % w);
                counts[(bi * ny + y / th) * nx + xx / tw] += mv;
            }
        }
        let mut data = vec![0.0; t.len()];
        let mut bucket = Vec::with_capacity(th * tw);
        for bi in 0..b {
            let m = &mask.data()[bi * hw..(bi + 1) * hw];
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                let src = &t.data()[base..base + hw];
                for ty in 0..ny {
                    for tx in 0..nx {
                        bucket.clear();
                        for y in ty * th..(ty + 1) * th {
                            for xx in tx * tw..(tx + 1) * tw {
                                let p = y * w + xx;
                                if m[p] != 0.0 {
                                    bucket.push(src[p] * m[p]);
                                }
                            }
                        }
                        bucket.sort_by(f64::total_cmp);
                        let n = counts[(bi * ny + ty) * nx + tx];
                        let r = bucket.iter().sum::<f64>() / n.max(1.0);
                        for y in ty * th..(ty + 1) * th {
                            data[base + y * w + tx * tw..base + y * w + (tx + 1) * tw].fill(r);
                        }
                    }
                }
            }
        }
        let out = Tensor::new(t.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::MaskedAvgPool {
                x,
                mask: mask.data().to_vec(),
                window: (th, tw),
                counts,
            },
            rg,
        ))
    }

    /// Mean absolute error over pixels where `valid` is nonzero.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor, valid: &Tensor) -> Result<Var> {
        self.check_live()?;
        let p = self.value(pred);
        same_shape("l1_loss", p, target)?;
        same_shape("l1_loss", p, valid)?;
        let count: f64 = valid.data().iter().filter(|&&v| v != 0.0).count() as f64;
        if count == 0.0 {
            return Err(Error::EmptyValidSet { op: "l1_loss" });
        }
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .zip(valid.data())
            .filter(|(_, &m)| m != 0.0)
            .map(|((a, b), _)| (a - b).abs())
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(total / count),
            Op::L1Loss {
                pred,
                target: target.data().to_vec(),
                valid: valid.data().to_vec(),
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let s = self.value(x).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    /// Scalar `sum(x * weights)` for a constant weight tensor of the same shape.
    pub fn dot_const(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        self.check_live()?;
        let t = self.value(x);
        same_shape("dot_const", t, weights)?;
        let s = t.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::DotConst {
                x,
                weights: weights.data().to_vec(),
            },
            rg,
        ))
    }

    /// Hash of every branch decision the forward pass took (ReLU signs, L1
    /// residual signs). Two evaluations with equal signatures lie on the same
    /// smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.nodes[x.0].value.data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::L1Loss { pred, target, .. } => {
                    for (p, t) in self.nodes[pred.0].value.data().iter().zip(target) {
                        (p.partial_cmp(t)).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse-mode pass from a scalar loss. Populates the gradient of every
    /// gradient-tracking leaf (zeros for leaves the loss does not reach) and
    /// releases intermediate buffers. A second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_live()?;
        let lt = self.value(loss);
        if lt.len() != 1 || !lt.shape().iter().all(|&d| d == 1) {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if let Op::Leaf = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                    node.value.set_grad(g)?;
                }
            } else if i != loss.0 {
                node.value = Tensor::zeros(&[0]);
                node.freed = true;
            }
        }
        self.consumed = true;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let want = (self.rg(*input), self.rg(*weight), bias.is_some_and(|b| self.rg(b)));
                let (gx, gw, gb) =
                    conv2d_backward(geom, self.value(*input).data(), self.value(*weight).data(), g, want);
                if let Some(gx) = gx {
                    accumulate(&mut grads[input.0], gx);
                }
                if let Some(gw) = gw {
                    accumulate(&mut grads[weight.0], gw);
                }
                if let (Some(gb), Some(b)) = (gb, bias) {
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(gi, &v)| if v > 0.0 { *gi } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], d);
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], g.to_vec());
                }
            }
            Op::Concat(a, b) => {
                let (bsz, ca, h, w) = self.value(*a).expect_rank4("concat_channels")?;
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                let (mut ga, mut gb) = (
                    Vec::with_capacity(bsz * ca * plane),
                    Vec::with_capacity(bsz * cb * plane),
                );
                for bi in 0..bsz {
                    let base = bi * (ca + cb) * plane;
                    ga.extend_from_slice(&g[base..base + ca * plane]);
                    gb.extend_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
                }
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], ga);
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Upsample2x(x) => {
                let (_, _, h, w) = self.value(*x).expect_rank4("nearest_upsample2x")?;
                let mut d = vec![0.0; self.value(*x).len()];
                for (p, plane) in g.chunks(4 * h * w).enumerate() {
                    let dst = &mut d[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += plane[y * 2 * w + xx];
                        }
                    }
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::MulPlane { x, plane } => {
                let (b, c, h, w) = self.value(*x).expect_rank4("mul_plane")?;
                let hw = h * w;
                let mut d = g.to_vec();
                for bi in 0..b {
                    let p = &plane[bi * hw..(bi + 1) * hw];
                    for ci in 0..c {
                        let start = (bi * c + ci) * hw;
                        d[start..start + hw].iter_mut().zip(p).for_each(|(v, m)| *v *= m);
                    }
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::AddBias { x, bias } => {
                let (_, c, h, w) = self.value(*x).expect_rank4("add_bias")?;
                if self.rg(*x) {
                    accumulate(&mut grads[x.0], g.to_vec());
                }
                if self.rg(*bias) {
                    let mut gb = vec![0.0; c];
                    for (p, chunk) in g.chunks(h * w).enumerate() {
                        gb[p % c] += chunk.iter().sum::<f64>();
                    }
                    accumulate(&mut grads[bias.0], gb);
                }
            }
            Op::MaskedAvgPool {
                x,
                mask,
                window: (th, tw),
                counts,
            } => {
                let (b, c, h, w) = self.value(*x).expect_rank4("masked_avg_pool")?;
                let (ny, nx) = (h / th, w / tw);
                let hw = h * w;
                let mut d = vec![0.0; g.len()];
                for bi in 0..b {
                    let m = &mask[bi * hw..(bi + 1) * hw];
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        for ty in 0..ny {
                            for tx in 0..nx {
                                let mut total = 0.0;
                                for y in ty * th..(ty + 1) * th {
                                    total += g[base + y * w + tx * tw..base + y * w + (tx + 1) * tw]
                                        .iter()
                                        .sum::<f64>();
                                }
                                let share = total / counts[(bi * ny + ty) * nx + tx].max(1.0);
                                for y in ty * th..(ty + 1) * th {
                                    for xx in tx * tw..(tx + 1) * tw {
                                        d[base + y * w + xx] = share * m[y * w + xx];
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(&mut grads[x.0], d);
            }
            Op::L1Loss {
                pred,
                target,
                valid,
                count,
            } => {
                let scale = g[0] / count;
                let d = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target)
                    .zip(valid)
                    .map(|((p, t), &m)| {
                        if m == 0.0 || p == t {
                            0.0
                        } else if p > t {
                            scale
                        } else {
                            -scale
                        }
                    })
                    .collect();
                accumulate(&mut grads[pred.0], d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(&mut grads[x.0], vec![g[0]; n]);
            }
            Op::DotConst { x, weights } => {
                accumulate(&mut grads[x.0], weights.iter().map(|w| w * g[0]).collect());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_one_by_one_scales() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let w = g.constant(t(&[1, 1, 1, 1], &[2.]));
        let b = g.constant(t(&[1], &[0.]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[2., 4., 6., 8.]);
    }

    #[test]
    fn conv_centre_impulse_spreads_to_ones() {
        let mut g = Graph::new();
        let mut d = vec![0.0; 9];
        d[4] = 1.0;
        let x = g.constant(t(&[1, 1, 3, 3], &d));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let b = g.constant(t(&[1], &[0.]));
        let y = g.conv2d(x, w, Some(b), 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1.0; 9]);
    }

    #[test]
    fn conv_zero_weight_gives_bias() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 3, 3], &[0.7; 18]));
        let w = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let b = g.constant(t(&[1], &[-1.5]));
        let y = g.conv2d(x, w, Some(b), 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[-1.5; 9]);
    }

    #[test]
    fn conv_reports_offending_dimension() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        match g.conv2d(x, w, None, 1, 1) {
            Err(Error::ShapeMismatch { dim, expected, got, .. }) => {
                assert_eq!((dim, expected, got), ("channels", 3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
        let w2 = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(
            g.conv2d(x, w2, None, 1, 0),
            Err(Error::InvalidArgument { .. })
        ));
        let w3 = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
        assert!(g.conv2d(x, w3, None, 1, 0).is_err());
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[-1., 0., 2.]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0., 0., 2.]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0., 0., 1.]);
    }

    #[test]
    fn relu_identity_on_nonnegative() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4], &[0., 1., 2.5, 7.]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn concat_orders_a_then_b_and_splits_grad() {
        let mut g = Graph::new();
        let a = g.param(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let b = g.param(t(&[1, 1, 2, 2], &[5., 6., 7., 8.]));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.shape(c), &[1, 2, 2, 2]);
        assert_eq!(g.value(c).data(), &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let back = g.value(c).slice_channels(0, 1).unwrap();
        assert_eq!(back.data(), g.value(a).data());
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0; 4]);
        assert_eq!(g.grad(b).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let b = g.constant(Tensor::zeros(&[1, 1, 2, 3]));
        assert!(matches!(
            g.concat_channels(a, b),
            Err(Error::ShapeMismatch { dim: "width", .. })
        ));
    }

    #[test]
    fn upsample_replicates_blocks() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let y = g.upsample2x(x).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let c = g.constant(Tensor::full(&[1, 2, 3, 3], 2.5));
        let u = g.upsample2x(c).unwrap();
        assert!(g.value(u).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn l1_loss_examples() {
        let mut g = Graph::new();
        let p = g.constant(t(&[2], &[2., 2.]));
        let same = g.l1_loss(p, &t(&[2], &[2., 2.]), &Tensor::ones(&[2])).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let l = g.l1_loss(p, &t(&[2], &[1., 3.]), &Tensor::ones(&[2])).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
        let p2 = g.constant(t(&[2], &[2., 9.]));
        let l2 = g.l1_loss(p2, &t(&[2], &[1., 0.]), &t(&[2], &[1., 0.])).unwrap();
        assert_eq!(g.value(l2).item(), 1.0);
        assert!(matches!(
            g.l1_loss(p2, &t(&[2], &[1., 0.]), &Tensor::zeros(&[2])),
            Err(Error::EmptyValidSet { .. })
        ));
    }

    #[test]
    fn dot_grad_is_the_other_factor() {
        let mut g = Graph::new();
        let x = t(&[4], &[0.5, -1., 2., 3.]);
        let w = g.param(t(&[4], &[1., 1., 1., 1.]));
        let loss = g.dot_const(w, &x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), x.data());
    }

    #[test]
    fn disconnected_param_gets_zero_grad() {
        let mut g = Graph::new();
        let used = g.param(t(&[2], &[1., 2.]));
        let unused = g.param(t(&[3], &[1., 2., 3.]));
        let s = g.sum(used).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.backward(s), Err(Error::GraphConsumed));
        assert!(g.relu(x).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1., 2.]));
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NotScalar(_))));
    }

    #[test]
    fn masked_avg_pool_global_mean_of_observed() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[2., 100., -7., 4.]));
        let mask = t(&[1, 1, 2, 2], &[1., 0., 0., 1.]);
        let y = g.masked_avg_pool(x, &mask, 0).unwrap();
        assert_eq!(g.value(y).data(), &[3.0; 4]);
        let empty = Tensor::zeros(&[1, 1, 2, 2]);
        let z = g.masked_avg_pool(x, &empty, 0).unwrap();
        assert_eq!(g.value(z).data(), &[0.0; 4]);
        assert!(g.masked_avg_pool(x, &mask, 3).is_err());
    }
}
