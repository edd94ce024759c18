//! Dense 64-bit tensors and a tape-based reverse-mode autodiff graph.

mod conv;
mod graph;
mod optim;

pub use graph::{Graph, Var};
pub use optim::{sgd_step, Param, ParamGroup};

pub(crate) use conv::out_dim;

use crate::error::{Error, Result};

/// Row-major dense tensor. Image tensors are laid out as batch, channel, height, width.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[], value)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::DataLength {
                len: grad.len(),
                shape: self.shape.clone(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// The single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::DataLength {
                len: self.data.len(),
                shape: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Unpacks a rank-4 shape.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        self.expect_rank4("dims4")
    }

    pub fn expect_rank4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::Rank {
                op,
                expected: 4,
                got: self.shape.clone(),
            }),
        }
    }

    /// Copies channels `start..end` of a rank-4 tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        let (b, c, h, w) = self.expect_rank4("slice_channels")?;
        if start > end || end > c {
            return Err(Error::InvalidArgument {
                op: "slice_channels",
                msg: format!("range {start}..{end} outside 0..{c}"),
            });
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(b * (end - start) * plane);
        for bi in 0..b {
            let base = bi * c * plane;
            out.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Tensor::new(&[b, end - start, h, w], out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert_eq!(Tensor::new(&[2, 2], vec![1.0; 4]).unwrap().len(), 4);
    }

    #[test]
    fn slice_channels_picks_planes() {
        let t = Tensor::new(&[1, 3, 1, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let s = t.slice_channels(1, 3).unwrap();
        assert_eq!(s.shape(), &[1, 2, 1, 2]);
        assert_eq!(s.data(), &[3., 4., 5., 6.]);
        assert!(t.slice_channels(2, 4).is_err());
    }

    #[test]
    fn grad_must_match_shape() {
        let mut t = Tensor::zeros(&[3]);
        assert!(t.set_grad(vec![0.0; 2]).is_err());
        t.set_grad(vec![1.0; 3]).unwrap();
        assert_eq!(t.grad(), Some(&[1.0, 1.0, 1.0][..]));
    }
}
