//! Dense `f32` tensors of rank 1 to 4, row-major. Four-dimensional tensors
//! are laid out NCHW; three-dimensional feature maps are CHW.

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_dims(&dims)?;
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape("data length", numel, data.len()));
        }
        Ok(Self { dims, data })
    }

    /// Like [`Tensor::new`] but also rejects NaN and infinities. Used for
    /// anything read from disk.
    pub fn new_finite(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-finite value {} at element {pos}",
                data[pos]
            )));
        }
        Self::new(dims, data)
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        check_dims(dims).expect("invalid tensor dims");
        let numel = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        check_dims(dims).expect("invalid tensor dims");
        let numel: usize = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        let numel: usize = dims.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape element count", self.data.len(), numel));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        index
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn get(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f32) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    /// Elementwise sum; dims must match exactly.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_dims(other.dims())?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            dims: self.dims.clone(),
            data,
        })
    }

    /// Concatenates CHW (or NCHW with N = 1) tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let (_, h, w) = first.chw()?;
        let mut channels = 0;
        let mut data = Vec::new();
        for part in parts {
            let (c, ph, pw) = part.chw()?;
            if ph != h {
                return Err(Error::shape("height", h, ph));
            }
            if pw != w {
                return Err(Error::shape("width", w, pw));
            }
            channels += c;
            data.extend_from_slice(&part.data);
        }
        Tensor::new(vec![channels, h, w], data)
    }

    /// Interprets the tensor as a single CHW feature map.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match *self.dims.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            [1, c, h, w] => Ok((c, h, w)),
            [n, _, _, _] => Err(Error::shape("batch", 1, n)),
            _ => Err(Error::shape("rank", 3, self.dims.len())),
        }
    }

    pub fn expect_dims(&self, dims: &[usize]) -> Result<()> {
        if self.dims.len() != dims.len() {
            return Err(Error::shape("rank", dims.len(), self.dims.len()));
        }
        for (axis, (&want, &got)) in dims.iter().zip(&self.dims).enumerate() {
            if want != got {
                return Err(Error::shape(format!("axis {axis}"), want, got));
            }
        }
        Ok(())
    }

    /// True when both tensors have the same dims and bit-identical payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::Invalid(format!(
            "tensor rank must be 1..={MAX_RANK}, got {}",
            dims.len()
        )));
    }
    if let Some(axis) = dims.iter().position(|&d| d == 0) {
        return Err(Error::Invalid(format!("tensor axis {axis} has size 0")));
    }
    Ok(())
}
