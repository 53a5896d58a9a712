//! Single-sample activation tensors, channel-major over a 3D spatial box.
//!
//! 2D data is carried with a depth of one, so every layer is written once
//! against `[channels, depth, height, width]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self { channels, dims, data: vec![0.0; channels * dims[0] * dims[1] * dims[2]] }
    }

    pub fn from_vec(channels: usize, dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let n = channels * dims[0] * dims[1] * dims[2];
        if n != data.len() {
            return Err(shape_err(n, data.len()));
        }
        Ok(Self { channels, dims, data })
    }

    pub fn spatial(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spatial();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.spatial();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }

    /// Stacks channels of `parts` (all sharing spatial dims) in order.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        let dims = parts[0].dims;
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.dims != dims {
                return Err(shape_err(dims, p.dims));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { channels, dims, data })
    }

    /// Splits off channel ranges of the given widths.
    pub fn split(&self, widths: &[usize]) -> Vec<Tensor> {
        let n = self.spatial();
        let mut start = 0;
        widths
            .iter()
            .map(|&w| {
                let t = Tensor {
                    channels: w,
                    dims: self.dims,
                    data: self.data[start * n..(start + w) * n].to_vec(),
                };
                start += w;
                t
            })
            .collect()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn shape_vec(&self) -> [usize; 4] {
        [self.channels, self.dims[0], self.dims[1], self.dims[2]]
    }
}
