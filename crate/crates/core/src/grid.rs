//! Dense 2D / 3D scalar grids (images and masks).

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// A row-major grid with 2 or 3 spatial axes. The last axis varies fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub type Image = Grid<f64>;
pub type Mask = Grid<u8>;

impl<T: Copy> Grid<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(n, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Result<Self> {
        check_shape(&shape)?;
        let n = shape.iter().product();
        Ok(Self { shape, data: vec![value; n] })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Shape padded with leading ones to `[depth, height, width]`.
    pub fn dims3(&self) -> [usize; 3] {
        dims3(&self.shape)
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.shape.len()];
        for axis in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[axis] = strides[axis + 1] * self.shape[axis + 1];
        }
        strides
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum()
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Copies the box starting at `origin` with extent `size`. Positions that
    /// fall outside the grid (negative origin or past the end) take `fill`.
    pub fn window(&self, origin: &[isize], size: &[usize], fill: T) -> Result<Grid<T>> {
        if origin.len() != self.ndim() || size.len() != self.ndim() {
            return Err(shape_err(self.ndim(), (origin.len(), size.len())));
        }
        let [sd, sh, sw] = self.dims3();
        let o = pad3_signed(origin);
        let [nd, nh, nw] = dims3(size);
        let mut out = Vec::with_capacity(nd * nh * nw);
        for d in 0..nd {
            let id = o[0] + d as isize;
            for h in 0..nh {
                let ih = o[1] + h as isize;
                for w in 0..nw {
                    let iw = o[2] + w as isize;
                    let inside = id >= 0
                        && ih >= 0
                        && iw >= 0
                        && (id as usize) < sd
                        && (ih as usize) < sh
                        && (iw as usize) < sw;
                    out.push(if inside {
                        self.data[(id as usize * sh + ih as usize) * sw + iw as usize]
                    } else {
                        fill
                    });
                }
            }
        }
        Grid::new(size.to_vec(), out)
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if !(2..=3).contains(&shape.len()) {
        return Err(Error::Invalid(alloc::format!(
            "grids need 2 or 3 spatial axes, got {}",
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(Error::Invalid(alloc::format!("zero-length axis in {shape:?}")));
    }
    Ok(())
}

pub fn dims3(shape: &[usize]) -> [usize; 3] {
    let mut out = [1; 3];
    let k = shape.len().min(3);
    out[3 - k..].copy_from_slice(&shape[shape.len() - k..]);
    out
}

fn pad3_signed(v: &[isize]) -> [isize; 3] {
    let mut out = [0; 3];
    let k = v.len().min(3);
    out[3 - k..].copy_from_slice(&v[v.len() - k..]);
    out
}

/// Per-axis physical voxel size in millimetres.
pub fn check_spacing(spacing: &[f64], ndim: usize) -> Result<()> {
    if spacing.len() != ndim {
        return Err(shape_err(ndim, spacing.len()));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Invalid(alloc::format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}
