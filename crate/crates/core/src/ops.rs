//! Layer kernels with explicit backward passes.
//!
//! Weights are plain slices borrowed from a subnetwork's flat parameter
//! buffer; gradients are accumulated (`+=`) into a buffer with the same
//! layout, so a parameter receives exactly the sum of the terms routed to it.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Geometry of a (possibly strided) convolution with symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeom {
    /// Same-padded convolution (odd kernels).
    pub fn same(in_channels: usize, out_channels: usize, kernel: [usize; 3], stride: [usize; 3]) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        }
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.patch_len()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel[0] * self.kernel[1] * self.kernel[2]
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = (dims[a] + 2 * self.padding[a] - self.kernel[a]) / self.stride[a] + 1;
        }
        out
    }

    /// Multiply-accumulates of one forward pass.
    pub fn macs(&self, dims: [usize; 3]) -> u64 {
        let o = self.out_dims(dims);
        (self.weight_len() * o[0] * o[1] * o[2]) as u64
    }

    // Visits (column row, input offset) pairs for every output position;
    // `None` marks taps that land in the zero padding.
    fn for_each_tap(&self, dims: [usize; 3], mut f: impl FnMut(usize, usize, Option<usize>)) {
        let o = self.out_dims(dims);
        let n_out = o[0] * o[1] * o[2];
        let [kd, kh, kw] = self.kernel;
        let mut row = 0;
        for ic in 0..self.in_channels {
            let base = ic * dims[0] * dims[1] * dims[2];
            for a in 0..kd {
                for b in 0..kh {
                    for c in 0..kw {
                        let mut col = row * n_out;
                        for od in 0..o[0] {
                            let id = (od * self.stride[0] + a) as isize - self.padding[0] as isize;
                            for oh in 0..o[1] {
                                let ih = (oh * self.stride[1] + b) as isize - self.padding[1] as isize;
                                let row_ok = id >= 0
                                    && ih >= 0
                                    && (id as usize) < dims[0]
                                    && (ih as usize) < dims[1];
                                for ow in 0..o[2] {
                                    let iw = (ow * self.stride[2] + c) as isize - self.padding[2] as isize;
                                    let src = if row_ok && iw >= 0 && (iw as usize) < dims[2] {
                                        Some(base + (id as usize * dims[1] + ih as usize) * dims[2] + iw as usize)
                                    } else {
                                        None
                                    };
                                    f(row, col, src);
                                    col += 1;
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &Tensor) -> Vec<f64> {
        let o = self.out_dims(x.dims);
        let mut cols = vec![0.0; self.patch_len() * o[0] * o[1] * o[2]];
        self.for_each_tap(x.dims, |_, col, src| {
            if let Some(s) = src {
                cols[col] = x.data[s];
            }
        });
        cols
    }

    pub fn forward(&self, weight: &[f64], bias: &[f64], x: &Tensor) -> Tensor {
        debug_assert_eq!(x.channels, self.in_channels);
        let o = self.out_dims(x.dims);
        let n = o[0] * o[1] * o[2];
        let k = self.patch_len();
        let mut out = Tensor::zeros(self.out_channels, o);
        let pointwise = self.kernel == [1, 1, 1] && self.stride == [1, 1, 1];
        let cols_owned;
        let cols: &[f64] = if pointwise {
            &x.data
        } else {
            cols_owned = self.im2col(x);
            &cols_owned
        };
        for oc in 0..self.out_channels {
            let row = &mut out.data[oc * n..(oc + 1) * n];
            row.fill(bias[oc]);
            let w = &weight[oc * k..(oc + 1) * k];
            for (kk, &wv) in w.iter().enumerate() {
                if wv != 0.0 {
                    axpy(row, wv, &cols[kk * n..(kk + 1) * n]);
                }
            }
        }
        out
    }

    /// Accumulates weight and bias gradients and returns the input gradient.
    pub fn backward(
        &self,
        weight: &[f64],
        x: &Tensor,
        dy: &Tensor,
        d_weight: &mut [f64],
        d_bias: &mut [f64],
    ) -> Tensor {
        let o = self.out_dims(x.dims);
        let n = o[0] * o[1] * o[2];
        let k = self.patch_len();
        debug_assert_eq!(dy.dims, o);
        let pointwise = self.kernel == [1, 1, 1] && self.stride == [1, 1, 1];
        let cols_owned;
        let cols: &[f64] = if pointwise {
            &x.data
        } else {
            cols_owned = self.im2col(x);
            &cols_owned
        };
        let mut d_cols = vec![0.0; k * n];
        for oc in 0..self.out_channels {
            let g = &dy.data[oc * n..(oc + 1) * n];
            d_bias[oc] += g.iter().sum::<f64>();
            let w = &weight[oc * k..(oc + 1) * k];
            let dw = &mut d_weight[oc * k..(oc + 1) * k];
            for kk in 0..k {
                let col = &cols[kk * n..(kk + 1) * n];
                dw[kk] += dot(g, col);
                if w[kk] != 0.0 {
                    axpy(&mut d_cols[kk * n..(kk + 1) * n], w[kk], g);
                }
            }
        }
        if pointwise {
            return Tensor { channels: x.channels, dims: x.dims, data: d_cols };
        }
        let mut dx = Tensor::zeros(x.channels, x.dims);
        self.for_each_tap(x.dims, |_, col, src| {
            if let Some(s) = src {
                dx.data[s] += d_cols[col];
            }
        });
        dx
    }
}

/// Transposed convolution whose kernel equals its stride (non-overlapping
/// upsampling). Weight layout is `[in, out, kd, kh, kw]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub factor: [usize; 3],
}

impl UpGeom {
    pub fn weight_len(&self) -> usize {
        self.in_channels * self.out_channels * self.factor.iter().product::<usize>()
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        [dims[0] * self.factor[0], dims[1] * self.factor[1], dims[2] * self.factor[2]]
    }

    pub fn macs(&self, dims: [usize; 3]) -> u64 {
        (self.weight_len() * dims[0] * dims[1] * dims[2]) as u64
    }

    fn visit(&self, dims: [usize; 3], mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let [fd, fh, fw] = self.factor;
        let taps = fd * fh * fw;
        let o = self.out_dims(dims);
        for ic in 0..self.in_channels {
            for oc in 0..self.out_channels {
                let wbase = (ic * self.out_channels + oc) * taps;
                for a in 0..fd {
                    for b in 0..fh {
                        for c in 0..fw {
                            let widx = wbase + (a * fh + b) * fw + c;
                            for d in 0..dims[0] {
                                for h in 0..dims[1] {
                                    let src_row = ((ic * dims[0] + d) * dims[1] + h) * dims[2];
                                    let dst_row = ((oc * o[0] + d * fd + a) * o[1] + h * fh + b) * o[2];
                                    for w in 0..dims[2] {
                                        f(widx, src_row + w, dst_row + w * fw + c, ic, oc);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, weight: &[f64], bias: &[f64], x: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(self.out_channels, self.out_dims(x.dims));
        for oc in 0..self.out_channels {
            out.channel_mut(oc).fill(bias[oc]);
        }
        self.visit(x.dims, |wi, src, dst, _, _| {
            out.data[dst] += weight[wi] * x.data[src];
        });
        out
    }

    pub fn backward(
        &self,
        weight: &[f64],
        x: &Tensor,
        dy: &Tensor,
        d_weight: &mut [f64],
        d_bias: &mut [f64],
    ) -> Tensor {
        for oc in 0..self.out_channels {
            d_bias[oc] += dy.channel(oc).iter().sum::<f64>();
        }
        let mut dx = Tensor::zeros(x.channels, x.dims);
        self.visit(x.dims, |wi, src, dst, _, _| {
            d_weight[wi] += x.data[src] * dy.data[dst];
            dx.data[src] += weight[wi] * dy.data[dst];
        });
        dx
    }
}

/// Saved statistics of an instance-norm forward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Per-sample, per-channel normalization with affine `gamma`/`beta`.
pub fn instance_norm_forward(gamma: &[f64], beta: &[f64], x: &Tensor) -> (Tensor, NormCache) {
    let n = x.spatial() as f64;
    let mut y = Tensor::zeros(x.channels, x.dims);
    let mut normalized = Tensor::zeros(x.channels, x.dims);
    let mut inv_std = Vec::with_capacity(x.channels);
    for c in 0..x.channels {
        let xs = x.channel(c);
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / libm::sqrt(var + NORM_EPS);
        inv_std.push(is);
        let xh = normalized.channel_mut(c);
        for (o, v) in xh.iter_mut().zip(xs) {
            *o = (v - mean) * is;
        }
        let (g, b) = (gamma[c], beta[c]);
        for (o, h) in y.channel_mut(c).iter_mut().zip(normalized.channel(c)) {
            *o = g * h + b;
        }
    }
    (y, NormCache { normalized, inv_std })
}

pub fn instance_norm_backward(
    gamma: &[f64],
    cache: &NormCache,
    dy: &Tensor,
    d_gamma: &mut [f64],
    d_beta: &mut [f64],
) -> Tensor {
    let xh = &cache.normalized;
    let n = xh.spatial() as f64;
    let mut dx = Tensor::zeros(xh.channels, xh.dims);
    for c in 0..xh.channels {
        let g = dy.channel(c);
        let h = xh.channel(c);
        let sum_g = g.iter().sum::<f64>();
        let sum_gh = dot(g, h);
        d_beta[c] += sum_g;
        d_gamma[c] += sum_gh;
        let k = gamma[c] * cache.inv_std[c] / n;
        for ((o, gi), hi) in dx.channel_mut(c).iter_mut().zip(g).zip(h) {
            *o = k * (n * gi - sum_g - hi * sum_gh);
        }
    }
    dx
}

pub fn leaky_relu(x: &Tensor) -> Tensor {
    let data = x.data.iter().map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v }).collect();
    Tensor { channels: x.channels, dims: x.dims, data }
}

pub fn leaky_relu_backward(pre: &Tensor, dy: &Tensor) -> Tensor {
    let data = pre
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &g)| if v > 0.0 { g } else { LEAKY_SLOPE * g })
        .collect();
    Tensor { channels: pre.channels, dims: pre.dims, data }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// Fan-in scaled normal initialization for leaky-rectifier networks.
pub fn init_std(fan_in: usize) -> f64 {
    libm::sqrt(2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64))
}
