//! Channel-wise Gram relation matrices of encoder features.
//!
//! The pipeline is: average the batch, flatten every channel into a row
//! vector, take the Gram matrix of the rows, then L2-normalize each Gram row.
//! [`relation_backward`] carries a gradient on the relation matrix back to the
//! feature values.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ops::{axpy, dot};
use crate::tensor::Tensor;

/// Added to every row norm before dividing.
pub const ROW_NORM_EPS: f64 = 1e-12;

/// Batched activations laid out as `[batch][channel][spatial...]`, spatial
/// axes row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    batch: usize,
    channels: usize,
    spatial: Vec<usize>,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(batch: usize, channels: usize, spatial: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n = spatial.iter().product::<usize>();
        if batch == 0 || channels == 0 || n == 0 {
            return Err(Error::Invalid(alloc::format!(
                "feature map needs B, C and spatial extent >= 1 (got {batch}, {channels}, {spatial:?})"
            )));
        }
        if batch * channels * n != values.len() {
            return Err(shape_err(batch * channels * n, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("feature map holds non-finite values".into()));
        }
        Ok(Self { batch, channels, spatial, values })
    }

    /// Stacks per-sample network activations into one batch.
    pub fn from_samples(samples: &[&Tensor]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
        let mut values = Vec::with_capacity(samples.len() * first.data.len());
        for s in samples {
            if !s.same_shape(first) {
                return Err(shape_err(first.shape_vec(), s.shape_vec()));
            }
            values.extend_from_slice(&s.data);
        }
        Self::new(samples.len(), first.channels, first.dims.to_vec(), values)
    }

    /// Splits back into per-sample tensors (spatial axes padded to 3D).
    pub fn to_samples(&self) -> Vec<Tensor> {
        let dims = crate::grid::dims3(&self.spatial);
        let per = self.channels * self.spatial_len();
        self.values
            .chunks(per)
            .map(|c| Tensor { channels: self.channels, dims, data: c.to_vec() })
            .collect()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spatial(&self) -> &[usize] {
        &self.spatial
    }

    pub fn spatial_len(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn sample(&self, b: usize) -> &[f64] {
        let per = self.channels * self.spatial_len();
        &self.values[b * per..(b + 1) * per]
    }

    pub fn scaled(&self, k: f64) -> FeatureMap {
        FeatureMap { values: self.values.iter().map(|v| v * k).collect(), ..self.clone() }
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(shape_err(rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { rows: n, cols: n, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Row-L2-normalized channel Gram matrix. Rows coming from an all-zero Gram
/// row (a dead channel) are all-zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationMatrix(Matrix);

impl RelationMatrix {
    /// Wraps a square matrix without re-normalizing it (e.g. one read back
    /// from disk).
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if m.rows != m.cols {
            return Err(shape_err((m.rows, m.rows), (m.rows, m.cols)));
        }
        Ok(Self(m))
    }

    pub fn channels(&self) -> usize {
        self.0.rows
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn values(&self) -> &[f64] {
        &self.0.data
    }

    /// Squared Frobenius distance to `other`.
    pub fn squared_distance(&self, other: &RelationMatrix) -> Result<f64> {
        if self.channels() != other.channels() {
            return Err(shape_err(self.channels(), other.channels()));
        }
        Ok(self.0.data.iter().zip(&other.0.data).map(|(a, b)| (a - b) * (a - b)).sum())
    }

    /// `|self - other|` entrywise.
    pub fn abs_difference(&self, other: &RelationMatrix) -> Result<Matrix> {
        if self.channels() != other.channels() {
            return Err(shape_err(self.channels(), other.channels()));
        }
        let data = self.0.data.iter().zip(&other.0.data).map(|(a, b)| (a - b).abs()).collect();
        Matrix::new(self.channels(), self.channels(), data)
    }

    /// `P R P^T` for the permutation sending channel `i` to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> RelationMatrix {
        let n = self.channels();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[perm[i] * n + perm[j]] = self.0.get(i, j);
            }
        }
        RelationMatrix(Matrix { rows: n, cols: n, data })
    }
}

/// How a batch is reduced before (or after) the Gram product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Average features over the batch, then one Gram matrix.
    #[default]
    BatchMean,
    /// Experimental: one Gram matrix per sample, averaged.
    PerSampleGram,
}

pub fn batch_mean(features: &FeatureMap) -> FeatureMap {
    let per = features.channels * features.spatial_len();
    let mut values = vec![0.0; per];
    for b in 0..features.batch {
        axpy(&mut values, 1.0, features.sample(b));
    }
    let k = 1.0 / features.batch as f64;
    values.iter_mut().for_each(|v| *v *= k);
    FeatureMap { batch: 1, channels: features.channels, spatial: features.spatial.clone(), values }
}

/// Reshapes a single-sample map into a `C x N` matrix; row `c` is channel `c`
/// vectorized row-major over the spatial axes.
pub fn flatten_channels(features: &FeatureMap) -> Result<Matrix> {
    if features.batch != 1 {
        return Err(Error::Invalid(alloc::format!(
            "flatten_channels needs a single sample, got a batch of {}",
            features.batch
        )));
    }
    Matrix::new(features.channels, features.spatial_len(), features.values.clone())
}

/// `A A^T`.
pub fn gram(a: &Matrix) -> Matrix {
    let c = a.rows;
    let mut g = vec![0.0; c * c];
    for m in 0..c {
        for n in m..c {
            let v = dot(a.row(m), a.row(n));
            g[m * c + n] = v;
            g[n * c + m] = v;
        }
    }
    Matrix { rows: c, cols: c, data: g }
}

fn row_norm(row: &[f64]) -> f64 {
    libm::sqrt(dot(row, row))
}

pub fn normalize_rows(g: &Matrix) -> RelationMatrix {
    let mut data = g.data.clone();
    for r in 0..g.rows {
        let norm = row_norm(g.row(r));
        let row = &mut data[r * g.cols..(r + 1) * g.cols];
        if norm == 0.0 {
            row.fill(0.0);
        } else {
            let k = 1.0 / (norm + ROW_NORM_EPS);
            row.iter_mut().for_each(|v| *v *= k);
        }
    }
    RelationMatrix(Matrix { rows: g.rows, cols: g.cols, data })
}

fn gram_of(features: &FeatureMap, reduction: Reduction) -> Matrix {
    match reduction {
        Reduction::BatchMean => gram(&Matrix {
            rows: features.channels,
            cols: features.spatial_len(),
            data: batch_mean(features).values,
        }),
        Reduction::PerSampleGram => {
            let c = features.channels;
            let mut acc = vec![0.0; c * c];
            for b in 0..features.batch {
                let a = Matrix { rows: c, cols: features.spatial_len(), data: features.sample(b).to_vec() };
                axpy(&mut acc, 1.0, &gram(&a).data);
            }
            let k = 1.0 / features.batch as f64;
            acc.iter_mut().for_each(|v| *v *= k);
            Matrix { rows: c, cols: c, data: acc }
        }
    }
}

pub fn compute_relation(features: &FeatureMap) -> RelationMatrix {
    compute_relation_with(features, Reduction::BatchMean)
}

pub fn compute_relation_with(features: &FeatureMap, reduction: Reduction) -> RelationMatrix {
    normalize_rows(&gram_of(features, reduction))
}

/// Gradient of a scalar loss with respect to the feature values, given its
/// gradient `d_relation` with respect to the relation matrix. Dead channels
/// (zero Gram rows) pass no gradient through their own row.
pub fn relation_backward(features: &FeatureMap, reduction: Reduction, d_relation: &Matrix) -> Result<FeatureMap> {
    let c = features.channels;
    if d_relation.rows != c || d_relation.cols != c {
        return Err(shape_err((c, c), (d_relation.rows, d_relation.cols)));
    }
    let g = gram_of(features, reduction);

    // Row normalization: R_i = G_i / (|G_i| + eps).
    let mut d_gram = vec![0.0; c * c];
    for r in 0..c {
        let gi = g.row(r);
        let norm = row_norm(gi);
        if norm == 0.0 {
            continue;
        }
        let denom = norm + ROW_NORM_EPS;
        let dr = d_relation.row(r);
        let proj = dot(dr, gi) / (norm * denom * denom);
        for j in 0..c {
            d_gram[r * c + j] = dr[j] / denom - proj * gi[j];
        }
    }
    // G = A A^T  =>  dA = (dG + dG^T) A.
    let mut sym = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            sym[i * c + j] = d_gram[i * c + j] + d_gram[j * c + i];
        }
    }
    let n = features.spatial_len();
    let inv_b = 1.0 / features.batch as f64;
    let mut out = vec![0.0; features.values.len()];
    let spread = |a: &[f64], dst: &mut [f64]| {
        for i in 0..c {
            let row = &mut dst[i * n..(i + 1) * n];
            for j in 0..c {
                let s = sym[i * c + j];
                if s != 0.0 {
                    axpy(row, s * inv_b, &a[j * n..(j + 1) * n]);
                }
            }
        }
    };
    match reduction {
        Reduction::BatchMean => {
            let mean = batch_mean(features);
            let mut d_mean = vec![0.0; c * n];
            spread(&mean.values, &mut d_mean);
            for chunk in out.chunks_mut(c * n) {
                chunk.copy_from_slice(&d_mean);
            }
        }
        Reduction::PerSampleGram => {
            for (b, chunk) in out.chunks_mut(c * n).enumerate() {
                spread(features.sample(b), chunk);
            }
        }
    }
    Ok(FeatureMap { values: out, ..features.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn fm(b: usize, c: usize, spatial: &[usize], v: Vec<f64>) -> FeatureMap {
        FeatureMap::new(b, c, spatial.to_vec(), v).unwrap()
    }

    #[test]
    fn batch_mean_cases() {
        let x = fm(1, 1, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(batch_mean(&x), x);
        let pm = fm(2, 1, &[2], vec![1.5, -2.0, -1.5, 2.0]);
        assert!(batch_mean(&pm).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flatten_layout_is_row_major() {
        let x = fm(1, 1, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let a = flatten_channels(&x).unwrap();
        assert_eq!((a.rows, a.cols), (1, 4));
        assert_eq!(a.data, vec![1.0, 2.0, 3.0, 4.0]);
        assert!(flatten_channels(&fm(2, 1, &[1], vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn gram_examples() {
        assert_eq!(gram(&Matrix::identity(2)), Matrix::identity(2));
        let a = Matrix::new(2, 2, vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(gram(&a).data, vec![2.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn normalize_examples() {
        let r = normalize_rows(&Matrix::identity(3));
        assert_abs_diff_eq!(r.values(), Matrix::identity(3).data.as_slice(), epsilon = 1e-11);
        let g = Matrix::new(2, 2, vec![2.0, 1.0, 1.0, 1.0]).unwrap();
        let r = normalize_rows(&g);
        let s5 = libm::sqrt(5.0);
        let s2 = libm::sqrt(2.0);
        assert_abs_diff_eq!(r.values(), [2.0 / s5, 1.0 / s5, 1.0 / s2, 1.0 / s2].as_slice(), epsilon = 1e-11);
        let g = Matrix::new(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let r = normalize_rows(&g);
        assert_eq!(&r.values()[..2], &[0.0, 0.0]);
        assert_abs_diff_eq!(r.values()[2..].iter().map(|v| v * v).sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn relation_of_orthogonal_and_duplicated_channels() {
        let x = fm(1, 2, &[2, 2], vec![1.0, 0.0, 2.0, 0.0, 0.0, 3.0, 0.0, -1.0]);
        assert_abs_diff_eq!(compute_relation(&x).values(), Matrix::identity(2).data.as_slice(), epsilon = 1e-12);
        let x = fm(1, 3, &[3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0, -1.0, 0.5, 2.0]);
        let r = compute_relation(&x);
        assert_eq!(r.matrix().row(0), r.matrix().row(1));
    }

    #[test]
    fn dead_channel_gets_no_gradient() {
        let x = fm(1, 2, &[3], vec![0.0, 0.0, 0.0, 1.0, 2.0, -1.0]);
        let r = compute_relation(&x);
        assert_eq!(r.matrix().row(0), &[0.0, 0.0]);
        let d = Matrix::new(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let g = relation_backward(&x, Reduction::BatchMean, &d).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permutation_conjugates() {
        let x = fm(1, 3, &[2], vec![1.0, 2.0, -1.0, 0.5, 3.0, 1.0]);
        let perm = [2, 0, 1];
        // channel i moves to slot perm[i]
        let mut v = vec![0.0; 6];
        for i in 0..3 {
            v[perm[i] * 2..perm[i] * 2 + 2].copy_from_slice(&x.values()[i * 2..i * 2 + 2]);
        }
        let xp = fm(1, 3, &[2], v);
        let lhs = compute_relation(&xp);
        let rhs = compute_relation(&x).permuted(&perm);
        assert_abs_diff_eq!(lhs.values(), rhs.values(), epsilon = 1e-12);
    }

    #[test]
    fn per_sample_mode_equals_batch_mean_for_one_sample() {
        let x = fm(1, 2, &[3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 2.0]);
        assert_eq!(compute_relation_with(&x, Reduction::PerSampleGram), compute_relation(&x));
    }
}
