//! Overlap, boundary and region metrics on binary masks.
//!
//! Surface voxels are foreground voxels with at least one face neighbour
//! that is background or outside the grid. Distances use physical spacing
//! and an exact separable squared Euclidean distance transform.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::grid::{check_spacing, Grid, Image, Mask};

fn same_shape<A, B>(a: &Grid<A>, b: &Grid<B>) -> Result<()>
where
    A: Copy,
    B: Copy,
{
    if a.shape() != b.shape() {
        return Err(shape_err(a.shape(), b.shape()));
    }
    Ok(())
}

/// Dice similarity coefficient; two empty masks score 1.
pub fn dsc(truth: &Mask, pred: &Mask) -> Result<f64> {
    same_shape(truth, pred)?;
    let mut inter = 0usize;
    let mut t = 0usize;
    let mut p = 0usize;
    for (&a, &b) in truth.data().iter().zip(pred.data()) {
        let (a, b) = (a != 0, b != 0);
        inter += (a && b) as usize;
        t += a as usize;
        p += b as usize;
    }
    if t + p == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (t + p) as f64)
}

/// Boundary voxels of `mask` under face connectivity.
pub fn extract_surface(mask: &Mask) -> Mask {
    let shape = mask.shape().to_vec();
    let strides = mask.strides();
    let ndim = shape.len();
    let data = mask.data();
    let mut out = vec![0u8; data.len()];
    let mut index = vec![0usize; ndim];
    for (flat, o) in out.iter_mut().enumerate() {
        let mut rem = flat;
        for a in 0..ndim {
            index[a] = rem / strides[a];
            rem %= strides[a];
        }
        if data[flat] == 0 {
            continue;
        }
        let edge = (0..ndim).any(|a| {
            index[a] == 0
                || index[a] + 1 == shape[a]
                || data[flat - strides[a]] == 0
                || data[flat + strides[a]] == 0
        });
        *o = edge as u8;
    }
    Grid::new(shape, out).expect("shape preserved")
}

/// Squared physical distance from every voxel to the nearest set voxel of
/// `set` (infinite when `set` is empty).
pub fn squared_distance_map(set: &Mask, spacing: &[f64]) -> Result<Image> {
    check_spacing(spacing, set.ndim())?;
    let shape = set.shape().to_vec();
    let strides = set.strides();
    let mut f: Vec<f64> = set.data().iter().map(|&v| if v != 0 { 0.0 } else { f64::INFINITY }).collect();
    // last axis first so the sum order is w, h, d
    for axis in (0..shape.len()).rev() {
        let n = shape[axis];
        let stride = strides[axis];
        let total = f.len();
        let mut line = vec![0.0; n];
        let mut scratch = Envelope::new(n);
        for start in 0..total {
            // visit each line once, via its element with index 0 on `axis`
            if !(start / stride).is_multiple_of(n) {
                continue;
            }
            for (i, l) in line.iter_mut().enumerate() {
                *l = f[start + i * stride];
            }
            scratch.transform(&line, spacing[axis]);
            for i in 0..n {
                f[start + i * stride] = scratch.out[i];
            }
        }
    }
    Grid::new(shape, f)
}

/// Lower envelope of parabolas for one line.
struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
    out: Vec<f64>,
}

impl Envelope {
    fn new(n: usize) -> Self {
        Self { v: vec![0; n], z: vec![0.0; n + 1], out: vec![0.0; n] }
    }

    fn transform(&mut self, f: &[f64], s: f64) {
        let n = f.len();
        let parab = |q: usize| f[q] + (s * q as f64) * (s * q as f64);
        let mut k: isize = -1;
        for q in 0..n {
            if !f[q].is_finite() {
                continue;
            }
            loop {
                if k < 0 {
                    k = 0;
                    self.v[0] = q;
                    self.z[0] = f64::NEG_INFINITY;
                    self.z[1] = f64::INFINITY;
                    break;
                }
                let vk = self.v[k as usize];
                let sx = (parab(q) - parab(vk)) / (2.0 * s * s * (q as f64 - vk as f64));
                if sx <= self.z[k as usize] {
                    k -= 1;
                    continue;
                }
                k += 1;
                self.v[k as usize] = q;
                self.z[k as usize] = sx;
                self.z[k as usize + 1] = f64::INFINITY;
                break;
            }
        }
        if k < 0 {
            self.out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        }
        let mut j = 0;
        for p in 0..n {
            while self.z[j + 1] < p as f64 {
                j += 1;
            }
            let q = self.v[j];
            let d = s * (p as f64 - q as f64);
            self.out[p] = d * d + f[q];
        }
    }
}

/// Normalized surface distance at tolerance `tau` (physical units): the
/// fraction of both surfaces lying within `tau` of the other surface.
pub fn nsd(truth: &Mask, pred: &Mask, spacing: &[f64], tau: f64) -> Result<f64> {
    same_shape(truth, pred)?;
    check_spacing(spacing, truth.ndim())?;
    if !(tau >= 0.0) {
        return Err(Error::Invalid(alloc::format!("tolerance must be non-negative, got {tau}")));
    }
    let st = extract_surface(truth);
    let sp = extract_surface(pred);
    let (nt, np) = (st.count(), sp.count());
    if nt == 0 && np == 0 {
        return Ok(1.0);
    }
    if nt == 0 || np == 0 {
        return Ok(0.0);
    }
    let dt = squared_distance_map(&st, spacing)?;
    let dp = squared_distance_map(&sp, spacing)?;
    let tau2 = tau * tau;
    let within = |surface: &Mask, dist: &Image| {
        surface.data().iter().zip(dist.data()).filter(|(&s, &d)| s != 0 && d <= tau2).count()
    };
    let hits = within(&sp, &dt) + within(&st, &dp);
    Ok(hits as f64 / (nt + np) as f64)
}

/// Sensitivity, specificity and mean absolute error. A rate whose
/// denominator class is absent is reported as 1 with its flag set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub sen: f64,
    pub spec: f64,
    pub mae: f64,
    pub no_foreground: bool,
    pub no_background: bool,
}

/// `prob` (soft prediction) feeds the MAE when given; otherwise the binary
/// prediction is used.
pub fn sen_spec_mae(truth: &Mask, pred: &Mask, prob: Option<&Image>) -> Result<RegionStats> {
    same_shape(truth, pred)?;
    if let Some(p) = prob {
        same_shape(truth, p)?;
    }
    let (mut tp, mut tn, mut pos, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&t, &p) in truth.data().iter().zip(pred.data()) {
        if t != 0 {
            pos += 1;
            tp += (p != 0) as usize;
        } else {
            neg += 1;
            tn += (p == 0) as usize;
        }
    }
    let abs_sum: f64 = match prob {
        Some(pr) => truth.data().iter().zip(pr.data()).map(|(&t, &p)| (p - t as f64).abs()).sum(),
        None => truth.data().iter().zip(pred.data()).filter(|(t, p)| (**t != 0) != (**p != 0)).count() as f64,
    };
    Ok(RegionStats {
        sen: if pos == 0 { 1.0 } else { tp as f64 / pos as f64 },
        spec: if neg == 0 { 1.0 } else { tn as f64 / neg as f64 },
        mae: abs_sum / truth.len() as f64,
        no_foreground: pos == 0,
        no_background: neg == 0,
    })
}

/// Metrics of one evaluated case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    pub dsc: f64,
    pub nsd: f64,
    pub sen: f64,
    pub spec: f64,
    pub mae: f64,
    pub flags: Vec<String>,
}

impl CaseMetrics {
    pub fn compute(id: &str, truth: &Mask, prob: &Image, spacing: &[f64], tau: f64, threshold: f64) -> Result<Self> {
        let pred = prob.map(|p| (p >= threshold) as u8);
        let stats = sen_spec_mae(truth, &pred, Some(prob))?;
        let mut flags = Vec::new();
        if stats.no_foreground {
            flags.push("no_foreground".into());
        }
        if stats.no_background {
            flags.push("no_background".into());
        }
        Ok(Self {
            id: id.into(),
            dsc: dsc(truth, &pred)?,
            nsd: nsd(truth, &pred, spacing, tau)?,
            sen: stats.sen,
            spec: stats.spec,
            mae: stats.mae,
            flags,
        })
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: libm::sqrt(var) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    pub cases: usize,
    pub dsc: MeanStd,
    pub nsd: MeanStd,
    pub sen: MeanStd,
    pub spec: MeanStd,
    pub mae: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub cases: Vec<CaseMetrics>,
}

impl MetricReport {
    pub fn summary(&self) -> MetricSummary {
        let col = |f: fn(&CaseMetrics) -> f64| MeanStd::of(&self.cases.iter().map(f).collect::<Vec<_>>());
        MetricSummary {
            cases: self.cases.len(),
            dsc: col(|c| c.dsc),
            nsd: col(|c| c.nsd),
            sen: col(|c| c.sen),
            spec: col(|c| c.spec),
            mae: col(|c| c.mae),
        }
    }

    /// `id,dsc,nsd,sen,spec,mae,flags` with `;`-joined flags.
    pub fn to_csv(&self) -> String {
        use core::fmt::Write;
        let mut s = String::from("id,dsc,nsd,sen,spec,mae,flags\n");
        for c in &self.cases {
            let _ = writeln!(s, "{},{},{},{},{},{},{}", c.id, c.dsc, c.nsd, c.sen, c.spec, c.mae, c.flags.join(";"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(shape: &[usize], on: &[usize]) -> Mask {
        let mut m = Grid::filled(shape.to_vec(), 0u8).unwrap();
        for &i in on {
            m.data_mut()[i] = 1;
        }
        m
    }

    #[test]
    fn dsc_examples() {
        let a = mask(&[2, 2], &[0, 1]);
        let b = mask(&[2, 2], &[1, 2]);
        assert_eq!(dsc(&a, &b).unwrap(), 0.5);
        let e = mask(&[2, 2], &[]);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert_eq!(dsc(&a, &e).unwrap(), 0.0);
        assert!(dsc(&a, &mask(&[1, 4], &[])).is_err());
    }

    #[test]
    fn filled_square_surface() {
        let full = Grid::filled(vec![3, 3], 1u8).unwrap();
        assert_eq!(extract_surface(&full).count(), 8);
        let mut big = Grid::filled(vec![7, 7], 0u8).unwrap();
        for r in 2..5 {
            for c in 2..5 {
                big.data_mut()[r * 7 + c] = 1;
            }
        }
        let s = extract_surface(&big);
        assert_eq!(s.count(), 8);
        assert_eq!(s.get(&[3, 3]), 0);
    }

    #[test]
    fn nsd_edge_cases() {
        let a = mask(&[4, 4], &[5]);
        let e = mask(&[4, 4], &[]);
        assert_eq!(nsd(&a, &a, &[1.0, 1.0], 0.0).unwrap(), 1.0);
        assert_eq!(nsd(&e, &e, &[1.0, 1.0], 1.0).unwrap(), 1.0);
        assert_eq!(nsd(&a, &e, &[1.0, 1.0], 10.0).unwrap(), 0.0);
        // one voxel apart along an axis with 2mm spacing
        let b = mask(&[4, 4], &[9]);
        assert_eq!(nsd(&a, &b, &[2.0, 1.0], 1.9).unwrap(), 0.0);
        assert_eq!(nsd(&a, &b, &[2.0, 1.0], 2.0).unwrap(), 1.0);
        assert!(nsd(&a, &b, &[1.0], 1.0).is_err());
    }

    #[test]
    fn distance_map_is_exact_on_small_grid() {
        let set = mask(&[5, 6], &[0, 17]);
        let sp = [1.5, 0.7];
        let d = squared_distance_map(&set, &sp).unwrap();
        for r in 0..5usize {
            for c in 0..6usize {
                let want = [(0usize, 0usize), (2, 5)]
                    .iter()
                    .map(|&(a, b)| {
                        let dy = sp[0] * (r as f64 - a as f64);
                        let dx = sp[1] * (c as f64 - b as f64);
                        dx * dx + dy * dy
                    })
                    .fold(f64::INFINITY, f64::min);
                assert!((d.get(&[r, c]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn region_sentinels() {
        let t = mask(&[2, 2], &[]);
        let p = mask(&[2, 2], &[0]);
        let s = sen_spec_mae(&t, &p, None).unwrap();
        assert_eq!(s.sen, 1.0);
        assert!(s.no_foreground);
        assert_eq!(s.spec, 0.75);
        assert_eq!(s.mae, 0.25);
    }
}
