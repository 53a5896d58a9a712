//! Samples, folds, batch sampling, intensity preprocessing and the synthetic
//! two-domain lesion phantom.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::grid::{check_spacing, Grid, Image, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    TargetLabeled,
    TargetUnlabeled,
    Auxiliary,
}

impl DomainTag {
    pub fn is_target(&self) -> bool {
        !matches!(self, DomainTag::Auxiliary)
    }
}

/// Intensity transform recorded on a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Transform {
    Clip { lo: f64, hi: f64 },
    MinMax { min: f64, max: f64 },
    ZScore { mean: f64, std: f64 },
    /// Z-score fallback for a constant image.
    ZeroCenter { mean: f64 },
    Crop { origin: [isize; 3] },
}

/// One synthesized lesion: an axis-aligned ellipsoid in voxel units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: Vec<f64>,
    pub radii: Vec<f64>,
}

impl Blob {
    pub fn contains(&self, index: &[usize]) -> bool {
        let mut s = 0.0;
        for ((&i, c), r) in index.iter().zip(&self.center).zip(&self.radii) {
            let d = (i as f64 - c) / r;
            s += d * d;
        }
        s <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    label: Option<Mask>,
    pub spacing: Vec<f64>,
    pub tag: DomainTag,
    /// Originating collection for pooled auxiliary data.
    pub source: Option<String>,
    pub transforms: Vec<Transform>,
    pub lesions: Vec<Blob>,
}

impl Sample {
    /// Validates shapes and spacing. A label given for a
    /// [`DomainTag::TargetUnlabeled`] sample is discarded.
    pub fn new(id: impl Into<String>, image: Image, label: Option<Mask>, spacing: Vec<f64>, tag: DomainTag) -> Result<Self> {
        check_spacing(&spacing, image.ndim())?;
        if image.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("image has non-finite intensities".into()));
        }
        let label = match (tag, label) {
            (DomainTag::TargetUnlabeled, _) => None,
            (_, Some(l)) => {
                if l.shape() != image.shape() {
                    return Err(shape_err(image.shape(), l.shape()));
                }
                if l.data().iter().any(|&v| v > 1) {
                    return Err(Error::Invalid("label values must be 0 or 1".into()));
                }
                Some(l)
            }
            (_, None) => None,
        };
        Ok(Self { id: id.into(), image, label, spacing, tag, source: None, transforms: Vec::new(), lesions: Vec::new() })
    }

    /// The mask a supervised loss may read; never available for unlabeled
    /// target samples.
    pub fn supervised_label(&self) -> Option<&Mask> {
        match self.tag {
            DomainTag::TargetUnlabeled => None,
            _ => self.label.as_ref(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.image.shape()
    }

    /// Crops or pads image and label to `size` at `origin` (may be negative
    /// or run past the end). Pads use the image minimum and label 0.
    pub fn window(&self, origin: &[isize], size: &[usize]) -> Result<Sample> {
        let fill = self.image.data().iter().copied().fold(f64::INFINITY, f64::min);
        let image = self.image.window(origin, size, fill)?;
        let label = self.label.as_ref().map(|l| l.window(origin, size, 0)).transpose()?;
        let mut o3 = [0isize; 3];
        o3[3 - origin.len()..].copy_from_slice(origin);
        let mut transforms = self.transforms.clone();
        transforms.push(Transform::Crop { origin: o3 });
        Ok(Sample {
            id: self.id.clone(),
            image,
            label,
            spacing: self.spacing.clone(),
            tag: self.tag,
            source: self.source.clone(),
            transforms,
            lesions: self.lesions.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub fold_index: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldMode {
    /// Each chunk is held out for testing; the rest trains.
    #[default]
    Conventional,
    /// Each chunk trains; the rest is held out (small-data protocol,
    /// e.g. 4 train / 16 test for 20 ids and k = 5).
    Inverted,
}

/// Shuffled contiguous chunks of `ids`; sizes differ by at most one.
pub fn fold_chunks(ids: &[String], k: usize, seed: u64) -> Result<Vec<Vec<String>>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if ids.len() < k {
        return Err(Error::TooFewIds { k, n: ids.len() });
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = shuffled.len() / k;
    let extra = shuffled.len() % k;
    let mut chunks = Vec::with_capacity(k);
    let mut it = shuffled.into_iter();
    for i in 0..k {
        let n = base + usize::from(i < extra);
        chunks.push(it.by_ref().take(n).collect());
    }
    Ok(chunks)
}

pub fn make_folds(ids: &[String], k: usize, seed: u64, mode: FoldMode) -> Result<Vec<DatasetSplit>> {
    let chunks = fold_chunks(ids, k, seed)?;
    Ok((0..k)
        .map(|i| {
            let chunk = chunks[i].clone();
            let rest: Vec<String> = chunks.iter().enumerate().filter(|(j, _)| *j != i).flat_map(|(_, c)| c.clone()).collect();
            let (train_ids, test_ids) = match mode {
                FoldMode::Conventional => (rest, chunk),
                FoldMode::Inverted => (chunk, rest),
            };
            DatasetSplit { fold_index: i, train_ids, test_ids, seed }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPair {
    pub target: Vec<Sample>,
    pub auxiliary: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub patch: Vec<usize>,
    /// `(labeled, unlabeled)` proportions of the target batch; `None`
    /// draws labeled target samples only.
    pub target_ratio: Option<(usize, usize)>,
}

impl SamplerConfig {
    /// Number of labeled target samples per batch.
    pub fn labeled_count(&self, unlabeled_available: bool) -> usize {
        match self.target_ratio {
            Some((l, u)) if unlabeled_available && u > 0 => {
                let b = self.batch_size as f64;
                libm::round(b * l as f64 / (l + u) as f64) as usize
            }
            _ => self.batch_size,
        }
    }
}

fn draw<'a, R: Rng>(pool: &[&'a Sample], n: usize, rng: &mut R) -> Vec<&'a Sample> {
    if n == 0 {
        return Vec::new();
    }
    if pool.len() >= n {
        rand::seq::index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    }
}

/// Random crop where the sample is larger than `patch`, centred pad where
/// it is smaller.
pub fn random_patch<R: Rng>(sample: &Sample, patch: &[usize], rng: &mut R) -> Result<Sample> {
    if patch.len() != sample.image.ndim() {
        return Err(shape_err(sample.image.ndim(), patch.len()));
    }
    let origin: Vec<isize> = sample
        .shape()
        .iter()
        .zip(patch)
        .map(|(&d, &p)| {
            if d > p {
                rng.gen_range(0..=d - p) as isize
            } else {
                -(((p - d) / 2) as isize)
            }
        })
        .collect();
    sample.window(&origin, patch)
}

/// Draws `B` target and `B` auxiliary samples, cropped to the patch.
pub fn sample_batch_pair<R: Rng>(
    target_pool: &[Sample],
    auxiliary_pool: &[Sample],
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<BatchPair> {
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let labeled: Vec<&Sample> = target_pool.iter().filter(|s| s.tag == DomainTag::TargetLabeled).collect();
    let unlabeled: Vec<&Sample> = if config.target_ratio.is_some() {
        target_pool.iter().filter(|s| s.tag == DomainTag::TargetUnlabeled).collect()
    } else {
        Vec::new()
    };
    let aux: Vec<&Sample> = auxiliary_pool.iter().filter(|s| s.tag == DomainTag::Auxiliary).collect();
    if aux.is_empty() {
        return Err(Error::EmptyPool("auxiliary"));
    }
    let n_labeled = config.labeled_count(!unlabeled.is_empty());
    if n_labeled > 0 && labeled.is_empty() {
        return Err(Error::EmptyPool("labeled target"));
    }
    let mut picks = draw(&labeled, n_labeled, rng);
    picks.extend(draw(&unlabeled, config.batch_size - n_labeled, rng));
    let aux_picks = draw(&aux, config.batch_size, rng);
    let target = picks.into_iter().map(|s| random_patch(s, &config.patch, rng)).collect::<Result<_>>()?;
    let auxiliary = aux_picks.into_iter().map(|s| random_patch(s, &config.patch, rng)).collect::<Result<_>>()?;
    Ok(BatchPair { target, auxiliary })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    MinMax,
    #[default]
    ZScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub window: Option<[f64; 2]>,
    pub normalization: Normalization,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { window: Some([-1000.0, 400.0]), normalization: Normalization::ZScore }
    }
}

/// Clips to the window, then normalizes. A constant image maps to zeros
/// under min-max and is only mean-centred under z-score.
pub fn preprocess(sample: &Sample, config: &PreprocessConfig) -> Result<Sample> {
    if sample.image.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("sample '{}' has non-finite intensities", sample.id)));
    }
    let mut out = sample.clone();
    let data = out.image.data_mut();
    if let Some([lo, hi]) = config.window {
        if !(lo < hi) {
            return Err(Error::Config(format!("empty intensity window [{lo}, {hi}]")));
        }
        data.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        out.transforms.push(Transform::Clip { lo, hi });
    }
    match config.normalization {
        Normalization::None => {}
        Normalization::MinMax => {
            let min = data.iter().copied().fold(f64::INFINITY, f64::min);
            let max = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let range = max - min;
            data.iter_mut().for_each(|v| *v = if range > 0.0 { (*v - min) / range } else { 0.0 });
            out.transforms.push(Transform::MinMax { min, max });
        }
        Normalization::ZScore => {
            let n = data.len() as f64;
            let mean = data.iter().sum::<f64>() / n;
            let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = libm::sqrt(var);
            if std > 0.0 {
                data.iter_mut().for_each(|v| *v = (*v - mean) / std);
                out.transforms.push(Transform::ZScore { mean, std });
            } else {
                data.iter_mut().for_each(|v| *v -= mean);
                out.transforms.push(Transform::ZeroCenter { mean });
            }
        }
    }
    Ok(out)
}

/// Window origins covering `dims` with tiles of `patch`, neighbouring tiles
/// overlapping by about `overlap` of the patch. The last tile on each axis
/// is flush with the end; an axis shorter than the patch gets one centred
/// (padded) tile.
pub fn tile_origins(dims: &[usize], patch: &[usize], overlap: f64) -> Result<Vec<Vec<isize>>> {
    if dims.len() != patch.len() {
        return Err(shape_err(dims.len(), patch.len()));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("tile overlap must lie in [0, 1), got {overlap}")));
    }
    let per_axis: Vec<Vec<isize>> = dims
        .iter()
        .zip(patch)
        .map(|(&d, &p)| {
            if d <= p {
                return vec![-(((p - d) / 2) as isize)];
            }
            let step = ((p as f64 * (1.0 - overlap)) as usize).max(1);
            let mut v: Vec<isize> = (0..=d - p).step_by(step).map(|o| o as isize).collect();
            if *v.last().expect("non-empty") != (d - p) as isize {
                v.push((d - p) as isize);
            }
            v
        })
        .collect();
    let mut out = vec![Vec::new()];
    for axis in per_axis {
        out = out
            .into_iter()
            .flat_map(|prefix: Vec<isize>| {
                axis.iter().map(move |&o| {
                    let mut p = prefix.clone();
                    p.push(o);
                    p
                })
            })
            .collect();
    }
    Ok(out)
}

/// Lesion shape family for one domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionFamily {
    /// Inclusive range of lesion count per image.
    pub count: [usize; 2],
    /// Inclusive range of the base radius, voxels.
    pub radius: [f64; 2],
    /// Inclusive range of per-axis stretch factors (1 = round).
    pub elongation: [f64; 2],
    /// Mean lesion intensity offset over the background.
    pub contrast: f64,
    /// Relative within-lesion intensity variation.
    pub texture: f64,
}

impl LesionFamily {
    /// Several elongated, low-contrast patches.
    pub fn diffuse() -> Self {
        Self { count: [2, 4], radius: [3.0, 6.0], elongation: [1.0, 1.6], contrast: 450.0, texture: 0.3 }
    }

    /// One round, high-contrast nodule.
    pub fn compact() -> Self {
        Self { count: [1, 1], radius: [5.0, 9.0], elongation: [1.0, 1.0], contrast: 750.0, texture: 0.05 }
    }

    fn max_extent(&self) -> f64 {
        self.radius[1] * self.elongation[1]
    }

    fn validate(&self, what: &str, shape: &[usize]) -> Result<()> {
        let ok = self.count[0] <= self.count[1]
            && self.radius[0] > 0.0
            && self.radius[0] <= self.radius[1]
            && self.elongation[0] >= 1.0
            && self.elongation[0] <= self.elongation[1]
            && self.contrast.is_finite()
            && self.texture >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid {what} lesion family {self:?}")));
        }
        if self.count[1] > 0 {
            let need = 2.0 * libm::ceil(self.max_extent()) + 1.0;
            if let Some(&d) = shape.iter().find(|&&d| (d as f64) < need) {
                return Err(Error::Config(format!(
                    "grid axis of {d} voxels cannot hold a {what} lesion of radius {}",
                    self.max_extent()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainCounts {
    pub target_labeled: usize,
    pub target_unlabeled: usize,
    pub auxiliary: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub shape: Vec<usize>,
    pub spacing: Vec<f64>,
    pub counts: DomainCounts,
    pub target: LesionFamily,
    pub auxiliary: LesionFamily,
    pub background: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl PhantomConfig {
    /// 64x64 slices, 20 labeled target + 40 auxiliary.
    pub fn small_2d(seed: u64) -> Self {
        Self {
            shape: vec![64, 64],
            spacing: vec![0.8, 0.8],
            counts: DomainCounts { target_labeled: 20, target_unlabeled: 0, auxiliary: 40 },
            target: LesionFamily::diffuse(),
            auxiliary: LesionFamily::compact(),
            background: -800.0,
            noise_std: 60.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.shape.len()) || self.shape.contains(&0) {
            return Err(Error::Config(format!("phantom grid must be 2D or 3D, got {:?}", self.shape)));
        }
        check_spacing(&self.spacing, self.shape.len()).map_err(|e| Error::Config(format!("{e}")))?;
        let c = self.counts;
        if c.target_labeled + c.target_unlabeled + c.auxiliary == 0 {
            return Err(Error::Config("phantom needs at least one sample".into()));
        }
        if !(self.noise_std >= 0.0) || !self.background.is_finite() {
            return Err(Error::Config("noise must be non-negative and background finite".into()));
        }
        self.target.validate("target", &self.shape)?;
        self.auxiliary.validate("auxiliary", &self.shape)
    }
}

fn phantom_sample(config: &PhantomConfig, family: &LesionFamily, id: String, tag: DomainTag, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let shape = &config.shape;
    let ndim = shape.len();
    let n_blobs = rng.gen_range(family.count[0]..=family.count[1]);
    let mut blobs = Vec::with_capacity(n_blobs);
    let mut levels = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let base = rng.gen_range(family.radius[0]..=family.radius[1]);
        let radii: Vec<f64> = (0..ndim).map(|_| base * rng.gen_range(family.elongation[0]..=family.elongation[1])).collect();
        let center = shape.iter().zip(&radii).map(|(&d, &r)| rng.gen_range(r..=(d as f64 - 1.0 - r))).collect();
        let jitter = if family.texture > 0.0 { rng.gen_range(-family.texture..=family.texture) } else { 0.0 };
        levels.push(family.contrast * (1.0 + jitter));
        blobs.push(Blob { center, radii });
    }
    let len: usize = shape.iter().product();
    let mut image = vec![config.background; len];
    let mut label = vec![0u8; len];
    let strides: Vec<usize> = (0..ndim).map(|a| shape[a + 1..].iter().product()).collect();
    let mut index = vec![0usize; ndim];
    for flat in 0..len {
        let mut rem = flat;
        for a in 0..ndim {
            index[a] = rem / strides[a];
            rem %= strides[a];
        }
        let mut level: f64 = 0.0;
        for (b, l) in blobs.iter().zip(&levels) {
            if b.contains(&index) {
                label[flat] = 1;
                level = level.max(*l);
            }
        }
        image[flat] += level;
    }
    if config.noise_std > 0.0 {
        let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::Config(format!("{e}")))?;
        image.iter_mut().for_each(|v| *v += noise.sample(rng));
    }
    let image = Grid::new(shape.clone(), image)?;
    let label = Grid::new(shape.clone(), label)?;
    let mut s = Sample::new(id, image, Some(label), config.spacing.clone(), tag)?;
    s.lesions = blobs;
    s.source = Some(String::from("phantom"));
    Ok(s)
}

/// Deterministic two-domain phantom. Ids are `tl-000`, `tu-000`, `aux-000`.
pub fn generate_phantom_dataset(config: &PhantomConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let c = config.counts;
    let mut out = Vec::with_capacity(c.target_labeled + c.target_unlabeled + c.auxiliary);
    for i in 0..c.target_labeled {
        out.push(phantom_sample(config, &config.target, format!("tl-{i:03}"), DomainTag::TargetLabeled, &mut rng)?);
    }
    for i in 0..c.target_unlabeled {
        out.push(phantom_sample(config, &config.target, format!("tu-{i:03}"), DomainTag::TargetUnlabeled, &mut rng)?);
    }
    for i in 0..c.auxiliary {
        out.push(phantom_sample(config, &config.auxiliary, format!("aux-{i:03}"), DomainTag::Auxiliary, &mut rng)?);
    }
    Ok(out)
}
