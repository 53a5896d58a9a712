//! Image and mask files: NIfTI-1 volumes (2D or 3D) and grayscale PNG slices.
//!
//! Grids are row-major `[d, h, w]` (or `[h, w]`); NIfTI stores `i` fastest,
//! so the file axes are `(w, h, d)` and `pixdim[1..]` holds the spacing of
//! `w, h, d` in that order.

use std::path::Path;

use image::DynamicImage;
use ndarray::{Array, IxDyn};
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use relcollab_core::{Error as CoreError, Grid, Image, Mask};

use crate::error::{Error, Result};

fn file_axes<T: Copy>(grid: &Grid<T>) -> Result<Array<T, IxDyn>> {
    let a = Array::from_shape_vec(IxDyn(grid.shape()), grid.data().to_vec()).map_err(|e| Error::Config(e.to_string()))?;
    Ok(a.reversed_axes())
}

fn header_for(spacing: &[f64]) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    for (i, s) in spacing.iter().rev().enumerate() {
        h.pixdim[i + 1] = *s as f32;
    }
    h.xyzt_units = 2; // millimetres
    h
}

pub fn write_image_nifti(path: &Path, image: &Image, spacing: &[f64]) -> Result<()> {
    let header = header_for(spacing);
    nifti::writer::WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&file_axes(&image.map(|v| v as f32))?)
        .map_err(|e| Error::format(path, e))
}

pub fn write_mask_nifti(path: &Path, mask: &Mask, spacing: &[f64]) -> Result<()> {
    let header = header_for(spacing);
    nifti::writer::WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&file_axes(mask)?)
        .map_err(|e| Error::format(path, e))
}

fn read_nifti(path: &Path) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
    if !path.exists() {
        return Err(Error::DatasetMissing(path.to_path_buf()));
    }
    let obj = ReaderOptions::new().read_file(path).map_err(|e| Error::format(path, e))?;
    let header = obj.header().clone();
    let arr = obj.into_volume().into_ndarray::<f64>().map_err(|e| Error::format(path, e))?;
    let arr = arr.reversed_axes();
    let shape = arr.shape().to_vec();
    let data: Vec<f64> = arr.iter().copied().collect();
    let ndim = shape.len();
    // pixdim is f32; go through its shortest decimal so 0.8 reads back as 0.8.
    let spacing: Vec<f64> =
        (0..ndim).rev().map(|i| header.pixdim[i + 1].to_string().parse().expect("f32 display parses")).collect();
    Ok((shape, data, spacing))
}

/// Image and its spacing. Zero or missing `pixdim` entries yield a
/// missing-spacing error.
pub fn read_image_nifti(path: &Path) -> Result<(Image, Vec<f64>)> {
    let (shape, data, spacing) = read_nifti(path)?;
    if spacing.iter().any(|s| !(*s > 0.0)) {
        return Err(CoreError::MissingSpacing("volume header has no voxel spacing").into());
    }
    Ok((Grid::new(shape, data)?, spacing))
}

pub fn read_mask_nifti(path: &Path) -> Result<Mask> {
    let (shape, data, _) = read_nifti(path)?;
    let data = data.into_iter().map(|v| u8::from(v > 0.5)).collect();
    Ok(Grid::new(shape, data)?)
}

/// 8- or 16-bit grayscale PNG as an `[h, w]` grid of raw intensities.
pub fn read_png(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::DatasetMissing(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| Error::format(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(g) => g.into_raw().into_iter().map(f64::from).collect(),
        DynamicImage::ImageLuma16(g) => g.into_raw().into_iter().map(f64::from).collect(),
        // Colour or alpha: 8-bit luma.
        other => other.into_luma8().into_raw().into_iter().map(f64::from).collect(),
    };
    Ok(Grid::new(vec![h, w], data)?)
}

pub fn read_png_mask(path: &Path) -> Result<Mask> {
    Ok(read_png(path)?.map(|v| u8::from(v > 0.5)))
}

/// Dispatches on extension: `.nii` / `.nii.gz` or `.png`.
pub fn read_image(path: &Path, spacing: Option<&[f64]>) -> Result<(Image, Vec<f64>)> {
    if is_png(path) {
        let img = read_png(path)?;
        let spacing = spacing.ok_or(CoreError::MissingSpacing("PNG images need spacing in the manifest"))?;
        Ok((img, spacing.to_vec()))
    } else {
        let (img, file_spacing) = read_image_nifti(path)?;
        Ok((img, spacing.map(<[f64]>::to_vec).unwrap_or(file_spacing)))
    }
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    if is_png(path) {
        read_png_mask(path)
    } else {
        read_mask_nifti(path)
    }
}

fn is_png(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}
