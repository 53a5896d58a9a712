//! Static raster plots: relation heatmap panels and difference curves.

use std::path::Path;

use image::{Rgb, RgbImage};
use relcollab_core::relation::Matrix;

use crate::error::{Error, Result};

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GAP: u32 = 6;

/// Blue-white-red for values in `[-1, 1]`.
pub fn diverging(v: f64) -> Rgb<u8> {
    let t = v.clamp(-1.0, 1.0);
    let (lo, mid, hi) = ([59.0, 76.0, 192.0], [245.0, 245.0, 245.0], [180.0, 4.0, 38.0]);
    let (from, to, s) = if t < 0.0 { (mid, lo, -t) } else { (mid, hi, t) };
    Rgb([0, 1, 2].map(|i| (from[i] + (to[i] - from[i]) * s).round() as u8))
}

/// White (0) to black (`max` and above).
pub fn magnitude(v: f64, max: f64) -> Rgb<u8> {
    let s = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
    let g = (255.0 * (1.0 - s)).round() as u8;
    Rgb([g, g, g])
}

fn draw_matrix(img: &mut RgbImage, m: &Matrix, x0: u32, cell: u32, color: impl Fn(f64) -> Rgb<u8>) {
    for r in 0..m.rows {
        for c in 0..m.cols {
            let px = color(m.get(r, c));
            for dy in 0..cell {
                for dx in 0..cell {
                    img.put_pixel(x0 + c as u32 * cell + dx, r as u32 * cell + dy, px);
                }
            }
        }
    }
}

/// `A | B | |A - B|`, each matrix cell drawn as a `cell x cell` block.
pub fn relation_panels(a: &Matrix, b: &Matrix, cell: u32) -> RgbImage {
    let side = a.rows as u32 * cell;
    let mut img = RgbImage::from_pixel(3 * side + 2 * GAP, side, BG);
    draw_matrix(&mut img, a, 0, cell, diverging);
    draw_matrix(&mut img, b, side + GAP, cell, diverging);
    let diff = Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).collect(),
    };
    draw_matrix(&mut img, &diff, 2 * (side + GAP), cell, |v| magnitude(v, 1.0));
    img
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Line chart of several series sharing the x axis; y is scaled to the
/// overall range.
pub fn curve(xs: &[f64], series: &[(&[f64], Rgb<u8>)], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, BG);
    let m = 24i64;
    let (w, h) = (width as i64, height as i64);
    line(&mut img, (m, h - m), (w - m, h - m), AXIS);
    line(&mut img, (m, m), (m, h - m), AXIS);
    if xs.is_empty() {
        return img;
    }
    let xmin = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let xmax = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let all = series.iter().flat_map(|(ys, _)| ys.iter().copied());
    let (ymin, ymax) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let sx = |x: f64| m + if xmax > xmin { ((x - xmin) / (xmax - xmin) * (w - 2 * m) as f64) as i64 } else { (w - 2 * m) / 2 };
    let sy = |y: f64| (h - m) - if ymax > ymin { ((y - ymin) / (ymax - ymin) * (h - 2 * m) as f64) as i64 } else { (h - 2 * m) / 2 };
    for (ys, color) in series {
        let pts: Vec<(i64, i64)> = xs.iter().zip(ys.iter()).map(|(&x, &y)| (sx(x), sy(y))).collect();
        for p in &pts {
            for d in -1..=1 {
                line(&mut img, (p.0 - 2, p.1 + d), (p.0 + 2, p.1 + d), *color);
            }
        }
        for w2 in pts.windows(2) {
            line(&mut img, w2[0], w2[1], *color);
        }
    }
    img
}

pub fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::format(path, e))
}
