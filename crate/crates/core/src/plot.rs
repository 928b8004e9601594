//! Minimal PNG line charts for loss curves.
//!
//! No text is rendered: each series gets a fixed color (see [`PALETTE`]) and
//! the y-axis spans the joint min..max of all series. The CSV loss log stays
//! the authoritative record.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const PALETTE: [[u8; 3]; 4] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189]];

const MARGIN: u32 = 24;

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

/// Renders `series` (one value per step) into a `width x height` chart.
pub fn render(series: &[Vec<f64>], width: u32, height: u32) -> Result<RgbImage> {
    if width <= 2 * MARGIN || height <= 2 * MARGIN {
        return Err(Error::Invalid(format!("plot size {width}x{height} is too small")));
    }
    let finite = series.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let (left, right, top, bottom) = (MARGIN as i64, (width - MARGIN) as i64, MARGIN as i64, (height - MARGIN) as i64);
    line(&mut img, (left, top), (left, bottom), axis);
    line(&mut img, (left, bottom), (right, bottom), axis);
    if !lo.is_finite() {
        return Ok(img);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let steps = series.iter().map(Vec::len).max().unwrap_or(0).max(2) - 1;
    for (k, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        let to_px = |i: usize, v: f64| {
            let x = left + ((right - left) as f64 * i as f64 / steps as f64).round() as i64;
            let y = bottom - ((bottom - top) as f64 * (v - lo) / span).round() as i64;
            (x, y)
        };
        let mut prev = None;
        for (i, &v) in s.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let p = to_px(i, v);
            if let Some(q) = prev {
                line(&mut img, q, p, color);
            }
            prev = Some(p);
        }
    }
    Ok(img)
}

pub fn save(series: &[Vec<f64>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    render(series, 640, 360)?.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_series_colors() {
        let img = render(&[vec![3.0, 2.0, 1.0], vec![1.0, 1.5, 2.0]], 100, 80).unwrap();
        let count = |c: [u8; 3]| img.pixels().filter(|p| p.0 == c).count();
        assert!(count(PALETTE[0]) > 10);
        assert!(count(PALETTE[1]) > 10);
    }

    #[test]
    fn empty_series_gives_axes_only() {
        let img = render(&[vec![]], 60, 60).unwrap();
        assert!(img.pixels().all(|p| p.0 == [255, 255, 255] || p.0 == [0, 0, 0]));
        assert!(render(&[], 10, 10).is_err());
    }
}
