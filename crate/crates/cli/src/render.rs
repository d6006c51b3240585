//! PNG output: image strips, saliency heatmaps and simple line plots.

use std::path::Path;

use anyhow::{bail, Context, Result};
use exaggerator_core::Tensor;
use image::{Rgb, RgbImage};

const GAP: u32 = 2;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Lays `[N, C, H, W]` images side by side with a thin white gap.
pub fn strip(images: &Tensor<f32>) -> Result<RgbImage> {
    let [n, c, h, w] = images.dims4()?;
    if c != 1 && c != 3 {
        bail!("cannot render {c}-channel images");
    }
    if n == 0 {
        bail!("nothing to render");
    }
    let width = n as u32 * w as u32 + (n as u32 - 1) * GAP;
    let mut img = RgbImage::from_pixel(width, h as u32, Rgb([255, 255, 255]));
    let d = images.data();
    for i in 0..n {
        let base = i * c * h * w;
        let x0 = i as u32 * (w as u32 + GAP);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let px = if c == 1 {
                    let v = to_u8(d[base + p]);
                    [v, v, v]
                } else {
                    [0, 1, 2].map(|ch| to_u8(d[base + ch * h * w + p]))
                };
                img.put_pixel(x0 + x as u32, y as u32, Rgb(px));
            }
        }
    }
    Ok(img)
}

pub fn save_strip(images: &Tensor<f32>, path: &Path) -> Result<()> {
    strip(images)?
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}

/// Black-to-yellow heatmap of values in `[0, 1]`.
pub fn save_heatmap(values: &[f32], height: usize, width: usize, path: &Path) -> Result<()> {
    if values.len() != height * width {
        bail!("heatmap of {} values is not {height}x{width}", values.len());
    }
    let img = RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let v = values[y as usize * width + x as usize].clamp(0.0, 1.0);
        Rgb([to_u8((2.0 * v).min(1.0)), to_u8((2.0 * v - 1.0).max(0.0)), to_u8(0.2 * (1.0 - v))])
    });
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

pub struct Series<'a> {
    pub xs: &'a [f64],
    pub ys: &'a [f64],
    pub color: [u8; 3],
}

pub const BLUE: [u8; 3] = [31, 119, 180];
pub const ORANGE: [u8; 3] = [255, 127, 14];
pub const GREY: [u8; 3] = [150, 150, 150];

const W: u32 = 480;
const H: u32 = 320;
const MARGIN: u32 = 30;

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        for (ox, oy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x + ox, y + oy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, Rgb(color));
            }
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

/// Line plot over fixed axis ranges; unlabeled, values live in the CSV next to it.
pub fn save_plot(series: &[Series], x_range: (f64, f64), y_range: (f64, f64), path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let (pw, ph) = ((W - 2 * MARGIN) as f64, (H - 2 * MARGIN) as f64);
    let to_px = |x: f64, y: f64| {
        let fx = (x - x_range.0) / (x_range.1 - x_range.0).max(1e-12);
        let fy = (y - y_range.0) / (y_range.1 - y_range.0).max(1e-12);
        (
            (MARGIN as f64 + fx.clamp(0.0, 1.0) * pw).round() as i64,
            (H as f64 - MARGIN as f64 - fy.clamp(0.0, 1.0) * ph).round() as i64,
        )
    };
    let (o, xe, ye) = (to_px(x_range.0, y_range.0), to_px(x_range.1, y_range.0), to_px(x_range.0, y_range.1));
    line(&mut img, o, xe, [0, 0, 0]);
    line(&mut img, o, ye, [0, 0, 0]);
    for s in series {
        let pts: Vec<(i64, i64)> = s
            .xs
            .iter()
            .zip(s.ys)
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(&x, &y)| to_px(x, y))
            .collect();
        for w in pts.windows(2) {
            line(&mut img, w[0], w[1], s.color);
        }
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strip_places_images_side_by_side() {
        let t = Tensor::from_vec(&[2, 1, 2, 2], vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let img = strip(&t).unwrap();
        assert_eq!((img.width(), img.height()), (2 * 2 + GAP, 2));
        assert_eq!(img.get_pixel(0, 0).0, [0, 0, 0]);
        assert_eq!(img.get_pixel(2 + GAP, 1).0, [255, 255, 255]);
    }

    #[test]
    fn plot_writes_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.png");
        let xs = [0.0, 0.5, 1.0];
        save_plot(&[Series { xs: &xs, ys: &[0.0, 1.0, 0.5], color: BLUE }], (0.0, 1.0), (0.0, 1.0), &p).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!((img.width(), img.height()), (W, H));
        assert!(img.pixels().any(|px| px.0 == BLUE));
    }
}
