//! Raster outputs: normality-score curves and prediction error maps.
//!
//! Error-map colormap: `|Î − I|` averaged over channels, divided by its
//! maximum possible value 2, clamped to `[0, 1]`, then linearly interpolated
//! between the stops of [`COLORMAP`]. Stop luminance is strictly increasing,
//! so brighter always means larger error.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{hwc, Tensor};

/// Black → violet → red → orange → yellow → white.
pub const COLORMAP: [[u8; 3]; 6] = [
    [0, 0, 0],
    [72, 12, 110],
    [190, 40, 60],
    [245, 120, 20],
    [250, 215, 50],
    [255, 255, 255],
];

/// Rec. 601 luma of an sRGB triple.
pub fn luminance(c: [u8; 3]) -> f64 {
    0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64
}

pub fn colormap(v: f64) -> [u8; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let seg = COLORMAP.len() - 1;
    let x = v * seg as f64;
    let i = (x.floor() as usize).min(seg - 1);
    let f = x - i as f64;
    let (a, b) = (COLORMAP[i], COLORMAP[i + 1]);
    std::array::from_fn(|c| (a[c] as f64 + f * (b[c] as f64 - a[c] as f64)).round() as u8)
}

/// `H × W` image of the per-pixel prediction error.
pub fn error_map(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<RgbImage> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("error_map", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let (h, w, c) = hwc(pred.shape(), "error_map")?;
    let (p, t) = (pred.data(), target.data());
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let base = (y as usize * w + x as usize) * c;
        let e: f64 = (0..c).map(|k| (p[base + k] - t[base + k]).abs() as f64).sum::<f64>() / c as f64;
        Rgb(colormap(e / 2.0))
    }))
}

/// `H × W × 3` tensor in `[−1, 1]` as an 8-bit image.
pub fn to_image(t: &Tensor<f32>) -> Result<RgbImage> {
    let (h, w, c) = hwc(t.shape(), "to_image")?;
    if c != 3 {
        return Err(Error::shape("to_image", format!("expected 3 channels, got {c}")));
    }
    let d = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let base = (y as usize * w + x as usize) * 3;
        Rgb(std::array::from_fn(|k| ((d[base + k] as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8))
    }))
}

pub const CURVE_WIDTH: u32 = 800;
pub const CURVE_HEIGHT: u32 = 300;
const MARGIN: u32 = 20;
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const SHADE: Rgb<u8> = Rgb([255, 205, 205]);
const AXIS: Rgb<u8> = Rgb([90, 90, 90]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const LINE: Rgb<u8> = Rgb([20, 70, 200]);

/// Normality score against frame position; anomalous frames shaded.
/// Values are plotted on a fixed `[0, 1]` axis.
pub fn normality_curve(scores: &[f64], labels: Option<&[u8]>) -> Result<RgbImage> {
    if scores.is_empty() {
        return Err(Error::Data("no scores to plot".into()));
    }
    if labels.is_some_and(|l| l.len() != scores.len()) {
        return Err(Error::shape("normality_curve", "labels and scores differ in length"));
    }
    let mut img = RgbImage::from_pixel(CURVE_WIDTH, CURVE_HEIGHT, BACKGROUND);
    let (x0, x1) = (MARGIN, CURVE_WIDTH - MARGIN);
    let (y0, y1) = (MARGIN, CURVE_HEIGHT - MARGIN);
    let n = scores.len();
    let col = |i: f64| -> f64 {
        if n == 1 {
            (x0 + x1) as f64 / 2.0
        } else {
            x0 as f64 + i * (x1 - x0) as f64 / (n - 1) as f64
        }
    };
    let row = |v: f64| -> f64 { y1 as f64 - v.clamp(0.0, 1.0) * (y1 - y0) as f64 };

    if let Some(labels) = labels {
        let half = if n == 1 { 1.0 } else { 0.5 * (x1 - x0) as f64 / (n - 1) as f64 };
        for (i, _) in labels.iter().enumerate().filter(|(_, &l)| l == 1) {
            let (a, b) = (col(i as f64) - half, col(i as f64) + half);
            for x in (a.floor().max(x0 as f64) as u32)..=(b.ceil().min(x1 as f64) as u32) {
                for y in y0..=y1 {
                    img.put_pixel(x, y, SHADE);
                }
            }
        }
    }
    for q in 1..4 {
        let y = row(q as f64 / 4.0) as u32;
        for x in x0..=x1 {
            img.put_pixel(x, y, GRID);
        }
    }
    for x in x0..=x1 {
        img.put_pixel(x, y1, AXIS);
    }
    for y in y0..=y1 {
        img.put_pixel(x0, y, AXIS);
    }
    if n == 1 {
        let (x, y) = (col(0.0) as i64, row(scores[0]) as i64);
        for dx in -2..=2 {
            for dy in -2..=2 {
                plot(&mut img, x + dx, y + dy, LINE);
            }
        }
    }
    for i in 1..n {
        line(
            &mut img,
            (col((i - 1) as f64), row(scores[i - 1])),
            (col(i as f64), row(scores[i])),
            LINE,
        );
    }
    Ok(img)
}

fn plot(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Two-pixel-thick segment by uniform sampling.
fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let f = s as f64 / steps as f64;
        let (x, y) = (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1));
        let (x, y) = (x.round() as i64, y.round() as i64);
        plot(img, x, y, c);
        plot(img, x, y + 1, c);
    }
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::file(path, e))
}
