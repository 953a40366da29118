//! PNG rendering: windowed slices, label overlays, distance heatmaps.

use std::io::Cursor;

use image::{GrayImage, ImageFormat, Rgb, RgbImage};

use crate::error::Result;
use crate::volume::{Frame, Label};

/// Overlay opacity for label tints.
pub const OVERLAY_ALPHA: f64 = 0.4;

/// Tint per class; exterior air and unknown voxels stay untinted.
pub fn label_color(l: Label) -> Option<[u8; 3]> {
    match l {
        Label::ExteriorAir | Label::Unknown => None,
        Label::Support => Some([160, 110, 50]),
        Label::Bandage => Some([40, 120, 255]),
        Label::Body => Some([255, 60, 60]),
        Label::Metal => Some([255, 230, 0]),
        Label::Hollow => Some([0, 220, 200]),
    }
}

pub fn gray_image(frame: &Frame<u8>) -> GrayImage {
    GrayImage::from_raw(frame.width() as u32, frame.height() as u32, frame.data().to_vec())
        .expect("frame buffer matches its shape")
}

fn blend(base: u8, tint: u8, alpha: f64) -> u8 {
    (base as f64 * (1.0 - alpha) + tint as f64 * alpha).round() as u8
}

/// Grayscale slice with class tints blended in at `alpha`.
pub fn overlay(gray: &Frame<u8>, labels: &Frame<Label>, alpha: f64) -> RgbImage {
    assert_eq!(gray.shape(), labels.shape(), "overlay needs matching shapes");
    let (w, h) = gray.shape();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let g = gray.get(x as usize, y as usize);
        match label_color(labels.get(x as usize, y as usize)) {
            Some(c) => Rgb([blend(g, c[0], alpha), blend(g, c[1], alpha), blend(g, c[2], alpha)]),
            None => Rgb([g, g, g]),
        }
    })
}

fn ramp_color(t: f64) -> [u8; 3] {
    // blue -> green -> red
    let t = t.clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.5 { (0.0, 2.0 * t, 1.0 - 2.0 * t) } else { (2.0 * t - 1.0, 2.0 - 2.0 * t, 0.0) };
    [(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8]
}

/// Finite values scaled to a color ramp over their range; infinity white,
/// NaN (no value) black.
pub fn heatmap(field: &Frame<f64>) -> RgbImage {
    let finite = field.data().iter().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = field.shape();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = field.get(x as usize, y as usize);
        if v.is_nan() {
            Rgb([0, 0, 0])
        } else if v.is_infinite() {
            Rgb([255, 255, 255])
        } else {
            Rgb(ramp_color((v - lo) / span))
        }
    })
}

pub fn encode_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn encode_gray(img: &GrayImage) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}
