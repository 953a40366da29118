//! IoU scoring per frame, per body band and per volume.

use std::fmt::Write as _;

use image::{Rgb, RgbImage};

use crate::error::{Result, SegError};
use crate::volume::{Label, LabelVolume};

/// `|P ∩ G| / |P ∪ G|`, 1 when both masks are empty.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(SegError::InvalidArgument(format!("mask sizes differ: {} vs {}", pred.len(), gt.len())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameScore {
    pub frame: usize,
    pub iou: f64,
    /// Whether ground truth has the class in this frame; only such frames
    /// enter the averages.
    pub counted: bool,
}

pub const BAND_NAMES: [&str; 3] = ["legs", "mid_body", "head"];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub tag: String,
    pub class: Label,
    pub frames: Vec<FrameScore>,
    /// Averages over the lower, middle and upper thirds of the frame range.
    pub bands: [Option<f64>; 3],
    pub overall: Option<f64>,
}

/// Frame range `[start, end)` of band `b` out of three.
pub fn band_range(b: usize, frames: usize) -> (usize, usize) {
    (b * frames / 3, (b + 1) * frames / 3)
}

fn mean_counted(scores: &[FrameScore]) -> Option<f64> {
    let v: Vec<f64> = scores.iter().filter(|s| s.counted).map(|s| s.iou).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume, class: Label, tag: &str) -> Result<EvalReport> {
    if pred.dims() != gt.dims() {
        return Err(SegError::DimMismatch(pred.dims(), gt.dims()));
    }
    let frames = (0..gt.frame_count())
        .map(|z| {
            let p: Vec<bool> = pred.frame_data(z).iter().map(|&l| l == class).collect();
            let g: Vec<bool> = gt.frame_data(z).iter().map(|&l| l == class).collect();
            Ok(FrameScore { frame: z, iou: iou(&p, &g)?, counted: g.contains(&true) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_scores(tag, class, frames))
}

impl EvalReport {
    pub fn from_scores(tag: &str, class: Label, frames: Vec<FrameScore>) -> Self {
        let n = frames.len();
        let bands = [0, 1, 2].map(|b| {
            let (s, e) = band_range(b, n);
            mean_counted(&frames[s..e])
        });
        let overall = mean_counted(&frames);
        EvalReport { tag: tag.to_string(), class, frames, bands, overall }
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
        let mut s = String::from("frame,iou\n");
        for f in &self.frames {
            let _ = writeln!(s, "{},{:.6}", f.frame, f.iou);
        }
        s.push_str("\nsummary,value\n");
        let _ = writeln!(s, "variant,{}", self.tag);
        let _ = writeln!(s, "class,{}", self.class);
        for (name, v) in BAND_NAMES.iter().zip(self.bands) {
            let _ = writeln!(s, "{name},{}", fmt(v));
        }
        let _ = writeln!(s, "overall,{}", fmt(self.overall));
        s
    }

    /// Per-frame IoU line plot: frame on x, IoU in [0, 1] on y, with grid
    /// lines every 0.25 and band boundaries marked.
    pub fn plot(&self, width: u32, height: u32) -> RgbImage {
        let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
        let margin = 20u32;
        let (pw, ph) = (width.saturating_sub(2 * margin).max(1), height.saturating_sub(2 * margin).max(1));
        let n = self.frames.len().max(2);
        let to_px = |frame: f64, v: f64| {
            let x = margin as f64 + frame / (n - 1) as f64 * pw as f64;
            let y = margin as f64 + (1.0 - v.clamp(0.0, 1.0)) * ph as f64;
            (x, y)
        };
        for k in 0..=4 {
            let (_, y) = to_px(0.0, k as f64 / 4.0);
            draw_line(&mut img, (margin as f64, y), ((margin + pw) as f64, y), Rgb([220, 220, 220]));
        }
        for b in 1..3 {
            let (s, _) = band_range(b, self.frames.len());
            let (x, _) = to_px(s as f64, 0.0);
            draw_line(&mut img, (x, margin as f64), (x, (margin + ph) as f64), Rgb([180, 180, 255]));
        }
        draw_line(&mut img, to_px(0.0, 0.0), to_px((n - 1) as f64, 0.0), Rgb([0, 0, 0]));
        draw_line(&mut img, to_px(0.0, 0.0), to_px(0.0, 1.0), Rgb([0, 0, 0]));
        for w in self.frames.windows(2) {
            draw_line(&mut img, to_px(w[0].frame as f64, w[0].iou), to_px(w[1].frame as f64, w[1].iou), Rgb([200, 30, 30]));
        }
        if let [only] = self.frames.as_slice() {
            let (x, y) = to_px(0.0, only.iou);
            draw_line(&mut img, (x, y), (x, y), Rgb([200, 30, 30]));
        }
        img
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = ((a.0 + t * (b.0 - a.0)).round(), (a.1 + t * (b.1 - a.1)).round());
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
    }
}
