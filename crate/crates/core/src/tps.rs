//! Thin-plate-spline warps of axial frames, single or per-frame sets, for
//! synthesizing deformed volumes together with their ground truth.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, SegError};
use crate::volume::{Label, LabelVolume, Volume};

pub type Point = (f64, f64);

/// HU written where the inverse map leaves the source frame.
pub const HU_FILL: i16 = -1000;

/// Radial basis `r^2 log r^2`, zero at the origin.
pub fn radial(r2: f64) -> f64 {
    if r2 == 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// Interpolating spline from control points to targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Tps {
    pub centers: Vec<Point>,
    /// Radial weights per center, for output x and y.
    pub weights: Vec<[f64; 2]>,
    /// Affine rows `a0, a1, a2` for output x and y: `a0 + a1 x + a2 y`.
    pub affine: [[f64; 3]; 2],
}

impl Tps {
    pub fn eval(&self, p: Point) -> Point {
        let mut out = [0.0; 2];
        for (c, a) in out.iter_mut().zip(&self.affine) {
            *c = a[0] + a[1] * p.0 + a[2] * p.1;
        }
        for (q, w) in self.centers.iter().zip(&self.weights) {
            let u = radial((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2));
            out[0] += w[0] * u;
            out[1] += w[1] * u;
        }
        (out[0], out[1])
    }
}

fn check_configuration(src: &[Point]) -> Result<()> {
    if src.len() < 3 {
        return Err(SegError::Singular(format!("{} control points, need at least 3", src.len())));
    }
    let scale = src.iter().map(|p| p.0.abs().max(p.1.abs())).fold(1.0, f64::max);
    for i in 0..src.len() {
        for j in 0..i {
            if (src[i].0 - src[j].0).abs() <= 1e-9 * scale && (src[i].1 - src[j].1).abs() <= 1e-9 * scale {
                return Err(SegError::Singular(format!("control points {j} and {i} coincide")));
            }
        }
    }
    let n = src.len() as f64;
    let (mx, my) = (src.iter().map(|p| p.0).sum::<f64>() / n, src.iter().map(|p| p.1).sum::<f64>() / n);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in src {
        let (dx, dy) = (p.0 - mx, p.1 - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx * syy - sxy * sxy <= 1e-12 * (sxx + syy).powi(2) {
        return Err(SegError::Singular("control points are collinear".into()));
    }
    Ok(())
}

/// Solves the bordered kernel system so that `f(src[i]) = dst[i]` with the
/// radial weights orthogonal to affine functions.
pub fn fit_tps(src: &[Point], dst: &[Point]) -> Result<Tps> {
    if src.len() != dst.len() {
        return Err(SegError::InvalidArgument(format!("{} sources vs {} targets", src.len(), dst.len())));
    }
    check_configuration(src)?;
    let n = src.len();
    let mut l = DMatrix::<f64>::zeros(n + 3, n + 3);
    for i in 0..n {
        for j in 0..n {
            l[(i, j)] = radial((src[i].0 - src[j].0).powi(2) + (src[i].1 - src[j].1).powi(2));
        }
        let row = [1.0, src[i].0, src[i].1];
        for (k, v) in row.into_iter().enumerate() {
            l[(i, n + k)] = v;
            l[(n + k, i)] = v;
        }
    }
    let lu = l.lu();
    let mut weights = vec![[0.0; 2]; n];
    let mut affine = [[0.0; 3]; 2];
    for c in 0..2 {
        let mut rhs = DVector::<f64>::zeros(n + 3);
        for i in 0..n {
            rhs[i] = if c == 0 { dst[i].0 } else { dst[i].1 };
        }
        let sol = lu.solve(&rhs).ok_or_else(|| SegError::Singular("kernel system has no unique solution".into()))?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(SegError::Singular("kernel system is ill-conditioned".into()));
        }
        for i in 0..n {
            weights[i][c] = sol[i];
        }
        affine[c] = [sol[n], sol[n + 1], sol[n + 2]];
    }
    Ok(Tps { centers: src.to_vec(), weights, affine })
}

/// A warp fitted in both directions. Frames are resampled through the
/// inverse so every output pixel is defined.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpFunction {
    pub forward: Tps,
    pub inverse: Tps,
}

impl WarpFunction {
    pub fn fit(src: &[Point], dst: &[Point]) -> Result<Self> {
        Ok(WarpFunction { forward: fit_tps(src, dst)?, inverse: fit_tps(dst, src)? })
    }

    pub fn apply(&self, p: Point) -> Point {
        self.forward.eval(p)
    }
}

const EDGE_SLACK: f64 = 1e-6;

fn source_grid(f: &WarpFunction, width: usize, height: usize) -> Vec<Point> {
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            out.push(f.inverse.eval((x as f64, y as f64)));
        }
    }
    out
}

fn inside(v: f64, extent: usize) -> Option<f64> {
    let hi = (extent - 1) as f64;
    if v >= -EDGE_SLACK && v <= hi + EDGE_SLACK {
        Some(v.clamp(0.0, hi))
    } else {
        None
    }
}

/// Bilinear resampling of an HU frame (row-major, x fastest).
pub fn warp_hu_frame(data: &[i16], width: usize, height: usize, f: &WarpFunction) -> Vec<i16> {
    source_grid(f, width, height)
        .into_iter()
        .map(|(sx, sy)| {
            let (Some(sx), Some(sy)) = (inside(sx, width), inside(sy, height)) else {
                return HU_FILL;
            };
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
            let (tx, ty) = (sx - x0 as f64, sy - y0 as f64);
            let at = |x: usize, y: usize| data[x + width * y] as f64;
            let top = at(x0, y0) * (1.0 - tx) + at(x1, y0) * tx;
            let bottom = at(x0, y1) * (1.0 - tx) + at(x1, y1) * tx;
            (top * (1.0 - ty) + bottom * ty).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
        })
        .collect()
}

/// Nearest-neighbour resampling for categorical frames.
pub fn warp_nearest<T: Copy>(data: &[T], width: usize, height: usize, f: &WarpFunction, fill: T) -> Vec<T> {
    source_grid(f, width, height)
        .into_iter()
        .map(|(sx, sy)| match (inside(sx, width), inside(sy, height)) {
            (Some(sx), Some(sy)) => data[sx.round() as usize + width * sy.round() as usize],
            _ => fill,
        })
        .collect()
}

pub fn warp_label_frame(data: &[Label], width: usize, height: usize, f: &WarpFunction) -> Vec<Label> {
    warp_nearest(data, width, height, f, Label::ExteriorAir)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SetId {
    One,
    Two,
    Three,
    Four,
}

impl FromStr for SetId {
    type Err = SegError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1" => Ok(SetId::One),
            "2" => Ok(SetId::Two),
            "3" => Ok(SetId::Three),
            "4" => Ok(SetId::Four),
            other => Err(SegError::InvalidArgument(format!("unknown warp set '{other}'"))),
        }
    }
}

impl fmt::Display for SetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = match self {
            SetId::One => 1,
            SetId::Two => 2,
            SetId::Three => 3,
            SetId::Four => 4,
        };
        write!(f, "{n}")
    }
}

/// Per-frame incremental warps: element `k-1` maps the control points
/// interpolated to step `k-1` onto step `k`.
#[derive(Clone, Debug)]
pub struct WarpSteps {
    pub functions: Vec<WarpFunction>,
}

/// Control points moved a fraction `k / n` of the way to their targets.
pub fn interpolate_points(start: &[Point], end: &[Point], k: usize, n: usize) -> Vec<Point> {
    let t = k as f64 / n as f64;
    start.iter().zip(end).map(|(a, b)| (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))).collect()
}

pub fn make_warp_steps(start: &[Point], end: &[Point], n: usize) -> Result<WarpSteps> {
    if n == 0 {
        return Err(SegError::InvalidArgument("warp set needs at least one frame".into()));
    }
    if start.len() != end.len() {
        return Err(SegError::InvalidArgument("control point lists differ in length".into()));
    }
    let functions = (1..=n)
        .map(|k| WarpFunction::fit(&interpolate_points(start, end, k - 1, n), &interpolate_points(start, end, k, n)))
        .collect::<Result<_>>()?;
    Ok(WarpSteps { functions })
}

impl WarpSteps {
    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    /// 1-based step index used for frame `z` by the given set.
    pub fn order(&self, id: SetId) -> Result<Vec<usize>> {
        let n = self.len();
        if matches!(id, SetId::Three | SetId::Four) && !n.is_multiple_of(2) {
            return Err(SegError::InvalidArgument(format!("set {id} needs an even frame count, got {n}")));
        }
        let h = n / 2;
        Ok((0..n)
            .map(|z| match id {
                SetId::One => z + 1,
                SetId::Two => n - z,
                SetId::Three if z < h => z + 1,
                SetId::Three => n - z,
                SetId::Four if z < h => h - z,
                SetId::Four => z - h + 1,
            })
            .collect())
    }

    pub fn set(&self, id: SetId) -> Result<WarpSet> {
        let functions = self.order(id)?.into_iter().map(|k| self.functions[k - 1].clone()).collect();
        Ok(WarpSet { id, functions })
    }
}

#[derive(Clone, Debug)]
pub struct WarpSet {
    pub id: SetId,
    pub functions: Vec<WarpFunction>,
}

#[derive(Clone, Debug)]
pub enum WarpMode {
    /// Every frame uses the same function.
    Single(WarpFunction),
    /// Frame `z` uses element `z`.
    PerFrame(WarpSet),
}

impl WarpMode {
    fn function(&self, z: usize) -> &WarpFunction {
        match self {
            WarpMode::Single(f) => f,
            WarpMode::PerFrame(s) => &s.functions[z],
        }
    }
}

/// Warps every axial frame of `v`, and of `labels` with the same geometry.
pub fn warp_volume(v: &Volume, labels: Option<&LabelVolume>, mode: &WarpMode) -> Result<(Volume, Option<LabelVolume>)> {
    let [nx, ny, nz] = v.dims();
    if let WarpMode::PerFrame(s) = mode {
        if s.functions.len() != nz {
            return Err(SegError::InvalidArgument(format!("warp set has {} functions for {nz} frames", s.functions.len())));
        }
    }
    if let Some(l) = labels {
        l.check_matches(v)?;
    }
    let hu: Vec<i16> = (0..nz)
        .into_par_iter()
        .flat_map_iter(|z| warp_hu_frame(v.frame_data(z), nx, ny, mode.function(z)))
        .collect();
    let warped = Volume::new(v.dims(), v.spacing(), hu)?;
    let warped_labels = match labels {
        Some(l) => {
            let data: Vec<Label> = (0..nz)
                .into_par_iter()
                .flat_map_iter(|z| warp_label_frame(l.frame_data(z), nx, ny, mode.function(z)))
                .collect();
            Some(LabelVolume::new(l.dims(), l.spacing(), data)?)
        }
        None => None,
    };
    Ok((warped, warped_labels))
}

/// Source and target control points.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlPoints {
    pub src: Vec<Point>,
    pub dst: Vec<Point>,
}

impl ControlPoints {
    /// Lines `x,y,x',y'`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cp = ControlPoints { src: Vec::new(), dst: Vec::new() };
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let v: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| SegError::Format(format!("line {}: bad number in '{line}'", no + 1)))?;
            if v.len() != 4 || v.iter().any(|x| !x.is_finite()) {
                return Err(SegError::Format(format!("line {}: expected x,y,x',y'", no + 1)));
            }
            cp.src.push((v[0], v[1]));
            cp.dst.push((v[2], v[3]));
        }
        Ok(cp)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ControlPoints::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.src.iter().zip(&self.dst).map(|(a, b)| format!("{},{},{},{}\n", a.0, a.1, b.0, b.1)).collect()
    }

    /// 3 columns by 4 rows over the central part of the frame, each point
    /// displaced uniformly by at most `max_shift` per axis.
    pub fn perturbed_grid(width: usize, height: usize, max_shift: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cp = ControlPoints { src: Vec::new(), dst: Vec::new() };
        for r in 0..4 {
            for c in 0..3 {
                let p = (width as f64 * (c + 1) as f64 / 4.0, height as f64 * (r + 1) as f64 / 5.0);
                let d = (rng.gen_range(-max_shift..=max_shift), rng.gen_range(-max_shift..=max_shift));
                cp.src.push(p);
                cp.dst.push((p.0 + d.0, p.1 + d.1));
            }
        }
        cp
    }

    pub fn fit(&self) -> Result<WarpFunction> {
        WarpFunction::fit(&self.src, &self.dst)
    }
}
