//! User scribbles: brush strokes marking body (FG) or wrap (BG) voxels.
//!
//! File format, one record per line: `frame,class,radius,x1,y1,x2,y2,...`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, SegError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScribbleClass {
    Fg,
    Bg,
}

impl FromStr for ScribbleClass {
    type Err = SegError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "FG" => Ok(ScribbleClass::Fg),
            "BG" => Ok(ScribbleClass::Bg),
            other => Err(SegError::Format(format!("unknown scribble class '{other}'"))),
        }
    }
}

impl fmt::Display for ScribbleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScribbleClass::Fg => "FG",
            ScribbleClass::Bg => "BG",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScribbleRecord {
    pub frame: usize,
    pub class: ScribbleClass,
    pub radius: f64,
    pub points: Vec<(f64, f64)>,
}

impl ScribbleRecord {
    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        if self.frame >= dims[2] {
            return Err(SegError::Range { index: self.frame, extent: dims[2] });
        }
        if !(self.radius >= 1.0) {
            return Err(SegError::InvalidArgument(format!("brush radius {} below 1", self.radius)));
        }
        if self.points.is_empty() {
            return Err(SegError::InvalidArgument("scribble without points".into()));
        }
        for &(x, y) in &self.points {
            if !(x >= 0.0 && y >= 0.0 && x < dims[0] as f64 && y < dims[1] as f64) {
                return Err(SegError::InvalidArgument(format!("point ({x}, {y}) outside frame")));
            }
        }
        Ok(())
    }

    pub fn to_line(&self) -> String {
        let mut s = format!("{},{},{}", self.frame, self.class, self.radius);
        for (x, y) in &self.points {
            s.push_str(&format!(",{x},{y}"));
        }
        s
    }
}

impl FromStr for ScribbleRecord {
    type Err = SegError;
    fn from_str(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').map(|s| s.trim()).collect();
        if f.len() < 5 || !(f.len() - 3).is_multiple_of(2) {
            return Err(SegError::Format(format!("scribble record needs frame,class,radius and x,y pairs: '{line}'")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| SegError::Format(format!("bad number '{s}'")));
        let frame = f[0].parse::<usize>().map_err(|_| SegError::Format(format!("bad frame '{}'", f[0])))?;
        let class = f[1].parse()?;
        let radius = num(f[2])?;
        let mut points = Vec::new();
        for p in f[3..].chunks(2) {
            points.push((num(p[0])?, num(p[1])?));
        }
        Ok(ScribbleRecord { frame, class, radius, points })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScribbleSet {
    pub records: Vec<ScribbleRecord>,
}

impl ScribbleSet {
    pub fn parse(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::parse)
            .collect::<Result<_>>()?;
        Ok(ScribbleSet { records })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ScribbleSet::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        self.records.iter().map(|r| r.to_line() + "\n").collect()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn point_segment_dist2(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    (p.0 - cx).powi(2) + (p.1 - cy).powi(2)
}

/// Pixels within `radius` of the polyline, as `(x, y)` pairs.
pub fn stroke_pixels(r: &ScribbleRecord, width: usize, height: usize) -> Vec<(usize, usize)> {
    let rad = r.radius;
    let segs: Vec<((f64, f64), (f64, f64))> = if r.points.len() == 1 {
        vec![(r.points[0], r.points[0])]
    } else {
        r.points.windows(2).map(|w| (w[0], w[1])).collect()
    };
    let xs = r.points.iter().map(|p| p.0);
    let ys = r.points.iter().map(|p| p.1);
    let x0 = (xs.clone().fold(f64::INFINITY, f64::min) - rad).floor().max(0.0) as usize;
    let x1 = ((xs.fold(f64::NEG_INFINITY, f64::max) + rad).ceil() as usize).min(width - 1);
    let y0 = (ys.clone().fold(f64::INFINITY, f64::min) - rad).floor().max(0.0) as usize;
    let y1 = ((ys.fold(f64::NEG_INFINITY, f64::max) + rad).ceil() as usize).min(height - 1);
    let r2 = rad * rad;
    let mut out = Vec::new();
    for y in y0..=y1 {
        for x in x0..=x1 {
            let p = (x as f64, y as f64);
            if segs.iter().any(|&(a, b)| point_segment_dist2(p, a, b) <= r2 + 1e-9) {
                out.push((x, y));
            }
        }
    }
    out
}

/// Per-voxel hard labels; later records overwrite earlier ones. Invalid
/// records are skipped with a warning and reported in the second value.
pub fn rasterize_scribbles(s: &ScribbleSet, dims: [usize; 3]) -> (Vec<Option<ScribbleClass>>, Vec<usize>) {
    let [nx, ny, nz] = dims;
    let mut map = vec![None; nx * ny * nz];
    let mut rejected = Vec::new();
    for (k, r) in s.records.iter().enumerate() {
        if let Err(e) = r.validate(dims) {
            log::warn!("scribble record {k} rejected: {e}");
            rejected.push(k);
            continue;
        }
        let base = r.frame * nx * ny;
        for (x, y) in stroke_pixels(r, nx, ny) {
            map[base + x + nx * y] = Some(r.class);
        }
    }
    (map, rejected)
}
