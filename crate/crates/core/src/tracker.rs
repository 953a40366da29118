//! Stage 4: forward tracking of BODY segments across axial frames.
//!
//! A track scores candidate segments by their mean pixel-set IoU against its
//! recent history; segments no track claims are demoted to BANDAGE.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use crate::components::{components_2d, Connectivity2};
use crate::config::KvConfig;
use crate::error::{Result, SegError};
use crate::volume::{Label, LabelVolume};

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerConfig {
    pub epsilon: f64,
    pub history: usize,
    pub auto_init: bool,
    pub auto_init_min_area: usize,
    pub min_segment: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig { epsilon: 0.1, history: 4, auto_init: false, auto_init_min_area: 200, min_segment: 5 }
    }
}

impl TrackerConfig {
    pub const KEYS: &'static [&'static str] =
        &["epsilon", "history", "auto_init", "auto_init_min_area", "min_segment"];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = TrackerConfig::default();
        kv.apply("epsilon", &mut c.epsilon)?;
        kv.apply("history", &mut c.history)?;
        kv.apply("auto_init", &mut c.auto_init)?;
        kv.apply("auto_init_min_area", &mut c.auto_init_min_area)?;
        kv.apply("min_segment", &mut c.min_segment)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.history == 0 {
            return Err(SegError::Config("history must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(SegError::Config("epsilon must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub frame: usize,
    /// Sorted pixel indices `x + width * y`.
    pub pixels: Vec<usize>,
    pub centroid: (f64, f64),
    /// Inclusive bounding box `(x0, y0, x1, y1)`.
    pub bbox: (usize, usize, usize, usize),
}

impl Segment {
    pub fn new(frame: usize, mut pixels: Vec<usize>, width: usize) -> Self {
        assert!(!pixels.is_empty(), "segment needs pixels");
        pixels.sort_unstable();
        let (mut sx, mut sy) = (0f64, 0f64);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for &p in &pixels {
            let (x, y) = (p % width, p / width);
            sx += x as f64;
            sy += y as f64;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let n = pixels.len() as f64;
        Segment { frame, centroid: (sx / n, sy / n), bbox: (x0, y0, x1, y1), pixels }
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.pixels.binary_search(&idx).is_ok()
    }
}

/// IoU of two pixel sets given as sorted indices.
pub fn pixel_iou(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn boxes_overlap(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> bool {
    a.0 <= b.2 && b.0 <= a.2 && a.1 <= b.3 && b.1 <= a.3
}

/// 8-connected components of a frame mask, dropping those below `min_size`.
pub fn extract_segments(mask: &[bool], width: usize, height: usize, frame: usize, min_size: usize) -> Vec<Segment> {
    components_2d(mask, width, height, Connectivity2::Eight)
        .into_iter()
        .filter(|c| c.len() >= min_size.max(1))
        .map(|c| Segment::new(frame, c, width))
        .collect()
}

/// Mean IoU between `s` and every segment in the history.
pub fn similarity<'a>(history: impl IntoIterator<Item = &'a Segment>, s: &Segment) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for h in history {
        if boxes_overlap(h.bbox, s.bbox) {
            sum += pixel_iou(&h.pixels, &s.pixels);
        }
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrackOrigin {
    Seed { frame: usize, x: usize, y: usize },
    Auto { frame: usize },
}

#[derive(Clone, Debug)]
pub struct Track {
    pub id: usize,
    pub origin: TrackOrigin,
    pub start: usize,
    /// Chosen segment per frame, starting at `start`.
    pub segments: Vec<Segment>,
    /// Most recent first; starts as `M` copies of the first segment.
    pub history: VecDeque<Segment>,
    pub active: bool,
}

impl Track {
    fn new(id: usize, origin: TrackOrigin, seg: Segment, m: usize) -> Self {
        let start = seg.frame;
        Track { id, origin, start, history: std::iter::repeat_n(seg.clone(), m).collect(), segments: vec![seg], active: true }
    }

    pub fn end(&self) -> usize {
        self.start + self.segments.len() - 1
    }

    fn push(&mut self, seg: Segment, m: usize) {
        self.history.push_front(seg.clone());
        self.history.truncate(m);
        self.segments.push(seg);
    }
}

/// Starts a track on the segment containing `(x, y)`.
pub fn seed_track(id: usize, frame: usize, x: usize, y: usize, width: usize, segments: &[Segment], m: usize) -> Result<Track> {
    let idx = x + width * y;
    let seg = segments.iter().find(|s| s.contains(idx)).ok_or(SegError::SeedMiss { frame, x, y })?;
    Ok(Track::new(id, TrackOrigin::Seed { frame, x, y }, seg.clone(), m))
}

/// Greedy one-to-one assignment of active tracks to the next frame's
/// segments by descending similarity, gated by `epsilon`. Unassigned tracks
/// cease. Returns the claiming track index per segment.
pub fn step_tracks(tracks: &mut [Track], segments: &[Segment], cfg: &TrackerConfig) -> Vec<Option<usize>> {
    let mut pairs = Vec::new();
    for (t, tr) in tracks.iter().enumerate() {
        if !tr.active {
            continue;
        }
        for (s, seg) in segments.iter().enumerate() {
            let phi = similarity(&tr.history, seg);
            if phi >= cfg.epsilon && phi > 0.0 {
                pairs.push((phi, t, s));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut claimed = vec![None; segments.len()];
    let mut matched = vec![false; tracks.len()];
    for (_, t, s) in pairs {
        if matched[t] || claimed[s].is_some() {
            continue;
        }
        matched[t] = true;
        claimed[s] = Some(t);
    }
    for (t, tr) in tracks.iter_mut().enumerate() {
        if !tr.active {
            continue;
        }
        match claimed.iter().position(|&c| c == Some(t)) {
            Some(s) => tr.push(segments[s].clone(), cfg.history),
            None => tr.active = false,
        }
    }
    claimed
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedPoint {
    pub frame: usize,
    pub x: usize,
    pub y: usize,
}

pub fn parse_seeds(text: &str) -> Result<Vec<SeedPoint>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != 3 {
                return Err(SegError::Format(format!("seed line needs frame,x,y: '{l}'")));
            }
            let p = |s: &str| s.parse::<usize>().map_err(|_| SegError::Format(format!("bad seed field '{s}'")));
            Ok(SeedPoint { frame: p(f[0])?, x: p(f[1])?, y: p(f[2])? })
        })
        .collect()
}

pub fn load_seeds(path: impl AsRef<Path>) -> Result<Vec<SeedPoint>> {
    parse_seeds(&std::fs::read_to_string(path)?)
}

pub fn seeds_to_text(seeds: &[SeedPoint]) -> String {
    seeds.iter().map(|s| format!("{},{},{}\n", s.frame, s.x, s.y)).collect()
}

#[derive(Clone, Debug)]
pub struct TrackingResult {
    pub labels: LabelVolume,
    pub tracks: Vec<Track>,
}

impl TrackingResult {
    /// Plain-text table: one header line per track, then one line per frame.
    pub fn report(&self) -> String {
        let mut s = String::from("track\torigin\tstart\tend\n");
        for t in &self.tracks {
            let origin = match t.origin {
                TrackOrigin::Seed { frame, x, y } => format!("seed@{frame}:{x},{y}"),
                TrackOrigin::Auto { frame } => format!("auto@{frame}"),
            };
            let _ = writeln!(s, "{}\t{}\t{}\t{}", t.id, origin, t.start, t.end());
        }
        s.push_str("\ntrack\tframe\tarea\n");
        for t in &self.tracks {
            for seg in &t.segments {
                let _ = writeln!(s, "{}\t{}\t{}", t.id, seg.frame, seg.area());
            }
        }
        s
    }
}

/// Forward tracking pass. BODY pixels not in any tracked segment become BANDAGE.
pub fn run_tracking(labels: &LabelVolume, seeds: &[SeedPoint], cfg: &TrackerConfig) -> Result<TrackingResult> {
    cfg.validate()?;
    if seeds.is_empty() && !cfg.auto_init {
        return Err(SegError::NoTracks);
    }
    let [w, h, nz] = labels.dims();
    for s in seeds {
        if s.frame >= nz || s.x >= w || s.y >= h {
            return Err(SegError::SeedMiss { frame: s.frame, x: s.x, y: s.y });
        }
    }
    let mut out = labels.clone();
    let mut tracks: Vec<Track> = Vec::new();
    for z in 0..nz {
        let mask: Vec<bool> = labels.frame_data(z).iter().map(|&l| l == Label::Body).collect();
        let segments = extract_segments(&mask, w, h, z, cfg.min_segment);
        let mut claimed = step_tracks(&mut tracks, &segments, cfg);
        for s in seeds.iter().filter(|s| s.frame == z) {
            let idx = s.x + w * s.y;
            let k = segments.iter().position(|seg| seg.contains(idx)).ok_or(SegError::SeedMiss { frame: z, x: s.x, y: s.y })?;
            if claimed[k].is_some() {
                log::info!("seed ({}, {}) in frame {z} lands on an already tracked segment", s.x, s.y);
                continue;
            }
            let id = tracks.len();
            tracks.push(seed_track(id, z, s.x, s.y, w, &segments, cfg.history)?);
            claimed[k] = Some(id);
        }
        if cfg.auto_init {
            for (k, seg) in segments.iter().enumerate() {
                if claimed[k].is_none() && seg.area() >= cfg.auto_init_min_area {
                    let id = tracks.len();
                    tracks.push(Track::new(id, TrackOrigin::Auto { frame: z }, seg.clone(), cfg.history));
                    claimed[k] = Some(id);
                }
            }
        }
        let mut keep = vec![false; w * h];
        for (k, seg) in segments.iter().enumerate() {
            if claimed[k].is_some() {
                for &p in &seg.pixels {
                    keep[p] = true;
                }
            }
        }
        for (p, l) in out.frame_data_mut(z).iter_mut().enumerate() {
            if *l == Label::Body && !keep[p] {
                *l = Label::Bandage;
            }
        }
    }
    Ok(TrackingResult { labels: out, tracks })
}
