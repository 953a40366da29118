//! Stage 2: patch-graph geodesic distances from the exterior and the
//! bandage/body split on the sorted distance sequence.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rayon::prelude::*;

use crate::config::KvConfig;
use crate::error::{Result, SegError};
use crate::volume::{Frame, Label, LabelVolume, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Membership {
    /// Exterior reference region (exterior air or support).
    Reference,
    /// Bandage or body, to be split.
    Candidate,
    /// Mostly metal or hollow; removed from the graph.
    Excluded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeodesicConfig {
    pub patch_size: usize,
    /// Number of nearest distinct reference patches averaged per patch.
    pub m: usize,
}

impl Default for GeodesicConfig {
    fn default() -> Self {
        GeodesicConfig { patch_size: 3, m: 10 }
    }
}

impl GeodesicConfig {
    pub const KEYS: &'static [&'static str] = &["patch_size", "geodesic_m"];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = GeodesicConfig::default();
        kv.apply("patch_size", &mut c.patch_size)?;
        kv.apply("geodesic_m", &mut c.m)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.m == 0 {
            return Err(SegError::Config("patch_size and geodesic_m must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PatchGraph {
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub frame_size: (usize, usize),
    pub mean_hu: Vec<f64>,
    pub membership: Vec<Membership>,
    /// Undirected edges `(a, b, weight)` with `a < b`.
    pub edges: Vec<(usize, usize, f64)>,
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl PatchGraph {
    /// Builds a graph directly from node data; used by tests and by callers
    /// with their own tiling. Edges touching excluded nodes are kept in
    /// `edges` but never traversed.
    pub fn from_parts(membership: Vec<Membership>, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        let n = membership.len();
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b, w) in &edges {
            if a >= n || b >= n {
                return Err(SegError::Range { index: a.max(b), extent: n });
            }
            if !(w >= 0.0) {
                return Err(SegError::InvalidArgument(format!("negative edge weight {w}")));
            }
            if membership[a] == Membership::Excluded || membership[b] == Membership::Excluded {
                continue;
            }
            adjacency[a].push((b, w));
            adjacency[b].push((a, w));
        }
        Ok(PatchGraph {
            grid: (n, 1),
            patch_size: 1,
            frame_size: (n, 1),
            mean_hu: vec![0.0; n],
            membership,
            edges,
            adjacency,
        })
    }

    pub fn node_count(&self) -> usize {
        self.membership.len()
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adjacency[i]
    }

    /// Pixel rectangle `(x0, y0, x1, y1)` (exclusive max) covered by patch `i`.
    pub fn footprint(&self, i: usize) -> (usize, usize, usize, usize) {
        let (gw, _) = self.grid;
        let (px, py) = (i % gw, i / gw);
        let s = self.patch_size;
        let (w, h) = self.frame_size;
        (px * s, py * s, ((px + 1) * s).min(w), ((py + 1) * s).min(h))
    }

    pub fn patch_of(&self, x: usize, y: usize) -> usize {
        x / self.patch_size + self.grid.0 * (y / self.patch_size)
    }

    pub fn count(&self, m: Membership) -> usize {
        self.membership.iter().filter(|&&x| x == m).count()
    }
}

/// Tiles the frame into square patches and assigns membership by majority.
pub fn build_patch_graph(frame: &Frame<i16>, labels: &Frame<Label>, patch_size: usize) -> Result<PatchGraph> {
    let (w, h) = frame.shape();
    if w == 0 || h == 0 {
        return Err(SegError::InvalidArgument("empty frame".into()));
    }
    if labels.shape() != (w, h) {
        return Err(SegError::InvalidArgument(format!("label frame {:?} vs HU frame {:?}", labels.shape(), (w, h))));
    }
    let s = patch_size.max(1);
    let (gw, gh) = (w.div_ceil(s), h.div_ceil(s));
    let n = gw * gh;
    let mut mean_hu = vec![0.0; n];
    let mut sums = vec![(0i64, 0i64); n];
    let mut membership = vec![Membership::Candidate; n];
    for py in 0..gh {
        for px in 0..gw {
            let i = px + gw * py;
            let (mut sum, mut cnt, mut ext, mut excl) = (0i64, 0usize, 0usize, 0usize);
            for y in py * s..((py + 1) * s).min(h) {
                for x in px * s..((px + 1) * s).min(w) {
                    sum += frame.get(x, y) as i64;
                    cnt += 1;
                    match labels.get(x, y) {
                        Label::ExteriorAir | Label::Support => ext += 1,
                        Label::Metal | Label::Hollow => excl += 1,
                        _ => {}
                    }
                }
            }
            mean_hu[i] = sum as f64 / cnt as f64;
            sums[i] = (sum, cnt as i64);
            membership[i] = if 2 * ext >= cnt {
                Membership::Reference
            } else if 2 * excl >= cnt {
                Membership::Excluded
            } else {
                Membership::Candidate
            };
        }
    }
    // exact in integers, so a global HU shift cannot perturb any weight
    let weight = |a: usize, b: usize| {
        let ((sa, na), (sb, nb)) = (sums[a], sums[b]);
        (sa * nb - sb * na).abs() as f64 / (na * nb) as f64
    };
    let mut edges = Vec::with_capacity(2 * n);
    for py in 0..gh {
        for px in 0..gw {
            let i = px + gw * py;
            if px + 1 < gw {
                edges.push((i, i + 1, weight(i, i + 1)));
            }
            if py + 1 < gh {
                edges.push((i, i + gw, weight(i, i + gw)));
            }
        }
    }
    let mut adjacency = vec![Vec::with_capacity(4); n];
    for &(a, b, wt) in &edges {
        if membership[a] == Membership::Excluded || membership[b] == Membership::Excluded {
            continue;
        }
        adjacency[a].push((b, wt));
        adjacency[b].push((a, wt));
    }
    Ok(PatchGraph { grid: (gw, gh), patch_size: s, frame_size: (w, h), mean_hu, membership, edges, adjacency })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeodesicField {
    /// Per node: ascending distances to distinct reference nodes, length
    /// `min(m, |reference|)`, padded with `+inf` where fewer are reachable.
    /// Empty for excluded nodes.
    pub nearest: Vec<Vec<f64>>,
    /// Mean of `nearest` per node (`NaN` for excluded nodes).
    pub average: Vec<f64>,
    /// Candidate nodes in ascending `average` order (ties by index).
    pub order: Vec<usize>,
}

impl GeodesicField {
    pub fn sorted_averages(&self) -> Vec<f64> {
        self.order.iter().map(|&i| self.average[i]).collect()
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Entry {
    dist: f64,
    node: usize,
    source: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, o: &Self) -> Ordering {
        o.dist.total_cmp(&self.dist).then(o.node.cmp(&self.node)).then(o.source.cmp(&self.source))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Multi-source shortest paths where every node keeps its `m` nearest
/// distinct reference nodes.
///
/// A label `(source, dist)` is settled at most once per node, and a node
/// stops accepting labels once it holds `m`; a path through a full node can
/// never beat that node's own `m` sources, so the settled lists are exact.
pub fn geodesic_multi(g: &PatchGraph, m: usize) -> Result<GeodesicField> {
    if m == 0 {
        return Err(SegError::InvalidArgument("m must be positive".into()));
    }
    let n = g.node_count();
    let refs: Vec<usize> = (0..n).filter(|&i| g.membership[i] == Membership::Reference).collect();
    if refs.is_empty() {
        return Err(SegError::FrameSkipped);
    }
    let want = m.min(refs.len());
    let mut settled: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut heap = BinaryHeap::new();
    for &r in &refs {
        heap.push(Entry { dist: 0.0, node: r, source: r });
    }
    while let Some(Entry { dist, node, source }) = heap.pop() {
        let s = &mut settled[node];
        if s.len() >= want || s.iter().any(|&(src, _)| src == source) {
            continue;
        }
        s.push((source, dist));
        for &(nb, w) in g.neighbors(node) {
            let t = &settled[nb];
            if t.len() < want && !t.iter().any(|&(src, _)| src == source) {
                heap.push(Entry { dist: dist + w, node: nb, source });
            }
        }
    }
    let mut nearest = vec![Vec::new(); n];
    let mut average = vec![f64::NAN; n];
    for i in 0..n {
        if g.membership[i] == Membership::Excluded {
            continue;
        }
        let mut d: Vec<f64> = settled[i].iter().map(|&(_, d)| d).collect();
        d.resize(want, f64::INFINITY);
        average[i] = if d.iter().any(|x| x.is_infinite()) { f64::INFINITY } else { d.iter().sum::<f64>() / want as f64 };
        nearest[i] = d;
    }
    let mut order: Vec<usize> = (0..n).filter(|&i| g.membership[i] == Membership::Candidate).collect();
    order.sort_by(|&a, &b| average[a].total_cmp(&average[b]).then(a.cmp(&b)));
    Ok(GeodesicField { nearest, average, order })
}

/// Index of the largest forward difference in an ascending sequence, ties
/// toward the larger index. A step from finite to `+inf` is infinitely
/// large; `+inf` to `+inf` is zero. `None` when no step is positive.
pub fn largest_gap(sorted: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in 0..sorted.len().saturating_sub(1) {
        let (a, b) = (sorted[i], sorted[i + 1]);
        let gap = if a.is_infinite() { 0.0 } else { b - a };
        if gap > 0.0 && best.is_none_or(|(_, g)| gap >= g) {
            best = Some((i, gap));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub wrap: Vec<usize>,
    pub body: Vec<usize>,
    /// Number of sorted entries at or below the split (the 1-based split index).
    pub split_index: usize,
}

/// Splits candidate nodes at the largest jump in sorted average distance.
pub fn split_by_gradient(field: &GeodesicField) -> Split {
    let d = field.sorted_averages();
    match largest_gap(&d) {
        None => Split { wrap: field.order.clone(), body: Vec::new(), split_index: d.len() },
        Some(i) => {
            let cut = d[i];
            let (wrap, body) = field.order.iter().partition(|&&n| field.average[n] <= cut);
            Split { wrap, body, split_index: i + 1 }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FrameReport {
    pub skipped: bool,
    pub wrap_patches: usize,
    pub body_patches: usize,
}

/// Provisional BANDAGE/BODY labels for one frame. Only UNKNOWN pixels are
/// written. Pixels in reference patches become BANDAGE; pixels in excluded
/// patches take the class of the nearest candidate patch on the grid.
pub fn geodesic_frame(frame: &Frame<i16>, labels: &mut Frame<Label>, cfg: &GeodesicConfig) -> Result<(FrameReport, Option<GeodesicField>)> {
    let g = build_patch_graph(frame, labels, cfg.patch_size)?;
    let n = g.node_count();
    let (field, class, report) = match geodesic_multi(&g, cfg.m) {
        Err(SegError::FrameSkipped) => {
            let rep = FrameReport { skipped: true, wrap_patches: g.count(Membership::Candidate), body_patches: 0 };
            (None, vec![Label::Bandage; n], rep)
        }
        Err(e) => return Err(e),
        Ok(field) => {
            let split = split_by_gradient(&field);
            let mut class = vec![None; n];
            for &i in &split.wrap {
                class[i] = Some(Label::Bandage);
            }
            for &i in &split.body {
                class[i] = Some(Label::Body);
            }
            for i in 0..n {
                if g.membership[i] == Membership::Reference {
                    class[i] = Some(Label::Bandage);
                }
            }
            let class = fill_from_nearest(&g, class);
            let rep = FrameReport { skipped: false, wrap_patches: split.wrap.len(), body_patches: split.body.len() };
            (Some(field), class, rep)
        }
    };
    let (w, h) = frame.shape();
    for y in 0..h {
        for x in 0..w {
            if labels.get(x, y) == Label::Unknown {
                labels.set(x, y, class[g.patch_of(x, y)]);
            }
        }
    }
    Ok((report, field))
}

/// Breadth-first fill of unassigned grid cells from assigned candidate cells.
fn fill_from_nearest(g: &PatchGraph, class: Vec<Option<Label>>) -> Vec<Label> {
    let (gw, gh) = g.grid;
    let mut out = class.clone();
    let mut queue: VecDeque<usize> =
        (0..out.len()).filter(|&i| out[i].is_some() && g.membership[i] == Membership::Candidate).collect();
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % gw, i / gw);
        let nbs = [
            (x > 0).then(|| i - 1),
            (x + 1 < gw).then(|| i + 1),
            (y > 0).then(|| i - gw),
            (y + 1 < gh).then(|| i + gw),
        ];
        for j in nbs.into_iter().flatten() {
            if out[j].is_none() {
                out[j] = out[i];
                queue.push_back(j);
            }
        }
    }
    out.into_iter().map(|c| c.unwrap_or(Label::Bandage)).collect()
}

#[derive(Clone, Debug)]
pub struct GeodesicResult {
    pub labels: LabelVolume,
    pub frames: Vec<FrameReport>,
}

/// Runs the per-frame geodesic split over every axial frame.
pub fn geodesic_stage(v: &Volume, pre: &LabelVolume, cfg: &GeodesicConfig) -> Result<GeodesicResult> {
    cfg.validate()?;
    pre.check_matches(v)?;
    let outs: Vec<Result<(Frame<Label>, FrameReport)>> = (0..v.frame_count())
        .into_par_iter()
        .map(|z| {
            let mut lab = pre.axial(z);
            let (rep, _) = geodesic_frame(&v.axial(z), &mut lab, cfg)?;
            Ok((lab, rep))
        })
        .collect();
    let mut labels = pre.clone();
    let mut frames = Vec::with_capacity(outs.len());
    for (z, o) in outs.into_iter().enumerate() {
        let (lab, rep) = o?;
        labels.frame_data_mut(z).copy_from_slice(lab.data());
        frames.push(rep);
    }
    Ok(GeodesicResult { labels, frames })
}

/// Per-pixel average geodesic distance for one frame (`NaN` for excluded
/// patches, `+inf` for unreachable ones).
pub fn distance_map(frame: &Frame<i16>, labels: &Frame<Label>, cfg: &GeodesicConfig) -> Result<Frame<f64>> {
    let g = build_patch_graph(frame, labels, cfg.patch_size)?;
    let field = geodesic_multi(&g, cfg.m)?;
    let (w, h) = frame.shape();
    let mut out = Frame::filled(w, h, f64::NAN);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, field.average[g.patch_of(x, y)]);
        }
    }
    Ok(out)
}
