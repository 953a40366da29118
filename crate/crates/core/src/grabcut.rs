//! Stage 3: volumetric GrabCut over overlapping frame chunks.
//!
//! Each chunk alternates mixture fitting on the current FG/BG split with a
//! min-cut relabeling of the undecided voxels. Chunks overlap with stride 1
//! and their binary outputs are averaged per voxel.

use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;

use crate::config::KvConfig;
use crate::error::{Result, SegError};
use crate::gmm::{fit_weighted, Gmm, GmmOptions};
use crate::maxflow::{FlowGraph, Side};
use crate::scribble::{rasterize_scribbles, ScribbleClass, ScribbleSet};
use crate::volume::{Label, LabelVolume, Volume, HU_MIN};

#[derive(Clone, Debug, PartialEq)]
pub struct GrabCutConfig {
    pub gmm_k: usize,
    pub lambda: f64,
    pub n_g: usize,
    pub iters: usize,
    /// Treat wrap voxels as undecided (initialized BG) instead of fixed BG.
    pub soft_wrap: bool,
    pub seed: u64,
    /// Relative energy change below which iteration stops.
    pub tolerance: f64,
}

impl Default for GrabCutConfig {
    fn default() -> Self {
        GrabCutConfig { gmm_k: 5, lambda: 50.0, n_g: 10, iters: 5, soft_wrap: true, seed: 0, tolerance: 1e-3 }
    }
}

impl GrabCutConfig {
    pub const KEYS: &'static [&'static str] = &["gmm_k", "lambda", "n_g", "iters", "soft_wrap", "seed"];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = GrabCutConfig::default();
        kv.apply("gmm_k", &mut c.gmm_k)?;
        kv.apply("lambda", &mut c.lambda)?;
        kv.apply("n_g", &mut c.n_g)?;
        kv.apply("iters", &mut c.iters)?;
        kv.apply("soft_wrap", &mut c.soft_wrap)?;
        kv.apply("seed", &mut c.seed)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gmm_k == 0 || self.n_g == 0 || self.iters == 0 {
            return Err(SegError::Config("gmm_k, n_g and iters must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(SegError::Config("lambda must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    HardFg,
    HardBg,
    /// Exterior air or support: fixed BG, left out of mixture fitting.
    Exterior,
    Undecided,
    /// Metal, hollow, or anything outside the wrap/body/exterior classes.
    Ignored,
}

/// One chunk of consecutive frames.
pub struct ChunkInput<'a> {
    pub hu: &'a [i16],
    pub labels: &'a [Label],
    pub hard: &'a [Option<ScribbleClass>],
    pub dims: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct ChunkOutput {
    pub fg: Vec<bool>,
    /// Energy after each min-cut.
    pub energies: Vec<f64>,
}

fn roles(input: &ChunkInput, soft_wrap: bool) -> (Vec<Role>, Vec<bool>) {
    let n = input.labels.len();
    let mut role = vec![Role::Ignored; n];
    let mut init = vec![false; n];
    for i in 0..n {
        let l = input.labels[i];
        role[i] = match (l, input.hard[i]) {
            (Label::Bandage | Label::Body, Some(ScribbleClass::Fg)) => Role::HardFg,
            (Label::Bandage | Label::Body, Some(ScribbleClass::Bg)) => Role::HardBg,
            (Label::Body, None) => Role::Undecided,
            (Label::Bandage, None) if soft_wrap => Role::Undecided,
            (Label::Bandage, None) => Role::HardBg,
            (Label::ExteriorAir | Label::Support, _) => Role::Exterior,
            _ => Role::Ignored,
        };
        init[i] = role[i] == Role::HardFg || (role[i] == Role::Undecided && l == Label::Body);
    }
    (role, init)
}

fn hu_bin(h: i16) -> usize {
    (h as i32 - HU_MIN as i32) as usize
}

const HU_BINS: usize = 4096;

/// Negative log-likelihood per HU bin.
fn cost_table(g: &Gmm) -> Vec<f64> {
    (0..HU_BINS).map(|b| -g.log_density(b as f64 + HU_MIN as f64)).collect()
}

fn fit_class(hist: &[f64], opts: &GmmOptions) -> Option<Gmm> {
    let pts: Vec<(f64, f64)> =
        hist.iter().enumerate().filter(|(_, &c)| c > 0.0).map(|(b, &c)| (b as f64 + HU_MIN as f64, c)).collect();
    if pts.is_empty() {
        return None;
    }
    fit_weighted(&pts, opts).ok().map(|f| f.model)
}

/// Voxel neighbor offsets along +x, +y, +z, returned with validity.
fn forward_neighbors(i: usize, dims: [usize; 3]) -> [Option<usize>; 3] {
    let [nx, ny, nz] = dims;
    let x = i % nx;
    let y = (i / nx) % ny;
    let z = i / (nx * ny);
    [
        (x + 1 < nx).then(|| i + 1),
        (y + 1 < ny).then(|| i + nx),
        (z + 1 < nz).then(|| i + nx * ny),
    ]
}

fn six_neighbors(i: usize, dims: [usize; 3]) -> impl Iterator<Item = usize> {
    let [nx, ny, nz] = dims;
    let x = i % nx;
    let y = (i / nx) % ny;
    let z = i / (nx * ny);
    [
        (x > 0).then(|| i - 1),
        (x + 1 < nx).then(|| i + 1),
        (y > 0).then(|| i - nx),
        (y + 1 < ny).then(|| i + nx),
        (z > 0).then(|| i - nx * ny),
        (z + 1 < nz).then(|| i + nx * ny),
    ]
    .into_iter()
    .flatten()
}

/// Contrast parameter from the mean squared HU step over pairs touching an
/// undecided voxel; zero when all such steps vanish.
fn contrast_beta(hu: &[i16], role: &[Role], dims: [usize; 3]) -> f64 {
    let (mut sum, mut cnt) = (0f64, 0usize);
    for i in 0..hu.len() {
        if role[i] == Role::Ignored {
            continue;
        }
        for j in forward_neighbors(i, dims).into_iter().flatten() {
            if role[j] == Role::Ignored || (role[i] != Role::Undecided && role[j] != Role::Undecided) {
                continue;
            }
            sum += (hu[i] as f64 - hu[j] as f64).powi(2);
            cnt += 1;
        }
    }
    if cnt == 0 || sum == 0.0 {
        0.0
    } else {
        1.0 / (2.0 * sum / cnt as f64)
    }
}

struct Energy<'a> {
    hu: &'a [i16],
    role: &'a [Role],
    dims: [usize; 3],
    lambda: f64,
    beta: f64,
}

impl Energy<'_> {
    fn pair_weight(&self, i: usize, j: usize) -> f64 {
        let d = self.hu[i] as f64 - self.hu[j] as f64;
        self.lambda * (-self.beta * d * d).exp()
    }

    /// Energy of a labeling over undecided voxels and their pairs; terms
    /// between two fixed voxels are constant and left out.
    fn evaluate(&self, fg: &[bool], cost_fg: &[f64], cost_bg: &[f64]) -> f64 {
        let mut e = 0.0;
        for i in 0..fg.len() {
            if self.role[i] != Role::Undecided {
                continue;
            }
            let b = hu_bin(self.hu[i]);
            e += if fg[i] { cost_fg[b] } else { cost_bg[b] };
        }
        for i in 0..fg.len() {
            if self.role[i] == Role::Ignored {
                continue;
            }
            for j in forward_neighbors(i, self.dims).into_iter().flatten() {
                if self.role[j] == Role::Ignored
                    || (self.role[i] != Role::Undecided && self.role[j] != Role::Undecided)
                {
                    continue;
                }
                if fg[i] != fg[j] {
                    e += self.pair_weight(i, j);
                }
            }
        }
        e
    }

    /// Minimizes the energy over undecided voxels for fixed costs.
    fn cut(&self, fg: &[bool], cost_fg: &[f64], cost_bg: &[f64]) -> Vec<bool> {
        let n = fg.len();
        let mut node = vec![usize::MAX; n];
        let mut count = 0;
        for i in 0..n {
            if self.role[i] == Role::Undecided {
                node[i] = count;
                count += 1;
            }
        }
        let mut g = FlowGraph::with_capacity(count, 3 * count);
        for i in 0..n {
            let u = node[i];
            if u == usize::MAX {
                continue;
            }
            let b = hu_bin(self.hu[i]);
            let base = cost_fg[b].min(cost_bg[b]);
            // source side = FG: cutting source->u labels u BG
            let mut to_source = cost_bg[b] - base;
            let mut to_sink = cost_fg[b] - base;
            for j in six_neighbors(i, self.dims) {
                match self.role[j] {
                    Role::HardFg => to_source += self.pair_weight(i, j),
                    Role::HardBg | Role::Exterior => to_sink += self.pair_weight(i, j),
                    Role::Undecided if j > i => {
                        let w = self.pair_weight(i, j);
                        g.add_edge(u, node[j], w, w);
                    }
                    _ => {}
                }
            }
            g.add_tweights(u, to_source, to_sink);
        }
        g.maxflow();
        let mut out = fg.to_vec();
        for i in 0..n {
            if node[i] != usize::MAX {
                out[i] = g.side(node[i]) == Side::Source;
            }
        }
        out
    }
}

/// HU histograms of the current FG and BG voxels. Exterior voxels are
/// counted for BG only when no other BG voxel exists: their sheer number
/// would otherwise swamp the wrap components' mixture weights.
fn class_histograms(hu: &[i16], role: &[Role], fg: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let mut hist_fg = vec![0f64; HU_BINS];
    let mut hist_bg = vec![0f64; HU_BINS];
    let mut exterior = vec![0f64; HU_BINS];
    for i in 0..hu.len() {
        let b = hu_bin(hu[i]);
        match role[i] {
            Role::Ignored => {}
            Role::Exterior => exterior[b] += 1.0,
            _ if fg[i] => hist_fg[b] += 1.0,
            _ => hist_bg[b] += 1.0,
        }
    }
    if hist_bg.iter().all(|&c| c == 0.0) {
        hist_bg = exterior;
    }
    (hist_fg, hist_bg)
}

/// Runs GrabCut iterations on one chunk.
///
/// Returns the initial labeling unchanged when there is nothing undecided or
/// when either class has no samples to fit.
pub fn grabcut_chunk(input: &ChunkInput, cfg: &GrabCutConfig, seed: u64) -> Result<ChunkOutput> {
    let n: usize = input.dims.iter().product();
    if input.hu.len() != n || input.labels.len() != n || input.hard.len() != n {
        return Err(SegError::InvalidArgument("chunk buffers disagree with dims".into()));
    }
    let (role, mut fg) = roles(input, cfg.soft_wrap);
    if !role.contains(&Role::Undecided) {
        return Ok(ChunkOutput { fg, energies: Vec::new() });
    }
    let energy = Energy {
        hu: input.hu,
        role: &role,
        dims: input.dims,
        lambda: cfg.lambda,
        beta: contrast_beta(input.hu, &role, input.dims),
    };
    let mut energies = Vec::new();
    for it in 0..cfg.iters {
        let (hist_fg, hist_bg) = class_histograms(input.hu, &role, &fg);
        let opts = GmmOptions { components: cfg.gmm_k, seed: seed.wrapping_add(it as u64), ..Default::default() };
        let (Some(gf), Some(gb)) = (fit_class(&hist_fg, &opts), fit_class(&hist_bg, &opts)) else {
            break;
        };
        let (cf, cb) = (cost_table(&gf), cost_table(&gb));
        fg = energy.cut(&fg, &cf, &cb);
        let e = energy.evaluate(&fg, &cf, &cb);
        let done = energies.last().is_some_and(|&p: &f64| (p - e).abs() < cfg.tolerance * p.abs());
        energies.push(e);
        if done {
            break;
        }
    }
    Ok(ChunkOutput { fg, energies })
}

/// Start frames of the overlapping chunks.
pub fn chunk_starts(frames: usize, n_g: usize) -> Vec<usize> {
    if frames <= n_g {
        vec![0]
    } else {
        (0..=frames - n_g).collect()
    }
}

#[derive(Clone, Debug)]
pub struct GrabCutResult {
    pub labels: LabelVolume,
    /// Number of chunks voting FG per voxel.
    pub votes: Vec<u16>,
    /// Number of chunks covering each frame.
    pub coverage: Vec<u16>,
}

impl GrabCutResult {
    pub fn probability(&self, i: usize) -> f64 {
        let frame_len = self.labels.frame_len();
        self.votes[i] as f64 / self.coverage[i / frame_len].max(1) as f64
    }
}

pub type ProgressFn<'a> = &'a (dyn Fn(usize, usize) + Sync);

/// Refines BODY/BANDAGE over overlapping chunks and averages their votes.
/// Only voxels labeled BANDAGE or BODY on input can change.
pub fn grabcut_volume(
    v: &Volume,
    labels: &LabelVolume,
    scribbles: &ScribbleSet,
    cfg: &GrabCutConfig,
    progress: Option<ProgressFn>,
) -> Result<GrabCutResult> {
    cfg.validate()?;
    labels.check_matches(v)?;
    let [nx, ny, nz] = v.dims();
    let frame_len = nx * ny;
    let (hard, _) = rasterize_scribbles(scribbles, v.dims());
    let starts = chunk_starts(nz, cfg.n_g);
    let depth = cfg.n_g.min(nz);
    let done = AtomicUsize::new(0);
    let total = starts.len();
    let votes = starts
        .par_iter()
        .map(|&z0| -> Result<(usize, Vec<bool>)> {
            let range = z0 * frame_len..(z0 + depth) * frame_len;
            let input = ChunkInput {
                hu: &v.voxels()[range.clone()],
                labels: &labels.labels()[range.clone()],
                hard: &hard[range],
                dims: [nx, ny, depth],
            };
            let out = grabcut_chunk(&input, cfg, cfg.seed.wrapping_mul(1_000_003).wrapping_add(z0 as u64))?;
            let k = done.fetch_add(1, Ordering::SeqCst) + 1;
            if let Some(p) = progress {
                p(k, total);
            }
            Ok((z0, out.fg))
        })
        .try_fold(
            || vec![0u16; v.voxels().len()],
            |mut acc, r| {
                let (z0, fg) = r?;
                let base = z0 * frame_len;
                for (k, &f) in fg.iter().enumerate() {
                    acc[base + k] += f as u16;
                }
                Ok::<_, SegError>(acc)
            },
        )
        .try_reduce(
            || vec![0u16; v.voxels().len()],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                Ok(a)
            },
        )?;
    let mut coverage = vec![0u16; nz];
    for &z0 in &starts {
        for c in &mut coverage[z0..z0 + depth] {
            *c += 1;
        }
    }
    let mut out = labels.clone();
    for (i, l) in out.labels_mut().iter_mut().enumerate() {
        if matches!(*l, Label::Bandage | Label::Body) {
            // p >= 0.5  <=>  2 * votes >= coverage
            let c = coverage[i / frame_len];
            *l = if 2 * votes[i] as u32 >= c as u32 { Label::Body } else { Label::Bandage };
        }
    }
    Ok(GrabCutResult { labels: out, votes, coverage })
}
