//! Stage 1: exterior air, support object, metal and interior hollow space.

use rayon::prelude::*;

use crate::components::{components_3d, flood_from_border, Connectivity2};
use crate::config::KvConfig;
use crate::error::{Result, SegError};
use crate::volume::{Frame, Label, LabelVolume, Volume, HU_MIN};

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub bin_width: f64,
    pub smooth_bins: usize,
    pub fallback_air_threshold: i16,
    pub metal_threshold: i16,
    /// Support footprint (true = support); `None` disables support detection.
    pub template: Option<Frame<bool>>,
    pub match_threshold: f64,
    pub hough_angle_tolerance: f64,
    pub min_metal_size: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            bin_width: 10.0,
            smooth_bins: 5,
            fallback_air_threshold: -500,
            metal_threshold: 2500,
            template: None,
            match_threshold: 0.6,
            hough_angle_tolerance: 5.0,
            min_metal_size: 5,
        }
    }
}

impl PreprocessConfig {
    pub const KEYS: &'static [&'static str] = &[
        "bin_width",
        "smooth_bins",
        "fallback_air_threshold",
        "metal_threshold",
        "match_threshold",
        "hough_angle_tolerance",
        "min_metal_size",
    ];

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = PreprocessConfig::default();
        kv.apply("bin_width", &mut c.bin_width)?;
        kv.apply("smooth_bins", &mut c.smooth_bins)?;
        kv.apply("fallback_air_threshold", &mut c.fallback_air_threshold)?;
        kv.apply("metal_threshold", &mut c.metal_threshold)?;
        kv.apply("match_threshold", &mut c.match_threshold)?;
        kv.apply("hough_angle_tolerance", &mut c.hough_angle_tolerance)?;
        kv.apply("min_metal_size", &mut c.min_metal_size)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bin_width > 0.0) {
            return Err(SegError::Config("bin_width must be positive".into()));
        }
        if !(self.match_threshold > 0.0 && self.match_threshold <= 1.0) {
            return Err(SegError::Config("match_threshold must lie in (0, 1]".into()));
        }
        if !(0.0..=15.0).contains(&self.hough_angle_tolerance) {
            return Err(SegError::Config("hough_angle_tolerance must lie in [0, 15] degrees".into()));
        }
        if self.smooth_bins == 0 {
            return Err(SegError::Config("smooth_bins must be positive".into()));
        }
        Ok(())
    }

    pub fn with_template(mut self, template: Frame<bool>) -> Self {
        self.template = Some(template);
        self
    }
}

/// Converts a single-frame label volume (SUPPORT on anything else) to a footprint.
pub fn template_from_labels(t: &LabelVolume) -> Result<Frame<bool>> {
    let [w, h, d] = t.dims();
    if d != 1 {
        return Err(SegError::InvalidArgument(format!("template must be a single frame, got {d} frames")));
    }
    Ok(Frame::from_vec(w, h, t.labels().iter().map(|&l| l != Label::ExteriorAir).collect()))
}

/// Smoothed histogram over HU with bins anchored at `HU_MIN`.
#[derive(Clone, Debug)]
pub struct Histogram {
    pub origin: f64,
    pub bin_width: f64,
    pub smoothed: Vec<f64>,
}

impl Histogram {
    pub fn build(values: &[i16], bin_width: f64, smooth_bins: usize) -> Histogram {
        let origin = HU_MIN as f64;
        let max = values.iter().copied().max().unwrap_or(HU_MIN) as f64;
        let n = ((max - origin) / bin_width).floor() as usize + 1;
        let mut counts = vec![0f64; n];
        for &v in values {
            counts[((v as f64 - origin) / bin_width).floor() as usize] += 1.0;
        }
        let half = smooth_bins / 2;
        let smoothed = (0..n)
            .map(|i| {
                let lo = i.saturating_sub(half);
                let hi = (i + smooth_bins - half).min(n);
                counts[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
            })
            .collect();
        Histogram { origin, bin_width, smoothed }
    }

    pub fn bin_center(&self, b: usize) -> f64 {
        self.origin + (b as f64 + 0.5) * self.bin_width
    }

    /// Local maxima, plateaus reported at their middle bin.
    pub fn peaks(&self) -> Vec<usize> {
        let h = &self.smoothed;
        let mut peaks = Vec::new();
        let mut i = 0;
        while i < h.len() {
            let mut j = i;
            while j + 1 < h.len() && h[j + 1] == h[i] {
                j += 1;
            }
            let left_lower = i == 0 || h[i - 1] < h[i];
            let right_lower = j + 1 == h.len() || h[j + 1] < h[i];
            if left_lower && right_lower && h[i] > 0.0 {
                peaks.push((i + j) / 2);
            }
            i = j + 1;
        }
        peaks
    }
}

/// Air/non-air threshold at the smoothed-histogram valley next to the air
/// mode.
///
/// The tallest peak is air. Every other peak gets a prominence, its height
/// above the minimum between it and air, which keeps clipping spikes at -1024
/// from pairing with the air mode itself. The partner is the peak nearest to
/// air whose prominence is at least `PARTNER_FRACTION` of the largest, so
/// partial-volume shoulders on the air side cannot push the valley past the
/// first real tissue mode.
pub fn choose_air_threshold(v: &Volume, cfg: &PreprocessConfig) -> i16 {
    air_threshold_from_values(v.voxels(), cfg)
}

const PARTNER_FRACTION: f64 = 0.1;

pub fn air_threshold_from_values(values: &[i16], cfg: &PreprocessConfig) -> i16 {
    if values.is_empty() {
        return cfg.fallback_air_threshold;
    }
    let hist = Histogram::build(values, cfg.bin_width, cfg.smooth_bins);
    let h = &hist.smoothed;
    let peaks = hist.peaks();
    let Some(&p1) = peaks.iter().max_by(|&&a, &&b| h[a].total_cmp(&h[b]).then(b.cmp(&a))) else {
        return cfg.fallback_air_threshold;
    };
    let min_between = |a: usize, b: usize| {
        let (lo, hi) = (a.min(b), a.max(b));
        (lo..=hi).min_by(|&x, &y| h[x].total_cmp(&h[y]).then(x.cmp(&y))).unwrap()
    };
    let prominent: Vec<(usize, f64)> = peaks
        .iter()
        .copied()
        .filter(|&p| p != p1)
        .map(|p| (p, h[p] - h[min_between(p, p1)]))
        .filter(|&(_, prom)| prom > 0.0)
        .collect();
    let top = prominent.iter().map(|&(_, prom)| prom).fold(0.0, f64::max);
    let partner = prominent
        .iter()
        .filter(|&&(_, prom)| prom >= PARTNER_FRACTION * top)
        .min_by_key(|&&(p, _)| (p.abs_diff(p1), p))
        .map(|&(p, _)| p);
    match partner {
        None => cfg.fallback_air_threshold,
        Some(p2) => {
            // flat-bottomed valleys resolve to the middle of the contiguous minimum run
            let first = min_between(p1, p2);
            let m = h[first];
            let hi = p1.max(p2);
            let last = (first..=hi).take_while(|&i| h[i] == m).last().unwrap();
            let valley = (hist.bin_center(first) + hist.bin_center(last)) / 2.0;
            valley.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
        }
    }
}

pub fn air_mask(frame: &[i16], threshold: i16) -> Vec<bool> {
    frame.iter().map(|&h| h < threshold).collect()
}

/// Sub-threshold pixels 4-connected to the frame border.
pub fn segment_exterior_air(frame: &Frame<i16>, threshold: i16) -> Vec<bool> {
    let air = air_mask(frame.data(), threshold);
    flood_from_border(&air, frame.width(), frame.height(), Connectivity2::Four)
}

/// Sub-threshold pixels not connected to the exterior.
pub fn detect_hollow(frame: &Frame<i16>, threshold: i16, exterior: &[bool]) -> Vec<bool> {
    frame.data().iter().zip(exterior).map(|(&h, &e)| h < threshold && !e).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportDetection {
    pub mask: Vec<bool>,
    /// (x0, y0, x1, y1), exclusive max.
    pub bbox: (usize, usize, usize, usize),
    pub ncc: f64,
    pub offset: (usize, usize),
}

/// Normalized cross-correlation of `template` placed at `(ox, oy)` in `image`.
/// Returns 0 when either patch has zero variance.
pub fn ncc_at(image: &Frame<f32>, template: &Frame<f32>, ox: usize, oy: usize) -> f64 {
    let (tw, th) = template.shape();
    let n = (tw * th) as f64;
    let (mut si, mut sii, mut st, mut stt, mut sit) = (0f64, 0f64, 0f64, 0f64, 0f64);
    for y in 0..th {
        let row = &image.data()[(oy + y) * image.width() + ox..(oy + y) * image.width() + ox + tw];
        let trow = &template.data()[y * tw..(y + 1) * tw];
        for (&i, &t) in row.iter().zip(trow) {
            let (i, t) = (i as f64, t as f64);
            si += i;
            sii += i * i;
            st += t;
            stt += t * t;
            sit += i * t;
        }
    }
    let cov = sit - si * st / n;
    let vi = sii - si * si / n;
    let vt = stt - st * st / n;
    if vi <= 1e-12 || vt <= 1e-12 {
        return 0.0;
    }
    cov / (vi * vt).sqrt()
}

/// Near-vertical line accumulator over edge pixels: returns `(rho, theta_deg, votes)`
/// peaks sorted by votes, with simple non-maximum suppression in rho.
pub fn hough_vertical(edges: &[bool], width: usize, height: usize, tolerance_deg: f64, max_peaks: usize) -> Vec<(i64, f64, usize)> {
    let steps = tolerance_deg.floor() as i64;
    let thetas: Vec<f64> = (-steps..=steps).map(|d| 90.0 + d as f64).collect();
    let diag = (width + height) as i64;
    let nrho = (2 * diag + 1) as usize;
    let mut acc = vec![0usize; nrho * thetas.len()];
    for y in 0..height {
        for x in 0..width {
            if !edges[x + width * y] {
                continue;
            }
            for (ti, th) in thetas.iter().enumerate() {
                let t = th.to_radians();
                let rho = (x as f64 * t.sin() - y as f64 * t.cos()).round() as i64;
                acc[ti * nrho + (rho + diag) as usize] += 1;
            }
        }
    }
    let nth = thetas.len();
    let mut peaks: Vec<(i64, f64, usize)> = Vec::new();
    for ti in 0..nth {
        for r in 0..nrho {
            let v = acc[ti * nrho + r];
            if v == 0 {
                continue;
            }
            let mut is_max = true;
            'nb: for dt in -1i64..=1 {
                for dr in -1i64..=1 {
                    let (t2, r2) = (ti as i64 + dt, r as i64 + dr);
                    if (dt, dr) == (0, 0) || t2 < 0 || r2 < 0 || t2 >= nth as i64 || r2 >= nrho as i64 {
                        continue;
                    }
                    let u = acc[t2 as usize * nrho + r2 as usize];
                    // strict on one side so plateaus keep a single cell
                    if u > v || (u == v && (t2, r2) < (ti as i64, r as i64)) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                peaks.push((r as i64 - diag, thetas[ti], v));
            }
        }
    }
    peaks.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.total_cmp(&b.1)));
    peaks.truncate(max_peaks);
    peaks
}

/// NCC of a binary template against a binary image in O(template rows) per
/// placement, via row prefix sums and the template's horizontal spans.
pub struct BinaryMatcher {
    width: usize,
    row_prefix: Vec<u32>,
    integral: Vec<u32>,
    spans: Vec<(usize, usize, usize)>,
    t_size: (usize, usize),
    t_count: f64,
}

impl BinaryMatcher {
    pub fn new(image: &[bool], width: usize, height: usize, template: &Frame<bool>) -> Self {
        let mut row_prefix = vec![0u32; (width + 1) * height];
        let mut integral = vec![0u32; (width + 1) * (height + 1)];
        for y in 0..height {
            for x in 0..width {
                let v = image[x + width * y] as u32;
                row_prefix[y * (width + 1) + x + 1] = row_prefix[y * (width + 1) + x] + v;
                integral[(y + 1) * (width + 1) + x + 1] =
                    integral[y * (width + 1) + x + 1] + row_prefix[y * (width + 1) + x + 1];
            }
        }
        let (tw, th) = template.shape();
        let mut spans = Vec::new();
        for y in 0..th {
            let mut x = 0;
            while x < tw {
                if template.get(x, y) {
                    let s = x;
                    while x < tw && template.get(x, y) {
                        x += 1;
                    }
                    spans.push((y, s, x));
                } else {
                    x += 1;
                }
            }
        }
        let t_count = spans.iter().map(|&(_, a, b)| (b - a) as f64).sum();
        BinaryMatcher { width, row_prefix, integral, spans, t_size: (tw, th), t_count }
    }

    pub fn ncc(&self, ox: usize, oy: usize) -> f64 {
        let w1 = self.width + 1;
        let (tw, th) = self.t_size;
        let n = (tw * th) as f64;
        let at = |x: usize, y: usize| self.integral[y * w1 + x] as f64;
        let si = at(ox + tw, oy + th) - at(ox, oy + th) - at(ox + tw, oy) + at(ox, oy);
        let sit: f64 = self
            .spans
            .iter()
            .map(|&(y, a, b)| {
                let r = (oy + y) * w1;
                (self.row_prefix[r + ox + b] - self.row_prefix[r + ox + a]) as f64
            })
            .sum();
        let st = self.t_count;
        let cov = sit - si * st / n;
        let vi = si - si * si / n;
        let vt = st - st * st / n;
        if vi <= 1e-9 || vt <= 1e-9 {
            return 0.0;
        }
        cov / (vi * vt).sqrt()
    }
}

/// Air/non-air boundary pixels: non-air pixels with a 4-neighbor air pixel.
pub fn boundary_edges(air: &[bool], width: usize, height: usize) -> Vec<bool> {
    let mut e = vec![false; air.len()];
    for y in 0..height {
        for x in 0..width {
            let i = x + width * y;
            if air[i] {
                continue;
            }
            let nb = [
                (x > 0).then(|| i - 1),
                (x + 1 < width).then(|| i + 1),
                (y > 0).then(|| i - width),
                (y + 1 < height).then(|| i + width),
            ];
            e[i] = nb.iter().flatten().any(|&j| air[j]);
        }
    }
    e
}

/// Locates the support via Hough-restricted template matching.
///
/// Near-vertical lines on the air/non-air boundary propose alignments of the
/// template's left or right edge; NCC of the template against the non-air
/// indicator image is evaluated only at those alignments.
pub fn detect_support(frame: &Frame<i16>, air: &[bool], cfg: &PreprocessConfig) -> Option<SupportDetection> {
    let template = cfg.template.as_ref()?;
    let (w, h) = frame.shape();
    let (tw, th) = template.shape();
    if tw > w || th > h {
        return None;
    }
    let fp: Vec<(usize, usize)> =
        (0..th).flat_map(|y| (0..tw).map(move |x| (x, y))).filter(|&(x, y)| template.get(x, y)).collect();
    if fp.is_empty() {
        return None;
    }
    let t_left = fp.iter().map(|p| p.0).min().unwrap();
    let t_right = fp.iter().map(|p| p.0).max().unwrap();
    let t_top = fp.iter().map(|p| p.1).min().unwrap();
    let t_bottom = fp.iter().map(|p| p.1).max().unwrap();

    let edges = boundary_edges(air, w, h);
    let peaks = hough_vertical(&edges, w, h, cfg.hough_angle_tolerance, 400);
    let edge_pts: Vec<(usize, usize)> =
        (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).filter(|&(x, y)| edges[x + w * y]).collect();
    let non_air: Vec<bool> = air.iter().map(|&a| !a).collect();
    let matcher = BinaryMatcher::new(&non_air, w, h, template);

    let mut best: Option<(f64, usize, usize)> = None;
    let mut seen = std::collections::HashSet::new();
    for (rho, theta, votes) in peaks {
        if votes < 3 {
            continue;
        }
        let t = theta.to_radians();
        let mut on_line: Vec<(usize, usize)> = edge_pts
            .iter()
            .copied()
            .filter(|&(x, y)| ((x as f64 * t.sin() - y as f64 * t.cos()).round() as i64) == rho)
            .collect();
        on_line.sort_by_key(|p| (p.1, p.0));
        for run in line_runs(&on_line) {
            if run.len() < 3 {
                continue;
            }
            let ymin = run[0].1 as i64;
            let ymax = run[run.len() - 1].1 as i64;
            let xline = (run.iter().map(|p| p.0).sum::<usize>() as f64 / run.len() as f64).round() as i64;
            let mut ox_c = Vec::new();
            for anchor in [t_left as i64, t_right as i64] {
                for d in -1..=1 {
                    ox_c.push(xline - anchor + d);
                }
            }
            let mut oy_c = Vec::new();
            for d in -1..=1 {
                oy_c.push(ymin - t_top as i64 + d);
                oy_c.push(ymax - t_bottom as i64 + d);
            }
            for &ox in &ox_c {
                for &oy in &oy_c {
                    if ox < 0 || oy < 0 || ox as usize + tw > w || oy as usize + th > h {
                        continue;
                    }
                    let (ox, oy) = (ox as usize, oy as usize);
                    if !seen.insert((ox, oy)) {
                        continue;
                    }
                    let s = matcher.ncc(ox, oy);
                    let better = match best {
                        None => true,
                        Some((b, bx, by)) => s > b || (s == b && (oy, ox) < (by, bx)),
                    };
                    if better {
                        best = Some((s, ox, oy));
                    }
                }
            }
        }
    }
    let (score, ox, oy) = best?;
    if score < cfg.match_threshold {
        return None;
    }
    let mut mask = vec![false; w * h];
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for &(tx, ty) in &fp {
        let (x, y) = (ox + tx, oy + ty);
        if !air[x + w * y] {
            mask[x + w * y] = true;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
    }
    if x0 == usize::MAX {
        return None;
    }
    Some(SupportDetection { mask, bbox: (x0, y0, x1, y1), ncc: score, offset: (ox, oy) })
}

/// Splits y-sorted line pixels into runs without vertical gaps wider than one pixel.
fn line_runs(pts: &[(usize, usize)]) -> Vec<&[(usize, usize)]> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=pts.len() {
        if i == pts.len() || pts[i].1 > pts[i - 1].1 + 2 {
            runs.push(&pts[start..i]);
            start = i;
        }
    }
    runs
}

/// 26-connected components of voxels at or above the metal threshold,
/// dropping components smaller than the configured minimum.
pub fn detect_metal(v: &Volume, cfg: &PreprocessConfig) -> Vec<Vec<usize>> {
    let mask: Vec<bool> = v.voxels().iter().map(|&h| h >= cfg.metal_threshold).collect();
    components_3d(&mask, v.dims()).into_iter().filter(|c| c.len() >= cfg.min_metal_size).collect()
}

#[derive(Clone, Debug)]
pub struct PreprocessResult {
    pub labels: LabelVolume,
    pub air_threshold: i16,
    pub support_boxes: Vec<Option<(usize, usize, usize, usize)>>,
    pub metal_components: Vec<Vec<usize>>,
}

struct FrameOutcome {
    labels: Vec<Label>,
    support_box: Option<(usize, usize, usize, usize)>,
}

fn preprocess_frame(frame: &Frame<i16>, threshold: i16, cfg: &PreprocessConfig) -> FrameOutcome {
    let air = air_mask(frame.data(), threshold);
    let exterior = flood_from_border(&air, frame.width(), frame.height(), Connectivity2::Four);
    let hollow = detect_hollow(frame, threshold, &exterior);
    let support = detect_support(frame, &air, cfg);
    let labels = (0..air.len())
        .map(|i| {
            if support.as_ref().is_some_and(|s| s.mask[i]) {
                Label::Support
            } else if exterior[i] {
                Label::ExteriorAir
            } else if hollow[i] {
                Label::Hollow
            } else {
                Label::Unknown
            }
        })
        .collect();
    FrameOutcome { labels, support_box: support.map(|s| s.bbox) }
}

/// Runs all pre-processing steps; label priority is
/// METAL > SUPPORT > EXTERIOR_AIR > HOLLOW > UNKNOWN.
pub fn run_preprocess(v: &Volume, cfg: &PreprocessConfig) -> Result<PreprocessResult> {
    cfg.validate()?;
    let threshold = choose_air_threshold(v, cfg);
    let outcomes: Vec<FrameOutcome> =
        (0..v.frame_count()).into_par_iter().map(|z| preprocess_frame(&v.axial(z), threshold, cfg)).collect();
    let mut labels = LabelVolume::like(v, Label::Unknown);
    let mut support_boxes = Vec::with_capacity(outcomes.len());
    for (z, o) in outcomes.into_iter().enumerate() {
        labels.frame_data_mut(z).copy_from_slice(&o.labels);
        support_boxes.push(o.support_box);
    }
    let metal_components = detect_metal(v, cfg);
    let lab = labels.labels_mut();
    for c in &metal_components {
        for &i in c {
            lab[i] = Label::Metal;
        }
    }
    Ok(PreprocessResult { labels, air_threshold: threshold, support_boxes, metal_components })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> PreprocessConfig {
        PreprocessConfig::default()
    }

    /// Exhaustive valley search over the smoothed histogram between the
    /// known mode locations.
    fn valley_oracle(values: &[i16], lo_mode: f64, hi_mode: f64) -> f64 {
        let h = Histogram::build(values, 10.0, 5);
        let a = ((lo_mode - h.origin) / 10.0) as usize;
        let b = ((hi_mode - h.origin) / 10.0) as usize;
        let m = h.smoothed[a..=b].iter().cloned().fold(f64::INFINITY, f64::min);
        let idx: Vec<usize> = (a..=b).filter(|&i| h.smoothed[i] == m).collect();
        h.bin_center((idx[0] + idx[idx.len() - 1]) / 2)
    }

    fn bimodal(shift: i16) -> Vec<i16> {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let air = Normal::new(-1000.0f64, 15.0).unwrap();
        let soft = Normal::new(0.0, 60.0).unwrap();
        let mut v = Vec::new();
        for _ in 0..30000 {
            v.push(air.sample(&mut rng).max(-1024.0) as i16);
        }
        for _ in 0..20000 {
            v.push(soft.sample(&mut rng) as i16);
        }
        v.into_iter().map(|x| (x + shift).max(-1024)).collect()
    }

    #[test]
    fn bimodal_threshold_in_valley() {
        let vals = bimodal(0);
        let t = air_threshold_from_values(&vals, &cfg()) as f64;
        assert!(t > -900.0 && t < -100.0, "threshold {t}");
        let oracle = valley_oracle(&vals, -1000.0, 0.0);
        assert!((t - oracle).abs() < 1.0, "threshold {t} vs oracle {oracle}");
    }

    #[test]
    fn shifted_threshold_follows_shift() {
        let t0 = air_threshold_from_values(&bimodal(0), &cfg()) as f64;
        let t1 = air_threshold_from_values(&bimodal(200), &cfg()) as f64;
        assert!((t1 - t0 - 200.0).abs() <= 10.0, "{t0} -> {t1}");
    }

    #[test]
    fn constant_volume_falls_back() {
        let v = Volume::filled([8, 8, 2], [1.0; 3], 40).unwrap();
        assert_eq!(choose_air_threshold(&v, &cfg()), -500);
    }

    #[test]
    fn exterior_examples() {
        let f = Frame::filled(6, 5, -1000i16);
        assert!(segment_exterior_air(&f, -500).iter().all(|&b| b));
        let f = Frame::filled(6, 5, 100i16);
        assert!(segment_exterior_air(&f, -500).iter().all(|&b| !b));
    }

    #[test]
    fn ring_with_pocket() {
        let (w, h) = (11, 11);
        let mut f = Frame::filled(w, h, -1000i16);
        for y in 2..9 {
            for x in 2..9 {
                f.set(x, y, 0);
            }
        }
        f.set(5, 5, -1000);
        f.set(5, 6, -1000);
        let ext = segment_exterior_air(&f, -500);
        let oracle = {
            let air: Vec<bool> = f.data().iter().map(|&v| v < -500).collect();
            // independent BFS from every border pixel
            let mut seen = vec![false; w * h];
            let mut stack: Vec<(usize, usize)> = Vec::new();
            for x in 0..w {
                stack.push((x, 0));
                stack.push((x, h - 1));
            }
            for y in 0..h {
                stack.push((0, y));
                stack.push((w - 1, y));
            }
            while let Some((x, y)) = stack.pop() {
                let i = x + w * y;
                if seen[i] || !air[i] {
                    continue;
                }
                seen[i] = true;
                if x > 0 {
                    stack.push((x - 1, y));
                }
                if x + 1 < w {
                    stack.push((x + 1, y));
                }
                if y > 0 {
                    stack.push((x, y - 1));
                }
                if y + 1 < h {
                    stack.push((x, y + 1));
                }
            }
            seen
        };
        assert_eq!(ext, oracle);
        let hollow = detect_hollow(&f, -500, &ext);
        assert_eq!(hollow.iter().filter(|&&b| b).count(), 2);
        assert!(hollow.iter().zip(&ext).all(|(&a, &b)| !(a && b)));
    }

    #[test]
    fn no_interior_air_means_no_hollow() {
        let mut f = Frame::filled(8, 8, -1000i16);
        for y in 2..6 {
            for x in 2..6 {
                f.set(x, y, 50);
            }
        }
        let ext = segment_exterior_air(&f, -500);
        assert!(detect_hollow(&f, -500, &ext).iter().all(|&b| !b));
    }

    #[test]
    fn ncc_self_is_one() {
        let t = Frame::from_vec(4, 3, vec![0.0f32, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((ncc_at(&t, &t, 0, 0) - 1.0).abs() < 1e-12);
        let flat = Frame::filled(4, 3, 1.0f32);
        assert_eq!(ncc_at(&flat, &t, 0, 0), 0.0);
    }

    #[test]
    fn fast_ncc_matches_direct() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (w, h, tw, th) = (17, 13, 6, 5);
            let img: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.5)).collect();
            let t = Frame::from_vec(tw, th, (0..tw * th).map(|_| rng.gen_bool(0.4)).collect());
            let m = BinaryMatcher::new(&img, w, h, &t);
            let fi = Frame::from_vec(w, h, img.iter().map(|&b| b as u8 as f32).collect());
            let ft = t.map(|b| b as u8 as f32);
            for oy in 0..=h - th {
                for ox in 0..=w - tw {
                    assert!((m.ncc(ox, oy) - ncc_at(&fi, &ft, ox, oy)).abs() < 1e-9);
                }
            }
        }
    }

    fn slab_template() -> Frame<bool> {
        let (w, h) = (48, 14);
        let mut t = Frame::filled(w, h, false);
        for y in 4..10 {
            for x in 4..44 {
                t.set(x, y, true);
            }
        }
        t
    }

    #[test]
    fn detects_slab_at_known_position() {
        let (w, h) = (96, 80);
        let mut f = Frame::filled(w, h, -1000i16);
        // body blob
        for y in 10..40 {
            for x in 30..60 {
                f.set(x, y, -300);
            }
        }
        // slab: 40 x 6 at (25, 55)
        for y in 55..61 {
            for x in 25..65 {
                f.set(x, y, -450);
            }
        }
        let c = cfg().with_template(slab_template());
        let air = air_mask(f.data(), -700);
        let d = detect_support(&f, &air, &c).expect("support found");
        let (x0, y0, x1, y1) = d.bbox;
        assert_eq!((x0, y0, x1, y1), (25, 55, 65, 61));
        assert!((d.ncc - 1.0).abs() < 1e-9);
        assert_eq!(d.mask.iter().filter(|&&b| b).count(), 240);
    }

    #[test]
    fn no_support_gives_none() {
        let (w, h) = (96, 80);
        let mut f = Frame::filled(w, h, -1000i16);
        for y in 10..40 {
            for x in 30..60 {
                f.set(x, y, -300);
            }
        }
        let c = cfg().with_template(slab_template());
        let air = air_mask(f.data(), -700);
        assert!(detect_support(&f, &air, &c).is_none());
    }

    #[test]
    fn metal_components_and_threshold() {
        let mut vox = vec![0i16; 10 * 10 * 4];
        let idx = |x: usize, y: usize, z: usize| x + 10 * (y + 10 * z);
        for &(x, y, z) in &[(1, 1, 1), (2, 2, 2), (1, 2, 1), (2, 1, 1), (2, 2, 1)] {
            vox[idx(x, y, z)] = 3071;
        }
        for x in 6..9 {
            for y in 6..9 {
                vox[idx(x, y, 0)] = 3000;
            }
        }
        vox[idx(9, 0, 3)] = 3071; // single voxel, dropped
        let v = Volume::new([10, 10, 4], [1.0; 3], vox.clone()).unwrap();
        let comps = detect_metal(&v, &cfg());
        assert_eq!(comps.len(), 2);
        // perturbations strictly below the threshold do not matter
        let mut vox2 = vox;
        for h in vox2.iter_mut().filter(|h| **h < 2500) {
            *h = 2499;
        }
        let v2 = Volume::new([10, 10, 4], [1.0; 3], vox2).unwrap();
        assert_eq!(detect_metal(&v2, &cfg()), comps);
        let empty = Volume::filled([4, 4, 4], [1.0; 3], 100).unwrap();
        assert!(detect_metal(&empty, &cfg()).is_empty());
    }

    #[test]
    fn all_air_volume_is_exterior() {
        let v = Volume::filled([16, 16, 3], [1.0; 3], -1000).unwrap();
        let r = run_preprocess(&v, &cfg()).unwrap();
        assert!(r.labels.labels().iter().all(|&l| l == Label::ExteriorAir));
    }

    #[test]
    fn config_validation() {
        let kv = KvConfig::parse("match_threshold=1.5").unwrap();
        assert!(PreprocessConfig::from_kv(&kv).is_err());
        let kv = KvConfig::parse("hough_angle_tolerance=20").unwrap();
        assert!(PreprocessConfig::from_kv(&kv).is_err());
        let kv = KvConfig::parse("metal_threshold=2000").unwrap();
        assert_eq!(PreprocessConfig::from_kv(&kv).unwrap().metal_threshold, 2000);
    }
}
