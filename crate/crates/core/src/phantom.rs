//! Seeded procedural phantom: a wrapped body lying on a support, with exact
//! ground-truth labels.
//!
//! The body is a chain of tapered elliptical segments (legs, torso, neck,
//! head), each with a bone core. A bandage shell encloses the body; an
//! interior hollow gap separates body and bandage over part of the volume.
//! Metal discs sit on the body surface and emit streak artifacts in their
//! frames.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, SegError};
use crate::volume::{Label, LabelVolume, Volume, HU_MIN};

pub const MIN_AXIS: usize = 32;

/// HU palette: base value and spread of the smooth per-class field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HuRange {
    pub base: f64,
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    pub air: HuRange,
    pub bandage: HuRange,
    pub tissue: HuRange,
    pub bone: HuRange,
    pub support: HuRange,
    pub metal: f64,
}

impl Default for Palette {
    fn default() -> Self {
        Palette {
            air: HuRange { base: -1000.0, spread: 0.0 },
            bandage: HuRange { base: -350.0, spread: 80.0 },
            tissue: HuRange { base: -50.0, spread: 60.0 },
            bone: HuRange { base: 700.0, spread: 200.0 },
            support: HuRange { base: -450.0, spread: 50.0 },
            metal: 3071.0,
        }
    }
}

/// One tapered elliptical body segment over a fractional z-range.
///
/// Offsets and radii are in voxels for a 256-wide frame and scale with `nx`.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub t0: f64,
    pub t1: f64,
    pub offset0: (f64, f64),
    pub offset1: (f64, f64),
    pub radii0: (f64, f64),
    pub radii1: (f64, f64),
    pub bone_offset: (f64, f64),
    pub bone_radius0: f64,
    pub bone_radius1: f64,
}

impl Segment {
    fn at(&self, t: f64) -> Option<Lobe> {
        if t < self.t0 || t >= self.t1 {
            return None;
        }
        let u = (t - self.t0) / (self.t1 - self.t0);
        let lerp = |a: f64, b: f64| a + (b - a) * u;
        Some(Lobe {
            cx: lerp(self.offset0.0, self.offset1.0),
            cy: lerp(self.offset0.1, self.offset1.1),
            rx: lerp(self.radii0.0, self.radii1.0),
            ry: lerp(self.radii0.1, self.radii1.1),
            bone_dx: self.bone_offset.0,
            bone_dy: self.bone_offset.1,
            bone_r: lerp(self.bone_radius0, self.bone_radius1),
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct Lobe {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    bone_dx: f64,
    bone_dy: f64,
    bone_r: f64,
}

impl Lobe {
    fn scaled(&self, s: f64) -> Lobe {
        Lobe {
            cx: self.cx * s,
            cy: self.cy * s,
            rx: self.rx * s,
            ry: self.ry * s,
            bone_dx: self.bone_dx * s,
            bone_dy: self.bone_dy * s,
            bone_r: self.bone_r * s,
        }
    }

    /// Normalized elliptic radius of (x, y) for radii grown by `grow`.
    #[inline]
    fn rho(&self, x: f64, y: f64, grow: f64) -> f64 {
        let dx = (x - self.cx) / (self.rx + grow);
        let dy = (y - self.cy) / (self.ry + grow);
        dx * dx + dy * dy
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SupportShape {
    None,
    Slab,
    Cradle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportSpec {
    pub shape: SupportShape,
    /// Width in voxels (at 256 wide).
    pub width: f64,
    pub thickness: f64,
    /// Cradle wall height above the slab.
    pub wall_height: f64,
    pub wall_width: f64,
    /// Air gap between the wrapped body and the support.
    pub clearance: f64,
}

impl Default for SupportSpec {
    fn default() -> Self {
        SupportSpec { shape: SupportShape::Slab, width: 200.0, thickness: 10.0, wall_height: 30.0, wall_width: 6.0, clearance: 4.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub body: Vec<Segment>,
    /// Bandage shell thickness range in voxels.
    pub bandage_thickness: (f64, f64),
    /// Probability that a block of frames has a hollow gap around the body.
    pub hollow_prob: f64,
    pub hollow_block: usize,
    /// Hollow gap width range in voxels.
    pub hollow_width: (f64, f64),
    /// Half-angle of the posterior body/bandage contact sector, degrees.
    pub hollow_contact_deg: f64,
    pub metal_count: usize,
    pub metal_radius: (f64, f64),
    pub support: SupportSpec,
    /// Peak streak amplitude around metal discs, HU.
    pub streak_amplitude: f64,
    pub streak_decay: f64,
    pub noise_sigma: f64,
    /// Tissue-density lumps embedded in the bandage (ground truth bandage).
    pub distractors: usize,
    pub palette: Palette,
}

pub fn default_body() -> Vec<Segment> {
    let leg = |side: f64| Segment {
        t0: 0.0,
        t1: 0.42,
        offset0: (side * 20.0, 0.0),
        offset1: (side * 24.0, 0.0),
        radii0: (13.0, 12.0),
        radii1: (21.0, 18.0),
        bone_offset: (0.0, 0.0),
        bone_radius0: 4.0,
        bone_radius1: 6.5,
    };
    vec![
        leg(-1.0),
        leg(1.0),
        Segment {
            t0: 0.40,
            t1: 0.80,
            offset0: (0.0, 0.0),
            offset1: (0.0, 0.0),
            radii0: (46.0, 26.0),
            radii1: (56.0, 32.0),
            bone_offset: (0.0, 14.0),
            bone_radius0: 7.0,
            bone_radius1: 8.0,
        },
        Segment {
            t0: 0.80,
            t1: 0.86,
            offset0: (0.0, 2.0),
            offset1: (0.0, 2.0),
            radii0: (22.0, 19.0),
            radii1: (19.0, 17.0),
            bone_offset: (0.0, 5.0),
            bone_radius0: 6.0,
            bone_radius1: 6.0,
        },
        Segment {
            t0: 0.86,
            t1: 1.0,
            offset0: (0.0, 0.0),
            offset1: (0.0, 0.0),
            radii0: (32.0, 30.0),
            radii1: (24.0, 22.0),
            bone_offset: (0.0, 0.0),
            bone_radius0: 13.0,
            bone_radius1: 9.0,
        },
    ]
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            seed: 1,
            dims: [256, 256, 120],
            spacing: [0.8, 0.8, 1.5],
            body: default_body(),
            bandage_thickness: (6.0, 12.0),
            hollow_prob: 0.95,
            hollow_block: 10,
            hollow_width: (4.0, 7.0),
            hollow_contact_deg: 0.0,
            metal_count: 3,
            metal_radius: (3.0, 4.5),
            support: SupportSpec::default(),
            streak_amplitude: 800.0,
            streak_decay: 10.0,
            noise_sigma: 20.0,
            distractors: 0,
            palette: Palette::default(),
        }
    }
}

impl PhantomSpec {
    /// Same geometry with no noise and no streaks.
    pub fn noiseless(mut self) -> Self {
        self.noise_sigma = 0.0;
        self.streak_amplitude = 0.0;
        self
    }

    /// Variant with spurious tissue-density lumps inside the bandage.
    pub fn with_distractors(mut self, n: usize) -> Self {
        self.distractors = n;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < MIN_AXIS) {
            return Err(SegError::InvalidArgument(format!(
                "phantom dims {:?} too small: need at least {MIN_AXIS} voxels per axis",
                self.dims
            )));
        }
        let (a, b) = self.bandage_thickness;
        if !(a >= 1.0 && b >= a) {
            return Err(SegError::InvalidArgument(format!("bad bandage thickness range {a}..{b}")));
        }
        let (a, b) = self.hollow_width;
        if !(a >= 0.0 && b >= a) {
            return Err(SegError::InvalidArgument(format!("bad hollow width range {a}..{b}")));
        }
        if !(0.0..=1.0).contains(&self.hollow_prob) {
            return Err(SegError::InvalidArgument("hollow_prob must lie in [0,1]".into()));
        }
        if self.hollow_block == 0 {
            return Err(SegError::InvalidArgument("hollow_block must be positive".into()));
        }
        if self.noise_sigma < 0.0 || self.streak_amplitude < 0.0 {
            return Err(SegError::InvalidArgument("noise and streak amplitude must be non-negative".into()));
        }
        if self.body.is_empty() {
            return Err(SegError::InvalidArgument("body chain is empty".into()));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.dims[0].min(self.dims[1]) as f64 / 256.0
    }
}

/// Low-frequency field in [-1, 1] made of a few random plane waves.
struct SmoothField {
    waves: Vec<([f64; 3], f64, f64)>,
    norm: f64,
}

impl SmoothField {
    fn new(rng: &mut ChaCha8Rng, n: usize, period: (f64, f64)) -> Self {
        let waves: Vec<_> = (0..n)
            .map(|_| {
                let theta = rng.gen_range(0.0..2.0 * PI);
                let tilt = rng.gen_range(-0.5..0.5f64);
                let k = 2.0 * PI / rng.gen_range(period.0..period.1);
                let dir = [theta.cos() * k, theta.sin() * k, tilt * k];
                let amp = rng.gen_range(0.5..1.0);
                (dir, rng.gen_range(0.0..2.0 * PI), amp)
            })
            .collect();
        let norm = waves.iter().map(|w| w.2).sum::<f64>().max(1e-9);
        SmoothField { waves, norm }
    }

    #[inline]
    fn eval(&self, x: f64, y: f64, z: f64) -> f64 {
        self.waves.iter().map(|(k, ph, a)| a * (k[0] * x + k[1] * y + k[2] * z + ph).sin()).sum::<f64>() / self.norm
    }
}

#[derive(Clone, Debug)]
pub struct MetalDisc {
    pub center: (f64, f64, f64),
    pub radius: f64,
    pub half_thickness: usize,
}

#[derive(Clone, Debug)]
pub struct Distractor {
    pub center: (f64, f64),
    /// First frame; the lump spans `depth` frames from here.
    pub z: usize,
    pub depth: usize,
    pub radius: f64,
}

/// Geometry of the generated phantom, exposed for tests and ground-truth checks.
#[derive(Clone, Debug)]
pub struct PhantomLayout {
    pub metal: Vec<MetalDisc>,
    pub distractors: Vec<Distractor>,
    /// Support bounding box per frame: (x0, y0, x1, y1), exclusive max.
    pub support_box: Option<(usize, usize, usize, usize)>,
    /// Per frame: whether a hollow gap is present.
    pub hollow_frames: Vec<bool>,
    pub center_x: f64,
    pub base_y: f64,
}

pub struct Phantom {
    pub volume: Volume,
    pub truth: LabelVolume,
    pub layout: PhantomLayout,
}

struct FrameGeom {
    lobes: Vec<Lobe>,
    thickness: f64,
    gap: Option<f64>,
}

fn frame_geometry(spec: &PhantomSpec, z: usize, thick: &SmoothField, gaps: &[Option<f64>], center_x: f64, base_y: f64) -> FrameGeom {
    let s = spec.scale();
    let t = (z as f64 + 0.5) / spec.dims[2] as f64;
    let lobes: Vec<Lobe> = spec.body.iter().filter_map(|seg| seg.at(t)).map(|l| l.scaled(s)).collect();
    let (tmin, tmax) = spec.bandage_thickness;
    let u = 0.5 * (thick.eval(0.0, 0.0, z as f64) + 1.0);
    let thickness = (tmin + (tmax - tmin) * u) * s.max(0.25);
    let gap = gaps[z / spec.hollow_block].map(|g| g * s.max(0.25));
    let g = gap.unwrap_or(0.0);
    let bottom = lobes.iter().map(|l| l.cy + l.ry + g + thickness).fold(f64::MIN, f64::max);
    let mut lobes = lobes;
    for l in &mut lobes {
        l.cx += center_x;
    }
    let dy = base_y - bottom;
    for l in &mut lobes {
        l.cy += dy;
    }
    FrameGeom { lobes, thickness, gap }
}

fn in_contact_sector(l: &Lobe, x: f64, y: f64, half_deg: f64) -> bool {
    if half_deg <= 0.0 {
        return false;
    }
    let ang = (y - l.cy).atan2(x - l.cx).to_degrees();
    (ang - 90.0).abs() <= half_deg
}

type MaskBox = (Vec<bool>, (usize, usize, usize, usize));

fn support_mask(spec: &PhantomSpec, center_x: f64, base_y: f64) -> Option<MaskBox> {
    let sup = &spec.support;
    if sup.shape == SupportShape::None {
        return None;
    }
    let s = spec.scale();
    let (nx, ny) = (spec.dims[0], spec.dims[1]);
    let top = (base_y + sup.clearance * s).ceil() as isize;
    let th = (sup.thickness * s).round().max(2.0) as isize;
    let half_w = (sup.width * s / 2.0).round() as isize;
    let x0 = center_x.round() as isize - half_w;
    let x1 = center_x.round() as isize + half_w;
    let mut mask = vec![false; nx * ny];
    let mut set = |x: isize, y: isize| {
        if x >= 0 && y >= 0 && (x as usize) < nx && (y as usize) < ny {
            mask[x as usize + nx * y as usize] = true;
        }
    };
    for y in top..top + th {
        for x in x0..x1 {
            set(x, y);
        }
    }
    let mut ymin = top;
    if sup.shape == SupportShape::Cradle {
        let wh = (sup.wall_height * s).round() as isize;
        let ww = (sup.wall_width * s).round().max(2.0) as isize;
        ymin = top - wh;
        for y in top - wh..top {
            for x in x0..x0 + ww {
                set(x, y);
            }
            for x in x1 - ww..x1 {
                set(x, y);
            }
        }
    }
    let clip = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
    let bbox = (clip(x0, nx), clip(ymin, ny), clip(x1, nx), clip(top + th, ny));
    Some((mask, bbox))
}

/// Binary support template (SUPPORT on EXTERIOR_AIR) with a 4-voxel margin,
/// as a single-frame label volume.
pub fn support_template(spec: &PhantomSpec) -> Option<LabelVolume> {
    let (center_x, base_y) = placement(spec);
    let (mask, (x0, y0, x1, y1)) = support_mask(spec, center_x, base_y)?;
    let nx = spec.dims[0];
    let m = 4usize;
    let (w, h) = (x1 - x0 + 2 * m, y1 - y0 + 2 * m);
    let mut labels = vec![Label::ExteriorAir; w * h];
    for y in y0..y1 {
        for x in x0..x1 {
            if mask[x + nx * y] {
                labels[(x - x0 + m) + w * (y - y0 + m)] = Label::Support;
            }
        }
    }
    LabelVolume::new([w, h, 1], [spec.spacing[0], spec.spacing[1], 1.0], labels).ok()
}

fn placement(spec: &PhantomSpec) -> (f64, f64) {
    let s = spec.scale();
    let center_x = spec.dims[0] as f64 / 2.0;
    let reserve = match spec.support.shape {
        SupportShape::None => 0.0,
        _ => spec.support.clearance + spec.support.thickness + 4.0,
    };
    let base_y = spec.dims[1] as f64 - (reserve + 30.0) * s;
    (center_x, base_y)
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelVolume)> {
    generate(spec).map(|p| (p.volume, p.truth))
}

pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let [nx, ny, nz] = spec.dims;
    let s = spec.scale();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let thick_field = SmoothField::new(&mut rng, 3, (30.0, 90.0));
    let blocks = nz.div_ceil(spec.hollow_block);
    let gaps: Vec<Option<f64>> = (0..blocks)
        .map(|_| {
            let present = rng.gen_bool(spec.hollow_prob);
            let w = rng.gen_range(spec.hollow_width.0..=spec.hollow_width.1);
            (present && w > 0.0).then_some(w)
        })
        .collect();
    let fields = [
        SmoothField::new(&mut rng, 4, (40.0, 120.0)),
        SmoothField::new(&mut rng, 4, (40.0, 120.0)),
        SmoothField::new(&mut rng, 4, (40.0, 120.0)),
        SmoothField::new(&mut rng, 4, (40.0, 120.0)),
    ];
    let (center_x, base_y) = placement(spec);
    let geoms: Vec<FrameGeom> = (0..nz).map(|z| frame_geometry(spec, z, &thick_field, &gaps, center_x, base_y)).collect();

    let support = support_mask(spec, center_x, base_y);

    // Metal discs on the anterior body surface, pairwise separated.
    let mut metal: Vec<MetalDisc> = Vec::new();
    let mut attempts = 0;
    while metal.len() < spec.metal_count && attempts < 10_000 {
        attempts += 1;
        let z = rng.gen_range((nz / 10).max(1)..(nz - nz / 10).max(2).min(nz - 1));
        let g = &geoms[z];
        if g.lobes.is_empty() {
            continue;
        }
        let l = g.lobes[rng.gen_range(0..g.lobes.len())];
        let ang = rng.gen_range(-150.0f64..-30.0).to_radians();
        let (cx, cy) = (l.cx + l.rx * ang.cos(), l.cy + l.ry * ang.sin());
        let radius = rng.gen_range(spec.metal_radius.0..=spec.metal_radius.1) * s.max(0.5);
        let half_thickness = rng.gen_range(0..=1usize);
        let ok = metal.iter().all(|m| {
            let d = ((m.center.0 - cx).powi(2) + (m.center.1 - cy).powi(2)).sqrt();
            let dz = (m.center.2 - z as f64).abs();
            d > m.radius + radius + 3.0 || dz > (m.half_thickness + half_thickness) as f64 + 2.0
        });
        if ok {
            metal.push(MetalDisc { center: (cx, cy, z as f64), radius, half_thickness });
        }
    }

    // Distractor lumps, placed mid-shell in frames with a single lobe and
    // extruded along z for a few frames.
    let mut distractors = Vec::new();
    let mut attempts = 0;
    while distractors.len() < spec.distractors && attempts < 10_000 {
        attempts += 1;
        let z = rng.gen_range(1..nz - 1);
        let g = &geoms[z];
        if g.lobes.len() != 1 {
            continue;
        }
        let l = g.lobes[0];
        let gap = g.gap.unwrap_or(0.0);
        let radius = ((g.thickness - 4.0) / 2.0).clamp(1.5, 5.0);
        if g.thickness < 2.0 * radius + 4.0 {
            continue;
        }
        let ang = rng.gen_range(-160.0f64..-20.0).to_radians();
        let mid = gap + g.thickness / 2.0;
        let (cx, cy) = (l.cx + (l.rx + mid) * ang.cos(), l.cy + (l.ry + mid) * ang.sin());
        let depth = rng.gen_range(4..=8usize).min(nz - z);
        let clash = metal.iter().any(|m| m.center.2 > z as f64 - 3.0 && m.center.2 < (z + depth) as f64 + 3.0);
        if !clash {
            distractors.push(Distractor { center: (cx, cy), z, depth, radius });
        }
    }

    let mut labels = vec![Label::ExteriorAir; nx * ny * nz];
    let mut is_bone = vec![false; nx * ny * nz];
    for z in 0..nz {
        let g = &geoms[z];
        let gap = g.gap.unwrap_or(0.0);
        let off = z * nx * ny;
        for y in 0..ny {
            for x in 0..nx {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let i = off + x + nx * y;
                let mut lab = Label::ExteriorAir;
                let mut inside_body = false;
                for l in &g.lobes {
                    if l.rho(fx, fy, 0.0) <= 1.0 {
                        inside_body = true;
                        let (bx, by) = (l.cx + l.bone_dx, l.cy + l.bone_dy);
                        if (fx - bx).powi(2) + (fy - by).powi(2) <= l.bone_r * l.bone_r {
                            is_bone[i] = true;
                        }
                    }
                }
                if inside_body {
                    lab = Label::Body;
                } else {
                    let in_gap = gap > 0.0
                        && g.lobes
                            .iter()
                            .any(|l| l.rho(fx, fy, gap) <= 1.0 && !in_contact_sector(l, fx, fy, spec.hollow_contact_deg));
                    let in_shell = g.lobes.iter().any(|l| l.rho(fx, fy, gap + g.thickness) <= 1.0);
                    if in_gap {
                        lab = Label::Hollow;
                    } else if in_shell {
                        lab = Label::Bandage;
                    } else if let Some((m, _)) = &support {
                        if m[x + nx * y] {
                            lab = Label::Support;
                        }
                    }
                }
                labels[i] = lab;
            }
        }
    }

    for m in &metal {
        let zc = m.center.2 as usize;
        let z0 = zc.saturating_sub(m.half_thickness);
        let z1 = (zc + m.half_thickness).min(nz - 1);
        for z in z0..=z1 {
            for y in 0..ny {
                for x in 0..nx {
                    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                    if (fx - m.center.0).powi(2) + (fy - m.center.1).powi(2) <= m.radius * m.radius {
                        let i = x + nx * (y + ny * z);
                        labels[i] = Label::Metal;
                        is_bone[i] = false;
                    }
                }
            }
        }
    }

    let mut is_lump = vec![false; nx * ny * nz];
    for d in &distractors {
        for z in d.z..d.z + d.depth {
            for y in 0..ny {
                for x in 0..nx {
                    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                    if (fx - d.center.0).powi(2) + (fy - d.center.1).powi(2) <= d.radius * d.radius {
                        let i = x + nx * (y + ny * z);
                        if labels[i] == Label::Bandage {
                            is_lump[i] = true;
                        }
                    }
                }
            }
        }
    }

    // Radiodensity.
    let pal = &spec.palette;
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| SegError::InvalidArgument(e.to_string()))?;
    let mut voxels = vec![0i16; nx * ny * nz];
    for z in 0..nz {
        let metal_here: Vec<&MetalDisc> = metal
            .iter()
            .filter(|m| {
                let zc = m.center.2 as usize;
                z + m.half_thickness >= zc && z <= zc + m.half_thickness
            })
            .collect();
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                let (fx, fy, fz) = (x as f64, y as f64, z as f64);
                let field = |r: &HuRange, f: &SmoothField| r.base + r.spread * f.eval(fx, fy, fz);
                let mut hu = match labels[i] {
                    Label::ExteriorAir | Label::Hollow => pal.air.base,
                    Label::Support => field(&pal.support, &fields[3]),
                    Label::Bandage if is_lump[i] => field(&pal.tissue, &fields[1]),
                    Label::Bandage => field(&pal.bandage, &fields[0]),
                    Label::Body if is_bone[i] => field(&pal.bone, &fields[2]),
                    Label::Body => field(&pal.tissue, &fields[1]),
                    Label::Metal => pal.metal,
                    Label::Unknown => pal.air.base,
                };
                if spec.noise_sigma > 0.0 && labels[i] != Label::Metal {
                    hu += noise.sample(&mut rng);
                }
                if spec.streak_amplitude > 0.0 && !matches!(labels[i], Label::Metal | Label::ExteriorAir | Label::Support) {
                    for m in &metal_here {
                        let (dx, dy) = (fx + 0.5 - m.center.0, fy + 0.5 - m.center.1);
                        let r = (dx * dx + dy * dy).sqrt();
                        let phi = dy.atan2(dx);
                        hu += spec.streak_amplitude * (-r / spec.streak_decay).exp() * (8.0 * phi).sin();
                    }
                }
                let hu = hu.round().clamp(HU_MIN as f64, pal.metal.max(3071.0));
                voxels[i] = hu as i16;
            }
        }
    }

    let volume = Volume::new(spec.dims, spec.spacing, voxels)?;
    let truth = LabelVolume::new(spec.dims, spec.spacing, labels)?;
    let hollow_frames = (0..nz).map(|z| geoms[z].gap.is_some()).collect();
    Ok(Phantom {
        volume,
        truth,
        layout: PhantomLayout {
            metal,
            distractors,
            support_box: support.map(|s| s.1),
            hollow_frames,
            center_x,
            base_y,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::components::{components_3d, flood_from_border, Connectivity2};

    fn small_spec() -> PhantomSpec {
        PhantomSpec { dims: [128, 128, 40], ..PhantomSpec::default() }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = small_spec();
        let (a, la) = generate_phantom(&spec).unwrap();
        let (b, lb) = generate_phantom(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let (c, _) = generate_phantom(&PhantomSpec { seed: 2, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_small_rejected() {
        let spec = PhantomSpec { dims: [31, 64, 64], ..PhantomSpec::default() };
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn bandage_closes_around_body() {
        let (_, truth) = generate_phantom(&small_spec()).unwrap();
        let [nx, ny, nz] = truth.dims();
        for z in 0..nz {
            let f = truth.frame_data(z);
            let air: Vec<bool> = f.iter().map(|l| matches!(l, Label::ExteriorAir | Label::Hollow)).collect();
            let reach = flood_from_border(&air, nx, ny, Connectivity2::Four);
            for y in 1..ny - 1 {
                for x in 1..nx - 1 {
                    let i = x + nx * y;
                    assert!(!(reach[i] && f[i] == Label::Hollow), "frame {z}: hollow open to exterior");
                    if f[i] == Label::Body {
                        for j in [i - 1, i + 1, i - nx, i + nx] {
                            assert!(!reach[j], "frame {z}: exterior air reaches body");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn metal_count_matches() {
        let spec = PhantomSpec { metal_count: 3, ..small_spec() };
        let p = generate(&spec).unwrap();
        let mask = p.truth.mask(Label::Metal);
        assert_eq!(components_3d(&mask, p.truth.dims()).len(), 3);
    }

    #[test]
    fn support_touches_only_exterior_air() {
        let (_, truth) = generate_phantom(&small_spec()).unwrap();
        let [nx, ny, nz] = truth.dims();
        for z in 0..nz {
            for y in 1..ny - 1 {
                for x in 1..nx - 1 {
                    if truth.get(x, y, z) == Label::Support {
                        for (a, b) in [(x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)] {
                            let l = truth.get(a, b, z);
                            assert!(matches!(l, Label::Support | Label::ExteriorAir));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn template_matches_support_shape() {
        let spec = small_spec();
        let t = support_template(&spec).unwrap();
        let sup = t.count(Label::Support);
        let (_, truth) = generate_phantom(&spec).unwrap();
        let in_frame = truth.frame_data(0).iter().filter(|&&l| l == Label::Support).count();
        assert_eq!(sup, in_frame);
    }
}
