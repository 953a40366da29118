//! Scan and label volumes, 2-D frames, and slice windowing.
//!
//! Voxels are stored x-fastest: `index = x + nx * (y + ny * z)`. The axial
//! frame index is `z`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, SegError};

pub const HU_MIN: i16 = -1024;
pub const HU_MAX: i16 = i16::MAX;

/// Semantic class codes, matching the on-disk label byte.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Label {
    ExteriorAir = 0,
    Support = 1,
    Bandage = 2,
    Body = 3,
    Metal = 4,
    Hollow = 5,
    Unknown = 255,
}

impl Label {
    pub const ALL: [Label; 7] = [
        Label::ExteriorAir,
        Label::Support,
        Label::Bandage,
        Label::Body,
        Label::Metal,
        Label::Hollow,
        Label::Unknown,
    ];

    pub fn from_code(code: u8) -> Option<Label> {
        match code {
            0 => Some(Label::ExteriorAir),
            1 => Some(Label::Support),
            2 => Some(Label::Bandage),
            3 => Some(Label::Body),
            4 => Some(Label::Metal),
            5 => Some(Label::Hollow),
            255 => Some(Label::Unknown),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    /// Exterior reference region: outside space plus exterior objects.
    pub fn is_exterior(self) -> bool {
        matches!(self, Label::ExteriorAir | Label::Support)
    }

    /// Wrapped-body classes that later stages are allowed to relabel.
    pub fn is_wrap_or_body(self) -> bool {
        matches!(self, Label::Bandage | Label::Body)
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::ExteriorAir => "exterior_air",
            Label::Support => "support",
            Label::Bandage => "bandage",
            Label::Body => "body",
            Label::Metal => "metal",
            Label::Hollow => "hollow",
            Label::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = SegError;

    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .iter()
            .copied()
            .find(|l| l.name() == s)
            .ok_or_else(|| SegError::InvalidArgument(format!("unknown label '{s}'")))
    }
}

fn check_dims(dims: [usize; 3]) -> Result<usize> {
    if dims.contains(&0) {
        return Err(SegError::InvalidArgument(format!("dims must be positive: {dims:?}")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| SegError::InvalidArgument(format!("dims overflow: {dims:?}")))
}

/// A CT scan: radiodensity in Hounsfield units with voxel spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f32; 3],
    voxels: Vec<i16>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], voxels: Vec<i16>) -> Result<Self> {
        let n = check_dims(dims)?;
        if voxels.len() != n {
            return Err(SegError::InvalidArgument(format!(
                "voxel count {} does not match dims {dims:?}",
                voxels.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(SegError::InvalidArgument(format!("spacing must be positive: {spacing:?}")));
        }
        if let Some(v) = voxels.iter().find(|&&v| v < HU_MIN) {
            return Err(SegError::InvalidArgument(format!("HU value {v} below {HU_MIN}")));
        }
        Ok(Volume { dims, spacing, voxels })
    }

    pub fn filled(dims: [usize; 3], spacing: [f32; 3], value: i16) -> Result<Self> {
        let n = check_dims(dims)?;
        Volume::new(dims, spacing, vec![value; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<i16> {
        self.voxels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> i16 {
        self.voxels[self.index(x, y, z)]
    }

    pub fn frame_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn frame_count(&self) -> usize {
        self.dims[2]
    }

    /// Voxels of axial frame `z` as a contiguous slice.
    pub fn frame_data(&self, z: usize) -> &[i16] {
        let n = self.frame_len();
        &self.voxels[z * n..(z + 1) * n]
    }

    pub fn axial(&self, z: usize) -> Frame<i16> {
        Frame::from_vec(self.dims[0], self.dims[1], self.frame_data(z).to_vec())
    }

    pub fn slice(&self, axis: SliceAxis, index: usize) -> Result<Frame<i16>> {
        slice_generic(self.dims, &self.voxels, axis, index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::mvol::save_volume(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::mvol::load_volume(path)
    }
}

/// Per-voxel class codes paired with a [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: [usize; 3],
    spacing: [f32; 3],
    labels: Vec<Label>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], labels: Vec<Label>) -> Result<Self> {
        let n = check_dims(dims)?;
        if labels.len() != n {
            return Err(SegError::InvalidArgument(format!(
                "label count {} does not match dims {dims:?}",
                labels.len()
            )));
        }
        Ok(LabelVolume { dims, spacing, labels })
    }

    pub fn filled(dims: [usize; 3], spacing: [f32; 3], label: Label) -> Result<Self> {
        let n = check_dims(dims)?;
        Ok(LabelVolume { dims, spacing, labels: vec![label; n] })
    }

    pub fn from_codes(dims: [usize; 3], spacing: [f32; 3], codes: &[u8]) -> Result<Self> {
        let labels = codes
            .iter()
            .map(|&c| Label::from_code(c).ok_or_else(|| SegError::Format(format!("invalid label code {c}"))))
            .collect::<Result<Vec<_>>>()?;
        LabelVolume::new(dims, spacing, labels)
    }

    pub fn like(v: &Volume, label: Label) -> Self {
        LabelVolume { dims: v.dims, spacing: v.spacing, labels: vec![label; v.voxels.len()] }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [Label] {
        &mut self.labels
    }

    pub fn codes(&self) -> Vec<u8> {
        self.labels.iter().map(|l| l.code()).collect()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> Label {
        self.labels[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, l: Label) {
        let i = self.index(x, y, z);
        self.labels[i] = l;
    }

    pub fn frame_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    pub fn frame_count(&self) -> usize {
        self.dims[2]
    }

    pub fn frame_data(&self, z: usize) -> &[Label] {
        let n = self.frame_len();
        &self.labels[z * n..(z + 1) * n]
    }

    pub fn frame_data_mut(&mut self, z: usize) -> &mut [Label] {
        let n = self.frame_len();
        &mut self.labels[z * n..(z + 1) * n]
    }

    pub fn axial(&self, z: usize) -> Frame<Label> {
        Frame::from_vec(self.dims[0], self.dims[1], self.frame_data(z).to_vec())
    }

    pub fn slice(&self, axis: SliceAxis, index: usize) -> Result<Frame<Label>> {
        slice_generic(self.dims, &self.labels, axis, index)
    }

    /// Boolean mask of one class over the whole volume.
    pub fn mask(&self, class: Label) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }

    pub fn count(&self, class: Label) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn check_matches(&self, v: &Volume) -> Result<()> {
        if self.dims != v.dims {
            return Err(SegError::DimMismatch(self.dims, v.dims));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::mvol::save_labels(self, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        crate::mvol::load_labels(path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SliceAxis {
    Axial,
    Coronal,
    Sagittal,
}

impl FromStr for SliceAxis {
    type Err = SegError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(SliceAxis::Axial),
            "coronal" => Ok(SliceAxis::Coronal),
            "sagittal" => Ok(SliceAxis::Sagittal),
            other => Err(SegError::InvalidArgument(format!("unknown axis '{other}'"))),
        }
    }
}

fn slice_generic<T: Copy>(dims: [usize; 3], data: &[T], axis: SliceAxis, index: usize) -> Result<Frame<T>> {
    let [nx, ny, nz] = dims;
    let at = |x: usize, y: usize, z: usize| data[x + nx * (y + ny * z)];
    match axis {
        SliceAxis::Axial => {
            if index >= nz {
                return Err(SegError::Range { index, extent: nz });
            }
            Ok(Frame::from_vec(nx, ny, data[index * nx * ny..(index + 1) * nx * ny].to_vec()))
        }
        SliceAxis::Coronal => {
            if index >= ny {
                return Err(SegError::Range { index, extent: ny });
            }
            let mut out = Vec::with_capacity(nx * nz);
            for z in 0..nz {
                for x in 0..nx {
                    out.push(at(x, index, z));
                }
            }
            Ok(Frame::from_vec(nx, nz, out))
        }
        SliceAxis::Sagittal => {
            if index >= nx {
                return Err(SegError::Range { index, extent: nx });
            }
            let mut out = Vec::with_capacity(ny * nz);
            for z in 0..nz {
                for y in 0..ny {
                    out.push(at(index, y, z));
                }
            }
            Ok(Frame::from_vec(ny, nz, out))
        }
    }
}

/// Row-major 2-D image, `data[x + width * y]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy> Frame<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "frame buffer size mismatch");
        Frame { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Frame { width, height, data: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[x + self.width * y]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[x + self.width * y] = v;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Frame<U> {
        Frame { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Half-up rounding, used for every HU to byte conversion.
#[inline]
pub fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Linear display window: `center - width/2` maps to 0, `center + width/2` to 255.
pub fn window_value(hu: i16, center: f64, width: f64) -> u8 {
    let lo = center - width / 2.0;
    let t = 255.0 * (hu as f64 - lo) / width;
    round_half_up(t).clamp(0.0, 255.0) as u8
}

pub fn window_to_image(slice: &Frame<i16>, center: f64, width: f64) -> Result<Frame<u8>> {
    if !(width > 0.0) || !width.is_finite() {
        return Err(SegError::InvalidArgument(format!("window width must be positive, got {width}")));
    }
    Ok(slice.map(|hu| window_value(hu, center, width)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Volume {
        let n = dims.iter().product::<usize>();
        Volume::new(dims, [1.0; 3], (0..n as i16).collect()).unwrap()
    }

    #[test]
    fn axial_slice_matches_voxels() {
        let v = ramp([3, 4, 5]);
        let s = v.slice(SliceAxis::Axial, 2).unwrap();
        assert_eq!(s.shape(), (3, 4));
        for y in 0..4 {
            for x in 0..3 {
                assert_eq!(s.get(x, y), v.get(x, y, 2));
            }
        }
    }

    #[test]
    fn slice_shapes() {
        let v = ramp([3, 4, 5]);
        assert_eq!(v.slice(SliceAxis::Sagittal, 1).unwrap().shape(), (4, 5));
        assert_eq!(v.slice(SliceAxis::Coronal, 1).unwrap().shape(), (3, 5));
        let c = v.slice(SliceAxis::Coronal, 3).unwrap();
        assert_eq!(c.get(2, 4), v.get(2, 3, 4));
    }

    #[test]
    fn slice_out_of_range() {
        let v = ramp([3, 4, 5]);
        assert!(matches!(v.slice(SliceAxis::Axial, 5), Err(SegError::Range { index: 5, extent: 5 })));
        assert!(v.slice(SliceAxis::Sagittal, 3).is_err());
    }

    #[test]
    fn air_plane_slice() {
        let mut vox = vec![0i16; 2 * 2 * 2];
        vox[..4].fill(-1000);
        let v = Volume::new([2, 2, 2], [1.0; 3], vox).unwrap();
        assert!(v.slice(SliceAxis::Axial, 0).unwrap().data().iter().all(|&h| h == -1000));
    }

    #[test]
    fn window_examples() {
        assert_eq!(window_value(40, 40.0, 400.0), 128);
        assert_eq!(window_value(40 - 400, 40.0, 400.0), 0);
        assert_eq!(window_value(500, 0.0, 2000.0), 191);
        assert_eq!(window_value(-1000, 0.0, 2000.0), 0);
        assert_eq!(window_value(1000, 0.0, 2000.0), 255);
        let f = Frame::filled(2, 2, 0i16);
        assert!(window_to_image(&f, 0.0, 0.0).is_err());
        assert!(window_to_image(&f, 0.0, -5.0).is_err());
    }

    #[test]
    fn window_monotone_and_saturating() {
        let (c, w) = (-200.0, 700.0);
        let mut prev = 0u8;
        for hu in -1024i16..=2000 {
            let b = window_value(hu, c, w);
            assert!(b >= prev);
            prev = b;
            if (hu as f64) <= c - w / 2.0 {
                assert_eq!(b, 0);
            }
            if (hu as f64) >= c + w / 2.0 {
                assert_eq!(b, 255);
            }
        }
    }

    #[test]
    fn volume_validation() {
        assert!(Volume::new([2, 2, 1], [1.0; 3], vec![0; 3]).is_err());
        assert!(Volume::new([2, 2, 1], [0.0, 1.0, 1.0], vec![0; 4]).is_err());
        assert!(Volume::new([2, 2, 1], [1.0; 3], vec![-2000; 4]).is_err());
        assert!(Volume::new([0, 2, 1], [1.0; 3], vec![]).is_err());
    }

    #[test]
    fn label_codes_roundtrip() {
        for l in Label::ALL {
            assert_eq!(Label::from_code(l.code()), Some(l));
            assert_eq!(l.name().parse::<Label>().unwrap(), l);
        }
        assert_eq!(Label::from_code(6), None);
    }
}
