//! Grid and label data model with physical voxel geometry, plus file I/O.
//!
//! All arrays are stored row-major over the axis order (x, y, z): the last
//! axis varies fastest, so voxel `(x, y, z)` lives at `(x * ny + y) * nz + z`.
//! Multi-channel grids store each channel as a contiguous block, channel 0
//! first.

mod dtype;
pub mod nifti;
pub mod simplevol;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dtype::Dtype;

/// Voxel counts and voxel spacing (mm) for a 2D or 3D grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGeometry", into = "RawGeometry")]
pub struct VoxelGeometry {
    dims: Vec<usize>,
    voxel_size: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawGeometry {
    dims: Vec<usize>,
    voxel_size: Vec<f64>,
}

impl TryFrom<RawGeometry> for VoxelGeometry {
    type Error = Error;

    fn try_from(raw: RawGeometry) -> Result<Self> {
        VoxelGeometry::new(raw.dims, raw.voxel_size)
    }
}

impl From<VoxelGeometry> for RawGeometry {
    fn from(g: VoxelGeometry) -> Self {
        RawGeometry {
            dims: g.dims,
            voxel_size: g.voxel_size,
        }
    }
}

impl VoxelGeometry {
    pub fn new(dims: Vec<usize>, voxel_size: Vec<f64>) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) {
            return Err(Error::InvalidGeometry(format!(
                "expected 2 or 3 axes, got {}",
                dims.len()
            )));
        }
        if dims.len() != voxel_size.len() {
            return Err(Error::InvalidGeometry(format!(
                "{} dims but {} voxel sizes",
                dims.len(),
                voxel_size.len()
            )));
        }
        if let Some(d) = dims.iter().find(|&&d| d == 0) {
            return Err(Error::InvalidGeometry(format!("dimension {d} must be >= 1")));
        }
        if let Some(v) = voxel_size.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidGeometry(format!(
                "voxel size {v} must be positive and finite"
            )));
        }
        Ok(VoxelGeometry { dims, voxel_size })
    }

    pub fn isotropic(dims: &[usize], voxel_mm: f64) -> Result<Self> {
        Self::new(dims.to_vec(), vec![voxel_mm; dims.len()])
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn voxel_size(&self) -> &[f64] {
        &self.voxel_size
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Volume of one voxel in mm³ (mm² for 2D grids).
    pub fn voxel_volume(&self) -> f64 {
        self.voxel_size.iter().product()
    }

    /// Physical extent per axis, `dims × voxel_size`.
    pub fn extent(&self) -> Vec<f64> {
        self.dims
            .iter()
            .zip(&self.voxel_size)
            .map(|(&d, &v)| d as f64 * v)
            .collect()
    }

    /// Total physical volume (area in 2D) of the field of view.
    pub fn physical_volume(&self) -> f64 {
        self.num_voxels() as f64 * self.voxel_volume()
    }

    pub fn linear_index(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.ndim());
        coords
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&c, &d)| acc * d + c)
    }

    pub(crate) fn dims3(&self) -> [usize; 3] {
        let mut out = [1; 3];
        out[..self.ndim()].copy_from_slice(&self.dims);
        out
    }

    pub(crate) fn voxel_size3(&self) -> [f64; 3] {
        let mut out = [1.0; 3];
        out[..self.ndim()].copy_from_slice(&self.voxel_size);
        out
    }

    /// Same axis count, voxel counts and spacing (spacing within 1e-9 mm).
    pub fn same_as(&self, other: &VoxelGeometry) -> bool {
        self.dims == other.dims
            && self
                .voxel_size
                .iter()
                .zip(&other.voxel_size)
                .all(|(a, b)| (a - b).abs() <= 1e-9)
    }

    pub(crate) fn ensure_same(&self, other: &VoxelGeometry) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{:?} @ {:?} mm vs {:?} @ {:?} mm",
                self.dims, self.voxel_size, other.dims, other.voxel_size
            )))
        }
    }
}

/// Real-valued intensity image or feature stack.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    geometry: VoxelGeometry,
    channels: usize,
    data: Vec<f64>,
}

impl VoxelGrid {
    pub fn new(geometry: VoxelGeometry, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidGeometry("channel count must be >= 1".into()));
        }
        let expected = geometry.num_voxels() * channels;
        if data.len() != expected {
            return Err(Error::DataLength {
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(VoxelGrid {
            geometry,
            channels,
            data,
        })
    }

    pub fn filled(geometry: VoxelGeometry, value: f64) -> Result<Self> {
        let n = geometry.num_voxels();
        Self::new(geometry, 1, vec![value; n])
    }

    /// Builds a single-channel grid by evaluating `f` at every voxel index.
    pub fn from_fn(geometry: VoxelGeometry, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(geometry.num_voxels());
        for_each_index(geometry.dims(), |idx| data.push(f(idx)));
        Self::new(geometry, 1, data)
    }

    pub fn geometry(&self) -> &VoxelGeometry {
        &self.geometry
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.geometry.num_voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Hard segmentation: one non-negative label id per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    geometry: VoxelGeometry,
    labels: Vec<u32>,
    label_table: BTreeMap<u32, String>,
}

pub const BACKGROUND: u32 = 0;

impl LabelMap {
    /// Label 0 is always present in the table as background.
    pub fn new(
        geometry: VoxelGeometry,
        labels: Vec<u32>,
        mut label_table: BTreeMap<u32, String>,
    ) -> Result<Self> {
        let expected = geometry.num_voxels();
        if labels.len() != expected {
            return Err(Error::DataLength {
                expected,
                actual: labels.len(),
            });
        }
        label_table
            .entry(BACKGROUND)
            .or_insert_with(|| "background".to_string());
        if let Some(&l) = labels.iter().find(|l| !label_table.contains_key(l)) {
            return Err(Error::UnknownLabel(l));
        }
        Ok(LabelMap {
            geometry,
            labels,
            label_table,
        })
    }

    /// Builds a map whose table holds exactly the labels that occur (plus
    /// background), named `label_<id>`.
    pub fn from_labels(geometry: VoxelGeometry, labels: Vec<u32>) -> Result<Self> {
        let table = default_table(&labels);
        Self::new(geometry, labels, table)
    }

    pub fn from_fn(geometry: VoxelGeometry, mut f: impl FnMut(&[usize]) -> u32) -> Result<Self> {
        let mut labels = Vec::with_capacity(geometry.num_voxels());
        for_each_index(geometry.dims(), |idx| labels.push(f(idx)));
        Self::from_labels(geometry, labels)
    }

    pub fn geometry(&self) -> &VoxelGeometry {
        &self.geometry
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label_table(&self) -> &BTreeMap<u32, String> {
        &self.label_table
    }

    pub fn contains_label(&self, label: u32) -> bool {
        self.label_table.contains_key(&label)
    }

    pub fn count(&self, label: u32) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != BACKGROUND).count()
    }

    /// Non-background labels from the table, ascending.
    pub fn foreground_labels(&self) -> Vec<u32> {
        self.label_table
            .keys()
            .copied()
            .filter(|&l| l != BACKGROUND)
            .collect()
    }

    /// Physical volume of all non-background voxels.
    pub fn foreground_volume(&self) -> f64 {
        self.foreground_count() as f64 * self.geometry.voxel_volume()
    }

    /// Replaces the voxel labels, keeping geometry and table. Labels outside
    /// the table are rejected.
    pub fn with_labels(&self, labels: Vec<u32>) -> Result<Self> {
        Self::new(self.geometry.clone(), labels, self.label_table.clone())
    }
}

pub(crate) fn default_table(labels: &[u32]) -> BTreeMap<u32, String> {
    let mut table = BTreeMap::new();
    table.insert(BACKGROUND, "background".to_string());
    for &l in labels {
        table.entry(l).or_insert_with(|| format!("label_{l}"));
    }
    table
}

/// Physical volume (mm³, or mm² in 2D) of one label: voxel count × voxel
/// volume.
pub fn label_volume(map: &LabelMap, label: u32) -> Result<f64> {
    if !map.contains_label(label) {
        return Err(Error::UnknownLabel(label));
    }
    Ok(map.count(label) as f64 * map.geometry.voxel_volume())
}

/// Visits every multi-index of `dims` in row-major order.
pub(crate) fn for_each_index(dims: &[usize], mut f: impl FnMut(&[usize])) {
    if dims.iter().any(|&d| d == 0) {
        return;
    }
    let mut idx = vec![0usize; dims.len()];
    loop {
        f(&idx);
        let mut axis = dims.len();
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < dims[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Intensity,
    Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Nifti,
    SimpleVol,
}

impl Format {
    /// `.nii` / `.nii.gz` select NIfTI-1, `.json` selects SimpleVol.
    pub fn from_path(path: &Path) -> Option<Format> {
        let name = path.file_name()?.to_str()?.to_ascii_lowercase();
        if name.ends_with(".nii") || name.ends_with(".nii.gz") {
            Some(Format::Nifti)
        } else if name.ends_with(".json") {
            Some(Format::SimpleVol)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Intensity(VoxelGrid),
    Labels(LabelMap),
}

impl Volume {
    pub fn geometry(&self) -> &VoxelGeometry {
        match self {
            Volume::Intensity(g) => g.geometry(),
            Volume::Labels(m) => m.geometry(),
        }
    }
}

fn format_for(path: &Path) -> Result<Format> {
    Format::from_path(path).ok_or_else(|| {
        Error::UnsupportedDatatype(format!(
            "cannot infer volume format from {} (expected .nii, .nii.gz or .json)",
            path.display()
        ))
    })
}

pub fn load_volume(path: impl AsRef<Path>, kind: VolumeKind) -> Result<Volume> {
    match kind {
        VolumeKind::Intensity => load_intensity(path).map(Volume::Intensity),
        VolumeKind::Label => load_labels(path).map(Volume::Labels),
    }
}

pub fn load_intensity(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    let path = path.as_ref();
    match format_for(path)? {
        Format::Nifti => nifti::read_intensity(path),
        Format::SimpleVol => simplevol::read_intensity(path),
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    match format_for(path)? {
        Format::Nifti => nifti::read_labels(path),
        Format::SimpleVol => simplevol::read_labels(path),
    }
}

/// Writes intensities as float32 and labels in the narrowest integer type
/// that holds them. Use [`save_intensity`] to pick another dtype.
pub fn save_volume(volume: &Volume, path: impl AsRef<Path>, format: Format) -> Result<()> {
    match volume {
        Volume::Intensity(g) => save_intensity(g, path, format, Dtype::F32),
        Volume::Labels(m) => save_labels(m, path, format),
    }
}

pub fn save_intensity(
    grid: &VoxelGrid,
    path: impl AsRef<Path>,
    format: Format,
    dtype: Dtype,
) -> Result<()> {
    match format {
        Format::Nifti => nifti::write_intensity(grid, path.as_ref(), dtype),
        Format::SimpleVol => simplevol::write_intensity(grid, path.as_ref(), dtype),
    }
}

pub fn save_labels(map: &LabelMap, path: impl AsRef<Path>, format: Format) -> Result<()> {
    match format {
        Format::Nifti => nifti::write_labels(map, path.as_ref()),
        Format::SimpleVol => simplevol::write_labels(map, path.as_ref()),
    }
}

/// Converts real values to labels, accepting values within 1e-6 of a
/// non-negative integer.
pub(crate) fn values_to_labels(values: &[f64]) -> Result<Vec<u32>> {
    values
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            let r = value.round();
            if (value - r).abs() > 1e-6 || r < 0.0 || r > u32::MAX as f64 {
                Err(Error::NonIntegralLabel { index, value })
            } else {
                Ok(r as u32)
            }
        })
        .collect()
}
