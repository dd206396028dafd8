//! Cross-resolution operators: separable linear intensity interpolation,
//! majority-vote label interpolation, channel-wise feature rescaling, and
//! the scale-augmentation sampler.
//!
//! Coordinate convention: source and target fields of view share their
//! origin corner and voxel `i` along an axis has its center at
//! `(i + 0.5) × voxel_size`. Under this convention a factor of 1 maps every
//! voxel center onto itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelMap, VoxelGeometry, VoxelGrid};

pub const DEFAULT_MIN_FACTOR: f64 = 0.125;
pub const DEFAULT_MAX_FACTOR: f64 = 8.0;

/// Per-axis ratio `source_voxel_size / target_voxel_size`; values below 1
/// downsample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleFactor(Vec<f64>);

impl ScaleFactor {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        Self::with_bounds(components, DEFAULT_MIN_FACTOR, DEFAULT_MAX_FACTOR)
    }

    pub fn with_bounds(components: Vec<f64>, min: f64, max: f64) -> Result<Self> {
        if !(min > 0.0 && min <= max && max.is_finite()) {
            return Err(Error::InvalidScaleFactor(format!(
                "bounds [{min}, {max}] are invalid"
            )));
        }
        if !(2..=3).contains(&components.len()) {
            return Err(Error::InvalidScaleFactor(format!(
                "expected 2 or 3 components, got {}",
                components.len()
            )));
        }
        if let Some(f) = components
            .iter()
            .find(|f| !(f.is_finite() && **f >= min && **f <= max))
        {
            return Err(Error::InvalidScaleFactor(format!(
                "component {f} outside [{min}, {max}]"
            )));
        }
        Ok(ScaleFactor(components))
    }

    pub fn isotropic(factor: f64, ndim: usize) -> Result<Self> {
        Self::new(vec![factor; ndim])
    }

    /// Factor that takes voxels of `source_mm` to voxels of `target_mm`.
    pub fn between(source_mm: &[f64], target_mm: &[f64]) -> Result<Self> {
        if source_mm.len() != target_mm.len() {
            return Err(Error::InvalidScaleFactor("axis count mismatch".into()));
        }
        Self::new(
            source_mm
                .iter()
                .zip(target_mm)
                .map(|(s, t)| s / t)
                .collect(),
        )
    }

    pub fn components(&self) -> &[f64] {
        &self.0
    }

    pub fn ndim(&self) -> usize {
        self.0.len()
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().all(|&f| f == 1.0)
    }
}

/// Where to resample to: an explicit grid or a scale factor relative to the
/// source.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Geometry(VoxelGeometry),
    Factor(ScaleFactor),
}

impl From<VoxelGeometry> for Target {
    fn from(g: VoxelGeometry) -> Self {
        Target::Geometry(g)
    }
}

impl From<ScaleFactor> for Target {
    fn from(f: ScaleFactor) -> Self {
        Target::Factor(f)
    }
}

/// Round half away from zero, minimum 1.
fn scaled_dim(dim: usize, factor: f64) -> usize {
    ((dim as f64 * factor).round() as usize).max(1)
}

/// Resolves a target against a source geometry. Factor targets get
/// `dims = round(dims × factor)` (min 1) and `voxel_size / factor`.
pub fn target_geometry(source: &VoxelGeometry, target: &Target) -> Result<VoxelGeometry> {
    match target {
        Target::Geometry(g) => {
            if g.ndim() != source.ndim() {
                return Err(Error::DegenerateTarget(format!(
                    "target has {} axes, source has {}",
                    g.ndim(),
                    source.ndim()
                )));
            }
            Ok(g.clone())
        }
        Target::Factor(f) => {
            if f.ndim() != source.ndim() {
                return Err(Error::DegenerateTarget(format!(
                    "factor has {} components, source has {} axes",
                    f.ndim(),
                    source.ndim()
                )));
            }
            let dims = source
                .dims()
                .iter()
                .zip(f.components())
                .map(|(&d, &k)| scaled_dim(d, k))
                .collect();
            let size = source
                .voxel_size()
                .iter()
                .zip(f.components())
                .map(|(&v, &k)| v / k)
                .collect();
            VoxelGeometry::new(dims, size).map_err(|e| Error::DegenerateTarget(e.to_string()))
        }
    }
}

/// Linear interpolation weights for one axis: target `j` reads source
/// `lo + t × (hi − lo)`.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    t: f64,
}

fn linear_taps(n_src: usize, n_dst: usize, ratio: f64) -> Vec<Tap> {
    let last = (n_src - 1) as f64;
    (0..n_dst)
        .map(|j| {
            // clamp-to-edge
            let u = ((j as f64 + 0.5) * ratio - 0.5).clamp(0.0, last);
            let lo = (u.floor() as usize).min(n_src - 1);
            let hi = (lo + 1).min(n_src - 1);
            Tap {
                lo,
                hi,
                t: u - lo as f64,
            }
        })
        .collect()
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    let v = a + t * (b - a);
    v.clamp(a.min(b), a.max(b))
}

fn axis_is_identity(n_src: usize, n_dst: usize, ratio: f64) -> bool {
    n_src == n_dst && ratio == 1.0
}

/// Interpolates one row-major 3D block along `axis`.
fn interpolate_axis(data: &[f64], dims: [usize; 3], axis: usize, taps: &[Tap]) -> Vec<f64> {
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let n_src = dims[axis];
    let mut out = Vec::with_capacity(outer * taps.len() * inner);
    for o in 0..outer {
        let base = o * n_src * inner;
        for tap in taps {
            let lo = &data[base + tap.lo * inner..base + (tap.lo + 1) * inner];
            let hi = &data[base + tap.hi * inner..base + (tap.hi + 1) * inner];
            out.extend(lo.iter().zip(hi).map(|(&a, &b)| lerp(a, b, tap.t)));
        }
    }
    out
}

/// Separable linear interpolation of one channel from `src` to `dst`.
fn interpolate_channel(values: &[f64], src: &VoxelGeometry, dst: &VoxelGeometry) -> Vec<f64> {
    let src_size = src.voxel_size3();
    let dst_size = dst.voxel_size3();
    let dst_dims = dst.dims3();
    let mut dims = src.dims3();
    let mut data = values.to_vec();
    for axis in 0..src.ndim() {
        let ratio = dst_size[axis] / src_size[axis];
        if axis_is_identity(dims[axis], dst_dims[axis], ratio) {
            continue;
        }
        let taps = linear_taps(dims[axis], dst_dims[axis], ratio);
        data = interpolate_axis(&data, dims, axis, &taps);
        dims[axis] = dst_dims[axis];
    }
    data
}

/// Linear (bilinear in 2D, trilinear in 3D) resampling with clamp-to-edge
/// boundaries. Applied to every channel.
pub fn resample_intensity(grid: &VoxelGrid, target: impl Into<Target>) -> Result<VoxelGrid> {
    let src = grid.geometry();
    let dst = target_geometry(src, &target.into())?;
    let mut data = Vec::with_capacity(dst.num_voxels() * grid.channels());
    for c in 0..grid.channels() {
        data.extend(interpolate_channel(grid.channel(c), src, &dst));
    }
    VoxelGrid::new(dst, grid.channels(), data)
}

/// Channel-wise linear rescaling of a feature stack, the standalone form of
/// an in-network resampling step to a fixed internal resolution. Numerically
/// identical to [`resample_intensity`] per channel.
pub fn vinn_rescale(features: &VoxelGrid, factor: &ScaleFactor) -> Result<VoxelGrid> {
    resample_intensity(features, Target::Factor(factor.clone()))
}

/// Source index range `[lo, hi)` covered by each target voxel along an axis:
/// the source voxels whose centers fall inside the target voxel's half-open
/// footprint. Where no center falls inside (upsampling), the single source
/// voxel containing the target center is used.
fn footprint_ranges(n_src: usize, n_dst: usize, ratio: f64) -> Vec<(usize, usize)> {
    if axis_is_identity(n_src, n_dst, ratio) {
        return (0..n_dst).map(|j| (j, j + 1)).collect();
    }
    let edge = |b: f64| -> usize { (b - 0.5).ceil().clamp(0.0, n_src as f64) as usize };
    (0..n_dst)
        .map(|j| {
            let lo = edge(j as f64 * ratio);
            let hi = edge((j + 1) as f64 * ratio);
            if lo < hi {
                (lo, hi)
            } else {
                let nearest = (((j as f64 + 0.5) * ratio).floor().max(0.0) as usize).min(n_src - 1);
                (nearest, nearest + 1)
            }
        })
        .collect()
}

/// Most frequent label in the footprint, lowest id on ties.
fn vote(counts: &mut Vec<(u32, usize)>) -> u32 {
    let mut best = (u32::MAX, 0usize);
    for &(label, n) in counts.iter() {
        if n > best.1 || (n == best.1 && label < best.0) {
            best = (label, n);
        }
    }
    counts.clear();
    best.0
}

/// Lossy label resampling by majority vote over each target voxel's
/// footprint. Ties go to the lowest label id.
pub fn resample_labels_majority(map: &LabelMap, target: impl Into<Target>) -> Result<LabelMap> {
    let src = map.geometry();
    let dst = target_geometry(src, &target.into())?;
    let src_dims = src.dims3();
    let dst_dims = dst.dims3();
    let src_size = src.voxel_size3();
    let dst_size = dst.voxel_size3();
    let ranges: Vec<Vec<(usize, usize)>> = (0..3)
        .map(|a| footprint_ranges(src_dims[a], dst_dims[a], dst_size[a] / src_size[a]))
        .collect();

    let labels = map.labels();
    let mut out = Vec::with_capacity(dst.num_voxels());
    let mut counts: Vec<(u32, usize)> = Vec::new();
    for &(x0, x1) in &ranges[0] {
        for &(y0, y1) in &ranges[1] {
            for &(z0, z1) in &ranges[2] {
                for x in x0..x1 {
                    for y in y0..y1 {
                        let row = (x * src_dims[1] + y) * src_dims[2];
                        for &l in &labels[row + z0..row + z1] {
                            match counts.iter_mut().find(|(k, _)| *k == l) {
                                Some(entry) => entry.1 += 1,
                                None => counts.push((l, 1)),
                            }
                        }
                    }
                }
                out.push(vote(&mut counts));
            }
        }
    }
    LabelMap::new(dst, out, map.label_table().clone())
}

/// Random rescaling policy for scale augmentation. Factors are drawn
/// log-uniformly from `[min_factor, max_factor]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub min_factor: f64,
    pub max_factor: f64,
    pub isotropic: bool,
    pub ndim: usize,
}

impl Default for AugmentationPolicy {
    /// `[0.7, 1.43]` covers the 1.0/1.4 mm pair ratio in both directions.
    fn default() -> Self {
        AugmentationPolicy {
            min_factor: 0.7,
            max_factor: 1.43,
            isotropic: true,
            ndim: 3,
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_factor > 0.0 && self.min_factor <= self.max_factor && self.max_factor.is_finite()) {
            return Err(Error::InvalidPolicy(format!(
                "need 0 < min_factor <= max_factor, got [{}, {}]",
                self.min_factor, self.max_factor
            )));
        }
        if self.min_factor < DEFAULT_MIN_FACTOR || self.max_factor > DEFAULT_MAX_FACTOR {
            return Err(Error::InvalidPolicy(format!(
                "factors must lie in [{DEFAULT_MIN_FACTOR}, {DEFAULT_MAX_FACTOR}]"
            )));
        }
        if !(2..=3).contains(&self.ndim) {
            return Err(Error::InvalidPolicy(format!("ndim {} not in 2..=3", self.ndim)));
        }
        Ok(())
    }
}

/// Deterministic log-uniform draw for a given seed.
pub fn sample_scale_factor(policy: &AugmentationPolicy, seed: u64) -> Result<ScaleFactor> {
    policy.validate()?;
    let (lo, hi) = (policy.min_factor, policy.max_factor);
    if lo == hi {
        return ScaleFactor::new(vec![lo; policy.ndim]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (log_lo, log_hi) = (lo.ln(), hi.ln());
    let mut draw = || (log_lo + rng.random::<f64>() * (log_hi - log_lo)).exp().clamp(lo, hi);
    let components = if policy.isotropic {
        vec![draw(); policy.ndim]
    } else {
        (0..policy.ndim).map(|_| draw()).collect()
    };
    ScaleFactor::new(components)
}

/// Rescales an image/label pair onto one shared target grid: linear
/// interpolation for the image, majority vote for the labels.
pub fn apply_scale_augmentation(
    image: &VoxelGrid,
    labels: &LabelMap,
    factor: &ScaleFactor,
) -> Result<(VoxelGrid, LabelMap)> {
    image.geometry().ensure_same(labels.geometry())?;
    let target = target_geometry(image.geometry(), &Target::Factor(factor.clone()))?;
    Ok((
        resample_intensity(image, target.clone())?,
        resample_labels_majority(labels, target)?,
    ))
}
