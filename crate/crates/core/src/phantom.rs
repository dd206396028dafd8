//! Synthetic two-group cohorts with known structure volumes.
//!
//! Two structure kinds are provided: a compact ellipsoid and a sinusoidally
//! folded ribbon whose thin, slanted walls are what low resolutions lose
//! first. A voxel belongs to the structure iff its center lies inside the
//! analytic shape.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::resample::{resample_intensity, resample_labels_majority, target_geometry, ScaleFactor, Target};
use crate::volume::{self, Dtype, Format, LabelMap, VoxelGeometry, VoxelGrid};

/// Label id of the synthetic structure.
pub const STRUCTURE_LABEL: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Structure {
    CompactEllipsoid {
        radii_mm: [f64; 3],
    },
    /// Sheet of vertical thickness `thickness_mm` around the surface
    /// `z = A sin(2π (x cos θ + y sin θ) / λ)`, spanning `±half_extent_mm`
    /// in x and y. θ is `fold_direction_deg`.
    FoldedRibbon {
        thickness_mm: f64,
        fold_wavelength_mm: f64,
        fold_amplitude_mm: f64,
        #[serde(default)]
        fold_direction_deg: f64,
        half_extent_mm: [f64; 2],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityModel {
    pub foreground_mean: f64,
    pub background_mean: f64,
    pub noise_sigma: f64,
}

impl Default for IntensityModel {
    fn default() -> Self {
        IntensityModel {
            foreground_mean: 110.0,
            background_mean: 30.0,
            noise_sigma: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub structure: Structure,
    pub geometry: VoxelGeometry,
    #[serde(default)]
    pub intensity: IntensityModel,
}

impl PhantomSpec {
    /// Cortex-like sheet: 2 mm thick, folded with 4 mm amplitude every
    /// 12 mm along a direction 30° off the x axis, in a 48×48×24 grid of
    /// 1 mm voxels.
    pub fn default_ribbon() -> Self {
        PhantomSpec {
            structure: Structure::FoldedRibbon {
                thickness_mm: 2.0,
                fold_wavelength_mm: 12.0,
                fold_amplitude_mm: 4.0,
                fold_direction_deg: 30.0,
                half_extent_mm: [16.0, 16.0],
            },
            geometry: VoxelGeometry::isotropic(&[48, 48, 24], 1.0).expect("valid geometry"),
            intensity: IntensityModel::default(),
        }
    }

    /// Hippocampus-like blob: radii (8, 6, 6) mm in a 32³ grid of 1 mm voxels.
    pub fn default_ellipsoid() -> Self {
        PhantomSpec {
            structure: Structure::CompactEllipsoid {
                radii_mm: [8.0, 6.0, 6.0],
            },
            geometry: VoxelGeometry::isotropic(&[32, 32, 32], 1.0).expect("valid geometry"),
            intensity: IntensityModel::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.geometry.ndim() != 3 {
            return Err(Error::InvalidSpec("phantoms are 3D".into()));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        match &self.structure {
            Structure::CompactEllipsoid { radii_mm } => {
                if !radii_mm.iter().all(|&r| positive(r)) {
                    return Err(Error::InvalidSpec(format!("radii {radii_mm:?}")));
                }
            }
            Structure::FoldedRibbon {
                thickness_mm,
                fold_wavelength_mm,
                fold_amplitude_mm,
                fold_direction_deg,
                half_extent_mm,
            } => {
                if !fold_direction_deg.is_finite() {
                    return Err(Error::InvalidSpec(format!("fold direction {fold_direction_deg}")));
                }
                if !positive(*thickness_mm) {
                    return Err(Error::InvalidSpec(format!("thickness {thickness_mm}")));
                }
                if !positive(*fold_wavelength_mm) || !(fold_amplitude_mm.is_finite() && *fold_amplitude_mm >= 0.0) {
                    return Err(Error::InvalidSpec("fold wavelength/amplitude".into()));
                }
                if !half_extent_mm.iter().all(|&e| positive(e)) {
                    return Err(Error::InvalidSpec(format!("half extent {half_extent_mm:?}")));
                }
            }
        }
        let im = &self.intensity;
        if !(im.foreground_mean.is_finite() && im.background_mean.is_finite() && im.noise_sigma.is_finite() && im.noise_sigma >= 0.0) {
            return Err(Error::InvalidSpec("intensity model".into()));
        }
        Ok(())
    }

    /// The structure scaled by `scale` (lengths in the scaled directions are
    /// multiplied), centered in the grid.
    pub fn shape(&self, scale: f64) -> Shape {
        let center: Vec<f64> = self.geometry.extent().iter().map(|e| e / 2.0).collect();
        let center = [center[0], center[1], center[2]];
        match &self.structure {
            Structure::CompactEllipsoid { radii_mm } => Shape::Ellipsoid {
                center,
                radii: radii_mm.map(|r| r * scale),
            },
            Structure::FoldedRibbon {
                thickness_mm,
                fold_wavelength_mm,
                fold_amplitude_mm,
                fold_direction_deg,
                half_extent_mm,
            } => Shape::Ribbon {
                center,
                thickness: *thickness_mm,
                wavelength: *fold_wavelength_mm,
                amplitude: *fold_amplitude_mm,
                direction: fold_direction_deg.to_radians(),
                half_extent: half_extent_mm.map(|e| e * scale),
            },
        }
    }
}

/// An analytic structure placed in physical (mm) coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Ellipsoid {
        center: [f64; 3],
        radii: [f64; 3],
    },
    Ribbon {
        center: [f64; 3],
        thickness: f64,
        wavelength: f64,
        amplitude: f64,
        /// Fold direction in the xy-plane, radians from +x.
        direction: f64,
        half_extent: [f64; 2],
    },
}

impl Shape {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Shape::Ellipsoid { center, radii } => {
                (0..3)
                    .map(|a| ((p[a] - center[a]) / radii[a]).powi(2))
                    .sum::<f64>()
                    <= 1.0
            }
            Shape::Ribbon {
                center,
                thickness,
                wavelength,
                amplitude,
                direction,
                half_extent,
            } => {
                let dx = p[0] - center[0];
                let dy = p[1] - center[1];
                if dx.abs() > half_extent[0] || dy.abs() > half_extent[1] {
                    return false;
                }
                let along = dx * direction.cos() + dy * direction.sin();
                let mid = center[2] + amplitude * (std::f64::consts::TAU * along / wavelength).sin();
                (p[2] - mid).abs() <= thickness / 2.0
            }
        }
    }

    pub fn analytic_volume(&self) -> f64 {
        match self {
            Shape::Ellipsoid { radii, .. } => {
                4.0 / 3.0 * std::f64::consts::PI * radii[0] * radii[1] * radii[2]
            }
            // vertical thickness × footprint: the sine shear preserves volume
            Shape::Ribbon {
                thickness,
                half_extent,
                ..
            } => 4.0 * half_extent[0] * half_extent[1] * thickness,
        }
    }

    /// Axis-aligned bounding box `(min, max)` in mm.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let half = match self {
            Shape::Ellipsoid { radii, .. } => *radii,
            Shape::Ribbon {
                thickness,
                amplitude,
                half_extent,
                ..
            } => [half_extent[0], half_extent[1], amplitude + thickness / 2.0],
        };
        let c = match self {
            Shape::Ellipsoid { center, .. } | Shape::Ribbon { center, .. } => *center,
        };
        (
            [c[0] - half[0], c[1] - half[1], c[2] - half[2]],
            [c[0] + half[0], c[1] + half[1], c[2] + half[2]],
        )
    }

    /// Requires at least one voxel of margin on every side.
    pub fn check_fits(&self, geometry: &VoxelGeometry) -> Result<()> {
        let (lo, hi) = self.bounds();
        let extent = geometry.extent();
        let size = geometry.voxel_size();
        for a in 0..3 {
            if lo[a] < size[a] || hi[a] > extent[a] - size[a] {
                return Err(Error::StructureExceedsGrid(format!(
                    "axis {a}: structure spans [{:.3}, {:.3}] mm, allowed [{:.3}, {:.3}] mm",
                    lo[a],
                    hi[a],
                    size[a],
                    extent[a] - size[a]
                )));
            }
        }
        Ok(())
    }

    /// Center-in-shape voxelization.
    pub fn voxelize(&self, geometry: &VoxelGeometry) -> Result<LabelMap> {
        let size = geometry.voxel_size3();
        let mut table = BTreeMap::new();
        table.insert(STRUCTURE_LABEL, "structure".to_string());
        let mut labels = Vec::with_capacity(geometry.num_voxels());
        volume::for_each_index(geometry.dims(), |i| {
            let p = [
                (i[0] as f64 + 0.5) * size[0],
                (i[1] as f64 + 0.5) * size[1],
                (i[2] as f64 + 0.5) * size[2],
            ];
            labels.push(if self.contains(p) { STRUCTURE_LABEL } else { 0 });
        });
        LabelMap::new(geometry.clone(), labels, table)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    H,
    L,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::H => "H",
            Group::L => "L",
        })
    }
}

impl std::str::FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "H" | "h" => Ok(Group::H),
            "L" | "l" => Ok(Group::L),
            other => Err(Error::InvalidConfig(format!("unknown group {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

pub const SPLITS: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitFractions {
    /// Builds fractions from integer counts, e.g. 50/10/30.
    pub fn from_counts(train: usize, validation: usize, test: usize) -> Self {
        let total = (train + validation + test) as f64;
        SplitFractions {
            train: train as f64 / total,
            validation: validation as f64 / total,
            test: test as f64 / total,
        }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.validation, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.as_array();
        if f.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!("split fractions {f:?} must be >= 0 and sum to 1")));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `n` items; ties favour the earlier
    /// split.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let raw = self.as_array().map(|f| f * n as f64);
        let mut counts = raw.map(|r| r.floor() as usize);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let ra = raw[a] - raw[a].floor();
            let rb = raw[b] - raw[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let mut left = n.saturating_sub(counts.iter().sum());
        for &k in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[k] += 1;
            left -= 1;
        }
        counts
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions::from_counts(50, 10, 30)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_per_group: usize,
    /// Mean structure scale of group H divided by that of group L.
    pub effect_ratio: f64,
    /// Standard deviation of the per-subject log scale.
    pub jitter_sigma: f64,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default)]
    pub seed: u64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            n_per_group: 20,
            effect_ratio: 1.3,
            jitter_sigma: 0.05,
            split: SplitFractions::default(),
            seed: 0,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_group == 0 {
            return Err(Error::InvalidSpec("n_per_group must be >= 1".into()));
        }
        if !(self.effect_ratio.is_finite() && self.effect_ratio > 0.0) {
            return Err(Error::InvalidSpec(format!("effect ratio {}", self.effect_ratio)));
        }
        if !(self.jitter_sigma.is_finite() && self.jitter_sigma >= 0.0) {
            return Err(Error::InvalidSpec(format!("jitter {}", self.jitter_sigma)));
        }
        self.split.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub group: Group,
    pub image: Option<VoxelGrid>,
    pub reference: LabelMap,
    pub prediction: Option<LabelMap>,
    /// Largest voxel edge of the subject's native grid, mm.
    pub native_voxel_size: f64,
    pub structure_scale: Option<f64>,
    pub analytic_volume_mm3: Option<f64>,
}

impl Subject {
    pub fn reference_volume(&self) -> f64 {
        self.reference.foreground_volume()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub subjects: Vec<Subject>,
    pub splits: BTreeMap<String, Split>,
}

impl Cohort {
    pub fn group(&self, group: Group) -> impl Iterator<Item = &Subject> {
        self.subjects.iter().filter(move |s| s.group == group)
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.splits.get(id).copied()
    }

    /// Subject count per (split, group).
    pub fn split_counts(&self) -> BTreeMap<(Split, Group), usize> {
        let mut counts = BTreeMap::new();
        for s in &self.subjects {
            if let Some(split) = self.split_of(&s.id) {
                *counts.entry((split, s.group)).or_insert(0) += 1;
            }
        }
        counts
    }
}

const SPLIT_STREAM: u64 = 1 << 40;

fn generate_subject(pspec: &PhantomSpec, group: Group, index: usize, mean_scale: f64, jitter: f64, seed: u64) -> Result<Subject> {
    let stream = match group {
        Group::H => index as u64,
        Group::L => (1 << 32) + index as u64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream));
    let z: f64 = StandardNormal.sample(&mut rng);
    let scale = mean_scale * (jitter * z).exp();
    let shape = pspec.shape(scale);
    shape.check_fits(&pspec.geometry)?;
    let reference = shape.voxelize(&pspec.geometry)?;

    let im = &pspec.intensity;
    let noise = Normal::new(0.0, im.noise_sigma).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let data: Vec<f64> = reference
        .labels()
        .iter()
        .map(|&l| {
            let mean = if l == STRUCTURE_LABEL { im.foreground_mean } else { im.background_mean };
            // stored as float32
            (mean + noise.sample(&mut rng)) as f32 as f64
        })
        .collect();
    let image = VoxelGrid::new(pspec.geometry.clone(), 1, data)?;

    Ok(Subject {
        id: format!("{group}{index:03}"),
        group,
        image: Some(image),
        reference,
        prediction: None,
        native_voxel_size: pspec.geometry.voxel_size().iter().copied().fold(0.0, f64::max),
        structure_scale: Some(scale),
        analytic_volume_mm3: Some(shape.analytic_volume()),
    })
}

/// Generates `n_per_group` subjects per group (group L at mean scale 1,
/// group H at `effect_ratio`) with log-normal scale jitter, then assigns
/// balanced train/validation/test splits. Deterministic in `cspec.seed`.
pub fn generate_cohort(pspec: &PhantomSpec, cspec: &CohortSpec) -> Result<Cohort> {
    pspec.validate()?;
    cspec.validate()?;
    let jobs: Vec<(Group, usize)> = [Group::H, Group::L]
        .into_iter()
        .flat_map(|g| (0..cspec.n_per_group).map(move |i| (g, i)))
        .collect();
    let subjects = jobs
        .par_iter()
        .map(|&(group, i)| {
            let mean = match group {
                Group::H => cspec.effect_ratio,
                Group::L => 1.0,
            };
            generate_subject(pspec, group, i, mean, cspec.jitter_sigma, cspec.seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let splits = assign_splits(&subjects, &cspec.split, cspec.seed);
    Ok(Cohort { subjects, splits })
}

/// Per group: shuffle subject ids with the seed, then cut into
/// train/validation/test by largest-remainder counts.
pub fn assign_splits(subjects: &[Subject], fractions: &SplitFractions, seed: u64) -> BTreeMap<String, Split> {
    use rand::seq::SliceRandom;

    let mut out = BTreeMap::new();
    for (gi, group) in [Group::H, Group::L].into_iter().enumerate() {
        let mut ids: Vec<&str> = subjects
            .iter()
            .filter(|s| s.group == group)
            .map(|s| s.id.as_str())
            .collect();
        ids.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SPLIT_STREAM + gi as u64));
        ids.shuffle(&mut rng);
        let counts = fractions.counts(ids.len());
        let mut it = ids.into_iter();
        for (split, &count) in SPLITS.iter().zip(&counts) {
            for id in it.by_ref().take(count) {
                out.insert(id.to_string(), *split);
            }
        }
    }
    out
}

/// Picks the `n` smallest (ascending volume) and `n` largest (descending
/// volume) entries by index. Equal volumes are ordered by id, and the large
/// group is drawn only from entries not already in the small group.
pub fn stratify_indices(entries: &[(&str, f64)], n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if 2 * n > entries.len() {
        return Err(Error::InsufficientSubjects {
            needed: 2 * n,
            available: entries.len(),
        });
    }
    let mut ascending: Vec<usize> = (0..entries.len()).collect();
    ascending.sort_by(|&a, &b| {
        entries[a]
            .1
            .total_cmp(&entries[b].1)
            .then_with(|| entries[a].0.cmp(entries[b].0))
    });
    let small: Vec<usize> = ascending[..n].to_vec();
    let mut rest: Vec<usize> = ascending[n..].to_vec();
    rest.sort_by(|&a, &b| {
        entries[b]
            .1
            .total_cmp(&entries[a].1)
            .then_with(|| entries[a].0.cmp(entries[b].0))
    });
    rest.truncate(n);
    Ok((small, rest))
}

/// The `n` subjects with the smallest and the `n` with the largest
/// reference volume.
pub fn stratify_by_volume(subjects: &[Subject], n: usize) -> Result<(Vec<&Subject>, Vec<&Subject>)> {
    let volumes: Vec<f64> = subjects.iter().map(Subject::reference_volume).collect();
    let entries: Vec<(&str, f64)> = subjects.iter().map(|s| s.id.as_str()).zip(volumes).collect();
    let (small, large) = stratify_indices(&entries, n)?;
    Ok((
        small.into_iter().map(|i| &subjects[i]).collect(),
        large.into_iter().map(|i| &subjects[i]).collect(),
    ))
}

/// Resamples image and reference of one subject to isotropic `voxel_mm`.
pub fn resample_subject(subject: &Subject, voxel_mm: f64) -> Result<Subject> {
    let geometry = subject.reference.geometry();
    if geometry.voxel_size().iter().all(|&v| v == voxel_mm) {
        let mut s = subject.clone();
        s.native_voxel_size = voxel_mm;
        return Ok(s);
    }
    let target_mm = vec![voxel_mm; geometry.ndim()];
    let factor = ScaleFactor::between(geometry.voxel_size(), &target_mm)?;
    let target = target_geometry(geometry, &Target::Factor(factor))?;
    let image = subject
        .image
        .as_ref()
        .map(|img| resample_intensity(img, target.clone()))
        .transpose()?;
    let reference = resample_labels_majority(&subject.reference, target)?;
    Ok(Subject {
        image,
        reference,
        native_voxel_size: voxel_mm,
        ..subject.clone()
    })
}

/// Puts group H at the high resolution and group L at the low one
/// (`pair = (high_mm, low_mm)`, so `high_mm <= low_mm`).
pub fn assign_group_resolutions(cohort: &Cohort, pair: (f64, f64)) -> Result<Cohort> {
    let (high, low) = pair;
    if !(high.is_finite() && low.is_finite() && high > 0.0 && low > 0.0) || high > low {
        return Err(Error::InvalidResolutionPair(format!(
            "({high}, {low}): need 0 < high <= low"
        )));
    }
    let subjects = cohort
        .subjects
        .par_iter()
        .map(|s| {
            let mm = match s.group {
                Group::H => high,
                Group::L => low,
            };
            resample_subject(s, mm)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort {
        subjects,
        splits: cohort.splits.clone(),
    })
}

/// One subject row of the cohort manifest. Paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub group: Group,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    pub reference: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<PathBuf>,
    pub native_voxel_size: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structure_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analytic_volume_mm3: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub subjects: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub const MANIFEST_NAME: &str = "cohort.json";

fn volume_name(id: &str, role: &str, format: Format) -> String {
    match format {
        Format::Nifti => format!("{id}_{role}.nii.gz"),
        Format::SimpleVol => format!("{id}_{role}.json"),
    }
}

/// Writes every subject's volumes into `dir` and an index at
/// `dir/cohort.json`. Returns the manifest path.
pub fn write_cohort(cohort: &Cohort, dir: &Path, format: Format) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let subjects = cohort
        .subjects
        .par_iter()
        .map(|s| -> Result<ManifestEntry> {
            let image = match &s.image {
                Some(img) => {
                    let name = volume_name(&s.id, "image", format);
                    volume::save_intensity(img, dir.join(&name), format, Dtype::F32)?;
                    Some(PathBuf::from(name))
                }
                None => None,
            };
            let reference = volume_name(&s.id, "ref", format);
            volume::save_labels(&s.reference, dir.join(&reference), format)?;
            let prediction = match &s.prediction {
                Some(p) => {
                    let name = volume_name(&s.id, "pred", format);
                    volume::save_labels(p, dir.join(&name), format)?;
                    Some(PathBuf::from(name))
                }
                None => None,
            };
            Ok(ManifestEntry {
                id: s.id.clone(),
                group: s.group,
                split: cohort.split_of(&s.id),
                image,
                reference: reference.into(),
                prediction,
                native_voxel_size: s.native_voxel_size,
                structure_scale: s.structure_scale,
                analytic_volume_mm3: s.analytic_volume_mm3,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let path = dir.join(MANIFEST_NAME);
    Manifest { version: 1, subjects }.write(&path)?;
    Ok(path)
}

/// Loads a cohort from its manifest. Images are skipped unless
/// `load_images` is set.
pub fn read_cohort(manifest_path: &Path, load_images: bool) -> Result<Cohort> {
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let subjects = manifest
        .subjects
        .par_iter()
        .map(|e| -> Result<Subject> {
            let image = match (&e.image, load_images) {
                (Some(p), true) => Some(volume::load_intensity(base.join(p))?),
                _ => None,
            };
            let reference = volume::load_labels(base.join(&e.reference))?;
            let prediction = e
                .prediction
                .as_ref()
                .map(|p| volume::load_labels(base.join(p)))
                .transpose()?;
            Ok(Subject {
                id: e.id.clone(),
                group: e.group,
                image,
                reference,
                prediction,
                native_voxel_size: e.native_voxel_size,
                structure_scale: e.structure_scale,
                analytic_volume_mm3: e.analytic_volume_mm3,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let splits = manifest
        .subjects
        .iter()
        .filter_map(|e| e.split.map(|s| (e.id.clone(), s)))
        .collect();
    Ok(Cohort { subjects, splits })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ellipsoid_voxelization_close_to_analytic() {
        let g = VoxelGeometry::isotropic(&[16, 16, 16], 1.0).unwrap();
        let shape = Shape::Ellipsoid {
            center: [8.0, 8.0, 8.0],
            radii: [4.0, 3.0, 3.0],
        };
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 36.0;
        assert!((shape.analytic_volume() - analytic).abs() < 1e-12);
        let m = shape.voxelize(&g).unwrap();
        let voxelized = m.foreground_volume();
        assert!((voxelized - analytic).abs() / analytic < 0.05, "{voxelized} vs {analytic}");
    }

    #[test]
    fn degenerate_effect_gives_equal_volumes() {
        let cs = CohortSpec {
            n_per_group: 4,
            effect_ratio: 1.0,
            jitter_sigma: 0.0,
            ..Default::default()
        };
        let c = generate_cohort(&PhantomSpec::default_ellipsoid(), &cs).unwrap();
        let v0 = c.subjects[0].reference_volume();
        assert!(c.subjects.iter().all(|s| s.reference_volume() == v0));
        assert!(c.subjects.iter().all(|s| s.structure_scale == Some(1.0)));
    }

    #[test]
    fn generation_is_deterministic() {
        let cs = CohortSpec { n_per_group: 3, seed: 17, ..Default::default() };
        let a = generate_cohort(&PhantomSpec::default_ribbon(), &cs).unwrap();
        let b = generate_cohort(&PhantomSpec::default_ribbon(), &cs).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(&PhantomSpec::default_ribbon(), &CohortSpec { seed: 18, ..cs }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn oversized_structure_rejected() {
        let mut p = PhantomSpec::default_ellipsoid();
        p.structure = Structure::CompactEllipsoid { radii_mm: [15.5, 6.0, 6.0] };
        let cs = CohortSpec { n_per_group: 1, jitter_sigma: 0.0, effect_ratio: 1.0, ..Default::default() };
        assert!(matches!(generate_cohort(&p, &cs), Err(Error::StructureExceedsGrid(_))));
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut p = PhantomSpec::default_ribbon();
        if let Structure::FoldedRibbon { thickness_mm, .. } = &mut p.structure {
            *thickness_mm = 0.0;
        }
        assert!(p.validate().is_err());
        let cs = CohortSpec { n_per_group: 0, ..Default::default() };
        assert!(cs.validate().is_err());
        let bad_split = SplitFractions { train: 0.5, validation: 0.5, test: 0.5 };
        assert!(bad_split.validate().is_err());
    }

    #[test]
    fn stratify_examples() {
        let entries = [("a", 1.0), ("b", 5.0), ("c", 2.0), ("d", 4.0), ("e", 3.0)];
        let (small, large) = stratify_indices(&entries, 2).unwrap();
        let vols = |ix: &[usize]| ix.iter().map(|&i| entries[i].1).collect::<Vec<_>>();
        assert_eq!(vols(&small), vec![1.0, 2.0]);
        assert_eq!(vols(&large), vec![5.0, 4.0]);
        assert!(matches!(
            stratify_indices(&entries, 3),
            Err(Error::InsufficientSubjects { needed: 6, available: 5 })
        ));
    }

    #[test]
    fn stratify_ties_resolved_by_id() {
        let entries = [("d", 2.0), ("b", 2.0), ("a", 1.0), ("c", 2.0)];
        let (small, large) = stratify_indices(&entries, 2).unwrap();
        let ids = |ix: &[usize]| ix.iter().map(|&i| entries[i].0).collect::<Vec<_>>();
        assert_eq!(ids(&small), vec!["a", "b"]);
        assert_eq!(ids(&large), vec!["c", "d"]);
        for _ in 0..3 {
            assert_eq!(stratify_indices(&entries, 2).unwrap(), (small.clone(), large.clone()));
        }
    }

    #[test]
    fn stratify_half_partitions_everything() {
        let entries: Vec<(String, f64)> = (0..10).map(|i| (format!("s{i}"), (i * 7 % 10) as f64)).collect();
        let refs: Vec<(&str, f64)> = entries.iter().map(|(s, v)| (s.as_str(), *v)).collect();
        let (small, large) = stratify_indices(&refs, 5).unwrap();
        let mut all: Vec<usize> = small.into_iter().chain(large).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn split_counts_largest_remainder() {
        let f = SplitFractions::from_counts(50, 10, 30);
        assert_eq!(f.counts(45), [25, 5, 15]);
        assert_eq!(f.counts(90), [50, 10, 30]);
        assert_eq!(SplitFractions::from_counts(50, 10, 20).counts(40), [25, 5, 10]);
        assert_eq!(f.counts(1).iter().sum::<usize>(), 1);
        assert_eq!(f.counts(7).iter().sum::<usize>(), 7);
    }

    #[test]
    fn resolution_pair_validation_and_tagging() {
        let cs = CohortSpec { n_per_group: 2, ..Default::default() };
        let c = generate_cohort(&PhantomSpec::default_ellipsoid(), &cs).unwrap();
        assert!(assign_group_resolutions(&c, (1.4, 1.0)).is_err());
        assert!(assign_group_resolutions(&c, (0.0, 1.0)).is_err());
        let same = assign_group_resolutions(&c, (1.0, 1.0)).unwrap();
        assert_eq!(same, c);
        let paired = assign_group_resolutions(&c, (1.0, 1.4)).unwrap();
        for s in &paired.subjects {
            match s.group {
                Group::H => assert_eq!(s.native_voxel_size, 1.0),
                Group::L => {
                    assert_eq!(s.native_voxel_size, 1.4);
                    assert_eq!(s.reference.geometry().dims(), &[23, 23, 23]);
                    assert_eq!(s.image.as_ref().unwrap().geometry(), s.reference.geometry());
                }
            }
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cs = CohortSpec { n_per_group: 2, ..Default::default() };
        let c = generate_cohort(&PhantomSpec::default_ellipsoid(), &cs).unwrap();
        let path = write_cohort(&c, &dir.path().join("svol"), Format::SimpleVol).unwrap();
        assert_eq!(read_cohort(&path, true).unwrap(), c);

        // NIfTI carries no label names, so compare voxels and metadata
        let path = write_cohort(&c, dir.path(), Format::Nifti).unwrap();
        let back = read_cohort(&path, true).unwrap();
        assert_eq!(back.splits, c.splits);
        for (a, b) in back.subjects.iter().zip(&c.subjects) {
            assert_eq!(a.reference.labels(), b.reference.labels());
            assert_eq!(a.reference.geometry(), b.reference.geometry());
            assert_eq!(a.image, b.image);
            assert_eq!((a.group, &a.id, a.analytic_volume_mm3), (b.group, &b.id, b.analytic_volume_mm3));
        }
        let no_images = read_cohort(&path, false).unwrap();
        assert!(no_images.subjects.iter().all(|s| s.image.is_none()));
    }
}
