//! Synthetic segmentation errors.
//!
//! Random errors move the boundary without changing volume: `k` inner
//! boundary voxels are removed and `k` outer boundary voxels added.
//! Systematic errors dilate or erode the boundary voxel-wise with
//! probability `p`. Boundaries use face connectivity (6-neighbourhood in
//! 3D, 4 in 2D); voxels outside the grid count as background.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::metrics::{dsc, median, volume_bias};
use crate::resample::{resample_labels_majority, ScaleFactor};
use crate::volume::{LabelMap, BACKGROUND};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorKind {
    RandomBalanced,
    SystematicDilate,
    SystematicErode,
}

impl std::fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ErrorKind::RandomBalanced => "random-balanced",
            ErrorKind::SystematicDilate => "systematic-dilate",
            ErrorKind::SystematicErode => "systematic-erode",
        })
    }
}

impl std::str::FromStr for ErrorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random-balanced" | "random" => Ok(ErrorKind::RandomBalanced),
            "systematic-dilate" | "dilate" => Ok(ErrorKind::SystematicDilate),
            "systematic-erode" | "erode" => Ok(ErrorKind::SystematicErode),
            other => Err(Error::InvalidConfig(format!("unknown error kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorModel {
    pub kind: ErrorKind,
    pub strength: f64,
    pub seed: u64,
}

impl ErrorModel {
    pub fn new(kind: ErrorKind, strength: f64, seed: u64) -> Result<Self> {
        let m = ErrorModel { kind, strength, seed };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::InvalidConfig(format!(
                "error strength {} outside [0, 1]",
                self.strength
            )));
        }
        Ok(())
    }
}

/// Linear offsets of the face neighbours of `idx`, skipping those outside
/// the grid. Returns whether any neighbour was outside.
fn face_neighbours(idx: usize, dims: [usize; 3], ndim: usize, out: &mut Vec<usize>) -> bool {
    out.clear();
    let z = idx % dims[2];
    let y = (idx / dims[2]) % dims[1];
    let x = idx / (dims[2] * dims[1]);
    let coords = [x, y, z];
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut clipped = false;
    for a in 0..ndim {
        if coords[a] > 0 {
            out.push(idx - strides[a]);
        } else {
            clipped = true;
        }
        if coords[a] + 1 < dims[a] {
            out.push(idx + strides[a]);
        } else {
            clipped = true;
        }
    }
    clipped
}

/// `(inner, outer)` boundary voxel indices of `label`, ascending. Inner:
/// label voxels with a face neighbour that is not the label (or outside).
/// Outer: background voxels with a face neighbour of the label.
pub fn boundaries(map: &LabelMap, label: u32) -> (Vec<usize>, Vec<usize>) {
    boundaries_in(map.labels(), map.geometry().dims3(), map.geometry().ndim(), label)
}

fn boundaries_in(labels: &[u32], dims: [usize; 3], ndim: usize, label: u32) -> (Vec<usize>, Vec<usize>) {
    let mut nb = Vec::with_capacity(6);
    let mut inner = Vec::new();
    let mut outer = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l == label {
            let clipped = face_neighbours(i, dims, ndim, &mut nb);
            if clipped || nb.iter().any(|&j| labels[j] != label) {
                inner.push(i);
            }
        } else if l == BACKGROUND {
            face_neighbours(i, dims, ndim, &mut nb);
            if nb.iter().any(|&j| labels[j] == label) {
                outer.push(i);
            }
        }
    }
    (inner, outer)
}

fn perturb_label(labels: &mut [u32], map: &LabelMap, label: u32, model: &ErrorModel) {
    let g = map.geometry();
    let (inner, outer) = boundaries_in(labels, g.dims3(), g.ndim(), label);
    let p = model.strength;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(model.seed, label as u64));
    match model.kind {
        ErrorKind::RandomBalanced => {
            // k ~ Binomial(m, p) as a count of uniforms below p, so that k
            // grows monotonically with p for a fixed seed.
            let m = inner.len().min(outer.len());
            let k = (0..m).filter(|_| rng.random::<f64>() < p).count();
            let mut inner = inner;
            let mut outer = outer;
            inner.shuffle(&mut rng);
            outer.shuffle(&mut rng);
            for &i in &inner[..k] {
                labels[i] = BACKGROUND;
            }
            for &i in &outer[..k] {
                labels[i] = label;
            }
        }
        ErrorKind::SystematicDilate => {
            for i in outer {
                if rng.random::<f64>() < p {
                    labels[i] = label;
                }
            }
        }
        ErrorKind::SystematicErode => {
            for i in inner {
                if rng.random::<f64>() < p {
                    labels[i] = BACKGROUND;
                }
            }
        }
    }
}

/// Applies `model` to every non-background label in ascending id order.
/// Deterministic given the model's seed.
pub fn perturb(map: &LabelMap, model: &ErrorModel) -> Result<LabelMap> {
    model.validate()?;
    if map.foreground_count() == 0 {
        return Err(Error::EmptyForeground);
    }
    let mut labels = map.labels().to_vec();
    if model.strength > 0.0 {
        for label in map.foreground_labels() {
            perturb_label(&mut labels, map, label, model);
        }
    }
    map.with_labels(labels)
}

/// Foreground volume after majority-vote downsampling to each isotropic
/// resolution (mm). Resolutions equal to the native voxel size return the
/// native volume.
pub fn downsampling_bias_curve(map: &LabelMap, resolutions: &[f64]) -> Result<Vec<(f64, f64)>> {
    if resolutions.is_empty() {
        return Err(Error::InvalidResolutions("empty list".into()));
    }
    let native = map
        .geometry()
        .voxel_size()
        .iter()
        .copied()
        .fold(0.0, f64::max);
    resolutions
        .iter()
        .map(|&mm| {
            if !(mm.is_finite() && mm >= native - 1e-9) {
                return Err(Error::InvalidResolutions(format!(
                    "{mm} mm is finer than the native {native} mm"
                )));
            }
            let size = map.geometry().voxel_size();
            if size.iter().all(|&v| v == mm) {
                return Ok((mm, map.foreground_volume()));
            }
            let factor = ScaleFactor::between(size, &vec![mm; size.len()])?;
            let low = resample_labels_majority(map, factor)?;
            Ok((mm, low.foreground_volume()))
        })
        .collect()
}

/// Seed of the error model applied to the `index`-th subject of a cohort.
pub fn subject_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

/// Mean DSC and median volume bias of `kind` at strength `p` over a set of
/// reference maps (label `label`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorEffect {
    pub strength: f64,
    pub mean_dsc: f64,
    pub median_bias: f64,
}

pub fn error_effect(refs: &[LabelMap], label: u32, kind: ErrorKind, p: f64, seed: u64) -> Result<ErrorEffect> {
    if refs.is_empty() {
        return Err(Error::InsufficientData("no reference maps".into()));
    }
    let pairs = refs
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let model = ErrorModel::new(kind, p, subject_seed(seed, i))?;
            let pred = perturb(r, &model)?;
            Ok((dsc(&pred, r, label)?, volume_bias(&pred, r, label)?))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let mean_dsc = pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64;
    let biases: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    Ok(ErrorEffect {
        strength: p,
        mean_dsc,
        median_bias: median(&biases).expect("non-empty"),
    })
}

const BISECTION_STEPS: usize = 40;

/// Bisects the strength of a systematic model so that the median volume
/// bias reaches `target` (positive for dilation, negative for erosion).
/// Returns the effect at the strength whose bias is closest to the target.
pub fn calibrate_strength(refs: &[LabelMap], label: u32, kind: ErrorKind, target: f64, seed: u64) -> Result<ErrorEffect> {
    let sign = match kind {
        ErrorKind::SystematicDilate => 1.0,
        ErrorKind::SystematicErode => -1.0,
        ErrorKind::RandomBalanced => {
            return Err(Error::Calibration(
                "random-balanced errors have zero volume bias".into(),
            ))
        }
    };
    let at_max = error_effect(refs, label, kind, 1.0, seed)?;
    if sign * at_max.median_bias < sign * target {
        return Err(Error::Calibration(format!(
            "{kind} reaches at most {:.4} median bias, target {target}",
            at_max.median_bias
        )));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut best = at_max;
    for _ in 0..BISECTION_STEPS {
        let mid = (lo + hi) / 2.0;
        let e = error_effect(refs, label, kind, mid, seed)?;
        if (e.median_bias - target).abs() < (best.median_bias - target).abs() {
            best = e;
        }
        if sign * e.median_bias < sign * target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

/// Strength of the random model whose mean DSC is closest to `target_dsc`.
pub fn match_random_dsc(refs: &[LabelMap], label: u32, target_dsc: f64, seed: u64) -> Result<ErrorEffect> {
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut best = error_effect(refs, label, ErrorKind::RandomBalanced, 0.0, seed)?;
    for _ in 0..BISECTION_STEPS {
        let mid = (lo + hi) / 2.0;
        let e = error_effect(refs, label, ErrorKind::RandomBalanced, mid, seed)?;
        if (e.mean_dsc - target_dsc).abs() < (best.mean_dsc - target_dsc).abs() {
            best = e;
        }
        // DSC falls as p grows
        if e.mean_dsc > target_dsc {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

/// A random/systematic pair with near-equal overlap but different bias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DichotomyCalibration {
    pub random: ErrorEffect,
    pub dilate: ErrorEffect,
}

impl DichotomyCalibration {
    pub fn dsc_gap(&self) -> f64 {
        (self.random.mean_dsc - self.dilate.mean_dsc).abs()
    }

    pub fn bias_gap(&self) -> f64 {
        (self.random.median_bias - self.dilate.median_bias).abs()
    }
}

pub const MAX_DSC_GAP: f64 = 0.02;
pub const MIN_BIAS_GAP: f64 = 0.10;

/// Finds `(p_random, p_dilate)` whose mean DSCs differ by less than 0.02
/// while their median volume biases differ by more than 0.10. The dilation
/// strength is calibrated to `target_bias` first, then the random strength
/// is matched on DSC.
pub fn calibrate_dichotomy(refs: &[LabelMap], label: u32, target_bias: f64, seed: u64) -> Result<DichotomyCalibration> {
    let dilate = calibrate_strength(refs, label, ErrorKind::SystematicDilate, target_bias, seed)?;
    let random = match_random_dsc(refs, label, dilate.mean_dsc, seed)?;
    let c = DichotomyCalibration { random, dilate };
    if c.dsc_gap() >= MAX_DSC_GAP || c.bias_gap() <= MIN_BIAS_GAP {
        return Err(Error::Calibration(format!(
            "best pair has DSC gap {:.4} and bias gap {:.4}",
            c.dsc_gap(),
            c.bias_gap()
        )));
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VoxelGeometry;

    fn blob() -> LabelMap {
        let g = VoxelGeometry::isotropic(&[9, 9, 9], 1.0).unwrap();
        LabelMap::from_fn(g, |i| {
            let d: i64 = i.iter().map(|&c| (c as i64 - 4).pow(2)).sum();
            (d <= 9) as u32
        })
        .unwrap()
    }

    /// Brute-force 6-neighbour dilation straight from coordinates.
    fn dilate_oracle(m: &LabelMap) -> Vec<u32> {
        let d = m.geometry().dims().to_vec();
        let at = |x: i64, y: i64, z: i64| -> u32 {
            if x < 0 || y < 0 || z < 0 || x >= d[0] as i64 || y >= d[1] as i64 || z >= d[2] as i64 {
                0
            } else {
                m.labels()[(x as usize * d[1] + y as usize) * d[2] + z as usize]
            }
        };
        let mut out = Vec::new();
        for x in 0..d[0] as i64 {
            for y in 0..d[1] as i64 {
                for z in 0..d[2] as i64 {
                    let hit = at(x, y, z) == 1
                        || [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                            .iter()
                            .any(|(a, b, c)| at(x + a, y + b, z + c) == 1);
                    out.push(hit as u32);
                }
            }
        }
        out
    }

    #[test]
    fn zero_strength_is_identity() {
        let m = blob();
        for kind in [ErrorKind::RandomBalanced, ErrorKind::SystematicDilate, ErrorKind::SystematicErode] {
            assert_eq!(perturb(&m, &ErrorModel::new(kind, 0.0, 3).unwrap()).unwrap(), m);
        }
    }

    #[test]
    fn full_dilation_matches_oracle() {
        let m = blob();
        let out = perturb(&m, &ErrorModel::new(ErrorKind::SystematicDilate, 1.0, 1).unwrap()).unwrap();
        assert_eq!(out.labels(), dilate_oracle(&m).as_slice());
    }

    #[test]
    fn full_dilation_2d_is_four_connected() {
        let g = VoxelGeometry::isotropic(&[5, 5], 1.0).unwrap();
        let m = LabelMap::from_fn(g, |i| (i[0] == 2 && i[1] == 2) as u32).unwrap();
        let out = perturb(&m, &ErrorModel::new(ErrorKind::SystematicDilate, 1.0, 0).unwrap()).unwrap();
        assert_eq!(out.foreground_count(), 5);
    }

    #[test]
    fn random_balanced_preserves_count() {
        let m = blob();
        for (p, seed) in [(0.1, 0), (0.5, 1), (0.9, 2), (1.0, 3)] {
            let out = perturb(&m, &ErrorModel::new(ErrorKind::RandomBalanced, p, seed).unwrap()).unwrap();
            assert_eq!(out.foreground_count(), m.foreground_count());
            if p >= 0.5 {
                assert_ne!(out, m);
            }
        }
    }

    #[test]
    fn erosion_only_removes_and_dilation_only_adds() {
        let m = blob();
        let e = perturb(&m, &ErrorModel::new(ErrorKind::SystematicErode, 0.5, 9).unwrap()).unwrap();
        let d = perturb(&m, &ErrorModel::new(ErrorKind::SystematicDilate, 0.5, 9).unwrap()).unwrap();
        for i in 0..m.labels().len() {
            assert!(e.labels()[i] <= m.labels()[i]);
            assert!(d.labels()[i] >= m.labels()[i]);
        }
        assert!(e.foreground_count() < m.foreground_count());
        assert!(d.foreground_count() > m.foreground_count());
    }

    #[test]
    fn deterministic_given_seed() {
        let m = blob();
        let model = ErrorModel::new(ErrorKind::RandomBalanced, 0.4, 77).unwrap();
        assert_eq!(perturb(&m, &model).unwrap(), perturb(&m, &model).unwrap());
    }

    #[test]
    fn multi_label_stays_in_table() {
        let g = VoxelGeometry::isotropic(&[8, 8, 8], 1.0).unwrap();
        let m = LabelMap::from_fn(g, |i| match (i[0], i[1]) {
            (2..=3, 2..=5) => 1,
            (4..=5, 2..=5) => 4,
            _ => 0,
        })
        .unwrap();
        for kind in [ErrorKind::RandomBalanced, ErrorKind::SystematicDilate, ErrorKind::SystematicErode] {
            let out = perturb(&m, &ErrorModel::new(kind, 0.7, 5).unwrap()).unwrap();
            assert!(out.labels().iter().all(|l| [0, 1, 4].contains(l)));
        }
    }

    #[test]
    fn errors() {
        let g = VoxelGeometry::isotropic(&[3, 3, 3], 1.0).unwrap();
        let empty = LabelMap::from_labels(g, vec![0; 27]).unwrap();
        let model = ErrorModel::new(ErrorKind::SystematicErode, 0.5, 0).unwrap();
        assert!(matches!(perturb(&empty, &model), Err(Error::EmptyForeground)));
        assert!(ErrorModel::new(ErrorKind::RandomBalanced, 1.5, 0).is_err());
        assert!(downsampling_bias_curve(&blob(), &[]).is_err());
        assert!(downsampling_bias_curve(&blob(), &[0.5]).is_err());
    }

    #[test]
    fn native_resolution_curve_is_identity() {
        let m = blob();
        assert_eq!(downsampling_bias_curve(&m, &[1.0]).unwrap(), vec![(1.0, m.foreground_volume())]);
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in [ErrorKind::RandomBalanced, ErrorKind::SystematicDilate, ErrorKind::SystematicErode] {
            assert_eq!(kind.to_string().parse::<ErrorKind>().unwrap(), kind);
        }
    }
}
