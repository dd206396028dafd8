//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reader and writer.
//!
//! Reads little- and big-endian files with uint8/int16/int32/float32/float64
//! payloads; writes little-endian. Orientation is taken from the sform when
//! `sform_code > 0`, else from the qform quaternion when `qform_code > 0`,
//! else pixdim alone. Only axis-aligned orientations (permutations and flips
//! of RAS, cosines within 1e-3) are accepted; data is reordered to RAS on
//! load.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, BE, LE};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::dtype::Dtype;
use super::{values_to_labels, LabelMap, VoxelGeometry, VoxelGrid};
use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const ORIENTATION_TOLERANCE: f64 = 1e-3;

/// Decoded file contents before intensity/label interpretation. Values are
/// raw (unscaled) and already in canonical RAS row-major order.
#[derive(Debug, Clone)]
pub struct RawNifti {
    pub geometry: VoxelGeometry,
    pub channels: usize,
    pub dtype: Dtype,
    pub values: Vec<f64>,
    pub scl_slope: f64,
    pub scl_inter: f64,
}

impl RawNifti {
    fn has_scaling(&self) -> bool {
        self.scl_slope != 1.0 || self.scl_inter != 0.0
    }
}

pub fn read_intensity(path: &Path) -> Result<VoxelGrid> {
    let raw = parse(&read_bytes(path)?)?;
    let values = if raw.has_scaling() {
        raw.values
            .iter()
            .map(|v| v * raw.scl_slope + raw.scl_inter)
            .collect()
    } else {
        raw.values
    };
    VoxelGrid::new(raw.geometry, raw.channels, values)
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let raw = parse(&read_bytes(path)?)?;
    if raw.has_scaling() {
        return Err(Error::UnsupportedDatatype(format!(
            "label file has intensity scaling (scl_slope {}, scl_inter {})",
            raw.scl_slope, raw.scl_inter
        )));
    }
    if raw.channels != 1 {
        return Err(Error::UnsupportedDatatype(format!(
            "label file has {} channels",
            raw.channels
        )));
    }
    let labels = values_to_labels(&raw.values)?;
    LabelMap::from_labels(raw.geometry, labels)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

/// Parses an in-memory single-file NIfTI-1 image.
pub fn parse(bytes: &[u8]) -> Result<RawNifti> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::MalformedHeader(format!(
            "{} bytes, need at least {HEADER_SIZE}",
            bytes.len()
        )));
    }
    if LE::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse_with::<LE>(bytes)
    } else if BE::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse_with::<BE>(bytes)
    } else {
        Err(Error::MalformedHeader("sizeof_hdr is not 348".into()))
    }
}

fn parse_with<B: ByteOrder>(bytes: &[u8]) -> Result<RawNifti> {
    let h = &bytes[..HEADER_SIZE];
    let i16_at = |off: usize| B::read_i16(&h[off..off + 2]);
    let f32_at = |off: usize| B::read_f32(&h[off..off + 4]) as f64;

    match &h[344..348] {
        b"n+1\0" => {}
        b"ni1\0" => {
            return Err(Error::MalformedHeader(
                "two-file (.hdr/.img) NIfTI is not supported".into(),
            ))
        }
        _ => return Err(Error::MalformedHeader("missing NIfTI-1 magic".into())),
    }

    let dim: Vec<i64> = (0..8).map(|i| i16_at(40 + 2 * i) as i64).collect();
    let rank = dim[0];
    if !(2..=7).contains(&rank) {
        return Err(Error::MalformedHeader(format!("dim[0] = {rank}")));
    }
    let rank = rank as usize;
    let spatial = rank.min(3);
    let mut dims = Vec::with_capacity(spatial);
    for (axis, &d) in dim.iter().enumerate().skip(1).take(spatial) {
        if d < 1 {
            return Err(Error::MalformedHeader(format!("dim[{axis}] = {d}")));
        }
        dims.push(d as usize);
    }
    let channels = if rank >= 4 {
        if dim[4] < 1 {
            return Err(Error::MalformedHeader(format!("dim[4] = {}", dim[4])));
        }
        dim[4] as usize
    } else {
        1
    };
    if let Some(axis) = (5..=rank).find(|&a| dim[a] != 1) {
        return Err(Error::UnsupportedDatatype(format!(
            "dim[{axis}] = {} (only up to 4D supported)",
            dim[axis]
        )));
    }
    if spatial == 2 && channels != 1 {
        return Err(Error::UnsupportedDatatype(
            "multi-channel 2D images are not supported".into(),
        ));
    }

    let dtype = Dtype::from_nifti_code(i16_at(70))?;
    let bitpix = i16_at(72);
    if bitpix as usize != dtype.size() * 8 {
        return Err(Error::MalformedHeader(format!(
            "bitpix {bitpix} inconsistent with {}",
            dtype.name()
        )));
    }

    let pixdim: Vec<f64> = (0..8).map(|i| f32_at(76 + 4 * i)).collect();
    let mut voxel_size = Vec::with_capacity(spatial);
    for (axis, p) in pixdim.iter().enumerate().skip(1).take(spatial) {
        let v = p.abs();
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::MalformedHeader(format!("pixdim[{axis}] = {p}")));
        }
        voxel_size.push(v);
    }

    let vox_offset = f32_at(108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f64) {
        return Err(Error::MalformedHeader(format!("vox_offset = {vox_offset}")));
    }
    let offset = vox_offset as usize;

    let mut scl_slope = f32_at(112);
    let mut scl_inter = f32_at(116);
    if scl_slope == 0.0 || !scl_slope.is_finite() {
        scl_slope = 1.0;
        scl_inter = 0.0;
    }
    if !scl_inter.is_finite() {
        scl_inter = 0.0;
    }

    let qform_code = i16_at(252);
    let sform_code = i16_at(254);
    let columns = if sform_code > 0 {
        let row = |off: usize| [f32_at(off), f32_at(off + 4), f32_at(off + 8)];
        let (rx, ry, rz) = (row(280), row(296), row(312));
        [
            [rx[0], ry[0], rz[0]],
            [rx[1], ry[1], rz[1]],
            [rx[2], ry[2], rz[2]],
        ]
    } else if qform_code > 0 {
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        quaternion_columns(f32_at(256), f32_at(260), f32_at(264), qfac)
    } else {
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    };
    let mapping = axis_mapping(&columns, spatial)?;

    let n_spatial: usize = dims.iter().product();
    let payload = bytes.get(offset..).unwrap_or(&[]);
    let file_values = dtype.decode::<B>(payload, n_spatial * channels)?;

    // File order is x fastest; reorder to RAS row-major.
    let mut file_dims = [1usize; 3];
    file_dims[..spatial].copy_from_slice(&dims);
    let mut out_dims = [1usize; 3];
    let mut out_size = [1.0f64; 3];
    for j in 0..spatial {
        out_dims[mapping.perm[j]] = file_dims[j];
        out_size[mapping.perm[j]] = voxel_size[j];
    }
    let mut values = vec![0.0; file_values.len()];
    let mut src = 0;
    for c in 0..channels {
        for z in 0..file_dims[2] {
            for y in 0..file_dims[1] {
                for x in 0..file_dims[0] {
                    let file_idx = [x, y, z];
                    let mut out = [0usize; 3];
                    for j in 0..3 {
                        let i = if mapping.flip[j] {
                            file_dims[j] - 1 - file_idx[j]
                        } else {
                            file_idx[j]
                        };
                        out[mapping.perm[j]] = i;
                    }
                    let dst = ((out[0] * out_dims[1] + out[1]) * out_dims[2] + out[2])
                        + c * n_spatial;
                    values[dst] = file_values[src];
                    src += 1;
                }
            }
        }
    }

    let geometry = VoxelGeometry::new(
        out_dims[..spatial].to_vec(),
        out_size[..spatial].to_vec(),
    )?;
    Ok(RawNifti {
        geometry,
        channels,
        dtype,
        values,
        scl_slope,
        scl_inter,
    })
}

/// Voxel axis `j` of the file lands on canonical axis `perm[j]`, reversed
/// when `flip[j]`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct AxisMapping {
    perm: [usize; 3],
    flip: [bool; 3],
}

fn quaternion_columns(b: f64, c: f64, d: f64, qfac: f64) -> [[f64; 3]; 3] {
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ];
    [
        [r[0][0], r[1][0], r[2][0]],
        [r[0][1], r[1][1], r[2][1]],
        [qfac * r[0][2], qfac * r[1][2], qfac * r[2][2]],
    ]
}

fn axis_mapping(columns: &[[f64; 3]; 3], spatial: usize) -> Result<AxisMapping> {
    let mut perm = [0, 1, 2];
    let mut flip = [false; 3];
    let mut used = [false; 3];
    for j in 0..spatial {
        let col = &columns[j][..spatial];
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::MalformedHeader(format!(
                "degenerate direction for voxel axis {j}"
            )));
        }
        let unit: Vec<f64> = col.iter().map(|v| v / norm).collect();
        let k = (0..spatial)
            .max_by(|&a, &b| unit[a].abs().total_cmp(&unit[b].abs()))
            .unwrap_or(0);
        let aligned = (1.0 - unit[k].abs()).abs() <= ORIENTATION_TOLERANCE
            && (0..spatial)
                .filter(|&i| i != k)
                .all(|i| unit[i].abs() <= ORIENTATION_TOLERANCE);
        if !aligned || used[k] {
            return Err(Error::ObliqueOrientation(format!(
                "voxel axis {j} has direction {unit:?}"
            )));
        }
        used[k] = true;
        perm[j] = k;
        flip[j] = unit[k] < 0.0;
    }
    Ok(AxisMapping { perm, flip })
}

pub fn write_intensity(grid: &VoxelGrid, path: &Path, dtype: Dtype) -> Result<()> {
    if grid.geometry().ndim() == 2 && grid.channels() != 1 {
        return Err(Error::UnsupportedDatatype(
            "multi-channel 2D images cannot be written as NIfTI-1".into(),
        ));
    }
    let bytes = encode(grid.geometry(), grid.channels(), grid.data(), dtype)?;
    write_file(path, &bytes)
}

pub fn write_labels(map: &LabelMap, path: &Path) -> Result<()> {
    let dtype = Dtype::for_labels(map.labels())?;
    let values: Vec<f64> = map.labels().iter().map(|&l| l as f64).collect();
    let bytes = encode(map.geometry(), 1, &values, dtype)?;
    write_file(path, &bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.to_ascii_lowercase().ends_with(".gz"));
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let result = if gz {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes).and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut file = file;
        file.write_all(bytes)
    };
    result.map_err(|e| Error::io(path, e))
}

/// Encodes a little-endian single-file image with an identity-oriented
/// (RAS) qform and sform.
pub fn encode(geometry: &VoxelGeometry, channels: usize, values: &[f64], dtype: Dtype) -> Result<Vec<u8>> {
    let nd = geometry.ndim();
    let dims = geometry.dims3();
    let size = geometry.voxel_size3();
    for &d in &dims {
        if d > i16::MAX as usize {
            return Err(Error::UnsupportedDatatype(format!(
                "dimension {d} exceeds NIfTI-1 limits"
            )));
        }
    }
    if channels > i16::MAX as usize {
        return Err(Error::UnsupportedDatatype(format!("{channels} channels")));
    }

    let mut h = vec![0u8; VOX_OFFSET];
    LE::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    let rank: i16 = if channels > 1 { 4 } else { nd as i16 };
    let mut dim = [1i16; 8];
    dim[0] = rank;
    dim[1] = dims[0] as i16;
    dim[2] = dims[1] as i16;
    dim[3] = dims[2] as i16;
    dim[4] = channels as i16;
    for (i, d) in dim.iter().enumerate() {
        LE::write_i16(&mut h[40 + 2 * i..42 + 2 * i], *d);
    }
    LE::write_i16(&mut h[70..72], dtype.nifti_code());
    LE::write_i16(&mut h[72..74], (dtype.size() * 8) as i16);
    let pixdim = [1.0, size[0], size[1], size[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        LE::write_f32(&mut h[76 + 4 * i..80 + 4 * i], *p as f32);
    }
    LE::write_f32(&mut h[108..112], VOX_OFFSET as f32);
    LE::write_f32(&mut h[112..116], 1.0);
    LE::write_f32(&mut h[116..120], 0.0);
    h[123] = 2; // xyzt_units: mm
    LE::write_i16(&mut h[252..254], 1);
    LE::write_i16(&mut h[254..256], 1);
    for (row, off) in [280usize, 296, 312].into_iter().enumerate() {
        LE::write_f32(&mut h[off + 4 * row..off + 4 * row + 4], size[row] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");

    // Canonical row-major (z fastest) to file order (x fastest).
    let n = geometry.num_voxels();
    let mut ordered = Vec::with_capacity(values.len());
    for c in 0..channels {
        let block = &values[c * n..(c + 1) * n];
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    ordered.push(block[(x * dims[1] + y) * dims[2] + z]);
                }
            }
        }
    }
    dtype
        .encode_le(ordered.into_iter(), &mut h)
        .expect("writing to a Vec cannot fail");
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-built header: every field placed at its documented byte offset.
    fn header_fixture(big_endian: bool, dims: [i16; 3], pixdim: [f32; 3], datatype: i16, bitpix: i16) -> Vec<u8> {
        let mut h = vec![0u8; VOX_OFFSET];
        fn put_i16(h: &mut [u8], off: usize, v: i16, be: bool) {
            if be { BE::write_i16(&mut h[off..off + 2], v) } else { LE::write_i16(&mut h[off..off + 2], v) }
        }
        fn put_f32(h: &mut [u8], off: usize, v: f32, be: bool) {
            if be { BE::write_f32(&mut h[off..off + 4], v) } else { LE::write_f32(&mut h[off..off + 4], v) }
        }
        if big_endian {
            BE::write_i32(&mut h[0..4], 348);
        } else {
            LE::write_i32(&mut h[0..4], 348);
        }
        let dim = [3, dims[0], dims[1], dims[2], 1, 1, 1, 1];
        for (i, d) in dim.iter().enumerate() {
            put_i16(&mut h, 40 + 2 * i, *d, big_endian);
        }
        put_i16(&mut h, 70, datatype, big_endian);
        put_i16(&mut h, 72, bitpix, big_endian);
        let pd = [1.0, pixdim[0], pixdim[1], pixdim[2], 0.0, 0.0, 0.0, 0.0];
        for (i, p) in pd.iter().enumerate() {
            put_f32(&mut h, 76 + 4 * i, *p, big_endian);
        }
        put_f32(&mut h, 108, 352.0, big_endian);
        h[344..348].copy_from_slice(b"n+1\0");
        h
    }

    #[test]
    fn parses_pixdim_as_voxel_size() {
        let mut bytes = header_fixture(false, [2, 2, 2], [1.0, 1.0, 1.0], 2, 8);
        bytes.extend(0u8..8);
        let raw = parse(&bytes).unwrap();
        assert_eq!(raw.geometry.dims(), &[2, 2, 2]);
        assert_eq!(raw.geometry.voxel_size(), &[1.0, 1.0, 1.0]);
        assert_eq!(raw.dtype, Dtype::U8);
        // file order x fastest: value at (x,y,z) = x + 2y + 4z
        assert_eq!(raw.values[raw.geometry.linear_index(&[1, 0, 0])], 1.0);
        assert_eq!(raw.values[raw.geometry.linear_index(&[0, 1, 0])], 2.0);
        assert_eq!(raw.values[raw.geometry.linear_index(&[0, 0, 1])], 4.0);
    }

    #[test]
    fn parses_big_endian() {
        let mut bytes = header_fixture(true, [2, 1, 1], [0.5, 2.0, 3.0], 4, 16);
        bytes.extend([0x01, 0x00, 0xff, 0xff]);
        let raw = parse(&bytes).unwrap();
        assert_eq!(raw.geometry.voxel_size(), &[0.5, 2.0, 3.0]);
        assert_eq!(raw.values, vec![256.0, -1.0]);
    }

    #[test]
    fn rejects_bad_headers() {
        assert!(matches!(parse(&[0u8; 100]), Err(Error::MalformedHeader(_))));
        let mut bytes = header_fixture(false, [1, 1, 1], [1.0; 3], 2, 8);
        bytes.push(0);
        let mut no_magic = bytes.clone();
        no_magic[344] = b'x';
        assert!(matches!(parse(&no_magic), Err(Error::MalformedHeader(_))));
        let mut bad_type = header_fixture(false, [1, 1, 1], [1.0; 3], 32, 64);
        bad_type.extend([0u8; 8]);
        assert!(matches!(parse(&bad_type), Err(Error::UnsupportedDatatype(_))));
        let truncated = header_fixture(false, [4, 4, 4], [1.0; 3], 16, 32);
        assert!(matches!(parse(&truncated), Err(Error::MalformedHeader(_))));
    }

    fn with_sform(mut bytes: Vec<u8>, rows: [[f32; 4]; 3]) -> Vec<u8> {
        LE::write_i16(&mut bytes[254..256], 1);
        for (r, off) in [280usize, 296, 312].into_iter().enumerate() {
            for c in 0..4 {
                LE::write_f32(&mut bytes[off + 4 * c..off + 4 * c + 4], rows[r][c]);
            }
        }
        bytes
    }

    #[test]
    fn reorients_flipped_and_permuted_axes_to_ras() {
        // voxel axis 0 -> world -y, voxel axis 1 -> world +x, axis 2 -> +z
        let mut bytes = header_fixture(false, [3, 2, 1], [2.0, 1.0, 1.0], 2, 8);
        bytes = with_sform(bytes, [[0.0, 1.0, 0.0, 0.0], [-2.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]);
        bytes.extend(0u8..6);
        let raw = parse(&bytes).unwrap();
        assert_eq!(raw.geometry.dims(), &[2, 3, 1]);
        assert_eq!(raw.geometry.voxel_size(), &[1.0, 2.0, 1.0]);
        // file voxel (i, j) holds i + 3j; lands at canonical (x=j, y=2-i)
        for i in 0..3 {
            for j in 0..2 {
                let v = raw.values[raw.geometry.linear_index(&[j, 2 - i, 0])];
                assert_eq!(v, (i + 3 * j) as f64);
            }
        }
    }

    #[test]
    fn rejects_oblique_affine() {
        let mut bytes = header_fixture(false, [2, 2, 2], [1.0; 3], 2, 8);
        let (s, c) = (0.1f32.sin(), 0.1f32.cos());
        bytes = with_sform(bytes, [[c, -s, 0.0, 0.0], [s, c, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]);
        bytes.extend([0u8; 8]);
        assert!(matches!(parse(&bytes), Err(Error::ObliqueOrientation(_))));
    }

    #[test]
    fn tolerates_near_aligned_affine() {
        let mut bytes = header_fixture(false, [2, 2, 2], [1.0; 3], 2, 8);
        bytes = with_sform(bytes, [[1.0, 0.0005, 0.0, 0.0], [-0.0005, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]);
        bytes.extend([0u8; 8]);
        assert!(parse(&bytes).is_ok());
    }

    #[test]
    fn qform_flip_via_quaternion() {
        // 180 degrees about z: b = c = 0, d = 1 -> x and y flipped
        let mut bytes = header_fixture(false, [2, 1, 1], [1.0; 3], 2, 8);
        LE::write_i16(&mut bytes[252..254], 1);
        LE::write_f32(&mut bytes[264..268], 1.0);
        bytes.extend([7u8, 9]);
        let raw = parse(&bytes).unwrap();
        assert_eq!(raw.values, vec![9.0, 7.0]);
    }

    #[test]
    fn scaling_applied_for_intensity_rejected_for_labels() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = header_fixture(false, [2, 1, 1], [1.0; 3], 2, 8);
        LE::write_f32(&mut bytes[112..116], 2.0);
        LE::write_f32(&mut bytes[116..120], 1.0);
        bytes.extend([3u8, 4]);
        let path = dir.path().join("scaled.nii");
        fs::write(&path, &bytes).unwrap();
        assert_eq!(read_intensity(&path).unwrap().data(), &[7.0, 9.0]);
        assert!(matches!(read_labels(&path), Err(Error::UnsupportedDatatype(_))));
    }

    #[test]
    fn float_labels_must_be_integral() {
        let dir = tempfile::tempdir().unwrap();
        let g = VoxelGeometry::isotropic(&[2, 1, 1], 1.0).unwrap();
        let bytes = encode(&g, 1, &[1.0, 2.5], Dtype::F32).unwrap();
        let path = dir.path().join("frac.nii");
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_labels(&path), Err(Error::NonIntegralLabel { .. })));
    }
}
