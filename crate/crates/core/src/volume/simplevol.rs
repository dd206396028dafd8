//! SimpleVol: a JSON header plus a raw little-endian payload.
//!
//! Header (`<name>.json`):
//!
//! ```json
//! {
//!   "format": "simplevol",
//!   "version": 1,
//!   "kind": "intensity",
//!   "dims": [64, 64, 32],
//!   "voxel_size": [1.0, 1.0, 1.0],
//!   "dtype": "float32",
//!   "channels": 1,
//!   "data_file": "<name>.raw",
//!   "labels": {"0": "background", "1": "structure"}
//! }
//! ```
//!
//! `data_file` is resolved relative to the header's directory. The payload
//! holds `channels × Π dims` elements of `dtype`, little-endian, channel
//! blocks in order, each block row-major over (x, y, z) with z fastest.
//! `labels` is present only for label maps.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use byteorder::LE;
use serde::{Deserialize, Serialize};

use super::dtype::Dtype;
use super::{values_to_labels, LabelMap, VolumeKind, VoxelGeometry, VoxelGrid};
use crate::error::{Error, Result};

const FORMAT_TAG: &str = "simplevol";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub kind: VolumeKind,
    pub dims: Vec<usize>,
    pub voxel_size: Vec<f64>,
    pub dtype: Dtype,
    pub channels: usize,
    pub data_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<BTreeMap<u32, String>>,
}

fn read_header(path: &Path) -> Result<(Header, PathBuf)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&text)
        .map_err(|e| Error::MalformedHeader(format!("{}: {e}", path.display())))?;
    if header.format != FORMAT_TAG || header.version != VERSION {
        return Err(Error::MalformedHeader(format!(
            "expected {FORMAT_TAG} v{VERSION}, found {} v{}",
            header.format, header.version
        )));
    }
    let data_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.data_file);
    Ok((header, data_path))
}

fn read_values(header: &Header, data_path: &Path) -> Result<(VoxelGeometry, Vec<f64>)> {
    let geometry = VoxelGeometry::new(header.dims.clone(), header.voxel_size.clone())?;
    if header.channels == 0 {
        return Err(Error::MalformedHeader("channels must be >= 1".into()));
    }
    let bytes = fs::read(data_path).map_err(|e| Error::io(data_path, e))?;
    let count = geometry.num_voxels() * header.channels;
    if bytes.len() != count * header.dtype.size() {
        return Err(Error::MalformedHeader(format!(
            "payload is {} bytes, header implies {}",
            bytes.len(),
            count * header.dtype.size()
        )));
    }
    let values = header.dtype.decode::<LE>(&bytes, count)?;
    Ok((geometry, values))
}

pub fn read_intensity(path: &Path) -> Result<VoxelGrid> {
    let (header, data_path) = read_header(path)?;
    let (geometry, values) = read_values(&header, &data_path)?;
    VoxelGrid::new(geometry, header.channels, values)
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let (header, data_path) = read_header(path)?;
    if header.channels != 1 {
        return Err(Error::UnsupportedDatatype(format!(
            "label file has {} channels",
            header.channels
        )));
    }
    let (geometry, values) = read_values(&header, &data_path)?;
    let labels = values_to_labels(&values)?;
    match header.labels {
        Some(table) => LabelMap::new(geometry, labels, table),
        None => LabelMap::from_labels(geometry, labels),
    }
}

fn data_file_name(path: &Path) -> Result<String> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::io(path, std::io::Error::other("invalid file name")))?;
    let stem = name.strip_suffix(".json").unwrap_or(name);
    Ok(format!("{stem}.raw"))
}

fn write(path: &Path, header: &Header, values: &[f64]) -> Result<()> {
    let data_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.data_file);
    let file = fs::File::create(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let mut out = BufWriter::new(file);
    header
        .dtype
        .encode_le(values.iter().copied(), &mut out)
        .and_then(|_| out.into_inner().map(|_| ()).map_err(|e| e.into_error()))
        .map_err(|e| Error::io(&data_path, e))?;
    let mut text = serde_json::to_string_pretty(header)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_intensity(grid: &VoxelGrid, path: &Path, dtype: Dtype) -> Result<()> {
    let g = grid.geometry();
    let header = Header {
        format: FORMAT_TAG.into(),
        version: VERSION,
        kind: VolumeKind::Intensity,
        dims: g.dims().to_vec(),
        voxel_size: g.voxel_size().to_vec(),
        dtype,
        channels: grid.channels(),
        data_file: data_file_name(path)?,
        labels: None,
    };
    write(path, &header, grid.data())
}

pub fn write_labels(map: &LabelMap, path: &Path) -> Result<()> {
    let g = map.geometry();
    let header = Header {
        format: FORMAT_TAG.into(),
        version: VERSION,
        kind: VolumeKind::Label,
        dims: g.dims().to_vec(),
        voxel_size: g.voxel_size().to_vec(),
        dtype: Dtype::for_labels(map.labels())?,
        channels: 1,
        data_file: data_file_name(path)?,
        labels: Some(map.label_table().clone()),
    };
    let values: Vec<f64> = map.labels().iter().map(|&l| l as f64).collect();
    write(path, &header, &values)
}
