use std::io::Write;

use byteorder::{ByteOrder, WriteBytesExt, LE};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// On-disk element types shared by the NIfTI-1 and SimpleVol codecs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[serde(rename = "uint8")]
    U8,
    #[serde(rename = "int16")]
    I16,
    #[serde(rename = "int32")]
    I32,
    #[serde(rename = "float32")]
    F32,
    #[serde(rename = "float64")]
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::I16 => 2,
            Dtype::I32 | Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn nifti_code(self) -> i16 {
        match self {
            Dtype::U8 => 2,
            Dtype::I16 => 4,
            Dtype::I32 => 8,
            Dtype::F32 => 16,
            Dtype::F64 => 64,
        }
    }

    pub fn from_nifti_code(code: i16) -> Result<Dtype> {
        Ok(match code {
            2 => Dtype::U8,
            4 => Dtype::I16,
            8 => Dtype::I32,
            16 => Dtype::F32,
            64 => Dtype::F64,
            other => {
                return Err(Error::UnsupportedDatatype(format!(
                    "NIfTI datatype code {other}"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::U8 => "uint8",
            Dtype::I16 => "int16",
            Dtype::I32 => "int32",
            Dtype::F32 => "float32",
            Dtype::F64 => "float64",
        }
    }

    /// Narrowest integer type holding every label.
    pub fn for_labels(labels: &[u32]) -> Result<Dtype> {
        let max = labels.iter().copied().max().unwrap_or(0);
        if max <= u8::MAX as u32 {
            Ok(Dtype::U8)
        } else if max <= i16::MAX as u32 {
            Ok(Dtype::I16)
        } else if max <= i32::MAX as u32 {
            Ok(Dtype::I32)
        } else {
            Err(Error::UnsupportedDatatype(format!(
                "label id {max} exceeds int32"
            )))
        }
    }

    pub(crate) fn decode<B: ByteOrder>(self, bytes: &[u8], count: usize) -> Result<Vec<f64>> {
        let need = count * self.size();
        if bytes.len() < need {
            return Err(Error::MalformedHeader(format!(
                "payload has {} bytes, need {need}",
                bytes.len()
            )));
        }
        let bytes = &bytes[..need];
        let values = match self {
            Dtype::U8 => bytes.iter().map(|&b| b as f64).collect(),
            Dtype::I16 => bytes.chunks_exact(2).map(|c| B::read_i16(c) as f64).collect(),
            Dtype::I32 => bytes.chunks_exact(4).map(|c| B::read_i32(c) as f64).collect(),
            Dtype::F32 => bytes.chunks_exact(4).map(|c| B::read_f32(c) as f64).collect(),
            Dtype::F64 => bytes.chunks_exact(8).map(|c| B::read_f64(c)).collect(),
        };
        Ok(values)
    }

    /// Little-endian encoding. Integer types round to nearest and saturate.
    pub(crate) fn encode_le(self, values: impl Iterator<Item = f64>, out: &mut impl Write) -> std::io::Result<()> {
        for v in values {
            match self {
                Dtype::U8 => out.write_u8(v.round().clamp(0.0, u8::MAX as f64) as u8)?,
                Dtype::I16 => out.write_i16::<LE>(v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16)?,
                Dtype::I32 => out.write_i32::<LE>(v.round().clamp(i32::MIN as f64, i32::MAX as f64) as i32)?,
                Dtype::F32 => out.write_f32::<LE>(v as f32)?,
                Dtype::F64 => out.write_f64::<LE>(v)?,
            }
        }
        Ok(())
    }
}
