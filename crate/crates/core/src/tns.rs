//! The `TNS1` tensor file format.
//!
//! Layout: magic `TNS1`, a `u8` dtype code, a `u8` rank, `rank` little-endian
//! `u64` extents, then the row-major little-endian payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TNS1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U32 = 2,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U32),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 | DType::U32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TnsData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl TnsData {
    pub fn dtype(&self) -> DType {
        match self {
            TnsData::F32(_) => DType::F32,
            TnsData::F64(_) => DType::F64,
            TnsData::U32(_) => DType::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TnsData::F32(v) => v.len(),
            TnsData::F64(v) => v.len(),
            TnsData::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TnsFile {
    pub shape: Vec<usize>,
    pub data: TnsData,
}

impl TnsFile {
    pub fn from_tensor_f64(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: TnsData::F64(t.data().to_vec()),
        }
    }

    /// Narrows to `f32`. Lossless only for values already representable in `f32`.
    pub fn from_tensor_f32(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: TnsData::F32(t.data().iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let dtype = self.data.dtype();
        let mut out = Vec::with_capacity(6 + 8 * self.shape.len() + dtype.width() * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(dtype as u8);
        out.push(self.shape.len() as u8);
        for &e in &self.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match &self.data {
            TnsData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TnsData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TnsData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Parses a buffer; `origin` only labels errors.
    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(origin, reason);
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(bad("missing TNS1 magic"));
        }
        let dtype = DType::from_code(bytes[4]).ok_or_else(|| bad("unknown dtype code"))?;
        let rank = bytes[5] as usize;
        let header = 6 + 8 * rank;
        if bytes.len() < header {
            return Err(bad("truncated header"));
        }
        let shape: Vec<usize> = bytes[6..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| bad("extent product overflows"))?;
        let payload = &bytes[header..];
        if payload.len() != count * dtype.width() {
            return Err(bad("payload length does not match extents"));
        }
        let data = match dtype {
            DType::F32 => TnsData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TnsData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U32 => TnsData::U32(
                payload
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Self { shape, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Widens floating payloads to an `f64` tensor.
    pub fn into_tensor(self) -> Result<Tensor> {
        let data = match self.data {
            TnsData::F32(v) => v.into_iter().map(f64::from).collect(),
            TnsData::F64(v) => v,
            TnsData::U32(_) => {
                return Err(crate::error::shape_err!("u32 payload is not a real tensor"))
            }
        };
        Tensor::new(self.shape, data)
    }

    pub fn into_u32(self) -> Result<(Vec<usize>, Vec<u32>)> {
        match self.data {
            TnsData::U32(v) => Ok((self.shape, v)),
            other => Err(crate::error::shape_err!(
                "expected u32 payload, got {:?}",
                other.dtype()
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes_are_exact() {
        let f = TnsFile {
            shape: vec![2, 1],
            data: TnsData::U32(vec![7, 9]),
        };
        let bytes = f.encode();
        assert_eq!(&bytes[..6], b"TNS1\x02\x02");
        assert_eq!(&bytes[6..14], &2u64.to_le_bytes());
        assert_eq!(&bytes[14..22], &1u64.to_le_bytes());
        assert_eq!(&bytes[22..], &[7, 0, 0, 0, 9, 0, 0, 0]);
    }

    #[test]
    fn rejects_corrupt_input() {
        let p = Path::new("mem");
        assert!(TnsFile::decode(b"TNS0\x01\x00", p).is_err());
        assert!(TnsFile::decode(b"TNS1\x07\x00", p).is_err());
        let mut bytes = TnsFile::from_tensor_f64(&Tensor::zeros(&[3])).encode();
        bytes.pop();
        assert!(TnsFile::decode(&bytes, p).is_err());
    }

    proptest! {
        #[test]
        fn f64_round_trip(values in proptest::collection::vec(-1e6f64..1e6, 1..40)) {
            let t = Tensor::new(vec![values.len()], values.clone()).unwrap();
            let back = TnsFile::decode(&TnsFile::from_tensor_f64(&t).encode(), Path::new("mem"))
                .unwrap()
                .into_tensor()
                .unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
