//! GATN checkpoint files.
//!
//! Layout, all integers little-endian: magic `GATN`, `u32` version (1),
//! `u32` array count, then per array a `u32` name length, the UTF-8 name,
//! a `u32` rank, `rank` `u32` dims and the `f64` values in row-major order.
//! Arrays are written at rank 4; lower ranks are accepted on read and padded
//! with trailing unit dims.

use std::path::Path;

use gatn_core::model::{ModelConfig, ModelParams};
use gatn_core::Tensor4;

use crate::error::{self, CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"GATN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("checkpoint array {index}: {reason}")]
    Array { index: usize, reason: String },
    #[error("trailing bytes after the last checkpoint array")]
    Trailing,
}

pub fn encode<'a>(arrays: impl IntoIterator<Item = (&'a str, &'a Tensor4)>) -> Vec<u8> {
    let arrays: Vec<_> = arrays.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&4u32.to_le_bytes());
        for d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor4)>, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { bytes: &bytes[4..] };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count.min(1024));
    for index in 0..count {
        let bad = |reason: &str| CheckpointError::Array {
            index,
            reason: reason.to_string(),
        };
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| bad("name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 4 {
            return Err(bad("rank above 4"));
        }
        let mut dims = [1usize; 4];
        for d in dims.iter_mut().take(rank) {
            *d = r.u32()? as usize;
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.bytes.len()))
            .ok_or(CheckpointError::Truncated)?;
        let data = r
            .take(len * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor4::new(dims, data).map_err(|e| bad(&e.to_string()))?;
        arrays.push((name, tensor));
    }
    if !r.bytes.is_empty() {
        return Err(CheckpointError::Trailing);
    }
    Ok(arrays)
}

pub fn save(path: &Path, params: &ModelParams) -> CliResult<()> {
    error::write(path, &encode(params.store().named()))
}

pub fn load_arrays(path: &Path) -> CliResult<Vec<(String, Tensor4)>> {
    decode(&error::read(path)?).map_err(|e| CliError::io(path, e))
}

/// Loads a checkpoint and checks it against `config`'s parameter layout.
pub fn load(path: &Path, config: &ModelConfig) -> CliResult<ModelParams> {
    let arrays = load_arrays(path)?;
    ModelParams::from_named(config, arrays)
        .map_err(|e| CliError::usage(format!("{}: checkpoint does not fit the model config: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor4)> {
        vec![
            ("w".to_string(), Tensor4::from_fn([2, 3, 1, 2], |n, c, _, w| (n * 6 + c * 2 + w) as f64 * -0.37)),
            ("b".to_string(), Tensor4::new([1, 1, 1, 1], vec![f64::MIN_POSITIVE]).unwrap()),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let arrays = sample();
        let bytes = encode(arrays.iter().map(|(n, t)| (n.as_str(), t)));
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, t0), (n1, t1)) in arrays.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.dims(), t1.dims());
            let bits = |t: &Tensor4| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t0), bits(t1));
        }
        assert_eq!(encode(back.iter().map(|(n, t)| (n.as_str(), t))), bytes);
    }

    #[test]
    fn header_layout() {
        let t = Tensor4::scalar(1.5);
        let bytes = encode([("ab", &t)]);
        assert_eq!(&bytes[..4], b"GATN");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..18], b"ab");
        assert_eq!(&bytes[18..22], &4u32.to_le_bytes());
        assert_eq!(bytes.len(), 22 + 16 + 8);
        assert_eq!(&bytes[38..], &1.5f64.to_le_bytes());
    }

    #[test]
    fn lower_rank_is_padded() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"GATN");
        for v in [1u32, 1, 1] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(b"v");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        for v in [1.0f64, 2.0, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let arrays = decode(&bytes).unwrap();
        assert_eq!(arrays[0].1.dims(), [3, 1, 1, 1]);
    }

    #[test]
    fn corrupt_inputs() {
        assert_eq!(decode(b"NOPE\x01\0\0\0\0\0\0\0"), Err(CheckpointError::BadMagic));
        assert_eq!(decode(b"GA"), Err(CheckpointError::BadMagic));
        assert_eq!(CheckpointError::BadMagic.to_string(), "bad checkpoint magic");
        let arrays = sample();
        let bytes = encode(arrays.iter().map(|(n, t)| (n.as_str(), t)));
        assert_eq!(decode(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated));
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(decode(&extra), Err(CheckpointError::Trailing));
        let mut v2 = bytes;
        v2[4] = 2;
        assert_eq!(decode(&v2), Err(CheckpointError::Version(2)));
    }
}
