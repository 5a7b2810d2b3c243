//! Parameter checkpoints: an 8-byte little-endian header length, a JSON
//! header listing tensor names and shapes, then every tensor as row-major
//! little-endian `f64`, in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FemError, Result};
use crate::mat::Mat;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
}

pub fn encode(tensors: &[(&str, &Mat)]) -> Result<Vec<u8>> {
    let header = Header {
        tensors: tensors
            .iter()
            .map(|(name, m)| TensorEntry { name: name.to_string(), shape: [m.rows(), m.cols()] })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let floats: usize = tensors.iter().map(|(_, m)| m.len()).sum();
    let mut out = Vec::with_capacity(8 + json.len() + 8 * floats);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in tensors {
        for x in m.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Mat)>> {
    let short = || FemError::Format("checkpoint truncated".into());
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(short)?.try_into().expect("8 bytes");
    let len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| short())?;
    let json = bytes.get(8..8usize.checked_add(len).ok_or_else(short)?).ok_or_else(short)?;
    let header: Header = serde_json::from_slice(json)?;
    let mut at = 8 + len;
    let mut out = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let [rows, cols] = entry.shape;
        let n = rows.checked_mul(cols).ok_or_else(short)?;
        let end = at.checked_add(n.checked_mul(8).ok_or_else(short)?).ok_or_else(short)?;
        let raw = bytes.get(at..end).ok_or_else(short)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((entry.name, Mat::from_vec(rows, cols, data)));
        at = end;
    }
    if at != bytes.len() {
        return Err(FemError::Format(format!("{} trailing bytes after checkpoint", bytes.len() - at)));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(&str, &Mat)]) -> Result<()> {
    fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Mat)>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let a = Mat::from_rows(&[vec![1.5, -0.0], vec![f64::MIN_POSITIVE, 3.0]]);
        let b = Mat::zeros(0, 0);
        let c = Mat::from_rows(&[vec![0.1, 0.2, 0.3]]);
        let bytes = encode(&[("a", &a), ("empty", &b), ("c", &c)]).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("empty".to_string(), b), ("c".to_string(), c)]);
    }

    #[test]
    fn layout_is_header_then_floats() {
        let m = Mat::from_rows(&[vec![2.0]]);
        let bytes = encode(&[("w", &m)]).unwrap();
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(&bytes[8..8 + len], br#"{"tensors":[{"name":"w","shape":[1,1]}]}"#);
        assert_eq!(&bytes[8 + len..], &2.0f64.to_le_bytes());
    }

    #[test]
    fn truncation_is_an_error() {
        let m = Mat::from_rows(&[vec![1.0, 2.0]]);
        let bytes = encode(&[("w", &m)]).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(&bytes[..4]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
