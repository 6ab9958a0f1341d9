use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"AVFT";
const HEADER_LEN: usize = 16;

/// Header of a feature file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureHeader {
    pub rows: usize,
    pub cols: usize,
    /// Raw 10 ms frames per stored row (1 unless the file holds stacked frames).
    pub stack: usize,
}

/// Serializes a `[rows, cols]` matrix: `AVFT`, rows, cols and stack factor as
/// little-endian u32, then row-major little-endian f32 values.
pub fn encode_features(features: &Tensor, stack: usize) -> Result<Vec<u8>> {
    let &[rows, cols] = features.shape() else {
        return Err(Error::Contract(format!(
            "feature matrix must be 2-D, got {:?}",
            features.shape()
        )));
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * rows * cols);
    out.extend_from_slice(MAGIC);
    for v in [rows, cols, stack.max(1)] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &x in features.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<FeatureHeader> {
    let bad = |msg: &str| Error::Version(format!("{}: {msg}", path.display()));
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("not a feature file (bad magic)"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let header = FeatureHeader {
        rows: word(1),
        cols: word(2),
        stack: word(3).max(1),
    };
    if header.rows == 0 || header.cols == 0 {
        return Err(bad("feature matrix has a zero extent"));
    }
    Ok(header)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<(FeatureHeader, Tensor)> {
    let header = parse_header(bytes, path)?;
    let n = header.rows * header.cols;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 4 * n {
        return Err(Error::Version(format!(
            "{}: payload holds {} bytes, header promises {}",
            path.display(),
            payload.len(),
            4 * n
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
        .collect();
    Ok((header, Tensor::new(vec![header.rows, header.cols], data)?))
}

pub fn read_features(path: &Path) -> Result<(FeatureHeader, Tensor)> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_features(&bytes, path)
}

/// Reads only the 16-byte header.
pub fn read_feature_header(path: &Path) -> Result<FeatureHeader> {
    use std::io::Read;
    let mut buf = [0u8; HEADER_LEN];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut buf))
        .map_err(|e| Error::file(path, e))?;
    parse_header(&buf, path)
}

pub fn write_features(path: &Path, features: &Tensor, stack: usize) -> Result<()> {
    let bytes = encode_features(features, stack)?;
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_in_memory() {
        let t = Tensor::from_fn(&[3, 2], |i| i as Real * 0.5);
        let bytes = encode_features(&t, 1).unwrap();
        assert_eq!(bytes.len(), 16 + 24);
        assert_eq!(&bytes[..4], b"AVFT");
        let (h, back) = decode_features(&bytes, Path::new("x")).unwrap();
        assert_eq!(h, FeatureHeader { rows: 3, cols: 2, stack: 1 });
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        let t = Tensor::ones(&[2, 2]);
        let bytes = encode_features(&t, 1).unwrap();
        assert!(decode_features(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        assert!(decode_features(b"RIFF0000000000000000", Path::new("x")).is_err());
    }
}
