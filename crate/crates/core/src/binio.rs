//! Raw little-endian `f64` blobs with SHA-256 digests.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

pub fn encode_f64(values: &[f64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

/// Decodes a blob; `None` if its length is not a multiple of 8.
pub fn decode_f64(bytes: &[u8]) -> Option<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    )
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `values` to `path` and returns the digest of the written bytes.
pub fn write_f64_file(path: &Path, values: &[f64]) -> std::io::Result<String> {
    let bytes = encode_f64(values);
    fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let values = [0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.25];
        let decoded = decode_f64(&encode_f64(&values)).unwrap();
        for (a, b) in values.iter().zip(&decoded) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(decode_f64(&[0u8; 7]).is_none());
    }
}
