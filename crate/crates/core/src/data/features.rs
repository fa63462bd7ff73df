//! Binary feature files.
//!
//! Layout (little-endian): magic `ASPF`, u32 version (1), u32 record count,
//! u32 feature dimension, u8 split id, then per record u32 attribute index,
//! u32 object index and `dim` f32 values.

use std::io::Write;
use std::path::Path;

use super::{io_err, DataError, Result, Split, VocabSpace};

const MAGIC: [u8; 4] = *b"ASPF";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 17;

/// Contents of one feature file: the records of a single split.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFragment {
    pub split: Split,
    pub dim: usize,
    pub features: Vec<f32>,
    pub attr_labels: Vec<usize>,
    pub obj_labels: Vec<usize>,
}

impl FeatureFragment {
    pub fn len(&self) -> usize {
        self.attr_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attr_labels.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn read_feature_fragment(bytes: &[u8]) -> Result<FeatureFragment> {
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let n = u32_at(bytes, 8) as usize;
    let dim = u32_at(bytes, 12) as usize;
    let split = Split::from_id(bytes[16])?;

    let record_len = 8 + 4 * dim;
    let expected = HEADER_LEN + n * record_len;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::HeaderMismatch {
            records: n,
            extra: bytes.len() - expected,
        });
    }

    let mut fragment = FeatureFragment {
        split,
        dim,
        features: Vec::with_capacity(n * dim),
        attr_labels: Vec::with_capacity(n),
        obj_labels: Vec::with_capacity(n),
    };
    for r in 0..n {
        let at = HEADER_LEN + r * record_len;
        fragment.attr_labels.push(u32_at(bytes, at) as usize);
        fragment.obj_labels.push(u32_at(bytes, at + 4) as usize);
        fragment.features.extend(
            bytes[at + 8..at + record_len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
        );
    }
    Ok(fragment)
}

/// Reads a feature file and checks every label against `vocab`.
pub fn load_feature_file(path: impl AsRef<Path>, vocab: &VocabSpace) -> Result<FeatureFragment> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let fragment = read_feature_fragment(&bytes)?;
    for (&a, &o) in fragment.attr_labels.iter().zip(&fragment.obj_labels) {
        vocab.validate_labels(a, o)?;
    }
    Ok(fragment)
}

pub fn write_feature_fragment<W: Write>(mut w: W, fragment: &FeatureFragment) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(fragment.len() as u32).to_le_bytes())?;
    w.write_all(&(fragment.dim as u32).to_le_bytes())?;
    w.write_all(&[fragment.split.id()])?;
    for i in 0..fragment.len() {
        w.write_all(&(fragment.attr_labels[i] as u32).to_le_bytes())?;
        w.write_all(&(fragment.obj_labels[i] as u32).to_le_bytes())?;
        for v in fragment.feature(i) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_feature_file(path: impl AsRef<Path>, fragment: &FeatureFragment) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(HEADER_LEN + fragment.len() * (8 + 4 * fragment.dim));
    write_feature_fragment(&mut bytes, fragment).map_err(io_err(path))?;
    std::fs::write(path, bytes).map_err(io_err(path))
}
