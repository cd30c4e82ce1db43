//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "VLAB" | version: u32 (=1) | entries: u32
//! per entry: name_len: u32 | name (UTF-8) | rank: u32 | dims: u64 × rank | f64 × Πdims
//! ```
//!
//! Entries are written in name order. Rank-1 entries load as a single row.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use super::Matrix;

pub const MAGIC: &[u8; 4] = b"VLAB";
pub const VERSION: u32 = 1;

pub type TensorMap = BTreeMap<String, Matrix>;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("entry name is empty or not UTF-8 at offset {0}")]
    InvalidName(usize),
    #[error("duplicate entry {0:?}")]
    DuplicateName(String),
    #[error("unsupported rank {0}")]
    BadRank(u32),
    #[error("{0} trailing bytes after last entry")]
    TrailingBytes(usize),
}

pub fn encode(tensors: &TensorMap) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        if name.is_empty() {
            return Err(CheckpointError::InvalidName(out.len()));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
            }),
        }
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<TensorMap, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = r.u32()?;
    let mut map = TensorMap::new();
    for _ in 0..count {
        let name_at = r.pos;
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .ok()
            .filter(|s| !s.is_empty())
            .ok_or(CheckpointError::InvalidName(name_at))?
            .to_owned();
        let rank = r.u32()?;
        let (rows, cols) = match rank {
            1 => (1, r.u64()?),
            2 => (r.u64()?, r.u64()?),
            other => return Err(CheckpointError::BadRank(other)),
        };
        let truncated = CheckpointError::Truncated {
            offset: r.pos,
            needed: usize::MAX,
        };
        let n = rows
            .checked_mul(cols)
            .and_then(|n| usize::try_from(n).ok())
            .ok_or(truncated.clone())?;
        let nbytes = n.checked_mul(8).ok_or(truncated)?;
        // Check before allocating so a corrupted dimension cannot request gigabytes.
        if nbytes > r.remaining() {
            return Err(CheckpointError::Truncated {
                offset: r.pos,
                needed: nbytes,
            });
        }
        let data = r
            .take(nbytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let m = Matrix::from_vec(rows as usize, cols as usize, data)
            .expect("length checked above");
        if map.insert(name.clone(), m).is_some() {
            return Err(CheckpointError::DuplicateName(name));
        }
    }
    if r.remaining() > 0 {
        return Err(CheckpointError::TrailingBytes(r.remaining()));
    }
    Ok(map)
}

pub fn checkpoint_save(tensors: &TensorMap, path: impl AsRef<Path>) -> crate::Result<()> {
    std::fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn checkpoint_load(path: impl AsRef<Path>) -> crate::Result<TensorMap> {
    Ok(decode(&std::fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::RngState;
    use proptest::prelude::*;

    fn sample_map() -> TensorMap {
        let mut rng = RngState::new(5);
        let mut m = TensorMap::new();
        m.insert("adapter/l1/B".into(), Matrix::random_normal(3, 2, 1.0, &mut rng));
        m.insert("adapter/l1/A".into(), Matrix::random_normal(2, 4, 1.0, &mut rng));
        m.insert("bias".into(), Matrix::from_vec(1, 3, vec![f64::MIN_POSITIVE, -0.0, 1e300]).unwrap());
        m
    }

    #[test]
    fn empty_map_is_valid() {
        let bytes = encode(&TensorMap::new()).unwrap();
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[..4], b"VLAB");
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.vlab");
        let m = sample_map();
        checkpoint_save(&m, &path).unwrap();
        let back = checkpoint_load(&path).unwrap();
        assert_eq!(back.len(), m.len());
        for (k, v) in &m {
            let w = &back[k];
            assert_eq!(v.shape(), w.shape());
            assert!(v.data().iter().zip(w.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn header_corruption_is_an_error() {
        let bytes = encode(&sample_map()).unwrap();
        for i in 0..12 {
            for flip in [0x01u8, 0x80, 0xFF] {
                let mut b = bytes.clone();
                b[i] ^= flip;
                assert!(decode(&b).is_err(), "byte {i} flip {flip:#x} accepted");
            }
        }
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = encode(&sample_map()).unwrap();
        for cut in [0, 3, 11, 20, bytes.len() - 1] {
            assert!(matches!(
                decode(&bytes[..cut]),
                Err(CheckpointError::Truncated { .. } | CheckpointError::BadMagic(_))
            ));
        }
    }

    #[test]
    fn rank_one_entries_load_as_rows() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"VLAB");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'v');
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&1.5f64.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f64).to_le_bytes());
        let m = decode(&bytes).unwrap();
        assert_eq!(m["v"].shape(), (1, 2));
        assert_eq!(m["v"].data(), &[1.5, -2.0]);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            entries in proptest::collection::btree_map(
                "[a-z/]{1,12}",
                (1usize..4, 1usize..4).prop_flat_map(|(r, c)| {
                    proptest::collection::vec(any::<u64>(), r * c).prop_map(move |bits| (r, c, bits))
                }),
                0..5,
            )
        ) {
            let map: TensorMap = entries
                .into_iter()
                .map(|(k, (r, c, bits))| {
                    (k, Matrix::from_vec(r, c, bits.into_iter().map(f64::from_bits).collect()).unwrap())
                })
                .collect();
            let back = decode(&encode(&map).unwrap()).unwrap();
            prop_assert_eq!(back.len(), map.len());
            for (k, v) in &map {
                let w = &back[k];
                prop_assert_eq!(v.shape(), w.shape());
                for (a, b) in v.data().iter().zip(w.data()) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }

        #[test]
        fn random_byte_flips_never_panic(pos in 0usize..200, flip in 1u8..=255) {
            let mut bytes = encode(&sample_map()).unwrap();
            let p = pos % bytes.len();
            bytes[p] ^= flip;
            let _ = decode(&bytes);
        }
    }
}
