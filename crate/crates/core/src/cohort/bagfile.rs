//! Binary bag format: a 20-byte little-endian header (`FBAG`, version u16,
//! flags u16, K u32, d u32, label u32) followed by `K·d` f32 values in row
//! order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::DenseMatrix;

pub const BAG_MAGIC: &[u8; 4] = b"FBAG";
pub const BAG_VERSION: u16 = 1;
pub const BAG_HEADER_LEN: usize = 20;
/// Set on bags holding synthetic embeddings.
pub const FLAG_SYNTHETIC: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBag {
    pub features: DenseMatrix,
    pub label: usize,
    pub flags: u16,
}

impl FeatureBag {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let (k, d) = (self.features.rows(), self.features.cols());
        if let Some(index) = self.features.as_slice().iter().position(|v| !(*v as f32).is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let mut out = Vec::with_capacity(BAG_HEADER_LEN + 4 * k * d);
        out.extend_from_slice(BAG_MAGIC);
        out.extend_from_slice(&BAG_VERSION.to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        for v in [k, d, self.label] {
            let v = u32::try_from(v).map_err(|_| Error::Config(format!("bag header field {v} exceeds u32")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in self.features.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::BagFormat { path: path.to_path_buf(), reason };
        if bytes.len() < BAG_HEADER_LEN {
            return Err(fail(format!("truncated header: expected {BAG_HEADER_LEN} bytes, got {}", bytes.len())));
        }
        if &bytes[..4] != BAG_MAGIC {
            return Err(fail(format!("bad magic {:?}", &bytes[..4])));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let version = u16_at(4);
        if version != BAG_VERSION {
            return Err(fail(format!("unsupported version {version}")));
        }
        let flags = u16_at(6);
        let (k, d, label) = (u32_at(8), u32_at(12), u32_at(16));
        let expected = BAG_HEADER_LEN + 4 * k * d;
        if bytes.len() != expected {
            return Err(fail(format!("expected {expected} bytes for K={k}, d={d}, got {}", bytes.len())));
        }
        let data = bytes[BAG_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let features = DenseMatrix::from_vec(k, d, data).map_err(|e| fail(e.to_string()))?;
        Ok(FeatureBag { features, label, flags })
    }
}

pub fn write_bag(path: impl AsRef<Path>, bag: &FeatureBag) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bag.encode()?).map_err(|e| Error::io(path, e))
}

pub fn read_bag(path: impl AsRef<Path>) -> Result<FeatureBag> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureBag::decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::spawn_stream;
    use proptest::prelude::*;

    fn random_bag(k: usize, d: usize, seed: u64) -> FeatureBag {
        let mut rng = spawn_stream(seed, 0);
        let data = (0..k * d).map(|_| rng.standard_normal() * 10.0).collect();
        FeatureBag { features: DenseMatrix::from_vec(k, d, data).unwrap(), label: 3, flags: 0 }
    }

    #[test]
    fn round_trip_quantizes_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bag");
        let bag = random_bag(7, 5, 1);
        write_bag(&path, &bag).unwrap();
        let back = read_bag(&path).unwrap();
        assert_eq!(back.label, 3);
        assert_eq!((back.features.rows(), back.features.cols()), (7, 5));
        for (a, b) in back.features.as_slice().iter().zip(bag.features.as_slice()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 20 + 4 * 7 * 5);
    }

    #[test]
    fn truncated_file_names_byte_counts() {
        let bytes = random_bag(4, 3, 2).encode().unwrap();
        let err = FeatureBag::decode(&bytes[..bytes.len() - 4], Path::new("t.bag")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 68") && msg.contains("got 64"), "{msg}");
        assert!(FeatureBag::decode(&bytes[..10], Path::new("t.bag")).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = random_bag(2, 2, 3).encode().unwrap();
        bytes[4] = 9;
        assert!(FeatureBag::decode(&bytes, Path::new("v.bag")).unwrap_err().to_string().contains("version"));
        bytes[0] = b'X';
        assert!(FeatureBag::decode(&bytes, Path::new("m.bag")).unwrap_err().to_string().contains("magic"));
    }

    proptest! {
        #[test]
        fn encoding_is_idempotent(k in 1usize..12, d in 1usize..9, seed in any::<u64>(), flags in any::<u16>()) {
            let mut bag = random_bag(k, d, seed);
            bag.flags = flags;
            let once = bag.encode().unwrap();
            let decoded = FeatureBag::decode(&once, Path::new("p")).unwrap();
            prop_assert_eq!(decoded.flags, flags);
            prop_assert_eq!(decoded.encode().unwrap(), once);
        }
    }
}
