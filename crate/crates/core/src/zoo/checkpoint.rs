//! `ZJK1` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "ZJK1" | version u32 = 1 | kind_len u16 | kind utf-8 | spec digest [32]
//! entry_count u32
//! per entry: path_len u16 | path utf-8 | dtype u8 (0 = f32) | ndim u8
//!            | dims u64 * ndim | payload f32 * prod(dims) | crc32(payload) u32
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ZJK1";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub path: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Entry {
    pub fn from_tensor(path: String, t: &Tensor) -> Self {
        Entry { path, shape: t.shape().to_vec(), data: t.data().iter().map(|&v| v as f32).collect() }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::raw(self.shape.clone(), self.data.iter().map(|&v| v as f64).collect())
    }

    fn payload_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Serialised weights: model kind, spec digest and named f32 tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub digest: [u8; 32],
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn entry(&self, path: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.path == path)
    }

    pub fn digest_hex(&self) -> String {
        self.digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Same kind, digest, and entry layout (paths and shapes, in order).
    pub fn check_compatible(&self, other: &Checkpoint) -> Result<()> {
        if self.kind != other.kind || self.digest != other.digest {
            return Err(Error::SpecMismatch(format!(
                "{} ({}) vs {} ({})",
                self.kind,
                &self.digest_hex()[..12],
                other.kind,
                &other.digest_hex()[..12]
            )));
        }
        if self.entries.len() != other.entries.len() {
            return Err(Error::SpecMismatch("checkpoints hold different parameter sets".into()));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.path != b.path || a.shape != b.shape {
                return Err(Error::SpecMismatch(format!(
                    "entry {}{:?} vs {}{:?}",
                    a.path, a.shape, b.path, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Builds a checkpoint with the same layout and new values per entry.
    pub fn map_entries(&self, mut f: impl FnMut(usize, &Entry) -> Vec<f32>) -> Checkpoint {
        let entries = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| Entry { path: e.path.clone(), shape: e.shape.clone(), data: f(i, e) })
            .collect();
        Checkpoint { kind: self.kind.clone(), digest: self.digest, entries }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind.len() as u16).to_le_bytes());
        out.extend_from_slice(self.kind.as_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.path.len() as u16).to_le_bytes());
            out.extend_from_slice(e.path.as_bytes());
            out.push(DTYPE_F32);
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let payload = e.payload_bytes();
            out.extend_from_slice(&payload);
            out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
        }
        let klen = r.u16()? as usize;
        let kind = String::from_utf8(r.take(klen)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("model kind is not utf-8".into()))?;
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let plen = r.u16()? as usize;
            let path = String::from_utf8(r.take(plen)?.to_vec())
                .map_err(|_| Error::CorruptCheckpoint("entry path is not utf-8".into()))?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::CorruptCheckpoint(format!("unknown dtype {dtype} for `{path}`")));
            }
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            let mut numel: usize = 1;
            for _ in 0..ndim {
                let d = r.u64()?;
                let d = usize::try_from(d).map_err(|_| Error::CorruptCheckpoint("dimension overflow".into()))?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::CorruptCheckpoint("dimension overflow".into()))?;
                shape.push(d);
            }
            if ndim == 0 || numel == 0 {
                return Err(Error::CorruptCheckpoint(format!("empty shape for `{path}`")));
            }
            let nbytes = numel
                .checked_mul(4)
                .ok_or_else(|| Error::CorruptCheckpoint("payload overflow".into()))?;
            let payload = r.take(nbytes)?;
            let crc = r.u32()?;
            if crc32fast::hash(payload) != crc {
                return Err(Error::ChecksumMismatch(path));
            }
            let data: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::CorruptCheckpoint(format!("non-finite value in `{path}`")));
            }
            entries.push(Entry { path, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { kind, digest, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            kind: "mlp".into(),
            digest: [7; 32],
            entries: vec![
                Entry { path: "layers[0].bias".into(), shape: vec![2], data: vec![0.5, -1.25] },
                Entry { path: "layers[0].weight".into(), shape: vec![2, 1], data: vec![3.0, 1e-3] },
            ],
        }
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"ZJK1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(b[8..10].try_into().unwrap()), 3);
        assert_eq!(&b[10..13], b"mlp");
        assert_eq!(&b[13..45], &[7; 32]);
        assert_eq!(u32::from_le_bytes(b[45..49].try_into().unwrap()), 2);
    }

    #[test]
    fn truncation_and_corruption() {
        let b = sample().to_bytes();
        for cut in [0, 3, 20, b.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&b[..cut]), Err(Error::CorruptCheckpoint(_))));
        }
        // first payload byte of the first entry: header 49 + path_len 2 + 14 + dtype/ndim 2 + dims 8
        let mut flipped = b.clone();
        flipped[49 + 2 + 14 + 2 + 8] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::ChecksumMismatch(p)) if p == "layers[0].bias"));
        let mut magic = b.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::CorruptCheckpoint(_))));
        let mut extra = b;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_byte_identical(vals in proptest::collection::vec(-1e6f32..1e6, 1..40), kind in "[a-z_]{1,10}") {
            let ck = Checkpoint {
                kind,
                digest: [3; 32],
                entries: vec![Entry { path: "w".into(), shape: vec![vals.len()], data: vals }],
            };
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &ck);
            prop_assert_eq!(back.to_bytes(), bytes);
        }

        #[test]
        fn any_single_byte_mutation_is_detected(pos in 0usize..80, bit in 0u8..8) {
            let bytes = sample().to_bytes();
            let pos = pos % bytes.len();
            let mut m = bytes.clone();
            m[pos] ^= 1 << bit;
            // mutated files never load back as the original
            if let Ok(ck) = Checkpoint::from_bytes(&m) {
                prop_assert_ne!(ck, sample());
            }
        }
    }
}
