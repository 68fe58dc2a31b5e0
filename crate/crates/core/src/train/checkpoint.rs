//! Binary parameter container.
//!
//! ```text
//! "TUNA" | version u32 | entries u32 | fingerprint u64
//! config: len u64 | UTF-8 bytes
//! entry*: name_len u32 | name | rank u32 | dims u64* | data f64*
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{Component, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TUNA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Fingerprint of the frozen tensors the entries were trained against.
    pub fingerprint: u64,
    pub config: String,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// The trainable tensors of `store`.
    pub fn trainable(store: &ParamStore, config: impl Into<String>) -> Self {
        Self::collect(store, config, |trainable, _| trainable)
    }

    /// Every tensor of `store`, frozen ones included.
    pub fn full(store: &ParamStore, config: impl Into<String>) -> Self {
        Self::collect(store, config, |_, _| true)
    }

    /// Only backbone tensors; the format used to ship stand-in weights.
    pub fn backbone(store: &ParamStore) -> Self {
        Self::collect(store, "", |_, c| c == Component::Backbone)
    }

    fn collect(store: &ParamStore, config: impl Into<String>, keep: impl Fn(bool, Component) -> bool) -> Self {
        let tensors = store
            .iter()
            .filter(|(_, p)| keep(p.trainable, p.component))
            .map(|(n, p)| (n.to_string(), p.tensor().clone()))
            .collect();
        Checkpoint {
            fingerprint: store.frozen_fingerprint(),
            config: config.into(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint: bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let entries = r.u32()?;
        let fingerprint = r.u64()?;
        let config_len = r.len_u64()?;
        let config = String::from_utf8(r.take(config_len)?.to_vec())
            .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
        let mut tensors = BTreeMap::new();
        for _ in 0..entries {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.len_u64()?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("{name}: shape {shape:?} overflows")))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format(format!("{name}: too large")))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate entry {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { fingerprint, config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Writes every entry into `store`. Checks all entries first, so a
    /// failure leaves the store untouched. A fingerprint mismatch is a
    /// compatibility error unless `force` is set.
    pub fn apply(&self, store: &mut ParamStore, force: bool) -> Result<()> {
        let actual = store.frozen_fingerprint();
        if actual != self.fingerprint && !force {
            return Err(Error::Compatibility(format!(
                "checkpoint was trained against backbone {:016x}, this model has {actual:016x}",
                self.fingerprint
            )));
        }
        for (name, t) in &self.tensors {
            let p = store
                .get(name)
                .ok_or_else(|| Error::Compatibility(format!("checkpoint entry {name} has no matching parameter")))?;
            if p.tensor().shape() != t.shape() {
                return Err(Error::Compatibility(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    p.tensor().shape()
                )));
            }
        }
        for (name, t) in &self.tensors {
            store.set(name, t.clone())?;
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated checkpoint: wanted {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Format(format!("length {v} does not fit in memory")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("bb.w", Tensor::new([2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap(), Component::Backbone, false)
            .unwrap();
        s.insert("ad.w", Tensor::new([3], vec![0.1, f64::MIN_POSITIVE, -7.0]).unwrap(), Component::Tuna, true)
            .unwrap();
        s.insert("ad.s2", Tensor::scalar(0.0), Component::Scales, true).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let s = store();
        let ck = Checkpoint::trainable(&s, "a.b = 1\n");
        assert_eq!(ck.tensors.len(), 2);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        for (n, t) in &back.tensors {
            assert_eq!(t.to_le_bytes(), s.tensor(n).unwrap().to_le_bytes());
        }
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let mut bytes = Checkpoint::trainable(&store(), "").to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_a_format_error() {
        let bytes = Checkpoint::trainable(&store(), "").to_bytes();
        for cut in [3, 12, 25, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
    }

    #[test]
    fn fingerprint_mismatch_needs_force() {
        let src = store();
        let mut ck = Checkpoint::trainable(&src, "");
        ck.tensors.get_mut("ad.s2").unwrap().data_mut()[0] = 9.0;
        let mut other = store();
        other.set("bb.w", Tensor::zeros([2, 2])).unwrap();
        let err = ck.apply(&mut other, false).unwrap_err();
        assert!(matches!(err, Error::Compatibility(_)));
        assert_eq!(other.tensor("ad.s2").unwrap().item(), 0.0);
        ck.apply(&mut other, true).unwrap();
        assert_eq!(other.tensor("ad.s2").unwrap().item(), 9.0);
    }

    #[test]
    fn unknown_entry_loads_nothing() {
        let mut ck = Checkpoint::trainable(&store(), "");
        ck.tensors.get_mut("ad.s2").unwrap().data_mut()[0] = 5.0;
        ck.tensors.insert("zz.extra".into(), Tensor::scalar(1.0));
        let mut s = store();
        assert!(ck.apply(&mut s, false).is_err());
        assert_eq!(s.tensor("ad.s2").unwrap().item(), 0.0);
    }
}
