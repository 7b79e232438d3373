//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `XMLT`, `u32` version, then for every
//! parameter in store order: `u32` name length, UTF-8 name, `u32` rank,
//! `rank` x `u64` dims, and `prod(dims)` x `f32` values.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XMLT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + store.num_values() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(
            "bad magic, not an XMLT checkpoint".into(),
        ));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut store = ParamStore::new();
    while r.pos < buf.len() {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 2 {
            return Err(Error::Checkpoint(format!("`{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("size overflow".into()))?,
            "values",
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}

pub fn write_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(store);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "a.W",
            Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 1e-8, -7.5, 2.0]).unwrap(),
        )
        .unwrap();
        s.insert("a.b", Tensor::vector(vec![0.25, -0.5])).unwrap();
        s
    }

    #[test]
    fn roundtrip_is_exact() {
        let s = sample();
        let back = decode_checkpoint(&encode_checkpoint(&s)).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn truncation_is_an_error() {
        let bytes = encode_checkpoint(&sample());
        for cut in [3, 7, 10, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn magic_and_version_are_checked() {
        let mut bytes = encode_checkpoint(&sample());
        bytes[0] = b'Y';
        assert!(decode_checkpoint(&bytes).is_err());
        let mut bytes = encode_checkpoint(&sample());
        bytes[4] = 9;
        assert!(decode_checkpoint(&bytes)
            .unwrap_err()
            .to_string()
            .contains("version"));
    }

    proptest! {
        #[test]
        fn any_f32_store_roundtrips(vals in proptest::collection::vec(-1e6f32..1e6, 1..40)) {
            let mut s = ParamStore::new();
            let n = vals.len();
            s.insert("p", Tensor::vector(vals.iter().map(|v| *v as f64).collect())).unwrap();
            s.insert("q", Tensor::matrix(n, 1, vals.iter().rev().map(|v| *v as f64).collect()).unwrap()).unwrap();
            let back = decode_checkpoint(&encode_checkpoint(&s)).unwrap();
            prop_assert_eq!(s, back);
        }
    }
}
