//! Flat checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "HDTCKPT\0"
//! version    u32
//! header     u64 byte length, then UTF-8 `key=value` lines
//! count      u64
//! entries    count × { u32 name length, name bytes,
//!                      u32 ndim, ndim × u64 extents,
//!                      product(extents) × f64 }
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{HdtError, Result};

pub const MAGIC: &[u8; 8] = b"HDTCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.header.insert(key.to_string(), value.to_string());
    }

    pub fn header_value(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| HdtError::Checkpoint(format!("header is missing `{key}`")))
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn extend(&mut self, entries: impl IntoIterator<Item = (String, Tensor)>) {
        self.tensors.extend(entries);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let mut header = String::new();
        for (k, v) in &self.header {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(HdtError::Checkpoint(format!("unencodable header entry {k}")));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(header.as_bytes())?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(HdtError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(HdtError::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let hlen = read_u64(r)? as usize;
        let mut hbytes = vec![0u8; hlen];
        r.read_exact(&mut hbytes)?;
        let text = String::from_utf8(hbytes)
            .map_err(|_| HdtError::Checkpoint("header is not UTF-8".into()))?;
        let mut header = BTreeMap::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HdtError::Checkpoint(format!("bad header line `{line}`")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = read_u64(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = read_u32(r)? as usize;
            let mut nbytes = vec![0u8; nlen];
            r.read_exact(&mut nbytes)?;
            let name = String::from_utf8(nbytes)
                .map_err(|_| HdtError::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| HdtError::Checkpoint(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            bits in proptest::collection::vec(any::<u64>(), 1..64),
            key in "[a-z_]{1,12}",
            value in "[ -~&&[^=]]{0,20}",
        ) {
            let data: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
            let mut ck = Checkpoint::new();
            ck.set(&key, &value);
            ck.push("a.weight", Tensor::vector(data.clone()));
            ck.push("b", Tensor::scalar(-0.0));
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.header_value(&key).unwrap(), value.as_str());
            let got = back.get("a.weight").unwrap();
            let same = got.data().iter().zip(&data).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same);
            prop_assert_eq!(back.get("b").unwrap().item().to_bits(), (-0.0f64).to_bits());
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"NOTACKPT\x01\x00\x00\x00".to_vec();
        assert!(Checkpoint::read_from(&mut bytes.as_slice()).is_err());
    }
}
