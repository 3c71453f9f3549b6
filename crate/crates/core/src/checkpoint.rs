//! Single-file checkpoint archive: a JSON metadata header (kind + config)
//! followed by named little-endian f64 arrays.
//!
//! Layout: magic `MRSL0001`, u32 kind length + kind bytes, u64 meta length +
//! meta JSON bytes, u32 array count, then per array: u32 name length + name,
//! u32 ndim, u64 dims, f64 data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use morsel_autograd::ParamStore;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MRSL0001";

pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, ArrayD<f64>)>,
}

impl Checkpoint {
    pub fn from_params(kind: &str, meta: serde_json::Value, ps: &ParamStore) -> Self {
        let arrays = ps
            .iter()
            .map(|(_, name, value)| (name.to_string(), value.clone()))
            .collect();
        Self {
            kind: kind.to_string(),
            meta,
            arrays,
        }
    }

    pub fn push(&mut self, name: &str, value: ArrayD<f64>) {
        self.arrays.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Copy stored arrays with the given name prefix into matching
    /// parameters. Shapes must agree.
    pub fn apply_prefix(&self, ps: &mut ParamStore, prefix: &str) -> Result<usize> {
        let mut applied = 0;
        for (name, value) in &self.arrays {
            if !name.starts_with(prefix) {
                continue;
            }
            ps.set(name, value.clone()).map_err(Error::Checkpoint)?;
            applied += 1;
        }
        if applied == 0 {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds no arrays with prefix '{prefix}'"
            )));
        }
        Ok(applied)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e: std::io::Error| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(self.kind.len() as u32).map_err(io)?;
        w.write_all(self.kind.as_bytes()).map_err(io)?;
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        w.write_u64::<LittleEndian>(meta.len() as u64).map_err(io)?;
        w.write_all(&meta).map_err(io)?;
        w.write_u32::<LittleEndian>(self.arrays.len() as u32).map_err(io)?;
        for (name, value) in &self.arrays {
            w.write_u32::<LittleEndian>(name.len() as u32).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            w.write_u32::<LittleEndian>(value.ndim() as u32).map_err(io)?;
            for &d in value.shape() {
                w.write_u64::<LittleEndian>(d as u64).map_err(io)?;
            }
            for &v in value.iter() {
                w.write_f64::<LittleEndian>(v).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let io = |e: std::io::Error| Error::io(path, e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{} is not a checkpoint archive",
                path.display()
            )));
        }
        let kind_len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut kind = vec![0u8; kind_len];
        r.read_exact(&mut kind).map_err(io)?;
        let kind = String::from_utf8(kind)
            .map_err(|_| Error::Checkpoint("invalid kind string".into()))?;
        let meta_len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta).map_err(io)?;
        let meta: serde_json::Value =
            serde_json::from_slice(&meta).map_err(|e| Error::json(path, e))?;
        let count = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("invalid array name".into()))?;
            let ndim = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LittleEndian>().map_err(io)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = vec![0f64; len];
            r.read_f64_into::<LittleEndian>(&mut data).map_err(io)?;
            arrays.push((
                name,
                ArrayD::from_shape_vec(IxDyn(&shape), data)
                    .map_err(|e| Error::Checkpoint(format!("bad array shape: {e}")))?,
            ));
        }
        Ok(Self { kind, meta, arrays })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a '{kind}' checkpoint, found '{}'",
                self.kind
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::derive_rng;
    use morsel_autograd::param::normal;

    #[test]
    fn round_trip_preserves_everything() {
        let mut ps = ParamStore::new();
        let mut rng = derive_rng(1, &[0xC4]);
        ps.register("a.weight", normal(&[3, 4], 1.0, &mut rng));
        ps.register("a.bias", normal(&[4], 1.0, &mut rng));
        let meta = serde_json::json!({"x": 1, "name": "t"});
        let mut ck = Checkpoint::from_params("test", meta.clone(), &ps);
        ck.push("extra", normal(&[2, 2, 2], 1.0, &mut rng));
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("t.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.meta, meta);
        assert_eq!(back.arrays.len(), 3);
        for (orig, loaded) in ck.arrays.iter().zip(back.arrays.iter()) {
            assert_eq!(orig.0, loaded.0);
            assert_eq!(orig.1, loaded.1);
        }
        let mut ps2 = ParamStore::new();
        let mut rng2 = derive_rng(99, &[0xC4]);
        ps2.register("a.weight", normal(&[3, 4], 1.0, &mut rng2));
        ps2.register("a.bias", normal(&[4], 1.0, &mut rng2));
        back.apply_prefix(&mut ps2, "a.").unwrap();
        assert_eq!(
            ps2.value(ps2.id("a.weight").unwrap()),
            ps.value(ps.id("a.weight").unwrap())
        );
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let ps = ParamStore::new();
        let ck = Checkpoint::from_params("alpha", serde_json::json!({}), &ps);
        assert!(ck.expect_kind("beta").is_err());
    }
}
