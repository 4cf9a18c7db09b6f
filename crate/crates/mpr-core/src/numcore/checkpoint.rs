//! Flat binary checkpoint format.
//!
//! Layout: magic `MPRCKPT1`, then u64 tensor count, then per tensor:
//! u64 name length, name bytes (utf-8), u64 rank, dims as u64, payload as
//! little-endian f64. Round-trips are bit-exact.

use crate::error::{CoreError, CoreResult};
use crate::numcore::nn::ParamStore;
use crate::numcore::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MPRCKPT1";

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> CoreResult<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, t) in store.entries() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u64).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> CoreResult<ParamStore> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::config(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let count = read_u64(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| CoreError::Serde(format!("checkpoint name not utf-8: {e}")))?;
        let rank = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        store.insert(name, Tensor::new(shape, data)?.with_grad());
    }
    Ok(store)
}

fn read_u64(r: &mut impl Read) -> CoreResult<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        let mut store = ParamStore::new();
        store.insert(
            "layer.w",
            Tensor::new(vec![2, 3], vec![0.1, -0.2, 1.0 / 3.0, f64::MIN_POSITIVE, 1e300, -0.0])
                .unwrap()
                .with_grad(),
        );
        store.insert("layer.b", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad());
        store.insert("scalar", Tensor::scalar(42.0).with_grad());
        save_checkpoint(&path, &store).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(store.bit_identical(&loaded));
    }

    #[test]
    fn bad_magic_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.ckpt");
        std::fs::write(&path, b"NOTACKPT____").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CoreError::Config(_))));
    }
}
