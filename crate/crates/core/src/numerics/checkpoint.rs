//! `GPK1` parameter checkpoints.
//!
//! Layout: the four magic bytes `GPK1`, a little-endian `u64` manifest length,
//! the UTF-8 JSON manifest, then every tensor as little-endian `f64` in
//! manifest order. Offsets in the manifest are bytes from the payload start.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"GPK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<ManifestEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    store: &ParamStore,
    metadata: serde_json::Value,
) -> Result<(), NumericsError> {
    let mut offset = 0u64;
    let tensors = store
        .iter()
        .map(|p| {
            let e = ManifestEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset };
            offset += 8 * p.value.len() as u64;
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest { tensors, metadata }).map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    let mut buf = Vec::with_capacity(offset as usize);
    for p in store.iter() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ParamStore, serde_json::Value), NumericsError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumericsError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut manifest = vec![0u8; len];
    r.read_exact(&mut manifest)?;
    let manifest: Manifest = serde_json::from_slice(&manifest).map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut store = ParamStore::new();
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * n;
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| NumericsError::Checkpoint(format!("tensor `{}` runs past the payload", e.name)))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        store.insert(e.name, Tensor::new(e.shape, data)?)?;
    }
    Ok((store, manifest.metadata))
}

pub fn save(path: &Path, store: &ParamStore, metadata: serde_json::Value) -> Result<(), NumericsError> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(f, store, metadata)
}

pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value), NumericsError> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seeded;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = seeded(3);
        let mut s = ParamStore::new();
        s.init_weight("gap/w", &[3, 5], 3, &mut rng).unwrap();
        s.insert("denoiser/odd", Tensor::new(vec![4], vec![f64::MIN_POSITIVE, -0.0, 1e300, 1.0 / 3.0]).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &s, serde_json::json!({"k": 1})).unwrap();
        assert_eq!(&buf[..4], b"GPK1");
        let (back, meta) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(meta["k"], 1);
        for (a, b) in s.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn rejects_wrong_magic() {
        let err = read_checkpoint(&b"GPK2\0\0\0\0\0\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, NumericsError::Checkpoint(_)));
    }
}
