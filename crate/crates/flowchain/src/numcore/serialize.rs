//! Parameter container: a JSON header (names, shapes, byte offsets) followed
//! by a flat blob of little-endian f64 values.
//!
//! Layout: 8-byte magic `FLOWPRM1`, u64 LE header length, header JSON,
//! then the data section. Offsets in the header are relative to the start
//! of the data section.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FLOWPRM1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    params: Vec<ParamRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: [usize; 2],
    offset: u64,
}

pub fn write_params(store: &ParamStore, path: &Path) -> Result<()> {
    let mut records = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for id in store.ids() {
        let t = store.get(id);
        records.push(ParamRecord {
            name: store.name(id).to_string(),
            shape: t.shape(),
            offset,
        });
        offset += (t.len() * 8) as u64;
    }
    let header = serde_json::to_vec(&Header { version: FORMAT_VERSION, params: records })?;

    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    for id in store.ids() {
        for v in store.get(id).data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Loads values into an existing store built with the same parameter set.
/// Every stored record must match a registered parameter by name and shape,
/// and every registered parameter must be present.
pub fn read_params_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|_| corrupt("file too short for magic"))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes).map_err(|_| corrupt("missing header length"))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes).map_err(|_| corrupt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| corrupt(&format!("bad header json: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported parameter container version {} (expected {FORMAT_VERSION})",
            header.version
        )));
    }

    let mut data = Vec::new();
    f.read_to_end(&mut data)?;

    let mut seen = vec![false; store.len()];
    for rec in &header.params {
        let id = store
            .id_by_name(&rec.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{}'", rec.name)))?;
        let expected_shape = store.get(id).shape();
        if rec.shape != expected_shape {
            return Err(Error::Checkpoint(format!(
                "parameter '{}' has shape {:?}, expected {:?}",
                rec.name, rec.shape, expected_shape
            )));
        }
        let count = rec.shape[0] * rec.shape[1];
        let start = rec.offset as usize;
        let end = start + count * 8;
        if end > data.len() {
            return Err(corrupt(&format!("data section truncated at parameter '{}'", rec.name)));
        }
        let mut values = Vec::with_capacity(count);
        for chunk in data[start..end].chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        *store.get_mut(id) = Tensor::from_vec(rec.shape[0], rec.shape[1], values);
        seen[id.index()] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        let name = store.name(super::params::ParamId(missing)).to_string();
        return Err(Error::Checkpoint(format!("parameter '{name}' missing from container")));
    }
    Ok(())
}

fn corrupt(msg: &str) -> Error {
    Error::Checkpoint(format!("corrupt parameter container: {msg}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.register("a.w", Tensor::from_vec(2, 3, vec![1.0, -2.5, 3.25, 0.0, 1e-300, -7.125]));
        s.register("a.b", Tensor::row(&[0.5, 0.25, 9.0]));
        s
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        let store = sample_store();
        write_params(&store, &path).unwrap();

        let mut loaded = sample_store();
        for id in loaded.ids().collect::<Vec<_>>() {
            for v in loaded.get_mut(id).data_mut() {
                *v = f64::NAN;
            }
        }
        read_params_into(&mut loaded, &path).unwrap();
        for id in store.ids() {
            let a = store.get(id).data();
            let b = loaded.get(id).data();
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn truncated_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        let store = sample_store();
        write_params(&store, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        let mut loaded = sample_store();
        let err = read_params_into(&mut loaded, &path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn missing_parameter_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.bin");
        let mut partial = ParamStore::new();
        partial.register("a.w", Tensor::zeros(2, 3));
        write_params(&partial, &path).unwrap();
        let mut full = sample_store();
        let err = read_params_into(&mut full, &path).unwrap_err();
        assert!(err.to_string().contains("a.b"), "{err}");
    }
}
