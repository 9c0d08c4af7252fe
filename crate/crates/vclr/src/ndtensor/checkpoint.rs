//! Checkpoint files: one JSON header line describing the tensor table,
//! followed by the raw little-endian f64 payload. Round trips are bit exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::param::ParamStore;
use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
    /// Element count.
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    endianness: String,
    step: u64,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Writes every parameter in store order. `meta` is free-form and comes back
/// verbatim from `load_checkpoint`.
pub fn save_checkpoint(
    store: &ParamStore,
    meta: serde_json::Value,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for (name, t) in store.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.numel(),
        });
        offset += (t.numel() * 8) as u64;
    }
    let header = Header {
        endianness: "little".to_string(),
        step: store.step(),
        meta,
        tensors,
    };

    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (_, t) in store.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back into a fresh store. Parameters are recreated in
/// the order the header lists them; `requires_grad` controls whether they
/// rejoin the autodiff graph (true for a student, false for a teacher).
pub fn load_checkpoint(
    path: &Path,
    requires_grad: bool,
) -> Result<(ParamStore, serde_json::Value), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 {
            return Err(CheckpointError::Corrupt("missing header newline".into()));
        }
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.endianness != "little" {
        return Err(CheckpointError::Corrupt(format!(
            "unsupported endianness `{}`",
            header.endianness
        )));
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut store = ParamStore::new();
    store.set_step(header.step);
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        if numel != entry.len {
            return Err(CheckpointError::Corrupt(format!(
                "tensor `{}`: shape {:?} does not hold {} elements",
                entry.name, entry.shape, entry.len
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.len * 8;
        if end > payload.len() {
            return Err(CheckpointError::Corrupt(format!(
                "tensor `{}` extends past the payload ({} > {})",
                entry.name,
                end,
                payload.len()
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = if requires_grad {
            Tensor::param(data, &entry.shape)
        } else {
            Tensor::new(data, &entry.shape)
        }
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        store
            .insert(&entry.name, tensor)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    }
    Ok((store, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn awkward_store() -> ParamStore {
        let mut s = ParamStore::new();
        // values chosen to stress bit-exactness: subnormal, negative zero,
        // huge, tiny, and a value with a long binary tail
        s.insert(
            "w",
            Tensor::param(vec![1.0 / 3.0, -0.0, 1e-310, 8.98e307], &[2, 2]).unwrap(),
        )
        .unwrap();
        s.insert("b", Tensor::param(vec![f64::MIN_POSITIVE], &[1]).unwrap())
            .unwrap();
        s.set_step(1234);
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let store = awkward_store();
        save_checkpoint(&store, json!({"note": "test"}), &path).unwrap();
        let (loaded, meta) = load_checkpoint(&path, true).unwrap();

        assert_eq!(meta, json!({"note": "test"}));
        assert_eq!(loaded.step(), 1234);
        let names: Vec<&str> = loaded.names().collect();
        assert_eq!(names, vec!["w", "b"]);
        for (name, t) in store.iter() {
            let l = loaded.get(name).unwrap();
            assert_eq!(l.shape(), t.shape());
            let want: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let got: Vec<u64> = l.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(got, want, "bit pattern drift in `{name}`");
            assert!(l.requires_grad());
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&awkward_store(), json!(null), &path).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 4]).unwrap();
        assert!(matches!(
            load_checkpoint(&path, true),
            Err(CheckpointError::Corrupt(_))
        ));
    }

    #[test]
    fn missing_newline_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        std::fs::write(&path, b"{\"endianness\":\"little\"").unwrap();
        assert!(matches!(
            load_checkpoint(&path, true),
            Err(CheckpointError::Corrupt(_))
        ));
    }
}
