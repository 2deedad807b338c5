//! Embedding files: a JSON descriptor next to a raw little-endian float32 blob and a
//! newline-separated id list.
//!
//! ```text
//! <stem>.json   {"n":..,"d":..,"dtype":"float32","normalized":..,"data_file":"<stem>.f32","ids_file":"<stem>.ids"}
//! <stem>.f32    n*d float32, row-major, little-endian
//! <stem>.ids    one id per line
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EmbeddingMatrix, Result, VectorError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingDescriptor {
    pub n: usize,
    pub d: usize,
    pub dtype: String,
    pub normalized: bool,
    pub data_file: String,
    pub ids_file: String,
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map(|p| p.join(name)).unwrap_or_else(|| PathBuf::from(name))
}

/// Write `m` as `<stem>.json` + `<stem>.f32` + `<stem>.ids`; returns the descriptor path.
pub fn write_embeddings(m: &EmbeddingMatrix, dir: &Path, stem: &str) -> Result<PathBuf> {
    if m.ids().iter().any(|id| id.contains('\n')) {
        return Err(VectorError::Format("ids must not contain newlines".into()));
    }
    let desc = EmbeddingDescriptor {
        n: m.n(),
        d: m.d(),
        dtype: "float32".into(),
        normalized: m.is_normalized(),
        data_file: format!("{stem}.f32"),
        ids_file: format!("{stem}.ids"),
    };
    let mut blob = Vec::with_capacity(m.data().len() * 4);
    for v in m.data() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(dir.join(&desc.data_file), blob)?;
    let mut ids = m.ids().join("\n");
    if !ids.is_empty() {
        ids.push('\n');
    }
    fs::write(dir.join(&desc.ids_file), ids)?;
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_string_pretty(&desc).expect("descriptor serializes"))?;
    Ok(path)
}

pub fn read_embeddings(descriptor: &Path) -> Result<EmbeddingMatrix> {
    let desc: EmbeddingDescriptor = serde_json::from_slice(&fs::read(descriptor)?)
        .map_err(|e| VectorError::Format(format!("{}: {e}", descriptor.display())))?;
    if desc.dtype != "float32" {
        return Err(VectorError::Format(format!("unsupported dtype {:?}", desc.dtype)));
    }
    let blob = fs::read(sibling(descriptor, &desc.data_file))?;
    if blob.len() != desc.n * desc.d * 4 {
        return Err(VectorError::Format(format!(
            "blob has {} bytes, expected {}",
            blob.len(),
            desc.n * desc.d * 4
        )));
    }
    let data = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    let ids: Vec<String> = fs::read_to_string(sibling(descriptor, &desc.ids_file))?
        .lines()
        .map(str::to_string)
        .collect();
    if ids.len() != desc.n {
        return Err(VectorError::Format(format!("{} ids for {} rows", ids.len(), desc.n)));
    }
    EmbeddingMatrix::new(desc.d, data, ids, desc.normalized)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vectors::tests::random_unit;

    #[test]
    fn bit_exact_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = random_unit(37, 9, 21);
        let path = write_embeddings(&m, dir.path(), "slide-a").unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back, m);
        let bits: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u32> = m.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, want);
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = random_unit(4, 3, 22);
        let path = write_embeddings(&m, dir.path(), "x").unwrap();
        let blob = dir.path().join("x.f32");
        let mut bytes = fs::read(&blob).unwrap();
        bytes.pop();
        fs::write(&blob, bytes).unwrap();
        assert!(matches!(read_embeddings(&path), Err(VectorError::Format(_))));
    }
}
