//! Checkpoint archives: named tensors plus string metadata in one
//! safetensors file, written atomically.

use std::collections::HashMap;
use std::path::Path;

use candle_core::Tensor;
use safetensors::SafeTensors;

use crate::nn::DEVICE;
use crate::store::write_atomic;
use crate::{Error, Result};

pub const FORMAT: &str = "fontgen-checkpoint/1";

pub struct Archive {
    pub tensors: HashMap<String, Tensor>,
    pub metadata: HashMap<String, String>,
}

impl Archive {
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key}")))
    }

    /// Tensors whose name starts with `prefix`, prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(prefix).map(|k| (k.to_string(), t.clone())))
            .collect()
    }
}

pub fn write_archive(path: &Path, tensors: &[(String, Tensor)], mut metadata: HashMap<String, String>) -> Result<()> {
    metadata.insert("format".into(), FORMAT.into());
    let bytes = safetensors::serialize(tensors.iter().map(|(k, t)| (k.as_str(), t)), Some(metadata))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let metadata = header.metadata().clone().unwrap_or_default();
    if metadata.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(Error::Checkpoint(format!("{} is not a {FORMAT} archive", path.display())));
    }
    let tensors = candle_core::safetensors::load_buffer(&bytes, &DEVICE)?;
    Ok(Archive { tensors, metadata })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.safetensors");
        let t = Tensor::new(&[0.1f64, -2.5e-300, f64::MAX], &DEVICE).unwrap();
        let meta = HashMap::from([("step".to_string(), "7".to_string())]);
        write_archive(&path, &[("x.w".into(), t.clone())], meta).unwrap();
        let a = read_archive(&path).unwrap();
        assert_eq!(a.meta("step").unwrap(), "7");
        let back = a.with_prefix("x.")["w"].to_vec1::<f64>().unwrap();
        let orig = t.to_vec1::<f64>().unwrap();
        assert!(back.iter().zip(&orig).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.safetensors");
        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(read_archive(&path), Err(Error::Checkpoint(_))));
    }
}
