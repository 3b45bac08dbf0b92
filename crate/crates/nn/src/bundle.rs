//! Model bundles: a JSON manifest plus one little-endian f64 blob.
//!
//! ```text
//! <dir>/manifest.json   { "model": <caller JSON>, "arrays": [{name, shape, offset, len}] }
//! <dir>/params.bin      arrays concatenated in manifest order, 8 bytes each
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{NnError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        NamedArray { name: name.into(), shape, data }
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

pub fn save_bundle(dir: &Path, model: &Value, arrays: &[NamedArray]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(arrays.len());
    let mut blob = Vec::new();
    let mut offset = 0;
    for a in arrays {
        if a.shape.iter().product::<usize>() != a.data.len() {
            return Err(NnError::Bundle(format!("array '{}' does not match its shape", a.name)));
        }
        entries.push(ArrayEntry { name: a.name.clone(), shape: a.shape.clone(), offset, len: a.data.len() });
        for v in &a.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += a.data.len();
    }
    let manifest = json!({ "format": "f64-le", "model": model, "arrays": entries });
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join(PARAMS_FILE), blob)?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<(Value, Vec<NamedArray>)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut manifest: Value = serde_json::from_str(&text)?;
    let entries: Vec<ArrayEntry> = serde_json::from_value(
        manifest.get_mut("arrays").map(Value::take).ok_or_else(|| NnError::Bundle("manifest lacks 'arrays'".into()))?,
    )?;
    let blob = fs::read(dir.join(PARAMS_FILE))?;
    if blob.len() % 8 != 0 {
        return Err(NnError::Bundle("parameter blob length is not a multiple of 8".into()));
    }
    let floats: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut arrays = Vec::with_capacity(entries.len());
    for e in entries {
        let end = e.offset + e.len;
        if end > floats.len() || e.shape.iter().product::<usize>() != e.len {
            return Err(NnError::Bundle(format!("array '{}' is truncated or misshapen", e.name)));
        }
        arrays.push(NamedArray::new(e.name, e.shape, floats[e.offset..end].to_vec()));
    }
    let model = manifest.get_mut("model").map(Value::take).unwrap_or(Value::Null);
    Ok((model, arrays))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let arrays = vec![
            NamedArray::new("a", vec![2, 2], vec![0.1, -2.5, f64::MIN_POSITIVE, 1e300]),
            NamedArray::new("b", vec![3], vec![1.0 / 3.0, 0.0, -0.0]),
        ];
        let model = json!({"layers": 2, "seed": 42});
        save_bundle(dir.path(), &model, &arrays).unwrap();
        let (m, back) = load_bundle(dir.path()).unwrap();
        assert_eq!(m, model);
        assert_eq!(back.len(), 2);
        for (x, y) in arrays.iter().zip(&back) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.shape, y.shape);
            let xb: Vec<u64> = x.data.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn misshapen_array_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad = vec![NamedArray::new("a", vec![3], vec![1.0])];
        assert!(save_bundle(dir.path(), &Value::Null, &bad).is_err());
    }
}
