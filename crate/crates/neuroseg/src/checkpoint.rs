//! Checkpoint directory format: `manifest.json` (ordered entries with
//! name, shape, dtype, byte_offset) plus `weights.bin` (little-endian
//! f32). Entry order in the manifest is the model's canonical state
//! order, so save → load → save is byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use neuroseg_core::state::StateEntry;

use crate::{AppError, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
}

pub fn save_checkpoint(entries: &[StateEntry<f32>], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::with_capacity(entries.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, shape, data) in entries {
        let count: usize = shape.iter().product();
        if data.len() != count {
            return Err(AppError::config(format!(
                "checkpoint entry {name}: shape {shape:?} needs {count} values, got {}",
                data.len()
            )));
        }
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: shape.clone(),
            dtype: "f32".to_string(),
            byte_offset: blob.len() as u64,
        });
        blob.extend(data.iter().flat_map(|v| v.to_le_bytes()));
    }
    let mut doc = serde_json::to_string_pretty(&manifest)?;
    doc.push('\n');
    fs::write(dir.join("manifest.json"), doc)?;
    fs::write(dir.join("weights.bin"), blob)?;
    Ok(())
}

/// Loads entries in manifest order.
pub fn load_checkpoint(dir: &Path) -> Result<Vec<StateEntry<f32>>> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| AppError::config(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Vec<ManifestEntry> = serde_json::from_str(&text)
        .map_err(|e| AppError::config(format!("{}: {e}", manifest_path.display())))?;
    let blob = fs::read(dir.join("weights.bin"))
        .map_err(|e| AppError::config(format!("{}: {e}", dir.join("weights.bin").display())))?;

    let mut entries = Vec::with_capacity(manifest.len());
    for e in &manifest {
        if e.dtype != "f32" {
            return Err(AppError::config(format!(
                "checkpoint entry {}: unsupported dtype {:?}",
                e.name, e.dtype
            )));
        }
        let count: usize = e.shape.iter().product();
        let lo = e.byte_offset as usize;
        let hi = lo + count * 4;
        if hi > blob.len() {
            return Err(AppError::config(format!(
                "checkpoint entry {}: needs bytes {lo}..{hi}, weights.bin holds {}",
                e.name,
                blob.len()
            )));
        }
        let data: Vec<f32> = blob[lo..hi]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push((e.name.clone(), e.shape.clone(), data));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_entries() -> Vec<StateEntry<f32>> {
        vec![
            ("head.weight".into(), vec![1, 2, 1, 1, 1], vec![0.25, -1.5]),
            ("head.bias".into(), vec![1], vec![3.0e-8]),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact_and_resave_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let entries = sample_entries();
        save_checkpoint(&entries, dir.path()).unwrap();
        let first_manifest = fs::read(dir.path().join("manifest.json")).unwrap();
        let first_blob = fs::read(dir.path().join("weights.bin")).unwrap();

        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.len(), entries.len());
        for ((n0, s0, d0), (n1, s1, d1)) in entries.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(s0, s1);
            for (a, b) in d0.iter().zip(d1) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        save_checkpoint(&back, dir.path()).unwrap();
        assert_eq!(fs::read(dir.path().join("manifest.json")).unwrap(), first_manifest);
        assert_eq!(fs::read(dir.path().join("weights.bin")).unwrap(), first_blob);
    }

    #[test]
    fn manifest_preserves_order_and_offsets() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&sample_entries(), dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let parsed: Vec<serde_json::Value> = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed[0]["name"], "head.weight");
        assert_eq!(parsed[0]["byte_offset"], 0);
        assert_eq!(parsed[1]["name"], "head.bias");
        assert_eq!(parsed[1]["byte_offset"], 8);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&sample_entries(), dir.path()).unwrap();
        let blob = fs::read(dir.path().join("weights.bin")).unwrap();
        fs::write(dir.path().join("weights.bin"), &blob[..blob.len() - 1]).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
