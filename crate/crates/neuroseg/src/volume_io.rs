//! Volume directory format: `meta.json` describing dims/dtype plus
//! `data.raw` holding the voxels little-endian, width index fastest.
//! Round trips are lossless for both dtypes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use neuroseg_core::volume::{VoxelData, Volume};

use crate::{AppError, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeMeta {
    dims: [usize; 3],
    dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spacing: Option<[f64; 3]>,
}

pub fn save_volume(v: &Volume, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = VolumeMeta {
        dims: v.dims(),
        dtype: v.data().dtype_name().to_string(),
        spacing: v.spacing,
    };
    let mut doc = serde_json::to_string_pretty(&meta)?;
    doc.push('\n');
    fs::write(dir.join("meta.json"), doc)?;

    let bytes: Vec<u8> = match v.data() {
        VoxelData::U8(d) => d.clone(),
        VoxelData::F32(d) => d.iter().flat_map(|x| x.to_le_bytes()).collect(),
    };
    fs::write(dir.join("data.raw"), bytes)?;
    Ok(())
}

pub fn load_volume(dir: &Path) -> Result<Volume> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path)
        .map_err(|e| AppError::config(format!("{}: {e}", meta_path.display())))?;
    let meta: VolumeMeta = serde_json::from_str(&text)
        .map_err(|e| AppError::config(format!("{}: {e}", meta_path.display())))?;

    let blob = fs::read(dir.join("data.raw"))
        .map_err(|e| AppError::config(format!("{}: {e}", dir.join("data.raw").display())))?;
    let voxels: usize = meta.dims.iter().product();

    let expect = |unit: usize| -> Result<()> {
        if blob.len() != voxels * unit {
            return Err(AppError::config(format!(
                "{}: header says {:?} {} ({} bytes), data.raw holds {} bytes",
                dir.display(),
                meta.dims,
                meta.dtype,
                voxels * unit,
                blob.len()
            )));
        }
        Ok(())
    };

    let data = match meta.dtype.as_str() {
        "u8" => {
            expect(1)?;
            VoxelData::U8(blob)
        }
        "f32" => {
            expect(4)?;
            let d = blob
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            VoxelData::F32(d)
        }
        other => {
            return Err(AppError::config(format!(
                "{}: unsupported dtype {other:?} (expected \"u8\" or \"f32\")",
                meta_path.display()
            )))
        }
    };

    let mut v = Volume::new(meta.dims, data)?;
    v.spacing = meta.spacing;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn u8_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<u8> = (0..4 * 5 * 6).map(|_| rng.gen()).collect();
        let v = Volume::from_u8([4, 5, 6], data.clone()).unwrap();
        save_volume(&v, dir.path()).unwrap();
        let back = load_volume(dir.path()).unwrap();
        assert_eq!(back.dims(), [4, 5, 6]);
        assert_eq!(back.data(), &VoxelData::U8(data.clone()));
        assert_eq!(std::fs::read(dir.path().join("data.raw")).unwrap(), data);
    }

    #[test]
    fn f32_round_trip_preserves_bit_patterns() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f32> = (0..3 * 2 * 5).map(|_| rng.gen::<f32>()).collect();
        let mut v = Volume::from_f32([3, 2, 5], data.clone()).unwrap();
        v.spacing = Some([0.5, 0.2, 0.2]);
        save_volume(&v, dir.path()).unwrap();
        let back = load_volume(dir.path()).unwrap();
        let VoxelData::F32(d) = back.data() else { panic!("dtype changed") };
        for (a, b) in d.iter().zip(&data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(back.spacing, Some([0.5, 0.2, 0.2]));
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("meta.json"),
            r#"{"dims": [2, 2, 2], "dtype": "u8"}"#,
        )
        .unwrap();
        std::fs::write(dir.path().join("data.raw"), [0u8; 7]).unwrap();
        let err = load_volume(dir.path()).unwrap_err();
        assert!(err.to_string().contains("8 bytes"), "{err}");
    }

    #[test]
    fn unknown_meta_keys_and_bad_dtype_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("meta.json"),
            r#"{"dims": [1, 1, 1], "dtype": "u8", "compressed": true}"#,
        )
        .unwrap();
        std::fs::write(dir.path().join("data.raw"), [0u8; 1]).unwrap();
        assert!(load_volume(dir.path()).is_err());

        std::fs::write(
            dir.path().join("meta.json"),
            r#"{"dims": [1, 1, 1], "dtype": "f64"}"#,
        )
        .unwrap();
        assert!(load_volume(dir.path()).unwrap_err().to_string().contains("dtype"));
    }

    #[test]
    fn missing_directory_reports_path() {
        let err = load_volume(Path::new("/nonexistent/vol")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/nonexistent/vol"));
    }
}
