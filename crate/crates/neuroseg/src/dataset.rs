//! Dataset layout: `<root>/<name>/image/` and `<root>/<name>/label/`,
//! each a volume directory. Samples are returned sorted by name so runs
//! are reproducible regardless of directory iteration order.

use std::fs;
use std::path::Path;

use neuroseg_core::volume::{gaussian3d, Sample, Volume};

use crate::volume_io::load_volume;
use crate::{AppError, Result};

#[derive(Debug)]
pub struct NamedSample {
    pub name: String,
    pub sample: Sample,
}

/// Normalizes an image volume to f32 in [0,1]: u8 scales by 1/255, f32
/// is min-max stretched per volume when any value falls outside [0,1].
pub fn normalize_image(v: &Volume) -> Volume {
    let data = v.as_f32_normalized();
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &x in &data {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    let data = if lo < 0.0 || hi > 1.0 {
        if hi > lo {
            data.iter().map(|&x| (x - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; data.len()]
        }
    } else {
        data
    };
    let mut out = Volume::from_f32(v.dims(), data).expect("normalized image keeps dims");
    out.spacing = v.spacing;
    out
}

/// Loads one sample directory, normalizing the image and smoothing it
/// with `sigma` when positive. Labels are loaded untouched and must be
/// binary.
pub fn load_sample(dir: &Path, sigma: f64) -> Result<Sample> {
    let image = load_volume(&dir.join("image"))?;
    let label = load_volume(&dir.join("label"))?;
    let mut image = normalize_image(&image);
    if sigma > 0.0 {
        image = gaussian3d(&image, sigma)?;
    }
    Ok(Sample::new(image, label)?)
}

/// Loads every sample under `root`, sorted by subdirectory name.
pub fn load_dir(root: &Path, sigma: f64) -> Result<Vec<NamedSample>> {
    let mut names: Vec<String> = Vec::new();
    let listing = fs::read_dir(root)
        .map_err(|e| AppError::config(format!("{}: {e}", root.display())))?;
    for entry in listing {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(AppError::config(format!("{}: no sample directories", root.display())));
    }
    names
        .into_iter()
        .map(|name| {
            let sample = load_sample(&root.join(&name), sigma)
                .map_err(|e| AppError::config(format!("sample {name}: {e}")))?;
            Ok(NamedSample { name, sample })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::save_volume;
    use neuroseg_core::phantom::{synth_phantom, PhantomSpec};

    fn write_sample(root: &Path, name: &str, seed: u64) {
        let spec = PhantomSpec { dims: [16, 16, 16], seed, ..PhantomSpec::default() };
        let s = synth_phantom(&spec).unwrap();
        save_volume(&s.image, &root.join(name).join("image")).unwrap();
        save_volume(&s.label, &root.join(name).join("label")).unwrap();
    }

    #[test]
    fn loads_sorted_by_name() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), "b_second", 1);
        write_sample(dir.path(), "a_first", 2);
        let samples = load_dir(dir.path(), 0.0).unwrap();
        assert_eq!(samples[0].name, "a_first");
        assert_eq!(samples[1].name, "b_second");
    }

    #[test]
    fn empty_root_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dir(dir.path(), 0.0).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn smoothing_changes_the_image_but_not_the_label() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path(), "p", 3);
        let raw = load_dir(dir.path(), 0.0).unwrap().remove(0);
        let smooth = load_dir(dir.path(), 0.8).unwrap().remove(0);
        assert_eq!(raw.sample.label, smooth.sample.label);
        assert_ne!(raw.sample.image, smooth.sample.image);
    }

    #[test]
    fn out_of_range_f32_images_are_minmax_stretched() {
        let v = Volume::from_f32([1, 1, 4], vec![-2.0, 0.0, 2.0, 6.0]).unwrap();
        let n = normalize_image(&v);
        let neuroseg_core::volume::VoxelData::F32(d) = n.data() else { panic!() };
        assert_eq!(d, &vec![0.0, 0.25, 0.5, 1.0]);
    }
}
