//! Binary PGM (P5) export for 2D projections.

use std::fs;
use std::path::Path;

use crate::{AppError, Result};

/// Writes `data` (row-major, values clamped to [0,1]) as an 8-bit
/// grayscale P5 image.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    if rows == 0 || cols == 0 || data.len() != rows * cols {
        return Err(AppError::config(format!(
            "pgm: {rows}x{cols} needs {} values, got {}",
            rows * cols,
            data.len()
        )));
    }
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend(data.iter().map(|&v| {
        let v = f64::from(v).clamp(0.0, 1.0);
        (v * 255.0).round() as u8
    }));
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_payload_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        write_pgm(&path, 2, 3, &[0.0, 0.5, 1.0, 2.0, -1.0, 0.2]).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let px = &bytes[b"P5\n3 2\n255\n".len()..];
        assert_eq!(px, &[0, 128, 255, 255, 0, 51]);
    }

    #[test]
    fn wrong_length_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_pgm(&dir.path().join("x.pgm"), 2, 2, &[0.0; 3]).is_err());
    }
}
