//! Binary PGM (P5) image I/O, 16-bit by default.
//!
//! Pixels normalize by `maxval + 1` (a power of two for the usual maxvals),
//! so a 16-bit sample k maps to exactly k/65536 — an exact value both in f64
//! and on the 2^-16 fixed-point grid.

use std::io::Write;
use std::path::Path;

use crate::tensor::{FloatTensor, PlainTensor, Shape};
use crate::{Error, Result};

/// Write a single-channel tensor as a 16-bit P5 file. Values clamp to
/// [0, 65535/65536].
pub fn write_pgm(image: &FloatTensor, path: &Path) -> Result<()> {
    if image.shape.channels != 1 {
        return Err(Error::Shape(format!(
            "PGM output needs a single channel, got {}",
            image.shape
        )));
    }
    let mut out = Vec::with_capacity(32 + image.data.len() * 2);
    write!(
        out,
        "P5\n{} {}\n65535\n",
        image.shape.width, image.shape.height
    )?;
    for &v in &image.data {
        let raw = (v * 65536.0).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&raw.to_be_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a P5 file (maxval up to 65535) into a single-channel float tensor.
pub fn read_pgm(path: &Path) -> Result<FloatTensor> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;

    let mut token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and # comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token(&bytes)? != "P5" {
        return Err(Error::Parse("not a P5 PGM file".into()));
    }
    let width: usize = token(&bytes)?
        .parse()
        .map_err(|_| Error::Parse("bad PGM width".into()))?;
    let height: usize = token(&bytes)?
        .parse()
        .map_err(|_| Error::Parse("bad PGM height".into()))?;
    let maxval: u32 = token(&bytes)?
        .parse()
        .map_err(|_| Error::Parse("bad PGM maxval".into()))?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Parse(format!("unsupported PGM maxval {maxval}")));
    }
    pos += 1; // single whitespace byte after maxval
    if pos > bytes.len() {
        return Err(Error::Parse("PGM body missing".into()));
    }

    let two_byte = maxval > 255;
    let sample_len = if two_byte { 2 } else { 1 };
    let expected = width * height * sample_len;
    let body = &bytes[pos..];
    if body.len() != expected {
        return Err(Error::Parse(format!(
            "PGM body is {} bytes, expected {expected}",
            body.len()
        )));
    }
    let denom = f64::from(maxval) + 1.0;
    let data: Vec<f64> = if two_byte {
        body.chunks_exact(2)
            .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])) / denom)
            .collect()
    } else {
        body.iter().map(|&b| f64::from(b) / denom).collect()
    };
    PlainTensor::new(Shape::new(1, height, width), data, Default::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_on_the_grid() {
        let img = FloatTensor::from_fn(Shape::new(1, 5, 7), |_, y, x| {
            ((y * 7 + x) as f64 * 801.0) / 65536.0
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        write_pgm(&img, &path).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.shape, img.shape);
        for (a, b) in back.data.iter().zip(&img.data) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn eight_bit_files_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t8.pgm");
        let mut bytes = b"P5\n# comment\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 64, 128, 255]);
        std::fs::write(&path, bytes).unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!(img.shape, Shape::new(1, 2, 2));
        assert_eq!(img.data[1], 0.25);
    }

    #[test]
    fn garbage_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P6\n1 1\n255\nxxx").unwrap();
        assert!(read_pgm(&path).is_err());
    }
}
