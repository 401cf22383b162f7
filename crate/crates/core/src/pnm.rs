//! Binary PGM (P5) and PPM (P6) writers and a PGM reader.

use std::fs;
use std::path::Path;

use frs_autograd::Tensor;

use crate::error::{io_err, Error, Result};

/// Maps `[0,1]` to `0..=255` by rounding; out-of-range values saturate.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| quantize(v)));
    out
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, values)).map_err(io_err(path))
}

/// Returns `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("not an 8-bit P5 image"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM dimensions"));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let pixels = bytes.get(pos..).unwrap_or_default();
    if pixels.len() != w * h {
        return Err(bad("PGM payload size does not match its header"));
    }
    Ok((w, h, pixels.to_vec()))
}

/// Writes a `[3,H,W]` image in `[0,1]` as P6.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h * w {
        for c in 0..3 {
            out.push(quantize(d[c * h * w + i]));
        }
    }
    fs::write(path, out).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let vals = [0.0, 0.5, 1.0, 0.25, 0.999, 0.001];
        write_pgm(&p, 3, 2, &vals).unwrap();
        let (w, h, px) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(px, vec![0, 128, 255, 64, 255, 0]);
        for (v, q) in vals.iter().zip(&px) {
            assert!((v - *q as f64 / 255.0).abs() <= 1.0 / 510.0);
        }
    }

    #[test]
    fn rejects_short_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pgm");
        fs::write(&p, b"P5\n4 4\n255\nabc").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::Format { .. })));
    }
}
