//! Binary PPM (P6) and PGM (P5) codecs, 8-bit.
//!
//! Images load as `[0, 1]`-scaled 3-channel grids; masks load as raw
//! label bytes (255 conventionally marks ignored pixels).

use std::fs;
use std::path::Path;

use crate::tensor::FeatureGrid;
use crate::{Result, SparError};

fn bad(path: &Path, detail: impl Into<String>) -> SparError {
    SparError::Format {
        format: "pnm",
        detail: format!("{}: {}", path.display(), detail.into()),
    }
}

/// Parses the PNM header after the magic: three decimal tokens
/// (width, height, maxval) separated by whitespace/comments, then one
/// whitespace byte before the payload. Returns (width, height, maxval,
/// payload offset).
fn parse_header(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, usize)> {
    let mut pos = 2; // past the magic
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad(path, "truncated header"));
        }
        let token = std::str::from_utf8(&bytes[start..pos]).expect("digits are UTF-8");
        *field = token.parse().map_err(|_| bad(path, "header field overflow"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad(path, "missing separator before payload"));
    }
    pos += 1;
    Ok((fields[0], fields[1], fields[2], pos))
}

/// Reads a binary P6 image into an `h x w x 3` grid scaled to `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<FeatureGrid> {
    let bytes =
        fs::read(path).map_err(|e| SparError::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(bad(path, "not a binary PPM (P6)"));
    }
    let (w, h, maxval, offset) = parse_header(&bytes, path)?;
    if maxval == 0 || maxval > 255 {
        return Err(bad(path, format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(bad(path, "zero dimension"));
    }
    let expected = w * h * 3;
    let payload = &bytes[offset..];
    if payload.len() < expected {
        return Err(bad(path, format!("payload holds {} bytes, need {expected}", payload.len())));
    }
    let scale = 1.0 / maxval as f64;
    let data: Vec<f64> = payload[..expected].iter().map(|&b| b as f64 * scale).collect();
    FeatureGrid::from_vec(h, w, 3, data)
}

/// Writes an `h x w x 3` grid as binary P6; values are clamped to
/// `[0, 1]` and quantized to 8 bits.
pub fn write_ppm(path: &Path, image: &FeatureGrid) -> Result<()> {
    let (h, w, ch) = image.shape();
    if ch != 3 {
        return Err(SparError::ShapeMismatch(format!(
            "PPM output needs 3 channels, got {ch}"
        )));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    for &v in image.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    fs::write(path, out).map_err(|e| SparError::io(format!("writing {}", path.display()), e))
}

/// Reads a binary P5 grayscale image as raw label bytes, row-major.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes =
        fs::read(path).map_err(|e| SparError::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(bad(path, "not a binary PGM (P5)"));
    }
    let (w, h, maxval, offset) = parse_header(&bytes, path)?;
    if maxval == 0 || maxval > 255 {
        return Err(bad(path, format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(bad(path, "zero dimension"));
    }
    let expected = w * h;
    let payload = &bytes[offset..];
    if payload.len() < expected {
        return Err(bad(path, format!("payload holds {} bytes, need {expected}", payload.len())));
    }
    Ok((h, w, payload[..expected].to_vec()))
}

/// Writes raw label bytes as binary P5 with maxval 255.
pub fn write_pgm(path: &Path, height: usize, width: usize, labels: &[u8]) -> Result<()> {
    if labels.len() != height * width {
        return Err(SparError::ShapeMismatch(format!(
            "{height}x{width} PGM needs {} bytes, got {}",
            height * width,
            labels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| SparError::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = FeatureGrid::from_fn(3, 5, 3, |r, c, k| {
            ((r * 50 + c * 10 + k * 3) % 256) as f64 / 255.0
        });
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape(), (3, 5, 3));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn pgm_round_trip_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.pgm");
        let labels: Vec<u8> = (0..12).map(|i| (i * 11) as u8).collect();
        write_pgm(&path, 3, 4, &labels).unwrap();
        let (h, w, back) = read_pgm(&path).unwrap();
        assert_eq!((h, w), (3, 4));
        assert_eq!(back, labels);

        // header comments are legal
        let with_comment = b"P5\n# a comment\n2 2\n255\n\x01\x02\x03\x04".to_vec();
        let path2 = dir.path().join("comment.pgm");
        std::fs::write(&path2, with_comment).unwrap();
        let (h, w, data) = read_pgm(&path2).unwrap();
        assert_eq!((h, w), (2, 2));
        assert_eq!(data, vec![1, 2, 3, 4]);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P3\n1 1\n255\n0 0 0\n").unwrap();
        assert!(read_ppm(&path).is_err());

        let path2 = dir.path().join("short.pgm");
        std::fs::write(&path2, b"P5\n4 4\n255\n\x00\x01").unwrap();
        assert!(read_pgm(&path2).is_err());
    }
}
