//! Binary PPM (P6, maxval 255) reading and writing.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PpmError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {msg}")]
    Decode { path: String, msg: String },
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), PpmError> {
    assert_eq!(rgb.len(), width * height * 3, "rgb buffer does not match dimensions");
    let io = |source| PpmError::Io { path: path.display().to_string(), source };
    let mut buf = Vec::with_capacity(rgb.len() + 20);
    write!(buf, "P6\n{width} {height}\n255\n").map_err(io)?;
    buf.extend_from_slice(rgb);
    fs::write(path, buf).map_err(io)
}

/// Returns `(width, height, rgb bytes)`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>), PpmError> {
    let bytes = fs::read(path).map_err(|source| PpmError::Io { path: path.display().to_string(), source })?;
    decode_ppm(&bytes).map_err(|msg| PpmError::Decode { path: path.display().to_string(), msg })
}

pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(format!("unsupported magic {:?}", fields[0]));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(format!("raster truncated: need {need} bytes"));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 13) as u8).collect();
        write_ppm(&p, 3, 2, &rgb).unwrap();
        assert_eq!(read_ppm(&p).unwrap(), (3, 2, rgb));
    }

    #[test]
    fn rejects_truncated_and_wrong_magic() {
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00\x01").is_err());
        assert!(decode_ppm(b"P3\n1 1\n255\n000").is_err());
        assert!(decode_ppm(b"P6\n1").is_err());
    }

    #[test]
    fn skips_comments() {
        let (w, h, px) = decode_ppm(b"P6\n# made by hand\n1 1\n255\n\x01\x02\x03").unwrap();
        assert_eq!((w, h, px), (1, 1, vec![1, 2, 3]));
    }
}
