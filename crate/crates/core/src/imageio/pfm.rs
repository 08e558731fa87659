use std::path::Path;

use super::{io_err, ColorSpace, Image, ImageError, ImageResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// Portable float map. The sign of the scale line selects byte order (negative is
/// little-endian); rows are stored bottom to top. Values are read verbatim.
pub fn read_pfm(path: &Path) -> ImageResult<Image> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let bad = |reason: &str| ImageError::Corrupt {
        path: path.display().to_string(),
        reason: reason.into(),
    };
    let mut pos = 0;
    let mut token = || -> Option<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token().as_deref() {
        Some("PF") => 3,
        Some("Pf") => 1,
        _ => return Err(bad("missing PF/Pf header")),
    };
    let width: usize = token().and_then(|t| t.parse().ok()).ok_or_else(|| bad("bad width"))?;
    let height: usize = token().and_then(|t| t.parse().ok()).ok_or_else(|| bad("bad height"))?;
    let scale: f64 = token().and_then(|t| t.parse().ok()).ok_or_else(|| bad("bad scale"))?;
    if scale == 0.0 {
        return Err(bad("zero scale"));
    }
    // exactly one whitespace byte separates the header from the payload
    let start = pos + 1;
    let endian = if scale < 0.0 { Endian::Little } else { Endian::Big };
    let n = width * height * channels;
    let payload = bytes.get(start..).unwrap_or(&[]);
    if payload.len() < 4 * n {
        return Err(ImageError::Length {
            path: path.display().to_string(),
            expected: 4 * n,
            found: payload.len(),
        });
    }
    let mut data = vec![0.0; n];
    let row = width * channels;
    for (k, chunk) in payload[..4 * n].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = match endian {
            Endian::Little => f32::from_le_bytes(b),
            Endian::Big => f32::from_be_bytes(b),
        };
        let (file_row, col) = (k / row, k % row);
        data[(height - 1 - file_row) * row + col] = v as f64;
    }
    Image::new(width, height, channels, data, ColorSpace::Linear)
}

/// Values are narrowed to `f32`; scale magnitude is 1.
pub fn write_pfm(img: &Image, path: &Path, endian: Endian) -> ImageResult<()> {
    let tag = if img.channels == 3 { "PF" } else { "Pf" };
    let scale = if endian == Endian::Little { "-1.0" } else { "1.0" };
    let mut out = format!("{tag}\n{} {}\n{scale}\n", img.width, img.height).into_bytes();
    let row = img.width * img.channels;
    for y in (0..img.height).rev() {
        for &v in &img.data[y * row..(y + 1) * row] {
            let v = v as f32;
            out.extend_from_slice(&match endian {
                Endian::Little => v.to_le_bytes(),
                Endian::Big => v.to_be_bytes(),
            });
        }
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_byte_orders_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..18).map(|i| (i as f32 * 0.37 - 2.0) as f64).collect();
        let img = Image::new(3, 2, 3, data, ColorSpace::Linear).unwrap();
        for endian in [Endian::Little, Endian::Big] {
            let p = dir.path().join("a.pfm");
            write_pfm(&img, &p, endian).unwrap();
            assert_eq!(read_pfm(&p).unwrap(), img);
            let bytes = std::fs::read(&p).unwrap();
            write_pfm(&read_pfm(&p).unwrap(), &p, endian).unwrap();
            assert_eq!(std::fs::read(&p).unwrap(), bytes);
        }
    }

    #[test]
    fn negative_scale_means_little_endian_and_rows_flip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.pfm");
        let mut bytes = b"Pf\n1 2\n-1.0\n".to_vec();
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-3.0f32).to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        let img = read_pfm(&p).unwrap();
        assert_eq!(img.data, vec![-3.0, 1.5]);
    }

    #[test]
    fn truncated_payload_is_a_length_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pfm");
        std::fs::write(&p, b"PF\n2 2\n-1.0\n\0\0\0\0").unwrap();
        assert!(matches!(read_pfm(&p), Err(ImageError::Length { expected: 48, .. })));
    }
}
