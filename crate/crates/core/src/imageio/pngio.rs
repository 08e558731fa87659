use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::{io_err, ColorSpace, Image, ImageError, ImageResult};

fn unsupported(path: &Path, reason: impl Into<String>) -> ImageError {
    ImageError::Unsupported {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn corrupt(path: &Path, e: impl std::fmt::Display) -> ImageError {
    ImageError::Corrupt {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Reads an 8- or 16-bit grayscale or RGB PNG; samples are divided by `2^bits - 1`.
pub fn read_png(path: &Path) -> ImageResult<Image> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| corrupt(path, e))?;
    let info = reader.info();
    if info.interlaced {
        return Err(unsupported(path, "interlaced PNG"));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(unsupported(path, format!("color type {other:?}"))),
    };
    let bits = match info.bit_depth {
        png::BitDepth::Eight => 8,
        png::BitDepth::Sixteen => 16,
        other => return Err(unsupported(path, format!("bit depth {other:?}"))),
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let size = reader.output_buffer_size().ok_or_else(|| unsupported(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| corrupt(path, e))?;
    let stride = frame.line_size;
    let row_samples = width * channels;
    let mut data = Vec::with_capacity(row_samples * height);
    for y in 0..height {
        let row = &buf[y * stride..];
        if bits == 8 {
            data.extend(row[..row_samples].iter().map(|&b| b as f64 / 255.0));
        } else {
            data.extend(
                row[..2 * row_samples]
                    .chunks_exact(2)
                    .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0),
            );
        }
    }
    Image::new(width, height, channels, data, ColorSpace::Srgb)
}

/// Writes 8- or 16-bit PNG. Values are clamped to [0, 1] and rounded to the nearest code.
pub fn write_png(img: &Image, path: &Path, bits: u8) -> ImageResult<()> {
    if img.space == ColorSpace::Lab {
        return Err(ImageError::Contract("convert Lab images to RGB before writing PNG".into()));
    }
    let (depth, max) = match bits {
        8 => (png::BitDepth::Eight, 255.0),
        16 => (png::BitDepth::Sixteen, 65535.0),
        _ => return Err(unsupported(path, format!("{bits}-bit output"))),
    };
    let color = if img.channels == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb };
    let codes = img.data.iter().map(|&v| (v.clamp(0.0, 1.0) * max).round() as u16);
    let bytes: Vec<u8> = if bits == 8 {
        codes.map(|c| c as u8).collect()
    } else {
        codes.flat_map(u16::to_be_bytes).collect()
    };
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| corrupt(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| corrupt(path, e))?;
    writer.finish().map_err(|e| corrupt(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_normalization_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let data: Vec<f64> = [0u8, 1, 128, 254, 255, 7].iter().map(|&b| b as f64 / 255.0).collect();
        let img = Image::new(2, 1, 3, data, ColorSpace::Srgb).unwrap();
        write_png(&img, &p, 8).unwrap();
        let back = read_png(&p).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.data[4], 1.0);
        let bytes = std::fs::read(&p).unwrap();
        write_png(&back, &p, 8).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
    }

    #[test]
    fn sixteen_bit_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let img = Image::new(3, 1, 1, vec![32768.0 / 65535.0, 0.0, 1.0], ColorSpace::Srgb).unwrap();
        write_png(&img, &p, 16).unwrap();
        let back = read_png(&p).unwrap();
        assert_eq!(back.data[0], 32768.0 / 65535.0);
        assert_eq!(back, img);
    }

    #[test]
    fn rejects_alpha_and_low_depth() {
        let dir = tempfile::tempdir().unwrap();
        for (color, depth, len) in [
            (png::ColorType::Rgba, png::BitDepth::Eight, 8),
            (png::ColorType::Grayscale, png::BitDepth::Four, 1),
        ] {
            let p = dir.path().join("x.png");
            let mut enc = png::Encoder::new(File::create(&p).unwrap(), 2, 1);
            enc.set_color(color);
            enc.set_depth(depth);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&vec![0u8; len]).unwrap();
            w.finish().unwrap();
            assert!(matches!(read_png(&p), Err(ImageError::Unsupported { .. })));
        }
    }
}
