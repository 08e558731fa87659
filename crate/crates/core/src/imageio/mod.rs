//! Image containers, file codecs (PNG, PFM, Middlebury `.flo`) and CIE L*a*b* conversion.

mod flo;
mod lab;
mod pfm;
mod pngio;

pub use flo::{load_occlusion, read_flo, write_flo, FlowField, FLO_MAGIC, UNKNOWN_FLOW_THRESHOLD};
pub use lab::{gray_from_lightness, lab_to_rgb, lightness, rgb_to_lab, srgb_to_linear, linear_to_srgb};
pub use pfm::{read_pfm, write_pfm, Endian};
pub use pngio::{read_png, write_png};

use std::path::Path;

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: corrupt file: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Length {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("{path}: unsupported: {reason}")]
    Unsupported { path: String, reason: String },
    #[error("{0}")]
    Contract(String),
}

pub type ImageResult<T> = Result<T, ImageError>;

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> ImageError {
    ImageError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Srgb,
    Linear,
    Lab,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Png8,
    Png16,
    Pfm,
}

impl ImageFormat {
    /// Guesses from the extension; `.png` maps to 8-bit.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "png" => Some(ImageFormat::Png8),
            "pfm" => Some(ImageFormat::Pfm),
            _ => None,
        }
    }
}

/// Row-major, channel-interleaved raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub space: ColorSpace,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>, space: ColorSpace) -> ImageResult<Self> {
        if channels != 1 && channels != 3 {
            return Err(ImageError::Contract(format!("images have 1 or 3 channels, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(ImageError::Contract(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
            space,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64, space: ColorSpace) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
            space,
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// One channel as a plane of `width * height` values.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    /// Channel mean per pixel.
    pub fn gray(&self) -> Vec<f64> {
        self.data
            .chunks(self.channels)
            .map(|p| p.iter().sum::<f64>() / self.channels as f64)
            .collect()
    }

    /// Replicates a single channel to three; three-channel images are returned unchanged.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
            space: self.space,
        }
    }

    /// Planar `[C, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.pixels();
        let mut out = vec![0.0; plane * self.channels];
        for (i, px) in self.data.chunks(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + i] = v;
            }
        }
        Tensor::new(vec![self.channels, self.height, self.width], out).expect("shape matches")
    }

    pub fn from_tensor(t: &Tensor, space: ColorSpace) -> ImageResult<Self> {
        let &[c, h, w] = t.shape() else {
            return Err(ImageError::Contract(format!("expected a [C, H, W] tensor, got {:?}", t.shape())));
        };
        let plane = h * w;
        let mut data = vec![0.0; plane * c];
        for ch in 0..c {
            for i in 0..plane {
                data[i * c + ch] = t.data()[ch * plane + i];
            }
        }
        Image::new(w, h, c, data, space)
    }

    pub fn from_plane(width: usize, height: usize, plane: Vec<f64>, space: ColorSpace) -> ImageResult<Self> {
        Image::new(width, height, 1, plane, space)
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(x, y, c, self.get(self.width - 1 - x, y, c));
                }
            }
        }
        out
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> ImageResult<Image> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(ImageError::Contract(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height * self.channels);
        for y in y0..y0 + height {
            let row = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[row..row + width * self.channels]);
        }
        Image::new(width, height, self.channels, data, self.space)
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Image::filled(width, height, self.channels, 0.0, self.space);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for c in 0..self.channels {
                    let top = self.get(x0, y0, c) * (1.0 - tx) + self.get(x1, y0, c) * tx;
                    let bot = self.get(x0, y1, c) * (1.0 - tx) + self.get(x1, y1, c) * tx;
                    out.set(x, y, c, top * (1.0 - ty) + bot * ty);
                }
            }
        }
        out
    }
}

/// Reads PNG (any supported depth) or PFM, chosen by file signature.
pub fn read_image(path: &Path) -> ImageResult<Image> {
    let head = {
        use std::io::Read;
        let mut f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
        let mut b = [0u8; 2];
        f.read_exact(&mut b).map_err(|e| io_err(path, e))?;
        b
    };
    match &head {
        [0x89, b'P'] => read_png(path),
        [b'P', b'F'] | [b'P', b'f'] => read_pfm(path),
        _ => Err(ImageError::Unsupported {
            path: path.display().to_string(),
            reason: "neither PNG nor PFM signature".into(),
        }),
    }
}

pub fn write_image(img: &Image, path: &Path, format: ImageFormat) -> ImageResult<()> {
    match format {
        ImageFormat::Png8 => write_png(img, path, 8),
        ImageFormat::Png16 => write_png(img, path, 16),
        ImageFormat::Pfm => write_pfm(img, path, Endian::Little),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_layout_round_trip() {
        let img = Image::new(2, 1, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], ColorSpace::Srgb).unwrap();
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(Image::from_tensor(&t, ColorSpace::Srgb).unwrap(), img);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = Image::new(3, 2, 1, (0..6).map(f64::from).collect(), ColorSpace::Linear).unwrap();
        assert_eq!(img.flip_horizontal().channel(0), vec![2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn identity_resize_and_crop() {
        let img = Image::new(4, 3, 1, (0..12).map(f64::from).collect(), ColorSpace::Linear).unwrap();
        assert_eq!(img.resize(4, 3), img);
        assert_eq!(img.crop(1, 1, 2, 2).unwrap().data, vec![5.0, 6.0, 9.0, 10.0]);
        assert!(img.crop(3, 0, 2, 1).is_err());
    }
}
