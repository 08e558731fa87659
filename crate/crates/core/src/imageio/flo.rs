use std::path::Path;

use super::{io_err, read_png, ImageError, ImageResult};

pub const FLO_MAGIC: f32 = 202021.25;
/// Components with a larger magnitude encode unknown flow.
pub const UNKNOWN_FLOW_THRESHOLD: f64 = 1e9;

/// Per-pixel displacement in pixels. `u`/`v` keep the file's values verbatim, including
/// unknown-flow sentinels, so that writing reproduces the original bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, u: Vec<f64>, v: Vec<f64>) -> Self {
        assert_eq!(u.len(), width * height);
        assert_eq!(v.len(), width * height);
        let valid = u.iter().zip(&v).map(|(&a, &b)| known(a) && known(b)).collect();
        FlowField {
            width,
            height,
            u,
            v,
            valid,
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![0.0; width * height], vec![0.0; width * height])
    }

    pub fn constant(width: usize, height: usize, du: f64, dv: f64) -> Self {
        Self::new(width, height, vec![du; width * height], vec![dv; width * height])
    }

    /// Clears validity wherever `mask` is false.
    pub fn restrict(&mut self, mask: &[bool]) -> ImageResult<()> {
        if mask.len() != self.valid.len() {
            return Err(ImageError::Contract(format!(
                "mask has {} pixels, flow has {}",
                mask.len(),
                self.valid.len()
            )));
        }
        self.valid.iter_mut().zip(mask).for_each(|(v, &m)| *v &= m);
        Ok(())
    }
}

fn known(x: f64) -> bool {
    x.is_finite() && x.abs() <= UNKNOWN_FLOW_THRESHOLD
}

pub fn read_flo(path: &Path) -> ImageResult<FlowField> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let corrupt = |reason: String| ImageError::Corrupt {
        path: path.display().to_string(),
        reason,
    };
    if bytes.len() < 12 {
        return Err(ImageError::Length {
            path: path.display().to_string(),
            expected: 12,
            found: bytes.len(),
        });
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(corrupt(format!("magic {magic} != {FLO_MAGIC}")));
    }
    let w = i32::from_le_bytes(word(4));
    let h = i32::from_le_bytes(word(8));
    if w <= 0 || h <= 0 {
        return Err(corrupt(format!("invalid size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let expected = 12 + 8 * w * h;
    if bytes.len() < expected {
        return Err(ImageError::Length {
            path: path.display().to_string(),
            expected,
            found: bytes.len(),
        });
    }
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for k in 0..w * h {
        u.push(f32::from_le_bytes(word(12 + 8 * k)) as f64);
        v.push(f32::from_le_bytes(word(16 + 8 * k)) as f64);
    }
    Ok(FlowField::new(w, h, u, v))
}

pub fn write_flo(flow: &FlowField, path: &Path) -> ImageResult<()> {
    let mut out = Vec::with_capacity(12 + 8 * flow.u.len());
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flow.width as i32).to_le_bytes());
    out.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for (&a, &b) in flow.u.iter().zip(&flow.v) {
        out.extend_from_slice(&(a as f32).to_le_bytes());
        out.extend_from_slice(&(b as f32).to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Occlusion PNG where nonzero marks an occluded pixel; returns per-pixel validity.
/// When `flow` is given, the mask must match its size.
pub fn load_occlusion(path: &Path, flow: Option<&FlowField>) -> ImageResult<Vec<bool>> {
    let img = read_png(path)?;
    if let Some(f) = flow {
        if (f.width, f.height) != (img.width, img.height) {
            return Err(ImageError::Contract(format!(
                "{}: occlusion mask is {}x{}, flow is {}x{}",
                path.display(),
                img.width,
                img.height,
                f.width,
                f.height
            )));
        }
    }
    Ok(img.data.chunks(img.channels).map(|p| p.iter().all(|&x| x == 0.0)).collect())
}
