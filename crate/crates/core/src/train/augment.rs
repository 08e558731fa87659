use rand::Rng;

use crate::error::{contract, Result};
use crate::imageio::{FlowField, Image, UNKNOWN_FLOW_THRESHOLD};
use crate::judgements::{Judgement, JudgementSet};
use crate::synth::DenseSample;

/// One random draw of scale, crop window and flip, applied identically to every layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    pub src_width: usize,
    pub src_height: usize,
    /// Size after rescaling.
    pub width: usize,
    pub height: usize,
    pub x0: usize,
    pub y0: usize,
    pub crop: usize,
    pub flip: bool,
    /// The drawn scale left a side shorter than the crop and was raised to fit.
    pub upscaled: bool,
}

pub fn draw_window(
    src_width: usize,
    src_height: usize,
    crop: usize,
    scale_range: [f64; 2],
    flip: bool,
    rng: &mut impl Rng,
) -> Result<Window> {
    if src_width == 0 || src_height == 0 || crop == 0 {
        return contract(format!("cannot crop {crop}x{crop} from a {src_width}x{src_height} image"));
    }
    let s = if scale_range[0] < scale_range[1] { rng.random_range(scale_range[0]..=scale_range[1]) } else { scale_range[0] };
    let mut width = (src_width as f64 * s).round() as usize;
    let mut height = (src_height as f64 * s).round() as usize;
    let upscaled = width < crop || height < crop;
    if upscaled {
        let s = (crop as f64 / src_width as f64).max(crop as f64 / src_height as f64).max(s);
        width = ((src_width as f64 * s).ceil() as usize).max(crop);
        height = ((src_height as f64 * s).ceil() as usize).max(crop);
    }
    Ok(Window {
        src_width,
        src_height,
        width,
        height,
        x0: rng.random_range(0..=width - crop),
        y0: rng.random_range(0..=height - crop),
        crop,
        flip: flip && rng.random_bool(0.5),
        upscaled,
    })
}

impl Window {
    fn check(&self, w: usize, h: usize) -> Result<()> {
        if (w, h) != (self.src_width, self.src_height) {
            return contract(format!("layer is {w}x{h}, window drawn for {}x{}", self.src_width, self.src_height));
        }
        Ok(())
    }

    pub fn image(&self, img: &Image) -> Result<Image> {
        self.check(img.width, img.height)?;
        let resized = if (self.width, self.height) == (img.width, img.height) { img.clone() } else { img.resize(self.width, self.height) };
        let out = resized.crop(self.x0, self.y0, self.crop, self.crop)?;
        Ok(if self.flip { out.flip_horizontal() } else { out })
    }

    /// Source pixel index for each output pixel, nearest neighbour.
    fn source_index(&self) -> Vec<usize> {
        let (sw, sh) = (self.src_width, self.src_height);
        let mut out = Vec::with_capacity(self.crop * self.crop);
        for y in 0..self.crop {
            for x in 0..self.crop {
                let xr = if self.flip { self.crop - 1 - x } else { x } + self.x0;
                let yr = y + self.y0;
                let sx = (((xr as f64 + 0.5) * sw as f64 / self.width as f64) as usize).min(sw - 1);
                let sy = (((yr as f64 + 0.5) * sh as f64 / self.height as f64) as usize).min(sh - 1);
                out.push(sy * sw + sx);
            }
        }
        out
    }

    /// Flow resampled by nearest neighbour, with vectors scaled and mirrored to match.
    pub fn flow(&self, f: &FlowField) -> Result<FlowField> {
        self.check(f.width, f.height)?;
        let kx = self.width as f64 / self.src_width as f64 * if self.flip { -1.0 } else { 1.0 };
        let ky = self.height as f64 / self.src_height as f64;
        let unknown = 10.0 * UNKNOWN_FLOW_THRESHOLD;
        let (u, v) = self
            .source_index()
            .into_iter()
            .map(|i| if f.valid[i] { (f.u[i] * kx, f.v[i] * ky) } else { (unknown, unknown) })
            .unzip();
        Ok(FlowField::new(self.crop, self.crop, u, v))
    }

    pub fn mask(&self, m: &[bool]) -> Result<Vec<bool>> {
        if m.len() != self.src_width * self.src_height {
            return contract(format!("mask has {} pixels, window drawn for {}", m.len(), self.src_width * self.src_height));
        }
        Ok(self.source_index().into_iter().map(|i| m[i]).collect())
    }

    /// Judgements whose points both land in the window, in window coordinates.
    pub fn judgements(&self, set: &JudgementSet) -> JudgementSet {
        let map = |(x, y): (f64, f64)| {
            let xc = (x * self.width as f64 - self.x0 as f64) / self.crop as f64;
            let yc = (y * self.height as f64 - self.y0 as f64) / self.crop as f64;
            ((0.0..1.0).contains(&xc) && (0.0..1.0).contains(&yc)).then_some((if self.flip { 1.0 - xc } else { xc }, yc))
        };
        let judgements = set
            .judgements
            .iter()
            .filter_map(|j| Some(Judgement { i: map(j.i)?, j: map(j.j)?, ..*j }))
            .collect();
        JudgementSet { judgements }
    }
}

/// Shared random scale, crop and flip applied to a dense triplet. The flag reports an
/// upscale forced by a too-small image.
pub fn augment(sample: &DenseSample, crop: usize, scale_range: [f64; 2], flip: bool, rng: &mut impl Rng) -> Result<(DenseSample, bool)> {
    let win = draw_window(sample.image.width, sample.image.height, crop, scale_range, flip, rng)?;
    let out = DenseSample {
        image: win.image(&sample.image)?,
        albedo: win.image(&sample.albedo)?,
        shading: win.image(&sample.shading)?,
    };
    Ok((out, win.upscaled))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::ColorSpace;
    use crate::synth::dense_set;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(w: usize, h: usize) -> Image {
        Image::new(w, h, 1, (0..w * h).map(|i| i as f64).collect(), ColorSpace::Linear).unwrap()
    }

    fn plain(w: usize, h: usize, crop: usize) -> Window {
        Window { src_width: w, src_height: h, width: w, height: h, x0: 0, y0: 0, crop, flip: false, upscaled: false }
    }

    #[test]
    fn unit_scale_corner_crop_is_a_sub_window() {
        let img = ramp(6, 5);
        assert_eq!(plain(6, 5, 4).image(&img).unwrap(), img.crop(0, 0, 4, 4).unwrap());
    }

    #[test]
    fn flipping_twice_is_identity() {
        let img = ramp(4, 4);
        let win = Window { flip: true, ..plain(4, 4, 4) };
        assert_eq!(win.image(&win.image(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn layers_share_shape_and_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = &dense_set(1, 1, 40, 36)[0];
        for _ in 0..20 {
            let (out, _) = augment(s, 32, [0.8, 1.3], true, &mut rng).unwrap();
            assert_eq!((out.image.width, out.image.height), (32, 32));
            assert_eq!((out.albedo.width, out.albedo.height), (32, 32));
            assert_eq!((out.shading.width, out.shading.height, out.shading.channels), (32, 32, 1));
            // the product structure survives up to interpolation of piecewise-constant albedo
            let rebuilt: Vec<f64> = out.albedo.data.chunks(3).zip(&out.shading.data).flat_map(|(a, s)| a.iter().map(move |x| x * s)).collect();
            let close = rebuilt.iter().zip(&out.image.data).filter(|(a, b)| (*a - *b).abs() < 1e-9).count();
            assert!(close > rebuilt.len() / 2);
        }
    }

    #[test]
    fn too_small_images_are_upscaled_and_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = draw_window(20, 30, 32, [0.8, 1.3], false, &mut rng).unwrap();
        assert!(w.upscaled && w.width >= 32 && w.height >= 32);
        let w = draw_window(64, 64, 32, [1.0, 1.0], false, &mut rng).unwrap();
        assert!(!w.upscaled && w.width == 64);
    }

    #[test]
    fn flow_follows_the_window() {
        let f = FlowField::constant(8, 8, 1.0, -1.0);
        let win = Window { width: 16, height: 16, x0: 3, y0: 2, flip: true, ..plain(8, 8, 8) };
        let out = win.flow(&f).unwrap();
        assert!(out.u.iter().all(|&u| u == -2.0) && out.v.iter().all(|&v| v == -2.0));
        let mut g = FlowField::zeros(8, 8);
        g.valid[0] = false;
        let out = plain(8, 8, 4).flow(&g).unwrap();
        assert!(!out.valid[0] && out.valid[1..].iter().all(|&v| v));
    }

    #[test]
    fn judgements_outside_the_window_are_dropped() {
        let set = JudgementSet {
            judgements: vec![
                Judgement { i: (0.1, 0.1), j: (0.3, 0.2), relation: 1, weight: 1.0 },
                Judgement { i: (0.1, 0.1), j: (0.9, 0.9), relation: -1, weight: 1.0 },
            ],
        };
        let win = plain(10, 10, 5);
        let out = win.judgements(&set);
        assert_eq!(out.judgements.len(), 1);
        assert!((out.judgements[0].j.0 - 0.6).abs() < 1e-12);
        let flipped = Window { flip: true, ..win }.judgements(&set);
        assert!((flipped.judgements[0].i.0 - 0.8).abs() < 1e-12);
    }
}
