use std::sync::OnceLock;

use nalgebra::{Matrix3, Vector3};

use super::{ColorSpace, Image, ImageError, ImageResult};

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

fn rgb_to_xyz() -> &'static Matrix3<f64> {
    static M: OnceLock<Matrix3<f64>> = OnceLock::new();
    M.get_or_init(|| {
        Matrix3::new(
            0.4124564, 0.3575761, 0.1804375, //
            0.2126729, 0.7151522, 0.0721750, //
            0.0193339, 0.1191920, 0.9503041,
        )
    })
}

fn xyz_to_rgb() -> &'static Matrix3<f64> {
    static M: OnceLock<Matrix3<f64>> = OnceLock::new();
    M.get_or_init(|| rgb_to_xyz().try_inverse().expect("sRGB matrix is invertible"))
}

/// D65 reference white as the image of linear (1, 1, 1), so neutral grays have a = b = 0.
fn white() -> Vector3<f64> {
    rgb_to_xyz() * Vector3::new(1.0, 1.0, 1.0)
}

/// Standard piecewise sRGB decoding, extended oddly to negative inputs.
pub fn srgb_to_linear(c: f64) -> f64 {
    let a = c.abs();
    let l = if a <= 0.04045 { a / 12.92 } else { ((a + 0.055) / 1.055).powf(2.4) };
    l.copysign(c)
}

pub fn linear_to_srgb(l: f64) -> f64 {
    let a = l.abs();
    let c = if a <= 0.0031308 { a * 12.92 } else { 1.055 * a.powf(1.0 / 2.4) - 0.055 };
    c.copysign(l)
}

fn f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn f_inv(ft: f64) -> f64 {
    let t3 = ft * ft * ft;
    if t3 > EPSILON {
        t3
    } else {
        (116.0 * ft - 16.0) / KAPPA
    }
}

fn pixel_to_lab(rgb: [f64; 3], space: ColorSpace) -> [f64; 3] {
    let lin = match space {
        ColorSpace::Linear => Vector3::new(rgb[0], rgb[1], rgb[2]),
        _ => Vector3::new(srgb_to_linear(rgb[0]), srgb_to_linear(rgb[1]), srgb_to_linear(rgb[2])),
    };
    let xyz = rgb_to_xyz() * lin;
    let w = white();
    let (fx, fy, fz) = (f(xyz.x / w.x), f(xyz.y / w.y), f(xyz.z / w.z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

fn pixel_from_lab(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let w = white();
    let xyz = Vector3::new(f_inv(fx) * w.x, f_inv(fy) * w.y, f_inv(fz) * w.z);
    let lin = xyz_to_rgb() * xyz;
    [linear_to_srgb(lin.x), linear_to_srgb(lin.y), linear_to_srgb(lin.z)]
}

/// sRGB (or linear RGB) to CIE L*a*b* under D65. Values are not clamped.
pub fn rgb_to_lab(img: &Image) -> ImageResult<Image> {
    if img.channels != 3 || img.space == ColorSpace::Lab {
        return Err(ImageError::Contract(format!(
            "rgb_to_lab needs a 3-channel RGB image, got {} channel(s) in {:?}",
            img.channels, img.space
        )));
    }
    let data = img
        .data
        .chunks_exact(3)
        .flat_map(|p| pixel_to_lab([p[0], p[1], p[2]], img.space))
        .collect();
    Ok(Image {
        data,
        space: ColorSpace::Lab,
        ..img.clone()
    })
}

/// Inverse of [`rgb_to_lab`], producing sRGB. Out-of-gamut results are left unclamped.
pub fn lab_to_rgb(img: &Image) -> ImageResult<Image> {
    if img.channels != 3 || img.space != ColorSpace::Lab {
        return Err(ImageError::Contract(format!(
            "lab_to_rgb needs a 3-channel Lab image, got {} channel(s) in {:?}",
            img.channels, img.space
        )));
    }
    let data = img
        .data
        .chunks_exact(3)
        .flat_map(|p| pixel_from_lab([p[0], p[1], p[2]]))
        .collect();
    Ok(Image {
        data,
        space: ColorSpace::Srgb,
        ..img.clone()
    })
}

/// Per-pixel L*/100. Single-channel images are treated as neutral gray.
pub fn lightness(img: &Image) -> ImageResult<Vec<f64>> {
    match (img.channels, img.space) {
        (3, ColorSpace::Lab) => Ok(img.data.iter().step_by(3).map(|l| l / 100.0).collect()),
        (3, _) => Ok(rgb_to_lab(img)?.data.iter().step_by(3).map(|l| l / 100.0).collect()),
        (1, ColorSpace::Lab) => Ok(img.data.iter().map(|l| l / 100.0).collect()),
        (1, space) => Ok(img
            .data
            .iter()
            .map(|&c| {
                let lin = if space == ColorSpace::Linear { c } else { srgb_to_linear(c) };
                (116.0 * f(lin) - 16.0) / 100.0
            })
            .collect()),
        (c, _) => Err(ImageError::Contract(format!("lightness of a {c}-channel image"))),
    }
}

/// Single-channel sRGB gray image whose [`lightness`] equals `l` per pixel.
pub fn gray_from_lightness(width: usize, height: usize, l: &[f64]) -> ImageResult<Image> {
    let data = l
        .iter()
        .map(|&l| linear_to_srgb(f_inv((100.0 * l + 16.0) / 116.0)))
        .collect();
    Image::new(width, height, 1, data, ColorSpace::Srgb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rgb(vals: &[f64]) -> Image {
        Image::new(vals.len() / 3, 1, 3, vals.to_vec(), ColorSpace::Srgb).unwrap()
    }

    #[test]
    fn white_and_black_points() {
        let lab = rgb_to_lab(&rgb(&[1.0, 1.0, 1.0, 0.0, 0.0, 0.0])).unwrap();
        assert!((lab.data[0] - 100.0).abs() < 1e-9);
        assert!(lab.data[1].abs() < 1e-9 && lab.data[2].abs() < 1e-9);
        assert_eq!(lab.data[3], 0.0);
    }

    #[test]
    fn grays_are_neutral() {
        let lab = rgb_to_lab(&rgb(&[0.3, 0.3, 0.3])).unwrap();
        assert!(lab.data[1].abs() < 1e-12 && lab.data[2].abs() < 1e-12);
    }

    #[test]
    fn round_trip_on_random_images() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let vals: Vec<f64> = (0..3 * 500).map(|_| rng.random()).collect();
        let img = rgb(&vals);
        let back = lab_to_rgb(&rgb_to_lab(&img).unwrap()).unwrap();
        let err = back.data.iter().zip(&img.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn gray_from_lightness_inverts_lightness() {
        let l = [0.0, 0.01, 0.25, 0.5, 0.999];
        let g = gray_from_lightness(5, 1, &l).unwrap();
        for (a, b) in lightness(&g).unwrap().iter().zip(&l) {
            assert!((a - b).abs() < 1e-12);
        }
        let g3 = g.to_rgb();
        for (a, b) in lightness(&g3).unwrap().iter().zip(&l) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_count_is_checked() {
        let gray = Image::new(1, 1, 1, vec![0.5], ColorSpace::Srgb).unwrap();
        assert!(rgb_to_lab(&gray).is_err());
        assert!(lab_to_rgb(&rgb(&[0.1, 0.2, 0.3])).is_err());
    }
}
