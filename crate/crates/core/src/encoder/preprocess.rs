// SPDX-License-Identifier: MIT OR Apache-2.0

//! Image decoding and conversion to normalized `[3 × S × S]` encoder input.

use std::path::Path;

use super::config::Normalization;
use crate::error::{Error, Result};
use crate::resample;
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

/// Decodes PNG or JPEG bytes to RGB.
pub fn decode_image(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::Format(format!("undecodable image: {e}")))?
        .to_rgb8();
    Ok(RgbImage {
        height: img.height() as usize,
        width: img.width() as usize,
        pixels: img.into_raw(),
    })
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Bilinear resize to `size × size`, scale bytes to `[0, 1]`, then normalize
/// each channel.
pub fn preprocess(
    rgb: &[u8],
    height: usize,
    width: usize,
    size: usize,
    norm: &Normalization,
) -> Result<Tensor> {
    if height == 0 || width == 0 || rgb.len() != height * width * 3 {
        return Err(Error::Format(format!(
            "expected {height}x{width}x3 = {} RGB bytes, got {}",
            height * width * 3,
            rgb.len()
        )));
    }
    let unit: Vec<f32> = rgb.iter().map(|&b| b as f32 / 255.0).collect();
    preprocess_unit(&unit, height, width, size, norm)
}

/// As [`preprocess`], for interleaved RGB already scaled to `[0, 1]`.
pub fn preprocess_unit(
    rgb: &[f32],
    height: usize,
    width: usize,
    size: usize,
    norm: &Normalization,
) -> Result<Tensor> {
    if height == 0 || width == 0 || rgb.len() != height * width * 3 {
        return Err(Error::Format(format!(
            "expected {height}x{width}x3 values, got {}",
            rgb.len()
        )));
    }
    let mut out = Vec::with_capacity(3 * size * size);
    for ch in 0..3 {
        let plane: Vec<f32> = rgb.iter().skip(ch).step_by(3).copied().collect();
        let resized = resample::bilinear(&plane, height, width, size, size);
        let (m, s) = (norm.mean[ch] as f64, norm.std[ch] as f64);
        out.extend(resized.iter().map(|&v| ((v as f64 - m) / s) as f32));
    }
    Tensor::new(vec![3, size, size], out)
}

pub fn preprocess_image(img: &RgbImage, size: usize, norm: &Normalization) -> Result<Tensor> {
    preprocess(&img.pixels, img.height, img.width, size, norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mid_gray_normalizes_to_zero() {
        let gray = vec![0.5f32; 224 * 224 * 3];
        let t = preprocess_unit(&gray, 224, 224, 224, &Normalization::default()).unwrap();
        assert_eq!(t.shape(), [3, 224, 224]);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exact_halving_matches_block_oracle() {
        let (h, w) = (448, 448);
        let rgb: Vec<u8> = (0..h * w * 3).map(|i| ((i * 7919) % 251) as u8).collect();
        let norm = Normalization::default();
        let t = preprocess(&rgb, h, w, 224, &norm).unwrap();
        for ch in 0..3 {
            for y in (0..224).step_by(37) {
                for x in (0..224).step_by(29) {
                    let px = |yy: usize, xx: usize| rgb[(yy * w + xx) * 3 + ch] as f64 / 255.0;
                    let mean = (px(2 * y, 2 * x)
                        + px(2 * y, 2 * x + 1)
                        + px(2 * y + 1, 2 * x)
                        + px(2 * y + 1, 2 * x + 1))
                        / 4.0;
                    let expect = (mean - 0.5) / 0.5;
                    let got = t.data()[ch * 224 * 224 + y * 224 + x] as f64;
                    assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn wrong_length_is_format_error() {
        let err = preprocess(&[0u8; 10], 2, 2, 224, &Normalization::default()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(matches!(decode_image(b"not an image"), Err(Error::Format(_))));
    }

    #[test]
    fn decoded_png_has_expected_shape() {
        let mut buf = Vec::new();
        let img = image::RgbImage::from_fn(31, 17, |x, y| image::Rgb([x as u8, y as u8, 9]));
        image::DynamicImage::ImageRgb8(img)
            .write_to(&mut std::io::Cursor::new(&mut buf), image::ImageFormat::Png)
            .unwrap();
        let rgb = decode_image(&buf).unwrap();
        assert_eq!((rgb.height, rgb.width), (17, 31));
        let t = preprocess_image(&rgb, 224, &Normalization::default()).unwrap();
        assert_eq!(t.shape(), [3, 224, 224]);
        assert!(t.data().iter().all(|v| v.is_finite()));
    }
}
