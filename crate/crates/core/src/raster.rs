//! Floating-point image planes and the resampling helpers shared by the
//! registration, feature and dataset code.
//!
//! `GrayImage` and `ColorImage` are the 8-bit rasters exchanged at module
//! boundaries; [`Plane`] is the single-channel `f64` working buffer used
//! internally.

use crate::error::{OmrError, Result};

pub use image::{GrayImage, Luma, Rgb, RgbImage as ColorImage};

pub const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

/// Luma weights for RGB to gray conversion.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Plane {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "plane buffer size");
        Plane {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Plane {
            width,
            height,
            data,
        }
    }

    /// Gray plane with intensities scaled to [0, 1].
    pub fn from_gray(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        Plane {
            width: w as usize,
            height: h as usize,
            data: img.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        }
    }

    /// Luma of a color raster, scaled to [0, 1].
    pub fn luma(img: &ColorImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img
            .pixels()
            .map(|p| {
                (LUMA[0] * p[0] as f64 + LUMA[1] * p[1] as f64 + LUMA[2] * p[2] as f64) / 255.0
            })
            .collect();
        Plane {
            width: w as usize,
            height: h as usize,
            data,
        }
    }

    /// One color channel scaled to [0, 1].
    pub fn channel(img: &ColorImage, c: usize) -> Self {
        let (w, h) = img.dimensions();
        Plane {
            width: w as usize,
            height: h as usize,
            data: img.pixels().map(|p| p[c] as f64 / 255.0).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel access with replicated borders.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    /// Bilinear sample with replicated borders.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Separable Gaussian blur with replicated borders.
    pub fn gaussian_blur(&self, sigma: f64) -> Plane {
        if sigma <= 0.0 {
            return self.clone();
        }
        let kernel = gaussian_kernel(sigma);
        let r = (kernel.len() / 2) as isize;
        let mut tmp = Plane::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let mut acc = 0.0;
                for (i, &k) in kernel.iter().enumerate() {
                    acc += k * self.get_clamped(x as isize + i as isize - r, y as isize);
                }
                tmp.set(x, y, acc);
            }
        }
        let mut out = Plane::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let mut acc = 0.0;
                for (i, &k) in kernel.iter().enumerate() {
                    acc += k * tmp.get_clamped(x as isize, y as isize + i as isize - r);
                }
                out.set(x, y, acc);
            }
        }
        out
    }

    /// Halves each dimension by averaging 2x2 blocks.
    pub fn downsample2(&self) -> Plane {
        let w = self.width / 2;
        let h = self.height / 2;
        Plane::from_fn(w, h, |x, y| {
            0.25 * (self.get(2 * x, 2 * y)
                + self.get(2 * x + 1, 2 * y)
                + self.get(2 * x, 2 * y + 1)
                + self.get(2 * x + 1, 2 * y + 1))
        })
    }

    /// Bilinear resize using pixel-center alignment. Same-size resizing is the identity.
    pub fn resize(&self, width: usize, height: usize) -> Plane {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Plane::from_fn(width, height, |x, y| {
            self.sample((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5)
        })
    }
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

pub fn check_nonempty(width: u32, height: u32) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(OmrError::EmptyImage { width, height });
    }
    Ok(())
}

/// Converts a color raster to 8-bit gray with the luma weights.
pub fn to_gray(img: &ColorImage) -> GrayImage {
    let (w, h) = img.dimensions();
    GrayImage::from_fn(w, h, |x, y| {
        let p = img.get_pixel(x, y);
        let v = LUMA[0] * p[0] as f64 + LUMA[1] * p[1] as f64 + LUMA[2] * p[2] as f64;
        Luma([v.round().clamp(0.0, 255.0) as u8])
    })
}

/// Bilinear sample of a color raster at a real position. Returns `None` when
/// the position falls outside the source.
pub fn sample_rgb(img: &ColorImage, x: f64, y: f64) -> Option<[f64; 3]> {
    let (w, h) = img.dimensions();
    let (wf, hf) = ((w - 1) as f64, (h - 1) as f64);
    // tolerate rounding noise at the exact border
    const EPS: f64 = 1e-9;
    if !(x >= -EPS && y >= -EPS && x <= wf + EPS && y <= hf + EPS) {
        return None;
    }
    let x = x.clamp(0.0, wf);
    let y = y.clamp(0.0, hf);
    let x0 = x.floor() as u32;
    let y0 = y.floor() as u32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let p00 = img.get_pixel(x0, y0);
    let p10 = img.get_pixel(x1, y0);
    let p01 = img.get_pixel(x0, y1);
    let p11 = img.get_pixel(x1, y1);
    let mut out = [0.0; 3];
    for c in 0..3 {
        let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
        let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
        out[c] = top * (1.0 - fy) + bottom * fy;
    }
    Some(out)
}

#[inline]
pub fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Bilinear resize of a color raster; same-size resizing returns an exact copy.
pub fn resize_rgb(img: &ColorImage, width: u32, height: u32) -> ColorImage {
    let (w, h) = img.dimensions();
    if (w, h) == (width, height) {
        return img.clone();
    }
    let sx = w as f64 / width as f64;
    let sy = h as f64 / height as f64;
    ColorImage::from_fn(width, height, |x, y| {
        let u = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let v = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let p = sample_rgb(img, u, v).expect("clamped sample is in bounds");
        Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_same_size_is_identity() {
        let p = Plane::from_fn(7, 5, |x, y| (x * 3 + y) as f64 * 0.01);
        assert_eq!(p.resize(7, 5), p);
    }

    #[test]
    fn resize_preserves_constants() {
        let p = Plane::filled(10, 20, 0.4);
        let r = p.resize(64, 64);
        assert!(r.data().iter().all(|&v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn blur_preserves_mean_of_constant() {
        let p = Plane::filled(9, 9, 0.7);
        let b = p.gaussian_blur(1.5);
        assert!(b.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn sample_rgb_outside_is_none() {
        let img = ColorImage::from_pixel(4, 4, Rgb([10, 20, 30]));
        assert!(sample_rgb(&img, -0.5, 1.0).is_none());
        assert!(sample_rgb(&img, 3.0, 3.0).is_some());
        assert!(sample_rgb(&img, 3.01, 0.0).is_none());
    }
}
