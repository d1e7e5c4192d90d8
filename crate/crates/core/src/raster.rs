//! Float planes and PNG helpers shared by the extractors and quality metrics.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};

/// Row-major `(height, width)` float plane.
pub type Plane = Array2<f64>;

pub fn gray_to_plane(img: &GrayImage) -> Plane {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| f64::from(img.get_pixel(x as u32, y as u32)[0]))
}

/// Rounds and clamps to 8 bits.
pub fn plane_to_gray(p: &Plane) -> GrayImage {
    let (h, w) = p.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([p[[y as usize, x as usize]].round().clamp(0.0, 255.0) as u8]))
}

/// Luma of any raster, using the Rec. 601 weights of `image`.
pub fn to_luma(img: &DynamicImage) -> GrayImage {
    img.to_luma8()
}

pub fn load_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::image(path, e))
}

pub fn save_png(img: &DynamicImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    img.save_with_format(path, ImageFormat::Png).map_err(|e| Error::image(path, e))
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    save_png(&DynamicImage::ImageLuma8(img.clone()), path)
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    save_png(&DynamicImage::ImageRgb8(img.clone()), path)
}

/// Encodes to PNG bytes in memory.
pub fn png_bytes(img: &DynamicImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).expect("in-memory png encoding");
    buf.into_inner()
}

pub fn transpose_dynamic(img: &DynamicImage) -> DynamicImage {
    match img {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            DynamicImage::ImageLuma8(GrayImage::from_fn(h, w, |x, y| *g.get_pixel(y, x)))
        }
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = rgb.dimensions();
            DynamicImage::ImageRgb8(RgbImage::from_fn(h, w, |x, y| *rgb.get_pixel(y, x)))
        }
    }
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    gaussian_kernel_with_radius(sigma, radius.max(0) as usize)
}

pub fn gaussian_kernel_with_radius(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable convolution with edge replication: rows first, then columns.
pub fn separable_blur(p: &Plane, kernel: &[f64]) -> Plane {
    let (h, w) = p.dim();
    let r = (kernel.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = Plane::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * p[[y, clamp(x as isize + k as isize - r, w)]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Plane::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                acc += kv * tmp[[clamp(y as isize + k as isize - r, h), x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Half-size plane by 2x2 averaging (bilinear sampling at exact half resolution).
pub fn downsample_half(p: &Plane) -> Plane {
    let (h, w) = p.dim();
    let (h2, w2) = (h / 2, w / 2);
    Array2::from_shape_fn((h2, w2), |(y, x)| {
        let (y0, x0) = (2 * y, 2 * x);
        0.25 * (p[[y0, x0]] + p[[y0, x0 + 1]] + p[[y0 + 1, x0]] + p[[y0 + 1, x0 + 1]])
    })
}
