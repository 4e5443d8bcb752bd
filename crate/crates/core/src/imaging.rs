//! Channel-first float images and 8-bit PNG I/O.

use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// `3 x H x W` image with values nominally in `[0, 1]`.
pub type Image = Array3<f64>;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::Shape {
            context: "save_png",
            expected: vec![3, h, w],
            found: vec![c, h, w],
        });
    }
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([to_u8(img[[0, y, x]]), to_u8(img[[1, y, x]]), to_u8(img[[2, y, x]])])
    });
    ensure_parent(path)?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_gray_png(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([to_u8(map[[y as usize, x as usize]])])
    });
    ensure_parent(path)?;
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Image::from_shape_fn((3, h, w), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Quantize to the 8-bit grid, the same values a PNG round trip yields.
pub fn quantize(img: &Image) -> Image {
    img.mapv(|v| to_u8(v) as f64 / 255.0)
}

/// Rec. 601 luma.
pub fn luminance(img: &Image) -> Array2<f64> {
    let (_, h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * img[[0, y, x]] + 0.587 * img[[1, y, x]] + 0.114 * img[[2, y, x]]
    })
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}
