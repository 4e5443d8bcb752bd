//! Bounding boxes and the global -> local crop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

/// Axis-aligned box in pixels; `(x, y)` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self { x: v[0], y: v[1], w: v[2], h: v[3] }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(Error::validation("bbox has non-finite coordinates"));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::validation(format!(
                "bbox must have positive area, got w={} h={}",
                self.w, self.h
            )));
        }
        Ok(())
    }

    /// Parse `x,y,w,h`.
    pub fn parse(s: &str) -> Result<Self> {
        let vals: Vec<f64> = s
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::validation(format!("bad bbox `{s}`: {e}")))?;
        if vals.len() != 4 {
            return Err(Error::validation(format!("bbox needs 4 values, got `{s}`")));
        }
        Self::new(vals[0], vals[1], vals[2], vals[3])
    }

    /// Clamp to a `width x height` canvas.
    pub fn clamped(&self, width: f64, height: f64) -> Self {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = (self.x + self.w).clamp(0.0, width);
        let y1 = (self.y + self.h).clamp(0.0, height);
        Self { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x && p[0] <= self.x + self.w && p[1] >= self.y && p[1] <= self.y + self.h
    }
}

/// Affine map between global pixel coordinates and crop coordinates.
/// Local `(u, v)` corresponds to global `(x0 + u * side / out, y0 + v * side / out)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
    pub out_size: usize,
}

impl CropTransform {
    /// Local pixels per global pixel.
    pub fn scale(&self) -> f64 {
        self.out_size as f64 / self.side
    }

    pub fn to_local(&self, p: [f64; 2]) -> [f64; 2] {
        [(p[0] - self.x0) * self.scale(), (p[1] - self.y0) * self.scale()]
    }

    pub fn to_global(&self, p: [f64; 2]) -> [f64; 2] {
        [self.x0 + p[0] / self.scale(), self.y0 + p[1] / self.scale()]
    }
}

/// Square crop window around `bbox`: expand to a square, add `margin` of the
/// side on each side, then shift (and if needed shrink) into the image.
pub fn crop_window(bbox: &BBox, width: usize, height: usize, margin: f64, out_size: usize) -> Result<CropTransform> {
    bbox.validate()?;
    if out_size == 0 {
        return Err(Error::validation("crop output size must be positive"));
    }
    let (wf, hf) = (width as f64, height as f64);
    let cx = bbox.x + bbox.w / 2.0;
    let cy = bbox.y + bbox.h / 2.0;
    let side = (bbox.w.max(bbox.h) * (1.0 + 2.0 * margin)).min(wf.min(hf));
    let x0 = (cx - side / 2.0).clamp(0.0, wf - side);
    let y0 = (cy - side / 2.0).clamp(0.0, hf - side);
    Ok(CropTransform { x0, y0, side, out_size })
}

fn sample_bilinear(img: &Image, c: usize, x: f64, y: f64) -> f64 {
    let (_, h, w) = img.dim();
    // Pixel centres sit at integer + 0.5.
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
    let top = img[[c, y0, x0]] * (1.0 - tx) + img[[c, y0, x1]] * tx;
    let bottom = img[[c, y1, x0]] * (1.0 - tx) + img[[c, y1, x1]] * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Crop `image` around `bbox` and resize to `out_size x out_size` bilinearly.
pub fn crop_local(image: &Image, bbox: &BBox, out_size: usize, margin: f64) -> Result<(Image, CropTransform)> {
    let (c, h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::validation("cannot crop an empty image"));
    }
    let tf = crop_window(bbox, w, h, margin, out_size)?;
    let out = Image::from_shape_fn((c, out_size, out_size), |(ch, v, u)| {
        let g = tf.to_global([u as f64 + 0.5, v as f64 + 0.5]);
        sample_bilinear(image, ch, g[0], g[1])
    });
    Ok((out, tf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(s: usize) -> Image {
        Image::from_shape_fn((3, s, s), |(c, y, x)| (c * 1000 + y * s + x) as f64)
    }

    #[test]
    fn full_bbox_is_identity() {
        let img = ramp(16);
        let bbox = BBox::new(0.0, 0.0, 16.0, 16.0).unwrap();
        let (out, tf) = crop_local(&img, &bbox, 16, 0.0).unwrap();
        assert_eq!(out, img);
        assert_eq!(tf.scale(), 1.0);
    }

    #[test]
    fn quarter_box_maps_corner_to_origin_with_scale_two() {
        let bbox = BBox::new(128.0, 128.0, 256.0, 256.0).unwrap();
        let tf = crop_window(&bbox, 512, 512, 0.0, 512).unwrap();
        // Explicit affine oracle: u = (x - 128) * 512 / 256.
        let oracle = |x: f64| (x - 128.0) * 512.0 / 256.0;
        assert_eq!(tf.to_local([128.0, 128.0]), [0.0, 0.0]);
        assert_eq!(tf.scale(), 2.0);
        for x in [128.0, 200.5, 383.0] {
            assert_eq!(tf.to_local([x, x])[0], oracle(x));
        }
    }

    #[test]
    fn zero_width_is_rejected() {
        assert!(BBox::new(1.0, 1.0, 0.0, 5.0).is_err());
        let img = ramp(8);
        let bad = BBox { x: 0.0, y: 0.0, w: 0.0, h: 3.0 };
        assert!(crop_local(&img, &bad, 8, 0.15).is_err());
    }

    #[test]
    fn margin_expands_to_square_inside_bounds() {
        let bbox = BBox::new(50.0, 10.0, 10.0, 20.0).unwrap();
        let tf = crop_window(&bbox, 64, 64, 0.15, 64).unwrap();
        assert!((tf.side - 26.0).abs() < 1e-12);
        assert!(tf.x0 + tf.side <= 64.0 && tf.x0 >= 0.0 && tf.y0 >= 0.0);
    }

    #[test]
    fn parse_accepts_csv() {
        assert_eq!(BBox::parse("1, 2,3,4").unwrap(), BBox { x: 1.0, y: 2.0, w: 3.0, h: 4.0 });
        assert!(BBox::parse("1,2,3").is_err());
    }

    proptest! {
        #[test]
        fn local_global_round_trip_within_a_pixel(
            x in 0.0f64..40.0, y in 0.0f64..40.0, w in 1.0f64..24.0, h in 1.0f64..24.0,
            u in 0usize..64, v in 0usize..64, margin in 0.0f64..0.3,
        ) {
            let bbox = BBox::new(x, y, w, h).unwrap();
            let tf = crop_window(&bbox, 64, 64, margin, 64).unwrap();
            let g = tf.to_global([u as f64, v as f64]);
            let back = tf.to_local(g);
            prop_assert!((back[0] - u as f64).abs() <= 1.0);
            prop_assert!((back[1] - v as f64).abs() <= 1.0);
        }
    }
}
