//! RGB frames and nearest-neighbour affine warping shared by images and masks.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BinaryMask;

/// Row-major H×W×3 image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "image buffer of {} values does not match {height}x{width}x3",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image values must lie in [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, u: usize, v: usize) -> [f32; 3] {
        let i = (v * self.width + u) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, u: usize, v: usize, rgb: [f32; 3]) {
        let i = (v * self.width + u) * 3;
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    /// Applies `f` to every pixel, clamping the result into range.
    pub fn map_pixels(&mut self, mut f: impl FnMut([f32; 3]) -> [f32; 3]) {
        for px in self.data.chunks_exact_mut(3) {
            let out = f([px[0], px[1], px[2]]);
            for c in 0..3 {
                px[c] = out[c].clamp(0.0, 1.0);
            }
        }
    }

    /// Channel-planar copy (3×H×W), the layout the model consumes.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; 3 * hw];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            out[i] = px[0];
            out[hw + i] = px[1];
            out[2 * hw + i] = px[2];
        }
        out
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> RgbImage {
        let mut out = RgbImage::filled(h, w, [0.0; 3]);
        for v in 0..h {
            for u in 0..w {
                out.set_pixel(u, v, self.pixel(x0 + u, y0 + v));
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::invalid("image buffer size mismatch"))?;
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<RgbImage> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        RgbImage::from_vec(h as usize, w as usize, data)
    }
}

/// Maps output pixel centres to input coordinates:
/// `x_in = a*x + b*y + tx`, `y_in = c*x + d*y + ty`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        a: 1.0,
        b: 0.0,
        c: 0.0,
        d: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    /// Inverse map of "scale by `scale`, rotate by `angle_deg` about
    /// `(cx_in, cy_in)`, then move that point to `(cx_out, cy_out)`",
    /// optionally mirrored horizontally.
    pub fn inverse_similarity(
        scale: f64,
        angle_deg: f64,
        flip: bool,
        center_in: (f64, f64),
        center_out: (f64, f64),
    ) -> Affine {
        let t = angle_deg.to_radians();
        let (s, c) = t.sin_cos();
        let fx = if flip { -1.0 } else { 1.0 };
        // forward: out = R * S * F * (in - cin) + cout; invert.
        let a = fx * c / scale;
        let b = fx * s / scale;
        let cc = -s / scale;
        let d = c / scale;
        let (cxo, cyo) = center_out;
        let (cxi, cyi) = center_in;
        Affine {
            a,
            b,
            c: cc,
            d,
            tx: cxi - (a * cxo + b * cyo),
            ty: cyi - (cc * cxo + d * cyo),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Source pixel index for output pixel `(u, v)` under nearest sampling.
    #[inline]
    pub fn source(&self, u: usize, v: usize, src_w: usize, src_h: usize) -> Option<(usize, usize)> {
        let x = u as f64 + 0.5;
        let y = v as f64 + 0.5;
        let xs = self.a * x + self.b * y + self.tx;
        let ys = self.c * x + self.d * y + self.ty;
        if xs < 0.0 || ys < 0.0 {
            return None;
        }
        let (xi, yi) = (xs.floor() as usize, ys.floor() as usize);
        (xi < src_w && yi < src_h).then_some((xi, yi))
    }
}

pub fn warp_image(img: &RgbImage, inv: &Affine, out_h: usize, out_w: usize, fill: [f32; 3]) -> RgbImage {
    let mut out = RgbImage::filled(out_h, out_w, fill);
    for v in 0..out_h {
        for u in 0..out_w {
            if let Some((x, y)) = inv.source(u, v, img.width, img.height) {
                out.set_pixel(u, v, img.pixel(x, y));
            }
        }
    }
    out
}

pub fn warp_mask(m: &BinaryMask, inv: &Affine, out_h: usize, out_w: usize) -> BinaryMask {
    let (w, h) = (m.width(), m.height());
    BinaryMask::from_fn(out_h, out_w, |u, v| {
        inv.source(u, v, w, h).is_some_and(|(x, y)| m.get(x, y))
    })
    .expect("output dimensions are positive")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_warp_is_exact() {
        let img = RgbImage::from_vec(2, 3, (0..18).map(|i| i as f32 / 17.0).collect()).unwrap();
        let out = warp_image(&img, &Affine::IDENTITY, 2, 3, [0.0; 3]);
        assert_eq!(out, img);
        let sim = Affine::inverse_similarity(1.0, 0.0, false, (1.5, 1.0), (1.5, 1.0));
        assert!((sim.a - 1.0).abs() < 1e-12 && sim.tx.abs() < 1e-12);
    }

    #[test]
    fn flip_mirrors_columns() {
        let m = BinaryMask::from_vec(1, 4, vec![1, 1, 0, 0]).unwrap();
        let inv = Affine::inverse_similarity(1.0, 0.0, true, (2.0, 0.5), (2.0, 0.5));
        assert_eq!(warp_mask(&m, &inv, 1, 4).values(), &[0, 0, 1, 1]);
    }

    #[test]
    fn chw_layout() {
        let img = RgbImage::filled(1, 2, [0.1, 0.2, 0.3]);
        assert_eq!(img.to_chw(), vec![0.1, 0.1, 0.2, 0.2, 0.3, 0.3]);
    }
}
