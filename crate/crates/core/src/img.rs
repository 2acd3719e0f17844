//! Shared raster buffers: RGB images with channels in `[0, 1]`, boolean
//! pixel masks, and 8-bit PNG round trips.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImgError {
    #[error("image dimensions must be positive (got {width}x{height})")]
    EmptyImage { width: usize, height: usize },
    #[error("buffer length {got} does not match {width}x{height}")]
    LengthMismatch {
        width: usize,
        height: usize,
        got: usize,
    },
    #[error("non-finite pixel value at index {index}")]
    NonFinite { index: usize },
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, ImgError>;

/// Row-major RGB image. Channel values are finite `f64`, nominally in
/// `[0, 1]`; PNG export clamps to that range.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// `height * width` pixels, row-major.
    pub data: Vec<[f64; 3]>,
}

impl RgbImage {
    /// All-black image.
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(ImgError::EmptyImage { width, height });
        }
        if data.len() != width * height {
            return Err(ImgError::LengthMismatch {
                width,
                height,
                got: data.len(),
            });
        }
        if let Some(index) = data
            .iter()
            .position(|px| px.iter().any(|c| !c.is_finite()))
        {
            return Err(ImgError::NonFinite { index });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[self.idx(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, px: [f64; 3]) {
        let i = self.idx(x, y);
        self.data[i] = px;
    }

    /// Rec.601 luma.
    #[inline]
    pub fn luma_at(&self, x: usize, y: usize) -> f64 {
        let [r, g, b] = self.get(x, y);
        0.299 * r + 0.587 * g + 0.114 * b
    }

    /// Whole image as a row-major luma plane.
    pub fn luma_plane(&self) -> Vec<f64> {
        self.data
            .iter()
            .map(|[r, g, b]| 0.299 * r + 0.587 * g + 0.114 * b)
            .collect()
    }

    pub fn same_shape(&self, other: &RgbImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// 8-bit PNG. Channels are clamped to `[0, 1]` and rounded.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = self.get(x, y);
                let q = |c: f64| (c.clamp(0.0, 1.0) * 255.0).round() as u8;
                out.put_pixel(x as u32, y as u32, image::Rgb([q(px[0]), q(px[1]), q(px[2])]));
            }
        }
        out.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32);
                data.push([
                    px[0] as f64 / 255.0,
                    px[1] as f64 / 255.0,
                    px[2] as f64 / 255.0,
                ]);
            }
        }
        Self::from_raw(w, h, data)
    }
}

/// Row-major boolean pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Pixelwise conjunction. Shapes must match.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.width != other.width || self.height != other.height {
            return Err(ImgError::ShapeMismatch(
                self.width,
                self.height,
                other.width,
                other.height,
            ));
        }
        Ok(Mask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_raw_rejects_bad_lengths_and_nan() {
        assert!(matches!(
            RgbImage::from_raw(2, 2, vec![[0.0; 3]; 3]),
            Err(ImgError::LengthMismatch { .. })
        ));
        let mut data = vec![[0.5; 3]; 4];
        data[2][1] = f64::NAN;
        assert!(matches!(
            RgbImage::from_raw(2, 2, data),
            Err(ImgError::NonFinite { index: 2 })
        ));
        assert!(RgbImage::from_raw(2, 2, vec![[0.25; 3]; 4]).is_ok());
    }

    #[test]
    fn png_round_trip_is_exact_on_quantized_values() {
        let img = RgbImage::from_fn(5, 3, |x, y| {
            [
                (x as f64) / 255.0 * 17.0,
                (y as f64) / 255.0 * 41.0,
                ((x + y) as f64) / 255.0,
            ]
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        img.save_png(&path).unwrap();
        let back = RgbImage::load_png(&path).unwrap();
        assert_eq!(back.width, 5);
        assert_eq!(back.height, 3);
        for (a, b) in img.data.iter().zip(&back.data) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-12, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn mask_and_counts() {
        let mut a = Mask::empty(3, 2);
        a.set(0, 0, true);
        a.set(2, 1, true);
        let b = Mask::full(3, 2);
        let c = a.and(&b).unwrap();
        assert_eq!(c.count(), 2);
        assert!(c.get(2, 1));
        assert!(a.and(&Mask::full(2, 2)).is_err());
    }
}
