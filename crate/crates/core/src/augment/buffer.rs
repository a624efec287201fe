use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// RGB image, row-major `[height][width][3]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Domain(format!("zero-sized image {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Domain(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, data)
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

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Per-pixel mean over channels, row-major.
    pub fn gray(&self) -> Vec<f32> {
        self.data.chunks(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect()
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn map(&self, f: impl Fn(f32, usize) -> f32) -> Self {
        let data = self.data.iter().enumerate().map(|(i, &v)| f(v, i % 3)).collect();
        Self {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if w == 0 || h == 0 || x + w > self.width || y + h > self.height {
            return Err(Error::Domain(format!(
                "crop {w}x{h}+{x}+{y} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Self::new(h, w, data)
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Domain(format!("resize to zero-sized {height}x{width}")));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let axis = |dst: usize, src: usize| -> Vec<(usize, usize, f32)> {
            let scale = src as f64 / dst as f64;
            (0..dst)
                .map(|d| {
                    let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                    let i0 = s.floor() as usize;
                    let i1 = (i0 + 1).min(src - 1);
                    (i0, i1, (s - i0 as f64) as f32)
                })
                .collect()
        };
        let ys = axis(height, self.height);
        let xs = axis(width, self.width);
        let mut data = Vec::with_capacity(height * width * 3);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for c in 0..3 {
                    let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
                    let bottom = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
                    data.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self> {
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self::new(img.height() as usize, img.width() as usize, data)
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size matches")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Self::from_rgb8(&img.to_rgb8())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })
    }
}

/// Per-channel standardization constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// Resize to `target_hw²` and standardize into a `[3, hw, hw]` tensor.
pub fn preprocess(img: &ImageBuffer, target_hw: usize, norm: &Normalization) -> Result<Tensor<f32>> {
    let r = img.resize(target_hw, target_hw)?;
    let plane = target_hw * target_hw;
    let mut out = vec![0.0f32; 3 * plane];
    for (p, px) in r.data().chunks(3).enumerate() {
        for c in 0..3 {
            out[c * plane + p] = (px[c] - norm.mean[c]) / norm.std[c];
        }
    }
    Tensor::new(&[3, target_hw, target_hw], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_gray_preprocess() {
        let g = 128.0 / 255.0;
        let img = ImageBuffer::filled(224, 224, [g; 3]).unwrap();
        let n = Normalization::default();
        let t = preprocess(&img, 224, &n).unwrap();
        assert_eq!(t.shape(), &[3, 224, 224]);
        for c in 0..3 {
            let expected = (g - n.mean[c]) / n.std[c];
            assert!(t.data()[c * 224 * 224..(c + 1) * 224 * 224].iter().all(|&v| v == expected));
        }
    }

    #[test]
    fn aligned_downsample_keeps_block_values() {
        let img = ImageBuffer::from_fn(448, 448, |y, x, c| ((y / 2 * 7 + x / 2 * 3 + c) % 11) as f32 / 10.0).unwrap();
        let r = img.resize(224, 224).unwrap();
        for y in 0..224 {
            for x in 0..224 {
                for c in 0..3 {
                    assert_eq!(r.get(y, x, c), img.get(2 * y, 2 * x, c));
                }
            }
        }
    }

    #[test]
    fn any_size_preprocesses_to_target() {
        for (h, w) in [(1, 1), (37, 90), (500, 300)] {
            let img = ImageBuffer::filled(h, w, [0.3, 0.5, 0.7]).unwrap();
            assert_eq!(preprocess(&img, 64, &Normalization::default()).unwrap().shape(), &[3, 64, 64]);
        }
        assert!(ImageBuffer::new(0, 5, vec![]).is_err());
    }

    #[test]
    fn rgb8_round_trip() {
        let img = ImageBuffer::from_fn(5, 7, |y, x, c| ((y * 31 + x * 7 + c * 3) % 256) as f32 / 255.0).unwrap();
        let back = ImageBuffer::from_rgb8(&img.to_rgb8()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn crop_bounds() {
        let img = ImageBuffer::from_fn(10, 12, |y, x, _| (y * 12 + x) as f32).unwrap();
        let c = img.crop(3, 2, 4, 5).unwrap();
        assert_eq!(c.get(0, 0, 0), (2 * 12 + 3) as f32);
        assert_eq!(c.get(4, 3, 0), (6 * 12 + 6) as f32);
        assert!(img.crop(9, 0, 4, 1).is_err());
    }
}
