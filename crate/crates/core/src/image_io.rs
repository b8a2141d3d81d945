//! RGB frames as planar `3 × h × w` floats in `[0, 1]`, plus PNG directory I/O.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Channel-major: `data[c * h * w + y * w + x]`.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width * height {
            return Err(Error::Shape(format!("{} values for a 3x{height}x{width} image", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let plane = width * height;
        let mut data = Vec::with_capacity(3 * plane);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, plane));
        }
        Self { width, height, data }
    }

    /// Uniform noise in `[0, 1)`.
    pub fn random(width: usize, height: usize, rng: &mut impl Rng) -> Self {
        let data = (0..3 * width * height).map(|_| rng.random::<f32>()).collect();
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(3 * width * height);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { width, height, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(width, height, |c, y, x| self.get(c, top + y, left + x)))
    }

    /// Crops to the largest top-left region whose sides are multiples of `m`.
    pub fn crop_to_multiple(&self, m: usize) -> Result<Self> {
        let (h, w) = (self.height / m * m, self.width / m * m);
        if h == 0 || w == 0 {
            return Err(Error::Shape(format!("{}x{} image is smaller than {m}", self.height, self.width)));
        }
        self.crop(0, 0, h, w)
    }

    /// Extends the bottom and right edges by replication until both sides are
    /// multiples of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> Self {
        let (h, w) = (self.height.div_ceil(m) * m, self.width.div_ceil(m) * m);
        if (h, w) == self.shape() {
            return self.clone();
        }
        Self::from_fn(w, h, |c, y, x| self.get(c, y.min(self.height - 1), x.min(self.width - 1)))
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, 3, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Reads sample `n` of a `(N, 3, H, W)` tensor, or a `(3, H, W)` tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let t = if t.rank() == 3 { t.clone() } else { t.get(n)? };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(w, h, data)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = img.as_raw();
        Ok(Self::from_fn(w, h, |c, y, x| raw[(y * w + x) * 3 + c] as f32 / 255.0))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = vec![0u8; 3 * self.width * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    buf[(y * self.width + x) * 3 + c] = (self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer sized for image")
            .save(path)
            .map_err(|source| Error::Image { path: path.to_path_buf(), source })
    }
}

/// PNG files of a directory in lexicographic order.
pub fn list_frames(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut frames: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext.eq_ignore_ascii_case("png")))
        .collect();
    frames.sort();
    Ok(frames)
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("psnr operands {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.data.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 4, |c, y, x| ((c * 20 + y * 5 + x) % 256) as f32 / 255.0);
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.shape(), (4, 5));
        assert!(img.data.iter().zip(&back.data).all(|(a, b)| (a - b).abs() < 1e-6));
        assert_eq!(list_frames(dir.path()).unwrap(), vec![path]);
    }

    #[test]
    fn tensor_round_trip() {
        let img = Image::from_fn(3, 2, |c, y, x| (c + y + x) as f32 / 10.0);
        let t = img.to_tensor(DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 2, 3]);
        assert_eq!(Image::from_tensor(&t, 0).unwrap(), img);
    }

    #[test]
    fn crop_bounds() {
        let img = Image::filled(10, 9, [0.1, 0.2, 0.3]);
        assert!(img.crop(2, 2, 8, 8).is_err());
        assert_eq!(img.crop_to_multiple(8).unwrap().shape(), (8, 8));
        assert_eq!(psnr(&img, &img).unwrap(), f64::INFINITY);
    }
}
