//! Image and mask containers shared by every module.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::{Rgb, RgbImage};
use xgans_nn::{Shape, Tensor};

use crate::error::{Error, Result};

/// RGB image with values in [-1, 1], stored planar (channel-major).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

pub const WHITE: [f32; 3] = [1.0, 1.0, 1.0];

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!("image dimensions must be positive, got {height}x{width}")));
        }
        if data.len() != 3 * height * width {
            return Err(Error::invalid(format!(
                "{} values do not form a {height}x{width} RGB image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let plane = height * width;
        let mut data = Vec::with_capacity(3 * plane);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, plane));
        }
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Self::filled(height, width, [0.0; 3]);
        for y in 0..height {
            for x in 0..width {
                img.set_pixel(y, x, f(y, x));
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let p = self.height * self.width;
        let i = y * self.width + x;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * p + i] = v;
        }
    }

    /// Copy of the `size`×`size` window with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, size_h: usize, size_w: usize) -> Result<Self> {
        if top + size_h > self.height || left + size_w > self.width {
            return Err(Error::invalid(format!(
                "crop {size_h}x{size_w} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(size_h, size_w, |y, x| self.pixel(top + y, left + x)))
    }

    /// ITU-R BT.601 luma in [0, 1], row-major.
    pub fn luma01(&self) -> Vec<f64> {
        let p = self.height * self.width;
        (0..p)
            .map(|i| {
                let r = (self.data[i] as f64 + 1.0) * 0.5;
                let g = (self.data[p + i] as f64 + 1.0) * 0.5;
                let b = (self.data[2 * p + i] as f64 + 1.0) * 0.5;
                0.299 * r + 0.587 * g + 0.114 * b
            })
            .collect()
    }

    /// `[1, 3, H, W]` network tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(Shape::new(1, 3, self.height, self.width), self.data.clone()).expect("3-channel layout")
    }

    /// Sample `n` of a `[N, 3, H, W]` tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let s = t.shape();
        if s.c != 3 || n >= s.n {
            return Err(Error::invalid(format!("tensor {s} has no RGB sample {n}")));
        }
        Self::new(s.h, s.w, t.sample(n).to_vec())
    }

    pub fn batch_tensor(images: &[&ImageTensor]) -> Result<Tensor> {
        let ts: Vec<Tensor> = images.iter().map(|i| i.to_tensor()).collect();
        let refs: Vec<&Tensor> = ts.iter().collect();
        Ok(Tensor::stack(&refs)?)
    }

    /// Map [0, 255] to [-1, 1].
    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(h, w, |y, x| {
            let Rgb(p) = *img.get_pixel(x as u32, y as u32);
            p.map(normalize_byte)
        })
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Rgb(self.pixel(y as usize, x as usize).map(denormalize_value))
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|source| Error::Image { path: path.into(), source })
    }

    /// Side-by-side concatenation of equally tall images.
    pub fn hconcat(images: &[&ImageTensor]) -> Result<Self> {
        let h = images.first().map(|i| i.height).ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        if images.iter().any(|i| i.height != h) {
            return Err(Error::invalid("hconcat needs equal heights"));
        }
        let w: usize = images.iter().map(|i| i.width).sum();
        let mut out = Self::filled(h, w, [0.0; 3]);
        let mut x0 = 0;
        for img in images {
            for y in 0..h {
                for x in 0..img.width {
                    out.set_pixel(y, x0 + x, img.pixel(y, x));
                }
            }
            x0 += img.width;
        }
        Ok(out)
    }
}

pub fn normalize_byte(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn denormalize_value(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Retention mask: `true` marks a pixel carried over from the real image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || bits.len() != height * width {
            return Err(Error::invalid(format!("{} bits do not form a {height}x{width} mask", bits.len())));
        }
        Ok(Self { height, width, bits })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self { height, width, bits: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn kept_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn kept_fraction(&self) -> f64 {
        self.kept_count() as f64 / self.bits.len() as f64
    }

    /// `[1, 1, H, W]` tensor of 0/1.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(Shape::new(1, 1, self.height, self.width), |i| self.bits[i] as u8 as f32)
    }

    /// Write as a 1-bit grayscale PNG (white = kept).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let stride = self.width.div_ceil(8);
        let mut packed = vec![0u8; stride * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    packed[y * stride + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        let png_err = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&packed).map_err(png_err)?;
        writer.finish().map_err(png_err)
    }

    /// Read a mask written by [`Mask::save_png`]; any grayscale PNG works (nonzero = kept).
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?;
        let luma = img.to_luma8();
        let (w, h) = (luma.width() as usize, luma.height() as usize);
        Self::new(h, w, luma.pixels().map(|p| p.0[0] > 127).collect())
    }
}

/// Load any raster image from disk as-is (no resizing) in model space.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = image::ImageReader::new(BufReader::new(file))
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|source| Error::Image { path: path.into(), source })?;
    Ok(ImageTensor::from_rgb8(&img.to_rgb8()))
}
