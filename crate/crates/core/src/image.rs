//! Square RGB images with values in `[0, 1]`, stored row-major HWC.

use std::path::Path;

use shapegene_tensor::{Scalar, Tensor};

use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f32>,
}

/// A face photograph (or rendering), `x` in the model's notation.
pub type FaceImage = Image;

impl Image {
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != size * size * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {size}x{size}x3 image",
                data.len()
            )));
        }
        Ok(Image { size, data })
    }

    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            data.extend_from_slice(&rgb);
        }
        Image { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> usize {
        self.size * self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, idx: usize) -> [f32; 3] {
        let p = &self.data[idx * 3..idx * 3 + 3];
        [p[0], p[1], p[2]]
    }

    pub fn set_pixel(&mut self, idx: usize, rgb: [f32; 3]) {
        self.data[idx * 3..idx * 3 + 3].copy_from_slice(&rgb);
    }

    pub fn check_same_size(&self, other: &Image) -> Result<()> {
        if self.size != other.size {
            return Err(Error::ResolutionMismatch(self.size, other.size));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// 8-bit RGB encoding, rounding to nearest.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self.data.iter().map(|&v| to_u8(v)).collect();
        image::RgbImage::from_raw(self.size as u32, self.size as u32, bytes)
            .expect("buffer matches dimensions")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self> {
        if img.width() != img.height() {
            return Err(Error::Shape(format!(
                "images must be square, got {}x{}",
                img.width(),
                img.height()
            )));
        }
        let data = img.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect();
        Image::new(img.width() as usize, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).at(dir)?;
        }
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        Self::decode_png(&bytes)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        Self::from_rgb8(&img)
    }

    /// NCHW tensor for a batch of equally sized images, values mapped
    /// through `a * v + b`.
    pub fn batch_tensor<T: Scalar>(images: &[&Image], a: f32, b: f32) -> Result<Tensor<T>> {
        let size = images.first().map(|i| i.size).unwrap_or(0);
        let hw = size * size;
        let mut data = Vec::with_capacity(images.len() * 3 * hw);
        for img in images {
            if img.size != size {
                return Err(Error::ResolutionMismatch(size, img.size));
            }
            for c in 0..3 {
                data.extend((0..hw).map(|i| T::from_f64_lossy(f64::from(a * img.data[i * 3 + c] + b))));
            }
        }
        Ok(Tensor::from_vec(data, &[images.len(), 3, size, size])?)
    }

    /// Unit-range images from the `[B, 3, H, W]` tensor `t`, inverting `a * v + b`.
    pub fn from_batch_tensor<T: Scalar>(t: &Tensor<T>, a: f32, b: f32) -> Result<Vec<Image>> {
        let (n, c, h, w) = t.dims4()?;
        if c != 3 || h != w {
            return Err(Error::Shape(format!("expected [B, 3, S, S], got {:?}", t.shape())));
        }
        let hw = h * w;
        let src = t.data();
        Ok((0..n)
            .map(|bi| {
                let mut data = vec![0.0f32; hw * 3];
                for ci in 0..3 {
                    for i in 0..hw {
                        let v = src[(bi * 3 + ci) * hw + i].as_f64() as f32;
                        data[i * 3 + ci] = ((v - b) / a).clamp(0.0, 1.0);
                    }
                }
                Image { size: h, data }
            })
            .collect())
    }
}

pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
