//! Pixel-space images in `[height, width, channels]` layout with values in `[0, 1]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    tensor: Tensor,
}

impl Image {
    /// Builds an image, rejecting non-finite or out-of-range intensities.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            tensor: Tensor::new(vec![height, width, channels], data),
        })
    }

    /// Clamps every value into `[0, 1]`; NaN becomes 0.
    pub fn from_tensor_clamped(t: Tensor) -> Self {
        assert_eq!(t.shape().len(), 3, "image tensor must be [H, W, C]");
        let t = t.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Self { tensor: t }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::from_tensor_clamped(Tensor::full(vec![height, width, channels], value))
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height(), self.width(), self.channels()]
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn len(&self) -> usize {
        self.tensor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensor.is_empty()
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.shape() == other.shape()
    }

    /// `clamp(self + delta)` into the pixel box.
    pub fn perturbed(&self, delta: &Tensor) -> Image {
        assert_eq!(delta.len(), self.len());
        let mut t = self.tensor.clone();
        t.add_assign(&delta.clone().reshape(self.tensor.shape().to_vec()));
        Image::from_tensor_clamped(t)
    }

    /// Difference `self - other` as a flat tensor.
    pub fn diff(&self, other: &Image) -> Tensor {
        self.tensor.zip_map(&other.tensor, |a, b| a - b)
    }

    /// Decodes an 8-bit image file; grayscale files are read as one channel.
    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (c, raw) = match img.color() {
            image::ColorType::L8 | image::ColorType::L16 => (1, img.to_luma8().into_raw()),
            _ => (3, img.to_rgb8().into_raw()),
        };
        let data = raw.into_iter().map(|v| v as f64 / 255.0).collect();
        Image::new(h, w, c, data)
    }

    /// Encodes as 8-bit PNG (RGB or grayscale).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data()
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let color = match self.channels() {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => {
                return Err(Error::InvalidArgument(format!(
                    "PNG export supports 1 or 3 channels, image has {c}"
                )))
            }
        };
        image::save_buffer(
            path,
            &bytes,
            self.width() as u32,
            self.height() as u32,
            color,
        )
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        assert!(Image::new(1, 1, 2, vec![0.3, 1.2]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.3, f64::NAN]).is_err());
        assert!(Image::new(1, 2, 2, vec![0.3, 0.1]).is_err());
        assert!(Image::new(1, 1, 2, vec![0.3, 0.7]).is_ok());
    }

    #[test]
    fn perturbed_clips() {
        let x = Image::new(1, 1, 2, vec![0.98, 0.01]).unwrap();
        let y = x.perturbed(&Tensor::from_vec(vec![0.05, -0.05]));
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn png_round_trip_is_8bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let data: Vec<f64> = (0..12).map(|i| (i * 20) as f64 / 255.0).collect();
        let x = Image::new(2, 2, 3, data).unwrap();
        x.save_png(&p).unwrap();
        assert_eq!(Image::load(&p).unwrap(), x);
    }
}
