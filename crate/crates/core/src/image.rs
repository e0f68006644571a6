//! Planar float images and 8-bit PNG interchange.

use std::path::Path;

use ::image::codecs::png::PngEncoder;
use ::image::ImageEncoder;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueRange {
    /// `[0, 1]`, the metric domain.
    Unit,
    /// `[-1, 1]`, the network domain.
    Signed,
}

impl ValueRange {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Signed => (-1.0, 1.0),
        }
    }
}

/// `channels × height × width` values, planar.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    range: ValueRange,
}

impl Image {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        range: ValueRange,
    ) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(invalid!("images have 1 or 3 channels, got {channels}"));
        }
        if height == 0 || width == 0 {
            return Err(invalid!("empty image {height}×{width}"));
        }
        if data.len() != channels * height * width {
            return Err(shape_err!(
                "{channels}×{height}×{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite pixel value {bad}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
            range,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32, range: ValueRange) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width], range)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub(crate) fn with_data(&self, height: usize, width: usize, data: Vec<f32>) -> Result<Image> {
        Image::new(self.channels, height, width, data, self.range)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn clamped(&self) -> Image {
        let (lo, hi) = self.range.bounds();
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        out
    }

    /// Affine map into `target`.
    pub fn to_range(&self, target: ValueRange) -> Image {
        let mut out = self.clone();
        match (self.range, target) {
            (ValueRange::Unit, ValueRange::Signed) => {
                out.data.iter_mut().for_each(|v| *v = *v * 2.0 - 1.0)
            }
            (ValueRange::Signed, ValueRange::Unit) => {
                out.data.iter_mut().for_each(|v| *v = (*v + 1.0) * 0.5)
            }
            _ => {}
        }
        out.range = target;
        out
    }

    /// Round to the nearest of 256 levels of the declared range.
    pub fn quantized(&self) -> Image {
        let unit = self.to_range(ValueRange::Unit);
        let data = unit
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
            .collect();
        Image {
            data,
            ..unit
        }
        .to_range(self.range)
    }

    /// Crop a `h × w` window with top-left corner `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(shape_err!(
                "crop {h}×{w} at ({y0}, {x0}) exceeds {}×{}",
                self.height,
                self.width
            ));
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in y0..y0 + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        self.with_data(h, w, data)
    }

    /// Batch-of-one NCHW tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, self.channels, self.height, self.width], self.data.clone())
            .expect("image dimensions match data")
    }

    /// Accepts `(c, h, w)` or a batch-of-one `(1, c, h, w)` tensor.
    pub fn from_tensor(t: &Tensor, range: ValueRange) -> Result<Image> {
        let (c, h, w) = match *t.shape() {
            [c, h, w] | [1, c, h, w] => (c, h, w),
            _ => return Err(shape_err!("expected (1, c, h, w) image tensor, got {:?}", t.shape())),
        };
        Image::new(c, h, w, t.data().to_vec(), range)
    }

    /// Interleaved 8-bit samples of the quantized image.
    pub fn to_u8(&self) -> Vec<u8> {
        let unit = self.to_range(ValueRange::Unit);
        let n = self.height * self.width;
        let mut out = vec![0u8; n * self.channels];
        for c in 0..self.channels {
            for (i, v) in unit.plane(c).iter().enumerate() {
                out[i * self.channels + c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        out
    }

    pub fn from_u8(channels: usize, height: usize, width: usize, bytes: &[u8]) -> Result<Image> {
        if bytes.len() != channels * height * width {
            return Err(shape_err!("pixel buffer has {} bytes, expected {}", bytes.len(), channels * height * width));
        }
        let n = height * width;
        let mut data = vec![0.0f32; channels * n];
        for (i, px) in bytes.chunks_exact(channels).enumerate() {
            for (c, &b) in px.iter().enumerate() {
                data[c * n + i] = b as f32 / 255.0;
            }
        }
        Image::new(channels, height, width, data, ValueRange::Unit)
    }

    /// Decode any PNG as RGB in the unit range.
    pub fn load_png(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = ::image::load_from_memory_with_format(&bytes, ::image::ImageFormat::Png)?.to_rgb8();
        let (w, h) = img.dimensions();
        Image::from_u8(3, h as usize, w as usize, img.as_raw())
    }

    /// Encode as 8-bit PNG (RGB or grayscale), atomically.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 3 {
            ::image::ExtendedColorType::Rgb8
        } else {
            ::image::ExtendedColorType::L8
        };
        let mut buf = Vec::new();
        PngEncoder::new(&mut buf).write_image(
            &self.to_u8(),
            self.width as u32,
            self.height as u32,
            color,
        )?;
        crate::fsutil::write_atomic(path, &buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_conversion_round_trips() {
        let img = Image::new(1, 1, 3, vec![0.0, 0.5, 1.0], ValueRange::Unit).unwrap();
        let s = img.to_range(ValueRange::Signed);
        assert_eq!(s.data(), &[-1.0, 0.0, 1.0]);
        assert_eq!(s.to_range(ValueRange::Unit), img);
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Image::new(2, 1, 1, vec![0.0; 2], ValueRange::Unit).is_err());
        assert!(Image::new(1, 2, 2, vec![0.0; 3], ValueRange::Unit).is_err());
        assert!(Image::new(1, 1, 1, vec![f32::NAN], ValueRange::Unit).is_err());
    }

    #[test]
    fn png_round_trip_is_lossless_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..3 * 5 * 7).map(|i| (i * 37 % 256) as f32 / 255.0).collect();
        let img = Image::new(3, 5, 7, data, ValueRange::Unit).unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert_eq!(back.to_u8(), img.to_u8());
        assert!(back.max_abs_diff_unchecked(&img) < 1e-6);
    }

    #[test]
    fn quantization_is_idempotent() {
        let img = Image::new(1, 1, 4, vec![-1.0, -0.3, 0.2, 0.999], ValueRange::Signed).unwrap();
        let q = img.quantized();
        assert_eq!(q.quantized(), q);
        assert!(q.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() <= 1.0 / 255.0));
    }

    #[test]
    fn crop_and_tensor_views() {
        let data: Vec<f32> = (0..2 * 4 * 4).map(|i| i as f32 / 32.0).collect();
        let img = Image::new(1, 4, 8, data, ValueRange::Unit).unwrap();
        let c = img.crop(1, 2, 2, 3).unwrap();
        assert_eq!(c.data(), &[img.get(0, 1, 2), img.get(0, 1, 3), img.get(0, 1, 4), img.get(0, 2, 2), img.get(0, 2, 3), img.get(0, 2, 4)]);
        assert!(img.crop(3, 0, 2, 1).is_err());
        let t = img.to_tensor();
        assert_eq!(Image::from_tensor(&t, ValueRange::Unit).unwrap(), img);
    }

    impl Image {
        fn max_abs_diff_unchecked(&self, o: &Image) -> f32 {
            self.data.iter().zip(&o.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
        }
    }
}
