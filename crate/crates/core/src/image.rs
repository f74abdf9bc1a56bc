use std::path::Path;

use image::{GrayImage, RgbImage};

use crate::error::{io_err, DrtlError, Result};

/// `H x W x C` intensities in `[0,1]`, interleaved row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(DrtlError::Param(format!("channels must be 1 or 3, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(DrtlError::Param(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * channels {
            return Err(DrtlError::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
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

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    /// Clamps every value into `[0,1]`; NaN maps to 0.
    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        self
    }

    /// Rounds to the 8-bit grid.
    pub fn quantize_u8(mut self) -> Self {
        for v in &mut self.data {
            *v = to_u8(*v) as f32 / 255.0;
        }
        self
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    /// Crops a `size x size` window at `(y, x)` as planar `C x size x size`.
    pub fn crop_planar(&self, y: usize, x: usize, size: usize) -> Vec<f32> {
        let c = self.channels;
        let mut out = vec![0.0; c * size * size];
        for i in 0..size {
            for j in 0..size {
                let src = ((y + i) * self.width + x + j) * c;
                for ch in 0..c {
                    out[(ch * size + i) * size + j] = self.data[src + ch];
                }
            }
        }
        out
    }

    /// Whole image as planar `C x H x W`.
    pub fn to_planar(&self) -> Vec<f32> {
        let (h, w, c) = self.dims();
        let mut out = vec![0.0; c * h * w];
        for p in 0..h * w {
            for ch in 0..c {
                out[ch * h * w + p] = self.data[p * c + ch];
            }
        }
        out
    }

    pub fn from_planar(height: usize, width: usize, channels: usize, planar: &[f32]) -> Result<Self> {
        let hw = height * width;
        if planar.len() != hw * channels {
            return Err(DrtlError::Shape("planar buffer size mismatch".into()));
        }
        let mut data = vec![0.0; planar.len()];
        for p in 0..hw {
            for ch in 0..channels {
                data[p * channels + ch] = planar[ch * hw + p];
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_u8();
        let (w, h) = (self.width as u32, self.height as u32);
        let res = if self.channels == 1 {
            GrayImage::from_raw(w, h, bytes).map(|im| im.save(path))
        } else {
            RgbImage::from_raw(w, h, bytes).map(|im| im.save(path))
        };
        match res {
            Some(Ok(())) => Ok(()),
            Some(Err(e)) => Err(DrtlError::Load {
                path: path.to_path_buf(),
                reason: format!("png encode: {e}"),
            }),
            None => Err(DrtlError::Shape("buffer does not match dimensions".into())),
        }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        let dynimg = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(
            |e| DrtlError::Load {
                path: path.to_path_buf(),
                reason: e.to_string(),
            },
        )?;
        let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
        match dynimg.color().channel_count() {
            1 | 2 => Self::from_u8(h, w, 1, dynimg.to_luma8().as_raw()),
            _ => Self::from_u8(h, w, 3, dynimg.to_rgb8().as_raw()),
        }
    }
}

#[inline]
pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Image::new(4, 4, 2, vec![0.0; 32]).is_err());
        assert!(Image::new(4, 4, 1, vec![0.0; 15]).is_err());
    }

    #[test]
    fn planar_roundtrip() {
        let data: Vec<f32> = (0..48).map(|i| i as f32 / 48.0).collect();
        let img = Image::new(4, 4, 3, data).unwrap();
        let back = Image::from_planar(4, 4, 3, &img.to_planar()).unwrap();
        assert_eq!(img, back);
        assert_eq!(img.crop_planar(0, 0, 4), img.to_planar());
    }

    #[test]
    fn png_roundtrip_is_exact_on_u8_grid() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..300).map(|i| (i % 256) as f32 / 255.0).collect();
        let img = Image::new(10, 10, 3, data).unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p).unwrap(), img);
    }
}
