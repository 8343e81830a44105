//! Dense float images in height × width × channels layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An image with values in `[0, 1]`, stored row-major as `(y, x, channel)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Invalid(format!(
                "image must be at least 1x1, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Invalid(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Invalid(format!(
                "image data has {} values, expected {}",
                data.len(),
                height * width * channels
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        assert!(height > 0 && width > 0 && (channels == 1 || channels == 3));
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    /// Build from a per-pixel closure; values are clamped into `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Self::zeros(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.set(y, x, c, f(y, x, c));
                }
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

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v.clamp(0.0, 1.0);
    }

    /// Bilinear sample at a fractional `(y, x)` position. Taps outside the grid read as 0.
    #[inline]
    pub fn sample_bilinear(&self, y: f64, x: f64, c: usize) -> f64 {
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = y - y0;
        let fx = x - x0;
        let (y0, x0) = (y0 as isize, x0 as isize);
        let tap = |yy: isize, xx: isize| -> f64 {
            if yy < 0 || xx < 0 || yy >= self.height as isize || xx >= self.width as isize {
                0.0
            } else {
                self.get(yy as usize, xx as usize, c)
            }
        };
        let top = tap(y0, x0) * (1.0 - fx) + tap(y0, x0 + 1) * fx;
        let bottom = tap(y0 + 1, x0) * (1.0 - fx) + tap(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear resize with half-pixel centres and edge clamping, followed by
    /// channel conversion (gray → RGB by replication, RGB → gray by channel mean).
    pub fn resize(&self, height: usize, width: usize, channels: usize) -> Result<Image> {
        if height == 0 || width == 0 {
            return Err(Error::Invalid(format!(
                "resize target must be at least 1x1, got {height}x{width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Invalid(format!(
                "resize target must have 1 or 3 channels, got {channels}"
            )));
        }
        let spatial = if height == self.height && width == self.width {
            self.clone()
        } else {
            self.resize_spatial(height, width)
        };
        Ok(spatial.with_channels(channels))
    }

    fn resize_spatial(&self, height: usize, width: usize) -> Image {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let max_y = (self.height - 1) as f64;
        let max_x = (self.width - 1) as f64;
        let mut out = Image::zeros(height, width, self.channels);
        for y in 0..height {
            let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            let y0 = src_y.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let fy = src_y - y0 as f64;
            for x in 0..width {
                let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
                let x0 = src_x.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let fx = src_x - x0 as f64;
                for c in 0..self.channels {
                    let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
                    let bottom = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
                    out.set(y, x, c, top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        out
    }

    fn with_channels(self, channels: usize) -> Image {
        match (self.channels, channels) {
            (a, b) if a == b => self,
            (1, 3) => {
                let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
                Image {
                    channels: 3,
                    data,
                    ..self
                }
            }
            (3, 1) => {
                let data = self
                    .data
                    .chunks_exact(3)
                    .map(|px| ((px[0] + px[1] + px[2]) / 3.0).clamp(0.0, 1.0))
                    .collect();
                Image {
                    channels: 1,
                    data,
                    ..self
                }
            }
            _ => unreachable!("channel counts are validated to be 1 or 3"),
        }
    }

    /// Channel-major copy (`c, y, x`) for feeding a network.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * self.channels];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + i] = v;
            }
        }
        out
    }
}
