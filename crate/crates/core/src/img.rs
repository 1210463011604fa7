//! Planar float images and binary masks.
//!
//! All image data in this crate is linear float, row 0 at the top. 8-bit
//! import/export uses the documented tone-mapping contract: clamp to [0, 1]
//! then scale by 255 and round; no gamma.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageF {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, channel-interleaved: `data[(y*width + x)*channels + c]`.
    pub data: Vec<f64>,
}

impl ImageF {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        ImageF {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Self::zeros(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        img
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.idx(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.idx(x, y, c);
        self.data[i] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn npixels(&self) -> usize {
        self.width * self.height
    }

    pub fn same_shape(&self, other: &ImageF) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn assert_shape(&self, other: &ImageF, what: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::contract(format!(
                "{what}: shape mismatch ({}x{}x{} vs {}x{}x{})",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &ImageF) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Extract one channel as a single-channel image.
    pub fn channel(&self, c: usize) -> ImageF {
        ImageF::from_fn(self.width, self.height, 1, |x, y, _| self.get(x, y, c))
    }

    /// 8-bit export per the tone-mapping contract (clamp then x255, no gamma).
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Mask {
            width,
            height,
            data: vec![value; width * height],
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
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn invert(&mut self) {
        for b in &mut self.data {
            *b = !*b;
        }
    }

    /// Morphological erosion with a `k`x`k` square structuring element.
    /// Pixels whose window extends outside the image erode away.
    pub fn erode(&self, k: usize) -> Mask {
        assert!(k >= 1 && k % 2 == 1, "erosion window must be odd");
        let r = (k / 2) as isize;
        let mut out = Mask::filled(self.width, self.height, false);
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                let mut keep = true;
                'window: for dy in -r..=r {
                    for dx in -r..=r {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0
                            || ny < 0
                            || nx >= self.width as isize
                            || ny >= self.height as isize
                            || !self.get(nx as usize, ny as usize)
                        {
                            keep = false;
                            break 'window;
                        }
                    }
                }
                if keep {
                    out.set(x as usize, y as usize, true);
                }
            }
        }
        out
    }
}
