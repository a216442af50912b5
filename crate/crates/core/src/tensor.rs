use crate::error::{Error, Result};

/// Dense channel-major (`C × H × W`) array of `f64`, used for images and
/// for activations inside the network.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// A flat vector viewed as `n × 1 × 1`.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            channels: data.len(),
            height: 1,
            width: 1,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    /// Copies the `h × w` window whose top-left corner is `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if y + h > self.height || x + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w}@({y},{x}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Self::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for row in 0..h {
                let src = self.index(c, y + row, x);
                let dst = out.index(c, row, 0);
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        Ok(out)
    }

    /// Writes `patch` with its top-left corner at `(y, x)`.
    pub fn paste(&mut self, patch: &Tensor, y: usize, x: usize) -> Result<()> {
        if patch.channels != self.channels
            || y + patch.height > self.height
            || x + patch.width > self.width
        {
            return Err(Error::Shape(format!(
                "cannot paste {:?} at ({y},{x}) into {:?}",
                patch.shape(),
                self.shape()
            )));
        }
        for c in 0..self.channels {
            for row in 0..patch.height {
                let src = patch.index(c, row, 0);
                let dst = self.index(c, y + row, x);
                self.data[dst..dst + patch.width]
                    .copy_from_slice(&patch.data[src..src + patch.width]);
            }
        }
        Ok(())
    }
}
