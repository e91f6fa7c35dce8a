//! Dense 2-D grids: single-channel images, integer label maps, and
//! channel-major feature tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value excluded from every loss.
pub const IGNORE_LABEL: u8 = 255;

/// Single-channel real-valued image, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Shift and scale to zero mean and unit variance. A constant image is
    /// only centered.
    pub fn standardize(&mut self) {
        let n = self.data.len().max(1) as f64;
        let mean = self.mean();
        let var = self.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        let scale = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
        for v in &mut self.data {
            *v = (*v - mean) * scale;
        }
    }
}

/// Integer class-id map; background is 0.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Keep only the listed classes; every other id becomes background.
    pub fn restrict_to(&self, keep: &[u32]) -> LabelMap {
        let data = self
            .data
            .iter()
            .map(|&v| if keep.contains(&(v as u32)) { v } else { 0 })
            .collect();
        LabelMap {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn same_shape<T>(&self, other: &LabelMap, what: T) -> Result<()>
    where
        T: std::fmt::Display,
    {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// Channel-major feature tensor `C×H×W`.
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

    pub fn from_image(img: &Image) -> Self {
        Self {
            channels: 1,
            height: img.height,
            width: img.width,
            data: img.data.clone(),
        }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, p: usize) -> f64 {
        self.data[c * self.plane_len() + p]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Copy a subset of channels, in the given order.
    pub fn select_channels(&self, channels: &[usize]) -> Tensor {
        let n = self.plane_len();
        let mut out = Tensor::zeros(channels.len(), self.height, self.width);
        for (dst, &src) in channels.iter().enumerate() {
            out.data[dst * n..(dst + 1) * n].copy_from_slice(self.plane(src));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-pixel argmax over channels, mapped through `classes` (channel →
/// class id).
pub fn argmax_labels(logits: &Tensor, classes: &[u32]) -> LabelMap {
    let n = logits.plane_len();
    let mut out = LabelMap::zeros(logits.height, logits.width);
    for p in 0..n {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..logits.channels {
            let v = logits.at(c, p);
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        out.data[p] = classes[best] as u8;
    }
    out
}
