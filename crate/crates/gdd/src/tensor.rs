//! Dense channel-major image tensors.
//!
//! Every image in the crate is a `Tensor`: `channels x height x width` of
//! `f64`, stored row-major within each channel. Channel-major layout keeps
//! per-band operations (spectral projection, per-band statistics) on
//! contiguous memory.

use std::fmt;

use crate::error::{GddError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn with_channels(&self, channels: usize) -> Shape {
        Shape::new(channels, self.height, self.width)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    /// Zero-filled tensor.
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Builds a tensor from raw samples; the length must match the shape and
    /// every sample must be finite.
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(GddError::shape(
                "tensor construction",
                shape,
                format!("{} samples", data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(GddError::invalid(format!(
                "tensor construction: non-finite sample {bad}"
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1),
            data: vec![value],
        }
    }

    /// Internal constructor for kernel outputs; skips the finiteness check
    /// so diverging optimizations surface as a non-finite loss instead of a
    /// panic mid-graph.
    pub(crate) fn from_vec_unchecked(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.height + y) * self.shape.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(c, y, x);
        self.data[i] = value;
    }

    /// Contiguous samples of one channel.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.shape.plane();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.shape.plane();
        &mut self.data[c * plane..(c + 1) * plane]
    }

    /// Copies one channel out as a `1 x H x W` tensor.
    pub fn extract_channel(&self, c: usize) -> Tensor {
        Tensor {
            shape: Shape::new(1, self.shape.height, self.shape.width),
            data: self.channel(c).to_vec(),
        }
    }

    /// Repeats a single-channel tensor across `channels` bands.
    pub fn replicate_channels(&self, channels: usize) -> Result<Tensor> {
        if self.shape.channels != 1 {
            return Err(GddError::shape(
                "channel replication",
                self.shape,
                Shape::new(1, self.shape.height, self.shape.width),
            ));
        }
        let mut data = Vec::with_capacity(channels * self.shape.plane());
        for _ in 0..channels {
            data.extend_from_slice(&self.data);
        }
        Ok(Tensor {
            shape: self.shape.with_channels(channels),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Mean over channels of absolute values, as a single-channel tensor.
    pub fn mean_abs_over_channels(&self) -> Tensor {
        let plane = self.shape.plane();
        let mut out = vec![0.0; plane];
        for c in 0..self.shape.channels {
            let ch = self.channel(c);
            for (o, &v) in out.iter_mut().zip(ch) {
                *o += v.abs();
            }
        }
        let scale = 1.0 / self.shape.channels as f64;
        for o in &mut out {
            *o *= scale;
        }
        Tensor {
            shape: Shape::new(1, self.shape.height, self.shape.width),
            data: out,
        }
    }
}
