//! Dense height × width × channels tensors and the differentiable primitives
//! the network is built from.
//!
//! Storage is row-major `(y, x, c)` with channels innermost, so the channel
//! vector of one pixel is a contiguous slice. Every primitive comes as a
//! forward/backward pair; backward functions take the cotangent of the
//! forward output plus whatever the forward pass consumed.

mod conv;
pub mod gradcheck;

pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvParams, KERNEL_SIZE};
pub use gradcheck::{
    check_gradient, check_gradient_refined, check_gradient_with, finite_difference_check, GradCheckReport, Stencil,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Tensor {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::dim(format!(
                "tensor dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::dim(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Tensor {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a tensor by evaluating `f(y, x, c)` at every position.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Tensor {
            height,
            width,
            channels,
            data,
        }
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

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
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

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let i = self.index(y, x, c);
        self.data[i] = value;
    }

    /// Channel vector of pixel `(y, x)`.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies channel `c` into a single-channel tensor.
    pub fn channel(&self, c: usize) -> Result<Tensor> {
        if c >= self.channels {
            return Err(Error::dim(format!(
                "channel {c} out of range for {} channels",
                self.channels
            )));
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px[c])
            .collect();
        Ok(Tensor {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        })
    }

    /// Rectangular spatial window, all channels kept.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::dim(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in top..top + height {
            let start = self.index(y, left, 0);
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(Tensor {
            height,
            width,
            channels: self.channels,
            data,
        })
    }

    /// Swaps the two spatial axes.
    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.width, self.height, self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                let src = self.index(y, x, 0);
                let dst = out.index(x, y, 0);
                out.data[dst..dst + self.channels]
                    .copy_from_slice(&self.data[src..src + self.channels]);
            }
        }
        out
    }

    /// Bilinear resampling with pixel-centre alignment and edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Tensor> {
        if height == 0 || width == 0 {
            return Err(Error::dim("resize target must be non-empty"));
        }
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let source = |dst: usize, scale: f64, len: usize| {
            let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            (lo, hi, pos - lo as f64)
        };
        let cols: Vec<_> = (0..width).map(|x| source(x, sx, self.width)).collect();
        let mut out = Tensor::zeros(height, width, self.channels);
        for y in 0..height {
            let (y0, y1, fy) = source(y, sy, self.height);
            for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                for c in 0..self.channels {
                    let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
                    let bottom = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
                    out.set(y, x, c, top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        Ok(out)
    }

    /// Same shape, new contents. `data` must have the same length.
    pub(crate) fn with_data(&self, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(data.len(), self.data.len());
        Tensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        }
    }

    pub(crate) fn ensure_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes the cotangent through where the forward input was strictly positive.
pub fn relu_backward(grad_out: &Tensor, cached_input: &Tensor) -> Result<Tensor> {
    grad_out.ensure_same_shape(cached_input, "relu_backward")?;
    let data = grad_out
        .data
        .iter()
        .zip(&cached_input.data)
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(grad_out.with_data(data))
}

/// Stacks tensors along the channel axis in list order.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat_channels needs at least one part"))?;
    let (h, w) = (first.height, first.width);
    if let Some(bad) = parts.iter().find(|p| p.height != h || p.width != w) {
        return Err(Error::dim(format!(
            "concat_channels: part is {}x{}, expected {h}x{w}",
            bad.height, bad.width
        )));
    }
    let channels: usize = parts.iter().map(|p| p.channels).sum();
    let mut data = Vec::with_capacity(h * w * channels);
    for px in 0..h * w {
        for p in parts {
            data.extend_from_slice(&p.data[px * p.channels..(px + 1) * p.channels]);
        }
    }
    Ok(Tensor {
        height: h,
        width: w,
        channels,
        data,
    })
}

/// Splits a cotangent along channels; inverse of [`concat_channels`].
pub fn concat_backward(grad_out: &Tensor, part_channels: &[usize]) -> Result<Vec<Tensor>> {
    let total: usize = part_channels.iter().sum();
    if total != grad_out.channels || part_channels.contains(&0) {
        return Err(Error::dim(format!(
            "concat_backward: part channels {part_channels:?} do not sum to {}",
            grad_out.channels
        )));
    }
    let pixels = grad_out.height * grad_out.width;
    let mut parts: Vec<Tensor> = part_channels
        .iter()
        .map(|&c| Tensor {
            height: grad_out.height,
            width: grad_out.width,
            channels: c,
            data: Vec::with_capacity(pixels * c),
        })
        .collect();
    for px in grad_out.data.chunks_exact(grad_out.channels) {
        let mut offset = 0;
        for part in parts.iter_mut() {
            part.data
                .extend_from_slice(&px[offset..offset + part.channels]);
            offset += part.channels;
        }
    }
    Ok(parts)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.ensure_same_shape(b, "add")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(a.with_data(data))
}

/// `a - b`, elementwise.
pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.ensure_same_shape(b, "sub")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Ok(a.with_data(data))
}

/// In-place `acc += other`.
pub fn add_assign(acc: &mut Tensor, other: &Tensor) -> Result<()> {
    acc.ensure_same_shape(other, "add_assign")?;
    for (a, b) in acc.data.iter_mut().zip(&other.data) {
        *a += b;
    }
    Ok(())
}
