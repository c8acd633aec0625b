//! Dense row-major tensors.
//!
//! Feature maps are rank-3 tensors laid out `H × W × C` with the channel
//! index fastest. Convolution kernels are rank-4 `kh × kw × C_in × C_out`,
//! which makes an im2col row times the kernel (viewed as a
//! `(kh·kw·C_in) × C_out` matrix) land directly in `H × W × C` order.

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

/// A rank-3 `H × W × C` tensor on some image grid.
pub type FeatureMap = Tensor;

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(shape_err!("tensor extents must be >= 1, got {dims:?}"));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(shape_err!(
                "dims {dims:?} need {len} elements, got {}",
                data.len()
            ));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {dims:?}", self.dims));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    /// `(H, W, C)` of a rank-3 feature map.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(shape_err!("expected an H×W×C map, got {:?}", self.dims)),
        }
    }

    #[inline]
    pub fn at3(&self, y: usize, x: usize, c: usize) -> f64 {
        let (w, ch) = (self.dims[1], self.dims[2]);
        self.data[(y * w + x) * ch + c]
    }

    #[inline]
    pub fn set3(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let (w, ch) = (self.dims[1], self.dims[2]);
        self.data[(y * w + x) * ch + c] = v;
    }

    /// Channel vector at pixel `(y, x)`.
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let (w, ch) = (self.dims[1], self.dims[2]);
        let base = (y * w + x) * ch;
        &self.data[base..base + ch]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn check_same(&self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(shape_err!("{:?} vs {:?}", self.dims, other.dims));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on mismatched dims");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Rotate an `H × W × C` map by `shift` columns (positive shifts move
    /// content to larger column indices, wrapping around).
    pub fn roll_columns(&self, shift: isize) -> Result<Tensor> {
        let (h, w, c) = self.hwc()?;
        let mut out = Tensor::zeros(&self.dims);
        for y in 0..h {
            for x in 0..w {
                let dst = (x as isize + shift).rem_euclid(w as isize) as usize;
                let s = (y * w + x) * c;
                let d = (y * w + dst) * c;
                out.data[d..d + c].copy_from_slice(&self.data[s..s + c]);
            }
        }
        Ok(out)
    }

    /// Round every element through `f32`, mirroring what serialization does.
    pub fn quantized_f32(&self) -> Tensor {
        self.map(|v| v as f32 as f64)
    }
}
