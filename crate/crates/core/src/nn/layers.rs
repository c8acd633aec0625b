//! The rest of the layer set: depthwise/pointwise convolution, pooling,
//! activations, the linear head and the classification loss.

use crate::error::{shape_err, Result};
use crate::linalg::gemm;
use crate::tensor::{FeatureMap, Tensor};

/// Depthwise 3×3 convolution with zero padding over an `H × W` grid whose
/// cells hold `B × C` values (`B` independent maps sharing one filter per
/// channel). Layout: `[(y·W + x)·B + b]·C + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Depthwise3x3 {
    /// `3 × 3 × C`
    pub weights: Vec<f64>,
    /// `C`
    pub bias: Vec<f64>,
}

/// Spatial layout of a depthwise/pointwise operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridLayout {
    pub h: usize,
    pub w: usize,
    pub batch: usize,
    pub channels: usize,
}

impl GridLayout {
    pub fn len(&self) -> usize {
        self.h * self.w * self.batch * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> usize {
        self.h * self.w * self.batch
    }
}

impl Depthwise3x3 {
    pub fn zeros(channels: usize) -> Self {
        Depthwise3x3 {
            weights: vec![0.0; 9 * channels],
            bias: vec![0.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.bias.len()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn check(&self, x: &[f64], l: GridLayout) -> Result<()> {
        if l.channels != self.channels() || x.len() != l.len() {
            return Err(shape_err!(
                "depthwise over {} channels got {:?} with {} values",
                self.channels(),
                l,
                x.len()
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64], l: GridLayout) -> Result<Vec<f64>> {
        self.check(x, l)?;
        let GridLayout {
            h,
            w,
            batch,
            channels: c,
        } = l;
        let cell = batch * c;
        let mut out = vec![0.0; x.len()];
        for y in 0..h {
            for xx in 0..w {
                let dst = (y * w + xx) * cell;
                for b in 0..batch {
                    out[dst + b * c..dst + (b + 1) * c].copy_from_slice(&self.bias);
                }
                for i in 0..3 {
                    let yy = y as isize + i as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for j in 0..3 {
                        let xs = xx as isize + j as isize - 1;
                        if xs < 0 || xs >= w as isize {
                            continue;
                        }
                        let src = (yy as usize * w + xs as usize) * cell;
                        let wk = &self.weights[(i * 3 + j) * c..(i * 3 + j + 1) * c];
                        for b in 0..batch {
                            let o = &mut out[dst + b * c..dst + (b + 1) * c];
                            let s = &x[src + b * c..src + (b + 1) * c];
                            for ch in 0..c {
                                o[ch] += wk[ch] * s[ch];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Returns `(grad_weights, grad_bias, grad_input)`.
    pub fn backward(
        &self,
        x: &[f64],
        l: GridLayout,
        grad_out: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        self.check(x, l)?;
        if grad_out.len() != x.len() {
            return Err(shape_err!(
                "depthwise upstream gradient length {}",
                grad_out.len()
            ));
        }
        let GridLayout {
            h,
            w,
            batch,
            channels: c,
        } = l;
        let cell = batch * c;
        let mut gw = vec![0.0; 9 * c];
        let mut gb = vec![0.0; c];
        let mut gx = vec![0.0; x.len()];
        for row in grad_out.chunks_exact(c) {
            for (b, g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
        for y in 0..h {
            for xx in 0..w {
                let dst = (y * w + xx) * cell;
                for i in 0..3 {
                    let yy = y as isize + i as isize - 1;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for j in 0..3 {
                        let xs = xx as isize + j as isize - 1;
                        if xs < 0 || xs >= w as isize {
                            continue;
                        }
                        let src = (yy as usize * w + xs as usize) * cell;
                        let t = (i * 3 + j) * c;
                        for b in 0..batch {
                            for ch in 0..c {
                                let g = grad_out[dst + b * c + ch];
                                gw[t + ch] += g * x[src + b * c + ch];
                                gx[src + b * c + ch] += g * self.weights[t + ch];
                            }
                        }
                    }
                }
            }
        }
        Ok((gw, gb, gx))
    }
}

/// 1×1 convolution: `y[row] = x[row] · W + b` with `W` stored `C_in × C_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pointwise {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub cin: usize,
    pub cout: usize,
}

impl Pointwise {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Pointwise {
            weights: vec![0.0; cin * cout],
            bias: vec![0.0; cout],
            cin,
            cout,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if !x.len().is_multiple_of(self.cin) {
            return Err(shape_err!(
                "pointwise input length {} not a multiple of {}",
                x.len(),
                self.cin
            ));
        }
        let rows = x.len() / self.cin;
        let mut out = Vec::with_capacity(rows * self.cout);
        for _ in 0..rows {
            out.extend_from_slice(&self.bias);
        }
        gemm(
            rows,
            self.cin,
            self.cout,
            1.0,
            x,
            false,
            &self.weights,
            false,
            1.0,
            &mut out,
        );
        Ok(out)
    }

    /// Returns `(grad_weights, grad_bias, grad_input)`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let rows = x.len() / self.cin;
        if rows * self.cin != x.len() || grad_out.len() != rows * self.cout {
            return Err(shape_err!("pointwise backward shape mismatch"));
        }
        let mut gw = vec![0.0; self.cin * self.cout];
        gemm(
            self.cin, rows, self.cout, 1.0, x, true, grad_out, false, 0.0, &mut gw,
        );
        let mut gb = vec![0.0; self.cout];
        for row in grad_out.chunks_exact(self.cout) {
            for (b, g) in gb.iter_mut().zip(row) {
                *b += g;
            }
        }
        let mut gx = vec![0.0; x.len()];
        gemm(
            rows,
            self.cout,
            self.cin,
            1.0,
            grad_out,
            false,
            &self.weights,
            true,
            0.0,
            &mut gx,
        );
        Ok((gw, gb, gx))
    }
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Gradient of ReLU at pre-activation `x`.
pub fn relu_backward(x: &[f64], grad_out: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect()
}

/// 2×2 max-pool with stride 2 and floor semantics.
///
/// Returns the pooled map and, for every output element, the flat input
/// index that won.
pub fn maxpool2x2(input: &FeatureMap) -> Result<(FeatureMap, Vec<usize>)> {
    let (h, w, c) = input.hwc()?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(shape_err!("cannot 2x2-pool a {h}x{w} map"));
    }
    let data = input.data();
    let mut out = Tensor::zeros(&[oh, ow, c]);
    let mut arg = vec![0usize; oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let mut best = (2 * y * w + 2 * x) * c + ch;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ((2 * y + dy) * w + 2 * x + dx) * c + ch;
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                let o = (y * ow + x) * c + ch;
                out.data_mut()[o] = data[best];
                arg[o] = best;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2x2_backward(input_dims: &[usize], argmax: &[usize], grad_out: &[f64]) -> FeatureMap {
    let mut g = Tensor::zeros(input_dims);
    let data = g.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out) {
        data[i] += v;
    }
    g
}

/// Per-channel maximum over all spatial positions.
pub fn global_max_pool(input: &FeatureMap) -> Result<(Vec<f64>, Vec<usize>)> {
    let (_, _, c) = input.hwc()?;
    let mut best = vec![f64::NEG_INFINITY; c];
    let mut arg = vec![0usize; c];
    for (i, px) in input.data().chunks_exact(c).enumerate() {
        for ch in 0..c {
            if px[ch] > best[ch] {
                best[ch] = px[ch];
                arg[ch] = i * c + ch;
            }
        }
    }
    Ok((best, arg))
}

pub fn global_max_pool_backward(
    input_dims: &[usize],
    argmax: &[usize],
    grad_out: &[f64],
) -> FeatureMap {
    maxpool2x2_backward(input_dims, argmax, grad_out)
}

/// Fully connected layer `y = W·x + b` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            inputs,
            outputs,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.inputs {
            return Err(shape_err!(
                "linear layer expects {} inputs, got {}",
                self.inputs,
                x.len()
            ));
        }
        Ok((0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect())
    }

    /// Returns `(grad_weights, grad_bias, grad_input)`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut gw = vec![0.0; self.weights.len()];
        let mut gx = vec![0.0; self.inputs];
        for o in 0..self.outputs {
            let g = grad_out[o];
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                gw[o * self.inputs + i] = g * x[i];
                gx[i] += g * row[i];
            }
        }
        (gw, grad_out.to_vec(), gx)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Cross-entropy of `softmax(logits)` against `label`, with its gradient.
pub fn softmax_xent(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(shape_err!(
            "label {label} out of range for {} classes",
            logits.len()
        ));
    }
    let mut p = softmax(logits);
    let loss = -p[label].max(f64::MIN_POSITIVE).ln();
    p[label] -= 1.0;
    Ok((loss, p))
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_ramp() {
        let x = Tensor::from_fn(&[4, 4, 1], |i| i as f64);
        let (y, _) = maxpool2x2(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn maxpool_floors_odd_sizes() {
        let x = Tensor::from_fn(&[7, 5, 2], |i| (i % 11) as f64);
        let (y, arg) = maxpool2x2(&x).unwrap();
        assert_eq!(y.dims(), &[3, 2, 2]);
        assert_eq!(arg.len(), 12);
    }

    #[test]
    fn relu_backward_passes_positive() {
        let x = [0.5, 2.0, 1e-9];
        let g = [1.0, -3.0, 7.0];
        assert_eq!(relu_backward(&x, &g), g.to_vec());
        assert_eq!(relu_backward(&[-1.0, 0.0], &[1.0, 1.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn uniform_logits_give_ln10() {
        let (loss, _) = softmax_xent(&[0.3; 10], 4).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_xent_rejects_bad_label() {
        assert!(softmax_xent(&[0.0; 10], 10).is_err());
    }

    #[test]
    fn pointwise_is_per_row_matmul() {
        let mut p = Pointwise::zeros(2, 3);
        p.weights = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        p.bias = vec![0.5, 0.0, -0.5];
        let y = p.forward(&[1.0, 1.0, 2.0, 0.0]).unwrap();
        assert_eq!(y, vec![5.5, 7.0, 8.5, 2.5, 4.0, 5.5]);
    }

    #[test]
    fn depthwise_identity_filter() {
        let mut d = Depthwise3x3::zeros(2);
        d.weights[4 * 2] = 1.0;
        d.weights[4 * 2 + 1] = 1.0;
        let l = GridLayout {
            h: 3,
            w: 4,
            batch: 2,
            channels: 2,
        };
        let x: Vec<f64> = (0..l.len()).map(|i| i as f64 * 0.1).collect();
        assert_eq!(d.forward(&x, l).unwrap(), x);
    }
}
