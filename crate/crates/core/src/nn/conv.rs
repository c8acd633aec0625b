//! Dense 2-D convolution (cross-correlation) via im2col + GEMM.
//!
//! Vertical padding is always zero-fill. Horizontal padding is either zero
//! or circular; circular padding is what maps living on the sphere use.
//! Kernels are `kh × kw × C_in × C_out` with odd sides and may be dilated.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::gemm;
use crate::tensor::{FeatureMap, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HPadding {
    Zero,
    Circular,
}

/// Number of im2col elements materialised at once.
const IM2COL_BUDGET: usize = 1 << 21;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `kh × kw × C_in × C_out`
    pub kernel: Tensor,
    /// `C_out`
    pub bias: Vec<f64>,
    pub dilation: usize,
    pub h_padding: HPadding,
}

impl ConvParams {
    pub fn new(
        kernel: Tensor,
        bias: Vec<f64>,
        dilation: usize,
        h_padding: HPadding,
    ) -> Result<Self> {
        let geom = KernelGeom::of(&kernel, dilation)?;
        if bias.len() != geom.cout {
            return Err(shape_err!(
                "bias has {} entries for {} output channels",
                bias.len(),
                geom.cout
            ));
        }
        Ok(ConvParams {
            kernel,
            bias,
            dilation,
            h_padding,
        })
    }

    pub fn zeros(k: usize, cin: usize, cout: usize, h_padding: HPadding) -> Self {
        ConvParams {
            kernel: Tensor::zeros(&[k, k, cin, cout]),
            bias: vec![0.0; cout],
            dilation: 1,
            h_padding,
        }
    }

    pub fn geom(&self) -> KernelGeom {
        KernelGeom::of(&self.kernel, self.dilation).expect("validated at construction")
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.dims()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.dims()[3]
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}

/// Shape bookkeeping for a (possibly non-square, dilated) kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KernelGeom {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub dilation: usize,
}

impl KernelGeom {
    pub fn of(kernel: &Tensor, dilation: usize) -> Result<Self> {
        let [kh, kw, cin, cout] = kernel.dims()[..] else {
            return Err(shape_err!("kernel must be rank 4, got {:?}", kernel.dims()));
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Precondition(format!(
                "kernel sides must be odd, got {kh}x{kw}"
            )));
        }
        if dilation == 0 {
            return Err(Error::Precondition("dilation must be >= 1".into()));
        }
        Ok(KernelGeom {
            kh,
            kw,
            cin,
            cout,
            dilation,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

/// Fill `cols` (`positions.len() × patch_len`) with input patches.
pub fn im2col(
    input: &FeatureMap,
    g: KernelGeom,
    pad: HPadding,
    positions: &[(usize, usize)],
    cols: &mut [f64],
) {
    let dims = input.dims();
    let (h, w, c) = (dims[0] as isize, dims[1] as isize, dims[2]);
    let data = input.data();
    let plen = g.patch_len();
    let (ch, cw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let d = g.dilation as isize;
    for (row, &(y, x)) in cols.chunks_exact_mut(plen).zip(positions) {
        let (y, x) = (y as isize, x as isize);
        for i in 0..g.kh as isize {
            let yy = y + (i - ch) * d;
            let seg = &mut row[(i as usize) * g.kw * c..(i as usize + 1) * g.kw * c];
            if yy < 0 || yy >= h {
                seg.fill(0.0);
                continue;
            }
            let base = (yy * w) as usize;
            for j in 0..g.kw as isize {
                let xx = x + (j - cw) * d;
                let dst = &mut seg[j as usize * c..(j as usize + 1) * c];
                let xx = match pad {
                    HPadding::Circular => xx.rem_euclid(w),
                    HPadding::Zero if xx < 0 || xx >= w => {
                        dst.fill(0.0);
                        continue;
                    }
                    HPadding::Zero => xx,
                };
                let src = (base + xx as usize) * c;
                dst.copy_from_slice(&data[src..src + c]);
            }
        }
    }
}

/// Scatter-add patch gradients back onto the input gradient map.
pub fn col2im_add(
    grad_input: &mut FeatureMap,
    g: KernelGeom,
    pad: HPadding,
    positions: &[(usize, usize)],
    cols: &[f64],
) {
    let dims = grad_input.dims().to_vec();
    let (h, w, c) = (dims[0] as isize, dims[1] as isize, dims[2]);
    let data = grad_input.data_mut();
    let plen = g.patch_len();
    let (ch, cw) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let d = g.dilation as isize;
    for (row, &(y, x)) in cols.chunks_exact(plen).zip(positions) {
        let (y, x) = (y as isize, x as isize);
        for i in 0..g.kh as isize {
            let yy = y + (i - ch) * d;
            if yy < 0 || yy >= h {
                continue;
            }
            let base = (yy * w) as usize;
            for j in 0..g.kw as isize {
                let xx = x + (j - cw) * d;
                let xx = match pad {
                    HPadding::Circular => xx.rem_euclid(w),
                    HPadding::Zero if xx < 0 || xx >= w => continue,
                    HPadding::Zero => xx,
                };
                let src = (i as usize * g.kw + j as usize) * c;
                let dst = (base + xx as usize) * c;
                for k in 0..c {
                    data[dst + k] += row[src + k];
                }
            }
        }
    }
}

fn chunk_len(plen: usize) -> usize {
    (IM2COL_BUDGET / plen.max(1)).max(1)
}

/// Convolution evaluated at a list of output positions.
///
/// Returns `positions.len() × C_out` values (bias included).
pub fn conv_at(
    input: &FeatureMap,
    kernel: &[f64],
    bias: &[f64],
    g: KernelGeom,
    pad: HPadding,
    positions: &[(usize, usize)],
) -> Result<Vec<f64>> {
    let (_, _, c) = input.hwc()?;
    if c != g.cin {
        return Err(shape_err!(
            "input has {c} channels, kernel expects {}",
            g.cin
        ));
    }
    let plen = g.patch_len();
    let mut out = vec![0.0; positions.len() * g.cout];
    let mut cols = Vec::new();
    for (pos, out) in positions
        .chunks(chunk_len(plen))
        .zip(out.chunks_mut(chunk_len(plen) * g.cout))
    {
        cols.resize(pos.len() * plen, 0.0);
        im2col(input, g, pad, pos, &mut cols);
        for row in out.chunks_exact_mut(g.cout) {
            row.copy_from_slice(bias);
        }
        gemm(
            pos.len(),
            plen,
            g.cout,
            1.0,
            &cols,
            false,
            kernel,
            false,
            1.0,
            out,
        );
    }
    Ok(out)
}

/// Gradients of [`conv_at`] given `grad_out` (`positions.len() × C_out`).
///
/// Accumulates into `grad_kernel` / `grad_input` when provided.
#[allow(clippy::too_many_arguments)]
pub fn conv_at_backward(
    input: &FeatureMap,
    kernel: &[f64],
    g: KernelGeom,
    pad: HPadding,
    positions: &[(usize, usize)],
    grad_out: &[f64],
    mut grad_kernel: Option<&mut [f64]>,
    mut grad_input: Option<&mut FeatureMap>,
) {
    let plen = g.patch_len();
    let step = chunk_len(plen);
    let mut cols = Vec::new();
    for (pos, gout) in positions.chunks(step).zip(grad_out.chunks(step * g.cout)) {
        cols.resize(pos.len() * plen, 0.0);
        if let Some(gk) = grad_kernel.as_deref_mut() {
            im2col(input, g, pad, pos, &mut cols);
            // dK += colsᵀ · dY
            gemm(
                plen,
                pos.len(),
                g.cout,
                1.0,
                &cols,
                true,
                gout,
                false,
                1.0,
                gk,
            );
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            // dCols = dY · Kᵀ
            gemm(
                pos.len(),
                g.cout,
                plen,
                1.0,
                gout,
                false,
                kernel,
                true,
                0.0,
                &mut cols,
            );
            col2im_add(gi, g, pad, pos, &cols);
        }
    }
}

pub fn all_positions(h: usize, w: usize) -> Vec<(usize, usize)> {
    (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect()
}

/// Same-size convolution over the whole map.
pub fn conv2d_forward(input: &FeatureMap, p: &ConvParams) -> Result<FeatureMap> {
    let (h, w, _) = input.hwc()?;
    let g = p.geom();
    let out = conv_at(
        input,
        p.kernel.data(),
        &p.bias,
        g,
        p.h_padding,
        &all_positions(h, w),
    )?;
    Tensor::from_vec(&[h, w, g.cout], out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub kernel: Tensor,
    pub bias: Vec<f64>,
    pub input: FeatureMap,
}

pub fn conv2d_backward(
    input: &FeatureMap,
    p: &ConvParams,
    grad_out: &FeatureMap,
) -> Result<ConvGrads> {
    let (h, w, _) = input.hwc()?;
    let g = p.geom();
    if grad_out.dims() != [h, w, g.cout] {
        return Err(shape_err!(
            "upstream gradient {:?} does not match output {:?}",
            grad_out.dims(),
            [h, w, g.cout]
        ));
    }
    let mut gk = Tensor::zeros(p.kernel.dims());
    let mut gi = Tensor::zeros(input.dims());
    conv_at_backward(
        input,
        p.kernel.data(),
        g,
        p.h_padding,
        &all_positions(h, w),
        grad_out.data(),
        Some(gk.data_mut()),
        Some(&mut gi),
    );
    let mut gb = vec![0.0; g.cout];
    for row in grad_out.data().chunks_exact(g.cout) {
        for (b, v) in gb.iter_mut().zip(row) {
            *b += v;
        }
    }
    Ok(ConvGrads {
        kernel: gk,
        bias: gb,
        input: gi,
    })
}

/// Convolution without padding, output `(H - eh + 1) × (W - ew + 1)` where
/// `eh, ew` are the effective kernel extents.
pub fn conv2d_valid(input: &FeatureMap, kernel: &Tensor, bias: &[f64]) -> Result<FeatureMap> {
    let (h, w, _) = input.hwc()?;
    let g = KernelGeom::of(kernel, 1)?;
    if h < g.kh || w < g.kw {
        return Err(shape_err!(
            "{h}x{w} input smaller than {}x{} kernel",
            g.kh,
            g.kw
        ));
    }
    let (oh, ow) = (h - g.kh + 1, w - g.kw + 1);
    let positions: Vec<_> = (0..oh)
        .flat_map(|y| (0..ow).map(move |x| (y + g.kh / 2, x + g.kw / 2)))
        .collect();
    let out = conv_at(input, kernel.data(), bias, g, HPadding::Zero, &positions)?;
    Tensor::from_vec(&[oh, ow, g.cout], out)
}
