//! Kernel Transformer Network: a learned map from a planar source kernel and
//! a polar angle to a kernel shaped for one band of equirectangular rows.
//!
//! For every output channel `o`, the slice `K[:, :, :, o]` is treated as a
//! `k × k` image with `C_in` channels. A per-row-group projection `P_g`
//! (shared across channels) resamples it to the target footprint; a residual
//! branch of two `ReLU → 1×1 → ReLU → depthwise 3×3` blocks refines it:
//!
//! ```text
//! S = P_g · K          K_Ω = S + block₂(block₁(S))
//! ```
//!
//! Internally the kernel image is laid out `[tap][o][c]` so that output
//! channels form the batch dimension of the separable blocks.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ktnt::{load_tensor, save_tensor};
use crate::data::manifest::{read_json, write_json};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{projection_matrix_unchecked, target_kernel_shape, GridSpec, KernelShape};
use crate::linalg::{gemm, Matrix};
use crate::nn::layers::{relu, relu_backward};
use crate::nn::{normal_init, Depthwise3x3, GridLayout, Pointwise};
use crate::tensor::Tensor;

/// Consecutive equirectangular rows sharing one transformed kernel.
pub const GROUP_ROWS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowGroup {
    pub index: usize,
    pub first_row: usize,
    /// One past the last row.
    pub end_row: usize,
    /// Polar angle of the center row's pixel center.
    pub theta: f64,
    pub shape: KernelShape,
}

impl RowGroup {
    pub fn rows(&self) -> std::ops::Range<usize> {
        self.first_row..self.end_row
    }
}

/// Row-group assignment and kernel geometry for one layer's grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RowGroupTable {
    pub grid: GridSpec,
    /// Source kernel side.
    pub k: usize,
    /// Tangent-plane spacing of the source taps (radians).
    pub spacing: f64,
    pub groups: Vec<RowGroup>,
    analytic: Vec<Matrix>,
}

impl RowGroupTable {
    /// Groups for a `k × k` source kernel whose taps are one grid pitch apart.
    pub fn new(grid: GridSpec, k: usize) -> Result<Self> {
        if !grid.is_equirect() {
            return Err(Error::Precondition(format!(
                "{grid:?} is not an equirectangular grid"
            )));
        }
        let spacing = grid.pitch();
        let n = grid.height.div_ceil(GROUP_ROWS);
        let mut groups = Vec::with_capacity(n);
        let mut analytic = Vec::with_capacity(n);
        for index in 0..n {
            let first_row = index * GROUP_ROWS;
            let end_row = (first_row + GROUP_ROWS).min(grid.height);
            let theta = grid.row_theta(first_row + (end_row - first_row - 1) / 2);
            let shape = target_kernel_shape(theta, k, spacing, grid)?;
            analytic.push(projection_matrix_unchecked(theta, k, shape, spacing, grid));
            groups.push(RowGroup {
                index,
                first_row,
                end_row,
                theta,
                shape,
            });
        }
        Ok(RowGroupTable {
            grid,
            k,
            spacing,
            groups,
            analytic,
        })
    }

    /// Table for source layer `l` (1-based) of a network whose input lives on
    /// `image_grid`; every preceding layer halves the grid.
    pub fn for_layer(image_grid: GridSpec, l: usize, k: usize) -> Result<Self> {
        if l == 0 {
            return Err(Error::Precondition("layers are numbered from 1".into()));
        }
        RowGroupTable::new(image_grid.pooled(l as u32 - 1), k)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn group_of_row(&self, y: usize) -> Result<usize> {
        if y >= self.grid.height {
            return Err(Error::Precondition(format!(
                "row {y} outside {}-row grid",
                self.grid.height
            )));
        }
        Ok(y / GROUP_ROWS)
    }

    pub fn group(&self, g: usize) -> Result<&RowGroup> {
        self.groups.get(g).ok_or_else(|| {
            Error::Precondition(format!("unknown row group {g} (table has {})", self.len()))
        })
    }

    /// The bilinear back-projection matrix of group `g` (`taps × k²`).
    pub fn analytic_projection(&self, g: usize) -> Result<&Matrix> {
        self.group(g)?;
        Ok(&self.analytic[g])
    }
}

/// A kernel generated for one row group, laid out `h × w × C_in × C_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformedKernel {
    pub weights: Tensor,
    pub dilation: usize,
    pub group: usize,
}

impl TransformedKernel {
    pub fn shape(&self) -> KernelShape {
        let d = self.weights.dims();
        KernelShape {
            h: d[0],
            w: d[1],
            dilation: self.dilation,
        }
    }
}

/// One `ReLU → pointwise → ReLU → depthwise 3×3` block.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableBlock {
    pub pointwise: Pointwise,
    pub depthwise: Depthwise3x3,
}

impl SeparableBlock {
    pub fn zeros(c: usize) -> Self {
        SeparableBlock {
            pointwise: Pointwise::zeros(c, c),
            depthwise: Depthwise3x3::zeros(c),
        }
    }

    pub fn param_count(&self) -> usize {
        self.pointwise.param_count() + self.depthwise.param_count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KtnLayer {
    pub table: RowGroupTable,
    pub cin: usize,
    /// Learned `P_g`, one per row group, each `taps_g × k²`.
    pub projections: Vec<Matrix>,
    pub blocks: Vec<SeparableBlock>,
}

/// Gradients in [`KtnLayer::params`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct KtnGrads(pub Vec<Vec<f64>>);

impl KtnGrads {
    pub fn zeros_like(layer: &KtnLayer) -> Self {
        KtnGrads(layer.params().iter().map(|p| vec![0.0; p.len()]).collect())
    }

    pub fn add_assign(&mut self, other: &KtnGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.concat()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.0.iter().map(|v| &v[..]).collect()
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct KtnTrace {
    group: usize,
    cout: usize,
    /// Per block: (block input, pointwise output).
    blocks: Vec<(Vec<f64>, Vec<f64>)>,
}

/// `[t][a][b] → [t][b][a]`
fn swap_inner(x: &[f64], taps: usize, a: usize, b: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for t in 0..taps {
        let src = &x[t * a * b..(t + 1) * a * b];
        let dst = &mut out[t * a * b..(t + 1) * a * b];
        for i in 0..a {
            for j in 0..b {
                dst[j * a + i] = src[i * b + j];
            }
        }
    }
    out
}

impl KtnLayer {
    /// Projections start at the analytic solution, the last depthwise filter at
    /// zero, everything else at N(0, `std`).
    pub fn new(table: RowGroupTable, cin: usize, seed: u64, std: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projections = table.analytic.clone();
        let mut blocks = vec![SeparableBlock::zeros(cin), SeparableBlock::zeros(cin)];
        for (i, b) in blocks.iter_mut().enumerate() {
            normal_init(&mut b.pointwise.weights, std, &mut rng);
            if i == 0 {
                normal_init(&mut b.depthwise.weights, std, &mut rng);
            }
        }
        KtnLayer {
            table,
            cin,
            projections,
            blocks,
        }
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.projections.iter().map(|p| &p.data[..]).collect();
        for b in &self.blocks {
            v.extend([
                &b.pointwise.weights[..],
                &b.pointwise.bias[..],
                &b.depthwise.weights[..],
                &b.depthwise.bias[..],
            ]);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self
            .projections
            .iter_mut()
            .map(|p| &mut p.data[..])
            .collect();
        for b in &mut self.blocks {
            v.push(&mut b.pointwise.weights);
            v.push(&mut b.pointwise.bias);
            v.push(&mut b.depthwise.weights);
            v.push(&mut b.depthwise.bias);
        }
        v
    }

    pub fn flat(&self) -> Vec<f64> {
        self.params().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for p in self.params_mut() {
            p.copy_from_slice(&flat[off..off + p.len()]);
            off += p.len();
        }
    }

    fn check_kernel(&self, k: &Tensor) -> Result<usize> {
        let d = k.dims();
        if d.len() != 4 || d[0] != self.table.k || d[1] != self.table.k || d[2] != self.cin {
            return Err(shape_err!(
                "source kernel {:?} does not match a {}x{} kernel over {} channels",
                d,
                self.table.k,
                self.table.k,
                self.cin
            ));
        }
        Ok(d[3])
    }

    fn layout(&self, g: usize, cout: usize) -> GridLayout {
        let s = self.table.groups[g].shape;
        GridLayout {
            h: s.h,
            w: s.w,
            batch: cout,
            channels: self.cin,
        }
    }

    /// Forward pass keeping intermediates.
    pub fn forward_traced(&self, k: &Tensor, g: usize) -> Result<(TransformedKernel, KtnTrace)> {
        let shape = self.table.group(g)?.shape;
        let cout = self.check_kernel(k)?;
        let p = &self.projections[g];
        if p.rows != shape.taps() || p.cols != self.table.k * self.table.k {
            return Err(shape_err!(
                "projection {}x{} does not fit group {g} shape {shape:?}",
                p.rows,
                p.cols
            ));
        }
        let taps = shape.taps();
        let width = self.cin * cout;
        let mut s_tco = vec![0.0; taps * width];
        gemm(
            taps,
            p.cols,
            width,
            1.0,
            &p.data,
            false,
            k.data(),
            false,
            0.0,
            &mut s_tco,
        );
        let shortcut = swap_inner(&s_tco, taps, self.cin, cout);

        let layout = self.layout(g, cout);
        let mut x = shortcut.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let pw = b.pointwise.forward(&relu(&x))?;
            let next = b.depthwise.forward(&relu(&pw), layout)?;
            blocks.push((std::mem::replace(&mut x, next), pw));
        }
        for (o, s) in x.iter_mut().zip(&shortcut) {
            *o += s;
        }
        let weights = Tensor::from_vec(
            &[shape.h, shape.w, self.cin, cout],
            swap_inner(&x, taps, cout, self.cin),
        )?;
        Ok((
            TransformedKernel {
                weights,
                dilation: shape.dilation,
                group: g,
            },
            KtnTrace {
                group: g,
                cout,
                blocks,
            },
        ))
    }

    /// Gradients of all layer parameters given the upstream gradient on the
    /// generated kernel (`h × w × C_in × C_out` order).
    pub fn backward(&self, k: &Tensor, trace: &KtnTrace, grad_kernel: &[f64]) -> Result<KtnGrads> {
        let g = trace.group;
        let shape = self.table.group(g)?.shape;
        let cout = trace.cout;
        let taps = shape.taps();
        if grad_kernel.len() != taps * self.cin * cout || self.check_kernel(k)? != cout {
            return Err(shape_err!(
                "upstream gradient does not match group {g} kernel"
            ));
        }
        let layout = self.layout(g, cout);
        let n_proj = self.projections.len();
        let mut grads = KtnGrads::zeros_like(self);

        // [t][c][o] → [t][o][c]
        let d_out = swap_inner(grad_kernel, taps, self.cin, cout);
        let mut dx = d_out.clone();
        for (bi, (b, (x_in, pw))) in self.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            let r2 = relu(pw);
            let (gdw, gdb, dr2) = b.depthwise.backward(&r2, layout, &dx)?;
            let dpw = relu_backward(pw, &dr2);
            let (gpw, gpb, dr1) = b.pointwise.backward(&relu(x_in), &dpw)?;
            dx = relu_backward(x_in, &dr1);
            let base = n_proj + 4 * bi;
            grads.0[base] = gpw;
            grads.0[base + 1] = gpb;
            grads.0[base + 2] = gdw;
            grads.0[base + 3] = gdb;
        }
        for (a, b) in dx.iter_mut().zip(&d_out) {
            *a += b;
        }
        let ds_tco = swap_inner(&dx, taps, cout, self.cin);
        // dP = dS · Kᵀ with K viewed as k² × (C_in·C_out)
        let k2 = self.table.k * self.table.k;
        gemm(
            taps,
            self.cin * cout,
            k2,
            1.0,
            &ds_tco,
            false,
            k.data(),
            true,
            0.0,
            &mut grads.0[g],
        );
        Ok(grads)
    }

    pub fn param_count(&self) -> usize {
        self.projection_param_count() + self.block_param_count()
    }

    pub fn projection_param_count(&self) -> usize {
        self.projections.iter().map(|p| p.data.len()).sum()
    }

    pub fn block_param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.param_count()).sum()
    }
}

/// Transform source kernel `k` for row group `g`.
pub fn ktn_forward(layer: &KtnLayer, k: &Tensor, g: usize) -> Result<TransformedKernel> {
    Ok(layer.forward_traced(k, g)?.0)
}

/// Exact gradients of [`ktn_forward`]; the source kernel gets none.
pub fn ktn_backward(
    layer: &KtnLayer,
    k: &Tensor,
    g: usize,
    grad_kernel: &[f64],
) -> Result<KtnGrads> {
    let (_, trace) = layer.forward_traced(k, g)?;
    layer.backward(k, &trace, grad_kernel)
}

/// The training-free baseline: the analytic projection applied channel-wise.
pub fn projected_kernel(table: &RowGroupTable, k: &Tensor, g: usize) -> Result<TransformedKernel> {
    let shape = table.group(g)?.shape;
    let d = k.dims();
    if d.len() != 4 || d[0] != table.k || d[1] != table.k {
        return Err(shape_err!(
            "source kernel {d:?} is not {}x{}",
            table.k,
            table.k
        ));
    }
    let p = &table.analytic[g];
    let width = d[2] * d[3];
    let mut out = vec![0.0; p.rows * width];
    gemm(
        p.rows,
        p.cols,
        width,
        1.0,
        &p.data,
        false,
        k.data(),
        false,
        0.0,
        &mut out,
    );
    Ok(TransformedKernel {
        weights: Tensor::from_vec(&[shape.h, shape.w, d[2], d[3]], out)?,
        dilation: shape.dilation,
        group: g,
    })
}

/// Kernels for every group of a layer, generated in parallel.
pub fn transform_all(layer: &KtnLayer, k: &Tensor) -> Result<Vec<TransformedKernel>> {
    (0..layer.table.len())
        .into_par_iter()
        .map(|g| ktn_forward(layer, k, g))
        .collect()
}

pub fn project_all(table: &RowGroupTable, k: &Tensor) -> Result<Vec<TransformedKernel>> {
    (0..table.len())
        .into_par_iter()
        .map(|g| projected_kernel(table, k, g))
        .collect()
}

/// Parameter accounting for one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    /// Learned projections `P_g`.
    pub projections: usize,
    /// Pointwise and depthwise weights and biases.
    pub blocks: usize,
    /// Source kernel weights `k²·C_in·C_out` (biases excluded).
    pub source_kernels: usize,
    /// What storing a separate full kernel for every row group would cost:
    /// `Σ_g taps_g·C_in·C_out`.
    pub untied_kernels: usize,
}

impl ParamCount {
    /// Parameters the transformer adds on top of the source network.
    pub fn overhead(&self) -> usize {
        self.projections + self.blocks
    }

    pub fn total(&self) -> usize {
        self.overhead() + self.source_kernels
    }

    pub fn overhead_ratio_vs_untied(&self) -> f64 {
        self.overhead() as f64 / self.untied_kernels as f64
    }
}

impl std::ops::Add for ParamCount {
    type Output = ParamCount;

    fn add(self, o: ParamCount) -> ParamCount {
        ParamCount {
            projections: self.projections + o.projections,
            blocks: self.blocks + o.blocks,
            source_kernels: self.source_kernels + o.source_kernels,
            untied_kernels: self.untied_kernels + o.untied_kernels,
        }
    }
}

pub fn parameter_count(layer: &KtnLayer, cout: usize) -> ParamCount {
    let k2 = layer.table.k * layer.table.k;
    ParamCount {
        projections: layer.projection_param_count(),
        blocks: layer.block_param_count(),
        source_kernels: k2 * layer.cin * cout,
        untied_kernels: layer
            .table
            .groups
            .iter()
            .map(|g| g.shape.taps() * layer.cin * cout)
            .sum(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KtnManifest {
    pub grid: GridSpec,
    pub k: usize,
    pub cin: usize,
    pub groups: Vec<RowGroup>,
    pub files: Vec<String>,
}

pub const KTN_MANIFEST: &str = "ktn.json";

fn tensor_names(layer: &KtnLayer) -> Vec<(String, Vec<usize>)> {
    let mut v: Vec<(String, Vec<usize>)> = layer
        .projections
        .iter()
        .enumerate()
        .map(|(g, p)| (format!("proj{g:02}"), vec![p.rows, p.cols]))
        .collect();
    for (i, b) in layer.blocks.iter().enumerate() {
        let c = b.depthwise.channels();
        v.push((format!("block{i}.pointwise.weight"), vec![c, c]));
        v.push((format!("block{i}.pointwise.bias"), vec![c]));
        v.push((format!("block{i}.depthwise.weight"), vec![3, 3, c]));
        v.push((format!("block{i}.depthwise.bias"), vec![c]));
    }
    v
}

/// Store one KTN layer: a KTNT file per parameter plus `ktn.json`.
pub fn save_ktn_layer(dir: impl AsRef<Path>, layer: &KtnLayer) -> Result<KtnManifest> {
    let dir = dir.as_ref();
    let mut files = Vec::new();
    for ((name, dims), data) in tensor_names(layer).into_iter().zip(layer.params()) {
        let file = format!("{name}.ktnt");
        save_tensor(dir.join(&file), &Tensor::from_vec(&dims, data.to_vec())?)?;
        files.push(file);
    }
    let m = KtnManifest {
        grid: layer.table.grid,
        k: layer.table.k,
        cin: layer.cin,
        groups: layer.table.groups.clone(),
        files,
    };
    write_json(dir.join(KTN_MANIFEST), &m)?;
    Ok(m)
}

pub fn load_ktn_layer(dir: impl AsRef<Path>) -> Result<KtnLayer> {
    let dir = dir.as_ref();
    let m: KtnManifest = read_json(dir.join(KTN_MANIFEST))?;
    let table = RowGroupTable::new(m.grid, m.k)?;
    if table
        .groups
        .iter()
        .map(|g| g.shape)
        .ne(m.groups.iter().map(|g| g.shape))
    {
        return Err(Error::Manifest(format!(
            "{}: stored group shapes differ from the geometry of {:?}",
            dir.display(),
            m.grid
        )));
    }
    let mut layer = KtnLayer::new(table, m.cin, 0, 1.0);
    let names = tensor_names(&layer);
    if m.files.len() != names.len() {
        return Err(Error::Manifest(format!(
            "expected {} tensor files, found {}",
            names.len(),
            m.files.len()
        )));
    }
    let mut loaded = Vec::with_capacity(names.len());
    for (file, (name, dims)) in m.files.iter().zip(&names) {
        let t = load_tensor(dir.join(file))?;
        if t.dims() != &dims[..] {
            return Err(shape_err!(
                "{name}: stored {:?}, expected {dims:?}",
                t.dims()
            ));
        }
        loaded.push(t);
    }
    for (dst, src) in layer.params_mut().into_iter().zip(&loaded) {
        dst.copy_from_slice(src.data());
    }
    Ok(layer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradient;
    use rand::Rng;

    fn random_kernel(k: usize, cin: usize, cout: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[k, k, cin, cout], |_| rng.gen_range(-1.0..1.0))
    }

    fn small_table() -> RowGroupTable {
        RowGroupTable::new(GridSpec::equirect(20).unwrap(), 3).unwrap()
    }

    #[test]
    fn group_table_partitions_rows() {
        let t = RowGroupTable::for_layer(GridSpec::equirect(80).unwrap(), 2, 5).unwrap();
        assert_eq!(t.grid.height, 40);
        assert_eq!(t.len(), 8);
        let mut next = 0;
        for g in &t.groups {
            assert_eq!(g.first_row, next);
            next = g.end_row;
            assert_eq!(g.theta, t.grid.row_theta(g.first_row + 2));
        }
        assert_eq!(next, 40);
        assert_eq!(t.group_of_row(7).unwrap(), 1);
        assert!(t.group_of_row(40).is_err());
        let odd = RowGroupTable::new(GridSpec::equirect(12).unwrap(), 3).unwrap();
        assert_eq!(odd.len(), 3);
        assert_eq!(odd.groups[2].rows(), 10..12);
    }

    #[test]
    fn initial_output_equals_projected_baseline() {
        let t = small_table();
        let layer = KtnLayer::new(t.clone(), 4, 1, 0.01);
        let k = random_kernel(3, 4, 6, 2);
        for g in 0..t.len() {
            let a = ktn_forward(&layer, &k, g).unwrap();
            let b = projected_kernel(&t, &k, g).unwrap();
            assert_eq!(a.shape(), t.groups[g].shape);
            assert!(a.weights.max_abs_diff(&b.weights) < 1e-15);
        }
    }

    #[test]
    fn unknown_group_and_bad_kernel_are_rejected() {
        let t = small_table();
        let layer = KtnLayer::new(t.clone(), 4, 1, 0.01);
        assert!(ktn_forward(&layer, &random_kernel(3, 4, 2, 0), t.len()).is_err());
        assert!(ktn_forward(&layer, &random_kernel(3, 5, 2, 0), 0).is_err());
        assert!(ktn_forward(&layer, &random_kernel(5, 4, 2, 0), 0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let t = small_table();
        let mut layer = KtnLayer::new(t, 3, 5, 0.3);
        // make the residual branch active and move off the ReLU kinks that
        // all-zero projection rows create
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in &mut layer.projections {
            p.data
                .iter_mut()
                .for_each(|v| *v += rng.gen_range(-0.1..0.1));
        }
        normal_init(&mut layer.blocks[1].depthwise.weights, 0.3, &mut rng);
        normal_init(&mut layer.blocks[0].pointwise.bias, 0.3, &mut rng);
        let k = random_kernel(3, 3, 2, 6);
        for g in [0, 2] {
            let taps = layer.table.groups[g].shape.taps();
            let up: Vec<f64> = (0..taps * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let grads = ktn_backward(&layer, &k, g, &up).unwrap();
            let loss = |x: &[f64]| {
                let mut l2 = layer.clone();
                l2.set_flat(x);
                let out = ktn_forward(&l2, &k, g).unwrap();
                out.weights
                    .data()
                    .iter()
                    .zip(&up)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            };
            let r = check_gradient(loss, &layer.flat(), &grads.flat(), 400, g as u64);
            assert!(r.passes(1e-4), "group {g}: {r:?}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient_and_linearity() {
        let t = small_table();
        let layer = KtnLayer::new(t, 2, 5, 0.3);
        let k = random_kernel(3, 2, 2, 6);
        let taps = layer.table.groups[1].shape.taps();
        let z = ktn_backward(&layer, &k, 1, &vec![0.0; taps * 4]).unwrap();
        assert!(z.flat().iter().all(|&v| v == 0.0));
        let up: Vec<f64> = (0..taps * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let up2: Vec<f64> = up.iter().map(|v| 2.0 * v).collect();
        let a = ktn_backward(&layer, &k, 1, &up).unwrap().flat();
        let b = ktn_backward(&layer, &k, 1, &up2).unwrap().flat();
        assert!(a.iter().zip(&b).all(|(x, y)| (2.0 * x - y).abs() < 1e-12));
    }

    #[test]
    fn projected_kernel_is_linear_and_preserves_delta_mass() {
        let t = RowGroupTable::new(GridSpec::equirect(80).unwrap(), 5).unwrap();
        let eq = t.group_of_row(40).unwrap();
        let a = random_kernel(5, 1, 1, 1);
        let b = random_kernel(5, 1, 1, 2);
        let mut ab = a.clone();
        ab.add_scaled(-3.0, &b).unwrap();
        let pa = projected_kernel(&t, &a, eq).unwrap().weights;
        let pb = projected_kernel(&t, &b, eq).unwrap().weights;
        let pab = projected_kernel(&t, &ab, eq).unwrap().weights;
        for i in 0..pa.len() {
            assert!((pa.data()[i] - 3.0 * pb.data()[i] - pab.data()[i]).abs() < 1e-12);
        }
        let mut delta = Tensor::zeros(&[5, 5, 1, 1]);
        delta.data_mut()[12] = 1.0;
        let p = projected_kernel(&t, &delta, eq).unwrap();
        let s = p.shape();
        let center = p.weights.data()[(s.h / 2) * s.w + s.w / 2];
        assert!((0.95..=1.0).contains(&center), "center {center}");

        // a 15-row grid has a group centred exactly on the equator
        let t15 = RowGroupTable::new(GridSpec::equirect(15).unwrap(), 5).unwrap();
        assert!((t15.groups[1].theta - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        let mass = projected_kernel(&t15, &delta, 1).unwrap().weights.sum();
        assert!((0.95..=1.0 + 1e-9).contains(&mass), "mass {mass}");
    }

    #[test]
    fn counts() {
        let t = RowGroupTable::for_layer(GridSpec::equirect(80).unwrap(), 2, 5).unwrap();
        let layer = KtnLayer::new(t, 32, 0, 0.01);
        assert_eq!(layer.blocks[0].pointwise.param_count(), 1056);
        assert_eq!(layer.block_param_count(), 2 * (1056 + 320));
        let c = parameter_count(&layer, 64);
        assert_eq!(c.source_kernels, 25 * 32 * 64);
        assert!(c.overhead() < c.untied_kernels);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let layer = KtnLayer::new(small_table(), 3, 4, 0.1);
        save_ktn_layer(dir.path(), &layer).unwrap();
        let back = load_ktn_layer(dir.path()).unwrap();
        let diff = layer
            .flat()
            .iter()
            .zip(back.flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6);
        assert_eq!(back.table, layer.table);
    }
}
