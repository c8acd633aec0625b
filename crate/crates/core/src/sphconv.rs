//! Row-dependent convolution over equirectangular feature maps and the
//! spherical version of the source network built on it.
//!
//! Every band of rows is convolved with its own kernel; columns wrap around
//! (azimuth is periodic) while rows beyond the poles read as zero.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::GridSpec;
use crate::ktn::{
    parameter_count, project_all, transform_all, KtnLayer, ParamCount, RowGroupTable,
    TransformedKernel,
};
use crate::nn::conv::{conv_at, KernelGeom};
use crate::nn::layers::{maxpool2x2, relu_inplace};
use crate::nn::HPadding;
use crate::source_cnn::{SourceCnn, CHANNELS, KERNEL, LAYERS};
use crate::tensor::{FeatureMap, Tensor};

/// How spherical kernels are obtained from the source kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Learned kernel transformer.
    Ktn,
    /// Analytic back-projection, no learning.
    Projected,
    /// The planar architecture trained directly on labelled spherical images.
    Equirect,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Ktn, Method::Projected, Method::Equirect];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ktn => "ktn",
            Method::Projected => "projected",
            Method::Equirect => "equirect",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method {s:?} (expected ktn, projected or equirect)"
                ))
            })
    }
}

fn check_kernels(table: &RowGroupTable, kernels: &[TransformedKernel], cin: usize) -> Result<()> {
    if kernels.len() != table.len() {
        return Err(shape_err!(
            "{} kernels for {} row groups",
            kernels.len(),
            table.len()
        ));
    }
    for (g, k) in kernels.iter().enumerate() {
        if k.weights.dims()[2] != cin {
            return Err(shape_err!(
                "group {g} kernel expects {} channels, input has {cin}",
                k.weights.dims()[2]
            ));
        }
    }
    Ok(())
}

fn check_input(input: &FeatureMap, table: &RowGroupTable) -> Result<(usize, usize, usize)> {
    let (h, w, c) = input.hwc()?;
    if h != table.grid.height || w != table.grid.width {
        return Err(shape_err!(
            "input is {h}x{w}, row groups were built for {}x{}",
            table.grid.height,
            table.grid.width
        ));
    }
    Ok((h, w, c))
}

fn geom(k: &TransformedKernel) -> Result<KernelGeom> {
    KernelGeom::of(&k.weights, k.dilation)
}

/// Full-map row-dependent convolution; output has the input's spatial size.
pub fn spherical_conv(
    input: &FeatureMap,
    table: &RowGroupTable,
    kernels: &[TransformedKernel],
    bias: &[f64],
) -> Result<FeatureMap> {
    let (h, w, c) = check_input(input, table)?;
    check_kernels(table, kernels, c)?;
    let cout = bias.len();
    let bands: Vec<Vec<f64>> = table
        .groups
        .par_iter()
        .zip(kernels)
        .map(|(grp, k)| {
            let positions: Vec<_> = grp
                .rows()
                .flat_map(|y| (0..w).map(move |x| (y, x)))
                .collect();
            let g = geom(k)?;
            if g.cout != cout {
                return Err(shape_err!("kernel has {} outputs, bias {cout}", g.cout));
            }
            conv_at(
                input,
                k.weights.data(),
                bias,
                g,
                HPadding::Circular,
                &positions,
            )
        })
        .collect::<Result<_>>()?;
    Tensor::from_vec(&[h, w, cout], bands.concat())
}

/// Row-dependent convolution evaluated only at `positions` (`(y, x)` pairs);
/// returns `positions.len() × C_out` values in the given order.
pub fn spherical_conv_at(
    input: &FeatureMap,
    table: &RowGroupTable,
    kernels: &[TransformedKernel],
    bias: &[f64],
    positions: &[(usize, usize)],
) -> Result<Vec<f64>> {
    let (_, _, c) = check_input(input, table)?;
    check_kernels(table, kernels, c)?;
    let cout = bias.len();
    let mut out = vec![0.0; positions.len() * cout];
    for (grp, idx) in group_positions(table, positions)?.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let pos: Vec<_> = idx.iter().map(|&i| positions[i]).collect();
        let vals = conv_at(
            input,
            kernels[grp].weights.data(),
            bias,
            geom(&kernels[grp])?,
            HPadding::Circular,
            &pos,
        )?;
        for (&i, v) in idx.iter().zip(vals.chunks_exact(cout)) {
            out[i * cout..(i + 1) * cout].copy_from_slice(v);
        }
    }
    Ok(out)
}

/// Indices into `positions`, bucketed by row group.
pub fn group_positions(
    table: &RowGroupTable,
    positions: &[(usize, usize)],
) -> Result<Vec<Vec<usize>>> {
    let mut buckets = vec![Vec::new(); table.len()];
    for (i, &(y, x)) in positions.iter().enumerate() {
        if x >= table.grid.width {
            return Err(Error::Precondition(format!(
                "column {x} outside {}-column grid",
                table.grid.width
            )));
        }
        buckets[table.group_of_row(y)?].push(i);
    }
    Ok(buckets)
}

/// Source of the per-layer spherical kernels.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelTransform {
    Ktn(KtnLayer),
    Projected(RowGroupTable),
}

impl KernelTransform {
    pub fn table(&self) -> &RowGroupTable {
        match self {
            KernelTransform::Ktn(l) => &l.table,
            KernelTransform::Projected(t) => t,
        }
    }

    pub fn kernels(&self, source_kernel: &Tensor) -> Result<Vec<TransformedKernel>> {
        match self {
            KernelTransform::Ktn(l) => transform_all(l, source_kernel),
            KernelTransform::Projected(t) => project_all(t, source_kernel),
        }
    }
}

/// Per-layer wall-clock of one forward pass, seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerTimings {
    pub layers: [f64; LAYERS],
    pub head: f64,
}

impl LayerTimings {
    pub fn total(&self) -> f64 {
        self.layers.iter().sum::<f64>() + self.head
    }
}

/// The source network with every planar convolution replaced by a
/// row-dependent spherical one. The classifier head is reused verbatim.
#[derive(Debug)]
pub struct SphericalNetwork {
    source: SourceCnn,
    image_grid: GridSpec,
    transforms: Vec<KernelTransform>,
    cache: OnceLock<Vec<Vec<TransformedKernel>>>,
}

impl Clone for SphericalNetwork {
    fn clone(&self) -> Self {
        SphericalNetwork {
            source: self.source.clone(),
            image_grid: self.image_grid,
            transforms: self.transforms.clone(),
            cache: OnceLock::new(),
        }
    }
}

impl SphericalNetwork {
    pub fn new(
        source: SourceCnn,
        image_grid: GridSpec,
        transforms: Vec<KernelTransform>,
    ) -> Result<Self> {
        source.check_architecture()?;
        if transforms.len() != LAYERS {
            return Err(shape_err!(
                "{} kernel transforms for {LAYERS} layers",
                transforms.len()
            ));
        }
        for (i, t) in transforms.iter().enumerate() {
            let want = image_grid.pooled(i as u32);
            let table = t.table();
            if table.grid != want || table.k != KERNEL {
                return Err(shape_err!(
                    "layer {} transform is for {:?} with k={}, expected {want:?} with k={KERNEL}",
                    i + 1,
                    table.grid,
                    table.k
                ));
            }
            if let KernelTransform::Ktn(l) = t {
                if l.cin != CHANNELS[i] {
                    return Err(shape_err!(
                        "layer {} KTN has {} channels, expected {}",
                        i + 1,
                        l.cin,
                        CHANNELS[i]
                    ));
                }
            }
        }
        Ok(SphericalNetwork {
            source,
            image_grid,
            transforms,
            cache: OnceLock::new(),
        })
    }

    pub fn projected(source: SourceCnn, image_grid: GridSpec) -> Result<Self> {
        let transforms = (1..=LAYERS)
            .map(|l| {
                RowGroupTable::for_layer(image_grid, l, KERNEL).map(KernelTransform::Projected)
            })
            .collect::<Result<_>>()?;
        SphericalNetwork::new(source, image_grid, transforms)
    }

    pub fn with_ktn(
        source: SourceCnn,
        image_grid: GridSpec,
        layers: Vec<KtnLayer>,
    ) -> Result<Self> {
        SphericalNetwork::new(
            source,
            image_grid,
            layers.into_iter().map(KernelTransform::Ktn).collect(),
        )
    }

    /// Untrained transformer layers (equal to the projected network).
    pub fn fresh_ktn_layers(image_grid: GridSpec, seed: u64, std: f64) -> Result<Vec<KtnLayer>> {
        (1..=LAYERS)
            .map(|l| {
                let table = RowGroupTable::for_layer(image_grid, l, KERNEL)?;
                Ok(KtnLayer::new(
                    table,
                    CHANNELS[l - 1],
                    seed.wrapping_add(l as u64),
                    std,
                ))
            })
            .collect()
    }

    pub fn method(&self) -> Method {
        match self.transforms[0] {
            KernelTransform::Ktn(_) => Method::Ktn,
            KernelTransform::Projected(_) => Method::Projected,
        }
    }

    pub fn source(&self) -> &SourceCnn {
        &self.source
    }

    pub fn image_grid(&self) -> GridSpec {
        self.image_grid
    }

    pub fn transform(&self, l: usize) -> Result<&KernelTransform> {
        self.transforms
            .get(l.wrapping_sub(1))
            .ok_or_else(|| Error::Precondition(format!("layer {l} not in 1..={LAYERS}")))
    }

    pub fn table(&self, l: usize) -> Result<&RowGroupTable> {
        Ok(self.transform(l)?.table())
    }

    /// Swap in different source weights (same architecture). Clears the cache.
    pub fn set_source(&mut self, source: SourceCnn) -> Result<()> {
        source.check_architecture()?;
        self.source = source;
        self.cache = OnceLock::new();
        Ok(())
    }

    /// Mutable access to a transformer layer. Clears the cache.
    pub fn ktn_layer_mut(&mut self, l: usize) -> Option<&mut KtnLayer> {
        self.cache = OnceLock::new();
        match self.transforms.get_mut(l.wrapping_sub(1)) {
            Some(KernelTransform::Ktn(k)) => Some(k),
            _ => None,
        }
    }

    pub fn ktn_layers(&self) -> Vec<&KtnLayer> {
        self.transforms
            .iter()
            .filter_map(|t| match t {
                KernelTransform::Ktn(k) => Some(k),
                KernelTransform::Projected(_) => None,
            })
            .collect()
    }

    /// Generate layer `l`'s kernels without touching the cache.
    pub fn generate_kernels(&self, l: usize) -> Result<Vec<TransformedKernel>> {
        self.transform(l)?.kernels(&self.source.convs[l - 1].kernel)
    }

    /// Generate every (layer, group) kernel once; later calls reuse them.
    pub fn cache_kernels(&self) -> Result<&[Vec<TransformedKernel>]> {
        if let Some(c) = self.cache.get() {
            return Ok(c);
        }
        let all = (1..=LAYERS)
            .map(|l| self.generate_kernels(l))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.cache.get_or_init(|| all))
    }

    pub fn cached_kernel_count(&self) -> usize {
        self.cache.get().map_or(0, |c| c.iter().map(Vec::len).sum())
    }

    pub fn is_cached(&self) -> bool {
        self.cache.get().is_some()
    }

    fn check_image(&self, image: &FeatureMap) -> Result<()> {
        let want = [self.image_grid.height, self.image_grid.width, 1];
        if image.dims() != want {
            return Err(shape_err!(
                "image is {:?}, network expects {want:?}",
                image.dims()
            ));
        }
        Ok(())
    }

    /// Pre-pool output of spherical conv layer `l` (bias included) on `input`.
    pub fn conv_layer(
        &self,
        input: &FeatureMap,
        l: usize,
        kernels: &[TransformedKernel],
    ) -> Result<FeatureMap> {
        spherical_conv(
            input,
            self.table(l)?,
            kernels,
            &self.source.convs[l - 1].bias,
        )
    }

    fn run(
        &self,
        image: &FeatureMap,
        depth: usize,
        use_cache: bool,
        timings: Option<&mut LayerTimings>,
    ) -> Result<FeatureMap> {
        self.check_image(image)?;
        if !(1..=LAYERS).contains(&depth) {
            return Err(Error::Precondition(format!(
                "layer {depth} not in 1..={LAYERS}"
            )));
        }
        let cached = if use_cache {
            Some(self.cache_kernels()?)
        } else {
            None
        };
        let mut local = LayerTimings::default();
        let mut x = image.clone();
        for l in 1..=depth {
            let t0 = Instant::now();
            let generated;
            let kernels = match cached {
                Some(c) => &c[l - 1],
                None => {
                    generated = self.generate_kernels(l)?;
                    &generated
                }
            };
            let pre = self.conv_layer(&x, l, kernels)?;
            let (mut pooled, _) = maxpool2x2(&pre)?;
            relu_inplace(pooled.data_mut());
            x = pooled;
            local.layers[l - 1] = t0.elapsed().as_secs_f64();
        }
        if let Some(t) = timings {
            *t = local;
        }
        Ok(x)
    }

    /// Post-pool, post-ReLU features after layer `l` (1-based).
    pub fn forward_to_layer(&self, image: &FeatureMap, l: usize) -> Result<FeatureMap> {
        self.run(image, l, true, None)
    }

    pub fn forward(&self, image: &FeatureMap) -> Result<Vec<f64>> {
        let top = self.run(image, LAYERS, true, None)?;
        self.source.head_logits(&top)
    }

    /// Same as [`Self::forward`] but regenerates every kernel.
    pub fn forward_uncached(&self, image: &FeatureMap) -> Result<Vec<f64>> {
        let top = self.run(image, LAYERS, false, None)?;
        self.source.head_logits(&top)
    }

    pub fn forward_timed(&self, image: &FeatureMap) -> Result<(Vec<f64>, LayerTimings)> {
        let mut t = LayerTimings::default();
        let top = self.run(image, LAYERS, true, Some(&mut t))?;
        let t0 = Instant::now();
        let logits = self.source.head_logits(&top)?;
        t.head = t0.elapsed().as_secs_f64();
        Ok((logits, t))
    }

    /// Per-layer parameter accounting; the projected network adds nothing.
    pub fn parameter_counts(&self) -> Vec<ParamCount> {
        self.transforms
            .iter()
            .enumerate()
            .map(|(i, t)| match t {
                KernelTransform::Ktn(l) => parameter_count(l, CHANNELS[i + 1]),
                KernelTransform::Projected(table) => ParamCount {
                    projections: 0,
                    blocks: 0,
                    source_kernels: KERNEL * KERNEL * CHANNELS[i] * CHANNELS[i + 1],
                    untied_kernels: table.groups.iter().map(|g| g.shape.taps()).sum::<usize>()
                        * CHANNELS[i]
                        * CHANNELS[i + 1],
                },
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::conv2d_forward;
    use crate::nn::ConvParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w, c], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identical_kernels_reduce_to_planar_circular_conv() {
        let table = RowGroupTable::new(GridSpec::equirect(10).unwrap(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = Tensor::from_fn(&[3, 3, 2, 4], |_| rng.gen_range(-1.0..1.0));
        let bias = vec![0.1, -0.2, 0.3, 0.0];
        let kernels: Vec<_> = (0..table.len())
            .map(|g| TransformedKernel {
                weights: k.clone(),
                dilation: 1,
                group: g,
            })
            .collect();
        let x = random_map(10, 20, 2, 2);
        let a = spherical_conv(&x, &table, &kernels, &bias).unwrap();
        let p = ConvParams::new(k, bias, 1, HPadding::Circular).unwrap();
        let b = conv2d_forward(&x, &p).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn column_shift_commutes_with_spherical_conv() {
        let table = RowGroupTable::new(GridSpec::equirect(20).unwrap(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Tensor::from_fn(&[3, 3, 2, 3], |_| rng.gen_range(-1.0..1.0));
        let kernels = project_all(&table, &k).unwrap();
        let bias = vec![0.0; 3];
        let x = random_map(20, 40, 2, 4);
        let y = spherical_conv(&x, &table, &kernels, &bias).unwrap();
        for s in [1, 7, -13] {
            let ys = spherical_conv(&x.roll_columns(s).unwrap(), &table, &kernels, &bias).unwrap();
            assert!(ys.max_abs_diff(&y.roll_columns(s).unwrap()) < 1e-12);
        }
        assert_eq!(y.dims(), &[20, 40, 3]);
    }

    #[test]
    fn sparse_evaluation_matches_full_map() {
        let table = RowGroupTable::new(GridSpec::equirect(20).unwrap(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = Tensor::from_fn(&[3, 3, 1, 2], |_| rng.gen_range(-1.0..1.0));
        let kernels = project_all(&table, &k).unwrap();
        let x = random_map(20, 40, 1, 6);
        let full = spherical_conv(&x, &table, &kernels, &[0.5, -0.5]).unwrap();
        let pos = [(19, 3), (0, 39), (7, 7), (12, 0)];
        let sparse = spherical_conv_at(&x, &table, &kernels, &[0.5, -0.5], &pos).unwrap();
        for (i, &(y, xx)) in pos.iter().enumerate() {
            assert!((sparse[2 * i] - full.at3(y, xx, 0)).abs() < 1e-12);
            assert!((sparse[2 * i + 1] - full.at3(y, xx, 1)).abs() < 1e-12);
        }
    }

    #[test]
    fn resolution_mismatch_is_rejected() {
        let table = RowGroupTable::new(GridSpec::equirect(10).unwrap(), 3).unwrap();
        let k = Tensor::zeros(&[3, 3, 1, 1]);
        let kernels = project_all(&table, &k).unwrap();
        assert!(spherical_conv(&Tensor::zeros(&[12, 24, 1]), &table, &kernels, &[0.0]).is_err());
        assert!(
            spherical_conv(&Tensor::zeros(&[10, 20, 1]), &table, &kernels[1..], &[0.0]).is_err()
        );
    }

    #[test]
    fn network_shapes_cache_and_invalidation() {
        let grid = GridSpec::equirect(40).unwrap();
        let source = SourceCnn::random(1, 0.1, HPadding::Zero);
        let layers = SphericalNetwork::fresh_ktn_layers(grid, 2, 0.01).unwrap();
        let mut net = SphericalNetwork::with_ktn(source.clone(), grid, layers).unwrap();
        let proj = SphericalNetwork::projected(source, grid).unwrap();
        let img = random_map(40, 80, 1, 7).map(f64::abs);
        assert_eq!(net.forward_to_layer(&img, 3).unwrap().dims(), &[5, 10, 128]);
        assert_eq!(net.cached_kernel_count(), 8 + 4 + 2);
        let a = net.forward(&img).unwrap();
        assert_eq!(a, net.forward_uncached(&img).unwrap());
        let b = proj.forward(&img).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));

        net.ktn_layer_mut(2).unwrap().blocks[1].depthwise.weights[0] = 5.0;
        assert!(!net.is_cached());
        let c = net.forward(&img).unwrap();
        assert_ne!(a, c);
        assert!(net.forward(&Tensor::zeros(&[40, 40, 1])).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("sphconv".parse::<Method>().is_err());
    }
}
