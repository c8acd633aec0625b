//! Feature distillation: what the source network "sees" on the tangent plane
//! at a sphere point becomes the regression target for the spherical layer
//! evaluated at the corresponding equirectangular position.
//!
//! # Tangent cones
//!
//! A layer-`l` activation at one position depends on a finite square of
//! image pixels. We resample exactly that square onto the tangent plane
//! (one image pixel pitch per step) and run the source layers *without*
//! padding, so the cone collapses to a single `1 × 1` output:
//!
//! | quantity                          | patch side |
//! |-----------------------------------|-----------:|
//! | conv1 response (target, layer 1)  | 5          |
//! | layer-2 input cell                | 6          |
//! | conv2 response (target, layer 2)  | 14         |
//! | layer-3 input cell                | 16         |
//! | conv3 response (target, layer 3)  | 32         |
//!
//! Targets are post-ReLU convolution responses on the layer's own
//! (pre-pool) grid; inputs are the post-pool, post-ReLU maps the layer
//! consumes. Layer-`l` cells sit on pixel corners of the image for `l ≥ 2`,
//! which is why those patch sides are even.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ktnt::{load_tensor, save_tensor};
use crate::data::manifest::{read_json, write_json};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{build_tangent_sampling_map, GridSpec, TangentGrid};
use crate::ktn::{KtnGrads, KtnLayer, TransformedKernel};
use crate::nn::conv::{conv2d_valid, conv_at, conv_at_backward, KernelGeom};
use crate::nn::layers::{maxpool2x2, relu, relu_backward, relu_inplace};
use crate::nn::{adam_step, AdamConfig, AdamState, ConvParams, HPadding};
use crate::source_cnn::{SourceCnn, CHANNELS, LAYERS};
use crate::sphconv::group_positions;
use crate::tensor::{FeatureMap, Tensor};

pub const DEFAULT_STRIDES: [usize; LAYERS] = [4, 2, 1];

/// Regular subsampling of a layer grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lattice {
    pub stride: usize,
}

impl Lattice {
    pub fn new(stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("lattice stride must be >= 1".into()));
        }
        Ok(Lattice { stride })
    }

    /// Row-major `(y, x)` positions, starting `(stride − 1) / 2` in.
    pub fn positions(&self, grid: GridSpec) -> Vec<(usize, usize)> {
        let o = (self.stride - 1) / 2;
        let s = self.stride;
        (o..grid.height)
            .step_by(s)
            .flat_map(|y| (o..grid.width).step_by(s).map(move |x| (y, x)))
            .collect()
    }
}

/// Side of the image patch covering `n × n` input cells of layer `l`.
pub fn cone_side(l: usize, n: usize) -> usize {
    if l <= 1 {
        n
    } else {
        cone_side(l - 1, 2 * n + 4)
    }
}

/// Patch side for a layer-`l` target.
pub fn target_patch_side(l: usize) -> usize {
    cone_side(l, 5)
}

/// Patch side for one layer-`l` input cell.
pub fn input_patch_side(l: usize) -> usize {
    cone_side(l, 1)
}

/// Resample `image` onto the tangent plane at the pixel center `(y, x)` of
/// `layer_grid`, with the image's pixel pitch.
pub fn tangent_patch(
    image: &FeatureMap,
    image_grid: GridSpec,
    layer_grid: GridSpec,
    (y, x): (usize, usize),
    side: usize,
) -> Result<FeatureMap> {
    let center = layer_grid.pixel_center(x, y);
    let tg = TangentGrid::with_step(center, PI / image_grid.height as f64, side)?;
    build_tangent_sampling_map(&tg, image_grid)?.apply(image)
}

fn valid_stage(x: &FeatureMap, conv: &ConvParams) -> Result<FeatureMap> {
    let pre = conv2d_valid(x, &conv.kernel, &conv.bias)?;
    let (mut p, _) = maxpool2x2(&pre)?;
    relu_inplace(p.data_mut());
    Ok(p)
}

fn single_cell(t: FeatureMap, what: &str) -> Result<Vec<f64>> {
    let (h, w, _) = t.hwc()?;
    if h != 1 || w != 1 {
        return Err(shape_err!("{what} cone ended at {h}x{w}, expected 1x1"));
    }
    Ok(t.into_data())
}

/// Post-ReLU layer-`l` conv response at the center of a target patch.
pub fn cone_target(source: &SourceCnn, patch: &FeatureMap, l: usize) -> Result<Vec<f64>> {
    let mut x = patch.clone();
    for conv in &source.convs[..l - 1] {
        x = valid_stage(&x, conv)?;
    }
    let c = &source.convs[l - 1];
    let mut out = conv2d_valid(&x, &c.kernel, &c.bias)?;
    relu_inplace(out.data_mut());
    single_cell(out, "target")
}

/// Layer-`l` input features at the center of an input patch.
pub fn cone_input(source: &SourceCnn, patch: &FeatureMap, l: usize) -> Result<Vec<f64>> {
    let mut x = patch.clone();
    for conv in &source.convs[..l - 1] {
        x = valid_stage(&x, conv)?;
    }
    single_cell(x, "input")
}

fn check_layer(l: usize) -> Result<()> {
    if !(1..=LAYERS).contains(&l) {
        return Err(Error::Precondition(format!(
            "layer {l} not in 1..={LAYERS}"
        )));
    }
    Ok(())
}

pub fn layer_grid(image_grid: GridSpec, l: usize) -> GridSpec {
    image_grid.pooled(l as u32 - 1)
}

/// Tangent-plane targets for layer `l` at the lattice positions of its grid:
/// a `positions × C_l` tensor.
pub fn compute_target_features(
    image: &FeatureMap,
    image_grid: GridSpec,
    source: &SourceCnn,
    l: usize,
    lattice: Lattice,
) -> Result<Tensor> {
    check_layer(l)?;
    let lg = layer_grid(image_grid, l);
    let positions = lattice.positions(lg);
    let side = target_patch_side(l);
    let rows: Vec<Vec<f64>> = positions
        .par_iter()
        .map(|&p| cone_target(source, &tangent_patch(image, image_grid, lg, p, side)?, l))
        .collect::<Result<_>>()?;
    Tensor::from_vec(&[positions.len(), CHANNELS[l]], rows.concat())
}

/// Ground-truth input of layer `l` over its whole grid; the image itself for
/// the first layer.
pub fn compute_input_features(
    image: &FeatureMap,
    image_grid: GridSpec,
    source: &SourceCnn,
    l: usize,
) -> Result<FeatureMap> {
    check_layer(l)?;
    if l == 1 {
        return Ok(image.clone());
    }
    let lg = layer_grid(image_grid, l);
    let side = input_patch_side(l);
    let cells: Vec<(usize, usize)> = (0..lg.height)
        .flat_map(|y| (0..lg.width).map(move |x| (y, x)))
        .collect();
    let rows: Vec<Vec<f64>> = cells
        .par_iter()
        .map(|&p| cone_input(source, &tangent_patch(image, image_grid, lg, p, side)?, l))
        .collect::<Result<_>>()?;
    Tensor::from_vec(&[lg.height, lg.width, CHANNELS[l - 1]], rows.concat())
}

/// Cached training pair for one image and one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetEntry {
    /// `H_l × W_l × C_{l-1}`
    pub input: FeatureMap,
    /// `positions × C_l`
    pub targets: Tensor,
}

/// Loss value plus gradient on the prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillLoss {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Mean squared error over all sampled positions and channels.
pub fn distill_loss(pred: &[f64], target: &[f64]) -> Result<DistillLoss> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(shape_err!(
            "prediction has {} values, target {}",
            pred.len(),
            target.len()
        ));
    }
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            value += d * d;
            2.0 * d / n
        })
        .collect();
    Ok(DistillLoss {
        value: value / n,
        grad,
    })
}

/// Positions evaluated in one row group and their pre-ReLU responses.
type GroupPreActivations = (Vec<(usize, usize)>, Vec<f64>);

/// Post-ReLU spherical conv response at `positions` for one layer, grouped
/// evaluation; `buckets` comes from [`group_positions`].
fn predict(
    input: &FeatureMap,
    kernels: &[TransformedKernel],
    bias: &[f64],
    positions: &[(usize, usize)],
    buckets: &[Vec<usize>],
) -> Result<(Vec<f64>, Vec<GroupPreActivations>)> {
    let cout = bias.len();
    let mut pred = vec![0.0; positions.len() * cout];
    let mut per_group = Vec::with_capacity(buckets.len());
    for (g, idx) in buckets.iter().enumerate() {
        let pos: Vec<_> = idx.iter().map(|&i| positions[i]).collect();
        let pre = if pos.is_empty() {
            Vec::new()
        } else {
            let k = &kernels[g];
            conv_at(
                input,
                k.weights.data(),
                bias,
                KernelGeom::of(&k.weights, k.dilation)?,
                HPadding::Circular,
                &pos,
            )?
        };
        for (&i, v) in idx.iter().zip(pre.chunks_exact(cout)) {
            pred[i * cout..(i + 1) * cout].copy_from_slice(&relu(v));
        }
        per_group.push((pos, pre));
    }
    Ok((pred, per_group))
}

/// Sum of squared errors and element count of one layer's prediction
/// against cached targets, feeding it `input`.
pub fn layer_sse(
    input: &FeatureMap,
    table: &crate::ktn::RowGroupTable,
    kernels: &[TransformedKernel],
    bias: &[f64],
    positions: &[(usize, usize)],
    targets: &Tensor,
) -> Result<(f64, usize)> {
    if targets.dims() != [positions.len(), bias.len()] {
        return Err(shape_err!(
            "targets {:?} for {} positions × {} channels",
            targets.dims(),
            positions.len(),
            bias.len()
        ));
    }
    let buckets = group_positions(table, positions)?;
    let (pred, _) = predict(input, kernels, bias, positions, &buckets)?;
    let sse = pred
        .iter()
        .zip(targets.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sse, pred.len()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillRecipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
}

impl Default for DistillRecipe {
    fn default() -> Self {
        DistillRecipe {
            epochs: 40,
            batch_size: 8,
            lr: 1e-3,
            lr_decay_epoch: 20,
            lr_decay_factor: 0.1,
            weight_decay: 5e-4,
        }
    }
}

impl DistillRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(format!("bad distillation recipe {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    /// Loss of the untrained layer over the whole training set.
    pub initial: f64,
    /// Mean minibatch loss of each epoch.
    pub epochs: Vec<f64>,
}

/// Images per deterministic gradient-reduction chunk.
const DISTILL_CHUNK: usize = 4;

/// Loss and per-group kernel gradients of one image.
fn image_loss_grad(
    entry: &TargetEntry,
    kernels: &[TransformedKernel],
    bias: &[f64],
    positions: &[(usize, usize)],
    buckets: &[Vec<usize>],
    grads: &mut [Vec<f64>],
) -> Result<f64> {
    let cout = bias.len();
    let (pred, per_group) = predict(&entry.input, kernels, bias, positions, buckets)?;
    let loss = distill_loss(&pred, entry.targets.data())?;
    for (g, (idx, (pos, pre))) in buckets.iter().zip(&per_group).enumerate() {
        if pos.is_empty() {
            continue;
        }
        let mut dpred = Vec::with_capacity(idx.len() * cout);
        for &i in idx {
            dpred.extend_from_slice(&loss.grad[i * cout..(i + 1) * cout]);
        }
        let dpre = relu_backward(pre, &dpred);
        let k = &kernels[g];
        conv_at_backward(
            &entry.input,
            k.weights.data(),
            KernelGeom::of(&k.weights, k.dilation)?,
            HPadding::Circular,
            pos,
            &dpre,
            Some(&mut grads[g]),
            None,
        );
    }
    Ok(loss.value)
}

/// Mean loss of `layer` over `entries` without updating anything.
pub fn evaluate_layer_loss(
    layer: &KtnLayer,
    source_conv: &ConvParams,
    entries: &[TargetEntry],
    positions: &[(usize, usize)],
) -> Result<f64> {
    if entries.is_empty() {
        return Err(Error::Empty("no cached targets".into()));
    }
    let kernels = crate::ktn::transform_all(layer, &source_conv.kernel)?;
    let buckets = group_positions(&layer.table, positions)?;
    let losses: Vec<f64> = entries
        .par_iter()
        .map(|e| {
            let (pred, _) = predict(&e.input, &kernels, &source_conv.bias, positions, &buckets)?;
            Ok(distill_loss(&pred, e.targets.data())?.value)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / entries.len() as f64)
}

/// Mean distillation loss over `batch` and its gradient on every parameter
/// of `layer`.
pub fn batch_loss_and_grad(
    layer: &KtnLayer,
    source_conv: &ConvParams,
    batch: &[&TargetEntry],
    positions: &[(usize, usize)],
) -> Result<(f64, KtnGrads)> {
    let buckets = group_positions(&layer.table, positions)?;
    batch_loss_and_grad_bucketed(layer, source_conv, batch, positions, &buckets)
}

fn batch_loss_and_grad_bucketed(
    layer: &KtnLayer,
    source_conv: &ConvParams,
    batch: &[&TargetEntry],
    positions: &[(usize, usize)],
    buckets: &[Vec<usize>],
) -> Result<(f64, KtnGrads)> {
    if batch.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    let k = &source_conv.kernel;
    let bias = &source_conv.bias;
    let traced: Vec<_> = (0..layer.table.len())
        .into_par_iter()
        .map(|g| layer.forward_traced(k, g))
        .collect::<Result<_>>()?;
    let kernels: Vec<TransformedKernel> = traced.iter().map(|(kk, _)| kk.clone()).collect();
    // fixed chunking + in-order reduction keeps results independent of the
    // thread count
    let parts: Vec<(f64, Vec<Vec<f64>>)> = batch
        .par_chunks(DISTILL_CHUNK)
        .map(|chunk| {
            let mut g: Vec<Vec<f64>> = kernels
                .iter()
                .map(|kk| vec![0.0; kk.weights.len()])
                .collect();
            let mut loss = 0.0;
            for e in chunk {
                loss += image_loss_grad(e, &kernels, bias, positions, buckets, &mut g)?;
            }
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let (mut loss, mut gk) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (a, b) in gk.iter_mut().zip(g) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let group_grads: Vec<KtnGrads> = traced
        .par_iter()
        .zip(&gk)
        .map(|((_, trace), gk)| {
            let scaled: Vec<f64> = gk.iter().map(|v| v * inv).collect();
            layer.backward(k, trace, &scaled)
        })
        .collect::<Result<_>>()?;
    let mut total = KtnGrads::zeros_like(layer);
    for g in &group_grads {
        total.add_assign(g);
    }
    Ok((loss * inv, total))
}

/// Train one transformer layer against cached tangent-plane targets, with
/// ground-truth inputs. Labels never enter.
pub fn train_ktn_layer(
    mut layer: KtnLayer,
    source_conv: &ConvParams,
    entries: &[TargetEntry],
    positions: &[(usize, usize)],
    recipe: &DistillRecipe,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(KtnLayer, LossCurve)> {
    recipe.validate()?;
    if entries.is_empty() {
        return Err(Error::Empty("no cached targets for this layer".into()));
    }
    let buckets = group_positions(&layer.table, positions)?;
    let mut curve = LossCurve {
        initial: evaluate_layer_loss(&layer, source_conv, entries, positions)?,
        epochs: Vec::with_capacity(recipe.epochs),
    };
    let shapes: Vec<usize> = layer.params().iter().map(|p| p.len()).collect();
    let mut adam = AdamState::new(
        AdamConfig {
            lr: recipe.lr,
            weight_decay: recipe.weight_decay,
            ..AdamConfig::default()
        },
        &shapes,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..entries.len()).collect();
    for epoch in 0..recipe.epochs {
        adam.set_lr(crate::nn::adam::step_lr(
            recipe.lr,
            epoch,
            recipe.lr_decay_epoch,
            recipe.lr_decay_factor,
        ));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(recipe.batch_size) {
            let members: Vec<&TargetEntry> = batch.iter().map(|&i| &entries[i]).collect();
            let (loss, grads) =
                batch_loss_and_grad_bucketed(&layer, source_conv, &members, positions, &buckets)?;
            epoch_loss += loss * batch.len() as f64;
            adam_step(&mut layer.params_mut(), &grads.slices(), &mut adam)?;
        }
        let mean = epoch_loss / entries.len() as f64;
        curve.epochs.push(mean);
        on_epoch(epoch + 1, mean);
    }
    Ok((layer, curve))
}

/// Which images a cache holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSet {
    Train,
    Heldout,
}

impl TargetSet {
    pub fn as_str(&self) -> &'static str {
        match self {
            TargetSet::Train => "train",
            TargetSet::Heldout => "heldout",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetCacheManifest {
    pub source_hash: String,
    pub image_grid: GridSpec,
    pub strides: [usize; LAYERS],
    pub patch_sides: [usize; LAYERS],
    /// Per set, the dataset index of every cached image, in id order.
    pub train_images: Vec<usize>,
    pub heldout_images: Vec<usize>,
    /// Layers whose entries are complete.
    pub complete_layers: Vec<usize>,
}

pub const TARGET_MANIFEST: &str = "targets.json";

/// On-disk cache: `<root>/layer<l>/<set>-<nnnnn>.ktnt` holds targets,
/// `<set>-<nnnnn>.input.ktnt` the matching ground-truth input.
#[derive(Clone, Debug)]
pub struct TargetCache {
    pub root: PathBuf,
    pub manifest: TargetCacheManifest,
}

impl TargetCache {
    pub fn create(root: impl AsRef<Path>, manifest: TargetCacheManifest) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        write_json(root.join(TARGET_MANIFEST), &manifest)?;
        Ok(TargetCache { root, manifest })
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = read_json(root.join(TARGET_MANIFEST))?;
        Ok(TargetCache { root, manifest })
    }

    pub fn lattice(&self, l: usize) -> Lattice {
        Lattice {
            stride: self.manifest.strides[l - 1],
        }
    }

    pub fn positions(&self, l: usize) -> Vec<(usize, usize)> {
        self.lattice(l)
            .positions(layer_grid(self.manifest.image_grid, l))
    }

    pub fn len(&self, set: TargetSet) -> usize {
        match set {
            TargetSet::Train => self.manifest.train_images.len(),
            TargetSet::Heldout => self.manifest.heldout_images.len(),
        }
    }

    fn stem(&self, l: usize, set: TargetSet, i: usize) -> PathBuf {
        self.root
            .join(format!("layer{l}"))
            .join(format!("{}-{i:05}", set.as_str()))
    }

    pub fn store(&self, l: usize, set: TargetSet, i: usize, e: &TargetEntry) -> Result<()> {
        let stem = self.stem(l, set, i);
        save_tensor(stem.with_extension("input.ktnt"), &e.input)?;
        save_tensor(stem.with_extension("ktnt"), &e.targets)
    }

    /// Whether both files of an entry are already on disk.
    pub fn has(&self, l: usize, set: TargetSet, i: usize) -> bool {
        let stem = self.stem(l, set, i);
        stem.with_extension("input.ktnt").is_file() && stem.with_extension("ktnt").is_file()
    }

    pub fn load(&self, l: usize, set: TargetSet, i: usize) -> Result<TargetEntry> {
        if !self.manifest.complete_layers.contains(&l) {
            return Err(Error::MissingStage {
                stage: "cache-targets".into(),
                what: format!("layer {l} targets under {}", self.root.display()),
            });
        }
        let stem = self.stem(l, set, i);
        Ok(TargetEntry {
            input: load_tensor(stem.with_extension("input.ktnt"))?,
            targets: load_tensor(stem.with_extension("ktnt"))?,
        })
    }

    pub fn load_all(&self, l: usize, set: TargetSet) -> Result<Vec<TargetEntry>> {
        (0..self.len(set)).map(|i| self.load(l, set, i)).collect()
    }

    pub fn mark_complete(&mut self, l: usize) -> Result<()> {
        if !self.manifest.complete_layers.contains(&l) {
            self.manifest.complete_layers.push(l);
            self.manifest.complete_layers.sort_unstable();
        }
        write_json(self.root.join(TARGET_MANIFEST), &self.manifest)
    }
}

/// Targets and ground-truth input of layer `l` for one image.
pub fn compute_target_entry(
    image: &FeatureMap,
    image_grid: GridSpec,
    source: &SourceCnn,
    l: usize,
    lattice: Lattice,
) -> Result<TargetEntry> {
    Ok(TargetEntry {
        input: compute_input_features(image, image_grid, source, l)?,
        targets: compute_target_features(image, image_grid, source, l, lattice)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradient;
    use crate::sphconv::SphericalNetwork;
    use rand::Rng;

    #[test]
    fn patch_sides() {
        assert_eq!(
            (1..=3).map(target_patch_side).collect::<Vec<_>>(),
            vec![5, 14, 32]
        );
        assert_eq!(
            (1..=3).map(input_patch_side).collect::<Vec<_>>(),
            vec![1, 6, 16]
        );
    }

    #[test]
    fn lattice_counts() {
        let g = GridSpec::equirect(80).unwrap();
        for l in 1..=3 {
            let lat = Lattice::new(DEFAULT_STRIDES[l - 1]).unwrap();
            assert_eq!(lat.positions(layer_grid(g, l)).len(), 800);
        }
        assert!(Lattice::new(0).is_err());
    }

    #[test]
    fn zero_image_gives_identical_targets() {
        let g = GridSpec::equirect(16).unwrap();
        let src = SourceCnn::random(1, 0.2, HPadding::Zero);
        let t = compute_target_features(
            &Tensor::zeros(&[16, 32, 1]),
            g,
            &src,
            2,
            Lattice::new(2).unwrap(),
        )
        .unwrap();
        let first = t.data()[..64].to_vec();
        for row in t.data().chunks_exact(64) {
            assert_eq!(row, &first[..]);
        }
    }

    #[test]
    fn loss_arithmetic() {
        let t = vec![0.5; 40];
        assert_eq!(distill_loss(&t, &t).unwrap().value, 0.0);
        let p: Vec<f64> = t.iter().map(|v| v + 2.0).collect();
        let l = distill_loss(&p, &t).unwrap();
        assert_eq!(l.value, 4.0);
        assert!(l.grad.iter().all(|&g| (g - 0.1).abs() < 1e-15));
        assert!(distill_loss(&p[..3], &t).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g = distill_loss(&p, &t).unwrap().grad;
        let r = check_gradient(|x| distill_loss(x, &t).unwrap().value, &p, &g, 30, 0);
        assert!(r.passes(1e-6), "{r:?}");
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let grid = GridSpec::equirect(16).unwrap();
        let src = SourceCnn::random(3, 0.3, HPadding::Zero);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lattice = Lattice::new(2).unwrap();
        let entries: Vec<TargetEntry> = (0..4)
            .map(|_| {
                let img = Tensor::from_fn(&[16, 32, 1], |_| rng.gen_range(0.0..1.0));
                compute_target_entry(&img, grid, &src, 1, lattice).unwrap()
            })
            .collect();
        let layers = SphericalNetwork::fresh_ktn_layers(grid, 1, 0.01).unwrap();
        let positions = lattice.positions(grid);
        let recipe = DistillRecipe {
            epochs: 4,
            batch_size: 2,
            lr: 1e-2,
            ..Default::default()
        };
        let run = || {
            train_ktn_layer(
                layers[0].clone(),
                &src.convs[0],
                &entries,
                &positions,
                &recipe,
                9,
                |_, _| {},
            )
            .unwrap()
        };
        let (trained, curve) = run();
        let after = evaluate_layer_loss(&trained, &src.convs[0], &entries, &positions).unwrap();
        assert!(after < curve.initial, "{after} vs {}", curve.initial);
        assert_eq!(run().1, curve);
        assert!(matches!(
            train_ktn_layer(
                layers[0].clone(),
                &src.convs[0],
                &[],
                &positions,
                &recipe,
                9,
                |_, _| {}
            ),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn cache_round_trip_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let m = TargetCacheManifest {
            source_hash: "abc".into(),
            image_grid: GridSpec::equirect(16).unwrap(),
            strides: [4, 2, 1],
            patch_sides: [5, 14, 32],
            train_images: vec![3, 4],
            heldout_images: vec![],
            complete_layers: vec![],
        };
        let mut c = TargetCache::create(dir.path(), m).unwrap();
        let e = TargetEntry {
            input: Tensor::full(&[16, 32, 1], 0.25),
            targets: Tensor::full(&[32, 32], 0.5),
        };
        c.store(1, TargetSet::Train, 1, &e).unwrap();
        assert!(matches!(
            c.load(1, TargetSet::Train, 1),
            Err(Error::MissingStage { .. })
        ));
        c.mark_complete(1).unwrap();
        let c = TargetCache::open(dir.path()).unwrap();
        assert_eq!(c.load(1, TargetSet::Train, 1).unwrap(), e);
        assert!(c.load(1, TargetSet::Train, 0).is_err());
    }
}
