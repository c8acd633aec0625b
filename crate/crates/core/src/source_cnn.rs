//! The planar source network: three `5×5 conv → 2×2 max-pool → ReLU` stages
//! (32, 64, 128 channels), a global spatial max-pool and a linear classifier.
//!
//! The head only sees the per-channel maximum of the last feature map, so the
//! same weights classify 28×28 planar digits and 80×160 spherical canvases.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::idx::Mnist;
use crate::data::ktnt::{load_tensor, save_tensor};
use crate::data::manifest::{read_json, write_json};
use crate::data::spherical::SphericalSample;
use crate::error::{shape_err, Error, Result};
use crate::nn::layers::{
    argmax, global_max_pool, global_max_pool_backward, maxpool2x2, maxpool2x2_backward, relu,
    relu_backward, softmax_xent, Linear,
};
use crate::nn::{
    adam_step, conv2d_backward, conv2d_forward, normal_init, AdamConfig, AdamState, ConvParams,
    HPadding,
};
use crate::tensor::{FeatureMap, Tensor};

pub const CHANNELS: [usize; 4] = [1, 32, 64, 128];
pub const KERNEL: usize = 5;
pub const LAYERS: usize = 3;
pub const CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct SourceCnn {
    pub convs: Vec<ConvParams>,
    pub head: Linear,
}

impl SourceCnn {
    pub fn zeros(padding: HPadding) -> Self {
        SourceCnn {
            convs: (0..LAYERS)
                .map(|l| ConvParams::zeros(KERNEL, CHANNELS[l], CHANNELS[l + 1], padding))
                .collect(),
            head: Linear::zeros(CHANNELS[LAYERS], CLASSES),
        }
    }

    /// Normal(0, `std`) weights, zero biases.
    pub fn random(seed: u64, std: f64, padding: HPadding) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = SourceCnn::zeros(padding);
        for c in &mut m.convs {
            normal_init(c.kernel.data_mut(), std, &mut rng);
        }
        normal_init(&mut m.head.weights, std, &mut rng);
        m
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.param_count()).sum::<usize>() + self.head.param_count()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::with_capacity(2 * LAYERS + 2);
        for c in &self.convs {
            v.push(c.kernel.data());
            v.push(&c.bias);
        }
        v.push(&self.head.weights);
        v.push(&self.head.bias);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::with_capacity(2 * LAYERS + 2);
        for c in &mut self.convs {
            v.push(c.kernel.data_mut());
            v.push(&mut c.bias);
        }
        v.push(&mut self.head.weights);
        v.push(&mut self.head.bias);
        v
    }

    fn add_assign(&mut self, other: &SourceCnn) {
        for (a, b) in self.params_mut().into_iter().zip(other.params()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    fn scale(&mut self, s: f64) {
        for a in self.params_mut() {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Flattened parameters, in [`Self::params`] order.
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

    pub fn check_architecture(&self) -> Result<()> {
        if self.convs.len() != LAYERS {
            return Err(shape_err!(
                "expected {LAYERS} conv layers, found {}",
                self.convs.len()
            ));
        }
        for (l, c) in self.convs.iter().enumerate() {
            let want = [KERNEL, KERNEL, CHANNELS[l], CHANNELS[l + 1]];
            if c.kernel.dims() != want || c.bias.len() != CHANNELS[l + 1] {
                return Err(shape_err!(
                    "conv{} has kernel {:?}, expected {want:?}",
                    l + 1,
                    c.kernel.dims()
                ));
            }
        }
        if self.head.inputs != CHANNELS[LAYERS] || self.head.outputs != CLASSES {
            return Err(shape_err!(
                "head is {}→{}",
                self.head.inputs,
                self.head.outputs
            ));
        }
        Ok(())
    }

    /// Post-pool, post-ReLU output of layer `l` (1-based).
    pub fn forward_to_layer(&self, image: &FeatureMap, l: usize) -> Result<FeatureMap> {
        if !(1..=LAYERS).contains(&l) {
            return Err(Error::Precondition(format!(
                "layer {l} not in 1..={LAYERS}"
            )));
        }
        let mut x = image.clone();
        for conv in &self.convs[..l] {
            x = stage_forward(&x, conv)?;
        }
        Ok(x)
    }

    pub fn head_logits(&self, top: &FeatureMap) -> Result<Vec<f64>> {
        let (feat, _) = global_max_pool(top)?;
        self.head.forward(&feat)
    }

    pub fn forward(&self, image: &FeatureMap) -> Result<Vec<f64>> {
        let top = self.forward_to_layer(image, LAYERS)?;
        self.head_logits(&top)
    }

    pub fn predict(&self, image: &FeatureMap) -> Result<usize> {
        Ok(argmax(&self.forward(image)?))
    }

    /// Cross-entropy loss and its gradient for one labelled image.
    pub fn loss_and_grad(&self, image: &FeatureMap, label: usize) -> Result<(f64, SourceCnn)> {
        let mut traces = Vec::with_capacity(LAYERS);
        let mut x = image.clone();
        for conv in &self.convs {
            let pre = conv2d_forward(&x, conv)?;
            let (pooled, arg) = maxpool2x2(&pre)?;
            let out = Tensor::from_vec(pooled.dims(), relu(pooled.data()))?;
            traces.push((x, pre.dims().to_vec(), arg, pooled));
            x = out;
        }
        let (feat, garg) = global_max_pool(&x)?;
        let logits = self.head.forward(&feat)?;
        let (loss, dlogits) = softmax_xent(&logits, label)?;

        let mut grads = SourceCnn::zeros(self.convs[0].h_padding);
        let (gw, gb, dfeat) = self.head.backward(&feat, &dlogits);
        grads.head.weights = gw;
        grads.head.bias = gb;
        let mut dx = global_max_pool_backward(x.dims(), &garg, &dfeat);
        for (l, (input, pre_dims, arg, pooled)) in traces.into_iter().enumerate().rev() {
            let dpooled = relu_backward(pooled.data(), dx.data());
            let dpre = maxpool2x2_backward(&pre_dims, &arg, &dpooled);
            let g = conv2d_backward(&input, &self.convs[l], &dpre)?;
            grads.convs[l].kernel = g.kernel;
            grads.convs[l].bias = g.bias;
            dx = g.input;
        }
        Ok((loss, grads))
    }
}

/// `conv → 2×2 max-pool → ReLU`
pub fn stage_forward(x: &FeatureMap, conv: &ConvParams) -> Result<FeatureMap> {
    let pre = conv2d_forward(x, conv)?;
    let (mut pooled, _) = maxpool2x2(&pre)?;
    crate::nn::layers::relu_inplace(pooled.data_mut());
    Ok(pooled)
}

/// Labelled images addressable by index.
pub trait LabeledImages: Sync {
    fn len(&self) -> usize;
    fn image(&self, i: usize) -> FeatureMap;
    fn label(&self, i: usize) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl LabeledImages for Mnist {
    fn len(&self) -> usize {
        Mnist::len(self)
    }

    fn image(&self, i: usize) -> FeatureMap {
        let (r, c) = (self.images.rows, self.images.cols);
        Tensor::from_vec(
            &[r, c, 1],
            self.images.image(i).iter().map(|&p| p as f64).collect(),
        )
        .expect("idx dims are consistent")
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }
}

impl LabeledImages for [SphericalSample] {
    fn len(&self) -> usize {
        <[SphericalSample]>::len(self)
    }

    fn image(&self, i: usize) -> FeatureMap {
        self[i].image.clone()
    }

    fn label(&self, i: usize) -> usize {
        self[i].label as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRecipe {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// First epoch (0-based) trained at the decayed rate.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub weight_decay: f64,
    pub init_std: f64,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        TrainRecipe {
            epochs: 40,
            batch_size: 64,
            lr: 1e-3,
            lr_decay_epoch: 20,
            lr_decay_factor: 0.1,
            weight_decay: 5e-4,
            init_std: 0.01,
        }
    }
}

impl TrainRecipe {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        crate::nn::adam::step_lr(self.lr, epoch, self.lr_decay_epoch, self.lr_decay_factor)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(format!("bad training recipe {self:?}")));
        }
        Ok(())
    }
}

/// Images per deterministic reduction chunk.
pub(crate) const REDUCE_CHUNK: usize = 8;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// Train a fresh network with the given padding mode.
pub fn train_classifier(
    data: &(impl LabeledImages + ?Sized),
    recipe: &TrainRecipe,
    seed: u64,
    padding: HPadding,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<SourceCnn> {
    recipe.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    let mut model = SourceCnn::random(seed, recipe.init_std, padding);
    let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut adam = AdamState::new(recipe.adam(), &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..recipe.epochs {
        adam.set_lr(recipe.lr_at(epoch));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(recipe.batch_size) {
            let parts: Vec<Result<(f64, usize, SourceCnn)>> = batch
                .par_chunks(REDUCE_CHUNK)
                .map(|chunk| {
                    let mut acc: Option<SourceCnn> = None;
                    let (mut loss, mut hits) = (0.0, 0);
                    for &i in chunk {
                        let img = data.image(i);
                        let (l, g) = model.loss_and_grad(&img, data.label(i))?;
                        loss += l;
                        if model.predict(&img)? == data.label(i) {
                            hits += 1;
                        }
                        match acc.as_mut() {
                            Some(a) => a.add_assign(&g),
                            None => acc = Some(g),
                        }
                    }
                    Ok((loss, hits, acc.expect("chunks are non-empty")))
                })
                .collect();
            let mut total: Option<SourceCnn> = None;
            for p in parts {
                let (l, h, g) = p?;
                loss_sum += l;
                correct += h;
                match total.as_mut() {
                    Some(t) => t.add_assign(&g),
                    None => total = Some(g),
                }
            }
            let mut grad = total.expect("batches are non-empty");
            grad.scale(1.0 / batch.len() as f64);
            let gs = grad.params();
            adam_step(&mut model.params_mut(), &gs, &mut adam)?;
        }
        on_epoch(&EpochStats {
            epoch: epoch + 1,
            lr: adam.config.lr,
            mean_loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok(model)
}

/// Train the planar source network on MNIST (zero padding).
pub fn train_source(
    mnist: &Mnist,
    recipe: &TrainRecipe,
    seed: u64,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<SourceCnn> {
    train_classifier(mnist, recipe, seed, HPadding::Zero, on_epoch)
}

pub fn accuracy(model: &SourceCnn, data: &(impl LabeledImages + ?Sized)) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set is empty".into()));
    }
    let hits: Result<Vec<bool>> = (0..data.len())
        .into_par_iter()
        .map(|i| Ok(model.predict(&data.image(i))? == data.label(i)))
        .collect();
    Ok(hits?.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub architecture: String,
    pub h_padding: HPadding,
    pub tensors: Vec<TensorEntry>,
}

pub const MODEL_MANIFEST: &str = "model.json";

fn model_tensors(m: &SourceCnn) -> Vec<(String, Tensor)> {
    let mut v = Vec::new();
    for (l, c) in m.convs.iter().enumerate() {
        v.push((format!("conv{}.kernel", l + 1), c.kernel.clone()));
        v.push((
            format!("conv{}.bias", l + 1),
            Tensor::from_vec(&[c.bias.len()], c.bias.clone()).expect("non-empty bias"),
        ));
    }
    v.push((
        "head.weight".into(),
        Tensor::from_vec(&[m.head.outputs, m.head.inputs], m.head.weights.clone())
            .expect("head dims"),
    ));
    v.push((
        "head.bias".into(),
        Tensor::from_vec(&[m.head.outputs], m.head.bias.clone()).expect("head dims"),
    ));
    v
}

/// Write one KTNT file per tensor plus `model.json` into `dir`.
pub fn save_model(dir: impl AsRef<Path>, model: &SourceCnn) -> Result<ModelManifest> {
    let dir = dir.as_ref();
    let mut tensors = Vec::new();
    for (name, t) in model_tensors(model) {
        let file = format!("{name}.ktnt");
        save_tensor(dir.join(&file), &t)?;
        tensors.push(TensorEntry {
            name,
            file,
            dims: t.dims().to_vec(),
        });
    }
    let manifest = ModelManifest {
        architecture: "conv5x5(32,64,128)-maxpool-relu+gmp+linear10".into(),
        h_padding: model.convs[0].h_padding,
        tensors,
    };
    write_json(dir.join(MODEL_MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<SourceCnn> {
    let dir = dir.as_ref();
    let manifest: ModelManifest = read_json(dir.join(MODEL_MANIFEST))?;
    let mut model = SourceCnn::zeros(manifest.h_padding);
    let expected = model_tensors(&model);
    if manifest.tensors.len() != expected.len() {
        return Err(Error::Manifest(format!(
            "model manifest lists {} tensors, expected {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for (entry, (name, want)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != name {
            return Err(Error::Manifest(format!(
                "expected tensor {name}, found {}",
                entry.name
            )));
        }
        let t = load_tensor(dir.join(&entry.file))?;
        if t.dims() != want.dims() {
            return Err(shape_err!(
                "{name}: file has {:?}, architecture needs {:?}",
                t.dims(),
                want.dims()
            ));
        }
        loaded.push(t);
    }
    let mut it = loaded.into_iter();
    for c in &mut model.convs {
        c.kernel = it.next().unwrap();
        c.bias = it.next().unwrap().into_data();
    }
    model.head.weights = it.next().unwrap().into_data();
    model.head.bias = it.next().unwrap().into_data();
    model.check_architecture()?;
    Ok(model)
}
