//! The experiment as a sequence of resumable stages over one workspace.
//!
//! ```text
//! <workspace>/
//!   data/{train,test}/      spherical MNIST shards          build-dataset
//!   models/{source-a,source-b,equirect}/                     train-source
//!   targets/<source-hash>/  tangent-plane targets            cache-targets
//!   ktn/{a,b}/layer<l>/     trained transformer layers       train-ktn
//!   reports/                report.json, report.csv          eval, transfer-eval, report
//! ```
//!
//! Every artifact directory carries a `stage.json` ([`StageManifest`]) with
//! the fingerprint of the configuration that produced it and the hashes of
//! the artifacts it consumed. Downstream stages check those hashes and refuse
//! to mix artifacts from different upstream runs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::idx::{load_mnist, Mnist, Split};
use crate::data::manifest::{
    fingerprint, hash_file, read_json, sha256_hex, write_json, StageManifest,
};
use crate::data::spherical::{
    write_spherical_mnist, DatasetParams, SphericalDataset, SphericalSample,
};
use crate::distill::{
    compute_target_entry, layer_grid, target_patch_side, train_ktn_layer, DistillRecipe, Lattice,
    TargetCache, TargetCacheManifest, TargetSet, DEFAULT_STRIDES,
};
use crate::error::{Error, Result};
use crate::eval::{
    emit_report, eval_accuracy, eval_rmse, eval_transfer, evaluate_gates, read_report,
    time_per_image, Classifier, EvalReport, GateResult, MethodReport, SizeReport, TransferReport,
};
use crate::geometry::GridSpec;
use crate::ktn::{load_ktn_layer, save_ktn_layer, KtnLayer, KTN_MANIFEST};
use crate::nn::{HPadding, INIT_STD};
use crate::source_cnn::{
    load_model, save_model, train_classifier, train_source, LabeledImages, SourceCnn, TrainRecipe,
    LAYERS, MODEL_MANIFEST,
};
use crate::sphconv::{Method, SphericalNetwork};
use crate::tensor::{FeatureMap, Tensor};

/// Environment variable that overrides the configured workspace root.
pub const WORKSPACE_ENV: &str = "KTN_WORKSPACE";
pub const STAGE_MANIFEST: &str = "stage.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub mnist_dir: PathBuf,
    pub workspace: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            mnist_dir: PathBuf::from("data/mnist"),
            workspace: PathBuf::from("workspace"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct DatasetConfig {
    #[serde(flatten)]
    pub params: DatasetParams,
    /// Leading digits of each MNIST split to project (`None` = all).
    pub train_digits: Option<usize>,
    pub test_digits: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceConfig {
    pub seed_a: u64,
    pub seed_b: u64,
    /// Leading planar MNIST training images used (`None` = all 60 000).
    pub train_images: Option<usize>,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            seed_a: 1,
            seed_b: 2,
            train_images: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub strides: [usize; LAYERS],
    /// Spherical training images whose targets are cached.
    pub n_images: usize,
    /// Spherical test images held out for RMSE.
    pub heldout_images: usize,
    pub recipe: DistillRecipe,
    pub init_std: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            strides: DEFAULT_STRIDES,
            n_images: 512,
            heldout_images: 64,
            recipe: DistillRecipe::default(),
            init_std: INIT_STD,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EquirectConfig {
    /// Leading spherical training images used (`None` = the whole split).
    pub train_images: Option<usize>,
    /// Overrides `train.epochs` for this model.
    pub epochs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Leading test digits evaluated (each at every polar angle).
    pub test_digits: Option<usize>,
    pub timing_images: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            test_digits: None,
            timing_images: 20,
        }
    }
}

/// Everything a run needs. Missing TOML fields take the defaults below,
/// which reproduce the full-scale recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub method: Method,
    pub paths: Paths,
    pub dataset: DatasetConfig,
    pub train: TrainRecipe,
    pub source: SourceConfig,
    pub distill: DistillConfig,
    pub equirect: EquirectConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            method: Method::Ktn,
            paths: Paths::default(),
            dataset: DatasetConfig::default(),
            train: TrainRecipe::default(),
            source: SourceConfig::default(),
            distill: DistillConfig::default(),
            equirect: EquirectConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.params.validate()?;
        self.train.validate()?;
        self.distill.recipe.validate()?;
        if self.distill.strides.contains(&0) {
            return Err(Error::Config("lattice strides must be >= 1".into()));
        }
        if self.distill.n_images == 0 {
            return Err(Error::Config(
                "distillation needs at least one image".into(),
            ));
        }
        if self.eval.timing_images == 0 {
            return Err(Error::Config("timing needs at least one image".into()));
        }
        if self.equirect.epochs == Some(0) {
            return Err(Error::Config("equirect epochs must be >= 1".into()));
        }
        if self.source.seed_a == self.source.seed_b {
            return Err(Error::Config(
                "the two source networks need different seeds".into(),
            ));
        }
        Ok(())
    }

    /// Fingerprint of everything that influences results (paths and the
    /// method selector excluded).
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        c.method = Method::Ktn;
        fingerprint(&c)
    }

    fn dataset_fingerprint(&self) -> String {
        fingerprint(&(self.seed, &self.dataset))
    }
}

/// Which trained classifier a stage works on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    A,
    B,
}

impl SourceTag {
    pub const ALL: [SourceTag; 2] = [SourceTag::A, SourceTag::B];

    pub fn as_str(&self) -> &'static str {
        match self {
            SourceTag::A => "a",
            SourceTag::B => "b",
        }
    }

    fn seed(&self, cfg: &RunConfig) -> u64 {
        match self {
            SourceTag::A => cfg.source.seed_a,
            SourceTag::B => cfg.source.seed_b,
        }
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(SourceTag::A),
            "b" => Ok(SourceTag::B),
            _ => Err(Error::Config(format!(
                "unknown source `{s}` (expected a or b)"
            ))),
        }
    }
}

/// Directory layout of one workspace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn dataset(&self, split: Split) -> PathBuf {
        self.root.join("data").join(split.as_str())
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn source(&self, tag: SourceTag) -> PathBuf {
        self.root.join("models").join(format!("source-{tag}"))
    }

    pub fn equirect(&self) -> PathBuf {
        self.root.join("models").join("equirect")
    }

    pub fn targets(&self, source_hash: &str) -> PathBuf {
        self.root.join("targets").join(&source_hash[..16])
    }

    pub fn ktn(&self, tag: SourceTag) -> PathBuf {
        self.root.join("ktn").join(tag.as_str())
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn missing(stage: &str, what: impl Into<String>) -> Error {
    Error::MissingStage {
        stage: stage.into(),
        what: what.into(),
    }
}

/// Read the stage manifest in `dir`, reporting an absent one as a missing
/// prerequisite of `stage`.
pub fn read_stage(dir: &Path, stage: &str) -> Result<StageManifest> {
    let path = dir.join(STAGE_MANIFEST);
    if !path.is_file() {
        return Err(missing(stage, format!("{}", path.display())));
    }
    read_json(path)
}

/// Content hash of an artifact: the hash over its files' hashes.
pub fn artifact_hash(m: &StageManifest) -> String {
    sha256_hex(
        serde_json::to_string(&m.files)
            .expect("maps serialize")
            .as_bytes(),
    )
}

fn hash_files(
    dir: &Path,
    names: impl IntoIterator<Item = String>,
) -> Result<BTreeMap<String, String>> {
    names
        .into_iter()
        .map(|n| Ok((n.clone(), hash_file(dir.join(&n))?)))
        .collect()
}

/// Every regular file directly in `dir` except the stage manifest itself.
fn dir_files(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if e.path().is_file() && name != STAGE_MANIFEST {
            out.push(name);
        }
    }
    out.sort();
    Ok(out)
}

fn log(msg: impl AsRef<str>) {
    eprintln!("[ktn] {}", msg.as_ref());
}

/// A labelled image set held as `f32` to halve its footprint.
struct CompactImages {
    dims: [usize; 3],
    pixels: Vec<f32>,
    labels: Vec<u8>,
}

impl CompactImages {
    fn from_samples(samples: &[SphericalSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Empty("no spherical samples".into()))?;
        let (h, w, c) = first.image.hwc()?;
        Ok(CompactImages {
            dims: [h, w, c],
            pixels: samples
                .iter()
                .flat_map(|s| s.image.data().iter().map(|&v| v as f32))
                .collect(),
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }
}

impl LabeledImages for CompactImages {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn image(&self, i: usize) -> FeatureMap {
        let n: usize = self.dims.iter().product();
        Tensor::from_vec(
            &self.dims,
            self.pixels[i * n..(i + 1) * n]
                .iter()
                .map(|&v| v as f64)
                .collect(),
        )
        .expect("uniform sample dims")
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }
}

// ---------------------------------------------------------------- datasets

/// Project both MNIST splits onto the sphere.
pub fn build_dataset(cfg: &RunConfig, ws: &Workspace) -> Result<StageManifest> {
    cfg.validate()?;
    let mut stage = StageManifest::new("build-dataset", cfg.dataset_fingerprint());
    for (split, limit) in [
        (Split::Train, cfg.dataset.train_digits),
        (Split::Test, cfg.dataset.test_digits),
    ] {
        let mnist = load_mnist(&cfg.paths.mnist_dir, split)?;
        let mnist = match limit {
            Some(n) => mnist.truncated(n),
            None => mnist,
        };
        let dir = ws.dataset(split);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        log(format!(
            "projecting {} {} digits",
            mnist.len(),
            split.as_str()
        ));
        let m = write_spherical_mnist(&dir, &mnist, split, cfg.seed, &cfg.dataset.params)?;
        for (name, hash) in hash_files(&dir, dir_files(&dir)?)? {
            stage
                .files
                .insert(format!("{}/{name}", split.as_str()), hash);
        }
        stage
            .notes
            .insert(format!("{}_samples", split.as_str()), m.count.into());
    }
    stage.upstream = mnist_hashes(&cfg.paths.mnist_dir)?;
    write_json(ws.data().join(STAGE_MANIFEST), &stage)?;
    Ok(stage)
}

fn mnist_hashes(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for split in [Split::Train, Split::Test] {
        let prefix = match split {
            Split::Train => "train",
            Split::Test => "t10k",
        };
        for kind in ["images-idx3-ubyte", "labels-idx1-ubyte"] {
            let name = format!("{prefix}-{kind}");
            let path = dir.join(&name);
            if path.is_file() {
                out.insert(format!("mnist/{name}"), hash_file(path)?);
            }
        }
    }
    Ok(out)
}

/// Open a split, checking that it was built from the current configuration.
pub fn open_dataset(cfg: &RunConfig, ws: &Workspace, split: Split) -> Result<SphericalDataset> {
    let stage = read_stage(&ws.data(), "build-dataset")?;
    if stage.fingerprint != cfg.dataset_fingerprint() {
        return Err(Error::Manifest(format!(
            "dataset in {} was built with a different configuration; rerun build-dataset",
            ws.data().display()
        )));
    }
    SphericalDataset::open(ws.dataset(split))
}

// ------------------------------------------------------------------ models

/// Which classifiers `train-source` should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    A,
    B,
    Equirect,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::A, ModelKind::B, ModelKind::Equirect];
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(ModelKind::A),
            "b" => Ok(ModelKind::B),
            "equirect" => Ok(ModelKind::Equirect),
            _ => Err(Error::Config(format!(
                "unknown model `{s}` (expected a, b or equirect)"
            ))),
        }
    }
}

fn write_model_stage(
    dir: &Path,
    stage: &str,
    fp: String,
    upstream: BTreeMap<String, String>,
    model: &SourceCnn,
    notes: BTreeMap<String, serde_json::Value>,
) -> Result<StageManifest> {
    let manifest = save_model(dir, model)?;
    let mut names: Vec<String> = manifest.tensors.iter().map(|t| t.file.clone()).collect();
    names.push(MODEL_MANIFEST.into());
    let mut s = StageManifest::new(stage, fp);
    s.files = hash_files(dir, names)?;
    s.upstream = upstream;
    s.notes = notes;
    write_json(dir.join(STAGE_MANIFEST), &s)?;
    Ok(s)
}

fn source_fingerprint(cfg: &RunConfig, tag: SourceTag) -> String {
    fingerprint(&(&cfg.train, tag.seed(cfg), cfg.source.train_images))
}

fn equirect_recipe(cfg: &RunConfig) -> TrainRecipe {
    let mut r = cfg.train;
    if let Some(e) = cfg.equirect.epochs {
        r.epochs = e;
    }
    r
}

/// Train a planar source network on MNIST.
pub fn train_source_stage(
    cfg: &RunConfig,
    ws: &Workspace,
    tag: SourceTag,
) -> Result<StageManifest> {
    cfg.validate()?;
    let mnist = load_mnist(&cfg.paths.mnist_dir, Split::Train)?;
    let mnist: Mnist = match cfg.source.train_images {
        Some(n) => mnist.truncated(n),
        None => mnist,
    };
    log(format!(
        "training source {tag} on {} planar images",
        mnist.len()
    ));
    let mut history = Vec::new();
    let model = train_source(&mnist, &cfg.train, tag.seed(cfg), |s| {
        log(format!(
            "  source {tag} epoch {} lr {:.1e} loss {:.4} acc {:.4}",
            s.epoch, s.lr, s.mean_loss, s.train_accuracy
        ));
        history.push(s.clone());
    })?;
    let notes = BTreeMap::from([
        ("images".to_string(), mnist.len().into()),
        ("history".to_string(), serde_json::to_value(&history)?),
    ]);
    let upstream = mnist_hashes(&cfg.paths.mnist_dir)?;
    write_model_stage(
        &ws.source(tag),
        "train-source",
        source_fingerprint(cfg, tag),
        upstream,
        &model,
        notes,
    )
}

/// Train the supervised baseline directly on labelled spherical images.
pub fn train_equirect_stage(cfg: &RunConfig, ws: &Workspace) -> Result<StageManifest> {
    cfg.validate()?;
    let ds = open_dataset(cfg, ws, Split::Train)?;
    let n = cfg.equirect.train_images.unwrap_or(ds.len()).min(ds.len());
    let data = CompactImages::from_samples(&ds.load_range(0, n)?)?;
    let recipe = equirect_recipe(cfg);
    log(format!(
        "training equirect baseline on {n} spherical images, {} epochs",
        recipe.epochs
    ));
    let mut history = Vec::new();
    let model = train_classifier(&data, &recipe, cfg.seed, HPadding::Zero, |s| {
        log(format!(
            "  equirect epoch {} lr {:.1e} loss {:.4} acc {:.4}",
            s.epoch, s.lr, s.mean_loss, s.train_accuracy
        ));
        history.push(s.clone());
    })?;
    let data_stage = read_stage(&ws.data(), "build-dataset")?;
    let fp = fingerprint(&(&recipe, cfg.seed, n, cfg.dataset_fingerprint()));
    let notes = BTreeMap::from([
        ("images".to_string(), n.into()),
        ("history".to_string(), serde_json::to_value(&history)?),
    ]);
    let upstream = BTreeMap::from([("dataset".to_string(), artifact_hash(&data_stage))]);
    write_model_stage(&ws.equirect(), "train-source", fp, upstream, &model, notes)
}

/// A trained model and the hash that identifies it downstream.
pub fn open_model(dir: &Path) -> Result<(SourceCnn, String)> {
    let stage = read_stage(dir, "train-source")?;
    Ok((load_model(dir)?, artifact_hash(&stage)))
}

// ----------------------------------------------------------------- targets

fn target_fingerprint(cfg: &RunConfig) -> String {
    fingerprint(&(
        &cfg.distill.strides,
        cfg.distill.n_images,
        cfg.distill.heldout_images,
        cfg.dataset_fingerprint(),
    ))
}

/// Cache distillation targets for the network trained from `tag`. Entries
/// already on disk are kept, so an interrupted run resumes where it stopped.
pub fn cache_targets_stage(cfg: &RunConfig, ws: &Workspace, tag: SourceTag) -> Result<TargetCache> {
    cfg.validate()?;
    let (source, source_hash) = open_model(&ws.source(tag))?;
    let train = open_dataset(cfg, ws, Split::Train)?;
    let test = open_dataset(cfg, ws, Split::Test)?;
    let grid = train.grid();
    let n_train = cfg.distill.n_images.min(train.len());
    let n_held = cfg.distill.heldout_images.min(test.len());
    let root = ws.targets(&source_hash);
    let fp = target_fingerprint(cfg);
    let mut cache = match read_stage(&root, "cache-targets") {
        Ok(stage)
            if stage.fingerprint == fp && stage.upstream.get("source") == Some(&source_hash) =>
        {
            TargetCache::open(&root)?
        }
        Ok(_) => {
            return Err(Error::Manifest(format!(
                "{} holds targets for another configuration; remove it to rebuild",
                root.display()
            )))
        }
        Err(_) => {
            let manifest = TargetCacheManifest {
                source_hash: source_hash.clone(),
                image_grid: grid,
                strides: cfg.distill.strides,
                patch_sides: [1, 2, 3].map(target_patch_side),
                train_images: (0..n_train).collect(),
                heldout_images: (0..n_held).collect(),
                complete_layers: vec![],
            };
            let mut stage = StageManifest::new("cache-targets", fp.clone());
            stage.upstream.insert("source".into(), source_hash.clone());
            stage.upstream.insert(
                "dataset".into(),
                artifact_hash(&read_stage(&ws.data(), "build-dataset")?),
            );
            write_json(root.join(STAGE_MANIFEST), &stage)?;
            TargetCache::create(&root, manifest)?
        }
    };
    let images = |set: TargetSet| -> Result<Vec<FeatureMap>> {
        let samples = match set {
            TargetSet::Train => train.load_range(0, n_train)?,
            TargetSet::Heldout => test.load_range(0, n_held)?,
        };
        Ok(samples.into_iter().map(|s| s.image).collect())
    };
    let sets = [
        (TargetSet::Train, images(TargetSet::Train)?),
        (TargetSet::Heldout, images(TargetSet::Heldout)?),
    ];
    for l in 1..=LAYERS {
        if cache.manifest.complete_layers.contains(&l) {
            log(format!("layer {l} targets already cached"));
            continue;
        }
        let lattice = cache.lattice(l);
        for (set, imgs) in &sets {
            let todo: Vec<usize> = (0..imgs.len())
                .filter(|&i| !cache.has(l, *set, i))
                .collect();
            log(format!(
                "layer {l} {}: {} of {} entries to compute",
                set.as_str(),
                todo.len(),
                imgs.len()
            ));
            for (done, &i) in todo.iter().enumerate() {
                let e = compute_target_entry(&imgs[i], grid, &source, l, lattice)?;
                cache.store(l, *set, i, &e)?;
                if (done + 1) % 50 == 0 {
                    log(format!("  {} / {}", done + 1, todo.len()));
                }
            }
        }
        cache.mark_complete(l)?;
    }
    Ok(cache)
}

/// Open the complete target cache of the network trained from `tag`.
pub fn open_targets(ws: &Workspace, source_hash: &str) -> Result<TargetCache> {
    let root = ws.targets(source_hash);
    read_stage(&root, "cache-targets")?;
    let cache = TargetCache::open(&root)?;
    if cache.manifest.source_hash != source_hash {
        return Err(Error::Manifest(format!(
            "{} was cached for another source network",
            root.display()
        )));
    }
    if cache.manifest.complete_layers.len() != LAYERS {
        return Err(missing(
            "cache-targets",
            format!("complete targets under {}", root.display()),
        ));
    }
    Ok(cache)
}

// --------------------------------------------------------------------- KTN

fn ktn_fingerprint(cfg: &RunConfig) -> String {
    fingerprint(&(&cfg.distill, cfg.seed, target_fingerprint(cfg)))
}

/// Train the three transformer layers against the cached targets of `tag`.
/// Layers already trained under the same configuration are reused.
pub fn train_ktn_stage(cfg: &RunConfig, ws: &Workspace, tag: SourceTag) -> Result<StageManifest> {
    cfg.validate()?;
    let (source, source_hash) = open_model(&ws.source(tag))?;
    let cache = open_targets(ws, &source_hash)?;
    let dir = ws.ktn(tag);
    let fp = ktn_fingerprint(cfg);
    let mut stage = match read_stage(&dir, "train-ktn") {
        Ok(s) if s.fingerprint == fp && s.upstream.get("source") == Some(&source_hash) => s,
        _ => {
            let mut s = StageManifest::new("train-ktn", fp);
            s.upstream.insert("source".into(), source_hash.clone());
            s
        }
    };
    let fresh = SphericalNetwork::fresh_ktn_layers(
        cache.manifest.image_grid,
        cfg.seed,
        cfg.distill.init_std,
    )?;
    for (i, init) in fresh.into_iter().enumerate() {
        let l = i + 1;
        let key = format!("layer{l}");
        if stage.notes.contains_key(&key) && dir.join(&key).join(KTN_MANIFEST).is_file() {
            log(format!("layer {l} already trained"));
            continue;
        }
        let entries = cache.load_all(l, TargetSet::Train)?;
        let positions = cache.positions(l);
        log(format!(
            "training KTN layer {l} on {} images × {} positions",
            entries.len(),
            positions.len()
        ));
        let (layer, curve) = train_ktn_layer(
            init,
            &source.convs[i],
            &entries,
            &positions,
            &cfg.distill.recipe,
            cfg.seed + l as u64,
            |e, loss| {
                log(format!("  layer {l} epoch {e} loss {loss:.6}"));
            },
        )?;
        drop(entries);
        let ldir = dir.join(&key);
        save_ktn_layer(&ldir, &layer)?;
        for (name, hash) in hash_files(&ldir, dir_files(&ldir)?)? {
            stage.files.insert(format!("{key}/{name}"), hash);
        }
        stage.notes.insert(key, serde_json::to_value(&curve)?);
        write_json(dir.join(STAGE_MANIFEST), &stage)?;
    }
    Ok(stage)
}

/// Trained layers for `tag`, checked against the current source network.
pub fn open_ktn(ws: &Workspace, tag: SourceTag, source_hash: &str) -> Result<Vec<KtnLayer>> {
    let dir = ws.ktn(tag);
    let stage = read_stage(&dir, "train-ktn")?;
    if stage.upstream.get("source").map(String::as_str) != Some(source_hash) {
        return Err(Error::Manifest(format!(
            "transformer in {} was trained against a different source network; rerun train-ktn",
            dir.display()
        )));
    }
    (1..=LAYERS)
        .map(|l| {
            let ldir = dir.join(format!("layer{l}"));
            if !ldir.join(KTN_MANIFEST).is_file() {
                return Err(missing("train-ktn", format!("{}", ldir.display())));
            }
            load_ktn_layer(ldir)
        })
        .collect()
}

// -------------------------------------------------------------- evaluation

fn test_samples(cfg: &RunConfig, ws: &Workspace) -> Result<Vec<SphericalSample>> {
    let ds = open_dataset(cfg, ws, Split::Test)?;
    match cfg.eval.test_digits {
        Some(d) => ds.load_digits(d),
        None => ds.load_range(0, ds.len()),
    }
}

fn load_report(cfg: &RunConfig, ws: &Workspace) -> Result<EvalReport> {
    let fp = cfg.fingerprint();
    match read_report(ws.reports()) {
        Ok(r) if r.fingerprint == fp => Ok(r),
        Ok(_) => {
            log("existing report was produced by another configuration; starting a new one");
            Ok(EvalReport {
                fingerprint: fp,
                ..Default::default()
            })
        }
        Err(Error::Io { .. }) => Ok(EvalReport {
            fingerprint: fp,
            ..Default::default()
        }),
        Err(e) => Err(e),
    }
}

fn run_notes(cfg: &RunConfig) -> BTreeMap<String, serde_json::Value> {
    BTreeMap::from([(
        "config".to_string(),
        serde_json::to_value(cfg).expect("config serializes"),
    )])
}

fn timing<C: Classifier>(net: &C, samples: &[SphericalSample], n: usize) -> Result<f64> {
    let imgs: Vec<&FeatureMap> = samples.iter().take(n).map(|s| &s.image).collect();
    time_per_image(net, &imgs)
}

/// Held-out RMSE per layer, with ground-truth and with propagated inputs.
fn rmse_profile(net: &SphericalNetwork, cache: &TargetCache) -> Result<(Vec<f64>, Vec<f64>)> {
    let gt = (1..=LAYERS)
        .map(|l| eval_rmse(net, cache, l, true))
        .collect::<Result<_>>()?;
    let prop = (1..=LAYERS)
        .map(|l| eval_rmse(net, cache, l, false))
        .collect::<Result<_>>()?;
    Ok((gt, prop))
}

/// Evaluate one method and merge it into `reports/report.json`.
pub fn eval_stage(cfg: &RunConfig, ws: &Workspace, method: Method) -> Result<MethodReport> {
    cfg.validate()?;
    let samples = test_samples(cfg, ws)?;
    let thetas = &cfg.dataset.params.test_thetas_deg;
    let grid = cfg.dataset.params.grid();
    let result = match method {
        Method::Equirect => {
            let (model, _) = open_model(&ws.equirect())?;
            log(format!(
                "evaluating equirect baseline on {} samples",
                samples.len()
            ));
            MethodReport {
                method,
                accuracy: eval_accuracy(&model, &samples, thetas)?,
                rmse_conv3: None,
                rmse_ground_truth: None,
                rmse_propagated: None,
                params_total: model.param_count(),
                params_overhead: 0,
                ms_per_image: timing(&model, &samples, cfg.eval.timing_images)?,
            }
        }
        Method::Ktn | Method::Projected => {
            let (source, source_hash) = open_model(&ws.source(SourceTag::A))?;
            let source_params = source.param_count();
            let net = match method {
                Method::Ktn => SphericalNetwork::with_ktn(
                    source,
                    grid,
                    open_ktn(ws, SourceTag::A, &source_hash)?,
                )?,
                _ => SphericalNetwork::projected(source, grid)?,
            };
            net.cache_kernels()?;
            log(format!("evaluating {method} on {} samples", samples.len()));
            let accuracy = eval_accuracy(&net, &samples, thetas)?;
            let (gt, prop) = match open_targets(ws, &source_hash) {
                Ok(cache) => {
                    let (g, p) = rmse_profile(&net, &cache)?;
                    (Some(g), Some(p))
                }
                Err(Error::MissingStage { .. }) if method == Method::Projected => {
                    log("no target cache yet: skipping RMSE for the projected baseline");
                    (None, None)
                }
                Err(e) => return Err(e),
            };
            let overhead = SizeReport::from_network(&net).total.overhead();
            MethodReport {
                method,
                accuracy,
                rmse_conv3: prop.as_ref().map(|p| p[LAYERS - 1]),
                rmse_ground_truth: gt,
                rmse_propagated: prop,
                params_total: source_params + overhead,
                params_overhead: overhead,
                ms_per_image: timing(&net, &samples, cfg.eval.timing_images)?,
            }
        }
    };
    let mut report = load_report(cfg, ws)?;
    report.notes = run_notes(cfg);
    report.upsert(result.clone());
    emit_report(&report, ws.reports())?;
    Ok(result)
}

/// Swap source networks under trained transformers and compare.
pub fn transfer_eval_stage(cfg: &RunConfig, ws: &Workspace) -> Result<TransferReport> {
    cfg.validate()?;
    let samples = test_samples(cfg, ws)?;
    let thetas = &cfg.dataset.params.test_thetas_deg;
    let (a, ha) = open_model(&ws.source(SourceTag::A))?;
    let (b, hb) = open_model(&ws.source(SourceTag::B))?;
    let ktn_a = open_ktn(ws, SourceTag::A, &ha)?;
    let ktn_b = open_ktn(ws, SourceTag::B, &hb)?;
    log(format!("transfer evaluation on {} samples", samples.len()));
    let t = TransferReport {
        ktn_a_on_a: eval_transfer(&ktn_a, &a, &samples, thetas)?.mean,
        ktn_a_on_b: eval_transfer(&ktn_a, &b, &samples, thetas)?.mean,
        ktn_b_on_b: eval_transfer(&ktn_b, &b, &samples, thetas)?.mean,
    };
    let mut report = load_report(cfg, ws)?;
    report.notes = run_notes(cfg);
    report.transfer = Some(t.clone());
    emit_report(&report, ws.reports())?;
    Ok(t)
}

/// Add the size section, rewrite the report files and evaluate the gates.
pub fn report_stage(cfg: &RunConfig, ws: &Workspace) -> Result<(EvalReport, Vec<GateResult>)> {
    cfg.validate()?;
    let mut report = load_report(cfg, ws)?;
    let (source, hash) = open_model(&ws.source(SourceTag::A))?;
    let layers = match open_ktn(ws, SourceTag::A, &hash) {
        Ok(l) => l,
        Err(Error::MissingStage { .. }) => {
            log("no trained transformer yet: sizing a freshly initialised one");
            SphericalNetwork::fresh_ktn_layers(
                cfg.dataset.params.grid(),
                cfg.seed,
                cfg.distill.init_std,
            )?
        }
        Err(e) => return Err(e),
    };
    let net = SphericalNetwork::with_ktn(source, cfg.dataset.params.grid(), layers)?;
    report.size = Some(SizeReport::from_network(&net));
    report.notes = run_notes(cfg);
    emit_report(&report, ws.reports())?;
    let gates = evaluate_gates(&report);
    Ok((report, gates))
}

/// Accuracy of a classifier on samples already in memory; handy for
/// examples and smoke tests that bypass the workspace.
pub fn quick_accuracy(
    net: &impl Classifier,
    samples: &[SphericalSample],
    thetas: &[f64],
) -> Result<f64> {
    Ok(eval_accuracy(net, samples, thetas)?.mean)
}

/// Grid of the spherical images a configuration produces.
pub fn image_grid(cfg: &RunConfig) -> GridSpec {
    cfg.dataset.params.grid()
}

/// Layer grids, for display.
pub fn layer_grids(cfg: &RunConfig) -> Vec<GridSpec> {
    (1..=LAYERS)
        .map(|l| layer_grid(image_grid(cfg), l))
        .collect()
}

/// Lattice sizes per layer under a configuration.
pub fn lattice_sizes(cfg: &RunConfig) -> Result<Vec<usize>> {
    layer_grids(cfg)
        .par_iter()
        .zip(cfg.distill.strides.par_iter())
        .map(|(g, &s)| Ok(Lattice::new(s)?.positions(*g).len()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_reference_recipe() {
        let c = RunConfig::default();
        assert_eq!(c.dataset.params.height, 80);
        assert_eq!(c.dataset.params.grid().width, 160);
        assert_eq!(c.dataset.params.fov_deg, 65.5);
        assert_eq!(c.train.epochs, 40);
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.train.lr_decay_epoch, 20);
        assert_eq!(c.train.lr_decay_factor, 0.1);
        assert_eq!(c.train.weight_decay, 5e-4);
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.train.init_std, 0.01);
        assert_eq!(c.distill.n_images, 512);
        assert_eq!(lattice_sizes(&c).unwrap(), vec![800; 3]);
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let p = RunConfig::from_toml("seed = 7\n[train]\nepochs = 3\n[dataset]\nheight = 40\n")
            .unwrap();
        assert_eq!(p.seed, 7);
        assert_eq!(p.train.epochs, 3);
        assert_eq!(p.train.batch_size, 64);
        assert_eq!(p.dataset.params.height, 40);
        assert_eq!(p.dataset.params.fov_deg, 65.5);
        assert!(matches!(
            RunConfig::from_toml("seed = \"x\""),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fingerprint_tracks_every_result_field() {
        let c = RunConfig::default();
        let mut d = c.clone();
        d.paths.workspace = "elsewhere".into();
        d.method = Method::Projected;
        assert_eq!(c.fingerprint(), d.fingerprint());
        d.distill.recipe.lr = 2e-3;
        assert_ne!(c.fingerprint(), d.fingerprint());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = RunConfig::default();
        c.source.seed_b = c.source.seed_a;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::default();
        c.distill.strides[1] = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn missing_stages_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let cfg = RunConfig::default();
        match eval_stage(&cfg, &ws, Method::Projected) {
            Err(Error::MissingStage { stage, .. }) => assert_eq!(stage, "build-dataset"),
            other => panic!("{other:?}"),
        }
        match open_model(&ws.source(SourceTag::A)) {
            Err(Error::MissingStage { stage, .. }) => assert_eq!(stage, "train-source"),
            other => panic!("{other:?}"),
        }
    }
}
