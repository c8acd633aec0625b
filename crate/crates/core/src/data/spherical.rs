//! Spherical MNIST: planar digits painted onto an equirectangular canvas
//! through the inverse gnomonic map.
//!
//! Each digit is treated as a tangent-plane image with a fixed field of view.
//! Training samples get one random placement, test samples nine placements
//! at fixed polar angles. The digit itself is never rotated.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::idx::{Mnist, Split};
use crate::data::ktnt::{load_tensor, save_tensor};
use crate::data::manifest::{read_json, write_json};
use crate::error::{Error, Result};
use crate::geometry::{build_canvas_sampling_map, GridSpec, SphereCoord, TangentGrid};
use crate::tensor::{FeatureMap, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetParams {
    /// Canvas height; width is twice this.
    pub height: usize,
    /// Field of view covered by the 28×28 digit, degrees.
    pub fov_deg: f64,
    /// Polar angles of the test placements, degrees.
    pub test_thetas_deg: Vec<f64>,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            height: 80,
            fov_deg: 65.5,
            test_thetas_deg: (1..=9).map(|i| 8.0 * i as f64).collect(),
        }
    }
}

impl DatasetParams {
    pub fn grid(&self) -> GridSpec {
        GridSpec {
            height: self.height,
            width: 2 * self.height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 {
            return Err(Error::Config(format!(
                "canvas height {} too small",
                self.height
            )));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::Config(format!(
                "fov {}° not in (0, 180)",
                self.fov_deg
            )));
        }
        if self.test_thetas_deg.is_empty()
            || self
                .test_thetas_deg
                .iter()
                .any(|t| !(0.0..=180.0).contains(t))
        {
            return Err(Error::Config(
                "test polar angles must be non-empty and within [0, 180]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SphericalSample {
    /// `H × W × 1`
    pub image: FeatureMap,
    pub label: u8,
    pub theta_center: f64,
    pub phi_center: f64,
    /// Index of the source digit in its MNIST split.
    pub digit_index: usize,
}

#[derive(Clone, Copy, Debug)]
struct Placement {
    digit: usize,
    theta: f64,
    phi: f64,
}

fn split_salt(split: Split) -> u64 {
    match split {
        Split::Train => 0x7472_6169_6e00_0000,
        Split::Test => 0x7465_7374_0000_0000,
    }
}

fn placements_for(digit: usize, split: Split, seed: u64, params: &DatasetParams) -> Vec<Placement> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ split_salt(split));
    rng.set_stream(digit as u64);
    match split {
        Split::Train => {
            let theta = rng.gen_range(0.0..=PI);
            let phi = rng.gen_range(0.0..TAU);
            vec![Placement { digit, theta, phi }]
        }
        Split::Test => params
            .test_thetas_deg
            .iter()
            .map(|t| Placement {
                digit,
                theta: t.to_radians(),
                phi: rng.gen_range(0.0..TAU),
            })
            .collect(),
    }
}

/// Paint a `side × side` tangent image centred at `center` onto the canvas.
pub fn render_digit(
    pixels: &[f32],
    side: usize,
    center: SphereCoord,
    fov: f64,
    grid: GridSpec,
) -> Result<FeatureMap> {
    let tg = TangentGrid::with_fov(center, fov, side)?;
    let map = build_canvas_sampling_map(&tg, grid)?;
    let digit = Tensor::from_vec(&[side, side, 1], pixels.iter().map(|&p| p as f64).collect())?;
    map.apply(&digit)
}

fn render(mnist: &Mnist, p: Placement, params: &DatasetParams) -> Result<SphericalSample> {
    let center = SphereCoord::new(p.theta, p.phi)?;
    let side = mnist.images.rows;
    let image = render_digit(
        mnist.images.image(p.digit),
        side,
        center,
        params.fov_deg.to_radians(),
        params.grid(),
    )?;
    Ok(SphericalSample {
        image,
        label: mnist.labels[p.digit],
        theta_center: p.theta,
        phi_center: p.phi,
        digit_index: p.digit,
    })
}

/// Build the samples for digits `range` of `mnist`.
pub fn build_range(
    mnist: &Mnist,
    split: Split,
    seed: u64,
    params: &DatasetParams,
    range: std::ops::Range<usize>,
) -> Result<Vec<SphericalSample>> {
    params.validate()?;
    if mnist.images.rows != mnist.images.cols {
        return Err(Error::Precondition("digits must be square".into()));
    }
    let placements: Vec<Placement> = range
        .flat_map(|d| placements_for(d, split, seed, params))
        .collect();
    placements
        .par_iter()
        .map(|&p| render(mnist, p, params))
        .collect()
}

pub fn build_spherical_mnist(
    mnist: &Mnist,
    split: Split,
    seed: u64,
    params: &DatasetParams,
) -> Result<Vec<SphericalSample>> {
    build_range(mnist, split, seed, params, 0..mnist.len())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub images: String,
    pub meta: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub seed: u64,
    pub digits: usize,
    pub count: usize,
    pub params: DatasetParams,
    pub shards: Vec<ShardEntry>,
    /// Samples per polar angle (test split only), keyed by whole degrees.
    pub per_theta: BTreeMap<String, usize>,
}

pub const MANIFEST: &str = "manifest.json";
const DIGITS_PER_SHARD: usize = 500;

/// Write a split as KTNT shards plus `manifest.json` under `dir`.
///
/// Each shard stores images (`N × H × W`) and a meta tensor (`N × 4`:
/// label, θ, φ, digit index).
pub fn write_spherical_mnist(
    dir: impl AsRef<Path>,
    mnist: &Mnist,
    split: Split,
    seed: u64,
    params: &DatasetParams,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    if mnist.is_empty() {
        return Err(Error::Empty("no MNIST digits to project".into()));
    }
    let grid = params.grid();
    let mut shards = Vec::new();
    let mut per_theta: BTreeMap<String, usize> = BTreeMap::new();
    let mut count = 0;
    for (si, start) in (0..mnist.len()).step_by(DIGITS_PER_SHARD).enumerate() {
        let end = (start + DIGITS_PER_SHARD).min(mnist.len());
        let samples = build_range(mnist, split, seed, params, start..end)?;
        let n = samples.len();
        let mut images = Vec::with_capacity(n * grid.len());
        let mut meta = Vec::with_capacity(n * 4);
        for s in &samples {
            images.extend_from_slice(s.image.data());
            meta.extend_from_slice(&[
                s.label as f64,
                s.theta_center,
                s.phi_center,
                s.digit_index as f64,
            ]);
            if split == Split::Test {
                *per_theta
                    .entry(format!("{}", s.theta_center.to_degrees().round() as i64))
                    .or_default() += 1;
            }
        }
        let entry = ShardEntry {
            images: format!("shard-{si:04}.ktnt"),
            meta: format!("meta-{si:04}.ktnt"),
            count: n,
        };
        save_tensor(
            dir.join(&entry.images),
            &Tensor::from_vec(&[n, grid.height, grid.width], images)?,
        )?;
        save_tensor(dir.join(&entry.meta), &Tensor::from_vec(&[n, 4], meta)?)?;
        shards.push(entry);
        count += n;
    }
    let manifest = DatasetManifest {
        split,
        seed,
        digits: mnist.len(),
        count,
        params: params.clone(),
        shards,
        per_theta,
    };
    write_json(dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Read access to a split written by [`write_spherical_mnist`].
#[derive(Clone, Debug)]
pub struct SphericalDataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl SphericalDataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let manifest: DatasetManifest = read_json(dir.join(MANIFEST))?;
        Ok(SphericalDataset { dir, manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    pub fn grid(&self) -> GridSpec {
        self.manifest.params.grid()
    }

    fn load_shard(&self, entry: &ShardEntry) -> Result<Vec<SphericalSample>> {
        let images = load_tensor(self.dir.join(&entry.images))?;
        let meta = load_tensor(self.dir.join(&entry.meta))?;
        let g = self.grid();
        if images.dims() != [entry.count, g.height, g.width] || meta.dims() != [entry.count, 4] {
            return Err(Error::Manifest(format!(
                "shard {} does not match manifest",
                entry.images
            )));
        }
        let px = g.len();
        Ok((0..entry.count)
            .map(|i| {
                let m = &meta.data()[i * 4..i * 4 + 4];
                SphericalSample {
                    image: Tensor::from_vec(
                        &[g.height, g.width, 1],
                        images.data()[i * px..(i + 1) * px].to_vec(),
                    )
                    .expect("shard dims checked"),
                    label: m[0] as u8,
                    theta_center: m[1],
                    phi_center: m[2],
                    digit_index: m[3] as usize,
                }
            })
            .collect())
    }

    /// Samples `[start, start + n)` in file order.
    pub fn load_range(&self, start: usize, n: usize) -> Result<Vec<SphericalSample>> {
        let end = (start + n).min(self.len());
        let mut out = Vec::with_capacity(end.saturating_sub(start));
        let mut offset = 0;
        for entry in &self.manifest.shards {
            let (lo, hi) = (offset, offset + entry.count);
            offset = hi;
            if hi <= start || lo >= end {
                continue;
            }
            let shard = self.load_shard(entry)?;
            out.extend(
                shard
                    .into_iter()
                    .skip(start.saturating_sub(lo))
                    .take(end.min(hi) - start.max(lo)),
            );
        }
        Ok(out)
    }

    /// Test samples whose source digit index is below `digits`.
    pub fn load_digits(&self, digits: usize) -> Result<Vec<SphericalSample>> {
        let per_digit = match self.manifest.split {
            Split::Train => 1,
            Split::Test => self.manifest.params.test_thetas_deg.len(),
        };
        self.load_range(0, digits * per_digit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::idx::IdxImages;

    pub(crate) fn fake_mnist(n: usize) -> Mnist {
        let mut pixels = vec![0f32; n * 784];
        for i in 0..n {
            for r in 6..22 {
                pixels[i * 784 + r * 28 + 10 + (i % 5)] = 1.0;
            }
        }
        Mnist {
            images: IdxImages {
                count: n,
                rows: 28,
                cols: 28,
                pixels,
            },
            labels: (0..n).map(|i| (i % 10) as u8).collect(),
        }
    }

    #[test]
    fn test_split_has_nine_placements_per_digit() {
        let m = fake_mnist(3);
        let s = build_spherical_mnist(&m, Split::Test, 1, &DatasetParams::default()).unwrap();
        assert_eq!(s.len(), 27);
        for (i, smp) in s.iter().enumerate() {
            assert_eq!(smp.image.dims(), &[80, 160, 1]);
            let deg = smp.theta_center.to_degrees();
            assert!((deg - 8.0 * (i % 9 + 1) as f64).abs() < 1e-9);
            assert!(smp
                .image
                .data()
                .iter()
                .all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        }
    }

    #[test]
    fn train_split_is_deterministic_and_in_range() {
        let m = fake_mnist(4);
        let p = DatasetParams::default();
        let a = build_spherical_mnist(&m, Split::Train, 9, &p).unwrap();
        let b = build_spherical_mnist(&m, Split::Train, 9, &p).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| (0.0..=PI).contains(&s.theta_center)));
        let c = build_spherical_mnist(&m, Split::Train, 10, &p).unwrap();
        assert_ne!(a[0].theta_center, c[0].theta_center);
    }

    #[test]
    fn chunked_build_matches_whole_build() {
        let m = fake_mnist(6);
        let p = DatasetParams::default();
        let whole = build_spherical_mnist(&m, Split::Test, 3, &p).unwrap();
        let mut parts = build_range(&m, Split::Test, 3, &p, 0..2).unwrap();
        parts.extend(build_range(&m, Split::Test, 3, &p, 2..6).unwrap());
        assert_eq!(whole, parts);
    }
}
