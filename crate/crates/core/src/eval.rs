//! Accuracy per polar angle, feature RMSE against tangent-plane targets,
//! source-swap transfer, timing, parameter accounting and report files.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::manifest::{fingerprint, read_json, write_json};
use crate::data::spherical::SphericalSample;
use crate::distill::{layer_sse, TargetCache, TargetSet};
use crate::error::{Error, Result};
use crate::ktn::{KtnLayer, ParamCount};
use crate::source_cnn::{SourceCnn, LAYERS};
use crate::sphconv::{Method, SphericalNetwork};
use crate::tensor::FeatureMap;

/// Anything that maps an image to class logits.
pub trait Classifier: Sync {
    fn logits(&self, image: &FeatureMap) -> Result<Vec<f64>>;

    fn predict(&self, image: &FeatureMap) -> Result<usize> {
        Ok(crate::nn::layers::argmax(&self.logits(image)?))
    }
}

impl Classifier for SourceCnn {
    fn logits(&self, image: &FeatureMap) -> Result<Vec<f64>> {
        self.forward(image)
    }
}

impl Classifier for SphericalNetwork {
    fn logits(&self, image: &FeatureMap) -> Result<Vec<f64>> {
        self.forward(image)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaAccuracy {
    pub theta_deg: f64,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub bins: Vec<ThetaAccuracy>,
    /// Average of the per-angle accuracies.
    pub mean: f64,
}

/// Index of the bin whose angle matches `theta` (radians).
fn theta_bin(theta: f64, thetas_deg: &[f64]) -> Result<usize> {
    let deg = theta.to_degrees();
    thetas_deg
        .iter()
        .position(|t| (t - deg).abs() < 1e-3)
        .ok_or_else(|| {
            Error::Precondition(format!("sample at θ={deg:.4}° matches no evaluation angle"))
        })
}

pub fn eval_accuracy(
    net: &impl Classifier,
    samples: &[SphericalSample],
    thetas_deg: &[f64],
) -> Result<AccuracyReport> {
    if samples.is_empty() {
        return Err(Error::Empty("no test samples".into()));
    }
    let bins: Vec<usize> = samples
        .iter()
        .map(|s| theta_bin(s.theta_center, thetas_deg))
        .collect::<Result<_>>()?;
    let hits: Vec<bool> = samples
        .par_iter()
        .map(|s| Ok(net.predict(&s.image)? == s.label as usize))
        .collect::<Result<_>>()?;
    let mut correct = vec![0usize; thetas_deg.len()];
    let mut total = vec![0usize; thetas_deg.len()];
    for (&b, &h) in bins.iter().zip(&hits) {
        total[b] += 1;
        correct[b] += h as usize;
    }
    let bins: Vec<ThetaAccuracy> = thetas_deg
        .iter()
        .enumerate()
        .filter(|&(i, _)| total[i] > 0)
        .map(|(i, &t)| ThetaAccuracy {
            theta_deg: t,
            correct: correct[i],
            total: total[i],
            accuracy: correct[i] as f64 / total[i] as f64,
        })
        .collect();
    let mean = bins.iter().map(|b| b.accuracy).sum::<f64>() / bins.len() as f64;
    Ok(AccuracyReport { bins, mean })
}

/// Root-mean-square error of layer `l`'s post-ReLU conv response against the
/// cached held-out targets. With `ground_truth_input` the layer is fed the
/// cached tangent-plane input; otherwise it consumes the network's own
/// propagated features.
pub fn eval_rmse(
    net: &SphericalNetwork,
    cache: &TargetCache,
    l: usize,
    ground_truth_input: bool,
) -> Result<f64> {
    let n = cache.len(TargetSet::Heldout);
    if n == 0 {
        return Err(Error::Empty("target cache has no held-out images".into()));
    }
    let positions = cache.positions(l);
    let kernels = &net.cache_kernels()?[l - 1];
    let table = net.table(l)?;
    let bias = &net.source().convs[l - 1].bias;
    let parts: Vec<(f64, usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let entry = cache.load(l, TargetSet::Heldout, i)?;
            let input = if ground_truth_input || l == 1 {
                entry.input
            } else {
                let image = cache.load(1, TargetSet::Heldout, i)?.input;
                net.forward_to_layer(&image, l - 1)?
            };
            layer_sse(&input, table, kernels, bias, &positions, &entry.targets)
        })
        .collect::<Result<_>>()?;
    let (sse, count) = parts
        .iter()
        .fold((0.0, 0), |(s, c), &(a, b)| (s + a, c + b));
    Ok((sse / count as f64).sqrt())
}

/// Accuracy of transformer layers trained against one source network when
/// applied to another network's kernels and head.
pub fn eval_transfer(
    ktn: &[KtnLayer],
    source: &SourceCnn,
    samples: &[SphericalSample],
    thetas_deg: &[f64],
) -> Result<AccuracyReport> {
    let grid = ktn
        .first()
        .ok_or_else(|| Error::Empty("no transformer layers".into()))?
        .table
        .grid;
    let net = SphericalNetwork::with_ktn(source.clone(), grid, ktn.to_vec())?;
    eval_accuracy(&net, samples, thetas_deg)
}

/// Median per-image wall-clock in milliseconds after one warm-up pass.
pub fn time_per_image(net: &impl Classifier, images: &[&FeatureMap]) -> Result<f64> {
    let first = images
        .first()
        .ok_or_else(|| Error::Empty("no images to time".into()))?;
    net.logits(first)?;
    let mut ms: Vec<f64> = images
        .iter()
        .map(|img| {
            let t = Instant::now();
            net.logits(img)?;
            Ok(t.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<Result<_>>()?;
    ms.sort_by(f64::total_cmp);
    Ok(ms[ms.len() / 2])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub accuracy: AccuracyReport,
    pub rmse_conv3: Option<f64>,
    /// RMSE of each layer fed ground-truth inputs.
    pub rmse_ground_truth: Option<Vec<f64>>,
    /// RMSE of each layer fed the network's own features.
    pub rmse_propagated: Option<Vec<f64>>,
    pub params_total: usize,
    pub params_overhead: usize,
    pub ms_per_image: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    /// KTN trained against A, applied to A.
    pub ktn_a_on_a: f64,
    /// KTN trained against A, applied to B's kernels and head.
    pub ktn_a_on_b: f64,
    /// KTN trained against B, applied to B.
    pub ktn_b_on_b: f64,
}

impl TransferReport {
    pub fn gap(&self) -> f64 {
        (self.ktn_a_on_b - self.ktn_b_on_b).abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub per_layer: Vec<ParamCount>,
    pub total: ParamCount,
    /// Every learned parameter of the source network, head included.
    pub source_params: usize,
}

impl SizeReport {
    pub fn from_network(net: &SphericalNetwork) -> Self {
        let per_layer = net.parameter_counts();
        let total = per_layer
            .iter()
            .copied()
            .fold(ParamCount::default(), |a, b| a + b);
        SizeReport {
            per_layer,
            total,
            source_params: net.source().param_count(),
        }
    }

    pub fn overhead_vs_untied(&self) -> f64 {
        self.total.overhead_ratio_vs_untied()
    }

    pub fn overhead_vs_source(&self) -> f64 {
        self.total.overhead() as f64 / self.source_params as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: String,
    pub methods: Vec<MethodReport>,
    pub transfer: Option<TransferReport>,
    pub size: Option<SizeReport>,
    /// Free-form description of the run (data sizes, epochs...).
    #[serde(default)]
    pub notes: std::collections::BTreeMap<String, serde_json::Value>,
}

impl EvalReport {
    pub fn method(&self, m: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == m)
    }

    /// Insert or replace the entry for `r.method`.
    pub fn upsert(&mut self, r: MethodReport) {
        match self.methods.iter_mut().find(|x| x.method == r.method) {
            Some(x) => *x = r,
            None => self.methods.push(r),
        }
        self.methods
            .sort_by_key(|m| Method::ALL.iter().position(|x| *x == m.method));
    }

    /// One row per angle plus a mean row (empty `theta_deg`) per method.
    pub fn rows(&self) -> Vec<ReportRow> {
        let mut out = Vec::new();
        for m in &self.methods {
            let row = |theta_deg, accuracy| ReportRow {
                method: m.method,
                theta_deg,
                accuracy,
                rmse_conv3: m.rmse_conv3,
                params_total: m.params_total,
                params_overhead: m.params_overhead,
                ms_per_image: m.ms_per_image,
            };
            out.extend(
                m.accuracy
                    .bins
                    .iter()
                    .map(|b| row(Some(b.theta_deg), b.accuracy)),
            );
            out.push(row(None, m.accuracy.mean));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub theta_deg: Option<f64>,
    pub accuracy: f64,
    pub rmse_conv3: Option<f64>,
    pub params_total: usize,
    pub params_overhead: usize,
    pub ms_per_image: f64,
}

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";

/// Write `report.csv` and `report.json` into `dir`.
pub fn emit_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(REPORT_CSV);
    let mut w = csv::Writer::from_path(&path)?;
    for r in report.rows() {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(dir.join(REPORT_JSON), report)
}

pub fn read_report_csv(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

pub fn read_report(dir: impl AsRef<Path>) -> Result<EvalReport> {
    read_json(dir.as_ref().join(REPORT_JSON))
}

/// Fingerprint of any configuration value, for report provenance.
pub fn config_fingerprint<T: Serialize>(config: &T) -> String {
    fingerprint(config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn gate(name: &str, passed: bool, detail: String) -> GateResult {
    GateResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Accuracy thresholds of the end-to-end comparison.
pub fn accuracy_gate(r: &EvalReport) -> GateResult {
    let acc = |m| r.method(m).map(|x| x.accuracy.mean);
    match (acc(Method::Ktn), acc(Method::Equirect), acc(Method::Projected)) {
        (Some(k), Some(e), Some(p)) => gate(
            "accuracy",
            k >= 0.93 && (0.90..=0.98).contains(&e) && p <= 0.30 && k > p + 0.50,
            format!("ktn {k:.4} (>= 0.93), equirect {e:.4} (in [0.90, 0.98]), projected {p:.4} (<= 0.30), ktn - projected {:.4} (> 0.50)", k - p),
        ),
        _ => gate("accuracy", false, "report lacks ktn, equirect or projected accuracy".into()),
    }
}

pub fn transfer_gate(r: &EvalReport) -> GateResult {
    match &r.transfer {
        Some(t) => gate(
            "transfer",
            t.gap() <= 0.02,
            format!(
                "|{:.4} - {:.4}| = {:.4} (<= 0.02)",
                t.ktn_a_on_b,
                t.ktn_b_on_b,
                t.gap()
            ),
        ),
        None => gate("transfer", false, "report has no transfer section".into()),
    }
}

pub fn rmse_gate(r: &EvalReport) -> GateResult {
    let rm = |m| r.method(m).and_then(|x| x.rmse_conv3);
    match (rm(Method::Ktn), rm(Method::Projected)) {
        (Some(k), Some(p)) => gate(
            "rmse",
            k < 0.7 * p,
            format!("ktn {k:.5} vs 0.7 × projected {:.5}", 0.7 * p),
        ),
        _ => gate("rmse", false, "report lacks conv3 RMSE".into()),
    }
}

pub fn depth_gate(r: &EvalReport) -> GateResult {
    let gt = |m| r.method(m).and_then(|x| x.rmse_ground_truth.clone());
    match (gt(Method::Projected), gt(Method::Ktn)) {
        (Some(p), Some(k)) if p.len() == LAYERS && k.len() == LAYERS => {
            let monotone = p.windows(2).all(|w| w[0] <= w[1] * 1.05);
            let gap1 = p[0] - k[0];
            let gap3 = p[2] - k[2];
            gate(
                "depth",
                monotone && gap3 > gap1,
                format!(
                    "projected {:.5} / {:.5} / {:.5} (non-decreasing ±5%), gap conv1 {gap1:.5} vs conv3 {gap3:.5}",
                    p[0], p[1], p[2]
                ),
            )
        }
        _ => gate("depth", false, "report lacks per-layer RMSE".into()),
    }
}

pub fn size_gate(r: &EvalReport) -> GateResult {
    match &r.size {
        Some(s) => gate(
            "size",
            s.overhead_vs_untied() < 0.10,
            format!(
                "overhead {} / untied {} = {:.4} (< 0.10); vs source network {:.2}",
                s.total.overhead(),
                s.total.untied_kernels,
                s.overhead_vs_untied(),
                s.overhead_vs_source()
            ),
        ),
        None => gate("size", false, "report has no size section".into()),
    }
}

pub fn evaluate_gates(r: &EvalReport) -> Vec<GateResult> {
    vec![
        accuracy_gate(r),
        transfer_gate(r),
        rmse_gate(r),
        depth_gate(r),
        size_gate(r),
    ]
}
