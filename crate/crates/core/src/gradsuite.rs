//! Finite-difference verification of every hand-written backward pass.
//!
//! Each check draws a random instance, contracts the operation's output with
//! a random upstream vector so the result is a scalar, and compares the
//! analytic gradient (with respect to parameters *and* inputs where the
//! operation has both) against central differences. Everything runs in
//! `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{batch_loss_and_grad, distill_loss, evaluate_layer_loss, TargetEntry};
use crate::geometry::GridSpec;
use crate::ktn::{ktn_backward, ktn_forward, KtnLayer, RowGroupTable};
use crate::nn::conv::{conv2d_backward, conv2d_forward};
use crate::nn::gradcheck::{check_gradient, GradCheck};
use crate::nn::layers::{
    global_max_pool, global_max_pool_backward, maxpool2x2, maxpool2x2_backward, relu,
    relu_backward, softmax_xent,
};
use crate::nn::{normal_init, ConvParams, Depthwise3x3, GridLayout, HPadding, Linear, Pointwise};
use crate::source_cnn::SourceCnn;
use crate::tensor::Tensor;
use crate::Result;

/// Relative-error bound every check must stay under.
pub const SUITE_TOL: f64 = 1e-4;

/// Coordinates probed per instance for operations with many parameters.
const MAX_COORDS: usize = 80;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub name: String,
    pub instances: usize,
    pub checked: usize,
    pub max_rel_err: f64,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.max_rel_err < SUITE_TOL
    }
}

type Check = fn(&mut ChaCha8Rng, u64) -> Result<GradCheck>;

/// Every check, by name.
pub const CHECKS: &[(&str, Check)] = &[
    ("conv2d/zero", conv_zero),
    ("conv2d/circular-dilated", conv_circular_dilated),
    ("depthwise3x3", depthwise),
    ("pointwise", pointwise),
    ("linear", linear),
    ("maxpool2x2", maxpool),
    ("relu", relu_check),
    ("global-max-pool", global_pool),
    ("softmax-xent", softmax),
    ("source-cnn/loss", source_cnn_loss),
    ("ktn/composite", ktn_composite),
    ("distill/loss", distill),
    ("distill/batch", distill_batch),
];

/// Run every check on `instances` random draws each.
pub fn run_gradient_suite(instances: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let mut entry = SuiteEntry {
                name: name.to_string(),
                instances,
                checked: 0,
                max_rel_err: 0.0,
            };
            for n in 0..instances {
                let s = seed ^ ((i as u64) << 32) ^ n as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let r = check(&mut rng, s)?;
                entry.checked += r.checked;
                entry.max_rel_err = entry.max_rel_err.max(r.max_rel_err);
            }
            Ok(entry)
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Values bounded away from zero so ReLU kinks sit far from the probe.
fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Distinct values (a shuffled ramp plus jitter) so max-pooling has no ties.
fn tie_free(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let mut v: Vec<f64> = (0..n)
        .map(|i| i as f64 / n as f64 + rng.gen_range(0.0..0.1 / n as f64))
        .collect();
    v.shuffle(rng);
    v
}

fn conv_generic(
    rng: &mut ChaCha8Rng,
    seed: u64,
    k: usize,
    dilation: usize,
    pad: HPadding,
) -> Result<GradCheck> {
    let (h, w, cin, cout) = (7, 9, 3, 4);
    let kernel = Tensor::from_vec(&[k, k, cin, cout], uniform(rng, k * k * cin * cout))?;
    let bias = uniform(rng, cout);
    let input = Tensor::from_vec(&[h, w, cin], uniform(rng, h * w * cin))?;
    let p = ConvParams::new(kernel, bias, dilation, pad)?;
    let up = Tensor::from_vec(&[h, w, cout], uniform(rng, h * w * cout))?;
    let g = conv2d_backward(&input, &p, &up)?;
    let nk = p.kernel.len();
    let nb = p.bias.len();
    let x = [p.kernel.data(), &p.bias, input.data()].concat();
    let analytic = [g.kernel.data(), &g.bias, g.input.data()].concat();
    let f = |v: &[f64]| {
        let q = ConvParams::new(
            Tensor::from_vec(p.kernel.dims(), v[..nk].to_vec()).unwrap(),
            v[nk..nk + nb].to_vec(),
            dilation,
            pad,
        )
        .unwrap();
        let inp = Tensor::from_vec(input.dims(), v[nk + nb..].to_vec()).unwrap();
        dot(conv2d_forward(&inp, &q).unwrap().data(), up.data())
    };
    Ok(check_gradient(f, &x, &analytic, MAX_COORDS, seed))
}

fn conv_zero(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheck> {
    conv_generic(rng, seed, 3, 1, HPadding::Zero)
}

fn conv_circular_dilated(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheck> {
    conv_generic(rng, seed, 3, 2, HPadding::Circular)
}

fn depthwise(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheck> {
    let l = GridLayout {
        h: 4,
        w: 5,
        batch: 2,
        channels: 3,
    };
    let dw = Depthwise3x3 {
        weights: uniform(rng, 27),
        bias: uniform(rng, 3),
    };
    let x = uniform(rng, l.len());
    let up = uniform(rng, l.len());
    let (gw, gb, gx) = dw.backward(&x, l, &up)?;
    let all = [&dw.weights[..], &dw.bias, &x].concat();
    let f = |v: &[f64]| {
        let d = Depthwise3x3 {
            weights: v[..27].to_vec(),
            bias: v[27..30].to_vec(),
        };
        dot(&d.forward(&v[30..], l).unwrap(), &up)
    };
    Ok(check_gradient(
        f,
        &all,
        &[gw, gb, gx].concat(),
        MAX_COORDS,
        seed,
    ))
}

fn pointwise(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheck> {
    let (cin, cout, rows) = (4, 3, 6);
    let pw = Pointwise {
        weights: uniform(rng, cin * cout),
        bias: uniform(rng, cout),
        cin,
        cout,
    };
    let x = uniform(rng, rows * cin);
    let up = uniform(rng, rows * cout);
    let (gw, gb, gx) = pw.backward(&x, &up)?;
    let nw = cin * cout;
    let all = [&pw.weights[..], &pw.bias, &x].concat();
    let f = |v: &[f64]| {
        let p = Pointwise {
            weights: v[..nw].to_vec(),
            bias: v[nw..nw + cout].to_vec(),
            cin,
            cout,
        };
        dot(&p.forward(&v[nw + cout..]).unwrap(), &up)
    };
    Ok(check_gradient(
        f,
        &all,
        &[gw, gb, gx].concat(),
        MAX_COORDS,
        seed,
    ))
}

fn linear(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheck> {
    let (ni, no) = (7, 4);
    let lin = Linear {
        weights: uniform(rng, ni * no),
        bias: uniform(rng, no),
        inputs: ni,
        outputs: no,
    };
    let x = uniform(rng, ni);
    let up = uniform(rng, no);
    let (gw, gb, gx) = lin.backward(&x, &up);
    let nw = ni * no;
    let all = [&lin.weights[..], &lin.bias, &x].concat();
    let f = |v: &[f64]| {
        let l = Linear {
            weights: v[..nw].to_vec(),
            bias: v[nw..nw + no].to_vec(),
            inputs: ni,
            outputs: no,
        };
        dot(&l.forward(&v[nw + no..]).unwrap(), &up)
    };
    Ok(check_gradient(
        f,
        &all,
        &[gw, gb, gx].concat(),
        MAX_COORDS,
        seed,
    ))
}

fn maxpool(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheck> {
    let dims = [5, 6, 2];
    let x = Tensor::from_vec(&dims, tie_free(rng, 60))?;
    let (out, arg) = maxpool2x2(&x)?;
    let up = uniform(rng, out.len());
    let g = maxpool2x2_backward(&dims, &arg, &up);
    let f = |v: &[f64]| {
        let t = Tensor::from_vec(&dims, v.to_vec()).unwrap();
        dot(maxpool2x2(&t).unwrap().0.data(), &up)
    };
    Ok(check_gradient(f, x.data(), g.data(), MAX_COORDS, seed))
}

fn relu_check(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheck> {
    let x = off_zero(rng, 40);
    let up = uniform(rng, 40);
    let g = relu_backward(&x, &up);
    Ok(check_gradient(
        |v| dot(&relu(v), &up),
        &x,
        &g,
        MAX_COORDS,
        seed,
    ))
}

fn global_pool(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheck> {
    let dims = [3, 4, 5];
    let x = Tensor::from_vec(&dims, tie_free(rng, 60))?;
    let (out, arg) = global_max_pool(&x)?;
    let up = uniform(rng, out.len());
    let g = global_max_pool_backward(&dims, &arg, &up);
    let f = |v: &[f64]| {
        let t = Tensor::from_vec(&dims, v.to_vec()).unwrap();
        dot(&global_max_pool(&t).unwrap().0, &up)
    };
    Ok(check_gradient(f, x.data(), g.data(), MAX_COORDS, seed))
}

fn softmax(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheck> {
    let logits: Vec<f64> = uniform(rng, 10).iter().map(|v| 3.0 * v).collect();
    let label = rng.gen_range(0..10);
    let (_, g) = softmax_xent(&logits, label)?;
    Ok(check_gradient(
        |v| softmax_xent(v, label).unwrap().0,
        &logits,
        &g,
        MAX_COORDS,
        seed,
    ))
}

fn source_cnn_loss(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheck> {
    let pad = if rng.gen_bool(0.5) {
        HPadding::Zero
    } else {
        HPadding::Circular
    };
    let mut net = SourceCnn::random(seed, 0.1, pad);
    for c in &mut net.convs {
        normal_init(&mut c.bias, 0.05, rng);
    }
    let img = Tensor::from_vec(&[16, 16, 1], tie_free(rng, 256))?;
    let label = rng.gen_range(0..10);
    let (_, grads) = net.loss_and_grad(&img, label)?;
    let f = |v: &[f64]| {
        let mut m = net.clone();
        m.set_flat(v);
        m.loss_and_grad(&img, label).unwrap().0
    };
    Ok(check_gradient(
        f,
        &net.flat(),
        &grads.flat(),
        MAX_COORDS,
        seed,
    ))
}

/// A small transformer layer with its residual branch switched on. Fresh
/// layers sit on ReLU kinks by construction (all-zero projection rows near
/// the poles, zero biases behind dead channels), where central differences
/// are meaningless, so every parameter is moved to a generic point.
fn active_ktn_layer(
    rng: &mut ChaCha8Rng,
    seed: u64,
    height: usize,
    cin: usize,
) -> Result<KtnLayer> {
    let table = RowGroupTable::new(GridSpec::equirect(height)?, 3)?;
    let mut layer = KtnLayer::new(table, cin, seed, 0.3);
    for p in &mut layer.projections {
        p.data
            .iter_mut()
            .for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }
    for b in &mut layer.blocks {
        normal_init(&mut b.depthwise.weights, 0.3, rng);
        normal_init(&mut b.depthwise.bias, 0.3, rng);
        normal_init(&mut b.pointwise.bias, 0.3, rng);
    }
    Ok(layer)
}

fn ktn_composite(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheck> {
    let (cin, cout) = (3, 2);
    let layer = active_ktn_layer(rng, seed, 20, cin)?;
    let k = Tensor::from_vec(&[3, 3, cin, cout], uniform(rng, 9 * cin * cout))?;
    let g = rng.gen_range(0..layer.table.len());
    let taps = layer.table.groups[g].shape.taps();
    let up = uniform(rng, taps * cin * cout);
    let grads = ktn_backward(&layer, &k, g, &up)?;
    let f = |v: &[f64]| {
        let mut l2 = layer.clone();
        l2.set_flat(v);
        dot(ktn_forward(&l2, &k, g).unwrap().weights.data(), &up)
    };
    // every coordinate: sampling would mostly land in the projections
    Ok(check_gradient(
        f,
        &layer.flat(),
        &grads.flat(),
        usize::MAX,
        seed,
    ))
}

fn distill(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheck> {
    let p = uniform(rng, 30);
    let t = uniform(rng, 30);
    let g = distill_loss(&p, &t)?.grad;
    Ok(check_gradient(
        |v| distill_loss(v, &t).unwrap().value,
        &p,
        &g,
        MAX_COORDS,
        seed,
    ))
}

fn distill_batch(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheck> {
    let (h, cin, cout) = (10, 2, 3);
    let layer = active_ktn_layer(rng, seed, h, cin)?;
    let conv = ConvParams::new(
        Tensor::from_vec(&[3, 3, cin, cout], uniform(rng, 9 * cin * cout))?,
        uniform(rng, cout),
        1,
        HPadding::Circular,
    )?;
    let positions: Vec<(usize, usize)> = (0..h)
        .step_by(2)
        .flat_map(|y| (0..2 * h).step_by(3).map(move |x| (y, x)))
        .collect();
    let entries: Vec<TargetEntry> = (0..3)
        .map(|_| {
            Ok(TargetEntry {
                input: Tensor::from_vec(&[h, 2 * h, cin], uniform(rng, 2 * h * h * cin))?,
                targets: Tensor::from_vec(
                    &[positions.len(), cout],
                    uniform(rng, positions.len() * cout),
                )?,
            })
        })
        .collect::<Result<_>>()?;
    let batch: Vec<&TargetEntry> = entries.iter().collect();
    let (_, grads) = batch_loss_and_grad(&layer, &conv, &batch, &positions)?;
    let f = |v: &[f64]| {
        let mut l2 = layer.clone();
        l2.set_flat(v);
        evaluate_layer_loss(&l2, &conv, &entries, &positions).unwrap()
    };
    Ok(check_gradient(
        f,
        &layer.flat(),
        &grads.flat(),
        usize::MAX,
        seed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_is_deterministic() {
        let a = run_gradient_suite(2, 11).unwrap();
        assert_eq!(a.len(), CHECKS.len());
        for e in &a {
            assert!(e.passes(), "{e:?}");
            assert!(e.checked > 0);
        }
        assert_eq!(run_gradient_suite(2, 11).unwrap(), a);
    }

    #[test]
    fn a_broken_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = off_zero(&mut rng, 10);
        let wrong: Vec<f64> = x.iter().map(|v| if *v > 0.0 { 0.5 } else { 0.0 }).collect();
        let r = check_gradient(|v| dot(&relu(v), &[1.0; 10]), &x, &wrong, 10, 0);
        assert!(!r.passes(SUITE_TOL));
    }
}
