use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient; `weight_decay · w` is added to every gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Moments sized after `shapes` (the lengths of each parameter slice).
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        AdamState {
            config,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

/// One Adam update of every parameter slice in place.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(shape_err!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(shape_err!(
                "adam: slice lengths {} / {} / {}",
                p.len(),
                g.len(),
                m.len()
            ));
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for i in 0..p.len() {
            let gi = g[i] + weight_decay * p[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Step learning-rate schedule: `base` until `decay_epoch`, then `base·factor`.
pub fn step_lr(base: f64, epoch: usize, decay_epoch: usize, factor: f64) -> f64 {
    if epoch >= decay_epoch {
        base * factor
    } else {
        base
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut w = vec![0.3, -1.2];
        let mut st = AdamState::new(cfg, &[2]);
        adam_step(&mut [&mut w[..]], &[&[0.0, 0.0][..]], &mut st).unwrap();
        assert_eq!(w, vec![0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = [0.0];
        let mut st = AdamState::new(AdamConfig::default(), &[1]);
        adam_step(&mut [&mut w[..]], &[&[1.0][..]], &mut st).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = -lr / (1 + eps)
        assert!((w[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_enters_the_gradient() {
        let mut w = [2.0];
        let mut st = AdamState::new(AdamConfig::default(), &[1]);
        adam_step(&mut [&mut w[..]], &[&[0.0][..]], &mut st).unwrap();
        assert!(w[0] < 2.0);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut w = vec![0.1, 0.2, 0.3];
            let mut st = AdamState::new(AdamConfig::default(), &[3]);
            for k in 0..5 {
                let g = [k as f64 * 0.1, -0.3, 1e-4];
                adam_step(&mut [&mut w[..]], &[&g[..]], &mut st).unwrap();
            }
            w
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn schedule_decays_after_epoch() {
        assert_eq!(step_lr(1e-3, 19, 20, 0.1), 1e-3);
        assert!((step_lr(1e-3, 20, 20, 0.1) - 1e-4).abs() < 1e-18);
    }
}
