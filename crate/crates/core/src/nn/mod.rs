//! A small dense neural-network engine with hand-written backward passes.

pub mod adam;
pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod noncommute;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvParams, HPadding, KernelGeom};
pub use layers::{Depthwise3x3, GridLayout, Linear, Pointwise};
pub use noncommute::{noncommutativity_demo, Activation, NoncommutativityCase};

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Standard deviation of the normal weight initialisation.
pub const INIT_STD: f64 = 0.01;

pub fn normal_init(values: &mut [f64], std: f64, rng: &mut impl Rng) {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    values.iter_mut().for_each(|v| *v = dist.sample(rng));
}
