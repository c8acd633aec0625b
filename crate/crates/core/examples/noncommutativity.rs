//! Resampling and a pointwise non-linearity do not commute.

use ktn::nn::{noncommutativity_demo, Activation, NoncommutativityCase};

fn main() -> ktn::Result<()> {
    let case = NoncommutativityCase {
        a: 0.5,
        b: 0.5,
        x1: 1.0,
        x2: -1.0,
        w1: 1.0,
        w2: 1.0,
        sigma: Activation::Relu,
    };
    let (interp_then_relu, relu_then_interp) = noncommutativity_demo(&case)?;
    println!("relu:     interpolate-then-activate {interp_then_relu}, activate-then-interpolate {relu_then_interp}");
    let (p, q) = noncommutativity_demo(&NoncommutativityCase {
        sigma: Activation::Identity,
        ..case
    })?;
    println!("identity: {p} vs {q}");
    Ok(())
}
