//! Executable form of the argument that bilinear resampling does not commute
//! with a non-linear layer: interpolating the input and then convolving
//! differs from convolving and then interpolating the outputs.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoncommutativityCase {
    pub a: f64,
    pub b: f64,
    pub x1: f64,
    pub x2: f64,
    pub w1: f64,
    pub w2: f64,
    pub sigma: Activation,
}

impl NoncommutativityCase {
    pub fn validate(&self) -> Result<()> {
        if self.a < 0.0 || self.b < 0.0 || (self.a + self.b - 1.0).abs() > 1e-12 {
            return Err(Error::Precondition(format!(
                "interpolation weights must be convex, got a={} b={}",
                self.a, self.b
            )));
        }
        Ok(())
    }
}

/// Returns `(interpolate-then-convolve, convolve-then-interpolate)`:
/// `w2·σ(w1(a·x1 + b·x2))` and `a·w2·σ(w1·x1) + b·w2·σ(w1·x2)`.
pub fn noncommutativity_demo(case: &NoncommutativityCase) -> Result<(f64, f64)> {
    case.validate()?;
    let NoncommutativityCase {
        a,
        b,
        x1,
        x2,
        w1,
        w2,
        sigma,
    } = *case;
    let interp_first = w2 * sigma.apply(w1 * (a * x1 + b * x2));
    let conv_first = a * w2 * sigma.apply(w1 * x1) + b * w2 * sigma.apply(w1 * x2);
    Ok((interp_first, conv_first))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_case() {
        let case = NoncommutativityCase {
            a: 0.5,
            b: 0.5,
            x1: 1.0,
            x2: -1.0,
            w1: 1.0,
            w2: 1.0,
            sigma: Activation::Relu,
        };
        assert_eq!(noncommutativity_demo(&case).unwrap(), (0.0, 0.5));
        let linear = NoncommutativityCase {
            sigma: Activation::Identity,
            ..case
        };
        let (p, q) = noncommutativity_demo(&linear).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_non_convex_weights() {
        let case = NoncommutativityCase {
            a: 0.7,
            b: 0.7,
            x1: 1.0,
            x2: 1.0,
            w1: 1.0,
            w2: 1.0,
            sigma: Activation::Relu,
        };
        assert!(noncommutativity_demo(&case).is_err());
    }
}
