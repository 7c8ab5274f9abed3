//! Parameter bundles for the common layers.

use rand::Rng;

use super::{uniform_init, ParamId, ParamSet, Scalar, Tape, Tensor, Var};

/// Same-padded stride-1 convolution.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    pub fn build<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        ks: usize,
    ) -> Self {
        Self {
            w: params.add(format!("{name}.w"), uniform_init(rng, &[cout, cin, ks, ks], cin * ks * ks, 1.0)),
            b: params.add(format!("{name}.b"), Tensor::zeros(&[cout])),
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.conv2d(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn build<T: Scalar, R: Rng>(params: &mut ParamSet<T>, rng: &mut R, name: &str, nin: usize, nout: usize) -> Self {
        Self {
            w: params.add(format!("{name}.w"), uniform_init(rng, &[nout, nin], nin, 1.0)),
            b: params.add(format!("{name}.b"), Tensor::zeros(&[nout])),
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.linear(x, w, b)
    }
}

/// Group normalization with a learned per-channel affine.
#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn build<T: Scalar>(params: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: params.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: params.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups: group_count(channels),
        }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.group_norm(x, g, b, self.groups)
    }
}

/// Largest divisor of `channels` not above 8 that keeps at least 4 channels
/// per group. Single-channel groups collapse to a constant at 1x1 resolution.
pub fn group_count(channels: usize) -> usize {
    (1..=8.min(channels / 4))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}
