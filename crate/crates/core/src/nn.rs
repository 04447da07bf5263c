//! Parameterised building blocks shared by the backbone and the modal branch.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Affine map `x W + b` applied row-wise; `W` is [in, out].
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.init(format!("{name}.weight"), in_dim, out_dim, init, rng);
        let bias = bias.then(|| store.init(format!("{name}.bias"), 1, out_dim, Init::Zeros, rng));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn param_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).len() + self.bias.map_or(0, |b| store.get(b).len())
    }
}

/// Per-token layer normalisation with learnable gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Self {
        let gain = store.init(format!("{name}.gain"), 1, dim, Init::Ones, rng);
        let shift = store.init(format!("{name}.shift"), 1, dim, Init::Zeros, rng);
        Self {
            gain,
            shift,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let n = tape.layer_norm(x, T::of(self.eps));
        let g = tape.param(self.gain);
        let b = tape.param(self.shift);
        let y = tape.mul_row(n, g);
        tape.add_row(y, b)
    }
}
