//! Specialised low-rank experts, the edge-guided shared expert and the
//! modality-to-expert assignment.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, shape_err, Result};
use crate::modality::Modality;
use crate::nn::{LayerNorm, Linear};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tokenizer::TokenLayout;

/// Discrete Laplacian, `[[0, 1, 0], [1, -4, 1], [0, 1, 0]]`.
pub fn init_laplacian<T: Scalar>() -> [[T; 3]; 3] {
    let (z, o, c) = (T::zero(), T::one(), T::of(-4.0));
    [[z, o, z], [o, c, o], [z, o, z]]
}

/// Low-rank projection expert: `up(down(x))` with `down: D -> K`,
/// `up: K -> K`.
#[derive(Clone, Debug)]
pub struct LowRankExpert {
    pub down: Linear,
    pub up: Linear,
}

impl LowRankExpert {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        rank: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            down: Linear::new(store, &format!("{name}.down"), dim, rank, true, Init::Xavier, rng),
            up: Linear::new(store, &format!("{name}.up"), rank, rank, true, Init::Xavier, rng),
        }
    }

    pub fn rank(&self) -> usize {
        self.up.out_dim
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Var {
        let h = self.down.forward(tape, x);
        self.up.forward(tape, h)
    }

    pub fn param_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        self.down.param_count(store) + self.up.param_count(store)
    }
}

/// Depthwise 3x3 token mixer over the patch grid, Laplacian-initialised.
#[derive(Clone, Debug)]
pub struct EdgeMixer {
    /// [9, channels]; row `3 * r + c` holds kernel tap (r, c).
    pub kernel: ParamId,
}

impl EdgeMixer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let lap = init_laplacian::<T>();
        let kernel = Array2::from_shape_fn((9, channels), |(tap, _)| lap[tap / 3][tap % 3]);
        Self {
            kernel: store.add(format!("{name}.kernel"), kernel),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, layout: &TokenLayout) -> Var {
        let k = tape.param(self.kernel);
        tape.depthwise_conv3x3(x, k, layout)
    }
}

/// Shared expert: `Out = (sigmoid(EdgeMixer(X W1)) * X W2) W3 + m` with
/// `m = down(tokens)` and `X = Norm(m)`.
#[derive(Clone, Debug)]
pub struct SharedExpert {
    pub down: Linear,
    pub norm: LayerNorm,
    pub w1: Linear,
    pub w2: Linear,
    pub w3: Linear,
    pub edge_mixer: EdgeMixer,
}

impl SharedExpert {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        rank: usize,
        rng: &mut R,
    ) -> Self {
        let mid = rank;
        Self {
            down: Linear::new(store, &format!("{name}.down"), dim, rank, true, Init::Xavier, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), rank, rng),
            w1: Linear::new(store, &format!("{name}.w1"), rank, mid, false, Init::Xavier, rng),
            w2: Linear::new(store, &format!("{name}.w2"), rank, mid, false, Init::Xavier, rng),
            w3: Linear::new(store, &format!("{name}.w3"), mid, rank, false, Init::Xavier, rng),
            edge_mixer: EdgeMixer::new(store, &format!("{name}.edge_mixer"), mid),
        }
    }

    pub fn rank(&self) -> usize {
        self.down.out_dim
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, tokens: Var, layout: &TokenLayout) -> Var {
        let m = self.down.forward(tape, tokens);
        let x = self.norm.forward(tape, m);
        let a = self.w1.forward(tape, x);
        let mixed = self.edge_mixer.forward(tape, a, layout);
        let gate = tape.sigmoid(mixed);
        let b = self.w2.forward(tape, x);
        let gated = tape.mul(gate, b);
        let out = self.w3.forward(tape, gated);
        tape.add(out, m)
    }
}

/// Fixed map from modality to its dedicated expert indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertAssignment {
    pub table: BTreeMap<Modality, Vec<usize>>,
}

impl ExpertAssignment {
    /// Consecutive blocks of `per_modality` experts in `Modality::ALL` order.
    pub fn contiguous(per_modality: usize) -> Self {
        let table = Modality::ALL
            .iter()
            .map(|m| {
                let start = m.index() * per_modality;
                (*m, (start..start + per_modality).collect())
            })
            .collect();
        Self { table }
    }

    pub fn experts_of(&self, m: Modality) -> Result<&[usize]> {
        self.table
            .get(&m)
            .map(Vec::as_slice)
            .ok_or_else(|| config_err!("modality {m} has no assigned experts"))
    }

    pub fn per_modality(&self) -> usize {
        self.table.values().next().map_or(0, Vec::len)
    }

    /// Checks pairwise disjointness, equal set sizes and index range.
    pub fn validate(&self, experts: usize) -> Result<()> {
        let per = self.per_modality();
        let mut seen = vec![None; experts];
        for (m, set) in &self.table {
            if set.len() != per || per == 0 {
                return Err(config_err!("modality {m} has {} experts, expected {per}", set.len()));
            }
            for &i in set {
                if i >= experts {
                    return Err(config_err!("expert index {i} out of range 0..{experts}"));
                }
                if let Some(other) = seen[i].replace(*m) {
                    return Err(config_err!("expert {i} assigned to both {other} and {m}"));
                }
            }
        }
        Ok(())
    }

    /// Multi-hot row of length `experts` for `m`.
    pub fn multi_hot<T: Scalar>(&self, m: Modality, experts: usize) -> Result<Vec<T>> {
        let mut row = vec![T::zero(); experts];
        for &i in self.experts_of(m)? {
            row[i] = T::one();
        }
        Ok(row)
    }
}

/// Inference helper: specialised expert applied to a plain token matrix.
pub fn specialized_forward<T: Scalar>(
    store: &ParamStore<T>,
    tokens: &Array2<T>,
    expert: &LowRankExpert,
) -> Result<Array2<T>> {
    if tokens.ncols() != expert.down.in_dim {
        return Err(shape_err!(
            "token dim {} does not match expert input {}",
            tokens.ncols(),
            expert.down.in_dim
        ));
    }
    let mut tape = Tape::inference(store);
    let x = tape.constant(tokens.clone());
    let y = expert.forward(&mut tape, x);
    Ok(tape.value(y).clone())
}

/// Inference helper: shared expert applied to one or more samples laid out
/// per `layout`.
pub fn shared_forward<T: Scalar>(
    store: &ParamStore<T>,
    tokens: &Array2<T>,
    layout: &TokenLayout,
    expert: &SharedExpert,
) -> Result<Array2<T>> {
    let per = layout.tokens_per_sample();
    if per == 0 || tokens.nrows() % per != 0 {
        return Err(shape_err!(
            "{} tokens do not fill whole samples of {per} tokens (template {:?}, search {:?})",
            tokens.nrows(),
            layout.template,
            layout.search
        ));
    }
    if tokens.ncols() != expert.down.in_dim {
        return Err(shape_err!(
            "token dim {} does not match expert input {}",
            tokens.ncols(),
            expert.down.in_dim
        ));
    }
    let mut tape = Tape::inference(store);
    let x = tape.constant(tokens.clone());
    let y = expert.forward(&mut tape, x, layout);
    Ok(tape.value(y).clone())
}
