//! Fusion of expertised tokens into the modal low-rank matrix and the
//! gated prompt that injects it into the frozen RGB token stream.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Init, ParamStore};
use crate::scalar::Scalar;

/// `M = (routed W4 + shared) W5`, entirely in the rank-K space.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub w4: Linear,
    pub w5: Linear,
}

impl FusionBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, rank: usize, rng: &mut R) -> Self {
        Self {
            w4: Linear::new(store, &format!("{name}.w4"), rank, rank, false, Init::Xavier, rng),
            w5: Linear::new(store, &format!("{name}.w5"), rank, rank, false, Init::Xavier, rng),
        }
    }

    /// Either branch may be absent (ablations); at least one must be given.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, routed: Option<Var>, shared: Option<Var>) -> Var {
        let inner = match (routed, shared) {
            (Some(r), Some(s)) => {
                let r = self.w4.forward(tape, r);
                tape.add(r, s)
            }
            (Some(r), None) => self.w4.forward(tape, r),
            (None, Some(s)) => s,
            (None, None) => panic!("fusion needs at least one expert branch"),
        };
        self.w5.forward(tape, inner)
    }
}

/// `Out = ((Xi W5 * sigmoid(Xm W6)) W7 + I) W8` with `I = rgb_down(rgb)`,
/// `Xi = Norm(I)`, `Xm = Norm(M)`. W8 starts at zero so an untrained prompt
/// leaves the RGB stream untouched.
#[derive(Clone, Debug)]
pub struct PromptBlock {
    pub rgb_down: Linear,
    pub norm_rgb: LayerNorm,
    pub norm_modal: LayerNorm,
    pub w5: Linear,
    pub w6: Linear,
    pub w7: Linear,
    pub w8: Linear,
}

impl PromptBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        rgb_dim: usize,
        rank: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            rgb_down: Linear::new(store, &format!("{name}.rgb_down"), rgb_dim, rank, true, Init::Xavier, rng),
            norm_rgb: LayerNorm::new(store, &format!("{name}.norm_rgb"), rank, rng),
            norm_modal: LayerNorm::new(store, &format!("{name}.norm_modal"), rank, rng),
            w5: Linear::new(store, &format!("{name}.w5"), rank, rank, false, Init::Xavier, rng),
            w6: Linear::new(store, &format!("{name}.w6"), rank, rank, false, Init::Xavier, rng),
            w7: Linear::new(store, &format!("{name}.w7"), rank, rank, false, Init::Xavier, rng),
            w8: Linear::new(store, &format!("{name}.w8"), rank, rgb_dim, false, Init::Zeros, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, rgb: Var, modal: Var) -> Var {
        let ik = self.rgb_down.forward(tape, rgb);
        let xi = self.norm_rgb.forward(tape, ik);
        let xm = self.norm_modal.forward(tape, modal);
        let a = self.w5.forward(tape, xi);
        let g = self.w6.forward(tape, xm);
        let g = tape.sigmoid(g);
        let gated = tape.mul(a, g);
        let b = self.w7.forward(tape, gated);
        let sum = tape.add(b, ik);
        self.w8.forward(tape, sum)
    }
}

/// Inference helper for [`FusionBlock`] on plain matrices.
pub fn fuse<T: Scalar>(
    store: &ParamStore<T>,
    routed_out: &Array2<T>,
    shared_out: &Array2<T>,
    block: &FusionBlock,
) -> Result<Array2<T>> {
    if routed_out.dim() != shared_out.dim() {
        return Err(shape_err!(
            "routed output {:?} and shared output {:?} are not token-aligned",
            routed_out.dim(),
            shared_out.dim()
        ));
    }
    let mut tape = Tape::inference(store);
    let r = tape.constant(routed_out.clone());
    let s = tape.constant(shared_out.clone());
    let m = block.forward(&mut tape, Some(r), Some(s));
    Ok(tape.value(m).clone())
}

/// Inference helper for [`PromptBlock`] on plain matrices.
pub fn prompt<T: Scalar>(
    store: &ParamStore<T>,
    rgb_tokens: &Array2<T>,
    modal: &Array2<T>,
    block: &PromptBlock,
) -> Result<Array2<T>> {
    if rgb_tokens.nrows() != modal.nrows() {
        return Err(shape_err!(
            "{} RGB tokens vs {} modal tokens",
            rgb_tokens.nrows(),
            modal.nrows()
        ));
    }
    let mut tape = Tape::inference(store);
    let r = tape.constant(rgb_tokens.clone());
    let m = tape.constant(modal.clone());
    let out = block.forward(&mut tape, r, m);
    Ok(tape.value(out).clone())
}
