//! Central finite-difference checks of every taped loss and block.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::expert_bank::{ExpertAssignment, LowRankExpert, SharedExpert};
use crate::geometry::BoxN;
use crate::model::MemeLayer;
use crate::modality::Modality;
use crate::moe_router::{GateConfig, GateMode};
use crate::objectives::{importance_loss_taped, load_loss_taped, moe_loss_taped, tracking_loss_taped, HeadVars};
use crate::params::ParamStore;
use crate::prompt_fusion::{FusionBlock, PromptBlock};
use crate::tokenizer::TokenLayout;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;

/// Instance sizes of the suite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSizes {
    pub dim: usize,
    pub rank: usize,
    pub experts: usize,
    pub tokens: usize,
}

impl Default for GradCheckSizes {
    fn default() -> Self {
        Self {
            dim: 16,
            rank: 4,
            experts: 4,
            tokens: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub tensors: usize,
    pub elements: usize,
    /// Largest per-tensor `|analytic - numeric| / max(|analytic|, |numeric|)` (2-norms).
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub pass: bool,
}

fn rel_err(a: &Array2<f64>, n: &Array2<f64>) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = n.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-10 {
        0.0
    } else {
        diff / scale
    }
}

fn eval<F>(store: &ParamStore<f64>, inputs: &[Array2<f64>], f: &F) -> f64
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
{
    let mut tape = Tape::inference(store);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.scalar(out)
}

/// Compares analytic gradients of the scalar `f` against central differences
/// for every input and every trainable parameter.
pub fn check<F>(name: &str, store: &ParamStore<f64>, inputs: &[Array2<f64>], f: F) -> GradCheckEntry
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
{
    let (grads, vars) = {
        let mut tape = Tape::with_params(store);
        let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
        let out = f(&mut tape, &vars);
        (tape.backward(out), vars)
    };
    let mut worst = (0.0, String::new());
    let mut tensors = 0;
    let mut elements = 0;
    let mut record = |label: String, a: &Array2<f64>, n: &Array2<f64>| {
        let e = rel_err(a, n);
        if e >= worst.0 {
            worst = (e, label);
        }
    };

    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| Array2::zeros(inputs[i].dim()));
        let mut numeric = Array2::zeros(inputs[i].dim());
        for idx in ndarray::indices(inputs[i].dim()) {
            let orig = xs[i][idx];
            xs[i][idx] = orig + STEP;
            let up = eval(store, &xs, &f);
            xs[i][idx] = orig - STEP;
            let down = eval(store, &xs, &f);
            xs[i][idx] = orig;
            numeric[idx] = (up - down) / (2.0 * STEP);
        }
        tensors += 1;
        elements += numeric.len();
        record(format!("input{i}"), &analytic, &numeric);
    }

    let mut s = store.clone();
    for id in store.trainable_ids() {
        let shape = store.get(id).dim();
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Array2::zeros(shape));
        let mut numeric = Array2::zeros(shape);
        for idx in ndarray::indices(shape) {
            let orig = s.get(id)[idx];
            s.get_mut(id)[idx] = orig + STEP;
            let up = eval(&s, inputs, &f);
            s.get_mut(id)[idx] = orig - STEP;
            let down = eval(&s, inputs, &f);
            s.get_mut(id)[idx] = orig;
            numeric[idx] = (up - down) / (2.0 * STEP);
        }
        tensors += 1;
        elements += numeric.len();
        record(store.name(id).to_string(), &analytic, &numeric);
    }
    GradCheckEntry {
        name: name.to_string(),
        tensors,
        elements,
        max_rel_err: worst.0,
        worst_tensor: worst.1,
        pass: worst.0 <= TOLERANCE,
    }
}

fn randn<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0) * scale)
}

/// Weighted sum `sum(out * w)` so every output entry carries its own weight.
fn project(tape: &mut Tape<'_, f64>, out: Var, w: &Array2<f64>) -> Var {
    let w = tape.constant(w.clone());
    let p = tape.mul(out, w);
    tape.sum_all(p)
}

/// Perturbs freshly initialised parameters so no gradient is trivially zero.
fn jitter<R: Rng>(store: &mut ParamStore<f64>, rng: &mut R) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
    }
}

/// The full suite on random instances drawn from `seed`.
pub fn run_suite(sizes: GradCheckSizes, seed: u64) -> Vec<GradCheckEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let GradCheckSizes {
        dim,
        rank,
        experts,
        tokens,
    } = sizes;
    let empty = ParamStore::<f64>::new();
    let mut out = Vec::new();

    let modalities = [Modality::Depth, Modality::Thermal, Modality::Event];
    let h = ExpertAssignment::contiguous(experts / 3);
    let logits = randn(&mut rng, modalities.len(), experts, 1.5);
    out.push(check("moe_assignment_bce", &empty, &[logits], |t, v| {
        let p = t.softmax_rows(v[0]);
        moe_loss_taped(t, p, &modalities, &h).expect("valid shapes")
    }));

    let logits = randn(&mut rng, tokens, experts, 1.5);
    out.push(check("importance_loss", &empty, &[logits.clone()], |t, v| {
        let p = t.softmax_rows(v[0]);
        importance_loss_taped(t, p).expect("non-empty")
    }));
    let gate = GateConfig::new(experts, 2, 1.0).expect("valid gate");
    out.push(check("load_loss", &empty, &[logits], |t, v| {
        let p = t.softmax_rows(v[0]);
        load_loss_taped(t, p, &gate).expect("non-empty")
    }));

    let grid = (2, 2);
    let batch = 2;
    let scores = randn(&mut rng, batch, grid.0 * grid.1, 1.0);
    let boxes = randn(&mut rng, batch * grid.0 * grid.1, 4, 1.0);
    let gt = vec![
        BoxN { cx: 0.3, cy: 0.6, w: 0.35, h: 0.4 },
        BoxN { cx: 0.7, cy: 0.2, w: 0.5, h: 0.3 },
    ];
    out.push(check("tracking_loss", &empty, &[scores, boxes], |t, v| {
        tracking_loss_taped(t, HeadVars { scores: v[0], boxes: v[1] }, &gt, grid).expect("valid shapes")
    }));

    let x = randn(&mut rng, tokens, dim, 1.0);
    let w_rank = randn(&mut rng, tokens, rank, 1.0);
    let w_dim = randn(&mut rng, tokens, dim, 1.0);

    let mut store = ParamStore::new();
    let expert = LowRankExpert::new(&mut store, "expert", dim, rank, &mut rng);
    jitter(&mut store, &mut rng);
    out.push(check("specialized_expert", &store, &[x.clone()], |t, v| {
        let y = expert.forward(t, v[0]);
        project(t, y, &w_rank)
    }));

    // one template row of two tokens plus a 2x2 search grid
    let layout = TokenLayout::new((1, 2), (2, 2));
    assert_eq!(layout.tokens_per_sample(), tokens);
    let mut store = ParamStore::new();
    let shared = SharedExpert::new(&mut store, "shared", dim, rank, &mut rng);
    jitter(&mut store, &mut rng);
    out.push(check("shared_expert", &store, &[x.clone()], |t, v| {
        let y = shared.forward(t, v[0], &layout);
        project(t, y, &w_rank)
    }));

    let mut store = ParamStore::new();
    let fusion = FusionBlock::new(&mut store, "fusion", rank, &mut rng);
    let routed = randn(&mut rng, tokens, rank, 1.0);
    let shared_out = randn(&mut rng, tokens, rank, 1.0);
    out.push(check("fusion", &store, &[routed, shared_out], |t, v| {
        let y = fusion.forward(t, Some(v[0]), Some(v[1]));
        project(t, y, &w_rank)
    }));

    let mut store = ParamStore::new();
    let prompt = PromptBlock::new(&mut store, "prompt", dim, rank, &mut rng);
    jitter(&mut store, &mut rng);
    let modal = randn(&mut rng, tokens, rank, 1.0);
    out.push(check("prompt", &store, &[x.clone(), modal], |t, v| {
        let y = prompt.forward(t, v[0], v[1]);
        project(t, y, &w_dim)
    }));

    let mut store = ParamStore::new();
    let layer = MemeLayer::new(&mut store, "layer", dim, rank, Some(gate), true, &mut rng);
    let rid = store.id("layer.router.weight").expect("router weight");
    *store.get_mut(rid) = randn(&mut rng, dim, experts, 0.5);
    jitter(&mut store, &mut rng);
    out.push(check("routed_layer", &store, &[x.clone(), x], |t, v| {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let (m, _) = layer.modal_matrix(t, v[0], &layout, GateMode::Eval, &mut r);
        let y = layer.prompt.forward(t, v[1], m);
        project(t, y, &w_dim)
    }));
    out
}

pub fn table(entries: &[GradCheckEntry]) -> String {
    let mut s = format!("{:<20} {:>8} {:>9} {:>12}  {:<28} result\n", "check", "tensors", "elements", "max rel err", "worst tensor");
    for e in entries {
        s.push_str(&format!(
            "{:<20} {:>8} {:>9} {:>12.3e}  {:<28} {}\n",
            e.name,
            e.tensors,
            e.elements,
            e.max_rel_err,
            e.worst_tensor,
            if e.pass { "pass" } else { "FAIL" }
        ));
    }
    s
}
