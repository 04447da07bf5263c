//! Noisy top-k gating over experts and the sparse weighted combination of
//! their outputs.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Tape, Var};
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::Linear;
use crate::params::{Init, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub experts: usize,
    pub top_k: usize,
    pub gate_noise: f64,
}

impl GateConfig {
    pub fn new(experts: usize, top_k: usize, gate_noise: f64) -> Result<Self> {
        let cfg = Self {
            experts,
            top_k,
            gate_noise,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 {
            return Err(config_err!("expert count must be positive"));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(config_err!(
                "top_k = {} must lie in [1, {}]",
                self.top_k,
                self.experts
            ));
        }
        if !(self.gate_noise >= 0.0) {
            return Err(config_err!("gate_noise must be nonnegative, got {}", self.gate_noise));
        }
        Ok(())
    }

    /// Standard deviation of the gate noise: gate_noise / |experts|.
    pub fn sigma(&self) -> f64 {
        self.gate_noise / self.experts as f64
    }
}

/// Per-token routing outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterDecision<T> {
    pub probs: Array2<T>,
    pub noisy_logits: Array2<T>,
    pub topk: Vec<Vec<usize>>,
    pub k: usize,
}

impl<T: Scalar> RouterDecision<T> {
    fn from_logits(noisy_logits: Array2<T>, k: usize) -> Self {
        let probs = softmax_rows(&noisy_logits);
        let topk = probs
            .rows()
            .into_iter()
            .map(|row| top_k_indices(row.as_slice().expect("contiguous"), k))
            .collect();
        Self {
            probs,
            noisy_logits,
            topk,
            k,
        }
    }

    pub fn experts(&self) -> usize {
        self.probs.ncols()
    }

    /// Rows routed to `expert`, in token order.
    pub fn rows_for(&self, expert: usize) -> Vec<usize> {
        self.topk
            .iter()
            .enumerate()
            .filter(|(_, sel)| sel.contains(&expert))
            .map(|(n, _)| n)
            .collect()
    }

    /// Total (token, expert) dispatches.
    pub fn dispatch_count(&self) -> usize {
        self.topk.iter().map(Vec::len).sum()
    }
}

/// Indices of the `k` largest values, descending; ties go to the lower index.
pub fn top_k_indices<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn noise_matrix<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, sigma: f64, rng: &mut R) -> Array2<T> {
    if sigma == 0.0 {
        return Array2::zeros((rows, cols));
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    Array2::from_shape_simple_fn((rows, cols), || T::of(normal.sample(rng)))
}

/// Routes every token: noisy logits, row softmax, top-k selection.
pub fn gate<T: Scalar, R: Rng + ?Sized>(
    tokens: &Array2<T>,
    gate_weights: &Array2<T>,
    cfg: &GateConfig,
    mode: GateMode,
    rng: &mut R,
) -> Result<RouterDecision<T>> {
    cfg.validate()?;
    if tokens.ncols() != gate_weights.nrows() {
        return Err(shape_err!(
            "token dim {} does not match gate input dim {}",
            tokens.ncols(),
            gate_weights.nrows()
        ));
    }
    if gate_weights.ncols() != cfg.experts {
        return Err(config_err!(
            "gate emits {} logits but config has {} experts",
            gate_weights.ncols(),
            cfg.experts
        ));
    }
    let mut logits = tokens.dot(gate_weights);
    if mode == GateMode::Train {
        logits += &noise_matrix(logits.nrows(), logits.ncols(), cfg.sigma(), rng);
    }
    Ok(RouterDecision::from_logits(logits, cfg.top_k))
}

/// `out[n] = sum over i in topk[n] of probs[n, i] * expert_outputs[i][n]`.
///
/// `expert_outputs[i]` may be `None` for experts that received no tokens.
pub fn combine<T: Scalar>(expert_outputs: &[Option<Array2<T>>], decision: &RouterDecision<T>) -> Result<Array2<T>> {
    if expert_outputs.len() != decision.experts() {
        return Err(Error::Consistency(format!(
            "{} expert outputs for {} experts",
            expert_outputs.len(),
            decision.experts()
        )));
    }
    let n = decision.topk.len();
    let width = expert_outputs
        .iter()
        .flatten()
        .map(|o| o.ncols())
        .next()
        .unwrap_or(0);
    let mut out = Array2::zeros((n, width));
    for (row, sel) in decision.topk.iter().enumerate() {
        for &i in sel {
            let eo = expert_outputs[i].as_ref().ok_or_else(|| {
                Error::Consistency(format!("expert {i} selected for token {row} but not computed"))
            })?;
            if eo.nrows() != n || eo.ncols() != width {
                return Err(Error::Consistency(format!(
                    "expert {i} output has shape {:?}, expected ({n}, {width})",
                    eo.dim()
                )));
            }
            let p = decision.probs[[row, i]];
            let mut dst = out.row_mut(row);
            dst.scaled_add(p, &eo.row(row));
        }
    }
    Ok(out)
}

/// Learnable linear gate D -> E, zero-initialised so every expert starts
/// equally likely.
#[derive(Clone, Debug)]
pub struct Router {
    pub proj: Linear,
    pub cfg: GateConfig,
}

impl Router {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        cfg: GateConfig,
        rng: &mut R,
    ) -> Self {
        let proj = Linear::new(store, name, dim, cfg.experts, false, Init::Zeros, rng);
        Self { proj, cfg }
    }

    /// Taped gating: returns the probability node (differentiable) and the
    /// discrete decision.
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        tokens: Var,
        mode: GateMode,
        rng: &mut R,
    ) -> (Var, RouterDecision<T>) {
        let mut logits = self.proj.forward(tape, tokens);
        if mode == GateMode::Train && self.cfg.sigma() > 0.0 {
            let (r, c) = tape.value(logits).dim();
            let noise = tape.constant(noise_matrix(r, c, self.cfg.sigma(), rng));
            logits = tape.add(logits, noise);
        }
        let probs = tape.softmax_rows(logits);
        let decision = RouterDecision::from_logits(tape.value(logits).clone(), self.cfg.top_k);
        debug_assert!(decision
            .probs
            .iter()
            .zip(tape.value(probs).iter())
            .all(|(a, b)| a == b || (a.is_nan() && b.is_nan())));
        (probs, decision)
    }
}

/// Taped sparse dispatch: `expert_fn(tape, expert, rows)` must return the
/// expert's outputs for the gathered `rows`; results are weighted by the gate
/// probabilities and scattered back into token order.
pub fn dispatch_combine<T, F>(
    tape: &mut Tape<'_, T>,
    probs: Var,
    decision: &RouterDecision<T>,
    mut expert_fn: F,
) -> Option<Var>
where
    T: Scalar,
    F: FnMut(&mut Tape<'_, T>, usize, &[usize]) -> Var,
{
    let n = decision.topk.len();
    let mut acc: Option<Var> = None;
    for expert in 0..decision.experts() {
        let rows = decision.rows_for(expert);
        if rows.is_empty() {
            continue;
        }
        let out = expert_fn(tape, expert, &rows);
        let w = tape.pick(probs, rows.iter().map(|&r| (r, expert)).collect());
        let weighted = tape.mul_col(out, w);
        let placed = tape.scatter_rows(weighted, rows, n);
        acc = Some(match acc {
            Some(a) => tape.add(a, placed),
            None => placed,
        });
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_logits_give_uniform_probs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = GateConfig::new(3, 1, 0.0).unwrap();
        let eye = Array2::<f64>::eye(3);
        let d = gate(&array![[1.0, 1.0, 1.0]], &eye, &cfg, GateMode::Eval, &mut rng).unwrap();
        for &p in d.probs.iter() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(d.topk[0], vec![0]);
    }

    #[test]
    fn top_two_of_ordered_row() {
        assert_eq!(top_k_indices(&[0.5, 0.3, 0.2], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[0.2, 0.4, 0.4], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.25f64; 4], 3), vec![0, 1, 2]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = GateConfig::new(3, 2, 0.0).unwrap();
        let eye = Array2::<f64>::eye(3);
        let d = gate(&array![[2.0, 1.0, 0.0], [12.0, 11.0, 10.0]], &eye, &cfg, GateMode::Eval, &mut rng).unwrap();
        for j in 0..3 {
            assert!((d.probs[[0, j]] - d.probs[[1, j]]).abs() < 1e-15);
        }
    }

    #[test]
    fn k_above_expert_count_is_rejected() {
        assert!(matches!(GateConfig::new(3, 4, 1.0), Err(Error::Config(_))));
    }

    fn decision(probs: Array2<f64>, k: usize) -> RouterDecision<f64> {
        RouterDecision::from_logits(probs.mapv(f64::ln), k)
    }

    #[test]
    fn combine_weighted_sum_examples() {
        let d = decision(array![[0.7, 0.3]], 2);
        let out = combine(&[Some(array![[1.0, 1.0]]), Some(array![[3.0, 3.0]])], &d).unwrap();
        assert!((out[[0, 0]] - 1.6).abs() < 1e-12 && (out[[0, 1]] - 1.6).abs() < 1e-12);

        let d = decision(array![[0.5, 0.5]], 2);
        let out = combine(&[Some(array![[2.0, -1.0]]), Some(array![[-2.0, 1.0]])], &d).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-15));

        let d = decision(array![[1.0, 1e-300]], 1);
        let out = combine(&[Some(array![[4.0, 5.0]]), None], &d).unwrap();
        assert_eq!(out, array![[4.0, 5.0]]);
    }

    #[test]
    fn combine_reports_missing_selected_output() {
        let d = decision(array![[0.6, 0.4]], 2);
        assert!(matches!(
            combine(&[Some(array![[1.0]]), None], &d),
            Err(Error::Consistency(_))
        ));
    }
}
