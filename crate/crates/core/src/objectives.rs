//! Training objectives: expert-assignment BCE, importance and load balance
//! penalties, their combination, and the tracking loss.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::expert_bank::ExpertAssignment;
use crate::geometry::BoxN;
use crate::modality::Modality;
use crate::moe_router::GateConfig;
use crate::scalar::Scalar;

/// Probability clamp used by the assignment BCE.
pub const BCE_EPS: f64 = 1e-7;
/// Fallback standard deviation when the configured gate noise is zero.
pub const SIGMA_FLOOR: f64 = 1e-3;

pub const FOCAL_ALPHA: i32 = 2;
pub const FOCAL_BETA: i32 = 4;
pub const L1_WEIGHT: f64 = 5.0;
pub const GIOU_WEIGHT: f64 = 2.0;
/// Heat-map Gaussian radius in grid cells.
pub const HEATMAP_SIGMA: f64 = 1.0;

/// Every loss term of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub track: f64,
    pub moe: f64,
    pub imp: f64,
    pub load: f64,
    pub balance: f64,
    pub generalist: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    /// Checks the additive identities and finiteness.
    pub fn check(&self) -> Result<()> {
        let vals = [
            self.track,
            self.moe,
            self.imp,
            self.load,
            self.balance,
            self.generalist,
            self.total,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite loss term in {self:?}")));
        }
        let tol = |a: f64| 1e-9 * (1.0 + a.abs());
        let balance = self.imp + self.load;
        let generalist = self.moe + self.lambda * self.balance;
        let total = self.track + self.generalist;
        if (self.balance - balance).abs() > tol(balance)
            || (self.generalist - generalist).abs() > tol(generalist)
            || (self.total - total).abs() > tol(total)
        {
            return Err(Error::Invariant(format!("loss breakdown identities broken: {self:?}")));
        }
        Ok(())
    }
}

/// Component inputs of [`generalist_loss`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub track: f64,
    pub moe: f64,
    pub imp: f64,
    pub load: f64,
}

pub fn generalist_loss(parts: LossParts, lambda: f64) -> LossBreakdown {
    let balance = parts.imp + parts.load;
    let generalist = parts.moe + lambda * balance;
    LossBreakdown {
        track: parts.track,
        moe: parts.moe,
        imp: parts.imp,
        load: parts.load,
        balance,
        generalist,
        total: parts.track + generalist,
        lambda,
    }
}

/// Multi-hot assignment targets, one row per sample.
pub fn assignment_targets<T: Scalar>(modalities: &[Modality], h: &ExpertAssignment, experts: usize) -> Result<Array2<T>> {
    let mut t = Array2::zeros((modalities.len(), experts));
    for (b, m) in modalities.iter().enumerate() {
        for (i, v) in h.multi_hot::<T>(*m, experts)?.into_iter().enumerate() {
            t[[b, i]] = v;
        }
    }
    Ok(t)
}

/// Taped expert-assignment loss on per-sample (or per-token) probabilities.
pub fn moe_loss_taped<T: Scalar>(
    tape: &mut Tape<'_, T>,
    probs: Var,
    modalities: &[Modality],
    h: &ExpertAssignment,
) -> Result<Var> {
    let (rows, experts) = tape.value(probs).dim();
    if rows != modalities.len() {
        return Err(shape_err!("{rows} probability rows for {} modality labels", modalities.len()));
    }
    let target = assignment_targets(modalities, h, experts)?;
    Ok(tape.bce(probs, target, T::of(BCE_EPS)))
}

pub fn moe_loss<T: Scalar>(sample_probs: &Array2<T>, modality_ids: &[Modality], h: &ExpertAssignment) -> Result<T> {
    if sample_probs.iter().any(|&p| p < T::zero() || p > T::one()) {
        return Err(Error::Data("probabilities must lie in [0, 1]".into()));
    }
    let mut tape = Tape::new();
    let p = tape.constant(sample_probs.clone());
    let l = moe_loss_taped(&mut tape, p, modality_ids, h)?;
    Ok(tape.scalar(l))
}

/// Taped importance loss: CV^2 of the column sums of `probs`.
pub fn importance_loss_taped<T: Scalar>(tape: &mut Tape<'_, T>, probs: Var) -> Result<Var> {
    if tape.value(probs).nrows() == 0 {
        return Err(Error::Data("importance loss of an empty batch".into()));
    }
    let imp = tape.col_sum(probs);
    Ok(tape.cv_squared(imp))
}

pub fn importance_loss<T: Scalar>(probs: &Array2<T>) -> Result<T> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let l = importance_loss_taped(&mut tape, p)?;
    Ok(tape.scalar(l))
}

fn load_sigma(cfg: &GateConfig) -> f64 {
    let sigma = cfg.sigma();
    if sigma > 0.0 {
        sigma
    } else {
        log::warn!("gate noise is zero; load loss uses sigma = {SIGMA_FLOOR}");
        SIGMA_FLOOR
    }
}

/// Taped load loss: CV^2 of column sums of `Phi(probs)`, `Phi` the
/// N(0, sigma^2) CDF with sigma = gate_noise / E.
pub fn load_loss_taped<T: Scalar>(tape: &mut Tape<'_, T>, probs: Var, cfg: &GateConfig) -> Result<Var> {
    if tape.value(probs).nrows() == 0 {
        return Err(Error::Data("load loss of an empty batch".into()));
    }
    let phi = tape.normal_cdf(probs, T::of(load_sigma(cfg)));
    let load = tape.col_sum(phi);
    Ok(tape.cv_squared(load))
}

pub fn load_loss<T: Scalar>(probs: &Array2<T>, cfg: &GateConfig) -> Result<T> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let l = load_loss_taped(&mut tape, p, cfg)?;
    Ok(tape.scalar(l))
}

/// Raw head outputs for a batch.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    /// [B, Ns] centre-score logits.
    pub scores: Var,
    /// [B * Ns, 4] logits of (offset x, offset y, width, height).
    pub boxes: Var,
}

/// Search-grid cell containing the normalised box centre.
pub fn center_cell(gt: &BoxN, grid: (usize, usize)) -> (usize, usize) {
    let r = ((gt.cy * grid.0 as f64).floor().max(0.0) as usize).min(grid.0 - 1);
    let c = ((gt.cx * grid.1 as f64).floor().max(0.0) as usize).min(grid.1 - 1);
    (r, c)
}

/// Gaussian heat-map target peaking at exactly 1 on the centre cell.
pub fn heatmap_target<T: Scalar>(gt: &BoxN, grid: (usize, usize)) -> Vec<T> {
    let (r0, c0) = center_cell(gt, grid);
    let mut out = Vec::with_capacity(grid.0 * grid.1);
    for r in 0..grid.0 {
        for c in 0..grid.1 {
            let d2 = (r as f64 - r0 as f64).powi(2) + (c as f64 - c0 as f64).powi(2);
            out.push(T::of((-d2 / (2.0 * HEATMAP_SIGMA * HEATMAP_SIGMA)).exp()));
        }
    }
    out
}

/// Focal heat-map loss plus L1 and generalised-IoU box regression at the
/// ground-truth centre cell. Samples with a zero-area box are skipped.
pub fn tracking_loss_taped<T: Scalar>(
    tape: &mut Tape<'_, T>,
    head: HeadVars,
    gt: &[BoxN],
    grid: (usize, usize),
) -> Result<Var> {
    let (batch, ns) = tape.value(head.scores).dim();
    if batch != gt.len() || ns != grid.0 * grid.1 {
        return Err(shape_err!(
            "score map {:?} does not match {} targets on a {:?} grid",
            (batch, ns),
            gt.len(),
            grid
        ));
    }
    let valid: Vec<usize> = (0..batch).filter(|&b| gt[b].w > 0.0 && gt[b].h > 0.0).collect();
    for b in (0..batch).filter(|b| !valid.contains(b)) {
        log::warn!("skipping sample {b}: degenerate ground-truth box {:?}", gt[b]);
    }
    if valid.is_empty() {
        return Ok(tape.constant(Array2::zeros((1, 1))));
    }
    let nv = valid.len();

    let scores = tape.gather_rows(head.scores, valid.clone());
    let mut target = Array2::zeros((nv, ns));
    for (r, &b) in valid.iter().enumerate() {
        for (c, v) in heatmap_target::<T>(&gt[b], grid).into_iter().enumerate() {
            target[[r, c]] = v;
        }
    }
    let focal = tape.focal_loss(scores, target, FOCAL_ALPHA, FOCAL_BETA, T::of(nv as f64));

    let cells: Vec<(usize, usize)> = valid.iter().map(|&b| center_cell(&gt[b], grid)).collect();
    let rows: Vec<usize> = valid
        .iter()
        .zip(&cells)
        .map(|(&b, &(r, c))| b * ns + r * grid.1 + c)
        .collect();
    let raw = tape.gather_rows(head.boxes, rows);
    let sig = tape.sigmoid(raw);
    let scale = tape.constant(Array2::from_shape_vec(
        (1, 4),
        vec![T::of(1.0 / grid.1 as f64), T::of(1.0 / grid.0 as f64), T::one(), T::one()],
    )
    .expect("1x4"));
    let scaled = tape.mul_row(sig, scale);
    let mut offs = Array2::zeros((nv, 4));
    for (r, &(cr, cc)) in cells.iter().enumerate() {
        offs[[r, 0]] = T::of(cc as f64 / grid.1 as f64);
        offs[[r, 1]] = T::of(cr as f64 / grid.0 as f64);
    }
    let offs = tape.constant(offs);
    let pred = tape.add(scaled, offs);
    let mut gt_m = Array2::zeros((nv, 4));
    for (r, &b) in valid.iter().enumerate() {
        let g = &gt[b];
        for (c, v) in [g.cx, g.cy, g.w, g.h].into_iter().enumerate() {
            gt_m[[r, c]] = T::of(v);
        }
    }
    let boxes = tape.box_loss(pred, gt_m, vec![true; nv], T::of(L1_WEIGHT), T::of(GIOU_WEIGHT));
    Ok(tape.add(focal, boxes))
}

/// Generalised IoU of normalised (cx, cy, w, h) boxes.
pub fn giou(a: &BoxN, b: &BoxN) -> f64 {
    crate::autodiff::giou_with_grad([a.cx, a.cy, a.w, a.h], [b.cx, b.cy, b.w, b.h]).0
}
