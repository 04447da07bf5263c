//! Two-stage training: pretrain the RGB backbone on clean sequences, then
//! train only the modal branch on paired RGB-X data with the backbone frozen.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{BackboneConfig, BACKBONE_PREFIX};
use crate::checkpoint::Checkpoint;
use crate::error::{config_err, Error, Result};
use crate::eval_metrics::{pooled_metrics, run_tracker};
use crate::geometry::BoxN;
use crate::modality::Modality;
use crate::model::{ForwardOptions, ForwardOut, PairBatch, PairInput, Tracker};
use crate::objectives::{
    generalist_loss, importance_loss_taped, load_loss_taped, moe_loss_taped, tracking_loss_taped, LossBreakdown,
    LossParts,
};
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::synthetic_modalities::{clean_rgb_manifest, DataConfig, SeedRange, Sequence};
use crate::tokenizer::Role;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub lr_drop_epoch: usize,
    /// The learning rate is divided by this factor from `lr_drop_epoch` on.
    pub lr_drop_factor: f64,
    /// Random (template, search) pairs drawn per training sequence per epoch.
    pub pairs_per_sequence: usize,
    pub lambda: f64,
    /// Expert-assignment loss on every token instead of per-sample mean probabilities.
    pub moe_per_token: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 4e-4,
            epochs: 60,
            lr_drop_epoch: 48,
            lr_drop_factor: 10.0,
            pairs_per_sequence: 4,
            lambda: 0.01,
            moe_per_token: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.pairs_per_sequence == 0 {
            return Err(config_err!("batch_size, epochs and pairs_per_sequence must be positive"));
        }
        if self.lr_drop_epoch >= self.epochs {
            return Err(config_err!(
                "lr_drop_epoch {} must be below epochs {}",
                self.lr_drop_epoch,
                self.epochs
            ));
        }
        if !(self.lr > 0.0) || !(self.lr_drop_factor >= 1.0) || !(self.lambda >= 0.0) {
            return Err(config_err!("lr > 0, lr_drop_factor >= 1 and lambda >= 0 are required"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.lr_drop_epoch {
            self.lr
        } else {
            self.lr / self.lr_drop_factor
        }
    }
}

/// One (template, search) draw from a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairPick {
    pub sequence: usize,
    pub template_frame: usize,
    pub search_frame: usize,
}

/// Stacked pairs with their targets and (training-only) modality labels.
pub struct TrainBatch<T> {
    pub batch: PairBatch<T>,
    pub targets: Vec<BoxN>,
    pub modalities: Vec<Modality>,
}

pub fn build_batch<T: Scalar>(seqs: &[Sequence], picks: &[PairPick], template_px: usize, patch: usize) -> Result<TrainBatch<T>> {
    let frames: Vec<_> = picks
        .iter()
        .map(|p| {
            let s = &seqs[p.sequence];
            let (tr, tx) = s.template::<T>(p.template_frame, template_px);
            (tr, tx, s.rgb_frame::<T>(p.search_frame, Role::Search), s.x_frame::<T>(p.search_frame, Role::Search))
        })
        .collect();
    let pairs: Vec<PairInput<'_, T>> = frames
        .iter()
        .map(|(a, b, c, d)| PairInput {
            template_rgb: a,
            template_x: b,
            search_rgb: c,
            search_x: d,
        })
        .collect();
    Ok(TrainBatch {
        batch: PairBatch::from_pairs(&pairs, patch)?,
        targets: picks
            .iter()
            .map(|p| {
                let s = &seqs[p.sequence];
                s.boxes[p.search_frame].normalized(s.size as f64, s.size as f64)
            })
            .collect(),
        modalities: picks.iter().map(|p| seqs[p.sequence].modality).collect(),
    })
}

/// Epoch order: per-modality shuffled draws interleaved round-robin, so every
/// batch mixes the three modalities in equal shares.
pub fn balanced_epoch<R: Rng>(seqs: &[Sequence], pairs_per_sequence: usize, rng: &mut R) -> Vec<PairPick> {
    let mut lists: Vec<Vec<PairPick>> = Modality::ALL
        .iter()
        .map(|&m| {
            let mut v = Vec::new();
            for (i, s) in seqs.iter().enumerate().filter(|(_, s)| s.modality == m) {
                for _ in 0..pairs_per_sequence {
                    v.push(PairPick {
                        sequence: i,
                        template_frame: 0,
                        search_frame: rng.random_range(1..s.len()),
                    });
                }
            }
            v.shuffle(rng);
            v
        })
        .collect();
    let mut out = Vec::new();
    let longest = lists.iter().map(Vec::len).max().unwrap_or(0);
    for i in 0..longest {
        for l in lists.iter_mut() {
            if let Some(p) = l.get(i) {
                out.push(*p);
            }
        }
    }
    lists.clear();
    out
}

/// Taped total loss of a forward pass plus the scalar breakdown.
pub fn meme_losses<T: Scalar>(
    tape: &mut Tape<'_, T>,
    model: &Tracker<T>,
    out: &ForwardOut<T>,
    targets: &[BoxN],
    modalities: &[Modality],
    lambda: f64,
    moe_per_token: bool,
) -> Result<(Var, LossBreakdown)> {
    let track = tracking_loss_taped(tape, out.head, targets, model.backbone.search_grid())?;
    let zero = tape.constant(ndarray::Array2::zeros((1, 1)));
    let (mut moe, mut imp, mut load) = (zero, zero, zero);
    if let (Some(branch), false) = (model.modal.as_ref(), out.routing.is_empty()) {
        let gate = branch.cfg.gate()?;
        let n = model.layout().tokens_per_sample();
        let inv = T::of(1.0 / out.routing.len() as f64);
        let token_modalities: Vec<Modality> = modalities.iter().flat_map(|&m| std::iter::repeat_n(m, n)).collect();
        for r in &out.routing {
            let m = if moe_per_token {
                moe_loss_taped(tape, r.probs, &token_modalities, &branch.assignment)?
            } else {
                let sample_probs = tape.segment_mean(r.probs, n);
                moe_loss_taped(tape, sample_probs, modalities, &branch.assignment)?
            };
            let i = importance_loss_taped(tape, r.probs)?;
            let l = load_loss_taped(tape, r.probs, &gate)?;
            moe = tape.add(moe, m);
            imp = tape.add(imp, i);
            load = tape.add(load, l);
        }
        moe = tape.scale(moe, inv);
        imp = tape.scale(imp, inv);
        load = tape.scale(load, inv);
    }
    let balance = tape.add(imp, load);
    let weighted = tape.scale(balance, T::of(lambda));
    let generalist = tape.add(moe, weighted);
    let total = tape.add(track, generalist);
    let parts = LossParts {
        track: tape.scalar(track).as_f64(),
        moe: tape.scalar(moe).as_f64(),
        imp: tape.scalar(imp).as_f64(),
        load: tape.scalar(load).as_f64(),
    };
    Ok((total, generalist_loss(parts, lambda)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub batch_seed: u64,
    pub losses: LossBreakdown,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,epoch,lr,track,moe,imp,load,balance,generalist,total\n");
    for r in rows {
        let l = &r.losses;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step, r.epoch, r.lr, l.track, l.moe, l.imp, l.load, l.balance, l.generalist, l.total
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    /// Learning rate used in each epoch.
    pub epoch_lrs: Vec<f64>,
    /// Names of every parameter the optimiser updated.
    pub optimized: Vec<String>,
}

fn batch_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Trains the modal branch; the backbone must already be frozen.
/// With `checkpoint_dir`, `latest.json` is rewritten after every epoch.
pub fn train_meme<T: Scalar>(
    cfg: &TrainConfig,
    model: &mut Tracker<T>,
    train: &[Sequence],
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if model.modal.is_none() {
        return Err(config_err!("model has no modal branch to train"));
    }
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    model.freeze_backbone();
    let before = model.params.fingerprint(BACKBONE_PREFIX);
    let mut adam = Adam::default();
    let mut log = Vec::new();
    let mut epoch_lrs = Vec::with_capacity(cfg.epochs);
    let mut optimized = std::collections::BTreeSet::new();
    let (tpx, patch) = (model.backbone.cfg.template_px, model.patch());
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        epoch_lrs.push(lr);
        let mut order_rng = ChaCha8Rng::seed_from_u64(batch_seed(cfg.seed, usize::MAX - epoch));
        let picks = balanced_epoch(train, cfg.pairs_per_sequence, &mut order_rng);
        for chunk in picks.chunks(cfg.batch_size) {
            let seed = batch_seed(cfg.seed, step);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tb = build_batch::<T>(train, chunk, tpx, patch)?;
            let (losses, grads) = {
                let mut tape = Tape::with_params(&model.params);
                let out = model.forward(&mut tape, &tb.batch, ForwardOptions::train(), &mut rng);
                let (total, losses) = meme_losses(&mut tape, model, &out, &tb.targets, &tb.modalities, cfg.lambda, cfg.moe_per_token)?;
                if !losses.total.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss at step {step} (epoch {epoch}, batch seed {seed}): {losses:?}"
                    )));
                }
                (losses, tape.backward(total))
            };
            losses.check()?;
            for (id, _) in grads.params() {
                if model.params.is_trainable(id) {
                    optimized.insert(model.params.name(id).to_string());
                }
            }
            adam.step(&mut model.params, &grads, lr);
            log.push(LogRow {
                step,
                epoch,
                lr,
                batch_seed: seed,
                losses,
            });
            step += 1;
        }
        if let Some(dir) = checkpoint_dir {
            Checkpoint::from_tracker(model, epoch).save(&dir.join("latest.json"))?;
        }
        log::debug!("epoch {epoch} lr {lr} last total {:?}", log.last().map(|r: &LogRow| r.losses.total));
    }
    if model.params.fingerprint(BACKBONE_PREFIX) != before {
        return Err(Error::Invariant("backbone parameters changed during modal training".into()));
    }
    if let Some(name) = optimized.iter().find(|n| n.starts_with(BACKBONE_PREFIX)) {
        return Err(Error::Invariant(format!("optimizer touched backbone parameter {name}")));
    }
    Ok(TrainReport {
        log,
        epoch_lrs,
        optimized: optimized.into_iter().collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub train_sequences: usize,
    /// Frames per pretraining sequence; short sequences buy scene variety.
    pub sequence_length: usize,
    pub heldout_sequences: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of steps after which the learning rate drops tenfold.
    pub lr_drop_at: f64,
    /// Mean held-out IoU the backbone must exceed.
    pub min_iou: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            train_sequences: 1000,
            sequence_length: 8,
            heldout_sequences: 10,
            steps: 2500,
            batch_size: 32,
            lr: 2e-3,
            lr_drop_at: 0.75,
            min_iou: 0.5,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_sequences == 0
            || self.heldout_sequences == 0
            || self.steps == 0
            || self.batch_size == 0
            || self.sequence_length < 2
        {
            return Err(config_err!("pretraining sizes must be positive"));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.lr_drop_at) {
            return Err(config_err!("invalid pretraining learning-rate schedule"));
        }
        Ok(())
    }

    pub fn train_seeds(&self) -> SeedRange {
        SeedRange::new(1_000_000 + self.seed * 100_000, self.train_sequences as u64)
    }

    pub fn heldout_seeds(&self) -> SeedRange {
        SeedRange::new(1_050_000 + self.seed * 100_000, self.heldout_sequences as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub heldout_iou: f64,
    pub losses: Vec<f64>,
}

/// Trains the RGB tracker on clean sequences and checks the held-out IoU
/// gate. The returned model has no modal branch.
pub fn pretrain_rgb<T: Scalar>(
    cfg: &PretrainConfig,
    backbone: BackboneConfig,
    data: &DataConfig,
) -> Result<(Tracker<T>, PretrainReport)> {
    cfg.validate()?;
    let short = DataConfig {
        length: cfg.sequence_length,
        ..*data
    };
    let train = clean_rgb_manifest(cfg.train_sequences, cfg.train_seeds(), &short)?.render()?;
    let heldout = clean_rgb_manifest(cfg.heldout_sequences, cfg.heldout_seeds(), data)?.render()?;
    let mut model = Tracker::<T>::new(backbone, None, cfg.seed)?;
    let mut adam = Adam::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7072_6574);
    let mut losses = Vec::with_capacity(cfg.steps);
    let drop_step = (cfg.steps as f64 * cfg.lr_drop_at) as usize;
    for step in 0..cfg.steps {
        let picks: Vec<PairPick> = (0..cfg.batch_size)
            .map(|_| {
                let sequence = rng.random_range(0..train.len());
                let len = train[sequence].len();
                PairPick {
                    sequence,
                    template_frame: rng.random_range(0..len),
                    search_frame: rng.random_range(0..len),
                }
            })
            .collect();
        let tb = build_batch::<T>(&train, &picks, backbone.template_px, backbone.patch)?;
        let grads = {
            let mut tape = Tape::with_params(&model.params);
            let out = model.forward(&mut tape, &tb.batch, ForwardOptions::baseline(), &mut rng);
            let loss = tracking_loss_taped(&mut tape, out.head, &tb.targets, model.backbone.search_grid())?;
            let v = tape.scalar(loss).as_f64();
            if !v.is_finite() {
                return Err(Error::Numerical(format!("non-finite pretraining loss at step {step}")));
            }
            losses.push(v);
            tape.backward(loss)
        };
        let lr = if step < drop_step { cfg.lr } else { cfg.lr / 10.0 };
        adam.step(&mut model.params, &grads, lr);
        if step % 100 == 0 {
            log::info!("pretrain step {step} loss {:.4}", losses[step]);
        }
    }
    let runs = run_tracker(&model, &heldout, ForwardOptions::baseline())?;
    let heldout_iou = pooled_metrics(&runs, |_| true)?.mean_iou;
    if !(heldout_iou > cfg.min_iou) {
        let tail: Vec<String> = losses.iter().rev().take(5).map(|l| format!("{l:.4}")).collect();
        return Err(Error::Invariant(format!(
            "pretrained backbone reaches held-out mean IoU {heldout_iou:.3}, gate is {}; last losses [{}]",
            cfg.min_iou,
            tail.join(", ")
        )));
    }
    model.freeze_backbone();
    Ok((model, PretrainReport { heldout_iou, losses }))
}
