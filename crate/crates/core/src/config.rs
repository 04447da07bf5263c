//! Flat key-value experiment configuration (TOML). Every key has a default;
//! unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::error::{config_err, Error, Result};
use crate::model::ModalConfig;
use crate::synthetic_modalities::{make_splits, DataConfig, SeedRange, Splits};
use crate::trainer::{PretrainConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sequence_length: usize,
    pub frame_size: usize,
    pub degraded_fraction: f64,
    pub train_per_modality: usize,
    pub test_per_modality: usize,
    pub train_seed_start: u64,
    pub test_seed_start: u64,

    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    pub template_size: usize,

    pub rank: usize,
    pub experts_per_modality: usize,
    pub top_k: usize,
    pub gate_noise: f64,
    pub use_specific: bool,
    pub use_shared: bool,

    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub pairs_per_sequence: usize,
    pub lambda: f64,
    pub moe_per_token: bool,
    pub seed: u64,

    pub pretrain_sequences: usize,
    pub pretrain_sequence_length: usize,
    pub pretrain_heldout: usize,
    pub pretrain_steps: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_lr: f64,
    pub pretrain_lr_drop_at: f64,
    pub pretrain_min_iou: f64,
    pub pretrain_seed: u64,

    pub data_dir: PathBuf,
    pub backbone_checkpoint: PathBuf,
    pub checkpoint: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let d = DataConfig::default();
        let b = BackboneConfig::default();
        let m = ModalConfig::default();
        let t = TrainConfig::default();
        let p = PretrainConfig::default();
        Self {
            sequence_length: d.length,
            frame_size: d.frame_size,
            degraded_fraction: d.degraded_fraction,
            train_per_modality: 30,
            test_per_modality: 10,
            train_seed_start: 0,
            test_seed_start: 500_000,
            patch: b.patch,
            embed_dim: b.dim,
            depth: b.depth,
            mlp_hidden: b.mlp_hidden,
            template_size: b.template_px,
            rank: m.rank,
            experts_per_modality: m.experts_per_modality,
            top_k: m.top_k,
            gate_noise: m.gate_noise,
            use_specific: m.use_specific,
            use_shared: m.use_shared,
            batch_size: t.batch_size,
            lr: t.lr,
            epochs: t.epochs,
            lr_drop_epoch: t.lr_drop_epoch,
            lr_drop_factor: t.lr_drop_factor,
            pairs_per_sequence: t.pairs_per_sequence,
            lambda: t.lambda,
            moe_per_token: t.moe_per_token,
            seed: t.seed,
            pretrain_sequences: p.train_sequences,
            pretrain_sequence_length: p.sequence_length,
            pretrain_heldout: p.heldout_sequences,
            pretrain_steps: p.steps,
            pretrain_batch_size: p.batch_size,
            pretrain_lr: p.lr,
            pretrain_lr_drop_at: p.lr_drop_at,
            pretrain_min_iou: p.min_iou,
            pretrain_seed: p.seed,
            data_dir: PathBuf::from("data"),
            backbone_checkpoint: PathBuf::from("backbone.json"),
            checkpoint: PathBuf::from("meme.json"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => config_err!("config file {} not found", path.display()),
            _ => Error::io(path, e),
        })?;
        Self::from_toml(&text)
    }

    /// Checks every derived configuration.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.degraded_fraction) {
            return Err(config_err!("degraded_fraction must lie in [0, 1]"));
        }
        if self.sequence_length < 2 {
            return Err(config_err!("sequences need at least two frames"));
        }
        if self.template_size > self.frame_size {
            return Err(config_err!("template_size exceeds frame_size"));
        }
        self.backbone_config().validate()?;
        self.modal_config().validate()?;
        self.train_config().validate()?;
        self.pretrain_config().validate()?;
        self.seed_ranges()?;
        Ok(())
    }

    /// Fully materialised TOML.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the resolved TOML, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.resolved().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved_config.toml");
        fs::write(&path, self.resolved()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            length: self.sequence_length,
            frame_size: self.frame_size,
            degraded_fraction: self.degraded_fraction,
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            patch: self.patch,
            dim: self.embed_dim,
            depth: self.depth,
            mlp_hidden: self.mlp_hidden,
            template_px: self.template_size,
            search_px: self.frame_size,
        }
    }

    pub fn modal_config(&self) -> ModalConfig {
        ModalConfig {
            rank: self.rank,
            experts_per_modality: self.experts_per_modality,
            top_k: self.top_k,
            gate_noise: self.gate_noise,
            use_specific: self.use_specific,
            use_shared: self.use_shared,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            lr: self.lr,
            epochs: self.epochs,
            lr_drop_epoch: self.lr_drop_epoch,
            lr_drop_factor: self.lr_drop_factor,
            pairs_per_sequence: self.pairs_per_sequence,
            lambda: self.lambda,
            moe_per_token: self.moe_per_token,
            seed: self.seed,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            train_sequences: self.pretrain_sequences,
            sequence_length: self.pretrain_sequence_length,
            heldout_sequences: self.pretrain_heldout,
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch_size,
            lr: self.pretrain_lr,
            lr_drop_at: self.pretrain_lr_drop_at,
            min_iou: self.pretrain_min_iou,
            seed: self.pretrain_seed,
        }
    }

    /// Seed ranges of the train and test splits (three seeds per index).
    pub fn seed_ranges(&self) -> Result<(SeedRange, SeedRange)> {
        let train = SeedRange::new(self.train_seed_start, 3 * self.train_per_modality as u64);
        let test = SeedRange::new(self.test_seed_start, 3 * self.test_per_modality as u64);
        if train.overlaps(&test) {
            return Err(config_err!("train seeds {train:?} overlap test seeds {test:?}"));
        }
        Ok((train, test))
    }

    pub fn splits(&self) -> Result<Splits> {
        let (train, test) = self.seed_ranges()?;
        make_splits(
            self.train_per_modality,
            self.test_per_modality,
            train,
            test,
            &self.data_config(),
        )
    }
}
