//! The prompt-tuned tracker: a frozen RGB backbone plus a modal branch that
//! routes auxiliary tokens through experts and injects prompts at every layer.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{decode, Backbone, BackboneConfig, Decoded, BACKBONE_PREFIX};
use crate::error::{config_err, shape_err, Result};
use crate::expert_bank::{ExpertAssignment, LowRankExpert, SharedExpert};
use crate::moe_router::{dispatch_combine, GateConfig, GateMode, Router, RouterDecision};
use crate::objectives::HeadVars;
use crate::params::ParamStore;
use crate::prompt_fusion::{FusionBlock, PromptBlock};
use crate::scalar::Scalar;
use crate::tokenizer::{pair_patches, Frame, PatchEmbed, TokenLayout};

pub const MODAL_PREFIX: &str = "modal.";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalConfig {
    /// Low-rank width K of every expert and prompt.
    pub rank: usize,
    pub experts_per_modality: usize,
    pub top_k: usize,
    pub gate_noise: f64,
    /// Routed, modality-specialised experts.
    pub use_specific: bool,
    /// Shared generalist expert.
    pub use_shared: bool,
}

impl Default for ModalConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            experts_per_modality: 2,
            top_k: 2,
            gate_noise: 1.0,
            use_specific: true,
            use_shared: true,
        }
    }
}

impl ModalConfig {
    pub fn experts(&self) -> usize {
        3 * self.experts_per_modality
    }

    pub fn gate(&self) -> Result<GateConfig> {
        GateConfig::new(self.experts(), self.top_k, self.gate_noise)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(config_err!("rank must be positive"));
        }
        if !self.use_specific && !self.use_shared {
            return Err(config_err!("at least one expert branch must be enabled"));
        }
        if self.use_specific {
            if self.experts_per_modality == 0 {
                return Err(config_err!("experts_per_modality must be positive"));
            }
            self.gate()?;
        }
        Ok(())
    }
}

/// Router decision of one layer together with its differentiable probabilities.
#[derive(Clone, Debug)]
pub struct LayerRouting<T> {
    pub probs: Var,
    pub decision: RouterDecision<T>,
}

/// Experts, fusion and prompt block of one injection point.
#[derive(Clone, Debug)]
pub struct MemeLayer {
    pub router: Option<Router>,
    pub experts: Vec<LowRankExpert>,
    pub shared: Option<SharedExpert>,
    pub fusion: FusionBlock,
    pub prompt: PromptBlock,
}

impl MemeLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        rank: usize,
        gate: Option<GateConfig>,
        use_shared: bool,
        rng: &mut R,
    ) -> Self {
        let (router, experts) = match gate {
            Some(g) => (
                Some(Router::new(store, &format!("{name}.router"), dim, g, rng)),
                (0..g.experts)
                    .map(|e| LowRankExpert::new(store, &format!("{name}.expert{e}"), dim, rank, rng))
                    .collect(),
            ),
            None => (None, Vec::new()),
        };
        let shared = use_shared.then(|| SharedExpert::new(store, &format!("{name}.shared"), dim, rank, rng));
        Self {
            router,
            experts,
            shared,
            fusion: FusionBlock::new(store, &format!("{name}.fusion"), rank, rng),
            prompt: PromptBlock::new(store, &format!("{name}.prompt"), dim, rank, rng),
        }
    }

    /// Fused modal matrix `M` for the modal tokens `ox`, plus the routing.
    pub fn modal_matrix<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        ox: Var,
        layout: &TokenLayout,
        mode: GateMode,
        rng: &mut R,
    ) -> (Var, Option<LayerRouting<T>>) {
        let mut routing = None;
        let routed = self.router.as_ref().map(|router| {
            let (probs, decision) = router.forward(tape, ox, mode, rng);
            let out = dispatch_combine(tape, probs, &decision, |tape, e, rows| {
                let g = tape.gather_rows(ox, rows.to_vec());
                self.experts[e].forward(tape, g)
            });
            routing = Some(LayerRouting { probs, decision });
            out.expect("at least one token is routed")
        });
        let shared = self.shared.as_ref().map(|s| s.forward(tape, ox, layout));
        (self.fusion.forward(tape, routed, shared), routing)
    }
}

/// Auxiliary-modality branch: its own patch projection plus one layer per
/// injection point, all fed the same shallow modal embedding.
#[derive(Clone, Debug)]
pub struct ModalBranch {
    pub cfg: ModalConfig,
    pub embed: PatchEmbed,
    pub layers: Vec<MemeLayer>,
    pub assignment: ExpertAssignment,
}

impl ModalBranch {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: ModalConfig,
        backbone: &BackboneConfig,
        points: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let p = MODAL_PREFIX;
        let embed = PatchEmbed::new(store, &format!("{p}embed"), backbone.patch, backbone.dim, rng);
        let gate = if cfg.use_specific { Some(cfg.gate()?) } else { None };
        let layers = (0..points)
            .map(|i| MemeLayer::new(store, &format!("{p}layer{i}"), backbone.dim, cfg.rank, gate, cfg.use_shared, rng))
            .collect();
        let assignment = ExpertAssignment::contiguous(cfg.experts_per_modality.max(1));
        if cfg.use_specific {
            assignment.validate(cfg.experts())?;
        }
        Ok(Self {
            cfg,
            embed,
            layers,
            assignment,
        })
    }
}

/// Per-pass switches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub mode: GateMode,
    /// Inject prompts; `false` runs the bare backbone.
    pub prompts: bool,
    /// Replace the fused modal matrix with zeros at this injection point.
    pub zero_modal_at: Option<usize>,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            mode: GateMode::Train,
            prompts: true,
            zero_modal_at: None,
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: GateMode::Eval,
            ..Self::train()
        }
    }

    pub fn baseline() -> Self {
        Self {
            prompts: false,
            ..Self::eval()
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOut<T> {
    pub head: HeadVars,
    pub streams: Vec<Var>,
    pub prompts: Vec<Var>,
    pub routing: Vec<LayerRouting<T>>,
}

/// One blind input: template and search views of both sensors.
#[derive(Clone, Copy, Debug)]
pub struct PairInput<'a, T> {
    pub template_rgb: &'a Frame<T>,
    pub template_x: &'a Frame<T>,
    pub search_rgb: &'a Frame<T>,
    pub search_x: &'a Frame<T>,
}

/// Stacked patches of a batch of pairs: `[B * N, 3 P^2]` per sensor.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch<T> {
    pub rgb: Array2<T>,
    pub x: Array2<T>,
    pub size: usize,
}

impl<T: Scalar> PairBatch<T> {
    pub fn from_pairs(pairs: &[PairInput<'_, T>], patch: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(shape_err!("empty batch"));
        }
        let mut rgb = Vec::with_capacity(pairs.len());
        let mut x = Vec::with_capacity(pairs.len());
        for p in pairs {
            rgb.push(pair_patches(p.template_rgb, p.search_rgb, patch)?);
            x.push(pair_patches(p.template_x, p.search_x, patch)?);
        }
        let cat = |v: &[Array2<T>]| {
            let views: Vec<_> = v.iter().map(|a| a.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("equal widths")
        };
        Ok(Self {
            rgb: cat(&rgb),
            x: cat(&x),
            size: pairs.len(),
        })
    }
}

/// Full tracker with its own parameter store.
#[derive(Clone, Debug)]
pub struct Tracker<T> {
    pub params: ParamStore<T>,
    pub backbone: Backbone,
    pub modal: Option<ModalBranch>,
}

impl<T: Scalar> Tracker<T> {
    /// Backbone and (optional) modal branch, seeded independently.
    pub fn new(backbone_cfg: BackboneConfig, modal_cfg: Option<ModalConfig>, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(&mut params, backbone_cfg, &mut rng)?;
        let modal = match modal_cfg {
            Some(cfg) => {
                let mut mrng = ChaCha8Rng::seed_from_u64(seed ^ 0x6D6F_6461_6C00);
                Some(ModalBranch::new(&mut params, cfg, &backbone_cfg, backbone.injection_points(), &mut mrng)?)
            }
            None => None,
        };
        Ok(Self {
            params,
            backbone,
            modal,
        })
    }

    /// Copies backbone weights from `other` and freezes them.
    pub fn load_backbone(&mut self, other: &ParamStore<T>) -> Result<()> {
        self.params.load_from(other, BACKBONE_PREFIX)?;
        self.freeze_backbone();
        Ok(())
    }

    pub fn freeze_backbone(&mut self) {
        self.params.set_trainable_prefix(BACKBONE_PREFIX, false);
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.backbone.layout
    }

    pub fn patch(&self) -> usize {
        self.backbone.cfg.patch
    }

    /// Parameter count under `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params.count_prefix(prefix)
    }

    pub fn forward<'p, R: Rng + ?Sized>(
        &'p self,
        tape: &mut Tape<'p, T>,
        batch: &PairBatch<T>,
        opts: ForwardOptions,
        rng: &mut R,
    ) -> ForwardOut<T> {
        let rgb = tape.constant(batch.rgb.clone());
        let modal = if opts.prompts { self.modal.as_ref() } else { None };
        let mut routing = Vec::new();
        let mut prompts = Vec::new();
        let out = match modal {
            None => self.backbone.forward(tape, rgb, batch.size, |_, _, _| None),
            Some(branch) => {
                let xp = tape.constant(batch.x.clone());
                let ox = branch.embed.forward(tape, xp);
                let layout = &self.backbone.layout;
                self.backbone.forward(tape, rgb, batch.size, |tape, point, stream| {
                    let layer = &branch.layers[point];
                    let (mut m, r) = layer.modal_matrix(tape, ox, layout, opts.mode, rng);
                    if opts.zero_modal_at == Some(point) {
                        m = tape.scale(m, T::zero());
                    }
                    if let Some(r) = r {
                        routing.push(r);
                    }
                    let p = layer.prompt.forward(tape, stream, m);
                    prompts.push(p);
                    Some(p)
                })
            }
        };
        ForwardOut {
            head: out.head,
            streams: out.streams,
            prompts,
            routing,
        }
    }

    /// Deterministic inference on a batch of pairs.
    pub fn predict_batch(&self, batch: &PairBatch<T>, opts: ForwardOptions) -> Vec<Decoded> {
        let mut tape = Tape::inference(&self.params);
        // eval-mode gating draws no noise
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, batch, opts, &mut rng);
        decode(
            tape.value(out.head.scores),
            tape.value(out.head.boxes),
            self.backbone.search_grid(),
        )
    }

    pub fn predict(&self, pairs: &[PairInput<'_, T>]) -> Result<Vec<Decoded>> {
        let batch = PairBatch::from_pairs(pairs, self.patch())?;
        Ok(self.predict_batch(&batch, ForwardOptions::eval()))
    }

    /// Single-pair tracking; takes pixels only.
    pub fn track(
        &self,
        template_rgb: &Frame<T>,
        template_x: &Frame<T>,
        search_rgb: &Frame<T>,
        search_x: &Frame<T>,
    ) -> Result<Decoded> {
        let pair = PairInput {
            template_rgb,
            template_x,
            search_rgb,
            search_x,
        };
        Ok(self.predict(&[pair])?.remove(0))
    }
}
