//! Small RGB transformer tracker used as the frozen foundation model.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, Result};
use crate::geometry::BoxN;
use crate::nn::{LayerNorm, Linear};
use crate::objectives::HeadVars;
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::{sigmoid, Scalar};
use crate::tokenizer::{PatchEmbed, TokenLayout};

pub const BACKBONE_PREFIX: &str = "backbone.";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    pub template_px: usize,
    pub search_px: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            dim: 64,
            depth: 4,
            mlp_hidden: 128,
            template_px: 32,
            search_px: 64,
        }
    }
}

impl BackboneConfig {
    pub fn layout(&self) -> Result<TokenLayout> {
        TokenLayout::for_sizes(self.template_px, self.search_px, self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.depth == 0 || self.mlp_hidden == 0 {
            return Err(config_err!("backbone dimensions must be positive"));
        }
        self.layout().map(|_| ())
    }
}

/// Pre-norm attention block with a single head.
#[derive(Clone, Debug)]
pub struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        let lin = |store: &mut ParamStore<T>, n: &str, i, o, rng: &mut R| {
            Linear::new(store, &format!("{name}.{n}"), i, o, true, Init::Xavier, rng)
        };
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim, rng),
            q: lin(store, "q", dim, dim, rng),
            k: lin(store, "k", dim, dim, rng),
            v: lin(store, "v", dim, dim, rng),
            proj: lin(store, "proj", dim, dim, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim, rng),
            fc1: lin(store, "fc1", dim, hidden, rng),
            fc2: lin(store, "fc2", hidden, dim, rng),
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, tokens: usize) -> Var {
        let dim = tape.value(x).ncols();
        let h = self.ln1.forward(tape, x);
        let q = self.q.forward(tape, h);
        let k = self.k.forward(tape, h);
        let v = self.v.forward(tape, h);
        let s = tape.block_matmul_t(q, k, tokens);
        let s = tape.scale(s, T::of(1.0 / (dim as f64).sqrt()));
        let p = tape.softmax_rows(s);
        let a = tape.block_matmul(p, v, tokens);
        let a = self.proj.forward(tape, a);
        let x = tape.add(x, a);
        let h = self.ln2.forward(tape, x);
        let h = self.fc1.forward(tape, h);
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, h);
        tape.add(x, h)
    }
}

/// Output of one backbone pass.
#[derive(Clone, Debug)]
pub struct BackboneOut {
    pub head: HeadVars,
    /// Token stream after each injection point (embedding, then each block).
    pub streams: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub layout: TokenLayout,
    pub embed: PatchEmbed,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head_fc: Linear,
    pub head_out: Linear,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout()?;
        let p = BACKBONE_PREFIX;
        let embed = PatchEmbed::new(store, &format!("{p}embed"), cfg.patch, cfg.dim, rng);
        let pos = store.init(format!("{p}pos"), layout.tokens_per_sample(), cfg.dim, Init::Uniform(0.02), rng);
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("{p}block{i}"), cfg.dim, cfg.mlp_hidden, rng))
            .collect();
        Ok(Self {
            cfg,
            layout,
            embed,
            pos,
            blocks,
            norm: LayerNorm::new(store, &format!("{p}norm"), cfg.dim, rng),
            head_fc: Linear::new(store, &format!("{p}head.fc"), cfg.dim, cfg.dim, true, Init::Xavier, rng),
            head_out: Linear::new(store, &format!("{p}head.out"), cfg.dim, 5, true, Init::Xavier, rng),
        })
    }

    /// Number of prompt injection points: the embedding plus one per block.
    pub fn injection_points(&self) -> usize {
        self.blocks.len() + 1
    }

    pub fn search_grid(&self) -> (usize, usize) {
        self.layout.search
    }

    /// Runs the tracker on stacked pair patches `[B * N, 3 P^2]`.
    /// `inject(tape, point, stream)` may return a prompt added to the stream.
    pub fn forward<'p, T, F>(&self, tape: &mut Tape<'p, T>, patches: Var, batch: usize, mut inject: F) -> BackboneOut
    where
        T: Scalar,
        F: FnMut(&mut Tape<'p, T>, usize, Var) -> Option<Var>,
    {
        let n = self.layout.tokens_per_sample();
        let mut x = self.embed.forward(tape, patches);
        let pos = tape.param(self.pos);
        let pos = tape.gather_rows(pos, (0..batch).flat_map(|_| 0..n).collect());
        x = tape.add(x, pos);
        let mut streams = Vec::with_capacity(self.injection_points());
        for point in 0..self.injection_points() {
            if point > 0 {
                x = self.blocks[point - 1].forward(tape, x, n);
            }
            if let Some(p) = inject(tape, point, x) {
                x = tape.add(x, p);
            }
            streams.push(x);
        }
        let x = self.norm.forward(tape, x);
        let search = tape.gather_rows(x, self.layout.search_rows(batch));
        let h = self.head_fc.forward(tape, search);
        let h = tape.gelu(h);
        let out = self.head_out.forward(tape, h);
        let ns = self.layout.n_search();
        let scores = tape.slice_cols(out, 0, 1);
        let scores = tape.reshape(scores, (batch, ns));
        let boxes = tape.slice_cols(out, 1, 4);
        BackboneOut {
            head: HeadVars { scores, boxes },
            streams,
        }
    }
}

/// Decoded prediction for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decoded {
    pub bbox: BoxN,
    pub confidence: f64,
}

/// Box at the arg-max score cell; confidence is the sigmoid of that score.
pub fn decode<T: Scalar>(scores: &Array2<T>, boxes: &Array2<T>, grid: (usize, usize)) -> Vec<Decoded> {
    let ns = grid.0 * grid.1;
    (0..scores.nrows())
        .map(|b| {
            let row = scores.row(b);
            let mut best = 0;
            for i in 1..ns {
                if row[i] > row[best] {
                    best = i;
                }
            }
            let (r, c) = (best / grid.1, best % grid.1);
            let raw = boxes.row(b * ns + best);
            let sx = sigmoid(raw[0]).as_f64();
            let sy = sigmoid(raw[1]).as_f64();
            Decoded {
                bbox: BoxN {
                    cx: (c as f64 + sx) / grid.1 as f64,
                    cy: (r as f64 + sy) / grid.0 as f64,
                    w: sigmoid(raw[2]).as_f64(),
                    h: sigmoid(raw[3]).as_f64(),
                },
                confidence: sigmoid(row[best]).as_f64(),
            }
        })
        .collect()
}
