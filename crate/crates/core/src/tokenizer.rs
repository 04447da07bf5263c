//! Patch tokenisation of paired template/search frames.

use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;

use crate::autodiff::Tape;
use crate::error::{config_err, shape_err, Result};
use crate::nn::Linear;
use crate::params::{Init, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Template,
    Search,
}

/// A 3-channel image with values in [0, 1], laid out [C, H, W].
#[derive(Clone, Debug, PartialEq)]
pub struct Frame<T> {
    pixels: Array3<T>,
    role: Role,
}

impl<T: Scalar> Frame<T> {
    pub fn new(pixels: Array3<T>, role: Role) -> Result<Self> {
        if pixels.dim().0 != 3 {
            return Err(shape_err!("frame must have 3 channels, got {}", pixels.dim().0));
        }
        Ok(Self { pixels, role })
    }

    /// Replicates a single-channel raster across three channels.
    pub fn from_single_channel(plane: &Array2<T>, role: Role) -> Self {
        let (h, w) = plane.dim();
        let mut pixels = Array3::zeros((3, h, w));
        for mut ch in pixels.outer_iter_mut() {
            ch.assign(plane);
        }
        Self { pixels, role }
    }

    pub fn pixels(&self) -> &Array3<T> {
        &self.pixels
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }
}

/// Splits a frame into non-overlapping `patch` x `patch` tiles.
///
/// Row `i` of the result is the `i`-th tile in row-major tile order, flattened
/// channel-major (all of channel 0, then channel 1, then channel 2), each
/// channel row-major inside the tile.
pub fn patchify<T: Scalar>(frame: &Frame<T>, patch: usize) -> Result<Array2<T>> {
    let (c, h, w) = frame.pixels.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(shape_err!(
            "frame {h}x{w} (H x W) is not divisible by patch size {patch}"
        ));
    }
    let (gr, gc) = (h / patch, w / patch);
    let mut out = Array2::zeros((gr * gc, c * patch * patch));
    for pr in 0..gr {
        for pc in 0..gc {
            let tile = frame
                .pixels
                .slice(s![.., pr * patch..(pr + 1) * patch, pc * patch..(pc + 1) * patch]);
            let mut row = out.row_mut(pr * gc + pc);
            for (dst, &v) in row.iter_mut().zip(tile.iter()) {
                *dst = v;
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Array2<T>, height: usize, width: usize, patch: usize) -> Result<Array3<T>> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(shape_err!(
            "frame {height}x{width} (H x W) is not divisible by patch size {patch}"
        ));
    }
    let (gr, gc) = (height / patch, width / patch);
    let c = patches.ncols() / (patch * patch);
    if patches.nrows() != gr * gc || c * patch * patch != patches.ncols() {
        return Err(shape_err!(
            "patch array {:?} does not tile a {height}x{width} frame with patch {patch}",
            patches.dim()
        ));
    }
    let mut out = Array3::zeros((c, height, width));
    for pr in 0..gr {
        for pc in 0..gc {
            let row = patches.row(pr * gc + pc);
            let mut tile = out.slice_mut(s![.., pr * patch..(pr + 1) * patch, pc * patch..(pc + 1) * patch]);
            for (dst, &v) in tile.iter_mut().zip(row.iter()) {
                *dst = v;
            }
        }
    }
    Ok(out)
}

/// A rectangular token grid inside one sample's token block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpan {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

/// Token arrangement of one (template, search) sample: template grid first,
/// then the search grid, both row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub template: (usize, usize),
    pub search: (usize, usize),
}

impl TokenLayout {
    pub fn new(template: (usize, usize), search: (usize, usize)) -> Self {
        Self { template, search }
    }

    /// Layout for square crops of the given sizes.
    pub fn for_sizes(template_px: usize, search_px: usize, patch: usize) -> Result<Self> {
        if template_px % patch != 0 || search_px % patch != 0 {
            return Err(config_err!(
                "crop sizes {template_px}/{search_px} not divisible by patch {patch}"
            ));
        }
        Ok(Self::new(
            (template_px / patch, template_px / patch),
            (search_px / patch, search_px / patch),
        ))
    }

    pub fn n_template(&self) -> usize {
        self.template.0 * self.template.1
    }

    pub fn n_search(&self) -> usize {
        self.search.0 * self.search.1
    }

    pub fn tokens_per_sample(&self) -> usize {
        self.n_template() + self.n_search()
    }

    pub fn grids(&self) -> [GridSpan; 2] {
        [
            GridSpan {
                offset: 0,
                rows: self.template.0,
                cols: self.template.1,
            },
            GridSpan {
                offset: self.n_template(),
                rows: self.search.0,
                cols: self.search.1,
            },
        ]
    }

    /// Row indices of the search tokens for every sample of a batch.
    pub fn search_rows(&self, batch: usize) -> Vec<usize> {
        let per = self.tokens_per_sample();
        (0..batch)
            .flat_map(|b| b * per + self.n_template()..(b + 1) * per)
            .collect()
    }
}

/// Token matrix of one sample with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Array2<T>,
    pub n_template: usize,
    pub n_search: usize,
    pub patch_size: usize,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn template_tokens(&self) -> ndarray::ArrayView2<'_, T> {
        self.tokens.slice(s![..self.n_template, ..])
    }

    pub fn search_tokens(&self) -> ndarray::ArrayView2<'_, T> {
        self.tokens.slice(s![self.n_template.., ..])
    }
}

/// Stacks template and search patches of one sample into [N_t + N_s, 3 P^2].
pub fn pair_patches<T: Scalar>(template: &Frame<T>, search: &Frame<T>, patch: usize) -> Result<Array2<T>> {
    let tp = patchify(template, patch)?;
    let sp = patchify(search, patch)?;
    Ok(ndarray::concatenate(Axis(0), &[tp.view(), sp.view()]).expect("equal widths"))
}

/// Learnable linear patch projection shared by the template and search roles.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        patch: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let proj = Linear::new(store, &format!("{name}.proj"), 3 * patch * patch, dim, true, Init::Xavier, rng);
        Self { proj, patch }
    }

    pub fn dim(&self) -> usize {
        self.proj.out_dim
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, patches: crate::autodiff::Var) -> crate::autodiff::Var {
        self.proj.forward(tape, patches)
    }

    /// Projects template and search patches of one sample and concatenates
    /// them, template rows first.
    pub fn embed_pair<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        template: &Frame<T>,
        search: &Frame<T>,
        expected_dim: usize,
    ) -> Result<TokenSequence<T>> {
        if expected_dim != self.dim() {
            return Err(config_err!(
                "patch projection emits D={} but downstream expects D={expected_dim}",
                self.dim()
            ));
        }
        let tp = patchify(template, self.patch)?;
        let sp = patchify(search, self.patch)?;
        let (n_template, n_search) = (tp.nrows(), sp.nrows());
        let stacked = ndarray::concatenate(Axis(0), &[tp.view(), sp.view()]).expect("equal widths");
        let mut tape = Tape::inference(store);
        let x = tape.constant(stacked);
        let y = self.forward(&mut tape, x);
        Ok(TokenSequence {
            tokens: tape.value(y).clone(),
            n_template,
            n_search,
            patch_size: self.patch,
        })
    }
}
