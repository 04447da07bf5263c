//! Reverse-mode automatic differentiation over 2-D arrays.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes that do not
//! depend on a gradient-requiring leaf are never visited by
//! [`Tape::backward`], which is how frozen parameters stay free of gradient
//! work.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::{ParamId, ParamStore};
use crate::scalar::{normal_cdf, normal_pdf, sigmoid, softplus, Scalar};
use crate::tokenizer::TokenLayout;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    BlockMatMulT { a: Var, b: Var, block: usize },
    BlockMatMul { p: Var, v: Var, block: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    PickElems { x: Var, pos: Vec<(usize, usize)> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    SegmentMean { x: Var, seg: usize },
    SumAll(Var),
    MeanAll(Var),
    ColSum(Var),
    Cv2(Var),
    NormalCdf { x: Var, sigma: T },
    Bce { p: Var, target: Array2<T>, eps: T },
    DepthwiseConv3x3 { x: Var, kernel: Var, layout: TokenLayout },
    Focal { logits: Var, target: Array2<T>, alpha: i32, beta: i32, norm: T },
    BoxLoss { pred: Var, gt: Array2<T>, valid: Vec<bool>, l1_weight: T, giou_weight: T },
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradient buffers produced by a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// All parameter gradients that were reached by the backward pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Array2<T>)> + '_ {
        self.params
            .iter()
            .filter_map(|(p, v)| self.wrt(*v).map(|g| (*p, g)))
    }
}

/// Wengert list of one forward computation.
pub struct Tape<'p, T> {
    nodes: Vec<Node<T>>,
    store: Option<&'p ParamStore<T>>,
    param_vars: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
    grad_enabled: bool,
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_vars: HashMap::new(),
            param_order: Vec::new(),
            grad_enabled: true,
        }
    }

    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Inference-only tape: no node will ever require a gradient.
    pub fn inference(store: &'p ParamStore<T>) -> Self {
        Self {
            grad_enabled: false,
            ..Self::with_params(store)
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Array2<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.leaf(value, false)
    }

    /// A free input that receives a gradient (used by gradient checks).
    pub fn input(&mut self, value: Array2<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf for a stored parameter; frozen parameters become constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let store = self.store.expect("tape has no parameter store");
        let v = self.leaf(store.get(id).clone(), store.is_trainable(id));
        self.param_vars.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- elementary ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// `x + b` with `b` of shape [1, n] broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        debug_assert_eq!(self.value(b).nrows(), 1);
        let value = self.value(x) + self.value(b);
        self.push(value, Op::AddRow(x, b), &[x, b])
    }

    /// `x * g` with `g` of shape [1, n] broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        debug_assert_eq!(self.value(g).nrows(), 1);
        let value = self.value(x) * self.value(g);
        self.push(value, Op::MulRow(x, g), &[x, g])
    }

    /// `x * w` with `w` of shape [m, 1] broadcast over columns.
    pub fn mul_col(&mut self, x: Var, w: Var) -> Var {
        debug_assert_eq!(self.value(w).ncols(), 1);
        let value = self.value(x) * self.value(w);
        self.push(value, Op::MulCol(x, w), &[x, w])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x) * c;
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| gelu_fwd(v).0);
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        self.push(value, Op::SoftmaxRows(x), &[x])
    }

    /// Per-row standardisation without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let n = T::of(xv.ncols() as f64);
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// For each block of `block` rows: `a_blk * b_blk^T`, stacked to [rows, block].
    pub fn block_matmul_t(&mut self, a: Var, b: Var, block: usize) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.nrows() % block, 0);
        let mut out = Array2::zeros((av.nrows(), block));
        for s in 0..av.nrows() / block {
            let r = s * block..(s + 1) * block;
            let prod = av.slice(s![r.clone(), ..]).dot(&bv.slice(s![r.clone(), ..]).t());
            out.slice_mut(s![r, ..]).assign(&prod);
        }
        self.push(out, Op::BlockMatMulT { a, b, block }, &[a, b])
    }

    /// For each block: `p_blk [block, block] * v_blk [block, d]`.
    pub fn block_matmul(&mut self, p: Var, v: Var, block: usize) -> Var {
        let (pv, vv) = (self.value(p), self.value(v));
        assert_eq!(pv.ncols(), block);
        let mut out = Array2::zeros((vv.nrows(), vv.ncols()));
        for s in 0..vv.nrows() / block {
            let r = s * block..(s + 1) * block;
            let prod = pv.slice(s![r.clone(), ..]).dot(&vv.slice(s![r.clone(), ..]));
            out.slice_mut(s![r, ..]).assign(&prod);
        }
        self.push(out, Op::BlockMatMul { p, v, block }, &[p, v])
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut out = Array2::zeros((idx.len(), xv.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&xv.row(i));
        }
        self.push(out, Op::GatherRows { x, idx }, &[x])
    }

    /// Places row `r` of `x` at row `idx[r]` of a zero array with `rows` rows
    /// (rows sharing a target are summed).
    pub fn scatter_rows(&mut self, x: Var, idx: Vec<usize>, rows: usize) -> Var {
        let xv = self.value(x);
        let mut out = Array2::zeros((rows, xv.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            let mut dst = out.row_mut(i);
            dst += &xv.row(r);
        }
        self.push(out, Op::ScatterRows { x, idx }, &[x])
    }

    /// Column vector of the selected entries of `x`.
    pub fn pick(&mut self, x: Var, pos: Vec<(usize, usize)>) -> Var {
        let xv = self.value(x);
        let out = Array2::from_shape_fn((pos.len(), 1), |(r, _)| xv[pos[r]]);
        self.push(out, Op::PickElems { x, pos }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..start + len` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, shape: (usize, usize)) -> Var {
        let xv = self.value(x);
        let data: Vec<T> = xv.iter().copied().collect();
        let out = Array2::from_shape_vec(shape, data).expect("reshape keeps the element count");
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Mean over consecutive groups of `seg` rows: [m, n] -> [m / seg, n].
    pub fn segment_mean(&mut self, x: Var, seg: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows() % seg, 0);
        let groups = xv.nrows() / seg;
        let inv = T::one() / T::of(seg as f64);
        let mut out = Array2::zeros((groups, xv.ncols()));
        for g in 0..groups {
            let sum = xv.slice(s![g * seg..(g + 1) * seg, ..]).sum_axis(Axis(0));
            out.row_mut(g).assign(&(sum * inv));
        }
        self.push(out, Op::SegmentMean { x, seg }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        self.push(Array2::from_elem((1, 1), v), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = xv.sum() / T::of(xv.len() as f64);
        self.push(Array2::from_elem((1, 1), v), Op::MeanAll(x), &[x])
    }

    /// Column sums as a [1, n] row.
    pub fn col_sum(&mut self, x: Var) -> Var {
        let out = self.value(x).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(out, Op::ColSum(x), &[x])
    }

    /// Squared coefficient of variation (population variance over squared
    /// mean) of all entries of `x`.
    pub fn cv_squared(&mut self, x: Var) -> Var {
        let (mean, var) = mean_var(self.value(x));
        let v = var / (mean * mean);
        self.push(Array2::from_elem((1, 1), v), Op::Cv2(x), &[x])
    }

    /// Elementwise CDF of N(0, sigma^2).
    pub fn normal_cdf(&mut self, x: Var, sigma: T) -> Var {
        let out = self.value(x).mapv(|v| normal_cdf(v, sigma));
        self.push(out, Op::NormalCdf { x, sigma }, &[x])
    }

    /// Mean over rows of the summed binary cross-entropy between `p`
    /// (clamped to `[eps, 1 - eps]`) and `target`.
    pub fn bce(&mut self, p: Var, target: Array2<T>, eps: T) -> Var {
        let pv = self.value(p);
        assert_eq!(pv.dim(), target.dim());
        let mut total = T::zero();
        Zip::from(pv).and(&target).for_each(|&p, &t| {
            let pc = p.max(eps).min(T::one() - eps);
            total -= t * pc.ln() + (T::one() - t) * (T::one() - pc).ln();
        });
        let v = total / T::of(pv.nrows() as f64);
        self.push(Array2::from_elem((1, 1), v), Op::Bce { p, target, eps }, &[p])
    }

    /// Depthwise 3x3 cross-correlation of token features laid out on their
    /// patch grids, one kernel column per channel; zero padding, grids never
    /// mix (each sample and each role has its own grid).
    pub fn depthwise_conv3x3(&mut self, x: Var, kernel: Var, layout: &TokenLayout) -> Var {
        let out = conv3x3_forward(self.value(x), self.value(kernel), layout);
        self.push(
            out,
            Op::DepthwiseConv3x3 {
                x,
                kernel,
                layout: layout.clone(),
            },
            &[x, kernel],
        )
    }

    /// Penalty-reduced focal loss on a heat map of logits, normalised by `norm`
    /// (typically the number of positive locations).
    pub fn focal_loss(&mut self, logits: Var, target: Array2<T>, alpha: i32, beta: i32, norm: T) -> Var {
        let zv = self.value(logits);
        assert_eq!(zv.dim(), target.dim());
        let mut total = T::zero();
        Zip::from(zv).and(&target).for_each(|&z, &t| {
            total += focal_term(z, t, alpha, beta).0;
        });
        let v = total / norm;
        self.push(
            Array2::from_elem((1, 1), v),
            Op::Focal {
                logits,
                target,
                alpha,
                beta,
                norm,
            },
            &[logits],
        )
    }

    /// Weighted L1 plus generalised-IoU loss between predicted and target
    /// boxes in (cx, cy, w, h); averaged over rows flagged valid.
    pub fn box_loss(&mut self, pred: Var, gt: Array2<T>, valid: Vec<bool>, l1_weight: T, giou_weight: T) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), gt.dim());
        assert_eq!(pv.ncols(), 4);
        let n_valid = valid.iter().filter(|v| **v).count();
        let mut total = T::zero();
        for r in 0..pv.nrows() {
            if !valid[r] {
                continue;
            }
            let l1: T = (0..4).map(|c| (pv[[r, c]] - gt[[r, c]]).abs()).sum();
            let a = [pv[[r, 0]], pv[[r, 1]], pv[[r, 2]], pv[[r, 3]]];
            let b = [gt[[r, 0]], gt[[r, 1]], gt[[r, 2]], gt[[r, 3]]];
            let (giou, _) = giou_with_grad(a, b);
            total += l1_weight * l1 + giou_weight * (T::one() - giou);
        }
        let v = if n_valid == 0 {
            T::zero()
        } else {
            total / T::of(n_valid as f64)
        };
        self.push(
            Array2::from_elem((1, 1), v),
            Op::BoxLoss {
                pred,
                gt,
                valid,
                l1_weight,
                giou_weight,
            },
            &[pred],
        )
    }

    // ---- backward -------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every reachable node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let seed = Array2::ones(self.value(loss).dim());
        self.backward_with(loss, seed)
    }

    /// Vector-Jacobian product seeded with `seed` at `out`.
    pub fn backward_with(&self, out: Var, seed: Array2<T>) -> Gradients<T> {
        let mut grads: Vec<Option<Array2<T>>> = vec![None; self.nodes.len()];
        if self.nodes[out.0].needs_grad {
            grads[out.0] = Some(seed);
        }
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            params: self.param_order.clone(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.mapv(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(x, s) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g * self.value(*s));
                }
                if self.wants(*s) {
                    let gs = (g * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *s, gs);
                }
            }
            Op::MulCol(x, w) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g * self.value(*w));
                }
                if self.wants(*w) {
                    let gw = (g * self.value(*x)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g * *c),
            Op::Sigmoid(x) => {
                let y = &node.value;
                let gx = Zip::from(g).and(y).map_collect(|&g, &y| g * y * (T::one() - y));
                self.accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let gx = Zip::from(g)
                    .and(self.value(*x))
                    .map_collect(|&g, &x| g * gelu_fwd(x).1);
                self.accumulate(grads, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = g * y;
                for (mut row, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.sum();
                    Zip::from(&mut row).and(&yrow).for_each(|r, &y| *r -= y * dot);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm { x, inv_std } => {
                let xhat = &node.value;
                let n = T::of(xhat.ncols() as f64);
                let mut gx = g.clone();
                for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                    let xr = xhat.row(r);
                    let mean_g = row.sum() / n;
                    let mean_gx = row.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
                    let is = inv_std[r];
                    Zip::from(&mut row)
                        .and(&xr)
                        .for_each(|v, &xh| *v = is * (*v - mean_g - xh * mean_gx));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::BlockMatMulT { a, b, block } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Array2::zeros(av.dim());
                let mut gb = Array2::zeros(bv.dim());
                for s in 0..av.nrows() / block {
                    let r = s * block..(s + 1) * block;
                    let gs = g.slice(s![r.clone(), ..]);
                    ga.slice_mut(s![r.clone(), ..])
                        .assign(&gs.dot(&bv.slice(s![r.clone(), ..])));
                    gb.slice_mut(s![r.clone(), ..])
                        .assign(&gs.t().dot(&av.slice(s![r, ..])));
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::BlockMatMul { p, v, block } => {
                let (pv, vv) = (self.value(*p), self.value(*v));
                let mut gp = Array2::zeros(pv.dim());
                let mut gv = Array2::zeros(vv.dim());
                for s in 0..vv.nrows() / block {
                    let r = s * block..(s + 1) * block;
                    let gs = g.slice(s![r.clone(), ..]);
                    if self.wants(*p) {
                        gp.slice_mut(s![r.clone(), ..])
                            .assign(&gs.dot(&vv.slice(s![r.clone(), ..]).t()));
                    }
                    gv.slice_mut(s![r.clone(), ..])
                        .assign(&pv.slice(s![r, ..]).t().dot(&gs));
                }
                self.accumulate(grads, *p, gp);
                self.accumulate(grads, *v, gv);
            }
            Op::GatherRows { x, idx } => {
                let mut gx = Array2::zeros(self.value(*x).dim());
                for (r, &i) in idx.iter().enumerate() {
                    let mut dst = gx.row_mut(i);
                    dst += &g.row(r);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ScatterRows { x, idx } => {
                let mut gx = Array2::zeros(self.value(*x).dim());
                for (r, &i) in idx.iter().enumerate() {
                    gx.row_mut(r).assign(&g.row(i));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::PickElems { x, pos } => {
                let mut gx = Array2::zeros(self.value(*x).dim());
                for (r, &p) in pos.iter().enumerate() {
                    gx[p] += g[[r, 0]];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let mut gx = Array2::zeros(self.value(*x).dim());
                gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let data: Vec<T> = g.iter().copied().collect();
                let gx = Array2::from_shape_vec(self.value(*x).dim(), data).expect("same size");
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    self.accumulate(grads, *p, g.slice(s![.., c0..c0 + w]).to_owned());
                    c0 += w;
                }
            }
            Op::SegmentMean { x, seg } => {
                let inv = T::one() / T::of(*seg as f64);
                let xv = self.value(*x);
                let mut gx = Array2::zeros(xv.dim());
                for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                    row.assign(&(&g.row(r / seg) * inv));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let gx = Array2::from_elem(self.value(*x).dim(), g[[0, 0]]);
                self.accumulate(grads, *x, gx);
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let gx = Array2::from_elem(xv.dim(), g[[0, 0]] / T::of(xv.len() as f64));
                self.accumulate(grads, *x, gx);
            }
            Op::ColSum(x) => {
                let xv = self.value(*x);
                let mut gx = Array2::zeros(xv.dim());
                for mut row in gx.rows_mut() {
                    row.assign(&g.row(0));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Cv2(x) => {
                let xv = self.value(*x);
                let (mean, var) = mean_var(xv);
                let n = T::of(xv.len() as f64);
                let two = T::of(2.0);
                let m2 = mean * mean;
                let gx = xv.mapv(|v| {
                    g[[0, 0]] * (two * (v - mean) / (n * m2) - two * var / (m2 * mean * n))
                });
                self.accumulate(grads, *x, gx);
            }
            Op::NormalCdf { x, sigma } => {
                let gx = Zip::from(g)
                    .and(self.value(*x))
                    .map_collect(|&g, &v| g * normal_pdf(v, *sigma));
                self.accumulate(grads, *x, gx);
            }
            Op::Bce { p, target, eps } => {
                let pv = self.value(*p);
                let scale = g[[0, 0]] / T::of(pv.nrows() as f64);
                let lo = *eps;
                let hi = T::one() - *eps;
                let gx = Zip::from(pv).and(target).map_collect(|&p, &t| {
                    if p <= lo || p >= hi {
                        T::zero()
                    } else {
                        scale * (-t / p + (T::one() - t) / (T::one() - p))
                    }
                });
                self.accumulate(grads, *p, gx);
            }
            Op::DepthwiseConv3x3 { x, kernel, layout } => {
                let (gx, gk) = conv3x3_backward(self.value(*x), self.value(*kernel), g, layout);
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *kernel, gk);
            }
            Op::Focal {
                logits,
                target,
                alpha,
                beta,
                norm,
            } => {
                let scale = g[[0, 0]] / *norm;
                let gx = Zip::from(self.value(*logits))
                    .and(target)
                    .map_collect(|&z, &t| scale * focal_term(z, t, *alpha, *beta).1);
                self.accumulate(grads, *logits, gx);
            }
            Op::BoxLoss {
                pred,
                gt,
                valid,
                l1_weight,
                giou_weight,
            } => {
                let pv = self.value(*pred);
                let n_valid = valid.iter().filter(|v| **v).count();
                let mut gx = Array2::zeros(pv.dim());
                if n_valid > 0 {
                    let scale = g[[0, 0]] / T::of(n_valid as f64);
                    for r in 0..pv.nrows() {
                        if !valid[r] {
                            continue;
                        }
                        let a = [pv[[r, 0]], pv[[r, 1]], pv[[r, 2]], pv[[r, 3]]];
                        let b = [gt[[r, 0]], gt[[r, 1]], gt[[r, 2]], gt[[r, 3]]];
                        let (_, dg) = giou_with_grad(a, b);
                        for c in 0..4 {
                            let sign = (a[c] - b[c]).signum();
                            gx[[r, c]] = scale * (*l1_weight * sign - *giou_weight * dg[c]);
                        }
                    }
                }
                self.accumulate(grads, *pred, gx);
            }
        }
    }
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

// ---- kernels shared with non-taped code ---------------------------------

pub fn softmax_rows<T: Scalar>(x: &Array2<T>) -> Array2<T> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn mean_var<T: Scalar>(x: &Array2<T>) -> (T, T) {
    let n = T::of(x.len() as f64);
    let mean = x.sum() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, var)
}

/// GELU value and derivative.
fn gelu_fwd<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * du;
    (y, dy)
}

/// Focal loss term and its derivative with respect to the logit.
fn focal_term<T: Scalar>(z: T, t: T, alpha: i32, beta: i32) -> (T, T) {
    let p = sigmoid(z);
    let q = T::one() - p;
    let ln_p = -softplus(-z);
    let ln_q = -softplus(z);
    let a = T::of(alpha as f64);
    if t >= T::one() {
        let loss = -q.powi(alpha) * ln_p;
        let d = a * p * q.powi(alpha) * ln_p - q.powi(alpha + 1);
        (loss, d)
    } else {
        let w = (T::one() - t).powi(beta);
        let loss = -w * p.powi(alpha) * ln_q;
        let d = -w * (a * p.powi(alpha) * q * ln_q - p.powi(alpha + 1));
        (loss, d)
    }
}

/// Generalised IoU of boxes `a`, `b` in (cx, cy, w, h) and its gradient with
/// respect to `a`.
pub(crate) fn giou_with_grad<T: Scalar>(a: [T; 4], b: [T; 4]) -> (T, [T; 4]) {
    let half = T::of(0.5);
    let zero = T::zero();
    let (ax1, ax2) = (a[0] - half * a[2], a[0] + half * a[2]);
    let (ay1, ay2) = (a[1] - half * a[3], a[1] + half * a[3]);
    let (bx1, bx2) = (b[0] - half * b[2], b[0] + half * b[2]);
    let (by1, by2) = (b[1] - half * b[3], b[1] + half * b[3]);

    let iw_raw = ax2.min(bx2) - ax1.max(bx1);
    let ih_raw = ay2.min(by2) - ay1.max(by1);
    let iw = iw_raw.max(zero);
    let ih = ih_raw.max(zero);
    let inter = iw * ih;
    let area_a = (ax2 - ax1) * (ay2 - ay1);
    let area_b = (bx2 - bx1) * (by2 - by1);
    let union = area_a + area_b - inter;
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let enclose = cw * ch;
    let giou = inter / union - T::one() + union / enclose;

    // d/d(ax1, ax2, ay1, ay2)
    let mut d_inter = [zero; 4];
    if iw_raw > zero && ih_raw > zero {
        if ax1 > bx1 {
            d_inter[0] = -ih;
        }
        if ax2 < bx2 {
            d_inter[1] = ih;
        }
        if ay1 > by1 {
            d_inter[2] = -iw;
        }
        if ay2 < by2 {
            d_inter[3] = iw;
        }
    }
    let aw = ax2 - ax1;
    let ah = ay2 - ay1;
    let d_area = [-ah, ah, -aw, aw];
    let mut d_enc = [zero; 4];
    if ax1 < bx1 {
        d_enc[0] = -ch;
    }
    if ax2 > bx2 {
        d_enc[1] = ch;
    }
    if ay1 < by1 {
        d_enc[2] = -cw;
    }
    if ay2 > by2 {
        d_enc[3] = cw;
    }
    let mut d_corner = [zero; 4];
    for k in 0..4 {
        let du = d_area[k] - d_inter[k];
        d_corner[k] = d_inter[k] / union - inter * du / (union * union) + du / enclose
            - union * d_enc[k] / (enclose * enclose);
    }
    // corners -> (cx, cy, w, h)
    let grad = [
        d_corner[0] + d_corner[1],
        d_corner[2] + d_corner[3],
        half * (d_corner[1] - d_corner[0]),
        half * (d_corner[3] - d_corner[2]),
    ];
    (giou, grad)
}

fn conv3x3_forward<T: Scalar>(x: &Array2<T>, k: &Array2<T>, layout: &TokenLayout) -> Array2<T> {
    let ch = x.ncols();
    assert_eq!(k.dim(), (9, ch));
    let per = layout.tokens_per_sample();
    assert_eq!(x.nrows() % per, 0);
    let mut out = Array2::zeros(x.dim());
    for sample in 0..x.nrows() / per {
        for grid in layout.grids() {
            let base = sample * per + grid.offset;
            for r in 0..grid.rows {
                for c in 0..grid.cols {
                    let dst = base + r * grid.cols + c;
                    for (ki, (dr, dc)) in KERNEL_OFFSETS.iter().enumerate() {
                        let (rr, cc) = (r as isize + dr, c as isize + dc);
                        if rr < 0 || cc < 0 || rr >= grid.rows as isize || cc >= grid.cols as isize {
                            continue;
                        }
                        let src = base + rr as usize * grid.cols + cc as usize;
                        for ch_i in 0..ch {
                            out[[dst, ch_i]] += k[[ki, ch_i]] * x[[src, ch_i]];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3x3_backward<T: Scalar>(
    x: &Array2<T>,
    k: &Array2<T>,
    g: &Array2<T>,
    layout: &TokenLayout,
) -> (Array2<T>, Array2<T>) {
    let ch = x.ncols();
    let per = layout.tokens_per_sample();
    let mut gx = Array2::zeros(x.dim());
    let mut gk = Array2::zeros(k.dim());
    for sample in 0..x.nrows() / per {
        for grid in layout.grids() {
            let base = sample * per + grid.offset;
            for r in 0..grid.rows {
                for c in 0..grid.cols {
                    let dst = base + r * grid.cols + c;
                    for (ki, (dr, dc)) in KERNEL_OFFSETS.iter().enumerate() {
                        let (rr, cc) = (r as isize + dr, c as isize + dc);
                        if rr < 0 || cc < 0 || rr >= grid.rows as isize || cc >= grid.cols as isize {
                            continue;
                        }
                        let src = base + rr as usize * grid.cols + cc as usize;
                        for ch_i in 0..ch {
                            let gv = g[[dst, ch_i]];
                            gx[[src, ch_i]] += k[[ki, ch_i]] * gv;
                            gk[[ki, ch_i]] += x[[src, ch_i]] * gv;
                        }
                    }
                }
            }
        }
    }
    (gx, gk)
}

/// Row-major 3x3 neighbourhood offsets matching the kernel row order.
pub(crate) const KERNEL_OFFSETS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];
