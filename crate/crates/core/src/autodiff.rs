//! Reverse-mode differentiation over the closed operator set the pipeline
//! needs.
//!
//! Values are dense `f64` tensors with an NHWC [`Shape`]. A [`Tape`] records
//! every operator eagerly (the forward value is available immediately) and
//! [`Tape::backward`] consumes the tape, so a tape is differentiated at most
//! once.
//!
//! Subgradient conventions at kinks:
//! - `relu'(0) = 0`
//! - `clamp'(v) = 1` for `lo < v < hi`, `0` otherwise (including the bounds)
//! - `abs'(0) = sign(0) = 0`
//! - `‖v‖_p` has gradient 0 at `v = 0`

use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Tensor shape in NHWC order. Affine maps act on the last axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub const fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self { n, h, w, c }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn vector(len: usize) -> Self {
        Self::new(1, 1, 1, len)
    }

    /// A single H×W×C image.
    pub const fn image(h: usize, w: usize, c: usize) -> Self {
        Self::new(1, h, w, c)
    }

    pub const fn len(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of positions (everything except the channel axis).
    pub const fn rows(&self) -> usize {
        self.n * self.h * self.w
    }

    fn with_channels(self, c: usize) -> Self {
        Self { c, ..self }
    }
}

/// Sparse row-compressed linear map over pixel positions.
///
/// Applied channel-wise: output position `r` channel `c` is
/// `Σ_j weight(r, j) · input(j, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLinear {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseLinear {
    /// Builds from per-row entry lists; zero weights are dropped.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in &rows {
            for &(j, w) in row {
                assert!(j < cols, "column {j} out of range {cols}");
                if w != 0.0 {
                    col_idx.push(j);
                    vals.push(w);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            rows: rows.len(),
            cols,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_rows(n, (0..n).map(|i| vec![(i, 1.0)]).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.vals[span].iter().copied())
    }

    pub fn row_sum(&self, r: usize) -> f64 {
        self.row(r).map(|(_, w)| w).sum()
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Applies the map to `input` laid out as `cols × channels`.
    pub fn apply(&self, input: &[f64], channels: usize) -> Vec<f64> {
        assert_eq!(input.len(), self.cols * channels, "sparse apply size");
        let mut out = vec![0.0; self.rows * channels];
        for r in 0..self.rows {
            let dst = &mut out[r * channels..(r + 1) * channels];
            for (j, w) in self.row(r) {
                let src = &input[j * channels..(j + 1) * channels];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// Applies the transpose, accumulating into `out` (`cols × channels`).
    pub fn apply_transpose_into(&self, upstream: &[f64], channels: usize, out: &mut [f64]) {
        for r in 0..self.rows {
            let src = &upstream[r * channels..(r + 1) * channels];
            for (j, w) in self.row(r) {
                let dst = &mut out[j * channels..(j + 1) * channels];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub(crate) const fn from_index(i: usize) -> Self {
        Var(i)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Arc<Vec<f64>>),
    AddConst(usize),
    Scale(usize, f64),
    Offset(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Clamp(usize, f64, f64),
    Abs(usize),
    Affine {
        x: usize,
        w: usize,
        b: usize,
        cin: usize,
        cout: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Sparse(usize, Arc<SparseLinear>),
    Concat(usize, usize),
    Slice {
        x: usize,
        start: usize,
        len: usize,
    },
    Reshape(usize),
    Sum(usize),
    PNorm(usize, f64),
    BceLogits {
        x: usize,
        target: Arc<Vec<f64>>,
        weight: Arc<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Shape,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Append-only record of executed operators.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every tracked leaf.
#[derive(Debug, Clone)]
pub struct Grad {
    leaves: Vec<Option<Vec<f64>>>,
    shapes: Vec<Shape>,
}

impl Grad {
    /// Gradient for `var`, or zeros when `var` does not influence the output.
    pub fn wrt(&self, var: Var) -> Vec<f64> {
        match &self.leaves[var.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[var.0].len()],
        }
    }

    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.leaves[var.0].as_deref()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        assert_eq!(value.len(), 1, "not a scalar");
        value[0]
    }

    fn push(&mut self, shape: Shape, value: Vec<f64>, op: Op, tracked: bool) -> Var {
        debug_assert_eq!(shape.len(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: usize) -> bool {
        self.nodes[v].tracked
    }

    /// A differentiable input; [`Grad`] reports its gradient.
    pub fn input(&mut self, shape: Shape, value: Vec<f64>) -> Var {
        assert_eq!(shape.len(), value.len(), "input shape/value mismatch");
        self.push(shape, value, Op::Leaf, true)
    }

    /// A constant; no gradient flows into it.
    pub fn constant(&mut self, shape: Shape, value: Vec<f64>) -> Var {
        assert_eq!(shape.len(), value.len(), "constant shape/value mismatch");
        self.push(shape, value, Op::Leaf, false)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let node = &self.nodes[x.0];
        let value = node.value.iter().map(|&v| f(v)).collect();
        let (shape, tracked) = (node.shape, node.tracked);
        self.push(shape, value, op, tracked)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        assert_eq!(na.shape, nb.shape, "elementwise shape mismatch");
        let value = na.value.iter().zip(&nb.value).map(|(&p, &q)| f(p, q)).collect();
        let shape = na.shape;
        let tracked = na.tracked || nb.tracked;
        self.push(shape, value, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| p + q, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| p - q, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| p * q, Op::Mul(a.0, b.0))
    }

    /// Elementwise product with a constant array of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Arc<Vec<f64>>) -> Var {
        let node = &self.nodes[x.0];
        assert_eq!(node.value.len(), c.len(), "mul_const size mismatch");
        let value = node.value.iter().zip(c.iter()).map(|(v, k)| v * k).collect();
        let (shape, tracked) = (node.shape, node.tracked);
        self.push(shape, value, Op::MulConst(x.0, c), tracked)
    }

    /// Elementwise sum with a constant array of the same shape.
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Var {
        let node = &self.nodes[x.0];
        assert_eq!(node.value.len(), c.len(), "add_const size mismatch");
        let value = node.value.iter().zip(c).map(|(v, k)| v + k).collect();
        let (shape, tracked) = (node.shape, node.tracked);
        self.push(shape, value, Op::AddConst(x.0), tracked)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, |v| v * k, Op::Scale(x.0, k))
    }

    pub fn offset(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, |v| v + k, Op::Offset(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x.0))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x.0, lo, hi))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x.0))
    }

    /// Per-position affine map on the channel axis: `y = W·x + b`, with `W`
    /// stored row-major as `cout × cin`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.nodes[x.0].shape;
        let cin = xs.c;
        let cout = self.nodes[b.0].value.len();
        assert_eq!(self.nodes[w.0].value.len(), cin * cout, "affine weight shape");
        let (xv, wv, bv) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let rows = xs.rows();
        let mut value = vec![0.0; rows * cout];
        for r in 0..rows {
            let xin = &xv[r * cin..(r + 1) * cin];
            let out = &mut value[r * cout..(r + 1) * cout];
            for (o, (wrow, bias)) in out.iter_mut().zip(wv.chunks_exact(cin).zip(bv)) {
                *o = bias + wrow.iter().zip(xin).map(|(p, q)| p * q).sum::<f64>();
            }
        }
        let tracked = self.tracked(x.0) || self.tracked(w.0) || self.tracked(b.0);
        self.push(
            xs.with_channels(cout),
            value,
            Op::Affine {
                x: x.0,
                w: w.0,
                b: b.0,
                cin,
                cout,
            },
            tracked,
        )
    }

    /// 2-D convolution, square kernel `k`, weights laid out `[cout][ky][kx][cin]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, k: usize, stride: usize, pad: usize) -> Var {
        let xs = self.nodes[x.0].shape;
        let cin = xs.c;
        let cout = self.nodes[b.0].value.len();
        assert_eq!(
            self.nodes[w.0].value.len(),
            cout * k * k * cin,
            "conv weight shape"
        );
        assert!(xs.h + 2 * pad >= k && xs.w + 2 * pad >= k, "conv kernel larger than input");
        let ho = (xs.h + 2 * pad - k) / stride + 1;
        let wo = (xs.w + 2 * pad - k) / stride + 1;
        let (xv, wv, bv) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let mut value = vec![0.0; xs.n * ho * wo * cout];
        for n in 0..xs.n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let out_base = ((n * ho + oy) * wo + ox) * cout;
                    let out = &mut value[out_base..out_base + cout];
                    out.copy_from_slice(bv);
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= xs.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= xs.w as isize {
                                continue;
                            }
                            let in_base = ((n * xs.h + iy as usize) * xs.w + ix as usize) * cin;
                            let xin = &xv[in_base..in_base + cin];
                            for (co, o) in out.iter_mut().enumerate() {
                                let wb = ((co * k + ky) * k + kx) * cin;
                                *o += wv[wb..wb + cin]
                                    .iter()
                                    .zip(xin)
                                    .map(|(p, q)| p * q)
                                    .sum::<f64>();
                            }
                        }
                    }
                }
            }
        }
        let tracked = self.tracked(x.0) || self.tracked(w.0) || self.tracked(b.0);
        self.push(
            Shape::new(xs.n, ho, wo, cout),
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                k,
                stride,
                pad,
            },
            tracked,
        )
    }

    /// Applies a fixed sparse map over positions; output is `1 × out_h × out_w × c`.
    pub fn sparse(&mut self, x: Var, op: Arc<SparseLinear>, out_h: usize, out_w: usize) -> Var {
        let xs = self.nodes[x.0].shape;
        assert_eq!(op.cols(), xs.rows(), "sparse map input size");
        assert_eq!(op.rows(), out_h * out_w, "sparse map output size");
        let value = op.apply(&self.nodes[x.0].value, xs.c);
        let tracked = self.tracked(x.0);
        self.push(Shape::image(out_h, out_w, xs.c), value, Op::Sparse(x.0, op), tracked)
    }

    /// Channel-axis concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.nodes[a.0].shape, self.nodes[b.0].shape);
        assert_eq!(sa.rows(), sb.rows(), "concat position count");
        let (ca, cb) = (sa.c, sb.c);
        let mut value = Vec::with_capacity(sa.rows() * (ca + cb));
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        for r in 0..sa.rows() {
            value.extend_from_slice(&va[r * ca..(r + 1) * ca]);
            value.extend_from_slice(&vb[r * cb..(r + 1) * cb]);
        }
        let tracked = self.tracked(a.0) || self.tracked(b.0);
        self.push(sa.with_channels(ca + cb), value, Op::Concat(a.0, b.0), tracked)
    }

    /// Channels `start..start + len` of every position.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xs = self.nodes[x.0].shape;
        assert!(start + len <= xs.c, "channel slice out of range");
        let xv = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(xs.rows() * len);
        for r in 0..xs.rows() {
            value.extend_from_slice(&xv[r * xs.c + start..r * xs.c + start + len]);
        }
        let tracked = self.tracked(x.0);
        self.push(xs.with_channels(len), value, Op::Slice { x: x.0, start, len }, tracked)
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Var {
        let node = &self.nodes[x.0];
        assert_eq!(node.shape.len(), shape.len(), "reshape size");
        let value = node.value.clone();
        let tracked = node.tracked;
        self.push(shape, value, Op::Reshape(x.0), tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let total = node.value.iter().sum();
        let tracked = node.tracked;
        self.push(Shape::scalar(), vec![total], Op::Sum(x.0), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `‖x‖_p = (Σ|x_i|^p)^(1/p)` for `p ≥ 1`.
    pub fn pnorm(&mut self, x: Var, p: f64) -> Var {
        assert!(p >= 1.0, "p-norm order must be >= 1");
        let node = &self.nodes[x.0];
        let norm = node
            .value
            .iter()
            .map(|v| v.abs().powf(p))
            .sum::<f64>()
            .powf(1.0 / p);
        let tracked = node.tracked;
        self.push(Shape::scalar(), vec![norm], Op::PNorm(x.0, p), tracked)
    }

    /// `Σ weight_i · BCE(sigmoid(x_i), target_i)` evaluated stably from logits.
    pub fn bce_with_logits(&mut self, x: Var, target: Arc<Vec<f64>>, weight: Arc<Vec<f64>>) -> Var {
        let node = &self.nodes[x.0];
        assert_eq!(node.value.len(), target.len(), "bce target size");
        assert_eq!(node.value.len(), weight.len(), "bce weight size");
        let total = node
            .value
            .iter()
            .zip(target.iter().zip(weight.iter()))
            .map(|(&z, (&t, &w))| w * (softplus(z) - t * z))
            .sum();
        let tracked = node.tracked;
        self.push(
            Shape::scalar(),
            vec![total],
            Op::BceLogits {
                x: x.0,
                target,
                weight,
            },
            tracked,
        )
    }

    /// Reverse sweep from a scalar output. Consumes the tape.
    pub fn backward(self, output: Var) -> Result<Grad> {
        let out_len = self.nodes[output.0].value.len();
        if out_len != 1 {
            return Err(Error::Autodiff(format!(
                "backward requires a scalar output, got {out_len} elements"
            )));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);

        fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], i: usize) -> Option<&'g mut Vec<f64>> {
            if !nodes[i].tracked {
                return None;
            }
            Some(grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.len()]))
        }

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let nodes = &self.nodes;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    for k in [*a, *b] {
                        if let Some(d) = acc(&mut grads, nodes, k) {
                            d.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(d) = acc(&mut grads, nodes, *a) {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                    }
                    if let Some(d) = acc(&mut grads, nodes, *b) {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d -= g);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    if let Some(d) = acc(&mut grads, nodes, *a) {
                        for (j, d) in d.iter_mut().enumerate() {
                            *d += g[j] * vb[j];
                        }
                    }
                    if let Some(d) = acc(&mut grads, nodes, *b) {
                        for (j, d) in d.iter_mut().enumerate() {
                            *d += g[j] * va[j];
                        }
                    }
                }
                Op::MulConst(x, c) => {
                    if let Some(d) = acc(&mut grads, nodes, *x) {
                        for (j, d) in d.iter_mut().enumerate() {
                            *d += g[j] * c[j];
                        }
                    }
                }
                Op::AddConst(x) | Op::Offset(x) | Op::Reshape(x) => {
                    if let Some(d) = acc(&mut grads, nodes, *x) {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                    }
                }
                Op::Scale(x, k) => {
                    if let Some(d) = acc(&mut grads, nodes, *x) {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += k * g);
                    }
                }
                Op::Relu(x) => {
                    let xv = &nodes[*x].value;
                    if let Some(d) = acc(&mut grads, nodes, *x) {
                        for (j, d) in d.iter_mut().enumerate() {
                            if xv[j] > 0.0 {
                                *d += g[j];
                            }
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let yv = &node.value;
                    if let Some(d) = acc(&mut grads, nodes, *x) {
                        for (j, d) in d.iter_mut().enumerate() {
                            *d += g[j] * yv[j] * (1.0 - yv[j]);
                        }
                    }
                }
                Op::Tanh(x) => {
                    let yv = &node.value;
                    if let Some(d) = acc(&mut grads, nodes, *x) {
                        for (j, d) in d.iter_mut().enumerate() {
                            *d += g[j] * (1.0 - yv[j] * yv[j]);
                        }
                    }
                }
                Op::Clamp(x, lo, hi) => {
                    let xv = &nodes[*x].value;
                    if let Some(d) = acc(&mut grads, nodes, *x) {
                        for (j, d) in d.iter_mut().enumerate() {
                            if xv[j] > *lo && xv[j] < *hi {
                                *d += g[j];
                            }
                        }
                    }
                }
                Op::Abs(x) => {
                    let xv = &nodes[*x].value;
                    if let Some(d) = acc(&mut grads, nodes, *x) {
                        for (j, d) in d.iter_mut().enumerate() {
                            *d += g[j] * sign(xv[j]);
                        }
                    }
                }
                Op::Affine { x, w, b, cin, cout } => {
                    let (cin, cout) = (*cin, *cout);
                    let rows = nodes[*x].shape.rows();
                    let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
                    if let Some(d) = acc(&mut grads, nodes, *x) {
                        for r in 0..rows {
                            let gr = &g[r * cout..(r + 1) * cout];
                            let dx = &mut d[r * cin..(r + 1) * cin];
                            for (o, &go) in gr.iter().enumerate() {
                                if go == 0.0 {
                                    continue;
                                }
                                let wrow = &wv[o * cin..(o + 1) * cin];
                                dx.iter_mut().zip(wrow).for_each(|(d, w)| *d += go * w);
                            }
                        }
                    }
                    if let Some(d) = acc(&mut grads, nodes, *w) {
                        for r in 0..rows {
                            let gr = &g[r * cout..(r + 1) * cout];
                            let xin = &xv[r * cin..(r + 1) * cin];
                            for (o, &go) in gr.iter().enumerate() {
                                if go == 0.0 {
                                    continue;
                                }
                                let dw = &mut d[o * cin..(o + 1) * cin];
                                dw.iter_mut().zip(xin).for_each(|(d, x)| *d += go * x);
                            }
                        }
                    }
                    if let Some(d) = acc(&mut grads, nodes, *b) {
                        for r in 0..rows {
                            d.iter_mut()
                                .zip(&g[r * cout..(r + 1) * cout])
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    k,
                    stride,
                    pad,
                } => {
                    let (k, stride, pad) = (*k, *stride, *pad);
                    let xs = nodes[*x].shape;
                    let os = node.shape;
                    let (cin, cout) = (xs.c, os.c);
                    let track_x = nodes[*x].tracked;
                    let track_w = nodes[*w].tracked;
                    let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
                    let mut dx = track_x.then(|| vec![0.0; xv.len()]);
                    let mut dw = track_w.then(|| vec![0.0; wv.len()]);
                    for n in 0..xs.n {
                        for oy in 0..os.h {
                            for ox in 0..os.w {
                                let gb = ((n * os.h + oy) * os.w + ox) * cout;
                                let gout = &g[gb..gb + cout];
                                for ky in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= xs.h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= xs.w as isize {
                                            continue;
                                        }
                                        let ib = ((n * xs.h + iy as usize) * xs.w + ix as usize) * cin;
                                        for (co, &go) in gout.iter().enumerate() {
                                            if go == 0.0 {
                                                continue;
                                            }
                                            let wb = ((co * k + ky) * k + kx) * cin;
                                            if let Some(dx) = dx.as_mut() {
                                                dx[ib..ib + cin]
                                                    .iter_mut()
                                                    .zip(&wv[wb..wb + cin])
                                                    .for_each(|(d, w)| *d += go * w);
                                            }
                                            if let Some(dw) = dw.as_mut() {
                                                dw[wb..wb + cin]
                                                    .iter_mut()
                                                    .zip(&xv[ib..ib + cin])
                                                    .for_each(|(d, x)| *d += go * x);
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if let (Some(src), Some(d)) = (dx, acc(&mut grads, nodes, *x)) {
                        d.iter_mut().zip(&src).for_each(|(d, s)| *d += s);
                    }
                    if let (Some(src), Some(d)) = (dw, acc(&mut grads, nodes, *w)) {
                        d.iter_mut().zip(&src).for_each(|(d, s)| *d += s);
                    }
                    if let Some(d) = acc(&mut grads, nodes, *b) {
                        for chunk in g.chunks_exact(cout) {
                            d.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                        }
                    }
                }
                Op::Sparse(x, op) => {
                    let c = nodes[*x].shape.c;
                    if let Some(d) = acc(&mut grads, nodes, *x) {
                        op.apply_transpose_into(&g, c, d);
                    }
                }
                Op::Concat(a, b) => {
                    let (ca, cb) = (nodes[*a].shape.c, nodes[*b].shape.c);
                    let rows = node.shape.rows();
                    if let Some(d) = acc(&mut grads, nodes, *a) {
                        for r in 0..rows {
                            let src = &g[r * (ca + cb)..r * (ca + cb) + ca];
                            d[r * ca..(r + 1) * ca]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    if let Some(d) = acc(&mut grads, nodes, *b) {
                        for r in 0..rows {
                            let src = &g[r * (ca + cb) + ca..(r + 1) * (ca + cb)];
                            d[r * cb..(r + 1) * cb]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                }
                Op::Slice { x, start, len } => {
                    let c = nodes[*x].shape.c;
                    if let Some(d) = acc(&mut grads, nodes, *x) {
                        for (r, chunk) in g.chunks_exact(*len).enumerate() {
                            d[r * c + start..r * c + start + len]
                                .iter_mut()
                                .zip(chunk)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(d) = acc(&mut grads, nodes, *x) {
                        d.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::PNorm(x, p) => {
                    let norm = node.value[0];
                    let xv = &nodes[*x].value;
                    if norm > 0.0 {
                        if let Some(d) = acc(&mut grads, nodes, *x) {
                            let denom = norm.powf(p - 1.0);
                            for (j, d) in d.iter_mut().enumerate() {
                                let v = xv[j];
                                *d += g[0] * sign(v) * v.abs().powf(p - 1.0) / denom;
                            }
                        }
                    }
                }
                Op::BceLogits { x, target, weight } => {
                    let xv = &nodes[*x].value;
                    if let Some(d) = acc(&mut grads, nodes, *x) {
                        for (j, d) in d.iter_mut().enumerate() {
                            *d += g[0] * weight[j] * (sigmoid(xv[j]) - target[j]);
                        }
                    }
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.shape).collect();
        let leaves = grads
            .into_iter()
            .chain(std::iter::repeat_with(|| None))
            .zip(&self.nodes)
            .map(|(g, node)| match node.op {
                Op::Leaf if node.tracked => g,
                _ => None,
            })
            .collect();
        Ok(Grad { leaves, shapes })
    }
}

/// Settings for [`check_gradients`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Number of coordinates to probe (all of them if fewer exist).
    pub samples: usize,
    pub seed: u64,
    /// Relative errors are `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            samples: 50,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub worst_relative_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst_relative_error <= self.tolerance
    }

    pub fn checked(&self) -> usize {
        self.entries.len()
    }

    /// Entries whose analytic or numeric derivative is not negligible.
    pub fn nonzero(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.analytic.abs().max(e.numeric.abs()) > 1e-9)
            .count()
    }
}

/// Compares reverse-mode gradients of `f` against central differences at
/// randomly sampled coordinates of `point`. Failures are reported, not raised.
///
/// `f` receives a fresh tape and one input [`Var`] per entry of `point`, and
/// must return a scalar node.
pub fn check_gradients<F>(f: F, point: &[(Shape, Vec<f64>)], cfg: &GradCheckConfig) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |values: &[(Shape, Vec<f64>)]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|(s, v)| tape.input(*s, v.clone()))
            .collect();
        let out = f(&mut tape, &vars);
        (tape, vars, out)
    };

    let (tape, vars, out) = eval(point);
    let grad = match tape.backward(out) {
        Ok(g) => g,
        Err(_) => {
            return GradCheckReport {
                entries: Vec::new(),
                worst_relative_error: f64::INFINITY,
                tolerance: cfg.tolerance,
            }
        }
    };
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grad.wrt(*v)).collect();

    let offsets: Vec<usize> = point
        .iter()
        .scan(0, |acc, (_, v)| {
            let start = *acc;
            *acc += v.len();
            Some(start)
        })
        .collect();
    let total: usize = point.iter().map(|(_, v)| v.len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picks: Vec<usize> = if cfg.samples >= total {
        (0..total).collect()
    } else {
        sample(&mut rng, total, cfg.samples).into_vec()
    };
    picks.sort_unstable();

    let mut entries = Vec::with_capacity(picks.len());
    let mut worst: f64 = 0.0;
    for flat in picks {
        let input = offsets.iter().rposition(|&o| o <= flat).unwrap();
        let index = flat - offsets[input];
        let mut probe = point.to_vec();
        probe[input].1[index] = point[input].1[index] + cfg.step;
        let (t_plus, _, o_plus) = eval(&probe);
        probe[input].1[index] = point[input].1[index] - cfg.step;
        let (t_minus, _, o_minus) = eval(&probe);
        let numeric = (t_plus.scalar(o_plus) - t_minus.scalar(o_minus)) / (2.0 * cfg.step);
        let a = analytic[input][index];
        let denom = a.abs().max(numeric.abs()).max(cfg.floor);
        let relative_error = (a - numeric).abs() / denom;
        let relative_error = if relative_error.is_nan() {
            f64::INFINITY
        } else {
            relative_error
        };
        worst = worst.max(relative_error);
        entries.push(GradCheckEntry {
            input,
            index,
            analytic: a,
            numeric,
            relative_error,
        });
    }
    GradCheckReport {
        entries,
        worst_relative_error: worst,
        tolerance: cfg.tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_vec(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let v = tape.input(Shape::vector(7), random_vec(7, 1));
        let s = tape.sum(v);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(v), vec![1.0; 7]);
    }

    #[test]
    fn l1_residual_gradient_matches_closed_form() {
        // loss = ‖A v − y‖₁, gradient Aᵀ sign(A v − y)
        let (m, n) = (5, 4);
        let a = random_vec(m * n, 2);
        let v = random_vec(n, 3);
        let y = random_vec(m, 4);
        let mut tape = Tape::new();
        let vv = tape.input(Shape::vector(n), v.clone());
        let av = tape.constant(Shape::vector(m * n), a.clone());
        let zero = tape.constant(Shape::vector(m), vec![0.0; m]);
        let prod = tape.affine(vv, av, zero);
        let neg_y: Vec<f64> = y.iter().map(|v| -v).collect();
        let resid = tape.add_const(prod, &neg_y);
        let abs = tape.abs(resid);
        let loss = tape.sum(abs);
        let residual: Vec<f64> = tape.value(resid).to_vec();
        assert!(residual.iter().all(|r| r.abs() > 1e-6));
        let g = tape.backward(loss).unwrap().wrt(vv);
        for j in 0..n {
            let want: f64 = (0..m).map(|i| a[i * n + j] * residual[i].signum()).sum();
            assert!((g[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut tape = Tape::new();
        let v = tape.input(Shape::vector(3), vec![1.0, 2.0, 3.0]);
        let r = tape.relu(v);
        assert!(matches!(tape.backward(r), Err(Error::Autodiff(_))));
    }

    #[test]
    fn kink_conventions() {
        let mut tape = Tape::new();
        let v = tape.input(Shape::vector(3), vec![0.0, 1.0, -1.0]);
        let r = tape.relu(v);
        let a = tape.abs(v);
        let c = tape.clamp(v, 0.0, 1.0);
        let s1 = tape.sum(r);
        let s2 = tape.sum(a);
        let s3 = tape.sum(c);
        let t = tape.add(s1, s2);
        let t = tape.add(t, s3);
        let g = tape.backward(t).unwrap().wrt(v);
        // relu: [0,1,0]  abs: [0,1,-1]  clamp: [0,0,0]
        assert_eq!(g, vec![0.0, 2.0, -1.0]);
    }

    #[test]
    fn pnorm_at_zero_has_zero_gradient() {
        let mut tape = Tape::new();
        let v = tape.input(Shape::vector(4), vec![0.0; 4]);
        let n = tape.pnorm(v, 2.0);
        assert_eq!(tape.scalar(n), 0.0);
        assert_eq!(tape.backward(n).unwrap().wrt(v), vec![0.0; 4]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Shape::vector(2), vec![1.0, 2.0]);
        let x = tape.input(Shape::vector(2), vec![3.0, 4.0]);
        let p = tape.mul(c, x);
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(x), vec![1.0, 2.0]);
    }

    #[test]
    fn square_check_matches() {
        let report = check_gradients(
            |t, v| {
                let sq = t.mul(v[0], v[0]);
                t.sum(sq)
            },
            &[(Shape::scalar(), vec![3.0])],
            &GradCheckConfig::default(),
        );
        assert_eq!(report.checked(), 1);
        assert!((report.entries[0].analytic - 6.0).abs() < 1e-12);
        assert!((report.entries[0].numeric - 6.0).abs() < 1e-6);
        assert!(report.passed());
    }

    #[test]
    fn every_operator_passes_finite_differences() {
        let shape = Shape::new(2, 5, 4, 3);
        let x = random_vec(shape.len(), 10);
        let wconv = random_vec(4 * 3 * 3 * 3, 11);
        let bconv = random_vec(4, 12);
        let waff = random_vec(2 * 4, 13);
        let baff = random_vec(2, 14);
        let warp = Arc::new(SparseLinear::from_rows(
            20,
            (0..6)
                .map(|r| vec![(r, 0.25), ((r * 7) % 20, 0.5), ((r * 3 + 1) % 20, 0.25)])
                .collect(),
        ));
        let targets = Arc::new((0..2 * 3 * 2 * 2).map(|i| (i % 2) as f64).collect::<Vec<_>>());
        let weights = Arc::new(vec![0.7; targets.len()]);
        let point = vec![
            (shape, x),
            (Shape::vector(wconv.len()), wconv),
            (Shape::vector(4), bconv),
            (Shape::vector(8), waff),
            (Shape::vector(2), baff),
        ];
        let report = check_gradients(
            move |t, v| {
                let c = t.conv2d(v[0], v[1], v[2], 3, 2, 1);
                let c = t.tanh(c);
                let a = t.affine(c, v[3], v[4]);
                let s = t.sigmoid(a);
                let bce = t.bce_with_logits(a, targets.clone(), weights.clone());
                let sl = t.slice_channels(c, 1, 2);
                let cat = t.concat(sl, s);
                let q = t.mul(cat, cat);
                let r = t.relu(cat);
                let mix = t.add(q, r);
                let img = t.slice_channels(v[0], 0, 3);
                let first = t.reshape(img, Shape::new(1, 1, 40, 3));
                let flat = t.reshape(first, Shape::new(1, 40, 1, 3));
                let halves = t.slice_channels(flat, 0, 1);
                let halves = t.reshape(halves, Shape::new(1, 2, 10, 2));
                let warped = t.sparse(halves, warp.clone(), 2, 3);
                let wn = t.pnorm(warped, 2.0);
                let wn3 = t.pnorm(warped, 3.0);
                let sq = t.sum(mix);
                let ab = t.abs(warped);
                let abs_sum = t.sum(ab);
                let total = t.add(sq, bce);
                let total = t.add(total, wn);
                let total = t.add(total, wn3);
                t.add(total, abs_sum)
            },
            &point,
            &GradCheckConfig {
                samples: 200,
                seed: 5,
                ..Default::default()
            },
        );
        assert!(report.passed(), "worst {}", report.worst_relative_error);
        assert!(report.nonzero() > 100);
    }

    #[test]
    fn sparse_transpose_matches_dense() {
        let op = SparseLinear::from_rows(3, vec![vec![(0, 1.0), (2, 2.0)], vec![(1, -1.0)]]);
        let y = op.apply(&[1.0, 2.0, 3.0], 1);
        assert_eq!(y, vec![7.0, -2.0]);
        let mut back = vec![0.0; 3];
        op.apply_transpose_into(&[1.0, 1.0], 1, &mut back);
        assert_eq!(back, vec![1.0, -1.0, 2.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn loss_grads(x: &[f64], a: f64, b: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
            let build = |t: &mut Tape, which: u8| {
                let v = t.input(Shape::vector(x.len()), x.to_vec());
                let sq = t.mul(v, v);
                let l1 = t.sum(sq);
                let th = t.tanh(v);
                let l2 = t.pnorm(th, 2.0);
                let out = match which {
                    0 => {
                        let p = t.scale(l1, a);
                        let q = t.scale(l2, b);
                        t.add(p, q)
                    }
                    1 => l1,
                    _ => l2,
                };
                (v, out)
            };
            let mut res = Vec::new();
            for which in 0..3 {
                let mut t = Tape::new();
                let (v, out) = build(&mut t, which);
                res.push(t.backward(out).unwrap().wrt(v));
            }
            (res[0].clone(), res[1].clone(), res[2].clone())
        }

        proptest! {
            #[test]
            fn backward_is_linear(seed in 0u64..500, a in -2.0f64..2.0, b in -2.0f64..2.0) {
                let x = random_vec(6, seed);
                let (combined, g1, g2) = loss_grads(&x, a, b);
                for j in 0..x.len() {
                    prop_assert!((combined[j] - (a * g1[j] + b * g2[j])).abs() < 1e-12);
                }
            }

            #[test]
            fn backward_is_deterministic(seed in 0u64..500) {
                let x = random_vec(6, seed);
                let (g_a, _, _) = loss_grads(&x, 0.3, 0.9);
                let (g_b, _, _) = loss_grads(&x, 0.3, 0.9);
                prop_assert_eq!(g_a, g_b);
            }
        }
    }
}
