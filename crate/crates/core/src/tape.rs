//! Reverse-mode automatic differentiation.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to its
//! [`Tape`]. [`Tape::backward`] then walks the nodes in exact reverse order of
//! recording and accumulates gradients into every leaf that requires them.
//! Nodes whose inputs are all constants record no backward rule at all.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::error::{contract, Error, Result};
use crate::tensor::{gemm, rows_cols, Tensor};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Minimum(usize, usize),
    Maximum(usize, usize),
    AddRow { x: usize, bias: usize },
    Scale(usize, f64),
    Offset(usize),
    Abs(usize),
    Gelu(usize),
    Sigmoid(usize),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    Concat(Vec<usize>),
    SliceRows { x: usize, start: usize },
    Gather { x: usize, rows: Vec<usize> },
    Scatter { x: usize, rows: Vec<usize> },
    Reshape(usize),
    Im2Col { x: usize, h: usize, w: usize },
    Sum(usize),
    Mean(usize),
    Index { x: usize, at: usize },
    QualityFocal { logits: usize, target: Vec<f64>, gamma: f64, norm: f64 },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Minimum(a, b) | Maximum(a, b) => {
                vec![*a, *b]
            }
            AddRow { x, bias } => vec![*x, *bias],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Scale(x, _) | Offset(x) | Abs(x) | Gelu(x) | Sigmoid(x) | Softmax(x) | Reshape(x)
            | Sum(x) | Mean(x) => vec![*x],
            SliceCols { x, .. }
            | SliceRows { x, .. }
            | Gather { x, .. }
            | Scatter { x, .. }
            | Im2Col { x, .. }
            | Index { x, .. } => vec![*x],
            ConcatCols(xs) | Concat(xs) => xs.clone(),
            QualityFocal { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
///
/// A tape belongs to a single thread of computation; create a fresh one per
/// forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    marks: RefCell<Vec<&'static str>>,
    consumed: Cell<bool>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of the leaves produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` is a leaf that
    /// requires gradients and is reachable from the loss.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_leaf(Arc::new(value), requires_grad)
    }

    /// A gradient-receiving leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// A gradient-receiving leaf sharing storage with `value`.
    pub fn param(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push_leaf(value, true)
    }

    pub(crate) fn leaf_shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        self.push_leaf(value, requires_grad)
    }

    fn push_leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        debug_assert!(value.all_finite(), "non-finite forward value");
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        // constants keep no backward state
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn val(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Records a label in the op trace; used to count and audit structure.
    pub fn mark(&self, label: &'static str) {
        self.marks.borrow_mut().push(label);
    }

    pub fn marks(&self) -> Vec<&'static str> {
        self.marks.borrow().clone()
    }

    pub fn count_marks(&self, label: &str) -> usize {
        self.marks.borrow().iter().filter(|m| **m == label).count()
    }

    /// Concatenates rank-2 tensors along the column axis.
    pub fn concat_cols<'t>(&'t self, xs: &[Var<'t>]) -> Result<Var<'t>> {
        let first = xs.first().ok_or_else(|| contract!("concat_cols of nothing"))?;
        let vals: Vec<_> = xs.iter().map(|v| v.value()).collect();
        let (rows, _) = vals[0].dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(vals.len());
        for v in &vals {
            let (r, c) = v.dims2("concat_cols")?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: first.shape(),
                    rhs: v.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &c) in vals.iter().zip(&widths) {
                out.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let value = Tensor::new([rows, total], out)?;
        Ok(self.push(value, Op::ConcatCols(xs.iter().map(|v| v.id).collect())))
    }

    /// Concatenates along the leading axis.
    pub fn concat<'t>(&'t self, xs: &[Var<'t>]) -> Result<Var<'t>> {
        let first = xs.first().ok_or_else(|| contract!("concat of nothing"))?;
        let vals: Vec<_> = xs.iter().map(|v| v.value()).collect();
        let tail = vals[0].shape()[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for v in &vals {
            if v.shape()[1..] != tail[..] {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.shape(),
                    rhs: v.shape().to_vec(),
                });
            }
            lead += v.shape()[0];
            out.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat(xs.iter().map(|v| v.id).collect())))
    }

    /// Focal loss against a soft target map, evaluated on logits.
    ///
    /// Each cell contributes `|y - p|^gamma * BCE(y, p)` with `p = sigmoid(z)`;
    /// the sum is divided by `max(sum(y), 1)`. The loss is non-negative and
    /// vanishes exactly when `p == y` everywhere.
    pub fn focal_loss<'t>(&'t self, logits: Var<'t>, target: &Tensor, gamma: f64) -> Result<Var<'t>> {
        let z = logits.value();
        if z.len() != target.len() {
            return Err(Error::Shape {
                op: "focal_loss",
                lhs: z.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        if target.data().iter().any(|y| !(0.0..=1.0).contains(y)) {
            return Err(contract!("focal_loss target values must lie in [0, 1]"));
        }
        let norm = target.sum().max(1.0);
        let total: f64 = z
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| {
                let p = sigmoid(z);
                (y - p).abs().powf(gamma) * bce_logits(z, y)
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(total / norm),
            Op::QualityFocal {
                logits: logits.id,
                target: target.data().to_vec(),
                gamma,
                norm,
            },
        ))
    }

    /// Back-propagates from a scalar `loss`.
    ///
    /// Nodes are visited in exact reverse recording order. A tape supports a
    /// single backward pass.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(contract!("tape already consumed by an earlier backward pass"));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(contract!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            ));
        }
        if !root.requires_grad {
            return Err(contract!("loss does not depend on any gradient-requiring leaf"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            backprop(node, &g, &nodes, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")))
            .collect();
        Ok(Gradients { grads })
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of target `y` against `sigmoid(z)`, stable in `z`.
fn bce_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop(node: &Node, g: &[f64], nodes: &[Node], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb } => {
            let (m, n) = rows_cols(node.value.shape());
            let av = val(a);
            let bv = val(b);
            let (ar, ac) = av.rows_cols();
            let k = if ta { ar } else { ac };
            if let Some(da) = slot(grads, nodes, a) {
                if ta {
                    gemm(k, n, m, bv.data(), tb, g, true, da, true);
                } else {
                    gemm(m, n, k, g, false, bv.data(), !tb, da, true);
                }
            }
            if let Some(db) = slot(grads, nodes, b) {
                if tb {
                    gemm(n, m, k, g, true, av.data(), ta, db, true);
                } else {
                    gemm(k, m, n, av.data(), !ta, g, false, db, true);
                }
            }
        }
        &Op::Add(a, b) => {
            if let Some(d) = slot(grads, nodes, a) {
                add_into(d, g);
            }
            if let Some(d) = slot(grads, nodes, b) {
                add_into(d, g);
            }
        }
        &Op::Sub(a, b) => {
            if let Some(d) = slot(grads, nodes, a) {
                add_into(d, g);
            }
            if let Some(d) = slot(grads, nodes, b) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            if let Some(d) = slot(grads, nodes, a) {
                for ((d, g), y) in d.iter_mut().zip(g).zip(bv.data()) {
                    *d += g * y;
                }
            }
            if let Some(d) = slot(grads, nodes, b) {
                for ((d, g), x) in d.iter_mut().zip(g).zip(av.data()) {
                    *d += g * x;
                }
            }
        }
        &Op::Div(a, b) => {
            let (av, bv) = (val(a), val(b));
            if let Some(d) = slot(grads, nodes, a) {
                for ((d, g), y) in d.iter_mut().zip(g).zip(bv.data()) {
                    *d += g / y;
                }
            }
            if let Some(d) = slot(grads, nodes, b) {
                for (((d, g), x), y) in d.iter_mut().zip(g).zip(av.data()).zip(bv.data()) {
                    *d -= g * x / (y * y);
                }
            }
        }
        &Op::Minimum(a, b) | &Op::Maximum(a, b) => {
            let take_min = matches!(node.op, Op::Minimum(..));
            let (av, bv) = (val(a), val(b));
            let pick_a: Vec<bool> = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| if take_min { x <= y } else { x >= y })
                .collect();
            if let Some(d) = slot(grads, nodes, a) {
                for ((d, g), &p) in d.iter_mut().zip(g).zip(&pick_a) {
                    if p {
                        *d += g;
                    }
                }
            }
            if let Some(d) = slot(grads, nodes, b) {
                for ((d, g), &p) in d.iter_mut().zip(g).zip(&pick_a) {
                    if !p {
                        *d += g;
                    }
                }
            }
        }
        &Op::AddRow { x, bias } => {
            if let Some(d) = slot(grads, nodes, x) {
                add_into(d, g);
            }
            if let Some(d) = slot(grads, nodes, bias) {
                let c = d.len();
                for row in g.chunks(c) {
                    add_into(d, row);
                }
            }
        }
        &Op::Scale(x, s) => {
            if let Some(d) = slot(grads, nodes, x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g);
            }
        }
        &Op::Offset(x) | &Op::Reshape(x) => {
            if let Some(d) = slot(grads, nodes, x) {
                add_into(d, g);
            }
        }
        &Op::Abs(x) => {
            let xv = val(x);
            if let Some(d) = slot(grads, nodes, x) {
                for ((d, g), v) in d.iter_mut().zip(g).zip(xv.data()) {
                    *d += g * if *v > 0.0 { 1.0 } else if *v < 0.0 { -1.0 } else { 0.0 };
                }
            }
        }
        &Op::Gelu(x) => {
            let xv = val(x);
            if let Some(d) = slot(grads, nodes, x) {
                for ((d, g), v) in d.iter_mut().zip(g).zip(xv.data()) {
                    *d += g * gelu_grad(*v);
                }
            }
        }
        &Op::Sigmoid(x) => {
            let y = node.value.clone();
            if let Some(d) = slot(grads, nodes, x) {
                for ((d, g), y) in d.iter_mut().zip(g).zip(y.data()) {
                    *d += g * y * (1.0 - y);
                }
            }
        }
        &Op::Softmax(x) => {
            let y = node.value.clone();
            let (_, c) = y.rows_cols();
            if let Some(d) = slot(grads, nodes, x) {
                for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += y * (g - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let gam = val(*gamma);
            let c = gam.len();
            if let Some(d) = slot(grads, nodes, *gamma) {
                for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for ((d, g), h) in d.iter_mut().zip(grow).zip(hrow) {
                        *d += g * h;
                    }
                }
            }
            if let Some(d) = slot(grads, nodes, *beta) {
                for grow in g.chunks(c) {
                    add_into(d, grow);
                }
            }
            if let Some(d) = slot(grads, nodes, *x) {
                let mut dh = vec![0.0; c];
                for (r, (drow, grow)) in d.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                    let hrow = &xhat[r * c..(r + 1) * c];
                    for ((dh, g), gm) in dh.iter_mut().zip(grow).zip(gam.data()) {
                        *dh = g * gm;
                    }
                    let mean_dh = dh.iter().sum::<f64>() / c as f64;
                    let mean_dhh = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for ((d, dh), h) in drow.iter_mut().zip(&dh).zip(hrow) {
                        *d += rstd[r] * (dh - mean_dh - h * mean_dhh);
                    }
                }
            }
        }
        &Op::SliceCols { x, start } => {
            let (_, w) = rows_cols(node.value.shape());
            let (_, c) = val(x).rows_cols();
            if let Some(d) = slot(grads, nodes, x) {
                for (drow, grow) in d.chunks_mut(c).zip(g.chunks(w)) {
                    add_into(&mut drow[start..start + w], grow);
                }
            }
        }
        Op::ConcatCols(xs) => {
            let (_, total) = rows_cols(node.value.shape());
            let mut off = 0;
            for &x in xs {
                let (_, c) = val(x).rows_cols();
                if let Some(d) = slot(grads, nodes, x) {
                    for (drow, grow) in d.chunks_mut(c).zip(g.chunks(total)) {
                        add_into(drow, &grow[off..off + c]);
                    }
                }
                off += c;
            }
        }
        Op::Concat(xs) => {
            let mut off = 0;
            for &x in xs {
                let n = val(x).len();
                if let Some(d) = slot(grads, nodes, x) {
                    add_into(d, &g[off..off + n]);
                }
                off += n;
            }
        }
        &Op::SliceRows { x, start } => {
            let xv = val(x);
            let row = xv.len() / xv.shape()[0];
            if let Some(d) = slot(grads, nodes, x) {
                add_into(&mut d[start * row..start * row + g.len()], g);
            }
        }
        Op::Gather { x, rows } => {
            let (_, c) = val(*x).rows_cols();
            if let Some(d) = slot(grads, nodes, *x) {
                for (i, &r) in rows.iter().enumerate() {
                    add_into(&mut d[r * c..(r + 1) * c], &g[i * c..(i + 1) * c]);
                }
            }
        }
        Op::Scatter { x, rows } => {
            let (_, c) = val(*x).rows_cols();
            if let Some(d) = slot(grads, nodes, *x) {
                for (i, &r) in rows.iter().enumerate() {
                    add_into(&mut d[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }
        }
        &Op::Im2Col { x, h, w } => {
            let (_, c) = val(x).rows_cols();
            if let Some(d) = slot(grads, nodes, x) {
                for_each_tap(h, w, |cell, tap, src| {
                    let o = cell * 9 * c + tap * c;
                    add_into(&mut d[src * c..(src + 1) * c], &g[o..o + c]);
                });
            }
        }
        &Op::Sum(x) => {
            if let Some(d) = slot(grads, nodes, x) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Mean(x) => {
            if let Some(d) = slot(grads, nodes, x) {
                let s = g[0] / d.len() as f64;
                d.iter_mut().for_each(|d| *d += s);
            }
        }
        &Op::Index { x, at } => {
            if let Some(d) = slot(grads, nodes, x) {
                d[at] += g[0];
            }
        }
        Op::QualityFocal { logits, target, gamma, norm } => {
            let zv = val(*logits);
            if let Some(d) = slot(grads, nodes, *logits) {
                let scale = g[0] / norm;
                for ((d, &z), &y) in d.iter_mut().zip(zv.data()).zip(target) {
                    let p = sigmoid(z);
                    let diff = p - y;
                    let mag = diff.abs();
                    let bce = bce_logits(z, y);
                    // d|p-y|^γ/dz = γ|p-y|^(γ-1) sign(p-y) p(1-p)
                    let dmod = if mag > 0.0 {
                        gamma * mag.powf(gamma - 1.0) * diff.signum() * p * (1.0 - p)
                    } else {
                        0.0
                    };
                    *d += scale * (dmod * bce + mag.powf(*gamma) * diff);
                }
            }
        }
    }
}

/// Visits every (output cell, 3×3 tap, in-bounds source cell) triple of a
/// zero-padded 3×3 neighbourhood on an `h`×`w` grid.
fn for_each_tap(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
    for y in 0..h {
        for x in 0..w {
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    f(y * w + x, ky * 3 + kx, sy as usize * w + sx as usize);
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_shape(&self, rhs: &Var<'t>, op: &'static str) -> Result<(Arc<Tensor>, Arc<Tensor>)> {
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(Error::Shape {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok((a, b))
    }

    fn zip_with(self, rhs: Var<'t>, op: &'static str, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(&rhs, op)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(value, node))
    }

    fn unary(self, f: impl Fn(f64) -> f64, node: Op) -> Var<'t> {
        let value = self.value().map(f);
        self.tape.push(value, node)
    }

    fn matmul_impl(self, rhs: Var<'t>, tb: bool) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let err = || Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        let (m, k) = a.dims2("matmul").map_err(|_| err())?;
        let (br, bc) = b.dims2("matmul").map_err(|_| err())?;
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(err());
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), tb, &mut out, false);
        let value = Tensor::new([m, n], out)?;
        Ok(self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                ta: false,
                tb,
            },
        ))
    }

    /// `self · rhs` for rank-2 operands.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(rhs, false)
    }

    /// `self · rhsᵀ` for rank-2 operands.
    pub fn matmul_t(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(rhs, true)
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(rhs, "add", |a, b| a + b, Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(rhs, "sub", |a, b| a - b, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(rhs, "mul", |a, b| a * b, Op::Mul(self.id, rhs.id))
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(rhs, "div", |a, b| a / b, Op::Div(self.id, rhs.id))
    }

    pub fn minimum(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(rhs, "minimum", f64::min, Op::Minimum(self.id, rhs.id))
    }

    pub fn maximum(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(rhs, "maximum", f64::max, Op::Maximum(self.id, rhs.id))
    }

    /// Adds a `[C]` vector to every row of a `[..., C]` tensor.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let (_, c) = x.rows_cols();
        if b.shape() != [c] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: x.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = x
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b.data()).map(|(v, b)| v + b))
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.tape.push(value, Op::AddRow { x: self.id, bias: bias.id }))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(|v| v * s, Op::Scale(self.id, s))
    }

    /// Adds a constant to every element.
    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(|v| v + c, Op::Offset(self.id))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, Op::Abs(self.id))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        self.unary(gelu, Op::Gelu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_rows(self) -> Var<'t> {
        let x = self.value();
        let (_, c) = x.rows_cols();
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut s = 0.0;
            for &v in row {
                let e = (v - m).exp();
                s += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= s);
        }
        let value = Tensor::new(x.shape().to_vec(), out).expect("softmax shape");
        self.tape.push(value, Op::Softmax(self.id))
    }

    /// Layer normalisation over the last axis followed by `gamma * x̂ + beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        if eps <= 0.0 {
            return Err(contract!("layer_norm eps must be positive, got {eps}"));
        }
        let (x, gm, bt) = (self.value(), gamma.value(), beta.value());
        let (rows, c) = x.rows_cols();
        if gm.shape() != [c] || bt.shape() != [c] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gm.shape().to_vec(),
            });
        }
        let mut xhat = Vec::with_capacity(x.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gm.data()[j] + bt.data()[j]);
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        ))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, c) = x.dims2("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(contract!("slice_cols {start}..{} out of width {c}", start + len));
        }
        let mut out = Vec::with_capacity(rows * len);
        for row in x.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new([rows, len], out)?;
        Ok(self.tape.push(value, Op::SliceCols { x: self.id, start }))
    }

    /// Leading-axis entries `start..start + len`.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let lead = x.shape()[0];
        if len == 0 || start + len > lead {
            return Err(contract!("slice_rows {start}..{} out of {lead} rows", start + len));
        }
        let row = x.len() / lead;
        let mut shape = x.shape().to_vec();
        shape[0] = len;
        let value = Tensor::new(shape, x.data()[start * row..(start + len) * row].to_vec())?;
        Ok(self.tape.push(value, Op::SliceRows { x: self.id, start }))
    }

    /// Selects rows of a rank-2 tensor by index.
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c) = x.dims2("gather_rows")?;
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(contract!("gather_rows indices out of range for {n} rows"));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(&x.data()[r * c..(r + 1) * c]);
        }
        let value = Tensor::new([rows.len(), c], out)?;
        Ok(self.tape.push(
            value,
            Op::Gather {
                x: self.id,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Places row `i` of `self` at row `rows[i]` of a zero `[total, C]` tensor.
    pub fn scatter_rows(self, rows: &[usize], total: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c) = x.dims2("scatter_rows")?;
        if rows.len() != n {
            return Err(contract!("scatter_rows got {} indices for {n} rows", rows.len()));
        }
        let mut seen = vec![false; total];
        for &r in rows {
            if r >= total || std::mem::replace(&mut seen[r], true) {
                return Err(contract!("scatter_rows index {r} repeated or out of {total}"));
            }
        }
        let mut out = vec![0.0; total * c];
        for (i, &r) in rows.iter().enumerate() {
            out[r * c..(r + 1) * c].copy_from_slice(&x.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::new([total, c], out)?;
        Ok(self.tape.push(
            value,
            Op::Scatter {
                x: self.id,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.push(value, Op::Reshape(self.id)))
    }

    /// Unfolds the zero-padded 3×3 neighbourhood of every cell of an
    /// `h`×`w` grid stored as `[h*w, C]`, giving `[h*w, 9C]` with taps in
    /// row-major (ky, kx) order.
    pub fn im2col3x3(self, h: usize, w: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c) = x.dims2("im2col3x3")?;
        if n != h * w {
            return Err(contract!("im2col3x3: {n} rows do not form a {h}x{w} grid"));
        }
        let mut out = vec![0.0; n * 9 * c];
        for_each_tap(h, w, |cell, tap, src| {
            let o = cell * 9 * c + tap * c;
            out[o..o + c].copy_from_slice(&x.data()[src * c..(src + 1) * c]);
        });
        let value = Tensor::new([n, 9 * c], out)?;
        Ok(self.tape.push(value, Op::Im2Col { x: self.id, h, w }))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let x = self.value();
        let s = x.sum() / x.len() as f64;
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// The element at flat index `at`, as a `[1]` tensor.
    pub fn index(self, at: usize) -> Result<Var<'t>> {
        let x = self.value();
        if at >= x.len() {
            return Err(contract!("index {at} out of {} elements", x.len()));
        }
        Ok(self
            .tape
            .push(Tensor::scalar(x.data()[at]), Op::Index { x: self.id, at }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, max_rel_error};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape.to_vec(), |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let w = tape.var(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let g = tape.backward(w.sum()).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gives_twice() {
        let tape = Tape::new();
        let w = tape.var(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = w.mul(w).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let tape = Tape::new();
        let w = tape.var(Tensor::zeros([2]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
        let tape = Tape::new();
        let w = tape.var(Tensor::zeros([2]));
        let l = w.sum();
        tape.backward(l).unwrap();
        assert!(tape.backward(l).is_err());
    }

    #[test]
    fn matmul_grad_matches_fd() {
        let a = rand_tensor(&[4, 5], 1);
        let b = rand_tensor(&[5, 3], 2);
        let report = check_gradients(&[a, b], 1e-5, |_, v| Ok(v[0].matmul(v[1])?.sum())).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn transposed_matmul_grad_matches_fd() {
        let a = rand_tensor(&[3, 4], 3);
        let b = rand_tensor(&[5, 4], 4);
        let w = rand_tensor(&[3, 5], 5);
        let report = check_gradients(&[a, b], 1e-5, move |t, v| {
            let w = t.constant(w.clone());
            Ok(v[0].matmul_t(v[1])?.mul(w)?.sum())
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn elementwise_grads_match_fd() {
        let a = rand_tensor(&[3, 4], 6);
        let b = rand_tensor(&[3, 4], 7).map(|v| v + 2.5);
        let w = rand_tensor(&[3, 4], 8);
        let report = check_gradients(&[a, b], 1e-5, move |t, v| {
            let w = t.constant(w.clone());
            let x = v[0].mul(v[1])?.div(v[1].offset(0.5))?;
            let y = x.sub(v[0].scale(0.3))?.gelu().add(v[1].sigmoid())?;
            let z = y.minimum(v[0])?.maximum(v[1].scale(-0.2))?.abs();
            Ok(z.mul(w)?.sum())
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn softmax_properties() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([2, 4], vec![0.0, 0.0, 0.0, 0.0, 1000.0, 0.0, -3.0, 2.0]).unwrap());
        let y = x.softmax_rows().value();
        assert_eq!(&y.data()[..4], &[0.25; 4]);
        assert!((y.data()[4] - 1.0).abs() < 1e-12 && y.all_finite());
        // [1,2,3] against an extended-precision reference
        let x = tape.constant(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = x.softmax_rows().value();
        let want = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_and_layer_norm_grads_match_fd() {
        let x = rand_tensor(&[3, 6], 9).map(|v| 3.0 * v);
        let gamma = rand_tensor(&[6], 10);
        let beta = rand_tensor(&[6], 11);
        let w = rand_tensor(&[3, 6], 12);
        let report = check_gradients(&[x, gamma, beta], 1e-5, move |t, v| {
            let w = t.constant(w.clone());
            let y = v[0].layer_norm(v[1], v[2], 1e-5)?.softmax_rows();
            Ok(y.mul(w)?.sum())
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn layer_norm_statistics() {
        let tape = Tape::new();
        let (g, b) = (tape.constant(Tensor::ones([8])), tape.constant(Tensor::zeros([8])));
        let x = tape.constant(rand_tensor(&[2, 8], 13));
        let y = x.layer_norm(g, b, 1e-12).unwrap().value();
        for row in y.data().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| v * v).sum::<f64>() / 8.0 - mean * mean;
            assert!(mean.abs() < 1e-9);
            assert!((1.0 - 1e-6..=1.0 + 1e-12).contains(&var), "{var}");
        }
        let (g, b) = (tape.constant(Tensor::ones([2])), tape.constant(Tensor::zeros([2])));
        let y = tape
            .constant(Tensor::new([2], vec![1.0, -1.0]).unwrap())
            .layer_norm(g, b, 1e-14)
            .unwrap()
            .value();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);
        let y = tape
            .constant(Tensor::full([2], 7.0))
            .layer_norm(g, b, 1e-5)
            .unwrap()
            .value();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn structural_op_grads_match_fd() {
        let x = rand_tensor(&[6, 4], 14);
        let y = rand_tensor(&[2, 4], 15);
        let w = rand_tensor(&[9, 36], 16);
        let report = check_gradients(&[x, y], 1e-5, move |t, v| {
            let s = v[0].slice_cols(1, 2)?;
            let c = t.concat_cols(&[s, v[0].slice_cols(0, 2)?])?;
            let r = t.concat(&[c.slice_rows(2, 3)?, v[1]])?;
            let g = r.gather_rows(&[4, 0, 2])?.scatter_rows(&[8, 1, 3], 9)?;
            let im = g.im2col3x3(3, 3)?;
            let w = t.constant(w.clone());
            let z = im.mul(w)?.reshape([9 * 36])?;
            Ok(z.sum().add(z.index(5)?)?.add(r.mean())?)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn focal_loss_grad_matches_fd() {
        let z = rand_tensor(&[4, 4], 17).map(|v| 2.0 * v);
        let y = rand_tensor(&[16], 18).map(|v| 0.5 * (v + 1.0));
        for gamma in [2.0, 1.5] {
            let y = y.clone();
            let report = check_gradients(&[z.clone()], 1e-5, move |t, v| t.focal_loss(v[0], &y, gamma)).unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn focal_loss_zero_iff_exact_match() {
        let tape = Tape::new();
        let y = Tensor::new([3], vec![0.2, 0.5, 0.9]).unwrap();
        let logits = y.map(|p| (p / (1.0 - p)).ln());
        let l = tape.focal_loss(tape.constant(logits.clone()), &y, 2.0).unwrap();
        assert!(l.value().item().abs() < 1e-25);
        let l = tape
            .focal_loss(tape.constant(logits.map(|v| v + 1e-3)), &y, 2.0)
            .unwrap();
        assert!(l.value().item() > 0.0);
    }

    #[test]
    fn ops_never_mutate_inputs() {
        let tape = Tape::new();
        let a0 = rand_tensor(&[3, 3], 19);
        let a = tape.var(a0.clone());
        let _ = a.softmax_rows().gelu().matmul(a).unwrap().sum();
        assert_eq!(*a.value(), a0);
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(max_rel_error(&[0.0], &[0.0]), 0.0);
        assert!(max_rel_error(&[1.0], &[1.0 + 1e-9]) < 1e-8);
    }
}
