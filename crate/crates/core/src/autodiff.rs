//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends one node to its
//! [`Tape`]. Nodes are only ever appended, so recording order is a topological
//! order and [`Tape::backward`] simply walks the nodes in reverse. A tape lives
//! on one thread; independent tapes share nothing.

use std::cell::{Ref, RefCell};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, gemm_acc, Layout, Tensor};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { x: usize, bias: usize },
    Scale(usize, f64),
    Relu(usize),
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    MaskedSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout { x: usize, mask: Vec<f64> },
    Gather { table: usize, ids: Vec<usize> },
    Unfold {
        x: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    Sum(usize),
    WeightedSum { x: usize, weights: Vec<f64> },
    SmoothedNll {
        logp: usize,
        targets: Vec<usize>,
        eps: f64,
    },
    KlRows { p: usize, q: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recording of operations. See the module documentation.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that evaluates values but records nothing for backward.
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, self.grad_enabled)
    }

    /// A constant input; gradients never flow into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, inputs: &[usize], op: impl FnOnce() -> Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = self.grad_enabled && inputs.iter().any(|&i| nodes[i].needs_grad);
        let op = if needs_grad { op() } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Backpropagate from a scalar node. Gradients accumulate additively over
    /// every use of a node. The tape is left untouched, so calling this twice
    /// yields identical results.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n_nodes = nodes.len();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n_nodes];
        if !nodes[loss.id].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn acc<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], id: usize) -> Option<&'g mut [f64]> {
    if !nodes[id].needs_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let (m, k) = av.dims2();
            let n = out.cols();
            let bcols = bv.cols();
            if let Some(ga) = acc(nodes, grads, *a) {
                // dA = dC · Bᵀ   (or dC · B when B was read transposed)
                let lb = if *trans_b {
                    Layout::normal(bcols)
                } else {
                    Layout::transposed(bcols)
                };
                gemm_acc(m, n, k, g, Layout::normal(n), bv.data(), lb, ga, 1.0);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                if *trans_b {
                    // B is n×k: dB = dCᵀ · A
                    gemm_acc(
                        n,
                        m,
                        k,
                        g,
                        Layout::transposed(n),
                        av.data(),
                        Layout::normal(k),
                        gb,
                        1.0,
                    );
                } else {
                    // dB = Aᵀ · dC
                    gemm_acc(
                        k,
                        m,
                        n,
                        av.data(),
                        Layout::transposed(k),
                        g,
                        Layout::normal(n),
                        gb,
                        1.0,
                    );
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            if nodes[*a].needs_grad {
                let bv = nodes[*b].value.data();
                let ga = acc(nodes, grads, *a).unwrap();
                for i in 0..ga.len() {
                    ga[i] += g[i] * bv[i];
                }
            }
            if nodes[*b].needs_grad {
                let av = nodes[*a].value.data();
                let gb = acc(nodes, grads, *b).unwrap();
                for i in 0..gb.len() {
                    gb[i] += g[i] * av[i];
                }
            }
        }
        Op::AddRow { x, bias } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            if let Some(gb) = acc(nodes, grads, *bias) {
                let cols = gb.len();
                for (i, v) in g.iter().enumerate() {
                    gb[i % cols] += v;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
            }
        }
        Op::Relu(x) => {
            let xv = nodes[*x].value.data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..gx.len() {
                    if xv[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = tensor::axis_split(out.shape(), *axis).unwrap();
            let y = out.data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax { x, axis } => {
            let (outer, len, inner) = tensor::axis_split(out.shape(), *axis).unwrap();
            let y = out.data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let total: f64 = (0..len).map(|j| g[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] += g[idx(j)] - y[idx(j)].exp() * total;
                        }
                    }
                }
            }
        }
        Op::MaskedSoftmax(x) => {
            let cols = out.cols();
            let y = out.data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for r in 0..out.rows() {
                    let s = r * cols;
                    let dot: f64 = (s..s + cols).map(|i| g[i] * y[i]).sum();
                    for i in s..s + cols {
                        gx[i] += y[i] * (g[i] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let cols = out.cols();
            let rows = out.rows();
            let gv = nodes[*gain].value.data();
            if nodes[*x].needs_grad {
                let gx = acc(nodes, grads, *x).unwrap();
                let nf = cols as f64;
                for r in 0..rows {
                    let s = r * cols;
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for c in 0..cols {
                        let d = g[s + c] * gv[c];
                        sum_d += d;
                        sum_dx += d * xhat[s + c];
                    }
                    for c in 0..cols {
                        let d = g[s + c] * gv[c];
                        gx[s + c] += rstd[r] / nf * (nf * d - sum_d - xhat[s + c] * sum_dx);
                    }
                }
            }
            if let Some(gg) = acc(nodes, grads, *gain) {
                for (i, v) in g.iter().enumerate() {
                    gg[i % cols] += v * xhat[i];
                }
            }
            if let Some(gb) = acc(nodes, grads, *bias) {
                for (i, v) in g.iter().enumerate() {
                    gb[i % cols] += v;
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for i in 0..gx.len() {
                    gx[i] += g[i] * mask[i];
                }
            }
        }
        Op::Gather { table, ids } => {
            if let Some(gt) = acc(nodes, grads, *table) {
                let cols = out.cols();
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        gt[id * cols + c] += g[r * cols + c];
                    }
                }
            }
        }
        Op::Unfold {
            x,
            kernel,
            stride,
            padding,
        } => {
            let xv = &nodes[*x].value;
            let (len, ch) = xv.dims2();
            if let Some(gx) = acc(nodes, grads, *x) {
                let out_cols = out.cols();
                for t in 0..out.rows() {
                    for k in 0..*kernel {
                        let src = (t * stride + k) as isize - *padding as isize;
                        if src < 0 || src as usize >= len {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..ch {
                            gx[src * ch + c] += g[t * out_cols + k * ch + c];
                        }
                    }
                }
            }
        }
        Op::SliceCols { x, start } => {
            let in_cols = nodes[*x].value.cols();
            let cols = out.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for r in 0..out.rows() {
                    for c in 0..cols {
                        gx[r * in_cols + start + c] += g[r * cols + c];
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let cols = out.cols();
            let mut offset = 0;
            for &p in parts {
                let pc = nodes[p].value.cols();
                if let Some(gp) = acc(nodes, grads, p) {
                    for r in 0..out.rows() {
                        for c in 0..pc {
                            gp[r * pc + c] += g[r * cols + offset + c];
                        }
                    }
                }
                offset += pc;
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::WeightedSum { x, weights } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for (v, w) in gx.iter_mut().zip(weights) {
                    *v += g[0] * w;
                }
            }
        }
        Op::SmoothedNll { logp, targets, eps } => {
            let v = nodes[*logp].value.cols();
            if let Some(gl) = acc(nodes, grads, *logp) {
                let spread = eps / v as f64;
                for (t, &y) in targets.iter().enumerate() {
                    for c in 0..v {
                        gl[t * v + c] -= g[t] * spread;
                    }
                    gl[t * v + y] -= g[t] * (1.0 - eps);
                }
            }
        }
        Op::KlRows { p, q } => {
            let pv = nodes[*p].value.data();
            let qv = nodes[*q].value.data();
            let v = nodes[*p].value.cols();
            if nodes[*p].needs_grad {
                let gp = acc(nodes, grads, *p).unwrap();
                for i in 0..gp.len() {
                    let (lp, lq) = (pv[i], qv[i]);
                    let (ep, eq) = (lp.exp(), lq.exp());
                    gp[i] += 0.5 * g[i / v] * (ep * (lp - lq) + ep - eq);
                }
            }
            if nodes[*q].needs_grad {
                let gq = acc(nodes, grads, *q).unwrap();
                for i in 0..gq.len() {
                    let (lp, lq) = (pv[i], qv[i]);
                    let (ep, eq) = (lp.exp(), lq.exp());
                    gq[i] += 0.5 * g[i / v] * (eq * (lq - lp) + eq - ep);
                }
            }
        }
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a node, or `None` when no gradient reached it.
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        self.grads[var.id]
            .as_ref()
            .map(|g| Tensor::new(var.shape(), g.clone()).expect("gradient shape"))
    }

    pub fn raw(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads[var.id].as_deref()
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn map_unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.value(self.id))
    }

    /// Value of a single-element node.
    pub fn item(&self) -> f64 {
        self.tape.value(self.id).data()[0]
    }

    fn check_tape(&self, other: Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(rhs);
        let v = tensor::matmul(&self.tape.value(self.id), &rhs.tape.value(rhs.id), false)?;
        Ok(self.tape.push(v, &[self.id, rhs.id], || Op::MatMul {
            a: self.id,
            b: rhs.id,
            trans_b: false,
        }))
    }

    /// `self · rhsᵀ`
    pub fn matmul_t(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(rhs);
        let v = tensor::matmul(&self.tape.value(self.id), &rhs.tape.value(rhs.id), true)?;
        Ok(self.tape.push(v, &[self.id, rhs.id], || Op::MatMul {
            a: self.id,
            b: rhs.id,
            trans_b: true,
        }))
    }

    fn binary(
        self,
        rhs: Var<'t>,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        self.check_tape(rhs);
        let v = {
            let a = self.tape.value(self.id);
            let b = self.tape.value(rhs.id);
            same_shape(name, &a, &b)?;
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self
            .tape
            .push(v, &[self.id, rhs.id], || op(self.id, rhs.id)))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", |a, b| a * b, Op::Mul)
    }

    /// Add a length-`cols` vector to every row.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(bias);
        let v = {
            let x = self.tape.value(self.id);
            let b = self.tape.value(bias.id);
            let cols = x.cols();
            if b.numel() != cols {
                return Err(Error::shape(format!(
                    "add_row: bias of {} entries for {cols} columns",
                    b.numel()
                )));
            }
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + b.data()[i % cols])
                .collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        Ok(self.tape.push(v, &[self.id, bias.id], || Op::AddRow {
            x: self.id,
            bias: bias.id,
        }))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = map_unary(&self.tape.value(self.id), |x| x * c);
        self.tape.push(v, &[self.id], || Op::Scale(self.id, c))
    }

    pub fn relu(self) -> Var<'t> {
        let v = map_unary(&self.tape.value(self.id), |x| x.max(0.0));
        self.tape.push(v, &[self.id], || Op::Relu(self.id))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let v = tensor::softmax(&self.tape.value(self.id), axis)?;
        Ok(self
            .tape
            .push(v, &[self.id], || Op::Softmax { x: self.id, axis }))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let v = tensor::log_softmax(&self.tape.value(self.id), axis)?;
        Ok(self
            .tape
            .push(v, &[self.id], || Op::LogSoftmax { x: self.id, axis }))
    }

    /// Row-wise softmax over the entries where `mask[r·cols + c]` is true.
    /// Rows without any allowed entry are rejected.
    pub fn masked_softmax(self, mask: Option<&[bool]>) -> Result<Var<'t>> {
        let v = {
            let x = self.tape.value(self.id);
            let (rows, cols) = x.dims2();
            if let Some(m) = mask {
                if m.len() != rows * cols {
                    return Err(Error::shape("attention mask size differs from scores"));
                }
                if let Some(r) = (0..rows).find(|&r| !m[r * cols..(r + 1) * cols].iter().any(|&b| b)) {
                    return Err(Error::invalid(format!("attention row {r} is fully masked")));
                }
            }
            let mut data = x.data().to_vec();
            for r in 0..rows {
                tensor::masked_softmax_row(
                    &mut data[r * cols..(r + 1) * cols],
                    mask.map(|m| &m[r * cols..(r + 1) * cols]),
                );
            }
            Tensor::new(x.shape().to_vec(), data)?
        };
        Ok(self.tape.push(v, &[self.id], || Op::MaskedSoftmax(self.id)))
    }

    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (v, xhat, rstd) = {
            let x = self.tape.value(self.id);
            let g = self.tape.value(gain.id);
            let b = self.tape.value(bias.id);
            let cols = x.cols();
            if g.numel() != cols || b.numel() != cols {
                return Err(Error::shape(format!(
                    "layer_norm gain/bias must have {cols} entries"
                )));
            }
            let (xhat, rstd) = tensor::layer_norm_rows(x.data(), cols, eps);
            let data = xhat
                .iter()
                .enumerate()
                .map(|(i, v)| v * g.data()[i % cols] + b.data()[i % cols])
                .collect();
            (Tensor::new(x.shape().to_vec(), data)?, xhat, rstd)
        };
        Ok(self.tape.push(v, &[self.id, gain.id, bias.id], || Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            xhat,
            rstd,
        }))
    }

    /// Inverted dropout with a mask drawn from `seed`; identity when `rate == 0`.
    pub fn dropout(self, rate: f64, seed: u64) -> Var<'t> {
        if rate <= 0.0 {
            return self;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let (v, mask) = {
            let x = self.tape.value(self.id);
            let mask: Vec<f64> = (0..x.numel())
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect();
            let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
            (Tensor::new(x.shape().to_vec(), data).unwrap(), mask)
        };
        self.tape
            .push(v, &[self.id], || Op::Dropout { x: self.id, mask })
    }

    /// Select rows of a `rows×cols` table.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let v = {
            let t = self.tape.value(self.id);
            let (rows, cols) = t.dims2();
            let mut data = Vec::with_capacity(ids.len() * cols);
            for &id in ids {
                if id >= rows {
                    return Err(Error::invalid(format!("row id {id} out of range {rows}")));
                }
                data.extend_from_slice(t.row(id));
            }
            Tensor::matrix(ids.len(), cols, data)?
        };
        Ok(self.tape.push(v, &[self.id], || Op::Gather {
            table: self.id,
            ids: ids.to_vec(),
        }))
    }

    /// im2col for a 1-D convolution over the rows of a `len×ch` input: output row
    /// `t` concatenates input rows `t·stride − padding + k` for `k < kernel`,
    /// zero outside the input.
    pub fn unfold(self, kernel: usize, stride: usize, padding: usize) -> Result<Var<'t>> {
        let v = {
            let x = self.tape.value(self.id);
            let (len, ch) = x.dims2();
            let out_len = conv_out_len(len, kernel, stride, padding)?;
            let mut data = vec![0.0; out_len * kernel * ch];
            for t in 0..out_len {
                for k in 0..kernel {
                    let src = (t * stride + k) as isize - padding as isize;
                    if src < 0 || src as usize >= len {
                        continue;
                    }
                    let dst = t * kernel * ch + k * ch;
                    data[dst..dst + ch].copy_from_slice(x.row(src as usize));
                }
            }
            Tensor::matrix(out_len, kernel * ch, data)?
        };
        Ok(self.tape.push(v, &[self.id], || Op::Unfold {
            x: self.id,
            kernel,
            stride,
            padding,
        }))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let v = {
            let x = self.tape.value(self.id);
            let (rows, cols) = x.dims2();
            if len == 0 || start + len > cols {
                return Err(Error::shape(format!(
                    "column slice {start}..{} of {cols}",
                    start + len
                )));
            }
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&x.row(r)[start..start + len]);
            }
            Tensor::matrix(rows, len, data)?
        };
        Ok(self
            .tape
            .push(v, &[self.id], || Op::SliceCols { x: self.id, start }))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let tape = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of no parts"))?
            .tape;
        let v = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| tape.value(p.id)).collect();
            let rows = vals[0].rows();
            if vals.iter().any(|v| v.rows() != rows) {
                return Err(Error::shape("concat_cols: row counts differ"));
            }
            let cols: usize = vals.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for v in &vals {
                    data.extend_from_slice(v.row(r));
                }
            }
            Tensor::matrix(rows, cols, data)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(v, &ids, || Op::ConcatCols(ids.clone())))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.tape.value(self.id).sum());
        self.tape.push(v, &[self.id], || Op::Sum(self.id))
    }

    /// `Σ_i weights[i] · self[i]`; the weights are constants.
    pub fn weighted_sum(self, weights: &[f64]) -> Result<Var<'t>> {
        let v = {
            let x = self.tape.value(self.id);
            if x.numel() != weights.len() {
                return Err(Error::shape(format!(
                    "weighted_sum: {} weights for {} values",
                    weights.len(),
                    x.numel()
                )));
            }
            Tensor::scalar(x.data().iter().zip(weights).map(|(a, w)| a * w).sum())
        };
        Ok(self.tape.push(v, &[self.id], || Op::WeightedSum {
            x: self.id,
            weights: weights.to_vec(),
        }))
    }

    /// Per-row label-smoothed negative log-likelihood of `targets` under the
    /// `T×V` log-distribution `self`:
    /// `(1 − eps)·(−log p[y]) + eps·mean_v(−log p[v])`.
    pub fn smoothed_nll(self, targets: &[usize], eps: f64) -> Result<Var<'t>> {
        let v = {
            let lp = self.tape.value(self.id);
            let (rows, vocab) = lp.dims2();
            if rows != targets.len() {
                return Err(Error::shape(format!(
                    "{} targets for {rows} distributions",
                    targets.len()
                )));
            }
            let mut out = Vec::with_capacity(rows);
            for (t, &y) in targets.iter().enumerate() {
                if y >= vocab {
                    return Err(Error::invalid(format!(
                        "target id {y} outside vocabulary of {vocab}"
                    )));
                }
                let row = lp.row(t);
                let mean = row.iter().sum::<f64>() / vocab as f64;
                out.push(-(1.0 - eps) * row[y] - eps * mean);
            }
            Tensor::vector(out)
        };
        Ok(self.tape.push(v, &[self.id], || Op::SmoothedNll {
            logp: self.id,
            targets: targets.to_vec(),
            eps,
        }))
    }

    /// Per-row bidirectional KL between two `T×V` log-distributions.
    pub fn kl_bidirectional_rows(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(other);
        let v = {
            let p = self.tape.value(self.id);
            let q = self.tape.value(other.id);
            same_shape("kl", &p, &q)?;
            let out = (0..p.rows())
                .map(|r| tensor::kl_bidirectional(p.row(r), q.row(r)))
                .collect();
            Tensor::vector(out)
        };
        Ok(self.tape.push(v, &[self.id, other.id], || Op::KlRows {
            p: self.id,
            q: other.id,
        }))
    }
}

/// Output length of a 1-D convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = len + 2 * padding;
    if padded < kernel || stride == 0 {
        return Err(Error::shape(format!(
            "convolution of length {len} with kernel {kernel}, padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}
