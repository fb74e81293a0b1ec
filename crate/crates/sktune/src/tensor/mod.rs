//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] is a Wengert list: ops record one node per call (inputs, output,
//! local-gradient rule) and [`Tape::backward`] replays the list in reverse,
//! visiting every node exactly once. Tapes are rebuilt on every forward pass;
//! a tensor that is not attached to a tape is plain immutable data.
//!
//! All reductions run sequentially left-to-right so reruns under a fixed seed
//! are bit-identical.

mod gradcheck;
mod ops;

pub use gradcheck::grad_check;
pub use ops::*;

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Number of scalars described by a shape.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    /// (tape id, node index) of the op that produced this tensor, if any.
    node: Option<(u64, usize)>,
}

/// Shared handle to an n-dimensional row-major f64 array.
///
/// Cloning a `Tensor` clones the handle, not the data; parameters stay alive
/// across training steps while tapes come and go.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    /// Plain (non-trainable) tensor from row-major data.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape: shape.to_vec(),
                data,
                requires_grad: false,
                grad: None,
                node: None,
            })),
        })
    }

    /// Trainable tensor (`requires_grad = true`).
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(vec![0.0; numel(shape)], shape).expect("zeros shape")
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v], &[1]).expect("scalar shape")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn ndim(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Borrow the raw data without copying.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        debug_assert_eq!(inner.data.len(), 1, "item() on non-scalar");
        inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, yes: bool) {
        self.inner.borrow_mut().requires_grad = yes;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Mutate the raw data in place (optimizer steps, finite differences).
    pub fn apply_data<F: FnOnce(&mut [f64])>(&self, f: F) {
        f(&mut self.inner.borrow_mut().data);
    }

    /// Same underlying allocation.
    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Detached copy of the data as a fresh non-trainable tensor.
    pub fn detached(&self) -> Tensor {
        Tensor::from_vec(self.to_vec(), &self.shape()).expect("detached shape")
    }

    pub fn all_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }

    fn node(&self) -> Option<(u64, usize)> {
        self.inner.borrow().node
    }

    fn set_node(&self, tape_id: u64, idx: usize) {
        self.inner.borrow_mut().node = Some((tape_id, idx));
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        debug_assert_eq!(inner.data.len(), g.len());
        match inner.grad.as_mut() {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => inner.grad = Some(g.to_vec()),
        }
    }
}

/// Local-gradient rule of one recorded operation.
#[derive(Debug, Clone)]
pub(crate) enum Rule {
    Add,
    AddBias,
    Scale(f64),
    Matmul,
    Transpose,
    Concat { axis: usize },
    Narrow { axis: usize, start: usize },
    Reshape,
    Softmax { axis: usize },
    LayerNorm { eps: f64 },
    Gelu,
    Gather { ids: Vec<usize> },
    Sum,
    Mean,
    CrossEntropy { labels: Vec<usize> },
}

struct Node {
    inputs: Vec<Tensor>,
    output: Tensor,
    rule: Rule,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Wengert list recording one forward pass.
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a node if any input is trainable; otherwise the output stays a
    /// plain constant and backward never visits it.
    pub(crate) fn record(&self, rule: Rule, inputs: &[&Tensor], output: &Tensor) {
        if !inputs.iter().any(|t| t.requires_grad()) {
            return;
        }
        output.set_requires_grad(true);
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        output.set_node(self.id, idx);
        nodes.push(Node {
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            output: output.clone(),
            rule,
        });
    }

    /// Reverse sweep from `loss`, populating `grad` on every trainable tensor
    /// reachable from it. Gradients accumulate additively across uses.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        let (tape_id, last) = loss.node().ok_or(Error::NoTape)?;
        if tape_id != self.id {
            return Err(Error::NoTape);
        }
        if loss.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        loss.accumulate_grad(&[1.0]);
        let nodes = self.nodes.borrow();
        for node in nodes[..=last].iter().rev() {
            let go = match node.output.grad() {
                Some(g) => g,
                None => continue,
            };
            backprop_node(node, &go);
        }
        Ok(())
    }
}

fn backprop_node(node: &Node, go: &[f64]) {
    match &node.rule {
        Rule::Add => {
            node.inputs[0].accumulate_grad(go);
            node.inputs[1].accumulate_grad(go);
        }
        Rule::AddBias => {
            let a = &node.inputs[0];
            let b = &node.inputs[1];
            a.accumulate_grad(go);
            if b.requires_grad() {
                let d = b.len();
                let mut gb = vec![0.0; d];
                for (i, v) in go.iter().enumerate() {
                    gb[i % d] += v;
                }
                b.accumulate_grad(&gb);
            }
        }
        Rule::Scale(c) => {
            let ga: Vec<f64> = go.iter().map(|v| c * v).collect();
            node.inputs[0].accumulate_grad(&ga);
        }
        Rule::Matmul => backprop_matmul(node, go),
        Rule::Transpose => {
            let shape = node.output.shape();
            let (r, c) = (shape[0], shape[1]);
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[j * r + i] = go[i * c + j];
                }
            }
            node.inputs[0].accumulate_grad(&ga);
        }
        Rule::Concat { axis } => {
            let a = &node.inputs[0];
            let b = &node.inputs[1];
            let a_shape = a.shape();
            let b_shape = b.shape();
            let outer = numel(&a_shape[..*axis]);
            let inner: usize = a_shape[*axis + 1..].iter().product();
            let a_block = a_shape[*axis] * inner;
            let b_block = b_shape[*axis] * inner;
            let mut ga = vec![0.0; a.len()];
            let mut gb = vec![0.0; b.len()];
            for o in 0..outer {
                let base = o * (a_block + b_block);
                ga[o * a_block..(o + 1) * a_block].copy_from_slice(&go[base..base + a_block]);
                gb[o * b_block..(o + 1) * b_block]
                    .copy_from_slice(&go[base + a_block..base + a_block + b_block]);
            }
            a.accumulate_grad(&ga);
            b.accumulate_grad(&gb);
        }
        Rule::Narrow { axis, start } => {
            let a = &node.inputs[0];
            let a_shape = a.shape();
            let out_shape = node.output.shape();
            let outer = numel(&a_shape[..*axis]);
            let inner: usize = a_shape[*axis + 1..].iter().product();
            let a_block = a_shape[*axis] * inner;
            let o_block = out_shape[*axis] * inner;
            let mut ga = vec![0.0; a.len()];
            for o in 0..outer {
                let dst = o * a_block + start * inner;
                ga[dst..dst + o_block].copy_from_slice(&go[o * o_block..(o + 1) * o_block]);
            }
            a.accumulate_grad(&ga);
        }
        Rule::Reshape => {
            node.inputs[0].accumulate_grad(go);
        }
        Rule::Softmax { axis } => {
            let y = node.output.data();
            let shape = node.output.shape();
            let axis_len = shape[*axis];
            let inner: usize = shape[*axis + 1..].iter().product();
            let outer = numel(&shape[..*axis]);
            let mut ga = vec![0.0; y.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let base = o * axis_len * inner + j;
                    let mut dot = 0.0;
                    for k in 0..axis_len {
                        let idx = base + k * inner;
                        dot += go[idx] * y[idx];
                    }
                    for k in 0..axis_len {
                        let idx = base + k * inner;
                        ga[idx] = y[idx] * (go[idx] - dot);
                    }
                }
            }
            drop(y);
            node.inputs[0].accumulate_grad(&ga);
        }
        Rule::LayerNorm { eps } => backprop_layer_norm(node, go, *eps),
        Rule::Gelu => {
            let x = node.inputs[0].to_vec();
            let k = (2.0 / std::f64::consts::PI).sqrt();
            let ga: Vec<f64> = go
                .iter()
                .zip(&x)
                .map(|(g, &v)| {
                    let u = k * (v + 0.044715 * v * v * v);
                    let t = u.tanh();
                    let sech2 = 1.0 - t * t;
                    let du = k * (1.0 + 3.0 * 0.044715 * v * v);
                    g * (0.5 * (1.0 + t) + 0.5 * v * sech2 * du)
                })
                .collect();
            node.inputs[0].accumulate_grad(&ga);
        }
        Rule::Gather { ids } => {
            let table = &node.inputs[0];
            if table.requires_grad() {
                let d = table.shape()[1];
                let mut gt = vec![0.0; table.len()];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += go[row * d + j];
                    }
                }
                table.accumulate_grad(&gt);
            }
        }
        Rule::Sum => {
            let ga = vec![go[0]; node.inputs[0].len()];
            node.inputs[0].accumulate_grad(&ga);
        }
        Rule::Mean => {
            let n = node.inputs[0].len() as f64;
            let ga = vec![go[0] / n; node.inputs[0].len()];
            node.inputs[0].accumulate_grad(&ga);
        }
        Rule::CrossEntropy { labels } => {
            let logits = &node.inputs[0];
            let shape = logits.shape();
            let (b, c) = (shape[0], shape[1]);
            let ld = logits.to_vec();
            let mut gl = vec![0.0; b * c];
            for (i, &y) in labels.iter().enumerate() {
                let row = &ld[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for v in row {
                    denom += (v - max).exp();
                }
                for j in 0..c {
                    let p = (row[j] - max).exp() / denom;
                    let onehot = if j == y { 1.0 } else { 0.0 };
                    gl[i * c + j] = go[0] * (p - onehot) / b as f64;
                }
            }
            logits.accumulate_grad(&gl);
        }
    }
}

fn backprop_matmul(node: &Node, go: &[f64]) {
    let a = &node.inputs[0];
    let b = &node.inputs[1];
    let (ba, m, k) = ops::batch_dims(&a.shape());
    let (bb, k2, p) = ops::batch_dims(&b.shape());
    debug_assert_eq!(k, k2);
    let bo = ba.max(bb);
    let ad = a.to_vec();
    let bd = b.to_vec();
    let mut ga = vec![0.0; ad.len()];
    let mut gb = vec![0.0; bd.len()];
    for batch in 0..bo {
        let ao = if ba == 1 { 0 } else { batch * m * k };
        let bo_off = if bb == 1 { 0 } else { batch * k * p };
        let go_off = batch * m * p;
        // ga += go . b^T
        for i in 0..m {
            for j in 0..k {
                let mut s = 0.0;
                for q in 0..p {
                    s += go[go_off + i * p + q] * bd[bo_off + j * p + q];
                }
                ga[ao + i * k + j] += s;
            }
        }
        // gb += a^T . go
        for i in 0..k {
            for j in 0..p {
                let mut s = 0.0;
                for q in 0..m {
                    s += ad[ao + q * k + i] * go[go_off + q * p + j];
                }
                gb[bo_off + i * p + j] += s;
            }
        }
    }
    a.accumulate_grad(&ga);
    b.accumulate_grad(&gb);
}

fn backprop_layer_norm(node: &Node, go: &[f64], eps: f64) {
    let x = &node.inputs[0];
    let gamma = &node.inputs[1];
    let beta = &node.inputs[2];
    let d = gamma.len();
    let xd = x.to_vec();
    let gd = gamma.to_vec();
    let rows = xd.len() / d;
    let mut gx = vec![0.0; xd.len()];
    let mut ggamma = vec![0.0; d];
    let mut gbeta = vec![0.0; d];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let go_row = &go[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let std = (var + eps).sqrt();
        let mut dxhat = vec![0.0; d];
        let mut dxhat_sum = 0.0;
        let mut dxhat_xhat_sum = 0.0;
        for j in 0..d {
            let xhat = (row[j] - mean) / std;
            ggamma[j] += go_row[j] * xhat;
            gbeta[j] += go_row[j];
            dxhat[j] = go_row[j] * gd[j];
            dxhat_sum += dxhat[j];
            dxhat_xhat_sum += dxhat[j] * xhat;
        }
        let n = d as f64;
        for j in 0..d {
            let xhat = (row[j] - mean) / std;
            gx[r * d + j] = (dxhat[j] - dxhat_sum / n - xhat * dxhat_xhat_sum / n) / std;
        }
    }
    x.accumulate_grad(&gx);
    gamma.accumulate_grad(&ggamma);
    beta.accumulate_grad(&gbeta);
}
