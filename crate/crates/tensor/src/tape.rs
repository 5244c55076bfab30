//! Append-only computation tape and reverse accumulation.
//!
//! Every operation on a [`Var`] evaluates eagerly, stores its value on the
//! [`Tape`] together with the ids of its inputs, and returns a handle to the
//! new node. Because nodes can only refer to earlier nodes, creation order is
//! a topological order and [`Tape::backward`] simply walks the nodes once in
//! reverse.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, NormStats};
use crate::tensor::Tensor;

/// Primitive operations that carry a backward rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Conv2d,
    Add,
    Sub,
    Hadamard,
    Scale,
    AddScalar,
    Sigmoid,
    Tanh,
    Abs,
    SoftmaxRows,
    MatMul,
    Concat,
    Split,
    Reshape,
    ExtractPatches,
    RestorePatches,
    LayerNorm,
    Sum,
    Mean,
}

impl OpKind {
    pub const ALL: [OpKind; 19] = [
        OpKind::Conv2d,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Hadamard,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Abs,
        OpKind::SoftmaxRows,
        OpKind::MatMul,
        OpKind::Concat,
        OpKind::Split,
        OpKind::Reshape,
        OpKind::ExtractPatches,
        OpKind::RestorePatches,
        OpKind::LayerNorm,
        OpKind::Sum,
        OpKind::Mean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Hadamard => "hadamard",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Abs => "abs",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::MatMul => "matmul",
            OpKind::Concat => "concat",
            OpKind::Split => "split",
            OpKind::Reshape => "reshape",
            OpKind::ExtractPatches => "extract_patches",
            OpKind::RestorePatches => "restore_patches",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Abs(usize),
    Softmax(usize),
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    Extract {
        x: usize,
        grid: usize,
    },
    Restore {
        x: usize,
        grid: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        stats: NormStats,
    },
    Sum(usize),
    Mean(usize),
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Hadamard,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Abs(_) => OpKind::Abs,
            Op::Softmax(_) => OpKind::SoftmaxRows,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Conv { .. } => OpKind::Conv2d,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Split,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Extract { .. } => OpKind::ExtractPatches,
            Op::Restore { .. } => OpKind::RestorePatches,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
        })
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass. Confined to a single thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Cell<Option<OpKind>>,
}

/// Handle to a value recorded on a [`Tape`].
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

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Makes the backward rule of `kind` deliberately wrong. Only useful for
    /// checking that a gradient checker notices.
    pub fn inject_fault(&self, kind: Option<OpKind>) {
        self.fault.set(kind);
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn grad_flag(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn check_owner(&self, v: Var<'_>) {
        assert!(
            std::ptr::eq(self, v.tape),
            "variable belongs to another tape"
        );
    }

    pub fn concat(&self, parts: &[Var<'_>], axis: usize) -> Result<Var<'_>> {
        let values: Vec<Rc<Tensor>> = parts
            .iter()
            .map(|p| {
                self.check_owner(*p);
                p.value()
            })
            .collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = kernels::concat(&refs, axis)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.grad_flag(&ids);
        Ok(self.push(out, Op::Concat { parts: ids, axis }, rg))
    }

    /// Reverse accumulation from a scalar root.
    ///
    /// Every node up to the root is visited exactly once, newest first.
    /// Gradients of intermediate nodes are released as soon as they have
    /// been propagated; only leaf gradients are returned.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        self.check_owner(root);
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.id].value.shape().to_vec();
        if root_shape != [1] {
            return Err(TensorError::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.id).map(|_| None).collect();
        if nodes[root.id].requires_grad {
            grads[root.id] = Some(Tensor::scalar(1.0));
        }
        let fault = self.fault.get();
        let mut leaf_grads = Vec::new();
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(mut g) = grads[id].take() else {
                continue;
            };
            if node.op.kind().is_some() && node.op.kind() == fault {
                g = g.scale(1.1);
            }
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            let needs = |i: usize| nodes[i].requires_grad;
            let mut acc = |i: usize, t: Tensor| accumulate(&nodes, &mut grads, i, t);
            match &node.op {
                Op::Leaf => {
                    leaf_grads.push((id, g));
                }
                Op::Add(a, b) => {
                    acc(*b, g.clone());
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.scale(-1.0));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        acc(*a, g.hadamard(val(*b))?);
                    }
                    if needs(*b) {
                        acc(*b, g.hadamard(val(*a))?);
                    }
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s)),
                Op::AddScalar(a) => acc(*a, g),
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, "sigmoid", |g, y| g * y * (1.0 - y))?;
                    acc(*a, d);
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, "tanh", |g, y| g * (1.0 - y * y))?;
                    acc(*a, d);
                }
                Op::Abs(a) => {
                    let d = g.zip_map(val(*a), "abs", |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })?;
                    acc(*a, d);
                }
                Op::Softmax(a) => acc(*a, kernels::softmax_backward(&node.value, &g)),
                Op::MatMul { a, b, ta, tb } => {
                    let (da, db) = kernels::matmul_backward(
                        val(*a),
                        val(*b),
                        *ta,
                        *tb,
                        &g,
                        [needs(*a), needs(*b)],
                    );
                    if let Some(da) = da {
                        acc(*a, da);
                    }
                    if let Some(db) = db {
                        acc(*b, db);
                    }
                }
                Op::Conv { x, w, b } => {
                    let grads = kernels::conv2d_backward(
                        val(*x),
                        val(*w),
                        b.is_some(),
                        &g,
                        [needs(*x), needs(*w), b.is_some_and(needs)],
                    );
                    if let Some(d) = grads.input {
                        acc(*x, d);
                    }
                    if let Some(d) = grads.kernel {
                        acc(*w, d);
                    }
                    if let (Some(b), Some(d)) = (b, grads.bias) {
                        acc(*b, d);
                    }
                }
                Op::Concat { parts, axis } => {
                    let mut start = 0;
                    for &p in parts {
                        let len = val(p).shape()[*axis];
                        if needs(p) {
                            acc(p, kernels::slice_axis(&g, *axis, start, len)?);
                        }
                        start += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let mut full = Tensor::zeros(val(*x).shape());
                    kernels::slice_scatter_add(&mut full, &g, *axis, *start);
                    acc(*x, full);
                }
                Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape())?),
                Op::Extract { x, grid } => {
                    let restored = kernels::restore_patches(&g, *grid)?;
                    acc(*x, restored.reshape(val(*x).shape())?);
                }
                Op::Restore { x, grid } => acc(*x, kernels::extract_patches(&g, *grid)?),
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    stats,
                } => {
                    let (dx, dg, db) = kernels::layer_norm_backward(val(*x), val(*gain), stats, &g);
                    acc(*x, dx);
                    acc(*gain, dg);
                    acc(*bias, db);
                }
                Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item())),
                Op::Mean(a) => {
                    let n = val(*a).len() as f64;
                    acc(*a, Tensor::full(val(*a).shape(), g.item() / n));
                }
            }
        }
        for (id, g) in leaf_grads {
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], i: usize, t: Tensor) {
    if !nodes[i].requires_grad {
        return;
    }
    match &mut grads[i] {
        Some(existing) => existing.add_assign(&t).expect("gradient shape"),
        slot @ None => *slot = Some(t),
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` is a differentiable
    /// leaf that the root depends on.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Moves the gradient out; unreachable leaves yield zeros of their shape.
    pub fn take(&mut self, v: Var<'_>) -> Tensor {
        self.grads
            .get_mut(v.id)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

// Arithmetic is fallible (shape checks), so the operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn unary(self, out: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.grad_flag(&[self.id]);
        self.tape.push(out, op, rg)
    }

    fn binary(self, other: Var<'t>, out: Tensor, op: Op) -> Var<'t> {
        self.tape.check_owner(other);
        let rg = self.tape.grad_flag(&[self.id, other.id]);
        self.tape.push(out, op, rg)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().add(&other.value())?;
        Ok(self.binary(other, out, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().sub(&other.value())?;
        Ok(self.binary(other, out, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().hadamard(&other.value())?;
        Ok(self.binary(other, out, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let out = self.value().scale(s);
        self.unary(out, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.value().map(|v| v + c);
        self.unary(out, Op::AddScalar(self.id))
    }

    /// `1 - self`.
    pub fn one_minus(self) -> Var<'t> {
        self.scale(-1.0).add_scalar(1.0)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.value().map(kernels::sigmoid);
        self.unary(out, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        let out = self.value().map(f64::tanh);
        self.unary(out, Op::Tanh(self.id))
    }

    pub fn abs(self) -> Var<'t> {
        let out = self.value().map(f64::abs);
        self.unary(out, Op::Abs(self.id))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(self) -> Var<'t> {
        let out = kernels::softmax_rows(&self.value());
        self.unary(out, Op::Softmax(self.id))
    }

    /// Matrix product of rank-2 operands.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        if self.shape().len() != 2 {
            return Err(TensorError::Rank {
                op: "matmul",
                expected: 2,
                shape: self.shape(),
            });
        }
        self.matmul_t(other, false, false)
    }

    /// `op(self)·op(other)` where `op` transposes the trailing two axes when
    /// requested. Accepts rank 2 or batched rank 3 operands.
    pub fn matmul_t(self, other: Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        let out = kernels::matmul_t(&self.value(), &other.value(), ta, tb)?;
        Ok(self.binary(
            other,
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
        ))
    }

    /// Same-padded convolution with an odd square kernel.
    pub fn conv2d(self, kernel: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let bias_value = bias.map(|b| b.value());
        let out = kernels::conv2d(&self.value(), &kernel.value(), bias_value.as_deref())?;
        self.tape.check_owner(kernel);
        let mut ids = vec![self.id, kernel.id];
        if let Some(b) = bias {
            self.tape.check_owner(b);
            ids.push(b.id);
        }
        let rg = self.tape.grad_flag(&ids);
        Ok(self.tape.push(
            out,
            Op::Conv {
                x: self.id,
                w: kernel.id,
                b: bias.map(|b| b.id),
            },
            rg,
        ))
    }

    pub fn split(self, sizes: &[usize], axis: usize) -> Result<Vec<Var<'t>>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                axis,
                rank: shape.len(),
            });
        }
        if sizes.iter().sum::<usize>() != shape[axis] || sizes.contains(&0) {
            return Err(TensorError::Split {
                sizes: sizes.to_vec(),
                len: shape[axis],
            });
        }
        let value = self.value();
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            let part = kernels::slice_axis(&value, axis, start, len)?;
            out.push(self.unary(
                part,
                Op::Slice {
                    x: self.id,
                    axis,
                    start,
                },
            ));
            start += len;
        }
        Ok(out)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    pub fn extract_patches(self, grid: usize) -> Result<Var<'t>> {
        let out = kernels::extract_patches(&self.value(), grid)?;
        Ok(self.unary(out, Op::Extract { x: self.id, grid }))
    }

    pub fn restore_patches(self, grid: usize) -> Result<Var<'t>> {
        let out = kernels::restore_patches(&self.value(), grid)?;
        Ok(self.unary(out, Op::Restore { x: self.id, grid }))
    }

    /// Per-sample normalisation over `(C, H, W)` with per-channel gain and bias.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (out, stats) = kernels::layer_norm(&self.value(), &gain.value(), &bias.value(), eps)?;
        self.tape.check_owner(gain);
        self.tape.check_owner(bias);
        let rg = self.tape.grad_flag(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                stats,
            },
            rg,
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        self.unary(out, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.value();
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        self.unary(out, Op::Mean(self.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_derivative_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = x.sigmoid();
        assert_eq!(y.value().item(), 0.5);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn bilinear_gradient_is_partner() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64 * 0.3 - 0.4));
        let bv = Tensor::from_fn(&[2, 3], |i| 1.0 - i as f64 * 0.7);
        let b = tape.leaf(bv.clone());
        let loss = a.mul(b).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap(), &bv);
    }

    #[test]
    fn gradient_accumulates_over_use_sites() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[3], 2.0));
        // sum(x + x + x*x) -> d/dx = 2 + 2x = 6
        let y = x.add(x).unwrap().add(x.mul(x).unwrap()).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0, 6.0, 6.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            tape.backward(x.sigmoid()),
            Err(TensorError::NonScalarRoot(_))
        ));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 1.5));
        let c = tape.constant(Tensor::full(&[2], 3.0));
        let y = x.mul(c).unwrap().sum();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn op_names_round_trip() {
        for k in OpKind::ALL {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
