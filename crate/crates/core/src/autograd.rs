//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every primitive's vector-Jacobian product is itself written in terms of
//! taped primitives. A backward pass therefore appends ordinary nodes to
//! the tape it differentiates, and the gradients it returns can be
//! differentiated again. The gradient-inversion attack relies on this: its
//! loss contains `dL/dE` and is optimized with respect to the surrogate
//! weights and dummy labels.
//!
//! ```
//! use splitlab::autograd::Tape;
//! use splitlab::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(2.0));
//! let y = x.mul(x).unwrap().mul(x).unwrap();
//! let dy = tape.gradients_graph(y, &[x]).unwrap()[0];
//! let d2y = tape.gradients(dy, &[x]).unwrap();
//! assert_eq!(dy.value().item().unwrap(), 12.0);
//! assert_eq!(d2y[0].item().unwrap(), 12.0);
//! ```

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Elementwise nonlinearity applied after a dense layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        })
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    AddBias(usize, usize),
    SumRows(usize),
    BroadcastRows(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Rc<Tensor>),
    Scale(usize, f64),
    AddScalar(usize),
    SumAll(usize),
    Expand(usize),
    Relu(usize),
    Tanh(usize),
    SelectCol(usize, usize),
    PadCol(usize, usize),
}

struct Node {
    op: Op,
    value: Rc<Tensor>,
    requires_grad: bool,
}

/// An append-only record of primitive operations.
///
/// Node ids are assigned in creation order, so every node's inputs precede
/// it. A tape is confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}({r}x{c})", self.id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a tensor that gradients can be taken with respect to.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, true)
    }

    /// Records a tensor that is never differentiated.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, false)
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value: Rc::new(value),
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

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    fn check_owner(&self, v: Var<'_>) -> Result<()> {
        if std::ptr::eq(v.tape, self) && v.id < self.len() {
            Ok(())
        } else {
            Err(Error::ForeignVariable(v.id))
        }
    }

    /// Gradients of a scalar `loss` with respect to each of `wrt`, as plain
    /// tensors. Nodes recorded while differentiating are discarded.
    pub fn gradients(&self, loss: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>> {
        let mark = self.len();
        let result = self
            .backward(loss, wrt)
            .map(|grads| grads.iter().map(|g| (*g.value()).clone()).collect());
        self.nodes.borrow_mut().truncate(mark);
        result
    }

    /// Gradients of a scalar `loss` that stay on the tape, so they can be
    /// differentiated again.
    pub fn gradients_graph<'t>(&'t self, loss: Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        self.backward(loss, wrt)
    }

    fn backward<'t>(&'t self, loss: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Var<'t>>> {
        self.check_owner(loss)?;
        for w in wrt {
            self.check_owner(*w)?;
        }
        let (r, c) = loss.shape();
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss(r, c));
        }

        let mut grads: Vec<Option<Var<'t>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(self.constant(Tensor::scalar(1.0)));

        for id in (0..=loss.id).rev() {
            let Some(upstream) = grads[id] else { continue };
            let op = {
                let nodes = self.nodes.borrow();
                if !nodes[id].requires_grad {
                    continue;
                }
                nodes[id].op.clone()
            };
            for (input, g) in self.vjp(id, &op, upstream)? {
                grads[input] = Some(match grads[input] {
                    None => g,
                    Some(prev) => prev.add(g)?,
                });
            }
        }

        wrt.iter()
            .map(|w| {
                Ok(match grads.get(w.id).copied().flatten() {
                    Some(g) => g,
                    None => {
                        let (r, c) = w.shape();
                        self.constant(Tensor::zeros(r, c))
                    }
                })
            })
            .collect()
    }

    /// Vector-Jacobian products of node `id` for each input that needs a
    /// gradient, expressed as new taped nodes.
    fn vjp<'t>(&'t self, id: usize, op: &Op, g: Var<'t>) -> Result<Vec<(usize, Var<'t>)>> {
        let mut out = Vec::with_capacity(2);
        let wants = |i: usize| self.requires_grad(i);
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(a) {
                    out.push((a, g.matmul(self.var(b).transpose()?)?));
                }
                if wants(b) {
                    out.push((b, self.var(a).transpose()?.matmul(g)?));
                }
            }
            Op::Transpose(a) => out.push((a, g.transpose()?)),
            Op::AddBias(x, b) => {
                if wants(x) {
                    out.push((x, g));
                }
                if wants(b) {
                    out.push((b, g.sum_rows()?));
                }
            }
            Op::SumRows(a) => {
                let rows = self.value(a).rows();
                out.push((a, g.broadcast_rows(rows)?));
            }
            Op::BroadcastRows(a) => out.push((a, g.sum_rows()?)),
            Op::Add(a, b) => {
                if wants(a) {
                    out.push((a, g));
                }
                if wants(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    out.push((a, g));
                }
                if wants(b) {
                    out.push((b, g.scale(-1.0)?));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    out.push((a, g.mul(self.var(b))?));
                }
                if wants(b) {
                    out.push((b, g.mul(self.var(a))?));
                }
            }
            Op::MulConst(a, ref c) => out.push((a, g.mul_const(Rc::clone(c))?)),
            Op::Scale(a, s) => out.push((a, g.scale(s)?)),
            Op::AddScalar(a) => out.push((a, g)),
            Op::SumAll(a) => {
                let (r, c) = self.value(a).shape();
                out.push((a, g.expand(r, c)?));
            }
            Op::Expand(a) => out.push((a, g.sum_all()?)),
            Op::Relu(a) => {
                // Second derivative is zero everywhere; the kink at 0 takes
                // subgradient 0.
                let mask = self.value(a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                out.push((a, g.mul_const(Rc::new(mask))?));
            }
            Op::Tanh(a) => {
                let y = self.var(id);
                let slope = y.mul(y)?.scale(-1.0)?.add_scalar(1.0)?;
                out.push((a, g.mul(slope)?));
            }
            Op::SelectCol(a, col) => {
                let width = self.value(a).cols();
                out.push((a, g.pad_col(col, width)?));
            }
            Op::PadCol(a, col) => out.push((a, g.select_col(col)?)),
        }
        Ok(out)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn same_tape(&self, other: Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::ForeignVariable(other.id))
        }
    }

    fn emit(&self, op: Op, value: Tensor, name: &'static str, inputs: &[usize]) -> Result<Var<'t>> {
        value.ensure_finite(name)?;
        let requires = inputs.iter().any(|&i| self.tape.requires_grad(i));
        Ok(self.tape.push(op, value, requires))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs)?;
        let v = self.value().matmul(&rhs.value())?;
        self.emit(Op::MatMul(self.id, rhs.id), v, "matmul", &[self.id, rhs.id])
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.value().transpose();
        self.emit(Op::Transpose(self.id), v, "transpose", &[self.id])
    }

    /// Row-broadcast addition of a `1 x cols` bias.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(bias)?;
        let v = self.value().add_bias(&bias.value())?;
        self.emit(
            Op::AddBias(self.id, bias.id),
            v,
            "add_bias",
            &[self.id, bias.id],
        )
    }

    pub fn sum_rows(self) -> Result<Var<'t>> {
        let v = self.value().sum_rows();
        self.emit(Op::SumRows(self.id), v, "sum_rows", &[self.id])
    }

    pub fn broadcast_rows(self, rows: usize) -> Result<Var<'t>> {
        let v = self.value().broadcast_rows(rows)?;
        self.emit(Op::BroadcastRows(self.id), v, "broadcast_rows", &[self.id])
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs)?;
        let v = self.value().zip_map(&rhs.value(), "add", |a, b| a + b)?;
        self.emit(Op::Add(self.id, rhs.id), v, "add", &[self.id, rhs.id])
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs)?;
        let v = self.value().zip_map(&rhs.value(), "sub", |a, b| a - b)?;
        self.emit(Op::Sub(self.id, rhs.id), v, "sub", &[self.id, rhs.id])
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs)?;
        let v = self.value().zip_map(&rhs.value(), "mul", |a, b| a * b)?;
        self.emit(Op::Mul(self.id, rhs.id), v, "mul", &[self.id, rhs.id])
    }

    /// Elementwise product with a tensor that is not on the tape.
    pub fn mul_const(self, c: Rc<Tensor>) -> Result<Var<'t>> {
        let v = self.value().zip_map(&c, "mul_const", |a, b| a * b)?;
        self.emit(Op::MulConst(self.id, c), v, "mul_const", &[self.id])
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        let v = self.value().scale(s);
        self.emit(Op::Scale(self.id, s), v, "scale", &[self.id])
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x + s);
        self.emit(Op::AddScalar(self.id), v, "add_scalar", &[self.id])
    }

    /// Sum of every entry, as a 1x1 tensor.
    pub fn sum_all(self) -> Result<Var<'t>> {
        let v = Tensor::scalar(self.value().sum());
        self.emit(Op::SumAll(self.id), v, "sum_all", &[self.id])
    }

    /// Broadcasts a 1x1 tensor to `rows x cols`.
    pub fn expand(self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let v = self.value().item()?;
        self.emit(
            Op::Expand(self.id),
            Tensor::filled(rows, cols, v),
            "expand",
            &[self.id],
        )
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let v = self.value().map(|x| x.max(0.0));
        self.emit(Op::Relu(self.id), v, "relu", &[self.id])
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        let v = self.value().map(f64::tanh);
        self.emit(Op::Tanh(self.id), v, "tanh", &[self.id])
    }

    pub fn activation(self, kind: Activation) -> Result<Var<'t>> {
        match kind {
            Activation::Relu => self.relu(),
            Activation::Tanh => self.tanh(),
            Activation::Identity => Ok(self),
        }
    }

    pub fn select_col(self, col: usize) -> Result<Var<'t>> {
        let v = self.value().select_col(col)?;
        self.emit(Op::SelectCol(self.id, col), v, "select_col", &[self.id])
    }

    pub fn pad_col(self, col: usize, width: usize) -> Result<Var<'t>> {
        let v = self.value().pad_col(col, width)?;
        self.emit(Op::PadCol(self.id, col), v, "pad_col", &[self.id])
    }
}

/// Mean squared error over every entry, as a 1x1 variable.
pub fn mse_loss<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    let (r, c) = pred.shape();
    if (r, c) != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            lhs: (r, c),
            rhs: target.shape(),
        });
    }
    let diff = pred.sub(target)?;
    diff.mul(diff)?.sum_all()?.scale(1.0 / (r * c) as f64)
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn numeric_gradient(
    x: &Tensor,
    h: f64,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<Tensor> {
    let mut out = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.rows(), x.cols(), out)
}
