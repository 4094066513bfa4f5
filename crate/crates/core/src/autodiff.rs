//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Every vector-Jacobian product is itself recorded on the tape using the same
//! primitive operations, so the gradients returned by [`grad`] are ordinary
//! [`Var`]s that can be differentiated again. This is what lets the meta-training
//! objective differentiate through an inner gradient step.
//!
//! ```
//! use progtta::autodiff::{grad, Tape};
//! use progtta::tensor::Matrix;
//!
//! let tape = Tape::new();
//! let theta = tape.var(Matrix::column(&[3.0, -1.0]).unwrap());
//! let loss = theta.sq_norm().scale(0.5);
//! let g = grad(loss, &[theta]).unwrap();
//! assert_eq!(g[0].value().as_slice(), &[3.0, -1.0]);
//! ```

use std::cell::RefCell;
use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{gelu_derivative, logistic, Matrix};

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `scale * a + shift`; only the scale matters for the adjoint.
    Affine {
        a: usize,
        scale: f64,
    },
    MatMul(usize, usize),
    Transpose(usize),
    /// `order`-th derivative of GELU, applied elementwise.
    Gelu {
        a: usize,
        order: u8,
    },
    Sigmoid(usize),
    Sum(usize),
    /// Broadcast of a `1 x 1` node.
    Broadcast(usize),
}

impl Op {
    fn parents(&self) -> [Option<usize>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => [Some(a), Some(b)],
            Op::Affine { a, .. }
            | Op::Transpose(a)
            | Op::Gelu { a, .. }
            | Op::Sigmoid(a)
            | Op::Sum(a)
            | Op::Broadcast(a) => [Some(a), None],
        }
    }
}

struct Node {
    value: Rc<Matrix>,
    op: Op,
}

/// Append-only record of a computation. Node ids are assigned in creation
/// order, which is a topological order of the graph.
///
/// A tape is confined to the thread that created it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records an input. Gradients can be requested with respect to any node,
    /// inputs included.
    pub fn var(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.var(Matrix::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn op(&self, id: usize) -> Op {
        self.nodes.borrow()[id].op
    }

    fn handle(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Matrix> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    /// Value of a `1 x 1` node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn binary_elementwise(self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'t> {
        self.same_tape(&other);
        let value = self.value().zip_map(&other.value(), f);
        self.tape.push(value, op)
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let value = self.value().matmul(&other.value());
        self.tape.push(value, Op::MatMul(self.id, other.id))
    }

    pub fn t(self) -> Var<'t> {
        let value = self.value().transpose();
        self.tape.push(value, Op::Transpose(self.id))
    }

    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        let value = self.value().map(|v| scale * v + shift);
        self.tape.push(value, Op::Affine { a: self.id, scale })
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.affine(s, 0.0)
    }

    pub fn gelu(self) -> Var<'t> {
        self.gelu_derivative(0)
    }

    fn gelu_derivative(self, order: u8) -> Var<'t> {
        let value = self.value().map(|v| gelu_derivative(v, order));
        self.tape.push(value, Op::Gelu { a: self.id, order })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let value = self.value().map(logistic);
        self.tape.push(value, Op::Sigmoid(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let value = Matrix::scalar(self.value().sum());
        self.tape.push(value, Op::Sum(self.id))
    }

    pub fn sq_norm(self) -> Var<'t> {
        (self * self).sum()
    }

    /// Broadcasts a `1 x 1` node to the given shape.
    pub fn broadcast(self, rows: usize, cols: usize) -> Var<'t> {
        let v = self.item();
        self.tape.push(Matrix::filled(rows, cols, v), Op::Broadcast(self.id))
    }

    /// A fresh leaf holding the same value; gradients do not flow through it.
    pub fn detach(self) -> Var<'t> {
        let value = (*self.value()).clone();
        self.tape.var(value)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary_elementwise(rhs, Op::Add(self.id, rhs.id), |a, b| a + b)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary_elementwise(rhs, Op::Sub(self.id, rhs.id), |a, b| a - b)
    }
}

/// Elementwise product.
impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary_elementwise(rhs, Op::Mul(self.id, rhs.id), |a, b| a * b)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

/// Gradients of a scalar `loss` with respect to each of `params`.
///
/// The returned nodes live on the same tape and are fully differentiable. A
/// parameter the loss does not depend on gets a zero gradient.
pub fn grad<'t>(loss: Var<'t>, params: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
    let tape = loss.tape;
    let (rows, cols) = loss.shape();
    if (rows, cols) != (1, 1) {
        return Err(Error::NonScalarLoss { rows, cols });
    }
    for p in params {
        loss.same_tape(p);
    }
    let end = loss.id;

    // Nodes that both feed the loss and depend on some parameter.
    let mut depends = vec![false; end + 1];
    for p in params {
        if p.id <= end {
            depends[p.id] = true;
        }
    }
    let first = params.iter().map(|p| p.id).min().unwrap_or(end);
    for id in first..=end {
        if !depends[id] {
            depends[id] = tape.op(id).parents().iter().flatten().any(|&q| depends[q]);
        }
    }

    let mut adjoint: Vec<Option<Var<'t>>> = vec![None; end + 1];
    if depends[end] {
        adjoint[end] = Some(tape.scalar(1.0));
    }

    for id in (0..=end).rev() {
        let Some(g) = adjoint[id] else { continue };
        let op = tape.op(id);
        let mut accumulate = |target: usize, contribution: &dyn Fn() -> Var<'t>| {
            if !depends[target] {
                return;
            }
            let c = contribution();
            adjoint[target] = Some(match adjoint[target] {
                None => c,
                Some(prev) => prev + c,
            });
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(a, &|| g);
                accumulate(b, &|| g);
            }
            Op::Sub(a, b) => {
                accumulate(a, &|| g);
                accumulate(b, &|| -g);
            }
            Op::Mul(a, b) => {
                accumulate(a, &|| g * tape.handle(b));
                accumulate(b, &|| g * tape.handle(a));
            }
            Op::Affine { a, scale, .. } => accumulate(a, &|| g.scale(scale)),
            Op::MatMul(a, b) => {
                accumulate(a, &|| g.matmul(tape.handle(b).t()));
                accumulate(b, &|| tape.handle(a).t().matmul(g));
            }
            Op::Transpose(a) => accumulate(a, &|| g.t()),
            Op::Gelu { a, order } => accumulate(a, &|| g * tape.handle(a).gelu_derivative(order + 1)),
            Op::Sigmoid(a) => {
                let s = tape.handle(id);
                accumulate(a, &|| g * (s * s.affine(-1.0, 1.0)))
            }
            Op::Sum(a) => {
                let (r, c) = tape.value(a).shape();
                accumulate(a, &|| g.broadcast(r, c))
            }
            Op::Broadcast(a) => accumulate(a, &|| g.sum()),
        }
    }

    Ok(params
        .iter()
        .map(|p| match adjoint.get(p.id).copied().flatten() {
            Some(g) => g,
            None => {
                let (r, c) = p.shape();
                tape.var(Matrix::zeros(r, c))
            }
        })
        .collect())
}

/// Gradient values only.
pub fn grad_values(loss: Var<'_>, params: &[Var<'_>]) -> Result<Vec<Matrix>> {
    Ok(grad(loss, params)?.into_iter().map(|g| (*g.value()).clone()).collect())
}

/// Central finite-difference gradient of `loss_fn` at `params`:
/// `(f(theta + step e_i) - f(theta - step e_i)) / (2 step)` for every coordinate.
pub fn finite_diff_grad(mut loss_fn: impl FnMut(&[Matrix]) -> f64, params: &[Matrix], step: f64) -> Vec<Matrix> {
    let mut work: Vec<Matrix> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        let mut g = Matrix::zeros(params[k].rows(), params[k].cols());
        for i in 0..params[k].len() {
            let orig = work[k].as_slice()[i];
            work[k].as_mut_slice()[i] = orig + step;
            let up = loss_fn(&work);
            work[k].as_mut_slice()[i] = orig - step;
            let down = loss_fn(&work);
            work[k].as_mut_slice()[i] = orig;
            g.as_mut_slice()[i] = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|, 1e-8)` over a parameter group.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff = a.sub(b).norm();
    diff / a.norm().max(b.norm()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Matrix {
        Matrix::column(v).unwrap()
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        let tape = Tape::new();
        let theta = tape.var(col(&[3.0, -1.0]));
        let loss = theta.sq_norm().scale(0.5);
        let g = grad_values(loss, &[theta]).unwrap();
        assert_eq!(g[0].as_slice(), &[3.0, -1.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let tape = Tape::new();
        let theta = tape.var(col(&[1.0, 2.0]));
        let c = tape.var(col(&[4.0]));
        let loss = c.sq_norm();
        let g = grad_values(loss, &[theta]).unwrap();
        assert_eq!(g[0].as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn parameter_created_after_loss_is_disconnected() {
        let tape = Tape::new();
        let x = tape.var(col(&[1.0]));
        let loss = x.sq_norm();
        let later = tape.var(col(&[5.0, 6.0]));
        let g = grad_values(loss, &[later, x]).unwrap();
        assert_eq!(g[0].as_slice(), &[0.0, 0.0]);
        assert_eq!(g[1].as_slice(), &[2.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.var(col(&[1.0, 2.0]));
        assert!(matches!(grad(x, &[x]), Err(Error::NonScalarLoss { rows: 2, cols: 1 })));
    }

    #[test]
    fn second_derivative_of_cubic() {
        // f(x) = x^3 -> f'' = 6x
        let tape = Tape::new();
        let x = tape.var(col(&[2.0]));
        let f = (x * x * x).sum();
        let g = grad(f, &[x]).unwrap()[0];
        assert_eq!(g.item(), 12.0);
        let h = grad(g.sum(), &[x]).unwrap()[0];
        assert_eq!(h.item(), 12.0);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f = sum((a*a) + a) -> 2a + 1
        let tape = Tape::new();
        let a = tape.var(col(&[1.5, -2.0]));
        let f = (a * a + a).sum();
        let g = grad_values(f, &[a]).unwrap();
        assert_eq!(g[0].as_slice(), &[4.0, -3.0]);
    }

    #[test]
    fn finite_diff_of_square() {
        let g = finite_diff_grad(|p| p[0].item().powi(2), &[Matrix::scalar(2.0)], 1e-5);
        assert!((g[0].item() - 4.0).abs() < 1e-9);
        let z = finite_diff_grad(|_| 7.0, &[Matrix::scalar(2.0)], 1e-5);
        assert_eq!(z[0].item(), 0.0);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let tape = Tape::new();
            let w = tape.var(Matrix::from_fn(3, 3, |r, c| (r as f64 - c as f64 * 0.7).sin()));
            let x = tape.var(col(&[0.3, -0.8, 1.1]));
            let y = w.matmul(x).gelu().sigmoid().sq_norm();
            grad_values(y, &[w, x]).unwrap()
        };
        let a = run();
        let b = run();
        for (p, q) in a.iter().zip(&b) {
            let pb: Vec<u64> = p.as_slice().iter().map(|v| v.to_bits()).collect();
            let qb: Vec<u64> = q.as_slice().iter().map(|v| v.to_bits()).collect();
            assert_eq!(pb, qb);
        }
    }
}
