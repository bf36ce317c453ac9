//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s in
//! evaluation order. [`Var::backward`] walks the recording once in reverse
//! and returns the gradient of a scalar output with respect to every node.
//!
//! ```
//! use multirate::autodiff::Tape;
//! use multirate::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = x.mul(&x).unwrap();
//! let grads = y.backward().unwrap();
//! assert_eq!(grads.wrt(&x).item(), 6.0);
//! ```

use std::cell::RefCell;

use crate::tensor::{kernels, Tensor, TensorError};

/// Base value at which the derivative of a fractional power is evaluated
/// when the recorded base is smaller.
pub const POW_GRAD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// `[n,m] + [1,m]`
    AddRow(usize, usize),
    /// `[n,m] * [1,m]`
    MulRow(usize, usize),
    /// `[n,m] * [n,1]`
    MulCol(usize, usize),
    /// `[n,m] * []`
    MulScalar(usize, usize),
    Pow(usize, f64),
    Exp(usize),
    Log(usize),
    Softplus(usize),
    Relu(usize),
    Scale(usize, f64),
    Offset(usize),
    Sum(usize),
    Mean(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    Transpose(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of primitive operations, in topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

/// Gradients of one scalar output with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for `var`, zero-filled when the output does not depend on it.
    pub fn wrt(&self, var: &Var<'_>) -> Tensor {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.id]),
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise softplus `ln(1 + e^x)`, evaluated without overflow.
pub fn softplus_scalar(x: f64) -> f64 {
    softplus(x)
}

/// Inverse of softplus for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    // ln(e^y - 1) = y + ln(1 - e^{-y})
    y + (-(-y).exp()).ln_1p()
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

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Records an input whose gradient is not needed. Identical to
    /// [`Tape::leaf`] on the tape; the distinction is documentary.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    fn unary(
        &self,
        a: usize,
        f: impl FnOnce(&Tensor) -> Result<Tensor, TensorError>,
        op: Op,
    ) -> Result<Var<'_>, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value)?
        };
        Ok(self.push(value, op))
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor, TensorError>,
        op: Op,
    ) -> Result<Var<'_>, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)?
        };
        Ok(self.push(value, op))
    }

    fn backward_from(&self, output: usize) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output].value;
        if out.len() != 1 {
            return Err(TensorError::NonScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output] = Some(Tensor::full(out.shape(), 1.0));

        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            for (target, contribution) in adjoint(&nodes, node, &g) {
                accumulate(&mut grads[target], contribution);
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        Some(existing) => {
            for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *e += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn with_data(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("adjoint shape")
}

/// Contributions of `node`'s upstream gradient `g` to its operands.
fn adjoint(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2("matmul").expect("matmul lhs");
            let (_, n) = val(*b).dims2("matmul").expect("matmul rhs");
            let ga = kernels::matmul_nt(g.data(), val(*b).data(), m, n, k);
            let gb = kernels::matmul_tn(val(*a).data(), g.data(), m, k, n);
            vec![(*a, with_data(val(*a), ga)), (*b, with_data(val(*b), gb))]
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => {
            let ga = g.zip_with(val(*b), "mul", |gv, bv| gv * bv).expect("mul");
            let gb = g.zip_with(val(*a), "mul", |gv, av| gv * av).expect("mul");
            vec![(*a, ga), (*b, gb)]
        }
        Op::Div(a, b) => {
            let ga = g.zip_with(val(*b), "div", |gv, bv| gv / bv).expect("div");
            let gb: Vec<f64> = g
                .data()
                .iter()
                .zip(val(*a).data())
                .zip(val(*b).data())
                .map(|((gv, av), bv)| -gv * av / (bv * bv))
                .collect();
            vec![(*a, ga), (*b, with_data(val(*b), gb))]
        }
        Op::AddRow(a, r) => {
            let m = val(*r).len();
            let mut gr = vec![0.0; m];
            for chunk in g.data().chunks(m) {
                for (acc, v) in gr.iter_mut().zip(chunk) {
                    *acc += v;
                }
            }
            vec![(*a, g.clone()), (*r, with_data(val(*r), gr))]
        }
        Op::MulRow(a, r) => {
            let rv = val(*r).data();
            let m = rv.len();
            let av = val(*a).data();
            let mut ga = Vec::with_capacity(g.len());
            let mut gr = vec![0.0; m];
            for (gc, ac) in g.data().chunks(m).zip(av.chunks(m)) {
                for j in 0..m {
                    ga.push(gc[j] * rv[j]);
                    gr[j] += gc[j] * ac[j];
                }
            }
            vec![(*a, with_data(val(*a), ga)), (*r, with_data(val(*r), gr))]
        }
        Op::MulCol(a, c) => {
            let cv = val(*c).data();
            let (_, m) = val(*a).dims2("mul_col").expect("mul_col");
            let av = val(*a).data();
            let mut ga = Vec::with_capacity(g.len());
            let mut gc = vec![0.0; cv.len()];
            for i in 0..cv.len() {
                for j in 0..m {
                    let gv = g.data()[i * m + j];
                    ga.push(gv * cv[i]);
                    gc[i] += gv * av[i * m + j];
                }
            }
            vec![(*a, with_data(val(*a), ga)), (*c, with_data(val(*c), gc))]
        }
        Op::MulScalar(a, s) => {
            let sv = val(*s).item();
            let ga = g.map(|v| v * sv);
            let gs: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
            vec![(*a, ga), (*s, Tensor::full(val(*s).shape(), gs))]
        }
        Op::Pow(a, p) => {
            let p = *p;
            let ga = g
                .zip_with(val(*a), "pow", |gv, x| {
                    let base = if p < 1.0 { x.max(POW_GRAD_FLOOR) } else { x };
                    gv * p * base.powf(p - 1.0)
                })
                .expect("pow");
            vec![(*a, ga)]
        }
        Op::Exp(a) => {
            let ga = g.zip_with(&node.value, "exp", |gv, y| gv * y).expect("exp");
            vec![(*a, ga)]
        }
        Op::Log(a) => {
            let ga = g.zip_with(val(*a), "log", |gv, x| gv / x).expect("log");
            vec![(*a, ga)]
        }
        Op::Softplus(a) => {
            let ga = g
                .zip_with(val(*a), "softplus", |gv, x| gv * sigmoid(x))
                .expect("softplus");
            vec![(*a, ga)]
        }
        Op::Relu(a) => {
            let ga = g
                .zip_with(val(*a), "relu", |gv, x| if x > 0.0 { gv } else { 0.0 })
                .expect("relu");
            vec![(*a, ga)]
        }
        Op::Scale(a, c) => vec![(*a, g.map(|v| v * c))],
        Op::Offset(a) => vec![(*a, g.clone())],
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::Mean(a) => {
            let n = val(*a).len().max(1) as f64;
            vec![(*a, Tensor::full(val(*a).shape(), g.item() / n))]
        }
        Op::ConcatCols(parts) => {
            let mut out = Vec::with_capacity(parts.len());
            let mut start = 0;
            for &p in parts {
                let w = val(p).cols();
                out.push((p, g.slice_cols(start, start + w).expect("concat")));
                start += w;
            }
            out
        }
        Op::SliceCols(a, start) => {
            let (r, c) = val(*a).dims2("slice_cols").expect("slice");
            let w = g.cols();
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                ga[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
            }
            vec![(*a, with_data(val(*a), ga))]
        }
        Op::Transpose(a) => vec![(*a, g.transpose().expect("transpose"))],
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the recorded forward value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn backward(&self) -> Result<Gradients, TensorError> {
        self.tape.backward_from(self.id)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.tape.binary(
            self.id,
            other.id,
            |a, b| a.matmul(b),
            Op::MatMul(self.id, other.id),
        )
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.tape.binary(
            self.id,
            other.id,
            |a, b| a.zip_with(b, "add", |x, y| x + y),
            Op::Add(self.id, other.id),
        )
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.tape.binary(
            self.id,
            other.id,
            |a, b| a.zip_with(b, "sub", |x, y| x - y),
            Op::Sub(self.id, other.id),
        )
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.tape.binary(
            self.id,
            other.id,
            |a, b| a.zip_with(b, "mul", |x, y| x * y),
            Op::Mul(self.id, other.id),
        )
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.tape.binary(
            self.id,
            other.id,
            |a, b| {
                if b.data().contains(&0.0) {
                    return Err(TensorError::Domain {
                        op: "div",
                        detail: "division by zero".into(),
                    });
                }
                a.zip_with(b, "div", |x, y| x / y)
            },
            Op::Div(self.id, other.id),
        )
    }

    fn row_broadcast(
        &self,
        row: &Var<'t>,
        name: &'static str,
        f: fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>, TensorError> {
        self.tape.binary(
            self.id,
            row.id,
            |a, r| {
                let (n, m) = a.dims2(name)?;
                if r.shape() != [1, m] {
                    return Err(shape_err(name, a, r));
                }
                let rv = r.data();
                let mut out = Vec::with_capacity(n * m);
                for chunk in a.data().chunks(m.max(1)) {
                    out.extend(chunk.iter().zip(rv).map(|(&x, &y)| f(x, y)));
                }
                Tensor::matrix(n, m, out)
            },
            op,
        )
    }

    /// Adds a `[1, m]` row to every row of an `[n, m]` matrix.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.row_broadcast(row, "add_row", |x, y| x + y, Op::AddRow(self.id, row.id))
    }

    /// Multiplies every row of an `[n, m]` matrix by a `[1, m]` row.
    pub fn mul_row(&self, row: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.row_broadcast(row, "mul_row", |x, y| x * y, Op::MulRow(self.id, row.id))
    }

    /// Scales row `i` of an `[n, m]` matrix by entry `i` of an `[n, 1]` column.
    pub fn mul_col(&self, col: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.tape.binary(
            self.id,
            col.id,
            |a, c| {
                let (n, m) = a.dims2("mul_col")?;
                if c.shape() != [n, 1] {
                    return Err(shape_err("mul_col", a, c));
                }
                let mut out = Vec::with_capacity(n * m);
                for (chunk, &s) in a.data().chunks(m.max(1)).zip(c.data()) {
                    out.extend(chunk.iter().map(|&x| x * s));
                }
                Tensor::matrix(n, m, out)
            },
            Op::MulCol(self.id, col.id),
        )
    }

    /// Multiplies every entry by a one-element tensor.
    pub fn mul_scalar(&self, s: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.tape.binary(
            self.id,
            s.id,
            |a, s| {
                if s.len() != 1 {
                    return Err(shape_err("mul_scalar", a, s));
                }
                let sv = s.item();
                Ok(a.map(|x| x * sv))
            },
            Op::MulScalar(self.id, s.id),
        )
    }

    /// Elementwise `x^p` for a fixed exponent `p > 0` and `x >= 0`.
    pub fn pow(&self, p: f64) -> Result<Var<'t>, TensorError> {
        self.tape.unary(
            self.id,
            |a| {
                if !(p > 0.0) {
                    return Err(TensorError::Domain {
                        op: "pow",
                        detail: format!("exponent {p} is not positive"),
                    });
                }
                if let Some(&neg) = a.data().iter().find(|&&x| x < 0.0) {
                    return Err(TensorError::Domain {
                        op: "pow",
                        detail: format!("negative base {neg}"),
                    });
                }
                Ok(a.map(|x| x.powf(p)))
            },
            Op::Pow(self.id, p),
        )
    }

    pub fn exp(&self) -> Result<Var<'t>, TensorError> {
        self.tape
            .unary(self.id, |a| Ok(a.map(f64::exp)), Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'t>, TensorError> {
        self.tape.unary(
            self.id,
            |a| {
                if let Some(&bad) = a.data().iter().find(|&&x| !(x > 0.0)) {
                    return Err(TensorError::Domain {
                        op: "log",
                        detail: format!("non-positive argument {bad}"),
                    });
                }
                Ok(a.map(f64::ln))
            },
            Op::Log(self.id),
        )
    }

    pub fn softplus(&self) -> Result<Var<'t>, TensorError> {
        self.tape
            .unary(self.id, |a| Ok(a.map(softplus)), Op::Softplus(self.id))
    }

    pub fn relu(&self) -> Result<Var<'t>, TensorError> {
        self.tape
            .unary(self.id, |a| Ok(a.map(|x| x.max(0.0))), Op::Relu(self.id))
    }

    /// Multiplies by a constant.
    pub fn scale(&self, c: f64) -> Result<Var<'t>, TensorError> {
        self.tape
            .unary(self.id, |a| Ok(a.map(|x| x * c)), Op::Scale(self.id, c))
    }

    /// Adds a constant.
    pub fn offset(&self, c: f64) -> Result<Var<'t>, TensorError> {
        self.tape
            .unary(self.id, |a| Ok(a.map(|x| x + c)), Op::Offset(self.id))
    }

    pub fn square(&self) -> Result<Var<'t>, TensorError> {
        self.mul(self)
    }

    pub fn sum(&self) -> Result<Var<'t>, TensorError> {
        self.tape
            .unary(self.id, |a| Ok(Tensor::scalar(a.sum())), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'t>, TensorError> {
        self.tape.unary(
            self.id,
            |a| {
                if a.is_empty() {
                    return Err(TensorError::Domain {
                        op: "mean",
                        detail: "empty tensor".into(),
                    });
                }
                Ok(Tensor::scalar(a.sum() / a.len() as f64))
            },
            Op::Mean(self.id),
        )
    }

    pub fn transpose(&self) -> Result<Var<'t>, TensorError> {
        self.tape
            .unary(self.id, Tensor::transpose, Op::Transpose(self.id))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>, TensorError> {
        self.tape.unary(
            self.id,
            |a| a.slice_cols(start, end),
            Op::SliceCols(self.id, start),
        )
    }

    /// Horizontal concatenation along the feature axis.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        let tape = parts
            .first()
            .ok_or(TensorError::Domain {
                op: "concat_cols",
                detail: "no operands".into(),
            })?
            .tape;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = {
            let nodes = tape.nodes.borrow();
            let refs: Vec<&Tensor> = ids.iter().map(|&i| &nodes[i].value).collect();
            Tensor::concat_cols(&refs)?
        };
        Ok(tape.push(value, Op::ConcatCols(ids)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.pow(2.0).unwrap();
        assert_eq!(y.backward().unwrap().wrt(&x).item(), 6.0);
    }

    #[test]
    fn softplus_value_and_slope_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = x.softplus().unwrap();
        assert!((y.value().item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(y.backward().unwrap().wrt(&x).item(), 0.5);
    }

    #[test]
    fn fractional_power() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(4.0));
        assert_eq!(x.pow(0.5).unwrap().value().item(), 2.0);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.7));
        let y = x.add(&x).unwrap();
        assert_eq!(y.backward().unwrap().wrt(&x).item(), 2.0);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(x.backward().unwrap_err(), TensorError::NonScalar(_)));
    }

    #[test]
    fn domain_errors() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-1.0));
        assert!(matches!(x.log(), Err(TensorError::Domain { op: "log", .. })));
        assert!(matches!(x.pow(0.5), Err(TensorError::Domain { op: "pow", .. })));
    }

    #[test]
    fn pow_gradient_at_zero_is_finite() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let g = x.pow(0.2).unwrap().sum().unwrap().backward().unwrap();
        let d = g.wrt(&x).item();
        assert!(d.is_finite());
        assert!((d - 0.2 * POW_GRAD_FLOOR.powf(-0.8)).abs() / d < 1e-12);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::zeros(&[3, 1]));
        let g = x.exp().unwrap().backward().unwrap();
        assert!(g.get(&unused).is_none());
        assert_eq!(g.wrt(&unused), Tensor::zeros(&[3, 1]));
    }

    #[test]
    fn inverse_softplus_round_trip() {
        for &y in &[1e-6, 0.01, 0.5, 1.0, 7.0, 40.0] {
            let x = inverse_softplus(y);
            assert!((softplus(x) - y).abs() <= 1e-12 * y.max(1.0), "{y}");
        }
    }
}
