//! Reverse-mode differentiation over a linear tape of primitive operations.
//!
//! A [`Tape`] records every primitive applied to its [`Var`]s during the
//! forward pass. [`Tape::backward`] replays the record in reverse, producing
//! the total derivative of a scalar root for every leaf that requires
//! gradients. Tapes are single-threaded by construction (`Rc`/`RefCell`);
//! tensors outside a tape are plain values and can be shared freely.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use core::cell::RefCell;

#[allow(unused_imports)]
use num_traits::Float;

use super::ops::{
    binary_backward, binary_forward, check_axes, conv2d_backward_input,
    conv2d_backward_kernel, conv2d_forward, for_each_reduce, max_forward, softmax2d_backward,
    softmax2d_forward, sum_forward, ConvDims,
};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    AddScalar,
    MulScalar(Real),
    Sigmoid,
    Relu,
    Ln,
    Exp,
    PowScalar(Real),
    Clamp { lo: Real, hi: Real },
    Sum { axes: Vec<usize> },
    Mean { axes: Vec<usize>, count: Real },
    Max { argmax: Vec<usize> },
    Softmax2d,
    Conv2d { dims: ConvDims, cols: Vec<Real> },
    Gather { indices: Vec<usize> },
    Reshape,
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    value: Vec<Real>,
    requires_grad: bool,
}

struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<Real>>>,
    done: bool,
}

/// Recording context for one forward/backward pass.
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a tape. Cheap to clone.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl Clone for Tape {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

fn grad_buf<'a>(
    slots: &'a mut [Option<Vec<Real>>],
    nodes: &[Node],
    id: usize,
) -> &'a mut [Real] {
    slots[id]
        .get_or_insert_with(|| vec![0.0; nodes[id].value.len()])
        .as_mut_slice()
}

fn ensure_finite(op: &str, data: &[Real]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("output of {op}")))
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
                done: false,
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        op: Op,
        inputs: Vec<usize>,
        shape: Vec<usize>,
        value: Vec<Real>,
        requires_grad: bool,
    ) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            inputs,
            shape,
            value,
            requires_grad,
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Registers a tensor as a differentiable-if-flagged leaf.
    pub fn leaf(&self, t: &Tensor) -> Result<Var> {
        ensure_finite("leaf", t.data())?;
        Ok(self.push(
            Op::Leaf,
            vec![],
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
        ))
    }

    /// Registers a tensor as a constant (never receives gradients).
    pub fn constant(&self, t: &Tensor) -> Result<Var> {
        ensure_finite("constant", t.data())?;
        Ok(self.push(Op::Leaf, vec![], t.shape().to_vec(), t.data().to_vec(), false))
    }

    /// Rank-0 constant.
    pub fn scalar(&self, value: Real) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("scalar constant".into()));
        }
        Ok(self.push(Op::Leaf, vec![], vec![], vec![value], false))
    }

    /// Runs reverse-mode accumulation from a scalar root. May be called once
    /// per tape; the root must be a scalar that depends on at least one
    /// gradient-requiring leaf.
    pub fn backward(&self, root: &Var) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &root.tape.inner) {
            return Err(Error::Autodiff("root belongs to a different tape".into()));
        }
        let inner = &mut *self.inner.borrow_mut();
        if inner.done {
            return Err(Error::Autodiff(
                "backward already ran on this tape; build a fresh tape per pass".into(),
            ));
        }
        let root_node = &inner.nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward root must be a scalar, got shape {:?}",
                root_node.shape
            )));
        }
        if !root_node.requires_grad {
            return Err(Error::Autodiff(
                "backward root is detached from all gradient-requiring leaves".into(),
            ));
        }

        let TapeInner { nodes, grads, done } = inner;
        grads.clear();
        grads.resize(nodes.len(), None);
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            if grads[id].is_none() || !nodes[id].requires_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(id);
            let g = hi[0].as_ref().expect("checked above").as_slice();
            let node = &nodes[id];
            let needs = |k: usize| nodes[node.inputs[k]].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Add | Op::Sub | Op::Mul => {
                    let (a_id, b_id) = (node.inputs[0], node.inputs[1]);
                    let (a_sh, b_sh) = (&nodes[a_id].shape, &nodes[b_id].shape);
                    let (a_v, b_v) = (&nodes[a_id].value, &nodes[b_id].value);
                    let (da, db): (
                        &dyn Fn(Real, Real, Real) -> Real,
                        &dyn Fn(Real, Real, Real) -> Real,
                    ) = match node.op {
                        Op::Add => (&|g, _, _| g, &|g, _, _| g),
                        Op::Sub => (&|g, _, _| g, &|g, _, _| -g),
                        Op::Mul => (&|g, _, b| g * b, &|g, a, _| g * a),
                        _ => unreachable!(),
                    };
                    // Split the grads slice so both inputs can accumulate.
                    let (na, nb) = (needs(0), needs(1));
                    if a_id == b_id {
                        if na {
                            let ga = grad_buf(lo, nodes, a_id);
                            binary_backward(a_sh, a_v, b_sh, b_v, &node.shape, g, Some((ga, da)), None);
                            let ga = grad_buf(lo, nodes, a_id);
                            binary_backward(a_sh, a_v, b_sh, b_v, &node.shape, g, None, Some((ga, db)));
                        }
                    } else {
                        let (first, second) = if a_id < b_id { (a_id, b_id) } else { (b_id, a_id) };
                        let (lo2, hi2) = lo.split_at_mut(second);
                        let first_buf = if na || nb {
                            lo2[first].get_or_insert_with(|| vec![0.0; nodes[first].value.len()])
                        } else {
                            continue;
                        };
                        let second_buf =
                            hi2[0].get_or_insert_with(|| vec![0.0; nodes[second].value.len()]);
                        let (ga, gb) = if a_id < b_id {
                            (first_buf, second_buf)
                        } else {
                            (second_buf, first_buf)
                        };
                        binary_backward(
                            a_sh,
                            a_v,
                            b_sh,
                            b_v,
                            &node.shape,
                            g,
                            na.then_some((ga.as_mut_slice(), da)),
                            nb.then_some((gb.as_mut_slice(), db)),
                        );
                    }
                }
                Op::AddScalar => {
                    if needs(0) {
                        let gx = grad_buf(lo, nodes, node.inputs[0]);
                        for i in 0..g.len() {
                            gx[i] += g[i];
                        }
                    }
                }
                Op::MulScalar(c) => {
                    if needs(0) {
                        let c = *c;
                        let gx = grad_buf(lo, nodes, node.inputs[0]);
                        for i in 0..g.len() {
                            gx[i] += g[i] * c;
                        }
                    }
                }
                Op::Sigmoid => {
                    if needs(0) {
                        let y = &node.value;
                        let gx = grad_buf(lo, nodes, node.inputs[0]);
                        for i in 0..g.len() {
                            gx[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    }
                }
                Op::Relu => {
                    if needs(0) {
                        let x = &nodes[node.inputs[0]].value;
                        let gx = grad_buf(lo, nodes, node.inputs[0]);
                        for i in 0..g.len() {
                            if x[i] > 0.0 {
                                gx[i] += g[i];
                            }
                        }
                    }
                }
                Op::Ln => {
                    if needs(0) {
                        let x = &nodes[node.inputs[0]].value;
                        let gx = grad_buf(lo, nodes, node.inputs[0]);
                        for i in 0..g.len() {
                            gx[i] += g[i] / x[i];
                        }
                    }
                }
                Op::Exp => {
                    if needs(0) {
                        let y = &node.value;
                        let gx = grad_buf(lo, nodes, node.inputs[0]);
                        for i in 0..g.len() {
                            gx[i] += g[i] * y[i];
                        }
                    }
                }
                Op::PowScalar(e) => {
                    if needs(0) {
                        let e = *e;
                        let x = &nodes[node.inputs[0]].value;
                        let gx = grad_buf(lo, nodes, node.inputs[0]);
                        for i in 0..g.len() {
                            gx[i] += g[i] * e * x[i].powf(e - 1.0);
                        }
                    }
                }
                Op::Clamp { lo: l, hi: h } => {
                    if needs(0) {
                        let (l, h) = (*l, *h);
                        let x = &nodes[node.inputs[0]].value;
                        let gx = grad_buf(lo, nodes, node.inputs[0]);
                        for i in 0..g.len() {
                            if x[i] >= l && x[i] <= h {
                                gx[i] += g[i];
                            }
                        }
                    }
                }
                Op::Sum { axes } => {
                    if needs(0) {
                        let in_shape = nodes[node.inputs[0]].shape.clone();
                        let gx = grad_buf(lo, nodes, node.inputs[0]);
                        for_each_reduce(&in_shape, axes, |i, o| gx[i] += g[o]);
                    }
                }
                Op::Mean { axes, count } => {
                    if needs(0) {
                        let inv = 1.0 / *count;
                        let in_shape = nodes[node.inputs[0]].shape.clone();
                        let gx = grad_buf(lo, nodes, node.inputs[0]);
                        for_each_reduce(&in_shape, axes, |i, o| gx[i] += g[o] * inv);
                    }
                }
                Op::Max { argmax, .. } => {
                    if needs(0) {
                        let arg = argmax.clone();
                        let gx = grad_buf(lo, nodes, node.inputs[0]);
                        for (o, &i) in arg.iter().enumerate() {
                            gx[i] += g[o];
                        }
                    }
                }
                Op::Softmax2d => {
                    if needs(0) {
                        let y = &node.value;
                        let gx = grad_buf(lo, nodes, node.inputs[0]);
                        softmax2d_backward(y, g, gx);
                    }
                }
                Op::Conv2d { dims, cols } => {
                    let kernel_v = &nodes[node.inputs[1]].value;
                    if needs(0) {
                        let gx = lo[node.inputs[0]]
                            .get_or_insert_with(|| vec![0.0; nodes[node.inputs[0]].value.len()]);
                        conv2d_backward_input(g, kernel_v, dims, gx);
                    }
                    if needs(1) {
                        let gk = lo[node.inputs[1]]
                            .get_or_insert_with(|| vec![0.0; nodes[node.inputs[1]].value.len()]);
                        conv2d_backward_kernel(g, cols, dims, gk);
                    }
                }
                Op::Gather { indices } => {
                    if needs(0) {
                        let idx = indices.clone();
                        let gx = grad_buf(lo, nodes, node.inputs[0]);
                        for (t, &i) in idx.iter().enumerate() {
                            gx[i] += g[t];
                        }
                    }
                }
                Op::Reshape => {
                    if needs(0) {
                        let gx = grad_buf(lo, nodes, node.inputs[0]);
                        for i in 0..g.len() {
                            gx[i] += g[i];
                        }
                    }
                }
            }
        }
        *done = true;
        Ok(())
    }

    /// Total derivative of the backward root with respect to `v`. Leaves that
    /// no path reached get a zero gradient.
    pub fn grad_of(&self, v: &Var) -> Result<Tensor> {
        let inner = self.inner.borrow();
        if !inner.done {
            return Err(Error::Autodiff("backward has not run on this tape".into()));
        }
        let node = &inner.nodes[v.id];
        if !node.requires_grad {
            return Err(Error::Autodiff(
                "gradient requested for a node that does not require gradients".into(),
            ));
        }
        match &inner.grads[v.id] {
            Some(g) => Tensor::new(&node.shape, g.clone()),
            None => Ok(Tensor::zeros(&node.shape)),
        }
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    /// Handle to the tape this variable lives on (for creating constants in
    /// the same recording context).
    pub fn tape(&self) -> Tape {
        self.tape.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].value.len()
    }

    /// Copies the forward value out of the tape.
    pub fn value(&self) -> Tensor {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        Tensor::new(&node.shape, node.value.clone()).expect("tape values stay finite")
    }

    pub fn scalar_value(&self) -> Result<Real> {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        if node.value.len() != 1 {
            return Err(Error::Shape(format!(
                "expected a scalar, got shape {:?}",
                node.shape
            )));
        }
        Ok(node.value[0])
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(self)
    }

    pub fn grad(&self) -> Result<Tensor> {
        self.tape.grad_of(self)
    }

    fn same_tape(&self, other: &Var) -> Result<()> {
        if Rc::ptr_eq(&self.tape.inner, &other.tape.inner) {
            Ok(())
        } else {
            Err(Error::Autodiff("variables belong to different tapes".into()))
        }
    }

    fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    fn binary(&self, other: &Var, op: Op, f: impl Fn(Real, Real) -> Real, name: &str) -> Result<Var> {
        self.same_tape(other)?;
        let (shape, value) = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id], &inner.nodes[other.id]);
            binary_forward(&a.shape, &a.value, &b.shape, &b.value, f)?
        };
        ensure_finite(name, &value)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self
            .tape
            .push(op, vec![self.id, other.id], shape, value, rg))
    }

    fn unary(&self, op: Op, value: Vec<Real>, name: &str) -> Result<Var> {
        ensure_finite(name, &value)?;
        let shape = self.shape();
        let rg = self.requires_grad();
        Ok(self.tape.push(op, vec![self.id], shape, value, rg))
    }

    fn map_values(&self, f: impl Fn(Real) -> Real) -> Vec<Real> {
        self.tape.inner.borrow().nodes[self.id]
            .value
            .iter()
            .map(|&x| f(x))
            .collect()
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Add, |a, b| a + b, "add")
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Sub, |a, b| a - b, "sub")
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Mul, |a, b| a * b, "mul")
    }

    pub fn add_scalar(&self, c: Real) -> Result<Var> {
        self.unary(Op::AddScalar, self.map_values(|x| x + c), "add_scalar")
    }

    pub fn mul_scalar(&self, c: Real) -> Result<Var> {
        self.unary(Op::MulScalar(c), self.map_values(|x| x * c), "mul_scalar")
    }

    pub fn sigmoid(&self) -> Result<Var> {
        let value = self.map_values(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.unary(Op::Sigmoid, value, "sigmoid")
    }

    pub fn relu(&self) -> Result<Var> {
        self.unary(Op::Relu, self.map_values(|x| x.max(0.0)), "relu")
    }

    /// Natural logarithm; inputs must be strictly positive.
    pub fn ln(&self) -> Result<Var> {
        {
            let inner = self.tape.inner.borrow();
            if inner.nodes[self.id].value.iter().any(|&x| x <= 0.0) {
                return Err(Error::Domain("ln of a non-positive value".into()));
            }
        }
        self.unary(Op::Ln, self.map_values(|x| x.ln()), "ln")
    }

    pub fn exp(&self) -> Result<Var> {
        self.unary(Op::Exp, self.map_values(|x| x.exp()), "exp")
    }

    /// Elementwise power with a fixed exponent. Negative bases require an
    /// integral exponent; zero bases require a non-negative exponent.
    pub fn pow_scalar(&self, e: Real) -> Result<Var> {
        {
            let inner = self.tape.inner.borrow();
            let vals = &inner.nodes[self.id].value;
            if e.fract() != 0.0 && vals.iter().any(|&x| x < 0.0) {
                return Err(Error::Domain(
                    "fractional power of a negative value".into(),
                ));
            }
            if e < 0.0 && vals.iter().any(|&x| x == 0.0) {
                return Err(Error::Domain("negative power of zero".into()));
            }
        }
        self.unary(Op::PowScalar(e), self.map_values(|x| x.powf(e)), "pow")
    }

    pub fn clamp(&self, lo: Real, hi: Real) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::Invalid(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(
            Op::Clamp { lo, hi },
            self.map_values(|x| x.max(lo).min(hi)),
            "clamp",
        )
    }

    pub fn sum(&self, axes: &[usize]) -> Result<Var> {
        let shape = self.shape();
        let axes = check_axes(&shape, axes)?;
        let (out_shape, value) = {
            let inner = self.tape.inner.borrow();
            sum_forward(&shape, &inner.nodes[self.id].value, &axes)
        };
        ensure_finite("sum", &value)?;
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(Op::Sum { axes }, vec![self.id], out_shape, value, rg))
    }

    pub fn mean(&self, axes: &[usize]) -> Result<Var> {
        let shape = self.shape();
        let axes = check_axes(&shape, axes)?;
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let (out_shape, mut value) = {
            let inner = self.tape.inner.borrow();
            sum_forward(&shape, &inner.nodes[self.id].value, &axes)
        };
        let inv = 1.0 / count as Real;
        value.iter_mut().for_each(|v| *v *= inv);
        ensure_finite("mean", &value)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Op::Mean {
                axes,
                count: count as Real,
            },
            vec![self.id],
            out_shape,
            value,
            rg,
        ))
    }

    /// Max reduction. The gradient flows to a single winning element per
    /// output cell; ties break toward the lowest linear index.
    pub fn max(&self, axes: &[usize]) -> Result<Var> {
        let shape = self.shape();
        let axes = check_axes(&shape, axes)?;
        let (out_shape, value, argmax) = {
            let inner = self.tape.inner.borrow();
            max_forward(&shape, &inner.nodes[self.id].value, &axes)
        };
        ensure_finite("max", &value)?;
        let rg = self.requires_grad();
        let _ = axes;
        Ok(self.tape.push(
            Op::Max { argmax },
            vec![self.id],
            out_shape,
            value,
            rg,
        ))
    }

    fn all_axes(&self) -> Vec<usize> {
        (0..self.shape().len()).collect()
    }

    /// Sum over every axis, yielding a scalar.
    pub fn sum_all(&self) -> Result<Var> {
        if self.shape().is_empty() {
            return self.add_scalar(0.0);
        }
        self.sum(&self.all_axes())
    }

    /// Mean over every axis, yielding a scalar.
    pub fn mean_all(&self) -> Result<Var> {
        if self.shape().is_empty() {
            return self.add_scalar(0.0);
        }
        self.mean(&self.all_axes())
    }

    /// Softmax over all entries of an H×W map.
    pub fn softmax2d(&self) -> Result<Var> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::Shape(format!(
                "softmax2d expects an [H,W] map, got {shape:?}"
            )));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            softmax2d_forward(&inner.nodes[self.id].value)
        };
        self.unary(Op::Softmax2d, value, "softmax2d")
    }

    /// 2-D cross-correlation of an [N,H,W,Cin] input with a
    /// [kh,kw,Cin,Cout] kernel.
    pub fn conv2d(&self, kernel: &Var, stride: usize, padding: usize) -> Result<Var> {
        self.same_tape(kernel)?;
        let dims = ConvDims::infer(&self.shape(), &kernel.shape(), stride, padding)?;
        let (value, cols) = {
            let inner = self.tape.inner.borrow();
            conv2d_forward(
                &inner.nodes[self.id].value,
                &inner.nodes[kernel.id].value,
                &dims,
            )
        };
        ensure_finite("conv2d", &value)?;
        let out_shape = vec![dims.n, dims.ho, dims.wo, dims.cout];
        let rg = self.requires_grad() || kernel.requires_grad();
        Ok(self.tape.push(
            Op::Conv2d { dims, cols },
            vec![self.id, kernel.id],
            out_shape,
            value,
            rg,
        ))
    }

    /// Selects elements by linear index; the output is a flat vector in the
    /// order given. Gradients scatter-add back into the source.
    pub fn gather(&self, indices: &[usize]) -> Result<Var> {
        if indices.is_empty() {
            return Err(Error::Invalid("gather with no indices".into()));
        }
        let n = self.numel();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Invalid(format!(
                "gather index {bad} out of bounds for {n} elements"
            )));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let v = &inner.nodes[self.id].value;
            indices.iter().map(|&i| v[i]).collect::<Vec<_>>()
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            Op::Gather {
                indices: indices.to_vec(),
            },
            vec![self.id],
            vec![indices.len()],
            value,
            rg,
        ))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Var> {
        if new_shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape("reshape to zero extent".into()));
        }
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {} elements into {new_shape:?}",
                self.numel()
            )));
        }
        let value = self.tape.inner.borrow().nodes[self.id].value.clone();
        let rg = self.requires_grad();
        Ok(self
            .tape
            .push(Op::Reshape, vec![self.id], new_shape.to_vec(), value, rg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::tensor::Tensor;

    fn leaf(tape: &Tape, shape: &[usize], data: &[Real]) -> Var {
        tape.leaf(
            &Tensor::new(shape, data.to_vec())
                .unwrap()
                .with_requires_grad(true),
        )
        .unwrap()
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let tape = Tape::new();
        let x = leaf(&tape, &[2], &[1.0, 2.0]);
        let y = x.mul(&x).unwrap().sum_all().unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(tape.grad_of(&x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_of_scaled_sigmoid() {
        let tape = Tape::new();
        let w = leaf(&tape, &[], &[0.3]);
        let c = 2.5;
        let y = w.sigmoid().unwrap().mul_scalar(c).unwrap();
        tape.backward(&y).unwrap();
        let s = 1.0 / (1.0 + (-0.3f64).exp());
        let expect = c * s * (1.0 - s);
        let got = tape.grad_of(&w).unwrap().data()[0];
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let tape = Tape::new();
        let x = tape.scalar(0.0).unwrap();
        assert_eq!(x.sigmoid().unwrap().scalar_value().unwrap(), 0.5);
    }

    #[test]
    fn relu_clips_negatives() {
        let tape = Tape::new();
        let x = tape
            .constant(&Tensor::new(&[2], vec![-3.2, 3.2]).unwrap())
            .unwrap();
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 3.2]);
    }

    #[test]
    fn max_gradient_tie_breaks_low() {
        let tape = Tape::new();
        let x = leaf(&tape, &[4], &[3.0, 7.0, 7.0, 1.0]);
        let y = x.max(&[0]).unwrap();
        assert_eq!(y.scalar_value().unwrap(), 7.0);
        tape.backward(&y).unwrap();
        assert_eq!(tape.grad_of(&x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_of_constant_tensor() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[3, 4], 2.5).unwrap()).unwrap();
        assert_eq!(x.mean_all().unwrap().scalar_value().unwrap(), 2.5);
    }

    #[test]
    fn reduce_with_empty_axes_is_error() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[3], 1.0).unwrap()).unwrap();
        assert!(x.sum(&[]).is_err());
    }

    #[test]
    fn backward_twice_is_error() {
        let tape = Tape::new();
        let x = leaf(&tape, &[], &[2.0]);
        let y = x.mul(&x).unwrap();
        tape.backward(&y).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::Autodiff(_))));
    }

    #[test]
    fn non_scalar_root_is_error() {
        let tape = Tape::new();
        let x = leaf(&tape, &[2], &[1.0, 2.0]);
        assert!(matches!(tape.backward(&x), Err(Error::Autodiff(_))));
    }

    #[test]
    fn detached_root_is_error() {
        let tape = Tape::new();
        let x = tape.scalar(1.0).unwrap();
        let y = x.exp().unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::Autodiff(_))));
    }

    #[test]
    fn ln_domain_error() {
        let tape = Tape::new();
        let x = tape
            .constant(&Tensor::new(&[2], vec![1.0, 0.0]).unwrap())
            .unwrap();
        assert!(matches!(x.ln(), Err(Error::Domain(_))));
    }

    #[test]
    fn broadcast_grad_reduces() {
        // f = sum((a + b)^2) with b broadcast over rows; db must sum rows.
        let tape = Tape::new();
        let a = leaf(&tape, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&tape, &[2], &[0.5, -0.5]);
        let s = a.add(&b).unwrap();
        let y = s.mul(&s).unwrap().sum_all().unwrap();
        tape.backward(&y).unwrap();
        let gb = tape.grad_of(&b).unwrap();
        // d/db_j = sum_i 2(a_ij + b_j)
        assert!((gb.data()[0] - 2.0 * ((1.5) + (3.5))).abs() < 1e-12);
        assert!((gb.data()[1] - 2.0 * ((1.5) + (3.5))).abs() < 1e-12);
    }

    #[test]
    fn gather_unit_jacobian() {
        let tape = Tape::new();
        let x = leaf(&tape, &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = x.gather(&[3, 0, 3]).unwrap().sum_all().unwrap();
        tape.backward(&y).unwrap();
        assert_eq!(tape.grad_of(&x).unwrap().data(), &[1.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_saturates_on_dominant_logit() {
        let tape = Tape::new();
        let mut t = Tensor::zeros(&[3, 3]);
        t.set(&[1, 2], 50.0);
        let y = tape.constant(&t).unwrap().softmax2d().unwrap();
        let v = y.value();
        assert!((v.at(&[1, 2]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_known_values() {
        // [0, ln2; 0, 0] -> [0.2, 0.4, 0.2, 0.2]
        let tape = Tape::new();
        let t = Tensor::new(&[2, 2], vec![0.0, (2.0 as Real).ln(), 0.0, 0.0]).unwrap();
        let y = tape.constant(&t).unwrap().softmax2d().unwrap().value();
        let expect = [0.2, 0.4, 0.2, 0.2];
        for (a, e) in y.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let tape = Tape::new();
        let x = tape
            .constant(&Tensor::from_fn(&[1, 4, 4, 1], |i| (i[1] * 4 + i[2]) as Real).unwrap())
            .unwrap();
        let k = tape.constant(&Tensor::full(&[1, 1, 1, 1], 1.0).unwrap()).unwrap();
        let y = x.conv2d(&k, 1, 0).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }
}
