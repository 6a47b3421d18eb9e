//! Static computation graphs with reverse-mode gradient evaluation.

use super::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node inside a [`GraphBuilder`] / [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param { index: usize },
    Const { value: Tensor },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Matmul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Lgamma(NodeId),
    Square(NodeId),
    Abs(NodeId),
    Softmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param { .. } => "param",
            Op::Const { .. } => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Matmul { .. } => "matmul",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Lgamma(..) => "lgamma",
            Op::Square(..) => "square",
            Op::Abs(..) => "abs",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Param { .. } | Op::Const { .. } => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Lgamma(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Slice { input, .. } => vec![*input],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }
}

/// How the operands of an elementwise binary op line up.
#[derive(Copy, Clone, Debug, PartialEq)]
enum Broadcast {
    Same,
    /// Left operand is a single value.
    ScalarLeft,
    ScalarRight,
    /// Left operand is a row vector repeated down the rows of the right.
    RowLeft,
    RowRight,
    /// Left operand is a column vector repeated across the columns of the right.
    ColLeft,
    ColRight,
}

fn classify_broadcast(a: &[usize], b: &[usize]) -> Result<(Broadcast, Vec<usize>)> {
    let numel = |s: &[usize]| -> usize { s.iter().product() };
    if a == b {
        return Ok((Broadcast::Same, a.to_vec()));
    }
    if numel(a) == 1 {
        return Ok((Broadcast::ScalarLeft, b.to_vec()));
    }
    if numel(b) == 1 {
        return Ok((Broadcast::ScalarRight, a.to_vec()));
    }
    let dims = |s: &[usize]| -> Option<(usize, usize)> {
        match s.len() {
            1 => Some((1, s[0])),
            2 => Some((s[0], s[1])),
            _ => None,
        }
    };
    if let (Some((ar, ac)), Some((br, bc))) = (dims(a), dims(b)) {
        if ar == 1 && ac == bc && br > 1 {
            return Ok((Broadcast::RowLeft, b.to_vec()));
        }
        if br == 1 && bc == ac && ar > 1 {
            return Ok((Broadcast::RowRight, a.to_vec()));
        }
        if ac == 1 && ar == br && bc > 1 {
            return Ok((Broadcast::ColLeft, b.to_vec()));
        }
        if bc == 1 && br == ar && ac > 1 {
            return Ok((Broadcast::ColRight, a.to_vec()));
        }
    }
    Err(Error::Contract(format!(
        "cannot broadcast shapes {a:?} and {b:?}"
    )))
}

/// Evaluate `f` elementwise over broadcast operands.
fn binop_eval(
    a: &Tensor,
    b: &Tensor,
    out_shape: &[usize],
    kind: Broadcast,
    f: impl Fn(f64, f64) -> f64,
) -> Tensor {
    let av = a.data();
    let bv = b.data();
    let n: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(n);
    match kind {
        Broadcast::Same => out.extend(av.iter().zip(bv).map(|(&x, &y)| f(x, y))),
        Broadcast::ScalarLeft => {
            let s = av[0];
            out.extend(bv.iter().map(|&y| f(s, y)));
        }
        Broadcast::ScalarRight => {
            let s = bv[0];
            out.extend(av.iter().map(|&x| f(x, s)));
        }
        Broadcast::RowLeft | Broadcast::RowRight | Broadcast::ColLeft | Broadcast::ColRight => {
            let (rows, cols) = {
                let s = out_shape;
                if s.len() == 2 {
                    (s[0], s[1])
                } else {
                    (1, s[0])
                }
            };
            for r in 0..rows {
                for c in 0..cols {
                    let (x, y) = match kind {
                        Broadcast::RowLeft => (av[c], bv[r * cols + c]),
                        Broadcast::RowRight => (av[r * cols + c], bv[c]),
                        Broadcast::ColLeft => (av[r], bv[r * cols + c]),
                        Broadcast::ColRight => (av[r * cols + c], bv[r]),
                        _ => unreachable!(),
                    };
                    out.push(f(x, y));
                }
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("binop shape")
}

/// Reduce a full-size gradient back onto one operand of a broadcast binop.
fn reduce_grad(full: &[f64], out_shape: &[usize], operand_shape: &[usize], side: Broadcast) -> Tensor {
    let (rows, cols) = if out_shape.len() == 2 {
        (out_shape[0], out_shape[1])
    } else {
        (1, out_shape.iter().product())
    };
    match side {
        Broadcast::Same => Tensor::new(operand_shape.to_vec(), full.to_vec()).expect("same"),
        Broadcast::ScalarLeft | Broadcast::ScalarRight => {
            let s: f64 = full.iter().sum();
            Tensor::new(operand_shape.to_vec(), vec![s]).expect("scalar")
        }
        Broadcast::RowLeft | Broadcast::RowRight => {
            let mut acc = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    acc[c] += full[r * cols + c];
                }
            }
            Tensor::new(operand_shape.to_vec(), acc).expect("row")
        }
        Broadcast::ColLeft | Broadcast::ColRight => {
            let mut acc = vec![0.0; rows];
            for r in 0..rows {
                for c in 0..cols {
                    acc[r] += full[r * cols + c];
                }
            }
            Tensor::new(operand_shape.to_vec(), acc).expect("col")
        }
    }
}

/// Fetch the broadcast value of an operand at flat output position `(r, c)`.
#[inline]
fn fetch(side_is_left: bool, kind: Broadcast, v: &[f64], r: usize, c: usize, cols: usize) -> f64 {
    let full = r * cols + c;
    let reduced = match kind {
        Broadcast::Same => full,
        Broadcast::ScalarLeft => {
            if side_is_left {
                0
            } else {
                full
            }
        }
        Broadcast::ScalarRight => {
            if side_is_left {
                full
            } else {
                0
            }
        }
        Broadcast::RowLeft => {
            if side_is_left {
                c
            } else {
                full
            }
        }
        Broadcast::RowRight => {
            if side_is_left {
                full
            } else {
                c
            }
        }
        Broadcast::ColLeft => {
            if side_is_left {
                r
            } else {
                full
            }
        }
        Broadcast::ColRight => {
            if side_is_left {
                full
            } else {
                r
            }
        }
    };
    v[reduced]
}

/// Plain gemm over row-major slices with optional operand transposition.
fn gemm(
    ta: bool,
    tb: bool,
    a: &[f64],
    adims: (usize, usize),
    b: &[f64],
    bdims: (usize, usize),
) -> Result<(Vec<f64>, usize, usize)> {
    let (m, k) = if ta { (adims.1, adims.0) } else { adims };
    let (k2, n) = if tb { (bdims.1, bdims.0) } else { bdims };
    if k != k2 {
        return Err(Error::Contract(format!(
            "matmul inner dimensions differ: {adims:?}{} vs {bdims:?}{}",
            if ta { " (transposed)" } else { "" },
            if tb { " (transposed)" } else { "" },
        )));
    }
    let mut c = vec![0.0; m * n];
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for kk in 0..k {
                    let aik = a[i * k + kk];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &b[kk * n..(kk + 1) * n];
                    for j in 0..n {
                        crow[j] += aik * brow[j];
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let crow = &mut c[i * n..(i + 1) * n];
                for (j, cj) in crow.iter_mut().enumerate() {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut s = 0.0;
                    for kk in 0..k {
                        s += arow[kk] * brow[kk];
                    }
                    *cj = s;
                }
            }
        }
        (true, false) => {
            for kk in 0..k {
                let arow = &a[kk * m..(kk + 1) * m];
                let brow = &b[kk * n..(kk + 1) * n];
                for i in 0..m {
                    let aki = arow[i];
                    if aki == 0.0 {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for j in 0..n {
                        crow[j] += aki * brow[j];
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for kk in 0..k {
                        s += a[kk * m + i] * b[j * k + kk];
                    }
                    c[i * n + j] = s;
                }
            }
        }
    }
    Ok((c, m, n))
}

use crate::special::{sigmoid as stable_sigmoid, softplus as stable_softplus};

/// Builds a [`Graph`] incrementally. Node ids are only valid for the builder
/// that produced them.
#[derive(Default)]
pub struct GraphBuilder {
    ops: Vec<Op>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Vec<usize>)>,
    param_nodes: Vec<NodeId>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.ops.len());
        self.ops.push(op);
        self.shapes.push(shape);
        id
    }

    fn shape_of(&self, n: NodeId) -> &[usize] {
        &self.shapes[n.0]
    }

    /// Declare a named parameter leaf. Values are supplied at evaluation
    /// time, in declaration order.
    pub fn param(&mut self, name: impl Into<String>, shape: &[usize]) -> NodeId {
        let index = self.params.len();
        self.params.push((name.into(), shape.to_vec()));
        let id = self.push(Op::Param { index }, shape.to_vec());
        self.param_nodes.push(id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const { value }, shape)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        let (_, out_shape) = classify_broadcast(self.shape_of(a), self.shape_of(b))?;
        Ok(self.push(make(a, b), out_shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Div)
    }

    pub fn add_scalar(&mut self, a: NodeId, value: f64) -> Result<NodeId> {
        let c = self.scalar(value);
        self.add(a, c)
    }

    pub fn mul_scalar(&mut self, a: NodeId, value: f64) -> Result<NodeId> {
        let c = self.scalar(value);
        self.mul(a, c)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.mul_scalar(a, -1.0)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_flags(a, b, false, false)
    }

    /// `a @ b^T`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_flags(a, b, false, true)
    }

    /// `a^T @ b`
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_flags(a, b, true, false)
    }

    pub fn matmul_flags(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let ad = dims2_of(self.shape_of(a))?;
        let bd = dims2_of(self.shape_of(b))?;
        let (m, k) = if ta { (ad.1, ad.0) } else { ad };
        let (k2, n) = if tb { (bd.1, bd.0) } else { bd };
        if k != k2 {
            return Err(Error::Contract(format!(
                "matmul inner dimensions differ: {:?} vs {:?}",
                self.shape_of(a),
                self.shape_of(b)
            )));
        }
        Ok(self.push(Op::Matmul { a, b, ta, tb }, vec![m, n]))
    }

    fn unary(&mut self, a: NodeId, make: impl Fn(NodeId) -> Op) -> NodeId {
        let shape = self.shape_of(a).to_vec();
        self.push(make(a), shape)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Softplus)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log)
    }

    pub fn lgamma(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Lgamma)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Abs)
    }

    /// Row-wise softmax with max-subtraction stabilization.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Softmax)
    }

    /// Full reduction to a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let _ = a;
        self.push(Op::Sum(a), vec![])
    }

    /// Full reduction to a scalar.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), vec![])
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.slice(a, 0, start, end)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.slice(a, 1, start, end)
    }

    fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let (rows, cols) = dims2_of(self.shape_of(a))?;
        let limit = if axis == 0 { rows } else { cols };
        if start >= end || end > limit {
            return Err(Error::Contract(format!(
                "slice [{start}, {end}) out of bounds for axis {axis} of shape [{rows}, {cols}]"
            )));
        }
        let shape = if axis == 0 {
            vec![end - start, cols]
        } else {
            vec![rows, end - start]
        };
        Ok(self.push(
            Op::Slice {
                input: a,
                axis,
                start,
                end,
            },
            shape,
        ))
    }

    pub fn concat_rows(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        self.concat(inputs, 0)
    }

    pub fn concat_cols(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        self.concat(inputs, 1)
    }

    fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let dims: Vec<(usize, usize)> = inputs
            .iter()
            .map(|&n| dims2_of(self.shape_of(n)))
            .collect::<Result<_>>()?;
        let (r0, c0) = dims[0];
        let shape = if axis == 0 {
            if dims.iter().any(|&(_, c)| c != c0) {
                return Err(Error::Contract("concat rows: column counts differ".into()));
            }
            vec![dims.iter().map(|&(r, _)| r).sum(), c0]
        } else {
            if dims.iter().any(|&(r, _)| r != r0) {
                return Err(Error::Contract("concat cols: row counts differ".into()));
            }
            vec![r0, dims.iter().map(|&(_, c)| c).sum()]
        };
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            shape,
        ))
    }

    /// `x @ w + b`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    pub fn shape(&self, n: NodeId) -> &[usize] {
        self.shape_of(n)
    }

    /// Seal the graph with `loss` as its single scalar output.
    pub fn finish(self, loss: NodeId) -> Result<Graph> {
        let loss_len: usize = self.shapes[loss.0].iter().product();
        if loss_len != 1 {
            return Err(Error::Contract(format!(
                "loss node must be scalar, got shape {:?}",
                self.shapes[loss.0]
            )));
        }
        // Reachability from the loss, to flag unused parameters.
        let mut reachable = vec![false; self.ops.len()];
        let mut stack = vec![loss];
        while let Some(n) = stack.pop() {
            if reachable[n.0] {
                continue;
            }
            reachable[n.0] = true;
            stack.extend(self.ops[n.0].inputs());
        }
        let unused_params: Vec<usize> = self
            .param_nodes
            .iter()
            .enumerate()
            .filter(|(_, node)| !reachable[node.0])
            .map(|(i, _)| i)
            .collect();
        // Which nodes depend on parameters (everything else skips backward).
        let mut needs_grad = vec![false; self.ops.len()];
        for (i, op) in self.ops.iter().enumerate() {
            needs_grad[i] = match op {
                Op::Param { .. } => true,
                Op::Const { .. } => false,
                _ => op.inputs().iter().any(|inp| needs_grad[inp.0]),
            };
        }
        Ok(Graph {
            ops: self.ops,
            shapes: self.shapes,
            params: self.params,
            param_nodes: self.param_nodes,
            needs_grad,
            unused_params,
            loss,
        })
    }
}

fn dims2_of(shape: &[usize]) -> Result<(usize, usize)> {
    match shape.len() {
        0 => Ok((1, 1)),
        1 => Ok((1, shape[0])),
        2 => Ok((shape[0], shape[1])),
        _ => Err(Error::Contract(format!(
            "expected rank <= 2, got shape {shape:?}"
        ))),
    }
}

/// An immutable computation graph: primitive nodes, named parameter leaves
/// and one scalar loss node. Acyclic by construction (node inputs always
/// precede the node).
pub struct Graph {
    ops: Vec<Op>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Vec<usize>)>,
    param_nodes: Vec<NodeId>,
    needs_grad: Vec<bool>,
    unused_params: Vec<usize>,
    loss: NodeId,
}

/// Forward-pass result: every node value plus the scalar loss.
#[derive(Debug)]
pub struct Evaluation {
    values: Vec<Tensor>,
    loss: f64,
}

impl Evaluation {
    pub fn loss(&self) -> f64 {
        self.loss
    }

    pub fn value(&self, n: NodeId) -> &Tensor {
        &self.values[n.0]
    }
}

impl Graph {
    pub fn loss_node(&self) -> NodeId {
        self.loss
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.params.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Indices of declared parameters that the loss does not depend on.
    pub fn unused_params(&self) -> &[usize] {
        &self.unused_params
    }

    pub fn node_count(&self) -> usize {
        self.ops.len()
    }

    fn check_params(&self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "graph declares {} parameters, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for ((name, shape), value) in self.params.iter().zip(values) {
            if value.shape() != shape.as_slice() {
                return Err(Error::Contract(format!(
                    "parameter `{name}` expects shape {shape:?}, got {:?}",
                    value.shape()
                )));
            }
            if !value.all_finite() {
                return Err(Error::Contract(format!(
                    "parameter `{name}` contains non-finite values"
                )));
            }
        }
        Ok(())
    }

    /// Run the forward pass, checking every node for non-finite values.
    pub fn forward(&self, params: &[Tensor]) -> Result<Evaluation> {
        self.check_params(params)?;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.ops.len());
        for (idx, op) in self.ops.iter().enumerate() {
            let value = self.eval_node(idx, op, &values, params)?;
            if !value.all_finite() {
                return Err(Error::NumericOverflow {
                    node: idx,
                    op: op.name(),
                });
            }
            values.push(value);
        }
        let loss = values[self.loss.0].scalar_value()?;
        Ok(Evaluation { values, loss })
    }

    /// Scalar loss and the gradient for every declared parameter, in
    /// declaration order. Deterministic: identical inputs give bit-identical
    /// outputs.
    pub fn value_and_grad(&self, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let eval = self.forward(params)?;
        let mut adjoints: Vec<Option<Tensor>> = vec![None; self.ops.len()];
        adjoints[self.loss.0] = Some(Tensor::new(
            self.shapes[self.loss.0].clone(),
            vec![1.0],
        )?);
        for idx in (0..self.ops.len()).rev() {
            if !self.needs_grad[idx] {
                continue;
            }
            let Some(grad) = adjoints[idx].take() else {
                continue;
            };
            self.backward_node(idx, &grad, &eval.values, &mut adjoints)?;
            // Parameters keep their accumulated adjoint.
            if matches!(self.ops[idx], Op::Param { .. }) {
                adjoints[idx] = Some(grad);
            }
        }
        let grads = self
            .param_nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                adjoints[node.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(&self.params[i].1))
            })
            .collect();
        Ok((eval.loss, grads))
    }

    fn eval_node(
        &self,
        idx: usize,
        op: &Op,
        values: &[Tensor],
        params: &[Tensor],
    ) -> Result<Tensor> {
        let v = |n: NodeId| -> &Tensor { &values[n.0] };
        let out = match op {
            Op::Param { index } => params[*index].clone(),
            Op::Const { value } => value.clone(),
            Op::Add(a, b) => self.binop(idx, v(*a), v(*b), |x, y| x + y),
            Op::Sub(a, b) => self.binop(idx, v(*a), v(*b), |x, y| x - y),
            Op::Mul(a, b) => self.binop(idx, v(*a), v(*b), |x, y| x * y),
            Op::Div(a, b) => self.binop(idx, v(*a), v(*b), |x, y| x / y),
            Op::Matmul { a, b, ta, tb } => {
                let at = v(*a);
                let bt = v(*b);
                let (data, m, n) = gemm(
                    *ta,
                    *tb,
                    at.data(),
                    at.dims2()?,
                    bt.data(),
                    bt.dims2()?,
                )?;
                Tensor::new(vec![m, n], data)?
            }
            Op::Tanh(a) => v(*a).clone().map(f64::tanh),
            Op::Sigmoid(a) => v(*a).clone().map(stable_sigmoid),
            Op::Softplus(a) => v(*a).clone().map(stable_softplus),
            Op::Exp(a) => v(*a).clone().map(f64::exp),
            Op::Log(a) => v(*a).clone().map(f64::ln),
            Op::Lgamma(a) => v(*a).clone().map(crate::special::ln_gamma),
            Op::Square(a) => v(*a).clone().map(|x| x * x),
            Op::Abs(a) => v(*a).clone().map(f64::abs),
            Op::Softmax(a) => {
                let t = v(*a);
                let (rows, cols) = t.dims2()?;
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    let row = &t.data()[r * cols..(r + 1) * cols];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
                    let denom: f64 = exps.iter().sum();
                    out.extend(exps.iter().map(|e| e / denom));
                }
                Tensor::new(t.shape().to_vec(), out)?
            }
            Op::Sum(a) => Tensor::scalar(v(*a).data().iter().sum()),
            Op::Mean(a) => {
                let t = v(*a);
                Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
            }
            Op::Slice {
                input,
                axis,
                start,
                end,
            } => {
                let t = v(*input);
                let (rows, cols) = t.dims2()?;
                if *axis == 0 {
                    let data = t.data()[start * cols..end * cols].to_vec();
                    Tensor::new(vec![end - start, cols], data)?
                } else {
                    let mut data = Vec::with_capacity(rows * (end - start));
                    for r in 0..rows {
                        data.extend_from_slice(&t.data()[r * cols + start..r * cols + end]);
                    }
                    Tensor::new(vec![rows, end - start], data)?
                }
            }
            Op::Concat { inputs, axis } => {
                let parts: Vec<&Tensor> = inputs.iter().map(|&n| v(n)).collect();
                if *axis == 0 {
                    let cols = parts[0].dims2()?.1;
                    let mut data = Vec::new();
                    let mut rows = 0;
                    for p in &parts {
                        let (r, _) = p.dims2()?;
                        rows += r;
                        data.extend_from_slice(p.data());
                    }
                    Tensor::new(vec![rows, cols], data)?
                } else {
                    let rows = parts[0].dims2()?.0;
                    let widths: Vec<usize> =
                        parts.iter().map(|p| p.dims2().map(|d| d.1)).collect::<Result<_>>()?;
                    let total: usize = widths.iter().sum();
                    let mut data = Vec::with_capacity(rows * total);
                    for r in 0..rows {
                        for (p, w) in parts.iter().zip(&widths) {
                            data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
                        }
                    }
                    Tensor::new(vec![rows, total], data)?
                }
            }
        };
        Ok(out)
    }

    fn binop(&self, idx: usize, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (kind, out_shape) =
            classify_broadcast(a.shape(), b.shape()).expect("shape checked at build time");
        let _ = idx;
        binop_eval(a, b, &out_shape, kind, f)
    }

    fn accumulate(adjoints: &mut [Option<Tensor>], node: NodeId, grad: Tensor) {
        match &mut adjoints[node.0] {
            Some(existing) => {
                let data = existing.data_mut();
                for (d, g) in data.iter_mut().zip(grad.data()) {
                    *d += g;
                }
            }
            slot @ None => *slot = Some(grad),
        }
    }

    fn backward_node(
        &self,
        idx: usize,
        grad: &Tensor,
        values: &[Tensor],
        adjoints: &mut [Option<Tensor>],
    ) -> Result<()> {
        let v = |n: NodeId| -> &Tensor { &values[n.0] };
        let ng = |n: NodeId| self.needs_grad[n.0];
        match &self.ops[idx] {
            Op::Param { .. } | Op::Const { .. } => {}
            Op::Add(a, b) => {
                self.binop_backward(*a, *b, grad, values, adjoints, |_, _| 1.0, |_, _| 1.0);
            }
            Op::Sub(a, b) => {
                self.binop_backward(*a, *b, grad, values, adjoints, |_, _| 1.0, |_, _| -1.0);
            }
            Op::Mul(a, b) => {
                self.binop_backward(*a, *b, grad, values, adjoints, |_, y| y, |x, _| x);
            }
            Op::Div(a, b) => {
                self.binop_backward(
                    *a,
                    *b,
                    grad,
                    values,
                    adjoints,
                    |_, y| 1.0 / y,
                    |x, y| -x / (y * y),
                );
            }
            Op::Matmul { a, b, ta, tb } => {
                let at = v(*a);
                let bt = v(*b);
                let gd = grad.data();
                let gdims = grad.dims2()?;
                if ng(*a) {
                    let (data, m, n) = match (ta, tb) {
                        (false, false) => gemm(false, true, gd, gdims, bt.data(), bt.dims2()?)?,
                        (false, true) => gemm(false, false, gd, gdims, bt.data(), bt.dims2()?)?,
                        (true, false) => gemm(false, true, bt.data(), bt.dims2()?, gd, gdims)?,
                        (true, true) => gemm(true, true, bt.data(), bt.dims2()?, gd, gdims)?,
                    };
                    Self::accumulate(adjoints, *a, Tensor::new(vec![m, n], data)?);
                }
                if ng(*b) {
                    let (data, m, n) = match (ta, tb) {
                        (false, false) => gemm(true, false, at.data(), at.dims2()?, gd, gdims)?,
                        (false, true) => gemm(true, false, gd, gdims, at.data(), at.dims2()?)?,
                        (true, false) => gemm(false, false, at.data(), at.dims2()?, gd, gdims)?,
                        (true, true) => gemm(true, true, gd, gdims, at.data(), at.dims2()?)?,
                    };
                    Self::accumulate(adjoints, *b, Tensor::new(vec![m, n], data)?);
                }
            }
            Op::Tanh(a) => {
                let y = &values[idx];
                let g = elementwise_grad(grad, y, |g, y| g * (1.0 - y * y));
                Self::accumulate(adjoints, *a, g);
            }
            Op::Sigmoid(a) => {
                let y = &values[idx];
                let g = elementwise_grad(grad, y, |g, y| g * y * (1.0 - y));
                Self::accumulate(adjoints, *a, g);
            }
            Op::Softplus(a) => {
                let g = elementwise_grad(grad, v(*a), |g, x| g * stable_sigmoid(x));
                Self::accumulate(adjoints, *a, g);
            }
            Op::Exp(a) => {
                let y = &values[idx];
                let g = elementwise_grad(grad, y, |g, y| g * y);
                Self::accumulate(adjoints, *a, g);
            }
            Op::Log(a) => {
                let g = elementwise_grad(grad, v(*a), |g, x| g / x);
                Self::accumulate(adjoints, *a, g);
            }
            Op::Lgamma(a) => {
                let g = elementwise_grad(grad, v(*a), |g, x| g * crate::special::digamma(x));
                Self::accumulate(adjoints, *a, g);
            }
            Op::Square(a) => {
                let g = elementwise_grad(grad, v(*a), |g, x| g * 2.0 * x);
                Self::accumulate(adjoints, *a, g);
            }
            Op::Abs(a) => {
                // Subgradient 0 at the kink.
                let g = elementwise_grad(grad, v(*a), |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                Self::accumulate(adjoints, *a, g);
            }
            Op::Softmax(a) => {
                let y = &values[idx];
                let (rows, cols) = y.dims2()?;
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &grad.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    for c in 0..cols {
                        out[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                Self::accumulate(adjoints, *a, Tensor::new(v(*a).shape().to_vec(), out)?);
            }
            Op::Sum(a) => {
                let g0 = grad.data()[0];
                let t = Tensor::filled(v(*a).shape(), g0);
                Self::accumulate(adjoints, *a, t);
            }
            Op::Mean(a) => {
                let n = v(*a).len() as f64;
                let g0 = grad.data()[0] / n;
                let t = Tensor::filled(v(*a).shape(), g0);
                Self::accumulate(adjoints, *a, t);
            }
            Op::Slice {
                input,
                axis,
                start,
                end,
            } => {
                let t = v(*input);
                let (rows, cols) = t.dims2()?;
                let mut full = vec![0.0; rows * cols];
                if *axis == 0 {
                    full[start * cols..end * cols].copy_from_slice(grad.data());
                } else {
                    let w = end - start;
                    for r in 0..rows {
                        full[r * cols + start..r * cols + end]
                            .copy_from_slice(&grad.data()[r * w..(r + 1) * w]);
                    }
                }
                Self::accumulate(adjoints, *input, Tensor::new(t.shape().to_vec(), full)?);
            }
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &inp in inputs {
                        let len = v(inp).len();
                        let part = grad.data()[offset..offset + len].to_vec();
                        offset += len;
                        if ng(inp) {
                            Self::accumulate(
                                adjoints,
                                inp,
                                Tensor::new(v(inp).shape().to_vec(), part)?,
                            );
                        }
                    }
                } else {
                    let (rows, total) = grad.dims2()?;
                    let mut offset = 0;
                    for &inp in inputs {
                        let (_, w) = v(inp).dims2()?;
                        if ng(inp) {
                            let mut part = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                part.extend_from_slice(
                                    &grad.data()[r * total + offset..r * total + offset + w],
                                );
                            }
                            Self::accumulate(
                                adjoints,
                                inp,
                                Tensor::new(v(inp).shape().to_vec(), part)?,
                            );
                        }
                        offset += w;
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn binop_backward(
        &self,
        a: NodeId,
        b: NodeId,
        grad: &Tensor,
        values: &[Tensor],
        adjoints: &mut [Option<Tensor>],
        dfa: impl Fn(f64, f64) -> f64,
        dfb: impl Fn(f64, f64) -> f64,
    ) {
        let at = &values[a.0];
        let bt = &values[b.0];
        let (kind, out_shape) =
            classify_broadcast(at.shape(), bt.shape()).expect("checked at build time");
        let (rows, cols) = if out_shape.len() == 2 {
            (out_shape[0], out_shape[1])
        } else {
            (1, out_shape.iter().product())
        };
        let gd = grad.data();
        let av = at.data();
        let bv = bt.data();
        if self.needs_grad[a.0] {
            let mut full = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    let i = r * cols + c;
                    let x = fetch(true, kind, av, r, c, cols);
                    let y = fetch(false, kind, bv, r, c, cols);
                    full[i] = gd[i] * dfa(x, y);
                }
            }
            let side = match kind {
                Broadcast::ScalarLeft => Broadcast::ScalarLeft,
                Broadcast::RowLeft => Broadcast::RowLeft,
                Broadcast::ColLeft => Broadcast::ColLeft,
                _ => Broadcast::Same,
            };
            let reduced = reduce_grad(&full, &out_shape, at.shape(), side);
            Self::accumulate(adjoints, a, reduced);
        }
        if self.needs_grad[b.0] {
            let mut full = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    let i = r * cols + c;
                    let x = fetch(true, kind, av, r, c, cols);
                    let y = fetch(false, kind, bv, r, c, cols);
                    full[i] = gd[i] * dfb(x, y);
                }
            }
            let side = match kind {
                Broadcast::ScalarRight => Broadcast::ScalarLeft,
                Broadcast::RowRight => Broadcast::RowLeft,
                Broadcast::ColRight => Broadcast::ColLeft,
                _ => Broadcast::Same,
            };
            let reduced = reduce_grad(&full, &out_shape, bt.shape(), side);
            Self::accumulate(adjoints, b, reduced);
        }
    }
}

fn elementwise_grad(grad: &Tensor, ref_t: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data: Vec<f64> = grad
        .data()
        .iter()
        .zip(ref_t.data())
        .map(|(&g, &x)| f(g, x))
        .collect();
    Tensor::new(ref_t.shape().to_vec(), data).expect("elementwise shapes agree")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param_graph(build: impl Fn(&mut GraphBuilder, NodeId) -> NodeId) -> Graph {
        let mut b = GraphBuilder::new();
        let x = b.param("x", &[]);
        let loss = build(&mut b, x);
        b.finish(loss).unwrap()
    }

    #[test]
    fn square_value_and_grad() {
        let g = scalar_param_graph(|b, x| b.square(x));
        let (v, grads) = g.value_and_grad(&[Tensor::scalar(3.0)]).unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(grads[0].data(), &[6.0]);
    }

    #[test]
    fn softplus_at_zero() {
        let g = scalar_param_graph(|b, x| b.softplus(x));
        let (v, grads) = g.value_and_grad(&[Tensor::scalar(0.0)]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((grads[0].data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lgamma_at_one_has_digamma_gradient() {
        let g = scalar_param_graph(|b, x| b.lgamma(x));
        let (v, grads) = g.value_and_grad(&[Tensor::scalar(1.0)]).unwrap();
        assert!(v.abs() < 1e-12);
        // digamma(1) = -Euler-Mascheroni
        assert!((grads[0].data()[0] + 0.577_215_664_901_532_9).abs() < 1e-10);
    }

    #[test]
    fn matmul_transpose_flags_agree_with_manual_transposition() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::matrix(2, 3, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        // a @ b^T
        let mut gb = GraphBuilder::new();
        let an = gb.constant(a.clone());
        let bn = gb.constant(b.clone());
        let c = gb.matmul_nt(an, bn).unwrap();
        let loss = gb.sum(c);
        let g = gb.finish(loss).unwrap();
        let eval = g.forward(&[]).unwrap();
        let c = eval.value(c);
        // rows of a dotted with rows of b
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[50.0, 68.0, 122.0, 167.0]);
    }

    #[test]
    fn non_finite_intermediate_names_the_node() {
        let g = scalar_param_graph(|b, x| b.log(x));
        let err = g.forward(&[Tensor::scalar(-1.0)]).unwrap_err();
        match err {
            crate::Error::NumericOverflow { op, .. } => assert_eq!(op, "log"),
            other => panic!("expected overflow error, got {other}"),
        }
    }

    #[test]
    fn unused_parameter_is_flagged() {
        let mut b = GraphBuilder::new();
        let x = b.param("x", &[]);
        let _unused = b.param("dead", &[2]);
        let loss = b.square(x);
        let g = b.finish(loss).unwrap();
        assert_eq!(g.unused_params(), &[1]);
        let (_, grads) = g
            .value_and_grad(&[Tensor::scalar(1.0), Tensor::vector(vec![0.0, 0.0])])
            .unwrap();
        assert_eq!(grads[1].data(), &[0.0, 0.0]);
    }

    #[test]
    fn value_and_grad_is_deterministic() {
        let mut b = GraphBuilder::new();
        let x = b.param("x", &[3]);
        let t = b.tanh(x);
        let s = b.softmax(t);
        let l = b.log(s);
        let loss = b.mean(l);
        let g = b.finish(loss).unwrap();
        let p = [Tensor::vector(vec![0.3, -1.2, 2.4])];
        let (v1, g1) = g.value_and_grad(&p).unwrap();
        let (v2, g2) = g.value_and_grad(&p).unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());
        for (a, b) in g1[0].data().iter().zip(g2[0].data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn loss_must_be_scalar() {
        let mut b = GraphBuilder::new();
        let x = b.param("x", &[2]);
        let y = b.square(x);
        assert!(b.finish(y).is_err());
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        // linearity: d(f+g) = df + dg
        let build = |with_both: u8| {
            let mut b = GraphBuilder::new();
            let x = b.param("x", &[]);
            let f = b.square(x);
            let t = b.tanh(x);
            let loss = match with_both {
                0 => f,
                1 => t,
                _ => b.add(f, t).unwrap(),
            };
            b.finish(loss).unwrap()
        };
        let p = [Tensor::scalar(0.7)];
        let (_, gf) = build(0).value_and_grad(&p).unwrap();
        let (_, gt) = build(1).value_and_grad(&p).unwrap();
        let (_, gsum) = build(2).value_and_grad(&p).unwrap();
        assert!((gsum[0].data()[0] - (gf[0].data()[0] + gt[0].data()[0])).abs() < 1e-15);
    }
}
