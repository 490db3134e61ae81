//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! Every value is a 2-D [`Tensor`] (scalars are `1x1`, vectors are `n x 1`
//! columns). Primitives are applied through a [`Tape`]; when the tape is
//! recording, each application is appended as a node holding its cached
//! output so [`Tape::backward`] can replay the chain rule in reverse.
//!
//! The primitive set is closed (see [`Primitive`]); losses elsewhere in the
//! crate are compositions of these primitives only.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle of a recorded node: the owning tape plus the node position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

/// Dense 64-bit matrix with an optional handle into the tape that produced it.
#[derive(Clone, Debug)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    values: Arc<Vec<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(Error::shape(
                "tensor",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, values.len()),
            ));
        }
        Ok(Self {
            rows,
            cols,
            values: Arc::new(values),
            node: None,
        })
    }

    /// Builds a tensor from a shape list of rank 0, 1 (a column) or 2.
    pub fn from_shape(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        match *shape {
            [] => Self::new(1, 1, values),
            [n] => Self::new(n, 1, values),
            [r, c] => Self::new(r, c, values),
            _ => Err(Error::shape("tensor", format!("rank {} is not supported", shape.len()))),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(1, 1, vec![v]).expect("1x1")
    }

    pub fn column(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(n, 1, values).expect("column")
    }

    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(1, n, values).expect("row")
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Self::new(rows, cols, vec![v; rows * cols]).expect("full")
    }

    pub fn identity(n: usize) -> Self {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        Self::new(n, n, v).expect("identity")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    /// The single value of a `1x1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        self.values[0]
    }

    pub fn column_values(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Same values, no tape handle.
    pub fn detach(&self) -> Self {
        Self {
            node: None,
            ..self.clone()
        }
    }

    /// Mutable access to the values. Drops any tape handle since the cached
    /// node no longer matches.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.node = None;
        Arc::make_mut(&mut self.values).as_mut_slice()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.rows, self.cols, self.values.iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// The closed set of differentiable primitives.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Relu,
    Square,
    Sum,
    Mean,
    /// Selects rows by index (indices may repeat).
    RowGather(Vec<usize>),
    ColumnConcat,
    /// Replicates a `1 x c` row into `n x c`.
    BroadcastRow(usize),
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Neg => "neg",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softplus => "softplus",
            Primitive::Relu => "relu",
            Primitive::Square => "square",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::RowGather(_) => "row-gather",
            Primitive::ColumnConcat => "column-concat",
            Primitive::BroadcastRow(_) => "broadcast-row",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::MatMul | Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => Some(2),
            Primitive::ColumnConcat => None,
            _ => Some(1),
        }
    }
}

#[derive(Clone, Debug)]
enum NodeKind {
    Leaf,
    Constant,
    Op(Primitive),
}

#[derive(Clone, Debug)]
struct Node {
    kind: NodeKind,
    /// Whether any leaf feeds into this node.
    needs_grad: bool,
    inputs: Vec<usize>,
    rows: usize,
    cols: usize,
    values: Arc<Vec<f64>>,
}

/// Wengert list of primitive applications.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    recording: bool,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            recording: true,
            nodes: Vec::new(),
        }
    }

    /// A tape that never records; primitives only compute values.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable input. Without recording this is a no-op copy.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        self.register(t, NodeKind::Leaf)
    }

    /// Registers a value that is not differentiated.
    pub fn constant(&mut self, t: &Tensor) -> Tensor {
        self.register(t, NodeKind::Constant)
    }

    fn register(&mut self, t: &Tensor, kind: NodeKind) -> Tensor {
        if !self.recording {
            return t.detach();
        }
        let index = self.nodes.len();
        let needs_grad = matches!(kind, NodeKind::Leaf);
        self.nodes.push(Node {
            kind,
            needs_grad,
            inputs: Vec::new(),
            rows: t.rows,
            cols: t.cols,
            values: Arc::clone(&t.values),
        });
        Tensor {
            node: Some(NodeId { tape: self.id, index }),
            ..t.clone()
        }
    }

    fn resolve(&mut self, t: &Tensor) -> Result<usize> {
        match t.node {
            Some(id) if id.tape == self.id && id.index < self.nodes.len() => Ok(id.index),
            Some(_) => Err(Error::UnknownNode),
            None => {
                let c = self.constant(t);
                Ok(c.node.expect("recording").index)
            }
        }
    }

    /// Applies a primitive, recording it when the tape is recording.
    pub fn apply(&mut self, kind: Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
        if let Some(k) = kind.arity() {
            if inputs.len() != k {
                return Err(Error::shape(
                    kind.name(),
                    format!("expected {k} inputs, got {}", inputs.len()),
                ));
            }
        } else if inputs.is_empty() {
            return Err(Error::shape(kind.name(), "needs at least one input"));
        }
        let views: Vec<View<'_>> = inputs.iter().map(|t| View::of(t)).collect();
        let (rows, cols, values) = forward(&kind, &views)?;
        let values = Arc::new(values);
        if !self.recording {
            return Ok(Tensor {
                rows,
                cols,
                values,
                node: None,
            });
        }
        let mut ids = Vec::with_capacity(inputs.len());
        for t in inputs {
            ids.push(self.resolve(t)?);
        }
        let index = self.nodes.len();
        let needs_grad = ids.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            kind: NodeKind::Op(kind),
            needs_grad,
            inputs: ids,
            rows,
            cols,
            values: Arc::clone(&values),
        });
        Ok(Tensor {
            rows,
            cols,
            values,
            node: Some(NodeId { tape: self.id, index }),
        })
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Div, &[a, b])
    }
    pub fn neg(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Neg, &[a])
    }
    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn softplus(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Softplus, &[a])
    }
    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn square(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Square, &[a])
    }
    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Sum, &[a])
    }
    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(Primitive::Mean, &[a])
    }
    pub fn row_gather(&mut self, a: &Tensor, rows: Vec<usize>) -> Result<Tensor> {
        self.apply(Primitive::RowGather(rows), &[a])
    }
    pub fn column_concat(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        self.apply(Primitive::ColumnConcat, parts)
    }
    pub fn broadcast_row(&mut self, a: &Tensor, n: usize) -> Result<Tensor> {
        self.apply(Primitive::BroadcastRow(n), &[a])
    }

    /// `c * a` for a plain constant `c`.
    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.mul(a, &Tensor::scalar(c))
    }

    /// Clamps element-wise to `[-bound, bound]` using two ReLUs, so values
    /// beyond the bound come out exactly `±bound`.
    pub fn clamp_symmetric(&mut self, a: &Tensor, bound: f64) -> Result<Tensor> {
        let b = Tensor::scalar(bound);
        // upper = bound - relu(bound - a)
        let gap = self.sub(&b, a)?;
        let gap = self.relu(&gap)?;
        let upper = self.sub(&b, &gap)?;
        // out = relu(upper + bound) - bound
        let lifted = self.add(&upper, &b)?;
        let lifted = self.relu(&lifted)?;
        self.sub(&lifted, &b)
    }

    /// Gradient of the scalar `root` with respect to every leaf on the tape.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        let root_id = match root.node {
            Some(id) if id.tape == self.id && id.index < self.nodes.len() => id.index,
            _ => return Err(Error::UnknownNode),
        };
        let rn = &self.nodes[root_id];
        if rn.rows * rn.cols != 1 {
            return Err(Error::NonScalarRoot {
                rows: rn.rows,
                cols: rn.cols,
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root_id + 1];
        grads[root_id] = Some(vec![1.0]);
        let mut leaves = HashMap::new();

        for idx in (0..=root_id).rev() {
            let Some(g) = grads[idx].take() else {
                if matches!(self.nodes[idx].kind, NodeKind::Leaf) {
                    let n = &self.nodes[idx];
                    leaves.insert(idx, Tensor::zeros(n.rows, n.cols));
                }
                continue;
            };
            let node = &self.nodes[idx];
            match &node.kind {
                NodeKind::Leaf => {
                    leaves.insert(idx, Tensor::new(node.rows, node.cols, g)?);
                }
                NodeKind::Constant => {}
                NodeKind::Op(kind) => {
                    let inputs: Vec<View<'_>> = node.inputs.iter().map(|&i| View::of_node(&self.nodes[i])).collect();
                    let out = View::of_node(node);
                    let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].needs_grad).collect();
                    let input_grads = backward_rule(kind, &inputs, &needs, &out, g);
                    for (&i, gi) in node.inputs.iter().zip(input_grads) {
                        let Some(gi) = gi else { continue };
                        match &mut grads[i] {
                            Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(gi),
                        }
                    }
                }
            }
        }
        for (idx, n) in self.nodes.iter().enumerate().skip(root_id + 1) {
            if matches!(n.kind, NodeKind::Leaf) {
                leaves.insert(idx, Tensor::zeros(n.rows, n.cols));
            }
        }
        Ok(Gradients { tape: self.id, leaves })
    }

    /// Recomputes every recorded primitive from its recorded inputs and
    /// reports whether all cached outputs are reproduced bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        for node in &self.nodes {
            if let NodeKind::Op(kind) = &node.kind {
                let inputs: Vec<View<'_>> = node.inputs.iter().map(|&i| View::of_node(&self.nodes[i])).collect();
                let (r, c, v) = forward(kind, &inputs)?;
                let same = r == node.rows
                    && c == node.cols
                    && v.iter()
                        .zip(node.values.iter())
                        .all(|(a, b)| a.to_bits() == b.to_bits());
                if !same {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// Checks the topological invariant: every input precedes its consumer.
    pub fn is_topological(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| n.inputs.iter().all(|&j| j < i))
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for a leaf. Leaves that do not influence the root map to zeros.
    pub fn wrt(&self, leaf: &Tensor) -> Result<&Tensor> {
        match leaf.node {
            Some(id) if id.tape == self.tape => self.leaves.get(&id.index).ok_or(Error::UnknownNode),
            _ => Err(Error::UnknownNode),
        }
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

/// Maximum over coordinates of `|analytic - central difference| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "finite-difference step {step} must be > 0"
        )));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point);
    let out = f(&mut tape, &x)?;
    let grads = tape.backward(&out)?;
    let analytic = grads.wrt(&x)?.values().to_vec();

    let eval = |v: Vec<f64>| -> Result<f64> {
        let mut t = Tape::inference();
        let p = Tensor::new(point.rows(), point.cols(), v)?;
        let o = f(&mut t, &p)?;
        if o.len() != 1 {
            return Err(Error::NonScalarRoot {
                rows: o.rows(),
                cols: o.cols(),
            });
        }
        Ok(o.item())
    };

    let mut worst = 0.0f64;
    for k in 0..point.len() {
        let mut plus = point.values().to_vec();
        let mut minus = plus.clone();
        plus[k] += step;
        minus[k] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic[k] - numeric).abs() / analytic[k].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[derive(Clone, Copy)]
struct View<'a> {
    rows: usize,
    cols: usize,
    v: &'a [f64],
}

impl<'a> View<'a> {
    fn of(t: &'a Tensor) -> Self {
        Self {
            rows: t.rows,
            cols: t.cols,
            v: &t.values,
        }
    }

    fn of_node(n: &'a Node) -> Self {
        Self {
            rows: n.rows,
            cols: n.cols,
            v: &n.values,
        }
    }

    /// Row `r`, or row 0 when the view broadcasts along rows.
    fn row(&self, r: usize) -> &'a [f64] {
        let rr = if self.rows == 1 { 0 } else { r };
        &self.v[rr * self.cols..(rr + 1) * self.cols]
    }

    #[inline]
    fn at_broadcast(&self, r: usize, c: usize) -> f64 {
        let rr = if self.rows == 1 { 0 } else { r };
        let cc = if self.cols == 1 { 0 } else { c };
        self.v[rr * self.cols + cc]
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

fn broadcast_shape(op: &'static str, a: &View<'_>, b: &View<'_>) -> Result<(usize, usize)> {
    match (broadcast_dim(a.rows, b.rows), broadcast_dim(a.cols, b.cols)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::shape(
            op,
            format!("cannot broadcast {}x{} with {}x{}", a.rows, a.cols, b.rows, b.cols),
        )),
    }
}

fn binary(
    op: &'static str,
    a: &View<'_>,
    b: &View<'_>,
    f: impl Fn(f64, f64) -> f64,
) -> Result<(usize, usize, Vec<f64>)> {
    let (r, c) = broadcast_shape(op, a, b)?;
    if a.rows == b.rows && a.cols == b.cols {
        return Ok((r, c, a.v.iter().zip(b.v).map(|(&x, &y)| f(x, y)).collect()));
    }
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let (ar, br) = (a.row(i), b.row(i));
        match (ar.len() == c, br.len() == c) {
            (true, true) => out.extend(ar.iter().zip(br).map(|(&x, &y)| f(x, y))),
            (true, false) => out.extend(ar.iter().map(|&x| f(x, br[0]))),
            (false, true) => out.extend(br.iter().map(|&y| f(ar[0], y))),
            (false, false) => out.extend(std::iter::repeat_n(f(ar[0], br[0]), c)),
        }
    }
    Ok((r, c, out))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `c = a * b` via gemm; `a` is `m x k`, `b` is `k x n`, with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: the strides describe the exact extents of `a` (m x k) and
    // `b` (k x n), and `c` is a freshly allocated contiguous m x n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn forward(kind: &Primitive, inp: &[View<'_>]) -> Result<(usize, usize, Vec<f64>)> {
    let name = kind.name();
    let unary = |f: &dyn Fn(f64) -> f64| {
        let a = inp[0];
        (a.rows, a.cols, a.v.iter().map(|&x| f(x)).collect::<Vec<_>>())
    };
    Ok(match kind {
        Primitive::MatMul => {
            let (a, b) = (inp[0], inp[1]);
            if a.cols != b.rows {
                return Err(Error::shape(
                    name,
                    format!("{}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols),
                ));
            }
            let v = gemm(a.rows, a.cols, b.cols, a.v, a.cols as isize, 1, b.v, b.cols as isize, 1);
            (a.rows, b.cols, v)
        }
        Primitive::Add => binary(name, &inp[0], &inp[1], |x, y| x + y)?,
        Primitive::Sub => binary(name, &inp[0], &inp[1], |x, y| x - y)?,
        Primitive::Mul => binary(name, &inp[0], &inp[1], |x, y| x * y)?,
        Primitive::Div => {
            if inp[1].v.iter().any(|&y| y == 0.0) {
                return Err(Error::domain(name, "division by zero"));
            }
            binary(name, &inp[0], &inp[1], |x, y| x / y)?
        }
        Primitive::Neg => unary(&|x| -x),
        Primitive::Exp => unary(&f64::exp),
        Primitive::Log => {
            if let Some(bad) = inp[0].v.iter().find(|&&x| !(x > 0.0)) {
                return Err(Error::domain(name, format!("log of non-positive value {bad}")));
            }
            unary(&f64::ln)
        }
        Primitive::Sigmoid => unary(&sigmoid),
        Primitive::Softplus => unary(&softplus),
        Primitive::Relu => unary(&|x| if x > 0.0 { x } else { 0.0 }),
        Primitive::Square => unary(&|x| x * x),
        Primitive::Sum => (1, 1, vec![inp[0].v.iter().sum()]),
        Primitive::Mean => {
            if inp[0].v.is_empty() {
                return Err(Error::shape(name, "mean of an empty tensor"));
            }
            (1, 1, vec![inp[0].v.iter().sum::<f64>() / inp[0].v.len() as f64])
        }
        Primitive::RowGather(idx) => {
            let a = inp[0];
            if let Some(&bad) = idx.iter().find(|&&i| i >= a.rows) {
                return Err(Error::shape(
                    name,
                    format!("row {bad} out of range for {} rows", a.rows),
                ));
            }
            let mut v = Vec::with_capacity(idx.len() * a.cols);
            for &i in idx {
                v.extend_from_slice(&a.v[i * a.cols..(i + 1) * a.cols]);
            }
            (idx.len(), a.cols, v)
        }
        Primitive::ColumnConcat => {
            let rows = inp[0].rows;
            if let Some(bad) = inp.iter().find(|p| p.rows != rows) {
                return Err(Error::shape(
                    name,
                    format!("row counts {} and {} differ", rows, bad.rows),
                ));
            }
            let cols: usize = inp.iter().map(|p| p.cols).sum();
            let mut v = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in inp {
                    v.extend_from_slice(&p.v[r * p.cols..(r + 1) * p.cols]);
                }
            }
            (rows, cols, v)
        }
        Primitive::BroadcastRow(n) => {
            let a = inp[0];
            if a.rows != 1 {
                return Err(Error::shape(
                    name,
                    format!("expects a 1xc row, got {}x{}", a.rows, a.cols),
                ));
            }
            let mut v = Vec::with_capacity(n * a.cols);
            for _ in 0..*n {
                v.extend_from_slice(a.v);
            }
            (*n, a.cols, v)
        }
    })
}

/// Sums a gradient of shape `out` down to a broadcast operand's shape.
fn reduce_to(g: &[f64], out: &View<'_>, target: &View<'_>) -> Vec<f64> {
    if out.rows == target.rows && out.cols == target.cols {
        return g.to_vec();
    }
    let mut acc = vec![0.0; target.rows * target.cols];
    for i in 0..out.rows {
        let ti = if target.rows == 1 { 0 } else { i };
        let grow = &g[i * out.cols..(i + 1) * out.cols];
        if target.cols == out.cols {
            let dst = &mut acc[ti * target.cols..(ti + 1) * target.cols];
            dst.iter_mut().zip(grow).for_each(|(d, v)| *d += v);
        } else {
            acc[ti] += grow.iter().sum::<f64>();
        }
    }
    acc
}

/// `f(g, other)` element-wise with `other` broadcast to the output shape.
fn elementwise_with(g: &[f64], out: &View<'_>, other: &View<'_>, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if other.rows == out.rows && other.cols == out.cols {
        return g.iter().zip(other.v).map(|(&gi, &o)| f(gi, o)).collect();
    }
    let mut v = Vec::with_capacity(g.len());
    for i in 0..out.rows {
        let grow = &g[i * out.cols..(i + 1) * out.cols];
        let orow = other.row(i);
        if orow.len() == out.cols {
            v.extend(grow.iter().zip(orow).map(|(&gi, &o)| f(gi, o)));
        } else {
            v.extend(grow.iter().map(|&gi| f(gi, orow[0])));
        }
    }
    v
}

/// Input gradients of one primitive given the output gradient `g`.
/// Inputs with `needs[k] == false` get `None`.
fn backward_rule(
    kind: &Primitive,
    inp: &[View<'_>],
    needs: &[bool],
    out: &View<'_>,
    g: Vec<f64>,
) -> Vec<Option<Vec<f64>>> {
    let unary = |f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<Option<Vec<f64>>> {
        vec![Some(
            g.iter()
                .zip(inp[0].v)
                .zip(out.v)
                .map(|((&gi, &x), &y)| f(gi, x, y))
                .collect(),
        )]
    };
    let want = |k: usize, f: &dyn Fn() -> Vec<f64>| if needs[k] { Some(f()) } else { None };
    match kind {
        Primitive::MatMul => {
            let (a, b) = (inp[0], inp[1]);
            // dA = G B^T  (m x n)(n x k);  dB = A^T G  (k x m)(m x n)
            vec![
                want(0, &|| {
                    gemm(a.rows, b.cols, a.cols, &g, b.cols as isize, 1, b.v, 1, b.cols as isize)
                }),
                want(1, &|| {
                    gemm(a.cols, a.rows, b.cols, a.v, 1, a.cols as isize, &g, b.cols as isize, 1)
                }),
            ]
        }
        Primitive::Add => vec![
            want(0, &|| reduce_to(&g, out, &inp[0])),
            want(1, &|| reduce_to(&g, out, &inp[1])),
        ],
        Primitive::Sub => vec![
            want(0, &|| reduce_to(&g, out, &inp[0])),
            want(1, &|| reduce_to(&g, out, &inp[1]).into_iter().map(|v| -v).collect()),
        ],
        Primitive::Mul => vec![
            want(0, &|| {
                reduce_to(&elementwise_with(&g, out, &inp[1], |gi, b| gi * b), out, &inp[0])
            }),
            want(1, &|| {
                reduce_to(&elementwise_with(&g, out, &inp[0], |gi, a| gi * a), out, &inp[1])
            }),
        ],
        Primitive::Div => vec![
            want(0, &|| {
                reduce_to(&elementwise_with(&g, out, &inp[1], |gi, b| gi / b), out, &inp[0])
            }),
            want(1, &|| {
                // d(a/b)/db = -(a/b)/b
                let mut gb = Vec::with_capacity(g.len());
                for i in 0..out.rows {
                    for j in 0..out.cols {
                        let k = i * out.cols + j;
                        gb.push(-g[k] * out.v[k] / inp[1].at_broadcast(i, j));
                    }
                }
                reduce_to(&gb, out, &inp[1])
            }),
        ],
        Primitive::Neg => vec![Some(g.iter().map(|v| -v).collect())],
        Primitive::Exp => unary(&|gi, _, y| gi * y),
        Primitive::Log => unary(&|gi, x, _| gi / x),
        Primitive::Sigmoid => unary(&|gi, _, y| gi * y * (1.0 - y)),
        Primitive::Softplus => unary(&|gi, x, _| gi * sigmoid(x)),
        Primitive::Relu => unary(&|gi, x, _| if x > 0.0 { gi } else { 0.0 }),
        Primitive::Square => unary(&|gi, x, _| 2.0 * x * gi),
        Primitive::Sum => vec![Some(vec![g[0]; inp[0].v.len()])],
        Primitive::Mean => {
            let n = inp[0].v.len() as f64;
            vec![Some(vec![g[0] / n; inp[0].v.len()])]
        }
        Primitive::RowGather(idx) => {
            let a = inp[0];
            let mut acc = vec![0.0; a.rows * a.cols];
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..a.cols {
                    acc[i * a.cols + c] += g[r * a.cols + c];
                }
            }
            vec![Some(acc)]
        }
        Primitive::ColumnConcat => {
            let mut parts: Vec<Vec<f64>> = inp.iter().map(|p| Vec::with_capacity(p.rows * p.cols)).collect();
            for r in 0..out.rows {
                let mut off = r * out.cols;
                for (p, buf) in inp.iter().zip(parts.iter_mut()) {
                    buf.extend_from_slice(&g[off..off + p.cols]);
                    off += p.cols;
                }
            }
            parts.into_iter().zip(needs).map(|(p, &n)| n.then_some(p)).collect()
        }
        Primitive::BroadcastRow(_) => vec![Some(reduce_to(&g, out, &inp[0]))],
    }
}
