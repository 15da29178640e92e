//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Forward operations execute eagerly and are recorded on a [`Tape`];
//! [`Tape::backward`] replays the record in reverse to accumulate gradients
//! for parameter leaves. Tensors are immutable values, row-major, 64-bit.
//! There is no broadcasting beyond bias-row addition (`[m,n] + [1,n]`):
//! explicit shapes catch model-wiring bugs early.
//!
//! A tape lives for one forward/backward pass (one minibatch); parallelism
//! happens across independent tapes, never inside one.

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} implies {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![v; n],
        }
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            values: vec![v],
        }
    }

    /// Row vector of shape `[1, n]`.
    pub fn row(values: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![1, values.len()],
            values,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("from_rows needs rows".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Tensor::new(
            vec![rows.len(), cols],
            rows.iter().flatten().copied().collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Identifier of a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded primitive application. Input node ids are embedded per variant.
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    /// Elementwise add; rhs may be a `[1, n]` bias row against a `[m, n]` lhs.
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        input: NodeId,
        rows: (usize, usize),
        cols: (usize, usize),
    },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Log(NodeId),
    SoftmaxRows(NodeId),
    /// Row softmax over unmasked columns; masked columns are exactly zero.
    MaskedSoftmaxRows {
        input: NodeId,
        mask: Vec<bool>,
    },
    /// `out[i, :] = table[ids[i], :]`
    Embed {
        table: NodeId,
        ids: Vec<u32>,
    },
    Sum(NodeId),
    Reshape(NodeId),
    /// `out[i, 0] = input[rows[i], cols[i]]`
    Pick {
        input: NodeId,
        rows: Vec<usize>,
        cols: Vec<u32>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    param: bool,
}

/// Gradients produced by [`Tape::backward`].
///
/// Every parameter leaf has an entry (zero-filled if no gradient flowed);
/// non-parameter leaves are omitted.
#[derive(Debug)]
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Wengert tape: ordered record of primitive applications with cached
/// forward values. Inputs always precede outputs.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a constant input. Receives no gradient entry.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Registers a trainable parameter. Always present in the gradient map.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        self.nodes[id.0].param
    }

    fn push(&mut self, op: Op, value: Tensor, param: bool) -> NodeId {
        self.nodes.push(Node { op, value, param });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::NodeNotOnTape {
                node: id.0,
                len: self.nodes.len(),
            });
        }
        Ok(())
    }

    // ── primitives ──────────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Error::Shape {
                primitive: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let value = matmul_values(ta, tb);
        Ok(self.push(Op::Matmul(a, b), value, false))
    }

    /// Elementwise add, or bias-row add when `b` is `[1, n]` and `a` is `[m, n]`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if ta.shape() == tb.shape() {
            let values = ta
                .values()
                .iter()
                .zip(tb.values())
                .map(|(x, y)| x + y)
                .collect();
            Tensor {
                shape: ta.shape().to_vec(),
                values,
            }
        } else if ta.rank() == 2 && tb.rank() == 2 && tb.rows() == 1 && ta.cols() == tb.cols() {
            let n = ta.cols();
            let mut values = ta.values().to_vec();
            for (i, v) in values.iter_mut().enumerate() {
                *v += tb.values()[i % n];
            }
            Tensor {
                shape: ta.shape().to_vec(),
                values,
            }
        } else {
            return Err(Error::Shape {
                primitive: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        Ok(self.push(Op::Add(a, b), value, false))
    }

    /// Elementwise (Hadamard) product; shapes must match exactly.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                primitive: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let values = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor {
            shape: ta.shape().to_vec(),
            values,
        };
        Ok(self.push(Op::Mul(a, b), value, false))
    }

    /// Concatenates rank-2 tensors along `axis` (0 = stack rows, 1 = widen).
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() || axis > 1 {
            return Err(Error::InvalidArgument(format!(
                "concat needs inputs and axis in {{0,1}}, got {} inputs, axis {axis}",
                inputs.len()
            )));
        }
        for &id in inputs {
            self.check(id)?;
            if self.nodes[id.0].value.rank() != 2 {
                return Err(Error::Shape {
                    primitive: "concat",
                    lhs: self.nodes[id.0].value.shape().to_vec(),
                    rhs: vec![],
                });
            }
        }
        let first = self.nodes[inputs[0].0].value.shape().to_vec();
        let fixed = 1 - axis;
        for &id in &inputs[1..] {
            let s = self.nodes[id.0].value.shape();
            if s[fixed] != first[fixed] {
                return Err(Error::Shape {
                    primitive: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let value = if axis == 0 {
            let cols = first[1];
            let rows: usize = inputs
                .iter()
                .map(|&id| self.nodes[id.0].value.rows())
                .sum();
            let mut values = Vec::with_capacity(rows * cols);
            for &id in inputs {
                values.extend_from_slice(self.nodes[id.0].value.values());
            }
            Tensor {
                shape: vec![rows, cols],
                values,
            }
        } else {
            let rows = first[0];
            let cols: usize = inputs
                .iter()
                .map(|&id| self.nodes[id.0].value.cols())
                .sum();
            let mut values = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for &id in inputs {
                    let t = &self.nodes[id.0].value;
                    let c = t.cols();
                    values.extend_from_slice(&t.values()[r * c..(r + 1) * c]);
                }
            }
            Tensor {
                shape: vec![rows, cols],
                values,
            }
        };
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
            false,
        ))
    }

    /// Rectangular slice `[rows.0..rows.1, cols.0..cols.1]` of a rank-2 tensor.
    pub fn slice(
        &mut self,
        input: NodeId,
        rows: (usize, usize),
        cols: (usize, usize),
    ) -> Result<NodeId> {
        self.check(input)?;
        let t = &self.nodes[input.0].value;
        if t.rank() != 2 || rows.0 >= rows.1 || cols.0 >= cols.1 || rows.1 > t.rows() || cols.1 > t.cols()
        {
            return Err(Error::Shape {
                primitive: "slice",
                lhs: t.shape().to_vec(),
                rhs: vec![rows.0, rows.1, cols.0, cols.1],
            });
        }
        let (nr, nc) = (rows.1 - rows.0, cols.1 - cols.0);
        let mut values = Vec::with_capacity(nr * nc);
        for r in rows.0..rows.1 {
            let base = r * t.cols();
            values.extend_from_slice(&t.values()[base + cols.0..base + cols.1]);
        }
        let value = Tensor {
            shape: vec![nr, nc],
            values,
        };
        Ok(self.push(Op::Slice { input, rows, cols }, value, false))
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let value = self.nodes[input.0].value.clone_map(sigmoid);
        Ok(self.push(Op::Sigmoid(input), value, false))
    }

    pub fn tanh(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let value = self.nodes[input.0].value.clone_map(f64::tanh);
        Ok(self.push(Op::Tanh(input), value, false))
    }

    /// Natural log, elementwise. Inputs must be strictly positive.
    pub fn log(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let value = self.nodes[input.0].value.clone_map(f64::ln);
        Ok(self.push(Op::Log(input), value, false))
    }

    /// Softmax over each row of a rank-2 tensor. Rows sum to 1 within 1e-9.
    pub fn softmax_rows(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let t = &self.nodes[input.0].value;
        if t.rank() != 2 {
            return Err(Error::Shape {
                primitive: "softmax-rows",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let value = softmax_values(t, None);
        Ok(self.push(Op::SoftmaxRows(input), value, false))
    }

    /// Softmax over each row restricted to unmasked columns; masked columns
    /// come out exactly zero and receive no gradient.
    pub fn masked_softmax_rows(&mut self, input: NodeId, mask: &[bool]) -> Result<NodeId> {
        self.check(input)?;
        let t = &self.nodes[input.0].value;
        if t.rank() != 2 || mask.len() != t.cols() {
            return Err(Error::Shape {
                primitive: "masked-softmax-rows",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument(
                "masked-softmax-rows: mask excludes every column".into(),
            ));
        }
        let value = softmax_values(t, Some(mask));
        Ok(self.push(
            Op::MaskedSoftmaxRows {
                input,
                mask: mask.to_vec(),
            },
            value,
            false,
        ))
    }

    /// Embedding lookup: gathers rows of `table` at `ids`.
    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        self.check(table)?;
        let t = &self.nodes[table.0].value;
        if t.rank() != 2 {
            return Err(Error::Shape {
                primitive: "embedding-lookup",
                lhs: t.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        if ids.is_empty() {
            return Err(Error::InvalidArgument("embedding-lookup of no ids".into()));
        }
        let v = t.rows();
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(Error::InvalidArgument(format!(
                "embedding-lookup id {bad} out of range for table with {v} rows"
            )));
        }
        let d = t.cols();
        let mut values = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            let base = i as usize * d;
            values.extend_from_slice(&t.values()[base..base + d]);
        }
        let value = Tensor {
            shape: vec![ids.len(), d],
            values,
        };
        Ok(self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            value,
            false,
        ))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        self.check(input)?;
        let s: f64 = self.nodes[input.0].value.values().iter().sum();
        Ok(self.push(Op::Sum(input), Tensor::scalar(s), false))
    }

    /// Reinterprets the value under a new shape with the same element count.
    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(input)?;
        let t = &self.nodes[input.0].value;
        let n: usize = shape.iter().product();
        if n != t.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                primitive: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor {
            shape: shape.to_vec(),
            values: t.values().to_vec(),
        };
        Ok(self.push(Op::Reshape(input), value, false))
    }

    /// Gathers single elements `input[rows[i], cols[i]]` into a `[k, 1]` column.
    pub fn pick(&mut self, input: NodeId, rows: &[usize], cols: &[u32]) -> Result<NodeId> {
        self.check(input)?;
        let t = &self.nodes[input.0].value;
        if t.rank() != 2 || rows.len() != cols.len() || rows.is_empty() {
            return Err(Error::Shape {
                primitive: "pick",
                lhs: t.shape().to_vec(),
                rhs: vec![rows.len(), cols.len()],
            });
        }
        if rows.iter().any(|&r| r >= t.rows()) || cols.iter().any(|&c| (c as usize) >= t.cols()) {
            return Err(Error::InvalidArgument("pick index out of range".into()));
        }
        let values = rows
            .iter()
            .zip(cols)
            .map(|(&r, &c)| t.at(r, c as usize))
            .collect();
        let value = Tensor {
            shape: vec![rows.len(), 1],
            values,
        };
        Ok(self.push(
            Op::Pick {
                input,
                rows: rows.to_vec(),
                cols: cols.to_vec(),
            },
            value,
            false,
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss` node. Returns gradients for all
    /// parameter leaves (zero-filled where no gradient flowed) and interior
    /// nodes reached by the sweep; non-parameter leaves are omitted.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        self.check(loss)?;
        let lt = &self.nodes[loss.0].value;
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut accum: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        accum[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = accum[i].take() else { continue };
            self.backward_op(i, &g, &mut accum);
            accum[i] = Some(g);
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let is_leaf = matches!(node.op, Op::Leaf);
            if is_leaf && !node.param {
                continue;
            }
            match accum[i].take() {
                Some(g) => {
                    grads[i] = Some(Tensor {
                        shape: node.value.shape().to_vec(),
                        values: g,
                    })
                }
                None if node.param => grads[i] = Some(Tensor::zeros(node.value.shape())),
                None => {}
            }
        }
        Ok(GradientMap { grads })
    }

    fn backward_op(&self, i: usize, g: &[f64], accum: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = dC B^T
                let da = accum_slot(accum, a.0, m * k);
                for r in 0..m {
                    for c in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[r * n + j] * tb.values()[c * n + j];
                        }
                        da[r * k + c] += s;
                    }
                }
                // dB = A^T dC
                let db = accum_slot(accum, b.0, k * n);
                for r in 0..k {
                    for j in 0..n {
                        let mut s = 0.0;
                        for x in 0..m {
                            s += ta.values()[x * k + r] * g[x * n + j];
                        }
                        db[r * n + j] += s;
                    }
                }
            }
            Op::Add(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let da = accum_slot(accum, a.0, ta.len());
                for (x, gv) in da.iter_mut().zip(g) {
                    *x += gv;
                }
                let db = accum_slot(accum, b.0, tb.len());
                if ta.shape() == tb.shape() {
                    for (x, gv) in db.iter_mut().zip(g) {
                        *x += gv;
                    }
                } else {
                    // bias row: column-sum of upstream
                    let n = tb.cols();
                    for (j, gv) in g.iter().enumerate() {
                        db[j % n] += gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let da = accum_slot(accum, a.0, ta.len());
                for (x, (gv, bv)) in da.iter_mut().zip(g.iter().zip(tb.values())) {
                    *x += gv * bv;
                }
                let db = accum_slot(accum, b.0, tb.len());
                for (x, (gv, av)) in db.iter_mut().zip(g.iter().zip(ta.values())) {
                    *x += gv * av;
                }
            }
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &id in inputs {
                        let len = self.nodes[id.0].value.len();
                        let d = accum_slot(accum, id.0, len);
                        for (x, gv) in d.iter_mut().zip(&g[offset..offset + len]) {
                            *x += gv;
                        }
                        offset += len;
                    }
                } else {
                    let rows = out.rows();
                    let total = out.cols();
                    let mut col0 = 0;
                    for &id in inputs {
                        let t = &self.nodes[id.0].value;
                        let c = t.cols();
                        let d = accum_slot(accum, id.0, t.len());
                        for r in 0..rows {
                            for j in 0..c {
                                d[r * c + j] += g[r * total + col0 + j];
                            }
                        }
                        col0 += c;
                    }
                }
            }
            Op::Slice { input, rows, cols } => {
                let t = &self.nodes[input.0].value;
                let tc = t.cols();
                let nc = cols.1 - cols.0;
                let d = accum_slot(accum, input.0, t.len());
                for (ri, r) in (rows.0..rows.1).enumerate() {
                    for (ci, c) in (cols.0..cols.1).enumerate() {
                        d[r * tc + c] += g[ri * nc + ci];
                    }
                }
            }
            Op::Sigmoid(input) => {
                let d = accum_slot(accum, input.0, out.len());
                for (x, (gv, y)) in d.iter_mut().zip(g.iter().zip(out.values())) {
                    *x += gv * y * (1.0 - y);
                }
            }
            Op::Tanh(input) => {
                let d = accum_slot(accum, input.0, out.len());
                for (x, (gv, y)) in d.iter_mut().zip(g.iter().zip(out.values())) {
                    *x += gv * (1.0 - y * y);
                }
            }
            Op::Log(input) => {
                let t = &self.nodes[input.0].value;
                let d = accum_slot(accum, input.0, t.len());
                for (x, (gv, v)) in d.iter_mut().zip(g.iter().zip(t.values())) {
                    *x += gv / v;
                }
            }
            Op::SoftmaxRows(input) => {
                let (r, c) = (out.rows(), out.cols());
                let d = accum_slot(accum, input.0, r * c);
                for row in 0..r {
                    let y = &out.values()[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let dot: f64 = y.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for j in 0..c {
                        d[row * c + j] += y[j] * (gr[j] - dot);
                    }
                }
            }
            Op::MaskedSoftmaxRows { input, mask } => {
                let (r, c) = (out.rows(), out.cols());
                let d = accum_slot(accum, input.0, r * c);
                for row in 0..r {
                    let y = &out.values()[row * c..(row + 1) * c];
                    let gr = &g[row * c..(row + 1) * c];
                    let dot: f64 = (0..c)
                        .filter(|&j| mask[j])
                        .map(|j| y[j] * gr[j])
                        .sum();
                    for j in 0..c {
                        if mask[j] {
                            d[row * c + j] += y[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Embed { table, ids } => {
                let t = &self.nodes[table.0].value;
                let dcols = t.cols();
                let d = accum_slot(accum, table.0, t.len());
                for (i, &id) in ids.iter().enumerate() {
                    let base = id as usize * dcols;
                    for j in 0..dcols {
                        d[base + j] += g[i * dcols + j];
                    }
                }
            }
            Op::Sum(input) => {
                let t = &self.nodes[input.0].value;
                let d = accum_slot(accum, input.0, t.len());
                for x in d.iter_mut() {
                    *x += g[0];
                }
            }
            Op::Reshape(input) => {
                let d = accum_slot(accum, input.0, g.len());
                for (x, gv) in d.iter_mut().zip(g) {
                    *x += gv;
                }
            }
            Op::Pick { input, rows, cols } => {
                let t = &self.nodes[input.0].value;
                let tc = t.cols();
                let d = accum_slot(accum, input.0, t.len());
                for (i, (&r, &c)) in rows.iter().zip(cols).enumerate() {
                    d[r * tc + c as usize] += g[i];
                }
            }
        }
    }

    /// Recomputes every node from its inputs, in record order. Used to verify
    /// replay determinism; results must match the cached values bit-exactly.
    pub fn replay(&self) -> Vec<Tensor> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = self.recompute(node, &values);
            values.push(v);
        }
        values
    }

    fn recompute(&self, node: &Node, values: &[Tensor]) -> Tensor {
        match &node.op {
            Op::Leaf => node.value.clone(),
            Op::Matmul(a, b) => matmul_values(&values[a.0], &values[b.0]),
            Op::Add(a, b) => {
                let (ta, tb) = (&values[a.0], &values[b.0]);
                let mut out = ta.clone();
                if ta.shape() == tb.shape() {
                    for (x, y) in out.values.iter_mut().zip(tb.values()) {
                        *x += y;
                    }
                } else {
                    let n = ta.cols();
                    for (i, x) in out.values.iter_mut().enumerate() {
                        *x += tb.values()[i % n];
                    }
                }
                out
            }
            Op::Mul(a, b) => {
                let mut out = values[a.0].clone();
                for (x, y) in out.values.iter_mut().zip(values[b.0].values()) {
                    *x *= y;
                }
                out
            }
            Op::Sigmoid(a) => values[a.0].clone_map(sigmoid),
            Op::Tanh(a) => values[a.0].clone_map(f64::tanh),
            Op::Log(a) => values[a.0].clone_map(f64::ln),
            Op::SoftmaxRows(a) => softmax_values(&values[a.0], None),
            Op::MaskedSoftmaxRows { input, mask } => softmax_values(&values[input.0], Some(mask)),
            Op::Sum(a) => Tensor::scalar(values[a.0].values().iter().sum()),
            Op::Reshape(a) => Tensor {
                shape: node.value.shape().to_vec(),
                values: values[a.0].values().to_vec(),
            },
            Op::Embed { table, ids } => {
                let t = &values[table.0];
                let d = t.cols();
                let mut out = Vec::with_capacity(ids.len() * d);
                for &i in ids {
                    out.extend_from_slice(&t.values()[i as usize * d..(i as usize + 1) * d]);
                }
                Tensor {
                    shape: vec![ids.len(), d],
                    values: out,
                }
            }
            Op::Pick { input, rows, cols } => {
                let t = &values[input.0];
                Tensor {
                    shape: vec![rows.len(), 1],
                    values: rows
                        .iter()
                        .zip(cols)
                        .map(|(&r, &c)| t.at(r, c as usize))
                        .collect(),
                }
            }
            Op::Slice { input, rows, cols } => {
                let t = &values[input.0];
                let mut out = Vec::new();
                for r in rows.0..rows.1 {
                    let base = r * t.cols();
                    out.extend_from_slice(&t.values()[base + cols.0..base + cols.1]);
                }
                Tensor {
                    shape: vec![rows.1 - rows.0, cols.1 - cols.0],
                    values: out,
                }
            }
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let cols = values[inputs[0].0].cols();
                    let mut out = Vec::new();
                    for &id in inputs {
                        out.extend_from_slice(values[id.0].values());
                    }
                    Tensor {
                        shape: vec![out.len() / cols, cols],
                        values: out,
                    }
                } else {
                    let rows = values[inputs[0].0].rows();
                    let mut out = Vec::new();
                    for r in 0..rows {
                        for &id in inputs {
                            let t = &values[id.0];
                            let c = t.cols();
                            out.extend_from_slice(&t.values()[r * c..(r + 1) * c]);
                        }
                    }
                    Tensor {
                        shape: vec![rows, out.len() / rows],
                        values: out,
                    }
                }
            }
        }
    }
}

impl Tensor {
    fn clone_map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn accum_slot<'a>(accum: &'a mut [Option<Vec<f64>>], idx: usize, len: usize) -> &'a mut Vec<f64> {
    accum[idx].get_or_insert_with(|| vec![0.0; len])
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a.values()[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.values()[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor {
        shape: vec![m, n],
        values: out,
    }
}

fn softmax_values(t: &Tensor, mask: Option<&[bool]>) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = vec![0.0; r * c];
    for row in 0..r {
        let x = &t.values()[row * c..(row + 1) * c];
        let max = x
            .iter()
            .enumerate()
            .filter(|(j, _)| mask.map_or(true, |m| m[*j]))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..c {
            if mask.map_or(true, |m| m[j]) {
                let e = (x[j] - max).exp();
                out[row * c + j] = e;
                sum += e;
            }
        }
        for j in 0..c {
            out[row * c + j] /= sum;
        }
    }
    Tensor {
        shape: vec![r, c],
        values: out,
    }
}

// ── gradient checking ───────────────────────────────────────────────

/// Central-finite-difference check of a tape-building closure.
///
/// `build` must be deterministic: given the same parameter tensors it must
/// produce the same scalar loss. Returns the max over all parameter elements
/// of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn check_gradients<F>(build: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be in (0, 1e-3], got {h}"
        )));
    }
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let lv = tape.value(loss);
    if lv.len() != 1 {
        return Err(Error::NonScalarLoss {
            shape: lv.shape().to_vec(),
        });
    }
    if !lv.is_finite() {
        return Err(Error::NonFinite {
            context: "check_gradients forward".into(),
        });
    }
    let grads = tape.backward(loss)?;

    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|p| t.param(p.clone())).collect();
        let loss = build(&mut t, &ids)?;
        let v = t.value(loss).values()[0];
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "check_gradients perturbed forward".into(),
            });
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_err: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads
            .get(ids[pi])
            .expect("parameter nodes always have gradient entries");
        for e in 0..p.len() {
            let orig = p.values()[e];
            work[pi].values_mut()[e] = orig + h;
            let fp = eval(&work)?;
            work[pi].values_mut()[e] = orig - h;
            let fm = eval(&work)?;
            work[pi].values_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.values()[e];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            max_err = max_err.max((a - numeric).abs() / denom);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.leaf(
            Tensor::from_rows(&[
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ])
            .unwrap(),
        );
        let a = Tensor::from_rows(&[
            vec![1.0, 2.0, 3.0, 4.0],
            vec![5.0, 6.0, 7.0, 8.0],
            vec![9.0, 10.0, 11.0, 12.0],
        ])
        .unwrap();
        let an = tape.leaf(a.clone());
        let out = tape.matmul(eye, an).unwrap();
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn softmax_symmetry_and_row_sums() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).values(), &[0.5, 0.5]);

        let z = tape.leaf(Tensor::from_rows(&[vec![3.0, -2.0, 0.7], vec![50.0, 49.0, 48.0]]).unwrap());
        let s = tape.softmax_rows(z).unwrap();
        let t = tape.value(s);
        for r in 0..2 {
            let sum: f64 = (0..3).map(|c| t.at(r, c)).sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!((0..3).all(|c| t.at(r, c) > 0.0 && t.at(r, c) < 1.0));
        }
    }

    #[test]
    fn tanh_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![0.0]));
        let y = tape.tanh(x).unwrap();
        assert_eq!(tape.value(y).values(), &[0.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        // l = sum(x ⊙ x), x = [1, 2] → dl/dx = 2x = [2, 4]
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq).unwrap();
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().values(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_of_sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!((grads.get(x).unwrap().values()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(vec![1.0, 2.0]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { .. }));
    }

    #[test]
    fn backward_rejects_foreign_node() {
        let mut other = Tape::new();
        let foreign = other.param(Tensor::scalar(1.0));
        let _ = other.param(Tensor::scalar(1.0));
        let tape = Tape::new();
        assert!(matches!(
            tape.backward(foreign).unwrap_err(),
            Error::NodeNotOnTape { .. }
        ));
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            Error::Shape {
                primitive,
                lhs,
                rhs,
            } => {
                assert_eq!(primitive, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn concat_then_slice_is_identity() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let a = random_tensor(&mut rng, &[2, 3]);
        let b = random_tensor(&mut rng, &[2, 5]);
        let mut tape = Tape::new();
        let an = tape.leaf(a.clone());
        let bn = tape.leaf(b.clone());
        let cat = tape.concat(&[an, bn], 1).unwrap();
        let sa = tape.slice(cat, (0, 2), (0, 3)).unwrap();
        let sb = tape.slice(cat, (0, 2), (3, 8)).unwrap();
        assert_eq!(tape.value(sa), &a);
        assert_eq!(tape.value(sb), &b);

        let c = random_tensor(&mut rng, &[1, 4]);
        let d = random_tensor(&mut rng, &[3, 4]);
        let mut tape = Tape::new();
        let cn = tape.leaf(c.clone());
        let dn = tape.leaf(d.clone());
        let cat = tape.concat(&[cn, dn], 0).unwrap();
        let sc = tape.slice(cat, (0, 1), (0, 4)).unwrap();
        let sd = tape.slice(cat, (1, 4), (0, 4)).unwrap();
        assert_eq!(tape.value(sc), &c);
        assert_eq!(tape.value(sd), &d);
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![100.0, 1.0, 2.0]));
        let y = tape
            .masked_softmax_rows(x, &[false, true, true])
            .unwrap();
        let v = tape.value(y).values();
        assert_eq!(v[0], 0.0);
        assert!((v[1] + v[2] - 1.0).abs() < 1e-12);
        assert!(v[2] > v[1]);
    }

    #[test]
    fn replay_reproduces_forward_bit_exactly() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let table = tape.param(random_tensor(&mut rng, &[6, 4]));
        let w = tape.param(random_tensor(&mut rng, &[4, 5]));
        let b = tape.param(random_tensor(&mut rng, &[1, 5]));
        let e = tape.embed(table, &[0, 3, 5]).unwrap();
        let h = tape.matmul(e, w).unwrap();
        let hb = tape.add(h, b).unwrap();
        let t = tape.tanh(hb).unwrap();
        let s = tape.softmax_rows(t).unwrap();
        let p = tape.pick(s, &[0, 1, 2], &[1, 2, 3]).unwrap();
        let lg = tape.log(p).unwrap();
        let _ = tape.sum(lg).unwrap();

        let replayed = tape.replay();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, tape.value(NodeId(i)), "node {i} differs on replay");
        }
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::zeros(&[3, 2]));
        assert!(tape.embed(table, &[3]).is_err());
    }

    // Central finite differences vs analytic gradients for every primitive,
    // 100 random trials.
    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(802);
        for trial in 0..100 {
            let m = rng.gen_range(1..4usize);
            let k = rng.gen_range(1..4usize);
            let n = rng.gen_range(2..5usize);
            let kind = trial % 10;
            let err = match kind {
                0 => {
                    let p = [random_tensor(&mut rng, &[m, k]), random_tensor(&mut rng, &[k, n])];
                    check_gradients(
                        |t, ids| {
                            let mm = t.matmul(ids[0], ids[1])?;
                            let sq = t.mul(mm, mm)?;
                            t.sum(sq)
                        },
                        &p,
                        1e-5,
                    )
                    .unwrap()
                }
                1 => {
                    let p = [random_tensor(&mut rng, &[m, n]), random_tensor(&mut rng, &[1, n])];
                    check_gradients(
                        |t, ids| {
                            let a = t.add(ids[0], ids[1])?;
                            let s = t.sigmoid(a)?;
                            let sq = t.mul(s, s)?;
                            t.sum(sq)
                        },
                        &p,
                        1e-5,
                    )
                    .unwrap()
                }
                2 => {
                    let p = [random_tensor(&mut rng, &[m, n]), random_tensor(&mut rng, &[m, n])];
                    check_gradients(
                        |t, ids| {
                            let x = t.mul(ids[0], ids[1])?;
                            let y = t.tanh(x)?;
                            t.sum(y)
                        },
                        &p,
                        1e-5,
                    )
                    .unwrap()
                }
                3 => {
                    let p = [random_tensor(&mut rng, &[m, n]), random_tensor(&mut rng, &[m, n])];
                    check_gradients(
                        |t, ids| {
                            let cat = t.concat(&[ids[0], ids[1]], 1)?;
                            let s = t.tanh(cat)?;
                            let sq = t.mul(s, s)?;
                            t.sum(sq)
                        },
                        &p,
                        1e-5,
                    )
                    .unwrap()
                }
                4 => {
                    let p = [random_tensor(&mut rng, &[3, 4])];
                    check_gradients(
                        |t, ids| {
                            let s = t.slice(ids[0], (1, 3), (1, 4))?;
                            let sq = t.mul(s, s)?;
                            t.sum(sq)
                        },
                        &p,
                        1e-5,
                    )
                    .unwrap()
                }
                5 => {
                    let p = [random_tensor(&mut rng, &[m, n])];
                    check_gradients(
                        |t, ids| {
                            let s = t.softmax_rows(ids[0])?;
                            let sq = t.mul(s, s)?;
                            t.sum(sq)
                        },
                        &p,
                        1e-5,
                    )
                    .unwrap()
                }
                6 => {
                    let p = [random_tensor(&mut rng, &[m, 3])];
                    let mask = vec![true, trial % 3 != 0, true];
                    check_gradients(
                        move |t, ids| {
                            let s = t.masked_softmax_rows(ids[0], &mask)?;
                            let sq = t.mul(s, s)?;
                            t.sum(sq)
                        },
                        &p,
                        1e-5,
                    )
                    .unwrap()
                }
                7 => {
                    let p = [random_tensor(&mut rng, &[4, n])];
                    let ids_used: Vec<u32> = (0..3).map(|_| rng.gen_range(0..4)).collect();
                    check_gradients(
                        move |t, ids| {
                            let e = t.embed(ids[0], &ids_used)?;
                            let y = t.tanh(e)?;
                            t.sum(y)
                        },
                        &p,
                        1e-5,
                    )
                    .unwrap()
                }
                8 => {
                    let p = [random_tensor(&mut rng, &[m, n])];
                    let cols: Vec<u32> = (0..m).map(|_| rng.gen_range(0..n as u32)).collect();
                    let rows: Vec<usize> = (0..m).collect();
                    check_gradients(
                        move |t, ids| {
                            let sm = t.softmax_rows(ids[0])?;
                            let picked = t.pick(sm, &rows, &cols)?;
                            let lg = t.log(picked)?;
                            t.sum(lg)
                        },
                        &p,
                        1e-5,
                    )
                    .unwrap()
                }
                _ => {
                    let p = [random_tensor(&mut rng, &[m, n])];
                    let total = m * n;
                    check_gradients(
                        move |t, ids| {
                            let r = t.reshape(ids[0], &[total, 1])?;
                            let s = t.sigmoid(r)?;
                            let sq = t.mul(s, s)?;
                            t.sum(sq)
                        },
                        &p,
                        1e-5,
                    )
                    .unwrap()
                }
            };
            assert!(err < 1e-4, "trial {trial} kind {kind}: max rel err {err}");
        }
    }

    #[test]
    fn check_gradients_linear_is_near_exact() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        let p = [random_tensor(&mut rng, &[3, 4])];
        // coefficients bounded away from zero so the relative-error
        // denominator is the coefficient itself, not the 1e-8 floor
        let c = Tensor::new(
            vec![3, 4],
            (0..12)
                .map(|_| rng.gen_range(0.2..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
                .collect(),
        )
        .unwrap();
        let err = check_gradients(
            move |t, ids| {
                let cn = t.leaf(c.clone());
                let prod = t.mul(ids[0], cn)?;
                t.sum(prod)
            },
            &p,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-10, "linear check err {err}");
    }

    #[test]
    fn check_gradients_softmax_cross_entropy() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(17);
        let logits = random_tensor(&mut rng, &[5, 7]);
        let gold: Vec<u32> = (0..5).map(|_| rng.gen_range(0..7)).collect();
        let rows: Vec<usize> = (0..5).collect();
        let err = check_gradients(
            move |t, ids| {
                let sm = t.softmax_rows(ids[0])?;
                let picked = t.pick(sm, &rows, &gold)?;
                let lg = t.log(picked)?;
                let s = t.sum(lg)?;
                let neg = t.leaf(Tensor::scalar(-1.0));
                t.mul(s, neg)
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "softmax xent err {err}");
    }

    #[test]
    fn check_gradients_rejects_bad_step() {
        let p = [Tensor::scalar(1.0)];
        assert!(check_gradients(|t, ids| t.sum(ids[0]), &p, 0.0).is_err());
        assert!(check_gradients(|t, ids| t.sum(ids[0]), &p, 1e-2).is_err());
    }

    #[test]
    fn params_without_flow_get_zero_gradients() {
        let mut tape = Tape::new();
        let used = tape.param(Tensor::scalar(2.0));
        let unused = tape.param(Tensor::row(vec![1.0, 2.0, 3.0]));
        let l = tape.sum(used).unwrap();
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(unused).unwrap().values(), &[0.0, 0.0, 0.0]);
        // non-parameter leaves are omitted
        let mut tape = Tape::new();
        let leaf = tape.leaf(Tensor::scalar(2.0));
        let l = tape.sum(leaf).unwrap();
        let grads = tape.backward(l).unwrap();
        assert!(grads.get(leaf).is_none());
    }
}
