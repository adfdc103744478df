//! Expression graphs: forward evaluation and exact reverse-mode gradients.
//!
//! An [`ExprGraph`] is a DAG of primitive operations over tensor leaves.
//! Leaves are either named parameters, named inputs, or inline constants.
//! Shapes are validated when nodes are built, so a well-formed graph cannot
//! fail a shape check at evaluation time. Evaluation is deterministic given
//! leaf bindings and the [`EvalContext`] seed used for dropout masks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{DiffError, Tensor};

/// Handle to a node inside an [`ExprGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Param(String),
    Input(String),
    Const(Tensor),
    MatMul(NodeId, NodeId),
    /// Elementwise add. The right operand may also be a `1 x c` row vector or
    /// an `r x 1` column vector, broadcast across the left operand.
    Add(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    SoftmaxRows(NodeId),
    ConcatCols(Vec<NodeId>),
    /// Row `i` of the output is the mean of the input rows listed in set `i`.
    /// An empty set yields a zero row.
    MeanRowsOverSets(NodeId, Vec<Vec<usize>>),
    GatherRows(NodeId, Vec<usize>),
    Transpose(NodeId),
    Reshape(NodeId, usize, usize),
    /// Mean of per-row `-log softmax(x)[target]`. Output is scalar.
    CrossEntropyWithLogits(NodeId, Vec<usize>),
    /// Zeroes whole rows with the given probability in train mode; identity
    /// in infer mode. Rows correspond to edges when the input is edge-indexed.
    DropoutRows(NodeId, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Input(_) => "input",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::ScalarMul(..) => "scalar-mul",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky-relu",
            Op::SoftmaxRows(_) => "softmax-rows",
            Op::ConcatCols(_) => "concat-cols",
            Op::MeanRowsOverSets(..) => "mean-rows-over-index-sets",
            Op::GatherRows(..) => "gather-rows",
            Op::Transpose(_) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::CrossEntropyWithLogits(..) => "cross-entropy-with-logits",
            Op::DropoutRows(..) => "dropout-edge-mask-apply",
        }
    }
}

struct Node {
    op: Op,
    shape: (usize, usize),
}

/// Evaluation mode: `train` enables dropout masks drawn from `seed`.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext {
    pub train: bool,
    pub seed: u64,
}

impl EvalContext {
    pub fn infer() -> Self {
        Self {
            train: false,
            seed: 0,
        }
    }

    pub fn train(seed: u64) -> Self {
        Self { train: true, seed }
    }
}

/// Leaf values for one evaluation.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    values: BTreeMap<String, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, value: Tensor) -> &mut Self {
        self.values.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.values.get(name)
    }

    pub fn extend_from(&mut self, other: &BTreeMap<String, Tensor>) {
        for (k, v) in other {
            self.values.insert(k.clone(), v.clone());
        }
    }
}

#[derive(Default)]
pub struct ExprGraph {
    nodes: Vec<Node>,
    leaf_names: BTreeMap<String, NodeId>,
}

impl ExprGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape_of(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op, shape: (usize, usize)) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, name: String, rows: usize, cols: usize, param: bool) -> Result<NodeId, DiffError> {
        if self.leaf_names.contains_key(&name) {
            return Err(DiffError::Graph(format!("leaf '{name}' declared twice")));
        }
        let op = if param {
            Op::Param(name.clone())
        } else {
            Op::Input(name.clone())
        };
        let id = self.push(op, (rows, cols));
        self.leaf_names.insert(name, id);
        Ok(id)
    }

    /// Declare a trainable-parameter leaf.
    pub fn param(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<NodeId, DiffError> {
        self.leaf(name.into(), rows, cols, true)
    }

    /// Declare an input leaf. Inputs also receive gradients.
    pub fn input(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Result<NodeId, DiffError> {
        self.leaf(name.into(), rows, cols, false)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape();
        self.push(Op::Const(value), shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (ar, ac) = self.shape_of(a);
        let (br, bc) = self.shape_of(b);
        if ac != br {
            return Err(DiffError::Shape(format!(
                "matmul: {ar}x{ac} @ {br}x{bc}"
            )));
        }
        Ok(self.push(Op::MatMul(a, b), (ar, bc)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let sa = self.shape_of(a);
        let sb = self.shape_of(b);
        let broadcast_ok = sa == sb || (sb.0 == 1 && sb.1 == sa.1) || (sb.1 == 1 && sb.0 == sa.0);
        if !broadcast_ok {
            return Err(DiffError::Shape(format!(
                "add: {}x{} + {}x{}",
                sa.0, sa.1, sb.0, sb.1
            )));
        }
        Ok(self.push(Op::Add(a, b), sa))
    }

    pub fn scalar_mul(&mut self, a: NodeId, k: f64) -> NodeId {
        let shape = self.shape_of(a);
        self.push(Op::ScalarMul(a, k), shape)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a);
        self.push(Op::Relu(a), shape)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let shape = self.shape_of(a);
        self.push(Op::LeakyRelu(a, slope), shape)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape_of(a);
        self.push(Op::SoftmaxRows(a), shape)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::Graph("concat-cols of zero tensors".into()));
        }
        let rows = self.shape_of(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape_of(p);
            if r != rows {
                return Err(DiffError::Shape(format!(
                    "concat-cols row mismatch: {rows} vs {r}"
                )));
            }
            cols += c;
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), (rows, cols)))
    }

    pub fn mean_rows_over_sets(&mut self, a: NodeId, sets: Vec<Vec<usize>>) -> Result<NodeId, DiffError> {
        let (rows, cols) = self.shape_of(a);
        for set in &sets {
            if let Some(&bad) = set.iter().find(|&&i| i >= rows) {
                return Err(DiffError::Graph(format!(
                    "mean-rows set index {bad} out of range (rows = {rows})"
                )));
            }
        }
        let out_rows = sets.len();
        Ok(self.push(Op::MeanRowsOverSets(a, sets), (out_rows, cols)))
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> Result<NodeId, DiffError> {
        let (rows, cols) = self.shape_of(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(DiffError::Graph(format!(
                "gather-rows index {bad} out of range (rows = {rows})"
            )));
        }
        let out_rows = indices.len();
        Ok(self.push(Op::GatherRows(a, indices), (out_rows, cols)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape_of(a);
        self.push(Op::Transpose(a), (c, r))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId, DiffError> {
        let (r, c) = self.shape_of(a);
        if r * c != rows * cols {
            return Err(DiffError::Shape(format!(
                "reshape: {r}x{c} into {rows}x{cols}"
            )));
        }
        Ok(self.push(Op::Reshape(a, rows, cols), (rows, cols)))
    }

    pub fn cross_entropy_with_logits(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId, DiffError> {
        let (rows, cols) = self.shape_of(logits);
        if targets.len() != rows {
            return Err(DiffError::Shape(format!(
                "cross-entropy: {} targets for {rows} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(DiffError::Graph(format!(
                "cross-entropy target class {bad} out of range (classes = {cols})"
            )));
        }
        Ok(self.push(Op::CrossEntropyWithLogits(logits, targets), (1, 1)))
    }

    pub fn dropout_rows(&mut self, a: NodeId, prob: f64) -> Result<NodeId, DiffError> {
        if !(0.0..1.0).contains(&prob) {
            return Err(DiffError::Graph(format!(
                "dropout probability {prob} outside [0, 1)"
            )));
        }
        let shape = self.shape_of(a);
        Ok(self.push(Op::DropoutRows(a, prob), shape))
    }

    fn leaf_value<'b>(&self, name: &str, bindings: &'b Bindings, id: NodeId) -> Result<&'b Tensor, DiffError> {
        let value = bindings
            .get(name)
            .ok_or_else(|| DiffError::Graph(format!("leaf '{name}' is unbound")))?;
        let expect = self.shape_of(id);
        if value.shape() != expect {
            return Err(DiffError::Shape(format!(
                "leaf '{name}' bound with shape {}x{}, declared {}x{}",
                value.shape().0,
                value.shape().1,
                expect.0,
                expect.1
            )));
        }
        Ok(value)
    }

    /// Dropout keep-mask for one node, deterministic in `(seed, node id)`.
    fn dropout_mask(&self, id: NodeId, rows: usize, prob: f64, ctx: &EvalContext) -> Vec<bool> {
        let node_salt = (id.0 as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut rng = ChaCha20Rng::seed_from_u64(ctx.seed ^ node_salt);
        (0..rows).map(|_| rng.gen::<f64>() >= prob).collect()
    }

    fn forward_trace(
        &self,
        root: NodeId,
        bindings: &Bindings,
        ctx: &EvalContext,
    ) -> Result<(Vec<Tensor>, BTreeMap<usize, Vec<bool>>), DiffError> {
        if root.0 >= self.nodes.len() {
            return Err(DiffError::Graph("root node out of range".into()));
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(root.0 + 1);
        let mut masks = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            let value = match &node.op {
                Op::Param(name) | Op::Input(name) => {
                    self.leaf_value(name, bindings, NodeId(idx))?.clone()
                }
                Op::Const(t) => t.clone(),
                Op::MatMul(a, b) => values[a.0].matmul(&values[b.0])?,
                Op::Add(a, b) => {
                    let lhs = &values[a.0];
                    let rhs = &values[b.0];
                    let mut out = lhs.clone();
                    if lhs.shape() == rhs.shape() {
                        out.add_assign(rhs)?;
                    } else if rhs.rows() == 1 {
                        for r in 0..out.rows() {
                            for (o, &v) in out.row_mut(r).iter_mut().zip(rhs.data()) {
                                *o += v;
                            }
                        }
                    } else {
                        for r in 0..out.rows() {
                            let v = rhs.get(r, 0);
                            for o in out.row_mut(r) {
                                *o += v;
                            }
                        }
                    }
                    out
                }
                Op::ScalarMul(a, k) => values[a.0].scaled(*k),
                Op::Relu(a) => values[a.0].map(|v| if v > 0.0 { v } else { 0.0 }),
                Op::LeakyRelu(a, slope) => {
                    let s = *slope;
                    values[a.0].map(move |v| if v > 0.0 { v } else { s * v })
                }
                Op::SoftmaxRows(a) => softmax_rows(&values[a.0]),
                Op::ConcatCols(parts) => {
                    let mut out = Tensor::zeros(node.shape.0, node.shape.1);
                    for r in 0..node.shape.0 {
                        let row = out.row_mut(r);
                        let mut offset = 0;
                        for &p in parts {
                            let src = values[p.0].row(r);
                            row[offset..offset + src.len()].copy_from_slice(src);
                            offset += src.len();
                        }
                    }
                    out
                }
                Op::MeanRowsOverSets(a, sets) => {
                    let src = &values[a.0];
                    let mut out = Tensor::zeros(sets.len(), src.cols());
                    for (r, set) in sets.iter().enumerate() {
                        if set.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / set.len() as f64;
                        for &i in set {
                            for (o, &v) in out.row_mut(r).iter_mut().zip(src.row(i)) {
                                *o += v;
                            }
                        }
                        for o in out.row_mut(r) {
                            *o *= inv;
                        }
                    }
                    out
                }
                Op::GatherRows(a, indices) => {
                    let src = &values[a.0];
                    let mut out = Tensor::zeros(indices.len(), src.cols());
                    for (r, &i) in indices.iter().enumerate() {
                        out.row_mut(r).copy_from_slice(src.row(i));
                    }
                    out
                }
                Op::Transpose(a) => values[a.0].transposed(),
                Op::Reshape(a, r, c) => values[a.0].reshaped(*r, *c)?,
                Op::CrossEntropyWithLogits(a, targets) => {
                    let logits = &values[a.0];
                    let mut total = 0.0;
                    for (r, &target) in targets.iter().enumerate() {
                        let row = logits.row(r);
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                        total += lse - row[target];
                    }
                    Tensor::scalar(total / targets.len() as f64)
                }
                Op::DropoutRows(a, prob) => {
                    let src = &values[a.0];
                    if ctx.train {
                        let mask = self.dropout_mask(NodeId(idx), src.rows(), *prob, ctx);
                        let mut out = src.clone();
                        for (r, &keep) in mask.iter().enumerate() {
                            if !keep {
                                out.row_mut(r).fill(0.0);
                            }
                        }
                        masks.insert(idx, mask);
                        out
                    } else {
                        src.clone()
                    }
                }
            };
            if !value.is_finite() {
                return Err(DiffError::NonFinite {
                    node: idx,
                    op: node.op.name(),
                });
            }
            values.push(value);
        }
        Ok((values, masks))
    }

    /// Evaluate the value of `root` under the given leaf bindings.
    pub fn evaluate(&self, root: NodeId, bindings: &Bindings, ctx: &EvalContext) -> Result<Tensor, DiffError> {
        let (mut values, _) = self.forward_trace(root, bindings, ctx)?;
        Ok(values.swap_remove(root.0))
    }

    /// Exact reverse-mode gradient of a scalar `root` for every parameter and
    /// input leaf, keyed by leaf name.
    pub fn gradient(
        &self,
        root: NodeId,
        bindings: &Bindings,
        ctx: &EvalContext,
    ) -> Result<BTreeMap<String, Tensor>, DiffError> {
        if self.shape_of(root) != (1, 1) {
            let (r, c) = self.shape_of(root);
            return Err(DiffError::Shape(format!(
                "gradient root must be scalar, got {r}x{c}"
            )));
        }
        let (values, masks) = self.forward_trace(root, bindings, ctx)?;
        let mut adjoints: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adjoints[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let Some(adj) = adjoints[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Param(_) | Op::Input(_) | Op::Const(_) => {
                    adjoints[idx] = Some(adj);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = adj.matmul(&values[b.0].transposed())?;
                    let db = values[a.0].transposed().matmul(&adj)?;
                    accumulate(&mut adjoints, a.0, da)?;
                    accumulate(&mut adjoints, b.0, db)?;
                }
                Op::Add(a, b) => {
                    let sb = values[b.0].shape();
                    let db = if adj.shape() == sb {
                        adj.clone()
                    } else if sb.0 == 1 {
                        let mut out = Tensor::zeros(1, sb.1);
                        for r in 0..adj.rows() {
                            for (o, &v) in out.row_mut(0).iter_mut().zip(adj.row(r)) {
                                *o += v;
                            }
                        }
                        out
                    } else {
                        let mut out = Tensor::zeros(sb.0, 1);
                        for r in 0..adj.rows() {
                            out.set(r, 0, adj.row(r).iter().sum());
                        }
                        out
                    };
                    accumulate(&mut adjoints, a.0, adj)?;
                    accumulate(&mut adjoints, b.0, db)?;
                }
                Op::ScalarMul(a, k) => {
                    accumulate(&mut adjoints, a.0, adj.scaled(*k))?;
                }
                Op::Relu(a) => {
                    let gate = values[a.0].map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut adjoints, a.0, adj.hadamard(&gate)?)?;
                }
                Op::LeakyRelu(a, slope) => {
                    let s = *slope;
                    let gate = values[a.0].map(move |v| if v > 0.0 { 1.0 } else { s });
                    accumulate(&mut adjoints, a.0, adj.hadamard(&gate)?)?;
                }
                Op::SoftmaxRows(a) => {
                    let y = &values[idx];
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = adj.row(r).iter().zip(y.row(r)).map(|(d, v)| d * v).sum();
                        for (o, (&d, &v)) in dx
                            .row_mut(r)
                            .iter_mut()
                            .zip(adj.row(r).iter().zip(y.row(r)))
                        {
                            *o = v * (d - dot);
                        }
                    }
                    accumulate(&mut adjoints, a.0, dx)?;
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (pr, pc) = values[p.0].shape();
                        let mut dp = Tensor::zeros(pr, pc);
                        for r in 0..pr {
                            dp.row_mut(r).copy_from_slice(&adj.row(r)[offset..offset + pc]);
                        }
                        offset += pc;
                        accumulate(&mut adjoints, p.0, dp)?;
                    }
                }
                Op::MeanRowsOverSets(a, sets) => {
                    let (ar, ac) = values[a.0].shape();
                    let mut da = Tensor::zeros(ar, ac);
                    for (r, set) in sets.iter().enumerate() {
                        if set.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / set.len() as f64;
                        for &i in set {
                            for (o, &v) in da.row_mut(i).iter_mut().zip(adj.row(r)) {
                                *o += v * inv;
                            }
                        }
                    }
                    accumulate(&mut adjoints, a.0, da)?;
                }
                Op::GatherRows(a, indices) => {
                    let (ar, ac) = values[a.0].shape();
                    let mut da = Tensor::zeros(ar, ac);
                    for (r, &i) in indices.iter().enumerate() {
                        for (o, &v) in da.row_mut(i).iter_mut().zip(adj.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut adjoints, a.0, da)?;
                }
                Op::Transpose(a) => {
                    accumulate(&mut adjoints, a.0, adj.transposed())?;
                }
                Op::Reshape(a, ..) => {
                    let (ar, ac) = values[a.0].shape();
                    accumulate(&mut adjoints, a.0, adj.reshaped(ar, ac)?)?;
                }
                Op::CrossEntropyWithLogits(a, targets) => {
                    let scale = adj.scalar_value()? / targets.len() as f64;
                    let logits = &values[a.0];
                    let mut da = Tensor::zeros(logits.rows(), logits.cols());
                    for (r, &target) in targets.iter().enumerate() {
                        let row = logits.row(r);
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                        for (c, o) in da.row_mut(r).iter_mut().enumerate() {
                            let p = (row[c] - lse).exp();
                            *o = scale * (p - if c == target { 1.0 } else { 0.0 });
                        }
                    }
                    accumulate(&mut adjoints, a.0, da)?;
                }
                Op::DropoutRows(a, _) => {
                    let mut da = adj.clone();
                    if let Some(mask) = masks.get(&idx) {
                        for (r, &keep) in mask.iter().enumerate() {
                            if !keep {
                                da.row_mut(r).fill(0.0);
                            }
                        }
                    }
                    accumulate(&mut adjoints, a.0, da)?;
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (name, &id) in &self.leaf_names {
            if id.0 > root.0 {
                continue;
            }
            let grad = match adjoints[id.0].take() {
                Some(g) => g,
                None => {
                    let (r, c) = self.shape_of(id);
                    Tensor::zeros(r, c)
                }
            };
            grads.insert(name.clone(), grad);
        }
        Ok(grads)
    }
}

fn accumulate(adjoints: &mut [Option<Tensor>], idx: usize, grad: Tensor) -> Result<(), DiffError> {
    match &mut adjoints[idx] {
        Some(existing) => existing.add_assign(&grad),
        slot @ None => {
            *slot = Some(grad);
            Ok(())
        }
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        let inv = 1.0 / sum;
        for o in out.row_mut(r) {
            *o *= inv;
        }
    }
    out
}
