//! Reverse-mode autodiff over a Wengert tape with a fixed primitive set:
//! matmul (with transpose flags), add, row-bias add, mul, scale, relu,
//! softplus, exp, log, sum, mean, row-mean, L2 norm, row softmax, column
//! concat, row/column slice, reshape, embedding lookup, and a fused mean
//! cross-entropy (kept fused for numerical stability).
//!
//! Construction and backward are single-threaded per graph. Backward walks
//! nodes in reverse creation order, accumulates gradients with a fixed
//! summation order, and releases each node's saved value as soon as that
//! node has been processed, so two identical runs produce bit-identical
//! gradients and the live-activation meter reflects what a memory-planner
//! would keep.

use std::cell::Cell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a graph node. Copyable; only valid for the graph that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

type Thunk = Rc<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

#[derive(Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    AddRow { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Relu { a: Var },
    Softplus { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    MeanRows { a: Var },
    L2Norm { a: Var },
    Softmax { a: Var },
    ConcatCols { parts: Vec<Var> },
    SliceRows { a: Var, start: usize, len: usize },
    SliceCols { a: Var, start: usize, len: usize },
    Reshape { a: Var },
    EmbedLookup { table: Var, ids: Rc<Vec<usize>> },
    CrossEntropyMean { logits: Var, labels: Rc<Vec<usize>> },
    Checkpoint { inputs: Vec<Var>, f: Thunk },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::AddRow { .. } => "add_row",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Softplus { .. } => "softplus",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::MeanRows { .. } => "mean_rows",
            Op::L2Norm { .. } => "l2_norm",
            Op::Softmax { .. } => "softmax",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape { .. } => "reshape",
            Op::EmbedLookup { .. } => "embed_lookup",
            Op::CrossEntropyMean { .. } => "cross_entropy_mean",
            Op::Checkpoint { .. } => "checkpoint",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul { a, b, .. } | Op::Add { a, b } | Op::AddRow { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::Scale { a, .. }
            | Op::Relu { a }
            | Op::Softplus { a }
            | Op::Exp { a }
            | Op::Log { a }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::MeanRows { a }
            | Op::L2Norm { a }
            | Op::Softmax { a }
            | Op::SliceRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::Reshape { a } => vec![*a],
            Op::ConcatCols { parts } => parts.clone(),
            Op::EmbedLookup { table, .. } => vec![*table],
            Op::CrossEntropyMean { logits, .. } => vec![*logits],
            Op::Checkpoint { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Option<Vec<f64>>,
    needs_grad: bool,
}

/// Counts f64 values held by non-leaf nodes (saved activations), shared
/// between a graph and the scratch graphs its checkpoints spawn.
#[derive(Clone)]
pub(crate) struct Meter(Rc<MeterInner>);

struct MeterInner {
    live: Cell<usize>,
    peak: Cell<usize>,
}

impl Meter {
    fn new() -> Self {
        Meter(Rc::new(MeterInner {
            live: Cell::new(0),
            peak: Cell::new(0),
        }))
    }
    fn inc(&self, n: usize) {
        let live = self.0.live.get() + n;
        self.0.live.set(live);
        if live > self.0.peak.get() {
            self.0.peak.set(live);
        }
    }
    fn dec(&self, n: usize) {
        self.0.live.set(self.0.live.get() - n);
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    meter: Meter,
    backward_done: bool,
}

impl Drop for Graph {
    fn drop(&mut self) {
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                if let Some(v) = node.value.take() {
                    self.meter.dec(v.len());
                }
            }
        }
    }
}

/// Gradients from one backward pass, indexed by `Var`.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.id]
            .as_ref()
            .map(|g| Tensor::matrix(v.rows, v.cols, g.clone()).expect("grad shape"))
    }

    /// Gradient for `v`, or zeros if no path reached it.
    pub fn get_or_zero(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(vec![v.rows, v.cols]))
    }

    pub(crate) fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.id].as_deref()
    }

    fn nan_check(&self, id: usize, op: &'static str) -> Result<()> {
        if let Some(g) = &self.grads[id] {
            if g.iter().any(|x| x.is_nan()) {
                return Err(Error::Numeric {
                    node: id,
                    op,
                    detail: "NaN in gradient".into(),
                });
            }
        }
        Ok(())
    }
}

// ---- raw kernels ----------------------------------------------------------

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// C[m,n] = opA(A) * opB(B) where opX transposes when the flag is set.
/// Physical dims are (ar, ac) and (br, bc).
pub(crate) fn matmul_raw(
    a: &[f64],
    (ar, ac): (usize, usize),
    b: &[f64],
    (br, bc): (usize, usize),
    ta: bool,
    tb: bool,
) -> Vec<f64> {
    let at;
    let (a, m, k) = if ta {
        at = transpose(a, ar, ac);
        (at.as_slice(), ac, ar)
    } else {
        (a, ar, ac)
    };
    let bt;
    let (b, k2, n) = if tb {
        bt = transpose(b, br, bc);
        (bt.as_slice(), bc, br)
    } else {
        (b, br, bc)
    };
    debug_assert_eq!(k, k2);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue; // normalized expression rows are ~90% zeros
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn softplus_val(x: f64) -> f64 {
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

fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * cols..(i + 1) * cols];
        let mut z = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    }
    out
}

// ---- graph ----------------------------------------------------------------

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            meter: Meter::new(),
            backward_done: false,
        }
    }

    fn with_meter(meter: Meter) -> Self {
        Graph {
            nodes: Vec::new(),
            meter,
            backward_done: false,
        }
    }

    /// Peak count of f64 activation values (non-leaf node outputs) held
    /// live at any point, including scratch graphs spawned by checkpoints.
    pub fn peak_activations(&self) -> usize {
        self.meter.0.peak.get()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of ops consuming `v` directly (checkpoint thunks are opaque).
    pub fn consumer_count(&self, v: Var) -> usize {
        self.nodes
            .iter()
            .map(|n| n.op.inputs().iter().filter(|i| i.id == v.id).count())
            .sum()
    }

    // -- node insertion --

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        let id = self.nodes.len();
        if value.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric {
                node: id,
                op: op.name(),
                detail: "NaN in op output".into(),
            });
        }
        let needs_grad = op
            .inputs()
            .iter()
            .any(|i| self.nodes[i.id].needs_grad);
        if !matches!(op, Op::Leaf) {
            self.meter.inc(value.len());
        }
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value: Some(value),
            needs_grad,
        });
        Ok(Var { id, rows, cols })
    }

    /// Leaf node; participates in backward iff `tensor.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let (rows, cols) = t.dims2();
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            rows,
            cols,
            value: Some(t.as_slice().to_vec()),
            needs_grad: t.requires_grad,
        });
        Var { id, rows, cols }
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let mut t = t.clone();
        t.requires_grad = false;
        self.leaf(&t)
    }

    fn leaf_raw(&mut self, rows: usize, cols: usize, value: Vec<f64>, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            rows,
            cols,
            value: Some(value),
            needs_grad,
        });
        Var { id, rows, cols }
    }

    // -- value access --

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.id]
            .value
            .as_deref()
            .expect("node value already released by backward")
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::matrix(v.rows, v.cols, self.value(v).to_vec()).expect("node shape")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(v.len(), 1);
        self.value(v)[0]
    }

    // -- primitive ops --

    fn want2(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if a.rows != b.rows || a.cols != b.cols {
            return Err(Error::Shape {
                op,
                detail: format!(
                    "[{},{}] vs [{},{}]",
                    a.rows, a.cols, b.rows, b.cols
                ),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_flags(a, b, false, false)
    }

    /// out = opA(a) * opB(b); flags transpose their operand.
    pub fn matmul_flags(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (m, ka) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!(
                    "inner dims {} vs {} (a [{},{}] ta={}, b [{},{}] tb={})",
                    ka, kb, a.rows, a.cols, ta, b.rows, b.cols, tb
                ),
            });
        }
        let value = matmul_raw(
            self.value(a),
            (a.rows, a.cols),
            self.value(b),
            (b.rows, b.cols),
            ta,
            tb,
        );
        self.push(Op::Matmul { a, b, ta, tb }, m, n, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.want2("add", a, b)?;
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add { a, b }, a.rows, a.cols, value)
    }

    /// a[m,n] + row vector b[1,n] broadcast over rows (bias add).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        if b.rows != 1 || b.cols != a.cols {
            return Err(Error::Shape {
                op: "add_row",
                detail: format!("[{},{}] + [{},{}]", a.rows, a.cols, b.rows, b.cols),
            });
        }
        let bv = self.value(b).to_vec();
        let value: Vec<f64> = self
            .value(a)
            .chunks(a.cols)
            .flat_map(|row| row.iter().zip(&bv).map(|(x, y)| x + y).collect::<Vec<_>>())
            .collect();
        self.push(Op::AddRow { a, b }, a.rows, a.cols, value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.want2("mul", a, b)?;
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        self.push(Op::Mul { a, b }, a.rows, a.cols, value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value: Vec<f64> = self.value(a).iter().map(|x| c * x).collect();
        self.push(Op::Scale { a, c }, a.rows, a.cols, value)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value: Vec<f64> = self.value(a).iter().map(|x| x.max(0.0)).collect();
        self.push(Op::Relu { a }, a.rows, a.cols, value)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let value: Vec<f64> = self.value(a).iter().map(|x| softplus_val(*x)).collect();
        self.push(Op::Softplus { a }, a.rows, a.cols, value)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value: Vec<f64> = self.value(a).iter().map(|x| x.exp()).collect();
        self.push(Op::Exp { a }, a.rows, a.cols, value)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value: Vec<f64> = self.value(a).iter().map(|x| x.ln()).collect();
        self.push(Op::Log { a }, a.rows, a.cols, value)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = vec![self.value(a).iter().sum::<f64>()];
        self.push(Op::Sum { a }, 1, 1, value)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        if a.len() == 0 {
            return Err(Error::Shape {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let value = vec![self.value(a).iter().sum::<f64>() / a.len() as f64];
        self.push(Op::Mean { a }, 1, 1, value)
    }

    /// Column means: [m,n] -> [1,n].
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        if a.rows == 0 {
            return Err(Error::Shape {
                op: "mean_rows",
                detail: "zero rows".into(),
            });
        }
        let mut value = vec![0.0; a.cols];
        for row in self.value(a).chunks(a.cols) {
            for (o, &v) in value.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / a.rows as f64;
        for o in value.iter_mut() {
            *o *= inv;
        }
        self.push(Op::MeanRows { a }, 1, a.cols, value)
    }

    /// Euclidean norm of all entries -> scalar. Gradient at the origin is
    /// taken as zero (subgradient convention).
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let value = vec![self.value(a).iter().map(|x| x * x).sum::<f64>().sqrt()];
        self.push(Op::L2Norm { a }, 1, 1, value)
    }

    /// Row-wise softmax (max-shifted for stability).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = softmax_rows(self.value(a), a.rows, a.cols);
        self.push(Op::Softmax { a }, a.rows, a.cols, value)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape {
                op: "concat_cols",
                detail: "no parts".into(),
            });
        }
        let rows = parts[0].rows;
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::Shape {
                op: "concat_cols",
                detail: format!(
                    "row counts differ: {:?}",
                    parts.iter().map(|p| p.rows).collect::<Vec<_>>()
                ),
            });
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut value = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let pv = self.value(*p);
                value.extend_from_slice(&pv[r * p.cols..(r + 1) * p.cols]);
            }
        }
        self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rows,
            cols,
            value,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > a.rows {
            return Err(Error::Shape {
                op: "slice_rows",
                detail: format!("rows {}..{} of [{},{}]", start, start + len, a.rows, a.cols),
            });
        }
        let value = self.value(a)[start * a.cols..(start + len) * a.cols].to_vec();
        self.push(Op::SliceRows { a, start, len }, len, a.cols, value)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > a.cols {
            return Err(Error::Shape {
                op: "slice_cols",
                detail: format!("cols {}..{} of [{},{}]", start, start + len, a.rows, a.cols),
            });
        }
        let av = self.value(a);
        let mut value = Vec::with_capacity(a.rows * len);
        for r in 0..a.rows {
            value.extend_from_slice(&av[r * a.cols + start..r * a.cols + start + len]);
        }
        self.push(Op::SliceCols { a, start, len }, a.rows, len, value)
    }

    /// Same data, new dims (row-major element order preserved).
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        if rows * cols != a.len() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("[{},{}] -> [{},{}]", a.rows, a.cols, rows, cols),
            });
        }
        let value = self.value(a).to_vec();
        self.push(Op::Reshape { a }, rows, cols, value)
    }

    /// Row gather: out[i] = table[ids[i]]. Errors on out-of-range ids.
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= table.rows) {
            return Err(Error::Config(format!(
                "embedding id {} out of range (table has {} rows)",
                bad, table.rows
            )));
        }
        let tv = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * table.cols);
        for &i in ids {
            value.extend_from_slice(&tv[i * table.cols..(i + 1) * table.cols]);
        }
        self.push(
            Op::EmbedLookup {
                table,
                ids: Rc::new(ids.to_vec()),
            },
            ids.len(),
            table.cols,
            value,
        )
    }

    /// Mean cross-entropy of row-softmax(logits) against integer labels.
    /// Fused (log-sum-exp form) so probabilities never underflow through a
    /// separate log node.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        if labels.len() != logits.rows {
            return Err(Error::Shape {
                op: "cross_entropy_mean",
                detail: format!("{} labels for {} rows", labels.len(), logits.rows),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= logits.cols) {
            return Err(Error::Config(format!(
                "label {} out of range for {} classes",
                bad, logits.cols
            )));
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv[i * logits.cols..(i + 1) * logits.cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let value = vec![total / labels.len() as f64];
        self.push(
            Op::CrossEntropyMean {
                logits,
                labels: Rc::new(labels.to_vec()),
            },
            1,
            1,
            value,
        )
    }

    /// Run `f` under gradient checkpointing: its intermediate activations
    /// are dropped after the forward pass and recomputed when backward
    /// reaches this node. `f` must be pure; impurity is detected by
    /// comparing recomputed output bits and reported as an error. Gradients
    /// are bit-identical to inlining `f` as long as the inputs are not also
    /// consumed by ops outside the region.
    pub fn checkpointed_apply<F>(&mut self, inputs: &[Var], f: F) -> Result<Var>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
    {
        let f: Thunk = Rc::new(f);
        let (rows, cols, value) = {
            let mut sub = Graph::with_meter(self.meter.clone());
            let sub_inputs: Vec<Var> = inputs
                .iter()
                .map(|v| {
                    self.nodes[v.id]
                        .value
                        .as_ref()
                        .map(|val| {
                            sub.leaf_raw(v.rows, v.cols, val.clone(), self.nodes[v.id].needs_grad)
                        })
                        .expect("checkpoint input released")
                })
                .collect();
            let out = f(&mut sub, &sub_inputs)?;
            let value = sub.nodes[out.id]
                .value
                .clone()
                .expect("checkpoint output value");
            (out.rows, out.cols, value)
        }; // scratch graph dropped here; interior activations released
        self.push(
            Op::Checkpoint {
                inputs: inputs.to_vec(),
                f,
            },
            rows,
            cols,
            value,
        )
    }

    // -- backward --

    /// Reverse pass from a scalar output. Releases saved activations as it
    /// sweeps; the graph can still serve leaf values afterwards.
    pub fn backward(&mut self, out: Var) -> Result<Gradients> {
        if out.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("output must be scalar, got [{},{}]", out.rows, out.cols),
            });
        }
        self.backward_seeded(out, vec![1.0])
    }

    fn backward_seeded(&mut self, out: Var, seed: Vec<f64>) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Config("backward already run on this graph".into()));
        }
        self.backward_done = true;
        let mut grads = Gradients {
            grads: vec![None; self.nodes.len()],
            shapes: self.nodes.iter().map(|n| (n.rows, n.cols)).collect(),
        };
        if !self.nodes[out.id].needs_grad {
            return Ok(grads); // nothing requires grad
        }
        grads.grads[out.id] = Some(seed);
        for id in (0..=out.id).rev() {
            if !self.nodes[id].needs_grad || grads.grads[id].is_none() {
                continue;
            }
            let op = self.nodes[id].op.clone();
            if matches!(op, Op::Leaf) {
                continue; // keep leaf grads for the caller
            }
            let g = grads.grads[id].take().expect("checked above");
            self.step_backward(id, &op, &g, &mut grads)?;
            // Own backward done and every consumer was processed earlier in
            // the sweep, so this value can be released.
            if let Some(v) = self.nodes[id].value.take() {
                self.meter.dec(v.len());
            }
        }
        Ok(grads)
    }

    fn accum(&self, grads: &mut Gradients, v: Var, contrib: &[f64]) {
        if !self.nodes[v.id].needs_grad {
            return;
        }
        match &mut grads.grads[v.id] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a += c;
                }
            }
            slot => *slot = Some(contrib.to_vec()),
        }
    }

    fn step_backward(
        &mut self,
        id: usize,
        op: &Op,
        g: &[f64],
        grads: &mut Gradients,
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b, ta, tb } => {
                let (gr, gc) = grads.shapes[id];
                if self.nodes[a.id].needs_grad {
                    let da = match (ta, tb) {
                        (false, false) => matmul_raw(
                            g,
                            (gr, gc),
                            self.value(*b),
                            (b.rows, b.cols),
                            false,
                            true,
                        ),
                        (true, false) => matmul_raw(
                            self.value(*b),
                            (b.rows, b.cols),
                            g,
                            (gr, gc),
                            false,
                            true,
                        ),
                        (false, true) => {
                            matmul_raw(g, (gr, gc), self.value(*b), (b.rows, b.cols), false, false)
                        }
                        (true, true) => matmul_raw(
                            self.value(*b),
                            (b.rows, b.cols),
                            g,
                            (gr, gc),
                            true,
                            true,
                        ),
                    };
                    self.accum(grads, *a, &da);
                }
                if self.nodes[b.id].needs_grad {
                    let db = match (ta, tb) {
                        (false, false) => matmul_raw(
                            self.value(*a),
                            (a.rows, a.cols),
                            g,
                            (gr, gc),
                            true,
                            false,
                        ),
                        (true, false) => {
              matmul_raw(self.value(*a), (a.rows, a.cols), g, (gr, gc), false, false)
                        }
                        (false, true) => {
                            matmul_raw(g, (gr, gc), self.value(*a), (a.rows, a.cols), true, false)
                        }
                        (true, true) => matmul_raw(
                            g,
                            (gr, gc),
                            self.value(*a),
                            (a.rows, a.cols),
                            true,
                            true,
                        ),
                    };
                    self.accum(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, g);
                self.accum(grads, *b, g);
            }
            Op::AddRow { a, b } => {
                self.accum(grads, *a, g);
                if self.nodes[b.id].needs_grad {
                    let mut db = vec![0.0; b.cols];
                    for row in g.chunks(b.cols) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accum(grads, *b, &db);
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a.id].needs_grad {
                    let da: Vec<f64> = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    self.accum(grads, *a, &da);
                }
                if self.nodes[b.id].needs_grad {
                    let db: Vec<f64> = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    self.accum(grads, *b, &db);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|x| c * x).collect();
                self.accum(grads, *a, &da);
            }
            Op::Relu { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                    .collect();
                self.accum(grads, *a, &da);
            }
            Op::Softplus { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(x, &v)| x * sigmoid(v))
                    .collect();
                self.accum(grads, *a, &da);
            }
            Op::Exp { a } => {
                let y = self.nodes[id].value.as_ref().expect("exp output");
                let da: Vec<f64> = g.iter().zip(y).map(|(x, y)| x * y).collect();
                self.accum(grads, *a, &da);
            }
            Op::Log { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a))
                    .map(|(x, v)| x / v)
                    .collect();
                self.accum(grads, *a, &da);
            }
            Op::Sum { a } => {
                let da = vec![g[0]; a.len()];
                self.accum(grads, *a, &da);
            }
            Op::Mean { a } => {
                let da = vec![g[0] / a.len() as f64; a.len()];
                self.accum(grads, *a, &da);
            }
            Op::MeanRows { a } => {
                let inv = 1.0 / a.rows as f64;
                let mut da = Vec::with_capacity(a.len());
                for _ in 0..a.rows {
                    da.extend(g.iter().map(|x| x * inv));
                }
                self.accum(grads, *a, &da);
            }
            Op::L2Norm { a } => {
                let y = self.nodes[id].value.as_ref().expect("l2 output")[0];
                let da: Vec<f64> = if y == 0.0 {
                    vec![0.0; a.len()]
                } else {
                    self.value(*a).iter().map(|v| g[0] * v / y).collect()
                };
                self.accum(grads, *a, &da);
            }
            Op::Softmax { a } => {
                let y = self.nodes[id].value.as_ref().expect("softmax output").clone();
                let mut da = vec![0.0; a.len()];
                for i in 0..a.rows {
                    let yr = &y[i * a.cols..(i + 1) * a.cols];
                    let gr = &g[i * a.cols..(i + 1) * a.cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for ((d, &yv), &gv) in da[i * a.cols..(i + 1) * a.cols]
                        .iter_mut()
                        .zip(yr)
                        .zip(gr)
                    {
                        *d = yv * (gv - dot);
                    }
                }
                self.accum(grads, *a, &da);
            }
            Op::ConcatCols { parts } => {
                let rows = grads.shapes[id].0;
                let total = grads.shapes[id].1;
                let mut offset = 0;
                for p in parts {
                    if self.nodes[p.id].needs_grad {
                        let mut dp = Vec::with_capacity(p.len());
                        for r in 0..rows {
                            dp.extend_from_slice(
                                &g[r * total + offset..r * total + offset + p.cols],
                            );
                        }
                        self.accum(grads, *p, &dp);
                    }
                    offset += p.cols;
                }
            }
            Op::SliceRows { a, start, len } => {
                let mut da = vec![0.0; a.len()];
                da[start * a.cols..(start + len) * a.cols].copy_from_slice(g);
                self.accum(grads, *a, &da);
            }
            Op::SliceCols { a, start, len } => {
                let mut da = vec![0.0; a.len()];
                for r in 0..a.rows {
                    da[r * a.cols + start..r * a.cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accum(grads, *a, &da);
            }
            Op::Reshape { a } => {
                self.accum(grads, *a, g);
            }
            Op::EmbedLookup { table, ids } => {
                if self.nodes[table.id].needs_grad {
                    let mut dt = vec![0.0; table.len()];
                    for (i, &id_) in ids.iter().enumerate() {
                        for (d, &gv) in dt[id_ * table.cols..(id_ + 1) * table.cols]
                            .iter_mut()
                            .zip(&g[i * table.cols..(i + 1) * table.cols])
                        {
                            *d += gv;
                        }
                    }
                    self.accum(grads, *table, &dt);
                }
            }
            Op::CrossEntropyMean { logits, labels } => {
                let p = softmax_rows(self.value(*logits), logits.rows, logits.cols);
                let invn = g[0] / labels.len() as f64;
                let mut dl = vec![0.0; logits.len()];
                for (i, &y) in labels.iter().enumerate() {
                    for j in 0..logits.cols {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        dl[i * logits.cols + j] = invn * (p[i * logits.cols + j] - onehot);
                    }
                }
                self.accum(grads, *logits, &dl);
            }
            Op::Checkpoint { inputs, f } => {
                let mut sub = Graph::with_meter(self.meter.clone());
                let sub_inputs: Vec<Var> = inputs
                    .iter()
                    .map(|v| {
                        let val = self.nodes[v.id]
                            .value
                            .as_ref()
                            .expect("checkpoint input released")
                            .clone();
                        sub.leaf_raw(v.rows, v.cols, val, self.nodes[v.id].needs_grad)
                    })
                    .collect();
                let out = f(&mut sub, &sub_inputs)?;
                let recomputed = sub.nodes[out.id].value.as_ref().expect("recomputed value");
                let saved = self.nodes[id].value.as_ref().expect("checkpoint value");
                let same = recomputed.len() == saved.len()
                    && recomputed
                        .iter()
                        .zip(saved)
                        .all(|(a, b)| a.to_bits() == b.to_bits());
                if !same {
                    return Err(Error::CheckpointImpure { node: id });
                }
                let sub_grads = sub.backward_seeded(out, g.to_vec())?;
                for (inp, sv) in inputs.iter().zip(&sub_inputs) {
                    if let Some(sg) = sub_grads.raw(*sv) {
                        self.accum(grads, *inp, sg);
                    }
                }
            }
        }
        for v in op.inputs() {
            grads.nan_check(v.id, op.name())?;
        }
        Ok(())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}
