//! Tape-based reverse-mode automatic differentiation over dense 2-D
//! arrays.
//!
//! Operations execute eagerly as they are recorded, so every node carries
//! its forward value. [`Tape::backward`] walks the tape from the loss back
//! to the first node, which is a reverse topological order because a node
//! can only reference nodes recorded before it. Gradients accumulate
//! additively wherever a node fans out.

use ndarray::{concatenate, s, Array2, Axis};
use thiserror::Error;

pub type Matrix = Array2<f64>;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid tape state: {0}")]
    State(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

fn shape_err<T>(op: &'static str, detail: String) -> Result<T> {
    Err(AutodiffError::Shape { op, detail })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// How a parameter is initialized by He initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `N(0, 2 / fan_in)` with `fan_in` the row count.
    He,
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
    pub trainable: bool,
    pub init: Init,
}

/// Named learnable arrays. Shapes are fixed at creation.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let fill = if init == Init::Ones { 1.0 } else { 0.0 };
        self.params.push(Parameter {
            name,
            value: Matrix::from_elem((rows, cols), fill),
            grad: Matrix::zeros((rows, cols)),
            trainable: true,
            init,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    /// Replaces a parameter's values; the shape must not change.
    pub fn set_value(&mut self, id: ParamId, value: Matrix) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.dim() != value.dim() {
            return shape_err("set_value", format!("{}: {:?} vs {:?}", p.name, p.value.dim(), value.dim()));
        }
        p.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Zeroes every gradient buffer, then adds `scale * g` for each
    /// trainable parameter of each gradient set, in order.
    pub fn load_gradients<'a>(&mut self, sets: impl IntoIterator<Item = &'a Gradients>, scale: f64) {
        self.zero_grad();
        for g in sets {
            for (p, gi) in self.params.iter_mut().zip(&g.grads) {
                if let (true, Some(gi)) = (p.trainable, gi) {
                    p.grad.scaled_add(scale, gi);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId {
    index: usize,
    generation: u64,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    /// `a * b^T`
    MatMulTransB(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    /// Caches the per-row inverse standard deviation.
    LayerNormRows(NodeId, Matrix),
    ConcatCols(Vec<NodeId>),
    Reshape(NodeId),
    SumAll(NodeId),
    SquaredError(NodeId, Matrix),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    generation: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded node. Ids from before the reset become stale.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.generation += 1;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        if id.generation != self.generation || id.index >= self.nodes.len() {
            return Err(AutodiffError::State(format!(
                "node {} is not part of the current forward pass",
                id.index
            )));
        }
        Ok(&self.nodes[id.index])
    }

    pub fn value(&self, id: NodeId) -> Result<&Matrix> {
        self.node(id).map(|n| &n.value)
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId {
            index: self.nodes.len() - 1,
            generation: self.generation,
        }
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.index].requires_grad)
    }

    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Input, value, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let p = store.get(id);
        self.push(Op::Param(id), p.value.clone(), p.trainable)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a)?, self.value(b)?);
        if va.ncols() != vb.nrows() {
            return shape_err("matmul", format!("{:?} x {:?}", va.dim(), vb.dim()));
        }
        let v = va.dot(vb);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), v, rg))
    }

    pub fn matmul_transb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a)?, self.value(b)?);
        if va.ncols() != vb.ncols() {
            return shape_err("matmul_transb", format!("{:?} x {:?}^T", va.dim(), vb.dim()));
        }
        let v = va.dot(&vb.t());
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMulTransB(a, b), v, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a)?, self.value(b)?);
        if va.dim() != vb.dim() {
            return shape_err("add", format!("{:?} + {:?}", va.dim(), vb.dim()));
        }
        let v = va + vb;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    /// `a + row`, broadcasting a `1 x d` row over every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a)?, self.value(row)?);
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return shape_err("add_row", format!("{:?} + row {:?}", va.dim(), vr.dim()));
        }
        let v = va + vr;
        let rg = self.rg(&[a, row]);
        Ok(self.push(Op::AddRow(a, row), v, rg))
    }

    /// `a * row` elementwise, broadcasting a `1 x d` row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a)?, self.value(row)?);
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return shape_err("mul_row", format!("{:?} * row {:?}", va.dim(), vr.dim()));
        }
        let v = va * vr;
        let rg = self.rg(&[a, row]);
        Ok(self.push(Op::MulRow(a, row), v, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a)?, self.value(b)?);
        if va.dim() != vb.dim() {
            return shape_err("mul", format!("{:?} * {:?}", va.dim(), vb.dim()));
        }
        let v = va * vb;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let v = self.value(a)? * k;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Scale(a, k), v, rg))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a)?.mapv(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Relu(a), v, rg))
    }

    /// Row-wise softmax with the row maximum subtracted first.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let mut v = self.value(a)?.clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SoftmaxRows(a), v, rg))
    }

    /// Normalizes each row to zero mean and unit (biased) variance.
    pub fn layer_norm_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a)?;
        let d = va.ncols() as f64;
        let mut v = va.clone();
        let mut inv = Matrix::zeros((va.nrows(), 1));
        for (r, mut row) in v.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.fold(0.0, |acc, &x| acc + (x - mean) * (x - mean)) / d;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv[[r, 0]] = is;
            row.mapv_inplace(|x| (x - mean) * is);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::LayerNormRows(a, inv), v, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return shape_err("concat_cols", "no inputs".into());
        }
        let views = parts
            .iter()
            .map(|&p| self.value(p).map(|v| v.view()))
            .collect::<Result<Vec<_>>>()?;
        let v = concatenate(Axis(1), &views).map_err(|e| AutodiffError::Shape {
            op: "concat_cols",
            detail: e.to_string(),
        })?;
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v, rg))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let va = self.value(a)?;
        if va.len() != rows * cols {
            return shape_err("reshape", format!("{:?} -> ({rows}, {cols})", va.dim()));
        }
        let v = Matrix::from_shape_vec((rows, cols), va.iter().copied().collect()).expect("length checked");
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape(a), v, rg))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Matrix::from_elem((1, 1), self.value(a)?.sum());
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SumAll(a), v, rg))
    }

    /// `sum (a - target)^2` as a `1 x 1` node.
    pub fn squared_error(&mut self, a: NodeId, target: &Matrix) -> Result<NodeId> {
        let va = self.value(a)?;
        if va.dim() != target.dim() {
            return shape_err("squared_error", format!("{:?} vs target {:?}", va.dim(), target.dim()));
        }
        let diff = va - target;
        let v = Matrix::from_elem((1, 1), diff.iter().map(|x| x * x).sum());
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SquaredError(a, target.clone()), v, rg))
    }

    /// Gradients of the scalar `loss` with respect to every trainable
    /// parameter recorded on this tape.
    pub fn backward(&self, loss: NodeId, store: &ParamStore) -> Result<Gradients> {
        let lv = self.node(loss)?;
        if lv.value.dim() != (1, 1) {
            return shape_err("backward", format!("loss must be 1x1, got {:?}", lv.value.dim()));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.index + 1];
        adj[loss.index] = Some(Matrix::ones((1, 1)));
        let mut out = Gradients {
            grads: vec![None; store.len()],
        };

        fn acc(slot: &mut Option<Matrix>, g: Matrix) {
            match slot {
                Some(s) => *s += &g,
                None => *slot = Some(g),
            }
        }

        for i in (0..=loss.index).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let val = |id: NodeId| &self.nodes[id.index].value;
            let wants = |id: NodeId| self.nodes[id.index].requires_grad;
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => {
                    if pid.0 >= out.grads.len() {
                        return Err(AutodiffError::State(format!("parameter {} not in store", pid.0)));
                    }
                    acc(&mut out.grads[pid.0], g);
                }
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        acc(&mut adj[a.index], g.dot(&val(*b).t()));
                    }
                    if wants(*b) {
                        acc(&mut adj[b.index], val(*a).t().dot(&g));
                    }
                }
                Op::MatMulTransB(a, b) => {
                    if wants(*a) {
                        acc(&mut adj[a.index], g.dot(val(*b)));
                    }
                    if wants(*b) {
                        acc(&mut adj[b.index], g.t().dot(val(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        acc(&mut adj[a.index], g.clone());
                    }
                    if wants(*b) {
                        acc(&mut adj[b.index], g);
                    }
                }
                Op::AddRow(a, row) => {
                    if wants(*row) {
                        acc(&mut adj[row.index], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if wants(*a) {
                        acc(&mut adj[a.index], g);
                    }
                }
                Op::MulRow(a, row) => {
                    if wants(*row) {
                        let gr = (&g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut adj[row.index], gr);
                    }
                    if wants(*a) {
                        acc(&mut adj[a.index], &g * val(*row));
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        acc(&mut adj[a.index], &g * val(*b));
                    }
                    if wants(*b) {
                        acc(&mut adj[b.index], &g * val(*a));
                    }
                }
                Op::Scale(a, k) => acc(&mut adj[a.index], g * *k),
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |d, &y| {
                        if y <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(&mut adj[a.index], ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = &g * y;
                    for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&yrow, |d, &yy| *d -= yy * dot);
                    }
                    acc(&mut adj[a.index], ga);
                }
                Op::LayerNormRows(a, inv) => {
                    let xhat = &node.value;
                    let d = xhat.ncols() as f64;
                    let mut ga = g.clone();
                    for (r, (mut row, xr)) in ga.rows_mut().into_iter().zip(xhat.rows()).enumerate() {
                        let sum_g = row.sum();
                        let sum_gx = row.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>();
                        let is = inv[[r, 0]];
                        row.zip_mut_with(&xr, |gv, &xv| {
                            *gv = is / d * (d * *gv - sum_g - xv * sum_gx);
                        });
                    }
                    acc(&mut adj[a.index], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        if wants(*p) {
                            acc(&mut adj[p.index], g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::Reshape(a) => {
                    let (r, c) = val(*a).dim();
                    let ga = Matrix::from_shape_vec((r, c), g.iter().copied().collect()).expect("same length");
                    acc(&mut adj[a.index], ga);
                }
                Op::SumAll(a) => {
                    let k = g[[0, 0]];
                    acc(&mut adj[a.index], Matrix::from_elem(val(*a).dim(), k));
                }
                Op::SquaredError(a, target) => {
                    let k = 2.0 * g[[0, 0]];
                    acc(&mut adj[a.index], (val(*a) - target) * k);
                }
            }
        }
        Ok(out)
    }
}
