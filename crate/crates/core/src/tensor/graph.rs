use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, RngCore};

use super::{shape_err, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors. Graphs refer to them by [`ParamId`] and read
/// them during forward and backward without copying.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum Op {
    Input(String),
    Param(ParamId),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Concat(NodeId, NodeId),
    Dropout(NodeId, f64),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        eps: f64,
    },
    WeightedMse {
        pred: NodeId,
        target: NodeId,
        weight: NodeId,
    },
    Sum(NodeId),
    NeighborSum(NodeId, Arc<Vec<Vec<usize>>>),
    NeighborMax(NodeId, Arc<Vec<Vec<usize>>>),
    SegmentSum {
        x: NodeId,
        segments: Arc<Vec<usize>>,
        n_segments: usize,
    },
    GatherRows(NodeId, Arc<Vec<usize>>),
    ScatterRows {
        x: NodeId,
        rows: Arc<Vec<usize>>,
        n_rows: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Concat(..) => "concat",
            Op::Dropout(..) => "dropout",
            Op::BatchNorm { .. } => "batchnorm",
            Op::WeightedMse { .. } => "weighted_mse",
            Op::Sum(_) => "sum",
            Op::NeighborSum(..) => "neighbor_sum",
            Op::NeighborMax(..) => "neighbor_max",
            Op::SegmentSum { .. } => "segment_sum",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match *self {
            Op::Input(_) | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => {
                vec![a, b]
            }
            Op::Scale(x, _) | Op::Relu(x) | Op::Dropout(x, _) | Op::Sum(x) => vec![x],
            Op::NeighborSum(x, _) | Op::NeighborMax(x, _) | Op::GatherRows(x, _) => vec![x],
            Op::SegmentSum { x, .. } | Op::ScatterRows { x, .. } => vec![x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::WeightedMse { pred, target, weight } => vec![pred, target, weight],
        }
    }
}

/// Per-node values kept from forward for use in backward.
#[derive(Debug, Clone)]
enum Aux {
    None,
    Mask(Vec<f64>),
    BatchStats {
        mean: Vec<f64>,
        var: Vec<f64>,
        inv_std: Vec<f64>,
        xhat: Vec<f64>,
    },
    Argmax(Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    aux: Aux,
    requires_grad: bool,
}

/// A computation DAG. Nodes are appended in dependency order, so the
/// insertion order is a topological order and forward visits each node
/// exactly once.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    inputs: HashMap<String, NodeId>,
    forwarded: bool,
}

/// Gradients from one backward pass, per node and per parameter.
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].as_ref()
    }

    pub(crate) fn params(&self) -> &[Option<Tensor>] {
        &self.params
    }
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            inputs: HashMap::new(),
            forwarded: false,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let requires_grad = match op {
            Op::Param(_) => true,
            Op::Input(_) => false,
            ref other => other.inputs().iter().any(|n| self.nodes[n.0].requires_grad),
        };
        self.forwarded = false;
        self.nodes.push(Node {
            op,
            value: None,
            aux: Aux::None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Named placeholder bound at forward time. Repeated names share a node.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input(name.to_string()));
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.push(Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddBias(x, bias))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(x, factor))
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu(x))
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Concat(a, b))
    }

    /// Inverted dropout: in train mode entries are zeroed with probability
    /// `rate` and survivors scaled by `1/(1-rate)`; identity in eval mode.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> NodeId {
        self.push(Op::Dropout(x, rate))
    }

    /// Batch normalization over rows. Train mode normalizes with the batch
    /// mean and biased variance; eval mode uses the supplied running
    /// statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        eps: f64,
    ) -> NodeId {
        self.push(Op::BatchNorm {
            x,
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
        })
    }

    /// `Σ w·(pred − target)² / Σ w`, or 0 when all weights are zero.
    /// Gradients flow to `pred` only.
    pub fn weighted_mse(&mut self, pred: NodeId, target: NodeId, weight: NodeId) -> NodeId {
        self.push(Op::WeightedMse { pred, target, weight })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    /// Row `v` of the output is the sum of rows `adjacency[v]` of `x`.
    pub fn neighbor_sum(&mut self, x: NodeId, adjacency: Arc<Vec<Vec<usize>>>) -> NodeId {
        self.push(Op::NeighborSum(x, adjacency))
    }

    /// Row `v` of the output is the elementwise max over row `v` and rows
    /// `adjacency[v]`. Gradient goes to the arg-max, lowest index on ties.
    pub fn neighbor_max(&mut self, x: NodeId, adjacency: Arc<Vec<Vec<usize>>>) -> NodeId {
        self.push(Op::NeighborMax(x, adjacency))
    }

    /// Sums rows that share a segment id into `n_segments` output rows.
    pub fn segment_sum(&mut self, x: NodeId, segments: Arc<Vec<usize>>, n_segments: usize) -> NodeId {
        self.push(Op::SegmentSum {
            x,
            segments,
            n_segments,
        })
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: Arc<Vec<usize>>) -> NodeId {
        self.push(Op::GatherRows(x, rows))
    }

    /// Places row `i` of `x` at row `rows[i]` of an `n_rows` matrix of zeros.
    /// `rows` must be distinct.
    pub fn scatter_rows(&mut self, x: NodeId, rows: Arc<Vec<usize>>, n_rows: usize) -> NodeId {
        self.push(Op::ScatterRows { x, rows, n_rows })
    }

    /// Evaluates every node in insertion order.
    pub fn forward(
        &mut self,
        params: &ParamStore,
        mut inputs: HashMap<String, Tensor>,
        rng: &mut dyn RngCore,
    ) -> Result<(), TensorError> {
        self.forwarded = false;
        for i in 0..self.nodes.len() {
            let (value, aux) = match &self.nodes[i].op {
                Op::Input(name) => match inputs.remove(name) {
                    Some(t) => (Some(t), Aux::None),
                    None => return Err(TensorError::UnboundInput(name.clone())),
                },
                Op::Param(_) => (None, Aux::None),
                _ => {
                    let (v, aux) = self.eval(i, params, rng)?;
                    if !v.is_finite() {
                        return Err(TensorError::NonFinite {
                            op: self.nodes[i].op.name(),
                        });
                    }
                    (Some(v), aux)
                }
            };
            self.nodes[i].value = value;
            self.nodes[i].aux = aux;
        }
        self.forwarded = true;
        Ok(())
    }

    fn value<'a>(&'a self, id: NodeId, params: &'a ParamStore) -> &'a Tensor {
        match self.nodes[id.0].op {
            Op::Param(p) => params.get(p),
            _ => self.nodes[id.0].value.as_ref().expect("node evaluated before use"),
        }
    }

    /// Output of a node after [`Graph::forward`].
    pub fn output<'a>(&'a self, id: NodeId, params: &'a ParamStore) -> Result<&'a Tensor, TensorError> {
        if !self.forwarded {
            return Err(TensorError::BackwardBeforeForward);
        }
        Ok(self.value(id, params))
    }

    /// Batch mean and variance recorded by a train-mode batchnorm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id.0].aux {
            Aux::BatchStats { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    fn eval(&self, i: usize, params: &ParamStore, rng: &mut dyn RngCore) -> Result<(Tensor, Aux), TensorError> {
        let op = &self.nodes[i].op;
        let name = op.name();
        let v = |id: NodeId| self.value(id, params);
        let matrix = |t: &Tensor, what: &str| -> Result<(usize, usize), TensorError> {
            if t.shape().len() != 2 {
                return shape_err(name, format!("{what} must be a matrix, got {:?}", t.shape()));
            }
            Ok((t.shape()[0], t.shape()[1]))
        };
        let none = |t: Tensor| Ok((t, Aux::None));

        match *op {
            Op::Input(_) | Op::Param(_) => unreachable!("leaves are not evaluated"),
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                let (n, k) = matrix(a, "lhs")?;
                let (k2, m) = matrix(b, "rhs")?;
                if k != k2 {
                    return shape_err(name, format!("{:?} x {:?}", a.shape(), b.shape()));
                }
                let mut out = vec![0.0; n * m];
                matmul_into(a.data(), b.data(), &mut out, n, k, m);
                none(Tensor::matrix(n, m, out)?)
            }
            Op::AddBias(x, b) => {
                let (x, b) = (v(x), v(b));
                let (_, m) = matrix(x, "input")?;
                if b.shape() != [m] {
                    return shape_err(name, format!("bias {:?} for input {:?}", b.shape(), x.shape()));
                }
                let mut out = x.clone();
                for row in out.data_mut().chunks_mut(m) {
                    for (o, bb) in row.iter_mut().zip(b.data()) {
                        *o += bb;
                    }
                }
                none(out)
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.shape() != b.shape() {
                    return shape_err(name, format!("{:?} vs {:?}", a.shape(), b.shape()));
                }
                let mut out = a.clone();
                let add = matches!(op, Op::Add(..));
                for (o, bb) in out.data_mut().iter_mut().zip(b.data()) {
                    if add {
                        *o += bb
                    } else {
                        *o *= bb
                    }
                }
                none(out)
            }
            Op::Scale(x, c) => {
                let mut out = v(x).clone();
                out.data_mut().iter_mut().for_each(|o| *o *= c);
                none(out)
            }
            Op::Relu(x) => {
                let mut out = v(x).clone();
                out.data_mut().iter_mut().for_each(|o| *o = o.max(0.0));
                none(out)
            }
            Op::Concat(a, b) => {
                let (a, b) = (v(a), v(b));
                let (n, ma) = matrix(a, "lhs")?;
                let (n2, mb) = matrix(b, "rhs")?;
                if n != n2 {
                    return shape_err(name, format!("row counts {n} vs {n2}"));
                }
                let mut out = Vec::with_capacity(n * (ma + mb));
                for r in 0..n {
                    out.extend_from_slice(a.row(r));
                    out.extend_from_slice(b.row(r));
                }
                none(Tensor::matrix(n, ma + mb, out)?)
            }
            Op::Dropout(x, rate) => {
                let x = v(x);
                if !(0.0..1.0).contains(&rate) {
                    return shape_err(name, format!("rate {rate} outside [0, 1)"));
                }
                if self.mode == Mode::Eval || rate == 0.0 {
                    return none(x.clone());
                }
                let keep = 1.0 / (1.0 - rate);
                let mask: Vec<f64> = (0..x.len())
                    .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                    .collect();
                let mut out = x.clone();
                for (o, m) in out.data_mut().iter_mut().zip(&mask) {
                    *o *= m;
                }
                Ok((out, Aux::Mask(mask)))
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                ref running_mean,
                ref running_var,
                eps,
            } => {
                let (x, gamma, beta) = (v(x), v(gamma), v(beta));
                let (n, m) = matrix(x, "input")?;
                if gamma.shape() != [m] || beta.shape() != [m] {
                    return shape_err(name, format!("scale/shift must have length {m}"));
                }
                if running_mean.len() != m || running_var.len() != m {
                    return shape_err(name, format!("running statistics must have length {m}"));
                }
                let (mean, var) = match self.mode {
                    Mode::Train => column_moments(x.data(), n, m),
                    Mode::Eval => (running_mean.clone(), running_var.clone()),
                };
                let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
                let mut xhat = vec![0.0; n * m];
                let mut out = vec![0.0; n * m];
                for r in 0..n {
                    for c in 0..m {
                        let h = (x.data()[r * m + c] - mean[c]) * inv_std[c];
                        xhat[r * m + c] = h;
                        out[r * m + c] = gamma.data()[c] * h + beta.data()[c];
                    }
                }
                Ok((
                    Tensor::matrix(n, m, out)?,
                    Aux::BatchStats {
                        mean,
                        var,
                        inv_std,
                        xhat,
                    },
                ))
            }
            Op::WeightedMse { pred, target, weight } => {
                let (p, t, w) = (v(pred), v(target), v(weight));
                if p.shape() != t.shape() || p.shape() != w.shape() {
                    return shape_err(
                        name,
                        format!("pred {:?}, target {:?}, weight {:?}", p.shape(), t.shape(), w.shape()),
                    );
                }
                let total: f64 = w.data().iter().sum();
                let loss = if total == 0.0 {
                    0.0
                } else {
                    p.data()
                        .iter()
                        .zip(t.data())
                        .zip(w.data())
                        .map(|((p, t), w)| w * (p - t) * (p - t))
                        .sum::<f64>()
                        / total
                };
                none(Tensor::scalar(loss))
            }
            Op::Sum(x) => none(Tensor::scalar(v(x).data().iter().sum())),
            Op::NeighborSum(x, ref adj) => {
                let x = v(x);
                let (n, m) = matrix(x, "input")?;
                check_adjacency(name, adj, n)?;
                let mut out = vec![0.0; n * m];
                for (vtx, nbrs) in adj.iter().enumerate() {
                    let o = &mut out[vtx * m..(vtx + 1) * m];
                    for &u in nbrs {
                        for (oo, xx) in o.iter_mut().zip(x.row(u)) {
                            *oo += xx;
                        }
                    }
                }
                none(Tensor::matrix(n, m, out)?)
            }
            Op::NeighborMax(x, ref adj) => {
                let x = v(x);
                let (n, m) = matrix(x, "input")?;
                check_adjacency(name, adj, n)?;
                let mut out = vec![0.0; n * m];
                let mut arg = vec![0usize; n * m];
                for (vtx, nbrs) in adj.iter().enumerate() {
                    let mut cands: Vec<usize> = nbrs.clone();
                    cands.push(vtx);
                    cands.sort_unstable();
                    for c in 0..m {
                        let mut best = cands[0];
                        for &u in &cands[1..] {
                            if x.data()[u * m + c] > x.data()[best * m + c] {
                                best = u;
                            }
                        }
                        out[vtx * m + c] = x.data()[best * m + c];
                        arg[vtx * m + c] = best;
                    }
                }
                Ok((Tensor::matrix(n, m, out)?, Aux::Argmax(arg)))
            }
            Op::SegmentSum {
                x,
                ref segments,
                n_segments,
            } => {
                let x = v(x);
                let (n, m) = matrix(x, "input")?;
                if segments.len() != n || segments.iter().any(|&s| s >= n_segments) {
                    return shape_err(name, format!("{} segment ids for {n} rows", segments.len()));
                }
                let mut out = vec![0.0; n_segments * m];
                for (r, &s) in segments.iter().enumerate() {
                    for (o, xx) in out[s * m..(s + 1) * m].iter_mut().zip(x.row(r)) {
                        *o += xx;
                    }
                }
                none(Tensor::matrix(n_segments, m, out)?)
            }
            Op::GatherRows(x, ref rows) => {
                let x = v(x);
                let (n, m) = matrix(x, "input")?;
                if rows.iter().any(|&r| r >= n) {
                    return shape_err(name, format!("row index out of range for {n} rows"));
                }
                let mut out = Vec::with_capacity(rows.len() * m);
                for &r in rows.iter() {
                    out.extend_from_slice(x.row(r));
                }
                none(Tensor::matrix(rows.len(), m, out)?)
            }
            Op::ScatterRows { x, ref rows, n_rows } => {
                let x = v(x);
                let (n, m) = matrix(x, "input")?;
                if rows.len() != n || rows.iter().any(|&r| r >= n_rows) {
                    return shape_err(name, format!("{} target rows for {n} input rows", rows.len()));
                }
                let mut out = vec![0.0; n_rows * m];
                for (i, &r) in rows.iter().enumerate() {
                    out[r * m..(r + 1) * m].copy_from_slice(x.row(i));
                }
                none(Tensor::matrix(n_rows, m, out)?)
            }
        }
    }

    /// Reverse-mode accumulation from a scalar node.
    pub fn backward(&self, loss: NodeId, params: &ParamStore) -> Result<Gradients, TensorError> {
        if !self.forwarded {
            return Err(TensorError::BackwardBeforeForward);
        }
        let loss_value = self.value(loss, params);
        if loss_value.len() != 1 {
            return Err(TensorError::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(loss_value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, params, &mut grads);
            grads[i] = Some(g);
        }

        let mut param_grads: Vec<Option<Tensor>> = vec![None; params.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(p), Some(g)) = (&node.op, &grads[i]) {
                match &mut param_grads[p.0] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params: param_grads,
        })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, params: &ParamStore, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let v = |id: NodeId| self.value(id, params);
        let mut acc = |id: NodeId, t: Tensor| match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        };

        match node.op {
            Op::Input(_) | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if needs(a) {
                    let mut da = vec![0.0; n * k];
                    for r in 0..n {
                        let grow = &g.data()[r * m..(r + 1) * m];
                        for p in 0..k {
                            let brow = &bv.data()[p * m..(p + 1) * m];
                            da[r * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(a, Tensor::matrix(n, k, da).expect("shape"));
                }
                if needs(b) {
                    let mut db = vec![0.0; k * m];
                    for r in 0..n {
                        let grow = &g.data()[r * m..(r + 1) * m];
                        for p in 0..k {
                            let a_rp = av.data()[r * k + p];
                            if a_rp == 0.0 {
                                continue;
                            }
                            for (d, gg) in db[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *d += a_rp * gg;
                            }
                        }
                    }
                    acc(b, Tensor::matrix(k, m, db).expect("shape"));
                }
            }
            Op::AddBias(x, b) => {
                if needs(x) {
                    acc(x, g.clone());
                }
                if needs(b) {
                    let m = v(b).len();
                    let mut db = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (d, gg) in db.iter_mut().zip(row) {
                            *d += gg;
                        }
                    }
                    acc(b, Tensor::vector(db));
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    acc(a, g.clone());
                }
                if needs(b) {
                    acc(b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (v(a), v(b));
                if needs(a) {
                    let mut d = g.clone();
                    d.data_mut().iter_mut().zip(bv.data()).for_each(|(d, y)| *d *= y);
                    acc(a, d);
                }
                if needs(b) {
                    let mut d = g.clone();
                    d.data_mut().iter_mut().zip(av.data()).for_each(|(d, x)| *d *= x);
                    acc(b, d);
                }
            }
            Op::Scale(x, c) => {
                if needs(x) {
                    let mut d = g.clone();
                    d.data_mut().iter_mut().for_each(|d| *d *= c);
                    acc(x, d);
                }
            }
            Op::Relu(x) => {
                if needs(x) {
                    let mut d = g.clone();
                    d.data_mut().iter_mut().zip(v(x).data()).for_each(|(d, xx)| {
                        if *xx <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(x, d);
                }
            }
            Op::Concat(a, b) => {
                let (ma, mb) = (v(a).cols(), v(b).cols());
                let n = g.rows();
                if needs(a) {
                    let mut d = Vec::with_capacity(n * ma);
                    for r in 0..n {
                        d.extend_from_slice(&g.row(r)[..ma]);
                    }
                    acc(a, Tensor::matrix(n, ma, d).expect("shape"));
                }
                if needs(b) {
                    let mut d = Vec::with_capacity(n * mb);
                    for r in 0..n {
                        d.extend_from_slice(&g.row(r)[ma..]);
                    }
                    acc(b, Tensor::matrix(n, mb, d).expect("shape"));
                }
            }
            Op::Dropout(x, _) => {
                if needs(x) {
                    let mut d = g.clone();
                    if let Aux::Mask(mask) = &node.aux {
                        d.data_mut().iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
                    }
                    acc(x, d);
                }
            }
            Op::BatchNorm { x, gamma, beta, .. } => {
                let Aux::BatchStats { inv_std, xhat, .. } = &node.aux else {
                    unreachable!("batchnorm without statistics")
                };
                let (n, m) = (g.rows(), g.cols());
                let gam = v(gamma).data();
                let mut sum_g = vec![0.0; m];
                let mut sum_gx = vec![0.0; m];
                for r in 0..n {
                    for c in 0..m {
                        let gg = g.data()[r * m + c];
                        sum_g[c] += gg;
                        sum_gx[c] += gg * xhat[r * m + c];
                    }
                }
                if needs(x) {
                    let mut dx = vec![0.0; n * m];
                    let nf = n as f64;
                    for r in 0..n {
                        for c in 0..m {
                            let gg = g.data()[r * m + c];
                            dx[r * m + c] = match self.mode {
                                Mode::Train => {
                                    gam[c] * inv_std[c] / nf * (nf * gg - sum_g[c] - xhat[r * m + c] * sum_gx[c])
                                }
                                Mode::Eval => gam[c] * inv_std[c] * gg,
                            };
                        }
                    }
                    acc(x, Tensor::matrix(n, m, dx).expect("shape"));
                }
                if needs(gamma) {
                    acc(gamma, Tensor::vector(sum_gx));
                }
                if needs(beta) {
                    acc(beta, Tensor::vector(sum_g));
                }
            }
            Op::WeightedMse { pred, target, weight } => {
                if needs(pred) {
                    let (p, t, w) = (v(pred), v(target), v(weight));
                    let total: f64 = w.data().iter().sum();
                    let scale = g.item();
                    let d: Vec<f64> = if total == 0.0 {
                        vec![0.0; p.len()]
                    } else {
                        p.data()
                            .iter()
                            .zip(t.data())
                            .zip(w.data())
                            .map(|((p, t), w)| scale * 2.0 * w * (p - t) / total)
                            .collect()
                    };
                    acc(pred, Tensor::new(p.shape().to_vec(), d).expect("shape"));
                }
            }
            Op::Sum(x) => {
                if needs(x) {
                    acc(x, Tensor::filled(v(x).shape(), g.item()));
                }
            }
            Op::NeighborSum(x, ref adj) => {
                if needs(x) {
                    let m = g.cols();
                    let mut d = Tensor::zeros(v(x).shape());
                    for (vtx, nbrs) in adj.iter().enumerate() {
                        for &u in nbrs {
                            let src = &g.data()[vtx * m..(vtx + 1) * m];
                            for (dd, gg) in d.data_mut()[u * m..(u + 1) * m].iter_mut().zip(src) {
                                *dd += gg;
                            }
                        }
                    }
                    acc(x, d);
                }
            }
            Op::NeighborMax(x, _) => {
                if needs(x) {
                    let Aux::Argmax(arg) = &node.aux else {
                        unreachable!("neighbor_max without argmax")
                    };
                    let m = g.cols();
                    let mut d = Tensor::zeros(v(x).shape());
                    for (idx, &src) in arg.iter().enumerate() {
                        let c = idx % m;
                        d.data_mut()[src * m + c] += g.data()[idx];
                    }
                    acc(x, d);
                }
            }
            Op::SegmentSum { x, ref segments, .. } => {
                if needs(x) {
                    let m = g.cols();
                    let mut d = Vec::with_capacity(segments.len() * m);
                    for &s in segments.iter() {
                        d.extend_from_slice(g.row(s));
                    }
                    acc(x, Tensor::matrix(segments.len(), m, d).expect("shape"));
                }
            }
            Op::GatherRows(x, ref rows) => {
                if needs(x) {
                    let m = g.cols();
                    let mut d = Tensor::zeros(v(x).shape());
                    for (i, &r) in rows.iter().enumerate() {
                        for (dd, gg) in d.data_mut()[r * m..(r + 1) * m].iter_mut().zip(g.row(i)) {
                            *dd += gg;
                        }
                    }
                    acc(x, d);
                }
            }
            Op::ScatterRows { x, ref rows, .. } => {
                if needs(x) {
                    let m = g.cols();
                    let mut d = Vec::with_capacity(rows.len() * m);
                    for &r in rows.iter() {
                        d.extend_from_slice(g.row(r));
                    }
                    acc(x, Tensor::matrix(rows.len(), m, d).expect("shape"));
                }
            }
        }
    }
}

fn check_adjacency(op: &'static str, adj: &[Vec<usize>], n: usize) -> Result<(), TensorError> {
    if adj.len() != n || adj.iter().flatten().any(|&u| u >= n) {
        return shape_err(op, format!("adjacency for {} atoms applied to {n} rows", adj.len()));
    }
    Ok(())
}

/// Column mean and biased variance of an `n × m` row-major matrix.
pub(crate) fn column_moments(x: &[f64], n: usize, m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; m];
    for row in x.chunks(m) {
        for (s, v) in mean.iter_mut().zip(row) {
            *s += v;
        }
    }
    mean.iter_mut().for_each(|s| *s /= n as f64);
    let mut var = vec![0.0; m];
    for row in x.chunks(m) {
        for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - mu) * (v - mu);
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    (mean, var)
}

/// `out += a · b`, skipping zero entries of `a` (inputs are often sparse
/// fingerprint and composition vectors).
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for r in 0..n {
        let arow = &a[r * k..(r + 1) * k];
        let orow = &mut out[r * m..(r + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn run(g: &mut Graph, params: &ParamStore, inputs: Vec<(&str, Tensor)>) {
        let map = inputs.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        g.forward(params, map, &mut rng()).unwrap();
    }

    #[test]
    fn relu_values_and_subgradient() {
        let mut params = ParamStore::new();
        let x = params.add("x", Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let mut g = Graph::new(Mode::Train);
        let xn = g.param(x);
        let r = g.relu(xn);
        let s = g.sum(r);
        run(&mut g, &params, vec![]);
        assert_eq!(g.output(r, &params).unwrap().data(), &[0.0, 0.0, 2.0]);
        let grads = g.backward(s, &params).unwrap();
        assert_eq!(grads.param(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn identity_matmul() {
        let params = ParamStore::new();
        let mut g = Graph::new(Mode::Eval);
        let i = g.input("i");
        let x = g.input("x");
        let y = g.matmul(i, x);
        let col = Tensor::matrix(3, 1, vec![0.5, -2.0, 7.0]).unwrap();
        run(&mut g, &params, vec![("i", Tensor::identity(3)), ("x", col.clone())]);
        assert_eq!(g.output(y, &params).unwrap(), &col);
    }

    #[test]
    fn masked_mse() {
        let params = ParamStore::new();
        let mut g = Graph::new(Mode::Train);
        let (p, t, w) = (g.input("p"), g.input("t"), g.input("w"));
        let l = g.weighted_mse(p, t, w);
        run(
            &mut g,
            &params,
            vec![
                ("p", Tensor::vector(vec![1.0, 5.0])),
                ("t", Tensor::vector(vec![1.0, 0.0])),
                ("w", Tensor::vector(vec![1.0, 0.0])),
            ],
        );
        assert_eq!(g.output(l, &params).unwrap().item(), 0.0);
    }

    #[test]
    fn half_squared_norm_gradient() {
        let mut params = ParamStore::new();
        let data = vec![0.3, -1.2, 4.0, 2.5];
        let x = params.add("x", Tensor::vector(data.clone()));
        let mut g = Graph::new(Mode::Train);
        let xn = g.param(x);
        let sq = g.mul(xn, xn);
        let s = g.sum(sq);
        let h = g.scale(s, 0.5);
        run(&mut g, &params, vec![]);
        let grads = g.backward(h, &params).unwrap();
        assert_eq!(grads.param(x).unwrap().data(), data.as_slice());
    }

    #[test]
    fn errors_are_named() {
        let params = ParamStore::new();
        let mut g = Graph::new(Mode::Train);
        let a = g.input("a");
        let b = g.input("b");
        let c = g.matmul(a, b);
        let s = g.sum(c);
        assert_eq!(g.backward(s, &params).unwrap_err(), TensorError::BackwardBeforeForward);
        let map: HashMap<String, Tensor> = [
            ("a".to_string(), Tensor::zeros(&[2, 3])),
            ("b".to_string(), Tensor::zeros(&[2, 3])),
        ]
        .into();
        match g.forward(&params, map, &mut rng()) {
            Err(TensorError::Shape { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("{other:?}"),
        }
        let map: HashMap<String, Tensor> = [("a".to_string(), Tensor::zeros(&[2, 3]))].into();
        assert_eq!(
            g.forward(&params, map, &mut rng()).unwrap_err(),
            TensorError::UnboundInput("b".into())
        );
    }

    #[test]
    fn non_finite_is_reported() {
        let params = ParamStore::new();
        let mut g = Graph::new(Mode::Train);
        let a = g.input("a");
        let b = g.scale(a, f64::MAX);
        let _ = g.scale(b, 10.0);
        let map: HashMap<String, Tensor> = [("a".to_string(), Tensor::vector(vec![1.0]))].into();
        assert_eq!(
            g.forward(&params, map, &mut rng()).unwrap_err(),
            TensorError::NonFinite { op: "scale" }
        );
    }

    #[test]
    fn dropout_is_inverted_and_eval_identity() {
        let params = ParamStore::new();
        for mode in [Mode::Train, Mode::Eval] {
            let mut g = Graph::new(mode);
            let x = g.input("x");
            let d = g.dropout(x, 0.5);
            run(&mut g, &params, vec![("x", Tensor::filled(&[10, 10], 1.0))]);
            let out = g.output(d, &params).unwrap();
            match mode {
                Mode::Eval => assert!(out.data().iter().all(|&v| v == 1.0)),
                Mode::Train => {
                    assert!(out.data().iter().all(|&v| v == 0.0 || v == 2.0));
                    assert!(out.data().contains(&0.0));
                }
            }
        }
    }

    #[test]
    fn neighbor_ops() {
        let params = ParamStore::new();
        let adj = Arc::new(vec![vec![1], vec![0, 2], vec![1], vec![]]);
        let mut g = Graph::new(Mode::Eval);
        let x = g.input("x");
        let mx = g.neighbor_max(x, adj.clone());
        let sm = g.neighbor_sum(x, adj);
        run(
            &mut g,
            &params,
            vec![("x", Tensor::matrix(4, 1, vec![1.0, 5.0, 2.0, -3.0]).unwrap())],
        );
        assert_eq!(g.output(mx, &params).unwrap().data(), &[5.0, 5.0, 5.0, -3.0]);
        assert_eq!(g.output(sm, &params).unwrap().data(), &[5.0, 3.0, 5.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic_under_seed() {
        let mut params = ParamStore::new();
        let w = params.add(
            "w",
            Tensor::matrix(3, 3, (0..9).map(|v| v as f64 * 0.1).collect()).unwrap(),
        );
        let build = || {
            let mut g = Graph::new(Mode::Train);
            let x = g.input("x");
            let wn = g.param(w);
            let h = g.matmul(x, wn);
            let d = g.dropout(h, 0.3);
            (g, d)
        };
        let x = Tensor::filled(&[4, 3], 1.5);
        let (mut g1, d1) = build();
        let (mut g2, d2) = build();
        run(&mut g1, &params, vec![("x", x.clone())]);
        run(&mut g2, &params, vec![("x", x)]);
        assert_eq!(g1.output(d1, &params).unwrap(), g2.output(d2, &params).unwrap());
    }
}
