//! Reverse-mode automatic differentiation over `Array2<f64>` values.
//!
//! A [`Graph`] is a tape of operations recorded during one forward pass.
//! Nodes reference earlier nodes only, so reverse iteration over the tape is
//! a valid topological order for backpropagation. Everything is `f64` and
//! every op applies its inputs in a fixed order, which makes forward and
//! backward passes bitwise reproducible.

use ndarray::{Array1, Array2, Axis};

use crate::params::ParamId;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    /// Constant input, no gradient tracked.
    Input,
    /// Leaf bound to a parameter in a `ParamStore`.
    Param(ParamId),
    /// Leaf input whose gradient is wanted (used by tests and fit checks).
    Var,
    Add(NodeId, NodeId),
    /// `a + b` where `b` is `1 x n` and broadcasts over the rows of `a`.
    AddRowBroadcast(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// `a.dot(b)`
    MatMul(NodeId, NodeId),
    /// `a.dot(b.t())`
    MatMulNT(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    /// Elementwise product with a constant matrix (noise, dropout masks).
    MulConstMat(NodeId, Array2<f64>),
    /// Elementwise sum with a constant matrix (positional encodings, masks).
    AddConstMat(NodeId),
    /// Matrix scaled by a 1x1 node.
    ScaleByNode(NodeId, NodeId),
    Ln(NodeId),
    Exp(NodeId),
    Softplus(NodeId),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    /// `out[i] = table[ids[i]]`
    GatherRows { table: NodeId, ids: Vec<usize> },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    /// m x n -> 1 x 1
    SumAll(NodeId),
    /// m x n -> 1 x n, mean over rows
    MeanRows(NodeId),
    /// m x n -> m x 1, sum over columns
    SumCols(NodeId),
    /// `out[i, 0] = x[i, ids[i]]`
    PickPerRow { x: NodeId, ids: Vec<usize> },
    /// Elementwise `max(c, x)`.
    MaxWithConst(NodeId, f64),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Tape of one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the given node, if any flowed there.
    pub fn wrt(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.dim(), (1, 1));
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn var(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Var)
    }

    pub fn param(&mut self, id: ParamId, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Param(id))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bv = &self.nodes[b.0].value;
        debug_assert_eq!(bv.nrows(), 1);
        let v = &self.nodes[a.0].value + &bv.row(0);
        self.push(v, Op::AddRowBroadcast(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(v, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, Op::AddConst(a))
    }

    pub fn mul_const_mat(&mut self, a: NodeId, m: Array2<f64>) -> NodeId {
        let v = &self.nodes[a.0].value * &m;
        self.push(v, Op::MulConstMat(a, m))
    }

    pub fn add_const_mat(&mut self, a: NodeId, m: Array2<f64>) -> NodeId {
        let v = &self.nodes[a.0].value + &m;
        self.push(v, Op::AddConstMat(a))
    }

    pub fn scale_by_node(&mut self, a: NodeId, s: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[s.0].value.dim(), (1, 1));
        let c = self.nodes[s.0].value[[0, 0]];
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(v, Op::ScaleByNode(a, s))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(&self.nodes[a.0].value);
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = log_softmax_rows(&self.nodes[a.0].value);
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Layer normalization over each row; `gamma`/`beta` are `1 x n`.
    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let g = self.nodes[gamma.0].value.row(0).to_owned();
        let b = self.nodes[beta.0].value.row(0).to_owned();
        let mut out = Array2::zeros(xv.raw_dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..row.len() {
                out[[i, j]] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        self.push(out, Op::LayerNormRows { x, gamma, beta })
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = &self.nodes[table.0].value;
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&t.row(id));
        }
        self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[x.0]
            .value
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(v, Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mean_axis(Axis(0)).unwrap();
        let v = v.insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(a))
    }

    pub fn pick_per_row(&mut self, x: NodeId, ids: &[usize]) -> NodeId {
        let xv = &self.nodes[x.0].value;
        debug_assert_eq!(xv.nrows(), ids.len());
        let mut out = Array2::zeros((ids.len(), 1));
        for (i, &id) in ids.iter().enumerate() {
            out[[i, 0]] = xv[[i, id]];
        }
        self.push(
            out,
            Op::PickPerRow {
                x,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn max_with_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.max(c));
        self.push(v, Op::MaxWithConst(a, c))
    }

    /// Backpropagate from `loss` (a 1x1 node) through the tape.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Input | Op::Param(_) | Op::Var => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRowBroadcast(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[b.0].value;
                    let ga = &g / bv;
                    let gb = -&g * &self.nodes[a.0].value / (bv * bv);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value);
                    let gb = g.t().dot(&self.nodes[a.0].value);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.mapv(|x| x * c)),
                Op::AddConst(a) => accumulate(&mut grads, *a, g),
                Op::MulConstMat(a, m) => accumulate(&mut grads, *a, &g * m),
                Op::AddConstMat(a) => accumulate(&mut grads, *a, g),
                Op::ScaleByNode(a, s) => {
                    let c = self.nodes[s.0].value[[0, 0]];
                    let gs = (&g * &self.nodes[a.0].value).sum();
                    accumulate(&mut grads, *a, g.mapv(|x| x * c));
                    accumulate(&mut grads, *s, Array2::from_elem((1, 1), gs));
                }
                Op::Ln(a) => {
                    let ga = &g / &self.nodes[a.0].value;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = &g * &self.nodes[idx].value;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = &g * &self.nodes[a.0].value.mapv(sigmoid);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, &g * &mask);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[idx].value;
                    let mut ga = Array2::zeros(y.raw_dim());
                    for i in 0..y.nrows() {
                        let dot: f64 = g.row(i).dot(&y.row(i));
                        for j in 0..y.ncols() {
                            ga[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let p = softmax_rows(&self.nodes[a.0].value);
                    let mut ga = Array2::zeros(p.raw_dim());
                    for i in 0..p.nrows() {
                        let gsum: f64 = g.row(i).sum();
                        for j in 0..p.ncols() {
                            ga[[i, j]] = g[[i, j]] - p[[i, j]] * gsum;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNormRows { x, gamma, beta } => {
                    let xv = &self.nodes[x.0].value;
                    let gam = self.nodes[gamma.0].value.row(0).to_owned();
                    let n = xv.ncols() as f64;
                    let mut gx = Array2::zeros(xv.raw_dim());
                    let mut ggamma = Array1::<f64>::zeros(xv.ncols());
                    let mut gbeta = Array1::<f64>::zeros(xv.ncols());
                    for i in 0..xv.nrows() {
                        let row = xv.row(i);
                        let mean = row.mean().unwrap();
                        let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> =
                            (0..xv.ncols()).map(|j| g[[i, j]] * gam[j]).collect();
                        let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / n;
                        let mean_dxhat_xhat: f64 = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / n;
                        for j in 0..xv.ncols() {
                            gx[[i, j]] =
                                inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                            ggamma[j] += g[[i, j]] * xhat[j];
                            gbeta[j] += g[[i, j]];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, ggamma.insert_axis(Axis(0)));
                    accumulate(&mut grads, *beta, gbeta.insert_axis(Axis(0)));
                }
                Op::GatherRows { table, ids } => {
                    let t = &self.nodes[table.0].value;
                    let mut gt = Array2::zeros(t.raw_dim());
                    for (i, &id) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(id);
                        row += &g.row(i);
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::SliceCols { x, start, len } => {
                    let xv = &self.nodes[x.0].value;
                    let mut gx = Array2::zeros(xv.raw_dim());
                    gx.slice_mut(ndarray::s![.., *start..start + len]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        let gp = g.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads, *p, gp);
                        offset += w;
                    }
                }
                Op::SumAll(a) => {
                    let av = &self.nodes[a.0].value;
                    accumulate(&mut grads, *a, Array2::from_elem(av.raw_dim(), g[[0, 0]]));
                }
                Op::MeanRows(a) => {
                    let av = &self.nodes[a.0].value;
                    let m = av.nrows() as f64;
                    let mut ga = Array2::zeros(av.raw_dim());
                    for i in 0..av.nrows() {
                        for j in 0..av.ncols() {
                            ga[[i, j]] = g[[0, j]] / m;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumCols(a) => {
                    let av = &self.nodes[a.0].value;
                    let mut ga = Array2::zeros(av.raw_dim());
                    for i in 0..av.nrows() {
                        for j in 0..av.ncols() {
                            ga[[i, j]] = g[[i, 0]];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::PickPerRow { x, ids } => {
                    let xv = &self.nodes[x.0].value;
                    let mut gx = Array2::zeros(xv.raw_dim());
                    for (i, &id) in ids.iter().enumerate() {
                        gx[[i, id]] = g[[i, 0]];
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MaxWithConst(a, c) => {
                    let mask = self.nodes[a.0]
                        .value
                        .mapv(|x| if x > *c { 1.0 } else { 0.0 });
                    accumulate(&mut grads, *a, &g * &mask);
                }
            }
        }
        Gradients { grads }
    }

    /// Walk the tape and hand each parameter leaf's gradient to `sink`.
    pub fn param_grads(&self, grads: &Gradients, mut sink: impl FnMut(ParamId, &Array2<f64>)) {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = grads.grads[idx].as_ref() {
                    sink(pid, g);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
    match &mut grads[id.0] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
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

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), stable for large |x|
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for j in 0..row.len() {
            let e = (row[j] - max).exp();
            out[[i, j]] = e;
            sum += e;
        }
        for j in 0..row.len() {
            out[[i, j]] /= sum;
        }
    }
    out
}

pub(crate) fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse: f64 = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        for j in 0..row.len() {
            out[[i, j]] = row[j] - lse;
        }
    }
    out
}
