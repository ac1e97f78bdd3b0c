//! Reverse-mode automatic differentiation over dense matrices.
//!
//! The pipeline needs gradients for a closed set of operations: matrix
//! multiply, add, ReLU, tanh, sigmoid, softmax, LayerNorm, mean,
//! concatenation, row/column gathers and the hyperedge aggregation used by
//! the encoder. Each forward call appends a node to the tape; `backward`
//! walks the tape in reverse and accumulates adjoints.

use std::sync::Arc;

use ndarray::{Array2, Axis};

pub type NodeId = usize;

/// One hyperedge prepared for aggregation: (1/|e|, member node rows).
pub type AggEdge = (f64, Vec<usize>);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// a: s x d, b: 1 x d broadcast over rows of a.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    /// Softmax along each row, max-subtracted.
    SoftmaxRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    MeanRows(NodeId),
    ConcatRows(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    GatherRows {
        src: NodeId,
        idx: Arc<Vec<usize>>,
    },
    GatherCols {
        src: NodeId,
        idx: Arc<Vec<usize>>,
    },
    /// a: s x d, c: s x 1; each row of a scaled by the row's entry of c.
    MulColBroadcast(NodeId, NodeId),
    Transpose(NodeId),
    /// Per-node sum over incident hyperedges of (1/|e|) * sum of member rows.
    HyperAggregate {
        src: NodeId,
        edges: Arc<Vec<AggEdge>>,
    },
    /// Mean binary cross-entropy over a column of probabilities.
    BceMean {
        probs: NodeId,
        labels: Arc<Vec<f64>>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    trainable: bool,
}

/// Probabilities are clamped into [CLAMP, 1 - CLAMP] before the log.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    clamp_count: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of probability clamps performed by loss nodes so far.
    pub fn clamp_count(&self) -> usize {
        self.clamp_count
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.dim(), (1, 1));
        self.nodes[id].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>, trainable: bool) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.nodes[id].trainable = trainable;
        id
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.dim(), self.nodes[b].value.dim());
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[b].value.nrows(), 1);
        assert_eq!(self.nodes[a].value.ncols(), self.nodes[b].value.ncols());
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|e| (e - m).exp());
            let s: f64 = row.sum();
            row.mapv_inplace(|e| e / s);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let xv = &self.nodes[x].value;
        let g = &self.nodes[gain].value;
        let b = &self.nodes[bias].value;
        assert_eq!(g.dim(), (1, xv.ncols()));
        assert_eq!(b.dim(), (1, xv.ncols()));
        let d = xv.ncols() as f64;
        let mut v = Array2::zeros(xv.raw_dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mu = row.sum() / d;
            let var = row.iter().map(|e| (e - mu).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, e) in row.iter().enumerate() {
                v[[i, j]] = (e - mu) * inv * g[[0, j]] + b[[0, j]];
            }
        }
        self.push(v, Op::LayerNormRows { x, gain, bias, eps })
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let n = x.nrows() as f64;
        let v = x.sum_axis(Axis(0)).insert_axis(Axis(0)) / n;
        self.push(v, Op::MeanRows(a))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        assert_eq!(av.ncols(), bv.ncols());
        let v = ndarray::concatenate(Axis(0), &[av.view(), bv.view()]).unwrap();
        self.push(v, Op::ConcatRows(a, b))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        assert_eq!(av.nrows(), bv.nrows());
        let v = ndarray::concatenate(Axis(1), &[av.view(), bv.view()]).unwrap();
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn gather_rows(&mut self, src: NodeId, idx: Vec<usize>) -> NodeId {
        let s = &self.nodes[src].value;
        let mut v = Array2::zeros((idx.len(), s.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            v.row_mut(i).assign(&s.row(r));
        }
        self.push(
            v,
            Op::GatherRows {
                src,
                idx: Arc::new(idx),
            },
        )
    }

    pub fn gather_cols(&mut self, src: NodeId, idx: Vec<usize>) -> NodeId {
        let s = &self.nodes[src].value;
        let mut v = Array2::zeros((s.nrows(), idx.len()));
        for (j, &c) in idx.iter().enumerate() {
            v.column_mut(j).assign(&s.column(c));
        }
        self.push(
            v,
            Op::GatherCols {
                src,
                idx: Arc::new(idx),
            },
        )
    }

    pub fn mul_col_broadcast(&mut self, a: NodeId, c: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let cv = &self.nodes[c].value;
        assert_eq!(cv.dim(), (av.nrows(), 1));
        let mut v = av.clone();
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|e| e * cv[[i, 0]]);
        }
        self.push(v, Op::MulColBroadcast(a, c))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    /// out[v] = sum over edges containing v of (1/|e|) * sum of member rows.
    /// The aggregation operator is symmetric, so the adjoint reuses it.
    pub fn hyper_aggregate(&mut self, src: NodeId, edges: Arc<Vec<AggEdge>>) -> NodeId {
        let v = aggregate(&self.nodes[src].value, &edges);
        self.push(v, Op::HyperAggregate { src, edges })
    }

    /// Mean of -[r log p + (1-r) log(1-p)] over an s x 1 column of
    /// probabilities, clamped into (0, 1). Returns a 1 x 1 node.
    pub fn bce_mean(&mut self, probs: NodeId, labels: Vec<f64>) -> NodeId {
        let p = &self.nodes[probs].value;
        assert_eq!(p.dim(), (labels.len(), 1));
        let mut total = 0.0;
        let mut clamps = 0usize;
        for (i, &r) in labels.iter().enumerate() {
            let raw = p[[i, 0]];
            let pc = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if pc != raw {
                clamps += 1;
            }
            total += -(r * pc.ln() + (1.0 - r) * (1.0 - pc).ln());
        }
        self.clamp_count += clamps;
        let v = Array2::from_elem((1, 1), total / labels.len() as f64);
        self.push(
            v,
            Op::BceMean {
                probs,
                labels: Arc::new(labels),
            },
        )
    }

    /// Affine map `x * w + b` with b broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let m = self.matmul(x, w);
        self.add_row(m, b)
    }

    pub fn all_finite(&self, id: NodeId) -> bool {
        self.nodes[id].value.iter().all(|x| x.is_finite())
    }

    /// Reverse pass from a 1 x 1 loss node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.nodes[loss].value.dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=loss).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_adjoint(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn apply_adjoint(&self, i: NodeId, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let acc = |grads: &mut [Option<Array2<f64>>], id: NodeId, delta: Array2<f64>| {
            match &mut grads[id] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                acc(grads, *a, g.dot(&bv.t()));
                acc(grads, *b, av.t().dot(g));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, c) => acc(grads, *a, g * *c),
            Op::Relu(a) => {
                let mask = self.nodes[*a].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(grads, *a, g * &mask);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                acc(grads, *a, g * &y.mapv(|e| 1.0 - e * e));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                acc(grads, *a, g * &y.mapv(|e| e * (1.0 - e)));
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut da = Array2::zeros(y.raw_dim());
                for r in 0..y.nrows() {
                    let dot: f64 = (0..y.ncols()).map(|c| g[[r, c]] * y[[r, c]]).sum();
                    for c in 0..y.ncols() {
                        da[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                    }
                }
                acc(grads, *a, da);
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gain].value;
                let d = xv.ncols() as f64;
                let mut dx = Array2::zeros(xv.raw_dim());
                let mut dg = Array2::zeros((1, xv.ncols()));
                let mut db = Array2::zeros((1, xv.ncols()));
                for r in 0..xv.nrows() {
                    let row = xv.row(r);
                    let mu = row.sum() / d;
                    let var = row.iter().map(|e| (e - mu).powi(2)).sum::<f64>() / d;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|e| (e - mu) * inv).collect();
                    let dxhat: Vec<f64> = (0..xv.ncols())
                        .map(|c| g[[r, c]] * gv[[0, c]])
                        .collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d;
                    for c in 0..xv.ncols() {
                        dg[[0, c]] += g[[r, c]] * xhat[c];
                        db[[0, c]] += g[[r, c]];
                        dx[[r, c]] =
                            inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dg);
                acc(grads, *bias, db);
            }
            Op::MeanRows(a) => {
                let n = self.nodes[*a].value.nrows();
                let mut da = Array2::zeros(self.nodes[*a].value.raw_dim());
                for r in 0..n {
                    for c in 0..da.ncols() {
                        da[[r, c]] = g[[0, c]] / n as f64;
                    }
                }
                acc(grads, *a, da);
            }
            Op::ConcatRows(a, b) => {
                let na = self.nodes[*a].value.nrows();
                acc(grads, *a, g.slice(ndarray::s![..na, ..]).to_owned());
                acc(grads, *b, g.slice(ndarray::s![na.., ..]).to_owned());
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[*a].value.ncols();
                acc(grads, *a, g.slice(ndarray::s![.., ..ca]).to_owned());
                acc(grads, *b, g.slice(ndarray::s![.., ca..]).to_owned());
            }
            Op::GatherRows { src, idx } => {
                let mut ds = Array2::zeros(self.nodes[*src].value.raw_dim());
                for (i2, &r) in idx.iter().enumerate() {
                    let mut row = ds.row_mut(r);
                    row += &g.row(i2);
                }
                acc(grads, *src, ds);
            }
            Op::GatherCols { src, idx } => {
                let mut ds = Array2::zeros(self.nodes[*src].value.raw_dim());
                for (j2, &c) in idx.iter().enumerate() {
                    let mut col = ds.column_mut(c);
                    col += &g.column(j2);
                }
                acc(grads, *src, ds);
            }
            Op::MulColBroadcast(a, c) => {
                let av = &self.nodes[*a].value;
                let cv = &self.nodes[*c].value;
                let mut da = g.clone();
                let mut dc = Array2::zeros((av.nrows(), 1));
                for r in 0..av.nrows() {
                    for col in 0..av.ncols() {
                        da[[r, col]] *= cv[[r, 0]];
                        dc[[r, 0]] += g[[r, col]] * av[[r, col]];
                    }
                }
                acc(grads, *a, da);
                acc(grads, *c, dc);
            }
            Op::Transpose(a) => acc(grads, *a, g.t().to_owned()),
            Op::HyperAggregate { src, edges } => {
                acc(grads, *src, aggregate(g, edges));
            }
            Op::BceMean { probs, labels } => {
                let p = &self.nodes[*probs].value;
                let n = labels.len() as f64;
                let mut dp = Array2::zeros(p.raw_dim());
                for (r, &label) in labels.iter().enumerate() {
                    let raw = p[[r, 0]];
                    // Clamped entries sit on a flat of the loss.
                    if raw > PROB_CLAMP && raw < 1.0 - PROB_CLAMP {
                        dp[[r, 0]] = g[[0, 0]] * (raw - label) / (raw * (1.0 - raw)) / n;
                    }
                }
                acc(grads, *probs, dp);
            }
        }
    }
}

fn aggregate(h: &Array2<f64>, edges: &[AggEdge]) -> Array2<f64> {
    let mut out = Array2::zeros(h.raw_dim());
    for (w, members) in edges {
        let mut s = ndarray::Array1::zeros(h.ncols());
        for &m in members {
            s += &h.row(m);
        }
        s *= *w;
        for &m in members {
            let mut row = out.row_mut(m);
            row += &s;
        }
    }
    out
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}
