//! Reverse-mode autodiff over a flat operation tape.
//!
//! Nodes are appended in execution order, so ids already form a topological
//! order and the backward pass is a single reverse sweep. Gradients
//! accumulate into `grad` buffers; calling [`Graph::backward`] twice without
//! rebuilding the tape therefore doubles them.

use crate::error::{Error, Result};
use crate::kernels::{self, AttnMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::IGNORE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// Broadcasts a 1-D bias over every row.
    AddRow {
        x: NodeId,
        bias: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: S,
    },
    Silu {
        x: NodeId,
    },
    SoftmaxRows {
        x: NodeId,
    },
    RmsNorm {
        x: NodeId,
        gain: NodeId,
    },
    Rope {
        x: NodeId,
        positions: Vec<usize>,
        head_dim: usize,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        head_dim: usize,
        mask: AttnMask,
        /// Cached per-head attention rows from the forward pass.
        probs: Vec<S>,
    },
    /// Gathers rows (possibly from several tensors) into a new matrix.
    StackRows {
        sources: Vec<(NodeId, usize)>,
    },
    Sum {
        x: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        /// Per-position weight divided by the weight sum (zero when ignored).
        norm_weights: Vec<S>,
        probs: Vec<S>,
    },
}

struct Node<S> {
    tensor: Tensor<S>,
    op: Op<S>,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, tensor: Tensor<S>, op: Op<S>) -> NodeId {
        self.nodes.push(Node { tensor, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, tensor: Tensor<S>) -> NodeId {
        self.push(tensor, Op::Leaf)
    }

    pub fn constant(&mut self, tensor: Tensor<S>) -> NodeId {
        let mut t = tensor;
        t.requires_grad = false;
        self.push(t, Op::Leaf)
    }

    pub fn data(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn scalar_value(&self, id: NodeId) -> S {
        debug_assert!(self.nodes[id.0].tensor.is_scalar());
        self.nodes[id.0].tensor.data[0]
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<S>, requires: bool, op: Op<S>) -> NodeId {
        let mut t = Tensor::from_vec(shape, data).expect("internal op produced ragged tensor");
        t.requires_grad = requires;
        self.push(t, op)
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn rank2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        match self.shape(id) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape {
                op,
                lhs: other.to_vec(),
                rhs: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.rank2("matmul", a)?;
        let (kb, n) = self.rank2("matmul", b)?;
        if ka != kb {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut c = vec![S::zero(); m * n];
        kernels::gemm_nn(false, self.data(a), self.data(b), m, ka, n, &mut c);
        let req = self.requires(a) || self.requires(b);
        Ok(self.out(vec![m, n], c, req, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.out(self.shape(a).to_vec(), data, req, Op::Add { a, b }))
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, n) = self.rank2("add_row", x)?;
        if self.shape(bias) != [n] {
            return Err(self.shape_err("add_row", x, bias));
        }
        let b = self.data(bias).to_vec();
        let data = self
            .data(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(&b).map(|(&v, &bv)| v + bv))
            .collect();
        let req = self.requires(x) || self.requires(bias);
        Ok(self.out(self.shape(x).to_vec(), data, req, Op::AddRow { x, bias }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.out(self.shape(a).to_vec(), data, req, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> NodeId {
        let data = self.data(x).iter().map(|&v| v * c).collect();
        let req = self.requires(x);
        self.out(self.shape(x).to_vec(), data, req, Op::Scale { x, c })
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let data = self.data(x).iter().map(|&v| kernels::silu(v)).collect();
        let req = self.requires(x);
        self.out(self.shape(x).to_vec(), data, req, Op::Silu { x })
    }

    /// Softmax along each row of a 2-D tensor. Rows sum to one.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (_, n) = self.rank2("softmax_rows", x)?;
        if self.data(x).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "softmax_rows: non-finite input".to_string(),
            ));
        }
        let mut data = self.data(x).to_vec();
        for row in data.chunks_exact_mut(n) {
            kernels::softmax_row(row);
        }
        let req = self.requires(x);
        Ok(self.out(self.shape(x).to_vec(), data, req, Op::SoftmaxRows { x }))
    }

    /// Divides each row by sqrt(mean of squares + eps), then scales by gain.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let (m, n) = self.rank2("rms_norm", x)?;
        if self.shape(gain) != [n] {
            return Err(self.shape_err("rms_norm", x, gain));
        }
        let g = self.data(gain).to_vec();
        let mut data = vec![S::zero(); m * n];
        for (out_row, row) in data.chunks_exact_mut(n).zip(self.data(x).chunks_exact(n)) {
            kernels::rms_norm_row(row, &g, out_row);
        }
        let req = self.requires(x) || self.requires(gain);
        Ok(self.out(vec![m, n], data, req, Op::RmsNorm { x, gain }))
    }

    /// Rotary position encoding; row i is rotated by angles for positions[i].
    pub fn rope(&mut self, x: NodeId, positions: &[usize], head_dim: usize) -> Result<NodeId> {
        let (m, n) = self.rank2("rope", x)?;
        if positions.len() != m || head_dim == 0 || head_dim % 2 != 0 || n % head_dim != 0 {
            return Err(Error::Contract(format!(
                "rope: {m}x{n} input, {} positions, head_dim {head_dim}",
                positions.len()
            )));
        }
        let mut data = self.data(x).to_vec();
        for (row, &pos) in data.chunks_exact_mut(n).zip(positions) {
            kernels::rope_row(row, head_dim, pos, false);
        }
        let req = self.requires(x);
        Ok(self.out(
            vec![m, n],
            data,
            req,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                head_dim,
            },
        ))
    }

    /// Multi-head attention; q/k/v are `len x (heads * head_dim)`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        mask: AttnMask,
    ) -> Result<NodeId> {
        let (len, dim) = self.rank2("attention", q)?;
        if self.shape(k) != [len, dim] || self.shape(v) != [len, dim] {
            return Err(self.shape_err("attention", q, k));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Contract(format!(
                "attention: dim {dim} not divisible by {heads} heads"
            )));
        }
        let head_dim = dim / heads;
        let req = self.requires(q) || self.requires(k) || self.requires(v);
        let (out, probs) = kernels::attention(
            self.data(q),
            self.data(k),
            self.data(v),
            len,
            heads,
            head_dim,
            mask,
            req,
        );
        Ok(self.out(
            vec![len, dim],
            out,
            req,
            Op::Attention {
                q,
                k,
                v,
                heads,
                head_dim,
                mask,
                probs: probs.unwrap_or_default(),
            },
        ))
    }

    /// Builds a matrix by copying the given rows; gradients scatter back.
    pub fn stack_rows(&mut self, sources: &[(NodeId, usize)]) -> Result<NodeId> {
        if sources.is_empty() {
            return Err(Error::Contract("stack_rows: no sources".to_string()));
        }
        let width = self.nodes[sources[0].0 .0].tensor.cols();
        let mut data = Vec::with_capacity(sources.len() * width);
        let mut req = false;
        for &(id, row) in sources {
            let t = &self.nodes[id.0].tensor;
            if t.cols() != width {
                return Err(self.shape_err("stack_rows", sources[0].0, id));
            }
            if row >= t.rows() {
                return Err(Error::Index {
                    what: "stack_rows row",
                    index: row,
                    len: t.rows(),
                    position: None,
                });
            }
            data.extend_from_slice(t.row(row));
            req |= t.requires_grad;
        }
        Ok(self.out(
            vec![sources.len(), width],
            data,
            req,
            Op::StackRows {
                sources: sources.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.data(x).iter().cloned().sum();
        let req = self.requires(x);
        self.out(vec![], vec![total], req, Op::Sum { x })
    }

    /// Weighted-mean cross entropy over rows of logits.
    ///
    /// `targets[i]` may be [`IGNORE`] to drop position i from the loss.
    /// `weights`, when given, scales each position; the loss is the weighted
    /// mean of per-position negative log-probabilities.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        weights: Option<&[S]>,
    ) -> Result<NodeId> {
        let (m, n) = self.rank2("cross_entropy", logits)?;
        if targets.len() != m || weights.map_or(false, |w| w.len() != m) {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![m, n],
                rhs: vec![targets.len()],
            });
        }
        let mut raw = vec![S::zero(); m];
        for (i, &t) in targets.iter().enumerate() {
            if t == IGNORE {
                continue;
            }
            if t as usize >= n {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t as usize,
                    len: n,
                    position: Some(i),
                });
            }
            raw[i] = weights.map_or(S::one(), |w| w[i]);
        }
        let total: S = raw.iter().cloned().sum();
        let norm_weights: Vec<S> = if total > S::zero() {
            raw.iter().map(|&w| w / total).collect()
        } else {
            raw
        };

        let mut probs = self.data(logits).to_vec();
        let mut loss = S::zero();
        for (i, row) in probs.chunks_exact_mut(n).enumerate() {
            kernels::softmax_row(row);
            if norm_weights[i] > S::zero() {
                loss += -(row[targets[i] as usize].ln()) * norm_weights[i];
            }
        }
        let req = self.requires(logits);
        Ok(self.out(
            vec![],
            vec![loss],
            req,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                norm_weights,
                probs,
            },
        ))
    }

    /// Adds a gradient contribution to the in-flight sweep table.
    fn sweep_add(&self, sweep: &mut [Option<Vec<S>>], id: NodeId, contribution: &[S]) {
        let t = &self.nodes[id.0].tensor;
        if !t.requires_grad {
            return;
        }
        let len = t.data.len();
        debug_assert_eq!(len, contribution.len());
        let buf = sweep[id.0].get_or_insert_with(|| vec![S::zero(); len]);
        for (g, &c) in buf.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    /// Reverse sweep from a scalar loss. Each call computes fresh dL/dnode
    /// values and adds them into the persistent `grad` buffers, so calling
    /// twice doubles every gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        {
            let t = &self.nodes[loss.0].tensor;
            if !t.is_scalar() {
                return Err(Error::Contract(format!(
                    "backward: loss must be scalar, got shape {:?}",
                    t.shape
                )));
            }
            if !t.requires_grad {
                return Ok(());
            }
        }
        let mut sweep: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        sweep[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = sweep[i].take() else {
                continue;
            };
            {
                let t = &mut self.nodes[i].tensor;
                let grad = t.grad.get_or_insert_with(|| vec![S::zero(); t.data.len()]);
                for (gv, &c) in grad.iter_mut().zip(&g) {
                    *gv += c;
                }
            }
            // Inputs always precede node i on the tape, so each node is
            // finalized before the sweep reaches its inputs.
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    if self.requires(a) {
                        let mut da = vec![S::zero(); m * k];
                        kernels::gemm_nt(false, &g, self.data(b), m, n, k, &mut da);
                        self.sweep_add(&mut sweep, a, &da);
                    }
                    if self.requires(b) {
                        let mut db = vec![S::zero(); k * n];
                        kernels::gemm_tn(false, self.data(a), &g, k, m, n, &mut db);
                        self.sweep_add(&mut sweep, b, &db);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.sweep_add(&mut sweep, a, &g);
                    self.sweep_add(&mut sweep, b, &g);
                }
                Op::AddRow { x, bias } => {
                    let (x, bias) = (*x, *bias);
                    let n = self.shape(bias)[0];
                    self.sweep_add(&mut sweep, x, &g);
                    if self.requires(bias) {
                        let mut db = vec![S::zero(); n];
                        for row in g.chunks_exact(n) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.sweep_add(&mut sweep, bias, &db);
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.requires(a) {
                        let da: Vec<S> =
                            g.iter().zip(self.data(b)).map(|(&gv, &bv)| gv * bv).collect();
                        self.sweep_add(&mut sweep, a, &da);
                    }
                    if self.requires(b) {
                        let db: Vec<S> =
                            g.iter().zip(self.data(a)).map(|(&gv, &av)| gv * av).collect();
                        self.sweep_add(&mut sweep, b, &db);
                    }
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    let dx: Vec<S> = g.iter().map(|&gv| gv * c).collect();
                    self.sweep_add(&mut sweep, x, &dx);
                }
                Op::Silu { x } => {
                    let x = *x;
                    let dx: Vec<S> = g
                        .iter()
                        .zip(self.data(x))
                        .map(|(&gv, &xv)| gv * kernels::silu_grad(xv))
                        .collect();
                    self.sweep_add(&mut sweep, x, &dx);
                }
                Op::SoftmaxRows { x } => {
                    let x = *x;
                    let n = self.shape(x)[1];
                    let y = self.data(NodeId(i));
                    let mut dx = vec![S::zero(); y.len()];
                    for ((dx_row, y_row), g_row) in dx
                        .chunks_exact_mut(n)
                        .zip(y.chunks_exact(n))
                        .zip(g.chunks_exact(n))
                    {
                        let dot: S = y_row.iter().zip(g_row).map(|(&yv, &gv)| yv * gv).sum();
                        for ((d, &yv), &gv) in dx_row.iter_mut().zip(y_row).zip(g_row) {
                            *d = yv * (gv - dot);
                        }
                    }
                    self.sweep_add(&mut sweep, x, &dx);
                }
                Op::RmsNorm { x, gain } => {
                    let (x, gain) = (*x, *gain);
                    let n = self.shape(x)[1];
                    let eps = S::from_f64(kernels::RMS_EPS);
                    let n_s = S::from_usize(n);
                    let gain_data = self.data(gain).to_vec();
                    let x_data = self.data(x);
                    let mut dx = vec![S::zero(); x_data.len()];
                    let mut dgain = vec![S::zero(); n];
                    for (row_idx, (x_row, g_row)) in
                        x_data.chunks_exact(n).zip(g.chunks_exact(n)).enumerate()
                    {
                        let mean_sq = x_row.iter().map(|&v| v * v).sum::<S>() / n_s;
                        let r = (mean_sq + eps).sqrt();
                        let inv_r = r.recip();
                        let dot: S = g_row
                            .iter()
                            .zip(x_row)
                            .zip(&gain_data)
                            .map(|((&gv, &xv), &gn)| gv * xv * gn)
                            .sum();
                        let coef = dot / (n_s * r * r * r);
                        let dx_row = &mut dx[row_idx * n..(row_idx + 1) * n];
                        for (j, ((d, &gv), &xv)) in
                            dx_row.iter_mut().zip(g_row).zip(x_row).enumerate()
                        {
                            *d = gv * gain_data[j] * inv_r - xv * coef;
                            dgain[j] += gv * xv * inv_r;
                        }
                    }
                    self.sweep_add(&mut sweep, x, &dx);
                    self.sweep_add(&mut sweep, gain, &dgain);
                }
                Op::Rope {
                    x,
                    positions,
                    head_dim,
                } => {
                    let (x, head_dim) = (*x, *head_dim);
                    let positions = positions.clone();
                    let n = self.shape(x)[1];
                    let mut dx = g.clone();
                    for (row, &pos) in dx.chunks_exact_mut(n).zip(&positions) {
                        kernels::rope_row(row, head_dim, pos, true);
                    }
                    self.sweep_add(&mut sweep, x, &dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    head_dim,
                    mask,
                    probs,
                } => {
                    let (q, k, v, heads, head_dim, mask) = (*q, *k, *v, *heads, *head_dim, *mask);
                    let probs = probs.clone();
                    let len = self.shape(q)[0];
                    let dim = heads * head_dim;
                    let scale = S::from_f64(1.0 / (head_dim as f64).sqrt());
                    let (q_d, k_d, v_d) = (
                        self.data(q).to_vec(),
                        self.data(k).to_vec(),
                        self.data(v).to_vec(),
                    );
                    let mut dq = vec![S::zero(); len * dim];
                    let mut dk = vec![S::zero(); len * dim];
                    let mut dv = vec![S::zero(); len * dim];
                    let mut d_scores = vec![S::zero(); len];
                    for h in 0..heads {
                        let col = h * head_dim;
                        let a_head = &probs[h * len * len..(h + 1) * len * len];
                        for i in 0..len {
                            let visible = mask.visible_end(i, len);
                            let a_row = &a_head[i * len..i * len + visible];
                            let g_row = &g[i * dim + col..i * dim + col + head_dim];
                            // dA = dO V^T, then dS = A * (dA - sum(A*dA)).
                            let mut dot = S::zero();
                            for j in 0..visible {
                                let v_row = &v_d[j * dim + col..j * dim + col + head_dim];
                                let da: S =
                                    g_row.iter().zip(v_row).map(|(&a, &b)| a * b).sum();
                                d_scores[j] = da;
                                dot += a_row[j] * da;
                            }
                            for j in 0..visible {
                                let ds = a_row[j] * (d_scores[j] - dot) * scale;
                                let k_row = &k_d[j * dim + col..j * dim + col + head_dim];
                                let q_row = &q_d[i * dim + col..i * dim + col + head_dim];
                                let dq_row = &mut dq[i * dim + col..i * dim + col + head_dim];
                                for (dqv, &kv) in dq_row.iter_mut().zip(k_row) {
                                    *dqv += ds * kv;
                                }
                                let dk_row = &mut dk[j * dim + col..j * dim + col + head_dim];
                                for (dkv, &qv) in dk_row.iter_mut().zip(q_row) {
                                    *dkv += ds * qv;
                                }
                                let dv_row = &mut dv[j * dim + col..j * dim + col + head_dim];
                                for (dvv, &gv) in dv_row.iter_mut().zip(g_row) {
                                    *dvv += a_row[j] * gv;
                                }
                            }
                        }
                    }
                    self.sweep_add(&mut sweep, q, &dq);
                    self.sweep_add(&mut sweep, k, &dk);
                    self.sweep_add(&mut sweep, v, &dv);
                }
                Op::StackRows { sources } => {
                    let sources = sources.clone();
                    let width = g.len() / sources.len();
                    for (out_row, &(id, row)) in sources.iter().enumerate() {
                        if !self.requires(id) {
                            continue;
                        }
                        let t = &self.nodes[id.0].tensor;
                        debug_assert_eq!(t.cols(), width);
                        let len = t.data.len();
                        let contribution = &g[out_row * width..(out_row + 1) * width];
                        let buf = sweep[id.0].get_or_insert_with(|| vec![S::zero(); len]);
                        for (gv, &cv) in buf[row * width..(row + 1) * width]
                            .iter_mut()
                            .zip(contribution)
                        {
                            *gv += cv;
                        }
                    }
                }
                Op::Sum { x } => {
                    let x = *x;
                    let dx = vec![g[0]; self.data(x).len()];
                    self.sweep_add(&mut sweep, x, &dx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    norm_weights,
                    probs,
                } => {
                    let logits = *logits;
                    let n = self.shape(logits)[1];
                    let mut dl = probs.clone();
                    for (i, (row, &w)) in
                        dl.chunks_exact_mut(n).zip(norm_weights.iter()).enumerate()
                    {
                        if w == S::zero() {
                            row.fill(S::zero());
                            continue;
                        }
                        row[targets[i] as usize] -= S::one();
                        for v in row.iter_mut() {
                            *v *= w * g[0];
                        }
                    }
                    self.sweep_add(&mut sweep, logits, &dl);
                }
            }
        }
        Ok(())
    }
}
