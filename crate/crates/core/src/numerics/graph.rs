//! Reverse-mode autodiff on a dynamic tape.
//!
//! A [`Graph`] is rebuilt for every forward pass (one per training batch).
//! Nodes are appended in evaluation order, so reverse node order is already
//! a topological order for backpropagation. Gradients accumulate additively:
//! a node consumed by several downstream ops receives the sum of their
//! contributions, and calling [`Graph::backward`] twice doubles leaf
//! gradients rather than resetting them.
//!
//! Only f64 is supported. Every op validates shapes up front and panics if a
//! non-finite value appears in its output, so numerical blow-ups fail loudly
//! at the op that produced them.

use super::tensor::{
    log_sum_exp, matmul_a_bt_accum, matmul_at_b_accum, matmul_kernel, stable_sigmoid, Tensor,
};
use super::NumericsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Reduction mode for [`Graph::cross_entropy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Weighted mean: `sum(w_i * ce_i) / sum(w_i)`.
    Mean,
    /// Weighted sum: `sum(w_i * ce_i)`.
    Sum,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Broadcast-add a `[1,n]` bias row to every row of a `[m,n]` matrix.
    AddBias(NodeId, NodeId),
    /// Scale row `i` of a `[m,n]` matrix by entry `i` of a `[m,1]` column.
    ScaleRows(NodeId, NodeId),
    ScaleConst(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    SoftmaxLast(NodeId),
    MeanAxis(NodeId, usize),
    Concat {
        axis: usize,
        parts: Vec<NodeId>,
    },
    SliceCols {
        a: NodeId,
        c0: usize,
        w: usize,
    },
    /// Spatial window `[y0..y0+h, x0..x0+w, :]` of a `[H,W,C]` tensor.
    SliceRect3 {
        a: NodeId,
        y0: usize,
        x0: usize,
        h: usize,
        w: usize,
    },
    Reshape(NodeId),
    /// Copy of `base` with the window at (y0,x0) replaced by `patch`.
    OverlayRect3 {
        base: NodeId,
        patch: NodeId,
        y0: usize,
        x0: usize,
    },
    /// Row `i` of the output is the mean of `table` rows named by `seqs[i]`.
    EmbeddingMean {
        table: NodeId,
        seqs: Vec<Vec<usize>>,
    },
    /// Scalar cross-entropy of row-wise logits against integer targets,
    /// computed via log-sum-exp (the softmax is never materialized).
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Option<Vec<f64>>,
        reduction: Reduction,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, requires: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires
    }

    /// Leaf that will not receive a gradient (data, cached features…).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable leaf; its gradient is available after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn shape_err(&self, op: &str, ids: &[NodeId]) -> NumericsError {
        NumericsError::ShapeMismatch {
            op: op.to_string(),
            shapes: ids
                .iter()
                .map(|id| format!("{:?}", self.value(*id).shape()))
                .collect::<Vec<_>>()
                .join(" vs "),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", &[a, b]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_kernel(self.value(a).values(), self.value(b).values(), m, k, n);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::from_op("matmul", vec![m, n], out), req, Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("add", &[a, b]));
        }
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::from_op("add", shape, out), req, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err("mul", &[a, b]));
        }
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::from_op("mul", shape, out), req, Op::Mul(a, b)))
    }

    pub fn add_bias(&mut self, m: NodeId, bias: NodeId) -> Result<NodeId, NumericsError> {
        let (sm, sb) = (self.value(m).shape(), self.value(bias).shape());
        let bias_cols = match sb {
            [n] => *n,
            [1, n] => *n,
            _ => return Err(self.shape_err("add_bias", &[m, bias])),
        };
        if sm.len() != 2 || sm[1] != bias_cols {
            return Err(self.shape_err("add_bias", &[m, bias]));
        }
        let (rows, cols) = (sm[0], sm[1]);
        let mv = self.value(m).values();
        let bv = self.value(bias).values();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                out.push(mv[i * cols + j] + bv[j]);
            }
        }
        let req = self.requires(m) || self.requires(bias);
        Ok(self.push(
            Tensor::from_op("add_bias", vec![rows, cols], out),
            req,
            Op::AddBias(m, bias),
        ))
    }

    pub fn scale_rows(&mut self, m: NodeId, col: NodeId) -> Result<NodeId, NumericsError> {
        let (sm, sc) = (self.value(m).shape(), self.value(col).shape());
        if sm.len() != 2 || sc != [sm[0], 1] {
            return Err(self.shape_err("scale_rows", &[m, col]));
        }
        let (rows, cols) = (sm[0], sm[1]);
        let mv = self.value(m).values();
        let cv = self.value(col).values();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                out.push(mv[i * cols + j] * cv[i]);
            }
        }
        let req = self.requires(m) || self.requires(col);
        Ok(self.push(
            Tensor::from_op("scale_rows", vec![rows, cols], out),
            req,
            Op::ScaleRows(m, col),
        ))
    }

    pub fn scale_const(&mut self, a: NodeId, c: f64) -> Result<NodeId, NumericsError> {
        if !c.is_finite() {
            return Err(NumericsError::InvalidArg {
                what: format!("scale_const by non-finite {c}"),
            });
        }
        let out: Vec<f64> = self.value(a).values().iter().map(|x| c * x).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a);
        Ok(self.push(Tensor::from_op("scale_const", shape, out), req, Op::ScaleConst(a, c)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(a).values().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a);
        self.push(Tensor::from_op("relu", shape, out), req, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(a).values().iter().map(|&x| stable_sigmoid(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a);
        self.push(Tensor::from_op("sigmoid", shape, out), req, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(a).values().iter().map(|&x| x.tanh()).collect();
        let shape = self.value(a).shape().to_vec();
        let req = self.requires(a);
        self.push(Tensor::from_op("tanh", shape, out), req, Op::Tanh(a))
    }

    /// Softmax over the last axis of a 1-D or 2-D tensor, max-shifted for
    /// stability. Output rows are strictly positive and sum to 1.
    pub fn softmax_last(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let shape = self.value(a).shape().to_vec();
        let cols = *shape.last().unwrap();
        if shape.len() > 2 {
            return Err(self.shape_err("softmax_last", &[a]));
        }
        let v = self.value(a).values();
        let mut out = Vec::with_capacity(v.len());
        for row in v.chunks(cols) {
            let (lse, _) = log_sum_exp(row);
            out.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        let req = self.requires(a);
        Ok(self.push(Tensor::from_op("softmax_last", shape, out), req, Op::SoftmaxLast(a)))
    }

    /// Mean over one axis of a 2-D tensor: axis 0 gives `[1,n]`, axis 1 `[m,1]`.
    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId, NumericsError> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 2 || axis > 1 {
            return Err(self.shape_err("mean_axis", &[a]));
        }
        let (m, n) = (shape[0], shape[1]);
        let v = self.value(a).values();
        let out = match axis {
            0 => {
                let mut acc = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        acc[j] += v[i * n + j];
                    }
                }
                acc.iter_mut().for_each(|x| *x /= m as f64);
                Tensor::from_op("mean_axis", vec![1, n], acc)
            }
            _ => {
                let mut acc = vec![0.0; m];
                for i in 0..m {
                    acc[i] = v[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64;
                }
                Tensor::from_op("mean_axis", vec![m, 1], acc)
            }
        };
        let req = self.requires(a);
        Ok(self.push(out, req, Op::MeanAxis(a, axis)))
    }

    /// Concatenate 2-D tensors along rows (axis 0) or columns (axis 1).
    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        if parts.is_empty() || axis > 1 {
            return Err(NumericsError::InvalidArg {
                what: format!("concat needs parts on axis 0 or 1, got {} parts axis {axis}", parts.len()),
            });
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.len() != 2 {
            return Err(self.shape_err("concat", parts));
        }
        let fixed = first[1 - axis];
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[1 - axis] != fixed {
                return Err(self.shape_err("concat", parts));
            }
            total += s[axis];
        }
        let (rows, cols) = if axis == 0 { (total, fixed) } else { (fixed, total) };
        let mut out = vec![0.0; rows * cols];
        if axis == 0 {
            let mut r0 = 0;
            for &p in parts {
                let v = self.value(p).values();
                out[r0 * cols..r0 * cols + v.len()].copy_from_slice(v);
                r0 += self.value(p).shape()[0];
            }
        } else {
            let mut c0 = 0;
            for &p in parts {
                let pv = self.value(p).values();
                let pw = self.value(p).shape()[1];
                for i in 0..rows {
                    out[i * cols + c0..i * cols + c0 + pw].copy_from_slice(&pv[i * pw..(i + 1) * pw]);
                }
                c0 += pw;
            }
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor::from_op("concat", vec![rows, cols], out),
            req,
            Op::Concat { axis, parts: parts.to_vec() },
        ))
    }

    /// Columns `[c0, c0+w)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: NodeId, c0: usize, w: usize) -> Result<NodeId, NumericsError> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 2 || w == 0 || c0 + w > shape[1] {
            return Err(NumericsError::InvalidArg {
                what: format!("slice_cols [{c0},{}) of shape {shape:?}", c0 + w),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let v = self.value(a).values();
        let mut out = Vec::with_capacity(rows * w);
        for i in 0..rows {
            out.extend_from_slice(&v[i * cols + c0..i * cols + c0 + w]);
        }
        let req = self.requires(a);
        Ok(self.push(
            Tensor::from_op("slice_cols", vec![rows, w], out),
            req,
            Op::SliceCols { a, c0, w },
        ))
    }

    /// Spatial window of a `[H,W,C]` tensor, keeping all channels.
    pub fn slice_rect3(
        &mut self,
        a: NodeId,
        y0: usize,
        x0: usize,
        h: usize,
        w: usize,
    ) -> Result<NodeId, NumericsError> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 3 || h == 0 || w == 0 || y0 + h > shape[0] || x0 + w > shape[1] {
            return Err(NumericsError::InvalidArg {
                what: format!("slice_rect3 {h}x{w}@({y0},{x0}) of shape {shape:?}"),
            });
        }
        let (wid, ch) = (shape[1], shape[2]);
        let v = self.value(a).values();
        let mut out = Vec::with_capacity(h * w * ch);
        for dy in 0..h {
            let row0 = ((y0 + dy) * wid + x0) * ch;
            out.extend_from_slice(&v[row0..row0 + w * ch]);
        }
        let req = self.requires(a);
        Ok(self.push(
            Tensor::from_op("slice_rect3", vec![h, w, ch], out),
            req,
            Op::SliceRect3 { a, y0, x0, h, w },
        ))
    }

    /// Same storage, new shape (element count must match).
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, NumericsError> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(NumericsError::InvalidArg {
                what: format!(
                    "reshape {:?} -> {shape:?} changes element count",
                    self.value(a).shape()
                ),
            });
        }
        let out = Tensor::from_op("reshape", shape, self.value(a).values().to_vec());
        let req = self.requires(a);
        Ok(self.push(out, req, Op::Reshape(a)))
    }

    /// Copy of `base` (`[H,W,C]`) with the window at `(y0,x0)` replaced by
    /// `patch` (`[h,w,C]`). Pixels outside the window pass through untouched.
    pub fn overlay_rect3(
        &mut self,
        base: NodeId,
        patch: NodeId,
        y0: usize,
        x0: usize,
    ) -> Result<NodeId, NumericsError> {
        let (sb, sp) = (self.value(base).shape().to_vec(), self.value(patch).shape().to_vec());
        if sb.len() != 3 || sp.len() != 3 || sb[2] != sp[2] || y0 + sp[0] > sb[0] || x0 + sp[1] > sb[1] {
            return Err(self.shape_err("overlay_rect3", &[base, patch]));
        }
        let (wid, ch) = (sb[1], sb[2]);
        let (ph, pw) = (sp[0], sp[1]);
        let mut out = self.value(base).values().to_vec();
        let pv = self.value(patch).values();
        for dy in 0..ph {
            let dst0 = ((y0 + dy) * wid + x0) * ch;
            out[dst0..dst0 + pw * ch].copy_from_slice(&pv[dy * pw * ch..(dy + 1) * pw * ch]);
        }
        let req = self.requires(base) || self.requires(patch);
        Ok(self.push(
            Tensor::from_op("overlay_rect3", sb, out),
            req,
            Op::OverlayRect3 { base, patch, y0, x0 },
        ))
    }

    /// Row `i` of the `[B,E]` output is the mean of the embedding-table rows
    /// named by `seqs[i]`. Token ids must be in range; sequences non-empty.
    pub fn embedding_mean(
        &mut self,
        table: NodeId,
        seqs: &[Vec<usize>],
    ) -> Result<NodeId, NumericsError> {
        let shape = self.value(table).shape().to_vec();
        if shape.len() != 2 || seqs.is_empty() {
            return Err(self.shape_err("embedding_mean", &[table]));
        }
        let (vocab, emb) = (shape[0], shape[1]);
        let tv = self.value(table).values();
        let mut out = vec![0.0; seqs.len() * emb];
        for (i, seq) in seqs.iter().enumerate() {
            if seq.is_empty() {
                return Err(NumericsError::InvalidArg {
                    what: format!("embedding_mean: sequence {i} is empty"),
                });
            }
            for &t in seq {
                if t >= vocab {
                    return Err(NumericsError::InvalidArg {
                        what: format!("embedding_mean: token {t} out of vocab {vocab}"),
                    });
                }
                for e in 0..emb {
                    out[i * emb + e] += tv[t * emb + e];
                }
            }
            let inv = 1.0 / seq.len() as f64;
            out[i * emb..(i + 1) * emb].iter_mut().for_each(|x| *x *= inv);
        }
        let req = self.requires(table);
        Ok(self.push(
            Tensor::from_op("embedding_mean", vec![seqs.len(), emb], out),
            req,
            Op::EmbeddingMean { table, seqs: seqs.to_vec() },
        ))
    }

    /// Scalar cross-entropy of `[B,C]` logits against integer targets.
    ///
    /// Per-row loss is `logsumexp(row) - row[target]`; rows may carry
    /// non-negative weights. `Reduction::Mean` divides by the weight sum.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        weights: Option<&[f64]>,
        reduction: Reduction,
    ) -> Result<NodeId, NumericsError> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(NumericsError::InvalidArg {
                what: format!(
                    "cross_entropy: logits {shape:?} vs {} targets",
                    targets.len()
                ),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(w) = weights {
            if w.len() != rows || w.iter().any(|&x| !x.is_finite() || x < 0.0) {
                return Err(NumericsError::InvalidArg {
                    what: "cross_entropy: weights must be finite, non-negative, one per row".into(),
                });
            }
        }
        let v = self.value(logits).values();
        let mut num = 0.0;
        let mut wsum = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(NumericsError::InvalidArg {
                    what: format!("cross_entropy: target {t} out of {cols} classes"),
                });
            }
            let row = &v[i * cols..(i + 1) * cols];
            let (lse, _) = log_sum_exp(row);
            let w = weights.map_or(1.0, |w| w[i]);
            num += w * (lse - row[t]);
            wsum += w;
        }
        let value = match reduction {
            Reduction::Mean => {
                if wsum <= 0.0 {
                    return Err(NumericsError::InvalidArg {
                        what: "cross_entropy: mean reduction needs positive weight sum".into(),
                    });
                }
                num / wsum
            }
            Reduction::Sum => num,
        };
        let req = self.requires(logits);
        Ok(self.push(
            Tensor::from_op("cross_entropy", vec![1], vec![value]),
            req,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.map(|w| w.to_vec()),
                reduction,
            },
        ))
    }

    fn accum(&mut self, id: NodeId, contribution: Vec<f64>) {
        debug_assert_eq!(contribution.len(), self.nodes[id.0].value.len());
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(&contribution) {
                    *gi += ci;
                }
            }
            None => self.nodes[id.0].grad = Some(contribution),
        }
    }

    /// Backpropagates from a scalar root, accumulating gradients into every
    /// node on a path to a trainable leaf. May be called repeatedly; each
    /// call adds another unit of upstream gradient (contributions sum).
    pub fn backward(&mut self, root: NodeId) -> Result<(), NumericsError> {
        if self.value(root).len() != 1 {
            return Err(NumericsError::NotScalarLoss {
                shape: format!("{:?}", self.value(root).shape()),
            });
        }
        self.accum(root, vec![1.0]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires {
                continue;
            }
            // Leaves keep their accumulated gradient for the caller;
            // interior-node gradients are consumed as we pass them down.
            let g = match self.nodes[idx].op {
                Op::Leaf => continue,
                _ => match self.nodes[idx].grad.take() {
                    Some(g) => g,
                    None => continue, // not on a path from the root
                },
            };
            let op = self.nodes[idx].op.clone();
            self.backprop_one(idx, &op, &g);
        }
        Ok(())
    }

    fn backprop_one(&mut self, idx: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => unreachable!("leaf handled in backward()"),
            Op::Matmul(a, b) => {
                let sa = self.value(*a).shape();
                let (m, k) = (sa[0], sa[1]);
                let n = self.value(*b).shape()[1];
                if self.requires(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_a_bt_accum(g, self.value(*b).values(), m, n, k, &mut da);
                    self.accum(*a, da);
                }
                if self.requires(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_b_accum(self.value(*a).values(), g, m, k, n, &mut db);
                    self.accum(*b, db);
                }
            }
            Op::Add(a, b) => {
                if self.requires(*a) {
                    self.accum(*a, g.to_vec());
                }
                if self.requires(*b) {
                    self.accum(*b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    let da: Vec<f64> = g.iter().zip(self.value(*b).values()).map(|(x, y)| x * y).collect();
                    self.accum(*a, da);
                }
                if self.requires(*b) {
                    let db: Vec<f64> = g.iter().zip(self.value(*a).values()).map(|(x, y)| x * y).collect();
                    self.accum(*b, db);
                }
            }
            Op::AddBias(m, bias) => {
                let cols = self.value(*bias).len();
                if self.requires(*m) {
                    self.accum(*m, g.to_vec());
                }
                if self.requires(*bias) {
                    let mut db = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    self.accum(*bias, db);
                }
            }
            Op::ScaleRows(m, col) => {
                let cols = self.value(*m).shape()[1];
                if self.requires(*m) {
                    let cv = self.value(*col).values();
                    let mut dm = Vec::with_capacity(g.len());
                    for (i, row) in g.chunks(cols).enumerate() {
                        dm.extend(row.iter().map(|&x| x * cv[i]));
                    }
                    self.accum(*m, dm);
                }
                if self.requires(*col) {
                    let mv = self.value(*m).values();
                    let dc: Vec<f64> = g
                        .chunks(cols)
                        .zip(mv.chunks(cols))
                        .map(|(gr, mr)| gr.iter().zip(mr).map(|(x, y)| x * y).sum())
                        .collect();
                    self.accum(*col, dc);
                }
            }
            Op::ScaleConst(a, c) => {
                if self.requires(*a) {
                    self.accum(*a, g.iter().map(|x| c * x).collect());
                }
            }
            Op::Relu(a) => {
                if self.requires(*a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a).values())
                        .map(|(&x, &v)| if v > 0.0 { x } else { 0.0 })
                        .collect();
                    self.accum(*a, da);
                }
            }
            Op::Sigmoid(a) => {
                if self.requires(*a) {
                    let out = self.nodes[idx].value.values();
                    let da: Vec<f64> = g.iter().zip(out).map(|(&x, &s)| x * s * (1.0 - s)).collect();
                    self.accum(*a, da);
                }
            }
            Op::Tanh(a) => {
                if self.requires(*a) {
                    let out = self.nodes[idx].value.values();
                    let da: Vec<f64> = g.iter().zip(out).map(|(&x, &t)| x * (1.0 - t * t)).collect();
                    self.accum(*a, da);
                }
            }
            Op::SoftmaxLast(a) => {
                if self.requires(*a) {
                    let y = self.nodes[idx].value.values();
                    let cols = *self.nodes[idx].value.shape().last().unwrap();
                    let mut da = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(cols).zip(y.chunks(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        da.extend(gr.iter().zip(yr).map(|(&gx, &yx)| yx * (gx - dot)));
                    }
                    self.accum(*a, da);
                }
            }
            Op::MeanAxis(a, axis) => {
                if self.requires(*a) {
                    let s = self.value(*a).shape();
                    let (m, n) = (s[0], s[1]);
                    let mut da = vec![0.0; m * n];
                    if *axis == 0 {
                        let inv = 1.0 / m as f64;
                        for i in 0..m {
                            for j in 0..n {
                                da[i * n + j] = g[j] * inv;
                            }
                        }
                    } else {
                        let inv = 1.0 / n as f64;
                        for i in 0..m {
                            for j in 0..n {
                                da[i * n + j] = g[i] * inv;
                            }
                        }
                    }
                    self.accum(*a, da);
                }
            }
            Op::Concat { axis, parts } => {
                let cols = self.nodes[idx].value.shape()[1];
                if *axis == 0 {
                    let mut r0 = 0;
                    for &p in parts {
                        let pr = self.value(p).shape()[0];
                        if self.requires(p) {
                            let dp = g[r0 * cols..(r0 + pr) * cols].to_vec();
                            self.accum(p, dp);
                        }
                        r0 += pr;
                    }
                } else {
                    let rows = self.nodes[idx].value.shape()[0];
                    let mut c0 = 0;
                    for &p in parts {
                        let pw = self.value(p).shape()[1];
                        if self.requires(p) {
                            let mut dp = Vec::with_capacity(rows * pw);
                            for i in 0..rows {
                                dp.extend_from_slice(&g[i * cols + c0..i * cols + c0 + pw]);
                            }
                            self.accum(p, dp);
                        }
                        c0 += pw;
                    }
                }
            }
            Op::SliceCols { a, c0, w } => {
                if self.requires(*a) {
                    let s = self.value(*a).shape();
                    let (rows, cols) = (s[0], s[1]);
                    let mut da = vec![0.0; rows * cols];
                    for i in 0..rows {
                        da[i * cols + c0..i * cols + c0 + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                    }
                    self.accum(*a, da);
                }
            }
            Op::SliceRect3 { a, y0, x0, h, w } => {
                if self.requires(*a) {
                    let s = self.value(*a).shape();
                    let (wid, ch) = (s[1], s[2]);
                    let mut da = vec![0.0; self.value(*a).len()];
                    for dy in 0..*h {
                        let dst0 = ((y0 + dy) * wid + x0) * ch;
                        da[dst0..dst0 + w * ch].copy_from_slice(&g[dy * w * ch..(dy + 1) * w * ch]);
                    }
                    self.accum(*a, da);
                }
            }
            Op::Reshape(a) => {
                if self.requires(*a) {
                    self.accum(*a, g.to_vec());
                }
            }
            Op::OverlayRect3 { base, patch, y0, x0 } => {
                let sb = self.value(*base).shape().to_vec();
                let sp = self.value(*patch).shape().to_vec();
                let (wid, ch) = (sb[1], sb[2]);
                let (ph, pw) = (sp[0], sp[1]);
                if self.requires(*base) {
                    // The window was replaced, so no gradient flows there.
                    let mut db = g.to_vec();
                    for dy in 0..ph {
                        let dst0 = ((y0 + dy) * wid + x0) * ch;
                        db[dst0..dst0 + pw * ch].iter_mut().for_each(|x| *x = 0.0);
                    }
                    self.accum(*base, db);
                }
                if self.requires(*patch) {
                    let mut dp = Vec::with_capacity(ph * pw * ch);
                    for dy in 0..ph {
                        let src0 = ((y0 + dy) * wid + x0) * ch;
                        dp.extend_from_slice(&g[src0..src0 + pw * ch]);
                    }
                    self.accum(*patch, dp);
                }
            }
            Op::EmbeddingMean { table, seqs } => {
                if self.requires(*table) {
                    let emb = self.value(*table).shape()[1];
                    let mut dt = vec![0.0; self.value(*table).len()];
                    for (i, seq) in seqs.iter().enumerate() {
                        let inv = 1.0 / seq.len() as f64;
                        for &t in seq {
                            for e in 0..emb {
                                dt[t * emb + e] += g[i * emb + e] * inv;
                            }
                        }
                    }
                    self.accum(*table, dt);
                }
            }
            Op::CrossEntropy { logits, targets, weights, reduction } => {
                if self.requires(*logits) {
                    let v = self.value(*logits).values();
                    let cols = self.value(*logits).shape()[1];
                    let wsum: f64 = match weights {
                        Some(w) => w.iter().sum(),
                        None => targets.len() as f64,
                    };
                    let gscalar = g[0];
                    let mut da = Vec::with_capacity(v.len());
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &v[i * cols..(i + 1) * cols];
                        let (lse, _) = log_sum_exp(row);
                        let w = weights.as_ref().map_or(1.0, |w| w[i]);
                        let scale = match reduction {
                            Reduction::Mean => gscalar * w / wsum,
                            Reduction::Sum => gscalar * w,
                        };
                        for (j, &x) in row.iter().enumerate() {
                            let p = (x - lse).exp();
                            da.push(scale * (p - if j == t { 1.0 } else { 0.0 }));
                        }
                    }
                    self.accum(*logits, da);
                }
            }
        }
    }
}
