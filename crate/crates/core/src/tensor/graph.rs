//! Computation graph: forward op recording and reverse-mode backward.
//!
//! Nodes are 2-d (rows x cols) values appended in topological order; ids of
//! parents always precede children, so one reverse sweep implements
//! backpropagation. The graph also accumulates a FLOP count per executed op
//! using the conventions in [`crate::flops`].

use crate::error::{Error, Result};
use crate::flops::cost;
use crate::scalar::Scalar;
use crate::tensor::{softmax_unchecked, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<S: Scalar> {
    Leaf,
    /// a[m,k] * b[k,n]
    MatMul(usize, usize),
    /// a[m,k] * b[n,k]^T
    MatMulNT(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    /// matrix [m,n] + row [1,n], broadcast over rows
    AddRow(usize, usize),
    /// x + constant matrix (no gradient into the constant)
    AddConst(usize),
    Scale(usize, S),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: S,
    },
    Gelu(usize),
    Sigmoid(usize),
    /// rows of `table` gathered by index
    Embed {
        table: usize,
        ids: Vec<usize>,
    },
    StackRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    Reshape(usize),
    SumAll(usize),
    /// binary cross entropy over probabilities, summed over unmasked slots
    Bce {
        pr: usize,
        labels: Vec<S>,
        mask: Vec<bool>,
    },
}

struct Node<S: Scalar> {
    rows: usize,
    cols: usize,
    value: Vec<S>,
    grad: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    flops: u64,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// FLOPs executed by forward ops so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    /// Gradient of the last backward target w.r.t. this node.
    /// Empty slice if the node did not require gradients.
    pub fn grad(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].grad
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<S> {
        let n = &self.nodes[id.0];
        if n.rows * n.cols != 1 {
            return Err(Error::NonScalarLoss {
                rows: n.rows,
                cols: n.cols,
            });
        }
        Ok(n.value[0])
    }

    fn push(
        &mut self,
        rows: usize,
        cols: usize,
        value: Vec<S>,
        op: Op<S>,
        requires_grad: bool,
    ) -> NodeId {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            grad: Vec::new(),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn leaf(&mut self, t: &Tensor<S>) -> Result<NodeId> {
        let (rows, cols) = t.dims2()?;
        Ok(self.push(rows, cols, t.data().to_vec(), Op::Leaf, t.requires_grad))
    }

    pub fn leaf_from(&mut self, rows: usize, cols: usize, data: Vec<S>, requires_grad: bool) -> Result<NodeId> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "leaf {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(self.push(rows, cols, data, Op::Leaf, requires_grad))
    }

    pub fn zeros_leaf(&mut self, rows: usize, cols: usize) -> NodeId {
        self.push(rows, cols, vec![S::zero(); rows * cols], Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(Error::ShapeMismatch(format!(
                "matmul: {m}x{ka} * {kb}x{n}"
            )));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_nn(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            m,
            ka,
            n,
            &mut out,
        );
        self.flops += cost::matmul(m, ka, n);
        let rg = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(m, n, out, Op::MatMul(a.0, b.0), rg))
    }

    /// a[m,k] * b[n,k]^T -> [m,n]
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.shape(a);
        let (n, kb) = self.shape(b);
        if ka != kb {
            return Err(Error::ShapeMismatch(format!(
                "matmul_nt: {m}x{ka} * ({n}x{kb})^T"
            )));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_nt(
            &self.nodes[a.0].value,
            &self.nodes[b.0].value,
            m,
            ka,
            n,
            &mut out,
        );
        self.flops += cost::matmul(m, ka, n);
        let rg = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(m, n, out, Op::MatMulNT(a.0, b.0), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::ShapeMismatch(format!("add: {sa:?} vs {sb:?}")));
        }
        let out: Vec<S> = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        self.flops += cost::elementwise(out.len());
        let rg = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(sa.0, sa.1, out, Op::Add(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::ShapeMismatch(format!("mul: {sa:?} vs {sb:?}")));
        }
        let out: Vec<S> = self.nodes[a.0]
            .value
            .iter()
            .zip(self.nodes[b.0].value.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        self.flops += cost::elementwise(out.len());
        let rg = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(sa.0, sa.1, out, Op::Mul(a.0, b.0), rg))
    }

    /// matrix + row vector, broadcast over rows (bias add).
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != n {
            return Err(Error::ShapeMismatch(format!(
                "add_row: {m}x{n} + {rr}x{rc}"
            )));
        }
        let rowv = &self.nodes[row.0].value;
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let base = &self.nodes[a.0].value[r * n..(r + 1) * n];
            for j in 0..n {
                out.push(base[j] + rowv[j]);
            }
        }
        self.flops += cost::elementwise(m * n);
        let rg = self.needs(a.0) || self.needs(row.0);
        Ok(self.push(m, n, out, Op::AddRow(a.0, row.0), rg))
    }

    /// x + fixed constant matrix (attention mask bias).
    pub fn add_const(&mut self, a: NodeId, bias: &[S]) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if bias.len() != m * n {
            return Err(Error::ShapeMismatch(format!(
                "add_const: {m}x{n} + {} values",
                bias.len()
            )));
        }
        let out: Vec<S> = self.nodes[a.0]
            .value
            .iter()
            .zip(bias.iter())
            .map(|(&x, &b)| x + b)
            .collect();
        self.flops += cost::elementwise(m * n);
        let rg = self.needs(a.0);
        Ok(self.push(m, n, out, Op::AddConst(a.0), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let (m, n) = self.shape(a);
        let out: Vec<S> = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        self.flops += cost::elementwise(m * n);
        let rg = self.needs(a.0);
        self.push(m, n, out, Op::Scale(a.0, c), rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = &self.nodes[a.0].value[r * n..(r + 1) * n];
            out.extend(softmax_unchecked(row));
        }
        self.flops += cost::softmax(m, n);
        let rg = self.needs(a.0);
        self.push(m, n, out, Op::SoftmaxRows(a.0), rg)
    }

    /// Per-row layer normalization; gamma and beta are 1xN rows.
    pub fn layer_norm_rows(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: S,
    ) -> Result<NodeId> {
        let (m, n) = self.shape(x);
        if self.shape(gamma) != (1, n) || self.shape(beta) != (1, n) {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm_rows: x {m}x{n}, gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = &self.nodes[x.0].value[r * n..(r + 1) * n];
            let normed = crate::tensor::layer_norm(
                row,
                &self.nodes[gamma.0].value,
                &self.nodes[beta.0].value,
                eps,
            )?;
            out.extend(normed);
        }
        self.flops += cost::layer_norm(m, n);
        let rg = self.needs(x.0) || self.needs(gamma.0) || self.needs(beta.0);
        Ok(self.push(
            m,
            n,
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            rg,
        ))
    }

    /// Exact GELU: x * 0.5 * (1 + erf(x / sqrt(2))).
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let half = S::from_f64(0.5);
        let inv_sqrt2 = S::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let out: Vec<S> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| x * half * (S::one() + (x * inv_sqrt2).erf()))
            .collect();
        self.flops += cost::gelu(m * n);
        let rg = self.needs(a.0);
        self.push(m, n, out, Op::Gelu(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let out: Vec<S> = self.nodes[a.0].value.iter().map(|&x| sigmoid(x)).collect();
        self.flops += cost::sigmoid(m * n);
        let rg = self.needs(a.0);
        self.push(m, n, out, Op::Sigmoid(a.0), rg)
    }

    /// Gather rows of `table` by id.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (vocab, h) = self.shape(table);
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Invalid(format!(
                    "embedding id {id} out of range (table has {vocab} rows)"
                )));
            }
            out.extend_from_slice(&self.nodes[table.0].value[id * h..(id + 1) * h]);
        }
        let rg = self.needs(table.0);
        Ok(self.push(
            ids.len(),
            h,
            out,
            Op::Embed {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Vertical concatenation; all parts must share the column count.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Invalid("stack_rows of no parts".into()));
        }
        let (_, n) = self.shape(parts[0]);
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != n {
                return Err(Error::ShapeMismatch(format!(
                    "stack_rows: column mismatch {pc} vs {n}"
                )));
            }
            rows += pr;
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let rg = parts.iter().any(|p| self.needs(p.0));
        Ok(self.push(
            rows,
            n,
            out,
            Op::StackRows(parts.iter().map(|p| p.0).collect()),
            rg,
        ))
    }

    /// Horizontal concatenation; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat_cols of no parts".into()));
        }
        let (m, _) = self.shape(parts[0]);
        let mut total_cols = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != m {
                return Err(Error::ShapeMismatch(format!(
                    "concat_cols: row mismatch {pr} vs {m}"
                )));
            }
            total_cols += pc;
        }
        let mut out = Vec::with_capacity(m * total_cols);
        for r in 0..m {
            for &p in parts {
                let (_, pc) = self.shape(p);
                out.extend_from_slice(&self.nodes[p.0].value[r * pc..(r + 1) * pc]);
            }
        }
        let rg = parts.iter().any(|p| self.needs(p.0));
        Ok(self.push(
            m,
            total_cols,
            out,
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.shape(x);
        if start + len > m {
            return Err(Error::ShapeMismatch(format!(
                "slice_rows: rows {start}..{} of {m}",
                start + len
            )));
        }
        let out = self.nodes[x.0].value[start * n..(start + len) * n].to_vec();
        let rg = self.needs(x.0);
        Ok(self.push(len, n, out, Op::SliceRows { x: x.0, start, len }, rg))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.shape(x);
        if start + len > n {
            return Err(Error::ShapeMismatch(format!(
                "slice_cols: cols {start}..{} of {n}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&self.nodes[x.0].value[r * n + start..r * n + start + len]);
        }
        let rg = self.needs(x.0);
        Ok(self.push(m, len, out, Op::SliceCols { x: x.0, start, len }, rg))
    }

    /// Same data, new dims (row-major layout preserved).
    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let (m, n) = self.shape(x);
        if m * n != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "reshape: {m}x{n} -> {rows}x{cols}"
            )));
        }
        let out = self.nodes[x.0].value.clone();
        let rg = self.needs(x.0);
        Ok(self.push(rows, cols, out, Op::Reshape(x.0), rg))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let (m, n) = self.shape(x);
        let mut s = S::zero();
        for &v in &self.nodes[x.0].value {
            s += v;
        }
        self.flops += cost::elementwise(m * n);
        let rg = self.needs(x.0);
        self.push(1, 1, vec![s], Op::SumAll(x.0), rg)
    }

    /// Pointwise binary cross entropy summed over unmasked slots.
    ///
    /// Probabilities are clamped into [1e-12, 1 - 1e-12] before the log;
    /// clamped slots get zero gradient. Labels must be exactly 0 or 1.
    pub fn bce(&mut self, pr: NodeId, labels: &[S], mask: &[bool]) -> Result<NodeId> {
        let (m, n) = self.shape(pr);
        if labels.len() != m * n || mask.len() != m * n {
            return Err(Error::ShapeMismatch(format!(
                "bce: pr {m}x{n}, labels {}, mask {}",
                labels.len(),
                mask.len()
            )));
        }
        for &l in labels {
            if l != S::zero() && l != S::one() {
                return Err(Error::InvalidLabel(l.as_f64()));
            }
        }
        let lo = S::from_f64(1e-12);
        let hi = S::one() - lo;
        let mut total = S::zero();
        for i in 0..labels.len() {
            if !mask[i] {
                continue;
            }
            let p = clamp(self.nodes[pr.0].value[i], lo, hi);
            if labels[i] == S::one() {
                total -= p.ln();
            } else {
                total -= (S::one() - p).ln();
            }
        }
        self.flops += cost::bce(mask.iter().filter(|&&m| m).count());
        let rg = self.needs(pr.0);
        Ok(self.push(
            1,
            1,
            vec![total],
            Op::Bce {
                pr: pr.0,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node; fills `grad` on every node that
    /// requires gradients and is reachable from `target`.
    pub fn backward(&mut self, target: NodeId) -> Result<()> {
        let t = &self.nodes[target.0];
        if t.rows * t.cols != 1 {
            return Err(Error::NonScalarLoss {
                rows: t.rows,
                cols: t.cols,
            });
        }

        // mark nodes reachable from the target through requiring parents
        let mut needed = vec![false; self.nodes.len()];
        let mut stack = vec![target.0];
        while let Some(i) = stack.pop() {
            if needed[i] || !self.nodes[i].requires_grad {
                continue;
            }
            needed[i] = true;
            for p in parents(&self.nodes[i].op) {
                stack.push(p);
            }
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if needed[i] {
                node.grad = vec![S::zero(); node.rows * node.cols];
            } else {
                node.grad = Vec::new();
            }
        }
        if !needed[target.0] {
            return Ok(()); // target depends on no trainable input
        }
        self.nodes[target.0].grad[0] = S::one();

        for i in (0..self.nodes.len()).rev() {
            if !needed[i] {
                continue;
            }
            self.backward_node(i)?;
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize) -> Result<()> {
        // Take the output grad out to satisfy the borrow checker; the node's
        // own grad is never written by its own backward rule.
        let gout = std::mem::take(&mut self.nodes[i].grad);
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a].rows, self.nodes[a].cols);
                let n = self.nodes[b].cols;
                if self.nodes[a].requires_grad {
                    let bval = std::mem::take(&mut self.nodes[b].value);
                    // dA += dC * B^T
                    matmul_nt(&gout, &bval, m, n, k, grad_mut(&mut self.nodes[a]));
                    self.nodes[b].value = bval;
                }
                if self.nodes[b].requires_grad {
                    let aval = std::mem::take(&mut self.nodes[a].value);
                    // dB += A^T * dC
                    matmul_tn(&aval, &gout, m, k, n, grad_mut(&mut self.nodes[b]));
                    self.nodes[a].value = aval;
                }
            }
            Op::MatMulNT(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.nodes[a].rows, self.nodes[a].cols);
                let n = self.nodes[b].rows;
                if self.nodes[a].requires_grad {
                    let bval = std::mem::take(&mut self.nodes[b].value);
                    // dA += dC * B
                    matmul_nn(&gout, &bval, m, n, k, grad_mut(&mut self.nodes[a]));
                    self.nodes[b].value = bval;
                }
                if self.nodes[b].requires_grad {
                    let aval = std::mem::take(&mut self.nodes[a].value);
                    // dB += dC^T * A
                    matmul_tn(&gout, &aval, m, n, k, grad_mut(&mut self.nodes[b]));
                    self.nodes[a].value = aval;
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a].requires_grad {
                    axpy(grad_mut(&mut self.nodes[a]), &gout, S::one());
                }
                if self.nodes[b].requires_grad {
                    axpy(grad_mut(&mut self.nodes[b]), &gout, S::one());
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a].requires_grad {
                    let bval = std::mem::take(&mut self.nodes[b].value);
                    let ga = grad_mut(&mut self.nodes[a]);
                    for j in 0..gout.len() {
                        ga[j] += gout[j] * bval[j];
                    }
                    self.nodes[b].value = bval;
                }
                if self.nodes[b].requires_grad {
                    let aval = std::mem::take(&mut self.nodes[a].value);
                    let gb = grad_mut(&mut self.nodes[b]);
                    for j in 0..gout.len() {
                        gb[j] += gout[j] * aval[j];
                    }
                    self.nodes[a].value = aval;
                }
            }
            Op::AddRow(a, row) => {
                let (a, row) = (*a, *row);
                let n = self.nodes[row].cols;
                if self.nodes[a].requires_grad {
                    axpy(grad_mut(&mut self.nodes[a]), &gout, S::one());
                }
                if self.nodes[row].requires_grad {
                    let g = grad_mut(&mut self.nodes[row]);
                    for (j, &go) in gout.iter().enumerate() {
                        g[j % n] += go;
                    }
                }
            }
            Op::AddConst(a) => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    axpy(grad_mut(&mut self.nodes[a]), &gout, S::one());
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                if self.nodes[a].requires_grad {
                    axpy(grad_mut(&mut self.nodes[a]), &gout, c);
                }
            }
            Op::SoftmaxRows(a) => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    let (m, n) = (self.nodes[i].rows, self.nodes[i].cols);
                    let y = std::mem::take(&mut self.nodes[i].value);
                    let ga = grad_mut(&mut self.nodes[a]);
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &gout[r * n..(r + 1) * n];
                        let mut dot = S::zero();
                        for j in 0..n {
                            dot += yr[j] * gr[j];
                        }
                        for j in 0..n {
                            ga[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                    self.nodes[i].value = y;
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let (m, n) = (self.nodes[x].rows, self.nodes[x].cols);
                let nf = S::from_f64(n as f64);
                let xval = std::mem::take(&mut self.nodes[x].value);
                let gval = std::mem::take(&mut self.nodes[gamma].value);
                for r in 0..m {
                    let xr = &xval[r * n..(r + 1) * n];
                    let gr = &gout[r * n..(r + 1) * n];
                    let mut mean = S::zero();
                    for &v in xr {
                        mean += v;
                    }
                    mean = mean / nf;
                    let mut var = S::zero();
                    for &v in xr {
                        let d = v - mean;
                        var += d * d;
                    }
                    var = var / nf;
                    let denom = (var + eps).sqrt();
                    // xhat_j = (x_j - mean)/denom
                    let xhat: Vec<S> = xr.iter().map(|&v| (v - mean) / denom).collect();
                    if self.nodes[gamma].requires_grad {
                        let gg = grad_mut(&mut self.nodes[gamma]);
                        for j in 0..n {
                            gg[j] += gr[j] * xhat[j];
                        }
                    }
                    if self.nodes[beta].requires_grad {
                        let gb = grad_mut(&mut self.nodes[beta]);
                        for j in 0..n {
                            gb[j] += gr[j];
                        }
                    }
                    if self.nodes[x].requires_grad {
                        // dxhat = dy .* gamma
                        let dxhat: Vec<S> =
                            (0..n).map(|j| gr[j] * gval[j]).collect();
                        let mut mean_dxhat = S::zero();
                        let mut mean_dxhat_xhat = S::zero();
                        for j in 0..n {
                            mean_dxhat += dxhat[j];
                            mean_dxhat_xhat += dxhat[j] * xhat[j];
                        }
                        mean_dxhat = mean_dxhat / nf;
                        mean_dxhat_xhat = mean_dxhat_xhat / nf;
                        let gx = grad_mut(&mut self.nodes[x]);
                        for j in 0..n {
                            gx[r * n + j] +=
                                (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat) / denom;
                        }
                    }
                }
                self.nodes[x].value = xval;
                self.nodes[gamma].value = gval;
            }
            Op::Gelu(a) => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    let half = S::from_f64(0.5);
                    let inv_sqrt2 = S::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt_2pi =
                        S::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                    let xval = std::mem::take(&mut self.nodes[a].value);
                    let ga = grad_mut(&mut self.nodes[a]);
                    for j in 0..gout.len() {
                        let x = xval[j];
                        let phi_big = half * (S::one() + (x * inv_sqrt2).erf());
                        let phi_small = (-(x * x) * half).exp() * inv_sqrt_2pi;
                        ga[j] += gout[j] * (phi_big + x * phi_small);
                    }
                    self.nodes[a].value = xval;
                }
            }
            Op::Sigmoid(a) => {
                let a = *a;
                if self.nodes[a].requires_grad {
                    let y = std::mem::take(&mut self.nodes[i].value);
                    let ga = grad_mut(&mut self.nodes[a]);
                    for j in 0..gout.len() {
                        ga[j] += gout[j] * y[j] * (S::one() - y[j]);
                    }
                    self.nodes[i].value = y;
                }
            }
            Op::Embed { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                if self.nodes[table].requires_grad {
                    let h = self.nodes[table].cols;
                    let gt = grad_mut(&mut self.nodes[table]);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..h {
                            gt[id * h + j] += gout[r * h + j];
                        }
                    }
                }
            }
            Op::StackRows(parts) => {
                let parts = parts.clone();
                let n = self.nodes[i].cols;
                let mut offset = 0;
                for p in parts {
                    let pr = self.nodes[p].rows;
                    if self.nodes[p].requires_grad {
                        let gp = grad_mut(&mut self.nodes[p]);
                        for j in 0..pr * n {
                            gp[j] += gout[offset * n + j];
                        }
                    }
                    offset += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let m = self.nodes[i].rows;
                let total = self.nodes[i].cols;
                let mut offset = 0;
                for p in parts {
                    let pc = self.nodes[p].cols;
                    if self.nodes[p].requires_grad {
                        let gp = grad_mut(&mut self.nodes[p]);
                        for r in 0..m {
                            for j in 0..pc {
                                gp[r * pc + j] += gout[r * total + offset + j];
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::SliceRows { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                if self.nodes[x].requires_grad {
                    let n = self.nodes[x].cols;
                    let gx = grad_mut(&mut self.nodes[x]);
                    for j in 0..len * n {
                        gx[start * n + j] += gout[j];
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                if self.nodes[x].requires_grad {
                    let m = self.nodes[i].rows;
                    let n = self.nodes[x].cols;
                    let gx = grad_mut(&mut self.nodes[x]);
                    for r in 0..m {
                        for j in 0..len {
                            gx[r * n + start + j] += gout[r * len + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    axpy(grad_mut(&mut self.nodes[x]), &gout, S::one());
                }
            }
            Op::SumAll(x) => {
                let x = *x;
                if self.nodes[x].requires_grad {
                    let g = gout[0];
                    let gx = grad_mut(&mut self.nodes[x]);
                    for v in gx.iter_mut() {
                        *v += g;
                    }
                }
            }
            Op::Bce { pr, labels, mask } => {
                let pr = *pr;
                let labels = labels.clone();
                let mask = mask.clone();
                if self.nodes[pr].requires_grad {
                    let lo = S::from_f64(1e-12);
                    let hi = S::one() - lo;
                    let g = gout[0];
                    let pval = std::mem::take(&mut self.nodes[pr].value);
                    let gp = grad_mut(&mut self.nodes[pr]);
                    for j in 0..labels.len() {
                        if !mask[j] {
                            continue;
                        }
                        let p = pval[j];
                        if p <= lo || p >= hi {
                            continue; // clamped region: locally constant
                        }
                        let d = if labels[j] == S::one() {
                            -(S::one() / p)
                        } else {
                            S::one() / (S::one() - p)
                        };
                        gp[j] += g * d;
                    }
                    self.nodes[pr].value = pval;
                }
            }
        }
        self.nodes[i].grad = gout;
        Ok(())
    }
}

fn grad_mut<S: Scalar>(node: &mut Node<S>) -> &mut [S] {
    debug_assert!(!node.grad.is_empty());
    &mut node.grad
}

fn parents<S: Scalar>(op: &Op<S>) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::MatMulNT(a, b)
        | Op::Add(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b) => vec![*a, *b],
        Op::AddConst(a)
        | Op::Scale(a, _)
        | Op::SoftmaxRows(a)
        | Op::Gelu(a)
        | Op::Sigmoid(a)
        | Op::Reshape(a)
        | Op::SumAll(a) => vec![*a],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Embed { table, .. } => vec![*table],
        Op::StackRows(parts) | Op::ConcatCols(parts) => parts.clone(),
        Op::SliceRows { x, .. } | Op::SliceCols { x, .. } => vec![*x],
        Op::Bce { pr, .. } => vec![*pr],
    }
}

#[inline]
fn clamp<S: Scalar>(x: S, lo: S, hi: S) -> S {
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn axpy<S: Scalar>(out: &mut [S], x: &[S], a: S) {
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o += v * a;
    }
}

/// out += a[m,k] * b[k,n]
fn matmul_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out += a[m,k] * b[n,k]^T
fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut dot = S::zero();
            for p in 0..k {
                dot += arow[p] * brow[p];
            }
            out[i * n + j] += dot;
        }
    }
}

/// out += a[m,k]^T * b[m,n]  (out is k x n)
fn matmul_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}
