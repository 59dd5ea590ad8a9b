//! Reverse-mode differentiation over a linear tape.
//!
//! Forward calls record one node per operation; nodes are created in
//! topological order, so one reverse sweep propagates gradients with each
//! node visited exactly once. The primitive set is fixed to what the two
//! models need; there is no general broadcasting.

use std::collections::HashMap;

use super::error::AutodiffError;
use super::interp::{area_weights, linear_weights, InterpWeights};
use super::kernels;
use super::tensor::{ParamId, ParamStore, Tensor};

pub type NodeId = usize;

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    /// x: R x C plus a length-C vector broadcast over rows.
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    MatmulNN(NodeId, NodeId),
    /// a: m x k times b: n x k transposed.
    MatmulNT(NodeId, NodeId),
    Conv1d {
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        kernel: usize,
    },
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    LayerNormPlain(NodeId),
    Gather {
        table: NodeId,
        indices: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        reduction: Reduction,
    },
    Interp {
        x: NodeId,
        weights: usize,
    },
    StraightThrough {
        z: NodeId,
        /// Recorded for completeness; no gradient flows through it.
        #[allow(dead_code)]
        q: NodeId,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    Gelu(NodeId),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    ConcatRows(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
}

fn rows_of(shape: &[usize]) -> usize {
    if shape.is_empty() {
        1
    } else {
        shape[..shape.len() - 1].iter().product::<usize>().max(1)
    }
}

fn cols_of(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

pub struct Tape {
    ops: Vec<Op>,
    shapes: Vec<Vec<usize>>,
    vals: Vec<Vec<f32>>,
    needs: Vec<bool>,
    grads: Vec<Option<Vec<f32>>>,
    param_nodes: Vec<(NodeId, ParamId)>,
    param_dedupe: HashMap<ParamId, NodeId>,
    interp_cache: Vec<InterpWeights>,
    interp_keys: HashMap<(usize, usize, bool), usize>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            shapes: Vec::new(),
            vals: Vec::new(),
            needs: Vec::new(),
            grads: Vec::new(),
            param_nodes: Vec::new(),
            param_dedupe: HashMap::new(),
            interp_cache: Vec::new(),
            interp_keys: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; backward is a no-op target.
    pub fn no_grad() -> Self {
        let mut t = Self::new();
        t.grad_enabled = false;
        t
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, vals: Vec<f32>, needs: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>().max(1), vals.len().max(1));
        self.ops.push(op);
        self.shapes.push(shape);
        self.vals.push(vals);
        self.needs.push(needs && self.grad_enabled);
        self.grads.push(None);
        self.ops.len() - 1
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f32] {
        &self.vals[id]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.shapes[id]
    }

    pub fn scalar_value(&self, id: NodeId) -> f32 {
        assert_eq!(self.vals[id].len(), 1, "node {id} is not scalar");
        self.vals[id][0]
    }

    /// Gradient accumulated at a node by the latest backward pass.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads[id].as_deref()
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<f32>, requires_grad: bool) -> NodeId {
        assert_eq!(shape.iter().product::<usize>(), values.len());
        self.push(Op::Leaf, shape, values, requires_grad)
    }

    pub fn leaf_tensor(&mut self, t: &Tensor) -> NodeId {
        self.push(
            Op::Leaf,
            t.shape.clone(),
            t.values.clone(),
            t.requires_grad,
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f32>) -> NodeId {
        self.leaf(shape, values, false)
    }

    pub fn scalar(&mut self, v: f32) -> NodeId {
        self.push(Op::Leaf, vec![], vec![v], false)
    }

    /// Register a parameter leaf; values are snapshotted from the store.
    /// Repeat registrations of the same parameter reuse the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_dedupe.get(&id) {
            return node;
        }
        let p = store.get(id);
        let node = self.push(
            Op::Leaf,
            p.tensor.shape.clone(),
            p.tensor.values.clone(),
            true,
        );
        if self.grad_enabled {
            self.param_nodes.push((node, id));
        }
        self.param_dedupe.insert(id, node);
        node
    }

    /// Stop-gradient: a fresh constant leaf holding a copy of the values.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let shape = self.shapes[x].clone();
        let vals = self.vals[x].clone();
        self.push(Op::Leaf, shape, vals, false)
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, op_name: &str) {
        assert_eq!(
            self.shapes[a], self.shapes[b],
            "{op_name}: shape mismatch {:?} vs {:?}",
            self.shapes[a], self.shapes[b]
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "add");
        let vals = self.vals[a]
            .iter()
            .zip(self.vals[b].iter())
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs[a] || self.needs[b];
        self.push(Op::Add(a, b), self.shapes[a].clone(), vals, needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "sub");
        let vals = self.vals[a]
            .iter()
            .zip(self.vals[b].iter())
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs[a] || self.needs[b];
        self.push(Op::Sub(a, b), self.shapes[a].clone(), vals, needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, "mul");
        let vals = self.vals[a]
            .iter()
            .zip(self.vals[b].iter())
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs[a] || self.needs[b];
        self.push(Op::Mul(a, b), self.shapes[a].clone(), vals, needs)
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let vals = self.vals[a].iter().map(|x| x * c).collect();
        let needs = self.needs[a];
        self.push(Op::Scale(a, c), self.shapes[a].clone(), vals, needs)
    }

    pub fn add_row(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let cols = cols_of(&self.shapes[x]);
        assert_eq!(self.vals[v].len(), cols, "add_row: vector length mismatch");
        let rows = rows_of(&self.shapes[x]);
        let mut vals = self.vals[x].clone();
        for r in 0..rows {
            for (o, &b) in vals[r * cols..(r + 1) * cols].iter_mut().zip(&self.vals[v]) {
                *o += b;
            }
        }
        let needs = self.needs[x] || self.needs[v];
        self.push(Op::AddRow(x, v), self.shapes[x].clone(), vals, needs)
    }

    pub fn mul_row(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let cols = cols_of(&self.shapes[x]);
        assert_eq!(self.vals[v].len(), cols, "mul_row: vector length mismatch");
        let rows = rows_of(&self.shapes[x]);
        let mut vals = self.vals[x].clone();
        for r in 0..rows {
            for (o, &b) in vals[r * cols..(r + 1) * cols].iter_mut().zip(&self.vals[v]) {
                *o *= b;
            }
        }
        let needs = self.needs[x] || self.needs[v];
        self.push(Op::MulRow(x, v), self.shapes[x].clone(), vals, needs)
    }

    // ── Linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = (rows_of(&self.shapes[a]), cols_of(&self.shapes[a]));
        let (k2, n) = (rows_of(&self.shapes[b]), cols_of(&self.shapes[b]));
        assert_eq!(k, k2, "matmul: inner dimensions {k} vs {k2}");
        let mut vals = vec![0.0; m * n];
        kernels::matmul_nn(&self.vals[a], &self.vals[b], &mut vals, m, k, n);
        let needs = self.needs[a] || self.needs[b];
        self.push(Op::MatmulNN(a, b), vec![m, n], vals, needs)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = (rows_of(&self.shapes[a]), cols_of(&self.shapes[a]));
        let (n, k2) = (rows_of(&self.shapes[b]), cols_of(&self.shapes[b]));
        assert_eq!(k, k2, "matmul_nt: inner dimensions {k} vs {k2}");
        let mut vals = vec![0.0; m * n];
        kernels::matmul_nt(&self.vals[a], &self.vals[b], &mut vals, m, k, n);
        let needs = self.needs[a] || self.needs[b];
        self.push(Op::MatmulNT(a, b), vec![m, n], vals, needs)
    }

    /// 1-D convolution over time with zero 'same' padding. x: T x C_in,
    /// w: C_out x C_in x K (K odd), bias: C_out.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, bias: NodeId, kernel: usize) -> NodeId {
        assert!(kernel % 2 == 1, "conv1d kernel must be odd");
        let t = rows_of(&self.shapes[x]);
        let c_in = cols_of(&self.shapes[x]);
        let wshape = self.shapes[w].clone();
        assert_eq!(wshape.len(), 3, "conv1d weight must be C_out x C_in x K");
        let (c_out, w_cin, k) = (wshape[0], wshape[1], wshape[2]);
        assert_eq!(w_cin, c_in, "conv1d: channel mismatch");
        assert_eq!(k, kernel);
        assert_eq!(self.vals[bias].len(), c_out);

        let mut vals = vec![0.0f32; t * c_out];
        for r in 0..t {
            vals[r * c_out..(r + 1) * c_out].copy_from_slice(&self.vals[bias]);
        }
        let pad = kernel / 2;
        for j in 0..kernel {
            let wj = extract_kernel_slice(&self.vals[w], c_out, c_in, kernel, j);
            let (t_lo, t_hi) = conv_row_range(t, j, pad);
            if t_lo >= t_hi {
                continue;
            }
            let s_lo = (t_lo + j) - pad;
            let x_slice = &self.vals[x][s_lo * c_in..(s_lo + (t_hi - t_lo)) * c_in];
            kernels::matmul_nt(
                x_slice,
                &wj,
                &mut vals[t_lo * c_out..t_hi * c_out],
                t_hi - t_lo,
                c_in,
                c_out,
            );
        }
        let needs = self.needs[x] || self.needs[w] || self.needs[bias];
        self.push(
            Op::Conv1d {
                x,
                w,
                bias,
                kernel,
            },
            vec![t, c_out],
            vals,
            needs,
        )
    }

    // ── Nonlinearities ───────────────────────────────────────────────

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let rows = rows_of(&self.shapes[x]);
        let cols = cols_of(&self.shapes[x]);
        let mut vals = vec![0.0; rows * cols];
        for r in 0..rows {
            kernels::softmax_row(
                &self.vals[x][r * cols..(r + 1) * cols],
                &mut vals[r * cols..(r + 1) * cols],
            );
        }
        let needs = self.needs[x];
        self.push(Op::SoftmaxRows(x), self.shapes[x].clone(), vals, needs)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let cols = cols_of(&self.shapes[x]);
        assert_eq!(self.vals[gain].len(), cols);
        assert_eq!(self.vals[bias].len(), cols);
        let vals = self.layer_norm_values(x, Some((gain, bias)));
        let needs = self.needs[x] || self.needs[gain] || self.needs[bias];
        self.push(
            Op::LayerNorm { x, gain, bias },
            self.shapes[x].clone(),
            vals,
            needs,
        )
    }

    pub fn layer_norm_plain(&mut self, x: NodeId) -> NodeId {
        let vals = self.layer_norm_values(x, None);
        let needs = self.needs[x];
        self.push(Op::LayerNormPlain(x), self.shapes[x].clone(), vals, needs)
    }

    fn layer_norm_values(&self, x: NodeId, affine: Option<(NodeId, NodeId)>) -> Vec<f32> {
        let rows = rows_of(&self.shapes[x]);
        let cols = cols_of(&self.shapes[x]);
        let mut vals = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &self.vals[x][r * cols..(r + 1) * cols];
            let (mean, var) = kernels::row_mean_var(row);
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let out = &mut vals[r * cols..(r + 1) * cols];
            match affine {
                Some((g, b)) => {
                    for c in 0..cols {
                        out[c] = (row[c] - mean) * inv * self.vals[g][c] + self.vals[b][c];
                    }
                }
                None => {
                    for c in 0..cols {
                        out[c] = (row[c] - mean) * inv;
                    }
                }
            }
        }
        vals
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let vals = self.vals[x].iter().map(|&v| kernels::gelu(v)).collect();
        let needs = self.needs[x];
        self.push(Op::Gelu(x), self.shapes[x].clone(), vals, needs)
    }

    // ── Lookup / loss ────────────────────────────────────────────────

    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let n = rows_of(&self.shapes[table]);
        let d = cols_of(&self.shapes[table]);
        let mut vals = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            assert!(i < n, "gather index {i} out of range for table with {n} rows");
            vals.extend_from_slice(&self.vals[table][i * d..(i + 1) * d]);
        }
        let needs = self.needs[table];
        self.push(
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            vec![indices.len(), d],
            vals,
            needs,
        )
    }

    /// Cross-entropy of row-wise logits against integer targets; stable
    /// log-sum-exp with f64 accumulation.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        reduction: Reduction,
    ) -> NodeId {
        let rows = rows_of(&self.shapes[logits]);
        let cols = cols_of(&self.shapes[logits]);
        assert_eq!(targets.len(), rows, "cross_entropy: target count mismatch");
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < cols, "cross_entropy: target {t} out of range");
            let row = &self.vals[logits][r * cols..(r + 1) * cols];
            let lse = kernels::log_sum_exp(row);
            total += (lse - row[t]) as f64;
        }
        if reduction == Reduction::Mean {
            total /= rows as f64;
        }
        let needs = self.needs[logits];
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                reduction,
            },
            vec![],
            vec![total as f32],
            needs,
        )
    }

    // ── Resampling ───────────────────────────────────────────────────

    fn interp_weights_id(&mut self, in_len: usize, out_len: usize, area: bool) -> usize {
        if let Some(&i) = self.interp_keys.get(&(in_len, out_len, area)) {
            return i;
        }
        let w = if area {
            area_weights(in_len, out_len)
        } else {
            linear_weights(in_len, out_len)
        };
        self.interp_cache.push(w);
        let i = self.interp_cache.len() - 1;
        self.interp_keys.insert((in_len, out_len, area), i);
        i
    }

    /// Overlap-averaging temporal downsampling of a T x d sequence.
    pub fn area_interpolate(&mut self, x: NodeId, target_len: usize) -> Result<NodeId, AutodiffError> {
        if target_len == 0 {
            return Err(AutodiffError::ZeroTargetLen);
        }
        let t = rows_of(&self.shapes[x]);
        let d = cols_of(&self.shapes[x]);
        assert!(target_len <= t, "area_interpolate is the downsampling direction");
        let wid = self.interp_weights_id(t, target_len, true);
        let vals = self.interp_cache[wid].apply(&self.vals[x], d);
        let needs = self.needs[x];
        Ok(self.push(Op::Interp { x, weights: wid }, vec![target_len, d], vals, needs))
    }

    /// Piecewise-linear temporal upsampling of a T' x d sequence.
    pub fn linear_upsample(&mut self, x: NodeId, target_len: usize) -> Result<NodeId, AutodiffError> {
        if target_len == 0 {
            return Err(AutodiffError::ZeroTargetLen);
        }
        let t = rows_of(&self.shapes[x]);
        let d = cols_of(&self.shapes[x]);
        assert!(target_len >= t, "linear_upsample is the upsampling direction");
        let wid = self.interp_weights_id(t, target_len, false);
        let vals = self.interp_cache[wid].apply(&self.vals[x], d);
        let needs = self.needs[x];
        Ok(self.push(Op::Interp { x, weights: wid }, vec![target_len, d], vals, needs))
    }

    /// Forward takes the value of `q`; the gradient passes to `z` with an
    /// identity Jacobian and never reaches `q` through this node.
    pub fn straight_through(&mut self, z: NodeId, q: NodeId) -> NodeId {
        self.binary_same_shape(z, q, "straight_through");
        let vals = self.vals[q].clone();
        let needs = self.needs[z];
        self.push(Op::StraightThrough { z, q }, self.shapes[z].clone(), vals, needs)
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.vals[x].iter().map(|&v| v as f64).sum();
        let needs = self.needs[x];
        self.push(Op::SumAll(x), vec![], vec![s as f32], needs)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.vals[x].len().max(1);
        let s: f64 = self.vals[x].iter().map(|&v| v as f64).sum();
        let needs = self.needs[x];
        self.push(Op::MeanAll(x), vec![], vec![(s / n as f64) as f32], needs)
    }

    /// Mean of squared elements, the building block for the commitment and
    /// quantization terms.
    pub fn mean_sq(&mut self, x: NodeId) -> NodeId {
        let sq = self.mul(x, x);
        self.mean_all(sq)
    }

    // ── Slicing / stacking ───────────────────────────────────────────

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let rows = rows_of(&self.shapes[x]);
        let cols = cols_of(&self.shapes[x]);
        assert!(start + len <= rows, "slice_rows out of range");
        let vals = self.vals[x][start * cols..(start + len) * cols].to_vec();
        let needs = self.needs[x];
        self.push(Op::SliceRows { x, start }, vec![len, cols], vals, needs)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = cols_of(&self.shapes[parts[0]]);
        let mut vals = Vec::new();
        let mut total = 0;
        for &p in parts {
            assert_eq!(cols_of(&self.shapes[p]), cols, "concat_rows: column mismatch");
            total += rows_of(&self.shapes[p]);
            vals.extend_from_slice(&self.vals[p]);
        }
        let needs = parts.iter().any(|&p| self.needs[p]);
        self.push(Op::ConcatRows(parts.to_vec()), vec![total, cols], vals, needs)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let rows = rows_of(&self.shapes[x]);
        let cols = cols_of(&self.shapes[x]);
        assert!(start + len <= cols, "slice_cols out of range");
        let mut vals = Vec::with_capacity(rows * len);
        for r in 0..rows {
            vals.extend_from_slice(&self.vals[x][r * cols + start..r * cols + start + len]);
        }
        let needs = self.needs[x];
        self.push(Op::SliceCols { x, start }, vec![rows, len], vals, needs)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = rows_of(&self.shapes[parts[0]]);
        let widths: Vec<usize> = parts.iter().map(|&p| cols_of(&self.shapes[p])).collect();
        let total: usize = widths.iter().sum();
        let mut vals = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(widths.iter()) {
            assert_eq!(rows_of(&self.shapes[p]), rows, "concat_cols: row mismatch");
            for r in 0..rows {
                vals[r * total + off..r * total + off + w]
                    .copy_from_slice(&self.vals[p][r * w..(r + 1) * w]);
            }
            off += w;
        }
        let needs = parts.iter().any(|&p| self.needs[p]);
        self.push(Op::ConcatCols(parts.to_vec()), vec![rows, total], vals, needs)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Node gradients from a previous
    /// sweep on this tape are reset first, so repeated calls replay
    /// identically; accumulation across calls happens at the parameter
    /// store level via [`Tape::export_param_grads`].
    pub fn backward(&mut self, loss: NodeId) -> Result<(), AutodiffError> {
        if loss >= self.ops.len() {
            return Err(AutodiffError::NotOnTape(loss));
        }
        if self.vals[loss].len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.shapes[loss].clone()));
        }
        let v = self.vals[loss][0];
        if !v.is_finite() {
            return Err(AutodiffError::NonFinite {
                context: "loss".into(),
                value: v,
            });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            if self.grads[id].is_none() || !self.needs[id] {
                continue;
            }
            let g = self.grads[id].take().expect("checked above");
            self.backprop_node(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    /// Deposit parameter-leaf gradients into the store (accumulating).
    pub fn export_param_grads(&self, store: &mut ParamStore) {
        for &(node, pid) in &self.param_nodes {
            if let Some(g) = &self.grads[node] {
                store.accumulate_grad(pid, g);
            }
        }
    }

    /// Move parameter gradients out of the tape, e.g. to merge per-sample
    /// contributions in a fixed order after parallel backward passes.
    pub fn take_param_grads(&mut self) -> Vec<(ParamId, Vec<f32>)> {
        let mut out = Vec::with_capacity(self.param_nodes.len());
        for &(node, pid) in &self.param_nodes {
            if let Some(g) = self.grads[node].take() {
                out.push((pid, g));
            }
        }
        out
    }

    fn add_to_grad(&mut self, id: NodeId, contribution: &[f32]) {
        if !self.needs[id] {
            return;
        }
        let buf = self.grads[id].get_or_insert_with(|| vec![0.0; self.vals[id].len()]);
        debug_assert_eq!(buf.len(), contribution.len());
        for (a, b) in buf.iter_mut().zip(contribution.iter()) {
            *a += b;
        }
    }

    fn add_to_grad_with<F>(&mut self, id: NodeId, f: F)
    where
        F: FnOnce(&mut [f32]),
    {
        if !self.needs[id] {
            return;
        }
        let n = self.vals[id].len();
        let buf = self.grads[id].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }

    fn backprop_node(&mut self, id: NodeId, g: &[f32]) {
        let op = self.ops[id].clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_to_grad(a, g);
                self.add_to_grad(b, g);
            }
            Op::Sub(a, b) => {
                self.add_to_grad(a, g);
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                self.add_to_grad(b, &neg);
            }
            Op::Mul(a, b) => {
                if self.needs[a] {
                    let da: Vec<f32> = g
                        .iter()
                        .zip(self.vals[b].iter())
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    self.add_to_grad(a, &da);
                }
                if self.needs[b] {
                    let db: Vec<f32> = g
                        .iter()
                        .zip(self.vals[a].iter())
                        .map(|(gv, av)| gv * av)
                        .collect();
                    self.add_to_grad(b, &db);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f32> = g.iter().map(|v| v * c).collect();
                self.add_to_grad(a, &da);
            }
            Op::AddRow(x, v) => {
                self.add_to_grad(x, g);
                if self.needs[v] {
                    let cols = self.vals[v].len();
                    let rows = g.len() / cols;
                    let mut dv = vec![0.0f64; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dv[c] += g[r * cols + c] as f64;
                        }
                    }
                    let dv: Vec<f32> = dv.into_iter().map(|v| v as f32).collect();
                    self.add_to_grad(v, &dv);
                }
            }
            Op::MulRow(x, v) => {
                let cols = self.vals[v].len();
                let rows = g.len() / cols;
                if self.needs[x] {
                    let mut dx = vec![0.0f32; g.len()];
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] = g[r * cols + c] * self.vals[v][c];
                        }
                    }
                    self.add_to_grad(x, &dx);
                }
                if self.needs[v] {
                    let mut dv = vec![0.0f64; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dv[c] += (g[r * cols + c] * self.vals[x][r * cols + c]) as f64;
                        }
                    }
                    let dv: Vec<f32> = dv.into_iter().map(|v| v as f32).collect();
                    self.add_to_grad(v, &dv);
                }
            }
            Op::MatmulNN(a, b) => {
                let m = rows_of(&self.shapes[a]);
                let k = cols_of(&self.shapes[a]);
                let n = cols_of(&self.shapes[b]);
                if self.needs[a] {
                    // dA = g @ B^T
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(g, &self.vals[b], &mut da, m, n, k);
                    self.add_to_grad(a, &da);
                }
                if self.needs[b] {
                    // dB = A^T @ g
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn(&self.vals[a], g, &mut db, m, k, n);
                    self.add_to_grad(b, &db);
                }
            }
            Op::MatmulNT(a, b) => {
                let m = rows_of(&self.shapes[a]);
                let k = cols_of(&self.shapes[a]);
                let n = rows_of(&self.shapes[b]);
                if self.needs[a] {
                    // dA = g @ B
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nn(g, &self.vals[b], &mut da, m, n, k);
                    self.add_to_grad(a, &da);
                }
                if self.needs[b] {
                    // dB = g^T @ A
                    let mut db = vec![0.0; n * k];
                    kernels::matmul_tn(g, &self.vals[a], &mut db, m, n, k);
                    self.add_to_grad(b, &db);
                }
            }
            Op::Conv1d { x, w, bias, kernel } => {
                let t = rows_of(&self.shapes[x]);
                let c_in = cols_of(&self.shapes[x]);
                let c_out = self.shapes[w][0];
                let pad = kernel / 2;
                if self.needs[bias] {
                    let mut db = vec![0.0f64; c_out];
                    for r in 0..t {
                        for o in 0..c_out {
                            db[o] += g[r * c_out + o] as f64;
                        }
                    }
                    let db: Vec<f32> = db.into_iter().map(|v| v as f32).collect();
                    self.add_to_grad(bias, &db);
                }
                if self.needs[x] {
                    let mut dx = vec![0.0f32; t * c_in];
                    for j in 0..kernel {
                        let wj = extract_kernel_slice(&self.vals[w], c_out, c_in, kernel, j);
                        let (t_lo, t_hi) = conv_row_range(t, j, pad);
                        if t_lo >= t_hi {
                            continue;
                        }
                        let s_lo = (t_lo + j) - pad;
                        kernels::matmul_nn(
                            &g[t_lo * c_out..t_hi * c_out],
                            &wj,
                            &mut dx[s_lo * c_in..(s_lo + (t_hi - t_lo)) * c_in],
                            t_hi - t_lo,
                            c_out,
                            c_in,
                        );
                    }
                    self.add_to_grad(x, &dx);
                }
                if self.needs[w] {
                    let mut dw = vec![0.0f32; c_out * c_in * kernel];
                    for j in 0..kernel {
                        let (t_lo, t_hi) = conv_row_range(t, j, pad);
                        if t_lo >= t_hi {
                            continue;
                        }
                        let s_lo = (t_lo + j) - pad;
                        let mut dwj = vec![0.0f32; c_out * c_in];
                        kernels::matmul_tn(
                            &g[t_lo * c_out..t_hi * c_out],
                            &self.vals[x][s_lo * c_in..(s_lo + (t_hi - t_lo)) * c_in],
                            &mut dwj,
                            t_hi - t_lo,
                            c_out,
                            c_in,
                        );
                        for o in 0..c_out {
                            for i in 0..c_in {
                                dw[o * c_in * kernel + i * kernel + j] += dwj[o * c_in + i];
                            }
                        }
                    }
                    self.add_to_grad(w, &dw);
                }
            }
            Op::SoftmaxRows(x) => {
                if self.needs[x] {
                    let rows = rows_of(&self.shapes[id]);
                    let cols = cols_of(&self.shapes[id]);
                    let mut dx = vec![0.0f32; rows * cols];
                    for r in 0..rows {
                        let s = &self.vals[id][r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = s
                            .iter()
                            .zip(gr.iter())
                            .map(|(&sv, &gv)| (sv * gv) as f64)
                            .sum();
                        let out = &mut dx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            out[c] = s[c] * (gr[c] - dot as f32);
                        }
                    }
                    self.add_to_grad(x, &dx);
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                self.backprop_layer_norm(id, x, Some((gain, bias)), g);
            }
            Op::LayerNormPlain(x) => {
                self.backprop_layer_norm(id, x, None, g);
            }
            Op::Gather { table, indices } => {
                if self.needs[table] {
                    let d = cols_of(&self.shapes[table]);
                    let n = self.vals[table].len();
                    let mut dt = vec![0.0f32; n];
                    for (r, &i) in indices.iter().enumerate() {
                        kernels::axpy(1.0, &g[r * d..(r + 1) * d], &mut dt[i * d..(i + 1) * d]);
                    }
                    self.add_to_grad(table, &dt);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                reduction,
            } => {
                if self.needs[logits] {
                    let rows = rows_of(&self.shapes[logits]);
                    let cols = cols_of(&self.shapes[logits]);
                    let w = match reduction {
                        Reduction::Sum => g[0],
                        Reduction::Mean => g[0] / rows as f32,
                    };
                    let mut dl = vec![0.0f32; rows * cols];
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &self.vals[logits][r * cols..(r + 1) * cols];
                        let out = &mut dl[r * cols..(r + 1) * cols];
                        kernels::softmax_row(row, out);
                        for v in out.iter_mut() {
                            *v *= w;
                        }
                        out[t] -= w;
                    }
                    self.add_to_grad(logits, &dl);
                }
            }
            Op::Interp { x, weights } => {
                if self.needs[x] {
                    let d = cols_of(&self.shapes[x]);
                    let mut dx = vec![0.0f32; self.vals[x].len()];
                    // Clone keeps the borrow checker happy; weight tables are small.
                    let w = self.interp_cache[weights].clone();
                    w.apply_transposed(g, d, &mut dx);
                    self.add_to_grad(x, &dx);
                }
            }
            Op::StraightThrough { z, q: _ } => {
                self.add_to_grad(z, g);
            }
            Op::SumAll(x) => {
                let gv = g[0];
                self.add_to_grad_with(x, |buf| {
                    for v in buf.iter_mut() {
                        *v += gv;
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = self.vals[x].len().max(1);
                let gv = g[0] / n as f32;
                self.add_to_grad_with(x, |buf| {
                    for v in buf.iter_mut() {
                        *v += gv;
                    }
                });
            }
            Op::Gelu(x) => {
                if self.needs[x] {
                    let dx: Vec<f32> = self.vals[x]
                        .iter()
                        .zip(g.iter())
                        .map(|(&xv, &gv)| gv * kernels::gelu_grad(xv))
                        .collect();
                    self.add_to_grad(x, &dx);
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs[x] {
                    let cols = cols_of(&self.shapes[x]);
                    self.add_to_grad_with(x, |buf| {
                        kernels::axpy(1.0, g, &mut buf[start * cols..start * cols + g.len()]);
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in &parts {
                    let n = self.vals[p].len();
                    let slice = &g[off..off + n];
                    self.add_to_grad(p, slice);
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs[x] {
                    let rows = rows_of(&self.shapes[id]);
                    let len = cols_of(&self.shapes[id]);
                    let cols = cols_of(&self.shapes[x]);
                    self.add_to_grad_with(x, |buf| {
                        for r in 0..rows {
                            kernels::axpy(
                                1.0,
                                &g[r * len..(r + 1) * len],
                                &mut buf[r * cols + start..r * cols + start + len],
                            );
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let rows = rows_of(&self.shapes[id]);
                let total = cols_of(&self.shapes[id]);
                let mut off = 0;
                for &p in &parts {
                    let w = cols_of(&self.shapes[p]);
                    if self.needs[p] {
                        let mut dp = vec![0.0f32; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        self.add_to_grad(p, &dp);
                    }
                    off += w;
                }
            }
        }
    }

    fn backprop_layer_norm(
        &mut self,
        _out_id: NodeId,
        x: NodeId,
        affine: Option<(NodeId, NodeId)>,
        g: &[f32],
    ) {
        let rows = rows_of(&self.shapes[x]);
        let cols = cols_of(&self.shapes[x]);

        if let Some((gain, bias)) = affine {
            if self.needs[gain] {
                let mut dg = vec![0.0f64; cols];
                for r in 0..rows {
                    let row = &self.vals[x][r * cols..(r + 1) * cols];
                    let (mean, var) = kernels::row_mean_var(row);
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    for c in 0..cols {
                        dg[c] += (g[r * cols + c] * (row[c] - mean) * inv) as f64;
                    }
                }
                let dg: Vec<f32> = dg.into_iter().map(|v| v as f32).collect();
                self.add_to_grad(gain, &dg);
            }
            if self.needs[bias] {
                let mut db = vec![0.0f64; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        db[c] += g[r * cols + c] as f64;
                    }
                }
                let db: Vec<f32> = db.into_iter().map(|v| v as f32).collect();
                self.add_to_grad(bias, &db);
            }
        }

        if self.needs[x] {
            let mut dx = vec![0.0f32; rows * cols];
            for r in 0..rows {
                let row = &self.vals[x][r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let (mean, var) = kernels::row_mean_var(row);
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                // d x_hat, folding in the gain when present
                let mut dxh = vec![0.0f32; cols];
                match affine {
                    Some((gain, _)) => {
                        for c in 0..cols {
                            dxh[c] = gr[c] * self.vals[gain][c];
                        }
                    }
                    None => dxh.copy_from_slice(gr),
                }
                let mean_dxh: f64 =
                    dxh.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
                let mean_dxh_xh: f64 = (0..cols)
                    .map(|c| dxh[c] as f64 * ((row[c] - mean) * inv) as f64)
                    .sum::<f64>()
                    / cols as f64;
                let out = &mut dx[r * cols..(r + 1) * cols];
                for c in 0..cols {
                    let xh = (row[c] - mean) * inv;
                    out[c] =
                        inv * (dxh[c] - mean_dxh as f32 - xh * mean_dxh_xh as f32);
                }
            }
            self.add_to_grad(x, &dx);
        }
    }
}

fn extract_kernel_slice(w: &[f32], c_out: usize, c_in: usize, kernel: usize, j: usize) -> Vec<f32> {
    let mut wj = vec![0.0f32; c_out * c_in];
    for o in 0..c_out {
        for i in 0..c_in {
            wj[o * c_in + i] = w[o * c_in * kernel + i * kernel + j];
        }
    }
    wj
}

/// Output-row range [lo, hi) touched by kernel offset j with padding `pad`.
fn conv_row_range(t: usize, j: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(j);
    let hi = (t + pad - j).min(t);
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_grad_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0], true);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0f32; 6][..]);
    }

    #[test]
    fn square_grad_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![], vec![3.0], true);
        let y = tape.mul(x, x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0][..]);
    }

    #[test]
    fn straight_through_contract() {
        let mut tape = Tape::new();
        let z = tape.leaf(vec![3], vec![0.1, 0.2, 0.3], true);
        let q = tape.leaf(vec![3], vec![1.0, 2.0, 3.0], true);
        let st = tape.straight_through(z, q);
        assert_eq!(tape.value(st), &[1.0, 2.0, 3.0]);
        let w = tape.constant(vec![3], vec![2.0, 3.0, 4.0]);
        let prod = tape.mul(st, w);
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(z).unwrap(), &[2.0, 3.0, 4.0][..]);
        assert!(tape.grad(q).is_none(), "no gradient may reach q");
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![2], vec![1.0, 2.0], true);
        let y = tape.add(x, x);
        assert!(matches!(
            tape.backward(y),
            Err(AutodiffError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn replay_produces_identical_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![4], vec![0.3, -0.6, 1.2, 2.0], true);
        let sq = tape.mul(x, x);
        let sm = tape.softmax_rows(sq);
        let loss = tape.mean_all(sm);
        tape.backward(loss).unwrap();
        let g1 = tape.grad(x).unwrap().to_vec();
        tape.backward(loss).unwrap();
        let g2 = tape.grad(x).unwrap().to_vec();
        assert_eq!(g1, g2);
    }

    #[test]
    fn accumulation_happens_at_store_level() {
        let mut store = ParamStore::new();
        let pid = store.add("p", Tensor::new(vec![1], vec![3.0]));
        let mut tape = Tape::new();
        let p = tape.param(&store, pid);
        let loss = tape.mul(p, p);
        tape.backward(loss).unwrap();
        tape.export_param_grads(&mut store);
        tape.export_param_grads(&mut store);
        assert_eq!(store.get(pid).tensor.grad.as_deref(), Some(&[12.0][..]));
    }

    #[test]
    fn param_nodes_are_deduplicated() {
        let mut store = ParamStore::new();
        let pid = store.add("p", Tensor::new(vec![1], vec![2.0]));
        let mut tape = Tape::new();
        let a = tape.param(&store, pid);
        let b = tape.param(&store, pid);
        assert_eq!(a, b);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(vec![2, 4], vec![0.0; 8], false);
        let loss = tape.cross_entropy(logits, &[1, 3], Reduction::Mean);
        let expect = (4.0f32).ln();
        assert!((tape.scalar_value(loss) - expect).abs() < 1e-6);
    }

    #[test]
    fn matmul_grads_match_hand_computation() {
        // loss = sum(A @ B); dA = ones @ B^T, dB = A^T @ ones
        let mut tape = Tape::new();
        let a = tape.leaf(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0], true);
        let b = tape.leaf(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0], true);
        let c = tape.matmul(a, b);
        let loss = tape.sum_all(c);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[11.0, 15.0, 11.0, 15.0][..]);
        assert_eq!(tape.grad(b).unwrap(), &[4.0, 4.0, 6.0, 6.0][..]);
    }

    #[test]
    fn gather_scatters_gradient() {
        let mut tape = Tape::new();
        let table = tape.leaf(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], true);
        let out = tape.gather(table, &[2, 0, 2]);
        assert_eq!(tape.value(out), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        assert_eq!(
            tape.grad(table).unwrap(),
            &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0][..]
        );
    }

    #[test]
    fn area_interpolate_zero_target_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0], false);
        assert!(matches!(
            tape.area_interpolate(x, 0),
            Err(AutodiffError::ZeroTargetLen)
        ));
    }

    #[test]
    fn linear_upsample_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false);
        let y = tape.linear_upsample(x, 3).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn no_grad_tape_skips_param_tracking() {
        let mut store = ParamStore::new();
        let pid = store.add("p", Tensor::new(vec![1], vec![2.0]));
        let mut tape = Tape::no_grad();
        let p = tape.param(&store, pid);
        let loss = tape.mul(p, p);
        // Backward succeeds but nothing needs gradients.
        tape.backward(loss).unwrap();
        tape.export_param_grads(&mut store);
        assert!(!store.grads_populated());
    }
}
