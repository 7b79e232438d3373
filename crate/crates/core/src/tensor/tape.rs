use std::collections::HashMap;

use super::gemm::{gemm, gemm_windows, gemm_windows_t, MatRef};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        a: Var,
        row: Var,
    },
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows {
        a: Var,
        start: usize,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    Reshape(Var),
    Mean {
        a: Var,
        axis: usize,
    },
    Sum(Var),
    Max {
        a: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Conv1d {
        seq: Var,
        filters: Var,
        width: usize,
    },
    MaskedSoftmax(Var),
    GruBlend {
        h_prev: Var,
        z: Var,
        cand: Var,
        mask: Option<Vec<f64>>,
    },
    StackBatchMajor(Vec<Var>),
    WeightedRowSum {
        seq: Var,
        weights: Var,
    },
    Bce {
        o: Var,
        target: Vec<f64>,
    },
    Cce {
        o: Var,
        target: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow { a, row } => vec![*a, *row],
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::SliceRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::Reshape(a)
            | Op::Mean { a, .. }
            | Op::Sum(a)
            | Op::Max { a, .. }
            | Op::MaskedSoftmax(a) => vec![*a],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) | Op::StackBatchMajor(vs) => vs.clone(),
            Op::GatherRows { table, .. } => vec![*table],
            Op::Conv1d { seq, filters, .. } => vec![*seq, *filters],
            Op::GruBlend {
                h_prev, z, cand, ..
            } => vec![*h_prev, *z, *cand],
            Op::WeightedRowSum { seq, weights } => vec![*seq, *weights],
            Op::Bce { o, .. } | Op::Cce { o, .. } => vec![*o],
        }
    }
}

#[derive(Debug)]
struct Node {
    /// `None` for parameters, whose values stay in the store.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order for one forward/backward pass.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    backward_done: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.nodes.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    /// Parameter gradients indexed by [`ParamId`]; untouched parameters are `None`.
    pub fn into_param_grads(mut self, n_params: usize) -> Vec<Option<Vec<f64>>> {
        let mut out = vec![None; n_params];
        for (id, var) in self.params {
            if id.0 < n_params {
                out[id.0] = self.nodes[var.0].take();
            }
        }
        out
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn acc<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    reqs: &[bool],
    v: Var,
    len: usize,
) -> Option<&'g mut Vec<f64>> {
    if !reqs[v.0] {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            backward_done: false,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every recorded node so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.param_nodes.clear();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked input; its gradient is available after backward.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    // ---- forward ops -------------------------------------------------------

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let ar = MatRef::new(at.data(), at.rows(), at.cols(), ta);
        let br = MatRef::new(bt.data(), bt.rows(), bt.cols(), tb);
        if ar.logical_cols() != br.logical_rows() {
            return Err(Error::shape("matmul", at.shape(), bt.shape()));
        }
        let (m, n) = (ar.logical_rows(), br.logical_cols());
        let mut out = vec![0.0; m * n];
        gemm(ar, br, 0.0, &mut out);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul { a, b, ta, tb }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a * b^T`, the layout used by weight matrices stored `out x in`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(Error::shape(name, at.shape(), bt.shape()));
        }
        let data = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(at.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds a bias row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (at, rt) = (self.value(a), self.value(row));
        let c = at.cols();
        if rt.len() != c || rt.rows() != 1 {
            return Err(Error::shape("add_row", at.shape(), rt.shape()));
        }
        let mut data = at.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(rt.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(at.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow { a, row }))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.unary(a, |x| x * k);
        self.push(t, Op::Scale(a, k))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let at = self.value(a);
        let data = at.data().iter().map(|x| f(*x)).collect();
        Tensor::new(at.shape().to_vec(), data).expect("same shape")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.unary(a, sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    /// Concatenate along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, vars: &[Var], axis: usize) -> Result<Var> {
        match axis {
            0 => self.concat_rows(vars),
            1 => self.concat_cols(vars),
            _ => Err(Error::InvalidArgument(format!("concat axis {axis}"))),
        }
    }

    pub fn concat_rows(&mut self, vars: &[Var]) -> Result<Var> {
        let first = vars
            .first()
            .ok_or_else(|| Error::Empty("concat_rows of nothing".into()))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for v in vars {
            let t = self.value(*v);
            if t.cols() != c {
                return Err(Error::shape(
                    "concat_rows",
                    self.value(*first).shape(),
                    t.shape(),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::matrix(rows, c, data)?;
        Ok(self.push(t, Op::ConcatRows(vars.to_vec())))
    }

    pub fn concat_cols(&mut self, vars: &[Var]) -> Result<Var> {
        let first = vars
            .first()
            .ok_or_else(|| Error::Empty("concat_cols of nothing".into()))?;
        let r = self.value(*first).rows();
        let mut total = 0;
        for v in vars {
            let t = self.value(*v);
            if t.rows() != r {
                return Err(Error::shape(
                    "concat_cols",
                    self.value(*first).shape(),
                    t.shape(),
                ));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for v in vars {
                data.extend_from_slice(self.value(*v).row(i));
            }
        }
        let t = Tensor::matrix(r, total, data)?;
        Ok(self.push(t, Op::ConcatCols(vars.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let at = self.value(a);
        let (r, c) = dims(at);
        if start + len > r {
            return Err(Error::shape("slice_rows", at.shape(), &[start, len]));
        }
        let data = at.data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::matrix(len, c, data)?;
        Ok(self.push(t, Op::SliceRows { a, start }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let at = self.value(a);
        let (r, c) = dims(at);
        if start + len > c {
            return Err(Error::shape("slice_cols", at.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&at.row(i)[start..start + len]);
        }
        let t = Tensor::matrix(r, len, data)?;
        Ok(self.push(t, Op::SliceCols { a, start }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let at = self.value(a);
        if shape.iter().product::<usize>() != at.len() {
            return Err(Error::shape("reshape", at.shape(), shape));
        }
        let t = Tensor::new(shape.to_vec(), at.data().to_vec())?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Mean over rows (`axis = 0`, result `1 x c`) or columns (`axis = 1`, result `r x 1`).
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let at = self.value(a);
        let (r, c) = dims(at);
        let t = match axis {
            0 => {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for (o, x) in out.iter_mut().zip(at.row(i)) {
                        *o += x;
                    }
                }
                out.iter_mut().for_each(|o| *o /= r as f64);
                Tensor::matrix(1, c, out)?
            }
            1 => {
                let out = (0..r)
                    .map(|i| at.row(i).iter().sum::<f64>() / c as f64)
                    .collect();
                Tensor::matrix(r, 1, out)?
            }
            _ => return Err(Error::InvalidArgument(format!("mean axis {axis}"))),
        };
        Ok(self.push(t, Op::Mean { a, axis }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Max over rows (`axis = 0`) or columns (`axis = 1`); ties go to the
    /// lowest index. The argmax is kept for gradient routing.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        let at = self.value(a);
        let (r, c) = dims(at);
        if at.is_empty() {
            return Err(Error::Empty("max of empty tensor".into()));
        }
        let (t, argmax) = match axis {
            0 => {
                let mut best = at.row(0).to_vec();
                let mut arg = vec![0usize; c];
                for i in 1..r {
                    for (j, x) in at.row(i).iter().enumerate() {
                        if *x > best[j] {
                            best[j] = *x;
                            arg[j] = i;
                        }
                    }
                }
                (Tensor::matrix(1, c, best)?, arg)
            }
            1 => {
                let mut best = Vec::with_capacity(r);
                let mut arg = Vec::with_capacity(r);
                for i in 0..r {
                    let row = at.row(i);
                    let mut k = 0;
                    for (j, x) in row.iter().enumerate() {
                        if *x > row[k] {
                            k = j;
                        }
                    }
                    best.push(row[k]);
                    arg.push(k);
                }
                (Tensor::matrix(r, 1, best)?, arg)
            }
            _ => return Err(Error::InvalidArgument(format!("max axis {axis}"))),
        };
        Ok(self.push(t, Op::Max { a, axis, argmax }))
    }

    /// Argmax recorded by a [`Tape::max`] node.
    pub fn argmax(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::Max { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    /// Select rows of `table` by id; equivalent to multiplying one-hot rows.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (r, c) = dims(tt);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::InvalidArgument(format!(
                    "row id {id} out of range for {r} rows"
                )));
            }
            data.extend_from_slice(tt.row(id));
        }
        let t = Tensor::matrix(ids.len(), c, data)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Valid 1-D convolution: `seq` is `n x d`, `filters` is
    /// `channels x (width * d)`; result is `(n - width + 1) x channels`.
    pub fn conv1d(&mut self, seq: Var, filters: Var, width: usize) -> Result<Var> {
        let (st, ft) = (self.value(seq), self.value(filters));
        let (n, d) = dims(st);
        let (channels, fw) = dims(ft);
        if width == 0 || fw != width * d {
            return Err(Error::shape("conv1d", st.shape(), ft.shape()));
        }
        if n < width {
            return Err(Error::shape("conv1d", st.shape(), &[width, d]));
        }
        let p = n - width + 1;
        let mut out = vec![0.0; p * channels];
        let fr = MatRef::new(ft.data(), channels, fw, true);
        gemm_windows(st.data(), p, d, fw, fr, 0.0, &mut out);
        let t = Tensor::matrix(p, channels, out)?;
        Ok(self.push(
            t,
            Op::Conv1d {
                seq,
                filters,
                width,
            },
        ))
    }

    /// Row-wise softmax over the unmasked positions; masked positions are 0.
    pub fn masked_softmax(&mut self, logits: Var, mask: &[bool]) -> Result<Var> {
        let lt = self.value(logits);
        let (r, c) = dims(lt);
        if mask.len() != lt.len() {
            return Err(Error::shape("masked_softmax", lt.shape(), &[mask.len()]));
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = lt.row(i);
            let m = &mask[i * c..(i + 1) * c];
            let mx = row
                .iter()
                .zip(m)
                .filter(|(_, keep)| **keep)
                .map(|(x, _)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(Error::AllMasked(i));
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut z = 0.0;
            for j in 0..c {
                if m[j] {
                    o[j] = (row[j] - mx).exp();
                    z += o[j];
                }
            }
            o.iter_mut().for_each(|x| *x /= z);
        }
        let t = Tensor::new(lt.shape().to_vec(), out)?;
        Ok(self.push(t, Op::MaskedSoftmax(logits)))
    }

    pub fn softmax_rows(&mut self, logits: Var) -> Result<Var> {
        let n = self.value(logits).len();
        self.masked_softmax(logits, &vec![true; n])
    }

    /// GRU state update `h + m * z * (cand - h)`, with a per-row mask `m`
    /// (1 = real step, 0 = padding keeps the previous state).
    pub fn gru_blend(
        &mut self,
        h_prev: Var,
        z: Var,
        cand: Var,
        mask: Option<&[f64]>,
    ) -> Result<Var> {
        let (ht, zt, ct) = (self.value(h_prev), self.value(z), self.value(cand));
        if ht.shape() != zt.shape() || ht.shape() != ct.shape() {
            return Err(Error::shape("gru_blend", ht.shape(), zt.shape()));
        }
        let (r, c) = dims(ht);
        if let Some(m) = mask {
            if m.len() != r {
                return Err(Error::shape("gru_blend mask", ht.shape(), &[m.len()]));
            }
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let m = mask.map_or(1.0, |m| m[i]);
            for j in 0..c {
                let k = i * c + j;
                let h = ht.data()[k];
                out[k] = h + m * zt.data()[k] * (ct.data()[k] - h);
            }
        }
        let t = Tensor::new(ht.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::GruBlend {
                h_prev,
                z,
                cand,
                mask: mask.map(<[f64]>::to_vec),
            },
        ))
    }

    /// Interleave `T` step outputs (each `B x d`) into a `(B * T) x d`
    /// matrix whose row `b * T + t` is step `t` of sequence `b`.
    pub fn stack_batch_major(&mut self, steps: &[Var]) -> Result<Var> {
        let first = steps
            .first()
            .ok_or_else(|| Error::Empty("stack of no steps".into()))?;
        let (b, d) = dims(self.value(*first));
        let t_len = steps.len();
        for s in steps {
            if dims(self.value(*s)) != (b, d) {
                return Err(Error::shape(
                    "stack_batch_major",
                    self.value(*first).shape(),
                    self.value(*s).shape(),
                ));
            }
        }
        let mut data = vec![0.0; b * t_len * d];
        for (t, s) in steps.iter().enumerate() {
            let st = self.value(*s);
            for i in 0..b {
                let dst = (i * t_len + t) * d;
                data[dst..dst + d].copy_from_slice(st.row(i));
            }
        }
        let t = Tensor::matrix(b * t_len, d, data)?;
        Ok(self.push(t, Op::StackBatchMajor(steps.to_vec())))
    }

    /// `out[b] = sum_t weights[b, t] * seq[b * T + t]` for `seq` of shape
    /// `(B * T) x d` and `weights` of shape `B x T`.
    pub fn weighted_row_sum(&mut self, seq: Var, weights: Var) -> Result<Var> {
        let (st, wt) = (self.value(seq), self.value(weights));
        let (bt, d) = dims(st);
        let (b, t_len) = dims(wt);
        if b * t_len != bt {
            return Err(Error::shape("weighted_row_sum", st.shape(), wt.shape()));
        }
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            let o = &mut out[i * d..(i + 1) * d];
            for t in 0..t_len {
                let w = wt.data()[i * t_len + t];
                if w == 0.0 {
                    continue;
                }
                for (x, y) in o.iter_mut().zip(st.row(i * t_len + t)) {
                    *x += w * y;
                }
            }
        }
        let t = Tensor::matrix(b, d, out)?;
        Ok(self.push(t, Op::WeightedRowSum { seq, weights }))
    }

    /// Binary cross-entropy averaged over every element.
    pub fn bce_loss(&mut self, output: Var, target: &[f64]) -> Result<Var> {
        let ot = self.value(output);
        if target.len() != ot.len() {
            return Err(Error::shape("bce_loss", ot.shape(), &[target.len()]));
        }
        if let Some(bad) = target.iter().find(|t| **t != 0.0 && **t != 1.0) {
            return Err(Error::InvalidArgument(format!(
                "bce target {bad} not in {{0, 1}}"
            )));
        }
        if ot.is_empty() {
            return Err(Error::Empty("bce_loss on no outputs".into()));
        }
        let n = ot.len() as f64;
        let loss = -ot
            .data()
            .iter()
            .zip(target)
            .map(|(o, t)| {
                let o = clamp_prob(*o);
                t * o.ln() + (1.0 - t) * (1.0 - o).ln()
            })
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                o: output,
                target: target.to_vec(),
            },
        ))
    }

    /// Categorical cross-entropy over the rows of `output` (one distribution
    /// per row), averaged over rows.
    pub fn cce_loss(&mut self, output: Var, target: &[f64]) -> Result<Var> {
        let ot = self.value(output);
        let (r, c) = dims(ot);
        if target.len() != ot.len() {
            return Err(Error::shape("cce_loss", ot.shape(), &[target.len()]));
        }
        if r == 0 {
            return Err(Error::Empty("cce_loss on no rows".into()));
        }
        for i in 0..r {
            let s: f64 = ot.row(i).iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "cce row {i} sums to {s}, not 1"
                )));
            }
            let tr = &target[i * c..(i + 1) * c];
            let ones = tr.iter().filter(|t| **t == 1.0).count();
            if ones != 1 || tr.iter().any(|t| *t != 0.0 && *t != 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "cce target row {i} is not one-hot"
                )));
            }
        }
        let loss = -ot
            .data()
            .iter()
            .zip(target)
            .map(|(o, t)| if *t == 1.0 { clamp_prob(*o).ln() } else { 0.0 })
            .sum::<f64>()
            / r as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Cce {
                o: output,
                target: target.to_vec(),
            },
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Populate gradients of the scalar `loss` with respect to every tracked
    /// node. A tape supports one backward pass until [`Tape::reset`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Autodiff("backward already ran on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        let reqs: Vec<bool> = self.nodes.iter().map(|n| n.requires_grad).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !reqs[loss.0] {
            return Ok(Gradients {
                nodes: grads,
                params: self.param_nodes.clone(),
            });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = node.value.as_ref().expect("op nodes own values");
            self.backward_node(&node.op, out, &g, &mut grads, &reqs);
        }
        Ok(Gradients {
            nodes: grads,
            params: self.param_nodes.clone(),
        })
    }

    fn backward_node(
        &self,
        op: &Op,
        out: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        reqs: &[bool],
    ) {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let ar = MatRef::new(at.data(), at.rows(), at.cols(), *ta);
                let br = MatRef::new(bt.data(), bt.rows(), bt.cols(), *tb);
                let gr = MatRef::new(g, out.rows(), out.cols(), false);
                if let Some(ga) = acc(grads, reqs, *a, at.len()) {
                    if *ta {
                        gemm(br, gr.t(), 1.0, ga);
                    } else {
                        gemm(gr, br.t(), 1.0, ga);
                    }
                }
                if let Some(gb) = acc(grads, reqs, *b, bt.len()) {
                    if *tb {
                        gemm(gr.t(), ar, 1.0, gb);
                    } else {
                        gemm(ar.t(), gr, 1.0, gb);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = acc(grads, reqs, *v, g.len()) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc(grads, reqs, *a, g.len()) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = acc(grads, reqs, *b, g.len()) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = acc(grads, reqs, *a, g.len()) {
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                }
                if let Some(gb) = acc(grads, reqs, *b, g.len()) {
                    for k in 0..g.len() {
                        gb[k] += g[k] * av[k];
                    }
                }
            }
            Op::AddRow { a, row } => {
                if let Some(ga) = acc(grads, reqs, *a, g.len()) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let c = out.cols();
                if let Some(gr) = acc(grads, reqs, *row, c) {
                    for chunk in g.chunks(c) {
                        gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(ga) = acc(grads, reqs, *a, g.len()) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += k * y);
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = acc(grads, reqs, *a, g.len()) {
                    for (k, y) in out.data().iter().enumerate() {
                        ga[k] += g[k] * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = acc(grads, reqs, *a, g.len()) {
                    for (k, y) in out.data().iter().enumerate() {
                        ga[k] += g[k] * y * (1.0 - y);
                    }
                }
            }
            Op::ConcatRows(vs) => {
                let mut offset = 0;
                for v in vs {
                    let n = self.value(*v).len();
                    if let Some(gv) = acc(grads, reqs, *v, n) {
                        gv.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(x, y)| *x += y);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(vs) => {
                let (r, total) = dims(out);
                let mut col = 0;
                for v in vs {
                    let vt = self.value(*v);
                    let c = vt.cols();
                    if let Some(gv) = acc(grads, reqs, *v, vt.len()) {
                        for i in 0..r {
                            let src = &g[i * total + col..i * total + col + c];
                            gv[i * c..(i + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    col += c;
                }
            }
            Op::SliceRows { a, start } => {
                let at = self.value(*a);
                let c = at.cols();
                if let Some(ga) = acc(grads, reqs, *a, at.len()) {
                    ga[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, y)| *x += y);
                }
            }
            Op::SliceCols { a, start } => {
                let at = self.value(*a);
                let c = at.cols();
                let (r, len) = dims(out);
                if let Some(ga) = acc(grads, reqs, *a, at.len()) {
                    for i in 0..r {
                        ga[i * c + start..i * c + start + len]
                            .iter_mut()
                            .zip(&g[i * len..(i + 1) * len])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = acc(grads, reqs, *a, g.len()) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Mean { a, axis } => {
                let at = self.value(*a);
                let (r, c) = dims(at);
                if let Some(ga) = acc(grads, reqs, *a, at.len()) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += if *axis == 0 {
                                g[j] / r as f64
                            } else {
                                g[i] / c as f64
                            };
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = acc(grads, reqs, *a, self.value(*a).len()) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Max { a, axis, argmax } => {
                let at = self.value(*a);
                let c = at.cols();
                if let Some(ga) = acc(grads, reqs, *a, at.len()) {
                    for (k, &arg) in argmax.iter().enumerate() {
                        if *axis == 0 {
                            ga[arg * c + k] += g[k];
                        } else {
                            ga[k * c + arg] += g[k];
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                let tt = self.value(*table);
                let c = tt.cols();
                if let Some(gt) = acc(grads, reqs, *table, tt.len()) {
                    for (k, &id) in ids.iter().enumerate() {
                        gt[id * c..(id + 1) * c]
                            .iter_mut()
                            .zip(&g[k * c..(k + 1) * c])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Conv1d {
                seq,
                filters,
                width,
            } => {
                let (st, ft) = (self.value(*seq), self.value(*filters));
                let d = st.cols();
                let (channels, fw) = dims(ft);
                let p = out.rows();
                let gr = MatRef::new(g, p, channels, false);
                if reqs[filters.0] {
                    // windows^T * g is (fw x channels); filters are stored transposed to that.
                    let mut tmp = vec![0.0; fw * channels];
                    gemm_windows_t(st.data(), p, d, fw, gr, &mut tmp);
                    let gf = acc(grads, reqs, *filters, ft.len()).expect("tracked");
                    for ch in 0..channels {
                        for j in 0..fw {
                            gf[ch * fw + j] += tmp[j * channels + ch];
                        }
                    }
                }
                if let Some(gs) = acc(grads, reqs, *seq, st.len()) {
                    let mut dwin = vec![0.0; p * fw];
                    gemm(
                        gr,
                        MatRef::new(ft.data(), channels, fw, false),
                        0.0,
                        &mut dwin,
                    );
                    for pos in 0..p {
                        let dst = &mut gs[pos * d..pos * d + width * d];
                        dst.iter_mut()
                            .zip(&dwin[pos * fw..(pos + 1) * fw])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::MaskedSoftmax(a) => {
                let (r, c) = dims(out);
                if let Some(ga) = acc(grads, reqs, *a, out.len()) {
                    for i in 0..r {
                        let y = out.row(i);
                        let gi = &g[i * c..(i + 1) * c];
                        let s: f64 = y.iter().zip(gi).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[i * c + j] += y[j] * (gi[j] - s);
                        }
                    }
                }
            }
            Op::GruBlend {
                h_prev,
                z,
                cand,
                mask,
            } => {
                let (ht, zt, ct) = (self.value(*h_prev), self.value(*z), self.value(*cand));
                let c = ht.cols();
                let m = |k: usize| mask.as_ref().map_or(1.0, |m| m[k / c]);
                if let Some(gh) = acc(grads, reqs, *h_prev, g.len()) {
                    for k in 0..g.len() {
                        gh[k] += g[k] * (1.0 - m(k) * zt.data()[k]);
                    }
                }
                if let Some(gz) = acc(grads, reqs, *z, g.len()) {
                    for k in 0..g.len() {
                        gz[k] += g[k] * m(k) * (ct.data()[k] - ht.data()[k]);
                    }
                }
                if let Some(gc) = acc(grads, reqs, *cand, g.len()) {
                    for k in 0..g.len() {
                        gc[k] += g[k] * m(k) * zt.data()[k];
                    }
                }
            }
            Op::StackBatchMajor(steps) => {
                let t_len = steps.len();
                let d = out.cols();
                for (t, s) in steps.iter().enumerate() {
                    let st = self.value(*s);
                    let b = st.rows();
                    if let Some(gs) = acc(grads, reqs, *s, st.len()) {
                        for i in 0..b {
                            let src = (i * t_len + t) * d;
                            gs[i * d..(i + 1) * d]
                                .iter_mut()
                                .zip(&g[src..src + d])
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            Op::WeightedRowSum { seq, weights } => {
                let (st, wt) = (self.value(*seq), self.value(*weights));
                let d = st.cols();
                let (b, t_len) = dims(wt);
                if let Some(gs) = acc(grads, reqs, *seq, st.len()) {
                    for i in 0..b {
                        let gi = &g[i * d..(i + 1) * d];
                        for t in 0..t_len {
                            let w = wt.data()[i * t_len + t];
                            let row = (i * t_len + t) * d;
                            gs[row..row + d]
                                .iter_mut()
                                .zip(gi)
                                .for_each(|(x, y)| *x += w * y);
                        }
                    }
                }
                if let Some(gw) = acc(grads, reqs, *weights, wt.len()) {
                    for i in 0..b {
                        let gi = &g[i * d..(i + 1) * d];
                        for t in 0..t_len {
                            gw[i * t_len + t] += st
                                .row(i * t_len + t)
                                .iter()
                                .zip(gi)
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                    }
                }
            }
            Op::Bce { o, target } => {
                let ot = self.value(*o);
                let n = ot.len() as f64;
                if let Some(go) = acc(grads, reqs, *o, ot.len()) {
                    for (k, t) in target.iter().enumerate() {
                        let p = clamp_prob(ot.data()[k]);
                        go[k] += g[0] * -(t / p - (1.0 - t) / (1.0 - p)) / n;
                    }
                }
            }
            Op::Cce { o, target } => {
                let ot = self.value(*o);
                let r = ot.rows() as f64;
                if let Some(go) = acc(grads, reqs, *o, ot.len()) {
                    for (k, t) in target.iter().enumerate() {
                        if *t == 1.0 {
                            go[k] += -g[0] / (clamp_prob(ot.data()[k]) * r);
                        }
                    }
                }
            }
        }
    }
}
