//! Neural building blocks over the autodiff tape.
//!
//! Layers only hold [`ParamId`]s; values live in the shared
//! [`ParamStore`]. Weight matrices are stored `out x in` and applied as
//! `x * W^T` to row-major batches.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::textprep::PAD;

/// Glorot-uniform bound for a `fan_out x fan_in` matrix.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(&[rows, cols], glorot_bound(cols, rows), rng)
}

/// Embedding table stored one row per token (`V x n_emb`). Row `PAD` stays
/// zero: its gradient is dropped before every update.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

pub const EMBEDDING_INIT: f64 = 0.05;

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut t = Tensor::uniform(&[vocab, dim], EMBEDDING_INIT, rng);
        if vocab > PAD {
            t.data_mut()[PAD * dim..(PAD + 1) * dim].fill(0.0);
        }
        let table = store.insert(format!("{name}.E"), t)?;
        Ok(Embedding { table, vocab, dim })
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Result<Self> {
        let table = find(store, &format!("{name}.E"))?;
        let t = store.get(table);
        Ok(Embedding {
            table,
            vocab: t.rows(),
            dim: t.cols(),
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<Var> {
        let e = tape.param(self.table);
        tape.gather_rows(e, ids)
    }

    /// Zero the padding row of this table's gradient.
    pub fn freeze_pad(&self, grads: &mut [Option<Vec<f64>>]) {
        if let Some(g) = grads[self.table.index()].as_mut() {
            g[PAD * self.dim..(PAD + 1) * self.dim].fill(0.0);
        }
    }
}

pub(crate) fn find(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
}

fn find_shaped(store: &ParamStore, name: &str, shape: &[usize]) -> Result<ParamId> {
    let id = find(store, name)?;
    let t = store.get(id);
    if (t.rows(), t.cols()) != (shape[0], shape[1]) {
        return Err(Error::shape("parameter shape", t.shape(), shape));
    }
    Ok(id)
}

/// `y = x W^T + b`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.insert(format!("{name}.W"), glorot(output, input, rng))?;
        let b = store.insert(format!("{name}.b"), Tensor::zeros(&[output]))?;
        Ok(Dense {
            w,
            b,
            input,
            output,
        })
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Result<Self> {
        let w = find(store, &format!("{name}.W"))?;
        let (output, input) = (store.get(w).rows(), store.get(w).cols());
        let b = find(store, &format!("{name}.b"))?;
        if store.get(b).len() != output {
            return Err(Error::shape("dense bias", store.get(b).shape(), &[output]));
        }
        Ok(Dense {
            w,
            b,
            input,
            output,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        let y = tape.matmul_nt(x, w)?;
        tape.add_row(y, b)
    }
}

/// Width-`w` convolution with `channels` filters followed by a global max
/// pool over window positions.
#[derive(Debug, Clone, Copy)]
pub struct ConvBlock {
    pub filters: ParamId,
    pub channels: usize,
    pub width: usize,
    pub dim: usize,
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        width: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let filters = store.insert(
            format!("{name}.filters"),
            glorot(channels, width * dim, rng),
        )?;
        Ok(ConvBlock {
            filters,
            channels,
            width,
            dim,
        })
    }

    pub fn from_store(store: &ParamStore, name: &str, width: usize) -> Result<Self> {
        let filters = find(store, &format!("{name}.filters"))?;
        let t = store.get(filters);
        if width == 0 || !t.cols().is_multiple_of(width) {
            return Err(Error::shape("conv filters", t.shape(), &[width]));
        }
        Ok(ConvBlock {
            filters,
            channels: t.rows(),
            width,
            dim: t.cols() / width,
        })
    }

    /// Right-pads `ids` with PAD up to the filter width.
    pub fn pad_ids(&self, ids: &[usize]) -> Vec<usize> {
        let mut v = ids.to_vec();
        while v.len() < self.width {
            v.push(PAD);
        }
        v
    }

    /// Returns the pooled `1 x channels` row and the pooling node, whose
    /// recorded argmax gives the winning window per channel.
    pub fn forward(&self, tape: &mut Tape<'_>, embedded: Var) -> Result<(Var, Var)> {
        let f = tape.param(self.filters);
        let conv = tape.conv1d(embedded, f, self.width)?;
        let pooled = tape.max(conv, 0)?;
        Ok((pooled, conv))
    }
}

/// Pooled features and winning windows for one embedded sequence.
pub fn conv_maxpool(
    tape: &mut Tape<'_>,
    embedded: Var,
    block: &ConvBlock,
) -> Result<(Var, Vec<usize>)> {
    let (pooled, _) = block.forward(tape, embedded)?;
    let argmax = tape.argmax(pooled).expect("max node").to_vec();
    Ok((pooled, argmax))
}

#[derive(Debug, Clone, Copy)]
pub struct Gate {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

/// GRU cell with update, reset and candidate gates:
///
/// ```text
/// z  = sigmoid(W_z x + U_z h + b_z)
/// r  = sigmoid(W_r x + U_r h + b_r)
/// h~ = tanh(W_h x + U_h (r * h) + b_h)
/// h' = (1 - z) * h + z * h~
/// ```
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub update: Gate,
    pub reset: Gate,
    pub candidate: Gate,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut gate = |g: &str, rng: &mut _| -> Result<Gate> {
            Ok(Gate {
                w: store.insert(format!("{name}.{g}.W"), glorot(hidden, input, rng))?,
                u: store.insert(format!("{name}.{g}.U"), glorot(hidden, hidden, rng))?,
                b: store.insert(format!("{name}.{g}.b"), Tensor::zeros(&[hidden]))?,
            })
        };
        Ok(GruCell {
            update: gate("update", rng)?,
            reset: gate("reset", rng)?,
            candidate: gate("candidate", rng)?,
            input,
            hidden,
        })
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Result<Self> {
        let w = find(store, &format!("{name}.update.W"))?;
        let (hidden, input) = (store.get(w).rows(), store.get(w).cols());
        let gate = |g: &str| -> Result<Gate> {
            Ok(Gate {
                w: find_shaped(store, &format!("{name}.{g}.W"), &[hidden, input])?,
                u: find_shaped(store, &format!("{name}.{g}.U"), &[hidden, hidden])?,
                b: find_shaped(store, &format!("{name}.{g}.b"), &[1, hidden])?,
            })
        };
        Ok(GruCell {
            update: gate("update")?,
            reset: gate("reset")?,
            candidate: gate("candidate")?,
            input,
            hidden,
        })
    }

    fn gate_pre(&self, tape: &mut Tape<'_>, g: Gate, x: Var, h: Var) -> Result<Var> {
        let (w, u, b) = (tape.param(g.w), tape.param(g.u), tape.param(g.b));
        let xw = tape.matmul_nt(x, w)?;
        let hu = tape.matmul_nt(h, u)?;
        let s = tape.add(xw, hu)?;
        tape.add_row(s, b)
    }

    /// One step on a batch: `x` is `B x input`, `h_prev` is `B x hidden`.
    pub fn step(&self, tape: &mut Tape<'_>, x: Var, h_prev: Var) -> Result<Var> {
        let z = self.gate_pre(tape, self.update, x, h_prev)?;
        let z = tape.sigmoid(z);
        let r = self.gate_pre(tape, self.reset, x, h_prev)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h_prev)?;
        let c = self.gate_pre(tape, self.candidate, x, rh)?;
        let c = tape.tanh(c);
        tape.gru_blend(h_prev, z, c, None)
    }

    /// Runs the cell over `steps` time-major inputs (`(T * B) x input`,
    /// row `t * B + b`). `mask[t * B + b]` is 1 for real steps and 0 for
    /// padding, which carries the previous state through. Returns the state
    /// after every step, in processing order when `reverse` is false and in
    /// time order either way.
    pub fn run(
        &self,
        tape: &mut Tape<'_>,
        inputs: Var,
        batch: usize,
        steps: usize,
        mask: &[f64],
        reverse: bool,
    ) -> Result<Vec<Var>> {
        if tape.value(inputs).rows() != batch * steps || mask.len() != batch * steps {
            return Err(Error::shape(
                "gru run",
                tape.value(inputs).shape(),
                &[steps, batch],
            ));
        }
        let h = self.hidden;
        // Input projections for all gates and steps in one product.
        let w = [self.update.w, self.reset.w, self.candidate.w].map(|p| tape.param(p));
        let b = [self.update.b, self.reset.b, self.candidate.b].map(|p| tape.param(p));
        let w_all = tape.concat_rows(&w)?;
        let b_all = tape.concat_cols(&b)?;
        let xp = tape.matmul_nt(inputs, w_all)?;
        let xp = tape.add_row(xp, b_all)?;
        let u_zr = {
            let uz = tape.param(self.update.u);
            let ur = tape.param(self.reset.u);
            tape.concat_rows(&[uz, ur])?
        };
        let u_h = tape.param(self.candidate.u);

        let mut state = tape.constant(Tensor::zeros(&[batch, h]));
        let mut out = vec![state; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let xt = tape.slice_rows(xp, t * batch, batch)?;
            let x_zr = tape.slice_cols(xt, 0, 2 * h)?;
            let x_c = tape.slice_cols(xt, 2 * h, h)?;
            let h_zr = tape.matmul_nt(state, u_zr)?;
            let zr = tape.add(x_zr, h_zr)?;
            let zr = tape.sigmoid(zr);
            let z = tape.slice_cols(zr, 0, h)?;
            let r = tape.slice_cols(zr, h, h)?;
            let rh = tape.mul(r, state)?;
            let hc = tape.matmul_nt(rh, u_h)?;
            let c = tape.add(x_c, hc)?;
            let c = tape.tanh(c);
            let m = &mask[t * batch..(t + 1) * batch];
            state = tape.gru_blend(state, z, c, Some(m))?;
            out[t] = state;
        }
        Ok(out)
    }
}

/// Single-sequence GRU step, `x` and `h_prev` as rows.
pub fn gru_step(tape: &mut Tape<'_>, cell: &GruCell, x: Var, h_prev: Var) -> Result<Var> {
    cell.step(tape, x, h_prev)
}

#[derive(Debug, Clone, Copy)]
pub struct BiGru {
    pub fwd: GruCell,
    pub bwd: GruCell,
}

impl BiGru {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(BiGru {
            fwd: GruCell::new(store, &format!("{name}.fwd"), input, hidden, rng)?,
            bwd: GruCell::new(store, &format!("{name}.bwd"), input, hidden, rng)?,
        })
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(BiGru {
            fwd: GruCell::from_store(store, &format!("{name}.fwd"))?,
            bwd: GruCell::from_store(store, &format!("{name}.bwd"))?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.fwd.hidden + self.bwd.hidden
    }

    /// Bidirectional pass over a padded batch. `inputs` is time-major
    /// `(T * B) x input`; sequences are right-padded, so the backward cell
    /// idles on padding until it reaches real tokens. Returns the
    /// batch-major `(B * T) x 2h` outputs, row `b * T + t`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        inputs: Var,
        batch: usize,
        steps: usize,
        mask: &[f64],
    ) -> Result<Var> {
        let f = self.fwd.run(tape, inputs, batch, steps, mask, false)?;
        let b = self.bwd.run(tape, inputs, batch, steps, mask, true)?;
        let mut joined = Vec::with_capacity(steps);
        for t in 0..steps {
            joined.push(tape.concat_cols(&[f[t], b[t]])?);
        }
        tape.stack_batch_major(&joined)
    }
}

/// Outputs of a bidirectional GRU over one unpadded sequence (`n x input`),
/// as `n x 2h` rows.
pub fn bigru(tape: &mut Tape<'_>, seq: Var, fwd: &GruCell, bwd: &GruCell) -> Result<Var> {
    let n = tape.value(seq).rows();
    if n == 0 {
        return Err(Error::Empty("bigru over an empty sequence".into()));
    }
    let layer = BiGru {
        fwd: *fwd,
        bwd: *bwd,
    };
    layer.forward(tape, seq, 1, n, &vec![1.0; n])
}

/// Additive attention scoring `v . tanh(w x)`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub w: ParamId,
    pub v: ParamId,
    pub dim: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let w = store.insert(format!("{name}.w"), glorot(dim, dim, rng))?;
        let v = store.insert(format!("{name}.v"), glorot(1, dim, rng))?;
        Ok(AttentionParams { w, v, dim })
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Result<Self> {
        let w = find(store, &format!("{name}.w"))?;
        let dim = store.get(w).rows();
        Ok(AttentionParams {
            w: find_shaped(store, &format!("{name}.w"), &[dim, dim])?,
            v: find_shaped(store, &format!("{name}.v"), &[1, dim])?,
            dim,
        })
    }

    /// Attention over a batch of padded sequences: `seq` is batch-major
    /// `(B * T) x dim`, `mask` is `B x T`. Returns the `B x dim` contexts and
    /// the `B x T` weights.
    pub fn attend(
        &self,
        tape: &mut Tape<'_>,
        seq: Var,
        batch: usize,
        steps: usize,
        mask: &[bool],
    ) -> Result<(Var, Var)> {
        let d = tape.value(seq).cols();
        if d != self.dim {
            return Err(Error::shape(
                "attend",
                tape.value(seq).shape(),
                &[self.dim, self.dim],
            ));
        }
        let (w, v) = (tape.param(self.w), tape.param(self.v));
        let u = tape.matmul_nt(seq, w)?;
        let u = tape.tanh(u);
        let scores = tape.matmul_nt(u, v)?;
        let scores = tape.reshape(scores, &[batch, steps])?;
        let weights = tape.masked_softmax(scores, mask)?;
        let ctx = tape.weighted_row_sum(seq, weights)?;
        Ok((ctx, weights))
    }
}

/// Attention over one sequence of row vectors (`n x dim`).
pub fn attend(
    tape: &mut Tape<'_>,
    inputs: Var,
    params: &AttentionParams,
    mask: &[bool],
) -> Result<(Var, Var)> {
    let n = tape.value(inputs).rows();
    params.attend(tape, inputs, 1, n, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(store: &mut ParamStore, id: ParamId, vals: &[f64]) {
        store.get_mut(id).data_mut().copy_from_slice(vals);
    }

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn zero_gru_halves_the_state() {
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "g", 2, 1, &mut rng()).unwrap();
        zero_all(&mut store);
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap());
        let h = tape.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let out = gru_step(&mut tape, &cell, x, h).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5]);
        let h0 = tape.constant(Tensor::zeros(&[1, 1]));
        let out = gru_step(&mut tape, &cell, x, h0).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0]);
    }

    #[test]
    fn hand_set_two_unit_gru() {
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "g", 1, 2, &mut rng()).unwrap();
        zero_all(&mut store);
        // update: W=[1,0], U=0, b=0 ; reset: b=[0, 100] ; candidate: W=[1,1], U=I, b=0
        set(&mut store, cell.update.w, &[1.0, 0.0]);
        set(&mut store, cell.reset.b, &[0.0, 100.0]);
        set(&mut store, cell.candidate.w, &[1.0, 1.0]);
        set(&mut store, cell.candidate.u, &[1.0, 0.0, 0.0, 1.0]);
        let (x, h) = (0.5f64, [0.2f64, -0.4]);
        let mut tape = Tape::new(&store);
        let xv = tape.constant(Tensor::matrix(1, 1, vec![x]).unwrap());
        let hv = tape.constant(Tensor::matrix(1, 2, h.to_vec()).unwrap());
        let out = gru_step(&mut tape, &cell, xv, hv).unwrap();

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let z = [sig(x), sig(0.0)];
        let r = [sig(0.0), sig(100.0)];
        let c = [(x + r[0] * h[0]).tanh(), (x + r[1] * h[1]).tanh()];
        let want = [
            (1.0 - z[0]) * h[0] + z[0] * c[0],
            (1.0 - z[1]) * h[1] + z[1] * c[1],
        ];
        for (got, w) in tape.value(out).data().iter().zip(want) {
            assert!((got - w).abs() < 1e-12, "{got} vs {w}");
        }
    }

    #[test]
    fn single_step_bigru_equals_two_steps() {
        let mut store = ParamStore::new();
        let f = GruCell::new(&mut store, "f", 3, 2, &mut rng()).unwrap();
        let b = GruCell::new(&mut store, "b", 3, 2, &mut rng()).unwrap();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::matrix(1, 3, vec![0.1, 0.4, -0.3]).unwrap());
        let out = bigru(&mut tape, x, &f, &b).unwrap();
        let h0 = tape.constant(Tensor::zeros(&[1, 2]));
        let hf = gru_step(&mut tape, &f, x, h0).unwrap();
        let hb = gru_step(&mut tape, &b, x, h0).unwrap();
        let mut want = tape.value(hf).data().to_vec();
        want.extend_from_slice(tape.value(hb).data());
        for (g, w) in tape.value(out).data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn palindrome_mirrors_halves() {
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "c", 2, 3, &mut rng()).unwrap();
        let mut tape = Tape::new(&store);
        let seq =
            tape.constant(Tensor::matrix(3, 2, vec![0.5, -0.2, 0.9, 0.1, 0.5, -0.2]).unwrap());
        let out = bigru(&mut tape, seq, &cell, &cell).unwrap();
        let o = tape.value(out);
        for t in 0..3 {
            let mirror = 2 - t;
            let (fa, ba) = o.row(t).split_at(3);
            let (fb, bb) = o.row(mirror).split_at(3);
            for k in 0..3 {
                assert!((fa[k] - bb[k]).abs() < 1e-12);
                assert!((ba[k] - fb[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_keep_zero_state() {
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "c", 2, 3, &mut rng()).unwrap();
        zero_all(&mut store);
        let mut tape = Tape::new(&store);
        let seq = tape.constant(Tensor::matrix(4, 2, vec![1.0; 8]).unwrap());
        let out = bigru(&mut tape, seq, &cell, &cell).unwrap();
        assert_eq!(tape.value(out).shape(), &[4, 6]);
        assert!(tape.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn masked_batch_matches_unpadded_runs() {
        let mut store = ParamStore::new();
        let f = GruCell::new(&mut store, "f", 2, 3, &mut rng()).unwrap();
        let b = GruCell::new(&mut store, "b", 2, 3, &mut rng()).unwrap();
        let layer = BiGru { fwd: f, bwd: b };
        let seqs = [vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6], vec![-0.7, 0.8]];
        let (batch, steps) = (2, 3);
        let mut tm = vec![0.0; batch * steps * 2];
        let mut mask = vec![0.0; batch * steps];
        for (bi, s) in seqs.iter().enumerate() {
            for t in 0..s.len() / 2 {
                tm[(t * batch + bi) * 2..(t * batch + bi) * 2 + 2]
                    .copy_from_slice(&s[t * 2..t * 2 + 2]);
                mask[t * batch + bi] = 1.0;
            }
        }
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::matrix(batch * steps, 2, tm).unwrap());
        let out = layer.forward(&mut tape, x, batch, steps, &mask).unwrap();
        for (bi, s) in seqs.iter().enumerate() {
            let n = s.len() / 2;
            let x1 = tape.constant(Tensor::matrix(n, 2, s.clone()).unwrap());
            let single = bigru(&mut tape, x1, &f, &b).unwrap();
            for t in 0..n {
                let got = tape.value(out).row(bi * steps + t).to_vec();
                let want = tape.value(single).row(t).to_vec();
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_singleton_and_symmetry() {
        let mut store = ParamStore::new();
        let att = AttentionParams::new(&mut store, "a", 2, &mut rng()).unwrap();
        let mut tape = Tape::new(&store);
        let u = tape.constant(Tensor::matrix(1, 2, vec![0.3, -1.1]).unwrap());
        let (ctx, w) = attend(&mut tape, u, &att, &[true]).unwrap();
        assert_eq!(tape.value(w).data(), &[1.0]);
        assert_eq!(tape.value(ctx).data(), &[0.3, -1.1]);
        let uu = tape.constant(Tensor::matrix(2, 2, vec![0.3, -1.1, 0.3, -1.1]).unwrap());
        let (ctx, w) = attend(&mut tape, uu, &att, &[true, true]).unwrap();
        assert_eq!(tape.value(w).data(), &[0.5, 0.5]);
        for (c, e) in tape.value(ctx).data().iter().zip([0.3, -1.1]) {
            assert!((c - e).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_hand_computed_mixture() {
        let mut store = ParamStore::new();
        let att = AttentionParams::new(&mut store, "a", 2, &mut rng()).unwrap();
        set(&mut store, att.w, &[1.0, 0.0, 0.0, 2.0]);
        set(&mut store, att.v, &[1.0, -1.0]);
        let (a, b) = ([0.5, 0.25], [-0.5, 1.0]);
        let s = |x: [f64; 2]| (x[0]).tanh() - (2.0 * x[1]).tanh();
        let (sa, sb) = (s(a), s(b));
        let wa = sa.exp() / (sa.exp() + sb.exp());
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::matrix(2, 2, vec![a[0], a[1], b[0], b[1]]).unwrap());
        let (ctx, w) = attend(&mut tape, x, &att, &[true, true]).unwrap();
        assert!((tape.value(w).data()[0] - wa).abs() < 1e-12);
        let want = [wa * a[0] + (1.0 - wa) * b[0], wa * a[1] + (1.0 - wa) * b[1]];
        for (c, e) in tape.value(ctx).data().iter().zip(want) {
            assert!((c - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_maxpool_hand_case() {
        let mut store = ParamStore::new();
        let block = ConvBlock::new(&mut store, "c", 1, 3, 1, &mut rng()).unwrap();
        set(&mut store, block.filters, &[1.0, 1.0, 1.0]);
        let mut tape = Tape::new(&store);
        let seq = tape.constant(Tensor::matrix(5, 1, vec![1.0, 5.0, 1.0, 0.0, 0.0]).unwrap());
        let (pooled, arg) = conv_maxpool(&mut tape, seq, &block).unwrap();
        assert_eq!(tape.value(pooled).data(), &[7.0]);
        assert_eq!(arg, vec![0]);

        let flat = tape.constant(Tensor::matrix(6, 1, vec![2.0; 6]).unwrap());
        let (_, arg) = conv_maxpool(&mut tape, flat, &block).unwrap();
        assert_eq!(arg, vec![0]);

        assert_eq!(block.pad_ids(&[4]), vec![4, PAD, PAD]);
        let one = tape.constant(Tensor::matrix(3, 1, vec![2.0, 0.0, 0.0]).unwrap());
        let conv = {
            let f = tape.param(block.filters);
            tape.conv1d(one, f, 3).unwrap()
        };
        assert_eq!(tape.value(conv).rows(), 1);
    }

    #[test]
    fn embedding_pad_row_is_zero() {
        let mut store = ParamStore::new();
        let e = Embedding::new(&mut store, "emb", 10, 4, &mut rng()).unwrap();
        assert!(store.get(e.table).row(PAD).iter().all(|v| *v == 0.0));
        assert!(store.get(e.table).row(3).iter().any(|v| *v != 0.0));
    }
}
