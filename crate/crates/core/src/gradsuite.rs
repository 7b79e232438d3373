//! Finite-difference checks over every tape op, every layer and each full
//! model loss, at small random shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{AttentionParams, BiGru, ConvBlock, Dense, Embedding, GruCell};
use crate::models::{ModelDims, ModelKind, Network};
use crate::tensor::gradcheck::{check_params, GradCheckReport, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::textprep::PreprocessedDoc;

pub const SUITE_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Entries probed per parameter.
pub const PROBES_PER_PARAM: usize = 12;

type LossFn = Box<dyn for<'a> Fn(&mut Tape<'a>) -> Result<Var>>;
type Builder = fn(&mut ParamStore, &mut ChaCha8Rng) -> Result<LossFn>;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passes(DEFAULT_TOLERANCE)
    }
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=8)
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

fn p(store: &mut ParamStore, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<ParamId> {
    store.insert(name, rand_tensor(shape, rng))
}

/// `sum(y * r)` for a fixed random `r`, so every output entry matters with
/// a distinct weight.
fn project(tape: &mut Tape<'_>, y: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone());
    let prod = tape.mul(y, rv)?;
    Ok(tape.sum(prod))
}

fn probe_like(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    rand_tensor(shape, rng)
}

macro_rules! unary_check {
    ($name:ident, $op:ident) => {
        fn $name(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
            let (r, c) = (dim(rng), dim(rng));
            let a = p(store, "a", &[r, c], rng)?;
            let probe = probe_like(&[r, c], rng);
            Ok(Box::new(move |t| {
                let x = t.param(a);
                let y = t.$op(x);
                project(t, y, &probe)
            }))
        }
    };
}

macro_rules! binary_check {
    ($name:ident, $op:ident) => {
        fn $name(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
            let (r, c) = (dim(rng), dim(rng));
            let a = p(store, "a", &[r, c], rng)?;
            let b = p(store, "b", &[r, c], rng)?;
            let probe = probe_like(&[r, c], rng);
            Ok(Box::new(move |t| {
                let (x, y) = (t.param(a), t.param(b));
                let z = t.$op(x, y)?;
                project(t, z, &probe)
            }))
        }
    };
}

unary_check!(op_tanh, tanh);
unary_check!(op_sigmoid, sigmoid);
binary_check!(op_add, add);
binary_check!(op_sub, sub);
binary_check!(op_mul, mul);

fn op_matmul(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
    let (m, k, n) = (dim(rng), dim(rng), dim(rng));
    let (ta, tb) = (rng.random::<bool>(), rng.random::<bool>());
    let a = p(store, "a", &if ta { [k, m] } else { [m, k] }, rng)?;
    let b = p(store, "b", &if tb { [n, k] } else { [k, n] }, rng)?;
    let probe = probe_like(&[m, n], rng);
    Ok(Box::new(move |t| {
        let (x, y) = (t.param(a), t.param(b));
        let z = t.matmul_t(x, y, ta, tb)?;
        project(t, z, &probe)
    }))
}

fn op_add_row(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
    let (r, c) = (dim(rng), dim(rng));
    let a = p(store, "a", &[r, c], rng)?;
    let b = p(store, "b", &[c], rng)?;
    let probe = probe_like(&[r, c], rng);
    Ok(Box::new(move |t| {
        let (x, y) = (t.param(a), t.param(b));
        let z = t.add_row(x, y)?;
        project(t, z, &probe)
    }))
}

fn op_scale(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
    let (r, c) = (dim(rng), dim(rng));
    let a = p(store, "a", &[r, c], rng)?;
    let k = rng.random_range(-2.0..2.0);
    let probe = probe_like(&[r, c], rng);
    Ok(Box::new(move |t| {
        let x = t.param(a);
        let z = t.scale(x, k);
        project(t, z, &probe)
    }))
}

fn op_concat(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
    let (r, c1, c2, r2) = (dim(rng), dim(rng), dim(rng), dim(rng));
    let a = p(store, "a", &[r, c1], rng)?;
    let b = p(store, "b", &[r, c2], rng)?;
    let c = p(store, "c", &[r2, c1 + c2], rng)?;
    let probe = probe_like(&[r + r2, c1 + c2], rng);
    Ok(Box::new(move |t| {
        let (x, y, z) = (t.param(a), t.param(b), t.param(c));
        let xy = t.concat(&[x, y], 1)?;
        let all = t.concat(&[xy, z], 0)?;
        project(t, all, &probe)
    }))
}

fn op_slice_reshape(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
    let (r, c) = (dim(rng) + 1, dim(rng) + 1);
    let a = p(store, "a", &[r, c], rng)?;
    let (r0, c0) = (rng.random_range(0..r), rng.random_range(0..c));
    let (rl, cl) = (rng.random_range(1..=r - r0), rng.random_range(1..=c - c0));
    let probe = probe_like(&[cl * rl, 1], rng);
    Ok(Box::new(move |t| {
        let x = t.param(a);
        let s = t.slice_rows(x, r0, rl)?;
        let s = t.slice_cols(s, c0, cl)?;
        let s = t.reshape(s, &[cl * rl, 1])?;
        project(t, s, &probe)
    }))
}

fn op_mean_sum(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
    let (r, c) = (dim(rng), dim(rng));
    let a = p(store, "a", &[r, c], rng)?;
    let (p0, p1) = (probe_like(&[1, c], rng), probe_like(&[r, 1], rng));
    Ok(Box::new(move |t| {
        let x = t.param(a);
        let m0 = t.mean(x, 0)?;
        let m1 = t.mean(x, 1)?;
        let l0 = project(t, m0, &p0)?;
        let l1 = project(t, m1, &p1)?;
        let sq = t.mul(x, x)?;
        let l2 = t.sum(sq);
        let s = t.add(l0, l1)?;
        t.add(s, l2)
    }))
}

fn op_max(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
    let (r, c) = (dim(rng), dim(rng));
    let a = p(store, "a", &[r, c], rng)?;
    let (p0, p1) = (probe_like(&[1, c], rng), probe_like(&[r, 1], rng));
    Ok(Box::new(move |t| {
        let x = t.param(a);
        let m0 = t.max(x, 0)?;
        let m1 = t.max(x, 1)?;
        let l0 = project(t, m0, &p0)?;
        let l1 = project(t, m1, &p1)?;
        t.add(l0, l1)
    }))
}

fn op_gather(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
    let (v, d, n) = (dim(rng), dim(rng), dim(rng));
    let e = p(store, "E", &[v, d], rng)?;
    let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..v)).collect();
    let probe = probe_like(&[n, d], rng);
    Ok(Box::new(move |t| {
        let x = t.param(e);
        let g = t.gather_rows(x, &ids)?;
        project(t, g, &probe)
    }))
}

fn op_conv1d(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
    let (d, ch, w) = (dim(rng), dim(rng), rng.random_range(1..=3));
    let n = w + rng.random_range(0..6);
    let s = p(store, "seq", &[n, d], rng)?;
    let f = p(store, "filters", &[ch, w * d], rng)?;
    let probe = probe_like(&[n - w + 1, ch], rng);
    Ok(Box::new(move |t| {
        let (x, y) = (t.param(s), t.param(f));
        let c = t.conv1d(x, y, w)?;
        project(t, c, &probe)
    }))
}

fn random_mask(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut m: Vec<bool> = (0..r * c).map(|_| rng.random::<f64>() < 0.7).collect();
    for i in 0..r {
        let k = rng.random_range(0..c);
        m[i * c + k] = true;
    }
    m
}

fn op_masked_softmax(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
    let (r, c) = (dim(rng), dim(rng));
    let a = p(store, "logits", &[r, c], rng)?;
    let mask = random_mask(r, c, rng);
    let probe = probe_like(&[r, c], rng);
    Ok(Box::new(move |t| {
        let x = t.param(a);
        let s = t.masked_softmax(x, &mask)?;
        project(t, s, &probe)
    }))
}

fn op_gru_blend(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
    let (r, c) = (dim(rng), dim(rng));
    let h = p(store, "h", &[r, c], rng)?;
    let z = p(store, "z", &[r, c], rng)?;
    let cand = p(store, "cand", &[r, c], rng)?;
    let mask: Vec<f64> = (0..r).map(|_| f64::from(rng.random::<bool>())).collect();
    let probe = probe_like(&[r, c], rng);
    Ok(Box::new(move |t| {
        let (a, b, d) = (t.param(h), t.param(z), t.param(cand));
        let o = t.gru_blend(a, b, d, Some(&mask))?;
        project(t, o, &probe)
    }))
}

fn op_stack_weighted(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
    let (b, steps, d) = (dim(rng), dim(rng), dim(rng));
    let ids: Vec<ParamId> = (0..steps)
        .map(|i| p(store, &format!("step{i}"), &[b, d], rng))
        .collect::<Result<_>>()?;
    let w = p(store, "weights", &[b, steps], rng)?;
    let probe = probe_like(&[b, d], rng);
    Ok(Box::new(move |t| {
        let vars: Vec<Var> = ids.iter().map(|i| t.param(*i)).collect();
        let seq = t.stack_batch_major(&vars)?;
        let wv = t.param(w);
        let o = t.weighted_row_sum(seq, wv)?;
        project(t, o, &probe)
    }))
}

fn op_bce(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
    let (r, c) = (dim(rng), dim(rng));
    let a = p(store, "logits", &[r, c], rng)?;
    let target: Vec<f64> = (0..r * c)
        .map(|_| f64::from(rng.random::<bool>()))
        .collect();
    Ok(Box::new(move |t| {
        let x = t.param(a);
        let s = t.sigmoid(x);
        t.bce_loss(s, &target)
    }))
}

fn op_cce(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
    let (r, c) = (dim(rng), dim(rng) + 1);
    let a = p(store, "logits", &[r, c], rng)?;
    let mut target = vec![0.0; r * c];
    for i in 0..r {
        target[i * c + rng.random_range(0..c)] = 1.0;
    }
    Ok(Box::new(move |t| {
        let x = t.param(a);
        let s = t.softmax_rows(x)?;
        t.cce_loss(s, &target)
    }))
}

fn layer_embedding_dense(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
    let (v, d, out, n) = (dim(rng) + 2, dim(rng), dim(rng), dim(rng));
    let emb = Embedding::new(store, "emb", v, d, rng)?;
    let dense = Dense::new(store, "dense", d, out, rng)?;
    // Nonzero bias so its gradient is exercised away from the init value.
    store
        .get_mut(dense.b)
        .data_mut()
        .iter_mut()
        .for_each(|b| *b = 0.1);
    let ids: Vec<usize> = (0..n).map(|_| rng.random_range(1..v)).collect();
    let probe = probe_like(&[n, out], rng);
    Ok(Box::new(move |t| {
        let x = emb.forward(t, &ids)?;
        let y = dense.forward(t, x)?;
        project(t, y, &probe)
    }))
}

fn layer_conv_maxpool(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
    let (ch, d) = (dim(rng), dim(rng));
    let n = 3 + rng.random_range(0..6);
    let seq = p(store, "seq", &[n, d], rng)?;
    let block = ConvBlock::new(store, "conv", ch, 3, d, rng)?;
    let probe = probe_like(&[1, ch], rng);
    Ok(Box::new(move |t| {
        let x = t.param(seq);
        let (pooled, _) = block.forward(t, x)?;
        project(t, pooled, &probe)
    }))
}

fn layer_gru_step(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
    let (b, inp, h) = (dim(rng), dim(rng), dim(rng));
    let cell = GruCell::new(store, "gru", inp, h, rng)?;
    let x = p(store, "x", &[b, inp], rng)?;
    let h0 = p(store, "h0", &[b, h], rng)?;
    let probe = probe_like(&[b, h], rng);
    Ok(Box::new(move |t| {
        let (xv, hv) = (t.param(x), t.param(h0));
        let o = cell.step(t, xv, hv)?;
        project(t, o, &probe)
    }))
}

fn layer_bigru(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
    let (b, steps, inp, h) = (
        rng.random_range(1..=4),
        rng.random_range(1..=5),
        dim(rng),
        rng.random_range(1..=4),
    );
    let gru = BiGru::new(store, "bigru", inp, h, rng)?;
    let x = p(store, "x", &[steps * b, inp], rng)?;
    let mut mask = vec![0.0; steps * b];
    for i in 0..b {
        let len = rng.random_range(1..=steps);
        for t in 0..len {
            mask[t * b + i] = 1.0;
        }
    }
    let probe = probe_like(&[b * steps, 2 * h], rng);
    Ok(Box::new(move |t| {
        let xv = t.param(x);
        let o = gru.forward(t, xv, b, steps, &mask)?;
        project(t, o, &probe)
    }))
}

fn layer_attention(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
    let (b, steps, d) = (rng.random_range(1..=4), dim(rng), dim(rng));
    let att = AttentionParams::new(store, "att", d, rng)?;
    let seq = p(store, "seq", &[b * steps, d], rng)?;
    let mask = random_mask(b, steps, rng);
    let probe = probe_like(&[b, d], rng);
    Ok(Box::new(move |t| {
        let s = t.param(seq);
        let (ctx, _) = att.attend(t, s, b, steps, &mask)?;
        project(t, ctx, &probe)
    }))
}

fn tiny_dims() -> ModelDims {
    ModelDims {
        embedding: 3,
        channels: 4,
        width: 3,
        word_hidden: 2,
        sentence_hidden: 3,
    }
}

fn random_docs(vocab: usize, rng: &mut ChaCha8Rng) -> Vec<PreprocessedDoc> {
    (0..3)
        .map(|_| {
            let n = rng.random_range(1..=3);
            let sentences: Vec<Vec<usize>> = (0..n)
                .map(|_| {
                    (0..rng.random_range(1..=4))
                        .map(|_| rng.random_range(2..vocab))
                        .collect()
                })
                .collect();
            PreprocessedDoc {
                spans: (0..n).map(|i| (i, i + 1)).collect(),
                sentences,
            }
        })
        .collect()
}

fn model_loss(kind: ModelKind, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
    let (vocab, labels) = (8, 3);
    let net = Network::init(kind, vocab, labels, &tiny_dims(), store, rng)?;
    // Break the all-zero bias symmetry of a fresh model.
    let names: Vec<_> = store
        .ids()
        .filter(|id| store.name(*id).ends_with(".b"))
        .collect();
    for id in names {
        store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    let docs = random_docs(vocab, rng);
    let targets: Vec<Vec<f64>> = (0..docs.len())
        .map(|_| {
            (0..labels)
                .map(|_| f64::from(rng.random::<bool>()))
                .collect()
        })
        .collect();
    Ok(Box::new(move |t| {
        let d: Vec<&PreprocessedDoc> = docs.iter().collect();
        let tr: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
        net.loss(t, &d, &tr)
    }))
}

fn model_cbow(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
    model_loss(ModelKind::Cbow, store, rng)
}

fn model_cnn(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
    model_loss(ModelKind::Cnn, store, rng)
}

fn model_hagru(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<LossFn> {
    model_loss(ModelKind::Hagru, store, rng)
}

pub const CHECKS: &[(&str, Builder)] = &[
    ("op.matmul", op_matmul),
    ("op.add", op_add),
    ("op.sub", op_sub),
    ("op.mul", op_mul),
    ("op.add_row", op_add_row),
    ("op.scale", op_scale),
    ("op.tanh", op_tanh),
    ("op.sigmoid", op_sigmoid),
    ("op.concat", op_concat),
    ("op.slice_reshape", op_slice_reshape),
    ("op.mean_sum", op_mean_sum),
    ("op.max", op_max),
    ("op.gather_rows", op_gather),
    ("op.conv1d", op_conv1d),
    ("op.masked_softmax", op_masked_softmax),
    ("op.gru_blend", op_gru_blend),
    ("op.stack_weighted_sum", op_stack_weighted),
    ("op.bce_loss", op_bce),
    ("op.cce_loss", op_cce),
    ("layer.embedding_dense", layer_embedding_dense),
    ("layer.conv_maxpool", layer_conv_maxpool),
    ("layer.gru_step", layer_gru_step),
    ("layer.bigru", layer_bigru),
    ("layer.attention", layer_attention),
    ("model.cbow", model_cbow),
    ("model.cnn", model_cnn),
    ("model.hagru", model_hagru),
];

pub fn run_check(name: &'static str, build: Builder, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let f = build(&mut store, &mut rng)?;
    let report = check_params(&mut store, f, DEFAULT_STEP, PROBES_PER_PARAM, seed)?;
    Ok(CheckOutcome { name, seed, report })
}

/// Every check at every seed.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::with_capacity(CHECKS.len() * seeds.len());
    for &(name, build) in CHECKS {
        for &seed in seeds {
            out.push(run_check(name, build, seed)?);
        }
    }
    Ok(out)
}
