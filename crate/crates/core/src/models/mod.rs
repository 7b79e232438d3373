//! The four classifiers: tf-idf linear one-vs-all, CBOW, CNN and the
//! hierarchical attention GRU.

mod linear;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use linear::{
    default_stop_words, fit_idf, linear_ova_train, tfidf_vector, LinearConfig, LinearOvaModel,
    SparseVec,
};

use crate::corpus::{LabelSetting, LabelSpace};
use crate::error::{Error, Result};
use crate::explain::AttentionTrace;
use crate::layers::{AttentionParams, BiGru, ConvBlock, Dense, Embedding};
use crate::tensor::{read_checkpoint, write_checkpoint, ParamStore, Tape, Tensor, Var};
use crate::textprep::{PreprocessedDoc, Vocabulary, PAD};

/// Documents per tape at inference time.
pub const INFERENCE_BATCH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Linear,
    Cbow,
    Cnn,
    Hagru,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Linear,
        ModelKind::Cbow,
        ModelKind::Cnn,
        ModelKind::Hagru,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::Cbow => "cbow",
            ModelKind::Cnn => "cnn",
            ModelKind::Hagru => "hagru",
        }
    }

    pub fn is_neural(self) -> bool {
        self != ModelKind::Linear
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("unknown model `{s}` (linear, cbow, cnn, hagru)"))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub embedding: usize,
    pub channels: usize,
    pub width: usize,
    /// Word GRU state per direction; sentence vectors are twice this.
    pub word_hidden: usize,
    /// Sentence GRU state per direction; label attention runs on twice this.
    pub sentence_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            embedding: 100,
            channels: 300,
            width: 3,
            word_hidden: 64,
            sentence_hidden: 64,
        }
    }
}

/// Indices whose probability strictly exceeds `threshold`.
pub fn predict_labels(probs: &[f64], threshold: f64) -> Vec<usize> {
    probs
        .iter()
        .enumerate()
        .filter(|(_, p)| **p > threshold)
        .map(|(i, _)| i)
        .collect()
}

fn non_empty(ids: &[usize]) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Empty("document has no tokens".into()));
    }
    Ok(())
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Mean of embeddings, then a dense sigmoid layer.
#[derive(Debug, Clone)]
pub struct Cbow {
    pub embedding: Embedding,
    pub output: Dense,
}

impl Cbow {
    pub fn new(
        store: &mut ParamStore,
        vocab: usize,
        labels: usize,
        dims: &ModelDims,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Cbow {
            embedding: Embedding::new(store, "cbow.embedding", vocab, dims.embedding, rng)?,
            output: Dense::new(store, "cbow.output", dims.embedding, labels, rng)?,
        })
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(Cbow {
            embedding: Embedding::from_store(store, "cbow.embedding")?,
            output: Dense::from_store(store, "cbow.output")?,
        })
    }

    /// `B x L` probabilities for flat token sequences.
    pub fn forward(&self, tape: &mut Tape<'_>, docs: &[Vec<usize>]) -> Result<Var> {
        let mut rows = Vec::with_capacity(docs.len());
        for ids in docs {
            non_empty(ids)?;
            let e = self.embedding.forward(tape, ids)?;
            rows.push(tape.mean(e, 0)?);
        }
        let x = tape.concat_rows(&rows)?;
        let y = self.output.forward(tape, x)?;
        Ok(tape.sigmoid(y))
    }
}

/// Width-3 convolution with global max pooling, then a dense sigmoid layer.
#[derive(Debug, Clone)]
pub struct Cnn {
    pub embedding: Embedding,
    pub conv: ConvBlock,
    pub output: Dense,
}

/// Pooled features of one document with the winning window per channel.
pub struct CnnPooled {
    pub pooled: Var,
    pub argmax: Vec<usize>,
    /// Token ids after padding to the filter width.
    pub ids: Vec<usize>,
    pub embedded: Var,
}

impl Cnn {
    pub fn new(
        store: &mut ParamStore,
        vocab: usize,
        labels: usize,
        dims: &ModelDims,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Cnn {
            embedding: Embedding::new(store, "cnn.embedding", vocab, dims.embedding, rng)?,
            conv: ConvBlock::new(
                store,
                "cnn.conv",
                dims.channels,
                dims.width,
                dims.embedding,
                rng,
            )?,
            output: Dense::new(store, "cnn.output", dims.channels, labels, rng)?,
        })
    }

    pub fn from_store(store: &ParamStore, width: usize) -> Result<Self> {
        Ok(Cnn {
            embedding: Embedding::from_store(store, "cnn.embedding")?,
            conv: ConvBlock::from_store(store, "cnn.conv", width)?,
            output: Dense::from_store(store, "cnn.output")?,
        })
    }

    pub fn pool(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<CnnPooled> {
        non_empty(ids)?;
        let ids = self.conv.pad_ids(ids);
        let embedded = self.embedding.forward(tape, &ids)?;
        let (pooled, _) = self.conv.forward(tape, embedded)?;
        let argmax = tape.argmax(pooled).expect("max node").to_vec();
        Ok(CnnPooled {
            pooled,
            argmax,
            ids,
            embedded,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, docs: &[Vec<usize>]) -> Result<Var> {
        let mut rows = Vec::with_capacity(docs.len());
        for ids in docs {
            rows.push(self.pool(tape, ids)?.pooled);
        }
        let x = tape.concat_rows(&rows)?;
        let y = self.output.forward(tape, x)?;
        Ok(tape.sigmoid(y))
    }
}

/// Word biGRU with one shared attention, sentence biGRU, then a separate
/// attention and 2-way softmax per label.
#[derive(Debug, Clone)]
pub struct Hagru {
    pub embedding: Embedding,
    pub word_gru: BiGru,
    pub word_attention: AttentionParams,
    pub sentence_gru: BiGru,
    pub label_attention: Vec<AttentionParams>,
    pub label_output: Vec<Dense>,
}

/// Where each document and sentence of a batch lives in the padded
/// tensors of a [`HagruPass`].
#[derive(Debug, Clone)]
pub struct HagruLayout {
    pub batch: usize,
    pub sentence_steps: usize,
    pub word_steps: usize,
    /// Index of each document's first sentence among all sentences.
    pub first_sentence: Vec<usize>,
    pub sentence_counts: Vec<usize>,
    pub word_counts: Vec<usize>,
}

pub struct HagruPass {
    /// `(L * B) x 2`, row `l * B + b`; column 1 is "label present".
    pub probs: Var,
    /// `S x word_steps` over all sentences of the batch.
    pub word_weights: Var,
    /// Per label, `B x sentence_steps`.
    pub sentence_weights: Vec<Var>,
    /// `(B * sentence_steps) x 2h`, row `b * sentence_steps + t`.
    pub sentence_outputs: Var,
    /// Per label, `B x 2h` document encodings.
    pub encodings: Vec<Var>,
    pub layout: HagruLayout,
}

impl Hagru {
    pub fn new(
        store: &mut ParamStore,
        vocab: usize,
        labels: usize,
        dims: &ModelDims,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let embedding = Embedding::new(store, "hagru.embedding", vocab, dims.embedding, rng)?;
        let word_gru = BiGru::new(
            store,
            "hagru.word_gru",
            dims.embedding,
            dims.word_hidden,
            rng,
        )?;
        let word_attention =
            AttentionParams::new(store, "hagru.word_attention", word_gru.output_dim(), rng)?;
        let sentence_gru = BiGru::new(
            store,
            "hagru.sentence_gru",
            word_gru.output_dim(),
            dims.sentence_hidden,
            rng,
        )?;
        let d = sentence_gru.output_dim();
        let mut label_attention = Vec::with_capacity(labels);
        let mut label_output = Vec::with_capacity(labels);
        for l in 0..labels {
            label_attention.push(AttentionParams::new(
                store,
                &format!("hagru.label.{l}.attention"),
                d,
                rng,
            )?);
            label_output.push(Dense::new(
                store,
                &format!("hagru.label.{l}.output"),
                d,
                2,
                rng,
            )?);
        }
        Ok(Hagru {
            embedding,
            word_gru,
            word_attention,
            sentence_gru,
            label_attention,
            label_output,
        })
    }

    pub fn from_store(store: &ParamStore, labels: usize) -> Result<Self> {
        let mut label_attention = Vec::with_capacity(labels);
        let mut label_output = Vec::with_capacity(labels);
        for l in 0..labels {
            label_attention.push(AttentionParams::from_store(
                store,
                &format!("hagru.label.{l}.attention"),
            )?);
            label_output.push(Dense::from_store(
                store,
                &format!("hagru.label.{l}.output"),
            )?);
        }
        Ok(Hagru {
            embedding: Embedding::from_store(store, "hagru.embedding")?,
            word_gru: BiGru::from_store(store, "hagru.word_gru")?,
            word_attention: AttentionParams::from_store(store, "hagru.word_attention")?,
            sentence_gru: BiGru::from_store(store, "hagru.sentence_gru")?,
            label_attention,
            label_output,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.label_attention.len()
    }

    pub fn forward(&self, tape: &mut Tape<'_>, docs: &[&PreprocessedDoc]) -> Result<HagruPass> {
        let batch = docs.len();
        if batch == 0 {
            return Err(Error::Empty("hagru batch".into()));
        }
        let mut first_sentence = Vec::with_capacity(batch);
        let mut sentences: Vec<&[usize]> = Vec::new();
        for d in docs {
            if d.sentences.is_empty() || d.sentences.iter().any(Vec::is_empty) {
                return Err(Error::Empty(
                    "document without sentences or with an empty sentence".into(),
                ));
            }
            first_sentence.push(sentences.len());
            sentences.extend(d.sentences.iter().map(Vec::as_slice));
        }
        let sentence_counts: Vec<usize> = docs.iter().map(|d| d.sentences.len()).collect();
        let word_counts: Vec<usize> = sentences.iter().map(|s| s.len()).collect();
        let n_sent = sentences.len();
        let word_steps = word_counts.iter().copied().max().unwrap_or(0);
        let sentence_steps = sentence_counts.iter().copied().max().unwrap_or(0);

        // Word level: all sentences of the batch at once, time-major.
        let mut ids = vec![PAD; word_steps * n_sent];
        let mut step_mask = vec![0.0; word_steps * n_sent];
        let mut att_mask = vec![false; n_sent * word_steps];
        for (s, sent) in sentences.iter().enumerate() {
            for (t, id) in sent.iter().enumerate() {
                ids[t * n_sent + s] = *id;
                step_mask[t * n_sent + s] = 1.0;
                att_mask[s * word_steps + t] = true;
            }
        }
        let emb = self.embedding.forward(tape, &ids)?;
        let words = self
            .word_gru
            .forward(tape, emb, n_sent, word_steps, &step_mask)?;
        let (sent_vecs, word_weights) = self
            .word_attention
            .attend(tape, words, n_sent, word_steps, &att_mask)?;

        // Sentence level: gather sentence vectors into a padded time-major batch.
        let d = self.word_gru.output_dim();
        let pad_row = tape.constant(Tensor::zeros(&[1, d]));
        let table = tape.concat_rows(&[sent_vecs, pad_row])?;
        let mut sid = vec![n_sent; sentence_steps * batch];
        let mut s_mask = vec![0.0; sentence_steps * batch];
        let mut s_att = vec![false; batch * sentence_steps];
        for b in 0..batch {
            for t in 0..sentence_counts[b] {
                sid[t * batch + b] = first_sentence[b] + t;
                s_mask[t * batch + b] = 1.0;
                s_att[b * sentence_steps + t] = true;
            }
        }
        let sent_in = tape.gather_rows(table, &sid)?;
        let sentence_outputs =
            self.sentence_gru
                .forward(tape, sent_in, batch, sentence_steps, &s_mask)?;

        let labels = self.num_labels();
        let mut per_label = Vec::with_capacity(labels);
        let mut sentence_weights = Vec::with_capacity(labels);
        let mut encodings = Vec::with_capacity(labels);
        for l in 0..labels {
            let (enc, w) = self.label_attention[l].attend(
                tape,
                sentence_outputs,
                batch,
                sentence_steps,
                &s_att,
            )?;
            let logits = self.label_output[l].forward(tape, enc)?;
            per_label.push(tape.softmax_rows(logits)?);
            sentence_weights.push(w);
            encodings.push(enc);
        }
        let probs = tape.concat_rows(&per_label)?;
        Ok(HagruPass {
            probs,
            word_weights,
            sentence_weights,
            sentence_outputs,
            encodings,
            layout: HagruLayout {
                batch,
                sentence_steps,
                word_steps,
                first_sentence,
                sentence_counts,
                word_counts,
            },
        })
    }

    /// Per-document "label present" probabilities from a pass.
    pub fn positive_probs(tape: &Tape<'_>, pass: &HagruPass) -> Vec<Vec<f64>> {
        let b = pass.layout.batch;
        let p = tape.value(pass.probs);
        let labels = p.rows() / b;
        (0..b)
            .map(|i| (0..labels).map(|l| p.get(l * b + i, 1)).collect())
            .collect()
    }

    /// Attention weights of document `b` of a pass, trimmed to its real
    /// sentences and words.
    pub fn trace_of(
        tape: &Tape<'_>,
        pass: &HagruPass,
        b: usize,
        doc: &PreprocessedDoc,
    ) -> AttentionTrace {
        let lay = &pass.layout;
        let n = lay.sentence_counts[b];
        let sentence_weights = pass
            .sentence_weights
            .iter()
            .map(|w| tape.value(*w).row(b)[..n].to_vec())
            .collect();
        let ww = tape.value(pass.word_weights);
        let word_weights = (0..n)
            .map(|t| {
                let s = lay.first_sentence[b] + t;
                ww.row(s)[..lay.word_counts[s]].to_vec()
            })
            .collect();
        AttentionTrace {
            sentence_weights,
            word_weights,
            spans: doc.spans.clone(),
        }
    }
}

// One network lives per model; boxing would buy nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum Network {
    Cbow(Cbow),
    Cnn(Cnn),
    Hagru(Hagru),
}

impl Network {
    pub fn init(
        kind: ModelKind,
        vocab: usize,
        labels: usize,
        dims: &ModelDims,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(match kind {
            ModelKind::Cbow => Network::Cbow(Cbow::new(store, vocab, labels, dims, rng)?),
            ModelKind::Cnn => Network::Cnn(Cnn::new(store, vocab, labels, dims, rng)?),
            ModelKind::Hagru => Network::Hagru(Hagru::new(store, vocab, labels, dims, rng)?),
            ModelKind::Linear => {
                return Err(Error::InvalidArgument(
                    "the linear model has no network".into(),
                ))
            }
        })
    }

    pub fn from_store(
        kind: ModelKind,
        store: &ParamStore,
        dims: &ModelDims,
        labels: usize,
    ) -> Result<Self> {
        Ok(match kind {
            ModelKind::Cbow => Network::Cbow(Cbow::from_store(store)?),
            ModelKind::Cnn => Network::Cnn(Cnn::from_store(store, dims.width)?),
            ModelKind::Hagru => Network::Hagru(Hagru::from_store(store, labels)?),
            ModelKind::Linear => {
                return Err(Error::InvalidArgument(
                    "the linear model has no network".into(),
                ))
            }
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Network::Cbow(_) => ModelKind::Cbow,
            Network::Cnn(_) => ModelKind::Cnn,
            Network::Hagru(_) => ModelKind::Hagru,
        }
    }

    pub fn embedding(&self) -> &Embedding {
        match self {
            Network::Cbow(m) => &m.embedding,
            Network::Cnn(m) => &m.embedding,
            Network::Hagru(m) => &m.embedding,
        }
    }

    /// Mean loss over a batch: binary cross-entropy for the sigmoid models,
    /// categorical cross-entropy over every per-label softmax for HA-GRU.
    pub fn loss(
        &self,
        tape: &mut Tape<'_>,
        docs: &[&PreprocessedDoc],
        targets: &[&[f64]],
    ) -> Result<Var> {
        if docs.len() != targets.len() {
            return Err(Error::InvalidArgument(format!(
                "{} docs but {} targets",
                docs.len(),
                targets.len()
            )));
        }
        match self {
            Network::Cbow(_) | Network::Cnn(_) => {
                let out = self.flat_forward(tape, docs)?;
                let t: Vec<f64> = targets.concat();
                tape.bce_loss(out, &t)
            }
            Network::Hagru(m) => {
                let pass = m.forward(tape, docs)?;
                let b = docs.len();
                let labels = m.num_labels();
                let mut t = vec![0.0; labels * b * 2];
                for l in 0..labels {
                    for (i, tr) in targets.iter().enumerate() {
                        let pos = tr[l] == 1.0;
                        t[(l * b + i) * 2 + usize::from(pos)] = 1.0;
                    }
                }
                tape.cce_loss(pass.probs, &t)
            }
        }
    }

    fn flat_forward(&self, tape: &mut Tape<'_>, docs: &[&PreprocessedDoc]) -> Result<Var> {
        let flat: Vec<Vec<usize>> = docs.iter().map(|d| d.flat()).collect();
        match self {
            Network::Cbow(m) => m.forward(tape, &flat),
            Network::Cnn(m) => m.forward(tape, &flat),
            Network::Hagru(_) => unreachable!("hagru is hierarchical"),
        }
    }

    /// "Label present" probabilities per document.
    pub fn probabilities_on(
        &self,
        tape: &mut Tape<'_>,
        docs: &[&PreprocessedDoc],
    ) -> Result<Vec<Vec<f64>>> {
        match self {
            Network::Hagru(m) => {
                let pass = m.forward(tape, docs)?;
                Ok(Hagru::positive_probs(tape, &pass))
            }
            _ => {
                let out = self.flat_forward(tape, docs)?;
                Ok(rows_of(tape.value(out)))
            }
        }
    }

    /// Drops gradient that must not reach frozen entries (the PAD row).
    pub fn freeze(&self, grads: &mut [Option<Vec<f64>>]) {
        self.embedding().freeze_pad(grads);
    }
}

/// A network together with its parameters.
#[derive(Debug, Clone)]
pub struct NeuralModel {
    pub net: Network,
    pub store: ParamStore,
}

impl NeuralModel {
    pub fn new(
        kind: ModelKind,
        vocab: usize,
        labels: usize,
        dims: &ModelDims,
        seed: u64,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::init(kind, vocab, labels, dims, &mut store, &mut rng)?;
        Ok(NeuralModel { net, store })
    }

    pub fn probabilities(&self, docs: &[&PreprocessedDoc]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new(&self.store);
        self.net.probabilities_on(&mut tape, docs)
    }

    /// Forward pass of one document with its attention trace.
    pub fn hagru_trace(&self, doc: &PreprocessedDoc) -> Result<(Vec<f64>, AttentionTrace)> {
        let Network::Hagru(m) = &self.net else {
            return Err(Error::InvalidArgument(format!(
                "attention traces need hagru, not {}",
                self.net.kind()
            )));
        };
        let mut tape = Tape::new(&self.store);
        let pass = m.forward(&mut tape, &[doc])?;
        let probs = Hagru::positive_probs(&tape, &pass).remove(0);
        Ok((probs, Hagru::trace_of(&tape, &pass, 0, doc)))
    }
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum Classifier {
    Linear(LinearOvaModel),
    Neural(NeuralModel),
}

/// Everything besides the parameters that a checkpoint needs; written as the
/// JSON sidecar next to the binary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: ModelKind,
    pub dims: ModelDims,
    pub setting: LabelSetting,
    pub labels: LabelSpace,
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub threshold: f64,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub meta: ModelMeta,
    pub classifier: Classifier,
}

/// `model.bin` -> `model.json`.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        self.meta.kind
    }

    pub fn num_labels(&self) -> usize {
        self.meta.labels.len()
    }

    pub fn neural(&self) -> Option<&NeuralModel> {
        match &self.classifier {
            Classifier::Neural(m) => Some(m),
            Classifier::Linear(_) => None,
        }
    }

    /// Per-document "label present" probabilities. The linear model reports
    /// the logistic of its margin, so 0.5 is its decision boundary. Documents
    /// without tokens get all zeros.
    pub fn probabilities(&self, docs: &[PreprocessedDoc]) -> Result<Vec<Vec<f64>>> {
        let l = self.num_labels();
        let chunks: Vec<Vec<Vec<f64>>> = docs
            .par_chunks(INFERENCE_BATCH)
            .map(|chunk| -> Result<Vec<Vec<f64>>> {
                let mut out = vec![vec![0.0; l]; chunk.len()];
                let live: Vec<usize> = (0..chunk.len())
                    .filter(|i| chunk[*i].num_tokens() > 0)
                    .collect();
                if live.is_empty() {
                    return Ok(out);
                }
                let probs = match &self.classifier {
                    Classifier::Linear(m) => live
                        .iter()
                        .map(|i| {
                            m.scores(&chunk[*i].flat())
                                .into_iter()
                                .map(|s| 1.0 / (1.0 + (-s).exp()))
                                .collect()
                        })
                        .collect(),
                    Classifier::Neural(m) => {
                        let refs: Vec<&PreprocessedDoc> = live.iter().map(|i| &chunk[*i]).collect();
                        m.probabilities(&refs)?
                    }
                };
                for (i, p) in live.into_iter().zip(probs) {
                    out[i] = p;
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    pub fn predict(&self, docs: &[PreprocessedDoc]) -> Result<Vec<BTreeSet<String>>> {
        Ok(self
            .probabilities(docs)?
            .iter()
            .map(|p| {
                self.meta
                    .labels
                    .decode(predict_labels(p, self.meta.threshold))
            })
            .collect())
    }

    pub fn param_store(&self) -> Result<ParamStore> {
        match &self.classifier {
            Classifier::Linear(m) => m.to_store(),
            Classifier::Neural(m) => Ok(m.store.clone()),
        }
    }

    /// Writes the binary checkpoint at `path` and its JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(&self.param_store()?, path)?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.meta)? + "\n";
        fs::write(&side, json).map_err(|e| Error::io(&side, e))
    }

    /// Loads a checkpoint, refusing it unless `vocab` is the vocabulary it
    /// was trained with.
    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: ModelMeta = serde_json::from_str(&text)?;
        if meta.vocab_hash != vocab.hash() || meta.vocab_size != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained with vocabulary {} ({} tokens), got {} ({} tokens)",
                meta.vocab_hash,
                meta.vocab_size,
                vocab.hash(),
                vocab.len()
            )));
        }
        let store = read_checkpoint(path)?;
        let classifier = if meta.kind.is_neural() {
            let net = Network::from_store(meta.kind, &store, &meta.dims, meta.labels.len())?;
            if net.embedding().vocab != vocab.len() {
                return Err(Error::Checkpoint(
                    "embedding rows differ from the vocabulary size".into(),
                ));
            }
            Classifier::Neural(NeuralModel { net, store })
        } else {
            let m = LinearOvaModel::from_store(&store)?;
            if m.idf.len() != vocab.len() || m.num_labels() != meta.labels.len() {
                return Err(Error::Checkpoint(
                    "linear parameters disagree with the sidecar".into(),
                ));
            }
            Classifier::Linear(m)
        };
        Ok(Model { meta, classifier })
    }
}
