//! Mini-batch training with Adam, global-norm clipping and early stopping on
//! validation Micro-F.

use std::fmt::Write as _;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, LabelSetting, LabelSpace};
use crate::error::{Error, Result};
use crate::eval::MicroCounts;
use crate::models::{
    linear_ova_train, predict_labels, Classifier, LinearConfig, Model, ModelDims, ModelKind,
    ModelMeta, NeuralModel, INFERENCE_BATCH,
};
use crate::tensor::{ParamStore, Tape};
use crate::textprep::{PreprocessedDoc, Vocabulary};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation Micro-F gain before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub clip_norm: f64,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            max_epochs: 30,
            patience: 5,
            val_fraction: 0.1,
            seed: 0,
            clip_norm: 5.0,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("train config: {m}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!(
                "learning rate {} must be finite and non-negative",
                self.lr
            ));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.eps.is_nan()
            || self.eps <= 0.0
        {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch size, epochs and patience must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction <= 0.5) {
            return bad(format!(
                "validation fraction {} not in (0, 0.5]",
                self.val_fraction
            ));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip norm must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub val_micro_f: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainHistory {
    /// Deterministic columns only; wall time lives in [`Self::timing_log`].
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,val_micro_f\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{}", e.epoch, e.loss, e.val_micro_f);
        }
        out
    }

    pub fn timing_log(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            let _ = writeln!(out, "epoch {} took {:.3}s", e.epoch, e.seconds);
        }
        out
    }

    /// Everything except wall time.
    pub fn trajectory(&self) -> Vec<(usize, f64, f64)> {
        self.epochs
            .iter()
            .map(|e| (e.epoch, e.loss, e.val_micro_f))
            .collect()
    }

    pub fn best_val_micro_f(&self) -> f64 {
        self.epochs
            .iter()
            .map(|e| e.val_micro_f)
            .fold(0.0, f64::max)
    }
}

/// Adam with bias correction. Parameters are rounded to 32-bit precision
/// after each step so checkpoints reload exactly.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Adam {
            beta1,
            beta2,
            eps,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Entries with no gradient (`None`) are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id);
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                *x -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
            p.round_to_f32();
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flatten()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().flatten().for_each(|g| *g *= k);
    }
    norm
}

/// Probabilities for `idx` docs, batched like [`Model::probabilities`].
fn neural_probs(
    model: &NeuralModel,
    docs: &[PreprocessedDoc],
    idx: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let parts: Vec<Vec<Vec<f64>>> = idx
        .par_chunks(INFERENCE_BATCH)
        .map(|c| {
            let refs: Vec<&PreprocessedDoc> = c.iter().map(|i| &docs[*i]).collect();
            model.probabilities(&refs)
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

fn multi_hot_counts(probs: &[Vec<f64>], targets: &[&Vec<f64>], threshold: f64) -> MicroCounts {
    let mut c = MicroCounts::default();
    for (p, t) in probs.iter().zip(targets) {
        let pred = predict_labels(p, threshold);
        let tp = pred.iter().filter(|l| t[**l] == 1.0).count();
        let gold = t.iter().filter(|x| **x == 1.0).count();
        c.tp += tp;
        c.fp += pred.len() - tp;
        c.fn_ += gold - tp;
    }
    c
}

/// One loss evaluation and gradient on a batch, PAD row frozen.
pub fn batch_gradients(
    model: &NeuralModel,
    docs: &[&PreprocessedDoc],
    targets: &[&[f64]],
) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
    let mut tape = Tape::new(&model.store);
    let loss = model.net.loss(&mut tape, docs, targets)?;
    let value = tape.value(loss).item()?;
    let mut grads = tape.backward(loss)?.into_param_grads(model.store.len());
    model.net.freeze(&mut grads);
    Ok((value, grads))
}

/// Trains `model` in place and restores the parameters of the best
/// validation epoch. Runs on the calling thread except for validation
/// inference, which does not affect the result.
pub fn train(
    model: &mut NeuralModel,
    docs: &[PreprocessedDoc],
    targets: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if docs.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} docs but {} targets",
            docs.len(),
            targets.len()
        )));
    }
    let mut usable: Vec<usize> = (0..docs.len())
        .filter(|i| docs[*i].num_tokens() > 0)
        .collect();
    if usable.len() < docs.len() {
        warn!(
            "skipping {} documents without tokens",
            docs.len() - usable.len()
        );
    }
    if usable.len() < 2 {
        return Err(Error::Empty(
            "training needs at least two non-empty documents".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    usable.shuffle(&mut rng);
    let n_val =
        ((usable.len() as f64 * cfg.val_fraction).round() as usize).clamp(1, usable.len() - 1);
    let mut val: Vec<usize> = usable[..n_val].to_vec();
    let mut order: Vec<usize> = usable[n_val..].to_vec();
    val.sort_unstable();
    order.sort_unstable();
    let val_targets: Vec<&Vec<f64>> = val.iter().map(|i| &targets[*i]).collect();

    let mut adam = Adam::new(&model.store, cfg.beta1, cfg.beta2, cfg.eps);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let bd: Vec<&PreprocessedDoc> = chunk.iter().map(|i| &docs[*i]).collect();
            let bt: Vec<&[f64]> = chunk.iter().map(|i| targets[*i].as_slice()).collect();
            let (loss, mut grads) = batch_gradients(model, &bd, &bt)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            total += loss * chunk.len() as f64;
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam.step(&mut model.store, &grads, cfg.lr);
        }
        let loss = total / order.len() as f64;
        let probs = neural_probs(model, docs, &val)?;
        let f = multi_hot_counts(&probs, &val_targets, cfg.threshold)
            .scores()
            .f1;
        let seconds = start.elapsed().as_secs_f64();
        info!("epoch {epoch}: loss {loss:.6} val micro-F {f:.4} ({seconds:.1}s)");
        history.epochs.push(EpochStats {
            epoch,
            loss,
            val_micro_f: f,
            seconds,
        });
        if best.as_ref().is_none_or(|(bf, _)| f > *bf) {
            best = Some((f, model.store.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                info!("no validation gain for {since_best} epochs, stopping");
                break;
            }
        }
    }
    if let Some((_, store)) = best {
        model.store.copy_values_from(&store)?;
    }
    Ok(history)
}

/// What to fit and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub kind: ModelKind,
    pub setting: LabelSetting,
    pub dims: ModelDims,
    pub train: TrainConfig,
    pub linear: LinearConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            kind: ModelKind::Hagru,
            setting: LabelSetting::Full,
            dims: ModelDims::default(),
            train: TrainConfig::default(),
            linear: LinearConfig::default(),
        }
    }
}

/// Builds the label space from `train_ds`, fits the configured model on the
/// aligned encoded `docs` and wraps it with its metadata. Training records
/// must carry at least one label.
pub fn fit_model(
    cfg: &FitConfig,
    vocab: &Vocabulary,
    train_ds: &Dataset,
    docs: &[PreprocessedDoc],
) -> Result<(Model, Option<TrainHistory>)> {
    if train_ds.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if docs.len() != train_ds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} encoded docs for {} records",
            docs.len(),
            train_ds.len()
        )));
    }
    if let Some(r) = train_ds.records.iter().find(|r| r.labels.is_empty()) {
        return Err(Error::InvalidLabel(format!(
            "training record `{}` has no labels",
            r.id
        )));
    }
    let ds = cfg.setting.apply(train_ds);
    let labels = LabelSpace::from_dataset(&ds);
    let targets: Vec<Vec<f64>> = ds
        .records
        .iter()
        .map(|r| labels.encode(&r.labels))
        .collect();
    let meta = ModelMeta {
        kind: cfg.kind,
        dims: cfg.dims.clone(),
        setting: cfg.setting,
        labels: labels.clone(),
        vocab_size: vocab.len(),
        vocab_hash: vocab.hash(),
        threshold: cfg.train.threshold,
    };
    if cfg.kind == ModelKind::Linear {
        let m = linear_ova_train(docs, &targets, vocab, &cfg.linear)?;
        return Ok((
            Model {
                meta,
                classifier: Classifier::Linear(m),
            },
            None,
        ));
    }
    let mut net = NeuralModel::new(
        cfg.kind,
        vocab.len(),
        labels.len(),
        &cfg.dims,
        cfg.train.seed,
    )?;
    let history = train(&mut net, docs, &targets, &cfg.train)?;
    Ok((
        Model {
            meta,
            classifier: Classifier::Neural(net),
        },
        Some(history),
    ))
}
