//! tf-idf bag of words with independent linear classifiers per label,
//! fitted by Pegasos-style hinge-loss SGD.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::find;
use crate::tensor::{ParamStore, Tensor};
use crate::textprep::{PreprocessedDoc, Vocabulary, PAD, UNK};

static STOP_WORDS_EN: &str = include_str!("../../data/stopwords_en.txt");

/// The bundled 179-word English stop list.
pub fn default_stop_words() -> Vec<String> {
    STOP_WORDS_EN
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Replaces the bundled stop list when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_words: Option<Vec<String>>,
}

impl Default for LinearConfig {
    fn default() -> Self {
        LinearConfig {
            lambda: 1e-4,
            epochs: 10,
            seed: 0,
            stop_words: None,
        }
    }
}

/// Sparse vector as `(index, value)` pairs sorted by index.
pub type SparseVec = Vec<(usize, f64)>;

/// `idf(t) = ln((1 + N) / (1 + df(t))) + 1` for every vocabulary id. Stop
/// words and the reserved ids get 0, which [`tfidf_vector`] treats as
/// excluded; real entries are always at least 1.
pub fn fit_idf(docs: &[PreprocessedDoc], vocab: &Vocabulary, stop_words: &[String]) -> Vec<f64> {
    let n = docs.len() as f64;
    let mut df = vec![0usize; vocab.len()];
    for doc in docs {
        let seen: HashSet<usize> = doc.sentences.iter().flatten().copied().collect();
        for t in seen {
            df[t] += 1;
        }
    }
    let stop: HashSet<&str> = stop_words.iter().map(String::as_str).collect();
    (0..vocab.len())
        .map(|t| {
            if t == PAD || t == UNK || stop.contains(vocab.token(t)) {
                0.0
            } else {
                ((1.0 + n) / (1.0 + df[t] as f64)).ln() + 1.0
            }
        })
        .collect()
}

/// L2-normalized `tf * idf` over the non-excluded tokens of a document.
pub fn tfidf_vector(tokens: &[usize], idf: &[f64]) -> SparseVec {
    let mut tf: BTreeMap<usize, usize> = BTreeMap::new();
    for &t in tokens {
        if idf.get(t).is_some_and(|w| *w != 0.0) {
            *tf.entry(t).or_default() += 1;
        }
    }
    let mut v: SparseVec = tf
        .into_iter()
        .map(|(t, c)| (t, c as f64 * idf[t]))
        .collect();
    let norm = v.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|(_, x)| *x /= norm);
    }
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearOvaModel {
    pub idf: Vec<f64>,
    /// `labels x vocab`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearOvaModel {
    pub fn num_labels(&self) -> usize {
        self.bias.len()
    }

    /// Margins `w . x + b` for every label.
    pub fn scores(&self, tokens: &[usize]) -> Vec<f64> {
        let x = tfidf_vector(tokens, &self.idf);
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| x.iter().map(|(j, v)| w[*j] * v).sum::<f64>() + b)
            .collect()
    }

    /// Labels with a positive margin.
    pub fn decide(&self, tokens: &[usize]) -> Vec<usize> {
        self.scores(tokens)
            .into_iter()
            .enumerate()
            .filter(|(_, s)| *s > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_store(&self) -> Result<ParamStore> {
        let (l, v) = (self.num_labels(), self.idf.len());
        let mut store = ParamStore::new();
        store.insert("linear.W", Tensor::matrix(l, v, self.weights.concat())?)?;
        store.insert("linear.b", Tensor::vector(self.bias.clone()))?;
        store.insert("linear.idf", Tensor::vector(self.idf.clone()))?;
        Ok(store)
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let w = store.get(find(store, "linear.W")?);
        let b = store.get(find(store, "linear.b")?);
        let idf = store.get(find(store, "linear.idf")?);
        if w.rows() != b.len() || w.cols() != idf.len() {
            return Err(Error::Checkpoint(format!(
                "linear parameter shapes {:?}, {:?}, {:?} disagree",
                w.shape(),
                b.shape(),
                idf.shape()
            )));
        }
        Ok(LinearOvaModel {
            idf: idf.data().to_vec(),
            weights: (0..w.rows()).map(|i| w.row(i).to_vec()).collect(),
            bias: b.data().to_vec(),
        })
    }

    /// The same model after a pass through 32-bit storage.
    pub fn rounded(&self) -> Result<Self> {
        Self::from_store(&self.to_store()?)
    }
}

/// Pegasos-style SGD on `lambda/2 |w|^2 + hinge`, with a constant bias
/// feature appended at index `dim`.
fn pegasos(
    xs: &[SparseVec],
    ys: &[f64],
    dim: usize,
    lambda: f64,
    epochs: usize,
    seed: u64,
) -> (Vec<f64>, f64) {
    // w = s * v, so the per-step shrink is O(1).
    let mut v = vec![0.0; dim + 1];
    let mut s = 1.0f64;
    let mut sq = 0.0f64;
    let radius = 1.0 / lambda.sqrt();
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Offset schedule so the first step is lambda^(-1/4) rather than 1/lambda.
    let t0 = 1.0 / (lambda * lambda.powf(-0.25));
    let mut t = 0usize;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * (t as f64 + t0));
            let (x, y) = (&xs[i], ys[i]);
            let margin = y * s * (x.iter().map(|(j, xj)| v[*j] * xj).sum::<f64>() + v[dim]);
            let shrink = 1.0 - eta * lambda;
            if shrink <= 0.0 {
                v.fill(0.0);
                s = 1.0;
                sq = 0.0;
            } else {
                s *= shrink;
            }
            if margin < 1.0 {
                let c = eta * y / s;
                for &(j, xj) in x.iter().chain(std::iter::once(&(dim, 1.0))) {
                    let old = v[j];
                    v[j] += c * xj;
                    sq += v[j] * v[j] - old * old;
                }
            }
            let norm = s * sq.max(0.0).sqrt();
            if norm > radius {
                s *= radius / norm;
            }
            if s < 1e-9 {
                v.iter_mut().for_each(|x| *x *= s);
                sq = v.iter().map(|x| x * x).sum();
                s = 1.0;
            }
        }
    }
    let w: Vec<f64> = v.iter().map(|x| x * s).collect();
    let b = w[dim];
    (w[..dim].to_vec(), b)
}

/// Trains one classifier per label (in parallel). Labels without positive
/// training examples get an always-negative classifier.
pub fn linear_ova_train(
    docs: &[PreprocessedDoc],
    targets: &[Vec<f64>],
    vocab: &Vocabulary,
    cfg: &LinearConfig,
) -> Result<LinearOvaModel> {
    if docs.is_empty() {
        return Err(Error::Empty("linear training set".into()));
    }
    if targets.len() != docs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} docs but {} targets",
            docs.len(),
            targets.len()
        )));
    }
    if cfg.lambda.is_nan() || cfg.lambda <= 0.0 || cfg.epochs == 0 {
        return Err(Error::InvalidArgument(
            "linear lambda and epochs must be positive".into(),
        ));
    }
    let labels = targets[0].len();
    let stop = cfg.stop_words.clone().unwrap_or_else(default_stop_words);
    let idf = fit_idf(docs, vocab, &stop);
    let xs: Vec<SparseVec> = docs
        .par_iter()
        .map(|d| tfidf_vector(&d.flat(), &idf))
        .collect();
    let dim = vocab.len();
    let fitted: Vec<(Vec<f64>, f64)> = (0..labels)
        .into_par_iter()
        .map(|l| {
            let ys: Vec<f64> = targets
                .iter()
                .map(|t| if t[l] == 1.0 { 1.0 } else { -1.0 })
                .collect();
            if ys.iter().all(|y| *y < 0.0) {
                return (vec![0.0; dim], -1.0);
            }
            let seed = cfg.seed ^ (l as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            pegasos(&xs, &ys, dim, cfg.lambda, cfg.epochs, seed)
        })
        .collect();
    let (weights, bias) = fitted.into_iter().unzip();
    LinearOvaModel { idf, weights, bias }.rounded()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(ids: &[usize]) -> PreprocessedDoc {
        PreprocessedDoc {
            sentences: vec![ids.to_vec()],
            spans: vec![(0, 1)],
        }
    }

    fn vocab(words: &[&str]) -> Vocabulary {
        Vocabulary::build([words.to_vec()], 1).unwrap()
    }

    #[test]
    fn stop_list_has_179_words() {
        let w = default_stop_words();
        assert_eq!(w.len(), 179);
        assert!(w.iter().any(|s| s == "the"));
    }

    #[test]
    fn idf_of_ubiquitous_token_is_one() {
        let v = vocab(&["x", "the"]);
        let x = v.id("x").unwrap();
        let docs = vec![doc(&[x]), doc(&[x])];
        let idf = fit_idf(&docs, &v, &default_stop_words());
        assert_eq!(idf[x], 1.0);
        assert_eq!(idf[v.id("the").unwrap()], 0.0);
        assert_eq!(tfidf_vector(&[x], &idf), vec![(x, 1.0)]);
        assert!(tfidf_vector(&[v.id("the").unwrap()], &idf).is_empty());
        assert!(tfidf_vector(&[], &idf).is_empty());
    }

    #[test]
    fn separable_toy_and_absent_label() {
        let v = vocab(&["good", "bad"]);
        let (g, b) = (v.id("good").unwrap(), v.id("bad").unwrap());
        let docs = vec![doc(&[g]), doc(&[b])];
        let targets = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        let m = linear_ova_train(&docs, &targets, &v, &LinearConfig::default()).unwrap();
        assert_eq!(m.decide(&[g]), vec![0]);
        assert!(m.decide(&[b]).is_empty());
        assert!(docs.iter().all(|d| !m.decide(&d.flat()).contains(&1)));
    }

    #[test]
    fn xor_is_not_linearly_separable() {
        let v = vocab(&["p", "np", "q", "nq"]);
        let id = |w| v.id(w).unwrap();
        // Each bit is one of two tokens, so every vector is (e_a + e_b) / sqrt 2
        // and scores are additive: f(p,q) + f(np,nq) = f(p,nq) + f(np,q).
        let docs = vec![
            doc(&[id("p"), id("q")]),
            doc(&[id("p"), id("nq")]),
            doc(&[id("np"), id("q")]),
            doc(&[id("np"), id("nq")]),
        ];
        let targets = vec![vec![0.0], vec![1.0], vec![1.0], vec![0.0]];
        let m = linear_ova_train(&docs, &targets, &v, &LinearConfig::default()).unwrap();
        let correct = docs
            .iter()
            .zip(&targets)
            .filter(|(d, t)| m.decide(&d.flat()).contains(&0) == (t[0] == 1.0))
            .count();
        assert!(correct < 4);
    }

    #[test]
    fn store_roundtrip() {
        let m = LinearOvaModel {
            idf: vec![0.0, 0.0, 1.5],
            weights: vec![vec![0.0, 0.0, 0.25]],
            bias: vec![-0.5],
        };
        assert_eq!(
            LinearOvaModel::from_store(&m.to_store().unwrap()).unwrap(),
            m
        );
    }
}
