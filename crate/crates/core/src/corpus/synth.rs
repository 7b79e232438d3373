//! Seeded planted-trigger corpora.
//!
//! Every label owns one or more short trigger phrases. A document gets a
//! Zipf-distributed set of labels, one trigger sentence per label, and a few
//! noise sentences; all sentences are shuffled and the position of each
//! trigger is recorded. In negation mode, phrases of labels the document
//! does NOT carry are also planted behind a negation cue.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use super::{Dataset, Record};
use crate::error::{Error, Result};

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const CODAS: &[u8] = b"klmnrst";
pub const NEGATION_CUES: &[&str] = &["no", "denies", "without"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub labels: usize,
    pub phrases_per_label: usize,
    pub phrase_len_min: usize,
    pub phrase_len_max: usize,
    /// Distinct trigger words shared by all phrases; 0 means three per label.
    pub trigger_vocab: usize,
    pub noise_vocab: usize,
    pub docs: usize,
    pub mean_labels: f64,
    pub zipf: f64,
    pub negation: bool,
    pub noise_sentences_min: usize,
    pub noise_sentences_max: usize,
    pub sentence_len_min: usize,
    pub sentence_len_max: usize,
    /// Probability that a noise sentence carries a numeric token.
    pub numeric_rate: f64,
    /// Explicit phrases per label, overriding generation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trigger_phrases: Option<Vec<Vec<Vec<String>>>>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            labels: 50,
            phrases_per_label: 1,
            phrase_len_min: 2,
            phrase_len_max: 4,
            trigger_vocab: 0,
            noise_vocab: 400,
            docs: 2000,
            mean_labels: 3.0,
            zipf: 1.0,
            negation: false,
            noise_sentences_min: 3,
            noise_sentences_max: 6,
            sentence_len_min: 4,
            sentence_len_max: 9,
            numeric_rate: 0.2,
            trigger_phrases: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub dataset: Dataset,
    /// Per document: gold code -> index of the sentence carrying its trigger.
    pub triggers: Vec<BTreeMap<String, usize>>,
    /// Per document: negated (non-gold) code -> sentence index.
    pub negated: Vec<BTreeMap<String, usize>>,
    /// Trigger phrases per label, in label order.
    pub phrases: Vec<Vec<Vec<String>>>,
    pub codes: Vec<String>,
}

/// ICD-like code for label `i`: three labels share each rolled-up prefix.
pub fn synthetic_code(i: usize) -> String {
    format!("{}.{}", 100 + i / 3, i % 3)
}

fn noise_word(i: usize) -> String {
    let n = CONSONANTS.len() * VOWELS.len();
    let syl = |k: usize| {
        let c = CONSONANTS[k / VOWELS.len()] as char;
        let v = VOWELS[k % VOWELS.len()] as char;
        format!("{c}{v}")
    };
    format!("{}{}", syl((i / n) % n), syl(i % n))
}

// Trigger words end in a consonant; noise words always end in a vowel.
fn trigger_word(i: usize) -> String {
    let n = CONSONANTS.len() * VOWELS.len() * CODAS.len();
    let syl = |k: usize| {
        let c = CONSONANTS[k / (VOWELS.len() * CODAS.len())] as char;
        let v = VOWELS[(k / CODAS.len()) % VOWELS.len()] as char;
        let e = CODAS[k % CODAS.len()] as char;
        format!("{c}{v}{e}")
    };
    format!("{}{}", syl((i / n) % n), syl(i % n))
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    let bad = |m: &str| Err(Error::InvalidArgument(format!("synth config: {m}")));
    if cfg.labels == 0 {
        return bad("labels must be positive");
    }
    if cfg.phrases_per_label == 0 && cfg.trigger_phrases.is_none() {
        return bad("every label needs at least one trigger phrase");
    }
    if cfg.phrase_len_min == 0 || cfg.phrase_len_min > cfg.phrase_len_max {
        return bad("phrase length range is empty");
    }
    if cfg.noise_sentences_min > cfg.noise_sentences_max
        || cfg.sentence_len_min > cfg.sentence_len_max
    {
        return bad("noise ranges are empty");
    }
    if cfg.noise_sentences_max > 0 && (cfg.noise_vocab == 0 || cfg.sentence_len_min == 0) {
        return bad("noise sentences need a noise vocabulary and positive length");
    }
    if cfg.mean_labels.is_nan() || cfg.mean_labels < 1.0 {
        return bad("mean labels per document must be at least 1");
    }
    if cfg.zipf.is_nan() || cfg.zipf < 0.0 || !(0.0..=1.0).contains(&cfg.numeric_rate) {
        return bad("zipf exponent and numeric rate must be non-negative");
    }
    Ok(())
}

fn make_phrases(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<Vec<String>>>> {
    if let Some(given) = &cfg.trigger_phrases {
        if given.len() != cfg.labels {
            return Err(Error::InvalidArgument(format!(
                "{} phrase lists for {} labels",
                given.len(),
                cfg.labels
            )));
        }
        let mut owner: BTreeMap<&[String], usize> = BTreeMap::new();
        for (l, phrases) in given.iter().enumerate() {
            if phrases.is_empty() || phrases.iter().any(Vec::is_empty) {
                return Err(Error::InvalidArgument(format!(
                    "label {l} has an empty trigger phrase"
                )));
            }
            for p in phrases {
                if let Some(other) = owner.insert(p.as_slice(), l) {
                    if other != l {
                        return Err(Error::InvalidArgument(format!(
                            "trigger phrase collision: `{}` belongs to labels {other} and {l}",
                            p.join(" ")
                        )));
                    }
                }
            }
        }
        return Ok(given.clone());
    }
    let pool = if cfg.trigger_vocab == 0 {
        cfg.labels * 3
    } else {
        cfg.trigger_vocab
    };
    let words: Vec<String> = (0..pool)
        .map(|i| trigger_word(i * 7919 % 354_025))
        .collect();
    let mut seen: HashSet<Vec<String>> = HashSet::new();
    let mut out = Vec::with_capacity(cfg.labels);
    for l in 0..cfg.labels {
        let mut phrases = Vec::with_capacity(cfg.phrases_per_label);
        for _ in 0..cfg.phrases_per_label {
            let mut attempts = 0;
            loop {
                let len = rng.random_range(cfg.phrase_len_min..=cfg.phrase_len_max);
                let phrase: Vec<String> = (0..len)
                    .map(|_| words[rng.random_range(0..pool)].clone())
                    .collect();
                if seen.insert(phrase.clone()) {
                    phrases.push(phrase);
                    break;
                }
                attempts += 1;
                if attempts > 1000 {
                    return Err(Error::InvalidArgument(format!(
                        "trigger phrase collision: cannot find a distinct phrase for label {l} with {pool} trigger words"
                    )));
                }
            }
        }
        out.push(phrases);
    }
    Ok(out)
}

/// Draws `k` distinct indices with probability proportional to `weights`,
/// skipping `exclude`.
fn weighted_without_replacement(
    weights: &[f64],
    k: usize,
    exclude: &BTreeSet<usize>,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut live: Vec<(usize, f64)> = weights
        .iter()
        .enumerate()
        .filter(|(i, _)| !exclude.contains(i))
        .map(|(i, w)| (i, *w))
        .collect();
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k && !live.is_empty() {
        let total: f64 = live.iter().map(|(_, w)| w).sum();
        let mut u = rng.random::<f64>() * total;
        let mut pos = live.len() - 1;
        for (j, (_, w)) in live.iter().enumerate() {
            if u < *w {
                pos = j;
                break;
            }
            u -= w;
        }
        picked.push(live.remove(pos).0);
    }
    picked
}

fn numeric_token(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..4) {
        0 => format!(
            "{}/{}/{}",
            rng.random_range(1..13),
            rng.random_range(1..29),
            rng.random_range(1950..2015)
        ),
        1 => format!(
            "{}/{}",
            rng.random_range(90..180),
            rng.random_range(50..110)
        ),
        2 => format!("{}%", rng.random_range(10..100)),
        _ => format!("{}", rng.random_range(1..500)),
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthCorpus> {
    validate(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let phrases = make_phrases(cfg, &mut rng)?;
    let codes: Vec<String> = (0..cfg.labels).map(synthetic_code).collect();
    let weights: Vec<f64> = (0..cfg.labels)
        .map(|r| 1.0 / ((r + 1) as f64).powf(cfg.zipf))
        .collect();
    let noise: Vec<String> = (0..cfg.noise_vocab).map(noise_word).collect();
    let extra = Poisson::new(cfg.mean_labels - 1.0).ok();

    let mut records = Vec::with_capacity(cfg.docs);
    let mut triggers = Vec::with_capacity(cfg.docs);
    let mut negated = Vec::with_capacity(cfg.docs);
    for d in 0..cfg.docs {
        let k = 1 + extra.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
        let k = k.min(cfg.labels);
        let gold = weighted_without_replacement(&weights, k, &BTreeSet::new(), &mut rng);

        // (label, negated?) for planted sentences, None for noise.
        let mut plan: Vec<Option<(usize, bool)>> = gold.iter().map(|l| Some((*l, false))).collect();
        if cfg.negation {
            let n_neg = rng.random_range(1..=3);
            let exclude: BTreeSet<usize> = gold.iter().copied().collect();
            for l in weighted_without_replacement(&weights, n_neg, &exclude, &mut rng) {
                plan.push(Some((l, true)));
            }
        }
        let n_noise = rng.random_range(cfg.noise_sentences_min..=cfg.noise_sentences_max);
        plan.extend(std::iter::repeat_n(None, n_noise));
        plan.shuffle(&mut rng);

        let mut sentences = Vec::with_capacity(plan.len());
        let mut doc_triggers = BTreeMap::new();
        let mut doc_negated = BTreeMap::new();
        for (idx, slot) in plan.iter().enumerate() {
            let mut tokens: Vec<String> = Vec::new();
            match slot {
                Some((l, neg)) => {
                    let phrase = &phrases[*l][rng.random_range(0..phrases[*l].len())];
                    if *neg {
                        tokens.push(
                            NEGATION_CUES[rng.random_range(0..NEGATION_CUES.len())].to_string(),
                        );
                        doc_negated.insert(codes[*l].clone(), idx);
                    } else {
                        doc_triggers.insert(codes[*l].clone(), idx);
                    }
                    tokens.extend(phrase.iter().cloned());
                }
                None => {
                    let len = rng.random_range(cfg.sentence_len_min..=cfg.sentence_len_max);
                    tokens
                        .extend((0..len).map(|_| noise[rng.random_range(0..noise.len())].clone()));
                    if rng.random::<f64>() < cfg.numeric_rate {
                        let at = rng.random_range(0..=tokens.len());
                        tokens.insert(at, numeric_token(&mut rng));
                    }
                }
            }
            tokens.push(".".into());
            sentences.push(tokens.join(" "));
        }
        let id = format!("doc{d:05}");
        records.push(Record {
            id: id.clone(),
            text: sentences.join(" "),
            labels: gold.iter().map(|l| codes[*l].clone()).collect(),
            patient: Some(id),
        });
        triggers.push(doc_triggers);
        negated.push(doc_negated);
    }
    Ok(SynthCorpus {
        dataset: Dataset { records },
        triggers,
        negated,
        phrases,
        codes,
    })
}
