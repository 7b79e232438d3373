//! Text normalization: sentence segmentation, tokenization, digit
//! pseudo-tokens, min-count vocabulary and edit-distance OOV mapping.

mod bktree;
mod vocab;

pub use bktree::{brute_force_nearest, levenshtein, EditDistanceIndex};
pub use vocab::{Vocabulary, PAD, PAD_TOKEN, UNK, UNK_TOKEN};

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    /// Lowercased surface form.
    pub text: String,
    /// Byte offsets into the source text.
    pub start: usize,
    pub end: usize,
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric()
}

/// Rule-based tokenizer: lowercase, split on whitespace, peel leading and
/// trailing punctuation into single-character tokens and split a final
/// `'s` clitic.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut push = |s: usize, e: usize| {
        out.push(Token {
            text: text[s..e].to_lowercase(),
            start: s,
            end: e,
        })
    };
    let mut chunk_start = None;
    let mut bounds = Vec::new();
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = chunk_start.take() {
                bounds.push((s, i));
            }
        } else if chunk_start.is_none() {
            chunk_start = Some(i);
        }
    }
    if let Some(s) = chunk_start {
        bounds.push((s, text.len()));
    }
    for (mut s, mut e) in bounds {
        let chunk = &text[s..e];
        let mut trailing = Vec::new();
        // Leading punctuation.
        for c in chunk.chars() {
            if s < e && is_punct(c) {
                push(s, s + c.len_utf8());
                s += c.len_utf8();
            } else {
                break;
            }
        }
        // Trailing punctuation, collected right to left.
        while s < e {
            let c = text[s..e].chars().next_back().expect("non-empty");
            if !is_punct(c) {
                break;
            }
            e -= c.len_utf8();
            trailing.push((e, e + c.len_utf8()));
        }
        if s < e {
            let core = &text[s..e];
            let clitic = ["'s", "’s", "'S", "’S"]
                .iter()
                .find(|cl| core.len() > cl.len() && core.ends_with(**cl));
            match clitic {
                Some(cl) => {
                    let split = e - cl.len();
                    push(s, split);
                    push(split, e);
                }
                None => push(s, e),
            }
        }
        for (ts, te) in trailing.into_iter().rev() {
            push(ts, te);
        }
    }
    out
}

/// Replaces every decimal digit with `d`.
pub fn map_pseudo(token: &str) -> String {
    token
        .chars()
        .map(|c| if c.is_ascii_digit() { 'd' } else { c })
        .collect()
}

pub const DEFAULT_ABBREVIATIONS: &[&str] = &[
    "dr", "mr", "mrs", "ms", "prof", "st", "vs", "etc", "approx", "appt", "dept", "jr", "sr",
    "e.g", "i.e", "p.o", "b.i.d", "t.i.d", "q.i.d", "q.d", "h.s", "fig",
];

/// Sentence spans as byte ranges, trimmed of surrounding whitespace.
///
/// Splits after `.`, `!` or `?` when followed by whitespace, and at blank
/// lines. A period closing a single letter or a listed abbreviation does
/// not end a sentence.
pub fn split_sentences(text: &str, abbreviations: &[String]) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut cuts = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (k, &(i, c)) in chars.iter().enumerate() {
        let next = chars.get(k + 1).map(|x| x.1);
        match c {
            '.' | '!' | '?' if next.is_none_or(char::is_whitespace) => {
                if c == '.' {
                    let word_start = text[..i].rfind(char::is_whitespace).map_or(0, |p| {
                        p + text[p..].chars().next().map_or(1, char::len_utf8)
                    });
                    let word = text[word_start..i].to_lowercase();
                    let single_letter =
                        word.chars().count() == 1 && word.chars().all(char::is_alphabetic);
                    if single_letter
                        || abbreviations
                            .iter()
                            .any(|a| a.trim_end_matches('.') == word)
                    {
                        continue;
                    }
                }
                cuts.push(i + c.len_utf8());
            }
            '\n' => {
                // Blank line: newline, optional horizontal space, newline.
                let mut j = i + 1;
                while j < bytes.len()
                    && (bytes[j] == b' ' || bytes[j] == b'\t' || bytes[j] == b'\r')
                {
                    j += 1;
                }
                if j < bytes.len() && bytes[j] == b'\n' {
                    cuts.push(i);
                }
            }
            _ => {}
        }
    }
    cuts.push(text.len());
    let mut out = Vec::new();
    let mut start = 0;
    for cut in cuts {
        if cut < start {
            continue;
        }
        let piece = &text[start..cut];
        let lead = piece.len() - piece.trim_start().len();
        let trail = piece.len() - piece.trim_end().len();
        if lead + trail < piece.len() {
            out.push((start + lead, cut - trail));
        }
        start = cut;
    }
    out
}

/// A document as sentences of vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessedDoc {
    pub sentences: Vec<Vec<usize>>,
    /// Byte span of each sentence in the source text.
    pub spans: Vec<(usize, usize)>,
}

impl PreprocessedDoc {
    pub fn flat(&self) -> Vec<usize> {
        self.sentences.iter().flatten().copied().collect()
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreprocessedDataset {
    /// Aligned with the source dataset's records.
    pub docs: Vec<PreprocessedDoc>,
    /// Ids of records that reduced to no sentences.
    pub empty: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub min_count: usize,
    /// Edit-distance search radius for OOV tokens; `None` is unbounded.
    pub radius: Option<usize>,
    pub abbreviations: Vec<String>,
    /// Optional cap on tokens per document; `None` keeps everything.
    pub max_tokens: Option<usize>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            min_count: 5,
            radius: Some(3),
            abbreviations: DEFAULT_ABBREVIATIONS
                .iter()
                .map(|s| s.to_string())
                .collect(),
            max_tokens: None,
        }
    }
}

/// Sentences of normalized (lowercased, pseudo-mapped) tokens, with spans.
pub fn normalize(text: &str, abbreviations: &[String]) -> Vec<(Vec<String>, (usize, usize))> {
    split_sentences(text, abbreviations)
        .into_iter()
        .filter_map(|(s, e)| {
            let toks: Vec<String> = tokenize(&text[s..e])
                .into_iter()
                .map(|t| map_pseudo(&t.text))
                .collect();
            (!toks.is_empty()).then_some((toks, (s, e)))
        })
        .collect()
}

/// Builds the vocabulary from training texts only.
pub fn build_vocab(ds: &Dataset, cfg: &PreprocessConfig) -> Result<Vocabulary> {
    let docs: Vec<Vec<String>> = ds
        .records
        .par_iter()
        .map(|r| {
            normalize(&r.text, &cfg.abbreviations)
                .into_iter()
                .flat_map(|(t, _)| t)
                .collect()
        })
        .collect();
    Vocabulary::build(
        docs.iter().map(|d| d.iter().map(String::as_str)),
        cfg.min_count,
    )
}

pub fn build_index(vocab: &Vocabulary, radius: Option<usize>) -> EditDistanceIndex {
    EditDistanceIndex::new(vocab.entries().map(|(t, f)| (t.to_string(), f)), radius)
}

/// In-vocabulary tokens map to themselves; others to the nearest token in
/// the index, or `<UNK>` when nothing lies within the radius.
pub fn nearest_in_vocab<'a>(
    token: &'a str,
    vocab: &'a Vocabulary,
    index: &'a EditDistanceIndex,
) -> &'a str {
    if vocab.contains(token) {
        return token;
    }
    index.nearest(token).map_or(UNK_TOKEN, |(t, _)| t)
}

/// Encodes texts against a fixed vocabulary.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    pub vocab: Vocabulary,
    pub index: EditDistanceIndex,
    pub config: PreprocessConfig,
}

impl Preprocessor {
    pub fn new(vocab: Vocabulary, config: PreprocessConfig) -> Self {
        let index = build_index(&vocab, config.radius);
        Preprocessor {
            vocab,
            index,
            config,
        }
    }

    pub fn fit(train: &Dataset, config: PreprocessConfig) -> Result<Self> {
        let vocab = build_vocab(train, &config)?;
        Ok(Self::new(vocab, config))
    }

    fn resolve(&self, token: &str) -> usize {
        let t = nearest_in_vocab(token, &self.vocab, &self.index);
        self.vocab.id(t).unwrap_or(UNK)
    }

    fn encode_with(&self, text: &str, oov: &HashMap<String, usize>) -> PreprocessedDoc {
        let mut sentences = Vec::new();
        let mut spans = Vec::new();
        let mut budget = self.config.max_tokens.unwrap_or(usize::MAX);
        for (toks, span) in normalize(text, &self.config.abbreviations) {
            if budget == 0 {
                break;
            }
            let ids: Vec<usize> = toks
                .iter()
                .take(budget)
                .map(|t| {
                    self.vocab
                        .id(t)
                        .or_else(|| oov.get(t).copied())
                        .unwrap_or_else(|| self.resolve(t))
                })
                .collect();
            budget -= ids.len();
            sentences.push(ids);
            spans.push(span);
        }
        PreprocessedDoc { sentences, spans }
    }

    pub fn encode(&self, text: &str) -> PreprocessedDoc {
        self.encode_with(text, &HashMap::new())
    }

    /// Encodes every record. Distinct OOV tokens are resolved once up front,
    /// so the result does not depend on processing order.
    pub fn preprocess_dataset(&self, ds: &Dataset) -> PreprocessedDataset {
        let oov: BTreeSet<String> = ds
            .records
            .par_iter()
            .map(|r| {
                normalize(&r.text, &self.config.abbreviations)
                    .into_iter()
                    .flat_map(|(t, _)| t)
                    .filter(|t| !self.vocab.contains(t))
                    .collect::<BTreeSet<String>>()
            })
            .reduce(BTreeSet::new, |mut a, b| {
                a.extend(b);
                a
            });
        let oov: HashMap<String, usize> = oov
            .into_par_iter()
            .map(|t| {
                let id = self.resolve(&t);
                (t, id)
            })
            .collect();
        let docs: Vec<PreprocessedDoc> = ds
            .records
            .par_iter()
            .map(|r| self.encode_with(&r.text, &oov))
            .collect();
        let empty = ds
            .records
            .iter()
            .zip(&docs)
            .filter(|(_, d)| d.is_empty())
            .map(|(r, _)| r.id.clone())
            .collect();
        PreprocessedDataset { docs, empty }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Record;
    use proptest::prelude::*;

    fn texts(toks: &[Token]) -> Vec<&str> {
        toks.iter().map(|t| t.text.as_str()).collect()
    }

    #[test]
    fn tokenizes_clitics_and_punctuation() {
        assert_eq!(
            texts(&tokenize("Alzheimer's dementia.")),
            ["alzheimer", "'s", "dementia", "."]
        );
        assert!(tokenize("").is_empty());
        let t = tokenize("A  B");
        assert_eq!(texts(&t), ["a", "b"]);
        assert_eq!((t[0].start, t[0].end, t[1].start, t[1].end), (0, 1, 3, 4));
        assert_eq!(
            texts(&tokenize("(EF 50%), on 11/2/1986.")),
            ["(", "ef", "50", "%", ")", ",", "on", "11/2/1986", "."]
        );
    }

    #[test]
    fn pseudo_tokens() {
        assert_eq!(map_pseudo("11/2/1986"), "dd/d/dddd");
        assert_eq!(map_pseudo("abc"), "abc");
        assert_eq!(map_pseudo("50%"), "dd%");
    }

    fn sents(text: &str, abbr: &[&str]) -> Vec<String> {
        let abbr: Vec<String> = abbr.iter().map(|s| s.to_string()).collect();
        split_sentences(text, &abbr)
            .into_iter()
            .map(|(s, e)| text[s..e].to_string())
            .collect()
    }

    #[test]
    fn sentence_splitting() {
        assert_eq!(
            sents("chest pain . no fever .", &[]),
            ["chest pain .", "no fever ."]
        );
        assert_eq!(sents("dr. smith saw pt.", &["dr"]), ["dr. smith saw pt."]);
        assert_eq!(sents("line one\n\nline two", &[]), ["line one", "line two"]);
        assert_eq!(
            sents("seen by j. doe today. ok", &[]),
            ["seen by j. doe today.", "ok"]
        );
        assert_eq!(sents("really?! yes", &[]), ["really?!", "yes"]);
        assert!(sents("   \n\n  ", &[]).is_empty());
    }

    #[test]
    fn nearest_examples() {
        let v = Vocabulary::build([["cellulitis"; 5].to_vec(), ["heart"; 5].to_vec()], 5).unwrap();
        let idx = build_index(&v, Some(3));
        assert_eq!(nearest_in_vocab("celulitis", &v, &idx), "cellulitis");
        assert_eq!(nearest_in_vocab("heart", &v, &idx), "heart");
        assert_eq!(nearest_in_vocab("qqqqqqqqqq", &v, &idx), UNK_TOKEN);

        let mut corpus = vec!["cab"; 10];
        corpus.extend(["car"; 3]);
        let v = Vocabulary::build([corpus], 1).unwrap();
        let idx = build_index(&v, Some(3));
        assert_eq!(nearest_in_vocab("cat", &v, &idx), "cab");
        let brute = brute_force_nearest(v.entries(), "cat", Some(3)).unwrap();
        assert_eq!(brute, ("cab", 1));
        assert_eq!(levenshtein("cat", "car"), 1);
    }

    fn ds(texts: &[&str]) -> Dataset {
        Dataset::new(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Record::new(format!("r{i}"), *t, ["1"]))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn pipeline_composition() {
        let train = ds(&["12/3/1999 . cellulitis of leg ."; 5]);
        let cfg = PreprocessConfig::default();
        let p = Preprocessor::fit(&train, cfg).unwrap();
        let doc = p.encode("11/2/1986 .");
        assert_eq!(
            doc.sentences,
            vec![vec![
                p.vocab.id("dd/d/dddd").unwrap(),
                p.vocab.id(".").unwrap()
            ]]
        );
        let doc = p.encode("celulitis .");
        assert_eq!(doc.sentences[0][0], p.vocab.id("cellulitis").unwrap());

        let test = ds(&["celulitis of the leg .", "", "11/2/1986 . leg"]);
        let a = p.preprocess_dataset(&test);
        let b = p.preprocess_dataset(&test);
        assert_eq!(a, b);
        assert_eq!(a.empty, vec!["r1".to_string()]);
        assert_eq!(a.docs[2].sentences.len(), 2);
        assert_eq!(
            a.docs[0].sentences[0][0],
            p.encode("celulitis").sentences[0][0]
        );
    }

    #[test]
    fn token_cap_truncates() {
        let train = ds(&["a b c d e ."; 5]);
        let cfg = PreprocessConfig {
            max_tokens: Some(4),
            ..PreprocessConfig::default()
        };
        let p = Preprocessor::fit(&train, cfg).unwrap();
        assert_eq!(p.encode("a b c . d e .").num_tokens(), 4);
    }

    #[test]
    fn numeric_strings_shrink_the_vocabulary() {
        let text: Vec<String> = (0..200)
            .map(|i| format!("on {}/{}/19{:02} seen .", 1 + i % 12, 1 + i % 28, i % 100))
            .collect();
        let raw: BTreeSet<String> = text
            .iter()
            .flat_map(|t| tokenize(t).into_iter().map(|t| t.text))
            .collect();
        let train = Dataset::new(
            text.iter()
                .enumerate()
                .map(|(i, t)| Record::new(format!("r{i}"), t.as_str(), ["1"]))
                .collect(),
        )
        .unwrap();
        let v = build_vocab(&train, &PreprocessConfig::default()).unwrap();
        assert!(v.len() - 2 < raw.len(), "{} vs {}", v.len(), raw.len());
    }

    proptest! {
        #[test]
        fn pseudo_is_idempotent_and_length_preserving(s in "\\PC{0,20}") {
            let once = map_pseudo(&s);
            prop_assert_eq!(once.chars().count(), s.chars().count());
            prop_assert_eq!(map_pseudo(&once), once);
        }

        #[test]
        fn spans_reconstruct_tokens(s in "[a-zA-Z0-9 .,'()%/\n-]{0,60}") {
            let toks = tokenize(&s);
            let from_spans: Vec<String> = toks.iter().map(|t| s[t.start..t.end].to_lowercase()).collect();
            prop_assert_eq!(from_spans.join(" "), texts(&toks).join(" "));
            for w in toks.windows(2) {
                prop_assert!(w[0].end <= w[1].start);
            }
        }

        #[test]
        fn sentence_spans_are_increasing(s in "[a-z .!?\n]{0,80}") {
            let spans = split_sentences(&s, &[]);
            for (a, b) in &spans {
                prop_assert!(a < b);
            }
            for w in spans.windows(2) {
                prop_assert!(w[0].1 <= w[1].0);
            }
        }
    }
}
