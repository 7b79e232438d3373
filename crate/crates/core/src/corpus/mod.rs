//! Records, label spaces, ICD-style roll-up, corpus statistics and splits.

mod synth;

pub use synth::{generate_synthetic, SynthConfig, SynthCorpus};

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textprep::PreprocessedDoc;

/// One document with its gold label codes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub text: String,
    pub labels: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient: Option<String>,
}

impl Record {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        labels: impl IntoIterator<Item = impl Into<String>>,
    ) -> Self {
        Record {
            id: id.into(),
            text: text.into(),
            labels: labels.into_iter().map(Into::into).collect(),
            patient: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn new(records: Vec<Record>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            validate_labels(r)?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(Dataset { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Record> {
        self.records.iter()
    }
}

fn validate_labels(r: &Record) -> Result<()> {
    for l in &r.labels {
        if l.is_empty() || l.chars().any(char::is_whitespace) {
            return Err(Error::InvalidLabel(l.clone()));
        }
    }
    Ok(())
}

/// Reads one JSON record per line. Blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_jsonl(reader: impl BufRead) -> Result<Dataset> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<jsonl>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        validate_labels(&rec).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id));
        }
        records.push(rec);
    }
    Ok(Dataset { records })
}

pub fn write_jsonl(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in &ds.records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Maps a full code onto its 3-digit ancestor: everything before the
/// first `.`.
pub fn rollup_label(code: &str) -> &str {
    code.split_once('.').map_or(code, |(head, _)| head)
}

pub fn rollup_dataset(ds: &Dataset) -> Dataset {
    let records = ds
        .records
        .iter()
        .map(|r| Record {
            labels: r
                .labels
                .iter()
                .map(|l| rollup_label(l).to_string())
                .collect(),
            ..r.clone()
        })
        .collect();
    Dataset { records }
}

/// Which label granularity a model or evaluation works at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LabelSetting {
    #[default]
    Full,
    Rolled,
}

impl std::fmt::Display for LabelSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LabelSetting::Full => "full",
            LabelSetting::Rolled => "rolled",
        })
    }
}

impl std::str::FromStr for LabelSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(LabelSetting::Full),
            "rolled" => Ok(LabelSetting::Rolled),
            _ => Err(Error::InvalidArgument(format!(
                "unknown label setting `{s}` (full, rolled)"
            ))),
        }
    }
}

impl LabelSetting {
    pub fn apply(self, ds: &Dataset) -> Dataset {
        match self {
            LabelSetting::Full => ds.clone(),
            LabelSetting::Rolled => rollup_dataset(ds),
        }
    }
}

/// Dense label indices ordered by descending training frequency, ties
/// broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "RawLabelSpace")]
pub struct LabelSpace {
    codes: Vec<String>,
    freqs: Vec<usize>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

#[derive(Deserialize)]
struct RawLabelSpace {
    codes: Vec<String>,
    freqs: Vec<usize>,
}

impl From<RawLabelSpace> for LabelSpace {
    fn from(raw: RawLabelSpace) -> Self {
        let mut space = LabelSpace {
            codes: raw.codes,
            freqs: raw.freqs,
            index: HashMap::new(),
        };
        space.rebuild_index();
        space
    }
}

impl LabelSpace {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &ds.records {
            for l in &r.labels {
                *counts.entry(l).or_default() += 1;
            }
        }
        Self::from_counts(counts.into_iter().map(|(c, n)| (c.to_string(), n)))
    }

    pub fn from_counts(counts: impl IntoIterator<Item = (String, usize)>) -> Self {
        let mut pairs: Vec<(String, usize)> = counts.into_iter().collect();
        pairs.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        pairs.dedup_by(|a, b| a.0 == b.0);
        let (codes, freqs): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let mut space = LabelSpace {
            codes,
            freqs,
            index: HashMap::new(),
        };
        space.rebuild_index();
        space
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .codes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn code(&self, idx: usize) -> &str {
        &self.codes[idx]
    }

    pub fn frequencies(&self) -> &[usize] {
        &self.freqs
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    /// Multi-hot target; codes outside the space are ignored.
    pub fn encode(&self, labels: &BTreeSet<String>) -> Vec<f64> {
        let mut t = vec![0.0; self.len()];
        for l in labels {
            if let Some(i) = self.index_of(l) {
                t[i] = 1.0;
            }
        }
        t
    }

    pub fn decode(&self, indices: impl IntoIterator<Item = usize>) -> BTreeSet<String> {
        indices.into_iter().map(|i| self.codes[i].clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub records: usize,
    pub unique_tokens: usize,
    pub avg_tokens: f64,
    pub avg_sentences: f64,
    pub labels: usize,
    pub cardinality: f64,
    pub density: f64,
}

/// Table-style corpus statistics. `tokenized` must align 1:1 with `ds`.
pub fn compute_stats(ds: &Dataset, tokenized: &[PreprocessedDoc]) -> Result<CorpusStats> {
    if ds.is_empty() {
        return Err(Error::Empty("statistics of an empty dataset".into()));
    }
    if tokenized.len() != ds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} records but {} tokenized documents",
            ds.len(),
            tokenized.len()
        )));
    }
    let n = ds.len() as f64;
    let labels: BTreeSet<&str> = ds
        .records
        .iter()
        .flat_map(|r| r.labels.iter().map(String::as_str))
        .collect();
    let assignments: usize = ds.records.iter().map(|r| r.labels.len()).sum();
    let cardinality = assignments as f64 / n;
    let density = if labels.is_empty() {
        0.0
    } else {
        cardinality / labels.len() as f64
    };
    let mut tokens = HashSet::new();
    let mut total_tokens = 0usize;
    let mut total_sentences = 0usize;
    for doc in tokenized {
        total_sentences += doc.sentences.len();
        for s in &doc.sentences {
            total_tokens += s.len();
            tokens.extend(s.iter().copied());
        }
    }
    Ok(CorpusStats {
        records: ds.len(),
        unique_tokens: tokens.len(),
        avg_tokens: total_tokens as f64 / n,
        avg_sentences: total_sentences as f64 / n,
        labels: labels.len(),
        cardinality,
        density,
    })
}

/// Splits so that no patient key lands on both sides. Record order is kept
/// within each half.
pub fn split_patient_disjoint(
    ds: &Dataset,
    patient_of: impl Fn(&Record) -> String,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction {test_fraction} not in (0, 1)"
        )));
    }
    let keys: Vec<String> = ds.records.iter().map(&patient_of).collect();
    let mut patients: Vec<&str> = keys
        .iter()
        .map(String::as_str)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if patients.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 patients to split, found {}",
            patients.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let n_test =
        ((patients.len() as f64 * test_fraction).round() as usize).clamp(1, patients.len() - 1);
    let test_patients: HashSet<&str> = patients[..n_test].iter().copied().collect();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, k) in ds.records.iter().zip(&keys) {
        if test_patients.contains(k.as_str()) {
            test.push(r.clone());
        } else {
            train.push(r.clone());
        }
    }
    Ok((Dataset { records: train }, Dataset { records: test }))
}

/// Patient key from the record's `patient` field, falling back to its id.
pub fn patient_or_id(r: &Record) -> String {
    r.patient.clone().unwrap_or_else(|| r.id.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textprep::PreprocessedDoc;

    fn rec(id: &str, labels: &[&str]) -> Record {
        Record::new(id, "x .", labels.iter().copied())
    }

    #[test]
    fn parses_one_line() {
        let ds = parse_jsonl(r#"{"id":"r1","text":"chest pain .","labels":["786"]}"#.as_bytes())
            .unwrap();
        assert_eq!(ds.records, vec![Record::new("r1", "chest pain .", ["786"])]);
    }

    #[test]
    fn empty_input_is_empty_dataset() {
        assert!(parse_jsonl("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let text = "{\"id\":\"r1\",\"text\":\"a\",\"labels\":[\"1\"]}\n{\"id\":\"r1\",\"text\":\"b\",\"labels\":[\"2\"]}\n";
        let err = parse_jsonl(text.as_bytes()).unwrap_err();
        assert!(
            matches!(&err, Error::DuplicateId(id) if id == "r1"),
            "{err}"
        );
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"id\":\"r1\",\"text\":\"a\",\"labels\":[\"1\"]}\n{not json}\n";
        let err = parse_jsonl(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let text = "{\"id\":\"r1\",\"text\":\"a\",\"labels\":[\"4 28\"]}\n";
        assert!(matches!(
            parse_jsonl(text.as_bytes()).unwrap_err(),
            Error::Parse { line: 1, .. }
        ));
    }

    #[test]
    fn rollup_examples() {
        assert_eq!(rollup_label("682.6"), "682");
        assert_eq!(rollup_label("428"), "428");
        assert_eq!(rollup_label("V45.81"), "V45");
    }

    #[test]
    fn rollup_dataset_dedups() {
        let ds = Dataset::new(vec![
            rec("a", &["428.0", "428.1"]),
            rec("b", &["682.6", "250.00"]),
            rec("c", &[]),
        ])
        .unwrap();
        let r = rollup_dataset(&ds);
        assert_eq!(r.len(), 3);
        assert_eq!(r.records[0].labels, BTreeSet::from(["428".to_string()]));
        assert_eq!(
            r.records[1].labels,
            BTreeSet::from(["250".to_string(), "682".to_string()])
        );
        assert!(r.records[2].labels.is_empty());
    }

    #[test]
    fn label_space_orders_by_frequency_then_code() {
        let ds = Dataset::new(vec![
            rec("a", &["b", "c"]),
            rec("b", &["c", "a"]),
            rec("c", &["b"]),
        ])
        .unwrap();
        let ls = LabelSpace::from_dataset(&ds);
        assert_eq!(ls.codes(), &["b", "c", "a"]);
        assert_eq!(ls.frequencies(), &[2, 2, 1]);
        assert_eq!(ls.index_of("a"), Some(2));
    }

    fn docs(n: usize) -> Vec<PreprocessedDoc> {
        (0..n)
            .map(|_| PreprocessedDoc {
                sentences: vec![vec![2, 3]],
                spans: vec![(0, 3)],
            })
            .collect()
    }

    #[test]
    fn stats_hand_case() {
        let ds = Dataset::new(vec![rec("a", &["A", "B"]), rec("b", &["C"])]).unwrap();
        let s = compute_stats(&ds, &docs(2)).unwrap();
        assert_eq!(s.cardinality, 1.5);
        assert_eq!(s.density, 0.5);
        let ds = Dataset::new(vec![rec("a", &["A"])]).unwrap();
        let s = compute_stats(&ds, &docs(1)).unwrap();
        assert_eq!((s.cardinality, s.density), (1.0, 1.0));
        assert!(compute_stats(&Dataset::default(), &[]).is_err());
    }

    #[test]
    fn split_counts_patients() {
        let records: Vec<Record> = (0..10).map(|i| rec(&format!("r{i}"), &["1"])).collect();
        let ds = Dataset::new(records).unwrap();
        for seed in 0..5 {
            let (train, test) = split_patient_disjoint(&ds, patient_or_id, 0.2, seed).unwrap();
            assert_eq!(test.len(), 2);
            assert_eq!(train.len(), 8);
            let again = split_patient_disjoint(&ds, patient_or_id, 0.2, seed).unwrap();
            assert_eq!(again.1, test);
        }
    }

    #[test]
    fn split_keeps_patients_together() {
        let mut records: Vec<Record> = (0..12).map(|i| rec(&format!("r{i}"), &["1"])).collect();
        for (i, r) in records.iter_mut().enumerate() {
            r.patient = Some(format!("p{}", i / 2));
        }
        let ds = Dataset::new(records).unwrap();
        for seed in 0..10 {
            let (train, test) = split_patient_disjoint(&ds, patient_or_id, 0.3, seed).unwrap();
            let tp: HashSet<_> = train.iter().map(patient_or_id).collect();
            assert!(test.iter().all(|r| !tp.contains(&patient_or_id(r))));
            assert_eq!(train.len() + test.len(), 12);
        }
    }

    #[test]
    fn split_needs_two_patients() {
        let ds = Dataset::new(vec![rec("a", &["1"])]).unwrap();
        assert!(split_patient_disjoint(&ds, patient_or_id, 0.5, 0).is_err());
        assert!(split_patient_disjoint(&ds, patient_or_id, 1.0, 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn rollup_is_idempotent(code in "[A-Z0-9]{1,4}(\\.[0-9]{1,3}){0,2}") {
            let once = rollup_label(&code);
            proptest::prop_assert_eq!(rollup_label(once), once);
        }

        #[test]
        fn rollup_never_grows_label_sets(codes in proptest::collection::btree_set("[0-9]{3}(\\.[0-9]{1,2})?", 0..8)) {
            let ds = Dataset { records: vec![Record { id: "x".into(), text: String::new(), labels: codes.clone(), patient: None }] };
            proptest::prop_assert!(rollup_dataset(&ds).records[0].labels.len() <= codes.len());
        }
    }
}
