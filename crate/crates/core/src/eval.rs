//! Micro-averaged scoring, frequency-bin analysis and evaluation reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::ops::Add;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, LabelSetting, LabelSpace};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::textprep::PreprocessedDoc;

pub type LabelSet = BTreeSet<String>;

/// Pair-level counts over every (record, label).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Add for MicroCounts {
    type Output = MicroCounts;

    fn add(self, o: MicroCounts) -> MicroCounts {
        MicroCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MicroCounts {
    /// Counts for one record, restricted to labels accepted by `keep`.
    pub fn of_record(pred: &LabelSet, gold: &LabelSet, keep: impl Fn(&str) -> bool) -> Self {
        let tp = pred.intersection(gold).filter(|l| keep(l)).count();
        MicroCounts {
            tp,
            fp: pred.iter().filter(|l| keep(l)).count() - tp,
            fn_: gold.iter().filter(|l| keep(l)).count() - tp,
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn scores(&self) -> MicroScores {
        let (p, r) = (self.precision(), self.recall());
        let f1 = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        MicroScores {
            precision: p,
            recall: r,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicroScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn aligned(pred: &[LabelSet], gold: &[LabelSet]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction sets for {} gold sets",
            pred.len(),
            gold.len()
        )));
    }
    Ok(())
}

pub fn micro_counts(pred: &[LabelSet], gold: &[LabelSet]) -> Result<MicroCounts> {
    aligned(pred, gold)?;
    Ok(pred
        .par_iter()
        .zip(gold)
        .map(|(p, g)| MicroCounts::of_record(p, g, |_| true))
        .reduce(MicroCounts::default, Add::add))
}

/// Micro precision, recall and F1; an undefined ratio counts as 0.
pub fn micro_f(pred: &[LabelSet], gold: &[LabelSet]) -> Result<MicroScores> {
    Ok(micro_counts(pred, gold)?.scores())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub bin_index: usize,
    /// Frequency ranks (0-based, inclusive) covered by the bin.
    pub first_rank: usize,
    pub last_rank: usize,
    pub mean_freq: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: MicroCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    /// How counts are pooled inside a bin.
    pub aggregation: String,
    pub bin_size: usize,
    pub bins: Vec<BinRow>,
}

impl BinReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# aggregation={} bin_size={}\n",
            self.aggregation, self.bin_size
        );
        out.push_str("bin_index,first_rank,last_rank,mean_freq,precision,recall\n");
        for b in &self.bins {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                b.bin_index, b.first_rank, b.last_rank, b.mean_freq, b.precision, b.recall
            );
        }
        out
    }
}

/// Chunks the label space (already in descending training frequency) into
/// bins of `bin_size` and scores each bin with micro counts over only its
/// labels.
pub fn frequency_bins(
    space: &LabelSpace,
    bin_size: usize,
    pred: &[LabelSet],
    gold: &[LabelSet],
) -> Result<BinReport> {
    if bin_size == 0 {
        return Err(Error::InvalidArgument("bin size must be at least 1".into()));
    }
    aligned(pred, gold)?;
    let n_bins = space.len().div_ceil(bin_size);
    let bin_of = |code: &str| space.index_of(code).map(|i| i / bin_size);
    let mut counts = vec![MicroCounts::default(); n_bins];
    for (p, g) in pred.iter().zip(gold) {
        for l in p.union(g) {
            if let Some(b) = bin_of(l) {
                let (inp, ing) = (p.contains(l), g.contains(l));
                counts[b].tp += usize::from(inp && ing);
                counts[b].fp += usize::from(inp && !ing);
                counts[b].fn_ += usize::from(!inp && ing);
            }
        }
    }
    let freqs = space.frequencies();
    let bins = counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| {
            let first = b * bin_size;
            let last = ((b + 1) * bin_size).min(space.len()) - 1;
            let f = &freqs[first..=last];
            BinRow {
                bin_index: b,
                first_rank: first,
                last_rank: last,
                mean_freq: f.iter().sum::<usize>() as f64 / f.len() as f64,
                precision: c.precision(),
                recall: c.recall(),
                counts: c,
            }
        })
        .collect();
    Ok(BinReport {
        aggregation: "micro".into(),
        bin_size,
        bins,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: LabelSetting,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EvalReport {
    pub fn from_counts(setting: LabelSetting, c: MicroCounts) -> Self {
        let s = c.scores();
        EvalReport {
            setting,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Gold label sets of `test` under `setting`.
pub fn gold_sets(test: &Dataset, setting: LabelSetting) -> Vec<LabelSet> {
    setting
        .apply(test)
        .records
        .into_iter()
        .map(|r| r.labels)
        .collect()
}

/// Scores `model` on the encoded `docs` of `test`. The model must have been
/// trained at the granularity of `setting`.
pub fn evaluate_setting(
    model: &Model,
    docs: &[PreprocessedDoc],
    test: &Dataset,
    setting: LabelSetting,
) -> Result<(EvalReport, Vec<LabelSet>)> {
    if model.meta.setting != setting {
        return Err(Error::LabelSpace(format!(
            "model was trained on {} labels but the evaluation setting is {setting}",
            model.meta.setting
        )));
    }
    if docs.len() != test.len() {
        return Err(Error::InvalidArgument(format!(
            "{} encoded docs for {} records",
            docs.len(),
            test.len()
        )));
    }
    let pred = model.predict(docs)?;
    let gold = gold_sets(test, setting);
    let counts = micro_counts(&pred, &gold)?;
    Ok((EvalReport::from_counts(setting, counts), pred))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sets(v: &[&[&str]]) -> Vec<LabelSet> {
        v.iter()
            .map(|s| s.iter().map(|x| x.to_string()).collect())
            .collect()
    }

    #[test]
    fn hand_case() {
        let gold = sets(&[&["A", "B"], &["C"]]);
        let pred = sets(&[&["A"], &["C", "D"]]);
        let c = micro_counts(&pred, &gold).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (2, 1, 1));
        let s = c.scores();
        assert_eq!((s.precision, s.recall), (2.0 / 3.0, 2.0 / 3.0));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_empty() {
        let gold = sets(&[&["A", "B"], &["C"]]);
        let s = micro_f(&gold, &gold).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = micro_f(&sets(&[&[], &[]]), &gold).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        assert!(micro_f(&gold[..1], &gold).is_err());
    }

    #[test]
    fn bins_split_in_frequency_order() {
        let space = LabelSpace::from_counts([
            ("a".into(), 9),
            ("b".into(), 5),
            ("c".into(), 2),
            ("d".into(), 1),
        ]);
        let gold = sets(&[&["a", "c"], &["a", "b"], &["a"]]);
        let pred = sets(&[&["a"], &["a", "b"], &["a"]]);
        let r = frequency_bins(&space, 2, &pred, &gold).unwrap();
        assert_eq!(r.bins.len(), 2);
        assert_eq!((r.bins[0].first_rank, r.bins[0].last_rank), (0, 1));
        assert_eq!(r.bins[0].mean_freq, 7.0);
        assert_eq!((r.bins[0].precision, r.bins[0].recall), (1.0, 1.0));
        assert_eq!(r.bins[1].recall, 0.0);
        let odd = frequency_bins(&space, 3, &pred, &gold).unwrap();
        assert_eq!(odd.bins[1].first_rank, odd.bins[1].last_rank);
        assert!(r
            .to_csv()
            .starts_with("# aggregation=micro bin_size=2\nbin_index,"));
        assert!(frequency_bins(&space, 0, &pred, &gold).is_err());
    }

    #[test]
    fn report_json_names_fn() {
        let r = EvalReport::from_counts(
            LabelSetting::Rolled,
            MicroCounts {
                tp: 1,
                fp: 0,
                fn_: 1,
            },
        );
        let j = r.to_json().unwrap();
        assert!(j.contains("\"fn\": 1") && j.contains("\"setting\": \"rolled\""));
    }
}
