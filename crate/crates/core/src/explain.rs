//! Explanations: max-pool trigrams for the CNN, attention weights for
//! HA-GRU, and static HTML + JSON reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::LabelSpace;
use crate::error::{Error, Result};
use crate::models::{Network, NeuralModel};
use crate::tensor::Tape;
use crate::textprep::{map_pseudo, tokenize, PreprocessedDoc, Vocabulary};

/// Attention weights of one HA-GRU forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    /// Per label, one weight per sentence.
    pub sentence_weights: Vec<Vec<f64>>,
    /// Per sentence, one weight per word; shared by every label.
    pub word_weights: Vec<Vec<f64>>,
    pub spans: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NgramTrigger {
    pub channel: usize,
    /// Window start in the (padded) flat token sequence.
    pub window: usize,
    pub tokens: Vec<String>,
    pub response: f64,
}

fn first_argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, x) in v.iter().enumerate() {
        if best.is_none_or(|b| *x > v[b]) {
            best = Some(i);
        }
    }
    best
}

/// The winning trigram of every CNN channel. With `label`, only channels
/// whose contribution `W[label, c] * response` is positive are kept.
pub fn cnn_triggers(
    model: &NeuralModel,
    vocab: &Vocabulary,
    doc: &PreprocessedDoc,
    label: Option<usize>,
) -> Result<Vec<NgramTrigger>> {
    let Network::Cnn(cnn) = &model.net else {
        return Err(Error::InvalidArgument(format!(
            "trigram triggers need cnn, not {}",
            model.net.kind()
        )));
    };
    let labels = cnn.output.output;
    if let Some(l) = label.filter(|l| *l >= labels) {
        return Err(Error::LabelSpace(format!(
            "label index {l} outside {labels} labels"
        )));
    }
    let mut tape = Tape::new(&model.store);
    let pooled = cnn.pool(&mut tape, &doc.flat())?;
    let values = tape.value(pooled.pooled).data().to_vec();
    let w = model.store.get(cnn.output.w);
    let width = cnn.conv.width;
    Ok(pooled
        .argmax
        .iter()
        .enumerate()
        .filter(|(c, _)| label.is_none_or(|l| w.get(l, *c) * values[*c] > 0.0))
        .map(|(c, &window)| NgramTrigger {
            channel: c,
            window,
            tokens: pooled.ids[window..window + width]
                .iter()
                .map(|t| vocab.token(*t).to_string())
                .collect(),
            response: values[c],
        })
        .collect())
}

/// `(top sentence, top word within it)` for `label`; ties go to the lowest
/// index.
pub fn hagru_explain(trace: &AttentionTrace, label: usize) -> Result<(usize, usize)> {
    let weights = trace.sentence_weights.get(label).ok_or_else(|| {
        Error::LabelSpace(format!(
            "label index {label} outside {} labels",
            trace.sentence_weights.len()
        ))
    })?;
    let s = first_argmax(weights).ok_or_else(|| Error::Empty("trace without sentences".into()))?;
    let w = trace
        .word_weights
        .get(s)
        .and_then(|ww| first_argmax(ww))
        .ok_or_else(|| Error::Empty(format!("sentence {s} has no word weights")))?;
    Ok((s, w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelExplanation {
    pub code: String,
    pub predicted: bool,
    pub gold: bool,
    pub probability: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sentence_weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_sentence: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_word: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub triggers: Vec<NgramTrigger>,
}

/// Everything a report shows; the JSON file is this struct, so a report can
/// be re-rendered from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub doc_id: String,
    pub labels: Vec<LabelExplanation>,
    #[serde(default)]
    pub word_weights: Vec<Vec<f64>>,
    pub sentences: Vec<String>,
    /// Normalized tokens per sentence, aligned with `word_weights`.
    pub tokens: Vec<Vec<String>>,
}

/// Display tokens of each sentence span, trimmed to the encoded lengths.
fn sentence_tokens(text: &str, doc: &PreprocessedDoc) -> (Vec<String>, Vec<Vec<String>>) {
    doc.spans
        .iter()
        .zip(&doc.sentences)
        .map(|(&(s, e), ids)| {
            let sent = text.get(s..e).unwrap_or_default();
            let toks = tokenize(sent)
                .into_iter()
                .map(|t| map_pseudo(&t.text))
                .take(ids.len())
                .collect();
            (sent.trim().to_string(), toks)
        })
        .unzip()
}

/// Labels worth explaining: predicted or gold, in label-space order.
fn shown_labels(
    space: &LabelSpace,
    probs: &[f64],
    threshold: f64,
    gold: &BTreeSet<String>,
) -> Vec<usize> {
    (0..space.len())
        .filter(|l| probs[*l] > threshold || gold.contains(space.code(*l)))
        .collect()
}

pub struct ExplainInput<'a> {
    pub doc_id: &'a str,
    pub text: &'a str,
    pub doc: &'a PreprocessedDoc,
    pub gold: &'a BTreeSet<String>,
    pub labels: &'a LabelSpace,
    pub threshold: f64,
}

pub fn explain_hagru(model: &NeuralModel, input: &ExplainInput<'_>) -> Result<Explanation> {
    let (probs, trace) = model.hagru_trace(input.doc)?;
    let (sentences, tokens) = sentence_tokens(input.text, input.doc);
    let labels = shown_labels(input.labels, &probs, input.threshold, input.gold)
        .into_iter()
        .map(|l| {
            let (s, w) = hagru_explain(&trace, l)?;
            Ok(LabelExplanation {
                code: input.labels.code(l).to_string(),
                predicted: probs[l] > input.threshold,
                gold: input.gold.contains(input.labels.code(l)),
                probability: probs[l],
                sentence_weights: trace.sentence_weights[l].clone(),
                top_sentence: Some(s),
                top_word: Some(w),
                triggers: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Explanation {
        doc_id: input.doc_id.to_string(),
        labels,
        word_weights: trace.word_weights,
        sentences,
        tokens,
    })
}

/// Top channels per label by contribution, at most this many.
pub const TRIGGERS_PER_LABEL: usize = 5;

pub fn explain_cnn(
    model: &NeuralModel,
    vocab: &Vocabulary,
    input: &ExplainInput<'_>,
) -> Result<Explanation> {
    let Network::Cnn(cnn) = &model.net else {
        return Err(Error::InvalidArgument("explain_cnn needs a cnn".into()));
    };
    let probs = model.probabilities(&[input.doc])?.remove(0);
    let (sentences, tokens) = sentence_tokens(input.text, input.doc);
    let w = model.store.get(cnn.output.w);
    let labels = shown_labels(input.labels, &probs, input.threshold, input.gold)
        .into_iter()
        .map(|l| {
            let mut trig = cnn_triggers(model, vocab, input.doc, Some(l))?;
            trig.sort_by(|a, b| {
                let (ca, cb) = (
                    w.get(l, a.channel) * a.response,
                    w.get(l, b.channel) * b.response,
                );
                cb.total_cmp(&ca).then(a.channel.cmp(&b.channel))
            });
            trig.truncate(TRIGGERS_PER_LABEL);
            Ok(LabelExplanation {
                code: input.labels.code(l).to_string(),
                predicted: probs[l] > input.threshold,
                gold: input.gold.contains(input.labels.code(l)),
                probability: probs[l],
                sentence_weights: Vec::new(),
                top_sentence: None,
                top_word: None,
                triggers: trig,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Explanation {
        doc_id: input.doc_id.to_string(),
        labels,
        word_weights: Vec::new(),
        sentences,
        tokens,
    })
}

/// Nearest-rank 99th percentile.
fn percentile99(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((0.99 * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Weights mapped linearly to `[0, 1]`, saturating at the 99th percentile.
pub fn intensities(weights: &[f64]) -> Vec<f64> {
    let cap = percentile99(weights);
    weights
        .iter()
        .map(|w| {
            if cap > 0.0 {
                (w / cap).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect()
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn yes(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Flat token position -> (sentence, word).
fn locate(tokens: &[Vec<String>], mut pos: usize) -> Option<(usize, usize)> {
    for (s, t) in tokens.iter().enumerate() {
        if pos < t.len() {
            return Some((s, pos));
        }
        pos -= t.len();
    }
    None
}

/// Self-contained HTML: one block per label, one line per sentence. The
/// sentence background follows that label's sentence weight; word
/// underlines follow the shared word weights. CNN reports shade the tokens
/// of each label's triggering trigrams instead.
pub fn render_html(e: &Explanation) -> String {
    let mut h = String::new();
    let _ = write!(
        h,
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>{id}</title>\n</head>\n\
         <body style=\"font-family:sans-serif;max-width:60em;margin:1em auto\">\n<h1>{id}</h1>\n",
        id = escape(&e.doc_id)
    );
    let word_heat: Vec<Vec<f64>> = e.word_weights.iter().map(|w| intensities(w)).collect();
    if e.labels.is_empty() {
        h.push_str("<p>No predicted or gold labels.</p>\n");
    }
    for l in &e.labels {
        let _ = writeln!(
            h,
            "<section style=\"margin-bottom:1.5em\">\n<h2>{} <small>p={:.4} predicted={} gold={}</small></h2>",
            escape(&l.code),
            l.probability,
            yes(l.predicted),
            yes(l.gold)
        );
        let sent_heat = intensities(&l.sentence_weights);
        let mut trig_heat: Vec<Vec<f64>> = e.tokens.iter().map(|t| vec![0.0; t.len()]).collect();
        if !l.triggers.is_empty() {
            let resp: Vec<f64> = l.triggers.iter().map(|t| t.response.max(0.0)).collect();
            for (t, a) in l.triggers.iter().zip(intensities(&resp)) {
                for k in 0..t.tokens.len() {
                    if let Some((s, w)) = locate(&e.tokens, t.window + k) {
                        trig_heat[s][w] = trig_heat[s][w].max(a);
                    }
                }
            }
        }
        for (s, toks) in e.tokens.iter().enumerate() {
            let bg = sent_heat.get(s).copied().unwrap_or(0.0);
            let top = l.top_sentence == Some(s);
            let _ = write!(
                h,
                "<div style=\"padding:2px 4px;background:rgba(255,80,80,{bg:.3}){}\">",
                if top {
                    ";border-left:4px solid #c00"
                } else {
                    ""
                }
            );
            for (w, tok) in toks.iter().enumerate() {
                let ul = word_heat
                    .get(s)
                    .and_then(|v| v.get(w))
                    .copied()
                    .unwrap_or(0.0);
                let tg = trig_heat[s][w];
                let _ = write!(
                    h,
                    "<span style=\"text-decoration:underline;text-decoration-thickness:3px;\
                     text-decoration-color:rgba(40,40,255,{ul:.3});background:rgba(255,200,0,{tg:.3})\">{}</span> ",
                    escape(tok)
                );
            }
            h.push_str("</div>\n");
        }
        if !l.triggers.is_empty() {
            h.push_str("<ul>\n");
            for t in &l.triggers {
                let _ = writeln!(
                    h,
                    "<li>channel {} window {}: <b>{}</b> ({:.4})</li>",
                    t.channel,
                    t.window,
                    escape(&t.tokens.join(" ")),
                    t.response
                );
            }
            h.push_str("</ul>\n");
        }
        h.push_str("</section>\n");
    }
    h.push_str("</body>\n</html>\n");
    h
}

fn file_stem(doc_id: &str) -> String {
    doc_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `<doc_id>.html` and `<doc_id>.json` into `dir`.
pub fn render_report(e: &Explanation, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
    let stem = file_stem(&e.doc_id);
    let html = dir.join(format!("{stem}.html"));
    let json = dir.join(format!("{stem}.json"));
    fs::write(&html, render_html(e)).map_err(|err| Error::io(&html, err))?;
    fs::write(&json, serde_json::to_string_pretty(e)? + "\n")
        .map_err(|err| Error::io(&json, err))?;
    Ok((html, json))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn expl(weights: Vec<f64>) -> Explanation {
        let n = weights.len();
        Explanation {
            doc_id: "d<1>".into(),
            labels: vec![LabelExplanation {
                code: "428".into(),
                predicted: true,
                gold: true,
                probability: 0.9,
                top_sentence: first_argmax(&weights),
                sentence_weights: weights,
                top_word: Some(0),
                triggers: vec![],
            }],
            word_weights: vec![vec![1.0]; n],
            sentences: vec!["x .".into(); n],
            tokens: vec![vec!["x".into()]; n],
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        let t = AttentionTrace {
            sentence_weights: vec![vec![0.25, 0.5, 0.25], vec![1.0, 0.0, 0.0]],
            word_weights: vec![vec![1.0], vec![0.5, 0.5], vec![1.0]],
            spans: vec![(0, 1), (1, 2), (2, 3)],
        };
        assert_eq!(hagru_explain(&t, 0).unwrap(), (1, 0));
        assert_eq!(hagru_explain(&t, 1).unwrap(), (0, 0));
        assert!(matches!(hagru_explain(&t, 2), Err(Error::LabelSpace(_))));
    }

    #[test]
    fn intensity_mapping() {
        assert_eq!(intensities(&[0.25; 4]), vec![1.0; 4]);
        assert_eq!(intensities(&[0.0, 1.0, 0.0]), vec![0.0, 1.0, 0.0]);
        assert_eq!(intensities(&[0.0, 0.0]), vec![0.0, 0.0]);
        // 1..=200: the nearest-rank 99th percentile is 198, so the top two
        // saturate and the rest scale linearly.
        let v: Vec<f64> = (1..=200).map(f64::from).collect();
        let i = intensities(&v);
        assert_eq!(&i[197..], &[1.0, 1.0, 1.0]);
        assert_eq!(i[98], 99.0 / 198.0);
    }

    #[test]
    fn one_hot_weight_highlights_one_sentence() {
        let html = render_html(&expl(vec![0.0, 1.0, 0.0]));
        assert_eq!(html.matches("rgba(255,80,80,1.000)").count(), 1);
        assert_eq!(html.matches("rgba(255,80,80,0.000)").count(), 2);
        assert!(html.contains("d&lt;1&gt;"));
        let uniform = render_html(&expl(vec![1.0 / 3.0; 3]));
        assert_eq!(uniform.matches("rgba(255,80,80,1.000)").count(), 3);
    }

    #[test]
    fn json_roundtrip_rerenders_identically() {
        let e = expl(vec![0.1, 0.7000000000000001, 0.2]);
        let dir = tempfile::tempdir().unwrap();
        let (html, json) = render_report(&e, dir.path()).unwrap();
        assert_eq!(html.file_name().unwrap(), "d_1_.html");
        let back: Explanation = serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
        assert_eq!(back, e);
        assert_eq!(render_html(&back), fs::read_to_string(html).unwrap());
    }
}
