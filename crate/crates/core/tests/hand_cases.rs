//! Small models with hand-set weights, checked against values worked out by hand.

use std::collections::BTreeSet;

use xmltag::eval::{micro_f, LabelSet};
use xmltag::explain::cnn_triggers;
use xmltag::models::{ModelDims, ModelKind, Network, NeuralModel};
use xmltag::tensor::ParamId;
use xmltag::textprep::{PreprocessedDoc, Vocabulary};

fn dims() -> ModelDims {
    ModelDims {
        embedding: 3,
        channels: 2,
        width: 3,
        word_hidden: 2,
        sentence_hidden: 2,
    }
}

fn zero_all(m: &mut NeuralModel) {
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        m.store.get_mut(id).data_mut().fill(0.0);
    }
}

fn set(m: &mut NeuralModel, id: ParamId, values: &[f64]) {
    m.store.get_mut(id).data_mut().copy_from_slice(values);
}

fn one_sentence(ids: &[usize]) -> PreprocessedDoc {
    PreprocessedDoc {
        sentences: vec![ids.to_vec()],
        spans: vec![(0, 0)],
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn cbow_with_rows() -> NeuralModel {
    let mut m = NeuralModel::new(ModelKind::Cbow, 4, 1, &dims(), 0).unwrap();
    zero_all(&mut m);
    let Network::Cbow(c) = &m.net else {
        unreachable!()
    };
    let (e, w, b) = (c.embedding.table, c.output.w, c.output.b);
    // Rows 2 and 3 of the table, then W = [1, -2, 0.5] and b = 0.25.
    set(
        &mut m,
        e,
        &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, -1.0, 0.0, 4.0],
    );
    set(&mut m, w, &[1.0, -2.0, 0.5]);
    set(&mut m, b, &[0.25]);
    m
}

#[test]
fn cbow_two_tokens_average_then_sigmoid() {
    let m = cbow_with_rows();
    // mean of [1,2,0] and [-1,0,4] is [0,1,2]; W.x + b = -2 + 1 + 0.25.
    let p = m.probabilities(&[&one_sentence(&[2, 3])]).unwrap()[0][0];
    assert!((p - sigmoid(-0.75)).abs() < 1e-12);
}

#[test]
fn cbow_single_token_is_its_own_embedding() {
    let m = cbow_with_rows();
    let p = m.probabilities(&[&one_sentence(&[3])]).unwrap()[0][0];
    assert!((p - sigmoid(-1.0 + 2.0 + 0.25)).abs() < 1e-12);
    // Repeating the token changes nothing.
    let q = m.probabilities(&[&one_sentence(&[3, 3, 3])]).unwrap()[0][0];
    assert_eq!(p, q);
}

fn words() -> Vocabulary {
    let doc = [
        "chest",
        "pain",
        "radiating",
        "to",
        "left",
        "arm",
        "and",
        "jaw",
    ];
    Vocabulary::build([doc].iter().map(|d| d.iter().copied()), 1).unwrap()
}

/// Channel 0 fires on the trigram "left arm and" via one-hot embeddings.
fn cnn_detector(vocab: &Vocabulary) -> NeuralModel {
    let n = vocab.len();
    let d = ModelDims {
        embedding: n,
        ..dims()
    };
    let mut m = NeuralModel::new(ModelKind::Cnn, n, 1, &d, 0).unwrap();
    zero_all(&mut m);
    let Network::Cnn(c) = &m.net else {
        unreachable!()
    };
    let (e, f, w) = (c.embedding.table, c.conv.filters, c.output.w);
    let mut table = vec![0.0; n * n];
    for i in 2..n {
        table[i * n + i] = 1.0;
    }
    set(&mut m, e, &table);
    let mut filters = vec![0.0; 2 * 3 * n];
    for (k, t) in ["left", "arm", "and"].iter().enumerate() {
        filters[k * n + vocab.id(t).unwrap()] = 1.0;
    }
    // Channel 1 weakly likes "chest" anywhere in a window.
    for k in 0..3 {
        filters[3 * n + k * n + vocab.id("chest").unwrap()] = 0.1;
    }
    set(&mut m, f, &filters);
    set(&mut m, w, &[1.0, 0.0]);
    m
}

#[test]
fn handcrafted_filter_recovers_its_trigram() {
    let vocab = words();
    let m = cnn_detector(&vocab);
    let ids: Vec<usize> = "chest pain radiating to left arm and jaw"
        .split(' ')
        .map(|t| vocab.id(t).unwrap())
        .collect();
    let trig = cnn_triggers(&m, &vocab, &one_sentence(&ids), Some(0)).unwrap();
    assert_eq!(trig.len(), 1);
    assert_eq!(trig[0].channel, 0);
    assert_eq!(trig[0].window, 4);
    assert_eq!(trig[0].tokens, ["left", "arm", "and"]);
    assert_eq!(trig[0].response, 3.0);
}

#[test]
fn constant_document_ties_to_the_first_window() {
    let vocab = words();
    let m = cnn_detector(&vocab);
    let id = vocab.id("chest").unwrap();
    let trig = cnn_triggers(&m, &vocab, &one_sentence(&[id; 6]), None).unwrap();
    assert!(trig.iter().all(|t| t.window == 0));
}

#[test]
fn cnn_sees_order_that_cbow_does_not() {
    let vocab = words();
    let m = cnn_detector(&vocab);
    let fwd: Vec<usize> = ["left", "arm", "and"]
        .iter()
        .map(|t| vocab.id(t).unwrap())
        .collect();
    let rev: Vec<usize> = fwd.iter().rev().copied().collect();
    let p = m
        .probabilities(&[&one_sentence(&fwd), &one_sentence(&rev)])
        .unwrap();
    assert!(p[0][0] > p[1][0]);
}

#[test]
fn always_empty_predictor_scores_zero() {
    let gold: Vec<LabelSet> = vec![
        ["428".to_string()].into(),
        ["401.9".to_string(), "V45.81".to_string()].into(),
    ];
    let none = vec![BTreeSet::new(); 2];
    let s = micro_f(&none, &gold).unwrap();
    assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
}
