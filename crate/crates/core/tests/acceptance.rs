//! One PASS/FAIL line per acceptance criterion. Runs as a plain binary
//! (`harness = false`) so the lines always reach stdout.

#![allow(clippy::needless_range_loop)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode, Stdio};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xmltag::corpus::{
    compute_stats, generate_synthetic, patient_or_id, rollup_label, split_patient_disjoint,
    Dataset, LabelSetting, Record, SynthConfig, SynthCorpus,
};
use xmltag::eval::{frequency_bins, gold_sets, micro_f, LabelSet};
use xmltag::explain::hagru_explain;
use xmltag::gradsuite::{run_suite, SUITE_SEEDS};
use xmltag::models::{Model, ModelKind};
use xmltag::tensor::gradcheck::DEFAULT_TOLERANCE;
use xmltag::textprep::{
    map_pseudo, normalize, tokenize, EditDistanceIndex, PreprocessConfig, PreprocessedDoc,
    Preprocessor,
};
use xmltag::train::{fit_model, FitConfig};

// Pinned thresholds.
const GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET_SECS: f64 = 60.0;
const EDIT_QUERIES: usize = 1000;
const EDIT_VOCAB: usize = 2000;
const METRIC_INSTANCES: usize = 100;
const MIN_F_HAGRU: f64 = 0.90;
const MIN_F_CNN: f64 = 0.85;
const MIN_F_CBOW: f64 = 0.80;
const MIN_F_LINEAR: f64 = 0.75;
const TRAIN_BUDGET_SECS: f64 = 15.0 * 60.0;
const MIN_LOCALIZATION: f64 = 0.80;
const MIN_ORDER_GAP: f64 = 0.05;
const BIN_SIZE: usize = 10;
const SEED: u64 = 0;
const TEST_FRACTION: f64 = 0.2;
/// CBOW plateaus at base rates under the shared default of 1e-3 within the
/// patience window; every other setting is the shared default.
const CBOW_LR: f64 = 1e-2;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn criterion_1() -> Outcome {
    assert_eq!(DEFAULT_TOLERANCE, GRAD_TOL);
    let start = Instant::now();
    let results = match run_suite(&SUITE_SEEDS) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<_> = results
        .iter()
        .filter(|r| !r.report.passes(GRAD_TOL) || r.report.checked == 0)
        .map(|r| format!("{}@{}", r.name, r.seed))
        .collect();
    let worst = results
        .iter()
        .map(|r| r.report.max_rel_err)
        .fold(0.0, f64::max);
    let names: BTreeSet<_> = results.iter().map(|r| r.name).collect();
    outcome(
        failed.is_empty() && secs < GRAD_BUDGET_SECS && SUITE_SEEDS.len() == 5,
        format!(
            "{} checks ({} ops/layers/models x {} seeds), worst rel err {worst:.2e} (tol {GRAD_TOL:e}), {secs:.1}s (budget {GRAD_BUDGET_SECS}s), failures {failed:?}",
            results.len(),
            names.len(),
            SUITE_SEEDS.len()
        ),
    )
}

/// Full-matrix Levenshtein, independent of the library's rolling rows.
fn oracle_levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = (d[i - 1][j] + 1)
                .min(d[i][j - 1] + 1)
                .min(d[i - 1][j - 1] + cost);
        }
    }
    d[a.len()][b.len()]
}

/// Nearest by (distance asc, frequency desc, token asc) within `radius`.
fn oracle_nearest(
    vocab: &[(String, usize)],
    q: &str,
    radius: Option<usize>,
) -> Option<(String, usize)> {
    vocab
        .iter()
        .map(|(t, f)| (oracle_levenshtein(t, q), std::cmp::Reverse(*f), t.clone()))
        .filter(|(d, _, _)| radius.is_none_or(|r| *d <= r))
        .min()
        .map(|(d, _, t)| (t, d))
}

fn random_word(rng: &mut ChaCha8Rng) -> String {
    const ALPHA: &[u8] = b"abcdeilmnorst";
    let len = rng.random_range(2..=9);
    (0..len)
        .map(|_| ALPHA[rng.random_range(0..ALPHA.len())] as char)
        .collect()
}

fn criterion_2() -> Outcome {
    let pseudo = map_pseudo("11/2/1986");
    let pseudo_pipeline: Vec<String> = normalize("11/2/1986", &[])
        .into_iter()
        .flat_map(|(t, _)| t)
        .collect();
    let seg: Vec<String> = tokenize("Alzheimer's dementia.")
        .into_iter()
        .map(|t| t.text)
        .collect();
    let seg = seg.join(" ");

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut vocab: BTreeMap<String, usize> = BTreeMap::new();
    while vocab.len() < EDIT_VOCAB {
        let w = random_word(&mut rng);
        let f = rng.random_range(1..50);
        vocab.insert(w, f);
    }
    let vocab: Vec<(String, usize)> = vocab.into_iter().collect();
    let mut queries = Vec::with_capacity(EDIT_QUERIES);
    while queries.len() < EDIT_QUERIES {
        let q = random_word(&mut rng);
        if vocab.binary_search_by(|(t, _)| t.as_str().cmp(&q)).is_err() {
            queries.push(q);
        }
    }
    let mut agree = 0;
    for radius in [None, Some(3)] {
        let index = EditDistanceIndex::new(vocab.iter().cloned(), radius);
        for q in &queries {
            let got = index.nearest(q).map(|(t, d)| (t.to_string(), d));
            if got == oracle_nearest(&vocab, q, radius) {
                agree += 1;
            }
        }
    }
    let pass = pseudo == "dd/d/dddd"
        && pseudo_pipeline == ["dd/d/dddd"]
        && seg == "alzheimer 's dementia ."
        && agree == 2 * EDIT_QUERIES;
    outcome(
        pass,
        format!(
            "pseudo `{pseudo}` (pipeline {pseudo_pipeline:?}), tokens `{seg}`, edit index agrees on {agree}/{} queries (unbounded and radius 3)",
            2 * EDIT_QUERIES
        ),
    )
}

fn oracle_micro(pred: &[LabelSet], gold: &[LabelSet]) -> (f64, f64, f64) {
    let universe: BTreeSet<&String> = pred.iter().chain(gold).flatten().collect();
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        for l in &universe {
            match (p.contains(*l), g.contains(*l)) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (p, r) = (div(tp, tp + fp), div(tp, tp + fn_));
    let f = if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    (p, r, f)
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut exact = 0;
    for _ in 0..METRIC_INSTANCES {
        let n = rng.random_range(1..=20);
        let l = rng.random_range(1..=15);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<LabelSet> {
            (0..n)
                .map(|_| {
                    (0..l)
                        .filter(|_| rng.random::<f64>() < 0.3)
                        .map(|i| format!("L{i}"))
                        .collect()
                })
                .collect()
        };
        let (pred, gold) = (draw(&mut rng), draw(&mut rng));
        let s = micro_f(&pred, &gold).expect("aligned");
        if (s.precision, s.recall, s.f1) == oracle_micro(&pred, &gold) {
            exact += 1;
        }
    }
    let sets = |v: &[&[&str]]| -> Vec<LabelSet> {
        v.iter()
            .map(|s| s.iter().map(|x| x.to_string()).collect())
            .collect()
    };
    let hand =
        micro_f(&sets(&[&["A"], &["C", "D"]]), &sets(&[&["A", "B"], &["C"]])).expect("aligned");
    let two_thirds = 2.0 / 3.0;
    let hand_ok = hand.precision == two_thirds
        && hand.recall == two_thirds
        && (hand.f1 - two_thirds).abs() < 1e-15;
    outcome(
        exact == METRIC_INSTANCES && hand_ok,
        format!(
            "{exact}/{METRIC_INSTANCES} random instances exact; hand case P={:.6} R={:.6} F={:.6}",
            hand.precision, hand.recall, hand.f1
        ),
    )
}

struct Trained {
    model: Model,
    f1: f64,
    seconds: f64,
    pred: Vec<LabelSet>,
}

struct Splits {
    corpus: SynthCorpus,
    test: Dataset,
    pre: Preprocessor,
    test_docs: Vec<PreprocessedDoc>,
    gold: Vec<LabelSet>,
    train: Dataset,
    train_docs: Vec<PreprocessedDoc>,
}

fn splits(cfg: &SynthConfig) -> Splits {
    let corpus = generate_synthetic(cfg).expect("synthetic corpus");
    let (train, test) =
        split_patient_disjoint(&corpus.dataset, patient_or_id, TEST_FRACTION, SEED).expect("split");
    let pre = Preprocessor::fit(&train, PreprocessConfig::default()).expect("vocabulary");
    let train_docs = pre.preprocess_dataset(&train).docs;
    let test_docs = pre.preprocess_dataset(&test).docs;
    let gold = gold_sets(&test, LabelSetting::Full);
    Splits {
        corpus,
        test,
        pre,
        test_docs,
        gold,
        train,
        train_docs,
    }
}

fn train_kind(s: &Splits, kind: ModelKind) -> Trained {
    let mut cfg = FitConfig {
        kind,
        ..FitConfig::default()
    };
    cfg.train.seed = SEED;
    cfg.linear.seed = SEED;
    if kind == ModelKind::Cbow {
        cfg.train.lr = CBOW_LR;
    }
    let start = Instant::now();
    let (model, _) = fit_model(&cfg, &s.pre.vocab, &s.train, &s.train_docs).expect("training");
    let seconds = start.elapsed().as_secs_f64();
    let pred = model.predict(&s.test_docs).expect("prediction");
    let f1 = micro_f(&pred, &s.gold).expect("aligned").f1;
    Trained {
        model,
        f1,
        seconds,
        pred,
    }
}

fn criterion_4(s: &Splits, models: &BTreeMap<&'static str, Trained>) -> Outcome {
    let stats = compute_stats(
        &s.corpus.dataset,
        &s.pre.preprocess_dataset(&s.corpus.dataset).docs,
    )
    .expect("stats");
    let mut pass = stats.records == 2000 && stats.labels == 50;
    let mut parts = vec![format!(
        "{} docs, {} labels, cardinality {:.2}",
        stats.records, stats.labels, stats.cardinality
    )];
    for (name, min) in [
        ("hagru", MIN_F_HAGRU),
        ("cnn", MIN_F_CNN),
        ("cbow", MIN_F_CBOW),
        ("linear", MIN_F_LINEAR),
    ] {
        let t = &models[name];
        pass &= t.f1 >= min && t.seconds < TRAIN_BUDGET_SECS;
        parts.push(format!(
            "{name} F={:.4} (>= {min}) in {:.1}s",
            t.f1, t.seconds
        ));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_5(s: &Splits, hagru: &Trained) -> Outcome {
    let net = hagru.model.neural().expect("neural model");
    let index_of: HashMap<&str, usize> = s
        .corpus
        .dataset
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    let (mut hits, mut total, mut misaligned) = (0usize, 0usize, 0usize);
    for ((r, doc), pred) in s.test.records.iter().zip(&s.test_docs).zip(&hagru.pred) {
        let truth = &s.corpus.triggers[index_of[r.id.as_str()]];
        let written = r.text.split(" . ").count();
        if doc.sentences.len() != written {
            misaligned += 1;
        }
        let (_, trace) = net.hagru_trace(doc).expect("trace");
        for code in pred.intersection(&r.labels) {
            let l = hagru.model.meta.labels.index_of(code).expect("known label");
            let (sentence, _) = hagru_explain(&trace, l).expect("explain");
            total += 1;
            hits += usize::from(truth.get(code) == Some(&sentence));
        }
    }
    let rate = hits as f64 / total.max(1) as f64;
    outcome(
        rate >= MIN_LOCALIZATION && total > 0 && misaligned == 0,
        format!("top sentence is the trigger for {hits}/{total} true positives ({rate:.4}, >= {MIN_LOCALIZATION}); {misaligned} misaligned docs"),
    )
}

fn criterion_6() -> Outcome {
    let s = splits(&SynthConfig {
        negation: true,
        seed: SEED,
        ..SynthConfig::default()
    });
    let cnn = train_kind(&s, ModelKind::Cnn);
    let cbow = train_kind(&s, ModelKind::Cbow);
    let gap = cnn.f1 - cbow.f1;

    // Permutation invariance of the CBOW forward pass.
    let net = cbow.model.neural().expect("neural model");
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut identical = 0;
    let probes: Vec<&PreprocessedDoc> = s
        .test_docs
        .iter()
        .filter(|d| !d.is_empty())
        .take(50)
        .collect();
    for doc in &probes {
        let mut tokens = doc.flat();
        tokens.shuffle(&mut rng);
        let shuffled = PreprocessedDoc {
            sentences: vec![tokens],
            spans: vec![(0, 0)],
        };
        let a = net.probabilities(&[doc]).expect("forward");
        let b = net.probabilities(&[&shuffled]).expect("forward");
        identical += usize::from(a == b);
    }
    outcome(
        gap >= MIN_ORDER_GAP && identical == probes.len(),
        format!(
            "negation corpus: CNN F={:.4}, CBOW F={:.4}, gap {gap:.4} (>= {MIN_ORDER_GAP}); CBOW identical under shuffling on {identical}/{} docs",
            cnn.f1,
            cbow.f1,
            probes.len()
        ),
    )
}

fn criterion_7(s: &Splits, hagru: &Trained) -> Outcome {
    let bins =
        frequency_bins(&hagru.model.meta.labels, BIN_SIZE, &hagru.pred, &s.gold).expect("bins");
    let (first, last) = (&bins.bins[0], &bins.bins[bins.bins.len() - 1]);
    let recall_drop = first.recall - last.recall;
    let precision_drop = first.precision - last.precision;
    outcome(
        first.recall > last.recall && recall_drop > precision_drop,
        format!(
            "HA-GRU bins of {BIN_SIZE}: first P={:.4} R={:.4}, last P={:.4} R={:.4}; recall drop {recall_drop:.4} vs precision drop {precision_drop:.4}",
            first.precision, first.recall, last.precision, last.recall
        ),
    )
}

fn criterion_8() -> Outcome {
    let ds = Dataset::new(vec![
        Record::new("r1", "a b .", ["A", "B"]),
        Record::new("r2", "c .", ["B"]),
        Record::new("r3", "d e f .", ["A", "C", "D"]),
    ])
    .expect("fixture");
    let docs: Vec<PreprocessedDoc> = (0..3)
        .map(|i| PreprocessedDoc {
            sentences: vec![vec![i + 2]],
            spans: vec![(0, 1)],
        })
        .collect();
    let stats = compute_stats(&ds, &docs).expect("stats");
    // 6 assignments over 3 records and 4 distinct labels.
    let (card, dens) = (6.0 / 3.0, 6.0 / 3.0 / 4.0);
    let rolled = [
        rollup_label("682.6"),
        rollup_label("682"),
        rollup_label("401.9"),
    ];
    let pass =
        stats.cardinality == card && stats.density == dens && rolled == ["682", "682", "401"];
    outcome(
        pass,
        format!(
            "cardinality {} (hand {card}), density {} (hand {dens}); roll-up {rolled:?}",
            stats.cardinality, stats.density
        ),
    )
}

fn snapshot(dir: &Path, skip: &str) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).expect("readable dir") {
            let p = entry.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != skip) {
                let key = p.strip_prefix(dir).expect("inside").display().to_string();
                out.insert(key, fs::read(&p).expect("readable file"));
            }
        }
    }
    out
}

fn cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_xmltag"))
        .args(args)
        .stdout(Stdio::null())
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn pipeline(root: &Path) -> bool {
    let r = |p: &str| root.join(p).display().to_string();
    let mut ok = cli(&["synth", "--out", &r("data"), "--docs", "240", "--seed", "7"]);
    for (model, epochs) in [("linear", "1"), ("cnn", "3"), ("hagru", "2")] {
        let out = r(model);
        ok &= cli(&[
            "train",
            "--model",
            model,
            "--train",
            &r("data/train.jsonl"),
            "--out",
            &out,
            "--epochs",
            epochs,
            "--seed",
            "7",
            "--threads",
            "1",
        ]);
        ok &= cli(&[
            "eval",
            "--from",
            &out,
            "--out",
            &out,
            "--test",
            &r("data/test.jsonl"),
        ]);
        if model != "linear" {
            ok &= cli(&[
                "explain",
                "--from",
                &out,
                "--out",
                &out,
                "--test",
                &r("data/test.jsonl"),
            ]);
        }
    }
    ok
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().expect("tempdir");
    let root = tmp.path().join("run");
    let ok1 = pipeline(&root);
    let first = snapshot(&root, "run.log");
    fs::remove_dir_all(&root).expect("cleanup");
    let ok2 = pipeline(&root);
    let second = snapshot(&root, "run.log");
    let differing: Vec<&String> = first
        .keys()
        .chain(second.keys())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|k| first.get(*k) != second.get(*k))
        .collect();
    let must_have = [
        "cnn/model.bin",
        "hagru/model.bin",
        "linear/model.bin",
        "hagru/report.json",
        "cnn/bins.csv",
        "data/train.jsonl",
    ];
    let present = must_have.iter().all(|k| first.contains_key(*k));
    outcome(
        ok1 && ok2 && present && differing.is_empty(),
        format!(
            "{} artifacts compared across two CLI runs; differing {differing:?}",
            first.len()
        ),
    )
}

fn main() -> ExitCode {
    let mut results: Vec<(u8, Outcome)> = Vec::new();
    let mut report = |n: u8, o: Outcome| {
        println!(
            "{} criterion {n}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, o));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());

    let s = splits(&SynthConfig {
        seed: SEED,
        ..SynthConfig::default()
    });
    let mut models = BTreeMap::new();
    for (name, kind) in [
        ("linear", ModelKind::Linear),
        ("cbow", ModelKind::Cbow),
        ("cnn", ModelKind::Cnn),
        ("hagru", ModelKind::Hagru),
    ] {
        models.insert(name, train_kind(&s, kind));
    }
    report(4, criterion_4(&s, &models));
    report(5, criterion_5(&s, &models["hagru"]));
    report(6, criterion_6());
    report(7, criterion_7(&s, &models["hagru"]));
    report(8, criterion_8());
    report(9, criterion_9());

    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
