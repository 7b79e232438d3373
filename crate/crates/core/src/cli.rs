//! The `xmltag` command line: each subcommand loads a [`RunConfig`], applies
//! flag overrides, echoes the result to `config.json` and delegates.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    compute_stats, generate_synthetic, load_jsonl, patient_or_id, rollup_label,
    split_patient_disjoint, write_jsonl, Dataset, LabelSetting, LabelSpace, SynthConfig,
};
use crate::error::{Error, Result};
use crate::eval::{frequency_bins, gold_sets, micro_counts, EvalReport, LabelSet};
use crate::explain::{explain_cnn, explain_hagru, render_report, ExplainInput};
use crate::gradsuite::{run_suite, SUITE_SEEDS};
use crate::models::{Model, ModelKind};
use crate::textprep::{PreprocessConfig, PreprocessedDoc, Preprocessor, Vocabulary};
use crate::train::{fit_model, FitConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const MODEL_FILE: &str = "model.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.json";
pub const BINS_FILE: &str = "bins.csv";
pub const EXPLAIN_DIR: &str = "explain";
pub const STATS_FILE: &str = "stats.json";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
/// The only file allowed to differ between identical runs.
pub const LOG_FILE: &str = "run.log";

/// Every setting a run can depend on. Loaded from `--config`, then
/// overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Propagated into the synthetic, training and linear seeds.
    pub seed: u64,
    pub model: ModelKind,
    pub labels: LabelSetting,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Directory of a finished `train` run, for `eval` and `explain`.
    pub from: Option<PathBuf>,
    pub threads: Option<usize>,
    pub preprocess: PreprocessConfig,
    pub fit: FitConfig,
    pub synth: SynthConfig,
    /// Share of synthetic patients held out as the test split.
    pub test_fraction: f64,
    pub bin_size: usize,
    /// Documents explained when no `--doc` is given.
    pub explain_docs: usize,
    pub explain_ids: Vec<String>,
    /// Predictions JSONL scored by `eval` in place of a model.
    pub predictions: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelKind::Hagru,
            labels: LabelSetting::Full,
            train: None,
            test: None,
            out: None,
            from: None,
            threads: None,
            preprocess: PreprocessConfig::default(),
            fit: FitConfig::default(),
            synth: SynthConfig::default(),
            test_fraction: 0.2,
            bin_size: 10,
            explain_docs: 5,
            explain_ids: Vec::new(),
            predictions: None,
        }
    }
}

impl RunConfig {
    /// Copies the top-level choices into the nested configs so the echoed
    /// file states exactly what ran.
    fn propagate(&mut self) {
        self.synth.seed = self.seed;
        self.fit.train.seed = self.seed;
        self.fit.linear.seed = self.seed;
        self.fit.kind = self.model;
        self.fit.setting = self.labels;
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("--out is required".into()))
    }

    fn train_path(&self) -> Result<&Path> {
        self.train
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("--train is required".into()))
    }

    fn test_path(&self) -> Result<&Path> {
        self.test
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("--test is required".into()))
    }

    fn model_dir(&self) -> Result<&Path> {
        self.from.as_deref().or(self.out.as_deref()).ok_or_else(|| {
            Error::InvalidArgument("--from (or --out) must name a trained run".into())
        })
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "xmltag",
    version,
    about = "Multi-label tagging of long documents"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted-trigger corpus with train/test splits.
    Synth(CommonArgs),
    /// Fit the vocabulary on --train and write encoded datasets.
    Preprocess(CommonArgs),
    /// Corpus statistics of --train.
    Stats(CommonArgs),
    /// Train --model on --train.
    Train(CommonArgs),
    /// Score a trained run on --test.
    Eval(CommonArgs),
    /// Attention or n-gram explanations for --test documents.
    Explain(CommonArgs),
    /// Finite-difference gradient suite.
    Gradcheck(CommonArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub labels: Option<LabelSetting>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Trained run directory (defaults to --out).
    #[arg(long)]
    pub from: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub min_count: Option<usize>,
    /// Synthetic corpus size.
    #[arg(long)]
    pub docs: Option<usize>,
    /// Synthetic corpus in negation mode.
    #[arg(long)]
    pub negation: bool,
    #[arg(long)]
    pub bin_size: Option<usize>,
    /// Document id to explain; repeatable.
    #[arg(long = "doc")]
    pub doc_ids: Vec<String>,
    /// Score this predictions JSONL (`{"id", "labels"}` lines) instead of a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

impl CommonArgs {
    /// The file config (or defaults) with every given flag applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)?
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $flag:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        set!(c.seed, self.seed);
        set!(c.model, self.model);
        set!(c.labels, self.labels);
        set!(c.fit.train.lr, self.lr);
        set!(c.fit.train.max_epochs, self.epochs);
        set!(c.fit.train.threshold, self.threshold);
        set!(c.preprocess.min_count, self.min_count);
        set!(c.synth.docs, self.docs);
        set!(c.bin_size, self.bin_size);
        for (field, flag) in [
            (&mut c.train, &self.train),
            (&mut c.test, &self.test),
            (&mut c.out, &self.out),
            (&mut c.from, &self.from),
        ] {
            if flag.is_some() {
                *field = flag.clone();
            }
        }
        if self.threads.is_some() {
            c.threads = self.threads;
        }
        c.synth.negation |= self.negation;
        if self.predictions.is_some() {
            c.predictions = self.predictions.clone();
        }
        if !self.doc_ids.is_empty() {
            c.explain_ids = self.doc_ids.clone();
        }
        if c.threads == Some(0) {
            return Err(Error::InvalidArgument(
                "--threads must be at least 1".into(),
            ));
        }
        c.fit.train.validate()?;
        c.propagate();
        Ok(c)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out_dir()?.to_path_buf();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write(
        &out.join(CONFIG_FILE),
        serde_json::to_string_pretty(cfg)? + "\n",
    )?;
    Ok(out)
}

fn encoded_jsonl(ds: &Dataset, docs: &[PreprocessedDoc]) -> Result<String> {
    #[derive(Serialize)]
    struct Line<'a> {
        id: &'a str,
        labels: &'a BTreeSet<String>,
        #[serde(flatten)]
        doc: &'a PreprocessedDoc,
    }
    let mut out = String::new();
    for (r, d) in ds.records.iter().zip(docs) {
        out.push_str(&serde_json::to_string(&Line {
            id: &r.id,
            labels: &r.labels,
            doc: d,
        })?);
        out.push('\n');
    }
    Ok(out)
}

fn cmd_synth(cfg: &RunConfig) -> Result<String> {
    let out = prepare_out(cfg)?;
    let corpus = generate_synthetic(&cfg.synth)?;
    let (train, test) =
        split_patient_disjoint(&corpus.dataset, patient_or_id, cfg.test_fraction, cfg.seed)?;
    write_jsonl(&corpus.dataset, &out.join("corpus.jsonl"))?;
    write_jsonl(&train, &out.join("train.jsonl"))?;
    write_jsonl(&test, &out.join("test.jsonl"))?;
    #[derive(Serialize)]
    struct Truth<'a> {
        id: &'a str,
        triggers: &'a BTreeMap<String, usize>,
        negated: &'a BTreeMap<String, usize>,
    }
    let mut truth = String::new();
    for ((r, t), n) in corpus
        .dataset
        .records
        .iter()
        .zip(&corpus.triggers)
        .zip(&corpus.negated)
    {
        truth.push_str(&serde_json::to_string(&Truth {
            id: &r.id,
            triggers: t,
            negated: n,
        })?);
        truth.push('\n');
    }
    write(&out.join("truth.jsonl"), truth)?;
    Ok(format!(
        "wrote {} documents ({} train, {} test) to {}",
        corpus.dataset.len(),
        train.len(),
        test.len(),
        out.display()
    ))
}

fn cmd_preprocess(cfg: &RunConfig) -> Result<String> {
    let out = prepare_out(cfg)?;
    let train = load_jsonl(cfg.train_path()?)?;
    let pre = Preprocessor::fit(&train, cfg.preprocess.clone())?;
    pre.vocab.save(&out.join(VOCAB_FILE))?;
    let enc = pre.preprocess_dataset(&train);
    write(
        &out.join("encoded_train.jsonl"),
        encoded_jsonl(&train, &enc.docs)?,
    )?;
    if let Some(t) = &cfg.test {
        let test = load_jsonl(t)?;
        let enc = pre.preprocess_dataset(&test);
        write(
            &out.join("encoded_test.jsonl"),
            encoded_jsonl(&test, &enc.docs)?,
        )?;
    }
    Ok(format!(
        "vocabulary of {} tokens; {} empty documents",
        pre.vocab.len(),
        enc.empty.len()
    ))
}

fn cmd_stats(cfg: &RunConfig) -> Result<String> {
    let out = prepare_out(cfg)?;
    let ds = load_jsonl(cfg.train_path()?)?;
    let pre = Preprocessor::fit(&ds, cfg.preprocess.clone())?;
    let enc = pre.preprocess_dataset(&ds);
    let stats = compute_stats(&cfg.labels.apply(&ds), &enc.docs)?;
    let json = serde_json::to_string_pretty(&stats)? + "\n";
    write(&out.join(STATS_FILE), &json)?;
    Ok(json.trim_end().to_string())
}

fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let out = prepare_out(cfg)?;
    let train = load_jsonl(cfg.train_path()?)?;
    let pre = Preprocessor::fit(&train, cfg.preprocess.clone())?;
    pre.vocab.save(&out.join(VOCAB_FILE))?;
    let enc = pre.preprocess_dataset(&train);
    if !enc.empty.is_empty() {
        info!("{} training documents have no tokens", enc.empty.len());
    }
    let (model, history) = fit_model(&cfg.fit, &pre.vocab, &train, &enc.docs)?;
    model.save(&out.join(MODEL_FILE))?;
    let (csv, log) = match &history {
        Some(h) => (h.to_csv(), h.timing_log()),
        None => ("epoch,loss,val_micro_f\n".to_string(), String::new()),
    };
    write(&out.join(HISTORY_FILE), csv)?;
    write(&out.join(LOG_FILE), log)?;
    Ok(match history {
        Some(h) => format!(
            "trained {} on {} documents; best epoch {} (val micro-F {:.4})",
            cfg.model,
            train.len(),
            h.best_epoch,
            h.best_val_micro_f()
        ),
        None => format!("trained {} on {} documents", cfg.model, train.len()),
    })
}

/// Vocabulary, preprocessing settings and model of a finished `train` run.
pub fn load_run(dir: &Path) -> Result<(Preprocessor, Model)> {
    let cfg_path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let trained: RunConfig = serde_json::from_str(&text)?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    let model = Model::load(&dir.join(MODEL_FILE), &vocab)?;
    Ok((Preprocessor::new(vocab, trained.preprocess), model))
}

/// Rejects an explicit `--labels` that disagrees with the trained model.
fn check_setting(args_setting: Option<LabelSetting>, model: &Model) -> Result<LabelSetting> {
    match args_setting {
        Some(s) if s != model.meta.setting => Err(Error::LabelSpace(format!(
            "--labels {s} conflicts with the model, trained on {} labels",
            model.meta.setting
        ))),
        _ => Ok(model.meta.setting),
    }
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    id: String,
    labels: BTreeSet<String>,
}

fn load_predictions(path: &Path, test: &Dataset) -> Result<Vec<LabelSet>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut by_id = HashMap::new();
    for (n, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let p: PredictionLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        if by_id.insert(p.id.clone(), p.labels).is_some() {
            return Err(Error::DuplicateId(p.id));
        }
    }
    test.records
        .iter()
        .map(|r| {
            by_id.remove(&r.id).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "no prediction for `{}` in {}",
                    r.id,
                    path.display()
                ))
            })
        })
        .collect()
}

fn cmd_eval(cfg: &RunConfig, args: &CommonArgs) -> Result<String> {
    let test = load_jsonl(cfg.test_path()?)?;
    let (setting, space, pred) = match &cfg.predictions {
        Some(path) => {
            let pred = load_predictions(path, &test)?;
            let setting = cfg.labels;
            let pred: Vec<LabelSet> = match setting {
                LabelSetting::Full => pred,
                LabelSetting::Rolled => pred
                    .iter()
                    .map(|p| p.iter().map(|c| rollup_label(c).to_string()).collect())
                    .collect(),
            };
            let basis = match &cfg.train {
                Some(t) => load_jsonl(t)?,
                None => test.clone(),
            };
            (
                setting,
                LabelSpace::from_dataset(&setting.apply(&basis)),
                pred,
            )
        }
        None => {
            let (pre, model) = load_run(cfg.model_dir()?)?;
            let setting = check_setting(args.labels, &model)?;
            let docs = pre.preprocess_dataset(&test).docs;
            let pred = model.predict(&docs)?;
            (setting, model.meta.labels, pred)
        }
    };
    let out = prepare_out(cfg)?;
    let gold = gold_sets(&test, setting);
    let report = EvalReport::from_counts(setting, micro_counts(&pred, &gold)?);
    write(&out.join(REPORT_FILE), report.to_json()?)?;
    let bins = frequency_bins(&space, cfg.bin_size, &pred, &gold)?;
    write(&out.join(BINS_FILE), bins.to_csv())?;
    if cfg.predictions.is_none() {
        let mut lines = String::new();
        for (r, p) in test.records.iter().zip(&pred) {
            lines.push_str(&serde_json::to_string(&PredictionLine {
                id: r.id.clone(),
                labels: p.clone(),
            })?);
            lines.push('\n');
        }
        write(&out.join(PREDICTIONS_FILE), lines)?;
    }
    Ok(format!(
        "micro P {:.4} R {:.4} F1 {:.4} (tp {} fp {} fn {})",
        report.precision, report.recall, report.f1, report.tp, report.fp, report.fn_
    ))
}

fn cmd_explain(cfg: &RunConfig, args: &CommonArgs) -> Result<String> {
    let (pre, model) = load_run(cfg.model_dir()?)?;
    let setting = check_setting(args.labels, &model)?;
    let net = model
        .neural()
        .filter(|n| matches!(n.net.kind(), ModelKind::Hagru | ModelKind::Cnn))
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "cannot explain a {} model (hagru or cnn only)",
                model.kind()
            ))
        })?;
    let out = prepare_out(cfg)?;
    let test = load_jsonl(cfg.test_path()?)?;
    let gold = gold_sets(&test, setting);
    let picked: Vec<usize> = if cfg.explain_ids.is_empty() {
        (0..test.len().min(cfg.explain_docs)).collect()
    } else {
        cfg.explain_ids
            .iter()
            .map(|id| {
                test.records
                    .iter()
                    .position(|r| &r.id == id)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!("no document `{id}` in the test set"))
                    })
            })
            .collect::<Result<_>>()?
    };
    let dir = out.join(EXPLAIN_DIR);
    let mut written = 0;
    for i in picked {
        let r = &test.records[i];
        let doc = pre.encode(&r.text);
        if doc.is_empty() {
            info!("skipping `{}`: no tokens", r.id);
            continue;
        }
        let input = ExplainInput {
            doc_id: &r.id,
            text: &r.text,
            doc: &doc,
            gold: &gold[i],
            labels: &model.meta.labels,
            threshold: model.meta.threshold,
        };
        let e = match net.net.kind() {
            ModelKind::Hagru => explain_hagru(net, &input)?,
            _ => explain_cnn(net, &pre.vocab, &input)?,
        };
        render_report(&e, &dir)?;
        written += 1;
    }
    Ok(format!("wrote {written} explanations to {}", dir.display()))
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<String> {
    let results = run_suite(&SUITE_SEEDS)?;
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| {
            format!(
                "{} (seed {}): rel err {:.3e} at {}",
                r.name, r.seed, r.report.max_rel_err, r.report.worst_param
            )
        })
        .collect();
    if let Some(out) = &cfg.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let rows: Vec<_> = results
            .iter()
            .map(|r| serde_json::json!({ "name": r.name, "seed": r.seed, "max_rel_err": r.report.max_rel_err, "checked": r.report.checked }))
            .collect();
        write(
            &out.join("gradcheck.json"),
            serde_json::to_string_pretty(&rows)? + "\n",
        )?;
    }
    let worst = results
        .iter()
        .map(|r| r.report.max_rel_err)
        .fold(0.0, f64::max);
    if failed.is_empty() {
        Ok(format!(
            "{} checks passed; worst relative error {worst:.3e}",
            results.len()
        ))
    } else {
        Err(Error::Autodiff(format!(
            "{} of {} checks failed:\n  {}",
            failed.len(),
            results.len(),
            failed.join("\n  ")
        )))
    }
}

/// Runs one parsed command and returns its summary line.
pub fn run(cli: &Cli) -> Result<String> {
    let args = match &cli.command {
        Command::Synth(a)
        | Command::Preprocess(a)
        | Command::Stats(a)
        | Command::Train(a)
        | Command::Eval(a)
        | Command::Explain(a)
        | Command::Gradcheck(a) => a,
    };
    let cfg = args.resolve()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Synth(_) => cmd_synth(&cfg),
        Command::Preprocess(_) => cmd_preprocess(&cfg),
        Command::Stats(_) => cmd_stats(&cfg),
        Command::Train(_) => cmd_train(&cfg),
        Command::Eval(_) => cmd_eval(&cfg, args),
        Command::Explain(_) => cmd_explain(&cfg, args),
        Command::Gradcheck(_) => cmd_gradcheck(&cfg),
    })
}

/// Parses `argv`, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("XMLTAG_LOG", "warn"))
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
