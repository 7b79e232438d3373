//! Python bindings: load a trained run directory, predict from raw text,
//! score label sets, and drive the command line.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use xmltag::corpus::rollup_label;
use xmltag::eval::{micro_f, LabelSet};
use xmltag::models::Model;
use xmltag::textprep::{PreprocessedDoc, Preprocessor};

fn py_err(e: xmltag::Error) -> PyErr {
    match e {
        xmltag::Error::Io { .. } | xmltag::Error::Checkpoint(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// A trained model together with the preprocessing it was trained with.
#[pyclass(name = "Model", module = "xmltag_py", frozen)]
struct PyModel {
    pre: Preprocessor,
    model: Model,
}

impl PyModel {
    fn encode(&self, texts: &[String]) -> PyResult<Vec<PreprocessedDoc>> {
        texts
            .iter()
            .map(|t| {
                let d = self.pre.encode(t);
                if d.is_empty() {
                    Err(PyValueError::new_err("text has no tokens"))
                } else {
                    Ok(d)
                }
            })
            .collect()
    }
}

#[pymethods]
impl PyModel {
    /// Loads the run written by `xmltag train --out DIR`.
    #[staticmethod]
    fn load(run_dir: PathBuf) -> PyResult<Self> {
        let (pre, model) = xmltag::cli::load_run(&run_dir).map_err(py_err)?;
        Ok(PyModel { pre, model })
    }

    #[getter]
    fn kind(&self) -> String {
        self.model.meta.kind.to_string()
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.model.meta.labels.codes().to_vec()
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.model.meta.threshold
    }

    /// Per-label positive probabilities, one row per text.
    fn probabilities(&self, py: Python<'_>, texts: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        let docs = self.encode(&texts)?;
        py.detach(|| self.model.probabilities(&docs))
            .map_err(py_err)
    }

    /// Predicted label codes, one sorted list per text.
    fn predict(&self, py: Python<'_>, texts: Vec<String>) -> PyResult<Vec<Vec<String>>> {
        let docs = self.encode(&texts)?;
        let sets = py.detach(|| self.model.predict(&docs)).map_err(py_err)?;
        Ok(sets.into_iter().map(|s| s.into_iter().collect()).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(kind={}, labels={})",
            self.model.meta.kind,
            self.model.num_labels()
        )
    }
}

/// Micro precision, recall and F over aligned lists of label sets.
#[pyfunction]
fn micro_scores(
    pred: Vec<BTreeSet<String>>,
    gold: Vec<BTreeSet<String>>,
) -> PyResult<(f64, f64, f64)> {
    let (p, g): (Vec<LabelSet>, Vec<LabelSet>) = (pred, gold);
    let s = micro_f(&p, &g).map_err(py_err)?;
    Ok((s.precision, s.recall, s.f1))
}

/// The three-character category of a code.
#[pyfunction]
fn rollup(code: &str) -> String {
    rollup_label(code).to_string()
}

/// Runs the command line with `args` (without the program name) and returns
/// the exit status.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv = std::iter::once("xmltag".to_string()).chain(args);
    let code = py.detach(|| xmltag::cli::main_with_args(argv));
    i32::from(code != ExitCode::SUCCESS)
}

#[pymodule]
fn xmltag_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(micro_scores, m)?)?;
    m.add_function(wrap_pyfunction!(rollup, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
