//! Python bindings. Structured results cross the boundary as plain dicts and lists.

use std::path::PathBuf;

use armd::corpus::{detokenize, load_bytes, tokenize, CorpusSplit, MarkovChain};
use armd::evalcli::{
    eval_perplexity, mean_unigram_entropy, run_invariant_suite_with, EvalReport, SuiteOptions,
};
use armd::masks::build_masks;
use armd::model::{flops_estimate, DEFAULT_FFN_EXPANSION};
use armd::sampler::{generate_with_plan, GenerationPlan};
use armd::schedule::{make_plan_from_tau, sample_masking_order, strided_permutation, BlockPlan};
use armd::trainer::{load_checkpoint, Checkpoint};
use armd::ArmdError;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

fn err(e: ArmdError) -> PyErr {
    match e {
        ArmdError::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// A masking order with its permutation and block partition.
#[pyclass(name = "BlockPlan", frozen)]
struct PyPlan(BlockPlan);

#[pymethods]
impl PyPlan {
    #[staticmethod]
    #[pyo3(signature = (tau, t_blocks=None))]
    fn from_tau(tau: Vec<usize>, t_blocks: Option<usize>) -> PyResult<Self> {
        let t = t_blocks.unwrap_or_else(|| tau.iter().copied().max().unwrap_or(0));
        make_plan_from_tau(&tau, t).map(Self).map_err(err)
    }

    #[staticmethod]
    fn identity(n: usize) -> PyResult<Self> {
        BlockPlan::identity(n).map(Self).map_err(err)
    }

    #[staticmethod]
    fn strided(n: usize, streams: usize) -> PyResult<Self> {
        strided_permutation(n, streams).map(Self).map_err(err)
    }

    /// Uniformly random order with one token per block.
    #[staticmethod]
    #[pyo3(signature = (n, seed=0))]
    fn random(n: usize, seed: u64) -> PyResult<Self> {
        sample_masking_order(n, &mut ChaCha8Rng::seed_from_u64(seed))
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        BlockPlan::from_text(text).map(Self).map_err(err)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    #[getter]
    fn t_blocks(&self) -> usize {
        self.0.t_blocks()
    }

    #[getter]
    fn tau(&self) -> Vec<usize> {
        self.0.tau().to_vec()
    }

    #[getter]
    fn pi(&self) -> Vec<usize> {
        self.0.pi().to_vec()
    }

    #[getter]
    fn block_of(&self) -> Vec<usize> {
        self.0.block_of().to_vec()
    }

    #[getter]
    fn block_sizes(&self) -> Vec<usize> {
        self.0.block_sizes().to_vec()
    }

    /// `(causal, strict)` as nested lists of booleans over processed slots.
    fn masks(&self) -> (Vec<Vec<bool>>, Vec<Vec<bool>>) {
        let m = build_masks(&self.0);
        let rows = |allowed: &[bool]| {
            allowed
                .chunks(self.0.n().max(1))
                .map(<[bool]>::to_vec)
                .collect()
        };
        (rows(m.causal.allowed()), rows(m.strict.allowed()))
    }

    fn __repr__(&self) -> String {
        format!(
            "BlockPlan(n={}, t_blocks={})",
            self.0.n(),
            self.0.t_blocks()
        )
    }
}

/// A trained model loaded from a checkpoint file.
#[pyclass(name = "Model", frozen)]
struct PyModel(Checkpoint);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_checkpoint(&path).map(Self).map_err(err)
    }

    #[getter]
    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.0.model)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.0.step
    }

    /// Dict with `tokens`, `log_probs`, `groups` and `model_calls`.
    #[pyo3(signature = (length, streams=1, temperature=1.0, seed=0))]
    fn generate(
        &self,
        py: Python<'_>,
        length: usize,
        streams: usize,
        temperature: f64,
        seed: u64,
    ) -> PyResult<Py<PyAny>> {
        let out = py.detach(|| {
            let gen = GenerationPlan::strided(length, streams)?;
            generate_with_plan(
                &self.0.params,
                &self.0.model,
                &gen,
                temperature,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
        });
        to_py(py, &out.map_err(err)?)
    }

    /// Validation NLL and perplexity on the held-out tail of a byte file.
    #[pyo3(signature = (data, seq_len=None, validation_fraction=None))]
    fn eval(
        &self,
        py: Python<'_>,
        data: PathBuf,
        seq_len: Option<usize>,
        validation_fraction: Option<f64>,
    ) -> PyResult<Py<PyAny>> {
        let defaults = self.0.train.clone().unwrap_or_default();
        let seq_len = seq_len.unwrap_or(defaults.seq_len);
        let fraction = validation_fraction.unwrap_or(defaults.validation_fraction);
        let report = py.detach(|| {
            let split =
                CorpusSplit::new(tokenize(&load_bytes(&data)?), fraction, seq_len, seq_len)?;
            let (nll, _) = eval_perplexity(&self.0.params, &self.0.model, &split)?;
            Ok(EvalReport::from_nll(nll, split.validation_windows().len()))
        });
        to_py(py, &report.map_err(err)?)
    }

    /// Mean unigram entropy of freshly generated samples.
    #[pyo3(signature = (samples=16, length=64, streams=1, temperature=1.0, seed=0))]
    fn entropy(
        &self,
        py: Python<'_>,
        samples: usize,
        length: usize,
        streams: usize,
        temperature: f64,
        seed: u64,
    ) -> PyResult<f64> {
        py.detach(|| {
            let gen = GenerationPlan::strided(length, streams)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seqs = (0..samples)
                .map(|_| {
                    generate_with_plan(&self.0.params, &self.0.model, &gen, temperature, &mut rng)
                        .map(|o| o.tokens)
                })
                .collect::<armd::Result<Vec<_>>>()?;
            mean_unigram_entropy(&seqs)
        })
        .map_err(err)
    }
}

#[pyfunction]
#[pyo3(signature = (n, d, layers, two_stream_layers, expansion=DEFAULT_FFN_EXPANSION))]
fn flops(
    py: Python<'_>,
    n: usize,
    d: usize,
    layers: usize,
    two_stream_layers: usize,
    expansion: f64,
) -> PyResult<Py<PyAny>> {
    to_py(
        py,
        &flops_estimate(n, d, layers, two_stream_layers, expansion).map_err(err)?,
    )
}

/// Runs the randomized invariant suite; returns a dict with `seed` and `results`.
#[pyfunction]
#[pyo3(signature = (seed=0, corrupt_strict_mask=false))]
fn verify(py: Python<'_>, seed: u64, corrupt_strict_mask: bool) -> PyResult<Py<PyAny>> {
    let report = py.detach(|| {
        run_invariant_suite_with(
            seed,
            &SuiteOptions {
                corrupt_strict_mask,
            },
        )
    });
    to_py(py, &report)
}

#[pyfunction]
fn encode(data: &[u8]) -> Vec<usize> {
    tokenize(data)
}

#[pyfunction]
fn decode(ids: Vec<usize>) -> PyResult<Vec<u8>> {
    detokenize(&ids).map_err(err)
}

/// Bytes sampled from the built-in sixteen-symbol Markov chain.
#[pyfunction]
#[pyo3(signature = (length, seed=0))]
fn markov_sample(length: usize, seed: u64) -> Vec<u8> {
    MarkovChain::toy().sample(length, seed)
}

#[pymodule]
fn armd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPlan>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(flops, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(markov_sample, m)?)?;
    Ok(())
}
