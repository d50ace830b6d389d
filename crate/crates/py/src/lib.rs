//! Python bindings for the core types and operations.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use fedinstruct_core as core;
use fedinstruct_core::checkpoint::CheckpointMeta;
use fedinstruct_core::retrieval::{HashEmbedder, SelectedExamples};
use fedinstruct_core::{Document, Example, SelectionPolicy, Tensor};

create_exception!(fedinstruct, FedInstructError, PyException);

fn err(e: core::Error) -> PyErr {
    FedInstructError::new_err(format!("[{}] {e}", e.kind()))
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

/// Named f32 tensors in insertion order.
#[pyclass(name = "ParameterSet", module = "fedinstruct", skip_from_py_object)]
#[derive(Clone, Default)]
pub struct PyParameterSet {
    inner: core::ParameterSet,
}

#[pymethods]
impl PyParameterSet {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; `data` is row-major and must match `shape`.
    fn insert(&mut self, name: String, shape: Vec<u64>, data: Vec<f32>) -> PyResult<()> {
        let t = Tensor::new(shape, data).py()?;
        self.inner.insert(name, t).py()
    }

    /// `(shape, data)` of one tensor, or None.
    fn get(&self, name: &str) -> Option<(Vec<u64>, Vec<f32>)> {
        self.inner.get(name).map(|t| (t.shape().to_vec(), t.data().to_vec()))
    }

    fn names(&self) -> Vec<String> {
        self.inner.names().map(str::to_string).collect()
    }

    fn num_elements(&self) -> usize {
        self.inner.num_elements()
    }

    fn checksum(&self) -> f64 {
        self.inner.checksum()
    }

    fn flatten(&self) -> Vec<f32> {
        self.inner.flatten()
    }

    #[staticmethod]
    fn zeros(spec: &str) -> PyResult<Self> {
        let spec: core::tensor::ShapeSpec = spec.parse().py()?;
        Ok(Self {
            inner: spec.zeros().py()?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __contains__(&self, name: &str) -> bool {
        self.inner.get(name).is_some()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let parts: Vec<String> = self
            .inner
            .iter()
            .map(|(n, t)| format!("{n}={:?}", t.shape()))
            .collect();
        format!("ParameterSet({})", parts.join(", "))
    }
}

/// The seeded splitmix64 stream used throughout the pipeline.
#[pyclass(name = "Rng", module = "fedinstruct")]
pub struct PyRng {
    inner: core::rng::SplitMix64,
}

#[pymethods]
impl PyRng {
    /// With a label, derives the named stream exactly as the pipeline does.
    #[new]
    #[pyo3(signature = (seed, label=None))]
    fn new(seed: u64, label: Option<&str>) -> Self {
        let inner = match label {
            Some(l) => core::rng::seeded_rng(seed, l),
            None => core::rng::SplitMix64::new(seed),
        };
        Self { inner }
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn next_f64(&mut self) -> f64 {
        self.inner.next_f64()
    }

    fn below(&mut self, bound: u64) -> PyResult<u64> {
        if bound == 0 {
            return Err(FedInstructError::new_err("bound must be positive"));
        }
        Ok(self.inner.below(bound))
    }

    fn sample_indices(&mut self, len: usize, count: usize) -> PyResult<Vec<usize>> {
        if count > len {
            return Err(FedInstructError::new_err("count exceeds len"));
        }
        Ok(self.inner.sample_indices(len, count))
    }
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    core::text::tokenize(text)
}

#[pyfunction]
fn fnv1a64(data: &[u8]) -> u64 {
    core::text::fnv1a64(data)
}

#[pyfunction]
fn rouge_l(candidate: &str, reference: &str) -> f32 {
    core::evaluation::rouge_l(candidate, reference)
}

/// Greedy-matching F1 with the built-in hash embeddings.
#[pyfunction]
fn bertscore_f1(candidate: &str, reference: &str) -> PyResult<f32> {
    let (c, r) = (core::text::tokenize(candidate), core::text::tokenize(reference));
    core::retrieval::bertscore_f1(&c, &r, &HashEmbedder).py()
}

fn pool_from(rows: Vec<(String, String, String, Option<String>)>) -> PyResult<Vec<Example>> {
    rows.into_iter()
        .enumerate()
        .map(|(i, (document, instruction, response, domain))| {
            let mut doc = Document::new(format!("pool-{}", i + 1), document).py()?;
            if let Some(d) = &domain {
                doc = doc.with_domain(d.clone());
            }
            Ok(Example {
                document: doc,
                instruction,
                response,
                domain,
            })
        })
        .collect()
}

/// Renders a few-shot prompt. `examples` holds `(document, question,
/// answer)` triples.
#[pyfunction]
#[pyo3(signature = (examples, target, header=None))]
fn render_prompt(examples: Vec<(String, String, String)>, target: &str, header: Option<&str>) -> PyResult<String> {
    let pool = pool_from(examples.into_iter().map(|(d, q, a)| (d, q, a, None)).collect())?;
    let selected = SelectedExamples {
        indices: (0..pool.len()).collect(),
        examples: pool,
        scores: None,
    };
    let target = Document::new("target", target).py()?;
    Ok(core::generation::render_prompt(
        header.unwrap_or(core::generation::DEFAULT_HEADER),
        &selected,
        &target,
    ))
}

/// Returns `(instruction, response)` or raises with the failure reason.
#[pyfunction]
fn parse_completion(raw: &str) -> PyResult<(String, String)> {
    core::generation::parse_completion(raw, "")
        .map(|p| (p.instruction, p.response))
        .map_err(|f| FedInstructError::new_err(format!("[ParseFailure] {}", f.as_str())))
}

/// What the deterministic mock generator answers for a prompt.
#[pyfunction]
fn mock_complete(prompt: &str) -> String {
    core::generation::MockGenerator::respond_to(core::generation::target_of_prompt(prompt))
}

#[pyfunction]
fn reward_keep_count(n: usize) -> usize {
    core::filtering::reward_keep_count(n)
}

/// Pool indices chosen for `target`. Pool rows are `(document, question,
/// answer, domain)`; the random policies draw from the client's selection
/// stream.
#[pyfunction]
#[pyo3(signature = (target, pool, policy="retrieval", k=3, seed=0, client_id="client", domain=None))]
fn select_examples(
    target: &str,
    pool: Vec<(String, String, String, Option<String>)>,
    policy: &str,
    k: usize,
    seed: u64,
    client_id: &str,
    domain: Option<String>,
) -> PyResult<Vec<usize>> {
    let policy: SelectionPolicy = policy.parse().py()?;
    let pool = pool_from(pool)?;
    let mut target = Document::new("target", target).py()?;
    if let Some(d) = domain {
        target = target.with_domain(d);
    }
    let mut rng = core::retrieval::selection_rng(seed, client_id);
    let sel = core::retrieval::select_examples(&target, &pool, policy, k, &mut rng, &HashEmbedder).py()?;
    Ok(sel.indices)
}

/// Weighted mean with weights `sizes[m] / sum(sizes)`.
#[pyfunction]
fn aggregate(sets: Vec<PyRef<'_, PyParameterSet>>, sizes: Vec<usize>) -> PyResult<PyParameterSet> {
    let sets: Vec<core::ParameterSet> = sets.iter().map(|s| s.inner.clone()).collect();
    Ok(PyParameterSet {
        inner: core::federation::aggregate(&sets, &sizes).py()?,
    })
}

fn meta_dict<'py>(py: Python<'py>, meta: &CheckpointMeta) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    if let Some(r) = meta.round {
        d.set_item("round", r)?;
    }
    if let Some(s) = meta.seed {
        d.set_item("seed", s)?;
    }
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (params, round=None, seed=None))]
fn encode_checkpoint<'py>(
    py: Python<'py>,
    params: &PyParameterSet,
    round: Option<u64>,
    seed: Option<u64>,
) -> Bound<'py, PyBytes> {
    let bytes = core::checkpoint::encode(&params.inner, &CheckpointMeta { round, seed });
    PyBytes::new(py, &bytes)
}

/// Returns `(params, meta)` where meta holds whichever of round and seed
/// were present.
#[pyfunction]
fn decode_checkpoint<'py>(py: Python<'py>, data: &[u8]) -> PyResult<(PyParameterSet, Bound<'py, PyDict>)> {
    let (inner, meta) = core::checkpoint::decode(data).py()?;
    Ok((PyParameterSet { inner }, meta_dict(py, &meta)?))
}

#[pyfunction]
#[pyo3(signature = (path, params, round=None, seed=None))]
fn write_checkpoint(path: PathBuf, params: &PyParameterSet, round: Option<u64>, seed: Option<u64>) -> PyResult<()> {
    core::checkpoint::write_checkpoint(&path, &params.inner, &CheckpointMeta { round, seed }).py()
}

#[pyfunction]
fn read_checkpoint<'py>(py: Python<'py>, path: PathBuf) -> PyResult<(PyParameterSet, Bound<'py, PyDict>)> {
    let (inner, meta) = core::checkpoint::read_checkpoint(&path).py()?;
    Ok((PyParameterSet { inner }, meta_dict(py, &meta)?))
}

#[pymodule]
fn fedinstruct(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FedInstructError", m.py().get_type::<FedInstructError>())?;
    m.add_class::<PyParameterSet>()?;
    m.add_class::<PyRng>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(fnv1a64, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(bertscore_f1, m)?)?;
    m.add_function(wrap_pyfunction!(render_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_completion, m)?)?;
    m.add_function(wrap_pyfunction!(mock_complete, m)?)?;
    m.add_function(wrap_pyfunction!(reward_keep_count, m)?)?;
    m.add_function(wrap_pyfunction!(select_examples, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(encode_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(decode_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(write_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(read_checkpoint, m)?)?;
    Ok(())
}
