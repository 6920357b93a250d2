//! Python bindings: superposition metrics, the tokenizer, the classifier
//! (init / load / predict / trace), deletion utilities, and the synthetic
//! corpus generator. Matrices cross the boundary as nested float lists.

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use safr_core::data;
use safr_core::eval;
use safr_core::model::{Model as CoreModel, ModelConfig};
use safr_core::repr_metrics::{self, LayerTag, RepresentationMatrix};
use safr_core::synth;

fn to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("matrix must have at least one row"));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must have equal length"));
    }
    let t = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((t, cols), flat)
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn from_array(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn rep(rows: Vec<Vec<f64>>) -> PyResult<RepresentationMatrix> {
    Ok(RepresentationMatrix::new(LayerTag::Fc1, to_array(rows)?))
}

fn parse_layer(name: &str) -> PyResult<LayerTag> {
    LayerTag::parse(name).ok_or_else(|| {
        PyValueError::new_err(format!(
            "unknown layer {name:?}; expected embedding|vmask|attention|fc1|fc2"
        ))
    })
}

/// Pairwise dot products between token representations (rows).
#[pyfunction]
fn interference_matrix(rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let m = repr_metrics::interference_matrix(&rep(rows)?)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(from_array(&m))
}

/// Per-token sum of squared projections of the other rows onto this row's
/// unit direction.
#[pyfunction]
fn polysemanticity(rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let v = repr_metrics::polysemanticity(&rep(rows)?)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(v.to_vec())
}

/// Fraction of each row's direction dedicated to its own token, in [0, 1].
#[pyfunction]
fn capacity(rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let v = repr_metrics::capacity(&rep(rows)?)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(v.to_vec())
}

/// Cosine similarity between rows; zero rows yield zeros.
#[pyfunction]
fn cosine_matrix(rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let m = repr_metrics::cosine_matrix(&rep(rows)?)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(from_array(&m))
}

/// Mean over tokens of sqrt(polysemanticity / embed_dim).
#[pyfunction]
fn importance_loss(rows: Vec<Vec<f64>>, embed_dim: usize) -> PyResult<f64> {
    Ok(safr_core::loss::importance_loss(&rep(rows)?, embed_dim))
}

/// Attention-weighted penalty on low-interference attended pairs.
#[pyfunction]
fn interaction_loss(heads: Vec<Vec<Vec<f64>>>) -> PyResult<f64> {
    let mats: Vec<Array2<f64>> = heads
        .into_iter()
        .map(to_array)
        .collect::<PyResult<_>>()?;
    Ok(safr_core::loss::interaction_loss(&mats))
}

/// Lowercases, splits on whitespace, and peels leading/trailing punctuation
/// into separate tokens.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    data::tokenize(text)
}

/// Number of tokens the deletion protocols remove from a length-t input at
/// percentage k.
#[pyfunction]
fn deletion_count(t: usize, k: f64) -> usize {
    eval::deletion_count(t, k)
}

/// Deterministic synthetic sentiment corpus: list of (label, text) pairs.
#[pyfunction]
fn synth_corpus(n: usize, seed: u64) -> Vec<(u32, String)> {
    synth::generate(n, seed)
        .into_iter()
        .map(|e| (e.label, e.text))
        .collect()
}

/// The transformer classifier. Construct untrained via `init` or from a
/// checkpoint via `load`.
#[pyclass]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    /// Untrained model over an explicit vocabulary (pad and unk are
    /// prepended automatically by the corpus builder, so pass the full
    /// id-ordered token list including them).
    #[staticmethod]
    #[pyo3(signature = (vocab, classes=2, embed_dim=8, ff_dim=32, heads=2, max_len=128, seed=0, use_vmask=true, disable_pe=false))]
    #[allow(clippy::too_many_arguments)]
    fn init(
        vocab: Vec<String>,
        classes: usize,
        embed_dim: usize,
        ff_dim: usize,
        heads: usize,
        max_len: usize,
        seed: u64,
        use_vmask: bool,
        disable_pe: bool,
    ) -> PyResult<Self> {
        let vocab = data::Vocab::from_tokens(vocab)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        let mut cfg = ModelConfig::new(vocab.len(), classes, max_len);
        cfg.embed_dim = embed_dim;
        cfg.ff_dim = ff_dim;
        cfg.heads = heads;
        cfg.dropout = 0.0;
        cfg.seed = seed;
        cfg.use_vmask = use_vmask;
        cfg.disable_pe = disable_pe;
        let inner =
            CoreModel::init(cfg, vocab).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Model { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = CoreModel::load(std::path::Path::new(path))
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(Model { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner
            .save(std::path::Path::new(path))
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// Token ids for a text under this model's vocabulary.
    fn encode(&self, text: &str) -> Vec<u32> {
        data::tokenize(text)
            .iter()
            .map(|t| self.inner.vocab.id(t))
            .collect()
    }

    fn predict(&self, token_ids: Vec<u32>) -> PyResult<usize> {
        self.inner
            .predict(&token_ids)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Full forward trace: logits, mask probabilities, attention weights,
    /// and each layer's token representations.
    fn trace<'py>(&self, py: Python<'py>, token_ids: Vec<u32>) -> PyResult<Bound<'py, PyDict>> {
        let t = self
            .inner
            .trace(&token_ids)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        let d = PyDict::new_bound(py);
        d.set_item("logits", t.logits.to_vec())?;
        d.set_item("mask_probs", t.mask_probs.to_vec())?;
        d.set_item("pooled", t.pooled.to_vec())?;
        d.set_item(
            "attn_weights",
            t.attn_weights.iter().map(from_array).collect::<Vec<_>>(),
        )?;
        d.set_item("embedding", from_array(&t.embedding.data))?;
        d.set_item("vmask", from_array(&t.vmask_out.data))?;
        d.set_item("attention", from_array(&t.attn_out.data))?;
        d.set_item("fc1", from_array(&t.fc1_out.data))?;
        d.set_item("fc2", from_array(&t.fc2_out.data))?;
        Ok(d)
    }

    /// Capacity of each token's representation at the named layer.
    fn layer_capacity(&self, token_ids: Vec<u32>, layer: &str) -> PyResult<Vec<f64>> {
        let tag = parse_layer(layer)?;
        let trace = self
            .inner
            .trace(&token_ids)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        repr_metrics::capacity(trace.layer(tag))
            .map(|v| v.to_vec())
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Token positions ordered by capacity descending (ties keep the
    /// earlier position first).
    fn rank_by_capacity(&self, token_ids: Vec<u32>, layer: &str) -> PyResult<Vec<usize>> {
        let tag = parse_layer(layer)?;
        let trace = self
            .inner
            .trace(&token_ids)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(eval::rank_tokens_by_capacity(&trace, tag))
    }

    #[getter]
    fn vocab(&self) -> Vec<String> {
        self.inner.vocab.id_to_token.clone()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.config.classes
    }
}

#[pymodule]
fn safr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(interference_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(polysemanticity, m)?)?;
    m.add_function(wrap_pyfunction!(capacity, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(importance_loss, m)?)?;
    m.add_function(wrap_pyfunction!(interaction_loss, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(deletion_count, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
