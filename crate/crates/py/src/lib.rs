//! Python bindings: dumps, concept fitting, ID matrices, reports,
//! intervention specs, stimulus sets, synthetic scenarios and SVG plots.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PyList};
use steerscope::extract::{self, FitOptions, Method, Normalization};
use steerscope::metrics::{self, ReportConfig};
use steerscope::plot::{self, PlotSpec};
use steerscope::steer;
use steerscope::stimulus;
use steerscope::store::{self, Manifest, Polarity};
use steerscope::synthgen;

create_exception!(pysteerscope, SteerscopeError, PyException, "Raised for any steerscope error; args are (kind, message).");

fn err(e: steerscope::Error) -> PyErr {
    SteerscopeError::new_err((e.kind(), e.to_string()))
}

fn invalid(msg: String) -> PyErr {
    err(steerscope::Error::InvalidConfig(msg))
}

/// Converts any serializable value into plain Python objects.
fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| err(e.into()))?;
    json_to_py(py, &v)
}

fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any().unbind(),
            (_, Some(u)) => u.into_pyobject(py)?.into_any().unbind(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any().unbind()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any().unbind()
        }
    })
}

/// Parses a Python value through `json.dumps`.
fn from_py<T: serde::de::DeserializeOwned>(value: &Bound<'_, PyAny>) -> PyResult<T> {
    let json = value.py().import("json")?;
    let text: String = json.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| err(e.into()))
}

fn rows(a: &ndarray::Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn grid(values: Vec<Vec<f64>>) -> PyResult<ndarray::Array2<f64>> {
    let r = values.len();
    let c = values.first().map_or(0, Vec::len);
    if values.iter().any(|row| row.len() != c) {
        return Err(err(steerscope::Error::Shape("ragged grid".into())));
    }
    ndarray::Array2::from_shape_vec((r, c), values.into_iter().flatten().collect())
        .map_err(|e| err(steerscope::Error::Shape(e.to_string())))
}

fn parse_method(s: &str) -> PyResult<Method> {
    match s {
        "pca" => Ok(Method::Pca),
        "kmeans" => Ok(Method::Kmeans),
        _ => Err(invalid(format!("unknown method `{s}`"))),
    }
}

fn parse_normalization(s: &str) -> PyResult<Normalization> {
    match s {
        "per_dim_zscore" => Ok(Normalization::PerDimZscore),
        "per_row_l2" => Ok(Normalization::PerRowL2),
        "none" => Ok(Normalization::None),
        _ => Err(invalid(format!("unknown normalization `{s}`"))),
    }
}

fn parse_polarity(s: &str) -> PyResult<Polarity> {
    match s {
        "positive" => Ok(Polarity::Positive),
        "negative" => Ok(Polarity::Negative),
        "unpaired" => Ok(Polarity::Unpaired),
        _ => Err(invalid(format!("unknown polarity `{s}`"))),
    }
}

/// Hidden states for every (checkpoint, layer) of one polarity.
#[pyclass(module = "pysteerscope", frozen)]
struct ActivationDump {
    inner: store::ActivationDump,
}

#[pymethods]
impl ActivationDump {
    /// Builds a dump from a manifest dict and a flat f32 buffer ordered
    /// checkpoint, layer, sample, position, dim.
    #[new]
    fn new(manifest: &Bound<'_, PyAny>, data: Vec<f32>) -> PyResult<Self> {
        let m: Manifest = from_py(manifest)?;
        Ok(ActivationDump {
            inner: store::ActivationDump::new(m, data).map_err(err)?,
        })
    }

    /// A manifest dict with format defaults.
    #[staticmethod]
    #[pyo3(signature = (model_id, checkpoint_labels, num_layers, hidden_dim, num_samples, polarity, concept, seed, token_positions=None))]
    #[allow(clippy::too_many_arguments)]
    fn manifest_template(
        py: Python<'_>,
        model_id: String,
        checkpoint_labels: Vec<String>,
        num_layers: usize,
        hidden_dim: usize,
        num_samples: usize,
        polarity: &str,
        concept: String,
        seed: u64,
        token_positions: Option<Vec<i64>>,
    ) -> PyResult<Py<PyAny>> {
        let mut m = Manifest::new(
            model_id,
            checkpoint_labels,
            num_layers,
            hidden_dim,
            num_samples,
            parse_polarity(polarity)?,
            concept,
            seed,
        );
        if let Some(p) = token_positions {
            m.token_positions = p;
        }
        to_py(py, &m)
    }

    #[getter]
    fn manifest(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, self.inner.manifest())
    }

    /// One shard as a list of rows (sample-major, then position).
    fn shard(&self, checkpoint: usize, layer: usize) -> PyResult<Vec<Vec<f32>>> {
        let m = self.inner.manifest();
        if checkpoint >= m.num_checkpoints() || layer >= m.num_layers {
            return Err(err(steerscope::Error::Index(format!("cell ({checkpoint}, {layer}) out of range"))));
        }
        Ok(self.inner.shard(checkpoint, layer).chunks(m.hidden_dim).map(<[f32]>::to_vec).collect())
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        store::write_dump(&self.inner, &path).map_err(err)
    }

    fn __repr__(&self) -> String {
        let m = self.inner.manifest();
        format!(
            "ActivationDump(concept={:?}, checkpoints={}, layers={}, samples={}, dim={})",
            m.concept,
            m.num_checkpoints(),
            m.num_layers,
            m.num_samples,
            m.hidden_dim
        )
    }
}

#[pyfunction]
fn read_dump(path: PathBuf) -> PyResult<ActivationDump> {
    Ok(ActivationDump {
        inner: store::read_dump(&path).map_err(err)?,
    })
}

#[pyfunction]
fn validate_pairing(pos: &ActivationDump, neg: &ActivationDump) -> PyResult<()> {
    store::validate_pairing(&pos.inner, &neg.inner).map_err(err)
}

/// Unit concept vectors, one per layer, fitted at one checkpoint.
#[pyclass(module = "pysteerscope", frozen, from_py_object)]
#[derive(Clone)]
struct ConceptVectorSet {
    inner: extract::ConceptVectorSet,
}

#[pymethods]
impl ConceptVectorSet {
    #[getter]
    fn concept(&self) -> String {
        self.inner.concept.clone()
    }

    #[getter]
    fn checkpoint_label(&self) -> String {
        self.inner.checkpoint_label.clone()
    }

    #[getter]
    fn vectors(&self) -> Vec<Vec<f64>> {
        self.inner.vectors.iter().map(|v| v.to_vec()).collect()
    }

    #[getter]
    fn explained_ratios(&self) -> Vec<Vec<f64>> {
        self.inner.explained_ratios.clone()
    }

    #[getter]
    fn orientation_margins(&self) -> Vec<f64> {
        self.inner.orientation_margins.clone()
    }

    #[getter]
    fn ambiguous_layers(&self) -> Vec<usize> {
        self.inner.ambiguous_layers.clone()
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        extract::write_vector_set(&self.inner, &path).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "ConceptVectorSet(concept={:?}, checkpoint={:?}, layers={}, dim={})",
            self.inner.concept,
            self.inner.checkpoint_label,
            self.inner.num_layers(),
            self.inner.hidden_dim()
        )
    }
}

#[pyfunction]
fn read_vector_set(path: PathBuf) -> PyResult<ConceptVectorSet> {
    Ok(ConceptVectorSet {
        inner: extract::read_vector_set(&path).map_err(err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (set_size, seed, train_fraction=stimulus::DEFAULT_TRAIN_FRACTION))]
fn split_train_test(set_size: usize, seed: u64, train_fraction: f64) -> PyResult<(Vec<usize>, Vec<usize>)> {
    stimulus::split_train_test(set_size, seed, train_fraction).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (pos, neg, train_ids, method="pca", normalization="per_dim_zscore", allow_degenerate=false))]
fn fit_concept(
    py: Python<'_>,
    pos: &ActivationDump,
    neg: &ActivationDump,
    train_ids: Vec<usize>,
    method: &str,
    normalization: &str,
    allow_degenerate: bool,
) -> PyResult<Vec<ConceptVectorSet>> {
    let opts = FitOptions {
        method: parse_method(method)?,
        normalization: parse_normalization(normalization)?,
        allow_degenerate,
    };
    let sets = py
        .detach(|| extract::fit_concept(&pos.inner, &neg.inner, &train_ids, opts))
        .map_err(err)?;
    Ok(sets.into_iter().map(|inner| ConceptVectorSet { inner }).collect())
}

#[pyfunction]
fn kmeans_direction(h_pos: Vec<Vec<f64>>, h_neg: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let (p, n) = (grid(h_pos)?, grid(h_neg)?);
    Ok(extract::kmeans_direction(p.view(), n.view()).map_err(err)?.to_vec())
}

/// Writes a fit directory (per-checkpoint vector sets plus the split).
#[pyfunction]
#[pyo3(signature = (vsets, train_ids, test_ids, split_seed, train_fraction, path))]
fn write_fit(
    vsets: Vec<ConceptVectorSet>,
    train_ids: Vec<usize>,
    test_ids: Vec<usize>,
    split_seed: u64,
    train_fraction: f64,
    path: PathBuf,
) -> PyResult<()> {
    let record = extract::FitRecord {
        vsets: vsets.into_iter().map(|v| v.inner).collect(),
        train_ids,
        test_ids,
        split_seed,
        train_fraction,
    };
    extract::write_fit(&record, &path).map_err(err)
}

/// Returns `(vsets, train_ids, test_ids)` from a fit directory.
#[pyfunction]
fn read_fit(path: PathBuf) -> PyResult<(Vec<ConceptVectorSet>, Vec<usize>, Vec<usize>)> {
    let r = extract::read_fit(&path).map_err(err)?;
    Ok((
        r.vsets.into_iter().map(|inner| ConceptVectorSet { inner }).collect(),
        r.train_ids,
        r.test_ids,
    ))
}

/// Mean test-pair ID score per (checkpoint, layer) with its global
/// min-max view.
#[pyclass(module = "pysteerscope", frozen)]
struct IdMatrix {
    inner: metrics::IdMatrix,
}

#[pymethods]
impl IdMatrix {
    #[getter]
    fn checkpoint_labels(&self) -> Vec<String> {
        self.inner.checkpoint_labels.clone()
    }

    #[getter]
    fn raw(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.raw)
    }

    #[getter]
    fn normalized(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.normalized)
    }

    #[getter]
    fn stderr(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.stderr)
    }

    fn entropy_series(&self) -> Vec<f64> {
        metrics::entropy_series(&self.inner)
    }

    fn layer_diff(&self, checkpoint: usize) -> PyResult<Vec<f64>> {
        metrics::layer_diff(&self.inner, checkpoint).map_err(err)
    }

    /// The strongest adjacent-layer step as a dict.
    fn detect_spike(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &metrics::detect_spike(&self.inner).map_err(err)?)
    }

    fn normalized_csv(&self) -> String {
        self.inner.normalized_csv()
    }

    /// Heatmap SVG of the normalized matrix.
    fn heatmap_svg<'py>(&self, py: Python<'py>, title: &str) -> PyResult<Bound<'py, PyBytes>> {
        let layers = (0..self.inner.num_layers()).map(|l| l.to_string()).collect();
        let spec = PlotSpec::heatmap(
            title,
            "layer",
            "checkpoint",
            self.inner.checkpoint_labels.clone(),
            layers,
            self.inner.normalized.clone(),
        );
        Ok(PyBytes::new(py, &plot::render_svg(&spec).map_err(err)?))
    }
}

#[pyfunction]
fn build_id_matrix(
    py: Python<'_>,
    vsets: Vec<ConceptVectorSet>,
    pos: &ActivationDump,
    neg: &ActivationDump,
    test_ids: Vec<usize>,
) -> PyResult<IdMatrix> {
    let vsets: Vec<_> = vsets.into_iter().map(|v| v.inner).collect();
    let inner = py
        .detach(|| metrics::build_id_matrix(&vsets, &pos.inner, &neg.inner, &test_ids))
        .map_err(err)?;
    Ok(IdMatrix { inner })
}

/// IdMatrix from raw scores and their standard errors.
#[pyfunction]
#[pyo3(signature = (checkpoint_labels, raw, stderr, n_test, concept="concept"))]
fn id_matrix_from_raw(
    checkpoint_labels: Vec<String>,
    raw: Vec<Vec<f64>>,
    stderr: Vec<Vec<f64>>,
    n_test: usize,
    concept: &str,
) -> PyResult<IdMatrix> {
    let inner = metrics::IdMatrix::from_raw(concept, checkpoint_labels, grid(raw)?, grid(stderr)?, n_test).map_err(err)?;
    Ok(IdMatrix { inner })
}

#[pyfunction]
fn row_entropy(row: Vec<f64>) -> f64 {
    metrics::row_entropy(&row)
}

#[pyfunction]
fn cosine_across_checkpoints(vsets: Vec<ConceptVectorSet>, layer: usize) -> PyResult<Vec<Vec<f64>>> {
    let vsets: Vec<_> = vsets.into_iter().map(|v| v.inner).collect();
    Ok(rows(&metrics::cosine_across_checkpoints(&vsets, layer).map_err(err)?))
}

/// The steerability report as a dict.
#[pyfunction]
#[pyo3(signature = (matrix, vsets, top_k=metrics::DEFAULT_TOP_K, scale=metrics::DEFAULT_SCALE,
    cosine_threshold=metrics::DEFAULT_COSINE_THRESHOLD, spike_floor=metrics::DEFAULT_SPIKE_FLOOR, cosine_layer=None))]
#[allow(clippy::too_many_arguments)]
fn make_report(
    py: Python<'_>,
    matrix: &IdMatrix,
    vsets: Vec<ConceptVectorSet>,
    top_k: usize,
    scale: f64,
    cosine_threshold: f64,
    spike_floor: f64,
    cosine_layer: Option<usize>,
) -> PyResult<Py<PyAny>> {
    let vsets: Vec<_> = vsets.into_iter().map(|v| v.inner).collect();
    let config = ReportConfig {
        top_k,
        scale,
        cosine_threshold,
        spike_floor,
        cosine_layer,
    };
    to_py(py, &metrics::make_report(&matrix.inner, &vsets, &config).map_err(err)?)
}

/// Adds `scale * v_l` to activations at the chosen layers.
#[pyclass(module = "pysteerscope", frozen)]
struct InterventionSpec {
    inner: steer::InterventionSpec,
}

#[pymethods]
impl InterventionSpec {
    #[new]
    #[pyo3(signature = (vectors, layers, scale=metrics::DEFAULT_SCALE))]
    fn new(vectors: ConceptVectorSet, layers: Vec<usize>, scale: f64) -> PyResult<Self> {
        Ok(InterventionSpec {
            inner: steer::InterventionSpec::new(vectors.inner, &layers, scale).map_err(err)?,
        })
    }

    #[getter]
    fn layers(&self) -> Vec<usize> {
        self.inner.layers.clone()
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.inner.scale
    }

    #[getter]
    fn concept(&self) -> String {
        self.inner.concept.clone()
    }

    #[getter]
    fn vectors(&self) -> ConceptVectorSet {
        ConceptVectorSet {
            inner: self.inner.vectors.clone(),
        }
    }

    /// `activation + scale * v_layer` when the layer is steered, else unchanged.
    fn apply(&self, activation: Vec<f64>, layer: usize) -> PyResult<Vec<f64>> {
        let a = ndarray::Array1::from(activation);
        Ok(steer::apply_intervention(a.view(), &self.inner, layer).map_err(err)?.to_vec())
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&path).map_err(|e| err(e.into()))?;
        steer::write_intervention(&self.inner, &path).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "InterventionSpec(concept={:?}, layers={:?}, scale={})",
            self.inner.concept, self.inner.layers, self.inner.scale
        )
    }
}

#[pyfunction]
fn read_intervention(path: PathBuf) -> PyResult<InterventionSpec> {
    Ok(InterventionSpec {
        inner: steer::read_intervention(&path).map_err(err)?,
    })
}

/// Emotion pairs against the other bundled emotions, as a dict.
#[pyfunction]
#[pyo3(signature = (emotion, size=256, seed=0, train_fraction=stimulus::DEFAULT_TRAIN_FRACTION))]
fn bundled_emotion_set(py: Python<'_>, emotion: &str, size: usize, seed: u64, train_fraction: f64) -> PyResult<Py<PyAny>> {
    to_py(py, &stimulus::bundled_emotion_set(emotion, size, seed, train_fraction).map_err(err)?)
}

#[pyfunction]
fn read_stimulus_set(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyAny>> {
    to_py(py, &stimulus::read_stimulus_set(&path).map_err(err)?)
}

#[pyfunction]
fn write_stimulus_set(set: &Bound<'_, PyAny>, path: PathBuf) -> PyResult<()> {
    let set: stimulus::StimulusSet = from_py(set)?;
    stimulus::write_stimulus_set(&set, &path).map_err(err)
}

/// A ramp (or, with `null=True`, pure-noise) scenario as a dict.
#[pyfunction]
#[pyo3(signature = (num_checkpoints=10, num_layers=8, hidden_dim=64, num_samples=64, onset=3, noise_sigma=0.5, seed=0, null=false))]
#[allow(clippy::too_many_arguments)]
fn emergence_scenario(
    py: Python<'_>,
    num_checkpoints: usize,
    num_layers: usize,
    hidden_dim: usize,
    num_samples: usize,
    onset: usize,
    noise_sigma: f64,
    seed: u64,
    null: bool,
) -> PyResult<Py<PyAny>> {
    let s = if null {
        synthgen::EmergenceScenario::null(num_checkpoints, num_layers, hidden_dim, num_samples, noise_sigma, seed)
    } else {
        synthgen::EmergenceScenario::ramp(num_checkpoints, num_layers, hidden_dim, num_samples, onset, noise_sigma, seed)
    };
    to_py(py, &s)
}

/// Draws `(pos, neg, gold)` for a scenario dict.
#[pyfunction]
fn generate_scenario(py: Python<'_>, scenario: &Bound<'_, PyAny>) -> PyResult<(ActivationDump, ActivationDump, Py<PyAny>)> {
    let s: synthgen::EmergenceScenario = from_py(scenario)?;
    let (pos, neg, gold) = py.detach(|| synthgen::generate(&s)).map_err(err)?;
    Ok((ActivationDump { inner: pos }, ActivationDump { inner: neg }, to_py(py, &gold)?))
}

#[pyfunction]
fn write_scenario(py: Python<'_>, scenario: &Bound<'_, PyAny>, path: PathBuf) -> PyResult<Py<PyAny>> {
    let s: synthgen::EmergenceScenario = from_py(scenario)?;
    to_py(py, &synthgen::write_scenario(&s, &path).map_err(err)?)
}

/// Heatmap SVG of a grid with values in [0, 1].
#[pyfunction]
#[pyo3(signature = (title, row_labels, col_labels, values, x_label="layer", y_label="checkpoint"))]
fn heatmap_svg<'py>(
    py: Python<'py>,
    title: &str,
    row_labels: Vec<String>,
    col_labels: Vec<String>,
    values: Vec<Vec<f64>>,
    x_label: &str,
    y_label: &str,
) -> PyResult<Bound<'py, PyBytes>> {
    let spec = PlotSpec::heatmap(title, x_label, y_label, row_labels, col_labels, grid(values)?);
    Ok(PyBytes::new(py, &plot::render_svg(&spec).map_err(err)?))
}

#[pymodule]
fn pysteerscope(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SteerscopeError", m.py().get_type::<SteerscopeError>())?;
    m.add("FORMAT_VERSION", store::FORMAT_VERSION)?;
    m.add_class::<ActivationDump>()?;
    m.add_class::<ConceptVectorSet>()?;
    m.add_class::<IdMatrix>()?;
    m.add_class::<InterventionSpec>()?;
    m.add_function(wrap_pyfunction!(read_dump, m)?)?;
    m.add_function(wrap_pyfunction!(validate_pairing, m)?)?;
    m.add_function(wrap_pyfunction!(read_vector_set, m)?)?;
    m.add_function(wrap_pyfunction!(split_train_test, m)?)?;
    m.add_function(wrap_pyfunction!(fit_concept, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans_direction, m)?)?;
    m.add_function(wrap_pyfunction!(write_fit, m)?)?;
    m.add_function(wrap_pyfunction!(read_fit, m)?)?;
    m.add_function(wrap_pyfunction!(build_id_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(id_matrix_from_raw, m)?)?;
    m.add_function(wrap_pyfunction!(row_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_across_checkpoints, m)?)?;
    m.add_function(wrap_pyfunction!(make_report, m)?)?;
    m.add_function(wrap_pyfunction!(read_intervention, m)?)?;
    m.add_function(wrap_pyfunction!(bundled_emotion_set, m)?)?;
    m.add_function(wrap_pyfunction!(read_stimulus_set, m)?)?;
    m.add_function(wrap_pyfunction!(write_stimulus_set, m)?)?;
    m.add_function(wrap_pyfunction!(emergence_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(write_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(heatmap_svg, m)?)?;
    Ok(())
}
