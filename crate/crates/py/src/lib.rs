//! Python bindings for the foodcast toolkit: synthetic data, cleaning,
//! window construction, model training and inference, metrics, and the chat
//! orchestration layer.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use foodcast_core::chat::{
    ChatBackend, ChatState, HttpBackend, ProfileDraft, QaEntry, QaStore, StubBackend,
};
use foodcast_core::ingest::{
    load_warnings, DateFormat, FeatureTable, Month, ObservationKey, WarningLabel, WarningLabelSet,
};
use foodcast_core::models::{
    load_model, predict_price, predict_price_cleaned_batch, predict_warning, save_model,
    ModelConfig, ModelKind, PriceModelConfig, TrainedModel, WarningModelConfig,
};
use foodcast_core::preprocess::{
    apply_recipe, build_windows, chrono_split, fit_recipe, invert_price, latest_windows,
    reduction_factor, CleaningRecipe, FlatWindow,
};
use foodcast_core::training::{
    evaluate_price_mae, evaluate_warning_f1, f1_macro, generate_synthetic, mae, train_price,
    train_warning, LossKind, SyntheticSpec, TrainConfig,
};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn parse_month(s: &str) -> PyResult<Month> {
    DateFormat::parse_any(s).ok_or_else(|| value_err(format!("unparseable month {s:?}")))
}

fn parse_key(country: &str, commodity: &str, month: &str) -> PyResult<ObservationKey> {
    ObservationKey::new(country, commodity, parse_month(month)?).map_err(value_err)
}

fn parse_label(s: &str) -> PyResult<WarningLabel> {
    WarningLabel::parse(s)
        .ok_or_else(|| value_err(format!("unknown severity {s:?} (none/moderate/high)")))
}

/// Aligned monthly feature rows keyed by (country, commodity, month).
#[pyclass(name = "FeatureTable")]
#[derive(Clone)]
struct PyFeatureTable {
    inner: FeatureTable,
}

#[pymethods]
impl PyFeatureTable {
    fn __len__(&self) -> usize {
        self.inner.rows.len()
    }

    #[getter]
    fn feature_names(&self) -> Vec<String> {
        self.inner.feature_names.clone()
    }

    /// Distinct (country, commodity) pairs.
    fn series(&self) -> Vec<(String, String)> {
        self.inner.series_keys()
    }

    /// One row as a list of floats, or None if the key is absent.
    fn row(&self, country: &str, commodity: &str, month: &str) -> PyResult<Option<Vec<f64>>> {
        let key = parse_key(country, commodity, month)?;
        Ok(self.inner.rows.get(&key).cloned())
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_csv(&path).map_err(io_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "FeatureTable({} rows x {} features, {} series)",
            self.inner.rows.len(),
            self.inner.width(),
            self.inner.series_keys().len()
        )
    }
}

/// Warning labels; keys absent from the set carry "none".
#[pyclass(name = "WarningLabels")]
#[derive(Clone)]
struct PyWarningLabels {
    inner: WarningLabelSet,
}

#[pymethods]
impl PyWarningLabels {
    #[new]
    fn new() -> Self {
        Self {
            inner: WarningLabelSet::default(),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.labels.len()
    }

    fn get(&self, country: &str, commodity: &str, month: &str) -> PyResult<String> {
        let key = parse_key(country, commodity, month)?;
        Ok(self.inner.get(&key).as_str().to_string())
    }

    fn insert(
        &mut self,
        country: &str,
        commodity: &str,
        month: &str,
        severity: &str,
    ) -> PyResult<()> {
        let key = parse_key(country, commodity, month)?;
        self.inner.insert(key, parse_label(severity)?);
        Ok(())
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_csv(&path).map_err(io_err)
    }

    fn __repr__(&self) -> String {
        format!("WarningLabels({} non-none labels)", self.inner.labels.len())
    }
}

/// Fitted cleaning statistics; apply never refits.
#[pyclass(name = "CleaningRecipe")]
#[derive(Clone)]
struct PyCleaningRecipe {
    inner: CleaningRecipe,
}

#[pymethods]
impl PyCleaningRecipe {
    fn apply(&self, table: &PyFeatureTable) -> PyResult<PyFeatureTable> {
        Ok(PyFeatureTable {
            inner: apply_recipe(&self.inner, &table.inner).map_err(value_err)?,
        })
    }

    /// Invert a cleaned local price back to raw currency at a key's month.
    fn invert_price(
        &self,
        country: &str,
        commodity: &str,
        month: &str,
        cleaned: f64,
    ) -> PyResult<f64> {
        let key = parse_key(country, commodity, month)?;
        invert_price(&self.inner, &key, cleaned).map_err(value_err)
    }
}

/// Flattened model inputs: static features at t, then m prices, then m
/// futures; targets are the cleaned price and label at t+h.
#[pyclass(name = "WindowSet")]
#[derive(Clone)]
struct PyWindowSet {
    inner: Vec<FlatWindow>,
}

#[pymethods]
impl PyWindowSet {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// (country, commodity, month, features, target_price, target_label)
    fn get(&self, idx: usize) -> PyResult<(String, String, String, Vec<f64>, f64, String)> {
        let w = self
            .inner
            .get(idx)
            .ok_or_else(|| value_err("window index out of range"))?;
        Ok((
            w.key.country.clone(),
            w.key.commodity.clone(),
            w.key.month.to_string(),
            w.features.clone(),
            w.target_price,
            w.target_label.as_str().to_string(),
        ))
    }

    fn targets(&self) -> Vec<f64> {
        self.inner.iter().map(|w| w.target_price).collect()
    }

    fn labels(&self) -> Vec<String> {
        self.inner
            .iter()
            .map(|w| w.target_label.as_str().to_string())
            .collect()
    }

    /// Chronological per-series split into (train, validation).
    fn split(&self, train_frac: f64) -> (PyWindowSet, PyWindowSet) {
        let (a, b) = chrono_split(&self.inner, train_frac);
        (PyWindowSet { inner: a }, PyWindowSet { inner: b })
    }

    fn __repr__(&self) -> String {
        let len = self.inner.first().map_or(0, |w| w.features.len());
        format!("WindowSet({} windows of length {})", self.inner.len(), len)
    }
}

/// A trained price or warning model with its cleaning recipe.
#[pyclass(name = "Model")]
struct PyModel {
    inner: TrainedModel,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn kind(&self) -> String {
        match self.inner.kind() {
            ModelKind::Price => "price".into(),
            ModelKind::Warning => "warning".into(),
        }
    }

    #[getter]
    fn horizon(&self) -> usize {
        match &self.inner.config {
            ModelConfig::Price(c) => c.horizon,
            ModelConfig::Warning(c) => c.horizon,
        }
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&self.inner, &path).map_err(io_err)
    }

    /// Cleaned-space forecasts for every window.
    fn predict_cleaned(&self, windows: &PyWindowSet) -> PyResult<Vec<f64>> {
        predict_price_cleaned_batch(&self.inner, &windows.inner).map_err(value_err)
    }

    /// (cleaned, raw, target_month) per window; needs the stored recipe.
    fn predict_price(&self, windows: &PyWindowSet) -> PyResult<Vec<(f64, f64, String)>> {
        windows
            .inner
            .iter()
            .map(|w| {
                let p = predict_price(&self.inner, w).map_err(value_err)?;
                Ok((p.cleaned, p.raw, p.target_month.to_string()))
            })
            .collect()
    }

    /// (label, [p_none, p_moderate, p_high]) per window, chaining the given
    /// predicted prices (one list of h floats per window).
    fn predict_warning(
        &self,
        windows: &PyWindowSet,
        predicted: Vec<Vec<f64>>,
    ) -> PyResult<Vec<(String, [f64; 3])>> {
        if predicted.len() != windows.inner.len() {
            return Err(value_err("predicted prices must match the window count"));
        }
        windows
            .inner
            .iter()
            .zip(&predicted)
            .map(|(w, p)| {
                let (label, probs) = predict_warning(&self.inner, w, p).map_err(value_err)?;
                Ok((label.as_str().to_string(), probs))
            })
            .collect()
    }

    fn evaluate_mae(&self, windows: &PyWindowSet) -> PyResult<f64> {
        evaluate_price_mae(&self.inner, &windows.inner).map_err(value_err)
    }

    fn evaluate_f1(&self, windows: &PyWindowSet, predicted: Vec<Vec<f64>>) -> PyResult<f64> {
        evaluate_warning_f1(&self.inner, &windows.inner, &predicted).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("Model(kind={}, horizon={})", self.kind(), self.horizon())
    }
}

#[pyfunction]
#[pyo3(name = "generate_synthetic")]
#[pyo3(signature = (series=5, months=120, slope=(0.2, 1.2), seasonal_amplitude=8.0,
    ar_coeff=0.5, noise_std=1.0, futures_lag=1, futures_noise=0.5,
    g_moderate=0.07, g_high=0.15, base_price=100.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn generate_synthetic_py(
    series: usize,
    months: usize,
    slope: (f64, f64),
    seasonal_amplitude: f64,
    ar_coeff: f64,
    noise_std: f64,
    futures_lag: usize,
    futures_noise: f64,
    g_moderate: f64,
    g_high: f64,
    base_price: f64,
    seed: u64,
) -> PyResult<(PyFeatureTable, PyWarningLabels)> {
    let spec = SyntheticSpec {
        series_count: series,
        months,
        slope_range: slope,
        seasonal_amplitude,
        ar_coeff,
        noise_std,
        futures_lag,
        futures_noise,
        g_moderate,
        g_high,
        base_price,
        seed,
    };
    let (table, labels) = generate_synthetic(&spec).map_err(value_err)?;
    Ok((
        PyFeatureTable { inner: table },
        PyWarningLabels { inner: labels },
    ))
}

#[pyfunction]
fn read_table_csv(path: PathBuf) -> PyResult<PyFeatureTable> {
    Ok(PyFeatureTable {
        inner: FeatureTable::read_csv(&path).map_err(io_err)?,
    })
}

#[pyfunction]
fn read_warnings_csv(path: PathBuf) -> PyResult<PyWarningLabels> {
    Ok(PyWarningLabels {
        inner: load_warnings(&path).map_err(io_err)?,
    })
}

#[pyfunction]
#[pyo3(name = "fit_recipe")]
fn fit_recipe_py(table: &PyFeatureTable) -> PyResult<PyCleaningRecipe> {
    Ok(PyCleaningRecipe {
        inner: fit_recipe(&table.inner).map_err(value_err)?,
    })
}

#[pyfunction]
#[pyo3(name = "build_windows")]
#[pyo3(signature = (table, labels=None, m=3, horizon=1))]
fn build_windows_py(
    table: &PyFeatureTable,
    labels: Option<&PyWarningLabels>,
    m: usize,
    horizon: usize,
) -> PyResult<PyWindowSet> {
    let empty = WarningLabelSet::default();
    let labels = labels.map_or(&empty, |l| &l.inner);
    Ok(PyWindowSet {
        inner: build_windows(&table.inner, labels, m, horizon).map_err(value_err)?,
    })
}

#[pyfunction]
#[pyo3(name = "latest_windows")]
#[pyo3(signature = (table, m=3))]
fn latest_windows_py(table: &PyFeatureTable, m: usize) -> PyResult<PyWindowSet> {
    Ok(PyWindowSet {
        inner: latest_windows(&table.inner, m).map_err(value_err)?,
    })
}

#[pyfunction]
#[pyo3(name = "train_price")]
#[pyo3(signature = (train, val=None, recipe=None, epochs=500, seed=0, batch_size=3,
    learning_rate=1e-3, d_model=32, heads=4, blocks=2, ffn_dim=64, dropout=0.4,
    l2=0.003, m=3, horizon=1))]
#[allow(clippy::too_many_arguments)]
fn train_price_py(
    train: &PyWindowSet,
    val: Option<&PyWindowSet>,
    recipe: Option<&PyCleaningRecipe>,
    epochs: usize,
    seed: u64,
    batch_size: usize,
    learning_rate: f64,
    d_model: usize,
    heads: usize,
    blocks: usize,
    ffn_dim: usize,
    dropout: f64,
    l2: f64,
    m: usize,
    horizon: usize,
) -> PyResult<(PyModel, Vec<f64>)> {
    let cfg = TrainConfig {
        batch_size,
        epochs,
        learning_rate,
        l2,
        seed,
        loss: LossKind::Mse,
    };
    let model_cfg = PriceModelConfig {
        d_model,
        heads,
        blocks,
        ffn_dim,
        dropout,
        l2,
        m,
        horizon,
    };
    let empty = Vec::new();
    let val = val.map_or(&empty, |v| &v.inner);
    let (model, curve) = train_price(
        &train.inner,
        val,
        &cfg,
        &model_cfg,
        recipe.map(|r| r.inner.clone()),
    )
    .map_err(value_err)?;
    Ok((PyModel { inner: model }, curve.train_loss))
}

#[pyfunction]
#[pyo3(name = "train_warning")]
#[pyo3(signature = (train, predicted, val=None, val_predicted=None, recipe=None, epochs=300,
    seed=0, batch_size=3, learning_rate=1e-3, d_model=32, heads=4, blocks=1,
    ffn_dims=vec![64, 32, 16], dropout=0.4, l2=0.003, m=3, horizon=1, skip_connection=true))]
#[allow(clippy::too_many_arguments)]
fn train_warning_py(
    train: &PyWindowSet,
    predicted: Vec<Vec<f64>>,
    val: Option<&PyWindowSet>,
    val_predicted: Option<Vec<Vec<f64>>>,
    recipe: Option<&PyCleaningRecipe>,
    epochs: usize,
    seed: u64,
    batch_size: usize,
    learning_rate: f64,
    d_model: usize,
    heads: usize,
    blocks: usize,
    ffn_dims: Vec<usize>,
    dropout: f64,
    l2: f64,
    m: usize,
    horizon: usize,
    skip_connection: bool,
) -> PyResult<(PyModel, Vec<f64>)> {
    let cfg = TrainConfig {
        batch_size,
        epochs,
        learning_rate,
        l2,
        seed,
        loss: LossKind::CrossEntropy,
    };
    let model_cfg = WarningModelConfig {
        d_model,
        heads,
        blocks,
        ffn_dims,
        dropout,
        l2,
        m,
        horizon,
        skip_connection,
    };
    let empty = Vec::new();
    let val_w = val.map_or(&empty, |v| &v.inner);
    let val_p = val_predicted.unwrap_or_default();
    let (model, curve) = train_warning(
        &train.inner,
        &predicted,
        val_w,
        &val_p,
        &cfg,
        &model_cfg,
        recipe.map(|r| r.inner.clone()),
    )
    .map_err(value_err)?;
    Ok((PyModel { inner: model }, curve.train_loss))
}

#[pyfunction]
#[pyo3(name = "load_model")]
fn load_model_py(path: PathBuf) -> PyResult<PyModel> {
    Ok(PyModel {
        inner: load_model(&path).map_err(io_err)?,
    })
}

#[pyfunction]
#[pyo3(name = "mae")]
fn mae_py(pred: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    mae(&pred, &target).map_err(value_err)
}

#[pyfunction]
#[pyo3(name = "f1_macro")]
fn f1_macro_py(pred: Vec<String>, truth: Vec<String>) -> PyResult<f64> {
    let parse = |v: &[String]| -> PyResult<Vec<WarningLabel>> {
        v.iter().map(|s| parse_label(s)).collect()
    };
    f1_macro(&parse(&pred)?, &parse(&truth)?).map_err(value_err)
}

/// (numerator, denominator, value) of the input-size reduction m*n/(n-2+2m).
#[pyfunction]
#[pyo3(name = "reduction_factor")]
fn reduction_factor_py(n: usize, m: usize) -> PyResult<(u64, u64, f64)> {
    let r = reduction_factor(n, m).map_err(value_err)?;
    Ok((r.numerator, r.denominator, r.value()))
}

/// One conversation: filter, retrieval, and generation routing over a
/// deterministic stub backend or an HTTP backend.
#[pyclass(name = "ChatSession")]
struct PyChatSession {
    state: ChatState,
}

#[pymethods]
impl PyChatSession {
    #[new]
    #[pyo3(signature = (country, commodity, severity, language="en", qa=None, backend="stub", url=None))]
    fn new(
        country: &str,
        commodity: &str,
        severity: &str,
        language: &str,
        qa: Option<Vec<(String, String, Option<String>)>>,
        backend: &str,
        url: Option<&str>,
    ) -> PyResult<Self> {
        let draft = ProfileDraft {
            country: Some(country.to_string()),
            commodity: Some(commodity.to_string()),
            severity: Some(parse_label(severity)?),
            language: Some(language.to_string()),
        };
        let entries = qa
            .unwrap_or_default()
            .into_iter()
            .map(|(question, answer, citation)| QaEntry {
                question,
                answer,
                citation,
            })
            .collect();
        let store = QaStore::new(entries).map_err(value_err)?;
        let backend: Box<dyn ChatBackend> = match backend {
            "stub" => Box::new(StubBackend),
            "http" => Box::new(HttpBackend::new(
                url.ok_or_else(|| value_err("http backend needs a url"))?,
            )),
            other => return Err(value_err(format!("unknown backend {other:?}"))),
        };
        let state = ChatState::init_conversation(draft, store, backend).map_err(value_err)?;
        Ok(Self { state })
    }

    #[getter]
    fn greeting(&self) -> String {
        self.state.history[0].text.clone()
    }

    /// Returns (route, text) where route is filtered | retrieved | generated.
    fn respond(&mut self, query: &str) -> PyResult<(String, String)> {
        let turn = self.state.respond(query).map_err(value_err)?;
        Ok((
            turn.route
                .expect("assistant turns carry a route")
                .as_str()
                .to_string(),
            turn.text,
        ))
    }

    /// Full dialogue as (role, text, route) triples.
    fn history(&self) -> Vec<(String, String, Option<String>)> {
        self.state
            .history
            .iter()
            .map(|t| {
                (
                    match t.role {
                        foodcast_core::chat::Role::User => "user".to_string(),
                        foodcast_core::chat::Role::Assistant => "assistant".to_string(),
                    },
                    t.text.clone(),
                    t.route.map(|r| r.as_str().to_string()),
                )
            })
            .collect()
    }
}

#[pymodule]
fn foodcast(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFeatureTable>()?;
    m.add_class::<PyWarningLabels>()?;
    m.add_class::<PyCleaningRecipe>()?;
    m.add_class::<PyWindowSet>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyChatSession>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic_py, m)?)?;
    m.add_function(wrap_pyfunction!(read_table_csv, m)?)?;
    m.add_function(wrap_pyfunction!(read_warnings_csv, m)?)?;
    m.add_function(wrap_pyfunction!(fit_recipe_py, m)?)?;
    m.add_function(wrap_pyfunction!(build_windows_py, m)?)?;
    m.add_function(wrap_pyfunction!(latest_windows_py, m)?)?;
    m.add_function(wrap_pyfunction!(train_price_py, m)?)?;
    m.add_function(wrap_pyfunction!(train_warning_py, m)?)?;
    m.add_function(wrap_pyfunction!(load_model_py, m)?)?;
    m.add_function(wrap_pyfunction!(mae_py, m)?)?;
    m.add_function(wrap_pyfunction!(f1_macro_py, m)?)?;
    m.add_function(wrap_pyfunction!(reduction_factor_py, m)?)?;
    Ok(())
}
