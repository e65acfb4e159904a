//! The price-regression and warning-classification encoder transformers,
//! their parameter initialization, inference entry points, and the versioned
//! on-disk model container.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{Month, WarningLabel};
use crate::numerics::{
    positional_encoding, softmax_rows, AttentionParams, Graph, Mode, NodeId, NumericsError,
    ParameterSet, RandomSource, Tensor,
};
use crate::preprocess::{invert_price, CleaningRecipe, FlatWindow, PreprocessError};

pub const FORMAT_VERSION: u32 = 1;
pub const MODEL_FILE_EXTENSION: &str = "nnet.json";
pub const WARNING_CLASSES: usize = 3;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("model kind mismatch: expected {expected}, found {found}")]
    KindMismatch {
        expected: ModelKind,
        found: ModelKind,
    },
    #[error("model carries no cleaning recipe; raw-unit conversion unavailable")]
    RecipeMissing,
    #[error("unsupported model format version {0}")]
    BadVersion(u64),
    #[error("corrupt model payload: {0}")]
    CorruptPayload(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("window of length {got} does not match the model input length {expected}")]
    WindowLength { expected: usize, got: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Price,
    Warning,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Price => "price",
            ModelKind::Warning => "warning",
        })
    }
}

/// Architecture of the price transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub l2: f64,
    pub m: usize,
    pub horizon: usize,
}

impl Default for PriceModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            blocks: 2,
            ffn_dim: 64,
            dropout: 0.4,
            l2: 0.003,
            m: 3,
            horizon: 1,
        }
    }
}

impl PriceModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        if self.l2 < 0.0 {
            return Err(ModelError::InvalidConfig(format!(
                "l2 {} negative",
                self.l2
            )));
        }
        if self.blocks == 0 || self.ffn_dim == 0 || self.m == 0 || self.horizon == 0 {
            return Err(ModelError::InvalidConfig(
                "blocks, ffn_dim, m, horizon must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Architecture of the warning transformer: one block, a decreasing dense
/// chain, a reshape layer back to d_model, an always-on skip connection, and
/// a fixed 3-class head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarningModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_dims: Vec<usize>,
    pub dropout: f64,
    pub l2: f64,
    pub m: usize,
    pub horizon: usize,
    pub skip_connection: bool,
}

impl Default for WarningModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 4,
            blocks: 1,
            ffn_dims: vec![64, 32, 16],
            dropout: 0.4,
            l2: 0.003,
            m: 3,
            horizon: 1,
            skip_connection: true,
        }
    }
}

impl WarningModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout {} outside [0,1)",
                self.dropout
            )));
        }
        if self.l2 < 0.0 {
            return Err(ModelError::InvalidConfig(format!(
                "l2 {} negative",
                self.l2
            )));
        }
        if self.ffn_dims.is_empty() || self.ffn_dims.windows(2).any(|w| w[1] >= w[0]) {
            return Err(ModelError::InvalidConfig(format!(
                "ffn_dims must be non-empty and strictly decreasing, got {:?}",
                self.ffn_dims
            )));
        }
        if self.blocks == 0 || self.m == 0 || self.horizon == 0 {
            return Err(ModelError::InvalidConfig(
                "blocks, m, horizon must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Price(PriceModelConfig),
    Warning(WarningModelConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Price(_) => ModelKind::Price,
            ModelConfig::Warning(_) => ModelKind::Warning,
        }
    }
}

/// Exponential-moving batch-norm statistics, keyed by layer path. The blend
/// factor is transient state: the training loop sets it to zero for the
/// final re-estimation pass so the stored statistics become the exact
/// population statistics of the training set under the final weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunningStats {
    entries: BTreeMap<String, RunningEntry>,
    #[serde(skip, default = "default_momentum")]
    momentum: f64,
}

impl Default for RunningStats {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
            momentum: BN_MOMENTUM,
        }
    }
}

impl PartialEq for RunningStats {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunningEntry {
    mean: Tensor,
    var: Tensor,
}

pub const BN_MOMENTUM: f64 = 0.9;

fn default_momentum() -> f64 {
    BN_MOMENTUM
}

impl RunningStats {
    pub fn init(&mut self, name: &str, dim: usize) {
        self.entries.insert(
            name.to_string(),
            RunningEntry {
                mean: Tensor::zeros(&[dim]),
                var: Tensor::full(&[dim], 1.0),
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        self.entries.get(name).map(|e| (&e.mean, &e.var))
    }

    /// Momentum applied by `update`; 0 replaces the statistics outright.
    pub fn set_momentum(&mut self, momentum: f64) {
        self.momentum = momentum;
    }

    pub fn update(&mut self, name: &str, batch_mean: &Tensor, batch_var: &Tensor) {
        let momentum = self.momentum;
        if let Some(e) = self.entries.get_mut(name) {
            for (r, b) in e.mean.data_mut().iter_mut().zip(batch_mean.data()) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
            for (r, b) in e.var.data_mut().iter_mut().zip(batch_var.data()) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
        }
    }

    fn iter_blobs(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries
            .iter()
            .flat_map(|(k, e)| [(k.as_str(), &e.mean), (k.as_str(), &e.var)])
    }
}

fn insert_dense(
    params: &mut ParameterSet,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut RandomSource,
) {
    params.insert(
        &format!("{prefix}.weight"),
        crate::numerics::xavier_uniform(fan_in, fan_out, rng),
    );
    params.insert(&format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
}

fn insert_norm(params: &mut ParameterSet, prefix: &str, dim: usize) {
    params.insert(&format!("{prefix}.gamma"), Tensor::full(&[dim], 1.0));
    params.insert(&format!("{prefix}.beta"), Tensor::zeros(&[dim]));
}

/// Fresh Xavier-initialized parameters for the price model; deterministic in
/// the random source.
pub fn init_price_params(
    cfg: &PriceModelConfig,
    rng: &mut RandomSource,
) -> (ParameterSet, RunningStats) {
    let d = cfg.d_model;
    let mut params = ParameterSet::new();
    let mut running = RunningStats::default();
    insert_dense(&mut params, "embed", 1, d, rng);
    for b in 0..cfg.blocks {
        for proj in ["wq", "wk", "wv", "wo"] {
            insert_dense(&mut params, &format!("block{b}.attn.{proj}"), d, d, rng);
        }
        insert_norm(&mut params, &format!("block{b}.ln"), d);
        insert_dense(
            &mut params,
            &format!("block{b}.ffn.fc1"),
            d,
            cfg.ffn_dim,
            rng,
        );
        insert_dense(
            &mut params,
            &format!("block{b}.ffn.fc2"),
            cfg.ffn_dim,
            d,
            rng,
        );
        insert_norm(&mut params, &format!("block{b}.bn"), d);
        running.init(&format!("block{b}.bn"), d);
    }
    insert_dense(&mut params, "head", d, 1, rng);
    (params, running)
}

/// Fresh parameters for the warning model.
pub fn init_warning_params(
    cfg: &WarningModelConfig,
    rng: &mut RandomSource,
) -> (ParameterSet, RunningStats) {
    let d = cfg.d_model;
    let mut params = ParameterSet::new();
    let mut running = RunningStats::default();
    insert_dense(&mut params, "embed", 1, d, rng);
    for b in 0..cfg.blocks {
        for proj in ["wq", "wk", "wv", "wo"] {
            insert_dense(&mut params, &format!("block{b}.attn.{proj}"), d, d, rng);
        }
        insert_norm(&mut params, &format!("block{b}.ln"), d);
    }
    let mut fan_in = d;
    for (i, &dim) in cfg.ffn_dims.iter().enumerate() {
        insert_dense(&mut params, &format!("ffn.fc{i}"), fan_in, dim, rng);
        fan_in = dim;
    }
    insert_norm(&mut params, "ffn.bn", fan_in);
    running.init("ffn.bn", fan_in);
    insert_dense(&mut params, "reshape", fan_in, d, rng);
    insert_dense(&mut params, "head", d, WARNING_CLASSES, rng);
    (params, running)
}

/// Parameter paths the L2 penalty applies to: all weight matrices for the
/// price model, feed-forward weight matrices only for the warning model.
pub fn l2_penalized_names(kind: ModelKind, params: &ParameterSet) -> Vec<String> {
    params
        .names()
        .filter(|n| n.ends_with(".weight"))
        .filter(|n| match kind {
            ModelKind::Price => true,
            ModelKind::Warning => n.starts_with("ffn.fc"),
        })
        .map(str::to_string)
        .collect()
}

struct Binder<'a> {
    params: &'a ParameterSet,
    bound: BTreeMap<String, NodeId>,
}

impl<'a> Binder<'a> {
    fn new(params: &'a ParameterSet) -> Self {
        Self {
            params,
            bound: BTreeMap::new(),
        }
    }

    fn get(&mut self, g: &mut Graph, name: &str) -> Result<NodeId, ModelError> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let id = g.param(name, self.params.get(name)?.clone());
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    fn attention(&mut self, g: &mut Graph, prefix: &str) -> Result<AttentionParams, ModelError> {
        Ok(AttentionParams {
            wq: self.get(g, &format!("{prefix}.wq.weight"))?,
            bq: self.get(g, &format!("{prefix}.wq.bias"))?,
            wk: self.get(g, &format!("{prefix}.wk.weight"))?,
            bk: self.get(g, &format!("{prefix}.wk.bias"))?,
            wv: self.get(g, &format!("{prefix}.wv.weight"))?,
            bv: self.get(g, &format!("{prefix}.wv.bias"))?,
            wo: self.get(g, &format!("{prefix}.wo.weight"))?,
            bo: self.get(g, &format!("{prefix}.wo.bias"))?,
        })
    }
}

/// Embed each scalar of [batch, len] as one token and add the position table.
fn embed_tokens(
    g: &mut Graph,
    binder: &mut Binder,
    x: &Tensor,
    d_model: usize,
) -> Result<(NodeId, usize, usize), ModelError> {
    let shape = x.shape().to_vec();
    if shape.len() != 2 || shape[1] == 0 {
        return Err(ModelError::Numerics(NumericsError::ShapeMismatch {
            op: "embed_tokens",
            detail: format!("wants [batch, len >= 1], got {:?}", shape),
        }));
    }
    let (batch, len) = (shape[0], shape[1]);
    let input = g.constant(x.clone());
    let scalars = g.reshape(input, vec![batch * len, 1])?;
    let w = binder.get(g, "embed.weight")?;
    let b = binder.get(g, "embed.bias")?;
    let embedded = g.dense(scalars, w, b)?;
    let tokens = g.reshape(embedded, vec![batch, len, d_model])?;
    let pe = g.constant(positional_encoding(len, d_model)?);
    let with_pos = g.add_bcast(tokens, pe)?;
    Ok((with_pos, batch, len))
}

/// Attention sublayer with post-norm residual placement:
/// `layer_norm(x + dropout(attention(x)))`.
#[allow(clippy::too_many_arguments)]
fn attention_sublayer(
    g: &mut Graph,
    binder: &mut Binder,
    x: NodeId,
    prefix: &str,
    heads: usize,
    dropout: f64,
    rng: &mut RandomSource,
    mode: Mode,
) -> Result<NodeId, ModelError> {
    let ap = binder.attention(g, &format!("{prefix}.attn"))?;
    let attended = g.multi_head_attention(x, &ap, heads)?;
    let attended = g.dropout(attended, dropout, rng, mode)?;
    let summed = g.add(x, attended)?;
    let gamma = binder.get(g, &format!("{prefix}.ln.gamma"))?;
    let beta = binder.get(g, &format!("{prefix}.ln.beta"))?;
    Ok(g.layer_norm(summed, gamma, beta)?)
}

/// Batch norm over tokens: [batch, len, d] is folded to [batch*len, d].
#[allow(clippy::too_many_arguments)]
fn batch_norm_tokens(
    g: &mut Graph,
    binder: &mut Binder,
    x: NodeId,
    name: &str,
    rows: usize,
    dim: usize,
    shape_back: Vec<usize>,
    running: &mut RunningStats,
    mode: Mode,
) -> Result<NodeId, ModelError> {
    let flat = g.reshape(x, vec![rows, dim])?;
    let gamma = binder.get(g, &format!("{name}.gamma"))?;
    let beta = binder.get(g, &format!("{name}.beta"))?;
    let normed = match mode {
        Mode::Train => {
            let (id, bm, bv) = g.batch_norm_train(flat, gamma, beta)?;
            running.update(name, &bm, &bv);
            id
        }
        Mode::Infer => {
            let (rm, rv) = running.get(name).ok_or_else(|| {
                ModelError::CorruptPayload(format!("missing running stats {name}"))
            })?;
            let (rm, rv) = (rm.clone(), rv.clone());
            g.batch_norm_infer(flat, gamma, beta, &rm, &rv)?
        }
    };
    Ok(g.reshape(normed, shape_back)?)
}

/// Build the price-model forward pass on a graph and return the [batch, 1]
/// output node.
pub fn build_price_forward(
    g: &mut Graph,
    cfg: &PriceModelConfig,
    params: &ParameterSet,
    running: &mut RunningStats,
    x: &Tensor,
    mode: Mode,
    rng: &mut RandomSource,
) -> Result<NodeId, ModelError> {
    cfg.validate()?;
    let mut binder = Binder::new(params);
    let (mut h, batch, len) = embed_tokens(g, &mut binder, x, cfg.d_model)?;
    for b in 0..cfg.blocks {
        let prefix = format!("block{b}");
        h = attention_sublayer(
            g,
            &mut binder,
            h,
            &prefix,
            cfg.heads,
            cfg.dropout,
            rng,
            mode,
        )?;
        // feed-forward: dense-relu-dense, then batch norm, dropout, residual
        let flat = g.reshape(h, vec![batch * len, cfg.d_model])?;
        let w1 = binder.get(g, &format!("{prefix}.ffn.fc1.weight"))?;
        let b1 = binder.get(g, &format!("{prefix}.ffn.fc1.bias"))?;
        let w2 = binder.get(g, &format!("{prefix}.ffn.fc2.weight"))?;
        let b2 = binder.get(g, &format!("{prefix}.ffn.fc2.bias"))?;
        let f = g.dense(flat, w1, b1)?;
        let f = g.relu(f);
        let f = g.dense(f, w2, b2)?;
        let f = g.reshape(f, vec![batch, len, cfg.d_model])?;
        let f = batch_norm_tokens(
            g,
            &mut binder,
            f,
            &format!("{prefix}.bn"),
            batch * len,
            cfg.d_model,
            vec![batch, len, cfg.d_model],
            running,
            mode,
        )?;
        let f = g.dropout(f, cfg.dropout, rng, mode)?;
        h = g.add(h, f)?;
    }
    let pooled = g.global_average_pool(h)?;
    let wh = binder.get(g, "head.weight")?;
    let bh = binder.get(g, "head.bias")?;
    Ok(g.dense(pooled, wh, bh)?)
}

/// Price forward as a plain function: window batch [batch, L] to [batch, 1].
pub fn price_forward(
    cfg: &PriceModelConfig,
    params: &ParameterSet,
    running: &mut RunningStats,
    x: &Tensor,
    mode: Mode,
    rng: &mut RandomSource,
) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let out = build_price_forward(&mut g, cfg, params, running, x, mode, rng)?;
    Ok(g.value(out).clone())
}

/// Build the warning-model forward pass; input rows carry the flat window
/// concatenated with the h predicted prices, output is [batch, 3] logits.
pub fn build_warning_forward(
    g: &mut Graph,
    cfg: &WarningModelConfig,
    params: &ParameterSet,
    running: &mut RunningStats,
    x: &Tensor,
    mode: Mode,
    rng: &mut RandomSource,
) -> Result<NodeId, ModelError> {
    cfg.validate()?;
    let mut binder = Binder::new(params);
    let (h0, batch, len) = embed_tokens(g, &mut binder, x, cfg.d_model)?;
    let mut h = h0;
    for b in 0..cfg.blocks {
        h = attention_sublayer(
            g,
            &mut binder,
            h,
            &format!("block{b}"),
            cfg.heads,
            cfg.dropout,
            rng,
            mode,
        )?;
    }
    // decreasing dense chain, batch norm, dropout, then the reshape layer
    // that restores d_model
    let mut f = g.reshape(h, vec![batch * len, cfg.d_model])?;
    for i in 0..cfg.ffn_dims.len() {
        let w = binder.get(g, &format!("ffn.fc{i}.weight"))?;
        let b = binder.get(g, &format!("ffn.fc{i}.bias"))?;
        f = g.dense(f, w, b)?;
        f = g.relu(f);
    }
    let last = *cfg.ffn_dims.last().expect("validated non-empty");
    let f = batch_norm_tokens(
        g,
        &mut binder,
        f,
        "ffn.bn",
        batch * len,
        last,
        vec![batch * len, last],
        running,
        mode,
    )?;
    let f = g.dropout(f, cfg.dropout, rng, mode)?;
    let wr = binder.get(g, "reshape.weight")?;
    let br = binder.get(g, "reshape.bias")?;
    let restored = g.dense(f, wr, br)?;
    let restored = g.reshape(restored, vec![batch, len, cfg.d_model])?;
    let y = g.add(h, restored)?;
    let mut pooled = g.global_average_pool(y)?;
    if cfg.skip_connection {
        let skip = g.global_average_pool(h0)?;
        pooled = g.add(pooled, skip)?;
    }
    let wh = binder.get(g, "head.weight")?;
    let bh = binder.get(g, "head.bias")?;
    Ok(g.dense(pooled, wh, bh)?)
}

pub fn warning_forward(
    cfg: &WarningModelConfig,
    params: &ParameterSet,
    running: &mut RunningStats,
    x: &Tensor,
    mode: Mode,
    rng: &mut RandomSource,
) -> Result<Tensor, ModelError> {
    let mut g = Graph::new();
    let out = build_warning_forward(&mut g, cfg, params, running, x, mode, rng)?;
    Ok(g.value(out).clone())
}

/// A trained model: weights, architecture, cleaning recipe, running batch
/// statistics. Immutable once loaded; concurrent inference is safe.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub params: ParameterSet,
    pub running: RunningStats,
    pub recipe: Option<CleaningRecipe>,
    pub format_version: u32,
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        self.config.kind()
    }

    pub fn price_config(&self) -> Result<&PriceModelConfig, ModelError> {
        match &self.config {
            ModelConfig::Price(c) => Ok(c),
            ModelConfig::Warning(_) => Err(ModelError::KindMismatch {
                expected: ModelKind::Price,
                found: ModelKind::Warning,
            }),
        }
    }

    pub fn warning_config(&self) -> Result<&WarningModelConfig, ModelError> {
        match &self.config {
            ModelConfig::Warning(c) => Ok(c),
            ModelConfig::Price(_) => Err(ModelError::KindMismatch {
                expected: ModelKind::Warning,
                found: ModelKind::Price,
            }),
        }
    }
}

/// Cleaned-space and raw-currency forecast for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePrediction {
    pub cleaned: f64,
    pub raw: f64,
    pub target_month: Month,
}

/// Run the price model on one window in inference mode (dropout off, running
/// batch statistics) and convert back to raw currency via the stored recipe.
pub fn predict_price(
    model: &TrainedModel,
    window: &FlatWindow,
) -> Result<PricePrediction, ModelError> {
    let cfg = model.price_config()?;
    let cleaned = predict_price_cleaned(model, window)?;
    let recipe = model.recipe.as_ref().ok_or(ModelError::RecipeMissing)?;
    let target_month = window
        .key
        .month
        .plus(cfg.horizon as i64)
        .map_err(|e| ModelError::InvalidConfig(format!("target month out of range: {e}")))?;
    let raw = invert_price(recipe, &window.key.at(target_month), cleaned)?;
    Ok(PricePrediction {
        cleaned,
        raw,
        target_month,
    })
}

/// Cleaned-space forecast only; works without a cleaning recipe.
pub fn predict_price_cleaned(model: &TrainedModel, window: &FlatWindow) -> Result<f64, ModelError> {
    let cfg = model.price_config()?;
    let x = Tensor::new(vec![1, window.features.len()], window.features.clone())
        .map_err(ModelError::Numerics)?;
    let mut running = model.running.clone();
    let mut rng = RandomSource::new(0);
    let out = price_forward(cfg, &model.params, &mut running, &x, Mode::Infer, &mut rng)?;
    Ok(out.data()[0])
}

/// Cleaned-space price forecasts for many windows, batched.
pub fn predict_price_cleaned_batch(
    model: &TrainedModel,
    windows: &[FlatWindow],
) -> Result<Vec<f64>, ModelError> {
    let cfg = model.price_config()?;
    let mut out = Vec::with_capacity(windows.len());
    let mut rng = RandomSource::new(0);
    for chunk in windows.chunks(64) {
        let width = chunk[0].features.len();
        let mut data = Vec::with_capacity(chunk.len() * width);
        for w in chunk {
            if w.features.len() != width {
                return Err(ModelError::WindowLength {
                    expected: width,
                    got: w.features.len(),
                });
            }
            data.extend_from_slice(&w.features);
        }
        let x = Tensor::new(vec![chunk.len(), width], data).map_err(ModelError::Numerics)?;
        let mut running = model.running.clone();
        let pred = price_forward(cfg, &model.params, &mut running, &x, Mode::Infer, &mut rng)?;
        out.extend_from_slice(pred.data());
    }
    Ok(out)
}

/// Run the warning model on a window plus the price forecasts feeding it;
/// returns the argmax label and the class probabilities.
pub fn predict_warning(
    model: &TrainedModel,
    window: &FlatWindow,
    predicted_prices: &[f64],
) -> Result<(WarningLabel, [f64; WARNING_CLASSES]), ModelError> {
    let cfg = model.warning_config()?;
    if predicted_prices.len() != cfg.horizon {
        return Err(ModelError::WindowLength {
            expected: cfg.horizon,
            got: predicted_prices.len(),
        });
    }
    let mut features = window.features.clone();
    features.extend_from_slice(predicted_prices);
    let x = Tensor::new(vec![1, features.len()], features).map_err(ModelError::Numerics)?;
    let mut running = model.running.clone();
    let mut rng = RandomSource::new(0);
    let logits = warning_forward(cfg, &model.params, &mut running, &x, Mode::Infer, &mut rng)?;
    let probs_t = softmax_rows(&logits)?;
    let mut probs = [0.0; WARNING_CLASSES];
    probs.copy_from_slice(probs_t.data());
    Ok((argmax_label(&probs), probs))
}

/// Lowest index wins ties.
pub fn argmax_label(probs: &[f64; WARNING_CLASSES]) -> WarningLabel {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    WarningLabel::from_class_index(best).expect("index in range")
}

// ---------------------------------------------------------------------------
// on-disk container: JSON header, base64 little-endian f64 blobs, CRC32
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorBlob {
    shape: Vec<usize>,
    data_b64: String,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    config: ModelConfig,
    recipe: Option<CleaningRecipe>,
    running: BTreeMap<String, (TensorBlob, TensorBlob)>,
    params: BTreeMap<String, TensorBlob>,
    checksum: u32,
}

fn tensor_to_blob(t: &Tensor) -> TensorBlob {
    let mut bytes = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    TensorBlob {
        shape: t.shape().to_vec(),
        data_b64: BASE64.encode(bytes),
    }
}

fn blob_to_tensor(blob: &TensorBlob) -> Result<Tensor, ModelError> {
    let bytes = BASE64
        .decode(&blob.data_b64)
        .map_err(|e| ModelError::CorruptPayload(format!("base64: {e}")))?;
    if !bytes.len().is_multiple_of(8) {
        return Err(ModelError::CorruptPayload(
            "blob length not a multiple of 8".into(),
        ));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(blob.shape.clone(), data)
        .map_err(|e| ModelError::CorruptPayload(format!("blob shape: {e}")))
}

fn checksum_blobs<'a>(blobs: impl Iterator<Item = &'a Tensor>) -> u32 {
    let mut hasher = crc32fast::Hasher::new();
    for t in blobs {
        for v in t.data() {
            hasher.update(&v.to_le_bytes());
        }
    }
    hasher.finalize()
}

/// Serialize a model; loading the file back reproduces every parameter bit
/// for bit.
pub fn save_model(model: &TrainedModel, path: &Path) -> Result<(), ModelError> {
    let params: BTreeMap<String, TensorBlob> = model
        .params
        .iter()
        .map(|(name, t)| (name.to_string(), tensor_to_blob(t)))
        .collect();
    let running: BTreeMap<String, (TensorBlob, TensorBlob)> = model
        .running
        .entries
        .iter()
        .map(|(name, e)| {
            (
                name.clone(),
                (tensor_to_blob(&e.mean), tensor_to_blob(&e.var)),
            )
        })
        .collect();
    let checksum = checksum_blobs(
        model
            .params
            .iter()
            .map(|(_, t)| t)
            .chain(model.running.iter_blobs().map(|(_, t)| t)),
    );
    let file = ModelFile {
        format_version: model.format_version,
        config: model.config.clone(),
        recipe: model.recipe.clone(),
        running,
        params,
        checksum,
    };
    let writer = BufWriter::new(File::create(path)?);
    serde_json::to_writer(writer, &file)
        .map_err(|e| ModelError::CorruptPayload(format!("serialize: {e}")))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TrainedModel, ModelError> {
    let reader = BufReader::new(File::open(path)?);
    let value: serde_json::Value = serde_json::from_reader(reader)
        .map_err(|e| ModelError::CorruptPayload(format!("parse: {e}")))?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| ModelError::CorruptPayload("missing format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(ModelError::BadVersion(version));
    }
    let file: ModelFile = serde_json::from_value(value)
        .map_err(|e| ModelError::CorruptPayload(format!("structure: {e}")))?;

    let mut params = ParameterSet::new();
    for (name, blob) in &file.params {
        params.insert(name, blob_to_tensor(blob)?);
    }
    let mut running = RunningStats::default();
    for (name, (mean, var)) in &file.running {
        running.entries.insert(
            name.clone(),
            RunningEntry {
                mean: blob_to_tensor(mean)?,
                var: blob_to_tensor(var)?,
            },
        );
    }
    let checksum = checksum_blobs(
        params
            .iter()
            .map(|(_, t)| t)
            .chain(running.iter_blobs().map(|(_, t)| t)),
    );
    if checksum != file.checksum {
        return Err(ModelError::CorruptPayload(format!(
            "checksum mismatch: stored {}, computed {}",
            file.checksum, checksum
        )));
    }
    Ok(TrainedModel {
        config: file.config,
        params,
        running,
        recipe: file.recipe,
        format_version: FORMAT_VERSION,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::ObservationKey;
    use crate::numerics::grad_check;

    fn tiny_price_cfg() -> PriceModelConfig {
        PriceModelConfig {
            d_model: 8,
            heads: 2,
            blocks: 2,
            ffn_dim: 12,
            dropout: 0.0,
            l2: 0.003,
            m: 3,
            horizon: 1,
        }
    }

    fn tiny_warning_cfg() -> WarningModelConfig {
        WarningModelConfig {
            d_model: 8,
            heads: 2,
            blocks: 1,
            ffn_dims: vec![12, 6],
            dropout: 0.0,
            l2: 0.003,
            m: 3,
            horizon: 1,
            skip_connection: true,
        }
    }

    fn rand_input(batch: usize, len: usize, seed: u64) -> Tensor {
        let mut rng = RandomSource::new(seed);
        Tensor::new(
            vec![batch, len],
            (0..batch * len).map(|_| rng.uniform()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn price_output_shape_is_batch_by_one_for_any_length() {
        let cfg = tiny_price_cfg();
        let mut rng = RandomSource::new(1);
        let (params, running) = init_price_params(&cfg, &mut rng);
        for len in [1, 5, 11, 17] {
            let x = rand_input(3, len, len as u64);
            let mut running = running.clone();
            let out =
                price_forward(&cfg, &params, &mut running, &x, Mode::Infer, &mut rng).unwrap();
            assert_eq!(out.shape(), &[3, 1], "len {len}");
        }
    }

    #[test]
    fn zeroed_head_predicts_zero() {
        let cfg = tiny_price_cfg();
        let mut rng = RandomSource::new(2);
        let (mut params, mut running) = init_price_params(&cfg, &mut rng);
        params.get_mut("head.weight").unwrap().data_mut().fill(0.0);
        params.get_mut("head.bias").unwrap().data_mut().fill(0.0);
        let x = rand_input(4, 11, 3);
        let out = price_forward(&cfg, &params, &mut running, &x, Mode::Infer, &mut rng).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn inference_is_deterministic_across_fresh_graphs() {
        let cfg = tiny_price_cfg();
        let mut rng = RandomSource::new(4);
        let (params, running) = init_price_params(&cfg, &mut rng);
        let x = rand_input(2, 11, 9);
        let mut r1 = running.clone();
        let mut r2 = running.clone();
        let mut rng1 = RandomSource::new(77);
        let mut rng2 = RandomSource::new(12345); // rng must not matter in infer mode
        let a = price_forward(&cfg, &params, &mut r1, &x, Mode::Infer, &mut rng1).unwrap();
        let b = price_forward(&cfg, &params, &mut r2, &x, Mode::Infer, &mut rng2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn price_gradients_match_finite_differences() {
        let cfg = PriceModelConfig {
            blocks: 1,
            d_model: 6,
            heads: 2,
            ffn_dim: 8,
            ..tiny_price_cfg()
        };
        let mut rng = RandomSource::new(5);
        let (params, running) = init_price_params(&cfg, &mut rng);
        let x = rand_input(2, 5, 6);
        let target = Tensor::new(vec![2, 1], vec![0.3, 0.7]).unwrap();
        let report = grad_check(
            |g, p| {
                let mut running = running.clone();
                let mut rng = RandomSource::new(0);
                let out = build_price_forward(g, &cfg, p, &mut running, &x, Mode::Train, &mut rng)
                    .map_err(|e| match e {
                        ModelError::Numerics(n) => n,
                        other => crate::numerics::NumericsError::BadShape(other.to_string()),
                    })?;
                let t = g.constant(target.clone());
                g.mse(out, t)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "worst {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }

    #[test]
    fn warning_logits_softmax_to_valid_distribution() {
        let cfg = tiny_warning_cfg();
        let mut rng = RandomSource::new(6);
        let (params, mut running) = init_warning_params(&cfg, &mut rng);
        let x = rand_input(3, 12, 7);
        let logits =
            warning_forward(&cfg, &params, &mut running, &x, Mode::Infer, &mut rng).unwrap();
        assert_eq!(logits.shape(), &[3, 3]);
        let probs = softmax_rows(&logits).unwrap();
        for row in probs.data().chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_warning_head_gives_uniform_probabilities() {
        let cfg = tiny_warning_cfg();
        let mut rng = RandomSource::new(7);
        let (mut params, mut running) = init_warning_params(&cfg, &mut rng);
        params.get_mut("head.weight").unwrap().data_mut().fill(0.0);
        params.get_mut("head.bias").unwrap().data_mut().fill(0.0);
        let x = rand_input(2, 12, 8);
        let logits =
            warning_forward(&cfg, &params, &mut running, &x, Mode::Infer, &mut rng).unwrap();
        let probs = softmax_rows(&logits).unwrap();
        for p in probs.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn warning_gradients_match_finite_differences() {
        let cfg = WarningModelConfig {
            d_model: 6,
            heads: 2,
            ffn_dims: vec![8, 4],
            ..tiny_warning_cfg()
        };
        let mut rng = RandomSource::new(8);
        let (params, running) = init_warning_params(&cfg, &mut rng);
        let x = rand_input(3, 6, 9);
        let targets = vec![0usize, 2, 1];
        let report = grad_check(
            |g, p| {
                let mut running = running.clone();
                let mut rng = RandomSource::new(0);
                let out =
                    build_warning_forward(g, &cfg, p, &mut running, &x, Mode::Train, &mut rng)
                        .map_err(|e| match e {
                            ModelError::Numerics(n) => n,
                            other => crate::numerics::NumericsError::BadShape(other.to_string()),
                        })?;
                g.softmax_cross_entropy(out, &targets)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "worst {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }

    #[test]
    fn ablated_skip_connection_changes_outputs() {
        let cfg = tiny_warning_cfg();
        let mut rng = RandomSource::new(9);
        let (params, running) = init_warning_params(&cfg, &mut rng);
        let x = rand_input(2, 12, 10);
        let mut r1 = running.clone();
        let mut r2 = running.clone();
        let with_skip = warning_forward(&cfg, &params, &mut r1, &x, Mode::Infer, &mut rng).unwrap();
        let ablated = WarningModelConfig {
            skip_connection: false,
            ..cfg
        };
        let without_skip =
            warning_forward(&ablated, &params, &mut r2, &x, Mode::Infer, &mut rng).unwrap();
        assert_ne!(with_skip, without_skip);
    }

    #[test]
    fn config_validation_catches_bad_settings() {
        let mut cfg = tiny_price_cfg();
        cfg.heads = 3; // does not divide 8
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_price_cfg();
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_warning_cfg();
        cfg.ffn_dims = vec![16, 16];
        assert!(cfg.validate().is_err());
    }

    fn sample_model(seed: u64) -> TrainedModel {
        let cfg = tiny_price_cfg();
        let mut rng = RandomSource::new(seed);
        let (params, running) = init_price_params(&cfg, &mut rng);
        TrainedModel {
            config: ModelConfig::Price(cfg),
            params,
            running,
            recipe: None,
            format_version: FORMAT_VERSION,
        }
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let model = sample_model(11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(format!("m.{MODEL_FILE_EXTENSION}"));
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(model, loaded);

        // predictions agree bit for bit on 100 random inputs
        let cfg = model.price_config().unwrap().clone();
        let mut rng = RandomSource::new(33);
        for i in 0..100 {
            let x = rand_input(1, 11, 1000 + i);
            let mut ra = model.running.clone();
            let mut rb = loaded.running.clone();
            let a = price_forward(&cfg, &model.params, &mut ra, &x, Mode::Infer, &mut rng).unwrap();
            let b =
                price_forward(&cfg, &loaded.params, &mut rb, &x, Mode::Infer, &mut rng).unwrap();
            assert_eq!(a.data()[0].to_bits(), b.data()[0].to_bits());
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let model = sample_model(12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nnet.json");
        save_model(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(ModelError::CorruptPayload(_))
        ));
    }

    #[test]
    fn flipped_payload_bit_fails_checksum() {
        let model = sample_model(14);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nnet.json");
        save_model(&model, &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        // change one base64 character inside a payload blob
        let idx = text.find("\"data_b64\":\"").unwrap() + "\"data_b64\":\"".len();
        let original = text.as_bytes()[idx];
        let replacement = if original == b'A' { b'B' } else { b'A' };
        unsafe { text.as_bytes_mut()[idx] = replacement };
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(ModelError::CorruptPayload(_))
        ));
    }

    #[test]
    fn future_version_is_rejected() {
        let model = sample_model(13);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.nnet.json");
        save_model(&model, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let text = text.replace("\"format_version\":1", "\"format_version\":2");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_model(&path), Err(ModelError::BadVersion(2))));
    }

    #[test]
    fn predict_price_requires_recipe_and_matches_invert() {
        let mut model = sample_model(15);
        let key = ObservationKey::new("NGA", "MAIZE", Month::new(2020, 6).unwrap()).unwrap();
        let window = FlatWindow {
            key: key.clone(),
            features: (0..11).map(|i| i as f64 / 11.0).collect(),
            target_price: 0.5,
            target_label: WarningLabel::None,
        };
        assert!(matches!(
            predict_price(&model, &window),
            Err(ModelError::RecipeMissing)
        ));

        // attach a recipe fitted on a small table and check raw == invert(cleaned)
        let table = {
            use std::collections::BTreeMap;
            let mut rows = BTreeMap::new();
            for i in 0..8 {
                let m = Month::new(2020, i + 1).unwrap();
                rows.insert(
                    ObservationKey::new("NGA", "MAIZE", m).unwrap(),
                    vec![100.0 + i as f64 * 3.0, 102.0 + i as f64 * 3.0],
                );
            }
            crate::ingest::FeatureTable {
                feature_names: vec!["local_price".into(), "futures_price".into()],
                rows,
            }
        };
        let recipe = crate::preprocess::fit_recipe(&table).unwrap();
        model.recipe = Some(recipe.clone());
        let pred = predict_price(&model, &window).unwrap();
        let target_key = key.at(key.month.plus(1).unwrap());
        let raw = invert_price(&recipe, &target_key, pred.cleaned).unwrap();
        assert_eq!(pred.raw.to_bits(), raw.to_bits());

        // identical calls return identical results
        let again = predict_price(&model, &window).unwrap();
        assert_eq!(pred, again);
    }

    #[test]
    fn predict_warning_probabilities_and_argmax() {
        let cfg = tiny_warning_cfg();
        let mut rng = RandomSource::new(16);
        let (params, running) = init_warning_params(&cfg, &mut rng);
        let model = TrainedModel {
            config: ModelConfig::Warning(cfg),
            params,
            running,
            recipe: None,
            format_version: FORMAT_VERSION,
        };
        let key = ObservationKey::new("NGA", "MAIZE", Month::new(2020, 6).unwrap()).unwrap();
        let window = FlatWindow {
            key,
            features: (0..11).map(|i| i as f64 / 11.0).collect(),
            target_price: 0.5,
            target_label: WarningLabel::None,
        };
        let (label, probs) = predict_warning(&model, &window, &[0.4]).unwrap();
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(label, argmax_label(&probs));
        // wrong predicted-price count
        assert!(predict_warning(&model, &window, &[0.4, 0.5]).is_err());
        // kind mismatch
        let price = sample_model(17);
        assert!(matches!(
            predict_warning(&price, &window, &[0.4]),
            Err(ModelError::KindMismatch { .. })
        ));
    }

    #[test]
    fn argmax_is_shift_invariant() {
        let logits = [0.2, 1.4, -0.7];
        let shifted: Vec<f64> = logits.iter().map(|v| v + 100.0).collect();
        let p1 = softmax_rows(&Tensor::new(vec![1, 3], logits.to_vec()).unwrap()).unwrap();
        let p2 = softmax_rows(&Tensor::new(vec![1, 3], shifted).unwrap()).unwrap();
        let to_arr = |t: &Tensor| {
            let mut a = [0.0; 3];
            a.copy_from_slice(t.data());
            a
        };
        assert_eq!(argmax_label(&to_arr(&p1)), argmax_label(&to_arr(&p2)));
    }

    #[test]
    fn l2_scope_differs_by_kind() {
        let mut rng = RandomSource::new(18);
        let (price_params, _) = init_price_params(&tiny_price_cfg(), &mut rng);
        let price_names = l2_penalized_names(ModelKind::Price, &price_params);
        assert!(price_names.iter().all(|n| n.ends_with(".weight")));
        assert!(price_names.iter().any(|n| n.starts_with("block0.attn")));
        assert!(price_names.contains(&"embed.weight".to_string()));

        let (warn_params, _) = init_warning_params(&tiny_warning_cfg(), &mut rng);
        let warn_names = l2_penalized_names(ModelKind::Warning, &warn_params);
        assert_eq!(
            warn_names,
            vec!["ffn.fc0.weight".to_string(), "ffn.fc1.weight".to_string()]
        );
    }
}
