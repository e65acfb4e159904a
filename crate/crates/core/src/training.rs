//! Training loops with the default hyperparameters, MAE and macro-F1
//! metrics, the horizon sweep, a persistence baseline, and a parametric
//! synthetic generator with a growth-rate warning oracle for testing.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{FeatureTable, Month, ObservationKey, WarningLabel, WarningLabelSet};
use crate::models::{
    build_price_forward, build_warning_forward, init_price_params, init_warning_params,
    l2_penalized_names, ModelConfig, ModelError, ModelKind, PriceModelConfig, TrainedModel,
    WarningModelConfig, FORMAT_VERSION,
};
use crate::numerics::{Graph, Mode, NumericsError, ParameterSet, RandomSource, Tensor};
use crate::preprocess::{build_windows, CleaningRecipe, FlatWindow, PreprocessError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("metric input is empty")]
    EmptyMetricInput,
    #[error("bad synthetic spec: {0}")]
    BadSpec(String),
    #[error("series too short: need at least {needed} months, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// Optimization settings; the defaults follow the tuned configuration
/// (batch size 3, L2 0.003).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
    pub loss: LossKind,
}

impl TrainConfig {
    pub fn price() -> Self {
        Self {
            batch_size: 3,
            epochs: 500,
            learning_rate: 1e-3,
            l2: 0.003,
            seed: 0,
            loss: LossKind::Mse,
        }
    }

    pub fn warning() -> Self {
        Self {
            epochs: 300,
            loss: LossKind::CrossEntropy,
            ..Self::price()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig(
                "batch size must be at least 2 while batch norm is active".into(),
            ));
        }
        if self.l2 < 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "l2 must be >= 0, got {}",
                self.l2
            )));
        }
        Ok(())
    }
}

/// Per-epoch loss and validation-metric traces.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub train_loss: Vec<f64>,
    pub val_metric: Vec<f64>,
    pub class_counts: Option<[usize; 3]>,
    pub single_class: bool,
}

/// Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.learning_rate);
        let (first, second) = (&mut self.first_moment, &mut self.second_moment);
        params.update(|name, value, grad| {
            let m = first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(value.shape()));
            let v = second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(value.shape()));
            for i in 0..value.numel() {
                let g = grad.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * g;
                let vi = b2 * v.data()[i] + (1.0 - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}

/// Mean absolute error.
pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64, TrainError> {
    if pred.len() != target.len() {
        return Err(TrainError::LengthMismatch {
            left: pred.len(),
            right: target.len(),
        });
    }
    if pred.is_empty() {
        return Err(TrainError::EmptyMetricInput);
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// Unweighted mean of per-class F1 over the three warning classes. A class
/// absent from both predictions and truth is excluded from the mean; a class
/// with zero precision and recall contributes 0.
pub fn f1_macro(pred: &[WarningLabel], truth: &[WarningLabel]) -> Result<f64, TrainError> {
    if pred.len() != truth.len() {
        return Err(TrainError::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(TrainError::EmptyMetricInput);
    }
    let mut sum = 0.0;
    let mut classes = 0usize;
    for class in WarningLabel::ALL {
        let tp = pred
            .iter()
            .zip(truth)
            .filter(|(p, t)| **p == class && **t == class)
            .count() as f64;
        let fp = pred
            .iter()
            .zip(truth)
            .filter(|(p, t)| **p == class && **t != class)
            .count() as f64;
        let fn_ = pred
            .iter()
            .zip(truth)
            .filter(|(p, t)| **p != class && **t == class)
            .count() as f64;
        if tp + fp + fn_ == 0.0 {
            continue;
        }
        classes += 1;
        let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let recall = if tp + fn_ == 0.0 {
            0.0
        } else {
            tp / (tp + fn_)
        };
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    Ok(if classes == 0 {
        0.0
    } else {
        sum / classes as f64
    })
}

fn feature_matrix(rows: &[Vec<f64>]) -> Result<Tensor, TrainError> {
    let width = rows.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in rows {
        if r.len() != width {
            return Err(TrainError::LengthMismatch {
                left: r.len(),
                right: width,
            });
        }
        data.extend_from_slice(r);
    }
    Ok(Tensor::new(vec![rows.len(), width], data)?)
}

fn add_l2_penalty(
    g: &mut Graph,
    params: &ParameterSet,
    penalized: &[String],
    l2: f64,
    loss: crate::numerics::NodeId,
) -> Result<crate::numerics::NodeId, TrainError> {
    if l2 == 0.0 {
        return Ok(loss);
    }
    let mut total = loss;
    for name in penalized {
        let p = g.param(name, params.get(name)?.clone());
        let ss = g.sum_squares(p);
        let pen = g.scale(ss, l2);
        total = g.add(total, pen)?;
    }
    Ok(total)
}

/// Cap on the rows used to re-estimate batch-norm statistics after training.
const BN_CALIBRATION_ROWS: usize = 512;

/// Replace the momentum-tracked batch-norm statistics with the exact
/// statistics of (a deterministic prefix of) the training set under the
/// final weights, in one train-mode pass with dropout disabled.
fn recalibrate_price_stats(
    model_cfg: &PriceModelConfig,
    params: &ParameterSet,
    running: &mut crate::models::RunningStats,
    rows: &[Vec<f64>],
) -> Result<(), TrainError> {
    let take = rows.len().min(BN_CALIBRATION_ROWS);
    let x = feature_matrix(&rows[..take])?;
    let calm = PriceModelConfig {
        dropout: 0.0,
        ..model_cfg.clone()
    };
    running.set_momentum(0.0);
    let mut g = Graph::new();
    let mut rng = RandomSource::new(0);
    let result = build_price_forward(&mut g, &calm, params, running, &x, Mode::Train, &mut rng);
    running.set_momentum(crate::models::BN_MOMENTUM);
    result?;
    Ok(())
}

fn recalibrate_warning_stats(
    model_cfg: &WarningModelConfig,
    params: &ParameterSet,
    running: &mut crate::models::RunningStats,
    rows: &[Vec<f64>],
) -> Result<(), TrainError> {
    let take = rows.len().min(BN_CALIBRATION_ROWS);
    let x = feature_matrix(&rows[..take])?;
    let calm = WarningModelConfig {
        dropout: 0.0,
        ..model_cfg.clone()
    };
    running.set_momentum(0.0);
    let mut g = Graph::new();
    let mut rng = RandomSource::new(0);
    let result = build_warning_forward(&mut g, &calm, params, running, &x, Mode::Train, &mut rng);
    running.set_momentum(crate::models::BN_MOMENTUM);
    result?;
    Ok(())
}

/// Deterministic mini-batch order for one epoch.
fn epoch_batches(count: usize, batch_size: usize, rng: &mut RandomSource) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..count).collect();
    rng.shuffle(&mut order);
    order
        .chunks(batch_size)
        .filter(|chunk| chunk.len() >= 2) // batch norm needs at least 2 rows
        .map(|chunk| chunk.to_vec())
        .collect()
}

/// Train the price transformer on cleaned windows; minimizes
/// MSE + l2 * sum of squared weights with Adam. Validation MAE is recorded
/// per epoch when a validation split is given.
pub fn train_price(
    train: &[FlatWindow],
    val: &[FlatWindow],
    cfg: &TrainConfig,
    model_cfg: &PriceModelConfig,
    recipe: Option<CleaningRecipe>,
) -> Result<(TrainedModel, LossCurve), TrainError> {
    cfg.validate()?;
    if cfg.loss != LossKind::Mse {
        return Err(TrainError::InvalidConfig(
            "price training uses the mse loss".into(),
        ));
    }
    if train.len() < cfg.batch_size.max(2) {
        return Err(TrainError::TooFewSamples {
            needed: cfg.batch_size.max(2),
            got: train.len(),
        });
    }
    let mut root = RandomSource::new(cfg.seed);
    let mut init_rng = root.fork();
    let mut shuffle_rng = root.fork();
    let mut dropout_rng = root.fork();

    let (mut params, mut running) = init_price_params(model_cfg, &mut init_rng);
    let penalized = l2_penalized_names(ModelKind::Price, &params);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut curve = LossCurve::default();

    for _epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in epoch_batches(train.len(), cfg.batch_size, &mut shuffle_rng) {
            let rows: Vec<Vec<f64>> = batch.iter().map(|&i| train[i].features.clone()).collect();
            let x = feature_matrix(&rows)?;
            let targets: Vec<f64> = batch.iter().map(|&i| train[i].target_price).collect();
            let t = Tensor::new(vec![batch.len(), 1], targets)?;

            let mut g = Graph::new();
            let out = build_price_forward(
                &mut g,
                model_cfg,
                &params,
                &mut running,
                &x,
                Mode::Train,
                &mut dropout_rng,
            )?;
            let tn = g.constant(t);
            let data_loss = g.mse(out, tn)?;
            let loss = add_l2_penalty(&mut g, &params, &penalized, cfg.l2, data_loss)?;
            g.backward(loss)?;
            params.zero_grads();
            params.accumulate_grads(&g.param_grads());
            adam.step(&mut params);
            epoch_loss += g.value(loss).data()[0];
            batches += 1;
        }
        curve.train_loss.push(if batches == 0 {
            f64::NAN
        } else {
            epoch_loss / batches as f64
        });
        if !val.is_empty() {
            curve
                .val_metric
                .push(evaluate_price_mae_with(model_cfg, &params, &running, val)?);
        }
    }

    if cfg.epochs > 0 {
        let rows: Vec<Vec<f64>> = train.iter().map(|w| w.features.clone()).collect();
        recalibrate_price_stats(model_cfg, &params, &mut running, &rows)?;
    }

    let model = TrainedModel {
        config: ModelConfig::Price(model_cfg.clone()),
        params,
        running,
        recipe,
        format_version: FORMAT_VERSION,
    };
    Ok((model, curve))
}

fn evaluate_price_mae_with(
    cfg: &PriceModelConfig,
    params: &ParameterSet,
    running: &crate::models::RunningStats,
    windows: &[FlatWindow],
) -> Result<f64, TrainError> {
    let mut preds = Vec::with_capacity(windows.len());
    let mut rng = RandomSource::new(0);
    for chunk in windows.chunks(64) {
        let rows: Vec<Vec<f64>> = chunk.iter().map(|w| w.features.clone()).collect();
        let x = feature_matrix(&rows)?;
        let mut g = Graph::new();
        let mut running = running.clone();
        let out =
            build_price_forward(&mut g, cfg, params, &mut running, &x, Mode::Infer, &mut rng)?;
        preds.extend_from_slice(g.value(out).data());
    }
    let targets: Vec<f64> = windows.iter().map(|w| w.target_price).collect();
    mae(&preds, &targets)
}

/// Validation MAE of a trained price model on a window set.
pub fn evaluate_price_mae(model: &TrainedModel, windows: &[FlatWindow]) -> Result<f64, TrainError> {
    evaluate_price_mae_with(
        model.price_config()?,
        &model.params,
        &model.running,
        windows,
    )
}

/// Train the warning transformer with cross-entropy; each window is paired
/// with the h predicted prices feeding it. Logs class counts to surface
/// imbalance; training proceeds (with a warning) even when labels collapse
/// to a single class.
pub fn train_warning(
    train: &[FlatWindow],
    train_predicted: &[Vec<f64>],
    val: &[FlatWindow],
    val_predicted: &[Vec<f64>],
    cfg: &TrainConfig,
    model_cfg: &WarningModelConfig,
    recipe: Option<CleaningRecipe>,
) -> Result<(TrainedModel, LossCurve), TrainError> {
    cfg.validate()?;
    if cfg.loss != LossKind::CrossEntropy {
        return Err(TrainError::InvalidConfig(
            "warning training uses the cross_entropy loss".into(),
        ));
    }
    if train.len() != train_predicted.len() {
        return Err(TrainError::LengthMismatch {
            left: train.len(),
            right: train_predicted.len(),
        });
    }
    if val.len() != val_predicted.len() {
        return Err(TrainError::LengthMismatch {
            left: val.len(),
            right: val_predicted.len(),
        });
    }
    if train.len() < cfg.batch_size.max(2) {
        return Err(TrainError::TooFewSamples {
            needed: cfg.batch_size.max(2),
            got: train.len(),
        });
    }

    let mut counts = [0usize; 3];
    for w in train {
        counts[w.target_label.class_index()] += 1;
    }
    let single_class = counts.iter().filter(|&&c| c > 0).count() <= 1;
    if single_class {
        log::warn!(
            "warning labels collapse to a single class (counts {counts:?}); training anyway"
        );
    }
    log::info!(
        "warning class counts: none={} moderate={} high={}",
        counts[0],
        counts[1],
        counts[2]
    );

    let features: Vec<Vec<f64>> = train
        .iter()
        .zip(train_predicted)
        .map(|(w, p)| {
            let mut f = w.features.clone();
            f.extend_from_slice(p);
            f
        })
        .collect();
    let labels: Vec<usize> = train.iter().map(|w| w.target_label.class_index()).collect();

    let mut root = RandomSource::new(cfg.seed);
    let mut init_rng = root.fork();
    let mut shuffle_rng = root.fork();
    let mut dropout_rng = root.fork();

    let (mut params, mut running) = init_warning_params(model_cfg, &mut init_rng);
    let penalized = l2_penalized_names(ModelKind::Warning, &params);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut curve = LossCurve {
        class_counts: Some(counts),
        single_class,
        ..Default::default()
    };

    for _epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in epoch_batches(train.len(), cfg.batch_size, &mut shuffle_rng) {
            let rows: Vec<Vec<f64>> = batch.iter().map(|&i| features[i].clone()).collect();
            let x = feature_matrix(&rows)?;
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();

            let mut g = Graph::new();
            let out = build_warning_forward(
                &mut g,
                model_cfg,
                &params,
                &mut running,
                &x,
                Mode::Train,
                &mut dropout_rng,
            )?;
            let data_loss = g.softmax_cross_entropy(out, &targets)?;
            let loss = add_l2_penalty(&mut g, &params, &penalized, cfg.l2, data_loss)?;
            g.backward(loss)?;
            params.zero_grads();
            params.accumulate_grads(&g.param_grads());
            adam.step(&mut params);
            epoch_loss += g.value(loss).data()[0];
            batches += 1;
        }
        curve.train_loss.push(if batches == 0 {
            f64::NAN
        } else {
            epoch_loss / batches as f64
        });
        if !val.is_empty() {
            let preds = classify_with(model_cfg, &params, &running, val, val_predicted)?;
            let truth: Vec<WarningLabel> = val.iter().map(|w| w.target_label).collect();
            curve.val_metric.push(f1_macro(&preds, &truth)?);
        }
    }

    if cfg.epochs > 0 {
        recalibrate_warning_stats(model_cfg, &params, &mut running, &features)?;
    }

    let model = TrainedModel {
        config: ModelConfig::Warning(model_cfg.clone()),
        params,
        running,
        recipe,
        format_version: FORMAT_VERSION,
    };
    Ok((model, curve))
}

fn classify_with(
    cfg: &WarningModelConfig,
    params: &ParameterSet,
    running: &crate::models::RunningStats,
    windows: &[FlatWindow],
    predicted: &[Vec<f64>],
) -> Result<Vec<WarningLabel>, TrainError> {
    let mut out = Vec::with_capacity(windows.len());
    let mut rng = RandomSource::new(0);
    for (chunk_w, chunk_p) in windows.chunks(64).zip(predicted.chunks(64)) {
        let rows: Vec<Vec<f64>> = chunk_w
            .iter()
            .zip(chunk_p)
            .map(|(w, p)| {
                let mut f = w.features.clone();
                f.extend_from_slice(p);
                f
            })
            .collect();
        let x = feature_matrix(&rows)?;
        let mut g = Graph::new();
        let mut running = running.clone();
        let logits =
            build_warning_forward(&mut g, cfg, params, &mut running, &x, Mode::Infer, &mut rng)?;
        for row in g.value(logits).data().chunks(3) {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            out.push(WarningLabel::from_class_index(best).expect("three classes"));
        }
    }
    Ok(out)
}

/// Classify a window set with a trained warning model.
pub fn evaluate_warning_f1(
    model: &TrainedModel,
    windows: &[FlatWindow],
    predicted: &[Vec<f64>],
) -> Result<f64, TrainError> {
    let preds = classify_with(
        model.warning_config()?,
        &model.params,
        &model.running,
        windows,
        predicted,
    )?;
    let truth: Vec<WarningLabel> = windows.iter().map(|w| w.target_label).collect();
    f1_macro(&preds, &truth)
}

/// Naive forecast: the target equals the last observed cleaned price in the
/// window (layout position n-2+m-1).
pub fn persistence_baseline(windows: &[FlatWindow], m: usize) -> Result<f64, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::EmptyMetricInput);
    }
    let len = windows[0].features.len();
    if m == 0 || len < 2 * m + 1 {
        return Err(TrainError::InvalidConfig(format!(
            "window length {len} cannot hold m={m} price and futures histories"
        )));
    }
    let last_price_idx = len - m - 1;
    let preds: Vec<f64> = windows.iter().map(|w| w.features[last_price_idx]).collect();
    let targets: Vec<f64> = windows.iter().map(|w| w.target_price).collect();
    mae(&preds, &targets)
}

/// One sweep measurement; `val_mae` is None when that training run failed
/// (too few samples at the horizon).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub horizon: usize,
    pub repeat: usize,
    pub seed: u64,
    pub val_mae: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Mean and standard deviation of successful repeats at one horizon.
    pub fn horizon_summary(&self, horizon: usize) -> Option<(f64, f64)> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.horizon == horizon)
            .filter_map(|r| r.val_mae)
            .collect();
        if vals.is_empty() {
            return None;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        Some((mean, var.sqrt()))
    }

    /// Fixed schema horizon,repeat,seed,val_mae; failed runs write NaN.
    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["horizon", "repeat", "seed", "val_mae"])?;
        for row in &self.rows {
            w.write_record([
                row.horizon.to_string(),
                row.repeat.to_string(),
                row.seed.to_string(),
                row.val_mae
                    .map_or_else(|| "NaN".to_string(), |v| v.to_string()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Train one price model per (horizon, repeat) over a cleaned table and
/// report validation MAE per run. Failures at one horizon are recorded and
/// the sweep continues.
pub fn horizon_sweep(
    table: &FeatureTable,
    m: usize,
    horizons: &[usize],
    repeats: usize,
    cfg: &TrainConfig,
    model_cfg: &PriceModelConfig,
    train_frac: f64,
) -> Result<SweepTable, TrainError> {
    let mut out = SweepTable::default();
    let no_labels = WarningLabelSet::default();
    for &h in horizons {
        for repeat in 0..repeats {
            let seed = cfg.seed.wrapping_add(repeat as u64);
            let run_cfg = TrainConfig {
                seed,
                ..cfg.clone()
            };
            let run_model_cfg = PriceModelConfig {
                horizon: h,
                m,
                ..model_cfg.clone()
            };
            let val_mae = build_windows(table, &no_labels, m, h)
                .map_err(TrainError::from)
                .and_then(|windows| {
                    let (train, val) = crate::preprocess::chrono_split(&windows, train_frac);
                    if val.is_empty() {
                        return Err(TrainError::TooFewSamples { needed: 1, got: 0 });
                    }
                    let (model, _) = train_price(&train, &val, &run_cfg, &run_model_cfg, None)?;
                    evaluate_price_mae(&model, &val)
                });
            match val_mae {
                Ok(v) => out.rows.push(SweepRow {
                    horizon: h,
                    repeat,
                    seed,
                    val_mae: Some(v),
                }),
                Err(e) => {
                    log::warn!("sweep horizon {h} repeat {repeat} failed: {e}");
                    out.rows.push(SweepRow {
                        horizon: h,
                        repeat,
                        seed,
                        val_mae: None,
                    });
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// synthetic data
// ---------------------------------------------------------------------------

/// Parameters of the synthetic monthly market generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub series_count: usize,
    pub months: usize,
    pub slope_range: (f64, f64),
    pub seasonal_amplitude: f64,
    pub ar_coeff: f64,
    pub noise_std: f64,
    pub futures_lag: usize,
    pub futures_noise: f64,
    pub g_moderate: f64,
    pub g_high: f64,
    pub base_price: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            series_count: 5,
            months: 120,
            slope_range: (0.2, 1.2),
            seasonal_amplitude: 8.0,
            ar_coeff: 0.5,
            noise_std: 1.0,
            futures_lag: 1,
            futures_noise: 0.5,
            g_moderate: 0.07,
            g_high: 0.15,
            base_price: 100.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.series_count == 0 || self.months < 6 {
            return Err(TrainError::BadSpec(
                "need at least 1 series and 6 months".into(),
            ));
        }
        if self.ar_coeff.abs() >= 1.0 {
            return Err(TrainError::BadSpec(format!(
                "AR coefficient magnitude must be < 1, got {}",
                self.ar_coeff
            )));
        }
        if !(self.g_high > self.g_moderate && self.g_moderate > 0.0) {
            return Err(TrainError::BadSpec(format!(
                "need g_high > g_moderate > 0, got ({}, {})",
                self.g_moderate, self.g_high
            )));
        }
        if self.noise_std < 0.0 || self.futures_noise < 0.0 {
            return Err(TrainError::BadSpec(
                "noise levels must be non-negative".into(),
            ));
        }
        if self.base_price <= 0.0 || self.seasonal_amplitude < 0.0 {
            return Err(TrainError::BadSpec("base price must be positive".into()));
        }
        if self.futures_lag >= self.months {
            return Err(TrainError::BadSpec(
                "futures lag exceeds the series length".into(),
            ));
        }
        if self.slope_range.1 < self.slope_range.0 {
            return Err(TrainError::BadSpec("slope range is inverted".into()));
        }
        Ok(())
    }
}

/// Compound three-month growth rate, thresholded into the three classes:
/// g = (p_t / p_{t-3})^(1/3) - 1.
pub fn synthetic_warning_oracle(
    prices: &[f64],
    t: usize,
    g_moderate: f64,
    g_high: f64,
) -> Result<WarningLabel, TrainError> {
    if t < 3 || t >= prices.len() {
        return Err(TrainError::TooShort {
            needed: 4,
            got: t.min(prices.len()) + 1,
        });
    }
    let growth = (prices[t] / prices[t - 3]).powf(1.0 / 3.0) - 1.0;
    Ok(if growth > g_high {
        WarningLabel::High
    } else if growth > g_moderate {
        WarningLabel::Moderate
    } else {
        WarningLabel::None
    })
}

/// Generate a feature table and its oracle warning labels. Per series the
/// local price is trend + seasonal + AR(1) noise; futures lead the price by
/// `futures_lag` months plus noise; the remaining columns are smoothed
/// transforms of the price with independent noise.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
) -> Result<(FeatureTable, WarningLabelSet), TrainError> {
    spec.validate()?;
    let mut rng = RandomSource::new(spec.seed);
    let start = Month::new(2015, 1).expect("fixed start month");
    let n_months = spec.months;

    // price paths first, series by series, in a fixed draw order
    let mut prices: Vec<Vec<f64>> = Vec::with_capacity(spec.series_count);
    for _series in 0..spec.series_count {
        let slope = rng.uniform_range(spec.slope_range.0, spec.slope_range.1);
        let phase = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
        let mut path = Vec::with_capacity(n_months);
        let mut ar = 0.0;
        for t in 0..n_months {
            ar = spec.ar_coeff * ar + spec.noise_std * rng.normal();
            let seasonal = spec.seasonal_amplitude
                * ((2.0 * std::f64::consts::PI * t as f64 / 12.0) + phase).sin();
            let p = spec.base_price + slope * t as f64 + seasonal + ar;
            path.push(p.max(0.01 * spec.base_price));
        }
        prices.push(path);
    }

    let global: Vec<f64> = (0..n_months)
        .map(|t| prices.iter().map(|p| p[t]).sum::<f64>() / spec.series_count as f64)
        .collect();

    let feature_names: Vec<String> = crate::ingest::DEFAULT_FEATURES
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = BTreeMap::new();
    let mut labels = WarningLabelSet::default();

    for (series, path) in prices.iter().enumerate() {
        let country = format!("C{series:02}");
        let commodity = "GRAIN";
        let harvest_by_year: Vec<f64> = (0..n_months / 12 + 1)
            .map(|_| 50.0 + 5.0 * rng.normal())
            .collect();
        let outlook_by_year: Vec<f64> = (0..n_months / 12 + 1)
            .map(|y| 20.0 + 0.5 * y as f64 + rng.normal())
            .collect();
        let mut ifs = 10.0;
        for t in 0..n_months {
            let month = start.plus(t as i64).map_err(TrainError::BadSpec)?;
            let key =
                ObservationKey::new(&country, commodity, month).map_err(TrainError::BadSpec)?;
            let ma3 = {
                let lo = t.saturating_sub(2);
                let w = &path[lo..=t];
                w.iter().sum::<f64>() / w.len() as f64
            };
            let proteus = 2.0 - 0.8 * ma3 / spec.base_price + 0.02 * rng.normal();
            let futures_anchor = (t + spec.futures_lag).min(n_months - 1);
            let futures = path[futures_anchor] + spec.futures_noise * rng.normal();
            ifs += 0.3 * rng.normal();
            let year = t / 12;
            let row = vec![
                proteus,
                path[t],
                global[t],
                harvest_by_year[year],
                outlook_by_year[year],
                futures,
                ifs,
            ];
            rows.insert(key.clone(), row);
            if t >= 3 {
                let label = synthetic_warning_oracle(path, t, spec.g_moderate, spec.g_high)?;
                labels.insert(key, label);
            }
        }
    }
    Ok((
        FeatureTable {
            feature_names,
            rows,
        },
        labels,
    ))
}
