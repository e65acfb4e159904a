//! Cleaning pipeline (per-series linear detrend, then global min-max) with
//! invertible fitted statistics, plus flattened-window construction.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{
    FeatureTable, IngestError, Month, ObservationKey, WarningLabel, WarningLabelSet,
    FUTURES_COLUMN, PRICE_COLUMN,
};

/// Columns treated as time series and detrended per (country, commodity)
/// before scaling. Remaining columns get min-max only.
pub const DETRENDED_COLUMNS: [&str; 3] = [PRICE_COLUMN, FUTURES_COLUMN, "global_price_index"];

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("series too short: need at least {needed}, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("empty column")]
    EmptyColumn,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("column {0:?} not covered by the recipe")]
    UnknownColumn(String),
    #[error("no fitted trend for series ({country}, {commodity}) in column {column:?}")]
    UnknownSeries {
        column: String,
        country: String,
        commodity: String,
    },
    #[error("no windows: {0}")]
    NoWindows(String),
    #[error("bad shape: {0}")]
    BadShape(String),
    #[error("table has no column named {0:?}")]
    MissingColumn(String),
    #[error("empty table")]
    EmptyTable,
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

/// Fitted statistics for one column, recorded on the values the min-max
/// stage saw (post-detrend for time-varying columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    pub constant: bool,
}

/// Least-squares line over months since `origin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendLine {
    pub slope: f64,
    pub intercept: f64,
    pub origin: Month,
}

impl TrendLine {
    pub fn at(&self, month: Month) -> f64 {
        self.intercept + self.slope * month.months_since(self.origin) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesTrend {
    pub country: String,
    pub commodity: String,
    pub line: TrendLine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnRecipe {
    pub stats: ColumnStats,
    pub detrended: bool,
    /// Per-series trend lines, sorted by (country, commodity); empty unless
    /// `detrended`.
    pub trends: Vec<SeriesTrend>,
}

impl ColumnRecipe {
    fn trend_for(&self, country: &str, commodity: &str) -> Option<&TrendLine> {
        self.trends
            .binary_search_by(|t| {
                (t.country.as_str(), t.commodity.as_str()).cmp(&(country, commodity))
            })
            .ok()
            .map(|i| &self.trends[i].line)
    }
}

/// Which cleaning chain a recipe encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOrder {
    DetrendThenMinMax,
}

/// Everything needed to clean a table deterministically and invert the
/// cleaning later; immutable after fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningRecipe {
    pub step_order: StepOrder,
    pub feature_names: Vec<String>,
    pub columns: BTreeMap<String, ColumnRecipe>,
}

/// The flattened model input at time t: static features at t, then the m
/// most recent prices, then the m most recent futures. Length n-2+2m.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatWindow {
    pub key: ObservationKey,
    pub features: Vec<f64>,
    pub target_price: f64,
    pub target_label: WarningLabel,
}

/// Ordinary least squares of `ys` against the given time coordinates.
fn linear_fit(ts: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = ys.len() as f64;
    let t_mean = ts.iter().sum::<f64>() / n;
    let y_mean = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (t, y) in ts.iter().zip(ys) {
        cov += (t - t_mean) * (y - y_mean);
        var += (t - t_mean) * (t - t_mean);
    }
    let slope = if var == 0.0 { 0.0 } else { cov / var };
    let intercept = y_mean - slope * t_mean;
    (slope, intercept)
}

/// Subtract the least-squares line over t = 0, 1, 2, ...; residuals sum to
/// zero up to rounding.
pub fn detrend_linear(series: &[f64]) -> Result<(Vec<f64>, f64, f64), PreprocessError> {
    if series.len() < 2 {
        return Err(PreprocessError::TooShort {
            needed: 2,
            got: series.len(),
        });
    }
    let ts: Vec<f64> = (0..series.len()).map(|i| i as f64).collect();
    let (slope, intercept) = linear_fit(&ts, series);
    let residuals = series
        .iter()
        .zip(&ts)
        .map(|(y, t)| y - (intercept + slope * t))
        .collect();
    Ok((residuals, slope, intercept))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinMaxStats {
    pub min: f64,
    pub max: f64,
    pub constant: bool,
}

/// Scale into [0, 1] by (x - min) / (max - min); a constant column maps to
/// all zeros and is flagged.
pub fn normalize_minmax(column: &[f64]) -> Result<(Vec<f64>, MinMaxStats), PreprocessError> {
    if column.is_empty() {
        return Err(PreprocessError::EmptyColumn);
    }
    let min = column.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let constant = max == min;
    let scaled = if constant {
        vec![0.0; column.len()]
    } else {
        column.iter().map(|v| (v - min) / (max - min)).collect()
    };
    Ok((scaled, MinMaxStats { min, max, constant }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StandardStats {
    pub mean: f64,
    pub std: f64,
    pub constant: bool,
}

/// Center and scale by the population standard deviation; zero-variance
/// columns map to zeros and are flagged.
pub fn scale_standard(column: &[f64]) -> Result<(Vec<f64>, StandardStats), PreprocessError> {
    if column.len() < 2 {
        return Err(PreprocessError::TooShort {
            needed: 2,
            got: column.len(),
        });
    }
    let n = column.len() as f64;
    let mean = column.iter().sum::<f64>() / n;
    let var = column.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let constant = std == 0.0;
    let scaled = if constant {
        vec![0.0; column.len()]
    } else {
        column.iter().map(|v| (v - mean) / std).collect()
    };
    Ok((
        scaled,
        StandardStats {
            mean,
            std,
            constant,
        },
    ))
}

/// Fit per-column cleaning statistics on a table: per-series detrend for the
/// time-varying columns, then min-max over the whole column.
pub fn fit_recipe(table: &FeatureTable) -> Result<CleaningRecipe, PreprocessError> {
    if table.rows.is_empty() {
        return Err(PreprocessError::EmptyTable);
    }
    let series = table.series_keys();
    let mut columns = BTreeMap::new();
    for (col, name) in table.feature_names.iter().enumerate() {
        let detrended = DETRENDED_COLUMNS.contains(&name.as_str());
        let mut trends = Vec::new();
        let mut pool: Vec<f64> = Vec::with_capacity(table.rows.len());
        for (country, commodity) in &series {
            let points = table.series_column(country, commodity, col);
            if detrended {
                let origin = points[0].0;
                let ts: Vec<f64> = points
                    .iter()
                    .map(|(m, _)| m.months_since(origin) as f64)
                    .collect();
                let ys: Vec<f64> = points.iter().map(|(_, v)| *v).collect();
                let (slope, intercept) = if ys.len() < 2 {
                    (0.0, ys[0])
                } else {
                    linear_fit(&ts, &ys)
                };
                let line = TrendLine {
                    slope,
                    intercept,
                    origin,
                };
                pool.extend(points.iter().map(|(m, v)| v - line.at(*m)));
                trends.push(SeriesTrend {
                    country: country.clone(),
                    commodity: commodity.clone(),
                    line,
                });
            } else {
                pool.extend(points.iter().map(|(_, v)| *v));
            }
        }
        let (_, mm) = normalize_minmax(&pool)?;
        let (mean, std) = {
            let n = pool.len() as f64;
            let mean = pool.iter().sum::<f64>() / n;
            let var = pool.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, var.sqrt())
        };
        columns.insert(
            name.clone(),
            ColumnRecipe {
                stats: ColumnStats {
                    min: mm.min,
                    max: mm.max,
                    mean,
                    std,
                    constant: mm.constant,
                },
                detrended,
                trends,
            },
        );
    }
    Ok(CleaningRecipe {
        step_order: StepOrder::DetrendThenMinMax,
        feature_names: table.feature_names.clone(),
        columns,
    })
}

/// Clean a table with stored statistics; never refits. Values falling
/// outside [0, 1] (unseen extremes) pass through unclipped.
pub fn apply_recipe(
    recipe: &CleaningRecipe,
    table: &FeatureTable,
) -> Result<FeatureTable, PreprocessError> {
    if table.feature_names != recipe.feature_names {
        return Err(PreprocessError::SchemaMismatch(format!(
            "recipe fitted on {:?}, table has {:?}",
            recipe.feature_names, table.feature_names
        )));
    }
    let mut rows = BTreeMap::new();
    for (key, values) in &table.rows {
        let mut cleaned = Vec::with_capacity(values.len());
        for (col, name) in table.feature_names.iter().enumerate() {
            let cr = recipe
                .columns
                .get(name)
                .ok_or_else(|| PreprocessError::UnknownColumn(name.clone()))?;
            cleaned.push(clean_value(cr, name, key, values[col])?);
        }
        rows.insert(key.clone(), cleaned);
    }
    Ok(FeatureTable {
        feature_names: table.feature_names.clone(),
        rows,
    })
}

fn clean_value(
    cr: &ColumnRecipe,
    column: &str,
    key: &ObservationKey,
    raw: f64,
) -> Result<f64, PreprocessError> {
    let detrended = if cr.detrended {
        let line = cr.trend_for(&key.country, &key.commodity).ok_or_else(|| {
            PreprocessError::UnknownSeries {
                column: column.to_string(),
                country: key.country.clone(),
                commodity: key.commodity.clone(),
            }
        })?;
        raw - line.at(key.month)
    } else {
        raw
    };
    if cr.stats.constant {
        Ok(0.0)
    } else {
        Ok((detrended - cr.stats.min) / (cr.stats.max - cr.stats.min))
    }
}

/// Exact algebraic inverse of `clean_value` for any recipe column at the
/// key's month.
pub fn invert_value(
    recipe: &CleaningRecipe,
    column: &str,
    key: &ObservationKey,
    cleaned: f64,
) -> Result<f64, PreprocessError> {
    let cr = recipe
        .columns
        .get(column)
        .ok_or_else(|| PreprocessError::UnknownColumn(column.to_string()))?;
    let detrended = if cr.stats.constant {
        cr.stats.min
    } else {
        cleaned * (cr.stats.max - cr.stats.min) + cr.stats.min
    };
    if cr.detrended {
        let line = cr.trend_for(&key.country, &key.commodity).ok_or_else(|| {
            PreprocessError::UnknownSeries {
                column: column.to_string(),
                country: key.country.clone(),
                commodity: key.commodity.clone(),
            }
        })?;
        Ok(detrended + line.at(key.month))
    } else {
        Ok(detrended)
    }
}

/// Back to raw currency for the local price column.
pub fn invert_price(
    recipe: &CleaningRecipe,
    key: &ObservationKey,
    cleaned_price: f64,
) -> Result<f64, PreprocessError> {
    invert_value(recipe, PRICE_COLUMN, key, cleaned_price)
}

/// Build one window per (country, commodity, t) where the m input months are
/// calendar-contiguous and the target month t+h exists.
pub fn build_windows(
    table: &FeatureTable,
    labels: &WarningLabelSet,
    m: usize,
    h: usize,
) -> Result<Vec<FlatWindow>, PreprocessError> {
    if m < 1 || h < 1 {
        return Err(PreprocessError::BadShape(format!(
            "need m >= 1 and h >= 1, got m={m} h={h}"
        )));
    }
    let price_col = table
        .column_index(PRICE_COLUMN)
        .ok_or_else(|| PreprocessError::MissingColumn(PRICE_COLUMN.into()))?;
    let futures_col = table
        .column_index(FUTURES_COLUMN)
        .ok_or_else(|| PreprocessError::MissingColumn(FUTURES_COLUMN.into()))?;
    let static_cols: Vec<usize> = (0..table.width())
        .filter(|&c| c != price_col && c != futures_col)
        .collect();

    let mut windows = Vec::new();
    for (country, commodity) in table.series_keys() {
        let by_month: BTreeMap<Month, &Vec<f64>> = table
            .rows
            .iter()
            .filter(|(k, _)| k.country == country && k.commodity == commodity)
            .map(|(k, v)| (k.month, v))
            .collect();
        for (&t, row) in &by_month {
            let history: Option<Vec<&Vec<f64>>> = (0..m)
                .rev()
                .map(|back| {
                    t.plus(-(back as i64))
                        .ok()
                        .and_then(|mo| by_month.get(&mo).copied())
                })
                .collect();
            let Some(history) = history else { continue };
            let Ok(target_month) = t.plus(h as i64) else {
                continue;
            };
            let Some(_) = by_month.get(&target_month) else {
                continue;
            };

            let mut features = Vec::with_capacity(static_cols.len() + 2 * m);
            for &c in &static_cols {
                features.push(row[c]);
            }
            features.extend(history.iter().map(|r| r[price_col]));
            features.extend(history.iter().map(|r| r[futures_col]));

            let key = ObservationKey::new(&country, &commodity, t)
                .expect("table keys are already validated");
            let target_key = key.at(target_month);
            windows.push(FlatWindow {
                target_price: by_month[&target_month][price_col],
                target_label: labels.get(&target_key),
                key,
                features,
            });
        }
    }
    if windows.is_empty() {
        return Err(PreprocessError::NoWindows(format!(
            "no (series, t) with {m} contiguous months and a target {h} months ahead"
        )));
    }
    Ok(windows)
}

/// One forecast-only window per series, anchored at the latest t with m
/// contiguous months. Target fields are placeholders (no realized target
/// exists beyond the table's end).
pub fn latest_windows(table: &FeatureTable, m: usize) -> Result<Vec<FlatWindow>, PreprocessError> {
    if m < 1 {
        return Err(PreprocessError::BadShape(format!("need m >= 1, got {m}")));
    }
    let price_col = table
        .column_index(PRICE_COLUMN)
        .ok_or_else(|| PreprocessError::MissingColumn(PRICE_COLUMN.into()))?;
    let futures_col = table
        .column_index(FUTURES_COLUMN)
        .ok_or_else(|| PreprocessError::MissingColumn(FUTURES_COLUMN.into()))?;
    let static_cols: Vec<usize> = (0..table.width())
        .filter(|&c| c != price_col && c != futures_col)
        .collect();

    let mut windows = Vec::new();
    for (country, commodity) in table.series_keys() {
        let by_month: BTreeMap<Month, &Vec<f64>> = table
            .rows
            .iter()
            .filter(|(k, _)| k.country == country && k.commodity == commodity)
            .map(|(k, v)| (k.month, v))
            .collect();
        let anchor = by_month.keys().rev().find(|&&t| {
            (0..m).all(|back| {
                t.plus(-(back as i64))
                    .map(|mo| by_month.contains_key(&mo))
                    .unwrap_or(false)
            })
        });
        let Some(&t) = anchor else { continue };
        let row = by_month[&t];
        let history: Vec<&Vec<f64>> = (0..m)
            .rev()
            .map(|back| by_month[&t.plus(-(back as i64)).expect("anchor checked")])
            .collect();
        let mut features = Vec::with_capacity(static_cols.len() + 2 * m);
        for &c in &static_cols {
            features.push(row[c]);
        }
        features.extend(history.iter().map(|r| r[price_col]));
        features.extend(history.iter().map(|r| r[futures_col]));
        windows.push(FlatWindow {
            key: ObservationKey::new(&country, &commodity, t).expect("validated keys"),
            features,
            target_price: 0.0,
            target_label: WarningLabel::None,
        });
    }
    Ok(windows)
}

/// Chronological per-series split; the first `train_frac` of each series'
/// windows (by time) train, the rest validate. Never shuffles across time.
pub fn chrono_split(windows: &[FlatWindow], train_frac: f64) -> (Vec<FlatWindow>, Vec<FlatWindow>) {
    let mut by_series: BTreeMap<(String, String), Vec<&FlatWindow>> = BTreeMap::new();
    for w in windows {
        by_series
            .entry((w.key.country.clone(), w.key.commodity.clone()))
            .or_default()
            .push(w);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (_, mut ws) in by_series {
        ws.sort_by_key(|w| w.key.month);
        let cut = ((ws.len() as f64) * train_frac).floor() as usize;
        for (i, w) in ws.into_iter().enumerate() {
            if i < cut {
                train.push(w.clone());
            } else {
                val.push(w.clone());
            }
        }
    }
    (train, val)
}

/// Exact input-size reduction of the flattened layout relative to the full
/// [m, n] block: m*n / (n - 2 + 2m), reduced to lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReductionFactor {
    pub numerator: u64,
    pub denominator: u64,
}

impl ReductionFactor {
    pub fn value(&self) -> f64 {
        self.numerator as f64 / self.denominator as f64
    }
}

pub fn reduction_factor(n: usize, m: usize) -> Result<ReductionFactor, PreprocessError> {
    if n < 3 {
        return Err(PreprocessError::BadShape(format!("need n >= 3, got {n}")));
    }
    if m < 1 {
        return Err(PreprocessError::BadShape(format!("need m >= 1, got {m}")));
    }
    let num = (m * n) as u64;
    let den = (n - 2 + 2 * m) as u64;
    let g = gcd(num, den);
    Ok(ReductionFactor {
        numerator: num / g,
        denominator: den / g,
    })
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Flat-vector length for a table of n features: n - 2 + 2m.
pub fn window_length(n: usize, m: usize) -> usize {
    n - 2 + 2 * m
}

/// One window per row: w0..w{L-1},target,label.
pub fn write_windows_csv(windows: &[FlatWindow], path: &Path) -> Result<(), PreprocessError> {
    let mut w = csv::Writer::from_path(path).map_err(IngestError::from)?;
    let len = windows.first().map_or(0, |win| win.features.len());
    let mut header: Vec<String> = (0..len).map(|i| format!("w{i}")).collect();
    header.push("target".into());
    header.push("label".into());
    w.write_record(&header).map_err(IngestError::from)?;
    for win in windows {
        let mut record: Vec<String> = win.features.iter().map(|v| v.to_string()).collect();
        record.push(win.target_price.to_string());
        record.push(win.target_label.as_str().to_string());
        w.write_record(&record).map_err(IngestError::from)?;
    }
    w.flush().map_err(IngestError::from)?;
    Ok(())
}
