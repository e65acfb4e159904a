//! Run configuration: a TOML file with strict keys; every path is resolved
//! relative to the config file's directory, and command-line flags override
//! config values.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::ingest::{DateFormat, Frequency, SourceSchema};
use crate::models::{PriceModelConfig, WarningModelConfig};
use crate::training::{SyntheticSpec, TrainConfig};

use super::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    #[serde(default, rename = "source")]
    pub sources: Vec<SourceDecl>,
    #[serde(default)]
    pub data: DataSection,
    pub synthetic: Option<SyntheticSection>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub chat: ChatSection,
    /// Directory of the config file; filled in after parsing.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceDecl {
    pub name: String,
    pub file: PathBuf,
    #[serde(default = "default_country_column")]
    pub country_column: String,
    #[serde(default = "default_commodity_column")]
    pub commodity_column: String,
    #[serde(default = "default_date_column")]
    pub date_column: String,
    #[serde(default = "default_value_column")]
    pub value_column: String,
    #[serde(default = "default_date_format")]
    pub date_format: DateFormat,
    #[serde(default)]
    pub frequency: Frequency,
}

fn default_country_column() -> String {
    "country".into()
}
fn default_commodity_column() -> String {
    "commodity".into()
}
fn default_date_column() -> String {
    "month".into()
}
fn default_value_column() -> String {
    "value".into()
}
fn default_date_format() -> DateFormat {
    DateFormat::YearMonth
}

impl SourceDecl {
    pub fn schema(&self) -> SourceSchema {
        SourceSchema {
            source_name: self.name.clone(),
            country_column: self.country_column.clone(),
            commodity_column: self.commodity_column.clone(),
            date_column: self.date_column.clone(),
            value_column: self.value_column.clone(),
            date_format: self.date_format,
            frequency: self.frequency,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "default_table")]
    pub table: PathBuf,
    pub warnings: Option<PathBuf>,
}

fn default_table() -> PathBuf {
    PathBuf::from("table.csv")
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            table: default_table(),
            warnings: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub series: Option<usize>,
    pub months: Option<usize>,
    pub slope_min: Option<f64>,
    pub slope_max: Option<f64>,
    pub seasonal_amplitude: Option<f64>,
    pub ar_coeff: Option<f64>,
    pub noise_std: Option<f64>,
    pub futures_lag: Option<usize>,
    pub futures_noise: Option<f64>,
    pub g_moderate: Option<f64>,
    pub g_high: Option<f64>,
    pub base_price: Option<f64>,
}

impl SyntheticSection {
    pub fn spec(&self, seed: u64) -> SyntheticSpec {
        let d = SyntheticSpec::default();
        SyntheticSpec {
            series_count: self.series.unwrap_or(d.series_count),
            months: self.months.unwrap_or(d.months),
            slope_range: (
                self.slope_min.unwrap_or(d.slope_range.0),
                self.slope_max.unwrap_or(d.slope_range.1),
            ),
            seasonal_amplitude: self.seasonal_amplitude.unwrap_or(d.seasonal_amplitude),
            ar_coeff: self.ar_coeff.unwrap_or(d.ar_coeff),
            noise_std: self.noise_std.unwrap_or(d.noise_std),
            futures_lag: self.futures_lag.unwrap_or(d.futures_lag),
            futures_noise: self.futures_noise.unwrap_or(d.futures_noise),
            g_moderate: self.g_moderate.unwrap_or(d.g_moderate),
            g_high: self.g_high.unwrap_or(d.g_high),
            base_price: self.base_price.unwrap_or(d.base_price),
            seed,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub m: Option<usize>,
    pub horizon: Option<usize>,
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub price_blocks: Option<usize>,
    pub warning_blocks: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub ffn_dims: Option<Vec<usize>>,
    pub dropout: Option<f64>,
    pub l2: Option<f64>,
    pub skip_connection: Option<bool>,
}

impl ModelSection {
    pub fn price(&self) -> PriceModelConfig {
        let d = PriceModelConfig::default();
        PriceModelConfig {
            d_model: self.d_model.unwrap_or(d.d_model),
            heads: self.heads.unwrap_or(d.heads),
            blocks: self.price_blocks.unwrap_or(d.blocks),
            ffn_dim: self.ffn_dim.unwrap_or(d.ffn_dim),
            dropout: self.dropout.unwrap_or(d.dropout),
            l2: self.l2.unwrap_or(d.l2),
            m: self.m.unwrap_or(d.m),
            horizon: self.horizon.unwrap_or(d.horizon),
        }
    }

    pub fn warning(&self) -> WarningModelConfig {
        let d = WarningModelConfig::default();
        WarningModelConfig {
            d_model: self.d_model.unwrap_or(d.d_model),
            heads: self.heads.unwrap_or(d.heads),
            blocks: self.warning_blocks.unwrap_or(d.blocks),
            ffn_dims: self.ffn_dims.clone().unwrap_or(d.ffn_dims),
            dropout: self.dropout.unwrap_or(d.dropout),
            l2: self.l2.unwrap_or(d.l2),
            m: self.m.unwrap_or(d.m),
            horizon: self.horizon.unwrap_or(d.horizon),
            skip_connection: self.skip_connection.unwrap_or(d.skip_connection),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub batch_size: Option<usize>,
    pub price_epochs: Option<usize>,
    pub warning_epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub train_frac: Option<f64>,
}

impl TrainingSection {
    pub fn price(&self, seed: u64, l2: f64) -> TrainConfig {
        let d = TrainConfig::price();
        TrainConfig {
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: self.price_epochs.unwrap_or(d.epochs),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            l2,
            seed,
            loss: d.loss,
        }
    }

    pub fn warning(&self, seed: u64, l2: f64) -> TrainConfig {
        let d = TrainConfig::warning();
        TrainConfig {
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            epochs: self.warning_epochs.unwrap_or(d.epochs),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            l2,
            seed,
            loss: d.loss,
        }
    }

    pub fn train_frac(&self) -> f64 {
        self.train_frac.unwrap_or(0.8)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default = "default_price_model")]
    pub price_model: PathBuf,
    /// Price models covering horizons 1..=h for report chaining; defaults to
    /// [price_model].
    pub price_models: Option<Vec<PathBuf>>,
    #[serde(default = "default_warning_model")]
    pub warning_model: PathBuf,
    #[serde(default = "default_sweep_csv")]
    pub sweep_csv: PathBuf,
    #[serde(default = "default_report")]
    pub report: PathBuf,
}

fn default_price_model() -> PathBuf {
    PathBuf::from("price.nnet.json")
}
fn default_warning_model() -> PathBuf {
    PathBuf::from("warning.nnet.json")
}
fn default_sweep_csv() -> PathBuf {
    PathBuf::from("sweep.csv")
}
fn default_report() -> PathBuf {
    PathBuf::from("report.json")
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            price_model: default_price_model(),
            price_models: None,
            warning_model: default_warning_model(),
            sweep_csv: default_sweep_csv(),
            report: default_report(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChatSection {
    #[serde(default = "default_backend")]
    pub backend: String,
    pub url: Option<String>,
    pub qa_store: Option<PathBuf>,
    pub country: Option<String>,
    pub commodity: Option<String>,
    pub severity: Option<String>,
    pub language: Option<String>,
    pub filter_threshold: Option<f64>,
    pub retrieve_threshold: Option<f64>,
}

fn default_backend() -> String {
    "stub".into()
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        cfg.base_dir = path
            .canonicalize()
            .map_err(|e| CliError::Usage(format!("cannot resolve {}: {e}", path.display())))?
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(cfg)
    }

    /// Resolve a configured path against the config file's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Resolve a source file against data_dir (itself config-relative).
    pub fn resolve_source(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            return p.to_path_buf();
        }
        match &self.data_dir {
            Some(dir) => self.resolve(&dir.join(p)),
            None => self.resolve(p),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::File::create(&path)
            .unwrap()
            .write_all(b"seed = 7\n")
            .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.price().d_model, 32);
        assert_eq!(cfg.model.warning().ffn_dims, vec![64, 32, 16]);
        assert_eq!(cfg.training.price(7, 0.003).batch_size, 3);
        assert_eq!(cfg.training.warning(7, 0.003).epochs, 300);
        assert_eq!(cfg.data.table, PathBuf::from("table.csv"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "mystery_knob = true\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(CliError::Usage(_))));

        std::fs::write(&path, "[model]\nwidth = 3\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(CliError::Usage(_))));
    }

    #[test]
    fn paths_resolve_relative_to_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "data_dir = \"data\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        let base = dir.path().canonicalize().unwrap();
        assert_eq!(cfg.resolve(Path::new("x.csv")), base.join("x.csv"));
        assert_eq!(
            cfg.resolve_source(Path::new("a.csv")),
            base.join("data/a.csv")
        );
    }
}
