//! The warning report: for each series' latest window the price forecasts
//! feed the warning classifier, and one entry is emitted per
//! (country, commodity) pair.

use serde::{Deserialize, Serialize};

use crate::ingest::FeatureTable;
use crate::models::{predict_price_cleaned, predict_warning, TrainedModel};
use crate::preprocess::{invert_price, latest_windows};

use super::CliError;

/// Environment variable pinning the report timestamp, for reproducible runs.
pub const REPORT_TIME_ENV: &str = "FOODCAST_NOW";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub country: String,
    pub commodity: String,
    pub horizon: usize,
    pub predicted_raw_price: f64,
    pub predicted_label: String,
    pub probabilities: [f64; 3],
    pub model_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarningReport {
    pub generated_at: String,
    pub entries: Vec<ReportEntry>,
}

pub fn report_timestamp() -> String {
    std::env::var(REPORT_TIME_ENV).unwrap_or_else(|_| chrono::Utc::now().to_rfc3339())
}

/// Chain price forecasts into the warning model over each series' latest
/// window. `price_models` must cover horizons 1..=h of the warning model,
/// one model per horizon, all cleaned with the same recipe.
pub fn emit_report(
    price_models: &[TrainedModel],
    warning_model: &TrainedModel,
    table: &FeatureTable,
    generated_at: String,
) -> Result<WarningReport, CliError> {
    let warning_cfg = warning_model.warning_config()?;
    let h = warning_cfg.horizon;
    if price_models.len() != h {
        return Err(CliError::Model(format!(
            "warning horizon {h} needs {h} price model(s) for horizons 1..={h}, got {}",
            price_models.len()
        )));
    }
    let recipe = warning_model
        .recipe
        .as_ref()
        .ok_or(CliError::RecipeMismatch(
            "warning model carries no cleaning recipe".into(),
        ))?;
    for (i, pm) in price_models.iter().enumerate() {
        let cfg = pm.price_config()?;
        if cfg.horizon != i + 1 {
            return Err(CliError::Model(format!(
                "price model {} has horizon {}, expected {}",
                i,
                cfg.horizon,
                i + 1
            )));
        }
        if cfg.m != warning_cfg.m {
            return Err(CliError::Model(format!(
                "price model m={} does not match warning model m={}",
                cfg.m, warning_cfg.m
            )));
        }
        if pm.recipe.as_ref() != Some(recipe) {
            return Err(CliError::RecipeMismatch(format!(
                "price model {i} was cleaned with a different recipe"
            )));
        }
    }

    let cleaned = crate::preprocess::apply_recipe(recipe, table)?;
    let windows = latest_windows(&cleaned, warning_cfg.m)?;
    let mut entries = Vec::with_capacity(windows.len());
    for window in &windows {
        let mut predicted = Vec::with_capacity(h);
        for pm in price_models {
            predicted.push(predict_price_cleaned(pm, window)?);
        }
        let (label, probabilities) = predict_warning(warning_model, window, &predicted)?;
        let target_month = window
            .key
            .month
            .plus(h as i64)
            .map_err(|e| CliError::Data(format!("target month out of range: {e}")))?;
        let raw = invert_price(recipe, &window.key.at(target_month), predicted[h - 1])?;
        entries.push(ReportEntry {
            country: window.key.country.clone(),
            commodity: window.key.commodity.clone(),
            horizon: h,
            predicted_raw_price: raw,
            predicted_label: label.as_str().to_string(),
            probabilities,
            model_version: warning_model.format_version,
        });
    }
    Ok(WarningReport {
        generated_at,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{
        init_price_params, init_warning_params, predict_price, ModelConfig, PriceModelConfig,
        TrainedModel, WarningModelConfig, FORMAT_VERSION,
    };
    use crate::numerics::RandomSource;
    use crate::preprocess::{apply_recipe, fit_recipe};
    use crate::training::{generate_synthetic, SyntheticSpec};

    fn fixture() -> (Vec<TrainedModel>, TrainedModel, FeatureTable) {
        let spec = SyntheticSpec {
            series_count: 2,
            months: 24,
            seed: 5,
            ..Default::default()
        };
        let (table, _) = generate_synthetic(&spec).unwrap();
        let recipe = fit_recipe(&table).unwrap();
        let mut rng = RandomSource::new(1);
        let price_cfg = PriceModelConfig {
            d_model: 8,
            heads: 2,
            blocks: 1,
            ffn_dim: 8,
            ..Default::default()
        };
        let (pp, pr) = init_price_params(&price_cfg, &mut rng);
        let price = TrainedModel {
            config: ModelConfig::Price(price_cfg),
            params: pp,
            running: pr,
            recipe: Some(recipe.clone()),
            format_version: FORMAT_VERSION,
        };
        let warn_cfg = WarningModelConfig {
            d_model: 8,
            heads: 2,
            ffn_dims: vec![8, 4],
            ..Default::default()
        };
        let (wp, wr) = init_warning_params(&warn_cfg, &mut rng);
        let warning = TrainedModel {
            config: ModelConfig::Warning(warn_cfg),
            params: wp,
            running: wr,
            recipe: Some(recipe),
            format_version: FORMAT_VERSION,
        };
        (vec![price], warning, table)
    }

    #[test]
    fn report_has_one_entry_per_series_with_valid_probabilities() {
        let (price_models, warning, table) = fixture();
        let report = emit_report(
            &price_models,
            &warning,
            &table,
            "2024-01-01T00:00:00Z".into(),
        )
        .unwrap();
        assert_eq!(report.entries.len(), 2);
        for e in &report.entries {
            let sum: f64 = e.probabilities.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            let max_idx = e
                .probabilities
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            let label_idx = match e.predicted_label.as_str() {
                "none" => 0,
                "moderate" => 1,
                "high" => 2,
                other => panic!("unexpected label {other}"),
            };
            assert_eq!(label_idx, max_idx);
            assert_eq!(e.model_version, 1);
            assert_eq!(e.horizon, 1);
        }
    }

    #[test]
    fn report_price_matches_predict_price_bit_for_bit() {
        let (price_models, warning, table) = fixture();
        let report = emit_report(&price_models, &warning, &table, "t".into()).unwrap();
        let recipe = warning.recipe.clone().unwrap();
        let cleaned = apply_recipe(&recipe, &table).unwrap();
        let windows = latest_windows(&cleaned, 3).unwrap();
        for (entry, window) in report.entries.iter().zip(&windows) {
            let direct = predict_price(&price_models[0], window).unwrap();
            assert_eq!(entry.predicted_raw_price.to_bits(), direct.raw.to_bits());
        }
    }

    #[test]
    fn report_on_short_table_is_empty_but_valid() {
        let (price_models, warning, table) = fixture();
        // keep only two months per series: no window can host m=3 history
        let mut short = table.clone();
        short.rows.retain(|k, _| k.month.month <= 2);
        let report = emit_report(&price_models, &warning, &short, "t".into()).unwrap();
        assert!(report.entries.is_empty());
        let json = serde_json::to_string(&report).unwrap();
        let back: WarningReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn mismatched_recipes_are_rejected() {
        let (mut price_models, warning, table) = fixture();
        let mut other = table.clone();
        // drop a row so the refitted recipe differs
        let first = other.rows.keys().next().unwrap().clone();
        other.rows.remove(&first);
        price_models[0].recipe = Some(fit_recipe(&other).unwrap());
        assert!(matches!(
            emit_report(&price_models, &warning, &table, "t".into()),
            Err(CliError::RecipeMismatch(_))
        ));
    }
}
