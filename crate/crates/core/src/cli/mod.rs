//! Command-line pipeline: ingest, train, sweep, predict, report, chat.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 model error,
//! 4 backend error.

mod config;
mod report;

use std::io::BufRead;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::chat::{
    ChatBackend, ChatError, ChatState, HttpBackend, ProfileDraft, QaStore, StubBackend,
};
use crate::ingest::{
    describe_no_overlap, join_complete, load_source, load_warnings, FeatureTable, IngestError,
    WarningLabel, WarningLabelSet,
};
use crate::models::{
    load_model, predict_price, predict_price_cleaned_batch, save_model, ModelError, TrainedModel,
};
use crate::preprocess::{
    apply_recipe, build_windows, chrono_split, fit_recipe, latest_windows, write_windows_csv,
    FlatWindow, PreprocessError,
};
use crate::training::{
    evaluate_price_mae, evaluate_warning_f1, generate_synthetic, horizon_sweep, train_price,
    train_warning, TrainError,
};

pub use config::RunConfig;
pub use report::{emit_report, report_timestamp, ReportEntry, WarningReport, REPORT_TIME_ENV};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Model(String),
    #[error("cleaning recipes do not match: {0}")]
    RecipeMismatch(String),
    #[error("{0}")]
    Backend(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    ModelFile(#[from] ModelError),
    #[error(transparent)]
    Chat(#[from] ChatError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) | CliError::Ingest(_) | CliError::Preprocess(_) | CliError::Io(_) => {
                2
            }
            CliError::Train(TrainError::Model(_)) => 3,
            CliError::Train(_) => 2,
            CliError::Model(_) | CliError::RecipeMismatch(_) | CliError::ModelFile(_) => 3,
            CliError::Backend(_) => 4,
            CliError::Chat(ChatError::BackendUnavailable(_)) => 4,
            CliError::Chat(ChatError::IncompleteProfile(_)) => 1,
            CliError::Chat(_) => 2,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "foodcast",
    version,
    about = "Food commodity price forecasting and early warnings"
)]
pub struct Cli {
    /// Run configuration file; paths inside it resolve relative to it.
    #[arg(long, global = true, default_value = "foodcast.toml")]
    pub config: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Load the configured sources (or generate synthetic data) and write
    /// the joined feature table CSV.
    Ingest {
        /// Override the table output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the price model on the ingested table and save it.
    TrainPrice {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also export the training windows as CSV.
        #[arg(long)]
        dump_windows: Option<PathBuf>,
    },
    /// Train the warning model, chaining forecasts from the saved price
    /// model(s), and save it.
    TrainWarning {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one price model per (horizon, repeat) and write the MAE table.
    Sweep {
        /// Comma-separated forecast horizons in months.
        #[arg(long, value_delimiter = ',', required = true)]
        horizons: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print one forecast for a (country, commodity) pair from its latest
    /// window.
    Predict {
        #[arg(long)]
        country: Option<String>,
        #[arg(long)]
        commodity: Option<String>,
    },
    /// Chain the price and warning models over every series' latest window
    /// and write the warning report JSON.
    Report {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Interactive terminal chat over the configured backend.
    Chat,
}

pub fn run() -> Result<(), CliError> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => return Err(CliError::Usage(e.to_string())),
        Err(e) => {
            // --help / --version
            print!("{e}");
            return Ok(());
        }
    };
    let cfg = RunConfig::load(&cli.config)?;
    match cli.command {
        Command::Ingest { out } => cmd_ingest(&cfg, out),
        Command::TrainPrice {
            epochs,
            seed,
            out,
            dump_windows,
        } => cmd_train_price(&cfg, epochs, seed, out, dump_windows),
        Command::TrainWarning { epochs, seed, out } => cmd_train_warning(&cfg, epochs, seed, out),
        Command::Sweep {
            horizons,
            repeats,
            epochs,
            out,
        } => cmd_sweep(&cfg, &horizons, repeats, epochs, out),
        Command::Predict { country, commodity } => cmd_predict(&cfg, country, commodity),
        Command::Report { out } => cmd_report(&cfg, out),
        Command::Chat => cmd_chat(&cfg),
    }
}

fn cmd_ingest(cfg: &RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let table_path = out.map_or_else(|| cfg.resolve(&cfg.data.table), |p| cfg.resolve(&p));
    let table = if !cfg.sources.is_empty() {
        let mut series = Vec::with_capacity(cfg.sources.len());
        let mut names = Vec::with_capacity(cfg.sources.len());
        for decl in &cfg.sources {
            let path = cfg.resolve_source(&decl.file);
            series.push(load_source(&path, &decl.schema())?);
            names.push(decl.name.clone());
        }
        match join_complete(&series, &names) {
            Ok(table) => table,
            Err(IngestError::NoOverlap(counts)) => {
                return Err(CliError::Data(describe_no_overlap(&counts)));
            }
            Err(e) => return Err(e.into()),
        }
    } else if let Some(synth) = &cfg.synthetic {
        let (table, labels) = generate_synthetic(&synth.spec(cfg.seed))?;
        if let Some(warn_path) = &cfg.data.warnings {
            labels.write_csv(&cfg.resolve(warn_path))?;
        }
        table
    } else {
        return Err(CliError::Usage(
            "config declares neither [[source]] entries nor a [synthetic] section".into(),
        ));
    };
    table.write_csv(&table_path)?;
    println!(
        "wrote {} rows x {} features to {}",
        table.rows.len(),
        table.width(),
        table_path.display()
    );
    Ok(())
}

fn read_table(cfg: &RunConfig) -> Result<FeatureTable, CliError> {
    let path = cfg.resolve(&cfg.data.table);
    FeatureTable::read_csv(&path)
        .map_err(|e| CliError::Data(format!("cannot read table {}: {e}", path.display())))
}

fn read_labels(cfg: &RunConfig) -> Result<WarningLabelSet, CliError> {
    match &cfg.data.warnings {
        Some(p) => Ok(load_warnings(&cfg.resolve(p))?),
        None => Ok(WarningLabelSet::default()),
    }
}

fn metrics_path(model_path: &Path) -> PathBuf {
    let name = model_path
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("model");
    let stem = name.strip_suffix(".nnet.json").unwrap_or(name);
    model_path.with_file_name(format!("{stem}.metrics.json"))
}

fn write_metrics(path: &Path, metrics: &serde_json::Value) -> Result<(), CliError> {
    std::fs::write(
        path,
        serde_json::to_string_pretty(metrics).expect("metrics serialize"),
    )?;
    Ok(())
}

fn cmd_train_price(
    cfg: &RunConfig,
    epochs: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    dump_windows: Option<PathBuf>,
) -> Result<(), CliError> {
    let table = read_table(cfg)?;
    let labels = read_labels(cfg)?;
    let recipe = fit_recipe(&table)?;
    let cleaned = apply_recipe(&recipe, &table)?;
    let model_cfg = cfg.model.price();
    let windows = build_windows(&cleaned, &labels, model_cfg.m, model_cfg.horizon)?;
    if let Some(p) = dump_windows {
        write_windows_csv(&windows, &cfg.resolve(&p))?;
    }
    let (train, val) = chrono_split(&windows, cfg.training.train_frac());
    let mut train_cfg = cfg.training.price(seed.unwrap_or(cfg.seed), model_cfg.l2);
    if let Some(e) = epochs {
        train_cfg.epochs = e;
    }
    let (model, curve) = train_price(&train, &val, &train_cfg, &model_cfg, Some(recipe))?;
    let val_mae = if val.is_empty() {
        None
    } else {
        Some(evaluate_price_mae(&model, &val)?)
    };

    let model_path = out.map_or_else(|| cfg.resolve(&cfg.paths.price_model), |p| cfg.resolve(&p));
    save_model(&model, &model_path)?;
    let metrics = serde_json::json!({
        "kind": "price",
        "mae": val_mae,
        "train_windows": train.len(),
        "val_windows": val.len(),
        "final_train_loss": curve.train_loss.last(),
        "model_config": model_cfg,
        "train_config": train_cfg,
    });
    write_metrics(&metrics_path(&model_path), &metrics)?;
    println!(
        "trained price model on {} windows ({} validation); val MAE {}; saved to {}",
        train.len(),
        val.len(),
        val_mae.map_or_else(|| "n/a".into(), |v| format!("{v:.6}")),
        model_path.display()
    );
    Ok(())
}

/// Load the price models covering horizons 1..=h, verifying m and recipes.
fn load_price_models(cfg: &RunConfig, h: usize, m: usize) -> Result<Vec<TrainedModel>, CliError> {
    let paths: Vec<PathBuf> = cfg
        .paths
        .price_models
        .clone()
        .unwrap_or_else(|| vec![cfg.paths.price_model.clone()]);
    if paths.len() != h {
        return Err(CliError::Model(format!(
            "warning horizon {h} needs {h} price model path(s) (horizons 1..={h}), got {}",
            paths.len()
        )));
    }
    let mut models = Vec::with_capacity(paths.len());
    for (i, p) in paths.iter().enumerate() {
        let model = load_model(&cfg.resolve(p))?;
        let pc = model.price_config()?;
        if pc.horizon != i + 1 {
            return Err(CliError::Model(format!(
                "{} has horizon {}, expected {}",
                p.display(),
                pc.horizon,
                i + 1
            )));
        }
        if pc.m != m {
            return Err(CliError::Model(format!(
                "{} was trained with m={}, config wants m={}",
                p.display(),
                pc.m,
                m
            )));
        }
        models.push(model);
    }
    Ok(models)
}

fn predicted_matrix(
    price_models: &[TrainedModel],
    windows: &[FlatWindow],
) -> Result<Vec<Vec<f64>>, CliError> {
    let mut per_model = Vec::with_capacity(price_models.len());
    for m in price_models {
        per_model.push(predict_price_cleaned_batch(m, windows)?);
    }
    Ok((0..windows.len())
        .map(|i| per_model.iter().map(|v| v[i]).collect())
        .collect())
}

fn cmd_train_warning(
    cfg: &RunConfig,
    epochs: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let table = read_table(cfg)?;
    let labels = read_labels(cfg)?;
    let model_cfg = cfg.model.warning();
    let price_models = load_price_models(cfg, model_cfg.horizon, model_cfg.m)?;
    let recipe = price_models[0]
        .recipe
        .clone()
        .ok_or_else(|| CliError::Model("price model carries no cleaning recipe".into()))?;
    for pm in &price_models[1..] {
        if pm.recipe.as_ref() != Some(&recipe) {
            return Err(CliError::RecipeMismatch(
                "price models disagree on cleaning".into(),
            ));
        }
    }
    let cleaned = apply_recipe(&recipe, &table)?;
    let windows = build_windows(&cleaned, &labels, model_cfg.m, model_cfg.horizon)?;
    let (train, val) = chrono_split(&windows, cfg.training.train_frac());
    let train_pred = predicted_matrix(&price_models, &train)?;
    let val_pred = predicted_matrix(&price_models, &val)?;

    let mut train_cfg = cfg.training.warning(seed.unwrap_or(cfg.seed), model_cfg.l2);
    if let Some(e) = epochs {
        train_cfg.epochs = e;
    }
    let (model, curve) = train_warning(
        &train,
        &train_pred,
        &val,
        &val_pred,
        &train_cfg,
        &model_cfg,
        Some(recipe),
    )?;
    let val_f1 = if val.is_empty() {
        None
    } else {
        Some(evaluate_warning_f1(&model, &val, &val_pred)?)
    };

    let model_path = out.map_or_else(
        || cfg.resolve(&cfg.paths.warning_model),
        |p| cfg.resolve(&p),
    );
    save_model(&model, &model_path)?;
    let metrics = serde_json::json!({
        "kind": "warning",
        "f1": val_f1,
        "train_windows": train.len(),
        "val_windows": val.len(),
        "class_counts": curve.class_counts,
        "single_class": curve.single_class,
        "final_train_loss": curve.train_loss.last(),
        "model_config": model_cfg,
        "train_config": train_cfg,
    });
    write_metrics(&metrics_path(&model_path), &metrics)?;
    println!(
        "trained warning model on {} windows ({} validation); val macro F1 {}; saved to {}",
        train.len(),
        val.len(),
        val_f1.map_or_else(|| "n/a".into(), |v| format!("{v:.4}")),
        model_path.display()
    );
    Ok(())
}

fn cmd_sweep(
    cfg: &RunConfig,
    horizons: &[usize],
    repeats: usize,
    epochs: Option<usize>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    if horizons.is_empty() || repeats == 0 {
        return Err(CliError::Usage(
            "sweep needs at least one horizon and one repeat".into(),
        ));
    }
    let table = read_table(cfg)?;
    let recipe = fit_recipe(&table)?;
    let cleaned = apply_recipe(&recipe, &table)?;
    let model_cfg = cfg.model.price();
    let mut train_cfg = cfg.training.price(cfg.seed, model_cfg.l2);
    if let Some(e) = epochs {
        train_cfg.epochs = e;
    }
    let sweep = horizon_sweep(
        &cleaned,
        model_cfg.m,
        horizons,
        repeats,
        &train_cfg,
        &model_cfg,
        cfg.training.train_frac(),
    )?;
    let path = out.map_or_else(|| cfg.resolve(&cfg.paths.sweep_csv), |p| cfg.resolve(&p));
    sweep.write_csv(&path)?;
    for &h in horizons {
        match sweep.horizon_summary(h) {
            Some((mean, std)) => println!("horizon {h}: mean val MAE {mean:.6} (std {std:.6})"),
            None => println!("horizon {h}: no successful runs"),
        }
    }
    println!("wrote {} rows to {}", sweep.rows.len(), path.display());
    Ok(())
}

fn cmd_predict(
    cfg: &RunConfig,
    country: Option<String>,
    commodity: Option<String>,
) -> Result<(), CliError> {
    let model = load_model(&cfg.resolve(&cfg.paths.price_model))?;
    let model_cfg = model.price_config()?;
    let recipe = model
        .recipe
        .as_ref()
        .ok_or_else(|| CliError::Model("price model carries no cleaning recipe".into()))?;
    let table = read_table(cfg)?;
    let cleaned = apply_recipe(recipe, &table)?;
    let windows = latest_windows(&cleaned, model_cfg.m)?;
    let window = match (&country, &commodity) {
        (Some(c), Some(k)) => windows
            .iter()
            .find(|w| w.key.country == c.to_uppercase() && w.key.commodity == k.to_uppercase())
            .ok_or_else(|| {
                CliError::Data(format!(
                    "no window for ({c}, {k}) with {} months of history",
                    model_cfg.m
                ))
            })?,
        _ if windows.len() == 1 => &windows[0],
        _ => {
            let pairs: Vec<String> = windows
                .iter()
                .map(|w| format!("({}, {})", w.key.country, w.key.commodity))
                .collect();
            return Err(CliError::Usage(format!(
                "--country and --commodity are required; available: {}",
                pairs.join(", ")
            )));
        }
    };
    let pred = predict_price(&model, window)?;
    println!(
        "{} {} {} -> {}: cleaned {:.6}, raw {:.4}",
        window.key.country,
        window.key.commodity,
        window.key.month,
        pred.target_month,
        pred.cleaned,
        pred.raw
    );
    Ok(())
}

fn cmd_report(cfg: &RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let warning_model = load_model(&cfg.resolve(&cfg.paths.warning_model))?;
    let wc = warning_model.warning_config()?;
    let price_models = load_price_models(cfg, wc.horizon, wc.m)?;
    let table = read_table(cfg)?;
    let report = emit_report(&price_models, &warning_model, &table, report_timestamp())?;
    let path = out.map_or_else(|| cfg.resolve(&cfg.paths.report), |p| cfg.resolve(&p));
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&report).expect("report serialize"),
    )?;
    println!(
        "wrote {} entries to {}",
        report.entries.len(),
        path.display()
    );
    Ok(())
}

fn parse_severity(s: &str) -> Result<WarningLabel, CliError> {
    WarningLabel::parse(s)
        .ok_or_else(|| CliError::Usage(format!("unknown severity {s:?} (none/moderate/high)")))
}

fn cmd_chat(cfg: &RunConfig) -> Result<(), CliError> {
    let chat = &cfg.chat;
    let draft = ProfileDraft {
        country: chat.country.clone(),
        commodity: chat.commodity.clone(),
        severity: chat.severity.as_deref().map(parse_severity).transpose()?,
        language: chat.language.clone(),
    };
    let store = match &chat.qa_store {
        Some(p) => QaStore::load(&cfg.resolve(p))?,
        None => QaStore::default(),
    };
    let backend: Box<dyn ChatBackend> = match chat.backend.as_str() {
        "stub" => Box::new(StubBackend),
        "http" => {
            let url = chat
                .url
                .as_deref()
                .ok_or_else(|| CliError::Usage("chat backend \"http\" needs a url".into()))?;
            Box::new(HttpBackend::new(url))
        }
        other => return Err(CliError::Usage(format!("unknown chat backend {other:?}"))),
    };
    let mut state = ChatState::init_conversation(draft, store, backend)?;
    if let Some(t) = chat.filter_threshold {
        state.filter_threshold = t;
    }
    if let Some(t) = chat.retrieve_threshold {
        state.retrieve_threshold = t;
    }
    println!("[generated] {}", state.history[0].text);

    let stdin = std::io::stdin();
    for line in stdin.lock().lines() {
        let line = line?;
        let query = line.trim();
        if query.is_empty() {
            continue;
        }
        if query == "exit" || query == "quit" {
            break;
        }
        match state.respond(query) {
            Ok(turn) => {
                println!(
                    "[{}] {}",
                    turn.route.expect("assistant turns are tagged").as_str(),
                    turn.text
                );
            }
            Err(ChatError::EmptyText) => println!("[filtered] {}", crate::chat::REFUSAL_TEMPLATE),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}
