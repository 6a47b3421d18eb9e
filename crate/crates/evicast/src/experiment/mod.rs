//! Experiment orchestration: run the full (symbol x method) grid from one
//! configuration -- preprocess, train, predict, denormalize, score, backtest
//! -- and emit the report tables, trade logs, prediction dumps, checkpoints
//! and a run manifest.

mod checkpoint;
mod pipeline;
mod report;
mod stages;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointedModel};
pub use pipeline::{prepare_symbol, run_cell, CellOutput, PredictionRecord, SymbolData};
pub use report::{
    emit_report, format_na, read_predictions_csv, write_predictions_csv, write_trades_csv,
    ReportCell, ReportDoc, ReportFormat,
};
pub use stages::{backtest_all, evaluate_all, report_all, train_all};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{self, PriceSeries, SyntheticKind};
use crate::loss::LossMethod;
use crate::lstm::LstmSpec;
use crate::metrics::MethodMetrics;
use crate::optim::TrainConfig;
use crate::patchformer::{Frequency, PatchformerSpec};
use crate::{Error, Result};

/// Where the price data comes from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSpec {
    /// `date,symbol,close` CSV on disk.
    Csv { path: PathBuf },
    /// Generated geometric random walks, one per symbol.
    Synthetic {
        symbols: Vec<String>,
        days: usize,
        #[serde(default = "default_start_date")]
        start_date: NaiveDate,
        #[serde(default)]
        seed: u64,
    },
}

fn default_start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date")
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackboneChoice {
    #[default]
    Lstm,
    Patchformer,
}

/// Optional per-head overrides layered over the per-method defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct HeadOverrides {
    #[serde(default)]
    pub quantile_levels: Option<Vec<f64>>,
    #[serde(default)]
    pub n_components: Option<usize>,
    #[serde(default)]
    pub bounded_mean: Option<bool>,
    #[serde(default)]
    pub bound_scale: Option<f64>,
}

/// The whole experiment: data source, split, methods, backbone and training
/// hyperparameters. Defaults follow the reference configuration (lr 0.001,
/// batch 128, 50 epochs, patience 10, clip 1.0, weight decay 0.001, dropout
/// 0.1, lookback 50, seed 0, lambda_evd 0.1, uncertainty percentile 75).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    #[serde(default = "default_cutoff")]
    pub cutoff_date: NaiveDate,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_methods")]
    pub methods: Vec<LossMethod>,
    #[serde(default)]
    pub symbols: Option<Vec<String>>,
    #[serde(default)]
    pub backbone: BackboneChoice,
    #[serde(default)]
    pub lstm: LstmSpec,
    #[serde(default)]
    pub patchformer: PatchformerSpec,
    #[serde(default = "default_frequency")]
    pub frequency: Frequency,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub head: HeadOverrides,
    #[serde(default = "default_uncertainty_percentile")]
    pub uncertainty_percentile: f64,
    #[serde(default = "default_conformal_gamma")]
    pub conformal_gamma: f64,
}

fn default_cutoff() -> NaiveDate {
    NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date")
}

fn default_val_fraction() -> f64 {
    0.2
}

fn default_methods() -> Vec<LossMethod> {
    LossMethod::ALL.to_vec()
}

fn default_frequency() -> Frequency {
    Frequency::Daily
}

fn default_uncertainty_percentile() -> f64 {
    75.0
}

fn default_conformal_gamma() -> f64 {
    0.01
}

/// Run defaults regularize through the optimizer's decoupled decay only;
/// the in-loss L2 weight is zeroed so the evidential objective is not
/// decayed twice relative to the baselines.
fn default_train() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.loss_weights.lambda_wd = 0.0;
    cfg
}

impl ExperimentConfig {
    /// Config for a synthetic random-walk study; the all-defaults starting
    /// point for tests and `run-all`.
    pub fn synthetic(symbols: Vec<String>, days: usize, seed: u64) -> Self {
        ExperimentConfig {
            data: DataSpec::Synthetic {
                symbols,
                days,
                start_date: default_start_date(),
                seed,
            },
            cutoff_date: NaiveDate::from_ymd_opt(2023, 1, 1).expect("valid date"),
            val_fraction: default_val_fraction(),
            methods: default_methods(),
            symbols: None,
            backbone: BackboneChoice::default(),
            lstm: LstmSpec::default(),
            patchformer: PatchformerSpec::default(),
            frequency: default_frequency(),
            train: default_train(),
            head: HeadOverrides::default(),
            uncertainty_percentile: default_uncertainty_percentile(),
            conformal_gamma: default_conformal_gamma(),
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("methods list is empty".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        if !(0.0..=100.0).contains(&self.uncertainty_percentile) {
            return Err(Error::Config(
                "uncertainty_percentile must lie in [0, 100]".into(),
            ));
        }
        if self.conformal_gamma < 0.0 {
            return Err(Error::Config("conformal_gamma must be nonnegative".into()));
        }
        self.lstm.validate()?;
        self.patchformer.validate()?;
        self.train.validate()?;
        if let DataSpec::Synthetic { symbols, days, .. } = &self.data {
            if symbols.is_empty() {
                return Err(Error::Config(
                    "synthetic data needs at least one symbol".into(),
                ));
            }
            if *days < 100 {
                return Err(Error::Config("synthetic data needs at least 100 days".into()));
            }
        }
        Ok(())
    }

    /// Load from CSV or generate the synthetic walks, filtered and sorted by
    /// symbol.
    pub fn load_prices(&self) -> Result<Vec<PriceSeries>> {
        let mut series = match &self.data {
            DataSpec::Csv { path } => data::load_prices(path)?,
            DataSpec::Synthetic {
                symbols,
                days,
                start_date,
                seed,
            } => symbols
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    data::gen_random_walk_prices(s, *days, seed.wrapping_add(i as u64), *start_date)
                })
                .collect::<Result<Vec<_>>>()?,
        };
        if let Some(filter) = &self.symbols {
            series.retain(|s| filter.contains(&s.symbol));
            if series.is_empty() {
                return Err(Error::Config(format!(
                    "symbol filter {filter:?} matched nothing"
                )));
            }
        }
        series.sort_by(|a, b| a.symbol.cmp(&b.symbol));
        Ok(series)
    }

    pub fn lookback(&self) -> usize {
        self.lstm.lookback
    }
}

/// Outcome of one (symbol, method) cell.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellStatus {
    pub symbol: String,
    pub method: LossMethod,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub wall_ms: u128,
}

/// The run manifest: every cell's status and wall time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub cells: Vec<CellStatus>,
    pub n_ok: usize,
    pub n_failed: usize,
    pub wall_ms: u128,
}

/// Full in-memory result of a run.
pub struct RunOutput {
    pub metrics: Vec<MethodMetrics>,
    pub cells: Vec<(CellStatus, Option<CellOutput>)>,
    pub manifest: RunManifest,
}

impl RunOutput {
    pub fn any_failed(&self) -> bool {
        self.manifest.n_failed > 0
    }
}

/// Run every (symbol, method) cell. Cells execute in a work pool; a failing
/// cell is recorded in the manifest and never aborts the others. The
/// assembled outputs are in deterministic (symbol, method) order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let series = cfg.load_prices()?;

    // Per-symbol preparation; a failure here poisons that symbol's cells.
    let prepared: BTreeMap<String, std::result::Result<SymbolData, String>> = series
        .iter()
        .map(|s| {
            (
                s.symbol.clone(),
                prepare_symbol(s, cfg).map_err(|e| e.to_string()),
            )
        })
        .collect();

    let grid: Vec<(String, LossMethod)> = prepared
        .keys()
        .flat_map(|s| cfg.methods.iter().map(move |m| (s.clone(), *m)))
        .collect();

    let cells: Vec<(CellStatus, Option<CellOutput>)> = grid
        .par_iter()
        .map(|(symbol, method)| {
            let t0 = Instant::now();
            let outcome = match prepared.get(symbol).expect("prepared above") {
                Ok(sym_data) => run_cell(sym_data, *method, cfg).map_err(|e| e.to_string()),
                Err(e) => Err(format!("preparation failed: {e}")),
            };
            let wall_ms = t0.elapsed().as_millis();
            match outcome {
                Ok(out) => (
                    CellStatus {
                        symbol: symbol.clone(),
                        method: *method,
                        ok: true,
                        error: None,
                        wall_ms,
                    },
                    Some(out),
                ),
                Err(e) => (
                    CellStatus {
                        symbol: symbol.clone(),
                        method: *method,
                        ok: false,
                        error: Some(e),
                        wall_ms,
                    },
                    None,
                ),
            }
        })
        .collect();

    let metrics: Vec<MethodMetrics> = cells
        .iter()
        .filter_map(|(_, out)| out.as_ref().map(|o| o.metrics.clone()))
        .collect();
    let n_ok = cells.iter().filter(|(s, _)| s.ok).count();
    let manifest = RunManifest {
        cells: cells.iter().map(|(s, _)| s.clone()).collect(),
        n_ok,
        n_failed: cells.len() - n_ok,
        wall_ms: started.elapsed().as_millis(),
    };
    Ok(RunOutput {
        metrics,
        cells,
        manifest,
    })
}

/// Run and write every artifact under `out_dir`.
pub fn run_and_write(cfg: &ExperimentConfig, out_dir: impl AsRef<Path>) -> Result<RunOutput> {
    let out = run_experiment(cfg)?;
    report::write_all(&out, cfg, out_dir.as_ref())?;
    Ok(out)
}

/// Write a synthetic dataset in the input CSV schema.
pub fn write_synthetic_csv(
    kind: SyntheticKind,
    symbols: &[String],
    days: usize,
    seed: u64,
    start_date: NaiveDate,
    path: impl AsRef<Path>,
) -> Result<()> {
    if kind != SyntheticKind::RandomWalkPrices {
        return Err(Error::Config(
            "only random_walk_prices can be written as a price CSV".into(),
        ));
    }
    let mut wtr = csv::Writer::from_path(path.as_ref())?;
    wtr.write_record(["date", "symbol", "close"])?;
    for (i, symbol) in symbols.iter().enumerate() {
        let series =
            data::gen_random_walk_prices(symbol, days, seed.wrapping_add(i as u64), start_date)?;
        for (date, close) in &series.observations {
            wtr.write_record([date.to_string(), symbol.clone(), format!("{close}")])?;
        }
    }
    wtr.flush()?;
    Ok(())
}
