//! Staged pipeline entry points behind the CLI subcommands: `train` writes
//! checkpoints, `evaluate` turns checkpoints into prediction dumps,
//! `backtest` turns prediction dumps into trade logs and trading tables,
//! `report` assembles all tables and the combined JSON.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::pipeline::{
    filtered_all_days_metrics, predict_test, prepare_symbol, score_cell, trade_log,
    PredictionRecord, SymbolData,
};
use super::report::{
    emit_report, write_predictions_csv, write_trades_csv, ReportCell, ReportFormat,
};
use super::{CellStatus, ExperimentConfig, RunManifest};
use crate::loss::LossMethod;
use crate::optim::train;
use crate::{Error, Result};

fn cell_stem(symbol: &str, method: LossMethod) -> String {
    format!("{symbol}_{}", method.name())
}

fn write_manifest(manifest: &RunManifest, dir: &Path) -> Result<()> {
    let file = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), manifest)?;
    Ok(())
}

fn collect_manifest(cells: Vec<CellStatus>, started: Instant) -> RunManifest {
    let n_ok = cells.iter().filter(|c| c.ok).count();
    RunManifest {
        n_failed: cells.len() - n_ok,
        n_ok,
        cells,
        wall_ms: started.elapsed().as_millis(),
    }
}

fn prepared_symbols(
    cfg: &ExperimentConfig,
) -> Result<BTreeMap<String, std::result::Result<SymbolData, String>>> {
    let series = cfg.load_prices()?;
    Ok(series
        .iter()
        .map(|s| {
            (
                s.symbol.clone(),
                prepare_symbol(s, cfg).map_err(|e| e.to_string()),
            )
        })
        .collect())
}

fn grid(
    prepared: &BTreeMap<String, std::result::Result<SymbolData, String>>,
    cfg: &ExperimentConfig,
) -> Vec<(String, LossMethod)> {
    prepared
        .keys()
        .flat_map(|s| cfg.methods.iter().map(move |m| (s.clone(), *m)))
        .collect()
}

/// Train every cell; write `checkpoints/` and `history/` plus the manifest.
pub fn train_all(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let started = Instant::now();
    std::fs::create_dir_all(out_dir.join("checkpoints"))?;
    std::fs::create_dir_all(out_dir.join("history"))?;
    let prepared = prepared_symbols(cfg)?;
    let cells: Vec<CellStatus> = grid(&prepared, cfg)
        .par_iter()
        .map(|(symbol, method)| {
            let t0 = Instant::now();
            let outcome = (|| -> Result<()> {
                let sym = match prepared.get(symbol).expect("prepared") {
                    Ok(s) => s,
                    Err(e) => return Err(Error::Config(format!("preparation failed: {e}"))),
                };
                let head = super::pipeline::head_for(cfg, *method)?;
                let mut model = super::checkpoint::build_model(cfg, &head)?;
                let mut train_cfg = cfg.train.clone();
                train_cfg.method = *method;
                let history = train(&mut model, &sym.train_set, &sym.val_set, &train_cfg)?;
                let stem = cell_stem(symbol, *method);
                let cp = Checkpoint::from_model(
                    &model,
                    cfg.backbone,
                    *method,
                    sym,
                    &history,
                    cfg.lookback(),
                )?;
                save_checkpoint(&cp, out_dir.join("checkpoints").join(format!("{stem}.json")))?;
                let file =
                    std::fs::File::create(out_dir.join("history").join(format!("{stem}.json")))?;
                serde_json::to_writer_pretty(std::io::BufWriter::new(file), &history)?;
                Ok(())
            })();
            CellStatus {
                symbol: symbol.clone(),
                method: *method,
                ok: outcome.is_ok(),
                error: outcome.err().map(|e| e.to_string()),
                wall_ms: t0.elapsed().as_millis(),
            }
        })
        .collect();
    let manifest = collect_manifest(cells, started);
    write_manifest(&manifest, out_dir)?;
    Ok(manifest)
}

/// Predict the test split from saved checkpoints; write `predictions/`.
pub fn evaluate_all(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let started = Instant::now();
    std::fs::create_dir_all(out_dir.join("predictions"))?;
    let prepared = prepared_symbols(cfg)?;
    let cells: Vec<CellStatus> = grid(&prepared, cfg)
        .par_iter()
        .map(|(symbol, method)| {
            let t0 = Instant::now();
            let outcome = (|| -> Result<()> {
                let sym = match prepared.get(symbol).expect("prepared") {
                    Ok(s) => s,
                    Err(e) => return Err(Error::Config(format!("preparation failed: {e}"))),
                };
                let stem = cell_stem(symbol, *method);
                let cp_path = out_dir.join("checkpoints").join(format!("{stem}.json"));
                if !cp_path.exists() {
                    return Err(Error::Config(format!(
                        "missing checkpoint {} (run `train` first)",
                        cp_path.display()
                    )));
                }
                let cp = load_checkpoint(&cp_path)?;
                let model = cp.to_model(cfg.frequency, cfg.lookback())?;
                let predictions = predict_test(sym, &model, *method, cfg)?;
                write_predictions_csv(
                    &out_dir.join("predictions").join(format!("{stem}.csv")),
                    &predictions,
                )?;
                Ok(())
            })();
            CellStatus {
                symbol: symbol.clone(),
                method: *method,
                ok: outcome.is_ok(),
                error: outcome.err().map(|e| e.to_string()),
                wall_ms: t0.elapsed().as_millis(),
            }
        })
        .collect();
    let manifest = collect_manifest(cells, started);
    write_manifest(&manifest, out_dir)?;
    Ok(manifest)
}

fn load_all_predictions(out_dir: &Path) -> Result<Vec<(String, LossMethod, Vec<PredictionRecord>)>> {
    let dir = out_dir.join("predictions");
    if !dir.is_dir() {
        return Err(Error::Config(format!(
            "no predictions under {} (run `evaluate` first)",
            dir.display()
        )));
    }
    let mut paths: Vec<_> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for path in paths {
        let records = super::report::read_predictions_csv(&path)?;
        if records.is_empty() {
            continue;
        }
        out.push((records[0].symbol.clone(), records[0].method, records));
    }
    if out.is_empty() {
        return Err(Error::Config("prediction dumps are all empty".into()));
    }
    Ok(out)
}

/// Rebuild trade logs and trading tables from prediction dumps.
pub fn backtest_all(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir.join("trades"))?;
    let all = load_all_predictions(out_dir)?;
    let mut cells = Vec::new();
    for (symbol, method, predictions) in &all {
        let trades = trade_log(symbol, predictions, cfg)?;
        write_trades_csv(
            &out_dir.join("trades").join(format!("{}.csv", cell_stem(symbol, *method))),
            &trades,
        )?;
        cells.push(ReportCell {
            metrics: score_cell(symbol, *method, predictions, cfg)?,
            trading_filtered_all_days: filtered_all_days_metrics(&trades),
        });
    }
    emit_report(&cells, ReportFormat::Csv, out_dir)?;
    Ok(())
}

/// Assemble every report table and the combined JSON from prediction dumps.
pub fn report_all(cfg: &ExperimentConfig, out_dir: &Path, formats: &[ReportFormat]) -> Result<()> {
    let all = load_all_predictions(out_dir)?;
    let mut cells = Vec::new();
    for (symbol, method, predictions) in &all {
        let trades = trade_log(symbol, predictions, cfg)?;
        cells.push(ReportCell {
            metrics: score_cell(symbol, *method, predictions, cfg)?,
            trading_filtered_all_days: filtered_all_days_metrics(&trades),
        });
    }
    for format in formats {
        emit_report(&cells, *format, out_dir)?;
    }
    Ok(())
}
