//! Report emission: per-symbol CSV tables (accuracy, probabilistic,
//! trading), the combined JSON document, trade logs, prediction dumps,
//! training histories and checkpoints. `NA` is rendered literally in CSV;
//! all float formatting is shortest-roundtrip, so reruns at the same seed
//! produce byte-identical files.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pipeline::{filtered_all_days_metrics, PredictionRecord};
use super::{CellOutput, ExperimentConfig, RunOutput};
use crate::backtest::TradeRecord;
use crate::loss::LossMethod;
use crate::metrics::{MethodMetrics, TradingMetrics};
use crate::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

/// `NA` for missing values, shortest-roundtrip decimal otherwise.
pub fn format_na(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "NA".to_string(),
    }
}

fn parse_na(s: &str) -> Result<Option<f64>> {
    if s == "NA" {
        Ok(None)
    } else {
        s.parse::<f64>()
            .map(Some)
            .map_err(|_| Error::Contract(format!("bad numeric field `{s}`")))
    }
}

/// One combined-report entry: the metrics cell plus the all-days variant of
/// the filtered strategy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportCell {
    #[serde(flatten)]
    pub metrics: MethodMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trading_filtered_all_days: Option<TradingMetrics>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportDoc {
    pub cells: Vec<ReportCell>,
}

fn symbols_of(metrics: &[MethodMetrics]) -> Vec<String> {
    let set: BTreeSet<&str> = metrics.iter().map(|m| m.symbol.as_str()).collect();
    set.into_iter().map(String::from).collect()
}

/// Emit the report tables for already-computed metrics: three CSVs per
/// symbol, or the combined JSON document. Returns the paths written.
pub fn emit_report(
    cells: &[ReportCell],
    format: ReportFormat,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    if cells.is_empty() {
        return Err(Error::Contract("no results to report".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    match format {
        ReportFormat::Json => {
            let path = dir.join("report.json");
            let doc = ReportDoc {
                cells: cells.to_vec(),
            };
            let file = std::fs::File::create(&path)?;
            serde_json::to_writer_pretty(std::io::BufWriter::new(file), &doc)?;
            written.push(path);
        }
        ReportFormat::Csv => {
            let metrics: Vec<MethodMetrics> = cells.iter().map(|c| c.metrics.clone()).collect();
            for symbol in symbols_of(&metrics) {
                let rows: Vec<&MethodMetrics> =
                    metrics.iter().filter(|m| m.symbol == symbol).collect();
                written.push(write_accuracy_csv(dir, &symbol, &rows)?);
                written.push(write_probabilistic_csv(dir, &symbol, &rows)?);
                written.push(write_trading_csv(dir, &symbol, &rows)?);
            }
        }
    }
    Ok(written)
}

fn write_accuracy_csv(dir: &Path, symbol: &str, rows: &[&MethodMetrics]) -> Result<PathBuf> {
    let path = dir.join(format!("{symbol}_accuracy.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["method", "rmse", "mae", "pearson_corr"])?;
    for m in rows {
        w.write_record([
            m.method.name().to_string(),
            format_na(Some(m.accuracy.rmse)),
            format_na(Some(m.accuracy.mae)),
            format_na(m.accuracy.pearson),
        ])?;
    }
    w.flush()?;
    Ok(path)
}

fn write_probabilistic_csv(dir: &Path, symbol: &str, rows: &[&MethodMetrics]) -> Result<PathBuf> {
    let path = dir.join(format!("{symbol}_probabilistic.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["method", "crps", "picp_95", "sharpness_95", "unc_err_corr"])?;
    for m in rows {
        let p = m.probabilistic.as_ref();
        w.write_record([
            m.method.name().to_string(),
            format_na(p.and_then(|p| p.crps)),
            format_na(p.and_then(|p| p.picp_95)),
            format_na(p.and_then(|p| p.sharpness_95)),
            format_na(p.and_then(|p| p.unc_err_corr)),
        ])?;
    }
    w.flush()?;
    Ok(path)
}

fn trading_fields(t: Option<&TradingMetrics>) -> [String; 7] {
    match t {
        Some(t) => [
            format_na(t.daily_sharpe),
            format_na(t.annual_sharpe),
            format_na(t.annual_sortino),
            format_na(Some(t.max_drawdown_bps)),
            format_na(t.calmar),
            format_na(Some(t.win_rate)),
            format!("{}", t.n_trades),
        ],
        None => std::array::from_fn(|_| "NA".to_string()),
    }
}

fn write_trading_csv(dir: &Path, symbol: &str, rows: &[&MethodMetrics]) -> Result<PathBuf> {
    let path = dir.join(format!("{symbol}_trading.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "method",
        "daily_sharpe",
        "annual_sharpe",
        "annual_sortino",
        "max_drawdown_bps",
        "calmar",
        "win_rate",
        "n_trades",
        "filtered_daily_sharpe",
        "filtered_annual_sharpe",
        "filtered_annual_sortino",
        "filtered_max_drawdown_bps",
        "filtered_calmar",
        "filtered_win_rate",
        "filtered_n_trades",
    ])?;
    for m in rows {
        let mut record = vec![m.method.name().to_string()];
        record.extend(trading_fields(Some(&m.trading)));
        record.extend(trading_fields(m.trading_filtered.as_ref()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(path)
}

const PREDICTION_HEADER: [&str; 10] = [
    "symbol",
    "method",
    "index",
    "mean",
    "actual",
    "sigma",
    "lower",
    "upper",
    "aleatoric",
    "epistemic",
];

pub fn write_predictions_csv(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PREDICTION_HEADER)?;
    for r in records {
        w.write_record([
            r.symbol.clone(),
            r.method.name().to_string(),
            r.index.to_string(),
            format_na(Some(r.mean)),
            format_na(Some(r.actual)),
            format_na(r.sigma),
            format_na(r.lower),
            format_na(r.upper),
            format_na(r.aleatoric),
            format_na(r.epistemic),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or("").to_string();
        out.push(PredictionRecord {
            symbol: get(0),
            method: LossMethod::parse(&get(1))?,
            index: get(2)
                .parse()
                .map_err(|_| Error::Contract(format!("bad index `{}`", get(2))))?,
            mean: parse_na(&get(3))?
                .ok_or_else(|| Error::Contract("mean may not be NA".into()))?,
            actual: parse_na(&get(4))?
                .ok_or_else(|| Error::Contract("actual may not be NA".into()))?,
            sigma: parse_na(&get(5))?,
            lower: parse_na(&get(6))?,
            upper: parse_na(&get(7))?,
            aleatoric: parse_na(&get(8))?,
            epistemic: parse_na(&get(9))?,
        });
    }
    Ok(out)
}

pub fn write_trades_csv(path: &Path, trades: &[TradeRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "symbol",
        "index",
        "signal",
        "predicted",
        "actual",
        "pnl_bps",
        "uncertainty",
        "filtered",
    ])?;
    for t in trades {
        w.write_record([
            t.symbol.clone(),
            t.index.to_string(),
            t.signal.to_string(),
            format_na(Some(t.predicted)),
            format_na(Some(t.actual)),
            format_na(Some(t.pnl_bps)),
            format_na(t.uncertainty),
            t.filtered.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Write the complete artifact tree for a finished run.
pub fn write_all(out: &RunOutput, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for sub in ["predictions", "trades", "history", "checkpoints"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let cells: Vec<ReportCell> = out
        .cells
        .iter()
        .filter_map(|(_, o)| o.as_ref())
        .map(|o| ReportCell {
            metrics: o.metrics.clone(),
            trading_filtered_all_days: filtered_all_days_metrics(&o.trades),
        })
        .collect();
    if !cells.is_empty() {
        emit_report(&cells, ReportFormat::Csv, dir)?;
        emit_report(&cells, ReportFormat::Json, dir)?;
    }
    for (status, output) in &out.cells {
        let Some(output) = output else { continue };
        write_cell_artifacts(dir, &status.symbol, status.method, output, cfg)?;
    }
    let manifest_file = std::fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(manifest_file), &out.manifest)?;
    Ok(())
}

fn write_cell_artifacts(
    dir: &Path,
    symbol: &str,
    method: LossMethod,
    output: &CellOutput,
    _cfg: &ExperimentConfig,
) -> Result<()> {
    let stem = format!("{symbol}_{}", method.name());
    write_predictions_csv(&dir.join("predictions").join(format!("{stem}.csv")), &output.predictions)?;
    write_trades_csv(&dir.join("trades").join(format!("{stem}.csv")), &output.trades)?;
    let hist_file = std::fs::File::create(dir.join("history").join(format!("{stem}.json")))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(hist_file), &output.history)?;
    super::checkpoint::save_checkpoint(
        &output.checkpoint,
        dir.join("checkpoints").join(format!("{stem}.json")),
    )?;
    Ok(())
}
