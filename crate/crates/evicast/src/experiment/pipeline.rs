//! Per-symbol preparation and the single (symbol, method) cell: train,
//! predict, denormalize, score, backtest.

use serde::{Deserialize, Serialize};

use super::checkpoint::{build_model, Checkpoint, CheckpointedModel};
use super::ExperimentConfig;
use crate::backtest::{build_records, executed_pnl, uncertainty_filter, TradeRecord};
use crate::conformal::{adaptive_update, calibrate, interval, AdaptiveState, CalibrationSet};
use crate::data::{
    denormalize_interval, denormalize_mean, denormalize_sigma, denormalize_variance,
    fit_and_apply_norm, log_returns, make_sequences, temporal_split, NormStats, PriceSeries,
    SequenceDataset, Split,
};
use crate::evidential::Interval;
use crate::loss::LossMethod;
use crate::metrics::{
    accuracy_metrics, crps_gaussian, picp, sharpness, trading_metrics, unc_err_corr,
    MethodMetrics, ProbabilisticMetrics, TradingMetrics, TRADING_DAYS_PER_YEAR,
};
use crate::model::{Forecaster, HeadSpec, PredictionSummary};
use crate::optim::{train, TrainHistory};
use crate::special::normal_quantile;
use crate::{Error, Result};

/// Everything one symbol contributes to the grid: normalized sequence
/// datasets for the three splits plus the training-fitted statistics.
#[derive(Clone, Debug)]
pub struct SymbolData {
    pub symbol: String,
    pub train_set: SequenceDataset,
    pub val_set: SequenceDataset,
    pub test_set: SequenceDataset,
    pub stats: NormStats,
}

/// Returns -> split -> clip/standardize -> sequences, per symbol.
pub fn prepare_symbol(series: &PriceSeries, cfg: &ExperimentConfig) -> Result<SymbolData> {
    let returns = log_returns(series)?;
    let split = temporal_split(&returns, cfg.cutoff_date, cfg.val_fraction)?;
    let strip = |seg: &[(chrono::NaiveDate, f64)]| -> Vec<f64> {
        seg.iter().map(|(_, r)| *r).collect()
    };
    let norm = fit_and_apply_norm(
        &series.symbol,
        &strip(&split.train),
        &strip(&split.val),
        &strip(&split.test),
    )?;
    let lookback = cfg.lookback();
    let mk = |seg: &[f64], tag: Split| SequenceDataset {
        samples: make_sequences(&series.symbol, seg, lookback),
        split: tag,
    };
    let train_set = mk(&norm.train, Split::Train);
    let val_set = mk(&norm.val, Split::Val);
    let test_set = mk(&norm.test, Split::Test);
    for (set, name) in [(&train_set, "train"), (&val_set, "validation"), (&test_set, "test")] {
        if set.is_empty() {
            return Err(Error::Config(format!(
                "{}: {name} segment too short for lookback {lookback}",
                series.symbol
            )));
        }
    }
    Ok(SymbolData {
        symbol: series.symbol.clone(),
        train_set,
        val_set,
        test_set,
        stats: norm.stats,
    })
}

/// One test-sample prediction in the original return scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub symbol: String,
    pub method: LossMethod,
    pub index: usize,
    pub mean: f64,
    pub actual: f64,
    pub sigma: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    /// Expected data-noise variance (evidential only).
    pub aleatoric: Option<f64>,
    /// Model-uncertainty variance (evidential only).
    pub epistemic: Option<f64>,
}

impl PredictionRecord {
    /// The scalar driving the uncertainty filter: the predictive standard
    /// deviation where available, otherwise the interval half-width.
    pub fn uncertainty(&self) -> Option<f64> {
        self.sigma.or_else(|| {
            match (self.lower, self.upper) {
                (Some(lo), Some(hi)) => Some((hi - lo) / 2.0),
                _ => None,
            }
        })
    }
}

/// Everything a finished cell produces.
pub struct CellOutput {
    pub metrics: MethodMetrics,
    pub predictions: Vec<PredictionRecord>,
    /// Trade log; carries filtered flags for probabilistic methods.
    pub trades: Vec<TradeRecord>,
    pub history: TrainHistory,
    pub checkpoint: Checkpoint,
}

pub(crate) fn head_for(cfg: &ExperimentConfig, method: LossMethod) -> Result<HeadSpec> {
    let mut head = HeadSpec::for_method(method);
    if let Some(levels) = &cfg.head.quantile_levels {
        head.quantile_levels = levels.clone();
    }
    if let Some(k) = cfg.head.n_components {
        head.n_components = k;
    }
    if let Some(b) = cfg.head.bounded_mean {
        head.bounded_mean = b;
    }
    if let Some(s) = cfg.head.bound_scale {
        head.bound_scale = s;
    }
    head.validate()?;
    Ok(head)
}

/// Train one model and evaluate it end to end.
pub fn run_cell(
    sym: &SymbolData,
    method: LossMethod,
    cfg: &ExperimentConfig,
) -> Result<CellOutput> {
    let head = head_for(cfg, method)?;
    let mut model = build_model(cfg, &head)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.method = method;
    let history = train(&mut model, &sym.train_set, &sym.val_set, &train_cfg)?;
    let predictions = predict_test(sym, &model, method, cfg)?;
    let metrics = score_cell(&sym.symbol, method, &predictions, cfg)?;
    let trades = trade_log(&sym.symbol, &predictions, cfg)?;
    let checkpoint =
        Checkpoint::from_model(&model, cfg.backbone, method, sym, &history, cfg.lookback())?;
    Ok(CellOutput {
        metrics,
        predictions,
        trades,
        history,
        checkpoint,
    })
}

/// Raw test predictions to original-scale records. Conformal wraps the
/// point predictor with split calibration on the validation residuals plus
/// the online significance update.
pub fn predict_test(
    sym: &SymbolData,
    model: &CheckpointedModel,
    method: LossMethod,
    cfg: &ExperimentConfig,
) -> Result<Vec<PredictionRecord>> {
    let idx: Vec<usize> = (0..sym.test_set.len()).collect();
    let inputs = sym.test_set.input_tensor(&idx)?;
    let raw = model.predict_raw(&inputs)?;
    let targets_model = sym.test_set.target_vec(&idx);
    let head = model.head();
    let n = sym.test_set.len();

    let summaries: Vec<PredictionSummary> = if method == LossMethod::ConformalBase {
        conformal_summaries(sym, model, &raw, &targets_model, cfg)?
    } else {
        (0..n)
            .map(|i| head.summarize(raw.row_slice(i), 0.95))
            .collect::<Result<_>>()?
    };

    let stats = &sym.stats;
    let records = summaries
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let interval = s.interval.as_ref();
            PredictionRecord {
                symbol: sym.symbol.clone(),
                method,
                index: i,
                mean: denormalize_mean(s.mean, stats),
                actual: denormalize_mean(targets_model[i], stats),
                sigma: s.sigma.map(|v| denormalize_sigma(v, stats)),
                lower: interval.map(|iv| denormalize_interval(iv, stats).lower),
                upper: interval.map(|iv| denormalize_interval(iv, stats).upper),
                aleatoric: s.aleatoric.map(|v| denormalize_variance(v, stats)),
                epistemic: s.epistemic.map(|v| denormalize_variance(v, stats)),
            }
        })
        .collect();
    Ok(records)
}

/// Split-conformal intervals from validation residuals with the adaptive
/// significance recursion walked over the test stream in time order.
fn conformal_summaries(
    sym: &SymbolData,
    model: &CheckpointedModel,
    raw_test: &crate::autodiff::Tensor,
    targets_model: &[f64],
    cfg: &ExperimentConfig,
) -> Result<Vec<PredictionSummary>> {
    let head = model.head();
    let val_idx: Vec<usize> = (0..sym.val_set.len()).collect();
    let val_inputs = sym.val_set.input_tensor(&val_idx)?;
    let val_raw = model.predict_raw(&val_inputs)?;
    let val_targets = sym.val_set.target_vec(&val_idx);
    let residuals: Vec<f64> = (0..sym.val_set.len())
        .map(|i| head.location(val_raw.at(i, 0)) - val_targets[i])
        .collect();
    let scores = CalibrationSet::from_residuals(residuals)?;
    let z95 = normal_quantile(0.975)?;
    let mut state = AdaptiveState::new(0.05, cfg.conformal_gamma)?;
    let mut out = Vec::with_capacity(targets_model.len());
    for (i, &y) in targets_model.iter().enumerate() {
        let point = head.location(raw_test.at(i, 0));
        let q = calibrate(&scores, state.alpha_t)?;
        let iv: Interval = interval(point, q, 0.95)?;
        let sigma = if iv.unbounded {
            None
        } else {
            Some(iv.width() / 2.0 / z95)
        };
        out.push(PredictionSummary {
            mean: point,
            sigma,
            interval: Some(iv),
            aleatoric: None,
            epistemic: None,
        });
        state = adaptive_update(state, iv.contains(y));
    }
    Ok(out)
}

/// Accuracy, probabilistic and trading metrics for one cell, built from the
/// original-scale prediction records.
pub fn score_cell(
    symbol: &str,
    method: LossMethod,
    predictions: &[PredictionRecord],
    cfg: &ExperimentConfig,
) -> Result<MethodMetrics> {
    let means: Vec<f64> = predictions.iter().map(|p| p.mean).collect();
    let actuals: Vec<f64> = predictions.iter().map(|p| p.actual).collect();
    let accuracy = accuracy_metrics(&means, &actuals)?;

    let probabilistic = if method.is_probabilistic() {
        let sigmas: Option<Vec<f64>> = predictions.iter().map(|p| p.sigma).collect();
        let crps = match &sigmas {
            Some(s) if method.has_sigma() => {
                let total: Result<f64> = predictions
                    .iter()
                    .zip(s)
                    .map(|(p, &sig)| crps_gaussian(p.mean, sig, p.actual))
                    .sum();
                Some(total? / predictions.len() as f64)
            }
            _ => None,
        };
        let intervals: Option<Vec<Interval>> = predictions
            .iter()
            .map(|p| match (p.lower, p.upper) {
                (Some(lo), Some(hi)) => Interval::new(lo, hi, 0.95).ok(),
                _ => None,
            })
            .collect();
        let (picp_95, sharpness_95) = match &intervals {
            Some(ivs) => (Some(picp(ivs, &actuals)?), Some(sharpness(ivs)?)),
            None => (None, None),
        };
        // Unbounded conformal intervals would make these infinite; report NA
        // instead so the JSON report round-trips.
        let crps = crps.filter(|v| v.is_finite());
        let sharpness_95 = sharpness_95.filter(|v| v.is_finite());
        let unc: Option<Vec<f64>> = predictions.iter().map(|p| p.uncertainty()).collect();
        let corr = match unc {
            Some(u) => {
                let abs_err: Vec<f64> =
                    predictions.iter().map(|p| (p.mean - p.actual).abs()).collect();
                unc_err_corr(&u, &abs_err)?
            }
            None => None,
        };
        Some(ProbabilisticMetrics {
            crps,
            picp_95,
            sharpness_95,
            unc_err_corr: corr,
        })
    } else {
        None
    };

    let records = records_for(symbol, predictions)?;
    let trading = trading_metrics(&executed_pnl(&records), TRADING_DAYS_PER_YEAR)?;
    let trading_filtered = if records.iter().all(|r| r.uncertainty.is_some()) {
        let filtered = uncertainty_filter(&records, cfg.uncertainty_percentile)?;
        let pnl = executed_pnl(&filtered);
        if pnl.len() >= 2 {
            Some(trading_metrics(&pnl, TRADING_DAYS_PER_YEAR)?)
        } else {
            None
        }
    } else {
        None
    };
    Ok(MethodMetrics {
        symbol: symbol.to_string(),
        method,
        accuracy,
        probabilistic,
        trading,
        trading_filtered,
    })
}

fn records_for(symbol: &str, predictions: &[PredictionRecord]) -> Result<Vec<TradeRecord>> {
    let means: Vec<f64> = predictions.iter().map(|p| p.mean).collect();
    let actuals: Vec<f64> = predictions.iter().map(|p| p.actual).collect();
    let uncertainties: Option<Vec<f64>> = predictions.iter().map(|p| p.uncertainty()).collect();
    build_records(symbol, &means, &actuals, uncertainties.as_deref())
}

/// The emitted trade log: filtered flags applied for methods with
/// uncertainties, the plain directional log otherwise.
pub fn trade_log(
    symbol: &str,
    predictions: &[PredictionRecord],
    cfg: &ExperimentConfig,
) -> Result<Vec<TradeRecord>> {
    let records = records_for(symbol, predictions)?;
    if records.iter().all(|r| r.uncertainty.is_some()) {
        uncertainty_filter(&records, cfg.uncertainty_percentile)
    } else {
        Ok(records)
    }
}

/// All-days variant of the filtered strategy (no-trade days as zero PnL),
/// reported alongside the executed-only metrics in the combined JSON.
pub fn filtered_all_days_metrics(trades: &[TradeRecord]) -> Option<TradingMetrics> {
    if trades.iter().any(|r| r.filtered) {
        trading_metrics(&crate::backtest::all_days_pnl(trades), TRADING_DAYS_PER_YEAR).ok()
    } else {
        None
    }
}
