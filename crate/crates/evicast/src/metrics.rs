//! Evaluation metrics: accuracy (RMSE/MAE/correlation), probabilistic
//! (CRPS, PICP, sharpness, uncertainty-error correlation) and trading
//! (Sharpe, Sortino, max drawdown, Calmar, win rate). Every metric has a
//! naive-loop oracle twin in the test suites.

use serde::{Deserialize, Serialize};

use crate::evidential::Interval;
use crate::loss::LossMethod;
use crate::special::{normal_cdf, normal_pdf};
use crate::{Error, Result};

pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;

/// Point-forecast quality. `pearson` is `None` when either side has zero
/// variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMetrics {
    pub rmse: f64,
    pub mae: f64,
    pub pearson: Option<f64>,
}

/// Pearson correlation; `None` if either input is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx <= 0.0 || vy <= 0.0 {
        None
    } else {
        Some(cov / (vx.sqrt() * vy.sqrt()))
    }
}

pub fn accuracy_metrics(preds: &[f64], actuals: &[f64]) -> Result<AccuracyMetrics> {
    if preds.len() != actuals.len() || preds.len() < 2 {
        return Err(Error::Contract(format!(
            "accuracy metrics need equal lengths >= 2, got {} vs {}",
            preds.len(),
            actuals.len()
        )));
    }
    let n = preds.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for (&p, &a) in preds.iter().zip(actuals) {
        let e = p - a;
        se += e * e;
        ae += e.abs();
    }
    Ok(AccuracyMetrics {
        rmse: (se / n).sqrt(),
        mae: ae / n,
        pearson: pearson(preds, actuals),
    })
}

/// Closed-form CRPS of a Gaussian forecast:
/// `sigma (z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi))`, `z = (y - mu)/sigma`.
pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::Contract(format!(
            "crps needs a positive sigma, got {sigma}"
        )));
    }
    let z = (y - mu) / sigma;
    Ok(sigma
        * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z)
            - 1.0 / std::f64::consts::PI.sqrt()))
}

/// Fraction of actuals inside their (closed) intervals.
pub fn picp(intervals: &[Interval], actuals: &[f64]) -> Result<f64> {
    if intervals.is_empty() || intervals.len() != actuals.len() {
        return Err(Error::Contract("picp needs equal nonempty lengths".into()));
    }
    let hits = intervals
        .iter()
        .zip(actuals)
        .filter(|(iv, &y)| iv.contains(y))
        .count();
    Ok(hits as f64 / actuals.len() as f64)
}

/// Mean interval width (infinite if any interval is unbounded).
pub fn sharpness(intervals: &[Interval]) -> Result<f64> {
    if intervals.is_empty() {
        return Err(Error::Contract("sharpness of zero intervals".into()));
    }
    Ok(intervals.iter().map(Interval::width).sum::<f64>() / intervals.len() as f64)
}

/// Pearson correlation between predicted uncertainty and absolute error.
pub fn unc_err_corr(sigmas: &[f64], abs_errors: &[f64]) -> Result<Option<f64>> {
    if sigmas.len() != abs_errors.len() || sigmas.is_empty() {
        return Err(Error::Contract(
            "uncertainty-error correlation needs equal nonempty lengths".into(),
        ));
    }
    Ok(pearson(sigmas, abs_errors))
}

/// Risk-adjusted trading metrics over a per-trade PnL series (bps).
///
/// Conventions: Sharpe uses the sample (n-1) standard deviation; Sortino
/// divides by the population standard deviation of the strictly negative
/// PnL values; drawdown is measured on the cumulative PnL path starting at
/// zero; Calmar's numerator is the annualized mean PnL in the series' own
/// units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradingMetrics {
    pub daily_sharpe: Option<f64>,
    pub annual_sharpe: Option<f64>,
    pub annual_sortino: Option<f64>,
    pub max_drawdown_bps: f64,
    pub calmar: Option<f64>,
    pub win_rate: f64,
    pub n_trades: usize,
}

pub fn trading_metrics(pnl: &[f64], periods_per_year: f64) -> Result<TradingMetrics> {
    if pnl.len() < 2 {
        return Err(Error::Contract(format!(
            "trading metrics need >= 2 trades, got {}",
            pnl.len()
        )));
    }
    let n = pnl.len() as f64;
    let mean = pnl.iter().sum::<f64>() / n;
    let sample_var = pnl.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0);
    let std = sample_var.sqrt();
    let daily_sharpe = if std > 0.0 { Some(mean / std) } else { None };
    let annual_sharpe = daily_sharpe.map(|s| s * periods_per_year.sqrt());

    let negatives: Vec<f64> = pnl.iter().copied().filter(|&r| r < 0.0).collect();
    let annual_sortino = if negatives.is_empty() {
        None
    } else {
        let nm = negatives.iter().sum::<f64>() / negatives.len() as f64;
        let pop_var =
            negatives.iter().map(|r| (r - nm) * (r - nm)).sum::<f64>() / negatives.len() as f64;
        let downside = pop_var.sqrt();
        if downside > 0.0 {
            Some(mean / downside * periods_per_year.sqrt())
        } else {
            None
        }
    };

    let mut cum = 0.0;
    let mut peak = 0.0_f64;
    let mut max_drawdown = 0.0_f64;
    for &r in pnl {
        cum += r;
        peak = peak.max(cum);
        max_drawdown = max_drawdown.min(cum - peak);
    }
    let calmar = if max_drawdown < 0.0 {
        Some(mean * periods_per_year / max_drawdown.abs())
    } else {
        None
    };
    let wins = pnl.iter().filter(|&&r| r > 0.0).count();
    Ok(TradingMetrics {
        daily_sharpe,
        annual_sharpe,
        annual_sortino,
        max_drawdown_bps: max_drawdown,
        calmar,
        win_rate: wins as f64 / n,
        n_trades: pnl.len(),
    })
}

/// Calibration metrics; individual entries are `None` when the method does
/// not provide the required distributional output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilisticMetrics {
    pub crps: Option<f64>,
    pub picp_95: Option<f64>,
    pub sharpness_95: Option<f64>,
    pub unc_err_corr: Option<f64>,
}

/// Full per-(symbol, method) report cell: accuracy always, probabilistic
/// metrics when the method emits distributions, trading metrics for the
/// plain strategy and optionally for the uncertainty-filtered one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub symbol: String,
    pub method: LossMethod,
    pub accuracy: AccuracyMetrics,
    pub probabilistic: Option<ProbabilisticMetrics>,
    pub trading: TradingMetrics,
    pub trading_filtered: Option<TradingMetrics>,
}
