//! Directional trading simulation with optional uncertainty filtering.

use serde::{Deserialize, Serialize};

use crate::data::percentile;
use crate::{Error, Result};

/// One test-set trading decision. `signal` of 0 means no trade: the PnL is
/// zero and the record is excluded from trade-count metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeRecord {
    pub symbol: String,
    pub index: usize,
    pub signal: i8,
    pub predicted: f64,
    pub actual: f64,
    pub pnl_bps: f64,
    pub uncertainty: Option<f64>,
    pub filtered: bool,
}

/// Long above zero, short at or below zero: `+1` if the predicted return is
/// `> 0`, else `-1` (zero maps to short).
pub fn generate_signals(predicted: &[f64]) -> Vec<i8> {
    predicted.iter().map(|&p| if p > 0.0 { 1 } else { -1 }).collect()
}

/// Elementwise `signal * actual_return * 100` (basis points).
pub fn compute_pnl(signals: &[i8], actuals: &[f64]) -> Result<Vec<f64>> {
    if signals.len() != actuals.len() {
        return Err(Error::Contract(format!(
            "pnl needs equal lengths, got {} signals vs {} returns",
            signals.len(),
            actuals.len()
        )));
    }
    Ok(signals
        .iter()
        .zip(actuals)
        .map(|(&s, &a)| s as f64 * a * 100.0)
        .collect())
}

/// Assemble trade records for one symbol's aligned prediction/actual
/// series.
pub fn build_records(
    symbol: &str,
    predicted: &[f64],
    actuals: &[f64],
    uncertainties: Option<&[f64]>,
) -> Result<Vec<TradeRecord>> {
    if predicted.len() != actuals.len() {
        return Err(Error::Contract(
            "predictions and actuals must align".into(),
        ));
    }
    if let Some(u) = uncertainties {
        if u.len() != predicted.len() {
            return Err(Error::Contract(
                "uncertainties must align with predictions".into(),
            ));
        }
    }
    let signals = generate_signals(predicted);
    let pnl = compute_pnl(&signals, actuals)?;
    Ok((0..predicted.len())
        .map(|i| TradeRecord {
            symbol: symbol.to_string(),
            index: i,
            signal: signals[i],
            predicted: predicted[i],
            actual: actuals[i],
            pnl_bps: pnl[i],
            uncertainty: uncertainties.map(|u| u[i]),
            filtered: false,
        })
        .collect())
}

/// Zero out the signal of every record whose total uncertainty reaches the
/// per-symbol percentile threshold (ties at the threshold are filtered).
/// All records must carry an uncertainty.
pub fn uncertainty_filter(records: &[TradeRecord], pct: f64) -> Result<Vec<TradeRecord>> {
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::Contract(format!(
            "percentile must lie in [0, 100], got {pct}"
        )));
    }
    if records.iter().any(|r| r.uncertainty.is_none()) {
        return Err(Error::Contract(
            "uncertainty filtering needs an uncertainty on every record".into(),
        ));
    }
    // Per-symbol thresholds over the record set.
    let mut symbols: Vec<&str> = records.iter().map(|r| r.symbol.as_str()).collect();
    symbols.sort_unstable();
    symbols.dedup();
    let mut out = records.to_vec();
    for symbol in symbols {
        let us: Vec<f64> = records
            .iter()
            .filter(|r| r.symbol == symbol)
            .map(|r| r.uncertainty.expect("checked above"))
            .collect();
        let threshold = percentile(&us, pct);
        for r in out.iter_mut().filter(|r| r.symbol == symbol) {
            if r.uncertainty.expect("checked above") >= threshold {
                r.signal = 0;
                r.pnl_bps = 0.0;
                r.filtered = true;
            }
        }
    }
    Ok(out)
}

/// PnL of executed trades only (no-trade records excluded).
pub fn executed_pnl(records: &[TradeRecord]) -> Vec<f64> {
    records
        .iter()
        .filter(|r| r.signal != 0)
        .map(|r| r.pnl_bps)
        .collect()
}

/// PnL over all days, zeros included for filtered days.
pub fn all_days_pnl(records: &[TradeRecord]) -> Vec<f64> {
    records.iter().map(|r| r.pnl_bps).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signal_rule() {
        assert_eq!(generate_signals(&[0.5, -0.2, 0.0]), vec![1, -1, -1]);
    }

    #[test]
    fn pnl_values() {
        let pnl = compute_pnl(&[1, -1, -1], &[0.01, 0.01, -0.02]).unwrap();
        assert_eq!(pnl, vec![1.0, -1.0, 2.0]);
        assert!(compute_pnl(&[1], &[0.01, 0.02]).is_err());
    }

    #[test]
    fn perfect_foresight_never_loses() {
        let actuals = [0.01, -0.03, 0.002, -0.0001, 0.0];
        let preds = actuals;
        let records = build_records("X", &preds, &actuals, None).unwrap();
        assert!(records.iter().all(|r| r.pnl_bps >= 0.0));
        let executed = executed_pnl(&records);
        let nonzero_wins = executed.iter().filter(|&&p| p > 0.0).count();
        let nonzero_actuals = actuals.iter().filter(|&&a| a != 0.0).count();
        assert_eq!(nonzero_wins, nonzero_actuals);
    }

    #[test]
    fn filter_thresholds_by_percentile() {
        let records = build_records(
            "X",
            &[0.1, 0.2, 0.3, 0.4],
            &[0.01, 0.01, 0.01, 0.01],
            Some(&[1.0, 2.0, 3.0, 4.0]),
        )
        .unwrap();
        let filtered = uncertainty_filter(&records, 75.0).unwrap();
        // threshold = 3.25: only u = 4 is filtered
        assert_eq!(
            filtered.iter().map(|r| r.filtered).collect::<Vec<_>>(),
            vec![false, false, false, true]
        );
        assert_eq!(filtered[3].signal, 0);
        assert_eq!(filtered[3].pnl_bps, 0.0);
        // retained trades keep their pnl
        for i in 0..3 {
            assert_eq!(filtered[i].pnl_bps, records[i].pnl_bps);
        }
    }

    #[test]
    fn filter_ties_are_filtered() {
        let records = build_records(
            "X",
            &[0.1, 0.2, 0.3],
            &[0.01, 0.01, 0.01],
            Some(&[2.0, 2.0, 2.0]),
        )
        .unwrap();
        // constant uncertainties: threshold equals the common value, the
        // >= rule filters everything
        let filtered = uncertainty_filter(&records, 75.0).unwrap();
        assert!(filtered.iter().all(|r| r.filtered));
    }

    #[test]
    fn filter_at_100th_percentile_touches_only_the_max() {
        let records = build_records(
            "X",
            &[0.1, 0.2, 0.3, 0.4],
            &[0.01; 4],
            Some(&[1.0, 2.0, 3.0, 4.0]),
        )
        .unwrap();
        let filtered = uncertainty_filter(&records, 100.0).unwrap();
        assert_eq!(
            filtered.iter().filter(|r| r.filtered).count(),
            1,
            "only the maximum is at the 100th percentile"
        );
        assert!(filtered[3].filtered);
    }

    #[test]
    fn filter_is_per_symbol() {
        let mut records = build_records(
            "A",
            &[0.1, 0.2],
            &[0.01, 0.01],
            Some(&[1.0, 10.0]),
        )
        .unwrap();
        records.extend(
            build_records("B", &[0.1, 0.2], &[0.01, 0.01], Some(&[100.0, 1000.0])).unwrap(),
        );
        let filtered = uncertainty_filter(&records, 50.0).unwrap();
        // each symbol's threshold is its own median; the larger of each pair goes
        assert_eq!(
            filtered.iter().map(|r| r.filtered).collect::<Vec<_>>(),
            vec![false, true, false, true]
        );
    }

    #[test]
    fn filter_requires_uncertainties() {
        let records = build_records("X", &[0.1], &[0.01], None).unwrap();
        assert!(uncertainty_filter(&records, 75.0).is_err());
    }
}
