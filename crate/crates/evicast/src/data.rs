//! Data pipeline: price ingestion, log returns, leak-free temporal splits,
//! outlier clipping + standardization from training statistics only,
//! sequence generation and synthetic data.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::evidential::Interval;
use crate::{Error, Result};

/// Daily close prices for one symbol, strictly increasing in date.
#[derive(Clone, Debug, PartialEq)]
pub struct PriceSeries {
    pub symbol: String,
    pub observations: Vec<(NaiveDate, f64)>,
}

impl PriceSeries {
    pub fn new(symbol: impl Into<String>, observations: Vec<(NaiveDate, f64)>) -> Result<Self> {
        let symbol = symbol.into();
        for w in observations.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(Error::Contract(format!(
                    "{symbol}: dates not strictly increasing at {}",
                    w[1].0
                )));
            }
        }
        if let Some((date, close)) = observations
            .iter()
            .find(|(_, c)| !(c.is_finite() && *c > 0.0))
        {
            return Err(Error::Contract(format!(
                "{symbol}: non-positive close {close} at {date}"
            )));
        }
        Ok(PriceSeries {
            symbol,
            observations,
        })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Log returns for one symbol; each point is dated by the later observation.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnSeries {
    pub symbol: String,
    pub points: Vec<(NaiveDate, f64)>,
}

/// Load `date,symbol,close` CSV into one series per symbol, sorted by date.
/// Rows with non-positive or non-numeric closes fail with their line number
/// (header is line 1).
pub fn load_prices(path: impl AsRef<Path>) -> Result<Vec<PriceSeries>> {
    let file = std::fs::File::open(path.as_ref())?;
    load_prices_from(file)
}

pub fn load_prices_from(reader: impl Read) -> Result<Vec<PriceSeries>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Config(format!("input CSV is missing a `{name}` column")))
    };
    let date_col = col("date")?;
    let symbol_col = col("symbol")?;
    let close_col = col("close")?;
    let mut by_symbol: BTreeMap<String, Vec<(NaiveDate, f64)>> = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record?;
        let date_str = record.get(date_col).unwrap_or("").trim();
        let date = NaiveDate::parse_from_str(date_str, "%Y-%m-%d").map_err(|_| Error::Row {
            line,
            message: format!("unparseable date `{date_str}` (expected YYYY-MM-DD)"),
        })?;
        let close_str = record.get(close_col).unwrap_or("").trim();
        let close: f64 = close_str.parse().map_err(|_| Error::Row {
            line,
            message: format!("non-numeric close `{close_str}`"),
        })?;
        if !(close.is_finite() && close > 0.0) {
            return Err(Error::Row {
                line,
                message: format!("close must be positive, got {close}"),
            });
        }
        let symbol = record.get(symbol_col).unwrap_or("").trim().to_string();
        if symbol.is_empty() {
            return Err(Error::Row {
                line,
                message: "empty symbol".into(),
            });
        }
        by_symbol.entry(symbol).or_default().push((date, close));
    }
    if by_symbol.is_empty() {
        return Err(Error::Config("input CSV contains no data rows".into()));
    }
    by_symbol
        .into_iter()
        .map(|(symbol, mut obs)| {
            obs.sort_by_key(|(d, _)| *d);
            PriceSeries::new(symbol, obs)
        })
        .collect()
}

/// 1-day log returns `r_t = ln(P_t / P_{t-1})`.
pub fn log_returns(series: &PriceSeries) -> Result<ReturnSeries> {
    if series.len() < 2 {
        return Err(Error::Contract(format!(
            "{}: need at least 2 observations for returns, got {}",
            series.symbol,
            series.len()
        )));
    }
    let points = series
        .observations
        .windows(2)
        .map(|w| (w[1].0, (w[1].1 / w[0].1).ln()))
        .collect();
    Ok(ReturnSeries {
        symbol: series.symbol.clone(),
        points,
    })
}

/// Dated return segments after the temporal split.
#[derive(Clone, Debug)]
pub struct SplitSegments {
    pub symbol: String,
    pub train: Vec<(NaiveDate, f64)>,
    pub val: Vec<(NaiveDate, f64)>,
    pub test: Vec<(NaiveDate, f64)>,
}

/// Split by date: everything at or after `cutoff` is test; the trailing
/// `val_fraction` of the pre-cutoff segment (chronologically last) is
/// validation; the rest is training. Order is preserved everywhere.
pub fn temporal_split(
    returns: &ReturnSeries,
    cutoff: NaiveDate,
    val_fraction: f64,
) -> Result<SplitSegments> {
    if returns.points.is_empty() {
        return Err(Error::Contract(format!("{}: empty returns", returns.symbol)));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!(
            "val_fraction must lie in [0, 1), got {val_fraction}"
        )));
    }
    let split_at = returns
        .points
        .partition_point(|(d, _)| *d < cutoff);
    let (pre, test) = returns.points.split_at(split_at);
    if pre.is_empty() {
        return Err(Error::Config(format!(
            "{}: no training data before cutoff {cutoff}",
            returns.symbol
        )));
    }
    if test.is_empty() {
        return Err(Error::Config(format!(
            "{}: no test data at or after cutoff {cutoff}",
            returns.symbol
        )));
    }
    let n_val = (val_fraction * pre.len() as f64).floor() as usize;
    let (train, val) = pre.split_at(pre.len() - n_val);
    if train.is_empty() {
        return Err(Error::Config(format!(
            "{}: validation fraction leaves no training data",
            returns.symbol
        )));
    }
    Ok(SplitSegments {
        symbol: returns.symbol.clone(),
        train: train.to_vec(),
        val: val.to_vec(),
        test: test.to_vec(),
    })
}

/// Per-symbol normalization constants, all fitted on the training segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub symbol: String,
    pub mean: f64,
    pub std: f64,
    /// 1st percentile of the training returns (clip floor).
    pub lower_clip: f64,
    /// 99th percentile of the training returns (clip ceiling).
    pub upper_clip: f64,
}

/// Linear-interpolation percentile of already-sorted data, `p` in [0, 100].
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    debug_assert!((0.0..=100.0).contains(&p));
    if sorted.len() == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Percentile of unsorted data (sorts a copy).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    percentile_sorted(&sorted, p)
}

/// Normalized segments plus the statistics that produced them.
#[derive(Clone, Debug)]
pub struct NormalizedSegments {
    pub train: Vec<f64>,
    pub val: Vec<f64>,
    pub test: Vec<f64>,
    pub stats: NormStats,
}

/// Clip all three segments to the training [p1, p99], then standardize all
/// three with the post-clip training mean/std (population convention). The
/// validation and test segments never influence the statistics.
pub fn fit_and_apply_norm(
    symbol: &str,
    train: &[f64],
    val: &[f64],
    test: &[f64],
) -> Result<NormalizedSegments> {
    if train.len() < 10 {
        return Err(Error::Contract(format!(
            "{symbol}: need >= 10 training returns to fit statistics, got {}",
            train.len()
        )));
    }
    let mut sorted = train.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite returns"));
    let lower_clip = percentile_sorted(&sorted, 1.0);
    let upper_clip = percentile_sorted(&sorted, 99.0);
    let clip = |xs: &[f64]| -> Vec<f64> {
        xs.iter().map(|&x| x.clamp(lower_clip, upper_clip)).collect()
    };
    let train_c = clip(train);
    let val_c = clip(val);
    let test_c = clip(test);
    let n = train_c.len() as f64;
    let mean = train_c.iter().sum::<f64>() / n;
    let var = train_c.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= 0.0 || !std.is_finite() {
        return Err(Error::Degenerate(format!(
            "{symbol}: training returns have zero variance"
        )));
    }
    let norm = |xs: Vec<f64>| -> Vec<f64> { xs.into_iter().map(|x| (x - mean) / std).collect() };
    Ok(NormalizedSegments {
        train: norm(train_c),
        val: norm(val_c),
        test: norm(test_c),
        stats: NormStats {
            symbol: symbol.to_string(),
            mean,
            std,
            lower_clip,
            upper_clip,
        },
    })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One training example: a normalized lookback window and the immediately
/// following return, scaled to percentage points (x100).
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub symbol: String,
    pub window: Vec<f64>,
    pub target: f64,
}

#[derive(Clone, Debug)]
pub struct SequenceDataset {
    pub samples: Vec<SequenceSample>,
    pub split: Split,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Input windows of the selected samples as a `[k, lookback]` tensor.
    pub fn input_tensor(&self, indices: &[usize]) -> Result<Tensor> {
        if indices.is_empty() {
            return Err(Error::Contract("empty batch selection".into()));
        }
        let lookback = self.samples[indices[0]].window.len();
        let mut data = Vec::with_capacity(indices.len() * lookback);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].window);
        }
        Tensor::matrix(indices.len(), lookback, data)
    }

    pub fn target_vec(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().map(|&i| self.samples[i].target).collect()
    }
}

/// Sliding windows over one normalized segment. A segment no longer than
/// `lookback` yields no samples (callers skip the symbol with a warning).
pub fn make_sequences(symbol: &str, segment: &[f64], lookback: usize) -> Vec<SequenceSample> {
    if segment.len() <= lookback {
        return Vec::new();
    }
    (0..segment.len() - lookback)
        .map(|i| SequenceSample {
            symbol: symbol.to_string(),
            window: segment[i..i + lookback].to_vec(),
            target: 100.0 * segment[i + lookback],
        })
        .collect()
}

/// Undo the x100 target scaling and the standardization of a predicted mean.
pub fn denormalize_mean(model_output: f64, stats: &NormStats) -> f64 {
    model_output / 100.0 * stats.std + stats.mean
}

/// Standard deviations scale without the mean shift.
pub fn denormalize_sigma(model_sigma: f64, stats: &NormStats) -> f64 {
    model_sigma / 100.0 * stats.std
}

/// Variances scale by the squared factor.
pub fn denormalize_variance(model_variance: f64, stats: &NormStats) -> f64 {
    let s = stats.std / 100.0;
    model_variance * s * s
}

/// Interval bounds transform like means.
pub fn denormalize_interval(iv: &Interval, stats: &NormStats) -> Interval {
    if iv.unbounded {
        return *iv;
    }
    Interval {
        lower: denormalize_mean(iv.lower, stats),
        upper: denormalize_mean(iv.upper, stats),
        level: iv.level,
        unbounded: false,
    }
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    HeteroscedasticCubic,
    IidGaussianReturns,
    RandomWalkPrices,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "heteroscedastic_cubic" => Ok(SyntheticKind::HeteroscedasticCubic),
            "iid_gaussian_returns" => Ok(SyntheticKind::IidGaussianReturns),
            "random_walk_prices" => Ok(SyntheticKind::RandomWalkPrices),
            other => Err(Error::Config(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

/// Feature/target pairs for the heteroscedastic regression benchmark.
#[derive(Clone, Debug)]
pub struct CubicData {
    /// x in [-4, 4]
    pub train: Vec<(f64, f64)>,
    /// x in [-6, 6]; |x| > 4 is out-of-range relative to training
    pub test: Vec<(f64, f64)>,
}

/// True noise standard deviation of the cubic benchmark.
pub fn cubic_noise_sd(x: f64) -> f64 {
    0.1 + 0.2 * x.abs()
}

pub enum SyntheticData {
    Cubic(CubicData),
    Returns(Vec<f64>),
    Prices(PriceSeries),
}

/// Deterministic synthetic generation, `n >= 100`.
pub fn gen_synthetic(kind: SyntheticKind, n: usize, seed: u64) -> Result<SyntheticData> {
    if n < 100 {
        return Err(Error::Contract(format!(
            "synthetic generation needs n >= 100, got {n}"
        )));
    }
    Ok(match kind {
        SyntheticKind::HeteroscedasticCubic => {
            SyntheticData::Cubic(gen_heteroscedastic_cubic(n, seed))
        }
        SyntheticKind::IidGaussianReturns => {
            SyntheticData::Returns(gen_iid_gaussian_returns(n, seed))
        }
        SyntheticKind::RandomWalkPrices => SyntheticData::Prices(gen_random_walk_prices(
            "SYN",
            n,
            seed,
            NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid date"),
        )?),
    })
}

/// `y = x^3 / 10 + eps * (0.1 + 0.2 |x|)`; train x uniform in [-4, 4], test
/// x uniform in [-6, 6].
pub fn gen_heteroscedastic_cubic(n: usize, seed: u64) -> CubicData {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let draw = |lo: f64, hi: f64, rng: &mut ChaCha20Rng| -> (f64, f64) {
        let x = rand::Rng::random_range(rng, lo..hi);
        let eps: f64 = StandardNormal.sample(rng);
        (x, x * x * x / 10.0 + eps * cubic_noise_sd(x))
    };
    let train = (0..n).map(|_| draw(-4.0, 4.0, &mut rng)).collect();
    let test = (0..n).map(|_| draw(-6.0, 6.0, &mut rng)).collect();
    CubicData { train, test }
}

/// Standard normal i.i.d. draws.
pub fn gen_iid_gaussian_returns(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Geometric random walk: `P_0 = 100`, `P_t = P_{t-1} exp(r_t)` with
/// `r_t ~ N(0, 0.02)`; prices stay positive by construction.
pub fn gen_random_walk_prices(
    symbol: &str,
    n_days: usize,
    seed: u64,
    start: NaiveDate,
) -> Result<PriceSeries> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut price = 100.0_f64;
    let mut observations = Vec::with_capacity(n_days);
    for i in 0..n_days {
        if i > 0 {
            let eps: f64 = StandardNormal.sample(&mut rng);
            price *= (0.02 * eps).exp();
        }
        let date = start + chrono::Days::new(i as u64);
        observations.push((date, price));
    }
    PriceSeries::new(symbol, observations)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    #[test]
    fn load_prices_basic() {
        let csv = "date,symbol,close\n2020-01-01,BTC,100\n2020-01-02,BTC,110\n2020-01-03,BTC,105\n";
        let series = load_prices_from(csv.as_bytes()).unwrap();
        assert_eq!(series.len(), 1);
        assert_eq!(series[0].symbol, "BTC");
        assert_eq!(series[0].len(), 3);
    }

    #[test]
    fn load_prices_rejects_bad_close_with_line_number() {
        let csv = "date,symbol,close\n2020-01-01,BTC,100\n2020-01-02,BTC,-1\n";
        match load_prices_from(csv.as_bytes()) {
            Err(Error::Row { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected row error, got {other:?}"),
        }
        let csv = "date,symbol,close\n2020-01-01,BTC,abc\n";
        assert!(matches!(
            load_prices_from(csv.as_bytes()),
            Err(Error::Row { line: 2, .. })
        ));
    }

    #[test]
    fn load_prices_partitions_interleaved_symbols() {
        let csv = "date,symbol,close\n2020-01-01,A,1\n2020-01-01,B,10\n2020-01-02,A,2\n2020-01-02,B,20\n";
        let series = load_prices_from(csv.as_bytes()).unwrap();
        assert_eq!(series.len(), 2);
        assert_eq!(series[0].symbol, "A");
        assert_eq!(series[0].observations[1].1, 2.0);
        assert_eq!(series[1].symbol, "B");
        assert_eq!(series[1].observations[1].1, 20.0);
    }

    #[test]
    fn load_prices_requires_columns_and_rows() {
        assert!(matches!(
            load_prices_from("date,close\n2020-01-01,1\n".as_bytes()),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            load_prices_from("date,symbol,close\n".as_bytes()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn log_return_values() {
        let s = PriceSeries::new(
            "X",
            vec![(d("2020-01-01"), 100.0), (d("2020-01-02"), 110.0), (d("2020-01-03"), 55.0)],
        )
        .unwrap();
        let r = log_returns(&s).unwrap();
        assert_eq!(r.points.len(), 2);
        assert!((r.points[0].1 - 1.1_f64.ln()).abs() < 1e-12);
        assert!((r.points[1].1 + 2.0_f64.ln()).abs() < 1e-12);
        // constant prices give zero returns
        let c = PriceSeries::new("C", vec![(d("2020-01-01"), 5.0), (d("2020-01-02"), 5.0)]).unwrap();
        assert_eq!(log_returns(&c).unwrap().points[0].1, 0.0);
        // too short
        let one = PriceSeries::new("O", vec![(d("2020-01-01"), 5.0)]).unwrap();
        assert!(log_returns(&one).is_err());
    }

    #[test]
    fn temporal_split_counts() {
        let points: Vec<(NaiveDate, f64)> = (0..150)
            .map(|i| (d("2023-01-01") + chrono::Days::new(i), i as f64))
            .collect();
        // first 100 points are pre-cutoff
        let cutoff = d("2023-01-01") + chrono::Days::new(100);
        let r = ReturnSeries {
            symbol: "X".into(),
            points,
        };
        let s = temporal_split(&r, cutoff, 0.2).unwrap();
        assert_eq!(s.train.len(), 80);
        assert_eq!(s.val.len(), 20);
        assert_eq!(s.test.len(), 50);
        // chronological order preserved, validation is the tail
        assert!(s.train.last().unwrap().0 < s.val[0].0);
        assert!(s.val.last().unwrap().0 < s.test[0].0);
        // all data after cutoff -> no training data
        assert!(temporal_split(&r, d("2020-01-01"), 0.2).is_err());
        // all data before cutoff -> no test data
        assert!(temporal_split(&r, d("2030-01-01"), 0.2).is_err());
    }

    #[test]
    fn percentile_linear_interpolation() {
        let train: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        assert!((percentile(&train, 1.0) - 1.99).abs() < 1e-12);
        assert!((percentile(&train, 99.0) - 99.01).abs() < 1e-12);
        assert_eq!(percentile(&train, 0.0), 1.0);
        assert_eq!(percentile(&train, 100.0), 100.0);
        assert!((percentile(&[1.0, 2.0, 3.0, 4.0], 75.0) - 3.25).abs() < 1e-12);
    }

    #[test]
    fn normalization_clips_then_standardizes() {
        let train: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let val = vec![-50.0, 50.0];
        let test = vec![1000.0];
        let n = fit_and_apply_norm("X", &train, &val, &test).unwrap();
        assert!((n.stats.lower_clip - 1.99).abs() < 1e-12);
        assert!((n.stats.upper_clip - 99.01).abs() < 1e-12);
        // post-normalization training moments
        let mean: f64 = n.train.iter().sum::<f64>() / n.train.len() as f64;
        let var: f64 =
            n.train.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n.train.len() as f64;
        assert!(mean.abs() < 1e-10);
        assert!((var.sqrt() - 1.0).abs() < 1e-10);
        // out-of-range values were clipped before standardization
        let max_norm = (n.stats.upper_clip - n.stats.mean) / n.stats.std;
        assert!((n.test[0] - max_norm).abs() < 1e-12);
        assert!((n.val[0] - (n.stats.lower_clip - n.stats.mean) / n.stats.std).abs() < 1e-12);
    }

    #[test]
    fn normalization_rejects_degenerate_trains() {
        assert!(fit_and_apply_norm("X", &[1.0; 5], &[], &[]).is_err());
        assert!(matches!(
            fit_and_apply_norm("X", &[2.5; 50], &[], &[]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn no_leakage_from_test_segment() {
        let train: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin()).collect();
        let clean = fit_and_apply_norm("X", &train, &[0.1], &[0.5, -0.5]).unwrap();
        let poisoned = fit_and_apply_norm("X", &train, &[0.1], &[1e6, -1e6]).unwrap();
        assert_eq!(clean.stats, poisoned.stats);
    }

    #[test]
    fn sequence_counts_and_alignment() {
        let seg: Vec<f64> = (0..60).map(|i| i as f64 / 100.0).collect();
        let samples = make_sequences("X", &seg, 50);
        assert_eq!(samples.len(), 10);
        assert_eq!(samples[0].target, 100.0 * seg[50]);
        assert_eq!(samples[0].window.len(), 50);
        // boundary: segment of exactly lookback yields nothing
        assert!(make_sequences("X", &seg[..50], 50).is_empty());
        // reconstruction: first window plus successive targets rebuilds the segment
        let mut rebuilt = samples[0].window.clone();
        for s in &samples {
            rebuilt.push(s.target / 100.0);
        }
        for (a, b) in rebuilt.iter().zip(&seg) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn denormalization_round_trip() {
        let stats = NormStats {
            symbol: "X".into(),
            mean: 0.001,
            std: 0.02,
            lower_clip: -0.05,
            upper_clip: 0.05,
        };
        // normalized value 1.0 -> model target 100 -> back to 0.021
        assert!((denormalize_mean(100.0, &stats) - 0.021).abs() < 1e-12);
        assert_eq!(denormalize_mean(0.0, &stats), stats.mean);
        assert!((denormalize_sigma(2.0, &stats) - 0.0004).abs() < 1e-15);
        // full round trip for in-range values
        for &x in &[-0.04, -0.001, 0.0, 0.02, 0.049] {
            let normalized = (x - stats.mean) / stats.std;
            let model_scale = 100.0 * normalized;
            assert!((denormalize_mean(model_scale, &stats) - x).abs() < 1e-10);
        }
    }

    #[test]
    fn synthetic_gaussian_mean_within_clt_bound() {
        let xs = gen_iid_gaussian_returns(1000, 0);
        let mean: f64 = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 4.0 / (1000.0_f64).sqrt());
        assert_eq!(xs, gen_iid_gaussian_returns(1000, 0));
        assert_ne!(xs, gen_iid_gaussian_returns(1000, 1));
    }

    #[test]
    fn random_walk_prices_positive_and_deterministic() {
        let p = gen_random_walk_prices("S", 300, 42, d("2020-01-01")).unwrap();
        assert_eq!(p.len(), 300);
        assert!(p.observations.iter().all(|(_, c)| *c > 0.0));
        assert_eq!(p.observations[0].1, 100.0);
        let q = gen_random_walk_prices("S", 300, 42, d("2020-01-01")).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn synthetic_dispatch_validates_n() {
        assert!(gen_synthetic(SyntheticKind::IidGaussianReturns, 50, 0).is_err());
        assert!(SyntheticKind::parse("no_such_kind").is_err());
        assert!(matches!(
            gen_synthetic(SyntheticKind::HeteroscedasticCubic, 200, 0),
            Ok(SyntheticData::Cubic(_))
        ));
    }

    #[test]
    fn cubic_ranges() {
        let c = gen_heteroscedastic_cubic(500, 3);
        assert!(c.train.iter().all(|&(x, _)| (-4.0..=4.0).contains(&x)));
        assert!(c.test.iter().all(|&(x, _)| (-6.0..=6.0).contains(&x)));
        assert!(c.test.iter().any(|&(x, _)| x.abs() > 4.0));
    }
}
