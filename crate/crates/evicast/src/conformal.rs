//! Split-conformal prediction over a point predictor, plus an online
//! adaptive significance update ("adaptive conformal").

use serde::{Deserialize, Serialize};

use crate::evidential::Interval;
use crate::{Error, Result};

/// Held-out nonconformity scores (absolute residuals `|y - y_hat|`).
#[derive(Clone, Debug)]
pub struct CalibrationSet {
    sorted_scores: Vec<f64>,
}

impl CalibrationSet {
    pub fn from_residuals(residuals: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut sorted_scores: Vec<f64> = residuals.into_iter().map(f64::abs).collect();
        if sorted_scores.is_empty() {
            return Err(Error::Contract("empty calibration set".into()));
        }
        if sorted_scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Contract("non-finite nonconformity score".into()));
        }
        sorted_scores.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        Ok(CalibrationSet { sorted_scores })
    }

    pub fn len(&self) -> usize {
        self.sorted_scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted_scores.is_empty()
    }
}

/// A calibrated interval half-width; `Unbounded` is the small-sample
/// sentinel (the conformal rank exceeds the calibration size).
#[derive(Copy, Clone, Debug, PartialEq)]
pub enum Quantile {
    Finite(f64),
    Unbounded,
}

/// Split-conformal quantile: the `ceil((n+1)(1-alpha))`-th smallest score.
pub fn calibrate(scores: &CalibrationSet, alpha: f64) -> Result<Quantile> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::Contract(format!(
            "significance must lie in (0, 1), got {alpha}"
        )));
    }
    let n = scores.len();
    let rank = ((n as f64 + 1.0) * (1.0 - alpha)).ceil() as usize;
    if rank > n {
        Ok(Quantile::Unbounded)
    } else {
        Ok(Quantile::Finite(scores.sorted_scores[rank - 1]))
    }
}

/// Symmetric interval around a point prediction.
pub fn interval(point: f64, q: Quantile, level: f64) -> Result<Interval> {
    match q {
        Quantile::Finite(width) => {
            if width < 0.0 {
                return Err(Error::Contract(format!(
                    "conformal quantile must be nonnegative, got {width}"
                )));
            }
            Interval::new(point - width, point + width, level)
        }
        Quantile::Unbounded => Ok(Interval::unbounded(level)),
    }
}

/// Online significance state for adaptive conformal: after each outcome the
/// significance moves by `gamma (target_alpha - err)`, clamped away from 0
/// and 1.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveState {
    pub alpha_t: f64,
    pub gamma: f64,
    pub target_alpha: f64,
}

const ALPHA_CLAMP: f64 = 1e-4;

impl AdaptiveState {
    pub fn new(target_alpha: f64, gamma: f64) -> Result<Self> {
        if !(0.0 < target_alpha && target_alpha < 1.0) {
            return Err(Error::Contract(format!(
                "target significance must lie in (0, 1), got {target_alpha}"
            )));
        }
        if gamma < 0.0 {
            return Err(Error::Contract("gamma must be nonnegative".into()));
        }
        Ok(AdaptiveState {
            alpha_t: target_alpha,
            gamma,
            target_alpha,
        })
    }
}

/// `alpha_{t+1} = alpha_t + gamma (target - err_t)`, `err_t = 1` on a miss.
pub fn adaptive_update(state: AdaptiveState, covered: bool) -> AdaptiveState {
    let err = if covered { 0.0 } else { 1.0 };
    let alpha_t = (state.alpha_t + state.gamma * (state.target_alpha - err))
        .clamp(ALPHA_CLAMP, 1.0 - ALPHA_CLAMP);
    AdaptiveState { alpha_t, ..state }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn calibrate_rank_arithmetic() {
        let scores = CalibrationSet::from_residuals((1..=9).map(|i| i as f64)).unwrap();
        // (9+1)(1-0.1) = 9 -> 9th smallest
        assert_eq!(calibrate(&scores, 0.1).unwrap(), Quantile::Finite(9.0));
        let three = CalibrationSet::from_residuals([1.0, 2.0, 3.0]).unwrap();
        // (3+1)(0.5) = 2 -> 2nd smallest
        assert_eq!(calibrate(&three, 0.5).unwrap(), Quantile::Finite(2.0));
        // n = 1, alpha small: rank 2 > 1 -> sentinel
        let one = CalibrationSet::from_residuals([1.0]).unwrap();
        assert_eq!(calibrate(&one, 0.05).unwrap(), Quantile::Unbounded);
    }

    #[test]
    fn quantile_is_monotone_in_alpha() {
        let scores =
            CalibrationSet::from_residuals((0..200).map(|i| (i as f64 * 0.731).sin().abs()))
                .unwrap();
        let mut prev = f64::INFINITY;
        for alpha in [0.05, 0.1, 0.2, 0.4, 0.6, 0.9] {
            let q = match calibrate(&scores, alpha).unwrap() {
                Quantile::Finite(v) => v,
                Quantile::Unbounded => f64::INFINITY,
            };
            assert!(q <= prev, "alpha {alpha}: {q} > {prev}");
            prev = q;
        }
    }

    #[test]
    fn interval_construction() {
        let iv = interval(0.0, Quantile::Finite(2.0), 0.9).unwrap();
        assert_eq!((iv.lower, iv.upper), (-2.0, 2.0));
        assert!(!iv.unbounded);
        // degenerate point interval
        let pt = interval(1.5, Quantile::Finite(0.0), 0.9).unwrap();
        assert_eq!((pt.lower, pt.upper), (1.5, 1.5));
        assert!(pt.contains(1.5));
        // sentinel flags the interval as unbounded
        let un = interval(0.0, Quantile::Unbounded, 0.9).unwrap();
        assert!(un.unbounded);
        assert!(un.contains(1e12));
    }

    #[test]
    fn adaptive_recursion_values() {
        let s = AdaptiveState {
            alpha_t: 0.1,
            gamma: 0.01,
            target_alpha: 0.1,
        };
        let miss = adaptive_update(s, false);
        assert!((miss.alpha_t - 0.091).abs() < 1e-12);
        let hit = adaptive_update(s, true);
        assert!((hit.alpha_t - 0.101).abs() < 1e-12);
        let frozen = adaptive_update(
            AdaptiveState {
                gamma: 0.0,
                ..s
            },
            false,
        );
        assert_eq!(frozen.alpha_t, 0.1);
    }

    #[test]
    fn marginal_coverage_on_gaussian_noise() {
        // split conformal at 90% on iid residuals
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(17);
        let draw = |rng: &mut rand_chacha::ChaCha20Rng| -> f64 { StandardNormal.sample(rng) };
        let cal: Vec<f64> = (0..2000).map(|_| draw(&mut rng)).collect();
        let scores = CalibrationSet::from_residuals(cal).unwrap();
        let q = calibrate(&scores, 0.1).unwrap();
        let covered = (0..5000)
            .filter(|_| {
                let y = draw(&mut rng);
                interval(0.0, q, 0.9).unwrap().contains(y)
            })
            .count();
        let rate = covered as f64 / 5000.0;
        assert!((0.87..=0.93).contains(&rate), "coverage {rate}");
    }

    #[test]
    fn adaptive_tracks_target_on_stationary_stream() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(23);
        let draw = |rng: &mut rand_chacha::ChaCha20Rng| -> f64 { StandardNormal.sample(rng) };
        let cal: Vec<f64> = (0..1000).map(|_| draw(&mut rng)).collect();
        let scores = CalibrationSet::from_residuals(cal).unwrap();
        let mut state = AdaptiveState::new(0.1, 0.01).unwrap();
        let mut errs = Vec::new();
        for _ in 0..10_000 {
            let q = calibrate(&scores, state.alpha_t).unwrap();
            let y = draw(&mut rng);
            let covered = interval(0.0, q, 0.9).unwrap().contains(y);
            errs.push(if covered { 0.0 } else { 1.0 });
            state = adaptive_update(state, covered);
        }
        let tail: f64 = errs[5000..].iter().sum::<f64>() / 5000.0;
        assert!(
            (tail - 0.1).abs() < 0.02,
            "long-run miscoverage {tail} not near 0.1"
        );
    }
}
