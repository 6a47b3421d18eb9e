//! Shared model plumbing: output-head specification, the backbone trait that
//! training is generic over, and prediction summaries per method.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GraphBuilder, NodeId, Tensor};
use crate::evidential::{self, Interval, NigParams};
use crate::loss::LossMethod;
use crate::special::{softplus, student_t_quantile};
use crate::{Error, Result};

/// Output-head configuration. The head width is derived from the loss
/// method: 1 for point losses, 2 for Gaussian NLL, 3 for Student-t NLL, one
/// per quantile level, 3 per mixture component, 4 for the evidential head.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadSpec {
    pub method: LossMethod,
    #[serde(default = "default_quantile_levels")]
    pub quantile_levels: Vec<f64>,
    #[serde(default = "default_n_components")]
    pub n_components: usize,
    /// Constrain location outputs to `bound_scale * tanh(raw)`.
    #[serde(default)]
    pub bounded_mean: bool,
    #[serde(default = "default_bound_scale")]
    pub bound_scale: f64,
}

fn default_quantile_levels() -> Vec<f64> {
    vec![0.05, 0.5, 0.95]
}

fn default_n_components() -> usize {
    3
}

fn default_bound_scale() -> f64 {
    3.0
}

impl HeadSpec {
    /// Defaults per method; bounded means are on for the evidential head
    /// only, matching the reference configuration.
    pub fn for_method(method: LossMethod) -> Self {
        HeadSpec {
            method,
            quantile_levels: default_quantile_levels(),
            n_components: default_n_components(),
            bounded_mean: method == LossMethod::Evidential,
            bound_scale: default_bound_scale(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.method {
            LossMethod::Mse | LossMethod::Huber | LossMethod::ConformalBase => 1,
            LossMethod::GaussianNll => 2,
            LossMethod::StudentTNll => 3,
            LossMethod::Quantile => self.quantile_levels.len(),
            LossMethod::Mixture => 3 * self.n_components,
            LossMethod::Evidential => 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method == LossMethod::Quantile {
            if self.quantile_levels.is_empty() {
                return Err(Error::Config("quantile head needs at least one level".into()));
            }
            if self
                .quantile_levels
                .iter()
                .any(|&t| !(0.0 < t && t < 1.0))
            {
                return Err(Error::Config(format!(
                    "quantile levels must lie in (0, 1): {:?}",
                    self.quantile_levels
                )));
            }
            if self
                .quantile_levels
                .windows(2)
                .any(|w| w[0] >= w[1])
            {
                return Err(Error::Config(
                    "quantile levels must be strictly increasing".into(),
                ));
            }
        }
        if self.method == LossMethod::Mixture && self.n_components == 0 {
            return Err(Error::Config("mixture head needs n_components >= 1".into()));
        }
        if self.bound_scale <= 0.0 {
            return Err(Error::Config("bound_scale must be positive".into()));
        }
        Ok(())
    }

    /// Location transform shared by head consumers.
    pub fn location(&self, raw: f64) -> f64 {
        if self.bounded_mean {
            self.bound_scale * raw.tanh()
        } else {
            raw
        }
    }

    /// Turn one raw head row into a prediction summary (mean, standard
    /// deviation and a central interval at `level` where the method supports
    /// them). Conformal intervals are produced by the conformal module, not
    /// here.
    pub fn summarize(&self, raw: &[f64], level: f64) -> Result<PredictionSummary> {
        if raw.len() != self.output_dim() {
            return Err(Error::Contract(format!(
                "head row has width {}, expected {}",
                raw.len(),
                self.output_dim()
            )));
        }
        let summary = match self.method {
            LossMethod::Mse | LossMethod::Huber | LossMethod::ConformalBase => {
                PredictionSummary::point(self.location(raw[0]))
            }
            LossMethod::GaussianNll => {
                let mean = self.location(raw[0]);
                let sigma = (softplus(raw[1]) + crate::loss::VAR_FLOOR).sqrt();
                let z = crate::special::normal_quantile(1.0 - (1.0 - level) / 2.0)?;
                PredictionSummary {
                    mean,
                    sigma: Some(sigma),
                    interval: Some(Interval::new(mean - z * sigma, mean + z * sigma, level)?),
                    aleatoric: None,
                    epistemic: None,
                }
            }
            LossMethod::StudentTNll => {
                let mean = self.location(raw[0]);
                let scale = softplus(raw[1]) + crate::loss::VAR_FLOOR;
                let df = softplus(raw[2]) + crate::loss::DF_OFFSET;
                // df > 2 by construction, so the variance is finite.
                let sigma = scale * (df / (df - 2.0)).sqrt();
                let t = student_t_quantile(1.0 - (1.0 - level) / 2.0, df)?;
                PredictionSummary {
                    mean,
                    sigma: Some(sigma),
                    interval: Some(Interval::new(
                        mean - t * scale,
                        mean + t * scale,
                        level,
                    )?),
                    aleatoric: None,
                    epistemic: None,
                }
            }
            LossMethod::Quantile => {
                let mid = self
                    .quantile_levels
                    .iter()
                    .enumerate()
                    .min_by(|a, b| {
                        (a.1 - 0.5).abs().partial_cmp(&(b.1 - 0.5).abs()).unwrap()
                    })
                    .map(|(i, _)| i)
                    .expect("validated non-empty");
                let mean = self.location(raw[mid]);
                let lo = self.location(raw[0]);
                let hi = self.location(raw[self.quantile_levels.len() - 1]);
                let interval = if self.quantile_levels.len() >= 2 && lo <= hi {
                    Some(Interval::new(lo, hi, level)?)
                } else {
                    None
                };
                PredictionSummary {
                    mean,
                    sigma: None,
                    interval,
                    aleatoric: None,
                    epistemic: None,
                }
            }
            LossMethod::Mixture => {
                let k = self.n_components;
                let max = raw[..k].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = raw[..k].iter().map(|&w| (w - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut mean = 0.0;
                let mut second = 0.0;
                for i in 0..k {
                    let w = exps[i] / z;
                    let mu = self.location(raw[k + i]);
                    let sd = softplus(raw[2 * k + i]) + crate::loss::VAR_FLOOR;
                    mean += w * mu;
                    second += w * (sd * sd + mu * mu);
                }
                let var = (second - mean * mean).max(0.0);
                let sigma = var.sqrt();
                let zc = crate::special::normal_quantile(1.0 - (1.0 - level) / 2.0)?;
                PredictionSummary {
                    mean,
                    sigma: Some(sigma),
                    interval: Some(Interval::new(
                        mean - zc * sigma,
                        mean + zc * sigma,
                        level,
                    )?),
                    aleatoric: None,
                    epistemic: None,
                }
            }
            LossMethod::Evidential => {
                let p = evidential::constrain_nig(
                    [raw[0], raw[1], raw[2], raw[3]],
                    self.bounded_mean,
                    self.bound_scale,
                );
                let u = evidential::decompose(&p)?;
                let interval = evidential::predictive_interval(&p, level)?;
                PredictionSummary {
                    mean: p.mu,
                    sigma: Some(u.total_variance.sqrt()),
                    interval: Some(interval),
                    aleatoric: Some(u.aleatoric),
                    epistemic: Some(u.epistemic),
                }
            }
        };
        Ok(summary)
    }

    /// Constrained NIG parameters for one evidential head row.
    pub fn nig_params(&self, raw: &[f64]) -> Result<NigParams> {
        if self.method != LossMethod::Evidential || raw.len() != 4 {
            return Err(Error::Contract(
                "nig_params requires an evidential head row of width 4".into(),
            ));
        }
        Ok(evidential::constrain_nig(
            [raw[0], raw[1], raw[2], raw[3]],
            self.bounded_mean,
            self.bound_scale,
        ))
    }
}

/// Distilled per-sample prediction: point forecast plus whatever
/// distributional structure the method provides.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSummary {
    pub mean: f64,
    pub sigma: Option<f64>,
    pub interval: Option<Interval>,
    pub aleatoric: Option<f64>,
    pub epistemic: Option<f64>,
}

impl PredictionSummary {
    fn point(mean: f64) -> Self {
        PredictionSummary {
            mean,
            sigma: None,
            interval: None,
            aleatoric: None,
            epistemic: None,
        }
    }
}

/// Result of wiring a backbone + head into a graph.
pub struct ForwardPass {
    /// Raw (unconstrained) head outputs, `[batch, output_dim]`.
    pub raw: NodeId,
    /// Parameter leaves in declaration order (the model's own order).
    pub param_nodes: Vec<NodeId>,
}

/// A trainable sequence model: owns named parameter tensors and knows how to
/// wire its forward pass into a graph. Implementations are pure given
/// parameters; separate instances train in parallel with no shared state.
pub trait Forecaster {
    fn head(&self) -> &HeadSpec;
    fn params(&self) -> &[Tensor];
    fn set_params(&mut self, params: Vec<Tensor>) -> Result<()>;
    fn param_names(&self) -> Vec<String>;
    /// Wire the forward pass for a `[batch, lookback]` input into `b`.
    fn build_forward(
        &self,
        b: &mut GraphBuilder,
        inputs: &Tensor,
        training: bool,
        dropout_seed: u64,
    ) -> Result<ForwardPass>;

    /// Raw head outputs for a batch, no dropout.
    fn predict_raw(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut b = GraphBuilder::new();
        let fwd = self.build_forward(&mut b, inputs, false, 0)?;
        let raw = fwd.raw;
        let loss = b.mean(raw);
        let graph = b.finish(loss)?;
        let eval = graph.forward(self.params())?;
        Ok(eval.value(raw).clone())
    }
}

/// Uniform draw in `[-bound, bound]` for every element; the shared weight
/// initializer.
pub fn uniform_tensor(rng: &mut ChaCha20Rng, shape: &[usize], bound: f64) -> Tensor {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_widths_follow_method() {
        assert_eq!(HeadSpec::for_method(LossMethod::Mse).output_dim(), 1);
        assert_eq!(HeadSpec::for_method(LossMethod::Huber).output_dim(), 1);
        assert_eq!(HeadSpec::for_method(LossMethod::ConformalBase).output_dim(), 1);
        assert_eq!(HeadSpec::for_method(LossMethod::GaussianNll).output_dim(), 2);
        assert_eq!(HeadSpec::for_method(LossMethod::StudentTNll).output_dim(), 3);
        assert_eq!(HeadSpec::for_method(LossMethod::Quantile).output_dim(), 3);
        assert_eq!(HeadSpec::for_method(LossMethod::Mixture).output_dim(), 9);
        assert_eq!(HeadSpec::for_method(LossMethod::Evidential).output_dim(), 4);
    }

    #[test]
    fn bounded_mean_defaults_to_evidential_only() {
        assert!(HeadSpec::for_method(LossMethod::Evidential).bounded_mean);
        assert!(!HeadSpec::for_method(LossMethod::Mse).bounded_mean);
    }

    #[test]
    fn quantile_levels_validated() {
        let mut h = HeadSpec::for_method(LossMethod::Quantile);
        h.quantile_levels = vec![0.9, 0.1];
        assert!(h.validate().is_err());
        h.quantile_levels = vec![0.1, 0.9];
        assert!(h.validate().is_ok());
    }

    #[test]
    fn gaussian_summary_interval_is_symmetric() {
        let h = HeadSpec::for_method(LossMethod::GaussianNll);
        let s = h.summarize(&[0.2, 0.0], 0.95).unwrap();
        let iv = s.interval.unwrap();
        assert!(((s.mean - iv.lower) - (iv.upper - s.mean)).abs() < 1e-12);
        let sigma = s.sigma.unwrap();
        assert!((iv.upper - (s.mean + 1.959_963_984 * sigma)).abs() < 1e-6);
    }

    #[test]
    fn mixture_summary_single_component_matches_gaussian_moments() {
        let mut h = HeadSpec::for_method(LossMethod::Mixture);
        h.n_components = 1;
        // weight raw irrelevant for K=1; mean 0.7, sd softplus(0)+floor
        let s = h.summarize(&[3.0, 0.7, 0.0], 0.95).unwrap();
        assert!((s.mean - 0.7).abs() < 1e-12);
        let expected_sd = softplus(0.0) + crate::loss::VAR_FLOOR;
        assert!((s.sigma.unwrap() - expected_sd).abs() < 1e-12);
    }
}
