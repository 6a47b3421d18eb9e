//! AdamW with gradient clipping, cosine-warmup learning rate, linear
//! evidence annealing, early stopping, and the single-stage training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GraphBuilder, Tensor};
use crate::loss::{build_training_loss, validation_loss, CombinedLossWeights, LossGraph, LossMethod};
use crate::model::Forecaster;
use crate::special::student_t_quantile;
use crate::{data::SequenceDataset, Error, Result};

/// Every training hyperparameter, defaults matching the reference
/// configuration (lr 0.001, batch 128, 50 epochs, patience 10, clip 1.0,
/// decoupled weight decay 0.001, seed 0).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub max_epochs: usize,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_clip")]
    pub clip_max_norm: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    /// Warmup length as a fraction of total optimizer steps.
    #[serde(default = "d_warmup")]
    pub warmup_fraction: f64,
    /// Evidence-annealing length as a fraction of total optimizer steps.
    #[serde(default = "d_anneal")]
    pub anneal_fraction: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_method")]
    pub method: LossMethod,
    #[serde(default)]
    pub loss_weights: CombinedLossWeights,
}

fn d_lr() -> f64 {
    0.001
}
fn d_batch() -> usize {
    128
}
fn d_epochs() -> usize {
    50
}
fn d_patience() -> usize {
    10
}
fn d_clip() -> f64 {
    1.0
}
fn d_wd() -> f64 {
    0.001
}
fn d_warmup() -> f64 {
    0.1
}
fn d_anneal() -> f64 {
    0.15
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_method() -> LossMethod {
    LossMethod::Evidential
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: d_lr(),
            batch_size: d_batch(),
            max_epochs: d_epochs(),
            patience: d_patience(),
            clip_max_norm: d_clip(),
            weight_decay: d_wd(),
            warmup_fraction: d_warmup(),
            anneal_fraction: d_anneal(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            epsilon: d_eps(),
            seed: 0,
            method: d_method(),
            loss_weights: CombinedLossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0
            || self.batch_size == 0
            || self.max_epochs == 0
            || self.clip_max_norm <= 0.0
            || self.weight_decay < 0.0
            || self.epsilon <= 0.0
        {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        if !(0.0 < self.warmup_fraction && self.warmup_fraction <= 1.0)
            || !(0.0 < self.anneal_fraction && self.anneal_fraction <= 1.0)
        {
            return Err(Error::Config(
                "warmup_fraction and anneal_fraction must lie in (0, 1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        self.loss_weights.validate()
    }
}

/// Step-indexed schedule derived from a config and the epoch length.
#[derive(Copy, Clone, Debug)]
pub struct Schedule {
    pub base_lr: f64,
    pub t_warmup: usize,
    pub t_anneal: usize,
    pub t_total: usize,
}

impl Schedule {
    pub fn from_config(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        let t_total = cfg.max_epochs * steps_per_epoch;
        Schedule {
            base_lr: cfg.learning_rate,
            t_warmup: ((cfg.warmup_fraction * t_total as f64).round() as usize).max(1),
            t_anneal: ((cfg.anneal_fraction * t_total as f64).round() as usize).max(1),
            t_total,
        }
    }
}

/// Cosine-annealed learning rate with linear warmup:
/// `base * min(1, t/T_warmup) * (1 + cos(pi t / T_total)) / 2`.
/// Zero at both `t = 0` and `t = T_total`, continuous in between.
pub fn lr_at(t: usize, s: &Schedule) -> f64 {
    debug_assert!(t <= s.t_total);
    let warmup = if s.t_warmup == 0 {
        1.0
    } else {
        (t as f64 / s.t_warmup as f64).min(1.0)
    };
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / s.t_total as f64).cos());
    s.base_lr * warmup * cosine
}

/// Evidence annealing `min(1, t / T_anneal)`: ramps the evidence
/// regularizer from 0 to full strength over early training.
pub fn evidence_scale(t: usize, t_anneal: usize) -> f64 {
    assert!(t_anneal > 0, "T_anneal must be positive");
    (t as f64 / t_anneal as f64).min(1.0)
}

/// Scale all gradients by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`; direction is preserved. Returns the pre-clip global norm.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// First/second moment accumulators for AdamW.
#[derive(Clone, Debug)]
pub struct OptimState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl OptimState {
    pub fn new(params: &[Tensor]) -> Self {
        OptimState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// One bias-corrected AdamW update with decoupled weight decay:
/// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta`.
pub fn adamw_step(
    state: &mut OptimState,
    params: &mut [Tensor],
    grads: &[Tensor],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(
            "optimizer state, parameters and gradients must align".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        let gd = g.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon) + lr * cfg.weight_decay * pd[i];
        }
    }
    Ok(())
}

/// Per-epoch training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub learning_rate: Vec<f64>,
    pub evidence_scale: Vec<f64>,
    /// 0-based epoch with the lowest validation loss.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn epochs_run(&self) -> usize {
        self.val_loss.len()
    }
}

/// Mini-batch training with deterministic shuffling, warmup+cosine learning
/// rate, evidence annealing, gradient clipping, AdamW and early stopping.
/// On return the model holds the parameters of the best validation epoch.
pub fn train<M: Forecaster>(
    model: &mut M,
    train_set: &SequenceDataset,
    val_set: &SequenceDataset,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config(
            "training needs nonempty train and validation splits".into(),
        ));
    }
    if cfg.method != model.head().method {
        return Err(Error::Config(format!(
            "config method {} does not match model head {}",
            cfg.method,
            model.head().method
        )));
    }
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let schedule = Schedule::from_config(cfg, steps_per_epoch);
    let mut params: Vec<Tensor> = model.params().to_vec();
    let mut state = OptimState::new(&params);
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let head = model.head().clone();

    // Full-batch validation tensors (the coverage term is batch-level, so
    // validation is evaluated in one piece).
    let val_indices: Vec<usize> = (0..val_set.len()).collect();
    let val_inputs = val_set.input_tensor(&val_indices)?;
    let val_targets = val_set.target_vec(&val_indices);

    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        learning_rate: Vec::new(),
        evidence_scale: Vec::new(),
        best_epoch: 0,
    };
    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();
    let mut epochs_since_best = 0usize;
    let mut step = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_samples = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let inputs = train_set.input_tensor(batch)?;
            let targets = train_set.target_vec(batch);
            let ev_scale = evidence_scale(step, schedule.t_anneal);
            let dropout_seed: u64 = dropout_rng.random();
            // The coverage term freezes per-sample t critical values from
            // the current parameters before the differentiable pass.
            let coverage_t_crit = if head.method == LossMethod::Evidential
                && cfg.loss_weights.lambda_coverage > 0.0
            {
                Some(current_t_crit(model, &params, &inputs, &head)?)
            } else {
                None
            };
            let mut b = GraphBuilder::new();
            let fwd = model.build_forward(&mut b, &inputs, true, dropout_seed)?;
            let y = b.constant(Tensor::column(targets));
            let loss_cfg = LossGraph {
                head: &head,
                weights: &cfg.loss_weights,
                evidence_scale: ev_scale,
                coverage_t_crit,
            };
            let loss_node = build_training_loss(&mut b, &loss_cfg, fwd.raw, y, &fwd.param_nodes)?;
            let graph = b.finish(loss_node)?;
            let (loss, mut grads) =
                graph
                    .value_and_grad(&params)
                    .map_err(|e| Error::Training {
                        epoch,
                        batch: batch_idx,
                        message: e.to_string(),
                    })?;
            clip_gradients(&mut grads, cfg.clip_max_norm);
            let lr = lr_at(step, &schedule);
            adamw_step(&mut state, &mut params, &grads, lr, cfg)?;
            epoch_loss += loss * batch.len() as f64;
            epoch_samples += batch.len();
            step += 1;
        }

        // Validation: no dropout, full evidence scale, hard coverage.
        let val_raw = raw_outputs(model, &params, &val_inputs)?;
        let val = validation_loss(&head, &cfg.loss_weights, &val_raw, &val_targets, &params)
            .map_err(|e| Error::Training {
                epoch,
                batch: usize::MAX,
                message: format!("validation failed: {e}"),
            })?;
        history.train_loss.push(epoch_loss / epoch_samples as f64);
        history.val_loss.push(val);
        history.learning_rate.push(lr_at(step, &schedule));
        history
            .evidence_scale
            .push(evidence_scale(step, schedule.t_anneal));
        if val < best_val {
            best_val = val;
            best_params = params.clone();
            history.best_epoch = epoch;
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= cfg.patience {
                break;
            }
        }
    }
    model.set_params(best_params)?;
    Ok(history)
}

/// Forward pass to raw head outputs under explicit parameter values.
fn raw_outputs<M: Forecaster>(model: &M, params: &[Tensor], inputs: &Tensor) -> Result<Tensor> {
    let mut b = GraphBuilder::new();
    let fwd = model.build_forward(&mut b, inputs, false, 0)?;
    let raw = fwd.raw;
    let loss = b.mean(raw);
    let graph = b.finish(loss)?;
    Ok(graph.forward(params)?.value(raw).clone())
}

/// Per-sample Student-t critical values (95%) from the current parameters.
fn current_t_crit<M: Forecaster>(
    model: &M,
    params: &[Tensor],
    inputs: &Tensor,
    head: &crate::model::HeadSpec,
) -> Result<Vec<f64>> {
    let raw = raw_outputs(model, params, inputs)?;
    let (n, _) = raw.dims2()?;
    (0..n)
        .map(|i| {
            let p = head.nig_params(raw.row_slice(i))?;
            student_t_quantile(0.975, p.df())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SequenceSample, Split};
    use crate::lstm::{init_params, LstmSpec};
    use crate::model::HeadSpec;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn lr_schedule_worked_points() {
        let s = Schedule {
            base_lr: 0.001,
            t_warmup: 10,
            t_anneal: 15,
            t_total: 100,
        };
        assert_eq!(lr_at(0, &s), 0.0);
        assert!((lr_at(10, &s) - 0.000_975_528_258).abs() < 1e-10);
        assert!(lr_at(100, &s).abs() < 1e-18);
        // continuity through the warmup boundary
        let just_before = lr_at(9, &s);
        let at = lr_at(10, &s);
        assert!((at - just_before) < 0.0002);
    }

    #[test]
    fn evidence_scale_is_linear_then_clamped() {
        assert_eq!(evidence_scale(0, 100), 0.0);
        assert_eq!(evidence_scale(50, 100), 0.5);
        assert_eq!(evidence_scale(100, 100), 1.0);
        assert_eq!(evidence_scale(200, 100), 1.0);
        // nondecreasing
        let mut prev = -1.0;
        for t in 0..250 {
            let v = evidence_scale(t, 100);
            assert!(v >= prev && (0.0..=1.0).contains(&v));
            prev = v;
        }
    }

    #[test]
    fn clipping_scales_only_above_threshold() {
        let mut grads = vec![Tensor::vector(vec![6.0, 8.0])]; // norm 10
        let norm = clip_gradients(&mut grads, 1.0);
        assert_eq!(norm, 10.0);
        assert!((grads[0].data()[0] - 0.6).abs() < 1e-15);
        assert!((grads[0].data()[1] - 0.8).abs() < 1e-15);
        let new_norm: f64 = grads[0].data().iter().map(|v| v * v).sum::<f64>();
        assert!((new_norm.sqrt() - 1.0).abs() < 1e-12);
        // below threshold: untouched
        let mut small = vec![Tensor::vector(vec![0.3, 0.4])];
        clip_gradients(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.3, 0.4]);
        // direction preserved: cosine similarity is 1
        let a = [6.0, 8.0];
        let b = [0.6, 0.8];
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((dot / (na * nb) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_and_decay() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut params = vec![Tensor::scalar(0.0)];
        let grads = vec![Tensor::scalar(1.0)];
        let mut state = OptimState::new(&params);
        adamw_step(&mut state, &mut params, &grads, 0.001, &cfg).unwrap();
        // bias-corrected m_hat = v_hat = 1 => step of -lr/(1+eps)
        assert!((params[0].data()[0] + 0.001).abs() < 1e-9);

        // zero gradient, zero decay: parameters unchanged
        let mut params = vec![Tensor::scalar(0.7)];
        let mut state = OptimState::new(&params);
        adamw_step(&mut state, &mut params, &vec![Tensor::scalar(0.0)], 0.01, &cfg).unwrap();
        assert_eq!(params[0].data()[0], 0.7);

        // zero gradient with decay: pure shrinkage theta (1 - lr wd)
        let cfg_wd = TrainConfig {
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut params = vec![Tensor::scalar(2.0)];
        let mut state = OptimState::new(&params);
        adamw_step(&mut state, &mut params, &vec![Tensor::scalar(0.0)], 0.01, &cfg_wd).unwrap();
        assert!((params[0].data()[0] - 2.0 * (1.0 - 0.01 * 0.1)).abs() < 1e-12);
    }

    #[test]
    fn adamw_matches_reference_adam_and_converges_on_quadratic() {
        // loss = (theta - 3)^2, full-batch deterministic gradients
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let lr = 0.05;
        let mut theta = Tensor::scalar(0.0);
        let mut state = OptimState::new(std::slice::from_ref(&theta));
        // independent reference implementation on plain scalars
        let (mut rm, mut rv, mut rt) = (0.0_f64, 0.0_f64, 0.0_f64);
        for t in 1..=1000 {
            let g = 2.0 * (theta.data()[0] - 3.0);
            let mut params = vec![theta.clone()];
            adamw_step(&mut state, &mut params, &vec![Tensor::scalar(g)], lr, &cfg).unwrap();
            theta = params.pop().unwrap();

            let rg = 2.0 * (rt - 3.0);
            rm = 0.9 * rm + 0.1 * rg;
            rv = 0.999 * rv + 0.001 * rg * rg;
            let mh = rm / (1.0 - 0.9_f64.powi(t));
            let vh = rv / (1.0 - 0.999_f64.powi(t));
            rt -= lr * mh / (vh.sqrt() + 1e-8);
            assert!(
                (theta.data()[0] - rt).abs() < 1e-12,
                "divergence from reference at step {t}"
            );
        }
        assert!(
            (theta.data()[0] - 3.0).abs() < 1e-6,
            "did not converge: {}",
            theta.data()[0]
        );
    }

    fn linear_dataset(n: usize, lookback: usize, seed: u64, split: Split) -> SequenceDataset {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let samples = (0..n)
            .map(|_| {
                let window: Vec<f64> =
                    (0..lookback).map(|_| StandardNormal.sample(&mut rng)).collect();
                let noise: f64 = StandardNormal.sample(&mut rng);
                let target = 0.5 * window[lookback - 1] + 0.01 * noise;
                SequenceSample {
                    symbol: "SYN".into(),
                    window,
                    target,
                }
            })
            .collect();
        SequenceDataset { samples, split }
    }

    #[test]
    fn training_recovers_linear_signal() {
        let lookback = 5;
        let train_set = linear_dataset(512, lookback, 0, Split::Train);
        let val_set = linear_dataset(128, lookback, 1, Split::Val);
        let spec = LstmSpec {
            hidden_dim: 8,
            lookback,
            dropout_rate: 0.0,
            input_dim: 1,
        };
        let head = HeadSpec::for_method(LossMethod::Mse);
        let mut model = init_params(&spec, &head, 0).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            batch_size: 64,
            max_epochs: 50,
            method: LossMethod::Mse,
            ..Default::default()
        };
        let history = train(&mut model, &train_set, &val_set, &cfg).unwrap();
        assert!(history.epochs_run() <= 50);
        let idx: Vec<usize> = (0..val_set.len()).collect();
        let inputs = val_set.input_tensor(&idx).unwrap();
        let raw = model.predict_raw(&inputs).unwrap();
        let mse: f64 = (0..val_set.len())
            .map(|i| {
                let e = raw.at(i, 0) - val_set.samples[i].target;
                e * e
            })
            .sum::<f64>()
            / val_set.len() as f64;
        assert!(mse.sqrt() < 0.05, "val rmse {}", mse.sqrt());
    }

    #[test]
    fn constant_validation_loss_stops_after_patience_plus_one() {
        // all-zero data and zero targets: loss and gradients are zero, so
        // the validation loss never improves after the first epoch
        let mk = |n: usize| SequenceDataset {
            samples: (0..n)
                .map(|_| SequenceSample {
                    symbol: "Z".into(),
                    window: vec![0.0; 4],
                    target: 0.0,
                })
                .collect(),
            split: Split::Train,
        };
        let spec = LstmSpec {
            hidden_dim: 4,
            lookback: 4,
            dropout_rate: 0.0,
            input_dim: 1,
        };
        let head = HeadSpec::for_method(LossMethod::Mse);
        let mut model = init_params(&spec, &head, 0).unwrap();
        let zero: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        model.set_params(zero).unwrap();
        let cfg = TrainConfig {
            max_epochs: 50,
            patience: 10,
            weight_decay: 0.0,
            method: LossMethod::Mse,
            ..Default::default()
        };
        let history = train(&mut model, &mk(32), &mk(8), &cfg).unwrap();
        assert_eq!(history.epochs_run(), 11);
        assert_eq!(history.best_epoch, 0);
    }

    #[test]
    fn training_is_bit_deterministic() {
        let train_set = linear_dataset(96, 4, 7, Split::Train);
        let val_set = linear_dataset(32, 4, 8, Split::Val);
        let spec = LstmSpec {
            hidden_dim: 4,
            lookback: 4,
            dropout_rate: 0.1,
            input_dim: 1,
        };
        let head = HeadSpec::for_method(LossMethod::GaussianNll);
        let cfg = TrainConfig {
            max_epochs: 3,
            batch_size: 32,
            method: LossMethod::GaussianNll,
            ..Default::default()
        };
        let run = || {
            let mut model = init_params(&spec, &head, cfg.seed).unwrap();
            let h = train(&mut model, &train_set, &val_set, &cfg).unwrap();
            (h, model.params().to_vec())
        };
        let (h1, p1) = run();
        let (h2, p2) = run();
        assert_eq!(h1, h2);
        for (a, b) in p1.iter().zip(&p2) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
