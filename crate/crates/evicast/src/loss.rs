//! Training objectives: the evidential NLL with its evidence regularizer and
//! coverage term, plus the baseline zoo (MSE, Huber, Gaussian NLL, Student-t
//! NLL, pinball, Gaussian mixture).
//!
//! Every loss exists twice: a host-side per-sample function (used for
//! validation, reporting and as the reference in tests) and a graph builder
//! that wires the identical arithmetic into an autodiff graph for training.
//! The evidential NLL is pinned to an independent oracle: for every valid
//! parameter set it must equal the negative log density of the Student-t
//! marginal with `df = 2 alpha` and `scale^2 = beta (1 + lam) / (alpha lam)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{GraphBuilder, NodeId, Tensor};
use crate::evidential::{constrain_nig_nodes, Interval, NigNodes, NigParams};
use crate::model::HeadSpec;
use crate::special::{ln_gamma, sigmoid, softplus, student_t_ln_pdf};
use crate::{Error, Result};

/// Floor added to softplus-constrained variances/scales.
pub const VAR_FLOOR: f64 = 1e-6;
/// Student-t head degrees-of-freedom offset (keeps the variance finite).
pub const DF_OFFSET: f64 = 2.0 + 1e-6;
/// Huber transition point.
pub const HUBER_DELTA: f64 = 1.0;
/// Default sigmoid sharpness of the soft coverage indicator on
/// standardized targets.
pub const DEFAULT_COVERAGE_SHARPNESS: f64 = 50.0;

/// The eight training objectives of the controlled study.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMethod {
    Mse,
    Huber,
    GaussianNll,
    StudentTNll,
    Quantile,
    Mixture,
    /// MSE point predictor wrapped by split-conformal calibration.
    ConformalBase,
    Evidential,
}

impl LossMethod {
    pub const ALL: [LossMethod; 8] = [
        LossMethod::Mse,
        LossMethod::Huber,
        LossMethod::GaussianNll,
        LossMethod::StudentTNll,
        LossMethod::Quantile,
        LossMethod::Mixture,
        LossMethod::ConformalBase,
        LossMethod::Evidential,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossMethod::Mse => "mse",
            LossMethod::Huber => "huber",
            LossMethod::GaussianNll => "gaussian_nll",
            LossMethod::StudentTNll => "student_t_nll",
            LossMethod::Quantile => "quantile",
            LossMethod::Mixture => "mixture",
            LossMethod::ConformalBase => "conformal_base",
            LossMethod::Evidential => "evidential",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        LossMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss method `{s}`")))
    }

    /// Methods that report full probabilistic metrics. Point losses (MSE,
    /// Huber) report NA there.
    pub fn is_probabilistic(&self) -> bool {
        !matches!(self, LossMethod::Mse | LossMethod::Huber)
    }

    /// Methods whose predictive distribution yields a standard deviation
    /// (CRPS is NA for the others).
    pub fn has_sigma(&self) -> bool {
        matches!(
            self,
            LossMethod::GaussianNll
                | LossMethod::StudentTNll
                | LossMethod::Mixture
                | LossMethod::ConformalBase
                | LossMethod::Evidential
        )
    }
}

impl std::fmt::Display for LossMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Mixing weights of the combined evidential objective.
#[derive(Copy, Clone, Debug, Serialize, Deserialize)]
pub struct CombinedLossWeights {
    /// Evidence-regularizer weight.
    #[serde(default = "default_lambda_evd")]
    pub lambda_evd: f64,
    /// Coverage-loss weight (0 disables the term).
    #[serde(default)]
    pub lambda_coverage: f64,
    /// In-loss L2 weight. The training loop regularizes through the
    /// optimizer's decoupled decay instead, so run configurations normally
    /// zero this to avoid decaying twice.
    #[serde(default = "default_lambda_wd")]
    pub lambda_wd: f64,
    #[serde(default = "default_target_picp")]
    pub target_picp: f64,
    #[serde(default = "default_sharpness")]
    pub coverage_sharpness: f64,
}

fn default_lambda_evd() -> f64 {
    0.1
}

fn default_lambda_wd() -> f64 {
    0.001
}

fn default_target_picp() -> f64 {
    0.95
}

fn default_sharpness() -> f64 {
    DEFAULT_COVERAGE_SHARPNESS
}

impl Default for CombinedLossWeights {
    fn default() -> Self {
        CombinedLossWeights {
            lambda_evd: default_lambda_evd(),
            lambda_coverage: 0.0,
            lambda_wd: default_lambda_wd(),
            target_picp: default_target_picp(),
            coverage_sharpness: default_sharpness(),
        }
    }
}

impl CombinedLossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_evd < 0.0
            || self.lambda_coverage < 0.0
            || self.lambda_wd < 0.0
            || self.coverage_sharpness <= 0.0
        {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if !(0.0 < self.target_picp && self.target_picp < 1.0) {
            return Err(Error::Config(format!(
                "target_picp must lie in (0, 1), got {}",
                self.target_picp
            )));
        }
        Ok(())
    }
}

/// Batch loss: the scalar mean plus optional per-sample values.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub scalar: f64,
    pub per_sample: Option<Vec<f64>>,
}

impl LossValue {
    pub fn from_per_sample(per_sample: Vec<f64>) -> Self {
        let scalar = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
        LossValue {
            scalar,
            per_sample: Some(per_sample),
        }
    }
}

// ---------------------------------------------------------------------------
// Host-side losses
// ---------------------------------------------------------------------------

/// Evidential negative log likelihood of one target under NIG parameters,
/// with `Omega = 2 beta (1 + lam)`:
///
/// `1/2 ln(pi/lam) - alpha ln(Omega) + (alpha + 1/2) ln((y-mu)^2 lam + Omega)
///  + lnGamma(alpha) - lnGamma(alpha + 1/2)`
pub fn der_nll(p: &NigParams, y: f64) -> Result<f64> {
    p.validate()?;
    let omega = 2.0 * p.beta * (1.0 + p.lam);
    let resid = y - p.mu;
    Ok(0.5 * (std::f64::consts::PI / p.lam).ln() - p.alpha * omega.ln()
        + (p.alpha + 0.5) * (resid * resid * p.lam + omega).ln()
        + ln_gamma(p.alpha)
        - ln_gamma(p.alpha + 0.5))
}

/// Evidence regularizer `|mu - y| (alpha + lam - 2)`. Not clamped: the value
/// can be negative when total evidence is below 2.
pub fn der_reg(p: &NigParams, y: f64) -> Result<f64> {
    p.validate()?;
    Ok((p.mu - y).abs() * (p.alpha + p.lam - 2.0))
}

/// How the coverage penalty counts interval membership.
#[derive(Copy, Clone, Debug, PartialEq)]
pub enum CoverageMode {
    /// Exact indicator; not differentiable, used for validation/reporting.
    Hard,
    /// Product-of-sigmoids surrogate with the given sharpness.
    Soft { sharpness: f64 },
}

/// `|target_picp - PICP|` where PICP is the (hard or soft) fraction of
/// targets inside their intervals.
pub fn coverage_loss(
    intervals: &[Interval],
    targets: &[f64],
    target_picp: f64,
    mode: CoverageMode,
) -> Result<f64> {
    if intervals.is_empty() || intervals.len() != targets.len() {
        return Err(Error::Contract(format!(
            "coverage loss needs equal nonempty lengths, got {} intervals vs {} targets",
            intervals.len(),
            targets.len()
        )));
    }
    let picp = match mode {
        CoverageMode::Hard => {
            intervals
                .iter()
                .zip(targets)
                .filter(|(iv, &y)| iv.contains(y))
                .count() as f64
                / targets.len() as f64
        }
        CoverageMode::Soft { sharpness } => {
            intervals
                .iter()
                .zip(targets)
                .map(|(iv, &y)| {
                    sigmoid(sharpness * (y - iv.lower)) * sigmoid(sharpness * (iv.upper - y))
                })
                .sum::<f64>()
                / targets.len() as f64
        }
    };
    Ok((target_picp - picp).abs())
}

/// The combined evidential objective on a batch:
/// `mean(NLL) + lambda_evd * evidence_scale * mean(reg)
///  + lambda_coverage * coverage(95% intervals) + lambda_wd * ||theta||^2`.
pub fn combined_loss(
    params: &[NigParams],
    targets: &[f64],
    weights: &CombinedLossWeights,
    evidence_scale: f64,
    thetas: &[Tensor],
    coverage_mode: CoverageMode,
) -> Result<f64> {
    weights.validate()?;
    if params.is_empty() || params.len() != targets.len() {
        return Err(Error::Contract(
            "combined loss needs equal nonempty parameter/target lengths".into(),
        ));
    }
    if !(0.0..=1.0).contains(&evidence_scale) {
        return Err(Error::Contract(format!(
            "evidence_scale must lie in [0, 1], got {evidence_scale}"
        )));
    }
    let n = params.len() as f64;
    let mut total = 0.0;
    for (p, &y) in params.iter().zip(targets) {
        total += der_nll(p, y)?;
    }
    let mut loss = total / n;
    if weights.lambda_evd > 0.0 {
        let mut reg = 0.0;
        for (p, &y) in params.iter().zip(targets) {
            reg += der_reg(p, y)?;
        }
        loss += weights.lambda_evd * evidence_scale * reg / n;
    }
    if weights.lambda_coverage > 0.0 {
        let intervals: Vec<Interval> = params
            .iter()
            .map(|p| crate::evidential::predictive_interval(p, 0.95))
            .collect::<Result<_>>()?;
        loss += weights.lambda_coverage
            * coverage_loss(&intervals, targets, weights.target_picp, coverage_mode)?;
    }
    if weights.lambda_wd > 0.0 {
        let sq: f64 = thetas
            .iter()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum();
        loss += weights.lambda_wd * sq;
    }
    Ok(loss)
}

/// Per-sample baseline loss on one raw head row. Errors for the evidential
/// method (whose objective is [`combined_loss`]) and on width mismatches.
pub fn baseline_loss(head: &HeadSpec, raw: &[f64], y: f64) -> Result<f64> {
    if raw.len() != head.output_dim() {
        return Err(Error::Contract(format!(
            "head row width {} does not match method {} (expects {})",
            raw.len(),
            head.method,
            head.output_dim()
        )));
    }
    let loss = match head.method {
        LossMethod::Mse | LossMethod::ConformalBase => {
            let r = head.location(raw[0]) - y;
            r * r
        }
        LossMethod::Huber => {
            let r = (head.location(raw[0]) - y).abs();
            if r <= HUBER_DELTA {
                0.5 * r * r
            } else {
                HUBER_DELTA * (r - 0.5 * HUBER_DELTA)
            }
        }
        LossMethod::GaussianNll => {
            let mu = head.location(raw[0]);
            let var = softplus(raw[1]) + VAR_FLOOR;
            0.5 * (2.0 * std::f64::consts::PI * var).ln() + (y - mu) * (y - mu) / (2.0 * var)
        }
        LossMethod::StudentTNll => {
            let mu = head.location(raw[0]);
            let scale = softplus(raw[1]) + VAR_FLOOR;
            let df = softplus(raw[2]) + DF_OFFSET;
            -student_t_ln_pdf(y, df, mu, scale)
        }
        LossMethod::Quantile => {
            let mut total = 0.0;
            for (k, &tau) in head.quantile_levels.iter().enumerate() {
                let e = y - head.location(raw[k]);
                total += (tau * e).max((tau - 1.0) * e);
            }
            total
        }
        LossMethod::Mixture => {
            let k = head.n_components;
            let max = raw[..k].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = raw[..k].iter().map(|&w| (w - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut density = 0.0;
            for i in 0..k {
                let w = exps[i] / z;
                let mu = head.location(raw[k + i]);
                let sd = softplus(raw[2 * k + i]) + VAR_FLOOR;
                let zi = (y - mu) / sd;
                density += w * (-0.5 * zi * zi).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
            }
            -density.ln()
        }
        LossMethod::Evidential => {
            return Err(Error::Contract(
                "evidential training uses the combined loss, not baseline_loss".into(),
            ))
        }
    };
    Ok(loss)
}

/// Batch mean of [`baseline_loss`] over a raw `[n, d]` output matrix.
pub fn batch_baseline_loss(head: &HeadSpec, raw: &Tensor, targets: &[f64]) -> Result<LossValue> {
    let (n, _) = raw.dims2()?;
    if n != targets.len() || n == 0 {
        return Err(Error::Contract(
            "batch loss needs equal nonempty batch sizes".into(),
        ));
    }
    let per: Vec<f64> = (0..n)
        .map(|i| baseline_loss(head, raw.row_slice(i), targets[i]))
        .collect::<Result<_>>()?;
    Ok(LossValue::from_per_sample(per))
}

/// Validation objective: the same loss family as training, evaluated on raw
/// head outputs with full evidence scale and the hard coverage indicator.
pub fn validation_loss(
    head: &HeadSpec,
    weights: &CombinedLossWeights,
    raw: &Tensor,
    targets: &[f64],
    thetas: &[Tensor],
) -> Result<f64> {
    if head.method == LossMethod::Evidential {
        let (n, _) = raw.dims2()?;
        let params: Vec<NigParams> = (0..n)
            .map(|i| head.nig_params(raw.row_slice(i)))
            .collect::<Result<_>>()?;
        combined_loss(&params, targets, weights, 1.0, thetas, CoverageMode::Hard)
    } else {
        Ok(batch_baseline_loss(head, raw, targets)?.scalar)
    }
}

// ---------------------------------------------------------------------------
// Graph-side losses
// ---------------------------------------------------------------------------

/// Everything needed to wire a training objective over raw head outputs.
pub struct LossGraph<'a> {
    pub head: &'a HeadSpec,
    pub weights: &'a CombinedLossWeights,
    pub evidence_scale: f64,
    /// Per-sample Student-t critical values for the coverage term, computed
    /// from the current parameters and frozen into the graph (the gradient
    /// flows through the interval location and scale, not the quantile).
    pub coverage_t_crit: Option<Vec<f64>>,
}

impl<'a> LossGraph<'a> {
    pub fn new(head: &'a HeadSpec, weights: &'a CombinedLossWeights) -> Self {
        LossGraph {
            head,
            weights,
            evidence_scale: 1.0,
            coverage_t_crit: None,
        }
    }
}

fn location_node(b: &mut GraphBuilder, head: &HeadSpec, raw_col: NodeId) -> Result<NodeId> {
    if head.bounded_mean {
        let t = b.tanh(raw_col);
        b.mul_scalar(t, head.bound_scale)
    } else {
        Ok(raw_col)
    }
}

/// Per-sample evidential NLL nodes, `[n, 1]`.
pub fn build_der_nll(b: &mut GraphBuilder, nig: &NigNodes, y: NodeId) -> Result<NodeId> {
    let lam1 = b.add_scalar(nig.lam, 1.0)?;
    let blam = b.mul(nig.beta, lam1)?;
    let omega = b.mul_scalar(blam, 2.0)?;
    // 1/2 ln(pi/lam) = 1/2 (ln pi - ln lam)
    let ln_lam = b.log(nig.lam);
    let pi = b.scalar(std::f64::consts::PI.ln());
    let diff = b.sub(pi, ln_lam)?;
    let t1 = b.mul_scalar(diff, 0.5)?;
    let ln_omega = b.log(omega);
    let t2 = b.mul(nig.alpha, ln_omega)?;
    let resid = b.sub(y, nig.mu)?;
    let r2 = b.square(resid);
    let r2l = b.mul(r2, nig.lam)?;
    let inner = b.add(r2l, omega)?;
    let ln_inner = b.log(inner);
    let a_half = b.add_scalar(nig.alpha, 0.5)?;
    let t3 = b.mul(a_half, ln_inner)?;
    let lg_a = b.lgamma(nig.alpha);
    let lg_ah = b.lgamma(a_half);
    let t4 = b.sub(lg_a, lg_ah)?;
    let s1 = b.sub(t1, t2)?;
    let s2 = b.add(s1, t3)?;
    b.add(s2, t4)
}

/// Per-sample evidence regularizer nodes `|mu - y| (alpha + lam - 2)`.
pub fn build_der_reg(b: &mut GraphBuilder, nig: &NigNodes, y: NodeId) -> Result<NodeId> {
    let resid = b.sub(nig.mu, y)?;
    let abs_r = b.abs(resid);
    let evidence = b.add(nig.alpha, nig.lam)?;
    let ev2 = b.add_scalar(evidence, -2.0)?;
    b.mul(abs_r, ev2)
}

/// Soft coverage penalty over the 95% predictive intervals, as a scalar
/// node. `t_crit` holds the per-sample critical values as constants.
pub fn build_soft_coverage(
    b: &mut GraphBuilder,
    nig: &NigNodes,
    y: NodeId,
    t_crit: &[f64],
    target_picp: f64,
    sharpness: f64,
) -> Result<NodeId> {
    let lam1 = b.add_scalar(nig.lam, 1.0)?;
    let num = b.mul(nig.beta, lam1)?;
    let den = b.mul(nig.alpha, nig.lam)?;
    let scale2 = b.div(num, den)?;
    let ln_s2 = b.log(scale2);
    let half_ln = b.mul_scalar(ln_s2, 0.5)?;
    let scale = b.exp(half_ln);
    let tc = b.constant(Tensor::column(t_crit.to_vec()));
    let half = b.mul(tc, scale)?;
    let lower = b.sub(nig.mu, half)?;
    let upper = b.add(nig.mu, half)?;
    let d_lo = b.sub(y, lower)?;
    let d_hi = b.sub(upper, y)?;
    let k_lo = b.mul_scalar(d_lo, sharpness)?;
    let k_hi = b.mul_scalar(d_hi, sharpness)?;
    let s_lo = b.sigmoid(k_lo);
    let s_hi = b.sigmoid(k_hi);
    let ind = b.mul(s_lo, s_hi)?;
    let picp = b.mean(ind);
    let target = b.scalar(target_picp);
    let diff = b.sub(target, picp)?;
    Ok(b.abs(diff))
}

/// Per-sample baseline loss nodes `[n, 1]` over raw head outputs `[n, d]`.
pub fn build_baseline_per_sample(
    b: &mut GraphBuilder,
    head: &HeadSpec,
    raw: NodeId,
    y: NodeId,
) -> Result<NodeId> {
    match head.method {
        LossMethod::Mse | LossMethod::ConformalBase => {
            let col = b.slice_cols(raw, 0, 1)?;
            let mu = location_node(b, head, col)?;
            let r = b.sub(mu, y)?;
            Ok(b.square(r))
        }
        LossMethod::Huber => {
            // 1/2 r^2 - 1/2 relu(|r| - delta)^2, relu(x) = (x + |x|)/2
            let col = b.slice_cols(raw, 0, 1)?;
            let mu = location_node(b, head, col)?;
            let r = b.sub(mu, y)?;
            let abs_r = b.abs(r);
            let u = b.add_scalar(abs_r, -HUBER_DELTA)?;
            let abs_u = b.abs(u);
            let sum_u = b.add(u, abs_u)?;
            let relu = b.mul_scalar(sum_u, 0.5)?;
            let r2 = b.square(r);
            let half_r2 = b.mul_scalar(r2, 0.5)?;
            let relu2 = b.square(relu);
            let half_relu2 = b.mul_scalar(relu2, 0.5)?;
            b.sub(half_r2, half_relu2)
        }
        LossMethod::GaussianNll => {
            let mu_col = b.slice_cols(raw, 0, 1)?;
            let mu = location_node(b, head, mu_col)?;
            let var_col = b.slice_cols(raw, 1, 2)?;
            let sp = b.softplus(var_col);
            let var = b.add_scalar(sp, VAR_FLOOR)?;
            let ln_var = b.log(var);
            let t1 = b.mul_scalar(ln_var, 0.5)?;
            let t1c = b.add_scalar(t1, 0.5 * (2.0 * std::f64::consts::PI).ln())?;
            let r = b.sub(y, mu)?;
            let r2 = b.square(r);
            let var2 = b.mul_scalar(var, 2.0)?;
            let t2 = b.div(r2, var2)?;
            b.add(t1c, t2)
        }
        LossMethod::StudentTNll => {
            let mu_col = b.slice_cols(raw, 0, 1)?;
            let mu = location_node(b, head, mu_col)?;
            let s_col = b.slice_cols(raw, 1, 2)?;
            let s_sp = b.softplus(s_col);
            let s = b.add_scalar(s_sp, VAR_FLOOR)?;
            let df_col = b.slice_cols(raw, 2, 3)?;
            let df_sp = b.softplus(df_col);
            let nu = b.add_scalar(df_sp, DF_OFFSET)?;
            let nu1 = b.add_scalar(nu, 1.0)?;
            let half_nu1 = b.mul_scalar(nu1, 0.5)?;
            let half_nu = b.mul_scalar(nu, 0.5)?;
            let lg1 = b.lgamma(half_nu1);
            let lg2 = b.lgamma(half_nu);
            let ln_nu = b.log(nu);
            let ln_nu_pi = b.add_scalar(ln_nu, std::f64::consts::PI.ln())?;
            let t_norm = b.mul_scalar(ln_nu_pi, 0.5)?;
            let ln_s = b.log(s);
            let r = b.sub(y, mu)?;
            let z = b.div(r, s)?;
            let z2 = b.square(z);
            let z2_nu = b.div(z2, nu)?;
            let one_p = b.add_scalar(z2_nu, 1.0)?;
            let ln_1p = b.log(one_p);
            let t_kernel = b.mul(half_nu1, ln_1p)?;
            let a = b.sub(lg2, lg1)?;
            let bb = b.add(a, t_norm)?;
            let cc = b.add(bb, ln_s)?;
            b.add(cc, t_kernel)
        }
        LossMethod::Quantile => {
            // pinball(e) = ((2 tau - 1) e + |e|) / 2 summed over levels
            let mut total: Option<NodeId> = None;
            for (k, &tau) in head.quantile_levels.iter().enumerate() {
                let col = b.slice_cols(raw, k, k + 1)?;
                let q = location_node(b, head, col)?;
                let e = b.sub(y, q)?;
                let scaled = b.mul_scalar(e, 2.0 * tau - 1.0)?;
                let abs_e = b.abs(e);
                let s = b.add(scaled, abs_e)?;
                let term = b.mul_scalar(s, 0.5)?;
                total = Some(match total {
                    None => term,
                    Some(t) => b.add(t, term)?,
                });
            }
            total.ok_or_else(|| Error::Config("quantile head needs at least one level".into()))
        }
        LossMethod::Mixture => {
            let k = head.n_components;
            let w_raw = b.slice_cols(raw, 0, k)?;
            let w = b.softmax(w_raw);
            let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
            let mut density: Option<NodeId> = None;
            for i in 0..k {
                let wi = b.slice_cols(w, i, i + 1)?;
                let mu_col = b.slice_cols(raw, k + i, k + i + 1)?;
                let mu = location_node(b, head, mu_col)?;
                let sd_col = b.slice_cols(raw, 2 * k + i, 2 * k + i + 1)?;
                let sd_sp = b.softplus(sd_col);
                let sd = b.add_scalar(sd_sp, VAR_FLOOR)?;
                let r = b.sub(y, mu)?;
                let z = b.div(r, sd)?;
                let z2 = b.square(z);
                let neg_half = b.mul_scalar(z2, -0.5)?;
                let kernel = b.exp(neg_half);
                let scaled = b.div(kernel, sd)?;
                let normed = b.mul_scalar(scaled, inv_sqrt_2pi)?;
                let contrib = b.mul(wi, normed)?;
                density = Some(match density {
                    None => contrib,
                    Some(d) => b.add(d, contrib)?,
                });
            }
            let d = density.expect("n_components >= 1 validated");
            let ln_d = b.log(d);
            b.neg(ln_d)
        }
        LossMethod::Evidential => Err(Error::Contract(
            "evidential per-sample nodes come from build_der_nll/build_der_reg".into(),
        )),
    }
}

/// Wire the full training objective for any method. `raw` is `[n, d]`,
/// `targets` is `[n, 1]`, `param_nodes` are the model parameters (for the
/// optional in-loss L2 term).
pub fn build_training_loss(
    b: &mut GraphBuilder,
    cfg: &LossGraph<'_>,
    raw: NodeId,
    targets: NodeId,
    param_nodes: &[NodeId],
) -> Result<NodeId> {
    cfg.weights.validate()?;
    if cfg.head.method != LossMethod::Evidential {
        let per = build_baseline_per_sample(b, cfg.head, raw, targets)?;
        return Ok(b.mean(per));
    }
    let nig = constrain_nig_nodes(b, raw, cfg.head.bounded_mean, cfg.head.bound_scale)?;
    let nll = build_der_nll(b, &nig, targets)?;
    let mut loss = b.mean(nll);
    let reg_weight = cfg.weights.lambda_evd * cfg.evidence_scale;
    if cfg.weights.lambda_evd > 0.0 {
        let reg = build_der_reg(b, &nig, targets)?;
        let reg_mean = b.mean(reg);
        let scaled = b.mul_scalar(reg_mean, reg_weight)?;
        loss = b.add(loss, scaled)?;
    }
    if cfg.weights.lambda_coverage > 0.0 {
        let t_crit = cfg.coverage_t_crit.as_deref().ok_or_else(|| {
            Error::Contract("coverage term requested without per-sample t critical values".into())
        })?;
        let cov = build_soft_coverage(
            b,
            &nig,
            targets,
            t_crit,
            cfg.weights.target_picp,
            cfg.weights.coverage_sharpness,
        )?;
        let scaled = b.mul_scalar(cov, cfg.weights.lambda_coverage)?;
        loss = b.add(loss, scaled)?;
    }
    if cfg.weights.lambda_wd > 0.0 {
        let mut sq: Option<NodeId> = None;
        for &p in param_nodes {
            let s = b.square(p);
            let total = b.sum(s);
            sq = Some(match sq {
                None => total,
                Some(acc) => b.add(acc, total)?,
            });
        }
        if let Some(sq) = sq {
            let scaled = b.mul_scalar(sq, cfg.weights.lambda_wd)?;
            loss = b.add(loss, scaled)?;
        }
    }
    Ok(loss)
}
