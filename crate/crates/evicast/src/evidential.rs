//! Normal-Inverse-Gamma evidential outputs: parameter constraints,
//! epistemic/aleatoric decomposition and Student-t predictive intervals.
//!
//! A NIG head emits four raw values per prediction. [`constrain_nig`] maps
//! them into the valid parameter domain, [`decompose`] splits predictive
//! variance into aleatoric and epistemic parts, and [`predictive_interval`]
//! builds a central interval from the Student-t marginal -- all from one
//! forward pass, no sampling.

use serde::{Deserialize, Serialize};

use crate::autodiff::{GraphBuilder, NodeId};
use crate::special::{sigmoid, softplus, student_t_quantile};
use crate::{Error, Result};

/// Additive offsets that keep constrained parameters strictly inside their
/// domain: `lam > 0`, `alpha > 1`, `beta > 0`.
pub const LAM_OFFSET: f64 = 0.01;
pub const ALPHA_OFFSET: f64 = 1.0;
pub const BETA_OFFSET: f64 = 0.01;

/// The four parameters of a Normal-Inverse-Gamma predictive posterior.
///
/// `lam` is the precision-scaling parameter (often written ν): the Gaussian
/// mean is distributed as N(mu, sigma^2 / lam) while sigma^2 follows an
/// Inverse-Gamma(alpha, beta).
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NigParams {
    pub mu: f64,
    pub lam: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl NigParams {
    pub fn new(mu: f64, lam: f64, alpha: f64, beta: f64) -> Result<Self> {
        let p = NigParams {
            mu,
            lam,
            alpha,
            beta,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.mu.is_finite()
            && self.lam.is_finite()
            && self.alpha.is_finite()
            && self.beta.is_finite()
            && self.lam > 0.0
            && self.alpha > 1.0
            && self.beta > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Degenerate(format!(
                "NIG parameters out of domain: mu={}, lam={}, alpha={}, beta={}",
                self.mu, self.lam, self.alpha, self.beta
            )))
        }
    }

    /// Degrees of freedom of the Student-t marginal.
    pub fn df(&self) -> f64 {
        2.0 * self.alpha
    }

    /// Scale of the Student-t marginal: sqrt(beta (1 + lam) / (alpha lam)).
    pub fn predictive_scale(&self) -> f64 {
        (self.beta * (1.0 + self.lam) / (self.alpha * self.lam)).sqrt()
    }
}

/// Mean plus the variance split of a single NIG prediction.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Uncertainty {
    pub mean: f64,
    /// E[sigma^2] = beta / (alpha - 1): irreducible data noise.
    pub aleatoric: f64,
    /// Var[mu] = beta / ((alpha - 1) lam): model uncertainty.
    pub epistemic: f64,
    /// aleatoric * (1 + 1/lam) = aleatoric + epistemic.
    pub total_variance: f64,
}

/// A central prediction interval.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    /// True for the infinite-width sentinel (conformal small-n edge).
    pub unbounded: bool,
}

impl Interval {
    pub fn new(lower: f64, upper: f64, level: f64) -> Result<Self> {
        if !(0.0 < level && level < 1.0) {
            return Err(Error::Contract(format!(
                "interval level must lie in (0, 1), got {level}"
            )));
        }
        if lower > upper {
            return Err(Error::Contract(format!(
                "interval bounds inverted: [{lower}, {upper}]"
            )));
        }
        Ok(Interval {
            lower,
            upper,
            level,
            unbounded: false,
        })
    }

    /// The whole real line, used when a conformal quantile index overflows.
    pub fn unbounded(level: f64) -> Self {
        Interval {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            level,
            unbounded: true,
        }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    /// Closed-interval membership.
    pub fn contains(&self, y: f64) -> bool {
        self.unbounded || (self.lower <= y && y <= self.upper)
    }
}

/// Map four raw head outputs into valid NIG parameters:
/// `lam = softplus + 0.01`, `alpha = softplus + 1.0`, `beta = softplus + 0.01`,
/// and optionally `mu = bound_scale * tanh(raw)` for bounded predictions.
pub fn constrain_nig(raw: [f64; 4], bounded_mean: bool, bound_scale: f64) -> NigParams {
    let mu = if bounded_mean {
        bound_scale * raw[0].tanh()
    } else {
        raw[0]
    };
    NigParams {
        mu,
        lam: softplus(raw[1]) + LAM_OFFSET,
        alpha: softplus(raw[2]) + ALPHA_OFFSET,
        beta: softplus(raw[3]) + BETA_OFFSET,
    }
}

/// Split the predictive variance of a NIG into its components.
pub fn decompose(p: &NigParams) -> Result<Uncertainty> {
    if p.alpha <= 1.0 + 1e-12 {
        return Err(Error::Degenerate(format!(
            "alpha = {} too close to 1; expected aleatoric variance undefined",
            p.alpha
        )));
    }
    let aleatoric = p.beta / (p.alpha - 1.0);
    let epistemic = aleatoric / p.lam;
    Ok(Uncertainty {
        mean: p.mu,
        aleatoric,
        epistemic,
        total_variance: aleatoric * (1.0 + 1.0 / p.lam),
    })
}

/// Central interval of the Student-t predictive marginal:
/// `mu ± t_crit(df = 2 alpha) * sqrt(beta (1 + lam) / (alpha lam))`.
pub fn predictive_interval(p: &NigParams, level: f64) -> Result<Interval> {
    p.validate()?;
    let t_crit = student_t_quantile(1.0 - (1.0 - level) / 2.0, p.df())?;
    let half = t_crit * p.predictive_scale();
    Interval::new(p.mu - half, p.mu + half, level)
}

/// Per-column graph nodes of constrained NIG parameters, each `[n, 1]`.
#[derive(Copy, Clone, Debug)]
pub struct NigNodes {
    pub mu: NodeId,
    pub lam: NodeId,
    pub alpha: NodeId,
    pub beta: NodeId,
}

/// Graph-side twin of [`constrain_nig`] over a raw `[n, 4]` head output.
pub fn constrain_nig_nodes(
    b: &mut GraphBuilder,
    raw: NodeId,
    bounded_mean: bool,
    bound_scale: f64,
) -> Result<NigNodes> {
    let mu_raw = b.slice_cols(raw, 0, 1)?;
    let mu = if bounded_mean {
        let t = b.tanh(mu_raw);
        b.mul_scalar(t, bound_scale)?
    } else {
        mu_raw
    };
    let lam_raw = b.slice_cols(raw, 1, 2)?;
    let lam_sp = b.softplus(lam_raw);
    let lam = b.add_scalar(lam_sp, LAM_OFFSET)?;
    let alpha_raw = b.slice_cols(raw, 2, 3)?;
    let alpha_sp = b.softplus(alpha_raw);
    let alpha = b.add_scalar(alpha_sp, ALPHA_OFFSET)?;
    let beta_raw = b.slice_cols(raw, 3, 4)?;
    let beta_sp = b.softplus(beta_raw);
    let beta = b.add_scalar(beta_sp, BETA_OFFSET)?;
    Ok(NigNodes {
        mu,
        lam,
        alpha,
        beta,
    })
}

/// Host-side mirror of the per-sample sigmoid-product used by the soft
/// coverage loss; exposed for tests.
pub fn soft_coverage_indicator(interval: &Interval, y: f64, sharpness: f64) -> f64 {
    sigmoid(sharpness * (y - interval.lower)) * sigmoid(sharpness * (interval.upper - y))
}
