//! Patch-based transformer backbone: frequency-keyed patch sizing, linear
//! patch embedding with sinusoidal positional encoding, scaled dot-product
//! attention and a SwiGLU feed-forward block. Exercised at toy scale.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GraphBuilder, NodeId, Tensor};
use crate::model::{uniform_tensor, Forecaster, ForwardPass, HeadSpec};
use crate::{Error, Result};

/// Sampling frequency of the input series.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frequency {
    Yearly,
    Quarterly,
    Monthly,
    Weekly,
    Daily,
    Hourly,
    Minute,
    Second,
}

impl Frequency {
    pub fn name(&self) -> &'static str {
        match self {
            Frequency::Yearly => "yearly",
            Frequency::Quarterly => "quarterly",
            Frequency::Monthly => "monthly",
            Frequency::Weekly => "weekly",
            Frequency::Daily => "daily",
            Frequency::Hourly => "hourly",
            Frequency::Minute => "minute",
            Frequency::Second => "second",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        [
            Frequency::Yearly,
            Frequency::Quarterly,
            Frequency::Monthly,
            Frequency::Weekly,
            Frequency::Daily,
            Frequency::Hourly,
            Frequency::Minute,
            Frequency::Second,
        ]
        .into_iter()
        .find(|f| f.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown frequency `{s}`")))
    }
}

/// Candidate patch sizes per frequency.
pub fn select_patch_sizes(freq: Frequency) -> &'static [usize] {
    match freq {
        Frequency::Yearly | Frequency::Quarterly => &[8],
        Frequency::Monthly => &[8, 16, 32],
        Frequency::Weekly | Frequency::Daily => &[16, 32],
        Frequency::Hourly => &[32, 64],
        Frequency::Minute => &[32, 64, 128],
        Frequency::Second => &[64, 128],
    }
}

/// Pick one patch size for a series of length `t`: the largest candidate
/// that divides `t` exactly, falling back to the largest candidate (the
/// series is then left-padded).
pub fn choose_patch_size(freq: Frequency, t: usize) -> usize {
    let sizes = select_patch_sizes(freq);
    sizes
        .iter()
        .rev()
        .find(|&&p| t % p == 0)
        .or_else(|| sizes.last())
        .copied()
        .expect("patch size table is never empty")
}

/// Sinusoidal positional encoding:
/// `sin(t / 10000^(d/d_model))` for even `d`, `cos` for odd `d`.
pub fn positional_encoding(t: usize, d: usize, d_model: usize) -> f64 {
    debug_assert!(d < d_model);
    let angle = t as f64 / 10_000_f64.powf(d as f64 / d_model as f64);
    if d % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// `[tokens, d_model]` table of positional encodings.
pub fn pe_matrix(tokens: usize, d_model: usize) -> Tensor {
    let mut data = Vec::with_capacity(tokens * d_model);
    for t in 0..tokens {
        for d in 0..d_model {
            data.push(positional_encoding(t, d, d_model));
        }
    }
    Tensor::matrix(tokens, d_model, data).expect("pe shape")
}

/// Left-pad with the first value until the length is a multiple of `patch`.
pub fn pad_series(series: &[f64], patch: usize) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::Contract("cannot patch an empty series".into()));
    }
    let rem = series.len() % patch;
    if rem == 0 {
        return Ok(series.to_vec());
    }
    let pad = patch - rem;
    let mut out = vec![series[0]; pad];
    out.extend_from_slice(series);
    Ok(out)
}

/// Non-overlapping patches as a `[tokens, patch]` matrix (padding first).
pub fn patch_matrix(series: &[f64], patch: usize) -> Result<Tensor> {
    let padded = pad_series(series, patch)?;
    let tokens = padded.len() / patch;
    Tensor::matrix(tokens, patch, padded)
}

/// Patch embedding: linear projection of patches plus positional encoding.
/// Returns a `[tokens, d_model]` node.
pub fn patch_embed(
    b: &mut GraphBuilder,
    series: &[f64],
    patch: usize,
    w: NodeId,
    bias: NodeId,
    d_model: usize,
) -> Result<NodeId> {
    let patches = patch_matrix(series, patch)?;
    let tokens = patches.shape()[0];
    let x = b.constant(patches);
    let proj = b.linear(x, w, bias)?;
    let pe = b.constant(pe_matrix(tokens, d_model));
    b.add(proj, pe)
}

/// Scaled dot-product attention `softmax(Q K^T / sqrt(d_k)) V` with row-wise
/// max-subtracted softmax.
pub fn attention(b: &mut GraphBuilder, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
    let d_k = match b.shape(q) {
        [_, d] => *d,
        other => {
            return Err(Error::Contract(format!(
                "attention expects [n, d_k] queries, got {other:?}"
            )))
        }
    };
    let scores = b.matmul_nt(q, k)?;
    let scaled = b.mul_scalar(scores, 1.0 / (d_k as f64).sqrt())?;
    let weights = b.softmax(scaled);
    b.matmul(weights, v)
}

/// Host convenience around [`attention`] for plain tensors.
pub fn attention_values(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut b = GraphBuilder::new();
    let qn = b.constant(q.clone());
    let kn = b.constant(k.clone());
    let vn = b.constant(v.clone());
    let out = attention(&mut b, qn, kn, vn)?;
    let loss = b.mean(out);
    let g = b.finish(loss)?;
    Ok(g.forward(&[])?.value(out).clone())
}

/// Gated feed-forward `W2 (swish(W1 x + b1) ⊙ (W3 x + b3))`,
/// `swish(z) = z sigmoid(z)`.
pub fn swiglu_ffn(
    b: &mut GraphBuilder,
    x: NodeId,
    w1: NodeId,
    b1: NodeId,
    w3: NodeId,
    b3: NodeId,
    w2: NodeId,
) -> Result<NodeId> {
    let z1 = b.linear(x, w1, b1)?;
    let sig = b.sigmoid(z1);
    let swish = b.mul(z1, sig)?;
    let gate = b.linear(x, w3, b3)?;
    let h = b.mul(swish, gate)?;
    b.matmul(h, w2)
}

/// Parameter-light layer norm over the last axis (learned gain and shift).
fn layer_norm(
    b: &mut GraphBuilder,
    x: NodeId,
    gain: NodeId,
    shift: NodeId,
) -> Result<NodeId> {
    let d = match b.shape(x) {
        [_, d] => *d,
        other => {
            return Err(Error::Contract(format!(
                "layer norm expects [n, d], got {other:?}"
            )))
        }
    };
    let ones = b.constant(Tensor::filled(&[d, 1], 1.0 / d as f64));
    let mean = b.matmul(x, ones)?;
    let centered = b.sub(x, mean)?;
    let sq = b.square(centered);
    let var = b.matmul(sq, ones)?;
    let var_eps = b.add_scalar(var, 1e-5)?;
    let ln_var = b.log(var_eps);
    let neg_half = b.mul_scalar(ln_var, -0.5)?;
    let inv_std = b.exp(neg_half);
    let normed = b.mul(centered, inv_std)?;
    let scaled = b.mul(normed, gain)?;
    b.add(scaled, shift)
}

/// Transformer dimensions. `patch_size` of 0 means "choose from the
/// frequency table at run time".
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatchformerSpec {
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_n_heads")]
    pub n_heads: usize,
    #[serde(default = "default_n_layers")]
    pub n_layers: usize,
    #[serde(default = "default_ffn_hidden")]
    pub ffn_hidden: usize,
    #[serde(default)]
    pub patch_size: usize,
}

fn default_d_model() -> usize {
    16
}

fn default_n_heads() -> usize {
    2
}

fn default_n_layers() -> usize {
    2
}

fn default_ffn_hidden() -> usize {
    32
}

impl Default for PatchformerSpec {
    fn default() -> Self {
        PatchformerSpec {
            d_model: default_d_model(),
            n_heads: default_n_heads(),
            n_layers: default_n_layers(),
            ffn_hidden: default_ffn_hidden(),
            patch_size: 0,
        }
    }
}

impl PatchformerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be a positive even integer".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads ({}) must divide d_model ({})",
                self.n_heads, self.d_model
            )));
        }
        if self.n_layers == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("n_layers and ffn_hidden must be >= 1".into()));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Patch transformer with a per-method head. Tokens run through pre-norm
/// blocks (attention, then SwiGLU, both with residuals), are mean-pooled and
/// mapped to the head width.
#[derive(Clone, Debug)]
pub struct PatchformerModel {
    pub spec: PatchformerSpec,
    pub head: HeadSpec,
    /// Resolved patch size for the model's input length.
    pub patch: usize,
    params: Vec<Tensor>,
    names: Vec<String>,
}

/// Initialize a patch transformer for series of length `lookback` at the
/// given frequency; deterministic per seed.
pub fn init_patchformer(
    spec: &PatchformerSpec,
    head: &HeadSpec,
    freq: Frequency,
    lookback: usize,
    seed: u64,
) -> Result<PatchformerModel> {
    spec.validate()?;
    head.validate()?;
    if lookback == 0 {
        return Err(Error::Config("lookback must be >= 1".into()));
    }
    let patch = if spec.patch_size > 0 {
        spec.patch_size
    } else {
        choose_patch_size(freq, lookback)
    };
    let d = spec.d_model;
    let f = spec.ffn_hidden;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut names = Vec::new();
    let push = |name: String, t: Tensor, params: &mut Vec<Tensor>, names: &mut Vec<String>| {
        names.push(name);
        params.push(t);
    };
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    push(
        "embed.w".into(),
        uniform_tensor(&mut rng, &[patch, d], fan(patch)),
        &mut params,
        &mut names,
    );
    push("embed.b".into(), Tensor::zeros(&[1, d]), &mut params, &mut names);
    for l in 0..spec.n_layers {
        push(format!("layer{l}.ln1.g"), Tensor::filled(&[1, d], 1.0), &mut params, &mut names);
        push(format!("layer{l}.ln1.b"), Tensor::zeros(&[1, d]), &mut params, &mut names);
        for proj in ["wq", "wk", "wv", "wo"] {
            push(
                format!("layer{l}.{proj}"),
                uniform_tensor(&mut rng, &[d, d], fan(d)),
                &mut params,
                &mut names,
            );
        }
        push(format!("layer{l}.ln2.g"), Tensor::filled(&[1, d], 1.0), &mut params, &mut names);
        push(format!("layer{l}.ln2.b"), Tensor::zeros(&[1, d]), &mut params, &mut names);
        push(
            format!("layer{l}.ffn.w1"),
            uniform_tensor(&mut rng, &[d, f], fan(d)),
            &mut params,
            &mut names,
        );
        push(format!("layer{l}.ffn.b1"), Tensor::zeros(&[1, f]), &mut params, &mut names);
        push(
            format!("layer{l}.ffn.w3"),
            uniform_tensor(&mut rng, &[d, f], fan(d)),
            &mut params,
            &mut names,
        );
        push(format!("layer{l}.ffn.b3"), Tensor::zeros(&[1, f]), &mut params, &mut names);
        push(
            format!("layer{l}.ffn.w2"),
            uniform_tensor(&mut rng, &[f, d], fan(f)),
            &mut params,
            &mut names,
        );
    }
    push(
        "head.w".into(),
        uniform_tensor(&mut rng, &[d, head.output_dim()], fan(d)),
        &mut params,
        &mut names,
    );
    push(
        "head.b".into(),
        Tensor::zeros(&[1, head.output_dim()]),
        &mut params,
        &mut names,
    );
    Ok(PatchformerModel {
        spec: spec.clone(),
        head: head.clone(),
        patch,
        params,
        names,
    })
}

impl PatchformerModel {
    /// One pre-norm block: attention and SwiGLU, each behind a residual.
    fn build_block(
        &self,
        b: &mut GraphBuilder,
        x: NodeId,
        layer_nodes: &[NodeId],
    ) -> Result<NodeId> {
        let [ln1g, ln1b, wq, wk, wv, wo, ln2g, ln2b, w1, b1, w3, b3, w2] = layer_nodes else {
            return Err(Error::Contract("layer node bundle has wrong arity".into()));
        };
        let d_k = self.spec.d_k();
        let normed = layer_norm(b, x, *ln1g, *ln1b)?;
        let q = b.matmul(normed, *wq)?;
        let k = b.matmul(normed, *wk)?;
        let v = b.matmul(normed, *wv)?;
        let mut heads = Vec::with_capacity(self.spec.n_heads);
        for head_idx in 0..self.spec.n_heads {
            let lo = head_idx * d_k;
            let hi = lo + d_k;
            let qh = b.slice_cols(q, lo, hi)?;
            let kh = b.slice_cols(k, lo, hi)?;
            let vh = b.slice_cols(v, lo, hi)?;
            heads.push(attention(b, qh, kh, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            b.concat_cols(&heads)?
        };
        let attn_out = b.matmul(merged, *wo)?;
        let x1 = b.add(x, attn_out)?;
        let normed2 = layer_norm(b, x1, *ln2g, *ln2b)?;
        let ffn_out = swiglu_ffn(b, normed2, *w1, *b1, *w3, *b3, *w2)?;
        b.add(x1, ffn_out)
    }
}

impl Forecaster for PatchformerModel {
    fn head(&self) -> &HeadSpec {
        &self.head
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (old, new) in self.params.iter().zip(&params) {
            if old.shape() != new.shape() {
                return Err(Error::Contract(format!(
                    "parameter shape changed: {:?} -> {:?}",
                    old.shape(),
                    new.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    fn param_names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn build_forward(
        &self,
        b: &mut GraphBuilder,
        inputs: &Tensor,
        _training: bool,
        _dropout_seed: u64,
    ) -> Result<ForwardPass> {
        let (n, _len) = inputs.dims2()?;
        if n == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        // Declare every parameter once, in the model's order.
        let param_nodes: Vec<NodeId> = self
            .names
            .iter()
            .zip(&self.params)
            .map(|(name, t)| b.param(name.clone(), t.shape()))
            .collect();
        let embed_w = param_nodes[0];
        let embed_b = param_nodes[1];
        let per_layer = 13;
        let mut pooled_rows = Vec::with_capacity(n);
        for i in 0..n {
            let series = inputs.row_slice(i);
            let mut x = patch_embed(b, series, self.patch, embed_w, embed_b, self.spec.d_model)?;
            for l in 0..self.spec.n_layers {
                let lo = 2 + l * per_layer;
                x = self.build_block(b, x, &param_nodes[lo..lo + per_layer])?;
            }
            let tokens = b.shape(x)[0];
            let pool = b.constant(Tensor::matrix(
                1,
                tokens,
                vec![1.0 / tokens as f64; tokens],
            )?);
            pooled_rows.push(b.matmul(pool, x)?);
        }
        let pooled = if pooled_rows.len() == 1 {
            pooled_rows[0]
        } else {
            b.concat_rows(&pooled_rows)?
        };
        let head_w = param_nodes[param_nodes.len() - 2];
        let head_b = param_nodes[param_nodes.len() - 1];
        let raw = b.linear(pooled, head_w, head_b)?;
        Ok(ForwardPass { raw, param_nodes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::loss::LossMethod;

    #[test]
    fn patch_size_table() {
        assert_eq!(select_patch_sizes(Frequency::Yearly), &[8]);
        assert_eq!(select_patch_sizes(Frequency::Quarterly), &[8]);
        assert_eq!(select_patch_sizes(Frequency::Monthly), &[8, 16, 32]);
        assert_eq!(select_patch_sizes(Frequency::Weekly), &[16, 32]);
        assert_eq!(select_patch_sizes(Frequency::Daily), &[16, 32]);
        assert_eq!(select_patch_sizes(Frequency::Hourly), &[32, 64]);
        assert_eq!(select_patch_sizes(Frequency::Minute), &[32, 64, 128]);
        assert_eq!(select_patch_sizes(Frequency::Second), &[64, 128]);
    }

    #[test]
    fn patch_choice_prefers_exact_division() {
        assert_eq!(choose_patch_size(Frequency::Monthly, 64), 32);
        assert_eq!(choose_patch_size(Frequency::Monthly, 48), 16);
        // nothing divides 50 -> largest with padding
        assert_eq!(choose_patch_size(Frequency::Daily, 50), 32);
    }

    #[test]
    fn positional_encoding_values() {
        assert_eq!(positional_encoding(0, 0, 4), 0.0);
        assert_eq!(positional_encoding(0, 1, 4), 1.0);
        assert!((positional_encoding(1, 0, 4) - 1.0_f64.sin()).abs() < 1e-12);
        for t in 0..40 {
            for d in 0..8 {
                let v = positional_encoding(t, d, 8);
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn patching_and_padding() {
        let series: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let m = patch_matrix(&series, 16).unwrap();
        assert_eq!(m.shape(), &[4, 16]);
        // 50 -> padded to 64 with the first value
        let series: Vec<f64> = (1..=50).map(|i| i as f64).collect();
        let m = patch_matrix(&series, 16).unwrap();
        assert_eq!(m.shape(), &[4, 16]);
        assert_eq!(m.data()[..14], vec![1.0; 14][..]);
        assert_eq!(m.at(0, 14), 1.0);
        assert!(patch_matrix(&[], 8).is_err());
    }

    #[test]
    fn zero_projection_leaves_pure_positional_encoding() {
        let mut b = GraphBuilder::new();
        let w = b.constant(Tensor::zeros(&[8, 4]));
        let bias = b.constant(Tensor::zeros(&[1, 4]));
        let tokens = patch_embed(&mut b, &[0.0; 16], 8, w, bias, 4).unwrap();
        let loss = b.mean(tokens);
        let g = b.finish(loss).unwrap();
        let eval = g.forward(&[]).unwrap();
        let out = eval.value(tokens);
        assert_eq!(out.shape(), &[2, 4]);
        let expected = pe_matrix(2, 4);
        assert_eq!(out.data(), expected.data());
    }

    #[test]
    fn attention_single_token_is_identity() {
        let one = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let out = attention_values(&one, &one, &one).unwrap();
        assert_eq!(out.data(), &[1.0]);
    }

    #[test]
    fn attention_uniform_weights_average_values() {
        let q = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let k = Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap();
        let v = Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap();
        let out = attention_values(&q, &k, &v).unwrap();
        assert!((out.data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn attention_output_is_convex_combination_of_values() {
        use rand::Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for _ in 0..20 {
            let n = 5;
            let d = 3;
            let rand_t = |rng: &mut ChaCha20Rng| {
                Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect())
                    .unwrap()
            };
            let q = rand_t(&mut rng);
            let k = rand_t(&mut rng);
            let v = rand_t(&mut rng);
            let out = attention_values(&q, &k, &v).unwrap();
            for c in 0..d {
                let col: Vec<f64> = (0..n).map(|r| v.at(r, c)).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for r in 0..n {
                    let o = out.at(r, c);
                    assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn swish_gate_unit_value() {
        // swish(1) = sigmoid(1)
        let mut b = GraphBuilder::new();
        let x = b.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let w1 = b.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let b1 = b.constant(Tensor::zeros(&[1, 1]));
        let w3 = b.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let b3 = b.constant(Tensor::zeros(&[1, 1]));
        let w2 = b.constant(Tensor::matrix(1, 1, vec![1.0]).unwrap());
        let out = swiglu_ffn(&mut b, x, w1, b1, w3, b3, w2).unwrap();
        let loss = b.mean(out);
        let g = b.finish(loss).unwrap();
        // swish(1) * gate(1) = 0.731059 * 1
        assert!((g.forward(&[]).unwrap().loss() - 0.731_058_578_630_004).abs() < 1e-9);
    }

    #[test]
    fn swiglu_zero_input_zero_biases_gives_zero() {
        let mut b = GraphBuilder::new();
        let x = b.constant(Tensor::zeros(&[2, 3]));
        let w1 = b.constant(Tensor::filled(&[3, 5], 0.7));
        let b1 = b.constant(Tensor::zeros(&[1, 5]));
        let w3 = b.constant(Tensor::filled(&[3, 5], -0.4));
        let b3 = b.constant(Tensor::zeros(&[1, 5]));
        let w2 = b.constant(Tensor::filled(&[5, 3], 1.3));
        let out = swiglu_ffn(&mut b, x, w1, b1, w3, b3, w2).unwrap();
        let loss = b.sum(out);
        let g = b.finish(loss).unwrap();
        assert_eq!(g.forward(&[]).unwrap().loss(), 0.0);
    }

    #[test]
    fn full_block_gradient_check() {
        let spec = PatchformerSpec {
            d_model: 4,
            n_heads: 2,
            n_layers: 1,
            ffn_hidden: 6,
            patch_size: 4,
        };
        let head = HeadSpec::for_method(LossMethod::Mse);
        let model =
            init_patchformer(&spec, &head, Frequency::Daily, 8, 3).unwrap();
        let inputs = Tensor::matrix(2, 8, (0..16).map(|i| (i as f64) * 0.13 - 1.0).collect())
            .unwrap();
        let targets = Tensor::column(vec![0.4, -0.9]);
        let mut b = GraphBuilder::new();
        let fwd = model.build_forward(&mut b, &inputs, false, 0).unwrap();
        let y = b.constant(targets);
        let weights = crate::loss::CombinedLossWeights::default();
        let cfg = crate::loss::LossGraph::new(&head, &weights);
        let loss = crate::loss::build_training_loss(&mut b, &cfg, fwd.raw, y, &fwd.param_nodes)
            .unwrap();
        let graph = b.finish(loss).unwrap();
        let report = finite_diff_check(&graph, model.params(), 1e-5).unwrap();
        assert!(
            report.passes(1e-4),
            "max rel err {}",
            report.max_rel_err
        );
    }
}
