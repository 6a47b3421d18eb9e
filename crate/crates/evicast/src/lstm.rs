//! Single-layer LSTM backbone with a per-method output head: the controlled
//! architecture every loss in the zoo is trained on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{GraphBuilder, NodeId, Tensor};
use crate::model::{uniform_tensor, Forecaster, ForwardPass, HeadSpec};
use crate::{Error, Result};

/// Backbone dimensions. The study fixes a univariate input; `hidden_dim` and
/// `lookback` default to the reference configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LstmSpec {
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "default_lookback")]
    pub lookback: usize,
}

fn default_input_dim() -> usize {
    1
}

fn default_hidden_dim() -> usize {
    32
}

fn default_dropout() -> f64 {
    0.1
}

fn default_lookback() -> usize {
    50
}

impl Default for LstmSpec {
    fn default() -> Self {
        LstmSpec {
            input_dim: 1,
            hidden_dim: 32,
            dropout_rate: 0.1,
            lookback: 50,
        }
    }
}

impl LstmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim != 1 {
            return Err(Error::Config(
                "the sequence backbone is univariate (input_dim = 1)".into(),
            ));
        }
        if self.hidden_dim == 0 || self.lookback == 0 {
            return Err(Error::Config("hidden_dim and lookback must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Gate parameters only: `4 (H (input + H) + H)`.
    pub fn lstm_param_count(&self) -> usize {
        4 * (self.hidden_dim * (self.input_dim + self.hidden_dim) + self.hidden_dim)
    }
}

/// LSTM gate weights plus the head's affine map, as named tensors.
///
/// Gate ordering within the stacked `4H` axis is input, forget, cell
/// candidate, output. Parameter order is fixed: `w_x, w_h, b, head.w,
/// head.b` -- graphs, checkpoints and the optimizer all rely on it.
#[derive(Clone, Debug)]
pub struct LstmModel {
    pub spec: LstmSpec,
    pub head: HeadSpec,
    params: Vec<Tensor>,
}

/// Deterministic initialization: weights uniform in `[-1/sqrt(H), 1/sqrt(H)]`
/// drawn from a ChaCha stream seeded by `seed`, biases zero except the
/// forget gate at 1.0.
pub fn init_params(spec: &LstmSpec, head: &HeadSpec, seed: u64) -> Result<LstmModel> {
    spec.validate()?;
    head.validate()?;
    let h = spec.hidden_dim;
    let out = head.output_dim();
    let bound = 1.0 / (h as f64).sqrt();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let w_x = uniform_tensor(&mut rng, &[spec.input_dim, 4 * h], bound);
    let w_h = uniform_tensor(&mut rng, &[h, 4 * h], bound);
    let mut b = Tensor::zeros(&[1, 4 * h]);
    for i in h..2 * h {
        b.data_mut()[i] = 1.0;
    }
    let w_head = uniform_tensor(&mut rng, &[h, out], bound);
    let b_head = Tensor::zeros(&[1, out]);
    Ok(LstmModel {
        spec: spec.clone(),
        head: head.clone(),
        params: vec![w_x, w_h, b, w_head, b_head],
    })
}

impl LstmModel {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn batch_const(&self, b: &mut GraphBuilder, inputs: &Tensor) -> Result<(NodeId, usize)> {
        // Accept [n, lookback] or [n, lookback, 1].
        let (n, width) = match inputs.shape() {
            [n, l] => (*n, *l),
            [n, l, 1] => (*n, *l),
            other => {
                return Err(Error::Contract(format!(
                    "expected [batch, lookback] input, got shape {other:?}"
                )))
            }
        };
        if width != self.spec.lookback {
            return Err(Error::Contract(format!(
                "sequence length {width} does not match lookback {}",
                self.spec.lookback
            )));
        }
        let flat = Tensor::matrix(n, width, inputs.data().to_vec())?;
        Ok((b.constant(flat), n))
    }

    /// Wire the recurrence up to the final hidden state `h_T`, `[n, H]`.
    fn build_hidden(
        &self,
        b: &mut GraphBuilder,
        inputs: &Tensor,
        training: bool,
        dropout_seed: u64,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let (x, n) = self.batch_const(b, inputs)?;
        let h_dim = self.spec.hidden_dim;
        let w_x = b.param("lstm.w_x", &[self.spec.input_dim, 4 * h_dim]);
        let w_h = b.param("lstm.w_h", &[h_dim, 4 * h_dim]);
        let bias = b.param("lstm.b", &[1, 4 * h_dim]);
        let mut h = b.constant(Tensor::zeros(&[n, h_dim]));
        let mut c = b.constant(Tensor::zeros(&[n, h_dim]));
        for t in 0..self.spec.lookback {
            let x_t = b.slice_cols(x, t, t + 1)?;
            let zx = b.matmul(x_t, w_x)?;
            let zh = b.matmul(h, w_h)?;
            let z0 = b.add(zx, zh)?;
            let z = b.add(z0, bias)?;
            let i_pre = b.slice_cols(z, 0, h_dim)?;
            let f_pre = b.slice_cols(z, h_dim, 2 * h_dim)?;
            let g_pre = b.slice_cols(z, 2 * h_dim, 3 * h_dim)?;
            let o_pre = b.slice_cols(z, 3 * h_dim, 4 * h_dim)?;
            let i = b.sigmoid(i_pre);
            let f = b.sigmoid(f_pre);
            let g = b.tanh(g_pre);
            let o = b.sigmoid(o_pre);
            let fc = b.mul(f, c)?;
            let ig = b.mul(i, g)?;
            c = b.add(fc, ig)?;
            let tc = b.tanh(c);
            h = b.mul(o, tc)?;
        }
        if training && self.spec.dropout_rate > 0.0 {
            let mask = dropout_mask(n, h_dim, self.spec.dropout_rate, dropout_seed);
            let m = b.constant(mask);
            h = b.mul(h, m)?;
        }
        Ok((h, vec![w_x, w_h, bias]))
    }

    /// Final hidden states for a batch, as a plain tensor.
    pub fn lstm_forward(
        &self,
        batch: &Tensor,
        training: bool,
        dropout_seed: u64,
    ) -> Result<Tensor> {
        let mut b = GraphBuilder::new();
        let (h, _) = self.build_hidden(&mut b, batch, training, dropout_seed)?;
        let loss = b.mean(h);
        let graph = b.finish(loss)?;
        let eval = graph.forward(&self.params[..3])?;
        Ok(eval.value(h).clone())
    }

    /// Affine head over already-computed hidden states: `h @ W + b`, raw
    /// (unconstrained) outputs.
    pub fn head_forward(&self, hidden: &Tensor) -> Result<Tensor> {
        let (_, cols) = hidden.dims2()?;
        if cols != self.spec.hidden_dim {
            return Err(Error::Contract(format!(
                "hidden width {cols} does not match hidden_dim {}",
                self.spec.hidden_dim
            )));
        }
        let mut b = GraphBuilder::new();
        let h = b.constant(hidden.clone());
        let w = b.param("head.w", self.params[3].shape());
        let bias = b.param("head.b", self.params[4].shape());
        let raw = b.linear(h, w, bias)?;
        let loss = b.mean(raw);
        let graph = b.finish(loss)?;
        let eval = graph.forward(&self.params[3..])?;
        Ok(eval.value(raw).clone())
    }
}

/// Inverted-scaling dropout mask: kept units are scaled by `1/(1-rate)` so
/// the expectation matches the undropped activation.
fn dropout_mask(rows: usize, cols: usize, rate: f64, seed: u64) -> Tensor {
    let keep = 1.0 - rate;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("mask shape")
}

impl Forecaster for LstmModel {
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
        ["lstm.w_x", "lstm.w_h", "lstm.b", "head.w", "head.b"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn build_forward(
        &self,
        b: &mut GraphBuilder,
        inputs: &Tensor,
        training: bool,
        dropout_seed: u64,
    ) -> Result<ForwardPass> {
        let (h, mut param_nodes) = self.build_hidden(b, inputs, training, dropout_seed)?;
        let w_head = b.param("head.w", self.params[3].shape());
        let b_head = b.param("head.b", self.params[4].shape());
        param_nodes.push(w_head);
        param_nodes.push(b_head);
        let raw = b.linear(h, w_head, b_head)?;
        Ok(ForwardPass { raw, param_nodes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossMethod;

    fn tiny_spec() -> LstmSpec {
        LstmSpec {
            input_dim: 1,
            hidden_dim: 4,
            dropout_rate: 0.1,
            lookback: 5,
        }
    }

    #[test]
    fn gate_parameter_count_matches_formula() {
        let spec = LstmSpec::default();
        assert_eq!(spec.lstm_param_count(), 4352);
        let model = init_params(&spec, &HeadSpec::for_method(LossMethod::Mse), 0).unwrap();
        let gate_params: usize = model.params()[..3].iter().map(Tensor::len).sum();
        assert_eq!(gate_params, 4352);
    }

    #[test]
    fn evidential_head_shapes() {
        let model = init_params(
            &LstmSpec::default(),
            &HeadSpec::for_method(LossMethod::Evidential),
            0,
        )
        .unwrap();
        assert_eq!(model.params()[3].shape(), &[32, 4]);
        assert_eq!(model.params()[4].shape(), &[1, 4]);
    }

    #[test]
    fn same_seed_same_params() {
        let spec = LstmSpec::default();
        let head = HeadSpec::for_method(LossMethod::GaussianNll);
        let a = init_params(&spec, &head, 0).unwrap();
        let b = init_params(&spec, &head, 0).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x, y);
        }
        let c = init_params(&spec, &head, 1).unwrap();
        assert_ne!(a.params()[0], c.params()[0]);
    }

    #[test]
    fn forget_gate_bias_is_one() {
        let model = init_params(
            &LstmSpec::default(),
            &HeadSpec::for_method(LossMethod::Mse),
            0,
        )
        .unwrap();
        let b = &model.params()[2];
        let h = 32;
        assert!(b.data()[..h].iter().all(|&v| v == 0.0));
        assert!(b.data()[h..2 * h].iter().all(|&v| v == 1.0));
        assert!(b.data()[2 * h..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_weights_zero_inputs_give_zero_hidden() {
        let spec = tiny_spec();
        let mut model = init_params(&spec, &HeadSpec::for_method(LossMethod::Mse), 0).unwrap();
        let zeroed: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
        model.set_params(zeroed).unwrap();
        let batch = Tensor::zeros(&[2, 5]);
        let h = model.lstm_forward(&batch, false, 0).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
        let raw = model.head_forward(&h).unwrap();
        assert!(raw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_shapes() {
        let spec = LstmSpec::default();
        let model = init_params(&spec, &HeadSpec::for_method(LossMethod::Mse), 0).unwrap();
        let batch = Tensor::zeros(&[2, 50]);
        let h = model.lstm_forward(&batch, false, 0).unwrap();
        assert_eq!(h.shape(), &[2, 32]);
        // trailing singleton axis accepted
        let batch3 = Tensor::zeros(&[2, 50, 1]);
        assert_eq!(model.lstm_forward(&batch3, false, 0).unwrap().shape(), &[2, 32]);
        // wrong length rejected
        assert!(model.lstm_forward(&Tensor::zeros(&[2, 49]), false, 0).is_err());
    }

    #[test]
    fn inference_ignores_dropout_seed() {
        let spec = tiny_spec();
        let model = init_params(&spec, &HeadSpec::for_method(LossMethod::Mse), 3).unwrap();
        let batch = Tensor::matrix(2, 5, (0..10).map(|i| i as f64 * 0.1).collect()).unwrap();
        let a = model.lstm_forward(&batch, false, 1).unwrap();
        let b = model.lstm_forward(&batch, false, 2).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        // training mode with dropout differs
        let c = model.lstm_forward(&batch, true, 1).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let spec = LstmSpec {
            dropout_rate: 0.3,
            ..tiny_spec()
        };
        let model = init_params(&spec, &HeadSpec::for_method(LossMethod::Mse), 5).unwrap();
        let batch = Tensor::matrix(1, 5, vec![0.4, -0.2, 0.9, 0.1, -0.5]).unwrap();
        let reference = model.lstm_forward(&batch, false, 0).unwrap();
        let trials = 100_000;
        let mut acc = vec![0.0; reference.len()];
        for seed in 0..trials {
            let dropped = model.lstm_forward(&batch, true, seed).unwrap();
            for (a, v) in acc.iter_mut().zip(dropped.data()) {
                *a += v;
            }
        }
        for (a, &r) in acc.iter().zip(reference.data()) {
            let mean = a / trials as f64;
            assert!(
                (mean - r).abs() <= 0.01 * r.abs().max(1e-3),
                "mean {mean} vs reference {r}"
            );
        }
    }

    #[test]
    fn batch_order_equivariance() {
        let spec = tiny_spec();
        let model = init_params(&spec, &HeadSpec::for_method(LossMethod::GaussianNll), 7).unwrap();
        let rows = [
            vec![0.1, 0.2, -0.3, 0.4, 0.0],
            vec![-0.5, 0.6, 0.7, -0.8, 0.9],
            vec![0.0, 0.0, 1.0, -1.0, 0.5],
        ];
        let fwd = |order: &[usize]| -> Tensor {
            let data: Vec<f64> = order.iter().flat_map(|&i| rows[i].clone()).collect();
            let batch = Tensor::matrix(order.len(), 5, data).unwrap();
            let h = model.lstm_forward(&batch, false, 0).unwrap();
            model.head_forward(&h).unwrap()
        };
        let forward = fwd(&[0, 1, 2]);
        let permuted = fwd(&[2, 0, 1]);
        for (orig_row, perm_row) in [(0usize, 1usize), (1, 2), (2, 0)] {
            assert_eq!(forward.row_slice(orig_row), permuted.row_slice(perm_row));
        }
    }
}
