//! Versioned JSON parameter checkpoints: named arrays with shapes, plus
//! everything needed to rebuild the model and denormalize its outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GraphBuilder, Tensor};
use crate::data::NormStats;
use crate::loss::LossMethod;
use crate::lstm::{init_params, LstmModel, LstmSpec};
use crate::model::{Forecaster, ForwardPass, HeadSpec};
use crate::optim::TrainHistory;
use crate::patchformer::{init_patchformer, Frequency, PatchformerModel, PatchformerSpec};
use crate::{Error, Result};

use super::{BackboneChoice, ExperimentConfig};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Either backbone behind one `Forecaster` front.
#[derive(Clone, Debug)]
pub enum CheckpointedModel {
    Lstm(LstmModel),
    Patchformer(PatchformerModel),
}

impl Forecaster for CheckpointedModel {
    fn head(&self) -> &HeadSpec {
        match self {
            CheckpointedModel::Lstm(m) => m.head(),
            CheckpointedModel::Patchformer(m) => m.head(),
        }
    }

    fn params(&self) -> &[Tensor] {
        match self {
            CheckpointedModel::Lstm(m) => m.params(),
            CheckpointedModel::Patchformer(m) => m.params(),
        }
    }

    fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        match self {
            CheckpointedModel::Lstm(m) => m.set_params(params),
            CheckpointedModel::Patchformer(m) => m.set_params(params),
        }
    }

    fn param_names(&self) -> Vec<String> {
        match self {
            CheckpointedModel::Lstm(m) => m.param_names(),
            CheckpointedModel::Patchformer(m) => m.param_names(),
        }
    }

    fn build_forward(
        &self,
        b: &mut GraphBuilder,
        inputs: &Tensor,
        training: bool,
        dropout_seed: u64,
    ) -> Result<ForwardPass> {
        match self {
            CheckpointedModel::Lstm(m) => m.build_forward(b, inputs, training, dropout_seed),
            CheckpointedModel::Patchformer(m) => {
                m.build_forward(b, inputs, training, dropout_seed)
            }
        }
    }
}

/// Fresh model for the configured backbone, seeded from the train config.
pub fn build_model(cfg: &ExperimentConfig, head: &HeadSpec) -> Result<CheckpointedModel> {
    Ok(match cfg.backbone {
        BackboneChoice::Lstm => {
            CheckpointedModel::Lstm(init_params(&cfg.lstm, head, cfg.train.seed)?)
        }
        BackboneChoice::Patchformer => CheckpointedModel::Patchformer(init_patchformer(
            &cfg.patchformer,
            head,
            cfg.frequency,
            cfg.lookback(),
            cfg.train.seed,
        )?),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A trained cell on disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub backbone: BackboneChoice,
    pub method: LossMethod,
    pub symbol: String,
    pub head: HeadSpec,
    pub lstm_spec: Option<LstmSpec>,
    pub patchformer_spec: Option<PatchformerSpec>,
    /// Resolved patch size (patchformer only).
    pub patch: Option<usize>,
    pub lookback: usize,
    pub params: Vec<NamedTensor>,
    pub norm_stats: NormStats,
    pub best_epoch: usize,
}

impl Checkpoint {
    pub fn from_model(
        model: &CheckpointedModel,
        backbone: BackboneChoice,
        method: LossMethod,
        sym: &super::pipeline::SymbolData,
        history: &TrainHistory,
        lookback: usize,
    ) -> Result<Self> {
        let names = model.param_names();
        let params = names
            .into_iter()
            .zip(model.params())
            .map(|(name, t)| NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        let (lstm_spec, patchformer_spec, patch) = match model {
            CheckpointedModel::Lstm(m) => (Some(m.spec.clone()), None, None),
            CheckpointedModel::Patchformer(m) => (None, Some(m.spec.clone()), Some(m.patch)),
        };
        Ok(Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            backbone,
            method,
            symbol: sym.symbol.clone(),
            head: model.head().clone(),
            lstm_spec,
            patchformer_spec,
            patch,
            lookback,
            params,
            norm_stats: sym.stats.clone(),
            best_epoch: history.best_epoch,
        })
    }

    /// Rebuild the model with the stored parameters.
    pub fn to_model(&self, frequency: Frequency, lookback: usize) -> Result<CheckpointedModel> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format_version {} (expected {})",
                self.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        let tensors: Vec<Tensor> = self
            .params
            .iter()
            .map(|nt| Tensor::new(nt.shape.clone(), nt.data.clone()))
            .collect::<Result<_>>()?;
        let mut model = match self.backbone {
            BackboneChoice::Lstm => {
                let spec = self
                    .lstm_spec
                    .clone()
                    .ok_or_else(|| Error::Config("lstm checkpoint missing its spec".into()))?;
                CheckpointedModel::Lstm(init_params(&spec, &self.head, 0)?)
            }
            BackboneChoice::Patchformer => {
                let mut spec = self.patchformer_spec.clone().ok_or_else(|| {
                    Error::Config("patchformer checkpoint missing its spec".into())
                })?;
                if let Some(patch) = self.patch {
                    spec.patch_size = patch;
                }
                CheckpointedModel::Patchformer(init_patchformer(
                    &spec, &self.head, frequency, lookback, 0,
                )?)
            }
        };
        model.set_params(tensors)?;
        Ok(model)
    }
}

pub fn save_checkpoint(cp: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    serde_json::to_writer(std::io::BufWriter::new(file), cp)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let file = std::fs::File::open(path.as_ref())?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SequenceDataset, Split};

    #[test]
    fn checkpoint_round_trip_preserves_parameters() {
        let cfg = ExperimentConfig::synthetic(vec!["A".into()], 400, 0);
        let head = HeadSpec::for_method(LossMethod::Evidential);
        let model = build_model(&cfg, &head).unwrap();
        let sym = super::super::pipeline::SymbolData {
            symbol: "A".into(),
            train_set: SequenceDataset {
                samples: vec![],
                split: Split::Train,
            },
            val_set: SequenceDataset {
                samples: vec![],
                split: Split::Val,
            },
            test_set: SequenceDataset {
                samples: vec![],
                split: Split::Test,
            },
            stats: NormStats {
                symbol: "A".into(),
                mean: 0.1,
                std: 2.0,
                lower_clip: -1.0,
                upper_clip: 1.0,
            },
        };
        let history = TrainHistory {
            train_loss: vec![1.0],
            val_loss: vec![1.0],
            learning_rate: vec![0.001],
            evidence_scale: vec![0.5],
            best_epoch: 0,
        };
        let cp = Checkpoint::from_model(
            &model,
            cfg.backbone,
            LossMethod::Evidential,
            &sym,
            &history,
            cfg.lookback(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&cp, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.format_version, CHECKPOINT_FORMAT_VERSION);
        assert_eq!(loaded.norm_stats, sym.stats);
        let rebuilt = loaded.to_model(cfg.frequency, cfg.lookback()).unwrap();
        for (a, b) in model.params().iter().zip(rebuilt.params()) {
            assert_eq!(a, b);
        }
    }
}
