//! A small end-to-end comparison on generated toy scenes: a single-frame
//! model against a temporal model and its evaluation-time ablations.

use serde::{Deserialize, Serialize};

use super::augment::AugmentConfig;
use super::optim::OptimizerConfig;
use super::schedule::TbpttConfig;
use super::trainer::{TrainConfig, Trainer};
use crate::data::{toy_dataset, ToySceneConfig};
use crate::error::Result;
use crate::eval::{evaluate, EvalOptions};
use crate::geometry::ProjectionMode;
use crate::network::{BackboneConfig, MemoryUpdateKind, Model, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyExperiment {
    pub scene: ToySceneConfig,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub epochs: usize,
    pub update: MemoryUpdateKind,
}

impl Default for ToyExperiment {
    fn default() -> Self {
        Self {
            scene: ToySceneConfig::default(),
            train_sequences: 32,
            test_sequences: 3,
            epochs: 8,
            update: MemoryUpdateKind::Residual,
        }
    }
}

/// Held-out mIoU of each variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyComparison {
    pub single_frame: f64,
    pub temporal: f64,
    pub no_alignment: f64,
    pub empty_memory: f64,
    pub majority_vote: f64,
}

impl ToyExperiment {
    /// Training configuration shared by both models.
    pub fn train_config(&self, update: Option<MemoryUpdateKind>, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            epochs: self.epochs,
            batch: 4,
            projection: ProjectionMode::Simple,
            tma: true,
            freeze_backbone: false,
            normalize_inputs: true,
            max_updates: None,
            model: ModelConfig {
                backbone: BackboneConfig::tiny(),
                update,
                num_classes: 4,
                input_norm: None,
            },
            tbptt: TbpttConfig {
                k1: 5,
                k2: 5,
                k3: 5,
                length: self.scene.frames,
            },
            optimizer: OptimizerConfig {
                lr0: 3e-3,
                decay: 1e-3,
                ..OptimizerConfig::single_frame()
            },
            augment: AugmentConfig {
                flip_prob: 0.5,
                crop_width: None,
            },
        }
    }

    /// Trains both models on one seed's data and evaluates every variant.
    pub fn run(&self, seed: u64) -> Result<ToyComparison> {
        let train = toy_dataset(&self.scene, 1000 * seed + 1, self.train_sequences)?;
        let test = toy_dataset(&self.scene, 1000 * seed + 900, self.test_sequences)?;
        let fit = |update| -> Result<Model> {
            let mut t = Trainer::new(self.train_config(update, seed))?;
            t.train(&train, &mut std::io::sink())?;
            Ok(t.into_model())
        };
        let mut sfb = fit(None)?;
        let mut tm = fit(Some(self.update))?;
        let base = EvalOptions::default();
        let with = |f: fn(&mut EvalOptions)| {
            let mut o = base.clone();
            f(&mut o);
            o
        };
        Ok(ToyComparison {
            single_frame: evaluate(&mut sfb, &test, &base)?.miou(),
            temporal: evaluate(&mut tm, &test, &base)?.miou(),
            no_alignment: evaluate(&mut tm, &test, &with(|o| o.no_tma = true))?.miou(),
            empty_memory: evaluate(&mut tm, &test, &with(|o| o.empty_memory = true))?.miou(),
            majority_vote: evaluate(&mut sfb, &test, &with(|o| o.majority_vote = true))?.miou(),
        })
    }
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
