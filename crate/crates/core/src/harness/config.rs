use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::datagen::{FeatureSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::model::ArchSpec;
use crate::optim::{Family, OptimizerConfig, UpdateMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthSpec),
    Csv {
        path: PathBuf,
        #[serde(default)]
        has_header: bool,
    },
}

/// Keep only the top `ratio` fraction of one feature's ids before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub feature_index: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Embedding width used for every feature not listed in `per_feature_dims`.
    pub embedding_dim: usize,
    /// Optional per-feature widths; empty means `embedding_dim` everywhere.
    #[serde(default)]
    pub per_feature_dims: Vec<usize>,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub bias: bool,
}

impl ArchConfig {
    pub fn to_spec(&self, num_features: usize) -> Result<ArchSpec> {
        let embedding_dims = if self.per_feature_dims.is_empty() {
            vec![self.embedding_dim; num_features]
        } else if self.per_feature_dims.len() == num_features {
            self.per_feature_dims.clone()
        } else {
            return Err(Error::invalid(
                "arch.per_feature_dims",
                format!(
                    "{} widths for {num_features} features",
                    self.per_feature_dims.len()
                ),
            ));
        };
        Ok(ArchSpec {
            embedding_dims,
            hidden: self.hidden.clone(),
            bias: self.bias,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub filter: Option<FilterConfig>,
    /// Leading fraction of rows used for training; the rest is the test split.
    pub split_fraction: f64,
    /// Trailing fraction of the training rows held out for model selection.
    /// Zero selects on the test split.
    #[serde(default)]
    pub validation_fraction: f64,
    pub arch: ArchConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: u64,
    pub batch_size: usize,
    /// Evaluate every this many steps in addition to epoch ends; 0 disables.
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default = "yes")]
    pub shuffle: bool,
    pub seeds: Seeds,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub parallelism: Parallelism,
    /// Also score the training split at each epoch end.
    #[serde(default)]
    pub eval_train: bool,
    /// Write per-step decay diagnostics to `step_diagnostics.jsonl`.
    #[serde(default)]
    pub emit_diagnostics: bool,
}

impl ExperimentConfig {
    /// Full-size defaults: batch 2048, embedding width 32, hidden
    /// `[512, 256, 128]`, four epochs, learning rate by family.
    pub fn full_scale_defaults(data: DataSource, family: Family) -> Self {
        Self {
            data,
            filter: None,
            split_fraction: 0.8,
            validation_fraction: 0.0,
            arch: ArchConfig {
                embedding_dim: 32,
                per_feature_dims: Vec::new(),
                hidden: vec![512, 256, 128],
                bias: false,
            },
            optimizer: OptimizerConfig::new(family),
            epochs: 4,
            batch_size: 2048,
            eval_every: 0,
            shuffle: true,
            seeds: Seeds {
                init: 1,
                shuffle: 2,
            },
            output_dir: None,
            parallelism: Parallelism::default(),
            eval_train: false,
            emit_diagnostics: false,
        }
    }

    /// Desk-scale sparse setup: 200k synthetic rows with two dense features
    /// (50 ids, Zipf 1.0) and one ultra-sparse feature (50k ids, Zipf 1.1),
    /// width 16, hidden `[64, 32]`, batch 512, four epochs of Adam at 1e-3.
    ///
    /// The optimizer runs in dense mode, so idle rows keep drifting on their
    /// momentum between touches as they do with an ordinary dense Adam. With
    /// lazy updates a rare row moves about one learning rate per touch and
    /// barely memorizes within four epochs.
    pub fn desk_sparse() -> Self {
        let data = DataSource::Synthetic(SynthSpec {
            num_samples: 200_000,
            features: vec![
                FeatureSpec::new(50, 1.0).with_signal(0.5),
                FeatureSpec::new(50, 1.0).with_signal(0.5),
                FeatureSpec::new(50_000, 1.1).with_signal(0.5),
            ],
            label_noise: 0.0,
            teacher_bias: -1.0,
            teacher_seed: 11,
            data_seed: 12,
        });
        Self {
            arch: ArchConfig {
                embedding_dim: 16,
                per_feature_dims: Vec::new(),
                hidden: vec![64, 32],
                bias: false,
            },
            batch_size: 512,
            optimizer: OptimizerConfig::new(Family::Adam)
                .with_update_mode(UpdateMode::DenseFaithful),
            ..Self::full_scale_defaults(data, Family::Adam)
        }
    }

    /// Index of the ultra-sparse feature in [`ExperimentConfig::desk_sparse`].
    pub const DESK_SPARSE_FEATURE: usize = 2;

    pub fn with_optimizer(mut self, optimizer: OptimizerConfig) -> Self {
        self.optimizer = optimizer;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::invalid(
                "split_fraction",
                "must lie strictly between 0 and 1",
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation_fraction", "must lie in [0, 1)"));
        }
        if self.arch.hidden.contains(&0) || self.arch.embedding_dim == 0 {
            return Err(Error::invalid("arch", "widths must be positive"));
        }
        if let Some(f) = &self.filter {
            if !(0.0..=1.0).contains(&f.ratio) {
                return Err(Error::invalid("filter.ratio", "must lie in [0, 1]"));
            }
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate().map_err(|e| match e {
                Error::Invalid { field, reason } => Error::Invalid {
                    field: format!("data.{field}"),
                    reason,
                },
                other => other,
            })?;
        }
        self.optimizer.validate()
    }
}
