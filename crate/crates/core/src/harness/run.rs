use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{DataSource, ExperimentConfig};
use crate::datagen::{self, Dataset, RemapNote};
use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::metrics::{self, BoundInputs, EvalRecord, FeatureStat, Split};
use crate::model::{self, EmbeddingTable, MlpParams};
use crate::optim::{meda_reinit, Optimizer, StepDiagnostics};

/// Train/validation/test splits ready for training.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub validation: Option<Dataset>,
    pub test: Dataset,
    pub remaps: Vec<RemapNote>,
}

/// Loads or generates the dataset, applies the configured frequency filter
/// to the whole dataset, then splits it in time order.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let mut ds = match &cfg.data {
        DataSource::Synthetic(spec) => datagen::generate_synthetic_with(spec, cfg.parallelism)?,
        DataSource::Csv { path, has_header } => datagen::load_csv(path, *has_header)?,
    };
    if let Some(f) = &cfg.filter {
        ds = datagen::filter_by_frequency(&ds, f.feature_index, f.ratio)?;
    }
    let (mut train, test) = ds.split(cfg.split_fraction)?;
    let validation = if cfg.validation_fraction > 0.0 {
        let (fit, val) = train.split(1.0 - cfg.validation_fraction)?;
        train = fit;
        Some(val)
    } else {
        None
    };
    Ok(PreparedData {
        remaps: ds.remaps,
        train,
        validation,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: u64,
    pub step: u64,
    pub train_loss: f64,
    pub test_auc: f64,
    pub test_logloss: f64,
    pub validation_auc: Option<f64>,
    pub emb_l2_sum: f64,
    pub emb_sq_sum: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub label: String,
    pub train_samples: usize,
    pub test_samples: usize,
    pub epochs: Vec<EpochSummary>,
    pub records: Vec<EvalRecord>,
    pub feature_stats: Vec<FeatureStat>,
    pub remaps: Vec<RemapNote>,
    /// Final squared-norm sum per feature table.
    pub final_feature_sq_sums: Vec<f64>,
}

impl ExperimentReport {
    pub fn test_auc(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.test_auc).collect()
    }

    pub fn validation_auc(&self) -> Option<Vec<f64>> {
        self.epochs.iter().map(|e| e.validation_auc).collect()
    }

    pub fn final_epoch(&self) -> &EpochSummary {
        self.epochs.last().expect("at least one epoch")
    }
}

/// Trained parameters and optimizer state at the end of a run.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub tables: Vec<EmbeddingTable>,
    pub mlp: MlpParams,
    pub optimizer: Optimizer,
}

/// Hooks into the training loop, for instrumentation and tests.
pub trait TrainObserver {
    /// Called at the start of each epoch, after any reinitialization.
    fn epoch_start(&mut self, _epoch: u64, _tables: &[EmbeddingTable], _mlp: &MlpParams) {}
    fn after_step(&mut self, _diag: &StepDiagnostics, _tables: &[EmbeddingTable]) {}
    /// Called after the last step of each epoch, before evaluation.
    fn epoch_end(&mut self, _epoch: u64, _tables: &[EmbeddingTable], _mlp: &MlpParams) {}
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

struct Evaluator<'a> {
    data: &'a PreparedData,
    mode: Parallelism,
}

impl Evaluator<'_> {
    fn score(
        &self,
        ds: &Dataset,
        tables: &[EmbeddingTable],
        mlp: &MlpParams,
    ) -> Result<(f64, f64)> {
        let logits = model::predict_logits(tables, mlp, ds, self.mode)?;
        Ok((
            metrics::auc(&logits, &ds.labels)?,
            metrics::logloss(&logits, &ds.labels)?,
        ))
    }

    fn record(
        &self,
        split: Split,
        epoch: u64,
        step: u64,
        tables: &[EmbeddingTable],
        mlp: &MlpParams,
    ) -> Result<EvalRecord> {
        let ds = match split {
            Split::Train => &self.data.train,
            Split::Validation => self
                .data
                .validation
                .as_ref()
                .expect("validation split present"),
            Split::Test => &self.data.test,
        };
        let (auc, logloss) = self.score(ds, tables, mlp)?;
        if !logloss.is_finite() {
            return Err(Error::NonFinite {
                what: "evaluation loss",
                step,
                detail: format!("{split:?} split at epoch {epoch}"),
            });
        }
        let norms = metrics::embedding_norms(tables);
        Ok(EvalRecord {
            epoch,
            step,
            split,
            auc,
            logloss,
            emb_l2_sum: norms.l2_sum,
            emb_sq_sum: norms.sq_sum,
        })
    }
}

/// Trains on prepared data. Deterministic given the config's seeds.
pub fn train(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    observer: &mut dyn TrainObserver,
) -> Result<(ExperimentReport, TrainedModel, Vec<StepDiagnostics>)> {
    cfg.validate()?;
    let arch = cfg.arch.to_spec(data.train.num_features())?;
    let (mut tables, mut mlp) =
        model::init_model(&arch, &data.train.feature_cards, cfg.seeds.init)?;
    let mut opt = Optimizer::new(cfg.optimizer.clone(), &mlp)?;
    let eval = Evaluator {
        data,
        mode: cfg.parallelism,
    };

    let mut records = Vec::new();
    let mut epochs = Vec::new();
    let mut diagnostics = Vec::new();
    for epoch in 1..=cfg.epochs {
        if cfg.optimizer.meda && epoch >= 2 {
            meda_reinit(&mut tables);
        }
        observer.epoch_start(epoch, &tables, &mlp);

        let shuffle = cfg.shuffle.then_some(cfg.seeds.shuffle);
        let batches = datagen::batch_iter(&data.train, cfg.batch_size, shuffle, epoch)?;
        let num_batches = batches.len();
        let mut loss_sum = 0.0;
        for (b, batch) in batches.enumerate() {
            let (loss, grads) = model::compute_gradients(&tables, &mlp, &batch, cfg.parallelism)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "training loss",
                    step: opt.step_count() + 1,
                    detail: format!("epoch {epoch}, batch {}", b + 1),
                });
            }
            loss_sum += loss;
            let diag = opt.step(&mut tables, &mut mlp, &grads)?;
            observer.after_step(&diag, &tables);
            if cfg.emit_diagnostics {
                diagnostics.push(diag);
            }
            let k = opt.step_count();
            let last_in_epoch = b + 1 == num_batches;
            if cfg.eval_every > 0 && k % cfg.eval_every == 0 && !last_in_epoch {
                records.push(eval.record(Split::Test, epoch, k, &tables, &mlp)?);
            }
        }

        observer.epoch_end(epoch, &tables, &mlp);
        let k = opt.step_count();
        if cfg.eval_train {
            records.push(eval.record(Split::Train, epoch, k, &tables, &mlp)?);
        }
        let validation_auc = if data.validation.is_some() {
            let r = eval.record(Split::Validation, epoch, k, &tables, &mlp)?;
            let auc = r.auc;
            records.push(r);
            Some(auc)
        } else {
            None
        };
        let test = eval.record(Split::Test, epoch, k, &tables, &mlp)?;
        let norms = metrics::embedding_norms(&tables);
        let bound =
            metrics::rademacher_bound(&BoundInputs::from_model(&mlp, &norms, data.train.len()))?;
        epochs.push(EpochSummary {
            epoch,
            step: k,
            train_loss: loss_sum / num_batches as f64,
            test_auc: test.auc,
            test_logloss: test.logloss,
            validation_auc,
            emb_l2_sum: norms.l2_sum,
            emb_sq_sum: norms.sq_sum,
            bound,
        });
        records.push(test);
    }

    let final_norms = metrics::embedding_norms(&tables);
    let report = ExperimentReport {
        config: cfg.clone(),
        label: cfg.optimizer.label(),
        train_samples: data.train.len(),
        test_samples: data.test.len(),
        epochs,
        records,
        feature_stats: metrics::feature_stats(&data.train, cfg.batch_size)?,
        remaps: data.remaps.clone(),
        final_feature_sq_sums: final_norms.per_feature.iter().map(|p| p.1).collect(),
    };
    Ok((
        report,
        TrainedModel {
            tables,
            mlp,
            optimizer: opt,
        },
        diagnostics,
    ))
}

/// Prepares data, trains, and writes the run's files when the config names
/// an output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let (report, _, diagnostics) = train(cfg, &data, &mut NoopObserver)?;
    if let Some(dir) = &cfg.output_dir {
        write_outputs(dir, &report, &diagnostics)?;
    }
    Ok(report)
}

fn write_outputs(
    dir: &Path,
    report: &ExperimentReport,
    diagnostics: &[StepDiagnostics],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut jsonl = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?);
    for r in &report.records {
        serde_json::to_writer(&mut jsonl, r)?;
        writeln!(jsonl)?;
    }
    jsonl.flush()?;

    let mut curves = std::io::BufWriter::new(std::fs::File::create(dir.join("curves.csv"))?);
    writeln!(curves, "epoch,step,split,auc,logloss,emb_l2_sum,emb_sq_sum")?;
    for r in &report.records {
        let split = match r.split {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        };
        writeln!(
            curves,
            "{},{},{},{},{},{},{}",
            r.epoch, r.step, split, r.auc, r.logloss, r.emb_l2_sum, r.emb_sq_sum
        )?;
    }
    curves.flush()?;

    metrics::write_feature_stats_csv(&report.feature_stats, dir.join("feature_stats.csv"))?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(report)?,
    )?;

    if !diagnostics.is_empty() {
        let mut out =
            std::io::BufWriter::new(std::fs::File::create(dir.join("step_diagnostics.jsonl"))?);
        for d in diagnostics {
            serde_json::to_writer(&mut out, d)?;
            writeln!(out)?;
        }
        out.flush()?;
    }
    Ok(())
}
