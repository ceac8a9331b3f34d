//! Evaluation metrics, embedding-norm telemetry, per-feature update-interval
//! statistics and the norm-based complexity bound.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::model::{EmbeddingTable, MlpParams};

/// Area under the ROC curve via the Mann-Whitney rank sum, ties counted as
/// half. Runs in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores", "contain NaN"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the rank sum of the positives keeps tied mid-ranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share the midrank (i+1+j)/2
        let positives = order[i..j].iter().filter(|&&t| labels[t] == 1).count() as u128;
        twice_rank_sum += positives * (i as u128 + 1 + j as u128);
        i = j;
    }
    let np = n_pos as u128;
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Mean binary cross-entropy of logits against labels.
pub fn logloss(logits: &[f64], labels: &[u8]) -> Result<f64> {
    crate::model::loss_bce(logits, labels).map(|(l, _)| l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// One evaluation point. Serialized as one JSONL line with exactly these
/// field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: u64,
    pub step: u64,
    pub split: Split,
    pub auc: f64,
    pub logloss: f64,
    pub emb_l2_sum: f64,
    pub emb_sq_sum: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingNorms {
    /// Sum of row l2 norms over every table.
    pub l2_sum: f64,
    /// Sum of squared row norms over every table.
    pub sq_sum: f64,
    /// `(l2_sum, sq_sum)` per feature.
    pub per_feature: Vec<(f64, f64)>,
}

pub fn embedding_norms(tables: &[EmbeddingTable]) -> EmbeddingNorms {
    let per_feature: Vec<(f64, f64)> = tables
        .iter()
        .map(|t| {
            t.rows.rows().into_iter().fold((0.0, 0.0), |(l2, sq), row| {
                let r = row.iter().map(|v| v * v).sum::<f64>();
                (l2 + r.sqrt(), sq + r)
            })
        })
        .collect();
    EmbeddingNorms {
        l2_sum: per_feature.iter().map(|p| p.0).sum(),
        sq_sum: per_feature.iter().map(|p| p.1).sum(),
        per_feature,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStat {
    pub feature_index: usize,
    pub unique_ids: usize,
    pub mean_occurrences: f64,
    pub mean_update_interval: f64,
}

/// Idle intervals `k - s - 1` for an id touched at the increasing `steps`,
/// starting from `s = 0`.
pub fn update_intervals(steps: &[u64]) -> Vec<u64> {
    let mut prev = 0;
    steps
        .iter()
        .map(|&k| {
            let i = k - prev - 1;
            prev = k;
            i
        })
        .collect()
}

/// Replays the unshuffled batch stream and reports, per feature, the number
/// of distinct ids, `T / unique ids`, and the mean idle interval over every
/// touch of every id.
pub fn feature_stats(ds: &Dataset, batch_size: usize) -> Result<Vec<FeatureStat>> {
    if ds.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be at least 1"));
    }
    let stats = ds
        .columns
        .iter()
        .enumerate()
        .map(|(i, col)| {
            let mut last: HashMap<u32, u64> = HashMap::new();
            let mut total: u128 = 0;
            let mut touches: u64 = 0;
            for (b, chunk) in col.chunks(batch_size).enumerate() {
                let k = b as u64 + 1;
                for &id in chunk {
                    let s = last.entry(id).or_insert(0);
                    if *s != k {
                        total += u128::from(k - *s - 1);
                        touches += 1;
                        *s = k;
                    }
                }
            }
            let unique = last.len();
            FeatureStat {
                feature_index: i,
                unique_ids: unique,
                mean_occurrences: ds.len() as f64 / unique as f64,
                mean_update_interval: total as f64 / touches as f64,
            }
        })
        .collect();
    Ok(stats)
}

pub fn write_feature_stats_csv(stats: &[FeatureStat], path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "feature_index,unique_ids,mean_occurrences,mean_update_interval"
    )?;
    for s in stats {
        writeln!(
            out,
            "{},{},{},{}",
            s.feature_index, s.unique_ids, s.mean_occurrences, s.mean_update_interval
        )?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Frobenius norm bound per MLP layer.
    pub frobenius_norms: Vec<f64>,
    /// Sum over all embedding rows of the squared row norm.
    pub sum_tau: f64,
    pub num_features: usize,
    pub num_samples: usize,
    pub num_layers: usize,
}

impl BoundInputs {
    /// Inputs read off a trained model. `sum_tau` comes from the same
    /// [`EmbeddingNorms`] that the run reports.
    pub fn from_model(params: &MlpParams, norms: &EmbeddingNorms, num_samples: usize) -> Self {
        Self {
            frobenius_norms: params.frobenius_norms(),
            sum_tau: norms.sq_sum,
            num_features: norms.per_feature.len(),
            num_samples,
            num_layers: params.num_layers(),
        }
    }
}

/// `prod(M_F) * sqrt(S) / sqrt(T) * sqrt(sum_tau) * (sqrt(2 ln 2 * L) + 1)`.
pub fn rademacher_bound(b: &BoundInputs) -> Result<f64> {
    if b.num_samples == 0 {
        return Err(Error::invalid("num_samples", "must be positive"));
    }
    if b.num_features == 0 {
        return Err(Error::invalid("num_features", "must be positive"));
    }
    if b.num_layers == 0 {
        return Err(Error::invalid("num_layers", "must be positive"));
    }
    if b.frobenius_norms.len() != b.num_layers {
        return Err(Error::invalid(
            "frobenius_norms",
            format!(
                "{} norms for {} layers",
                b.frobenius_norms.len(),
                b.num_layers
            ),
        ));
    }
    if b.frobenius_norms
        .iter()
        .any(|&m| !(m > 0.0) || !m.is_finite())
    {
        return Err(Error::invalid(
            "frobenius_norms",
            "must be positive and finite",
        ));
    }
    if !(b.sum_tau >= 0.0) || !b.sum_tau.is_finite() {
        return Err(Error::invalid("sum_tau", "must be finite and non-negative"));
    }
    let prod: f64 = b.frobenius_norms.iter().product();
    let depth = (2.0 * std::f64::consts::LN_2 * b.num_layers as f64).sqrt() + 1.0;
    Ok(
        prod * (b.num_features as f64).sqrt() / (b.num_samples as f64).sqrt()
            * b.sum_tau.sqrt()
            * depth,
    )
}
