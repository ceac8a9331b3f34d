use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, FilterConfig};
use super::run::{prepare_data, run_experiment, train, ExperimentReport, NoopObserver};
use crate::error::{Error, Result};
use crate::exec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub label: String,
    pub auc: Vec<f64>,
    pub logloss: Vec<f64>,
    pub final_emb_sq_sum: f64,
    pub final_bound: f64,
}

impl MethodRow {
    fn from_report(r: &ExperimentReport) -> Self {
        Self {
            label: r.label.clone(),
            auc: r.test_auc(),
            logloss: r.epochs.iter().map(|e| e.test_logloss).collect(),
            final_emb_sq_sum: r.final_epoch().emb_sq_sum,
            final_bound: r.final_epoch().bound,
        }
    }
}

/// Per-epoch test AUC per method, with the best row per epoch column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<MethodRow>,
    /// Index of the row with the highest AUC in each epoch column (first wins ties).
    pub best: Vec<usize>,
}

impl ComparisonTable {
    fn from_rows(rows: Vec<MethodRow>) -> Self {
        let epochs = rows.first().map_or(0, |r| r.auc.len());
        let best = (0..epochs)
            .map(|e| {
                rows.iter().enumerate().fold(0, |best, (i, r)| {
                    if r.auc[e] > rows[best].auc[e] {
                        i
                    } else {
                        best
                    }
                })
            })
            .collect();
        Self { rows, best }
    }

    /// Markdown table with the best value of each column in bold.
    pub fn to_markdown(&self) -> String {
        let epochs = self.best.len();
        let mut s = String::from("| method |");
        for e in 1..=epochs {
            s.push_str(&format!(" E{e} |"));
        }
        s.push_str(" final emb_sq_sum |\n|---|");
        s.push_str(&"---|".repeat(epochs + 1));
        s.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            s.push_str(&format!("| {} |", row.label));
            for (e, v) in row.auc.iter().enumerate() {
                if self.best[e] == i {
                    s.push_str(&format!(" **{v:.4}** |"));
                } else {
                    s.push_str(&format!(" {v:.4} |"));
                }
            }
            s.push_str(&format!(" {:.4e} |\n", row.final_emb_sq_sum));
        }
        s
    }
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Runs every method on the same data and seeds. Runs execute in parallel
/// when the base config allows it; each writes to its own subdirectory.
pub fn compare_methods(
    base: &ExperimentConfig,
    methods: &[crate::optim::OptimizerConfig],
) -> Result<(ComparisonTable, Vec<ExperimentReport>)> {
    if methods.len() < 2 {
        return Err(Error::invalid(
            "methods",
            "at least two methods are required",
        ));
    }
    let configs: Vec<ExperimentConfig> = methods
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut cfg = base.clone().with_optimizer(m.clone());
            cfg.output_dir = base
                .output_dir
                .as_ref()
                .map(|d| d.join(format!("{i:02}_{}", sanitize(&m.label()))));
            cfg
        })
        .collect();
    let reports: Result<Vec<_>> = exec::map_slice(base.parallelism, &configs, run_experiment)
        .into_iter()
        .collect();
    let reports = reports?;
    let table = ComparisonTable::from_rows(reports.iter().map(MethodRow::from_report).collect());
    Ok((table, reports))
}

/// The seven decades `1e-7 ..= 1e-1`.
pub fn default_alpha_grid() -> Vec<f64> {
    vec![1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub alpha: f64,
    pub auc: Vec<f64>,
    pub selection_auc: f64,
    pub final_emb_sq_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best_alpha: f64,
    /// Which split the selection AUC was read from.
    pub selection_split: String,
    pub selection_epoch: u64,
    pub rows: Vec<GridRow>,
}

/// Tries every coefficient with identical seeds and keeps the one with the
/// best AUC at `selection_epoch`, preferring the smaller coefficient on ties.
/// The coefficient is `alpha` for the adaptive families and `weight_decay`
/// for the constant-decay ones. Selection reads the validation split when the
/// config has one, else the test split.
pub fn grid_search_alpha(
    base: &ExperimentConfig,
    grid: &[f64],
    selection_epoch: u64,
) -> Result<(GridSearchResult, Vec<ExperimentReport>)> {
    if grid.is_empty() {
        return Err(Error::invalid("grid", "must not be empty"));
    }
    if selection_epoch == 0 || selection_epoch > base.epochs {
        return Err(Error::invalid(
            "selection_epoch",
            format!("must lie in 1..={}", base.epochs),
        ));
    }
    let family = base.optimizer.family;
    if !family.is_adaptive() && !family.is_weight_decay() {
        return Err(Error::invalid(
            "optimizer.family",
            format!("{family} has no regularization coefficient to search"),
        ));
    }
    if let Some(&bad) = grid.iter().find(|a| !(0.0..1.0).contains(*a)) {
        return Err(Error::invalid(
            "grid",
            format!("coefficient {bad} is outside [0, 1)"),
        ));
    }

    let data = prepare_data(base)?;
    let configs: Vec<ExperimentConfig> = grid
        .iter()
        .map(|&a| {
            let mut cfg = base.clone();
            if family.is_adaptive() {
                cfg.optimizer.alpha = a;
            } else {
                cfg.optimizer.weight_decay = a;
            }
            cfg.output_dir = base
                .output_dir
                .as_ref()
                .map(|d| d.join(format!("alpha_{a:e}")));
            cfg
        })
        .collect();
    let reports: Result<Vec<ExperimentReport>> =
        exec::map_slice(base.parallelism, &configs, |cfg| {
            train(cfg, &data, &mut NoopObserver).map(|(r, _, _)| r)
        })
        .into_iter()
        .collect();
    let reports = reports?;

    let use_validation = data.validation.is_some();
    let idx = (selection_epoch - 1) as usize;
    let rows: Vec<GridRow> = grid
        .iter()
        .zip(&reports)
        .map(|(&alpha, r)| GridRow {
            alpha,
            auc: r.test_auc(),
            selection_auc: if use_validation {
                r.epochs[idx].validation_auc.expect("validation present")
            } else {
                r.epochs[idx].test_auc
            },
            final_emb_sq_sum: r.final_epoch().emb_sq_sum,
        })
        .collect();
    let best = rows
        .iter()
        .fold(None::<&GridRow>, |best, row| match best {
            None => Some(row),
            Some(b) if row.selection_auc > b.selection_auc => Some(row),
            Some(b) if row.selection_auc == b.selection_auc && row.alpha < b.alpha => Some(row),
            Some(b) => Some(b),
        })
        .expect("non-empty grid");
    Ok((
        GridSearchResult {
            best_alpha: best.alpha,
            selection_split: if use_validation { "validation" } else { "test" }.into(),
            selection_epoch,
            rows,
        },
        reports,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSweepRow {
    pub ratio: f64,
    pub kept_ids: usize,
    pub auc: Vec<f64>,
    /// Final squared-norm sum of the filtered feature's table.
    pub feature_emb_sq_sum: f64,
    pub final_emb_sq_sum: f64,
    pub final_emb_l2_sum: f64,
}

/// Filters one feature to each ratio in turn and trains on the result.
pub fn filter_ratio_sweep(
    base: &ExperimentConfig,
    feature_index: usize,
    ratios: &[f64],
) -> Result<(Vec<FilterSweepRow>, Vec<ExperimentReport>)> {
    if let Some(&bad) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::invalid("ratios", format!("{bad} is outside [0, 1]")));
    }
    let configs: Vec<ExperimentConfig> = ratios
        .iter()
        .map(|&ratio| {
            let mut cfg = base.clone();
            cfg.filter = Some(FilterConfig {
                feature_index,
                ratio,
            });
            cfg.output_dir = base
                .output_dir
                .as_ref()
                .map(|d| d.join(format!("ratio_{ratio}")));
            cfg
        })
        .collect();
    let reports: Result<Vec<ExperimentReport>> =
        exec::map_slice(base.parallelism, &configs, run_experiment)
            .into_iter()
            .collect();
    let reports = reports?;
    let rows = ratios
        .iter()
        .zip(&reports)
        .map(|(&ratio, r)| FilterSweepRow {
            ratio,
            kept_ids: r.remaps.last().map_or(0, |n| n.kept_ids),
            auc: r.test_auc(),
            feature_emb_sq_sum: r.final_feature_sq_sums[feature_index],
            final_emb_sq_sum: r.final_epoch().emb_sq_sum,
            final_emb_l2_sum: r.final_epoch().emb_l2_sum,
        })
        .collect();
    Ok((rows, reports))
}
