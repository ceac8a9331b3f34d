//! Adam and Adagrad with interval-adaptive decoupled regularization, their
//! constant-decay and plain baselines, and embedding reinitialization.
//!
//! Each parameter group (an embedding row or a whole MLP matrix) remembers
//! the last step `s` at which it was updated. When it is next updated at
//! step `k` it idles for `I = k - s - 1` steps and the adaptive families
//! decay it by `lambda = min(1, alpha * I)` before applying the usual
//! adaptive step:
//!
//! ```text
//! theta <- theta - lambda * theta - lr * update
//! ```
//!
//! Both terms read the pre-step `theta`. MLP matrices are updated every step,
//! so their interval is always 0 and they are never decayed by the adaptive
//! families.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmbeddingTable, MlpParams, SparseGrads};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "adam")]
    Adam,
    #[serde(rename = "adamw")]
    AdamW,
    #[serde(rename = "adam_ar")]
    AdamAr,
    #[serde(rename = "adagrad")]
    Adagrad,
    #[serde(rename = "adagradw")]
    AdagradW,
    #[serde(rename = "adagrad_ar")]
    AdagradAr,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Adam,
        Family::AdamW,
        Family::AdamAr,
        Family::Adagrad,
        Family::AdagradW,
        Family::AdagradAr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Adam => "adam",
            Family::AdamW => "adamw",
            Family::AdamAr => "adam_ar",
            Family::Adagrad => "adagrad",
            Family::AdagradW => "adagradw",
            Family::AdagradAr => "adagrad_ar",
        }
    }

    pub fn is_adam(self) -> bool {
        matches!(self, Family::Adam | Family::AdamW | Family::AdamAr)
    }

    pub fn is_adaptive(self) -> bool {
        matches!(self, Family::AdamAr | Family::AdagradAr)
    }

    pub fn is_weight_decay(self) -> bool {
        matches!(self, Family::AdamW | Family::AdagradW)
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::invalid("optimizer.family", format!("unknown family {s:?}")))
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Rows are processed only at steps where their id is in the batch.
    #[default]
    Lazy,
    /// Every row is processed every step, absent rows with a zero gradient.
    DenseFaithful,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub family: Family,
    pub learning_rate: f64,
    /// Base coefficient of the adaptive families.
    #[serde(default)]
    pub alpha: f64,
    /// Constant decoupled decay of the `W` families.
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Reinitialize embeddings and their state at every epoch start after the first.
    #[serde(default)]
    pub meda: bool,
    #[serde(default)]
    pub update_mode: UpdateMode,
}

impl OptimizerConfig {
    /// Default learning rate for the family: 0.001 for Adam variants,
    /// 0.01 for Adagrad variants.
    pub fn new(family: Family) -> Self {
        Self {
            family,
            learning_rate: if family.is_adam() { 1e-3 } else { 1e-2 },
            alpha: 0.0,
            weight_decay: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            meda: false,
            update_mode: UpdateMode::Lazy,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_weight_decay(mut self, w: f64) -> Self {
        self.weight_decay = w;
        self
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn with_meda(mut self, on: bool) -> Self {
        self.meda = on;
        self
    }

    pub fn with_update_mode(mut self, mode: UpdateMode) -> Self {
        self.update_mode = mode;
        self
    }

    /// Short label such as `adam_ar(alpha=0.001)` or `adam+meda`.
    pub fn label(&self) -> String {
        let mut s = self.family.name().to_string();
        if self.family.is_adaptive() {
            s.push_str(&format!("(alpha={})", self.alpha));
        } else if self.family.is_weight_decay() {
            s.push_str(&format!("(w={})", self.weight_decay));
        }
        if self.meda {
            s.push_str("+meda");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(
                "optimizer.learning_rate",
                "must be positive",
            ));
        }
        if self.family.is_adaptive() && !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::invalid("optimizer.alpha", "must lie in [0, 1)"));
        }
        if self.family.is_weight_decay() && !(0.0..=1.0).contains(&self.weight_decay) {
            return Err(Error::invalid(
                "optimizer.weight_decay",
                "must lie in [0, 1]",
            ));
        }
        if self.family.is_adam() {
            if !(0.0..1.0).contains(&self.beta1) {
                return Err(Error::invalid("optimizer.beta1", "must lie in [0, 1)"));
            }
            if !(0.0..1.0).contains(&self.beta2) {
                return Err(Error::invalid("optimizer.beta2", "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("optimizer.eps", "must be positive"));
        }
        Ok(())
    }
}

/// Optimizer step counter; advanced once per batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GlobalStep(u64);

impl GlobalStep {
    pub fn get(self) -> u64 {
        self.0
    }

    pub fn advance(&mut self) -> u64 {
        self.0 += 1;
        self.0
    }
}

/// Adaptive coefficient `min(1, alpha * (k - s_prev - 1))`.
pub fn lambda_adaptive(k: u64, s_prev: u64, alpha: f64) -> Result<f64> {
    if s_prev >= k {
        return Err(Error::StepOrder { k, s_prev });
    }
    let interval = k - s_prev - 1;
    Ok((alpha * interval as f64).min(1.0))
}

/// Idle interval for the epoch-boundary schedule under which adaptive
/// decay reduces to reinitialization: `1/alpha` whenever `k * B` is a multiple
/// of `T`, otherwise 0.
pub fn meda_schedule_interval(k: u64, batch_size: u64, num_samples: u64, alpha: f64) -> f64 {
    if num_samples > 0 && (k * batch_size).is_multiple_of(num_samples) {
        1.0 / alpha
    } else {
        0.0
    }
}

/// Optimizer state for the MLP matrices (and biases when present).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseState {
    pub moment1: Vec<Array2<f64>>,
    pub moment2: Vec<Array2<f64>>,
    pub bias_moment1: Option<Vec<Array1<f64>>>,
    pub bias_moment2: Option<Vec<Array1<f64>>>,
    pub touches: u64,
    pub lvs: u64,
}

impl DenseState {
    pub fn new(params: &MlpParams) -> Self {
        let zeros = || {
            params
                .weights
                .iter()
                .map(|w| Array2::zeros(w.raw_dim()))
                .collect()
        };
        let bias_zeros = || {
            params
                .biases
                .as_ref()
                .map(|bs| bs.iter().map(|b| Array1::zeros(b.len())).collect())
        };
        Self {
            moment1: zeros(),
            moment2: zeros(),
            bias_moment1: bias_zeros(),
            bias_moment2: bias_zeros(),
            touches: 0,
            lvs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: GlobalStep,
    pub dense: DenseState,
}

impl OptimState {
    pub fn new(params: &MlpParams) -> Self {
        Self {
            step: GlobalStep::default(),
            dense: DenseState::new(params),
        }
    }
}

/// Number of histogram bins in [`StepDiagnostics::lambda_hist`]:
/// `0`, `(0, 0.25]`, `(0.25, 0.5]`, `(0.5, 1)`, `1`.
pub const LAMBDA_BINS: usize = 5;

/// Per-step summary of the decay applied to embedding rows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: u64,
    pub rows_updated: u64,
    pub max_interval: u64,
    pub lambda_hist: [u64; LAMBDA_BINS],
    /// Sum over updated rows of `lambda * ||theta_old||`.
    pub decay_mass: f64,
}

impl StepDiagnostics {
    fn record(&mut self, interval: u64, lambda: f64, norm: f64) {
        self.rows_updated += 1;
        self.max_interval = self.max_interval.max(interval);
        let bin = if lambda <= 0.0 {
            0
        } else if lambda <= 0.25 {
            1
        } else if lambda <= 0.5 {
            2
        } else if lambda < 1.0 {
            3
        } else {
            4
        };
        self.lambda_hist[bin] += 1;
        self.decay_mass += lambda * norm;
    }
}

/// Decay coefficient for a group last updated at `s_prev`.
fn decay_for(cfg: &OptimizerConfig, k: u64, s_prev: u64) -> Result<f64> {
    Ok(match cfg.family {
        Family::AdamAr | Family::AdagradAr => lambda_adaptive(k, s_prev, cfg.alpha)?,
        Family::AdamW | Family::AdagradW => cfg.weight_decay,
        Family::Adam | Family::Adagrad => 0.0,
    })
}

/// One parameter group's update. `grad = None` means a zero gradient.
/// `count` is the bias-correction exponent for the Adam families.
fn update_group(
    cfg: &OptimizerConfig,
    theta: &mut [f64],
    m: &mut [f64],
    v: &mut [f64],
    grad: Option<&[f64]>,
    decay: f64,
    count: u64,
) {
    let lr = cfg.learning_rate;
    let eps = cfg.eps;
    if cfg.family.is_adam() {
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c = i32::try_from(count).unwrap_or(i32::MAX);
        let corr1 = 1.0 - b1.powi(c);
        let corr2 = 1.0 - b2.powi(c);
        let step = |th: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / corr1;
            let v_hat = *v / corr2;
            *th = *th - decay * *th - lr * m_hat / (v_hat.sqrt() + eps);
        };
        match grad {
            Some(g) => {
                for (((th, m), v), &g) in theta.iter_mut().zip(m).zip(v).zip(g) {
                    step(th, m, v, g);
                }
            }
            None => {
                for ((th, m), v) in theta.iter_mut().zip(m).zip(v) {
                    step(th, m, v, 0.0);
                }
            }
        }
    } else {
        let step = |th: &mut f64, v: &mut f64, g: f64| {
            *v += g * g;
            *th = *th - decay * *th - lr * g / (v.sqrt() + eps);
        };
        match grad {
            Some(g) => {
                for ((th, v), &g) in theta.iter_mut().zip(v).zip(g) {
                    step(th, v, g);
                }
            }
            None => {
                for (th, v) in theta.iter_mut().zip(v) {
                    step(th, v, 0.0);
                }
            }
        }
    }
}

fn slice_mut<D: ndarray::Dimension>(
    a: &mut ndarray::ArrayBase<ndarray::OwnedRepr<f64>, D>,
) -> &mut [f64] {
    a.as_slice_mut()
        .expect("parameters are kept in standard layout")
}

fn check_grads(
    grads: &SparseGrads,
    tables: &[EmbeddingTable],
    params: &MlpParams,
    k: u64,
) -> Result<()> {
    if let Some(detail) = grads.find_non_finite() {
        return Err(Error::NonFinite {
            what: "gradient",
            step: k,
            detail,
        });
    }
    if grads.tables.len() != tables.len() || grads.weights.len() != params.weights.len() {
        return Err(Error::Shape("gradients do not match the model".into()));
    }
    for (i, (tg, t)) in grads.tables.iter().zip(tables).enumerate() {
        if tg.grads.ncols() != t.dim() && !tg.rows.is_empty() {
            return Err(Error::Shape(format!("feature {i} gradient width")));
        }
        if let Some(&id) = tg.rows.last() {
            if id as usize >= t.cardinality() {
                return Err(Error::IdOutOfRange {
                    feature: i,
                    id,
                    cardinality: t.cardinality(),
                });
            }
        }
    }
    for (g, w) in grads.weights.iter().zip(&params.weights) {
        if g.dim() != w.dim() {
            return Err(Error::Shape("weight gradient shape".into()));
        }
    }
    Ok(())
}

fn apply_tables(
    tables: &mut [EmbeddingTable],
    grads: &SparseGrads,
    k: u64,
    cfg: &OptimizerConfig,
    diag: &mut StepDiagnostics,
) -> Result<()> {
    for (table, tg) in tables.iter_mut().zip(&grads.tables) {
        match cfg.update_mode {
            UpdateMode::Lazy => {
                for (&id, g) in tg.rows.iter().zip(tg.grads.rows()) {
                    let j = id as usize;
                    let s_prev = table.lvs[j];
                    let decay = decay_for(cfg, k, s_prev)?;
                    let count = table.touch_count[j] + 1;
                    let d = table.dim();
                    let span = j * d..(j + 1) * d;
                    let theta = &mut slice_mut(&mut table.rows)[span.clone()];
                    let norm = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
                    diag.record(k - s_prev - 1, decay, norm);
                    update_group(
                        cfg,
                        theta,
                        &mut slice_mut(&mut table.moment1)[span.clone()],
                        &mut slice_mut(&mut table.moment2)[span],
                        Some(g.as_slice().expect("gradient rows are contiguous")),
                        decay,
                        count,
                    );
                    table.lvs[j] = k;
                    table.touch_count[j] = count;
                }
            }
            UpdateMode::DenseFaithful => {
                let mut next = 0;
                for j in 0..table.cardinality() {
                    let touched = tg.rows.get(next).is_some_and(|&id| id as usize == j);
                    let g = touched.then(|| tg.grads.row(next));
                    if touched {
                        next += 1;
                    }
                    let s_prev = table.lvs[j];
                    let decay = decay_for(cfg, k, s_prev)?;
                    let d = table.dim();
                    let span = j * d..(j + 1) * d;
                    let theta = &mut slice_mut(&mut table.rows)[span.clone()];
                    if touched {
                        let norm = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
                        diag.record(k - s_prev - 1, decay, norm);
                    }
                    update_group(
                        cfg,
                        theta,
                        &mut slice_mut(&mut table.moment1)[span.clone()],
                        &mut slice_mut(&mut table.moment2)[span],
                        g.as_ref()
                            .map(|g| g.as_slice().expect("gradient rows are contiguous")),
                        decay,
                        k,
                    );
                    if touched {
                        table.lvs[j] = k;
                        table.touch_count[j] += 1;
                    }
                }
            }
        }
    }
    Ok(())
}

fn apply_dense(
    params: &mut MlpParams,
    dense: &mut DenseState,
    grads: &SparseGrads,
    k: u64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    let decay = decay_for(cfg, k, dense.lvs)?;
    let count = match cfg.update_mode {
        UpdateMode::Lazy => dense.touches + 1,
        UpdateMode::DenseFaithful => k,
    };
    for l in 0..params.weights.len() {
        let g = grads.weights[l].as_standard_layout();
        update_group(
            cfg,
            slice_mut(&mut params.weights[l]),
            slice_mut(&mut dense.moment1[l]),
            slice_mut(&mut dense.moment2[l]),
            g.as_slice(),
            decay,
            count,
        );
    }
    if let (Some(bs), Some(gb), Some(m1), Some(m2)) = (
        &mut params.biases,
        &grads.biases,
        &mut dense.bias_moment1,
        &mut dense.bias_moment2,
    ) {
        for l in 0..bs.len() {
            update_group(
                cfg,
                slice_mut(&mut bs[l]),
                slice_mut(&mut m1[l]),
                slice_mut(&mut m2[l]),
                gb[l].as_slice(),
                decay,
                count,
            );
        }
    }
    dense.touches += 1;
    dense.lvs = k;
    Ok(())
}

/// Applies one update at the current step `state.step`, which the caller
/// has already advanced for this batch.
fn apply(
    tables: &mut [EmbeddingTable],
    params: &mut MlpParams,
    state: &mut OptimState,
    grads: &SparseGrads,
    cfg: &OptimizerConfig,
) -> Result<StepDiagnostics> {
    let k = state.step.get();
    if k == 0 {
        return Err(Error::invalid(
            "step",
            "advance the step counter before updating",
        ));
    }
    check_grads(grads, tables, params, k)?;
    let mut diag = StepDiagnostics {
        step: k,
        ..Default::default()
    };
    apply_tables(tables, grads, k, cfg, &mut diag)?;
    apply_dense(params, &mut state.dense, grads, k, cfg)?;
    Ok(diag)
}

fn require_family(cfg: &OptimizerConfig, allowed: &[Family], op: &str) -> Result<()> {
    if allowed.contains(&cfg.family) {
        Ok(())
    } else {
        Err(Error::invalid(
            "optimizer.family",
            format!("{op} does not handle {}", cfg.family),
        ))
    }
}

/// Adam with interval-adaptive decoupled decay.
pub fn adam_ar_step(
    tables: &mut [EmbeddingTable],
    params: &mut MlpParams,
    state: &mut OptimState,
    grads: &SparseGrads,
    cfg: &OptimizerConfig,
) -> Result<StepDiagnostics> {
    require_family(cfg, &[Family::AdamAr], "adam_ar_step")?;
    apply(tables, params, state, grads, cfg)
}

/// Adagrad with interval-adaptive decoupled decay (no bias correction).
pub fn adagrad_ar_step(
    tables: &mut [EmbeddingTable],
    params: &mut MlpParams,
    state: &mut OptimState,
    grads: &SparseGrads,
    cfg: &OptimizerConfig,
) -> Result<StepDiagnostics> {
    require_family(cfg, &[Family::AdagradAr], "adagrad_ar_step")?;
    apply(tables, params, state, grads, cfg)
}

/// Plain Adam/Adagrad, or their constant decoupled-decay variants. The decay
/// is subtracted unscaled by the learning rate.
pub fn baseline_step(
    tables: &mut [EmbeddingTable],
    params: &mut MlpParams,
    state: &mut OptimState,
    grads: &SparseGrads,
    cfg: &OptimizerConfig,
) -> Result<StepDiagnostics> {
    require_family(
        cfg,
        &[
            Family::Adam,
            Family::AdamW,
            Family::Adagrad,
            Family::AdagradW,
        ],
        "baseline_step",
    )?;
    apply(tables, params, state, grads, cfg)
}

/// Resets every embedding row and its optimizer state to the zero
/// initialization. MLP parameters and their state are left alone.
pub fn meda_reinit(tables: &mut [EmbeddingTable]) {
    for t in tables {
        t.reset();
    }
}

/// Owns the configuration and state; `step` advances the counter and
/// dispatches to the family's update rule.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub state: OptimState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &MlpParams) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            state: OptimState::new(params),
            config,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.state.step.get()
    }

    pub fn step(
        &mut self,
        tables: &mut [EmbeddingTable],
        params: &mut MlpParams,
        grads: &SparseGrads,
    ) -> Result<StepDiagnostics> {
        let next = self.state.step.get() + 1;
        if let Some(detail) = grads.find_non_finite() {
            return Err(Error::NonFinite {
                what: "gradient",
                step: next,
                detail,
            });
        }
        self.state.step.advance();
        match self.config.family {
            Family::AdamAr => adam_ar_step(tables, params, &mut self.state, grads, &self.config),
            Family::AdagradAr => {
                adagrad_ar_step(tables, params, &mut self.state, grads, &self.config)
            }
            _ => baseline_step(tables, params, &mut self.state, grads, &self.config),
        }
    }
}

/// Checks `||new|| <= (1-alpha)^I ||old|| + ||update||` for one group,
/// with a relative slack for rounding.
pub fn decay_bound_holds(
    old: &[f64],
    new: &[f64],
    update: &[f64],
    alpha: f64,
    interval: u64,
) -> bool {
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let lhs = norm(new);
    let exp = i32::try_from(interval).unwrap_or(i32::MAX);
    let rhs = (1.0 - alpha).powi(exp) * norm(old) + norm(update);
    lhs <= rhs * (1.0 + 1e-12) + 1e-300
}
