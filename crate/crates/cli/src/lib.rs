//! Argument parsing, config resolution and subcommand dispatch for the
//! `adareg` binary.

use std::fs;
use std::path::{Path, PathBuf};

use adareg::datagen::write_csv;
use adareg::harness::{
    compare_methods, default_alpha_grid, filter_ratio_sweep, grid_search_alpha, prepare_data,
    run_experiment, ExperimentConfig, FilterConfig,
};
use adareg::metrics::{feature_stats, rademacher_bound, write_feature_stats_csv, BoundInputs};
use adareg::optim::{Family, OptimizerConfig};
use clap::{Args, Parser, Subcommand};
use toml::Value;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    /// Single-line form written to stderr.
    pub fn line(&self) -> String {
        let kind = match self {
            CliError::Usage(_) => "usage",
            CliError::Validation(_) => "validation",
            CliError::Runtime(_) => "runtime",
        };
        let msg = self.to_string().replace('\n', " ");
        format!("error[{kind}]: {}", msg.trim())
    }
}

impl From<adareg::Error> for CliError {
    fn from(e: adareg::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "adareg",
    version,
    about = "Sparse CTR training with interval-adaptive regularization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML experiment config; the built-in desk-scale setup when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value by dotted key, e.g. `optimizer.alpha=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate (and optionally filter) the configured dataset as CSV.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Write a header line.
        #[arg(long)]
        header: bool,
    },
    /// Train one model and write metrics, curves and a report.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Train several optimizers on identical data and seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated methods: `family[@coef][+meda]`, e.g. `adam,adam_ar@1e-4,adam+meda`.
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
    },
    /// Grid-search the regularization coefficient of the configured optimizer.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        /// Coefficients to try; the decades 1e-7..1e-1 by default.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
        #[arg(long, default_value_t = 2)]
        selection_epoch: u64,
    },
    /// Train once per frequency-filter ratio on one feature.
    SweepFilter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        feature: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 0.5, 0.1, 0.0])]
        ratios: Vec<f64>,
    },
    /// Per-feature sparsity statistics of the training split.
    Stats {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate the norm-based Rademacher bound.
    Bound {
        /// Frobenius norm of every MLP weight matrix.
        #[arg(long, value_delimiter = ',', required = true)]
        mf: Vec<f64>,
        /// Number of features.
        #[arg(long)]
        s: usize,
        /// Number of samples.
        #[arg(long)]
        t: usize,
        /// Number of layers.
        #[arg(long)]
        l: usize,
        /// Sum of squared embedding-row norms.
        #[arg(long = "sum-tau")]
        sum_tau: f64,
    },
}

/// Parses `argv` (program name first). Help and version requests come back
/// as `Ok(Err(text))` so the caller can print them and exit 0.
pub fn parse_args<I, T>(argv: I) -> CliResult<std::result::Result<Cli, String>>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(argv) {
        Ok(cli) => Ok(Ok(cli)),
        Err(e) => match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                Ok(Err(e.to_string()))
            }
            _ => Err(CliError::Usage(e.to_string())),
        },
    }
}

/// Every key the schema knows about, including optional sections that a
/// concrete config may leave out.
fn schema_template() -> Value {
    let mut cfg = ExperimentConfig::desk_sparse();
    cfg.filter = Some(FilterConfig {
        feature_index: 0,
        ratio: 1.0,
    });
    cfg.output_dir = Some(PathBuf::from("out"));
    Value::try_from(&cfg).expect("config serializes")
}

fn type_name(v: &Value) -> &'static str {
    v.type_str()
}

fn parse_scalar(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn coerce(key: &str, existing: &Value, new: Value) -> CliResult<Value> {
    match (existing, new) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Array(_), Value::Array(a)) => Ok(Value::Array(a)),
        (e, n) if std::mem::discriminant(e) == std::mem::discriminant(&n) => Ok(n),
        (e, n) => Err(CliError::Validation(format!(
            "override `{key}`: expected {}, got {} `{n}`",
            type_name(e),
            type_name(&n)
        ))),
    }
}

fn step<'a>(v: &'a mut Value, seg: &str) -> Option<&'a mut Value> {
    match v {
        Value::Table(t) => t.get_mut(seg),
        Value::Array(a) => seg.parse::<usize>().ok().and_then(move |i| a.get_mut(i)),
        _ => None,
    }
}

fn lookup<'a>(v: &'a Value, segs: &[&str]) -> Option<&'a Value> {
    segs.iter().try_fold(v, |cur, seg| match cur {
        Value::Table(t) => t.get(*seg),
        Value::Array(a) => seg.parse::<usize>().ok().and_then(|i| a.get(i)),
        _ => None,
    })
}

/// Applies `key=value` overrides to a serialized config. Keys are dotted
/// paths, array elements by index as `a.2` or `a[2]`; values are TOML literals, with bare
/// words read as strings. The new value must have the type already stored
/// at that key.
pub fn apply_overrides(config: &mut Value, overrides: &[String]) -> CliResult<()> {
    let template = schema_template();
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("override `{ov}` is not KEY=VALUE")))?;
        let key = key.trim();
        let path = key.replace('[', ".").replace(']', "");
        let segs: Vec<&str> = path.split('.').collect();
        if segs.iter().any(|s| s.is_empty()) {
            return Err(CliError::Validation(format!(
                "override key `{key}` is malformed"
            )));
        }
        let new = parse_scalar(raw.trim());

        // Walk the config, creating optional sections the template knows.
        let mut cur = &mut *config;
        for (i, seg) in segs.iter().enumerate() {
            let last = i + 1 == segs.len();
            if step(cur, seg).is_none() {
                let known = lookup(&template, &segs[..=i]).cloned();
                match (cur, known) {
                    (Value::Table(t), Some(k)) => {
                        let fresh = if last {
                            k
                        } else {
                            Value::Table(Default::default())
                        };
                        t.insert(seg.to_string(), fresh);
                        cur = t.get_mut(*seg).expect("just inserted");
                    }
                    _ => return Err(CliError::Validation(format!("unknown config key `{key}`"))),
                }
            } else {
                cur = step(cur, seg).expect("checked above");
            }
        }
        *cur = coerce(key, cur, new)?;
    }
    Ok(())
}

/// Reads the base config (or the built-in one), applies overrides and
/// validates the result.
pub fn resolve_config(common: &Common) -> CliResult<ExperimentConfig> {
    let mut value = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Validation(format!("cannot read config {}: {e}", path.display()))
            })?;
            let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
                CliError::Validation(format!("config {}: {}", path.display(), e.message()))
            })?;
            Value::Table(table)
        }
        None => Value::try_from(ExperimentConfig::desk_sparse()).expect("config serializes"),
    };
    apply_overrides(&mut value, &common.overrides)?;
    let mut cfg: ExperimentConfig = value
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Validation(format!("config: {}", e.message())))?;
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Serializes a config as TOML.
pub fn config_to_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("adareg-out"))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn echo_config(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let dir = out_dir(cfg);
    write_file(&dir.join("config.resolved.toml"), &config_to_toml(cfg))?;
    Ok(dir)
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

/// Parses one method of `compare --methods`: `family[@coef][+meda]`. The
/// coefficient is `alpha` for the adaptive families and `weight_decay` for
/// the constant-decay ones.
pub fn parse_method(spec: &str, base: &OptimizerConfig) -> CliResult<OptimizerConfig> {
    let bad = |why: String| CliError::Validation(format!("method `{spec}`: {why}"));
    let (rest, meda) = match spec.strip_suffix("+meda") {
        Some(r) => (r, true),
        None => (spec, false),
    };
    let (name, coef) = match rest.split_once('@') {
        Some((n, c)) => (n, Some(c.parse::<f64>().map_err(|e| bad(e.to_string()))?)),
        None => (rest, None),
    };
    let family: Family = name
        .trim()
        .parse()
        .map_err(|e: adareg::Error| bad(e.to_string()))?;
    let mut m = OptimizerConfig::new(family)
        .with_meda(meda)
        .with_update_mode(base.update_mode);
    if base.family.is_adam() == family.is_adam() {
        m = m.with_learning_rate(base.learning_rate);
    }
    if let Some(c) = coef {
        if family.is_adaptive() {
            m = m.with_alpha(c);
        } else if family.is_weight_decay() {
            m = m.with_weight_decay(c);
        } else {
            return Err(bad(format!("{family} takes no coefficient")));
        }
    }
    m.validate()?;
    Ok(m)
}

/// Runs one parsed invocation, printing a short summary to stdout.
pub fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { common, header } => {
            let cfg = resolve_config(&common)?;
            let dir = echo_config(&cfg)?;
            let data = prepare_data(&cfg)?;
            let path = dir.join("data.csv");
            let mut all = data.train.clone();
            if let Some(v) = &data.validation {
                all = concat(&all, v)?;
            }
            let all = concat(&all, &data.test)?;
            write_csv(&all, &path, header)?;
            if !data.remaps.is_empty() {
                write_file(&dir.join("remap.json"), &json(&data.remaps))?;
            }
            println!("wrote {} rows to {}", all.len(), path.display());
        }
        Command::Train { common } => {
            let cfg = resolve_config(&common)?;
            echo_config(&cfg)?;
            let report = run_experiment(&cfg)?;
            for e in &report.epochs {
                println!(
                    "epoch {} step {} test_auc {:.6} test_logloss {:.6} emb_sq_sum {:.6e}",
                    e.epoch, e.step, e.test_auc, e.test_logloss, e.emb_sq_sum
                );
            }
        }
        Command::Compare { common, methods } => {
            let cfg = resolve_config(&common)?;
            let dir = echo_config(&cfg)?;
            let methods: Vec<OptimizerConfig> = methods
                .iter()
                .map(|m| parse_method(m.trim(), &cfg.optimizer))
                .collect::<CliResult<_>>()?;
            let (table, _) = compare_methods(&cfg, &methods)?;
            write_file(&dir.join("comparison.json"), &json(&table))?;
            let md = table.to_markdown();
            write_file(&dir.join("comparison.md"), &md)?;
            print!("{md}");
        }
        Command::SweepAlpha {
            common,
            grid,
            selection_epoch,
        } => {
            let cfg = resolve_config(&common)?;
            let dir = echo_config(&cfg)?;
            let grid = if grid.is_empty() {
                default_alpha_grid()
            } else {
                grid
            };
            let (result, _) = grid_search_alpha(&cfg, &grid, selection_epoch)?;
            write_file(&dir.join("grid.json"), &json(&result))?;
            for row in &result.rows {
                println!(
                    "alpha {:e} {}_auc@{} {:.6}",
                    row.alpha, result.selection_split, selection_epoch, row.selection_auc
                );
            }
            println!("best alpha {:e}", result.best_alpha);
        }
        Command::SweepFilter {
            common,
            feature,
            ratios,
        } => {
            let cfg = resolve_config(&common)?;
            let dir = echo_config(&cfg)?;
            let (rows, _) = filter_ratio_sweep(&cfg, feature, &ratios)?;
            write_file(&dir.join("filter_sweep.json"), &json(&rows))?;
            for row in &rows {
                let aucs: Vec<String> = row.auc.iter().map(|a| format!("{a:.6}")).collect();
                println!(
                    "ratio {} kept {} auc [{}] feature_sq_sum {:.6e}",
                    row.ratio,
                    row.kept_ids,
                    aucs.join(", "),
                    row.feature_emb_sq_sum
                );
            }
        }
        Command::Stats { common } => {
            let cfg = resolve_config(&common)?;
            let dir = echo_config(&cfg)?;
            let data = prepare_data(&cfg)?;
            let stats = feature_stats(&data.train, cfg.batch_size)?;
            let path = dir.join("feature_stats.csv");
            write_feature_stats_csv(&stats, &path)?;
            for s in &stats {
                println!(
                    "feature {} unique_ids {} mean_occurrences {:.4} mean_update_interval {:.4}",
                    s.feature_index, s.unique_ids, s.mean_occurrences, s.mean_update_interval
                );
            }
        }
        Command::Bound {
            mf,
            s,
            t,
            l,
            sum_tau,
        } => {
            let inputs = BoundInputs {
                frobenius_norms: mf,
                sum_tau,
                num_features: s,
                num_samples: t,
                num_layers: l,
            };
            println!("{}", rademacher_bound(&inputs)?);
        }
    }
    Ok(())
}

fn concat(
    a: &adareg::datagen::Dataset,
    b: &adareg::datagen::Dataset,
) -> CliResult<adareg::datagen::Dataset> {
    let labels = a.labels.iter().chain(&b.labels).copied().collect();
    let columns = a
        .columns
        .iter()
        .zip(&b.columns)
        .map(|(x, y)| x.iter().chain(y).copied().collect())
        .collect();
    Ok(adareg::datagen::Dataset::new(
        labels,
        columns,
        a.feature_cards.clone(),
    )?)
}

/// Entry point used by `main`: returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let result = parse_args(argv).and_then(|parsed| match parsed {
        Ok(cli) => dispatch(cli),
        Err(text) => {
            print!("{text}");
            Ok(())
        }
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            if let CliError::Usage(text) = &e {
                // clap's own message carries the usage block.
                let first = text
                    .lines()
                    .next()
                    .unwrap_or("")
                    .trim_start_matches("error: ");
                eprintln!("{}", CliError::Usage(first.to_string()).line());
                for l in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
                    eprintln!("  {l}");
                }
            } else {
                eprintln!("{}", e.line());
            }
            e.exit_code()
        }
    }
}
