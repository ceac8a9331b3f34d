//! Sparse categorical datasets: synthetic generation, CSV I/O, frequency
//! filtering and mini-batch iteration.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};

fn default_signal() -> f64 {
    1.0
}

/// One categorical feature of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    /// Number of distinct values.
    pub cardinality: usize,
    /// Zipf exponent of the value distribution; 0 gives a uniform draw.
    pub zipf_exponent: f64,
    /// Standard deviation of the teacher's per-value logit contribution.
    #[serde(default = "default_signal")]
    pub signal: f64,
    /// Values further down the frequency ranking get a smaller score spread:
    /// value `j` uses `signal * (j + 1)^-signal_decay`. 0 keeps it constant.
    #[serde(default)]
    pub signal_decay: f64,
}

impl FeatureSpec {
    pub fn new(cardinality: usize, zipf_exponent: f64) -> Self {
        Self {
            cardinality,
            zipf_exponent,
            signal: default_signal(),
            signal_decay: 0.0,
        }
    }

    pub fn with_signal(mut self, signal: f64) -> Self {
        self.signal = signal;
        self
    }

    pub fn with_signal_decay(mut self, decay: f64) -> Self {
        self.signal_decay = decay;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_samples: usize,
    pub features: Vec<FeatureSpec>,
    /// Probability of flipping each teacher label.
    #[serde(default)]
    pub label_noise: f64,
    /// Constant added to every teacher logit; sets the base click rate.
    #[serde(default)]
    pub teacher_bias: f64,
    pub teacher_seed: u64,
    pub data_seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::invalid("num_samples", "must be at least 1"));
        }
        if self.features.is_empty() {
            return Err(Error::invalid(
                "features",
                "at least one feature is required",
            ));
        }
        for (i, f) in self.features.iter().enumerate() {
            if f.cardinality == 0 {
                return Err(Error::invalid(
                    format!("features[{i}].cardinality"),
                    "must be at least 1",
                ));
            }
            if f.cardinality > u32::MAX as usize {
                return Err(Error::invalid(
                    format!("features[{i}].cardinality"),
                    "exceeds the 32-bit id space",
                ));
            }
            if !(f.zipf_exponent >= 0.0) || !f.zipf_exponent.is_finite() {
                return Err(Error::invalid(
                    format!("features[{i}].zipf_exponent"),
                    "must be a finite non-negative number",
                ));
            }
            if !(f.signal >= 0.0) || !f.signal.is_finite() {
                return Err(Error::invalid(
                    format!("features[{i}].signal"),
                    "must be a finite non-negative number",
                ));
            }
            if !(f.signal_decay >= 0.0) || !f.signal_decay.is_finite() {
                return Err(Error::invalid(
                    format!("features[{i}].signal_decay"),
                    "must be a finite non-negative number",
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::invalid("label_noise", "must lie in [0, 1]"));
        }
        if !self.teacher_bias.is_finite() {
            return Err(Error::invalid("teacher_bias", "must be finite"));
        }
        Ok(())
    }
}

/// Records how a frequency filter rewrote one feature's vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemapNote {
    pub feature_index: usize,
    pub original_vocab: usize,
    pub default_id: u32,
    pub ratio: f64,
    pub unique_ids: usize,
    pub kept_ids: usize,
}

/// Labels plus one id column per categorical feature, all of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub labels: Vec<u8>,
    pub columns: Vec<Vec<u32>>,
    pub feature_cards: Vec<usize>,
    pub remaps: Vec<RemapNote>,
}

impl Dataset {
    pub fn new(labels: Vec<u8>, columns: Vec<Vec<u32>>, feature_cards: Vec<usize>) -> Result<Self> {
        let ds = Self {
            labels,
            columns,
            feature_cards,
            remaps: Vec::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns.len() != self.feature_cards.len() {
            return Err(Error::Shape(format!(
                "{} columns but {} cardinalities",
                self.columns.len(),
                self.feature_cards.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y > 1) {
            return Err(Error::invalid(
                "labels",
                format!("label {bad} is not 0 or 1"),
            ));
        }
        for (i, (col, &card)) in self.columns.iter().zip(&self.feature_cards).enumerate() {
            if col.len() != self.labels.len() {
                return Err(Error::Shape(format!(
                    "column {i} has {} rows, labels have {}",
                    col.len(),
                    self.labels.len()
                )));
            }
            if let Some(&id) = col.iter().find(|&&id| id as usize >= card) {
                return Err(Error::IdOutOfRange {
                    feature: i,
                    id,
                    cardinality: card,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.columns.len()
    }

    /// Rows `range` as a new dataset sharing the vocabulary sizes.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            labels: self.labels[range.clone()].to_vec(),
            columns: self
                .columns
                .iter()
                .map(|c| c[range.clone()].to_vec())
                .collect(),
            feature_cards: self.feature_cards.clone(),
            remaps: self.remaps.clone(),
        }
    }

    /// Time-ordered split: the first `fraction` of rows, then the rest.
    pub fn split(&self, fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::invalid(
                "split_fraction",
                "must lie strictly between 0 and 1",
            ));
        }
        let cut = ((self.len() as f64) * fraction).round() as usize;
        if cut == 0 || cut >= self.len() {
            return Err(Error::invalid(
                "split_fraction",
                format!("leaves an empty side for {} rows", self.len()),
            ));
        }
        Ok((self.slice(0..cut), self.slice(cut..self.len())))
    }

    /// The `(label, ids)` tuple of row `t`.
    pub fn row(&self, t: usize) -> (u8, Vec<u32>) {
        (self.labels[t], self.columns.iter().map(|c| c[t]).collect())
    }
}

/// Cumulative Zipf mass over ids `0..cardinality`, id `j` having weight `(j+1)^-s`.
fn zipf_cdf(cardinality: usize, exponent: f64) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = (1..=cardinality)
        .map(|rank| {
            acc += (rank as f64).powf(-exponent);
            acc
        })
        .collect();
    let total = acc;
    for c in &mut cdf {
        *c /= total;
    }
    cdf
}

fn sample_cdf(cdf: &[f64], u: f64) -> u32 {
    let idx = cdf.partition_point(|&c| c <= u);
    idx.min(cdf.len() - 1) as u32
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Per-value teacher scores, one vector per feature.
fn teacher_scores(spec: &SynthSpec) -> Vec<Vec<f64>> {
    spec.features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.teacher_seed);
            rng.set_stream(i as u64);
            (0..f.cardinality)
                .map(|j| {
                    let scale = f.signal * ((j + 1) as f64).powf(-f.signal_decay);
                    scale * rng.sample::<f64, _>(StandardNormal)
                })
                .collect()
        })
        .collect()
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    generate_synthetic_with(spec, Parallelism::default())
}

/// Draws every sample from its own counter-keyed stream `(data_seed, t)`, so
/// the output does not depend on how samples are scheduled across threads.
pub fn generate_synthetic_with(spec: &SynthSpec, mode: Parallelism) -> Result<Dataset> {
    spec.validate()?;
    let cdfs: Vec<Vec<f64>> = spec
        .features
        .iter()
        .map(|f| zipf_cdf(f.cardinality, f.zipf_exponent))
        .collect();
    let scores = teacher_scores(spec);
    let s = spec.features.len();

    let rows: Vec<(u8, Vec<u32>)> = exec::map_indexed(mode, spec.num_samples, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.data_seed);
        rng.set_stream(t as u64);
        let ids: Vec<u32> = cdfs
            .iter()
            .map(|cdf| sample_cdf(cdf, rng.random::<f64>()))
            .collect();
        let logit = spec.teacher_bias
            + ids
                .iter()
                .zip(&scores)
                .map(|(&id, sc)| sc[id as usize])
                .sum::<f64>();
        let mut y = u8::from(rng.random::<f64>() < sigmoid(logit));
        if rng.random::<f64>() < spec.label_noise {
            y = 1 - y;
        }
        (y, ids)
    });

    let mut labels = Vec::with_capacity(spec.num_samples);
    let mut columns = vec![Vec::with_capacity(spec.num_samples); s];
    for (y, ids) in rows {
        labels.push(y);
        for (col, id) in columns.iter_mut().zip(ids) {
            col.push(id);
        }
    }
    Dataset::new(
        labels,
        columns,
        spec.features.iter().map(|f| f.cardinality).collect(),
    )
}

/// Reads `label,f0,...,f{S-1}` rows. Cardinalities are inferred as max id + 1.
pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    read_csv(file, has_header, &path.display().to_string())
}

pub fn read_csv<R: std::io::Read>(
    reader: R,
    has_header: bool,
    source_name: &str,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let parse_err = |line: u64, reason: String| Error::Parse {
        source_name: source_name.to_string(),
        line,
        reason,
    };

    let mut labels = Vec::new();
    let mut columns: Vec<Vec<u32>> = Vec::new();
    let mut width = None;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(parse_err(
                line,
                format!("expected {w} fields, found {}", record.len()),
            ));
        }
        if w < 2 {
            return Err(parse_err(
                line,
                "need a label and at least one feature".into(),
            ));
        }
        if columns.is_empty() {
            columns = vec![Vec::new(); w - 1];
        }
        let label = match record.get(0).unwrap_or("") {
            "0" => 0u8,
            "1" => 1u8,
            other => return Err(parse_err(line, format!("label {other:?} is not 0 or 1"))),
        };
        labels.push(label);
        for (i, field) in record.iter().skip(1).enumerate() {
            let id: u32 = field.parse().map_err(|_| {
                parse_err(
                    line,
                    format!(
                        "field {} ({field:?}) is not a non-negative integer id",
                        i + 1
                    ),
                )
            })?;
            columns[i].push(id);
        }
    }
    if labels.is_empty() {
        return Err(Error::Empty("csv file"));
    }
    let feature_cards = columns
        .iter()
        .map(|c| c.iter().copied().max().map_or(0, |m| m as usize + 1))
        .collect();
    Dataset::new(labels, columns, feature_cards)
}

pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>, header: bool) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = std::io::BufWriter::new(file);
    if header {
        let names: Vec<String> = (0..ds.num_features()).map(|i| format!("f{i}")).collect();
        writeln!(out, "label,{}", names.join(","))?;
    }
    for t in 0..ds.len() {
        write!(out, "{}", ds.labels[t])?;
        for col in &ds.columns {
            write!(out, ",{}", col[t])?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Ids of one column ranked by descending frequency, ties by ascending id.
pub fn frequency_ranking(column: &[u32]) -> Vec<(u32, usize)> {
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for &id in column {
        *counts.entry(id).or_default() += 1;
    }
    let mut ranked: Vec<(u32, usize)> = counts.into_iter().collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Keeps the `ceil(r * U)` most frequent of the `U` ids present in the
/// column and maps every other occurrence to a fresh default id appended to
/// the vocabulary.
pub fn filter_by_frequency(ds: &Dataset, feature_index: usize, r: f64) -> Result<Dataset> {
    if feature_index >= ds.num_features() {
        return Err(Error::invalid(
            "feature_index",
            format!(
                "{feature_index} out of range for {} features",
                ds.num_features()
            ),
        ));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::invalid("ratio", format!("{r} is outside [0, 1]")));
    }
    let column = &ds.columns[feature_index];
    let ranked = frequency_ranking(column);
    let unique = ranked.len();
    // The epsilon keeps products such as 0.1 * 30 from rounding up past 3.
    let keep = ((r * unique as f64 - 1e-9).ceil().max(0.0) as usize).min(unique);
    let original_vocab = ds.feature_cards[feature_index];
    let default_id = u32::try_from(original_vocab)
        .map_err(|_| Error::invalid("feature_cards", "vocabulary too large for a default id"))?;

    let mut kept = vec![false; original_vocab];
    for &(id, _) in &ranked[..keep] {
        kept[id as usize] = true;
    }
    let new_column = column
        .iter()
        .map(|&id| if kept[id as usize] { id } else { default_id })
        .collect();

    let mut out = ds.clone();
    out.columns[feature_index] = new_column;
    out.feature_cards[feature_index] = original_vocab + 1;
    out.remaps.push(RemapNote {
        feature_index,
        original_vocab,
        default_id,
        ratio: r,
        unique_ids: unique,
        kept_ids: keep,
    });
    Ok(out)
}

/// A mini-batch of aligned labels and per-feature ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub labels: Vec<u8>,
    pub ids: Vec<Vec<u32>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn from_rows(rows: &[(u8, Vec<u32>)]) -> Self {
        let s = rows.first().map_or(0, |r| r.1.len());
        let mut ids = vec![Vec::with_capacity(rows.len()); s];
        let mut labels = Vec::with_capacity(rows.len());
        for (y, row) in rows {
            labels.push(*y);
            for (col, &id) in ids.iter_mut().zip(row) {
                col.push(id);
            }
        }
        Self { labels, ids }
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Batch {
        Batch {
            labels: self.labels[range.clone()].to_vec(),
            ids: self.ids.iter().map(|c| c[range.clone()].to_vec()).collect(),
        }
    }
}

/// Sample order for one epoch: identity, or a permutation seeded by
/// `shuffle_seed + epoch`.
pub fn epoch_order(len: usize, shuffle_seed: Option<u64>, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(epoch));
        order.shuffle(&mut rng);
    }
    order
}

pub struct BatchIter<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(Batch {
            labels: idx.iter().map(|&t| self.ds.labels[t]).collect(),
            ids: self
                .ds
                .columns
                .iter()
                .map(|c| idx.iter().map(|&t| c[t]).collect())
                .collect(),
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

impl ExactSizeIterator for BatchIter<'_> {}

/// Batches of `batch_size` rows; the final partial batch is kept.
pub fn batch_iter(
    ds: &Dataset,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    epoch: u64,
) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be at least 1"));
    }
    Ok(BatchIter {
        ds,
        order: epoch_order(ds.len(), shuffle_seed, epoch),
        batch_size,
        pos: 0,
    })
}
