//! Embedding tables and the bias-free ReLU MLP that scores their
//! concatenation, with hand-written backpropagation.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::exec::{self, Parallelism};

/// Samples per work unit when a batch is split across threads.
pub const CHUNK_SIZE: usize = 128;

/// One categorical feature's parameters plus the per-row optimizer state
/// that travels with them.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub rows: Array2<f64>,
    pub moment1: Array2<f64>,
    pub moment2: Array2<f64>,
    /// Last step at which each row was updated; 0 means never.
    pub lvs: Vec<u64>,
    pub touch_count: Vec<u64>,
}

impl EmbeddingTable {
    pub fn zeros(cardinality: usize, dim: usize) -> Self {
        Self {
            rows: Array2::zeros((cardinality, dim)),
            moment1: Array2::zeros((cardinality, dim)),
            moment2: Array2::zeros((cardinality, dim)),
            lvs: vec![0; cardinality],
            touch_count: vec![0; cardinality],
        }
    }

    pub fn cardinality(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// Zero the rows and every piece of per-row optimizer state.
    pub fn reset(&mut self) {
        self.rows.fill(0.0);
        self.moment1.fill(0.0);
        self.moment2.fill(0.0);
        self.lvs.fill(0);
        self.touch_count.fill(0);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Embedding width per feature.
    pub embedding_dims: Vec<usize>,
    /// Hidden layer widths; the output layer of width 1 is implicit.
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub bias: bool,
}

impl ArchSpec {
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.embedding_dims.iter().sum()];
        sizes.extend(&self.hidden);
        sizes.push(1);
        sizes
    }
}

/// Dense weights `W_1..W_L`, each stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub weights: Vec<Array2<f64>>,
    pub biases: Option<Vec<Array1<f64>>>,
}

impl MlpParams {
    pub fn new(weights: Vec<Array2<f64>>, biases: Option<Vec<Array1<f64>>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Shape("an MLP needs at least one layer".into()));
        }
        for (l, pair) in weights.windows(2).enumerate() {
            if pair[1].ncols() != pair[0].nrows() {
                return Err(Error::Shape(format!(
                    "layer {} takes {} inputs but layer {} emits {}",
                    l + 2,
                    pair[1].ncols(),
                    l + 1,
                    pair[0].nrows()
                )));
            }
        }
        if weights.last().map(|w| w.nrows()) != Some(1) {
            return Err(Error::Shape(
                "the last layer must have a single output".into(),
            ));
        }
        if let Some(b) = &biases {
            if b.len() != weights.len() || b.iter().zip(&weights).any(|(b, w)| b.len() != w.nrows())
            {
                return Err(Error::Shape(
                    "bias vectors do not match layer widths".into(),
                ));
            }
        }
        Ok(Self { weights, biases })
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn frobenius_norms(&self) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect()
    }
}

/// Zero embeddings and Glorot-uniform MLP weights drawn from `init_seed`.
pub fn init_model(
    arch: &ArchSpec,
    feature_cards: &[usize],
    init_seed: u64,
) -> Result<(Vec<EmbeddingTable>, MlpParams)> {
    if arch.embedding_dims.len() != feature_cards.len() {
        return Err(Error::Shape(format!(
            "{} embedding dims for {} features",
            arch.embedding_dims.len(),
            feature_cards.len()
        )));
    }
    if arch
        .embedding_dims
        .iter()
        .chain(&arch.hidden)
        .any(|&d| d == 0)
    {
        return Err(Error::invalid(
            "arch",
            "layer and embedding widths must be positive",
        ));
    }
    let tables = feature_cards
        .iter()
        .zip(&arch.embedding_dims)
        .map(|(&n, &d)| EmbeddingTable::zeros(n, d))
        .collect();

    let sizes = arch.layer_sizes();
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let weights: Vec<Array2<f64>> = sizes
        .windows(2)
        .map(|io| {
            let (fan_in, fan_out) = (io[0], io[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-bound..=bound))
        })
        .collect();
    let biases = arch
        .bias
        .then(|| weights.iter().map(|w| Array1::zeros(w.nrows())).collect());
    Ok((tables, MlpParams::new(weights, biases)?))
}

/// Row `t` of the result is the concatenation of each table's row for the
/// sample's id in that feature.
pub fn embed_lookup(tables: &[EmbeddingTable], batch: &Batch) -> Result<Array2<f64>> {
    if batch.ids.len() != tables.len() {
        return Err(Error::Shape(format!(
            "batch has {} features, model has {}",
            batch.ids.len(),
            tables.len()
        )));
    }
    let width: usize = tables.iter().map(|t| t.dim()).sum();
    let mut out = Array2::zeros((batch.len(), width));
    let mut offset = 0;
    for (i, (table, ids)) in tables.iter().zip(&batch.ids).enumerate() {
        let d = table.dim();
        for (t, &id) in ids.iter().enumerate() {
            if id as usize >= table.cardinality() {
                return Err(Error::IdOutOfRange {
                    feature: i,
                    id,
                    cardinality: table.cardinality(),
                });
            }
            out.slice_mut(s![t, offset..offset + d])
                .assign(&table.rows.row(id as usize));
        }
        offset += d;
    }
    Ok(out)
}

/// Activations kept from a forward pass for use by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Array2<f64>,
    /// Pre-activation of every layer, output layer included.
    pub pre: Vec<Array2<f64>>,
    /// ReLU outputs of the hidden layers.
    pub act: Vec<Array2<f64>>,
}

pub fn forward(params: &MlpParams, embedded: Array2<f64>) -> Result<(Array1<f64>, ForwardCache)> {
    if embedded.ncols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "input width {} but first layer expects {}",
            embedded.ncols(),
            params.input_dim()
        )));
    }
    let layers = params.num_layers();
    let mut pre = Vec::with_capacity(layers);
    let mut act: Vec<Array2<f64>> = Vec::with_capacity(layers - 1);
    for (l, w) in params.weights.iter().enumerate() {
        let h: ArrayView2<f64> = if l == 0 {
            embedded.view()
        } else {
            act[l - 1].view()
        };
        let mut z = h.dot(&w.t());
        if let Some(biases) = &params.biases {
            z += &biases[l];
        }
        if l + 1 < layers {
            act.push(z.mapv(|v| v.max(0.0)));
        }
        pre.push(z);
    }
    let logits = pre[layers - 1].column(0).to_owned();
    Ok((
        logits,
        ForwardCache {
            input: embedded,
            pre,
            act,
        },
    ))
}

/// Numerically stable binary cross-entropy on logits, summed and scaled.
fn bce_terms(logits: &[f64], labels: &[u8], scale: f64) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grads = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let y = f64::from(y);
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            (sigmoid(z) - y) * scale
        })
        .collect();
    (loss * scale, grads)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy and its gradient with respect to each logit.
pub fn loss_bce(logits: &[f64], labels: &[u8]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Empty("batch"));
    }
    Ok(bce_terms(logits, labels, 1.0 / logits.len() as f64))
}

/// Gradient rows for the ids one feature saw in a batch, sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct TableGrad {
    pub rows: Vec<u32>,
    pub grads: Array2<f64>,
}

impl TableGrad {
    fn empty(dim: usize) -> Self {
        Self {
            rows: Vec::new(),
            grads: Array2::zeros((0, dim)),
        }
    }

    /// Row gradient for `id`, if the id was present.
    pub fn get(&self, id: u32) -> Option<ndarray::ArrayView1<'_, f64>> {
        self.rows.binary_search(&id).ok().map(|i| self.grads.row(i))
    }

    fn merge(&self, other: &TableGrad) -> TableGrad {
        let dim = self.grads.ncols();
        let mut rows = Vec::with_capacity(self.rows.len() + other.rows.len());
        let mut data: Vec<f64> = Vec::with_capacity((self.rows.len() + other.rows.len()) * dim);
        let (mut i, mut j) = (0, 0);
        while i < self.rows.len() || j < other.rows.len() {
            let a = self.rows.get(i).copied();
            let b = other.rows.get(j).copied();
            match (a, b) {
                (Some(x), Some(y)) if x == y => {
                    rows.push(x);
                    data.extend(
                        self.grads
                            .row(i)
                            .iter()
                            .zip(other.grads.row(j))
                            .map(|(p, q)| p + q),
                    );
                    i += 1;
                    j += 1;
                }
                (Some(x), Some(y)) if x < y => {
                    rows.push(x);
                    data.extend(self.grads.row(i));
                    i += 1;
                }
                (Some(x), None) => {
                    rows.push(x);
                    data.extend(self.grads.row(i));
                    i += 1;
                }
                (_, Some(y)) => {
                    rows.push(y);
                    data.extend(other.grads.row(j));
                    j += 1;
                }
                (None, None) => unreachable!(),
            }
        }
        let n = rows.len();
        TableGrad {
            rows,
            grads: Array2::from_shape_vec((n, dim), data).expect("merged gradient shape"),
        }
    }
}

/// Gradients of the batch loss: dense for the MLP, row-sparse for tables.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGrads {
    pub tables: Vec<TableGrad>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Option<Vec<Array1<f64>>>,
}

impl SparseGrads {
    /// Adds `other` into `self`. Row sets are merged by id.
    pub fn accumulate(&mut self, other: &SparseGrads) {
        for (a, b) in self.tables.iter_mut().zip(&other.tables) {
            *a = a.merge(b);
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (&mut self.biases, &other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// First non-finite entry, described for diagnostics.
    pub fn find_non_finite(&self) -> Option<String> {
        for (i, tg) in self.tables.iter().enumerate() {
            for (r, row) in tg.rows.iter().zip(tg.grads.rows()) {
                if row.iter().any(|g| !g.is_finite()) {
                    return Some(format!("feature {i} row {r}"));
                }
            }
        }
        for (l, w) in self.weights.iter().enumerate() {
            if w.iter().any(|g| !g.is_finite()) {
                return Some(format!("weight matrix {}", l + 1));
            }
        }
        if let Some(bs) = &self.biases {
            for (l, b) in bs.iter().enumerate() {
                if b.iter().any(|g| !g.is_finite()) {
                    return Some(format!("bias vector {}", l + 1));
                }
            }
        }
        None
    }
}

/// Exact gradients of the loss whose logit gradient is `dlogits`.
/// Repeated ids within the batch sum into one row.
pub fn backward(
    params: &MlpParams,
    tables: &[EmbeddingTable],
    batch: &Batch,
    cache: &ForwardCache,
    dlogits: &[f64],
) -> Result<SparseGrads> {
    let n = batch.len();
    if cache.input.nrows() != n || dlogits.len() != n || batch.ids.len() != tables.len() {
        return Err(Error::Shape(format!(
            "cache has {} rows, batch {}, dlogits {}",
            cache.input.nrows(),
            n,
            dlogits.len()
        )));
    }
    let layers = params.num_layers();
    let mut weights = vec![Array2::zeros((0, 0)); layers];
    let mut biases = params
        .biases
        .as_ref()
        .map(|_| vec![Array1::zeros(0); layers]);

    let mut dz = Array2::from_shape_vec((n, 1), dlogits.to_vec()).expect("column shape");
    let mut dinput = None;
    for l in (0..layers).rev() {
        let h = if l == 0 {
            cache.input.view()
        } else {
            cache.act[l - 1].view()
        };
        weights[l] = dz.t().dot(&h);
        if let Some(b) = &mut biases {
            b[l] = dz.sum_axis(Axis(0));
        }
        let dh = dz.dot(&params.weights[l]);
        if l == 0 {
            dinput = Some(dh);
        } else {
            // ReLU'(0) is taken as 1 so an all-zero start still sends
            // gradient to the embedding rows.
            let mut next = dh;
            next.zip_mut_with(&cache.pre[l - 1], |g, &z| {
                if z < 0.0 {
                    *g = 0.0;
                }
            });
            dz = next;
        }
    }
    let dinput = dinput.expect("at least one layer");

    let mut table_grads = Vec::with_capacity(tables.len());
    let mut offset = 0;
    for (table, ids) in tables.iter().zip(&batch.ids) {
        let d = table.dim();
        let mut order: Vec<(u32, usize)> = ids.iter().copied().zip(0..).collect();
        order.sort_unstable();
        let mut rows = Vec::new();
        let mut data: Vec<f64> = Vec::new();
        for (id, t) in order {
            let g = dinput.slice(s![t, offset..offset + d]);
            if rows.last() == Some(&id) {
                let start = data.len() - d;
                for (acc, v) in data[start..].iter_mut().zip(g) {
                    *acc += v;
                }
            } else {
                rows.push(id);
                data.extend(g);
            }
        }
        let count = rows.len();
        table_grads.push(if count == 0 {
            TableGrad::empty(d)
        } else {
            TableGrad {
                rows,
                grads: Array2::from_shape_vec((count, d), data).expect("row gradient shape"),
            }
        });
        offset += d;
    }
    Ok(SparseGrads {
        tables: table_grads,
        weights,
        biases,
    })
}

/// Mean loss and gradients for a batch. The batch is cut into fixed
/// `CHUNK_SIZE` pieces that may run in parallel; partial results are summed
/// in chunk order, so both modes give identical bits.
pub fn compute_gradients(
    tables: &[EmbeddingTable],
    params: &MlpParams,
    batch: &Batch,
    mode: Parallelism,
) -> Result<(f64, SparseGrads)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let ranges = exec::chunk_ranges(batch.len(), CHUNK_SIZE);
    let parts = exec::map_slice(mode, &ranges, |range| -> Result<(f64, SparseGrads)> {
        let chunk = batch.slice(range.clone());
        let embedded = embed_lookup(tables, &chunk)?;
        let (logits, cache) = forward(params, embedded)?;
        let (loss, dlogits) =
            bce_terms(logits.as_slice().expect("contiguous"), &chunk.labels, scale);
        let grads = backward(params, tables, &chunk, &cache, &dlogits)?;
        Ok((loss, grads))
    });
    let mut parts = parts.into_iter();
    let (mut loss, mut grads) = parts.next().expect("non-empty batch")?;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grads.accumulate(&g);
    }
    Ok((loss, grads))
}

/// Logits for every row of a dataset.
pub fn predict_logits(
    tables: &[EmbeddingTable],
    params: &MlpParams,
    ds: &Dataset,
    mode: Parallelism,
) -> Result<Vec<f64>> {
    let ranges = exec::chunk_ranges(ds.len(), 4 * CHUNK_SIZE);
    let parts = exec::map_slice(mode, &ranges, |range| -> Result<Vec<f64>> {
        let batch = Batch {
            labels: ds.labels[range.clone()].to_vec(),
            ids: ds
                .columns
                .iter()
                .map(|c| c[range.clone()].to_vec())
                .collect(),
        };
        let (logits, _) = forward(params, embed_lookup(tables, &batch)?)?;
        Ok(logits.to_vec())
    });
    let mut out = Vec::with_capacity(ds.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"ADRGSNP1";

/// Writes every parameter matrix: the 8-byte magic `ADRGSNP1`, a `u32`
/// matrix count, then per matrix `u64` rows, `u64` cols and the row-major
/// `f64` payload, all little-endian. Tables come first, then MLP weights,
/// then biases (as `n x 1`) when present.
pub fn write_snapshot(
    path: impl AsRef<Path>,
    tables: &[EmbeddingTable],
    params: &MlpParams,
) -> Result<()> {
    let mut mats: Vec<Array2<f64>> = tables.iter().map(|t| t.rows.clone()).collect();
    mats.extend(params.weights.iter().cloned());
    if let Some(bs) = &params.biases {
        mats.extend(bs.iter().map(|b| b.clone().insert_axis(Axis(1))));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(SNAPSHOT_MAGIC)?;
    out.write_all(&(mats.len() as u32).to_le_bytes())?;
    for m in &mats {
        out.write_all(&(m.nrows() as u64).to_le_bytes())?;
        out.write_all(&(m.ncols() as u64).to_le_bytes())?;
        for v in m.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads back the matrices written by [`write_snapshot`], in file order.
pub fn read_snapshot(path: impl AsRef<Path>) -> Result<Vec<Array2<f64>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |reason: &str| Error::invalid("snapshot", reason);
    if bytes.len() < 12 || &bytes[..8] != SNAPSHOT_MAGIC {
        return Err(bad("missing magic header"));
    }
    let mut pos = 8;
    let mut take = |n: usize| -> Result<&[u8]> {
        let chunk = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(chunk)
    };
    let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    let mut mats = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let r = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let c = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let payload = take(r * c * 8)?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        mats.push(Array2::from_shape_vec((r, c), data).map_err(|_| bad("bad dims"))?);
    }
    Ok(mats)
}
