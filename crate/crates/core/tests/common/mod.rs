#![allow(dead_code)]

use adareg::datagen::Batch;
use adareg::metrics::auc;
use adareg::model::{
    compute_gradients, init_model, ArchSpec, EmbeddingTable, MlpParams, SparseGrads, TableGrad,
};
use adareg::optim::{Family, OptimState, Optimizer, OptimizerConfig};
use adareg::Parallelism;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Worst relative error between analytic and central-difference gradients
/// on a random tiny model: 2 features of 5 ids, width 3, one hidden layer,
/// batch of 4.
pub fn gradient_check(seed: u64, bias: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = ArchSpec {
        embedding_dims: vec![3, 3],
        hidden: vec![rng.random_range(2..6)],
        bias,
    };
    let (mut tables, mut mlp) = init_model(&arch, &[5, 5], seed).unwrap();
    for t in &mut tables {
        t.rows.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    }
    if let Some(bs) = &mut mlp.biases {
        for b in bs {
            b.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }
    let batch = Batch {
        labels: (0..4).map(|_| rng.random_range(0..2u8)).collect(),
        ids: (0..2)
            .map(|_| (0..4).map(|_| rng.random_range(0..5u32)).collect())
            .collect(),
    };
    let (_, grads) = compute_gradients(&tables, &mlp, &batch, Parallelism::Sequential).unwrap();
    let loss = |tables: &[EmbeddingTable], mlp: &MlpParams| {
        compute_gradients(tables, mlp, &batch, Parallelism::Sequential)
            .unwrap()
            .0
    };
    let h = 1e-4;
    let rel = |analytic: f64, numeric: f64| {
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-7 {
            (analytic - numeric).abs()
        } else {
            (analytic - numeric).abs() / scale
        }
    };
    let mut worst: f64 = 0.0;

    for f in 0..tables.len() {
        for id in 0..5u32 {
            for c in 0..3 {
                let orig = tables[f].rows[[id as usize, c]];
                tables[f].rows[[id as usize, c]] = orig + h;
                let up = loss(&tables, &mlp);
                tables[f].rows[[id as usize, c]] = orig - h;
                let down = loss(&tables, &mlp);
                tables[f].rows[[id as usize, c]] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.tables[f].get(id).map_or(0.0, |g| g[c]);
                worst = worst.max(rel(analytic, numeric));
            }
        }
    }
    for l in 0..mlp.weights.len() {
        let (r, c) = mlp.weights[l].dim();
        for i in 0..r {
            for j in 0..c {
                let orig = mlp.weights[l][[i, j]];
                mlp.weights[l][[i, j]] = orig + h;
                let up = loss(&tables, &mlp);
                mlp.weights[l][[i, j]] = orig - h;
                let down = loss(&tables, &mlp);
                mlp.weights[l][[i, j]] = orig;
                worst = worst.max(rel(grads.weights[l][[i, j]], (up - down) / (2.0 * h)));
            }
        }
    }
    if bias {
        let gb = grads.biases.as_ref().unwrap();
        for l in 0..mlp.weights.len() {
            for i in 0..gb[l].len() {
                let orig = mlp.biases.as_ref().unwrap()[l][i];
                mlp.biases.as_mut().unwrap()[l][i] = orig + h;
                let up = loss(&tables, &mlp);
                mlp.biases.as_mut().unwrap()[l][i] = orig - h;
                let down = loss(&tables, &mlp);
                mlp.biases.as_mut().unwrap()[l][i] = orig;
                worst = worst.max(rel(gb[l][i], (up - down) / (2.0 * h)));
            }
        }
    }
    worst
}

/// A dense-only model: no embedding tables, a 4-3-1 MLP.
pub fn dense_only_model(seed: u64) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MlpParams::new(
        vec![
            Array2::from_shape_simple_fn((3, 4), || rng.random_range(-1.0..1.0)),
            Array2::from_shape_simple_fn((1, 3), || rng.random_range(-1.0..1.0)),
        ],
        None,
    )
    .unwrap()
}

/// Runs `cfg` on a scripted sequence of random dense gradients and returns
/// the final weights.
pub fn run_scripted(cfg: &OptimizerConfig, seed: u64, steps: usize) -> Vec<Array2<f64>> {
    let mut mlp = dense_only_model(seed);
    let mut opt = Optimizer::new(cfg.clone(), &mlp).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for _ in 0..steps {
        let grads = SparseGrads {
            tables: vec![],
            weights: mlp
                .weights
                .iter()
                .map(|w| Array2::from_shape_simple_fn(w.raw_dim(), || rng.random_range(-2.0..2.0)))
                .collect(),
            biases: None,
        };
        opt.step(&mut [], &mut mlp, &grads).unwrap();
    }
    mlp.weights
}

/// Applies one step to a single scalar weight `theta` with gradient `g`.
pub fn single_step(cfg: &OptimizerConfig, theta: f64, g: f64) -> f64 {
    let mut mlp = MlpParams::new(vec![Array2::from_elem((1, 1), theta)], None).unwrap();
    let mut opt = Optimizer::new(cfg.clone(), &mlp).unwrap();
    let grads = SparseGrads {
        tables: vec![],
        weights: vec![Array2::from_elem((1, 1), g)],
        biases: None,
    };
    opt.step(&mut [], &mut mlp, &grads).unwrap();
    mlp.weights[0][[0, 0]]
}

/// Same as [`single_step`] but for an embedding row at its first touch.
pub fn single_row_step(cfg: &OptimizerConfig, theta: f64, g: f64) -> f64 {
    let mut tables = vec![EmbeddingTable::zeros(1, 1)];
    tables[0].rows[[0, 0]] = theta;
    let mut mlp = MlpParams::new(vec![Array2::zeros((1, 1))], None).unwrap();
    let mut opt = Optimizer::new(cfg.clone(), &mlp).unwrap();
    let grads = SparseGrads {
        tables: vec![TableGrad {
            rows: vec![0],
            grads: Array2::from_elem((1, 1), g),
        }],
        weights: vec![Array2::zeros((1, 1))],
        biases: None,
    };
    opt.step(&mut tables, &mut mlp, &grads).unwrap();
    tables[0].rows[[0, 0]]
}

/// Outcome of the decay-bound fuzz.
#[derive(Debug, Default)]
pub struct FuzzOutcome {
    pub checked: u64,
    pub violations: u64,
    pub worst_ratio: f64,
}

/// Fuzzes `||new|| <= (1-alpha)^I ||old|| + ||update||` on every touched row.
/// Rows are touched at random so intervals vary widely; the update term is
/// rebuilt from the post-step moments.
pub fn decay_bound_fuzz(family: Family, alpha: f64, steps: u64, seed: u64) -> FuzzOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = 64;
    let dim = 4;
    let mut tables = vec![EmbeddingTable::zeros(rows, dim)];
    tables[0].rows.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    let mut mlp = MlpParams::new(vec![Array2::zeros((1, dim))], None).unwrap();
    let cfg = OptimizerConfig::new(family).with_alpha(alpha);
    let mut state = OptimState::new(&mlp);
    let mut out = FuzzOutcome::default();
    for _ in 0..steps {
        // Sparse touches: each row with its own probability so some rows
        // go idle for hundreds of steps.
        let touched: Vec<u32> = (0..rows as u32)
            .filter(|&j| rng.random::<f64>() < 0.5 / (1.0 + j as f64))
            .collect();
        let scale = 10f64.powf(rng.random_range(-3.0..1.0));
        let g = Array2::from_shape_simple_fn((touched.len(), dim), || {
            scale * rng.random_range(-1.0..1.0)
        });
        let grads = SparseGrads {
            tables: vec![TableGrad {
                rows: touched.clone(),
                grads: g.clone(),
            }],
            weights: vec![Array2::zeros((1, dim))],
            biases: None,
        };
        let before = tables[0].clone();
        state.step.advance();
        let k = state.step.get();
        match family {
            Family::AdamAr => {
                adareg::optim::adam_ar_step(&mut tables, &mut mlp, &mut state, &grads, &cfg)
            }
            Family::AdagradAr => {
                adareg::optim::adagrad_ar_step(&mut tables, &mut mlp, &mut state, &grads, &cfg)
            }
            _ => panic!("adaptive families only"),
        }
        .unwrap();
        let t = &tables[0];
        for (r, &id) in touched.iter().enumerate() {
            let j = id as usize;
            let interval = k - before.lvs[j] - 1;
            let old: Vec<f64> = before.rows.row(j).to_vec();
            let new: Vec<f64> = t.rows.row(j).to_vec();
            let update: Vec<f64> = (0..dim)
                .map(|c| {
                    if family == Family::AdamAr {
                        let n = t.touch_count[j] as i32;
                        let m_hat = t.moment1[[j, c]] / (1.0 - cfg.beta1.powi(n));
                        let v_hat = t.moment2[[j, c]] / (1.0 - cfg.beta2.powi(n));
                        cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps)
                    } else {
                        cfg.learning_rate * g[[r, c]] / (t.moment2[[j, c]].sqrt() + cfg.eps)
                    }
                })
                .collect();
            out.checked += 1;
            if !adareg::optim::decay_bound_holds(&old, &new, &update, alpha, interval) {
                out.violations += 1;
            }
            let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let rhs = (1.0 - alpha).powi(interval as i32) * norm(&old) + norm(&update);
            if rhs > 0.0 {
                out.worst_ratio = out.worst_ratio.max(norm(&new) / rhs);
            }
        }
    }
    out
}

/// The `(alpha, I)` grid: 100 log-spaced rates in `[1e-7, 0.999]` times 100
/// intervals spread over `[0, 1e6]`.
pub fn bernoulli_grid() -> Vec<(f64, u64)> {
    let alphas: Vec<f64> = (0..100)
        .map(|i| 10f64.powf(-7.0 + i as f64 * (0.999f64.log10() + 7.0) / 99.0))
        .collect();
    let intervals: Vec<u64> = (0..100)
        .map(|i| {
            if i == 0 {
                0
            } else {
                (10f64.powf(6.0 * i as f64 / 99.0)).round() as u64
            }
        })
        .collect();
    alphas
        .iter()
        .flat_map(|&a| intervals.iter().map(move |&i| (a, i)))
        .collect()
}

/// `(1-alpha)^I >= 1 - min(1, alpha I)`, evaluated in log space for large I.
pub fn bernoulli_holds(alpha: f64, interval: u64) -> bool {
    let lhs = (interval as f64 * (-alpha).ln_1p()).exp();
    let rhs = 1.0 - (alpha * interval as f64).min(1.0);
    lhs >= rhs - 1e-15
}

/// Pairwise AUC with ties counted as half.
pub fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// A random two-class instance with frequent ties.
pub fn auc_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..=200);
    let levels = rng.random_range(1..=n.max(2));
    let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let scores = (0..n)
        .map(|_| rng.random_range(0..levels) as f64 / levels as f64 - 0.5)
        .collect();
    (scores, labels)
}

/// Checks rank-sum AUC against brute force (exact equality) and under a
/// strictly increasing transform, on `count` random instances.
pub fn auc_oracle(count: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let (scores, labels) = auc_instance(&mut rng);
        let fast = auc(&scores, &labels).map_err(|e| e.to_string())?;
        let slow = brute_auc(&scores, &labels);
        if fast != slow {
            return Err(format!("instance {i}: rank-sum {fast} vs pairwise {slow}"));
        }
        let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 7.0).collect();
        let again = auc(&transformed, &labels).map_err(|e| e.to_string())?;
        if again != fast {
            return Err(format!(
                "instance {i}: transform changed AUC {fast} -> {again}"
            ));
        }
    }
    Ok(())
}
