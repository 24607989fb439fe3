//! Multi-run experiments: the α sweep and the four-way ablation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::databench::Splits;
use crate::error::{Error, Result};
use crate::training::{train, AdjacencyRow, Metrics, NoHooks, TrainConfig, Variant};

/// Environment variable capping the number of concurrent training runs.
pub const THREADS_ENV: &str = "ORD2SEQ_THREADS";

/// α actually used for sweep entries of 0.
pub const ALPHA_ZERO_SUBSTITUTE: f64 = 1e-6;

pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let k: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&k| k >= 1)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        builder = builder.num_threads(k);
    }
    builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Runs every config independently and returns results in input order.
fn run_all(configs: &[TrainConfig], splits: &Splits) -> Result<Vec<Result<(Metrics, usize)>>> {
    let pool = thread_pool()?;
    Ok(pool.install(|| {
        configs
            .par_iter()
            .map(|cfg| train(cfg, splits, &mut NoHooks).map(|o| (o.test, o.best_epoch)))
            .collect()
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub mae: f64,
}

/// Resolves a requested α to the value trained with, or `None` if it lies
/// outside `[0, 1]`.
pub fn sweep_alpha_value(alpha: f64) -> Option<f64> {
    if alpha == 0.0 {
        Some(ALPHA_ZERO_SUBSTITUTE)
    } else if alpha > 0.0 && alpha <= 1.0 {
        Some(alpha)
    } else {
        None
    }
}

/// Trains the full variant for every `(alpha, seed)` pair. Rows are sorted
/// by `(alpha, seed)` and report the requested α.
pub fn run_sweep(base: &TrainConfig, splits: &Splits, alphas: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one alpha and one seed".into()));
    }
    let mut grid: Vec<f64> = alphas.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let mut seeds = seeds.to_vec();
    seeds.sort_unstable();
    seeds.dedup();
    let mut pairs = Vec::new();
    let mut configs = Vec::new();
    for &alpha in &grid {
        let used = sweep_alpha_value(alpha).ok_or_else(|| Error::Config(format!("alpha {alpha} outside [0, 1]")))?;
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.variant = Variant::Full;
            cfg.alpha = used;
            cfg.seed = seed;
            cfg.validate()?;
            pairs.push((alpha, seed));
            configs.push(cfg);
        }
    }
    run_all(&configs, splits)?
        .into_iter()
        .zip(pairs)
        .map(|(r, (alpha, seed))| {
            let (m, _) = r?;
            Ok(SweepRow {
                alpha,
                seed,
                accuracy: m.accuracy,
                mae: m.mae,
            })
        })
        .collect()
}

/// Mean curve of a sweep: `(alpha, mean accuracy, mean MAE)` per grid value.
pub fn sweep_means(rows: &[SweepRow]) -> Vec<(f64, f64, f64)> {
    let mut out: Vec<(f64, f64, f64, usize)> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some(last) if last.0 == r.alpha => {
                last.1 += r.accuracy;
                last.2 += r.mae;
                last.3 += 1;
            }
            _ => out.push((r.alpha, r.accuracy, r.mae, 1)),
        }
    }
    out.into_iter().map(|(a, acc, mae, k)| (a, acc / k as f64, mae / k as f64)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (denominator `k - 1`).
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let k = values.len() as f64;
        let mean = values.iter().sum::<f64>() / k;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        Summary { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub accuracy: f64,
    pub mae: f64,
    pub best_epoch: usize,
    pub adjacency: Vec<AdjacencyRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantEntry {
    pub variant: Variant,
    /// Mask factor the variant was trained and decoded with.
    pub alpha: f64,
    pub accuracy: Summary,
    pub mae: Summary,
    /// Per-category proportions averaged over seeds; `count` is summed.
    pub adjacency: Vec<AdjacencyRow>,
    pub runs: Vec<SeedRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub categories: usize,
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantEntry>,
}

impl AblationReport {
    pub fn entry(&self, variant: Variant) -> Option<&VariantEntry> {
        self.variants.iter().find(|e| e.variant == variant)
    }
}

pub const MIN_ABLATION_SEEDS: usize = 3;

fn mean_adjacency(runs: &[SeedRecord], n: usize) -> Vec<AdjacencyRow> {
    let k = runs.len() as f64;
    (0..n)
        .map(|c| {
            let rows = runs.iter().map(|r| &r.adjacency[c]);
            AdjacencyRow {
                category: c,
                count: rows.clone().map(|a| a.count).sum(),
                correct: rows.clone().map(|a| a.correct).sum::<f64>() / k,
                adjacent: rows.clone().map(|a| a.adjacent).sum::<f64>() / k,
                other: rows.map(|a| a.other).sum::<f64>() / k,
            }
        })
        .collect()
}

/// Trains all four variants over `seeds`, one variant at a time. On failure
/// the error lists the variants that completed.
pub fn run_ablation(base: &TrainConfig, splits: &Splits, seeds: &[u64]) -> Result<AblationReport> {
    let mut seeds = seeds.to_vec();
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.len() < MIN_ABLATION_SEEDS {
        return Err(Error::Config(format!(
            "ablation needs at least {MIN_ABLATION_SEEDS} distinct seeds, got {}",
            seeds.len()
        )));
    }
    base.validate()?;
    let mut variants = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let configs: Vec<TrainConfig> = seeds
            .iter()
            .map(|&seed| {
                let mut cfg = base.clone();
                cfg.variant = variant;
                cfg.seed = seed;
                cfg
            })
            .collect();
        let partial = |cause: Error, done: &[VariantEntry]| Error::PartialAblation {
            completed: done.iter().map(|e| e.variant.name().to_string()).collect(),
            cause: Box::new(cause),
        };
        let results = run_all(&configs, splits).map_err(|e| partial(e, &variants))?;
        let mut runs = Vec::with_capacity(seeds.len());
        for (r, &seed) in results.into_iter().zip(&seeds) {
            let (m, best_epoch) = r.map_err(|e| partial(e, &variants))?;
            runs.push(SeedRecord {
                seed,
                accuracy: m.accuracy,
                mae: m.mae,
                best_epoch,
                adjacency: m.adjacency,
            });
        }
        let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
        let mae: Vec<f64> = runs.iter().map(|r| r.mae).collect();
        variants.push(VariantEntry {
            variant,
            alpha: configs[0].effective_alpha(),
            accuracy: Summary::of(&acc),
            mae: Summary::of(&mae),
            adjacency: mean_adjacency(&runs, base.categories),
            runs,
        });
    }
    Ok(AblationReport {
        categories: base.categories,
        seeds,
        variants,
    })
}
