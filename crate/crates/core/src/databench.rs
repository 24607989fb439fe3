//! Synthetic ordinal data with a white-box Bayes classifier.
//!
//! Features are drawn uniformly from `[-1, 1]^f`. A fixed random unit
//! vector `w` gives the latent score `z = w·x`; the label is the bucket of
//! `z + N(0, σ²)` under thresholds placed at the quantiles of the noisy
//! score that realise the requested class priors.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::codec::CategoryId;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Draws used to place the thresholds.
pub const CALIBRATION_DRAWS: usize = 200_000;

const STREAM_WEIGHTS: u64 = 0;
const STREAM_CALIBRATION: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_VAL: u64 = 3;
const STREAM_TEST: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Imbalance {
    Uniform,
    /// Class `k` has prior proportional to `ratio^k`.
    Geometric { ratio: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub categories: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_train")]
    pub train_samples: usize,
    #[serde(default = "default_val")]
    pub val_samples: usize,
    #[serde(default = "default_test")]
    pub test_samples: usize,
    #[serde(default = "default_imbalance")]
    pub imbalance: Imbalance,
    #[serde(default)]
    pub seed: u64,
}

fn default_feature_dim() -> usize {
    8
}
fn default_train() -> usize {
    2000
}
fn default_val() -> usize {
    500
}
fn default_test() -> usize {
    2000
}
fn default_imbalance() -> Imbalance {
    Imbalance::Uniform
}

impl SyntheticSpec {
    pub fn new(categories: usize) -> Self {
        SyntheticSpec {
            categories,
            feature_dim: default_feature_dim(),
            noise: 0.0,
            train_samples: default_train(),
            val_samples: default_val(),
            test_samples: default_test(),
            imbalance: Imbalance::Uniform,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories < 2 {
            return Err(Error::InvalidCategoryCount(self.categories));
        }
        if self.feature_dim == 0 {
            return Err(Error::Spec("feature_dim must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Spec(format!("noise must be finite and >= 0, got {}", self.noise)));
        }
        if let Imbalance::Geometric { ratio } = self.imbalance {
            if !(ratio > 0.0 && ratio <= 1.0) {
                return Err(Error::Spec(format!("geometric ratio must lie in (0, 1], got {ratio}")));
            }
        }
        if self.train_samples == 0 || self.val_samples == 0 || self.test_samples == 0 {
            return Err(Error::Spec("every split needs at least one sample".into()));
        }
        Ok(())
    }

    /// Class priors implied by the imbalance profile.
    pub fn priors(&self) -> Vec<f64> {
        let n = self.categories;
        let raw: Vec<f64> = match self.imbalance {
            Imbalance::Uniform => vec![1.0; n],
            Imbalance::Geometric { ratio } => (0..n).map(|k| ratio.powi(k as i32)).collect(),
        };
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / total).collect()
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let sidecar: DataSidecar = serde_json::from_str(&text)?;
        Ok(sidecar.spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: CategoryId,
    /// Noise-free latent score `w·x`.
    pub latent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub categories: usize,
    pub feature_dim: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<CategoryId> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn features(&self) -> Tensor {
        let data = self.samples.iter().flat_map(|s| s.features.iter().copied()).collect();
        Tensor::new(vec![self.samples.len(), self.feature_dim], data).expect("consistent feature rows")
    }

    /// Feature tensor and labels for the samples at `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<CategoryId>) {
        let mut data = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.samples[i].features);
            labels.push(self.samples[i].label);
        }
        (
            Tensor::new(vec![indices.len(), self.feature_dim], data).expect("consistent feature rows"),
            labels,
        )
    }

    /// Empirical class frequencies.
    pub fn class_frequencies(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.categories];
        for s in &self.samples {
            counts[s.label.0] += 1;
        }
        counts.iter().map(|&c| c as f64 / self.samples.len().max(1) as f64).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (0..self.feature_dim).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        header.push("latent".into());
        w.write_record(&header).map_err(|e| Error::Csv(e.to_string()))?;
        for s in &self.samples {
            let mut rec: Vec<String> = s.features.iter().map(|v| v.to_string()).collect();
            rec.push(s.label.0.to_string());
            rec.push(s.latent.to_string());
            w.write_record(&rec).map_err(|e| Error::Csv(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
        crate::io::write_atomic(path, &bytes)
    }

    /// Reads a CSV with feature columns, a `label` column and an optional
    /// `latent` column. Labels are shifted down by `index_base`.
    pub fn read_csv(path: &Path, categories: usize, index_base: usize) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
        let headers = r.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
        let label_col = headers
            .iter()
            .position(|h| h == "label")
            .ok_or_else(|| Error::Csv(format!("{}: no `label` column", path.display())))?;
        let latent_col = headers.iter().position(|h| h == "latent");
        let feature_cols: Vec<usize> = (0..headers.len())
            .filter(|&i| i != label_col && Some(i) != latent_col)
            .collect();
        let mut samples = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Csv(format!("{}:{}: {e}", path.display(), line + 2)))
            };
            let raw: usize = rec[label_col]
                .trim()
                .parse()
                .map_err(|e| Error::Csv(format!("{}:{}: label: {e}", path.display(), line + 2)))?;
            let label = raw
                .checked_sub(index_base)
                .filter(|&c| c < categories)
                .ok_or(Error::InvalidCategory {
                    category: raw,
                    n: categories,
                })?;
            samples.push(Sample {
                features: feature_cols.iter().map(|&i| num(i)).collect::<Result<_>>()?,
                label: CategoryId(label),
                latent: latent_col.map(num).transpose()?.unwrap_or(f64::NAN),
            });
        }
        Ok(Dataset {
            categories,
            feature_dim: feature_cols.len(),
            samples,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Generator state derived from a spec: the projection and thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentModel {
    pub weights: Vec<f64>,
    /// `n - 1` increasing cut points.
    pub thresholds: Vec<f64>,
    pub noise: f64,
}

impl LatentModel {
    pub fn latent(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum()
    }

    /// Number of thresholds at or below `v`.
    pub fn bucket(&self, v: f64) -> usize {
        self.thresholds.partition_point(|&t| t <= v)
    }

    /// Posterior class probabilities given the noise-free latent.
    pub fn posterior(&self, z: f64) -> Vec<f64> {
        let n = self.thresholds.len() + 1;
        if self.noise == 0.0 {
            let mut p = vec![0.0; n];
            p[self.bucket(z)] = 1.0;
            return p;
        }
        let cdf = |t: f64| 0.5 * erfc(-(t - z) / (self.noise * std::f64::consts::SQRT_2));
        let mut prev = 0.0;
        (0..n)
            .map(|k| {
                let upper = if k + 1 < n { cdf(self.thresholds[k]) } else { 1.0 };
                let p = (upper - prev).max(0.0);
                prev = upper;
                p
            })
            .collect()
    }

    /// Bayes decision (most probable class) for latent `z`.
    pub fn bayes_class(&self, z: f64) -> usize {
        crate::decoder::argmax(&self.posterior(z))
    }
}

fn draw_features(rng: &mut ChaCha8Rng, f: usize) -> Vec<f64> {
    (0..f).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

fn weights(spec: &SyntheticSpec) -> Vec<f64> {
    let mut rng = spec.rng(STREAM_WEIGHTS);
    let raw: Vec<f64> = (0..spec.feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    raw.into_iter().map(|v| v / norm).collect()
}

/// Noise-free latents and unit normal draws for threshold placement.
fn calibration_draws(spec: &SyntheticSpec, w: &[f64], count: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = spec.rng(STREAM_CALIBRATION);
    let mut z = Vec::with_capacity(count);
    let mut e = Vec::with_capacity(count);
    for _ in 0..count {
        let x = draw_features(&mut rng, spec.feature_dim);
        z.push(w.iter().zip(&x).map(|(a, b)| a * b).sum());
        e.push(StandardNormal.sample(&mut rng));
    }
    (z, e)
}

fn place_thresholds(spec: &SyntheticSpec, z: &[f64], e: &[f64], noise: f64) -> Result<Vec<f64>> {
    let mut scores: Vec<f64> = z.iter().zip(e).map(|(z, e)| z + noise * e).collect();
    scores.sort_by(f64::total_cmp);
    let priors = spec.priors();
    let count = scores.len();
    if let Some((k, p)) = priors.iter().enumerate().find(|(_, &p)| p * (count as f64) < 1.0) {
        return Err(Error::Spec(format!("class {k} has prior {p:.3e}, too small to be realised")));
    }
    let mut cum = 0.0;
    let mut thresholds = Vec::with_capacity(priors.len() - 1);
    for p in &priors[..priors.len() - 1] {
        cum += p;
        let idx = ((cum * count as f64).round() as usize).clamp(1, count - 1);
        thresholds.push(scores[idx]);
    }
    if thresholds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Spec("class priors produce an empty class".into()));
    }
    Ok(thresholds)
}

impl SyntheticSpec {
    /// Projection and thresholds for this spec.
    pub fn latent_model(&self) -> Result<LatentModel> {
        self.validate()?;
        let w = weights(self);
        let (z, e) = calibration_draws(self, &w, CALIBRATION_DRAWS);
        let thresholds = place_thresholds(self, &z, &e, self.noise)?;
        Ok(LatentModel {
            weights: w,
            thresholds,
            noise: self.noise,
        })
    }
}

fn draw_split(spec: &SyntheticSpec, lm: &LatentModel, stream: u64, count: usize) -> Dataset {
    let mut rng = spec.rng(stream);
    let samples = (0..count)
        .map(|_| {
            let features = draw_features(&mut rng, spec.feature_dim);
            let latent = lm.latent(&features);
            let eps: f64 = StandardNormal.sample(&mut rng);
            let label = CategoryId(lm.bucket(latent + spec.noise * eps));
            Sample { features, label, latent }
        })
        .collect();
    Dataset {
        categories: spec.categories,
        feature_dim: spec.feature_dim,
        samples,
    }
}

/// Train / validation / test splits, each from its own random stream.
pub fn generate(spec: &SyntheticSpec) -> Result<Splits> {
    let lm = spec.latent_model()?;
    Ok(Splits {
        train: draw_split(spec, &lm, STREAM_TRAIN, spec.train_samples),
        val: draw_split(spec, &lm, STREAM_VAL, spec.val_samples),
        test: draw_split(spec, &lm, STREAM_TEST, spec.test_samples),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub accuracy: f64,
    pub mae: f64,
    pub predictions: Vec<CategoryId>,
}

/// Scores the Bayes classifier (posterior argmax given the true latent) on
/// `samples`.
pub fn bayes_oracle(spec: &SyntheticSpec, samples: &Dataset) -> Result<OracleReport> {
    let lm = spec.latent_model()?;
    let predictions: Vec<CategoryId> = samples
        .samples
        .iter()
        .map(|s| CategoryId(lm.bayes_class(s.latent)))
        .collect();
    let m = crate::training::metrics_from_predictions(&predictions, &samples.labels(), spec.categories)?;
    Ok(OracleReport {
        accuracy: m.accuracy,
        mae: m.mae,
        predictions,
    })
}

/// Expected Bayes accuracy `E_z[max_k P(k | z)]` at noise level `noise`,
/// with thresholds re-placed for that noise.
pub fn expected_bayes_accuracy(spec: &SyntheticSpec, noise: f64, draws: usize) -> Result<f64> {
    let mut s = spec.clone();
    s.noise = noise;
    s.validate()?;
    let w = weights(&s);
    let (z, e) = calibration_draws(&s, &w, CALIBRATION_DRAWS);
    let thresholds = place_thresholds(&s, &z, &e, noise)?;
    let lm = LatentModel {
        weights: w,
        thresholds,
        noise,
    };
    let used = draws.min(z.len());
    let total: f64 = z[..used]
        .iter()
        .map(|&zi| lm.posterior(zi).into_iter().fold(0.0, f64::max))
        .sum();
    Ok(total / used as f64)
}

/// Noise level at which the Bayes classifier's expected accuracy equals
/// `target`, found by bisection.
pub fn calibrate_noise(spec: &SyntheticSpec, target: f64) -> Result<f64> {
    let max_prior = spec.priors().into_iter().fold(0.0, f64::max);
    if !(target > max_prior && target < 1.0) {
        return Err(Error::Spec(format!(
            "target accuracy {target} must lie in ({max_prior}, 1)"
        )));
    }
    let draws = 50_000;
    let (mut lo, mut hi) = (0.0, 0.05);
    while expected_bayes_accuracy(spec, hi, draws)? > target {
        lo = hi;
        hi *= 2.0;
        if hi > 1e3 {
            return Err(Error::Spec("could not bracket the target accuracy".into()));
        }
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if expected_bayes_accuracy(spec, mid, draws)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// JSON sidecar written next to generated CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSidecar {
    pub spec: SyntheticSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub files: Option<SplitFiles>,
    #[serde(default)]
    pub index_base: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFiles {
    pub train: String,
    pub val: String,
    pub test: String,
}

/// Writes `train.csv`, `val.csv`, `test.csv` and `spec.json` into `dir`.
pub fn export(spec: &SyntheticSpec, dir: &Path) -> Result<DataSidecar> {
    let splits = generate(spec)?;
    std::fs::create_dir_all(dir)?;
    splits.train.write_csv(&dir.join("train.csv"))?;
    splits.val.write_csv(&dir.join("val.csv"))?;
    splits.test.write_csv(&dir.join("test.csv"))?;
    let sidecar = DataSidecar {
        spec: spec.clone(),
        files: Some(SplitFiles {
            train: "train.csv".into(),
            val: "val.csv".into(),
            test: "test.csv".into(),
        }),
        index_base: 0,
    };
    crate::io::write_atomic(&dir.join("spec.json"), serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    Ok(sidecar)
}

impl DataSidecar {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Loads the CSV splits if the sidecar names them (paths relative to
    /// `base_dir`), otherwise regenerates them from the spec.
    pub fn splits(&self, base_dir: &Path) -> Result<Splits> {
        match &self.files {
            None => generate(&self.spec),
            Some(files) => {
                let n = self.spec.categories;
                let read = |f: &str| Dataset::read_csv(&base_dir.join(f), n, self.index_base);
                Ok(Splits {
                    train: read(&files.train)?,
                    val: read(&files.val)?,
                    test: read(&files.test)?,
                })
            }
        }
    }
}

/// Flat n-way softmax classifier on the shared encoder, trained with
/// cross-entropy. Returns the trained model and its test metrics.
pub fn softmax_baseline(
    config: &crate::training::TrainConfig,
    splits: &Splits,
) -> Result<crate::training::TrainOutcome> {
    let mut cfg = config.clone();
    cfg.variant = crate::training::Variant::SoftmaxBaseline;
    crate::training::train(&cfg, splits, &mut crate::training::NoHooks)
}
