//! Teacher-forced training, the sequence BCE objective, the ablation
//! variants and evaluation metrics.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{shift_right, CategoryId, MultiHotSequence};
use crate::databench::{Dataset, Splits};
use crate::decoder::{self, validate_alpha, Architecture, MaskVector, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Checkpoint, Tape, Tensor, Var, DEFAULT_LR};

/// Probabilities are clamped into `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoMask,
    OneShot,
    SoftmaxBaseline,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::SoftmaxBaseline, Variant::OneShot, Variant::NoMask, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoMask => "no-mask",
            Variant::OneShot => "one-shot",
            Variant::SoftmaxBaseline => "softmax-baseline",
        }
    }

    pub fn architecture(self) -> Architecture {
        match self {
            Variant::Full | Variant::NoMask => Architecture::Sequence,
            Variant::OneShot => Architecture::OneShot,
            Variant::SoftmaxBaseline => Architecture::Flat,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Decoder and encoder sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_width: usize,
    pub encoder_hidden: usize,
    pub encoder_tokens: usize,
    pub shared_head: bool,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::new(2, 1);
        ModelShape {
            width: c.width,
            heads: c.heads,
            layers: c.layers,
            ff_width: c.ff_width,
            encoder_hidden: c.encoder_hidden,
            encoder_tokens: c.encoder_tokens,
            shared_head: c.shared_head,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub categories: usize,
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub variant: Variant,
    #[serde(default)]
    pub model: ModelShape,
}

impl TrainConfig {
    pub fn new(categories: usize) -> Self {
        TrainConfig {
            categories,
            alpha: decoder::DEFAULT_ALPHA,
            epochs: 50,
            batch_size: 32,
            lr: DEFAULT_LR,
            seed: 0,
            variant: Variant::Full,
            model: ModelShape::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories < 2 {
            return Err(Error::InvalidCategoryCount(self.categories));
        }
        validate_alpha(self.alpha)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    /// Mask factor actually used: the no-mask ablation forces 1.
    pub fn effective_alpha(&self) -> f64 {
        match self.variant {
            Variant::NoMask => 1.0,
            _ => self.alpha,
        }
    }

    pub fn model_config(&self, feature_dim: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            categories: self.categories,
            feature_dim,
            width: m.width,
            heads: m.heads,
            layers: m.layers,
            ff_width: m.ff_width,
            encoder_hidden: m.encoder_hidden,
            encoder_tokens: m.encoder_tokens,
            shared_head: m.shared_head,
            architecture: self.variant.architecture(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub per_step: Vec<f64>,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Sum over steps of the per-step binary cross-entropy between masked
/// probabilities and the multi-hot targets, each averaged over categories.
pub fn sequence_bce(y_prob: &[Vec<f64>], y_mht: &MultiHotSequence) -> Result<LossReport> {
    let steps = y_mht.steps();
    if y_prob.len() != steps.len() || y_prob.iter().zip(steps).any(|(p, o)| p.len() != o.len()) {
        return Err(Error::Shape {
            op: "sequence_bce",
            lhs: y_prob.iter().map(Vec::len).collect(),
            rhs: steps.iter().map(Vec::len).collect(),
        });
    }
    let per_step: Vec<f64> = y_prob
        .iter()
        .zip(steps)
        .map(|(p, o)| {
            let n = o.len() as f64;
            -p.iter()
                .zip(o)
                .map(|(&p, &o)| {
                    let p = clamp_prob(p);
                    o * p.ln() + (1.0 - o) * (1.0 - p).ln()
                })
                .sum::<f64>()
                / n
        })
        .collect();
    Ok(LossReport {
        total: per_step.iter().sum(),
        per_step,
    })
}

/// Per-category multi-hot sequences, indexed by category.
fn multihot_table(model: &Model) -> Result<Vec<MultiHotSequence>> {
    let tree = model.tree();
    (0..tree.n()).map(|c| tree.encode_multihot(CategoryId(c))).collect()
}

/// Teacher-forced sequence loss on a batch. Returns the batch-mean loss and
/// the batch-mean per-step terms.
pub fn sequence_loss(
    model: &Model,
    tape: &mut Tape,
    features: &Tensor,
    labels: &[CategoryId],
    alpha: f64,
) -> Result<(Var, Vec<Var>)> {
    let table = multihot_table(model)?;
    sequence_loss_with(model, tape, features, labels, alpha, &table)
}

fn sequence_loss_with(
    model: &Model,
    tape: &mut Tape,
    features: &Tensor,
    labels: &[CategoryId],
    alpha: f64,
    table: &[MultiHotSequence],
) -> Result<(Var, Vec<Var>)> {
    let tree = model.tree();
    let (n, d, batch) = (tree.n(), tree.depth(), labels.len());
    let enc = model.encode(tape, features)?;
    let tokens = labels
        .iter()
        .map(|&c| Ok(shift_right(&tree.encode_path(c)?).tokens().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let logits = model.decode_positions(tape, enc, &tokens)?;
    let scale = -1.0 / (n * batch) as f64;
    let mut per_step = Vec::with_capacity(d);
    for t in 1..=d {
        let mut mask = Vec::with_capacity(batch * n);
        let mut target = Vec::with_capacity(batch * n);
        for &c in labels {
            let mh = &table[c.0];
            let prev = (t > 1).then(|| mh.step(t - 1));
            mask.extend(MaskVector::new(prev, n, alpha)?.into_inner());
            target.extend_from_slice(mh.step(t));
        }
        let complement: Vec<f64> = target.iter().map(|o| 1.0 - o).collect();
        let mask = tape.constant(Tensor::new(vec![batch, n], mask)?);
        let target = tape.constant(Tensor::new(vec![batch, n], target)?);
        let complement = tape.constant(Tensor::new(vec![batch, n], complement)?);

        let p = tape.sigmoid(logits[t - 1]);
        let p = tape.mul(p, mask)?;
        let p = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
        let log_p = tape.log(p);
        let q = tape.affine(p, -1.0, 1.0);
        let log_q = tape.log(q);
        let pos = tape.mul(log_p, target)?;
        let neg = tape.mul(log_q, complement)?;
        let both = tape.add(pos, neg)?;
        let s = tape.sum(both);
        per_step.push(tape.affine(s, scale, 0.0));
    }
    let mut total = per_step[0];
    for &l in &per_step[1..] {
        total = tape.add(total, l)?;
    }
    Ok((total, per_step))
}

/// Mean cross-entropy of n-way logits against labels.
pub fn class_loss(model: &Model, tape: &mut Tape, features: &Tensor, labels: &[CategoryId]) -> Result<Var> {
    let n = model.config().categories;
    let logits = model.class_logits(tape, features)?;
    let lsm = tape.log_softmax(logits);
    let mut onehot = vec![0.0; labels.len() * n];
    for (b, c) in labels.iter().enumerate() {
        onehot[b * n + c.0] = 1.0;
    }
    let onehot = tape.constant(Tensor::new(vec![labels.len(), n], onehot)?);
    let picked = tape.mul(lsm, onehot)?;
    let s = tape.sum(picked);
    Ok(tape.affine(s, -1.0 / labels.len() as f64, 0.0))
}

/// Training loss for `model` under `config` on one batch.
pub fn batch_loss(config: &TrainConfig, model: &Model, tape: &mut Tape, features: &Tensor, labels: &[CategoryId]) -> Result<(Var, Vec<Var>)> {
    match config.variant {
        Variant::Full | Variant::NoMask => sequence_loss(model, tape, features, labels, config.effective_alpha()),
        Variant::OneShot | Variant::SoftmaxBaseline => {
            let l = class_loss(model, tape, features, labels)?;
            Ok((l, vec![l]))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyRow {
    pub category: usize,
    pub count: usize,
    pub correct: f64,
    pub adjacent: f64,
    pub other: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub mae: f64,
    pub samples: usize,
    pub adjacency: Vec<AdjacencyRow>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

pub fn metrics_from_predictions(predictions: &[CategoryId], labels: &[CategoryId], n: usize) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if predictions.len() != labels.len() {
        return Err(Error::Shape {
            op: "metrics",
            lhs: vec![predictions.len()],
            rhs: vec![labels.len()],
        });
    }
    let mut confusion = vec![vec![0usize; n]; n];
    for (p, y) in predictions.iter().zip(labels) {
        if p.0 >= n || y.0 >= n {
            return Err(Error::InvalidCategory {
                category: p.0.max(y.0),
                n,
            });
        }
        confusion[y.0][p.0] += 1;
    }
    let total = labels.len() as f64;
    let correct: usize = (0..n).map(|c| confusion[c][c]).sum();
    let abs_err: usize = predictions.iter().zip(labels).map(|(p, y)| p.0.abs_diff(y.0)).sum();
    let adjacency = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let count: usize = row.iter().sum();
            let frac = |pred: &dyn Fn(usize) -> bool| {
                if count == 0 {
                    0.0
                } else {
                    row.iter().enumerate().filter(|(p, _)| pred(p.abs_diff(c))).map(|(_, &k)| k).sum::<usize>() as f64
                        / count as f64
                }
            };
            AdjacencyRow {
                category: c,
                count,
                correct: frac(&|d| d == 0),
                adjacent: frac(&|d| d == 1),
                other: frac(&|d| d >= 2),
            }
        })
        .collect();
    Ok(Metrics {
        accuracy: correct as f64 / total,
        mae: abs_err as f64 / total,
        samples: labels.len(),
        adjacency,
        confusion,
    })
}

/// A model together with the decision parameters it is evaluated with.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub alpha: f64,
    pub variant: Variant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    alpha: f64,
    variant: Variant,
}

impl TrainedModel {
    pub fn predict(&self, features: &Tensor) -> Result<Vec<CategoryId>> {
        decoder::predict(&self.model, features, self.alpha)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            model: self.model.config().clone(),
            alpha: self.alpha,
            variant: self.variant,
        };
        Ok(Checkpoint::from_store(self.model.params(), serde_json::to_value(meta)?))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let mut model = Model::new(meta.model, 0)?;
        model.load_params(ck)?;
        Ok(TrainedModel {
            model,
            alpha: meta.alpha,
            variant: meta.variant,
        })
    }
}

pub fn evaluate(trained: &TrainedModel, dataset: &Dataset) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = trained.predict(&dataset.features())?;
    metrics_from_predictions(&preds, &dataset.labels(), trained.model.config().categories)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: f64,
    pub val_mae: f64,
}

/// Observer for the training loop.
pub trait TrainHooks {
    fn on_epoch(&mut self, _log: &EpochLog) -> Result<()> {
        Ok(())
    }

    /// Where to write a diagnostics dump if the loss becomes non-finite.
    fn diagnostics_path(&self) -> Option<PathBuf> {
        None
    }
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// Diagnostics written when a non-finite loss aborts training.
#[derive(Debug, Serialize)]
pub struct NanDiagnostics<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub per_step: Vec<f64>,
    pub config: &'a TrainConfig,
    pub non_finite_params: Vec<String>,
}

/// Mutable state of a training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    adam: AdamState,
    rng: ChaCha8Rng,
    table: Vec<MultiHotSequence>,
    epoch: usize,
}

impl Trainer {
    pub fn new(config: &TrainConfig, feature_dim: usize) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model_config(feature_dim), config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let table = multihot_table(&model)?;
        Ok(Trainer {
            config: config.clone(),
            model,
            adam: AdamState::new(config.lr),
            rng,
            table,
            epoch: 0,
        })
    }

    pub fn trained(&self) -> TrainedModel {
        TrainedModel {
            model: self.model.clone(),
            alpha: self.config.effective_alpha(),
            variant: self.config.variant,
        }
    }

    fn loss(&self, tape: &mut Tape, x: &Tensor, y: &[CategoryId]) -> Result<(Var, Vec<Var>)> {
        match self.config.variant {
            Variant::Full | Variant::NoMask => {
                sequence_loss_with(&self.model, tape, x, y, self.config.effective_alpha(), &self.table)
            }
            _ => batch_loss(&self.config, &self.model, tape, x, y),
        }
    }

    /// One pass over `dataset` in shuffled mini-batches. Returns the
    /// sample-weighted mean training loss.
    pub fn train_epoch(&mut self, dataset: &Dataset, hooks: &dyn TrainHooks) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        self.epoch += 1;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut self.rng);
        let mut weighted = 0.0;
        for (bi, idx) in order.chunks(self.config.batch_size).enumerate() {
            let (x, y) = dataset.batch(idx);
            let mut tape = Tape::new();
            let (loss, steps) = self.loss(&mut tape, &x, &y)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(self.nan_abort(bi, value, steps.iter().map(|&s| tape.value(s).item()).collect(), hooks));
            }
            weighted += value * idx.len() as f64;
            let params = self.model.params_mut();
            params.zero_grads();
            tape.backward(loss, params)?;
            self.adam.step(params)?;
        }
        Ok(weighted / dataset.len() as f64)
    }

    fn nan_abort(&self, batch: usize, loss: f64, per_step: Vec<f64>, hooks: &dyn TrainHooks) -> Error {
        let params = self.model.params();
        let non_finite_params = params
            .ids()
            .filter(|&id| params.value(id).data().iter().any(|v| !v.is_finite()))
            .map(|id| params.name(id).to_string())
            .collect();
        let diag = NanDiagnostics {
            epoch: self.epoch,
            batch,
            loss,
            per_step,
            config: &self.config,
            non_finite_params,
        };
        let written = hooks.diagnostics_path().and_then(|p| {
            let text = serde_json::to_string_pretty(&diag).ok()?;
            crate::io::write_atomic(&p, text.as_bytes()).ok()?;
            Some(p)
        });
        Error::NanLoss {
            epoch: self.epoch,
            batch,
            diagnostics: written,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: TrainedModel,
    pub best_epoch: usize,
    pub history: Vec<EpochLog>,
    pub test: Metrics,
}

/// Trains for the fixed epoch budget, keeping the parameters with the best
/// validation MAE (ties broken by validation accuracy, then earlier epoch),
/// and scores them on the test split.
pub fn train(config: &TrainConfig, splits: &Splits, hooks: &mut dyn TrainHooks) -> Result<TrainOutcome> {
    if config.categories != splits.train.categories {
        return Err(Error::Config(format!(
            "config has {} categories, data has {}",
            config.categories, splits.train.categories
        )));
    }
    let mut trainer = Trainer::new(config, splits.train.feature_dim)?;
    let mut history = Vec::with_capacity(config.epochs);
    let mut best = trainer.trained();
    let mut best_key = (f64::INFINITY, f64::NEG_INFINITY);
    let mut best_epoch = 0;
    for epoch in 1..=config.epochs {
        let loss = trainer.train_epoch(&splits.train, hooks)?;
        let current = trainer.trained();
        let val = evaluate(&current, &splits.val)?;
        let log = EpochLog {
            epoch,
            loss,
            val_accuracy: val.accuracy,
            val_mae: val.mae,
        };
        hooks.on_epoch(&log)?;
        history.push(log);
        if val.mae < best_key.0 || (val.mae == best_key.0 && val.accuracy > best_key.1) {
            best_key = (val.mae, val.accuracy);
            best = current;
            best_epoch = epoch;
        }
    }
    let test = evaluate(&best, &splits.test)?;
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
        test,
    })
}
