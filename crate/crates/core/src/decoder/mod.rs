//! Masked decision decoding.
//!
//! At step `t` the decoder produces `n` raw logits. Their sigmoids are
//! multiplied by a mask that keeps categories of the node chosen at step
//! `t - 1` and scales every other category by `alpha`. The next bit is
//! then decided by comparing the mean masked probability over the left and
//! right child ranges of the current node (ties go left).

mod network;

use serde::{Deserialize, Serialize};

use crate::codec::{shifted_prefix, CategoryId, CategoryRange, PathCode, Token};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Tape, Tensor};

pub use network::{token_row, Architecture, Model, ModelConfig};

pub const DEFAULT_ALPHA: f64 = 0.3;

pub fn validate_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must lie in (0, 1], got {alpha}")))
    }
}

/// Per-category multipliers in `{alpha, 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskVector(Vec<f64>);

impl MaskVector {
    /// Mask for a step given the previous step's multi-hot row (`None` at
    /// the first step, where every category survives).
    pub fn new(prev_multihot: Option<&[f64]>, n: usize, alpha: f64) -> Result<Self> {
        validate_alpha(alpha)?;
        match prev_multihot {
            None => Ok(MaskVector(vec![1.0; n])),
            Some(prev) if prev.len() == n => Ok(MaskVector(
                prev.iter().map(|&o| if o == 1.0 { 1.0 } else { alpha }).collect(),
            )),
            Some(prev) => Err(Error::Shape {
                op: "mask",
                lhs: vec![prev.len()],
                rhs: vec![n],
            }),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// `mask ⊙ sigmoid(logits)`.
pub fn apply_mask(logits: &[f64], prev_multihot: Option<&[f64]>, alpha: f64) -> Result<Vec<f64>> {
    let mask = MaskVector::new(prev_multihot, logits.len(), alpha)?;
    Ok(logits
        .iter()
        .zip(mask.values())
        .map(|(&z, &m)| m * sigmoid(z))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub bit: u8,
    pub p_left: f64,
    pub p_right: f64,
}

fn range_mean(p: &[f64], r: CategoryRange) -> Result<f64> {
    if r.hi >= p.len() {
        return Err(Error::Shape {
            op: "decide",
            lhs: vec![r.lo, r.hi],
            rhs: vec![p.len()],
        });
    }
    Ok(p[r.lo..=r.hi].iter().sum::<f64>() / r.len() as f64)
}

/// Chooses the subtree with the larger mean masked probability.
pub fn decide(y_prob: &[f64], left: CategoryRange, right: CategoryRange) -> Result<Decision> {
    let p_left = range_mean(y_prob, left)?;
    let p_right = range_mean(y_prob, right)?;
    let bit = if p_left >= p_right { 0 } else { 1 };
    Ok(Decision { bit, p_left, p_right })
}

/// Everything computed at one decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub t: usize,
    pub y_out: Vec<f64>,
    pub mask: Vec<f64>,
    pub y_prob: Vec<f64>,
    pub p_left: f64,
    pub p_right: f64,
    pub bit: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub path: PathCode,
    pub category: CategoryId,
    pub steps: Vec<StepOutput>,
}

fn check_encoded(model: &Model, encoded: &Tensor) -> Result<()> {
    let c = model.config();
    if encoded.shape() != [c.encoder_tokens, c.width] {
        return Err(Error::Shape {
            op: "encoded features",
            lhs: encoded.shape().to_vec(),
            rhs: vec![c.encoder_tokens, c.width],
        });
    }
    Ok(())
}

/// Logits at the last position of `queries` for a single sample whose
/// encoder tokens are `encoded` (`[S, w]`).
pub fn decode_step(model: &Model, encoded: &Tensor, queries: &[Token]) -> Result<Vec<f64>> {
    check_encoded(model, encoded)?;
    let mut tape = Tape::new();
    let enc = tape.constant(encoded.clone());
    let logits = model.decode_positions(&mut tape, enc, &[queries.to_vec()])?;
    Ok(tape.value(*logits.last().expect("non-empty")).data().to_vec())
}

/// Teacher-forced logits for every step given the full path of input bits.
pub fn teacher_forced_logits(model: &Model, encoded: &Tensor, path: &PathCode) -> Result<Vec<Vec<f64>>> {
    check_encoded(model, encoded)?;
    let target = crate::codec::shift_right(path);
    let mut tape = Tape::new();
    let enc = tape.constant(encoded.clone());
    let logits = model.decode_positions(&mut tape, enc, &[target.tokens().to_vec()])?;
    Ok(logits.iter().map(|&v| tape.value(v).data().to_vec()).collect())
}

fn greedy_on_tape(model: &Model, tape: &mut Tape, enc: crate::numerics::Var, batch: usize, alpha: f64) -> Result<Vec<Decoded>> {
    validate_alpha(alpha)?;
    let tree = model.tree();
    let n = tree.n();
    let mut prefixes: Vec<Vec<u8>> = vec![Vec::new(); batch];
    let mut steps: Vec<Vec<StepOutput>> = vec![Vec::new(); batch];
    for t in 1..=tree.depth() {
        let tokens: Vec<Vec<Token>> = prefixes.iter().map(|p| shifted_prefix(p).tokens().to_vec()).collect();
        let logits = model.decode_positions(tape, enc, &tokens)?;
        let last = tape.value(logits[t - 1]);
        for b in 0..batch {
            let prefix = &prefixes[b];
            let y_out = last.row(b).to_vec();
            let prev = if t == 1 {
                None
            } else {
                Some(tree.node_at(prefix)?.range().indicator(n))
            };
            let mask = MaskVector::new(prev.as_deref(), n, alpha)?.into_inner();
            let y_prob: Vec<f64> = y_out.iter().zip(&mask).map(|(&z, &m)| m * sigmoid(z)).collect();
            let (l, r) = tree.node_ranges_at(prefix)?;
            let d = decide(&y_prob, l, r)?;
            steps[b].push(StepOutput {
                t,
                y_out,
                mask,
                y_prob,
                p_left: d.p_left,
                p_right: d.p_right,
                bit: d.bit,
            });
            prefixes[b].push(d.bit);
        }
    }
    prefixes
        .into_iter()
        .zip(steps)
        .map(|(bits, steps)| {
            let path = PathCode::new(bits)?;
            let category = tree.decode_path(&path)?;
            Ok(Decoded { path, category, steps })
        })
        .collect()
}

/// Greedy autoregressive decoding for one sample from its encoder tokens.
pub fn greedy_decode(model: &Model, encoded: &Tensor, alpha: f64) -> Result<Decoded> {
    check_encoded(model, encoded)?;
    let mut tape = Tape::new();
    let enc = tape.constant(encoded.clone());
    Ok(greedy_on_tape(model, &mut tape, enc, 1, alpha)?.remove(0))
}

/// Encoder tokens `[S, w]` for one raw feature vector.
pub fn encode_features(model: &Model, features: &[f64]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = Tensor::new(vec![1, features.len()], features.to_vec())?;
    let enc = model.encode(&mut tape, &x)?;
    Ok(tape.value(enc).clone())
}

const PREDICT_CHUNK: usize = 256;

/// Greedy decoding of a batch of raw feature rows `[B, f]`.
pub fn decode_batch(model: &Model, features: &Tensor, alpha: f64) -> Result<Vec<Decoded>> {
    if model.config().architecture != Architecture::Sequence {
        return Err(Error::Config("greedy decoding needs a sequence model".into()));
    }
    let f = model.config().feature_dim;
    let mut out = Vec::with_capacity(features.shape()[0]);
    for chunk in features.data().chunks(PREDICT_CHUNK * f) {
        let rows = chunk.len() / f;
        let x = Tensor::new(vec![rows, f], chunk.to_vec())?;
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, &x)?;
        out.extend(greedy_on_tape(model, &mut tape, enc, rows, alpha)?);
    }
    Ok(out)
}

/// Predicted category for each feature row, for any architecture.
pub fn predict(model: &Model, features: &Tensor, alpha: f64) -> Result<Vec<CategoryId>> {
    match model.config().architecture {
        Architecture::Sequence => Ok(decode_batch(model, features, alpha)?.into_iter().map(|d| d.category).collect()),
        _ => {
            let f = model.config().feature_dim;
            let n = model.config().categories;
            let mut out = Vec::with_capacity(features.shape()[0]);
            for chunk in features.data().chunks(PREDICT_CHUNK * f) {
                let x = Tensor::new(vec![chunk.len() / f, f], chunk.to_vec())?;
                let mut tape = Tape::new();
                let logits = model.class_logits(&mut tape, &x)?;
                for row in tape.value(logits).data().chunks(n) {
                    out.push(CategoryId(argmax(row)));
                }
            }
            Ok(out)
        }
    }
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
