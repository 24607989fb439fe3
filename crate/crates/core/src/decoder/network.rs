//! Parameters and batched forward pass of the encoder stand-in and the
//! autoregressive attention decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{DichotomicTree, Token};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

/// Which output structure sits on top of the shared encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Per-step binary-path decoding with masked decisions.
    Sequence,
    /// Decoder run for a single step from the start marker, n-way softmax.
    OneShot,
    /// Encoder features straight into one n-way softmax head.
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub categories: usize,
    pub feature_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_width: usize,
    pub encoder_hidden: usize,
    pub encoder_tokens: usize,
    pub shared_head: bool,
    pub architecture: Architecture,
}

impl ModelConfig {
    pub fn new(categories: usize, feature_dim: usize) -> Self {
        ModelConfig {
            categories,
            feature_dim,
            width: 64,
            heads: 4,
            layers: 2,
            ff_width: 128,
            encoder_hidden: 64,
            encoder_tokens: 4,
            shared_head: false,
            architecture: Architecture::Sequence,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories < 2 {
            return Err(Error::InvalidCategoryCount(self.categories));
        }
        let positive = [
            ("feature_dim", self.feature_dim),
            ("width", self.width),
            ("heads", self.heads),
            ("ff_width", self.ff_width),
            ("encoder_hidden", self.encoder_hidden),
            ("encoder_tokens", self.encoder_tokens),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.architecture != Architecture::Flat && self.layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: Attention,
    norm1: Norm,
    cross_attn: Attention,
    norm2: Norm,
    ff1: Linear,
    ff2: Linear,
    norm3: Norm,
}

/// Row of the label embedding table for a decoder input token.
///
/// Row 0 is the start marker; the bit `b` emitted at position `i` uses
/// row `1 + 2i + b`, so the table has `2d + 1` rows.
pub fn token_row(token: Token, depth: usize) -> Result<usize> {
    match token {
        Token::Start => Ok(0),
        Token::Bit { position, bit } => {
            if position >= depth {
                return Err(Error::InvalidPath(format!(
                    "token position {position} is outside depth {depth}"
                )));
            }
            if bit > 1 {
                return Err(Error::InvalidPath(format!("bit value {bit} is not 0 or 1")));
            }
            Ok(1 + 2 * position + bit as usize)
        }
    }
}

/// Encoder MLP, label embeddings, decoder layers and output heads.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    tree: DichotomicTree,
    params: ParamStore,
    enc1: Linear,
    enc2: Linear,
    embedding: Option<ParamId>,
    layers: Vec<DecoderLayer>,
    heads: Vec<Linear>,
}

fn xavier(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}

fn linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Linear {
    let w = store.add(format!("{name}.w"), xavier(&[fan_in, fan_out], rng));
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    Linear { w, b }
}

fn norm(store: &mut ParamStore, name: &str, width: usize) -> Norm {
    Norm {
        gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[width], 1.0)),
        beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width])),
    }
}

fn attention(store: &mut ParamStore, name: &str, w: usize, rng: &mut ChaCha8Rng) -> Attention {
    Attention {
        q: linear(store, &format!("{name}.q"), w, w, rng),
        k: linear(store, &format!("{name}.k"), w, w, rng),
        v: linear(store, &format!("{name}.v"), w, w, rng),
        o: linear(store, &format!("{name}.o"), w, w, rng),
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tree = DichotomicTree::build(config.categories)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (w, s) = (config.width, config.encoder_tokens);
        let enc1 = linear(&mut store, "enc.l1", config.feature_dim, config.encoder_hidden, &mut rng);
        let enc2 = linear(&mut store, "enc.l2", config.encoder_hidden, s * w, &mut rng);

        let mut embedding = None;
        let mut layers = Vec::new();
        let mut heads = Vec::new();
        let n = config.categories;
        match config.architecture {
            Architecture::Flat => {
                heads.push(linear(&mut store, "head.0", s * w, n, &mut rng));
            }
            arch => {
                let rows = if arch == Architecture::OneShot { 1 } else { 2 * tree.depth() + 1 };
                embedding = Some(store.add("dec.embed", Tensor::uniform(&[rows, w], 1.0, &mut rng)));
                for l in 0..config.layers {
                    let p = format!("dec.l{l}");
                    layers.push(DecoderLayer {
                        self_attn: attention(&mut store, &format!("{p}.self"), w, &mut rng),
                        norm1: norm(&mut store, &format!("{p}.ln1"), w),
                        cross_attn: attention(&mut store, &format!("{p}.cross"), w, &mut rng),
                        norm2: norm(&mut store, &format!("{p}.ln2"), w),
                        ff1: linear(&mut store, &format!("{p}.ff1"), w, config.ff_width, &mut rng),
                        ff2: linear(&mut store, &format!("{p}.ff2"), config.ff_width, w, &mut rng),
                        norm3: norm(&mut store, &format!("{p}.ln3"), w),
                    });
                }
                let count = if arch == Architecture::OneShot || config.shared_head {
                    1
                } else {
                    tree.depth()
                };
                for t in 0..count {
                    heads.push(linear(&mut store, &format!("head.{t}"), w, n, &mut rng));
                }
            }
        }
        Ok(Model {
            config,
            tree,
            params: store,
            enc1,
            enc2,
            embedding,
            layers,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tree(&self) -> &DichotomicTree {
        &self.tree
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn depth(&self) -> usize {
        self.tree.depth()
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Weight and bias of the output head used at 1-based step `t`.
    pub fn head_params(&self, t: usize) -> (ParamId, ParamId) {
        let h = &self.heads[self.head_index(t)];
        (h.w, h.b)
    }

    fn head_index(&self, t: usize) -> usize {
        if self.heads.len() == 1 {
            0
        } else {
            t - 1
        }
    }

    fn apply_linear(&self, tape: &mut Tape, x: Var, l: &Linear) -> Result<Var> {
        let w = tape.param(&self.params, l.w);
        let b = tape.param(&self.params, l.b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    fn apply_norm(&self, tape: &mut Tape, x: Var, n: &Norm) -> Result<Var> {
        let g = tape.param(&self.params, n.gamma);
        let b = tape.param(&self.params, n.beta);
        tape.layer_norm(x, g, b)
    }

    /// Maps raw features `[B, f]` to `B * S` encoder tokens of width `w`.
    pub fn encode(&self, tape: &mut Tape, features: &Tensor) -> Result<Var> {
        let s = features.shape();
        if s.len() != 2 || s[1] != self.config.feature_dim {
            return Err(Error::Shape {
                op: "encode",
                lhs: s.to_vec(),
                rhs: vec![0, self.config.feature_dim],
            });
        }
        let batch = s[0];
        let x = tape.constant(features.clone());
        let h = self.apply_linear(tape, x, &self.enc1)?;
        let h = tape.tanh(h);
        let tokens = self.apply_linear(tape, h, &self.enc2)?;
        tape.reshape(tokens, &[batch * self.config.encoder_tokens, self.config.width])
    }

    fn split_heads(&self, tape: &mut Tape, x: Var, batch: usize, len: usize) -> Result<Var> {
        let h = self.config.heads;
        let dh = self.config.width / h;
        let x = tape.reshape(x, &[batch, len, h, dh])?;
        let x = tape.swap_axes12(x)?;
        tape.reshape(x, &[batch * h, len, dh])
    }

    fn merge_heads(&self, tape: &mut Tape, x: Var, batch: usize, len: usize) -> Result<Var> {
        let h = self.config.heads;
        let dh = self.config.width / h;
        let x = tape.reshape(x, &[batch, h, len, dh])?;
        let x = tape.swap_axes12(x)?;
        tape.reshape(x, &[batch * len, h * dh])
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        tape: &mut Tape,
        att: &Attention,
        queries: Var,
        keys: Var,
        batch: usize,
        q_len: usize,
        k_len: usize,
        causal: bool,
    ) -> Result<Var> {
        let dh = self.config.width / self.config.heads;
        let q = self.apply_linear(tape, queries, &att.q)?;
        let k = self.apply_linear(tape, keys, &att.k)?;
        let v = self.apply_linear(tape, keys, &att.v)?;
        let q = self.split_heads(tape, q, batch, q_len)?;
        let k = self.split_heads(tape, k, batch, k_len)?;
        let v = self.split_heads(tape, v, batch, k_len)?;
        let kt = tape.transpose(k)?;
        let scores = tape.bmm(q, kt)?;
        let mut scores = tape.affine(scores, 1.0 / (dh as f64).sqrt(), 0.0);
        if causal {
            scores = tape.causal_mask(scores)?;
        }
        let weights = tape.softmax(scores);
        let ctx = tape.bmm(weights, v)?;
        let ctx = self.merge_heads(tape, ctx, batch, q_len)?;
        self.apply_linear(tape, ctx, &att.o)
    }

    /// Runs the decoder over `tokens` (one equal-length sequence per batch
    /// element) attending to `encoded` (`[B * S, w]`) and returns the logits
    /// `[B, n]` for every position.
    pub fn decode_positions(&self, tape: &mut Tape, encoded: Var, tokens: &[Vec<Token>]) -> Result<Vec<Var>> {
        let embedding = self
            .embedding
            .ok_or_else(|| Error::Config("flat model has no decoder".into()))?;
        let batch = tokens.len();
        let len = tokens.first().map_or(0, Vec::len);
        if len == 0 || tokens.iter().any(|t| t.len() != len) {
            return Err(Error::Config("decoder input sequences must be non-empty and of equal length".into()));
        }
        if len > self.depth() {
            return Err(Error::InvalidPrefix {
                len,
                depth: self.depth(),
                max: self.depth(),
            });
        }
        let enc_shape = tape.shape(encoded).to_vec();
        let s = self.config.encoder_tokens;
        if enc_shape != [batch * s, self.config.width] {
            return Err(Error::Shape {
                op: "decode",
                lhs: enc_shape,
                rhs: vec![batch * s, self.config.width],
            });
        }
        let vocab = self.params.value(embedding).shape()[0];
        let mut rows = Vec::with_capacity(batch * len);
        for seq in tokens {
            for &tok in seq {
                let r = token_row(tok, self.depth())?;
                if r >= vocab {
                    return Err(Error::InvalidPath(format!("token {tok:?} has no embedding row")));
                }
                rows.push(r);
            }
        }
        let table = tape.param(&self.params, embedding);
        let mut y = tape.gather_rows(table, &rows)?;
        for layer in &self.layers {
            let a = self.attend(tape, &layer.self_attn, y, y, batch, len, len, true)?;
            let r = tape.add(y, a)?;
            let h1 = self.apply_norm(tape, r, &layer.norm1)?;
            let c = self.attend(tape, &layer.cross_attn, h1, encoded, batch, len, s, false)?;
            let r = tape.add(h1, c)?;
            let h2 = self.apply_norm(tape, r, &layer.norm2)?;
            let f = self.apply_linear(tape, h2, &layer.ff1)?;
            let f = tape.tanh(f);
            let f = self.apply_linear(tape, f, &layer.ff2)?;
            let r = tape.add(h2, f)?;
            y = self.apply_norm(tape, r, &layer.norm3)?;
        }
        let mut out = Vec::with_capacity(len);
        for t in 0..len {
            let idx: Vec<usize> = (0..batch).map(|b| b * len + t).collect();
            let rows = tape.gather_rows(y, &idx)?;
            let head = &self.heads[self.head_index(t + 1)];
            out.push(self.apply_linear(tape, rows, head)?);
        }
        Ok(out)
    }

    /// Logits `[B, n]` of the flat softmax head.
    pub fn flat_logits(&self, tape: &mut Tape, encoded: Var, batch: usize) -> Result<Var> {
        if self.config.architecture != Architecture::Flat {
            return Err(Error::Config("model has no flat head".into()));
        }
        let flat = tape.reshape(encoded, &[batch, self.config.encoder_tokens * self.config.width])?;
        self.apply_linear(tape, flat, &self.heads[0])
    }

    /// n-way class logits for the non-sequence architectures.
    pub fn class_logits(&self, tape: &mut Tape, features: &Tensor) -> Result<Var> {
        let batch = features.shape()[0];
        let enc = self.encode(tape, features)?;
        match self.config.architecture {
            Architecture::Flat => self.flat_logits(tape, enc, batch),
            Architecture::OneShot => {
                let tokens = vec![vec![Token::Start]; batch];
                Ok(self.decode_positions(tape, enc, &tokens)?[0])
            }
            Architecture::Sequence => Err(Error::Config("sequence model has no class logits".into())),
        }
    }

    /// Replaces all parameters (e.g. from a checkpoint).
    pub fn load_params(&mut self, ck: &crate::numerics::Checkpoint) -> Result<()> {
        ck.load_into(&mut self.params)
    }
}
