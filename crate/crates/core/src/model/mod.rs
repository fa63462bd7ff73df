//! The attention-coupled primitive classifier.
//!
//! Attribute and object word embeddings are concatenated into one token
//! sequence and passed through a single self-attention block. Image features
//! and attended tokens are projected by separate MLPs into an attribute space
//! and an object space, where temperature-scaled cosine similarity gives the
//! logits of two independent classifiers. A composition's score is the
//! product of its attribute and object probabilities.

mod checkpoint;
mod network;
mod weights;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use network::{attention_block, forward_tape, loss_tape, mlp, multi_head_attention, AttentionOutput, Mode, ScoreVars};
pub use weights::{mlp_widths, Attention, Head, Linear, Mlp, Norm, Weights};

use rand::RngCore;

use crate::data::{EmbeddingTable, VocabSpace};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("feasibility mask admits no composition")]
    EmptyFeasibleSet,
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),
    #[error("corrupt checkpoint: {0}")]
    CorruptManifest(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub heads: usize,
    pub d_word: usize,
    pub d_img: usize,
    /// Width of both the attribute and the object space.
    pub d_shared: usize,
    /// Linear layers per projection MLP.
    pub mlp_depth: usize,
    pub dropout: f64,
    /// Fixed logit scale applied to cosine similarities.
    pub temperature: f64,
    pub attention_residual: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            heads: 2,
            d_word: 300,
            d_img: 512,
            d_shared: 512,
            mlp_depth: 2,
            dropout: 0.1,
            temperature: 20.0,
            attention_residual: true,
            ln_eps: 1e-5,
        }
    }
}

pub const MAX_HEADS: usize = 32;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if !(1..=MAX_HEADS).contains(&self.heads) {
            return fail(format!("head count {} outside 1..={MAX_HEADS}", self.heads));
        }
        if self.d_word == 0 || self.d_img == 0 || self.d_shared == 0 {
            return fail("dimensions must be positive".into());
        }
        if !self.d_word.is_multiple_of(self.heads) {
            return fail(format!(
                "word dimension {} is not divisible by {} heads",
                self.d_word, self.heads
            ));
        }
        if self.mlp_depth == 0 {
            return fail("MLP depth must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        if self.ln_eps.is_nan() || self.ln_eps < 0.0 {
            return fail("layer-norm epsilon must be non-negative".into());
        }
        Ok(())
    }
}

/// Frozen token tables plus trainable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `[n × d_word]`, frozen
    pub attr_tokens: Tensor,
    /// `[m × d_word]`, frozen
    pub obj_tokens: Tensor,
    pub weights: Weights<Tensor>,
}

/// Weights bound to a tape as trainable leaves.
pub struct Bound {
    pub weights: Weights<Var>,
    pub attr_tokens: Var,
    pub obj_tokens: Var,
}

impl ModelParams {
    pub fn new<R: RngCore + ?Sized>(config: ModelConfig, attr_tokens: Tensor, obj_tokens: Tensor, rng: &mut R) -> Result<Self> {
        config.validate()?;
        for (what, t) in [("attribute", &attr_tokens), ("object", &obj_tokens)] {
            if t.rank() != 2 || t.cols() != config.d_word {
                return Err(ModelError::Shape(format!(
                    "{what} tokens have shape {:?}, expected [_, {}]",
                    t.shape(),
                    config.d_word
                )));
            }
        }
        let weights = Weights::random(&config, rng);
        Ok(ModelParams {
            config,
            attr_tokens,
            obj_tokens,
            weights,
        })
    }

    /// Builds the token tables from `embeddings`; `config.d_word` is taken
    /// from the table.
    pub fn from_embeddings<R: RngCore + ?Sized>(
        mut config: ModelConfig,
        vocab: &VocabSpace,
        embeddings: &EmbeddingTable,
        rng: &mut R,
    ) -> Result<Self> {
        config.d_word = embeddings.dim();
        let attr = embeddings.matrix_for(vocab.attributes())?;
        let obj = embeddings.matrix_for(vocab.objects())?;
        Self::new(config, attr, obj, rng)
    }

    pub fn n_attrs(&self) -> usize {
        self.attr_tokens.rows()
    }

    pub fn n_objs(&self) -> usize {
        self.obj_tokens.rows()
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let attr_tokens = tape.constant(self.attr_tokens.clone());
        let obj_tokens = tape.constant(self.obj_tokens.clone());
        let weights = self.weights.map(|t| tape.param(t.clone()));
        Bound {
            weights,
            attr_tokens,
            obj_tokens,
        }
    }

    /// Scores a batch `z` of `[b × d_img]` image features.
    pub fn forward(&self, z: &Tensor, mut mode: Mode<'_>) -> Result<ScoreBundle> {
        if z.rank() != 2 || z.cols() != self.config.d_img {
            return Err(ModelError::Shape(format!(
                "image batch has shape {:?}, expected [_, {}]",
                z.shape(),
                self.config.d_img
            )));
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let zv = tape.constant(z.clone());
        let s = forward_tape(&mut tape, &self.config, &b.weights, b.attr_tokens, b.obj_tokens, zv, &mut mode)?;
        ScoreBundle::from_logits(tape.value(s.attr_logits).clone(), tape.value(s.obj_logits).clone())
    }

    /// Per-head attention matrices over the token sequence, eval mode.
    pub fn attention_weights(&self) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let (_, _, weights) = attention_block(
            &mut tape,
            &b.weights.attention,
            b.attr_tokens,
            b.obj_tokens,
            &self.config,
            &mut Mode::Eval,
        )?;
        Ok(weights.into_iter().map(|w| tape.value(w).clone()).collect())
    }
}

/// Logits and probabilities of both primitive classifiers for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBundle {
    /// `[b × n]`
    pub attr_logits: Tensor,
    /// `[b × m]`
    pub obj_logits: Tensor,
    pub attr_probs: Tensor,
    pub obj_probs: Tensor,
}

fn row_softmax(t: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(t.clone());
    let s = tape.softmax(v, 1)?;
    Ok(tape.value(s).clone())
}

impl ScoreBundle {
    pub fn from_logits(attr_logits: Tensor, obj_logits: Tensor) -> Result<Self> {
        if attr_logits.rank() != 2 || obj_logits.rank() != 2 || attr_logits.rows() != obj_logits.rows() {
            return Err(ModelError::Shape(format!(
                "logit shapes {:?} and {:?} do not form a batch",
                attr_logits.shape(),
                obj_logits.shape()
            )));
        }
        let attr_probs = row_softmax(&attr_logits)?;
        let obj_probs = row_softmax(&obj_logits)?;
        Ok(ScoreBundle {
            attr_logits,
            obj_logits,
            attr_probs,
            obj_probs,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.attr_logits.rows()
    }

    pub fn n_attrs(&self) -> usize {
        self.attr_logits.cols()
    }

    pub fn n_objs(&self) -> usize {
        self.obj_logits.cols()
    }
}

/// Mean attribute cross-entropy plus mean object cross-entropy.
pub fn loss(bundle: &ScoreBundle, attr_targets: &[usize], obj_targets: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let s = ScoreVars {
        attr_logits: tape.constant(bundle.attr_logits.clone()),
        obj_logits: tape.constant(bundle.obj_logits.clone()),
        attention: Vec::new(),
    };
    let l = loss_tape(&mut tape, &s, attr_targets, obj_targets)?;
    Ok(tape.value(l).clone())
}

/// Product of attribute and object probabilities for every composition,
/// `[b × (n·m)]` in enumeration order.
pub fn composition_scores(bundle: &ScoreBundle) -> Tensor {
    let (b, n, m) = (bundle.batch_size(), bundle.n_attrs(), bundle.n_objs());
    let mut data = Vec::with_capacity(b * n * m);
    for i in 0..b {
        let pa = bundle.attr_probs.row(i);
        let po = bundle.obj_probs.row(i);
        for &a in pa {
            data.extend(po.iter().map(|&o| a * o));
        }
    }
    Tensor::matrix(b, n * m, data).expect("non-empty batch")
}

fn check_vocab(bundle: &ScoreBundle, vocab: &VocabSpace) -> Result<()> {
    if bundle.n_attrs() != vocab.n_attrs() || bundle.n_objs() != vocab.n_objs() {
        return Err(ModelError::Shape(format!(
            "scores cover {}×{} primitives, vocabulary has {}×{}",
            bundle.n_attrs(),
            bundle.n_objs(),
            vocab.n_attrs(),
            vocab.n_objs()
        )));
    }
    Ok(())
}

/// Highest-scoring composition per image over the full space; the lowest
/// composition index wins ties.
pub fn predict(bundle: &ScoreBundle, vocab: &VocabSpace) -> Result<Vec<(usize, usize)>> {
    check_vocab(bundle, vocab)?;
    let scores = composition_scores(bundle);
    Ok(scores.argmax_rows().into_iter().map(|c| vocab.composition(c)).collect())
}

/// Like [`predict`] but only compositions whose `mask` entry is true are
/// candidates.
pub fn predict_feasible(bundle: &ScoreBundle, vocab: &VocabSpace, mask: &[bool]) -> Result<Vec<(usize, usize)>> {
    check_vocab(bundle, vocab)?;
    if mask.len() != vocab.n_compositions() {
        return Err(ModelError::Shape(format!(
            "mask has {} entries for {} compositions",
            mask.len(),
            vocab.n_compositions()
        )));
    }
    if !mask.iter().any(|&f| f) {
        return Err(ModelError::EmptyFeasibleSet);
    }
    let scores = composition_scores(bundle);
    let preds = (0..bundle.batch_size())
        .map(|i| {
            let row = scores.row(i);
            let mut best: Option<usize> = None;
            for (c, &s) in row.iter().enumerate() {
                if mask[c] && best.is_none_or(|b| s > row[b]) {
                    best = Some(c);
                }
            }
            vocab.composition(best.expect("mask has a true entry"))
        })
        .collect();
    Ok(preds)
}
