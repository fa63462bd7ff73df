//! Tape-level forward pass.

use rand::RngCore;

use super::weights::{Attention, Linear, Mlp, Weights};
use super::ModelConfig;
use crate::tensor::{Result, Tape, Var};

/// Whether dropout is active. Training carries the RNG that draws masks.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => tape.dropout(x, p, true, &mut **rng),
        }
    }
}

/// Output of [`multi_head_attention`] and [`attention_block`].
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Var,
    /// One `[L × L]` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

fn linear(tape: &mut Tape, layer: &Linear<Var>, x: Var) -> Result<Var> {
    let y = tape.matmul(x, layer.weight)?;
    tape.add_row(y, layer.bias)
}

pub fn mlp(tape: &mut Tape, net: &Mlp<Var>, x: Var, cfg: &ModelConfig, mode: &mut Mode<'_>) -> Result<Var> {
    let mut h = x;
    let last = net.layers.len() - 1;
    for (i, layer) in net.layers.iter().enumerate() {
        h = linear(tape, layer, h)?;
        if i < last {
            let n = &net.norms[i];
            h = tape.layer_norm(h, n.gain, n.bias, cfg.ln_eps)?;
            h = tape.relu(h)?;
            h = mode.dropout(tape, h, cfg.dropout)?;
        }
    }
    Ok(h)
}

/// Scaled dot-product self-attention over the rows of `x`, one head per
/// entry of `att.heads`, with head outputs projected back and summed.
pub fn multi_head_attention(tape: &mut Tape, att: &Attention<Var>, x: Var) -> Result<AttentionOutput> {
    let mut weights = Vec::with_capacity(att.heads.len());
    let mut total: Option<Var> = None;
    for head in &att.heads {
        let q = tape.matmul(x, head.query)?;
        let k = tape.matmul(x, head.key)?;
        let v = tape.matmul(x, head.value)?;
        let dh = tape.value(q).cols() as f64;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / dh.sqrt())?;
        let a = tape.softmax(scores, 1)?;
        let ctx = tape.matmul(a, v)?;
        let projected = tape.matmul(ctx, head.output)?;
        total = Some(match total {
            None => projected,
            Some(t) => tape.add(t, projected)?,
        });
        weights.push(a);
    }
    let total = total.expect("at least one head");
    let output = tape.add_row(total, att.out_bias)?;
    Ok(AttentionOutput { output, weights })
}

/// Attention block over the concatenated `[attributes; objects]` token
/// sequence: attention, dropout, optional residual, LayerNorm, Linear, ReLU.
/// Returns the attended attribute rows and object rows separately.
pub fn attention_block(
    tape: &mut Tape,
    att: &Attention<Var>,
    attr_tokens: Var,
    obj_tokens: Var,
    cfg: &ModelConfig,
    mode: &mut Mode<'_>,
) -> Result<(Var, Var, Vec<Var>)> {
    let n = tape.value(attr_tokens).rows();
    let m = tape.value(obj_tokens).rows();
    let x = tape.concat_rows(&[attr_tokens, obj_tokens])?;
    let AttentionOutput { output, weights } = multi_head_attention(tape, att, x)?;
    let mut y = mode.dropout(tape, output, cfg.dropout)?;
    if cfg.attention_residual {
        y = tape.add(x, y)?;
    }
    let y = tape.layer_norm(y, att.norm.gain, att.norm.bias, cfg.ln_eps)?;
    let y = linear(tape, &att.post, y)?;
    let y = tape.relu(y)?;
    let attr_ctx = tape.slice_rows(y, 0, n)?;
    let obj_ctx = tape.slice_rows(y, n, m)?;
    Ok((attr_ctx, obj_ctx, weights))
}

/// Logits of both primitive heads for a batch of image features.
#[derive(Debug, Clone)]
pub struct ScoreVars {
    pub attr_logits: Var,
    pub obj_logits: Var,
    pub attention: Vec<Var>,
}

pub fn forward_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &Weights<Var>,
    attr_tokens: Var,
    obj_tokens: Var,
    z: Var,
    mode: &mut Mode<'_>,
) -> Result<ScoreVars> {
    let (attr_ctx, obj_ctx, attention) = attention_block(tape, &w.attention, attr_tokens, obj_tokens, cfg, mode)?;
    let img_attr = mlp(tape, &w.image_attr, z, cfg, mode)?;
    let img_obj = mlp(tape, &w.image_obj, z, cfg, mode)?;
    let txt_attr = mlp(tape, &w.text_attr, attr_ctx, cfg, mode)?;
    let txt_obj = mlp(tape, &w.text_obj, obj_ctx, cfg, mode)?;
    let attr_cos = tape.cosine_rows(img_attr, txt_attr)?;
    let obj_cos = tape.cosine_rows(img_obj, txt_obj)?;
    Ok(ScoreVars {
        attr_logits: tape.scale(attr_cos, cfg.temperature)?,
        obj_logits: tape.scale(obj_cos, cfg.temperature)?,
        attention,
    })
}

/// Sum of the mean attribute and mean object cross-entropies.
pub fn loss_tape(tape: &mut Tape, scores: &ScoreVars, attr_targets: &[usize], obj_targets: &[usize]) -> Result<Var> {
    let la = tape.cross_entropy(scores.attr_logits, attr_targets)?;
    let lo = tape.cross_entropy(scores.obj_logits, obj_targets)?;
    tape.add(la, lo)
}
