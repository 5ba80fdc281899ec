//! Causal text encoder with learnable prompts and video-conditional prompting.
//!
//! A class name is encoded as `[p_1..p_np, w_1..w_m, EOS]`. Because the
//! prompts come first and attention is causal, prompt states never depend
//! on the class, which lets the batched model share them across classes.

use crate::autodiff::{Graph, Var};
use crate::config::TextConfig;
use crate::error::{Error, Result};
use crate::nn::{attend, attention_weights, causal_mask, ffn_residual, ffn_weights, linear, merge_heads, norm, norm_weights, project_heads, BlockWeights, FfnWeights, NormWeights};
use crate::params::Bound;
use crate::scalar::Scalar;
use crate::temporal::AttentionWeights;

/// Prompt slots followed by class word ids; EOS is implicit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextSequence {
    pub prompts: usize,
    pub ids: Vec<usize>,
}

impl TextSequence {
    pub fn len(&self) -> usize {
        self.prompts + self.ids.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eos_position(&self) -> usize {
        self.len() - 1
    }
}

pub fn layer_prefix(layer: usize) -> String {
    format!("text.layer.{layer:02}")
}

/// `[p⁰, c⁰] + pos` of shape `[n_p + m + 1, d_l]`.
pub fn embed_text<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &TextConfig, ids: &[usize]) -> Result<Var> {
    let seq = TextSequence { prompts: cfg.prompts, ids: ids.to_vec() };
    if seq.len() > cfg.max_len {
        return Err(Error::invalid("embed_text", format!("sequence of {} exceeds max length {}", seq.len(), cfg.max_len)));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab) {
        return Err(Error::invalid("embed_text", format!("token id {bad} is outside the vocabulary of {}", cfg.vocab)));
    }
    let mut rows = ids.to_vec();
    rows.push(cfg.eos_id());
    let table = p.get("text.token_embed")?;
    let words = g.index_select(table, 0, &rows)?;
    let x = if cfg.prompts > 0 {
        let prompts = p.get("text.prompts")?;
        g.concat(&[prompts, words], 0)?
    } else {
        words
    };
    let pos = g.index_select(p.get("text.pos")?, 0, &(0..seq.len()).collect::<Vec<_>>())?;
    g.add(x, pos)
}

/// One causal pre-norm block on `x: [n, d]`.
pub fn text_block<T: Scalar>(g: &mut Graph<T>, x: Var, w: &BlockWeights, heads: usize, eps: T) -> Result<Var> {
    let n = g.shape(x)[0];
    let h = norm(g, x, &w.ln1, eps)?;
    let mask = causal_mask(g, n);
    let q = project_heads(g, h, w.attn.wq, heads)?;
    let k = project_heads(g, h, w.attn.wk, heads)?;
    let v = project_heads(g, h, w.attn.wv, heads)?;
    let (o, _) = attend(g, q, k, v, Some(mask))?;
    let o = merge_heads(g, o)?;
    let o = linear(g, o, w.attn.wo)?;
    let x = g.add(x, o)?;
    ffn_residual(g, x, &w.ln2, &w.ffn, eps)
}

#[derive(Debug, Clone, Copy)]
pub struct VpWeights {
    pub ln_p: NormWeights,
    pub ln_s: NormWeights,
    /// `wq, wo: [d_l, d_l]`; `wk, wv: [d_vl, d_l]`.
    pub attn: AttentionWeights,
    pub ln_ffn: NormWeights,
    pub ffn: FfnWeights,
}

impl VpWeights {
    pub fn bind(p: &Bound) -> Result<Self> {
        Ok(Self {
            ln_p: norm_weights(p, "vp.ln_p")?,
            ln_s: norm_weights(p, "vp.ln_s")?,
            attn: attention_weights(p, "vp.attn")?,
            ln_ffn: norm_weights(p, "vp.ln_ffn")?,
            ffn: ffn_weights(p, "vp.ffn")?,
        })
    }
}

/// Prompts `[n_p, d_l]` cross-attend to projected contexts `[k, d_vl]`:
/// `p̂ = MHCA(LN(p), LN(s)) + p`, `p̃ = FFN(LN(p̂)) + p̂`.
///
/// Returns `(p̃, attention probabilities [H, n_p, k])`.
pub fn vp_forward<T: Scalar>(g: &mut Graph<T>, prompts: Var, s_proj: Var, w: &VpWeights, heads: usize, eps: T) -> Result<(Var, Var)> {
    if g.shape(s_proj).len() != 2 || g.shape(s_proj)[0] == 0 {
        return Err(Error::invalid("vp_forward", format!("contexts must be [k >= 1, d], got {:?}", g.shape(s_proj))));
    }
    let hp = norm(g, prompts, &w.ln_p, eps)?;
    let hs = norm(g, s_proj, &w.ln_s, eps)?;
    let q = project_heads(g, hp, w.attn.wq, heads)?;
    let k = project_heads(g, hs, w.attn.wk, heads)?;
    let v = project_heads(g, hs, w.attn.wv, heads)?;
    let (o, probs) = attend(g, q, k, v, None)?;
    let o = merge_heads(g, o)?;
    let o = linear(g, o, w.attn.wo)?;
    let p_hat = g.add(prompts, o)?;
    Ok((ffn_residual(g, p_hat, &w.ln_ffn, &w.ffn, eps)?, probs))
}

/// Text states entering the last layer, for one class name.
#[derive(Debug, Clone, Copy)]
pub struct PromptState {
    /// `[n_p + m + 1, d_l]` after layers `1..L_c-1`.
    pub states: Var,
    pub prompts: usize,
}

impl PromptState {
    /// Runs the embedding and all but the last layer.
    pub fn prepare<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &TextConfig, ids: &[usize], eps: T) -> Result<Self> {
        let mut x = embed_text(g, p, cfg, ids)?;
        for l in 1..cfg.layers {
            let w = BlockWeights::bind(p, &layer_prefix(l))?;
            x = text_block(g, x, &w, cfg.heads, eps)?;
        }
        Ok(Self { states: x, prompts: cfg.prompts })
    }

    /// The prompt rows `[n_p, d_l]`.
    pub fn prompt_rows<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Var> {
        g.index_select(self.states, 0, &(0..self.prompts).collect::<Vec<_>>())
    }

    /// Replaces the prompt rows, runs the last layer and projects EOS.
    pub fn finish<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, cfg: &TextConfig, prompts: Option<Var>, eps: T) -> Result<Var> {
        let n = g.shape(self.states)[0];
        let x = match prompts {
            Some(pr) if self.prompts > 0 => {
                let rest = g.index_select(self.states, 0, &(self.prompts..n).collect::<Vec<_>>())?;
                g.concat(&[pr, rest], 0)?
            }
            _ => self.states,
        };
        let x = if cfg.layers > 0 {
            let w = BlockWeights::bind(p, &layer_prefix(cfg.layers))?;
            text_block(g, x, &w, cfg.heads, eps)?
        } else {
            x
        };
        let eos = g.index_select(x, 0, &[n - 1])?;
        let c = g.matmul(eos, p.get("text.proj")?)?;
        let d = g.shape(c)[1];
        g.reshape(c, &[d])
    }
}

/// Class embedding `c: [d_vl]`.
///
/// With prompting enabled the prompts are conditioned on
/// `stop_gradient(contexts · W_vis)` before the last layer; `contexts` are
/// the final vision-layer context tokens `[k, d_v]`.
pub fn encode_text<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &TextConfig, ids: &[usize], contexts: Option<Var>, eps: T) -> Result<Var> {
    let state = PromptState::prepare(g, p, cfg, ids, eps)?;
    let prompts = if cfg.vp_enabled {
        let ctx = contexts.ok_or_else(|| Error::invalid("encode_text", "video-conditional prompting needs context tokens"))?;
        let s_proj = project_contexts(g, p, ctx)?;
        let pr = state.prompt_rows(g)?;
        Some(vp_forward(g, pr, s_proj, &VpWeights::bind(p)?, cfg.heads, eps)?.0)
    } else {
        None
    };
    state.finish(g, p, cfg, prompts, eps)
}

/// `stop_gradient(s · W_vis)`.
pub fn project_contexts<T: Scalar>(g: &mut Graph<T>, p: &Bound, contexts: Var) -> Result<Var> {
    let s = g.matmul(contexts, p.get("vision.proj")?)?;
    Ok(g.stop_gradient(s))
}
