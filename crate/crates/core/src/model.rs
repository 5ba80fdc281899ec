//! Parameter initialization and the batched video-text similarity forward.

use crate::autodiff::{Graph, Var};
use crate::config::{ModelConfig, VpInit};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::{self, PromptState, VpWeights};
use crate::vision::{self, VideoClip, VisionOutput};

struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: SplitMix64,
}

impl<T: Scalar> Init<'_, T> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) {
        let t = Tensor::from_fn(shape, |_| T::lit(std * self.rng.normal()));
        self.store.insert(name, t);
    }

    fn fill(&mut self, name: String, shape: &[usize], value: f64) {
        self.store.insert(name, Tensor::full(shape, T::lit(value)));
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.fill(format!("{prefix}.gain"), &[d], 1.0);
        self.fill(format!("{prefix}.bias"), &[d], 0.0);
    }

    fn ffn(&mut self, prefix: &str, d: usize) {
        let s = 1.0 / (d as f64).sqrt();
        self.normal(format!("{prefix}.w1"), &[d, 4 * d], s);
        self.fill(format!("{prefix}.b1"), &[4 * d], 0.0);
        self.normal(format!("{prefix}.w2"), &[4 * d, d], 0.5 * s);
        self.fill(format!("{prefix}.b2"), &[d], 0.0);
    }

    fn block(&mut self, prefix: &str, d: usize) {
        let s = 1.0 / (d as f64).sqrt();
        self.norm(&format!("{prefix}.ln1"), d);
        for w in ["wq", "wk", "wv", "wo"] {
            self.normal(format!("{prefix}.attn.{w}"), &[d, d], s);
        }
        self.norm(&format!("{prefix}.ln2"), d);
        self.ffn(&format!("{prefix}.ffn"), d);
    }
}

/// Deterministic random initialization from `seed`.
///
/// Context biases exist only on layers that consume contexts. Prompt
/// vectors start as copies of the reserved vocabulary rows, and the
/// prompting block copies the last text layer unless `vp_init` is random.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut it = Init { store: &mut store, rng: SplitMix64::new(seed) };
    let v = &cfg.vision;
    let (dv, n) = (v.dim, v.patches());
    it.normal("vision.patch_embed".into(), &[v.patch_dim(), dv], 1.0 / (v.patch_dim() as f64).sqrt());
    it.normal("vision.cls".into(), &[dv], 0.1);
    it.normal("vision.pos".into(), &[n + 1, dv], 0.1);
    for l in 1..=v.layers {
        let prefix = vision::layer_prefix(l);
        it.block(&prefix, dv);
        if v.consumes(l) {
            it.fill(format!("{prefix}.bias_local"), &[v.heads], 0.0);
            it.fill(format!("{prefix}.bias_global"), &[v.heads], 0.0);
        }
    }
    it.normal("vision.proj".into(), &[dv, cfg.embed_dim], 1.0 / (dv as f64).sqrt());

    let t = &cfg.text;
    let dl = t.dim;
    it.normal("text.token_embed".into(), &[t.vocab, dl], 0.5);
    it.normal("text.pos".into(), &[t.max_len, dl], 0.1);
    for l in 1..=t.layers {
        it.block(&text::layer_prefix(l), dl);
    }
    it.normal("text.proj".into(), &[dl, cfg.embed_dim], 1.0 / (dl as f64).sqrt());
    it.fill("log_tau".into(), &[], cfg.init_temperature.ln());
    if t.prompts > 0 {
        let table = it.store.get("text.token_embed")?;
        let rows = table.data()[..t.prompts * dl].to_vec();
        it.store.insert("text.prompts", Tensor::new(vec![t.prompts, dl], rows)?);
    }
    if t.vp_enabled {
        init_vp(&mut it, cfg)?;
    }
    Ok(store)
}

fn init_vp<T: Scalar>(it: &mut Init<'_, T>, cfg: &ModelConfig) -> Result<()> {
    let (dl, dvl) = (cfg.text.dim, cfg.embed_dim);
    let last = text::layer_prefix(cfg.text.layers);
    let copy_rows = cfg.text.vp_init == VpInit::LastTextLayer && dvl <= dl;
    match cfg.text.vp_init {
        VpInit::LastTextLayer => {
            let pairs = [("ln1.gain", "ln_p.gain"), ("ln1.bias", "ln_p.bias"), ("attn.wq", "attn.wq"), ("attn.wo", "attn.wo"), ("ln2.gain", "ln_ffn.gain"), ("ln2.bias", "ln_ffn.bias"), ("ffn.w1", "ffn.w1"), ("ffn.b1", "ffn.b1"), ("ffn.w2", "ffn.w2"), ("ffn.b2", "ffn.b2")];
            for (src, dst) in pairs {
                let t = it.store.get(&format!("{last}.{src}"))?.clone();
                it.store.insert(format!("vp.{dst}"), t);
            }
        }
        VpInit::Random => {
            it.norm("vp.ln_p", dl);
            let s = 1.0 / (dl as f64).sqrt();
            it.normal("vp.attn.wq".into(), &[dl, dl], s);
            it.normal("vp.attn.wo".into(), &[dl, dl], s);
            it.norm("vp.ln_ffn", dl);
            it.ffn("vp.ffn", dl);
        }
    }
    for w in ["wk", "wv"] {
        if copy_rows {
            let t = it.store.get(&format!("{last}.attn.{w}"))?;
            let rows = t.data()[..dvl * dl].to_vec();
            it.store.insert(format!("vp.attn.{w}"), Tensor::new(vec![dvl, dl], rows)?);
        } else {
            it.normal(format!("vp.attn.{w}"), &[dvl, dl], 1.0 / (dvl as f64).sqrt());
        }
    }
    it.norm("vp.ln_s", dvl);
    Ok(())
}

/// Similarities and intermediate handles for one batch.
#[derive(Debug, Clone)]
pub struct BatchOutput<T> {
    /// Cosine similarities `[B, C]`.
    pub sims: Var,
    /// `sims / τ`.
    pub logits: Var,
    /// Pooled video embeddings, one `[d_vl]` per clip.
    pub videos: Vec<Var>,
    /// Class embeddings `[C, d_vl]` per clip (shared when prompting is off).
    pub classes: Vec<Var>,
    pub vision: Vec<VisionOutput<T>>,
    /// Stop-gradient context projections fed to prompting, one per clip.
    pub projected_contexts: Vec<Var>,
}

/// Scores every clip against every class name (token id lists).
pub fn forward_batch<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, clips: &[VideoClip<T>], classes: &[Vec<usize>]) -> Result<BatchOutput<T>> {
    forward_batch_frozen(g, p, cfg, clips, classes, None)
}

/// [`forward_batch`] with the prompting inputs replaced by fixed values.
///
/// Because the projected contexts sit behind a stop-gradient, the loss with
/// `frozen` set to their current values has the same value and the same
/// gradient as the original, while finite differences of it match the
/// analytic gradient.
pub fn forward_batch_frozen<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    clips: &[VideoClip<T>],
    classes: &[Vec<usize>],
    frozen: Option<&[Tensor<T>]>,
) -> Result<BatchOutput<T>> {
    if clips.is_empty() || classes.is_empty() {
        return Err(Error::invalid("forward_batch", "need at least one clip and one class"));
    }
    if frozen.is_some_and(|f| f.len() != clips.len()) {
        return Err(Error::invalid("forward_batch", "need one frozen context set per clip"));
    }
    let eps = T::lit(cfg.layer_norm_eps);
    let states = classes
        .iter()
        .map(|ids| PromptState::prepare(g, p, &cfg.text, ids, eps))
        .collect::<Result<Vec<_>>>()?;
    let shared = if cfg.text.vp_enabled {
        None
    } else {
        Some(class_matrix(g, p, cfg, &states, None, eps)?)
    };
    let vp = if cfg.text.vp_enabled { Some(VpWeights::bind(p)?) } else { None };
    let mut rows = Vec::with_capacity(clips.len());
    let mut videos = Vec::with_capacity(clips.len());
    let mut class_embs = Vec::with_capacity(clips.len());
    let mut vision_out = Vec::with_capacity(clips.len());
    let mut projected = Vec::new();
    for (i, clip) in clips.iter().enumerate() {
        let (v, out) = vision::encode_clip(g, p, &cfg.vision, clip, eps)?;
        let c = match (&vp, shared) {
            (_, Some(c)) => c,
            (Some(w), None) => {
                let ctx = out.contexts.ok_or_else(|| Error::invalid("forward_batch", "prompting needs context tokens from the last vision layer"))?;
                let s_proj = match frozen {
                    Some(f) => g.constant(f[i].clone()),
                    None => text::project_contexts(g, p, ctx)?,
                };
                projected.push(s_proj);
                let pr = states[0].prompt_rows(g)?;
                let (pt, _) = text::vp_forward(g, pr, s_proj, w, cfg.text.heads, eps)?;
                class_matrix(g, p, cfg, &states, Some(pt), eps)?
            }
            (None, None) => unreachable!(),
        };
        let vn = g.reshape(v, &[1, cfg.embed_dim])?;
        let vn = g.l2_normalize(vn)?;
        let cn = g.l2_normalize(c)?;
        rows.push(g.matmul_nt(vn, cn)?);
        videos.push(v);
        class_embs.push(c);
        vision_out.push(out);
    }
    let sims = g.concat(&rows, 0)?;
    let log_tau = p.get("log_tau")?;
    let inv_tau = g.scale(log_tau, -T::one());
    let inv_tau = g.exp(inv_tau);
    let logits = g.mul(sims, inv_tau)?;
    Ok(BatchOutput { sims, logits, videos, classes: class_embs, vision: vision_out, projected_contexts: projected })
}

fn class_matrix<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, states: &[PromptState], prompts: Option<Var>, eps: T) -> Result<Var> {
    let mut rows = Vec::with_capacity(states.len());
    for s in states {
        let c = s.finish(g, p, &cfg.text, prompts, eps)?;
        rows.push(g.reshape(c, &[1, cfg.embed_dim])?);
    }
    g.concat(&rows, 0)
}
