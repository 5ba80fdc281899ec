//! Patch embedding and the frame-level transformer with temporal contexts.

use crate::autodiff::{Graph, Var};
use crate::config::VisionConfig;
use crate::error::{Error, Result};
use crate::nn::{ffn_residual, norm, BlockWeights};
use crate::params::Bound;
use crate::scalar::Scalar;
use crate::temporal::{cls_attention_scores, select_seeds, summarize_context, tc_attention, ContextBias, ContextSet, SeedSelection};
use crate::tensor::Tensor;

/// `T × H × W × 3` pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip<T> {
    pub frames: Tensor<T>,
    pub label: Option<usize>,
}

impl<T: Scalar> VideoClip<T> {
    pub fn new(frames: Tensor<T>, label: Option<usize>) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[3] != 3 || s[0] == 0 {
            return Err(Error::invalid("VideoClip", format!("expected [T, H, W, 3] with T >= 1, got {s:?}")));
        }
        Ok(Self { frames, label })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    /// Frame `t` as a flat `H·W·3` slice.
    pub fn frame(&self, t: usize) -> &[T] {
        let n = self.height() * self.width() * 3;
        &self.frames.data()[t * n..(t + 1) * n]
    }
}

/// `[T, H, W, 3] -> [T, N, 3P²]`; patches in raster order, each flattened
/// as (row, column, channel).
pub fn patchify<T: Scalar>(frames: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = frames.shape();
    if s.len() != 4 || s[3] != 3 || patch == 0 || !s[1].is_multiple_of(patch) || !s[2].is_multiple_of(patch) {
        return Err(Error::invalid("patchify", format!("{s:?} is not tiled by {patch} pixel patches")));
    }
    let (t, h, w) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Vec::with_capacity(frames.numel());
    for f in 0..t {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..patch {
                    let row = ((f * h + gy * patch + py) * w + gx * patch) * 3;
                    out.extend_from_slice(&frames.data()[row..row + patch * 3]);
                }
            }
        }
    }
    Tensor::new(vec![t, gh * gw, 3 * patch * patch], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, height: usize, width: usize, patch: usize) -> Result<Tensor<T>> {
    let s = patches.shape();
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) || s.len() != 3 || s[1] != (height / patch) * (width / patch) || s[2] != 3 * patch * patch {
        return Err(Error::invalid("unpatchify", format!("{s:?} does not tile {height}x{width} with {patch} pixel patches")));
    }
    let t = s[0];
    let gw = width / patch;
    let mut out = vec![T::zero(); t * height * width * 3];
    for f in 0..t {
        for i in 0..s[1] {
            let (gy, gx) = (i / gw, i % gw);
            let src = &patches.data()[(f * s[1] + i) * s[2]..(f * s[1] + i + 1) * s[2]];
            for py in 0..patch {
                let row = ((f * height + gy * patch + py) * width + gx * patch) * 3;
                out[row..row + patch * 3].copy_from_slice(&src[py * patch * 3..(py + 1) * patch * 3]);
            }
        }
    }
    Tensor::new(vec![t, height, width, 3], out)
}

/// Projects patches `[T, N, 3P²]` by `w_emb`, prepends `cls` and adds the
/// spatial position table `pos: [N+1, d]` to every frame.
pub fn patchify_embed<T: Scalar>(g: &mut Graph<T>, patches: Var, w_emb: Var, cls: Var, pos: Var) -> Result<Var> {
    let s = g.shape(patches).to_vec();
    if s.len() != 3 {
        return Err(Error::invalid("patchify_embed", format!("patches must be [T, N, 3P²], got {s:?}")));
    }
    let (t, n) = (s[0], s[1]);
    let x = g.matmul(patches, w_emb)?;
    let d = g.shape(x)[2];
    if g.shape(cls) != [d] || g.shape(pos) != [n + 1, d] {
        return Err(Error::shapes("patchify_embed", g.shape(cls), g.shape(pos)));
    }
    let c = g.reshape(cls, &[1, 1, d])?;
    let c = g.broadcast_to(c, &[t, 1, d])?;
    let x = g.concat(&[c, x], 1)?;
    let p = g.broadcast_to(pos, &[t, n + 1, d])?;
    g.add(x, p)
}

/// What one layer of [`encode_video`] did.
#[derive(Debug, Clone)]
pub struct LayerRecord<T> {
    /// 1-based layer index.
    pub layer: usize,
    /// Attention probabilities `[T, H, N+1, N+1+k]`.
    pub probs: Var,
    pub consumed_contexts: usize,
    pub selection: Option<SeedSelection<T>>,
    pub contexts: Option<ContextSet<T>>,
}

#[derive(Debug, Clone)]
pub struct VisionOutput<T> {
    /// Final frame tokens `[T, N+1, d]`.
    pub tokens: Var,
    /// Context tokens produced by the last layer, `[k_out, d]`.
    pub contexts: Option<Var>,
    pub records: Vec<LayerRecord<T>>,
}

impl<T: Scalar> VisionOutput<T> {
    /// Partition and seeds behind [`VisionOutput::contexts`].
    pub fn final_contexts(&self) -> Option<(&SeedSelection<T>, &ContextSet<T>)> {
        let r = self.records.last()?;
        Some((r.selection.as_ref()?, r.contexts.as_ref()?))
    }
}

pub fn layer_prefix(layer: usize) -> String {
    format!("vision.layer.{layer:02}")
}

/// Runs the `L_v` vision layers over `tokens: [T, N+1, d]`.
///
/// Layer `l` attends over its frame plus the contexts produced by layer
/// `l-1` when `cfg.consumes(l)`; when `cfg.produces(l)` it selects seeds
/// from its own [CLS] attention, summarizes them from the interim tokens
/// and passes the result through its FFN residual.
pub fn encode_video<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &VisionConfig, tokens: Var, eps: T) -> Result<VisionOutput<T>> {
    cfg.validate()?;
    let n = cfg.patches();
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 3 || shape[1] != n + 1 || shape[2] != cfg.dim {
        return Err(Error::invalid("encode_video", format!("tokens {shape:?} do not match [T, {}, {}]", n + 1, cfg.dim)));
    }
    let frames = shape[0];
    let mut z = tokens;
    let mut ctx: Option<Var> = None;
    let mut records = Vec::with_capacity(cfg.layers);
    for l in 1..=cfg.layers {
        let prefix = layer_prefix(l);
        let w = BlockWeights::bind(p, &prefix)?;
        let x = norm(g, z, &w.ln1, eps)?;
        let (ctx_in, bias) = match (cfg.consumes(l), ctx) {
            (true, Some(s)) => {
                let s = norm(g, s, &w.ln1, eps)?;
                let b = ContextBias {
                    local: p.get(&format!("{prefix}.bias_local"))?,
                    global: p.get(&format!("{prefix}.bias_global"))?,
                };
                (Some(s), Some(b))
            }
            _ => (None, None),
        };
        let consumed_contexts = ctx_in.map_or(0, |s| g.shape(s)[0]);
        let att = tc_attention(g, x, ctx_in, &w.attn, cfg.heads, bias.as_ref())?;
        let interim = g.add(z, att.out)?;
        let mut record = LayerRecord {
            layer: l,
            probs: att.probs,
            consumed_contexts,
            selection: None,
            contexts: None,
        };
        ctx = None;
        if cfg.produces(l) {
            let scores = cls_attention_scores(g.value(att.probs), n)?;
            let sel = select_seeds(&scores, cfg.alpha)?;
            let flat = g.reshape(interim, &[frames * (n + 1), cfg.dim])?;
            let seeds = g.index_select(flat, 0, &sel.token_rows())?;
            let seed_scores = sel.seed_scores();
            let set = summarize_context(g.value(seeds), Some(&seed_scores), &cfg.aggregation, cfg.contexts, cfg.merge_pace)?;
            let mixing = g.constant(set.mixing.clone());
            let merged = g.matmul(mixing, seeds)?;
            ctx = Some(ffn_residual(g, merged, &w.ln2, &w.ffn, eps)?);
            record.selection = Some(sel);
            record.contexts = Some(set);
        }
        z = ffn_residual(g, interim, &w.ln2, &w.ffn, eps)?;
        records.push(record);
    }
    Ok(VisionOutput { tokens: z, contexts: ctx, records })
}

/// Mean over frames of the projected [CLS] tokens: `[T, N+1, d] -> [d_vl]`.
pub fn project_and_pool<T: Scalar>(g: &mut Graph<T>, tokens: Var, w_vis: Var) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 3 {
        return Err(Error::invalid("project_and_pool", format!("tokens must be [T, n, d], got {s:?}")));
    }
    let cls = g.index_select(tokens, 1, &[0])?;
    let cls = g.reshape(cls, &[s[0], s[2]])?;
    let proj = g.matmul(cls, w_vis)?;
    let inv = T::one() / T::from_usize(s[0]).unwrap();
    let mean = g.constant(Tensor::full(&[1, s[0]], inv));
    let v = g.matmul(mean, proj)?;
    let dvl = g.shape(v)[1];
    g.reshape(v, &[dvl])
}

/// Embeds, encodes and pools one clip. Returns `(v, encoder output)`.
pub fn encode_clip<T: Scalar>(g: &mut Graph<T>, p: &Bound, cfg: &VisionConfig, clip: &VideoClip<T>, eps: T) -> Result<(Var, VisionOutput<T>)> {
    if clip.height() != cfg.height || clip.width() != cfg.width {
        return Err(Error::invalid(
            "encode_clip",
            format!("clip is {}x{}, config expects {}x{}", clip.height(), clip.width(), cfg.height, cfg.width),
        ));
    }
    let patches = g.constant(patchify(&clip.frames, cfg.patch)?);
    let tokens = patchify_embed(g, patches, p.get("vision.patch_embed")?, p.get("vision.cls")?, p.get("vision.pos")?)?;
    let out = encode_video(g, p, cfg, tokens, eps)?;
    let v = project_and_pool(g, out.tokens, p.get("vision.proj")?)?;
    Ok((v, out))
}
