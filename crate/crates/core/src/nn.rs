//! Transformer building blocks shared by the vision and text towers.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `x @ w` for `x: [.., in]`, `w: [in, out]`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var) -> Result<Var> {
    g.matmul(x, w)
}

/// `x @ w + b`.
pub fn affine<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    let shape = g.shape(y).to_vec();
    let bb = g.broadcast_to(b, &shape)?;
    g.add(y, bb)
}

/// Pre-norm feed-forward block without the residual: `W2 gelu(W1 x + b1) + b2`.
#[derive(Debug, Clone, Copy)]
pub struct FfnWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn ffn<T: Scalar>(g: &mut Graph<T>, x: Var, w: &FfnWeights) -> Result<Var> {
    let h = affine(g, x, w.w1, w.b1)?;
    let h = g.gelu(h);
    affine(g, h, w.w2, w.b2)
}

#[derive(Debug, Clone, Copy)]
pub struct NormWeights {
    pub gain: Var,
    pub bias: Var,
}

pub fn norm<T: Scalar>(g: &mut Graph<T>, x: Var, w: &NormWeights, eps: T) -> Result<Var> {
    g.layer_norm(x, w.gain, w.bias, eps)
}

/// `[.., n, d] -> [.., H, n, d/H]`.
pub fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let r = shape.len();
    if r < 2 || heads == 0 || !shape[r - 1].is_multiple_of(heads) {
        return Err(Error::invalid("split_heads", format!("cannot split {shape:?} into {heads} heads")));
    }
    let mut split = shape[..r - 1].to_vec();
    split.extend([heads, shape[r - 1] / heads]);
    let x = g.reshape(x, &split)?;
    let mut perm: Vec<usize> = (0..r - 2).collect();
    perm.extend([r - 1, r - 2, r]);
    g.permute(x, &perm)
}

/// Inverse of [`split_heads`].
pub fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let r = shape.len();
    if r < 3 {
        return Err(Error::invalid("merge_heads", format!("expected [.., H, n, d], got {shape:?}")));
    }
    let mut perm: Vec<usize> = (0..r - 3).collect();
    perm.extend([r - 2, r - 3, r - 1]);
    let x = g.permute(x, &perm)?;
    let mut merged = shape[..r - 3].to_vec();
    merged.extend([shape[r - 2], shape[r - 3] * shape[r - 1]]);
    g.reshape(x, &merged)
}

/// Scaled dot-product attention over split heads.
///
/// Returns `(softmax(q kᵀ/√d + bias) v, probabilities)`.
pub fn attend<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, bias: Option<Var>) -> Result<(Var, Var)> {
    let dh = *g.shape(q).last().unwrap_or(&0);
    if g.shape(k).last() != Some(&dh) {
        return Err(Error::shapes("attention head width", g.shape(q), g.shape(k)));
    }
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, T::one() / T::from_usize(dh).unwrap().sqrt());
    let probs = g.softmax_rows(scores, bias)?;
    let out = g.matmul(probs, v)?;
    Ok((out, probs))
}

/// Constant additive causal mask `[n, n]`: 0 on and below the diagonal,
/// -1e30 above it.
pub fn causal_mask<T: Scalar>(g: &mut Graph<T>, n: usize) -> Var {
    let t = crate::tensor::Tensor::from_fn(&[n, n], |i| {
        if i % n > i / n {
            T::lit(-1e30)
        } else {
            T::zero()
        }
    });
    g.constant(t)
}

/// Weights of one pre-norm transformer block, read from `{prefix}.*`.
#[derive(Debug, Clone, Copy)]
pub struct BlockWeights {
    pub ln1: NormWeights,
    pub attn: crate::temporal::AttentionWeights,
    pub ln2: NormWeights,
    pub ffn: FfnWeights,
}

pub(crate) fn norm_weights(p: &crate::params::Bound, prefix: &str) -> Result<NormWeights> {
    Ok(NormWeights {
        gain: p.get(&format!("{prefix}.gain"))?,
        bias: p.get(&format!("{prefix}.bias"))?,
    })
}

pub(crate) fn ffn_weights(p: &crate::params::Bound, prefix: &str) -> Result<FfnWeights> {
    Ok(FfnWeights {
        w1: p.get(&format!("{prefix}.w1"))?,
        b1: p.get(&format!("{prefix}.b1"))?,
        w2: p.get(&format!("{prefix}.w2"))?,
        b2: p.get(&format!("{prefix}.b2"))?,
    })
}

pub(crate) fn attention_weights(p: &crate::params::Bound, prefix: &str) -> Result<crate::temporal::AttentionWeights> {
    Ok(crate::temporal::AttentionWeights {
        wq: p.get(&format!("{prefix}.wq"))?,
        wk: p.get(&format!("{prefix}.wk"))?,
        wv: p.get(&format!("{prefix}.wv"))?,
        wo: p.get(&format!("{prefix}.wo"))?,
    })
}

impl BlockWeights {
    pub fn bind(p: &crate::params::Bound, prefix: &str) -> Result<Self> {
        Ok(Self {
            ln1: norm_weights(p, &format!("{prefix}.ln1"))?,
            attn: attention_weights(p, &format!("{prefix}.attn"))?,
            ln2: norm_weights(p, &format!("{prefix}.ln2"))?,
            ffn: ffn_weights(p, &format!("{prefix}.ffn"))?,
        })
    }
}

/// `x + FFN(LN(x))`.
pub fn ffn_residual<T: Scalar>(g: &mut Graph<T>, x: Var, ln: &NormWeights, w: &FfnWeights, eps: T) -> Result<Var> {
    let h = norm(g, x, ln, eps)?;
    let h = ffn(g, h, w)?;
    g.add(x, h)
}

/// `split_heads(x @ w)`.
pub fn project_heads<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, heads: usize) -> Result<Var> {
    let y = linear(g, x, w)?;
    split_heads(g, y, heads)
}
