//! Multi-head attention with context tokens appended to the key/value rows.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{attend, linear, merge_heads, split_heads};
use crate::scalar::Scalar;

/// Square `[d, d]` projections shared by frame and context tokens.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Per-head logit offsets for frame columns (`local`) and context columns
/// (`global`), each of shape `[H]`.
#[derive(Debug, Clone, Copy)]
pub struct ContextBias {
    pub local: Var,
    pub global: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `[T, n, d]`, before the residual connection.
    pub out: Var,
    /// `[T, H, n, n + k]`.
    pub probs: Var,
}

fn head_bias<T: Scalar>(g: &mut Graph<T>, b: Var, heads: usize, cols: usize) -> Result<Var> {
    if g.shape(b) != [heads] {
        return Err(Error::shapes("context bias", g.shape(b), &[heads]));
    }
    let b = g.reshape(b, &[heads, 1, 1])?;
    g.broadcast_to(b, &[heads, 1, cols])
}

/// Attention of every frame's tokens `x: [T, n, d]` over its own tokens
/// and the shared context tokens `ctx: [k, d]`.
///
/// Both `x` and `ctx` should already be layer-normed. With `ctx = None`
/// and no bias this is plain frame-wise multi-head attention.
pub fn tc_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    ctx: Option<Var>,
    w: &AttentionWeights,
    heads: usize,
    bias: Option<&ContextBias>,
) -> Result<AttentionOutput> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid("tc_attention", format!("frame tokens must be [T, n, d], got {shape:?}")));
    }
    let (frames, n, d) = (shape[0], shape[1], shape[2]);
    if let Some(c) = ctx {
        if g.shape(c).len() != 2 || g.shape(c)[1] != d {
            return Err(Error::shapes("tc_attention context width", g.shape(c), &shape));
        }
    }
    let ctx = ctx.filter(|&c| g.shape(c)[0] > 0);
    let q = linear(g, x, w.wq)?;
    let q = split_heads(g, q, heads)?;
    let mut k = linear(g, x, w.wk)?;
    k = split_heads(g, k, heads)?;
    let mut v = linear(g, x, w.wv)?;
    v = split_heads(g, v, heads)?;
    let dh = d / heads;
    let mut kc = 0;
    if let Some(c) = ctx {
        kc = g.shape(c)[0];
        let expand = |g: &mut Graph<T>, p: Var| -> Result<Var> {
            let s = linear(g, c, p)?;
            let s = split_heads(g, s, heads)?;
            let s = g.reshape(s, &[1, heads, kc, dh])?;
            g.broadcast_to(s, &[frames, heads, kc, dh])
        };
        let ks = expand(g, w.wk)?;
        let vs = expand(g, w.wv)?;
        k = g.concat(&[k, ks], 2)?;
        v = g.concat(&[v, vs], 2)?;
    }
    let b = match bias {
        Some(b) => {
            let mut parts = vec![head_bias(g, b.local, heads, n)?];
            if kc > 0 {
                parts.push(head_bias(g, b.global, heads, kc)?);
            }
            Some(g.concat(&parts, 2)?)
        }
        None => None,
    };
    let (o, probs) = attend(g, q, k, v, b)?;
    let o = merge_heads(g, o)?;
    let out = linear(g, o, w.wo)?;
    Ok(AttentionOutput { out, probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::Tensor;

    struct Fixture {
        g: Graph<f64>,
        x: Var,
        ctx: Var,
        w: AttentionWeights,
    }

    fn fixture(seed: u64, frames: usize, n: usize, k: usize, d: usize) -> Fixture {
        let mut rng = SplitMix64::new(seed);
        let mut g = Graph::new();
        let mut t = |g: &mut Graph<f64>, s: &[usize], std: f64| g.leaf(Tensor::from_fn(s, |_| std * rng.normal()));
        let x = t(&mut g, &[frames, n, d], 1.0);
        let ctx = t(&mut g, &[k, d], 1.0);
        let sd = 1.0 / (d as f64).sqrt();
        let w = AttentionWeights {
            wq: t(&mut g, &[d, d], sd),
            wk: t(&mut g, &[d, d], sd),
            wv: t(&mut g, &[d, d], sd),
            wo: t(&mut g, &[d, d], sd),
        };
        Fixture { g, x, ctx, w }
    }

    fn bias(g: &mut Graph<f64>, heads: usize, local: f64, global: f64) -> ContextBias {
        ContextBias {
            local: g.leaf(Tensor::full(&[heads], local)),
            global: g.leaf(Tensor::full(&[heads], global)),
        }
    }

    /// Direct loop implementation of frame-wise multi-head attention.
    fn naive_mha(x: &Tensor<f64>, w: [&Tensor<f64>; 4], heads: usize) -> Vec<f64> {
        let (f, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let dh = d / heads;
        let proj = |m: &Tensor<f64>, row: &[f64]| -> Vec<f64> {
            (0..d).map(|j| (0..d).map(|i| row[i] * m.data()[i * d + j]).sum()).collect()
        };
        let mut out = Vec::new();
        for t in 0..f {
            let rows: Vec<&[f64]> = (0..n).map(|i| &x.data()[(t * n + i) * d..(t * n + i + 1) * d]).collect();
            let q: Vec<Vec<f64>> = rows.iter().map(|r| proj(w[0], r)).collect();
            let k: Vec<Vec<f64>> = rows.iter().map(|r| proj(w[1], r)).collect();
            let v: Vec<Vec<f64>> = rows.iter().map(|r| proj(w[2], r)).collect();
            for i in 0..n {
                let mut cat = vec![0.0; d];
                for h in 0..heads {
                    let hs = h * dh..(h + 1) * dh;
                    let s: Vec<f64> = (0..n)
                        .map(|j| hs.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for c in hs {
                        cat[c] = (0..n).map(|j| e[j] / z * v[j][c]).sum();
                    }
                }
                out.extend(proj(w[3], &cat));
            }
        }
        out
    }

    #[test]
    fn plain_path_matches_naive_attention() {
        let mut fx = fixture(1, 3, 5, 0, 8);
        let o = tc_attention(&mut fx.g, fx.x, None, &fx.w, 2, None).unwrap();
        let ws = [fx.w.wq, fx.w.wk, fx.w.wv, fx.w.wo].map(|v| fx.g.value(v));
        let want = naive_mha(fx.g.value(fx.x), ws, 2);
        for (a, b) in fx.g.value(o.out).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_context_is_bitwise_plain_attention() {
        let mut fx = fixture(2, 2, 5, 0, 8);
        let plain = tc_attention(&mut fx.g, fx.x, None, &fx.w, 4, None).unwrap();
        let with_empty = tc_attention(&mut fx.g, fx.x, Some(fx.ctx), &fx.w, 4, None).unwrap();
        assert_eq!(fx.g.value(plain.out), fx.g.value(with_empty.out));
        assert_eq!(fx.g.shape(with_empty.probs), &[2, 4, 5, 5]);
    }

    #[test]
    fn uniform_bias_shift_is_invisible() {
        let mut fx = fixture(3, 3, 6, 4, 8);
        let zero = bias(&mut fx.g, 2, 0.0, 0.0);
        let shifted = bias(&mut fx.g, 2, 2.5, 2.5);
        let a = tc_attention(&mut fx.g, fx.x, Some(fx.ctx), &fx.w, 2, Some(&zero)).unwrap();
        let b = tc_attention(&mut fx.g, fx.x, Some(fx.ctx), &fx.w, 2, Some(&shifted)).unwrap();
        assert!(fx.g.value(a.out).max_abs_diff(fx.g.value(b.out)) < 1e-12);
    }

    #[test]
    fn suppressed_context_reduces_to_frame_attention() {
        for seed in 0..5 {
            let mut fx = fixture(10 + seed, 3, 6, 4, 8);
            let b = bias(&mut fx.g, 2, 0.3, -1e9);
            let tc = tc_attention(&mut fx.g, fx.x, Some(fx.ctx), &fx.w, 2, Some(&b)).unwrap();
            let plain = tc_attention(&mut fx.g, fx.x, None, &fx.w, 2, None).unwrap();
            assert!(fx.g.value(tc.out).max_abs_diff(fx.g.value(plain.out)) < 1e-5);
        }
    }

    #[test]
    fn rows_sum_to_one_and_context_columns_are_shared() {
        let mut fx = fixture(4, 3, 5, 3, 8);
        let b = bias(&mut fx.g, 4, -0.2, 0.4);
        let o = tc_attention(&mut fx.g, fx.x, Some(fx.ctx), &fx.w, 4, Some(&b)).unwrap();
        let p = fx.g.value(o.probs);
        assert_eq!(p.shape(), &[3, 4, 5, 8]);
        for row in p.data().chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn context_influences_every_frame() {
        let mut fx = fixture(5, 2, 4, 2, 8);
        let a = tc_attention(&mut fx.g, fx.x, Some(fx.ctx), &fx.w, 2, None).unwrap();
        let plain = tc_attention(&mut fx.g, fx.x, None, &fx.w, 2, None).unwrap();
        let (av, pv) = (fx.g.value(a.out), fx.g.value(plain.out));
        for t in 0..2 {
            let diff = (0..32).map(|i| (av.data()[t * 32 + i] - pv.data()[t * 32 + i]).abs()).fold(0.0, f64::max);
            assert!(diff > 1e-6);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SplitMix64::new(6);
        let shapes: [&[usize]; 8] = [&[2, 3, 4], &[2, 4], &[4, 4], &[4, 4], &[4, 4], &[4, 4], &[2], &[2]];
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::from_fn(s, |_| 0.7 * rng.normal())).collect();
        let run = |inputs: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let v: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
            let w = AttentionWeights { wq: v[2], wk: v[3], wv: v[4], wo: v[5] };
            let b = ContextBias { local: v[6], global: v[7] };
            let o = tc_attention(&mut g, v[0], Some(v[1]), &w, 2, Some(&b)).unwrap();
            let sq = g.mul(o.out, o.out).unwrap();
            let loss = g.sum_all(sq);
            (g, v, loss)
        };
        let (g, vars, loss) = run(&inputs);
        let grads = g.backward(loss).unwrap();
        for (ti, var) in vars.iter().enumerate() {
            let an = grads.get(*var).unwrap();
            for e in 0..an.numel() {
                let eval = |delta: f64| {
                    let mut perturbed = inputs.clone();
                    perturbed[ti].data_mut()[e] += delta;
                    let (g, _, l) = run(&perturbed);
                    g.value(l).item()
                };
                let num = (eval(1e-5) - eval(-1e-5)) / 2e-5;
                let a = an.data()[e];
                let err = (a - num).abs() / a.abs().max(num.abs());
                assert!(err < 1e-6 || (a - num).abs() < 1e-8, "input {ti} entry {e}: {a} vs {num}");
            }
        }
    }
}
