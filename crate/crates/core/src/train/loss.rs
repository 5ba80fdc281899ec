//! Cosine similarity and the temperature-scaled contrastive objective.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `⟨v, c⟩ / (‖v‖ ‖c‖)`; zero vectors are rejected.
pub fn cosine_similarity<T: Scalar>(v: &[T], c: &[T]) -> Result<T> {
    if v.len() != c.len() {
        return Err(Error::shapes("cosine_similarity", &[v.len()], &[c.len()]));
    }
    let nv = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nc = c.iter().map(|&x| x * x).sum::<T>().sqrt();
    if nv == T::zero() || nc == T::zero() {
        return Err(Error::invalid("cosine_similarity", "zero vector has no direction"));
    }
    Ok(v.iter().zip(c).map(|(&a, &b)| a * b).sum::<T>() / (nv * nc))
}

/// `[B, d] × [C, d] -> [B, C]` cosine similarities.
pub fn similarity_matrix<T: Scalar>(videos: &Tensor<T>, classes: &Tensor<T>) -> Result<Tensor<T>> {
    if videos.rank() != 2 || classes.rank() != 2 || videos.shape()[1] != classes.shape()[1] {
        return Err(Error::shapes("similarity_matrix", videos.shape(), classes.shape()));
    }
    let (b, c) = (videos.rows(), classes.rows());
    let mut out = Vec::with_capacity(b * c);
    for i in 0..b {
        for j in 0..c {
            out.push(cosine_similarity(videos.row(i), classes.row(j))?);
        }
    }
    Tensor::new(vec![b, c], out)
}

/// `-(1/B) Σ_i log softmax(S_i / τ)_{label_i}` on a `[B, C]` matrix.
pub fn cross_entropy_value<T: Scalar>(s: &Tensor<T>, tau: T, labels: &[usize]) -> Result<T> {
    if !(tau > T::zero()) {
        return Err(Error::invalid("contrastive_loss", format!("temperature must be positive, got {tau}")));
    }
    if s.rank() != 2 || s.rows() != labels.len() || s.rows() == 0 {
        return Err(Error::invalid("contrastive_loss", format!("{} labels for similarities {:?}", labels.len(), s.shape())));
    }
    let mut total = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        let row = s.row(i);
        if y >= row.len() {
            return Err(Error::invalid("contrastive_loss", format!("label {y} out of {} classes", row.len())));
        }
        let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x / tau));
        let lse = m + row.iter().map(|&x| (x / tau - m).exp()).sum::<T>().ln();
        total += lse - row[y] / tau;
    }
    Ok(total / T::from_usize(labels.len()).unwrap())
}

/// Video-to-text loss on a square matrix with matched pairs on the diagonal.
pub fn contrastive_loss_value<T: Scalar>(s: &Tensor<T>, tau: T) -> Result<T> {
    if s.rank() != 2 || s.shape()[0] != s.shape()[1] {
        return Err(Error::invalid("contrastive_loss", format!("expected a square matrix, got {:?}", s.shape())));
    }
    let labels: Vec<usize> = (0..s.rows()).collect();
    cross_entropy_value(s, tau, &labels)
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of
/// `logits: [B, C]`.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || labels.iter().any(|&y| y >= shape[1]) {
        return Err(Error::invalid("cross_entropy", format!("labels {labels:?} do not fit logits {shape:?}")));
    }
    let (b, c) = (shape[0], shape[1]);
    let lp = g.log_softmax(logits);
    let inv_b = T::one() / T::from_usize(b).unwrap();
    let pick = Tensor::from_fn(&[b, c], |i| if labels[i / c] == i % c { -inv_b } else { T::zero() });
    let pick = g.constant(pick);
    let picked = g.mul(lp, pick)?;
    Ok(g.sum_all(picked))
}

/// Contrastive loss on square similarities `[B, B]` scaled by
/// `exp(-log_tau)`. The symmetric variant averages in the text-to-video
/// direction.
pub fn contrastive_loss<T: Scalar>(g: &mut Graph<T>, sims: Var, log_tau: Var, symmetric: bool) -> Result<Var> {
    let shape = g.shape(sims).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::invalid("contrastive_loss", format!("expected a square matrix, got {shape:?}")));
    }
    let inv_tau = g.scale(log_tau, -T::one());
    let inv_tau = g.exp(inv_tau);
    let logits = g.mul(sims, inv_tau)?;
    let labels: Vec<usize> = (0..shape[0]).collect();
    let v2t = cross_entropy(g, logits, &labels)?;
    if !symmetric {
        return Ok(v2t);
    }
    let lt = g.permute(logits, &[1, 0])?;
    let t2v = cross_entropy(g, lt, &labels)?;
    let both = g.add(v2t, t2v)?;
    Ok(g.scale(both, T::lit(0.5)))
}

/// Index of the largest entry per row, ties to the lower index.
pub fn argmax_rows<T: Scalar>(s: &Tensor<T>) -> Vec<usize> {
    (0..s.rows())
        .map(|i| {
            let row = s.row(i);
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
