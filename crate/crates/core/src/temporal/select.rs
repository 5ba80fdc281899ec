use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Informative patches of every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSelection<T> {
    /// Per frame, 0-based patch indices (token position minus one) in
    /// descending score order, ties to the lower index.
    pub per_frame: Vec<Vec<usize>>,
    /// Head-averaged [CLS] attention, `[frames, patches]`.
    pub scores: Tensor<T>,
}

impl<T: Scalar> SeedSelection<T> {
    pub fn frames(&self) -> usize {
        self.per_frame.len()
    }

    pub fn per_frame_count(&self) -> usize {
        self.per_frame.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.per_frame.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frame-major `(frame, patch)` pairs in seed order.
    pub fn seeds(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.per_frame
            .iter()
            .enumerate()
            .flat_map(|(t, ps)| ps.iter().map(move |&p| (t, p)))
    }

    /// Row indices into a `[frames * (patches + 1), d]` token matrix.
    pub fn token_rows(&self) -> Vec<usize> {
        let patches = self.scores.shape()[1];
        self.seeds().map(|(t, p)| t * (patches + 1) + p + 1).collect()
    }

    /// Score of every seed, in seed order.
    pub fn seed_scores(&self) -> Vec<T> {
        let patches = self.scores.shape()[1];
        self.seeds().map(|(t, p)| self.scores.data()[t * patches + p]).collect()
    }
}

/// `floor(α·N)`, with a small guard so products such as `0.29 * 100` that
/// land a hair under an integer are not truncated.
pub fn seeds_per_frame(alpha: f64, patches: usize) -> Result<usize> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid("select_seeds", format!("seed ratio {alpha} outside (0, 1]")));
    }
    let n = ((alpha * patches as f64) + 1e-9).floor() as usize;
    let n = n.min(patches);
    if n == 0 {
        return Err(Error::invalid(
            "select_seeds",
            format!("seed ratio {alpha} selects no patch out of {patches}"),
        ));
    }
    Ok(n)
}

/// Mean over heads of the [CLS]-query attention to each patch.
///
/// `probs` is a layer's softmax output `[frames, heads, queries, columns]`;
/// column 0 is [CLS], columns `1..=patches` are patches and any further
/// columns are context tokens, which do not take part in scoring.
pub fn cls_attention_scores<T: Scalar>(probs: &Tensor<T>, patches: usize) -> Result<Tensor<T>> {
    let s = probs.shape();
    if s.len() != 4 || s[3] < patches + 1 || s[2] == 0 {
        return Err(Error::invalid(
            "cls_attention_scores",
            format!("attention of shape {s:?} cannot score {patches} patches"),
        ));
    }
    let (frames, heads, queries, cols) = (s[0], s[1], s[2], s[3]);
    let inv = T::one() / T::from_usize(heads).unwrap();
    let mut out = vec![T::zero(); frames * patches];
    for t in 0..frames {
        for h in 0..heads {
            let row = ((t * heads + h) * queries) * cols;
            for p in 0..patches {
                out[t * patches + p] += probs.data()[row + 1 + p];
            }
        }
        for v in &mut out[t * patches..(t + 1) * patches] {
            *v *= inv;
        }
    }
    Tensor::new(vec![frames, patches], out)
}

/// Top `floor(α·N)` patches of every frame by score.
pub fn select_seeds<T: Scalar>(scores: &Tensor<T>, alpha: f64) -> Result<SeedSelection<T>> {
    if scores.rank() != 2 {
        return Err(Error::invalid("select_seeds", format!("scores must be [frames, patches], got {:?}", scores.shape())));
    }
    let patches = scores.shape()[1];
    let n = seeds_per_frame(alpha, patches)?;
    let per_frame = (0..scores.shape()[0])
        .map(|t| {
            let row = scores.row(t);
            let mut idx: Vec<usize> = (0..patches).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
            idx.truncate(n);
            idx
        })
        .collect();
    Ok(SeedSelection {
        per_frame,
        scores: scores.clone(),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn uniform_attention_scores_equal_patch_mass() {
        // one frame, one head, [CLS] query spread over [CLS] + 4 patches
        let probs = Tensor::<f64>::full(&[1, 1, 5, 5], 0.2);
        let s = cls_attention_scores(&probs, 4).unwrap();
        assert_eq!(s.data(), &[0.2, 0.2, 0.2, 0.2]);
    }

    #[test]
    fn head_scores_are_averaged() {
        let mut data = vec![0.0; 2 * 3];
        data[1] = 1.0; // head 0 -> patch 0
        data[3 + 2] = 1.0; // head 1 -> patch 1
        let probs = Tensor::<f64>::new(vec![1, 2, 1, 3], data).unwrap();
        assert_eq!(cls_attention_scores(&probs, 2).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn context_columns_are_ignored() {
        let probs = Tensor::<f64>::from_f64(&[1, 1, 1, 4], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(cls_attention_scores(&probs, 2).unwrap().data(), &[0.2, 0.3]);
    }

    #[test]
    fn random_three_head_scores_match_direct_mean() {
        let mut rng = crate::rng::SplitMix64::new(5);
        let (f, h, q, c, n) = (2, 3, 4, 7, 5);
        let probs = Tensor::<f64>::from_fn(&[f, h, q, c], |_| rng.uniform());
        let s = cls_attention_scores(&probs, n).unwrap();
        for t in 0..f {
            for p in 0..n {
                let want = (0..h).map(|hh| probs.data()[((t * h + hh) * q) * c + 1 + p]).sum::<f64>() / 3.0;
                assert!((s.data()[t * n + p] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn selection_examples() {
        let s = Tensor::<f64>::from_f64(&[1, 4], &[0.1, 0.5, 0.2, 0.2]).unwrap();
        assert_eq!(select_seeds(&s, 0.5).unwrap().per_frame, vec![vec![1, 2]]);
        assert_eq!(select_seeds(&s, 1.0).unwrap().per_frame, vec![vec![1, 2, 3, 0]]);
        assert_eq!(seeds_per_frame(0.3, 196).unwrap(), 58);
        assert_eq!(seeds_per_frame(0.29, 100).unwrap(), 29);
        assert!(select_seeds(&s, 0.0).is_err());
        assert!(select_seeds(&s, 1.5).is_err());
        assert!(select_seeds(&s, 0.1).is_err());
    }

    #[test]
    fn token_rows_skip_cls() {
        let s = Tensor::<f64>::from_f64(&[2, 3], &[0.1, 0.9, 0.5, 0.7, 0.2, 0.1]).unwrap();
        let sel = select_seeds(&s, 0.67).unwrap();
        assert_eq!(sel.per_frame, vec![vec![1, 2], vec![0, 1]]);
        assert_eq!(sel.token_rows(), vec![2, 3, 5, 6]);
        assert_eq!(sel.seed_scores(), vec![0.9, 0.5, 0.7, 0.2]);
    }

    proptest! {
        #[test]
        fn selection_matches_full_sort_reference(
            vals in proptest::collection::vec(0u8..6, 12..48),
            alpha in 0.1f64..1.0,
        ) {
            let patches = 6;
            let frames = vals.len() / patches;
            let scores = Tensor::<f64>::new(
                vec![frames, patches],
                vals[..frames * patches].iter().map(|&v| v as f64 / 5.0).collect(),
            ).unwrap();
            let n = (alpha * patches as f64).floor() as usize;
            prop_assume!(n >= 1);
            let sel = select_seeds(&scores, alpha).unwrap();
            for t in 0..frames {
                // reference: sort (score desc, index asc) pairs
                let mut pairs: Vec<(i64, usize)> = (0..patches).map(|p| (-(vals[t * patches + p] as i64), p)).collect();
                pairs.sort();
                let want: Vec<usize> = pairs.iter().take(n).map(|&(_, p)| p).collect();
                prop_assert_eq!(&sel.per_frame[t], &want);
            }
        }
    }
}
