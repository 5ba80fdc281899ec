//! Summarizing seed tokens into context tokens.
//!
//! Every backend produces a partition of the seeds; each context token is the
//! (weighted) mean of its members. The partition is also exported as a dense
//! mixing matrix so the model can form context tokens differentiably as
//! `mixing @ seeds`.

use std::cmp::Ordering;

use crate::config::AggregationMethod;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ContextSet<T> {
    /// `[k_out, d]`
    pub tokens: Tensor<T>,
    /// Number of seeds merged into each context token.
    pub sizes: Vec<usize>,
    /// Seed index -> context index.
    pub assignment: Vec<usize>,
    /// `[k_out, seeds]`; row j holds the averaging weights of context j.
    pub mixing: Tensor<T>,
}

impl<T: Scalar> ContextSet<T> {
    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    /// Member seed indices of every context token, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.len()];
        for (seed, &c) in self.assignment.iter().enumerate() {
            m[c].push(seed);
        }
        m
    }
}

/// One merge of a bipartite iteration, in positions of the token list that
/// entered the iteration: A-side token `src` was folded into B-side `dst`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MergeEvent {
    pub iteration: usize,
    pub src: usize,
    pub dst: usize,
}

struct Cluster<T> {
    members: Vec<usize>,
    feature: Vec<T>,
}

/// Weighted mean of `members`, accumulated in ascending member order.
fn member_mean<T: Scalar>(seeds: &Tensor<T>, weights: &[T], members: &[usize]) -> Vec<T> {
    let d = seeds.shape()[1];
    let mut acc = vec![T::zero(); d];
    let mut total = T::zero();
    for &i in members {
        let w = weights[i];
        total += w;
        for (a, &x) in acc.iter_mut().zip(seeds.row(i)) {
            *a += w * x;
        }
    }
    for a in &mut acc {
        *a /= total;
    }
    acc
}

/// Cosine similarity; zero vectors are orthogonal to everything.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let dot = a.iter().zip(b).map(|(&x, &y)| x * y).sum::<T>();
    let na = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na == T::zero() || nb == T::zero() {
        T::zero()
    } else {
        dot / (na * nb)
    }
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn build<T: Scalar>(seeds: &Tensor<T>, weights: &[T], clusters: Vec<Vec<usize>>) -> Result<ContextSet<T>> {
    let n = seeds.shape()[0];
    let d = seeds.shape()[1];
    let k = clusters.len();
    let mut assignment = vec![usize::MAX; n];
    let mut tokens = Vec::with_capacity(k * d);
    let mut mixing = vec![T::zero(); k * n];
    let mut sizes = Vec::with_capacity(k);
    for (j, members) in clusters.iter().enumerate() {
        let total: T = members.iter().map(|&i| weights[i]).sum();
        for &i in members {
            assignment[i] = j;
            mixing[j * n + i] = weights[i] / total;
        }
        tokens.extend(member_mean(seeds, weights, members));
        sizes.push(members.len());
    }
    debug_assert!(assignment.iter().all(|&a| a < k));
    Ok(ContextSet {
        tokens: Tensor::new(vec![k, d], tokens)?,
        sizes,
        assignment,
        mixing: Tensor::new(vec![k, n], mixing)?,
    })
}

fn validate<T: Scalar>(seeds: &Tensor<T>, k: usize) -> Result<()> {
    if seeds.rank() != 2 {
        return Err(Error::invalid("summarize_context", format!("seeds must be [n, d], got {:?}", seeds.shape())));
    }
    if seeds.shape()[0] == 0 {
        return Err(Error::invalid("summarize_context", "empty seed set"));
    }
    if k == 0 {
        return Err(Error::invalid("summarize_context", "context count k must be at least 1"));
    }
    Ok(())
}

/// Groups `seeds` (`[n, d]`, frame-major, descending score within a frame)
/// into at most `k` context tokens.
///
/// `scores` are the seeds' [CLS] attention scores, needed only by
/// [`AggregationMethod::BipartiteWeighted`]. When `n <= k` every backend
/// returns the identity partition.
pub fn summarize_context<T: Scalar>(
    seeds: &Tensor<T>,
    scores: Option<&[T]>,
    method: &AggregationMethod,
    k: usize,
    pace: usize,
) -> Result<ContextSet<T>> {
    validate(seeds, k)?;
    method.validate()?;
    let n = seeds.shape()[0];
    let ones = vec![T::one(); n];
    if n <= k || *method == AggregationMethod::None {
        return build(seeds, &ones, (0..n).map(|i| vec![i]).collect());
    }
    match method {
        AggregationMethod::Bipartite => bipartite_merge(seeds, None, k, pace).map(|(c, _)| c),
        AggregationMethod::BipartiteWeighted => {
            let w = scores.ok_or_else(|| Error::invalid("summarize_context", "weighted bipartite needs seed scores"))?;
            bipartite_merge(seeds, Some(w), k, pace).map(|(c, _)| c)
        }
        AggregationMethod::Kmeans { iterations } => kmeans(seeds, k, *iterations),
        AggregationMethod::Dpcknn { neighbors } => dpcknn(seeds, k, *neighbors),
        AggregationMethod::None => unreachable!(),
    }
}

/// Iterated bipartite soft matching.
///
/// Each iteration splits the current tokens by alternating position into A
/// (even) and B (odd); every A token picks its most cosine-similar B token
/// (ties to the lower B position) and the `r` best proposals (ties to the
/// lower A position) are merged. Survivors keep their relative order.
/// `r = min(pace, count / 2, count - k)`, so the last iteration lands on `k`.
/// Merged tokens are weighted means of all constituents, with unit weights
/// unless `weights` is given.
pub fn bipartite_merge<T: Scalar>(
    seeds: &Tensor<T>,
    weights: Option<&[T]>,
    k: usize,
    pace: usize,
) -> Result<(ContextSet<T>, Vec<MergeEvent>)> {
    validate(seeds, k)?;
    if pace == 0 {
        return Err(Error::invalid("bipartite_merge", "merge pace r must be at least 1"));
    }
    let n = seeds.shape()[0];
    let weights: Vec<T> = match weights {
        Some(w) if w.len() != n => {
            return Err(Error::invalid("bipartite_merge", format!("{} weights for {n} seeds", w.len())))
        }
        Some(w) if w.iter().any(|&x| !(x > T::zero()) || !x.is_finite()) => {
            return Err(Error::invalid("bipartite_merge", "merge weights must be positive and finite"))
        }
        Some(w) => w.to_vec(),
        None => vec![T::one(); n],
    };
    let mut clusters: Vec<Cluster<T>> = (0..n)
        .map(|i| Cluster {
            members: vec![i],
            feature: seeds.row(i).to_vec(),
        })
        .collect();
    let mut events = Vec::new();
    let mut iteration = 0;
    while clusters.len() > k {
        let count = clusters.len();
        let r = pace.min(count / 2).min(count - k);
        let a_pos: Vec<usize> = (0..count).step_by(2).collect();
        let b_pos: Vec<usize> = (1..count).step_by(2).collect();
        let mut proposals: Vec<(usize, usize, T)> = a_pos
            .iter()
            .map(|&a| {
                let mut best = (b_pos[0], T::neg_infinity());
                for &b in &b_pos {
                    let s = cosine(&clusters[a].feature, &clusters[b].feature);
                    if s > best.1 {
                        best = (b, s);
                    }
                }
                (a, best.0, best.1)
            })
            .collect();
        proposals.sort_by(|x, y| y.2.partial_cmp(&x.2).unwrap_or(Ordering::Equal).then(x.0.cmp(&y.0)));
        proposals.truncate(r);
        let mut merged = vec![false; count];
        for &(a, b, _) in &proposals {
            let moved = std::mem::take(&mut clusters[a].members);
            clusters[b].members.extend(moved);
            merged[a] = true;
            events.push(MergeEvent {
                iteration,
                src: a,
                dst: b,
            });
        }
        clusters = clusters
            .into_iter()
            .zip(merged)
            .filter(|(_, m)| !m)
            .map(|(mut c, _)| {
                c.members.sort_unstable();
                c.feature = member_mean(seeds, &weights, &c.members);
                c
            })
            .collect();
        iteration += 1;
    }
    let set = build(seeds, &weights, clusters.into_iter().map(|c| c.members).collect())?;
    Ok((set, events))
}

/// K-means with farthest-point initialization from seed 0 and a fixed
/// iteration count. Empty clusters are dropped.
fn kmeans<T: Scalar>(seeds: &Tensor<T>, k: usize, iterations: usize) -> Result<ContextSet<T>> {
    let n = seeds.shape()[0];
    let mut centers: Vec<usize> = vec![0];
    let mut min_d: Vec<T> = (0..n).map(|i| sq_dist(seeds.row(i), seeds.row(0))).collect();
    while centers.len() < k {
        let mut best = None;
        for i in 0..n {
            if centers.contains(&i) {
                continue;
            }
            match best {
                Some((_, d)) if min_d[i] <= d => {}
                _ => best = Some((i, min_d[i])),
            }
        }
        let (next, _) = best.expect("n > k leaves a candidate");
        centers.push(next);
        for i in 0..n {
            min_d[i] = min_d[i].min(sq_dist(seeds.row(i), seeds.row(next)));
        }
    }
    let mut centroids: Vec<Vec<T>> = centers.iter().map(|&c| seeds.row(c).to_vec()).collect();
    let ones = vec![T::one(); n];
    let mut assignment = vec![0usize; n];
    for _ in 0..iterations {
        for (i, a) in assignment.iter_mut().enumerate() {
            let mut best = (0, T::infinity());
            for (j, c) in centroids.iter().enumerate() {
                let d = sq_dist(seeds.row(i), c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            *a = best.0;
        }
        for (j, c) in centroids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == j).collect();
            if !members.is_empty() {
                *c = member_mean(seeds, &ones, &members);
            }
        }
    }
    let clusters: Vec<Vec<usize>> = (0..k)
        .map(|j| (0..n).filter(|&i| assignment[i] == j).collect::<Vec<_>>())
        .filter(|m| !m.is_empty())
        .collect();
    build(seeds, &ones, clusters)
}

/// Density peaks with K-nearest-neighbour density.
///
/// `ρ_i = exp(-mean squared distance to the K nearest neighbours)`,
/// `δ_i` = distance to the nearest denser seed (the densest seed takes its
/// largest distance), and the `k` seeds with the highest `ρ·δ` become
/// centres. Every other seed joins the nearest centre that is denser than
/// it, or the nearest centre when none is. Density ties go to the lower index.
fn dpcknn<T: Scalar>(seeds: &Tensor<T>, k: usize, neighbors: usize) -> Result<ContextSet<T>> {
    let n = seeds.shape()[0];
    let kn = neighbors.min(n - 1).max(1);
    let dist: Vec<Vec<T>> = (0..n)
        .map(|i| (0..n).map(|j| sq_dist(seeds.row(i), seeds.row(j)).sqrt()).collect())
        .collect();
    let density: Vec<T> = (0..n)
        .map(|i| {
            let mut d: Vec<T> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
            let mean = d.iter().take(kn).map(|&x| x * x).sum::<T>() / T::from_usize(kn).unwrap();
            (-mean).exp()
        })
        .collect();
    let denser = |j: usize, i: usize| density[j] > density[i] || (density[j] == density[i] && j < i);
    let delta: Vec<T> = (0..n)
        .map(|i| {
            let nearest = (0..n).filter(|&j| denser(j, i)).map(|j| dist[i][j]).fold(T::infinity(), T::min);
            if nearest.is_finite() {
                nearest
            } else {
                (0..n).map(|j| dist[i][j]).fold(T::zero(), T::max)
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (density[a] * delta[a], density[b] * delta[b]);
        sb.partial_cmp(&sa).unwrap_or(Ordering::Equal).then(a.cmp(&b))
    });
    let mut centers: Vec<usize> = order[..k].to_vec();
    centers.sort_unstable();
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..n {
        let target = if let Some(c) = centers.iter().position(|&c| c == i) {
            c
        } else {
            let nearest = |pool: &mut dyn Iterator<Item = usize>| {
                pool.fold(None, |best: Option<(usize, T)>, c| {
                    let d = dist[i][centers[c]];
                    match best {
                        Some((_, bd)) if d >= bd => best,
                        _ => Some((c, d)),
                    }
                })
            };
            nearest(&mut (0..k).filter(|&c| denser(centers[c], i)))
                .or_else(|| nearest(&mut (0..k)))
                .expect("k >= 1")
                .0
        };
        clusters[target].push(i);
    }
    let ones = vec![T::one(); n];
    build(seeds, &ones, clusters.into_iter().filter(|m| !m.is_empty()).collect())
}
