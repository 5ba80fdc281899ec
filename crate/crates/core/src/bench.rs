//! Aggregation backends on planted-cluster token clouds.

use std::time::Instant;

use serde::Serialize;

use crate::config::AggregationMethod;
use crate::error::Result;
use crate::rng::SplitMix64;
use crate::temporal::{summarize_context, ContextSet};
use crate::tensor::Tensor;

/// `clusters` contiguous groups of `per_cluster` points around orthogonal
/// centres `scale·e_j`, perturbed by Gaussian noise of std `noise`.
pub fn planted_clusters(seed: u64, clusters: usize, per_cluster: usize, dim: usize, scale: f64, noise: f64) -> (Tensor<f64>, Vec<usize>) {
    assert!(clusters <= dim, "orthogonal centres need dim >= clusters");
    let mut rng = SplitMix64::new(seed);
    let n = clusters * per_cluster;
    let labels: Vec<usize> = (0..n).map(|i| i / per_cluster).collect();
    let pts = Tensor::from_fn(&[n, dim], |i| {
        let (row, col) = (i / dim, i % dim);
        let centre = if col == labels[row] { scale } else { 0.0 };
        centre + noise * rng.normal()
    });
    (pts, labels)
}

/// Fraction of points whose context's majority label matches their own.
pub fn purity(ctx: &ContextSet<f64>, labels: &[usize]) -> f64 {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut hits = 0;
    for members in ctx.members() {
        let mut counts = vec![0usize; classes];
        members.iter().for_each(|&i| counts[labels[i]] += 1);
        hits += counts.iter().max().copied().unwrap_or(0);
    }
    hits as f64 / labels.len().max(1) as f64
}

/// Largest deviation between the weighted sum of seeds and the
/// size-weighted (or score-weighted) sum of context tokens.
pub fn mean_preservation_error(seeds: &Tensor<f64>, ctx: &ContextSet<f64>, weights: &[f64]) -> f64 {
    let d = seeds.shape()[1];
    let members = ctx.members();
    (0..d)
        .map(|c| {
            let total: f64 = (0..seeds.rows()).map(|i| weights[i] * seeds.row(i)[c]).sum();
            let merged: f64 = members.iter().enumerate().map(|(j, m)| m.iter().map(|&i| weights[i]).sum::<f64>() * ctx.tokens.row(j)[c]).sum();
            (total - merged).abs()
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub method: String,
    pub seeds: usize,
    pub contexts: usize,
    pub purity: f64,
    pub mean_error: f64,
    pub seconds: f64,
    pub seeds_per_second: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchSetup {
    pub seed: u64,
    pub clusters: usize,
    pub per_cluster: usize,
    pub dim: usize,
    pub noise: f64,
    pub pace: usize,
    pub repeats: usize,
}

impl Default for BenchSetup {
    fn default() -> Self {
        Self { seed: 0, clusters: 8, per_cluster: 16, dim: 16, noise: 0.05, pace: 100, repeats: 5 }
    }
}

/// Runs every method once for scoring and `repeats` times for timing.
pub fn merge_bench(setup: &BenchSetup, methods: &[AggregationMethod]) -> Result<Vec<BenchRow>> {
    let (pts, labels) = planted_clusters(setup.seed, setup.clusters, setup.per_cluster, setup.dim, 1.0, setup.noise);
    let n = pts.rows();
    let mut rng = SplitMix64::derive(setup.seed, 1);
    let scores: Vec<f64> = (0..n).map(|_| rng.range(0.5, 1.0)).collect();
    let ones = vec![1.0; n];
    let mut rows = Vec::new();
    for m in methods {
        let ctx = summarize_context(&pts, Some(&scores), m, setup.clusters, setup.pace)?;
        let w = if *m == AggregationMethod::BipartiteWeighted && n > setup.clusters { &scores } else { &ones };
        let started = Instant::now();
        for _ in 0..setup.repeats {
            std::hint::black_box(summarize_context(&pts, Some(&scores), m, setup.clusters, setup.pace)?);
        }
        let seconds = started.elapsed().as_secs_f64() / setup.repeats.max(1) as f64;
        rows.push(BenchRow {
            method: m.name().to_string(),
            seeds: n,
            contexts: ctx.len(),
            purity: purity(&ctx, &labels),
            mean_error: mean_preservation_error(&pts, &ctx, w),
            seconds,
            seeds_per_second: if seconds > 0.0 { n as f64 / seconds } else { f64::INFINITY },
        });
    }
    Ok(rows)
}
