//! Multiply-accumulate accounting for the vision tower.
//!
//! Per frame and layer with `n = N+1` tokens of width `d`: projections
//! `4nd²`, scores and weighted values `2nmd` with `m = n` or `n + k`, FFN
//! `8nd²`. Contexts add `2kd²` for their keys and values on consuming
//! layers, and on producing layers the summarization cost plus `8kd²` for
//! the context FFN.

use serde::Serialize;

use crate::config::{AggregationMethod, ModelConfig};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct LayerMacs {
    pub layer: usize,
    pub projections: u64,
    pub attention: u64,
    pub ffn: u64,
    pub context_kv: u64,
    pub summarization: u64,
    pub context_ffn: u64,
}

impl LayerMacs {
    pub fn total(&self) -> u64 {
        self.projections + self.attention + self.ffn + self.context_kv + self.summarization + self.context_ffn
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MacReport {
    pub tc_enabled: bool,
    pub patch_embed: u64,
    pub pooling: u64,
    pub layers: Vec<LayerMacs>,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MacComparison {
    pub tc_on: MacReport,
    pub tc_off: MacReport,
    pub ratio: f64,
}

/// `2·n·m·d`: query-key scores plus probability-weighted values.
pub fn score_value_macs(n: u64, m: u64, d: u64) -> u64 {
    2 * n * m * d
}

/// Cosine-similarity MACs of bipartite merging `seeds` down to `k` tokens
/// at pace `r`: `|A|·|B|·d` per iteration.
pub fn bipartite_similarity_macs(seeds: u64, k: u64, r: u64, d: u64) -> u64 {
    let mut count = seeds;
    let mut total = 0;
    while count > k && r > 0 {
        let (a, b) = (count.div_ceil(2), count / 2);
        total += a * b * d;
        count -= r.min(count / 2).min(count - k);
    }
    total
}

fn summarization_macs(method: &AggregationMethod, seeds: u64, k: u64, r: u64, d: u64) -> u64 {
    if seeds <= k {
        return 0;
    }
    match method {
        AggregationMethod::Bipartite | AggregationMethod::BipartiteWeighted => bipartite_similarity_macs(seeds, k, r, d),
        AggregationMethod::Kmeans { iterations } => *iterations as u64 * seeds * k * d,
        AggregationMethod::Dpcknn { .. } => seeds * seeds * d,
        AggregationMethod::None => 0,
    }
}

/// Per-video MAC counts; `tc` overrides the configured TC switch.
pub fn count_macs(cfg: &ModelConfig, tc: Option<bool>) -> Result<MacReport> {
    let mut v = cfg.vision.clone();
    if let Some(on) = tc {
        v.tc_enabled = on;
    }
    v.validate()?;
    let t = v.frames as u64;
    let n = v.patches() as u64 + 1;
    let d = v.dim as u64;
    let seeds = if v.tc_enabled { t * v.seeds_per_frame()? as u64 } else { 0 };
    let k_out = match v.aggregation {
        AggregationMethod::None => seeds,
        _ => seeds.min(v.contexts as u64),
    };
    let mut layers = Vec::with_capacity(v.layers);
    for l in 1..=v.layers {
        let k_in = if v.consumes(l) { k_out } else { 0 };
        let mut m = LayerMacs {
            layer: l,
            projections: t * 4 * n * d * d,
            attention: t * score_value_macs(n, n + k_in, d),
            ffn: t * 8 * n * d * d,
            context_kv: 2 * k_in * d * d,
            ..LayerMacs::default()
        };
        if v.produces(l) {
            m.summarization = summarization_macs(&v.aggregation, seeds, v.contexts as u64, v.merge_pace as u64, d);
            m.context_ffn = 8 * k_out * d * d;
        }
        layers.push(m);
    }
    let patch_embed = t * (n - 1) * v.patch_dim() as u64 * d;
    let pooling = t * d * cfg.embed_dim as u64;
    let total = patch_embed + pooling + layers.iter().map(LayerMacs::total).sum::<u64>();
    Ok(MacReport { tc_enabled: v.tc_enabled, patch_embed, pooling, layers, total })
}

pub fn compare(cfg: &ModelConfig) -> Result<MacComparison> {
    let tc_on = count_macs(cfg, Some(true))?;
    let tc_off = count_macs(cfg, Some(false))?;
    let ratio = tc_on.total as f64 / tc_off.total as f64;
    Ok(MacComparison { tc_on, tc_off, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TcLayers;

    #[test]
    fn score_value_example() {
        assert_eq!(score_value_macs(2, 3, 4), 48);
    }

    #[test]
    fn single_layer_frame_wise_matches_closed_form() {
        let mut cfg = ModelConfig::toy();
        cfg.vision.layers = 1;
        let r = count_macs(&cfg, Some(false)).unwrap();
        let (t, n, d, p) = (8u64, 17u64, 64u64, 192u64);
        let want = t * (12 * n * d * d + 2 * n * n * d) + t * (n - 1) * p * d + t * d * 32;
        assert_eq!(r.total, want);
        assert_eq!(r.layers[0].context_kv + r.layers[0].summarization + r.layers[0].context_ffn, 0);
    }

    #[test]
    fn bipartite_cost_counts_each_iteration() {
        // 10 -> 7 -> 4 with r = 3, k = 4
        assert_eq!(bipartite_similarity_macs(10, 4, 3, 2), (5 * 5 + 4 * 3) * 2);
        assert_eq!(bipartite_similarity_macs(4, 4, 3, 2), 0);
    }

    #[test]
    fn vit_b16_overhead_is_modest() {
        let c = compare(&ModelConfig::vit_b16()).unwrap();
        assert!((1.05..=1.12).contains(&c.ratio), "{}", c.ratio);
        // Frame-wise cost lands near the reported 285 G.
        assert!((270e9..300e9).contains(&(c.tc_off.total as f64)), "{}", c.tc_off.total);
    }

    #[test]
    fn lite_schedule_costs_less_than_full() {
        let mut cfg = ModelConfig::vit_b16();
        let full = compare(&cfg).unwrap().ratio;
        cfg.vision.tc_layers = TcLayers::Lite;
        let lite = compare(&cfg).unwrap().ratio;
        assert!(1.0 < lite && lite < full, "{lite} vs {full}");
    }
}
