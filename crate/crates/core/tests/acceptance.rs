//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! Runs every criterion by default; pass criterion numbers as arguments to
//! run a subset. The process exits nonzero on a failure only when
//! `ACCEPTANCE_STRICT=1` is set, so the report can live inside the regular
//! test run while a known-unattainable criterion fails visibly.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use tcclip::macs::compare;
use tcclip::model::{forward_batch, init_params};
use tcclip::rng::SplitMix64;
use tcclip::synth::{dataset, SquareStyle, Task};
use tcclip::temporal::{bipartite_merge, summarize_context, MergeEvent};
use tcclip::train::{contrastive_loss_value, evaluate, model_grad_check, train, GradCheckOptions, RunConfig};
use tcclip::vision::{encode_clip, VideoClip};
use tcclip::{ensemble_weights, AggregationMethod, Graph, ModelConfig, ParamStore, Tensor};

type Verdict = (bool, String);

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, &str, fn() -> Verdict); 9] = [
        (1, "gradient check", gradient_check),
        (2, "baseline reduction", baseline_reduction),
        (3, "merge oracle", merge_oracle),
        (4, "reversal2 temporal task", reversal_task),
        (5, "loss sanity", loss_sanity),
        (6, "MAC ratio", mac_ratio),
        (7, "ensemble endpoints", ensemble_endpoints),
        (8, "stop-gradient", stop_gradient),
        (9, "reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let started = Instant::now();
        let (ok, detail) = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            (false, format!("panicked: {msg}"))
        });
        failed += usize::from(!ok);
        println!("criterion {id} {} {name}: {detail} [{:.1} s]", if ok { "PASS" } else { "FAIL" }, started.elapsed().as_secs_f64());
    }
    println!("acceptance: {failed} failing");
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

fn toy_clips(seed: u64, count: usize, task: Task) -> (Vec<VideoClip<f64>>, Vec<usize>) {
    let v = ModelConfig::toy().vision;
    let data = dataset::<f64>(seed, count, v.frames, v.height, v.width, &SquareStyle::default(), task).unwrap();
    (data.iter().map(|c| c.clip.clone()).collect(), data.iter().map(|c| c.label).collect())
}

fn gradient_check() -> Verdict {
    let started = Instant::now();
    let cfg = RunConfig::toy(0);
    let params = init_params::<f64>(&cfg.model, cfg.param_seed()).unwrap();
    let (clips, labels) = toy_clips(cfg.eval_seed(), 2, cfg.train.task);
    let opts = GradCheckOptions::default();
    let rep = model_grad_check(&params, &cfg.model, &clips, &labels, &cfg.class_ids(), &opts).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let worst = rep.tensors.first().map_or("", |t| t.name.as_str()).to_string();
    let ok = rep.passed(&opts) && rep.max_rel_err() < 1e-4 && secs < 120.0 && rep.tensors.len() == params.len();
    (ok, format!("{} tensors, max rel err {:.2e} at {worst} (< 1e-4), {secs:.1} s (< 120 s)", rep.tensors.len(), rep.max_rel_err()))
}

fn baseline_reduction() -> Verdict {
    let cfg = ModelConfig::toy();
    let off = cfg.clone().baseline();
    let mut worst: f64 = 0.0;
    for trial in 0..10u64 {
        let mut params = init_params::<f64>(&cfg, 1000 + trial).unwrap();
        let mut rng = SplitMix64::derive(trial, 7);
        for l in cfg.vision.consumer_layers() {
            *params.get_mut(&format!("vision.layer.{l:02}.bias_global")).unwrap() = Tensor::full(&[cfg.vision.heads], -1e9);
            *params.get_mut(&format!("vision.layer.{l:02}.bias_local")).unwrap() = Tensor::from_fn(&[cfg.vision.heads], |_| rng.normal());
        }
        let v = &cfg.vision;
        let clip = VideoClip::new(Tensor::from_fn(&[v.frames, v.height, v.width, 3], |_| rng.uniform()), None).unwrap();
        let run = |m: &ModelConfig| {
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let (pooled, out) = encode_clip(&mut g, &b, &m.vision, &clip, 1e-5).unwrap();
            (g.value(pooled).clone(), g.value(out.tokens).clone())
        };
        let (p_on, z_on) = run(&cfg);
        let (p_off, z_off) = run(&off);
        worst = worst.max(z_on.max_abs_diff(&z_off)).max(p_on.max_abs_diff(&p_off));
    }
    (worst < 1e-5, format!("10 models, max elementwise gap {worst:.2e} (< 1e-5)"))
}

fn mean(seeds: &Tensor<f64>, members: &[usize]) -> Vec<f64> {
    let d = seeds.shape()[1];
    let mut acc = vec![0.0; d];
    for &i in members {
        for c in 0..d {
            acc[c] += seeds.data()[i * d + c];
        }
    }
    acc.iter().map(|a| a / members.len() as f64).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Merges one pair at a time, scanning every A-B pair of the current list.
fn exhaustive_merge(seeds: &Tensor<f64>, k: usize) -> (Vec<Vec<usize>>, Vec<MergeEvent>) {
    let mut groups: Vec<Vec<usize>> = (0..seeds.shape()[0]).map(|i| vec![i]).collect();
    let mut events = Vec::new();
    while groups.len() > k {
        let feats: Vec<Vec<f64>> = groups.iter().map(|g| mean(seeds, g)).collect();
        let mut best = (0, 1, f64::NEG_INFINITY);
        for a in (0..groups.len()).step_by(2) {
            for b in (1..groups.len()).step_by(2) {
                let s = cos(&feats[a], &feats[b]);
                if s > best.2 {
                    best = (a, b, s);
                }
            }
        }
        let moved = groups.remove(best.0);
        let dst = if best.1 > best.0 { best.1 - 1 } else { best.1 };
        groups[dst].extend(moved);
        groups[dst].sort_unstable();
        events.push(MergeEvent { iteration: events.len(), src: best.0, dst: best.1 });
    }
    (groups, events)
}

fn merge_oracle() -> Verdict {
    let mut rng = SplitMix64::new(2024);
    let methods = ["bipartite", "bipartite-weighted", "kmeans", "dpcknn", "none"].map(|m| AggregationMethod::from_name(m).unwrap());
    let mut mismatches = 0;
    let mut worst_mean: f64 = 0.0;
    let mut conservation = true;
    for _ in 0..100 {
        let frames = 1 + rng.below(3) as usize;
        let per = 1 + rng.below((12 / frames).min(4) as u64) as usize;
        let n = frames * per;
        let d = 2 + rng.below(4) as usize;
        let seeds = Tensor::from_fn(&[n, d], |_| rng.normal());
        let k = 1 + rng.below(n as u64) as usize;
        let (got, events) = bipartite_merge(&seeds, None, k, 1).unwrap();
        let (want, want_events) = exhaustive_merge(&seeds, k);
        let want_tokens: Vec<f64> = want.iter().flat_map(|g| mean(&seeds, g)).collect();
        if events != want_events || got.members() != want || got.tokens.data() != &want_tokens[..] {
            mismatches += 1;
        }
        let scores: Vec<f64> = (0..n).map(|_| 0.05 + rng.uniform()).collect();
        let pace = 1 + rng.below(4) as usize;
        for m in &methods {
            let ctx = summarize_context(&seeds, Some(&scores), m, k, pace).unwrap();
            conservation &= ctx.sizes.iter().sum::<usize>() == n && ctx.members().iter().map(Vec::len).sum::<usize>() == n;
            let w: Vec<f64> = if *m == AggregationMethod::BipartiteWeighted && n > k { scores.clone() } else { vec![1.0; n] };
            for c in 0..d {
                let total: f64 = (0..n).map(|i| w[i] * seeds.data()[i * d + c]).sum();
                let merged: f64 = ctx.members().iter().enumerate().map(|(j, g)| g.iter().map(|&i| w[i]).sum::<f64>() * ctx.tokens.data()[j * d + c]).sum();
                worst_mean = worst_mean.max((total - merged).abs());
            }
        }
    }
    let ok = mismatches == 0 && conservation && worst_mean <= 1e-5;
    (ok, format!("100 trials, {mismatches} oracle mismatches, conservation {}, max mean-preservation error {worst_mean:.1e} (<= 1e-5) over 5 backends", if conservation { "holds" } else { "violated" }))
}

/// Frames of a clip sorted by their bit patterns.
fn frame_multiset(clip: &VideoClip<f64>) -> Vec<Vec<u64>> {
    let mut frames: Vec<Vec<u64>> = (0..clip.len()).map(|t| clip.frame(t).iter().map(|x| x.to_bits()).collect()).collect();
    frames.sort();
    frames
}

fn reversal_task() -> Verdict {
    let mut tc = RunConfig::toy(0);
    tc.train.eval_clips = 0;
    let mut off = tc.clone();
    off.model = off.model.baseline();
    let mut held = tc.clone();
    held.train.eval_clips = 1024;
    let pairs = held.eval_set().unwrap();
    let identical = pairs.chunks(2).all(|p| p.len() == 2 && p[0].label != p[1].label && frame_multiset(&p[0].clip) == frame_multiset(&p[1].clip));
    let started = Instant::now();
    let tc_params = train(&tc, None).unwrap().params;
    let tc_secs = started.elapsed().as_secs_f64();
    let off_params = train(&off, None).unwrap().params;
    let classes = tc.class_ids();
    let tc_acc = evaluate(&tc_params, &tc.model, &pairs, &classes, 16).unwrap().accuracy;
    let off_acc = evaluate(&off_params, &off.model, &pairs, &classes, 16).unwrap().accuracy;
    let ok = identical && (0.45..=0.55).contains(&off_acc) && tc_acc >= 0.85 && tc_secs < 900.0;
    (
        ok,
        format!(
            "{} pairs, frame multisets identical: {identical}; TC-off accuracy {:.1}% (in [45%, 55%]); TC-on accuracy {:.1}% (>= 85%) after {} steps in {tc_secs:.0} s (< 900 s)",
            pairs.len() / 2,
            100.0 * off_acc,
            100.0 * tc_acc,
            tc.train.steps
        ),
    )
}

fn loss_sanity() -> Verdict {
    let mut worst_uniform: f64 = 0.0;
    for b in [2usize, 4, 8] {
        let s = Tensor::full(&[b, b], 0.37);
        let l = contrastive_loss_value(&s, 0.01).unwrap();
        worst_uniform = worst_uniform.max((l - (b as f64).ln()).abs());
    }
    let eye = Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
    let id_loss = contrastive_loss_value(&eye, 0.01).unwrap();
    let ok = worst_uniform < 1e-9 && id_loss < 1e-6;
    (ok, format!("uniform |L - ln B| max {worst_uniform:.1e} (< 1e-9) for B in 2,4,8; identity L = {id_loss:.2e} (< 1e-6)"))
}

fn mac_ratio() -> Verdict {
    let cmp = compare(&ModelConfig::vit_b16()).unwrap();
    let ok = (1.05..=1.12).contains(&cmp.ratio);
    (ok, format!("{:.1} vs {:.1} GMACs, ratio {:.4} (in [1.05, 1.12]; reference 304/285 = {:.4})", cmp.tc_on.total as f64 / 1e9, cmp.tc_off.total as f64 / 1e9, cmp.ratio, 304.0 / 285.0))
}

fn ensemble_endpoints() -> Verdict {
    let mut cfg = RunConfig::toy(7);
    cfg.train.task = Task::Direction4;
    cfg.train.steps = 40;
    cfg.train.warmup = 5;
    cfg.train.eval_clips = 128;
    let a = init_params::<f64>(&cfg.model, cfg.param_seed()).unwrap();
    let b = train(&RunConfig { train: tcclip::train::TrainConfig { eval_clips: 0, ..cfg.train.clone() }, ..cfg.clone() }, None).unwrap().params;
    let held = cfg.eval_set().unwrap();
    let score = |p: &ParamStore<f64>| {
        let m = evaluate(p, &cfg.model, &held, &cfg.class_ids(), 16).unwrap();
        (m.loss, m.accuracy)
    };
    let bits = |m: (f64, f64)| (m.0.to_bits(), m.1.to_bits());
    let (ma, mb) = (score(&a), score(&b));
    let w0 = score(&ensemble_weights(&a, &b, 0.0, &[]).unwrap());
    let w1 = score(&ensemble_weights(&a, &b, 1.0, &[]).unwrap());
    let mid = score(&ensemble_weights(&a, &b, 0.5, &[]).unwrap());
    let ok = bits(w0) == bits(ma) && bits(w1) == bits(mb) && bits(mid) != bits(ma) && bits(mid) != bits(mb);
    (ok, format!("w=0 loss {:.6} = A {:.6}; w=1 loss {:.6} = B {:.6}; w=0.5 loss {:.6} differs from both", w0.0, ma.0, w1.0, mb.0, mid.0))
}

fn stop_gradient() -> Verdict {
    let cfg = RunConfig::toy(0);
    let params = init_params::<f64>(&cfg.model, 5).unwrap();
    let (clips, _) = toy_clips(9, 2, Task::Reversal2);
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let out = forward_batch(&mut g, &b, &cfg.model, &clips, &cfg.class_ids()).unwrap();
    let mut loss = None;
    for &c in &out.classes {
        let sq = g.mul(c, c).unwrap();
        let s = g.sum_all(sq);
        loss = Some(match loss {
            Some(l) => g.add(l, s).unwrap(),
            None => s,
        });
    }
    let grads = b.collect(&g.backward(loss.unwrap()).unwrap());
    let vision: Vec<_> = grads.iter().filter(|(n, _)| n.starts_with("vision.")).collect();
    let nonzero = vision.iter().filter(|(_, t)| t.data().iter().any(|&x| x != 0.0)).count();
    let text_live = grads.iter().any(|(n, t)| n.starts_with("vp.") && t.data().iter().any(|&x| x != 0.0));
    (nonzero == 0 && text_live && !vision.is_empty(), format!("{} vision tensors, {nonzero} with nonzero gradient; prompting gradients live: {text_live}", vision.len()))
}

fn reproducibility() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::toy(11);
    cfg.train.steps = 20;
    cfg.train.eval_clips = 64;
    cfg.train.log_every = 2;
    for run in ["a", "b"] {
        train(&cfg, Some(&dir.path().join(run))).unwrap();
    }
    let files = ["metrics.jsonl", "config.json", "checkpoint/manifest.json", "checkpoint/params.tct"];
    let same: Vec<bool> = files.iter().map(|f| std::fs::read(dir.path().join("a").join(f)).unwrap() == std::fs::read(dir.path().join("b").join(f)).unwrap()).collect();
    let ok = same.iter().all(|&s| s);
    (ok, format!("{} of {} artifacts byte-identical across two runs of {} steps", same.iter().filter(|&&s| s).count(), files.len(), cfg.train.steps))
}
