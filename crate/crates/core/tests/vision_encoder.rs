use tcclip::model::init_params;
use tcclip::rng::SplitMix64;
use tcclip::vision::{encode_clip, encode_video, patchify, patchify_embed, project_and_pool, unpatchify, VideoClip};
use tcclip::{Graph, ModelConfig, ParamStore, Tensor};

fn random_clip(seed: u64, cfg: &ModelConfig) -> VideoClip<f64> {
    let v = &cfg.vision;
    let mut rng = SplitMix64::new(seed);
    VideoClip::new(Tensor::from_fn(&[v.frames, v.height, v.width, 3], |_| rng.uniform()), None).unwrap()
}

fn pooled(cfg: &ModelConfig, params: &ParamStore<f64>, clip: &VideoClip<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let (v, out) = encode_clip(&mut g, &p, &cfg.vision, clip, 1e-5).unwrap();
    (g.value(v).clone(), g.value(out.tokens).clone())
}

#[test]
fn patch_round_trip_is_bit_exact() {
    let mut rng = SplitMix64::new(3);
    let frames = Tensor::from_fn(&[3, 16, 24, 3], |_| rng.uniform());
    let p = patchify(&frames, 8).unwrap();
    assert_eq!(p.shape(), &[3, 6, 192]);
    assert_eq!(unpatchify(&p, 16, 24, 8).unwrap(), frames);
    assert!(patchify(&frames, 5).is_err());
}

#[test]
fn single_patch_frames_give_two_tokens() {
    let frames = Tensor::<f64>::full(&[4, 8, 8, 3], 0.5);
    let mut g = Graph::new();
    let patches = g.constant(patchify(&frames, 8).unwrap());
    let w = g.leaf(Tensor::full(&[192, 6], 0.01));
    let cls = g.leaf(Tensor::zeros(&[6]));
    let pos = g.leaf(Tensor::zeros(&[2, 6]));
    let z = patchify_embed(&mut g, patches, w, cls, pos).unwrap();
    assert_eq!(g.shape(z), &[4, 2, 6]);
}

#[test]
fn zero_embedding_gives_zero_tokens() {
    let mut rng = SplitMix64::new(4);
    let frames = Tensor::from_fn(&[2, 16, 16, 3], |_| rng.uniform());
    let mut g = Graph::new();
    let patches = g.constant(patchify(&frames, 8).unwrap());
    let w = g.leaf(Tensor::zeros(&[192, 5]));
    let cls = g.leaf(Tensor::zeros(&[5]));
    let pos = g.leaf(Tensor::zeros(&[5, 5]));
    let z = patchify_embed(&mut g, patches, w, cls, pos).unwrap();
    assert!(g.value(z).data().iter().all(|&x| x == 0.0));
}

#[test]
fn position_table_is_shared_by_all_frames() {
    let frames = Tensor::<f64>::zeros(&[3, 16, 16, 3]);
    let mut rng = SplitMix64::new(5);
    let mut g = Graph::new();
    let patches = g.constant(patchify(&frames, 8).unwrap());
    let w = g.leaf(Tensor::from_fn(&[192, 4], |_| rng.normal()));
    let cls = g.leaf(Tensor::from_fn(&[4], |_| rng.normal()));
    let pos = g.leaf(Tensor::from_fn(&[5, 4], |_| rng.normal()));
    let z = patchify_embed(&mut g, patches, w, cls, pos).unwrap();
    let z = g.value(z).data().to_vec();
    assert_eq!(z[..20], z[20..40]);
    assert_eq!(z[..20], z[40..]);
}

#[test]
fn empty_stack_is_identity() {
    let mut cfg = ModelConfig::toy();
    cfg.vision.layers = 0;
    cfg.vision.tc_enabled = false;
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_fn(&[8, 17, 64], |i| i as f64 * 1e-3));
    let p = ParamStore::<f64>::new().bind(&mut g);
    let out = encode_video(&mut g, &p, &cfg.vision, x, 1e-5).unwrap();
    assert_eq!(g.value(out.tokens), g.value(x));
}

#[test]
fn frame_wise_encoder_isolates_frames() {
    let cfg = ModelConfig::toy().baseline();
    let params = init_params(&cfg, 7).unwrap();
    let clip = random_clip(8, &cfg);
    let (_, base) = pooled(&cfg, &params, &clip);
    let mut other = clip.clone();
    let n = 32 * 32 * 3;
    for x in &mut other.frames.data_mut()[3 * n..4 * n] {
        *x = 1.0 - *x;
    }
    let (_, pert) = pooled(&cfg, &params, &other);
    let per_frame = 17 * 64;
    for t in 0..8 {
        let a = &base.data()[t * per_frame..(t + 1) * per_frame];
        let b = &pert.data()[t * per_frame..(t + 1) * per_frame];
        let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        if t == 3 {
            assert!(diff > 1e-3);
        } else {
            assert!(diff <= 1e-12, "frame {t} moved by {diff}");
        }
    }
}

#[test]
fn tc_encoder_mixes_frames() {
    let cfg = ModelConfig::toy();
    let params = init_params(&cfg, 7).unwrap();
    let clip = random_clip(8, &cfg);
    let (_, base) = pooled(&cfg, &params, &clip);
    let mut other = clip.clone();
    let n = 32 * 32 * 3;
    for x in &mut other.frames.data_mut()[3 * n..4 * n] {
        *x = 1.0 - *x;
    }
    let (_, pert) = pooled(&cfg, &params, &other);
    let diff = base.data()[..17 * 64].iter().zip(&pert.data()[..17 * 64]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-6);
}

#[test]
fn suppressed_global_bias_recovers_frame_wise_encoder() {
    for seed in 0..3 {
        let cfg = ModelConfig::toy();
        let mut params = init_params::<f64>(&cfg, 100 + seed).unwrap();
        let mut rng = SplitMix64::new(seed);
        for l in 2..=4 {
            let name = format!("vision.layer.{l:02}.bias_global");
            *params.get_mut(&name).unwrap() = Tensor::full(&[4], -1e9);
            let local = format!("vision.layer.{l:02}.bias_local");
            *params.get_mut(&local).unwrap() = Tensor::from_fn(&[4], |_| rng.normal());
        }
        let clip = random_clip(200 + seed, &cfg);
        let (v_tc, z_tc) = pooled(&cfg, &params, &clip);
        let off = ModelConfig::toy().baseline();
        let (v_off, z_off) = pooled(&off, &params, &clip);
        assert!(z_tc.max_abs_diff(&z_off) < 1e-5);
        assert!(v_tc.max_abs_diff(&v_off) < 1e-5);
    }
}

#[test]
fn zeroed_residual_branches_make_layers_identities() {
    let cfg = ModelConfig::toy();
    let mut params = init_params::<f64>(&cfg, 9).unwrap();
    for l in 1..=4 {
        for w in ["attn.wo", "ffn.w2", "ffn.b2"] {
            let t = params.get_mut(&format!("vision.layer.{l:02}.{w}")).unwrap();
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let clip = random_clip(10, &cfg);
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let patches = g.constant(patchify(&clip.frames, 8).unwrap());
    let z0 = patchify_embed(&mut g, patches, p.get("vision.patch_embed").unwrap(), p.get("vision.cls").unwrap(), p.get("vision.pos").unwrap()).unwrap();
    let out = encode_video(&mut g, &p, &cfg.vision, z0, 1e-5).unwrap();
    assert_eq!(g.value(out.tokens), g.value(z0));
}

#[test]
fn pooling_examples() {
    let mut rng = SplitMix64::new(11);
    let mut g = Graph::new();
    let w = g.leaf(Tensor::from_fn(&[6, 3], |_| rng.normal()));
    let one = g.leaf(Tensor::from_fn(&[1, 4, 6], |_| rng.normal()));
    let v = project_and_pool(&mut g, one, w).unwrap();
    let cls: Vec<f64> = g.value(one).data()[..6].to_vec();
    let want: Vec<f64> = (0..3).map(|j| (0..6).map(|i| cls[i] * g.value(w).data()[i * 3 + j]).sum()).collect();
    for (a, b) in g.value(v).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
    let frame: Vec<f64> = g.value(one).data().to_vec();
    let same = g.leaf(Tensor::new(vec![5, 4, 6], frame.repeat(5)).unwrap());
    let v5 = project_and_pool(&mut g, same, w).unwrap();
    assert!(g.value(v5).max_abs_diff(g.value(v)) < 1e-12);
}

#[test]
fn frame_wise_pooling_ignores_frame_order() {
    let cfg = ModelConfig::toy().baseline();
    let params = init_params(&cfg, 12).unwrap();
    let clip = random_clip(13, &cfg);
    let mut order: Vec<usize> = (0..8).collect();
    SplitMix64::new(14).shuffle(&mut order);
    let n = 32 * 32 * 3;
    let data: Vec<f64> = order.iter().flat_map(|&t| clip.frames.data()[t * n..(t + 1) * n].to_vec()).collect();
    let shuffled = VideoClip::new(Tensor::new(clip.frames.shape().to_vec(), data).unwrap(), None).unwrap();
    let (a, _) = pooled(&cfg, &params, &clip);
    let (b, _) = pooled(&cfg, &params, &shuffled);
    assert!(a.max_abs_diff(&b) <= 1e-12);
}

/// With spatial-only positions and an even seed count per frame, the
/// alternating split never crosses frame parity, so reversing the frames
/// permutes the context partition without changing it.
#[test]
fn toy_tc_encoder_is_blind_to_frame_reversal() {
    let cfg = ModelConfig::toy();
    for seed in 0..3 {
        let params = init_params(&cfg, 20 + seed).unwrap();
        let clip = random_clip(30 + seed, &cfg);
        let n = 32 * 32 * 3;
        let data: Vec<f64> = (0..8).rev().flat_map(|t| clip.frames.data()[t * n..(t + 1) * n].to_vec()).collect();
        let rev = VideoClip::new(Tensor::new(clip.frames.shape().to_vec(), data).unwrap(), None).unwrap();
        let (a, _) = pooled(&cfg, &params, &clip);
        let (b, _) = pooled(&cfg, &params, &rev);
        assert!(a.max_abs_diff(&b) < 1e-12, "{}", a.max_abs_diff(&b));
    }
}

#[test]
fn layer_records_follow_the_schedule() {
    let cfg = ModelConfig::toy();
    let params = init_params(&cfg, 15).unwrap();
    let clip = random_clip(16, &cfg);
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let (_, out) = encode_clip(&mut g, &p, &cfg.vision, &clip, 1e-5).unwrap();
    assert_eq!(out.records.iter().map(|r| r.consumed_contexts).collect::<Vec<_>>(), vec![0, 8, 8, 8]);
    for r in &out.records {
        let sel = r.selection.as_ref().unwrap();
        let ctx = r.contexts.as_ref().unwrap();
        assert_eq!(sel.len(), 32);
        assert_eq!(ctx.sizes.iter().sum::<usize>(), 32);
        assert_eq!(ctx.len(), 8);
        assert_eq!(g.shape(r.probs), &[8, 4, 17, 17 + r.consumed_contexts]);
    }
    assert_eq!(g.shape(out.contexts.unwrap()), &[8, 64]);
}

#[test]
fn mismatched_clip_is_rejected() {
    let cfg = ModelConfig::toy();
    let params = init_params::<f64>(&cfg, 1).unwrap();
    let clip = VideoClip::new(Tensor::zeros(&[8, 16, 16, 3]), None).unwrap();
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    assert!(encode_clip(&mut g, &p, &cfg.vision, &clip, 1e-5).is_err());
    assert!(VideoClip::new(Tensor::<f64>::zeros(&[8, 16, 16]), None).is_err());
}
