//! Command-line driver: training, evaluation, gradient checks, merge
//! benchmarks, MAC accounting and assignment maps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use tcclip::bench::{merge_bench, BenchSetup};
use tcclip::io::load_checkpoint;
use tcclip::macs::compare;
use tcclip::model::init_params;
use tcclip::rng::SplitMix64;
use tcclip::synth::sample_clip;
use tcclip::train::{evaluate, model_grad_check, train, GradCheckOptions, RunConfig};
use tcclip::vision::{encode_clip, VideoClip};
use tcclip::viz::{render_assignment_map, write_assignment_map, VizOptions};
use tcclip::{ensemble_weights, AggregationMethod, Error, Graph, ModelConfig, ParamStore, TcLayers};

#[derive(Parser)]
#[command(name = "tcclip", version, about = "Temporally contextualized video-text models at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed aggregation backend.
    #[arg(long, global = true, value_enum)]
    method: Option<Method>,
    /// Fraction of patches kept as seeds per frame.
    #[arg(long, global = true, value_name = "F")]
    alpha: Option<f64>,
    /// Number of context tokens.
    #[arg(long, global = true, value_name = "N")]
    k: Option<usize>,
    /// Layers that attend to context tokens.
    #[arg(long, global = true, value_enum)]
    tc: Option<Tc>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic moving-square clips.
    TrainToy {
        /// Optimizer steps (overrides the config).
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Score a checkpoint, or the interpolation of two.
    Eval {
        #[arg(long, value_name = "PATH")]
        ckpt_a: PathBuf,
        #[arg(long, value_name = "PATH")]
        ckpt_b: Option<PathBuf>,
        /// Interpolation weight of checkpoint B.
        #[arg(long, value_name = "F", default_value_t = 0.7)]
        ensemble_w: f64,
    },
    /// Compare analytic and finite-difference gradients of the full model.
    Gradcheck {
        /// Clips in the checked batch.
        #[arg(long, default_value_t = 2)]
        clips: usize,
    },
    /// Score aggregation backends on planted clusters.
    MergeBench {
        #[arg(long, default_value_t = 16)]
        per_cluster: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Multiply-accumulate counts with and without contexts.
    Macs,
    /// Render seed selection and context assignment for one clip.
    Viz {
        #[arg(long, value_name = "PATH")]
        ckpt_a: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Bipartite,
    BipartiteWeighted,
    Kmeans,
    Dpcknn,
    None,
}

impl Method {
    fn aggregation(self) -> AggregationMethod {
        let name = self.to_possible_value().expect("named variant");
        AggregationMethod::from_name(name.get_name()).expect("known method")
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Tc {
    All,
    Lite,
    Off,
}

enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) | Error::NonDeterministic { .. } => Failure::Numerical(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let c = &cli.common;
    match cli.command {
        Command::TrainToy { steps } => {
            let mut cfg = run_config(c, None)?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let out = c.out.clone().unwrap_or_else(|| PathBuf::from("runs/toy"));
            let res = train(&cfg, Some(&out))?;
            let eval = res.eval.map(|m| json!({"clips": m.clips, "loss": m.loss, "accuracy": m.accuracy}));
            println!("{}", json!({"out": out, "steps": cfg.train.steps, "eval": eval}));
        }
        Command::Eval { ckpt_a, ckpt_b, ensemble_w } => {
            let (base, a) = checkpoint(&ckpt_a)?;
            let cfg = run_config(c, Some(base))?;
            let (params, w) = match ckpt_b {
                Some(path) => {
                    let (_, b) = checkpoint(&path)?;
                    (ensemble_weights(&a, &b, ensemble_w, &[])?, Some(ensemble_w))
                }
                None => (a, None),
            };
            let m = evaluate(&params, &cfg.model, &cfg.eval_set()?, &cfg.class_ids(), cfg.train.batch)?;
            let rec = json!({"kind": "eval", "ensemble_w": w, "clips": m.clips, "loss": m.loss, "accuracy": m.accuracy});
            emit(c.out.as_deref(), "eval.json", &rec)?;
        }
        Command::Gradcheck { clips } => {
            let cfg = run_config(c, None)?;
            let params = init_params::<f64>(&cfg.model, cfg.param_seed())?;
            let mut data = cfg.eval_set()?;
            data.truncate(clips.max(1));
            let videos: Vec<VideoClip<f64>> = data.iter().map(|s| s.clip.clone()).collect();
            let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
            let opts = GradCheckOptions { seed: cfg.seed, ..GradCheckOptions::default() };
            let rep = model_grad_check(&params, &cfg.model, &videos, &labels, &cfg.class_ids(), &opts)?;
            for t in &rep.tensors {
                eprintln!("{:<32} {:>4} checked  max rel err {:.3e}", t.name, t.checked, t.max_rel_err);
            }
            let passed = rep.passed(&opts);
            let summary = json!({"passed": passed, "max_rel_err": rep.max_rel_err(), "max_small_abs_err": rep.max_small_abs_err(), "evaluations": rep.evaluations, "tolerance": opts.tolerance});
            if let Some(dir) = &c.out {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("gradcheck.json"), serde_json::to_string_pretty(&rep)? + "\n")?;
            }
            println!("{summary}");
            if !passed {
                return Err(Failure::Numerical(format!("max relative error {:.3e} exceeds {:.0e}", rep.max_rel_err(), opts.tolerance)));
            }
        }
        Command::MergeBench { per_cluster, repeats } => {
            let mut setup = BenchSetup { per_cluster, repeats, ..BenchSetup::default() };
            if let Some(s) = c.seed {
                setup.seed = s;
            }
            if let Some(k) = c.k {
                setup.clusters = k;
                setup.dim = setup.dim.max(k);
            }
            if setup.clusters == 0 || setup.per_cluster == 0 {
                return Err(Failure::Usage("merge-bench needs at least one cluster and one point per cluster".into()));
            }
            let methods = match c.method {
                Some(m) => vec![m.aggregation()],
                None => ["bipartite", "bipartite-weighted", "kmeans", "dpcknn", "none"].iter().filter_map(|n| AggregationMethod::from_name(n)).collect(),
            };
            let rows = merge_bench(&setup, &methods)?;
            let mut lines = String::new();
            for r in &rows {
                lines += &serde_json::to_string(r)?;
                lines.push('\n');
            }
            print!("{lines}");
            if let Some(dir) = &c.out {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("merge_bench.jsonl"), lines)?;
            }
        }
        Command::Macs => {
            let mut cfg = run_config(c, None)?;
            if c.config.is_none() {
                cfg.model = overrides(c, ModelConfig::vit_b16())?;
            }
            let mut on = cfg.model.clone();
            on.vision.tc_enabled = true;
            let cmp = compare(&on)?;
            let rec = json!({
                "tc_on_macs": cmp.tc_on.total,
                "tc_off_macs": cmp.tc_off.total,
                "ratio": cmp.ratio,
                "tc_on": cmp.tc_on,
                "tc_off": cmp.tc_off,
            });
            eprintln!("tc on {:.2} GMACs, tc off {:.2} GMACs, ratio {:.4}", cmp.tc_on.total as f64 / 1e9, cmp.tc_off.total as f64 / 1e9, cmp.ratio);
            emit(c.out.as_deref(), "macs.json", &rec)?;
        }
        Command::Viz { ckpt_a } => {
            let (cfg, params) = match ckpt_a {
                Some(path) => {
                    let (base, p) = checkpoint(&path)?;
                    (run_config(c, Some(base))?, p)
                }
                None => {
                    let cfg = run_config(c, None)?;
                    let p = init_params::<f64>(&cfg.model, cfg.param_seed())?;
                    (cfg, p)
                }
            };
            let v = &cfg.model.vision;
            let mut rng = SplitMix64::derive(cfg.seed, 3);
            let clip = sample_clip::<f64>(&mut rng, v.frames, v.height, v.width, &cfg.train.square, cfg.train.task)?;
            let mut g = Graph::new();
            let b = params.bind(&mut g);
            let (_, out) = encode_clip(&mut g, &b, v, &clip.clip, cfg.model.layer_norm_eps)?;
            let rec = out
                .records
                .iter()
                .rev()
                .find(|r| r.selection.is_some() && r.contexts.is_some())
                .ok_or_else(|| Failure::Usage("no layer produced contexts; enable temporal contexts to render assignments".into()))?;
            let (sel, ctx) = (rec.selection.as_ref().expect("checked"), rec.contexts.as_ref().expect("checked"));
            let map = render_assignment_map(&clip.clip, v.patch, sel, ctx, &VizOptions::default())?;
            let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("runs/viz"));
            fs::create_dir_all(&dir)?;
            let stem = dir.join(format!("assignment_layer{:02}", rec.layer));
            write_assignment_map(&map, &stem, true)?;
            println!("{}", json!({"layer": rec.layer, "seeds": sel.len(), "contexts": ctx.tokens.rows(), "ppm": stem.with_extension("ppm"), "svg": stem.with_extension("svg")}));
        }
    }
    Ok(())
}

/// Config file or toy defaults, then command-line overrides.
fn run_config(c: &Common, base: Option<RunConfig>) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match (&c.config, base) {
        (Some(path), _) => serde_json::from_str(&fs::read_to_string(path)?)?,
        (None, Some(b)) => b,
        (None, None) => RunConfig::toy(0),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.model = overrides(c, cfg.model)?;
    cfg.validate()?;
    Ok(cfg)
}

fn overrides(c: &Common, mut m: ModelConfig) -> std::result::Result<ModelConfig, Failure> {
    if let Some(method) = c.method {
        m.vision.aggregation = method.aggregation();
    }
    if let Some(a) = c.alpha {
        m.vision.alpha = a;
    }
    if let Some(k) = c.k {
        m.vision.contexts = k;
    }
    match c.tc {
        Some(Tc::All) => {
            m.vision.tc_enabled = true;
            m.vision.tc_layers = TcLayers::All;
        }
        Some(Tc::Lite) => {
            m.vision.tc_enabled = true;
            m.vision.tc_layers = TcLayers::Lite;
        }
        Some(Tc::Off) => m = m.baseline(),
        None => {}
    }
    m.validate()?;
    Ok(m)
}

fn checkpoint(path: &Path) -> std::result::Result<(RunConfig, ParamStore<f64>), Failure> {
    let (manifest, params) = load_checkpoint::<f64>(path)?;
    let cfg: RunConfig = serde_json::from_value(manifest.config)?;
    Ok((cfg, params))
}

fn emit(out: Option<&Path>, file: &str, rec: &serde_json::Value) -> Outcome {
    println!("{rec}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(file), serde_json::to_string_pretty(rec)? + "\n")?;
    }
    Ok(())
}
