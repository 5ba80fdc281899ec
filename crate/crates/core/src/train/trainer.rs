//! Contrastive training on synthetic clips with JSON-lines logging.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::io::save_checkpoint;
use crate::model::{forward_batch, forward_batch_frozen, init_params};
use crate::train::gradcheck::{grad_check, GradCheckOptions, GradReport};
use crate::params::ParamStore;
use crate::rng::SplitMix64;
use crate::synth::{dataset, sample_clip, SquareStyle, SyntheticClip, Task};
use crate::train::loss::{argmax_rows, cross_entropy};
use crate::train::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::vision::VideoClip;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub task: Task,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning-rate multiplier for the prompting block.
    pub vp_lr_multiplier: f64,
    /// Held-out clips scored after training (reversal pairs count twice).
    pub eval_clips: usize,
    pub log_every: u64,
    pub square: SquareStyle,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Reversal2,
            steps: 1000,
            batch: 16,
            lr: 1e-3,
            warmup: 50,
            weight_decay: 0.001,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            vp_lr_multiplier: 1.0,
            eval_clips: 1024,
            log_every: 10,
            square: SquareStyle::default(),
        }
    }
}

/// Everything a run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn toy(seed: u64) -> Self {
        Self { model: ModelConfig::toy(), train: TrainConfig::default(), seed }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch == 0 || t.lr <= 0.0 || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || t.eps <= 0.0 {
            return Err(Error::invalid("train config", "batch, lr, betas and eps must be positive (betas below 1)"));
        }
        let needed = self.model.text.first_word_id() + crate::synth::WORDS.len();
        if self.model.text.vocab < needed {
            return Err(Error::invalid("train config", format!("vocabulary needs at least {needed} rows for the class words")));
        }
        Ok(())
    }

    pub fn param_seed(&self) -> u64 {
        SplitMix64::derive(self.seed, 0).next_u64()
    }

    pub fn eval_seed(&self) -> u64 {
        SplitMix64::derive(self.seed, 2).next_u64()
    }

    pub fn class_ids(&self) -> Vec<Vec<usize>> {
        self.train.task.class_ids(self.model.text.first_word_id())
    }

    pub fn eval_set(&self) -> Result<Vec<SyntheticClip<f64>>> {
        let v = &self.model.vision;
        dataset(self.eval_seed(), self.train.eval_clips, v.frames, v.height, v.width, &self.train.square, self.train.task)
    }

    pub fn optimizer(&self) -> AdamWConfig {
        let t = &self.train;
        let mut c = AdamWConfig::new(LrSchedule { base: t.lr, warmup: t.warmup, total: t.steps });
        c.beta1 = t.beta1;
        c.beta2 = t.beta2;
        c.eps = t.eps;
        c.weight_decay = t.weight_decay;
        if t.vp_lr_multiplier != 1.0 {
            c.lr_multipliers.push(("vp.".into(), t.vp_lr_multiplier));
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub clips: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub kind: String,
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
}

/// Batch loss, gradients and number of correct predictions.
pub fn loss_and_grads(params: &ParamStore<f64>, cfg: &ModelConfig, clips: &[VideoClip<f64>], labels: &[usize], classes: &[Vec<usize>]) -> Result<(f64, ParamStore<f64>, usize)> {
    let mut g = Graph::new();
    let b = params.bind(&mut g);
    let out = forward_batch(&mut g, &b, cfg, clips, classes)?;
    let loss = cross_entropy(&mut g, out.logits, labels)?;
    let preds = argmax_rows(g.value(out.sims));
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    let grads = b.collect(&g.backward(loss)?);
    Ok((g.value(loss).item(), grads, correct))
}

/// Checks every parameter gradient of the batch loss against central
/// differences, holding the stop-gradient prompting inputs at their base
/// values.
pub fn model_grad_check(params: &ParamStore<f64>, cfg: &ModelConfig, clips: &[VideoClip<f64>], labels: &[usize], classes: &[Vec<usize>], opts: &GradCheckOptions) -> Result<GradReport> {
    let frozen: Vec<_> = {
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let out = forward_batch(&mut g, &b, cfg, clips, classes)?;
        out.projected_contexts.iter().map(|&v| g.value(v).clone()).collect()
    };
    let frozen = if frozen.is_empty() { None } else { Some(frozen.as_slice()) };
    let f = |g: &mut Graph<f64>, b: &crate::params::Bound| {
        let out = forward_batch_frozen(g, b, cfg, clips, classes, frozen)?;
        cross_entropy(g, out.logits, labels)
    };
    grad_check(&f, params, opts)
}

/// Mean loss and accuracy over `clips`, scored in chunks of `chunk`.
pub fn evaluate(params: &ParamStore<f64>, cfg: &ModelConfig, clips: &[SyntheticClip<f64>], classes: &[Vec<usize>], chunk: usize) -> Result<EvalMetrics> {
    let mut total_loss = 0.0;
    let mut correct = 0;
    for part in clips.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let videos: Vec<VideoClip<f64>> = part.iter().map(|c| c.clip.clone()).collect();
        let labels: Vec<usize> = part.iter().map(|c| c.label).collect();
        let out = forward_batch(&mut g, &b, cfg, &videos, classes)?;
        let loss = cross_entropy(&mut g, out.logits, &labels)?;
        total_loss += g.value(loss).item() * part.len() as f64;
        correct += argmax_rows(g.value(out.sims)).iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    let n = clips.len().max(1) as f64;
    let m = EvalMetrics { clips: clips.len(), loss: total_loss / n, accuracy: correct as f64 / n };
    if !m.loss.is_finite() {
        return Err(Error::NonFinite(format!("evaluation loss is {}", m.loss)));
    }
    Ok(m)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore<f64>,
    pub history: Vec<MetricRecord>,
    pub eval: Option<EvalMetrics>,
}

struct Logs {
    metrics: BufWriter<File>,
    timing: BufWriter<File>,
}

fn write_line<W: Write, S: Serialize>(w: &mut W, rec: &S) -> Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Trains from `cfg.seed` for `cfg.train.steps` steps.
///
/// With `out` set, writes `config.json`, `metrics.jsonl` (step, loss,
/// accuracy), `timing.jsonl` (wall-clock per logged step) and the final
/// weights under `checkpoint/`. Everything except `timing.jsonl` is a pure
/// function of the configuration.
pub fn train(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut logs = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
            Some(Logs { metrics: BufWriter::new(File::create(dir.join("metrics.jsonl"))?), timing: BufWriter::new(File::create(dir.join("timing.jsonl"))?) })
        }
        None => None,
    };
    let v = &cfg.model.vision;
    let classes = cfg.class_ids();
    let mut params = init_params::<f64>(&cfg.model, cfg.param_seed())?;
    let mut opt = AdamW::new(cfg.optimizer());
    let mut data_rng = SplitMix64::derive(cfg.seed, 1);
    let mut history = Vec::new();
    let started = Instant::now();
    for step in 1..=cfg.train.steps {
        let mut batch = Vec::with_capacity(cfg.train.batch);
        while batch.len() < cfg.train.batch {
            let c = sample_clip::<f64>(&mut data_rng, v.frames, v.height, v.width, &cfg.train.square, cfg.train.task)?;
            if cfg.train.task == Task::Reversal2 && batch.len() + 1 < cfg.train.batch {
                let r = c.reversed()?;
                batch.push(c);
                batch.push(r);
            } else {
                batch.push(c);
            }
        }
        let clips: Vec<VideoClip<f64>> = batch.iter().map(|c| c.clip.clone()).collect();
        let labels: Vec<usize> = batch.iter().map(|c| c.label).collect();
        let (loss, grads, correct) = loss_and_grads(&params, &cfg.model, &clips, &labels, &classes)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss is {loss} at step {step}")));
        }
        opt.step(&mut params, &grads)?;
        if step % cfg.train.log_every.max(1) == 0 || step == cfg.train.steps {
            let rec = MetricRecord { kind: "train".into(), step, loss, accuracy: correct as f64 / labels.len() as f64 };
            if let Some(l) = logs.as_mut() {
                write_line(&mut l.metrics, &rec)?;
                write_line(&mut l.timing, &serde_json::json!({"step": step, "wall_ms": started.elapsed().as_millis() as u64}))?;
            }
            history.push(rec);
        }
    }
    let eval = if cfg.train.eval_clips > 0 {
        let m = evaluate(&params, &cfg.model, &cfg.eval_set()?, &classes, cfg.train.batch)?;
        let rec = MetricRecord { kind: "eval".into(), step: cfg.train.steps, loss: m.loss, accuracy: m.accuracy };
        if let Some(l) = logs.as_mut() {
            write_line(&mut l.metrics, &rec)?;
        }
        history.push(rec);
        Some(m)
    } else {
        None
    };
    if let Some(dir) = out {
        save_checkpoint(&dir.join("checkpoint"), &params, cfg.train.steps, serde_json::to_value(cfg)?)?;
    }
    Ok(TrainOutcome { params, history, eval })
}
