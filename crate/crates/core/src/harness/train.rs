//! Masked multimodal pretraining runs.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::masking::{select_task, MaskPlan, Modality};
use crate::model::{patchify, M3et, ModelConfig, Sample, PAD_ID};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Graph, Precision, Real, Rng};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::dataset::read_scenes;
use super::metrics::{line_step, psnr_from_mse, token_hits, EvalRecord, StepRecord};
use super::optim::{adamw_step, AdamState};
use super::synth::{generate_synthetic, Scene};

/// Sub-streams of the run seed.
pub mod streams {
    pub const DATA_TRAIN: u64 = 1;
    pub const DATA_EVAL: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const EVAL_MASK: u64 = 5;
}

pub const METRICS_LOG: &str = "metrics.log";
pub const TIMING_LOG: &str = "timing.log";
pub const LAST_CKPT: &str = "last.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where logs and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop after this step as if interrupted, writing `last.ckpt`.
    pub stop_after: Option<u64>,
    /// Echo records to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Parameters and optimiser state after the last completed step.
    pub checkpoint: Checkpoint,
}

impl RunOutput {
    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.total).collect()
    }

    pub fn final_psnr(&self) -> Option<f64> {
        self.evals.last().map(|e| e.psnr_db)
    }
}

pub struct Split {
    pub train: Vec<Scene>,
    pub eval: Vec<Scene>,
}

/// Training and held-out scenes for a run, generated or read from `data_dir`.
pub fn load_split(run: &RunConfig) -> Result<Split> {
    let t = &run.train;
    let size = run.model.image_size;
    match &t.data_dir {
        Some(dir) => {
            let (m, mut scenes) = read_scenes(dir)?;
            if m.image_size != size {
                return Err(Error::Dataset(format!("scenes are {0}x{0}, model expects {size}x{size}", m.image_size)));
            }
            if scenes.len() <= t.eval_scenes {
                return Err(Error::Dataset(format!(
                    "{} scenes cannot hold out {}",
                    scenes.len(),
                    t.eval_scenes
                )));
            }
            let eval = scenes.split_off(scenes.len() - t.eval_scenes);
            Ok(Split { train: scenes, eval })
        }
        None => {
            let root = Rng::new(t.seed);
            Ok(Split {
                train: generate_synthetic(root.split(streams::DATA_TRAIN).seed(), t.train_scenes, size)?,
                eval: generate_synthetic(root.split(streams::DATA_EVAL).seed(), t.eval_scenes, size)?,
            })
        }
    }
}

/// Steps after which the held-out split is scored: `points` evenly spaced over `[0, steps]`.
pub fn eval_steps(steps: u64, points: usize) -> Vec<u64> {
    let mut v: Vec<u64> = match points {
        0 => Vec::new(),
        1 => vec![steps],
        n => (0..n as u64).map(|k| k * steps / (n as u64 - 1)).collect(),
    };
    v.dedup();
    v
}

pub fn init_seed(run: &RunConfig) -> u64 {
    Rng::new(run.train.seed).split(streams::INIT).seed()
}

/// Model plus parameters restored from a checkpoint.
pub fn load_model<T: Real>(ckpt: &Checkpoint) -> Result<(M3et, ParamStore<T>)> {
    let (model, mut store) = M3et::init::<T>(&ckpt.config.model, init_seed(&ckpt.config))?;
    ckpt.restore(&mut store)?;
    Ok((model, store))
}

/// Loss components that can be trained on their own.
fn tasks(cfg: &ModelConfig, w: &LossWeights) -> Vec<Modality> {
    Modality::ALL
        .into_iter()
        .filter(|&m| w.get(m) > 0.0 && (m != Modality::Text || cfg.use_text))
        .collect()
}

/// One AdamW update on a batch drawn from `step`'s stream.
pub fn train_step<T: Real>(
    run: &RunConfig,
    model: &M3et,
    store: &mut ParamStore<T>,
    adam: &mut AdamState<T>,
    samples: &[Sample<T>],
    step: u64,
) -> Result<StepRecord> {
    let cfg = &run.model;
    let rng = Rng::new(run.train.seed).split(streams::TRAIN).split(step);
    let mut pick = rng.split(0);
    let batch: Vec<Sample<T>> = (0..run.train.batch_size)
        .map(|_| samples[pick.below(samples.len())].clone())
        .collect();
    let plans = batch
        .iter()
        .enumerate()
        .map(|(i, s)| cfg.sample_plan(&s.spans, &mut rng.split(1).split(i as u64)))
        .collect::<Result<Vec<MaskPlan>>>()?;
    let (weights, task) = if cfg.task_sampling {
        let m = select_task(&tasks(cfg, &cfg.loss_weights), &mut rng.split(3))?;
        (cfg.loss_weights.only(m), Some(m))
    } else {
        (cfg.loss_weights, None)
    };
    let lr = run.optim.lr_at(step, run.train.steps);
    let mut g = Graph::new();
    let (total, components, grads) = {
        let mut ctx = Ctx::new(&mut g, store, true, rng.split(2));
        let parts = model.forward_train(&mut ctx, &batch, &plans, &weights)?;
        let total = ctx.g.scalar(parts.total).as_f64();
        if !total.is_finite() {
            return Err(Error::NonFiniteValue {
                what: format!("total loss at step {step}"),
            });
        }
        ctx.g.backward(parts.total)?;
        (total, parts.components, ctx.grads())
    };
    drop(g);
    adamw_step(store, &grads, adam, &run.optim, lr)?;
    Ok(StepRecord {
        step,
        lr,
        total,
        components,
        task,
    })
}

/// Score the held-out split with fixed mask plans.
pub fn evaluate<T: Real>(
    run: &RunConfig,
    model: &M3et,
    store: &ParamStore<T>,
    samples: &[Sample<T>],
    step: u64,
) -> Result<EvalRecord> {
    let cfg = &run.model;
    let root = Rng::new(run.train.seed).split(streams::EVAL_MASK);
    let (mut sse, mut pixels) = (0.0, 0usize);
    let (mut sse_h, mut pixels_h) = (0.0, 0usize);
    let (mut abs, mut depth_px) = (0.0, 0usize);
    let (mut hits, mut scored) = (0, 0);
    for (i, s) in samples.iter().enumerate() {
        let plan = cfg.sample_plan(&s.spans, &mut root.split(i as u64))?;
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, store, false, Rng::new(0));
        let fwd = model.forward(&mut ctx, s, &plan)?;
        let img = model.rgb_image(&ctx, &fwd)?;
        let (pred, target) = (patchify(&img, cfg.patch)?, patchify(&s.rgb, cfg.patch)?);
        let visible = plan.visible_of(Modality::Rgb);
        let width = pred.numel() / pred.shape()[0];
        for (r, (a, b)) in pred.data().chunks(width).zip(target.data().chunks(width)).enumerate() {
            let e: f64 = a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
            // visible patches are pasted from the input
            if !visible.is_some_and(|v| v[r]) {
                sse += e;
                sse_h += e;
                pixels_h += width;
            }
        }
        pixels += img.numel();
        let depth = model.depth_image(&ctx, &fwd)?;
        for (a, b) in depth.data().iter().zip(s.depth.data()) {
            abs += (a.as_f64() - b.as_f64()).abs();
        }
        depth_px += depth.numel();
        if let Some(t) = fwd.output(Modality::Text) {
            let (h, n) = token_hits(ctx.g.value(t), &s.text, PAD_ID)?;
            hits += h;
            scored += n;
        }
    }
    if pixels == 0 {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    let mse = sse / pixels as f64;
    if !mse.is_finite() {
        return Err(Error::NonFiniteValue {
            what: format!("evaluation at step {step}"),
        });
    }
    Ok(EvalRecord {
        step,
        psnr_db: psnr_from_mse(mse, 1.0),
        psnr_hidden_db: psnr_from_mse(sse_h / pixels_h.max(1) as f64, 1.0),
        depth_l1: abs / depth_px as f64,
        text_accuracy: (cfg.use_text && scored > 0).then(|| hits as f64 / scored as f64),
    })
}

struct Logs {
    metrics: Option<File>,
    timing: Option<File>,
    verbose: bool,
}

impl Logs {
    fn open(dir: Option<&Path>, resume_step: Option<u64>, verbose: bool) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Self {
                metrics: None,
                timing: None,
                verbose,
            });
        };
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<File> {
            let path = dir.join(name);
            // keep what the resumed-from run already logged, drop anything after it
            let kept = match (resume_step, path.exists()) {
                (Some(s), true) => BufReader::new(File::open(&path)?)
                    .lines()
                    .collect::<std::io::Result<Vec<_>>>()?
                    .into_iter()
                    .filter(|l| line_step(l).is_some_and(|x| x <= s))
                    .collect(),
                _ => Vec::new(),
            };
            let mut f = File::create(&path)?;
            for l in kept {
                writeln!(f, "{l}")?;
            }
            Ok(f)
        };
        Ok(Self {
            metrics: Some(open(METRICS_LOG)?),
            timing: Some(open(TIMING_LOG)?),
            verbose,
        })
    }

    fn metric(&mut self, line: &str) -> Result<()> {
        if self.verbose {
            eprintln!("{line}");
        }
        if let Some(f) = &mut self.metrics {
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        Ok(())
    }

    fn timing(&mut self, step: u64, ms: f64) -> Result<()> {
        if let Some(f) = &mut self.timing {
            writeln!(f, "step={step} wall_ms={ms:.3}")?;
        }
        Ok(())
    }
}

fn check_resumable(run: &RunConfig, ckpt: &Checkpoint) -> Result<()> {
    let strip = |r: &RunConfig| {
        let mut r = r.clone();
        r.train.steps = 0;
        r.train.checkpoint_every = 0;
        r.train.eval_points = 0;
        r
    };
    if strip(run) != strip(&ckpt.config) {
        return Err(Error::Checkpoint("checkpoint was written by a different configuration".into()));
    }
    if ckpt.step > run.train.steps {
        return Err(Error::Checkpoint(format!(
            "checkpoint is at step {}, past the requested {}",
            ckpt.step, run.train.steps
        )));
    }
    Ok(())
}

/// Train per `run`, logging every step and scoring the held-out split at [`eval_steps`].
///
/// A non-finite loss or gradient stops the run with the error; checkpoints
/// already on disk are left untouched.
pub fn pretrain(run: &RunConfig, opts: &TrainOptions) -> Result<RunOutput> {
    run.validate()?;
    match run.train.precision {
        Precision::F32 => pretrain_typed::<f32>(run, opts),
        Precision::F64 => pretrain_typed::<f64>(run, opts),
    }
}

fn pretrain_typed<T: Real>(run: &RunConfig, opts: &TrainOptions) -> Result<RunOutput> {
    let split = load_split(run)?;
    let to_samples = |scenes: &[Scene]| -> Result<Vec<Sample<T>>> {
        scenes.iter().map(|s| s.to_sample(&run.model)).collect()
    };
    let train = to_samples(&split.train)?;
    let held_out = to_samples(&split.eval)?;
    if train.is_empty() {
        return Err(Error::Dataset("no training scenes".into()));
    }
    let (model, mut store) = M3et::init::<T>(&run.model, init_seed(run))?;
    let mut adam = AdamState::new(&store);
    let mut start = 0;
    if let Some(ck) = &opts.resume {
        check_resumable(run, ck)?;
        adam = ck.restore(&mut store)?.unwrap_or(adam);
        start = ck.step;
    }
    let dir = opts.out_dir.as_deref();
    let mut logs = Logs::open(dir, opts.resume.as_ref().map(|c| c.step), opts.verbose)?;
    let evals_at = eval_steps(run.train.steps, run.train.eval_points);
    let mut records = Vec::new();
    let mut evals = Vec::new();
    let mut eval = |store: &ParamStore<T>, step: u64, logs: &mut Logs| -> Result<()> {
        let e = evaluate(run, &model, store, &held_out, step)?;
        logs.metric(&e.line())?;
        evals.push(e);
        Ok(())
    };
    if start == 0 && evals_at.first() == Some(&0) {
        eval(&store, 0, &mut logs)?;
    }
    let end = opts.stop_after.map_or(run.train.steps, |s| s.min(run.train.steps));
    let save = |name: &str, store: &ParamStore<T>, adam: &AdamState<T>, step: u64| -> Result<Checkpoint> {
        let ck = Checkpoint::capture(run, step, store, Some(adam));
        if let Some(d) = dir {
            ck.save(&d.join(name))?;
        }
        Ok(ck)
    };
    for step in start + 1..=end {
        let t0 = Instant::now();
        let rec = train_step(run, &model, &mut store, &mut adam, &train, step)?;
        logs.timing(step, t0.elapsed().as_secs_f64() * 1e3)?;
        logs.metric(&rec.line())?;
        records.push(rec);
        if evals_at.contains(&step) {
            eval(&store, step, &mut logs)?;
        }
        let every = run.train.checkpoint_every;
        if dir.is_some() && every > 0 && step % every == 0 && step < end {
            save(LAST_CKPT, &store, &adam, step)?;
        }
    }
    let checkpoint = if end < run.train.steps {
        save(LAST_CKPT, &store, &adam, end)?
    } else {
        save(LAST_CKPT, &store, &adam, end)?;
        save(FINAL_CKPT, &store, &adam, end)?
    };
    Ok(RunOutput {
        records,
        evals,
        checkpoint,
    })
}
