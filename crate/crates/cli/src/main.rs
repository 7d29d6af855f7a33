use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use m3et::audit::{audit_config, compare, reference_blocks};
use m3et::harness::checkpoint::Checkpoint;
use m3et::harness::config::RunConfig;
use m3et::harness::dataset::write_scenes;
use m3et::harness::reconstruct::reconstruct;
use m3et::harness::report::{bench, run_ablations};
use m3et::harness::synth::generate_synthetic;
use m3et::harness::train::{init_seed, load_model, load_split, pretrain, streams, TrainOptions};
use m3et::harness::verify::{gradcheck_suite, GRAD_TOL};
use m3et::model::{Ablation, M3et};
use m3et::{Error, Precision, Real, Rng};

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "m3et", version, about = "Masked multimodal encoder with Mamba blocks: training, audits and checks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML run configuration; omitted fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any field, e.g. `--set train.steps=50 --set model.use_text=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Start from the full-size preset (224² images, 1600 steps of batch 16) instead of the desk one.
    #[arg(long = "paper-scale")]
    full_scale: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Full,
    NoText,
    NoMamba,
    NoCrossAttention,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Full => Ablation::Full,
            AblationArg::NoText => Ablation::NoText,
            AblationArg::NoMamba => Ablation::NoMamba,
            AblationArg::NoCrossAttention => Ablation::NoCrossAttention,
        }
    }
}

impl ConfigArgs {
    fn load(&self) -> m3et::Result<RunConfig> {
        let mut sets = self.sets.clone();
        let mut push = |k: &str, v: String| sets.push(format!("{k}={v}"));
        if let Some(v) = self.seed {
            push("train.seed", v.to_string());
        }
        if let Some(v) = self.steps {
            push("train.steps", v.to_string());
        }
        if let Some(v) = self.batch_size {
            push("train.batch_size", v.to_string());
        }
        if let Some(v) = self.lr {
            push("optim.lr", format!("{v:e}"));
        }
        if let Some(p) = self.precision {
            push("train.precision", format!("\"{}\"", if matches!(p, PrecisionArg::F32) { "f32" } else { "f64" }));
        }
        if let Some(d) = &self.data_dir {
            push("train.data_dir", format!("{:?}", d.display().to_string()));
        }
        let mut run = RunConfig::load(self.config.as_deref(), &sets, self.full_scale)?;
        if let Some(a) = self.ablation {
            run.model = run.model.ablate(a.into());
        }
        run.validate()?;
        Ok(run)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Masked multimodal pretraining; writes metrics.log, timing.log and checkpoints.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/pretrain")]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run of the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Parameter and FLOP counts per block; full-size geometry unless `--desk`.
    Audit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        desk: bool,
        /// One `name params flops` record per block instead of the table.
        #[arg(long)]
        records: bool,
    },
    /// The four ablation configurations: audits, and desk training unless `--no-train`.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        no_train: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forward latency and memory of the configuration against its all-Transformer counterpart.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        desk: bool,
        #[arg(long, default_value_t = 5)]
        iterations: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
    },
    /// Finite-difference gradient checks of every block and the toy model.
    Gradcheck {
        /// Coordinates probed per parameter tensor of the toy model.
        #[arg(long, default_value_t = 4)]
        per_tensor: usize,
    },
    /// Reconstruct a held-out scene from its masked view; writes recon.ppm and plan.json.
    Reconstruct {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Trained weights; an untrained model is used when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long, default_value = "runs/reconstruct")]
        out: PathBuf,
    },
    /// Write synthetic scenes to disk.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

enum Failure {
    Usage(String),
    Numerical(String),
    Io(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        if e.is_numerical() {
            Failure::Numerical(msg)
        } else {
            match e {
                Error::Io(_) | Error::Checkpoint(_) | Error::Dataset(_) => Failure::Io(msg),
                _ => Failure::Usage(msg),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(EXIT_NUMERICAL)
        }
        Err(Failure::Io(m)) => {
            eprintln!("i/o failure: {m}");
            ExitCode::from(EXIT_IO)
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Pretrain { cfg, out, resume, quiet } => {
            let run = cfg.load()?;
            let resume = resume.as_deref().map(Checkpoint::load).transpose()?;
            let opts = TrainOptions {
                out_dir: Some(out.clone()),
                resume,
                stop_after: None,
                verbose: !quiet,
            };
            std::fs::create_dir_all(&out).map_err(Error::from)?;
            std::fs::write(out.join("config.toml"), run.to_toml()?).map_err(Error::from)?;
            let r = pretrain(&run, &opts)?;
            if let (Some(a), Some(b)) = (r.evals.first(), r.evals.last()) {
                println!("psnr {:.2} dB -> {:.2} dB", a.psnr_db, b.psnr_db);
            }
            println!("wrote {}", out.display());
        }
        Cmd::Audit { mut cfg, desk, records } => {
            cfg.full_scale = !desk;
            let run = cfg.load()?;
            let report = audit_config(&run.model, "config")?;
            if records {
                print!("{}", report.records());
                return Ok(());
            }
            println!("reference blocks at width 768:");
            for b in reference_blocks() {
                println!("  {:<28} {:>12} params {:>16} flops", b.name, b.params, b.flops);
            }
            println!();
            print!("{}", report.table());
            let base = audit_config(&run.model.ablate(Ablation::NoMamba), "no_mamba")?;
            println!();
            println!("{}", compare(&base, &report)?.summary());
        }
        Cmd::Ablate { cfg, no_train, out } => {
            let run = cfg.load()?;
            let table = run_ablations(&run, !no_train, out.as_deref(), false)?;
            print!("{}", table.render());
        }
        Cmd::Bench {
            mut cfg,
            desk,
            iterations,
            warmup,
        } => {
            cfg.full_scale = !desk;
            let run = cfg.load()?;
            let seed = run.train.seed;
            let r = match run.train.precision {
                Precision::F32 => bench::<f32>(&run.model, iterations, warmup, seed)?,
                Precision::F64 => bench::<f64>(&run.model, iterations, warmup, seed)?,
            };
            print!("{}", r.render());
        }
        Cmd::Gradcheck { per_tensor } => {
            let mut worst: f64 = 0.0;
            for e in gradcheck_suite(per_tensor)? {
                println!(
                    "{:<32} {:>10.3e} over {:>5} coordinates  {}",
                    e.name,
                    e.max_rel_error,
                    e.checked,
                    if e.passed() { "ok" } else { "FAIL" }
                );
                worst = worst.max(e.max_rel_error);
            }
            if !(worst < GRAD_TOL) {
                return Err(Failure::Numerical(format!("max relative error {worst:.3e} exceeds {GRAD_TOL:e}")));
            }
        }
        Cmd::Reconstruct {
            cfg,
            checkpoint,
            scene,
            out,
        } => {
            let ckpt = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let run = match &ckpt {
                Some(c) => c.config.clone(),
                None => cfg.load()?,
            };
            match run.train.precision {
                Precision::F32 => reconstruct_cmd::<f32>(&run, ckpt.as_ref(), scene, &out)?,
                Precision::F64 => reconstruct_cmd::<f64>(&run, ckpt.as_ref(), scene, &out)?,
            }
        }
        Cmd::GenData { out, scenes, seed, size } => {
            let s = generate_synthetic(seed, scenes, size)?;
            let m = write_scenes(&out, &s, m3et::harness::synth::MIN_CLASSES)?;
            println!("wrote {} scenes of {}x{} to {}", m.scenes.len(), size, size, out.display());
        }
    }
    Ok(())
}

fn reconstruct_cmd<T: Real>(run: &RunConfig, ckpt: Option<&Checkpoint>, scene: usize, out: &Path) -> Result<(), Failure> {
    let (model, store) = match ckpt {
        Some(c) => load_model::<T>(c)?,
        None => M3et::init::<T>(&run.model, init_seed(run))?,
    };
    let split = load_split(run)?;
    let s = split
        .eval
        .get(scene)
        .ok_or_else(|| Failure::Usage(format!("scene {scene} is outside the {} held-out scenes", split.eval.len())))?;
    let sample = s.to_sample::<T>(&run.model)?;
    // the plan the held-out evaluation uses for this scene
    let mut plan_rng = Rng::new(run.train.seed).split(streams::EVAL_MASK).split(scene as u64);
    let r = reconstruct(&run.model, &model, &store, &sample, &mut plan_rng, Some(out))?;
    println!("psnr {:.2} dB; visible per modality {:?}", r.psnr_db, r.plan.visible_counts());
    if let (Some(i), Some(p)) = (r.image_path, r.plan_path) {
        println!("wrote {} and {}", i.display(), p.display());
    }
    Ok(())
}
