//! Ablation tables and forward-latency benchmarks.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::audit::audit_config;
use crate::error::{Error, Result};
use crate::model::{Ablation, M3et, ModelConfig};
use crate::nn::Ctx;
use crate::tensor::{Graph, Real, Rng};

use super::config::RunConfig;
use super::synth::generate_scene;
use super::train::{pretrain, TrainOptions};

/// Published figures for one configuration, for side-by-side printing only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedRow {
    pub psnr_db: f64,
    pub vqa_pct: f64,
    pub gflops: f64,
}

pub fn published(a: Ablation) -> PublishedRow {
    let (psnr_db, vqa_pct, gflops) = match a {
        Ablation::Full => (18.30, 74.18, 9.08),
        Ablation::NoText => (17.62, 70.1, 9.66),
        Ablation::NoMamba => (16.53, 72.4, 9.96),
        Ablation::NoCrossAttention => (16.23, 69.0, 9.73),
    };
    PublishedRow {
        psnr_db,
        vqa_pct,
        gflops,
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub ablation: Ablation,
    /// Final held-out PSNR of the desk run; `None` when training was skipped.
    pub psnr_db: Option<f64>,
    pub psnr_start_db: Option<f64>,
    /// Audit of the trained configuration.
    pub params: u64,
    pub flops: u64,
    /// Audit of the same ablation at full geometry.
    pub full_params: u64,
    pub full_flops: u64,
    pub published: PublishedRow,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, a: Ablation) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.ablation == a)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<20} {:>9} {:>12} {:>12} {:>12} {:>12} | {:>10} {:>9} {:>10}",
            "config", "PSNR(dB)", "params", "GFLOPs", "full params", "full GFLOPs", "pub PSNR", "pub VQA%", "pub GFLOPs"
        );
        for r in &self.rows {
            let psnr = r.psnr_db.map_or("-".to_string(), |p| format!("{p:.2}"));
            let _ = writeln!(
                s,
                "{:<20} {:>9} {:>12} {:>12.3} {:>12} {:>12.2} | {:>10.2} {:>9.2} {:>10.2}",
                r.ablation.name(),
                psnr,
                r.params,
                r.flops as f64 / 1e9,
                r.full_params,
                r.full_flops as f64 / 1e9,
                r.published.psnr_db,
                r.published.vqa_pct,
                r.published.gflops
            );
        }
        s.push_str("published PSNR and VQA come from full-dataset training and are not reproducible at desk scale\n");
        s
    }
}

/// Audit, and optionally train, the four configurations with a shared seed.
pub fn run_ablations(base: &RunConfig, train: bool, out_dir: Option<&Path>, verbose: bool) -> Result<AblationTable> {
    base.validate()?;
    let full_geometry = ModelConfig::full_scale();
    let mut rows = Vec::with_capacity(Ablation::ALL.len());
    for a in Ablation::ALL {
        let mut run = base.clone();
        run.model = base.model.ablate(a);
        let desk = audit_config(&run.model, a.name())?;
        let full = audit_config(&full_geometry.ablate(a), a.name())?;
        let (psnr_db, psnr_start_db) = if train {
            let opts = TrainOptions {
                out_dir: out_dir.map(|d| d.join(a.name())),
                verbose,
                ..Default::default()
            };
            let out = pretrain(&run, &opts)?;
            (out.final_psnr(), out.evals.first().map(|e| e.psnr_db))
        } else {
            (None, None)
        };
        rows.push(AblationRow {
            ablation: a,
            psnr_db,
            psnr_start_db,
            params: desk.total_params(),
            flops: desk.total_flops(),
            full_params: full.total_params(),
            full_flops: full.total_flops(),
            published: published(a),
        });
    }
    Ok(AblationTable { rows })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyStats {
    pub label: String,
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
    pub p25_ms: f64,
    pub p75_ms: f64,
    pub p95_ms: f64,
    /// Parameters plus every value held by one forward graph.
    pub peak_bytes: usize,
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl LatencyStats {
    fn from_samples(label: &str, samples_ms: Vec<f64>, peak_bytes: usize) -> Self {
        let mut s = samples_ms.clone();
        s.sort_by(f64::total_cmp);
        Self {
            label: label.to_string(),
            median_ms: quantile(&s, 0.5),
            p25_ms: quantile(&s, 0.25),
            p75_ms: quantile(&s, 0.75),
            p95_ms: quantile(&s, 0.95),
            samples_ms,
            peak_bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub full: LatencyStats,
    pub no_mamba: LatencyStats,
}

impl BenchReport {
    /// `median(no_mamba) / median(full)`.
    pub fn speedup(&self) -> f64 {
        self.no_mamba.median_ms / self.full.median_ms
    }

    pub fn memory_reduction_pct(&self) -> f64 {
        100.0 * (1.0 - self.full.peak_bytes as f64 / self.no_mamba.peak_bytes as f64)
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<10} {:>11} {:>11} {:>11} {:>11} {:>12}\n",
            "config", "median ms", "p25 ms", "p75 ms", "p95 ms", "peak MiB"
        );
        for r in [&self.full, &self.no_mamba] {
            let _ = writeln!(
                s,
                "{:<10} {:>11.2} {:>11.2} {:>11.2} {:>11.2} {:>12.1}",
                r.label,
                r.median_ms,
                r.p25_ms,
                r.p75_ms,
                r.p95_ms,
                r.peak_bytes as f64 / (1 << 20) as f64
            );
        }
        let _ = writeln!(
            s,
            "speedup {:.3}x, memory reduction {:.1}% (published: 2.3x faster, 73.2% less memory, against a different baseline)",
            self.speedup(),
            self.memory_reduction_pct()
        );
        s
    }
}

fn time_forward<T: Real>(cfg: &ModelConfig, label: &str, iterations: usize, warmup: usize, seed: u64) -> Result<LatencyStats> {
    let (model, store) = M3et::init::<T>(cfg, seed)?;
    let scene = generate_scene(cfg.image_size, &mut Rng::new(seed).split(1))?;
    let sample = scene.to_sample::<T>(cfg)?;
    let plan = cfg.sample_plan(&sample.spans, &mut Rng::new(seed).split(2))?;
    let param_bytes = store.numel() * T::PRECISION.bytes();
    let mut peak = 0;
    let mut times = Vec::with_capacity(iterations);
    for i in 0..warmup + iterations {
        let t0 = Instant::now();
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &store, false, Rng::new(0));
        model.forward(&mut ctx, &sample, &plan)?;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        peak = peak.max(g.activation_bytes());
        if i >= warmup {
            times.push(ms);
        }
    }
    Ok(LatencyStats::from_samples(label, times, param_bytes + peak))
}

/// Eval-mode forward latency of `cfg` against its all-Transformer counterpart.
pub fn bench<T: Real>(cfg: &ModelConfig, iterations: usize, warmup: usize, seed: u64) -> Result<BenchReport> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("bench needs at least one timed iteration".into()));
    }
    cfg.validate()?;
    let full = cfg.ablate(Ablation::Full);
    let no_mamba = cfg.ablate(Ablation::NoMamba);
    Ok(BenchReport {
        full: time_forward::<T>(&full, "full", iterations, warmup, seed)?,
        no_mamba: time_forward::<T>(&no_mamba, "no_mamba", iterations, warmup, seed)?,
    })
}
