//! Classification head on frozen encoder features: does this caption describe this scene?

use crate::error::Result;
use crate::losses::{masked_cross_entropy, LossNorm};
use crate::model::{M3et, ModelConfig, Sample, PAD_ID};
use crate::nn::{Ctx, Linear, ParamStore};
use crate::tensor::{Graph, Real, Rng, Tensor};

use super::optim::{adamw_step, AdamState, OptimConfig};
use super::synth::Scene;

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    pub train_pairs: usize,
    pub eval_pairs: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub eval_accuracy: f64,
}

/// Mean-pooled encoder latents with every text token visible.
fn features<T: Real>(cfg: &ModelConfig, model: &M3et, store: &ParamStore<T>, s: &Sample<T>, rng: &mut Rng) -> Result<Vec<T>> {
    let mut plan = cfg.sample_plan(&s.spans, rng)?;
    if cfg.use_text {
        plan.text = Some(s.text.iter().map(|&t| t != PAD_ID).collect());
    }
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, store, false, Rng::new(0));
    let enc = model.encode(&mut ctx, s, &plan)?;
    let z = ctx.g.value(enc.latents);
    let (n, d) = (z.shape()[0], z.shape()[1]);
    let mut out = vec![T::zero(); d];
    for r in 0..n {
        for (o, v) in out.iter_mut().zip(&z.data()[r * d..(r + 1) * d]) {
            *o += *v / T::lit(n as f64);
        }
    }
    Ok(out)
}

/// Matched and mismatched (scene, caption) pairs; label 1 when the caption is the scene's own.
fn pairs<T: Real>(cfg: &ModelConfig, scenes: &[Scene]) -> Result<Vec<(Sample<T>, usize)>> {
    let mut out = Vec::with_capacity(2 * scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        out.push((s.to_sample(cfg)?, 1));
        let other = &scenes[(i + 1) % scenes.len()];
        let mut swapped = s.clone();
        swapped.caption = other.caption.clone();
        let label = (other.caption == s.caption) as usize;
        out.push((swapped.to_sample(cfg)?, label));
    }
    Ok(out)
}

/// Train a linear head for `steps` full-batch AdamW updates, then score held-out pairs.
pub fn finetune_caption_matching<T: Real>(
    cfg: &ModelConfig,
    model: &M3et,
    store: &ParamStore<T>,
    train: &[Scene],
    eval: &[Scene],
    steps: usize,
    seed: u64,
) -> Result<FinetuneReport> {
    let root = Rng::new(seed);
    let featurize = |scenes: &[Scene], stream: u64| -> Result<(Tensor<T>, Vec<usize>)> {
        let ps = pairs::<T>(cfg, scenes)?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (i, (s, y)) in ps.iter().enumerate() {
            data.extend(features(cfg, model, store, s, &mut root.split(stream).split(i as u64))?);
            labels.push(*y);
        }
        Ok((Tensor::new([labels.len(), cfg.d_encoder], data)?, labels))
    };
    let (xt, yt) = featurize(train, 0)?;
    let (xe, ye) = featurize(eval, 1)?;
    let mut head_store = ParamStore::<T>::new();
    let head = Linear::new(&mut head_store, "match_head", cfg.d_encoder, 2, true, &mut root.split(2))?;
    let mut adam = AdamState::new(&head_store);
    let hyper = OptimConfig {
        lr: 1e-2,
        weight_decay: 0.0,
        ..OptimConfig::default()
    };
    let all = vec![true; yt.len()];
    let (mut first, mut last) = (f64::NAN, f64::NAN);
    for step in 0..steps {
        let mut g = Graph::new();
        let grads = {
            let mut ctx = Ctx::new(&mut g, &head_store, true, Rng::new(0));
            let x = ctx.g.constant(xt.clone())?;
            let logits = head.forward(&mut ctx, x)?;
            let loss = masked_cross_entropy(ctx.g, logits, &yt, &all, LossNorm::MaskedCount)?;
            let v = ctx.g.scalar(loss.value).as_f64();
            if step == 0 {
                first = v;
            }
            last = v;
            ctx.g.backward(loss.value)?;
            ctx.grads()
        };
        drop(g);
        adamw_step(&mut head_store, &grads, &mut adam, &hyper, hyper.lr)?;
    }
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &head_store, false, Rng::new(0));
    let x = ctx.g.constant(xe)?;
    let logits = head.forward(&mut ctx, x)?;
    let (hits, n) = super::metrics::token_hits(ctx.g.value(logits), &ye, usize::MAX)?;
    Ok(FinetuneReport {
        train_pairs: yt.len(),
        eval_pairs: ye.len(),
        first_loss: first,
        last_loss: last,
        eval_accuracy: hits as f64 / n.max(1) as f64,
    })
}
