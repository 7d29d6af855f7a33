//! Finite-difference gradient checks over every block and the toy model.

use crate::error::Result;
use crate::model::{Ablation, M3et, ModelConfig};
use crate::nn::{grad_check_module, CrossAttention, Ctx, LayerNorm, Linear, MambaBlock, ParamStore, SelfAttention, TransformerLayer};
use crate::tensor::{Rng, Tensor, Var};

use super::synth::generate_synthetic;

/// Relative-error bound used by the suite.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOL
    }
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal())
}

fn perturb(store: &mut ParamStore<f64>, rng: &mut Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
}

/// `Σ w ⊙ y` with fixed random `w`, so every output element matters.
fn project(ctx: &mut Ctx<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let w = randn(&mut Rng::new(seed), ctx.g.shape(y));
    let w = ctx.g.constant(w)?;
    let p = ctx.g.mul(y, w)?;
    ctx.g.sum(p)
}

fn entry<F>(name: &str, store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F, per_tensor: Option<usize>) -> Result<GradCheckEntry>
where
    F: Fn(&mut Ctx<'_, f64>, &[Var]) -> Result<Var>,
{
    let r = grad_check_module(store, inputs, f, per_tensor, 0)?;
    Ok(GradCheckEntry {
        name: name.to_string(),
        max_rel_error: r.max_rel_error,
        checked: r.checked,
    })
}

/// Every block at small width, then the toy model and its ablations through the full training loss.
pub fn gradcheck_suite(model_per_tensor: usize) -> Result<Vec<GradCheckEntry>> {
    let mut rng = Rng::new(10);
    let mut out = Vec::new();

    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, "linear", 3, 4, true, &mut rng)?;
    perturb(&mut s, &mut rng);
    let x = randn(&mut rng, &[2, 3]);
    out.push(entry("linear", &s, &[x], |c, v| {
        let y = lin.forward(c, v[0])?;
        project(c, y, 1)
    }, None)?);

    let mut s = ParamStore::new();
    let ln = LayerNorm::new(&mut s, "norm", 5)?;
    perturb(&mut s, &mut rng);
    let x = randn(&mut rng, &[3, 5]);
    out.push(entry("layernorm", &s, &[x], |c, v| {
        let y = ln.forward(c, v[0])?;
        project(c, y, 2)
    }, None)?);

    let mut s = ParamStore::new();
    let sa = SelfAttention::new(&mut s, "attn", 4, 2, &mut rng)?;
    perturb(&mut s, &mut rng);
    let x = randn(&mut rng, &[3, 4]);
    out.push(entry("self_attention", &s, &[x], |c, v| {
        let y = sa.forward(c, v[0])?;
        project(c, y, 3)
    }, None)?);

    let mut s = ParamStore::new();
    let ca = CrossAttention::new(&mut s, "xattn", [4, 3, 5], 3, &mut rng)?;
    perturb(&mut s, &mut rng);
    let xs = [randn(&mut rng, &[2, 4]), randn(&mut rng, &[3, 3]), randn(&mut rng, &[3, 5])];
    out.push(entry("cross_attention", &s, &xs, |c, v| {
        let y = ca.forward(c, v[0], v[1], v[2])?;
        project(c, y, 4)
    }, None)?);

    let mut s = ParamStore::new();
    let tl = TransformerLayer::new(&mut s, "layer", 4, 2, 4, 0.1, &mut rng)?;
    perturb(&mut s, &mut rng);
    let x = randn(&mut rng, &[2, 4]);
    out.push(entry("transformer_layer", &s, &[x], |c, v| {
        let y = tl.forward(c, v[0])?;
        project(c, y, 5)
    }, None)?);

    for (name, state) in [("mamba_block", None), ("mamba_block_ssm", Some(2))] {
        let mut s = ParamStore::new();
        let mb = MambaBlock::new(&mut s, "mamba", 5, 3, 0.1, state, &mut rng)?;
        perturb(&mut s, &mut rng);
        let x = randn(&mut rng, &[4, 5]);
        out.push(entry(name, &s, &[x], |c, v| {
            let y = mb.forward(c, v[0])?;
            project(c, y, 6)
        }, None)?);
    }

    for a in Ablation::ALL {
        let cfg = ModelConfig::toy().ablate(a);
        out.push(model_entry(&format!("toy_model_{}", a.name()), &cfg, model_per_tensor)?);
    }
    Ok(out)
}

/// The batch-mean training loss of `cfg` over two synthetic samples.
pub fn model_entry(name: &str, cfg: &ModelConfig, per_tensor: usize) -> Result<GradCheckEntry> {
    let (model, store) = M3et::init::<f64>(cfg, 21)?;
    let samples = generate_synthetic(4, 2, cfg.image_size)?
        .iter()
        .map(|s| s.to_sample(cfg))
        .collect::<Result<Vec<_>>>()?;
    let root = Rng::new(8);
    let plans = samples
        .iter()
        .enumerate()
        .map(|(i, s)| cfg.sample_plan(&s.spans, &mut root.split(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    entry(name, &store, &[], |ctx, _| {
        Ok(model.forward_train(ctx, &samples, &plans, &cfg.loss_weights)?.total)
    }, Some(per_tensor))
}
