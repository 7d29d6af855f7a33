use m3et::harness::synth::generate_synthetic;
use m3et::model::{Ablation, M3et, ModelConfig};
use m3et::nn::grad_check_module;
use m3et::Rng;

fn check(cfg: &ModelConfig, per_tensor: usize) -> f64 {
    let (model, store) = M3et::init::<f64>(cfg, 21).unwrap();
    let samples: Vec<_> = generate_synthetic(4, 2, cfg.image_size)
        .unwrap()
        .iter()
        .map(|s| s.to_sample(cfg).unwrap())
        .collect();
    let root = Rng::new(8);
    let plans: Vec<_> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| cfg.sample_plan(&s.spans, &mut root.split(i as u64)).unwrap())
        .collect();
    let rep = grad_check_module(
        &store,
        &[],
        |ctx, _| Ok(model.forward_train(ctx, &samples, &plans, &cfg.loss_weights)?.total),
        Some(per_tensor),
        5,
    )
    .unwrap();
    assert!(rep.checked > 0);
    rep.max_rel_error
}

#[test]
fn toy_model_matches_finite_differences() {
    let e = check(&ModelConfig::toy(), 6);
    assert!(e < 1e-4, "max relative error {e}");
}

#[test]
fn toy_ablations_match_finite_differences() {
    for a in [Ablation::NoText, Ablation::NoMamba, Ablation::NoCrossAttention] {
        let e = check(&ModelConfig::toy().ablate(a), 3);
        assert!(e < 1e-4, "{}: max relative error {e}", a.name());
    }
    let ssm = ModelConfig {
        mamba_inner_ssm: true,
        ..ModelConfig::toy()
    };
    let e = check(&ssm, 3);
    assert!(e < 1e-4, "inner ssm: max relative error {e}");
}
