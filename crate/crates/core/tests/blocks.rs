use m3et::nn::{grad_check_module, Ctx, CrossAttention, MambaBlock, ParamStore, TransformerLayer};
use m3et::{Graph, Rng, Tensor, Var};

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal())
}

/// Bump every parameter away from its initial value so checks see non-trivial weights.
fn perturb(store: &mut ParamStore<f64>, rng: &mut Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.normal() * scale;
        }
    }
}

fn eval<F>(store: &ParamStore<f64>, x: &Tensor<f64>, f: F) -> Tensor<f64>
where
    F: FnOnce(&mut Ctx<'_, f64>, Var) -> m3et::Result<Var>,
{
    let mut g = Graph::with_finite_audit();
    let mut ctx = Ctx::new(&mut g, store, false, Rng::new(0));
    let xv = ctx.g.constant(x.clone()).unwrap();
    let y = f(&mut ctx, xv).unwrap();
    ctx.g.value(y).clone()
}

fn weighted_sum(ctx: &mut Ctx<'_, f64>, y: Var, seed: u64) -> m3et::Result<Var> {
    let mut rng = Rng::new(seed);
    let w = randn(&mut rng, ctx.g.shape(y));
    let w = ctx.g.constant(w)?;
    let p = ctx.g.mul(y, w)?;
    ctx.g.sum(p)
}

#[test]
fn mamba_zero_weights_pass_through() {
    let mut rng = Rng::new(0);
    let mut store = ParamStore::<f64>::new();
    let block = MambaBlock::new(&mut store, "m", 8, 4, 0.1, None, &mut rng).unwrap();
    for id in [block.up.weight, block.down.weight] {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(shape)).unwrap();
    }
    let x = randn(&mut rng, &[5, 8]);
    let y = eval(&store, &x, |c, v| block.forward(c, v));
    assert_eq!(y, x);
}

#[test]
fn mamba_eval_is_deterministic() {
    let mut rng = Rng::new(1);
    let mut store = ParamStore::<f64>::new();
    let block = MambaBlock::new(&mut store, "m", 8, 4, 0.5, Some(3), &mut rng).unwrap();
    let x = randn(&mut rng, &[5, 8]);
    let a = eval(&store, &x, |c, v| block.forward(c, v));
    let b = eval(&store, &x, |c, v| block.forward(c, v));
    assert_eq!(a, b);
}

#[test]
fn mamba_dropout_expectation_matches_eval() {
    let mut rng = Rng::new(2);
    let mut store = ParamStore::<f64>::new();
    let block = MambaBlock::new(&mut store, "m", 6, 4, 0.1, None, &mut rng).unwrap();
    perturb(&mut store, &mut rng, 0.5);
    let x = randn(&mut rng, &[3, 6]);
    let reference = eval(&store, &x, |c, v| block.forward(c, v)).at(&[1, 2]);
    let n = 10_000;
    let samples: Vec<f64> = (0..n)
        .map(|seed| {
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&mut g, &store, true, Rng::new(seed));
            let xv = ctx.g.constant(x.clone()).unwrap();
            let y = block.forward(&mut ctx, xv).unwrap();
            ctx.g.value(y).at(&[1, 2])
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!(se > 0.0);
    assert!((mean - reference).abs() < 3.0 * se, "mean {mean} ref {reference} se {se}");
}

#[test]
fn mamba_rejects_wrong_width() {
    let mut rng = Rng::new(0);
    let mut store = ParamStore::<f64>::new();
    let block = MambaBlock::new(&mut store, "m", 8, 4, 0.1, None, &mut rng).unwrap();
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, false, Rng::new(0));
    let x = ctx.g.constant(Tensor::zeros([2, 7])).unwrap();
    assert!(block.forward(&mut ctx, x).is_err());
}

#[test]
fn cross_attention_identical_keys_average_values() {
    let mut rng = Rng::new(3);
    let mut store = ParamStore::<f64>::new();
    let ca = CrossAttention::new(&mut store, "ca", [6, 5, 4], 3, &mut rng).unwrap();
    perturb(&mut store, &mut rng, 0.3);
    let q = randn(&mut rng, &[2, 6]);
    let key_row = randn(&mut rng, &[1, 5]);
    let k = Tensor::from_fn([4, 5], |i| key_row.data()[i % 5]);
    let v = randn(&mut rng, &[4, 4]);
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, false, Rng::new(0));
    let (qv, kv, vv) = (
        ctx.g.constant(q).unwrap(),
        ctx.g.constant(k).unwrap(),
        ctx.g.constant(v.clone()).unwrap(),
    );
    let out = ca.forward(&mut ctx, qv, kv, vv).unwrap();
    let out = ctx.g.value(out).clone();
    let proj = v
        .matmul(store.get(ca.v.weight))
        .unwrap();
    let bias = store.get(ca.v.bias.unwrap());
    for col in 0..3 {
        let mean = (0..4).map(|r| proj.at(&[r, col]) + bias.data()[col]).sum::<f64>() / 4.0;
        for row in 0..2 {
            assert!((out.at(&[row, col]) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_attention_single_key_returns_value() {
    let mut rng = Rng::new(4);
    let mut store = ParamStore::<f64>::new();
    let ca = CrossAttention::new(&mut store, "ca", [4, 4, 4], 4, &mut rng).unwrap();
    let q = randn(&mut rng, &[3, 4]);
    let k = randn(&mut rng, &[1, 4]);
    let v = randn(&mut rng, &[1, 4]);
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, false, Rng::new(0));
    let (qv, kv, vv) = (ctx.g.constant(q).unwrap(), ctx.g.constant(k).unwrap(), ctx.g.constant(v.clone()).unwrap());
    let out = ca.forward(&mut ctx, qv, kv, vv).unwrap();
    let want = v.matmul(store.get(ca.v.weight)).unwrap();
    for r in 0..3 {
        for c in 0..4 {
            assert_eq!(ctx.g.value(out).at(&[r, c]), want.at(&[0, c]));
        }
    }
}

#[test]
fn cross_attention_matches_explicit_formula() {
    let mut rng = Rng::new(5);
    let mut store = ParamStore::<f64>::new();
    let ca = CrossAttention::new(&mut store, "ca", [5, 4, 3], 6, &mut rng).unwrap();
    perturb(&mut store, &mut rng, 0.4);
    let q = randn(&mut rng, &[3, 5]);
    let k = randn(&mut rng, &[4, 4]);
    let v = randn(&mut rng, &[4, 3]);
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, false, Rng::new(0));
    let (qv, kv, vv) = (
        ctx.g.constant(q.clone()).unwrap(),
        ctx.g.constant(k.clone()).unwrap(),
        ctx.g.constant(v.clone()).unwrap(),
    );
    let (out, attn) = ca.forward_with_weights(&mut ctx, qv, kv, vv).unwrap();

    // independent reference with plain loops
    let affine = |x: &Tensor<f64>, lin: &m3et::nn::Linear| -> Vec<Vec<f64>> {
        let w = store.get(lin.weight);
        let b = store.get(lin.bias.unwrap());
        (0..x.shape()[0])
            .map(|r| {
                (0..lin.d_out)
                    .map(|o| b.data()[o] + (0..lin.d_in).map(|i| x.at(&[r, i]) * w.at(&[i, o])).sum::<f64>())
                    .collect()
            })
            .collect()
    };
    let (qp, kp, vp) = (affine(&q, &ca.q), affine(&k, &ca.k), affine(&v, &ca.v));
    for r in 0..3 {
        let scores: Vec<f64> = kp
            .iter()
            .map(|kr| qp[r].iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / 6f64.sqrt())
            .collect();
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
        let p: Vec<f64> = scores.iter().map(|s| (s - mx).exp() / z).collect();
        let row_sum: f64 = (0..4).map(|j| ctx.g.value(attn).at(&[r, j])).sum();
        assert!((row_sum - 1.0).abs() < 1e-6);
        for c in 0..6 {
            let want: f64 = (0..4).map(|j| p[j] * vp[j][c]).sum();
            assert!((ctx.g.value(out).at(&[r, c]) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_attention_rejects_mismatched_key_value_counts() {
    let mut rng = Rng::new(6);
    let mut store = ParamStore::<f64>::new();
    let ca = CrossAttention::new(&mut store, "ca", [4, 4, 4], 4, &mut rng).unwrap();
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, false, Rng::new(0));
    let q = ctx.g.constant(Tensor::zeros([2, 4])).unwrap();
    let k = ctx.g.constant(Tensor::zeros([3, 4])).unwrap();
    let v = ctx.g.constant(Tensor::zeros([5, 4])).unwrap();
    let msg = ca.forward(&mut ctx, q, k, v).unwrap_err().to_string();
    assert!(msg.contains("3 keys") && msg.contains("5 values"), "{msg}");
}

#[test]
fn transformer_zero_output_projections_is_identity() {
    let mut rng = Rng::new(7);
    let mut store = ParamStore::<f64>::new();
    let layer = TransformerLayer::new(&mut store, "t", 8, 2, 4, 0.1, &mut rng).unwrap();
    for id in [layer.attn.proj.weight, layer.fc2.weight] {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(shape)).unwrap();
    }
    let x = randn(&mut rng, &[4, 8]);
    assert_eq!(eval(&store, &x, |c, v| layer.forward(c, v)), x);
}

#[test]
fn transformer_attention_rows_are_stochastic() {
    let mut rng = Rng::new(8);
    let mut store = ParamStore::<f64>::new();
    let layer = TransformerLayer::new(&mut store, "t", 12, 3, 4, 0.1, &mut rng).unwrap();
    perturb(&mut store, &mut rng, 0.5);
    let x = randn(&mut rng, &[7, 12]);
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, false, Rng::new(0));
    let xv = ctx.g.constant(x).unwrap();
    let (_, weights) = layer.forward_with_weights(&mut ctx, xv).unwrap();
    assert_eq!(weights.len(), 3);
    for w in weights {
        let a = ctx.g.value(w);
        for r in 0..7 {
            assert!(a.row(r).iter().all(|&p| p >= 0.0));
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn block_gradients() {
    let mut rng = Rng::new(10);

    let mut store = ParamStore::<f64>::new();
    let layer = TransformerLayer::new(&mut store, "t", 4, 2, 4, 0.1, &mut rng).unwrap();
    perturb(&mut store, &mut rng, 0.3);
    let x = randn(&mut rng, &[2, 4]);
    let rep = grad_check_module(&store, &[x], |c, v| {
        let y = layer.forward(c, v[0])?;
        weighted_sum(c, y, 1)
    }, None, 0)
    .unwrap();
    assert!(rep.max_rel_error < 1e-4, "transformer {rep:?}");

    for state in [None, Some(2)] {
        let mut store = ParamStore::<f64>::new();
        let block = MambaBlock::new(&mut store, "m", 5, 3, 0.1, state, &mut rng).unwrap();
        perturb(&mut store, &mut rng, 0.3);
        let x = randn(&mut rng, &[4, 5]);
        let rep = grad_check_module(&store, &[x], |c, v| {
            let y = block.forward(c, v[0])?;
            weighted_sum(c, y, 2)
        }, None, 0)
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "mamba {state:?} {rep:?}");
    }

    let mut store = ParamStore::<f64>::new();
    let ca = CrossAttention::new(&mut store, "ca", [4, 3, 5], 3, &mut rng).unwrap();
    perturb(&mut store, &mut rng, 0.3);
    let inputs = [randn(&mut rng, &[2, 4]), randn(&mut rng, &[3, 3]), randn(&mut rng, &[3, 5])];
    let rep = grad_check_module(&store, &inputs, |c, v| {
        let y = ca.forward(c, v[0], v[1], v[2])?;
        weighted_sum(c, y, 3)
    }, None, 0)
    .unwrap();
    assert!(rep.max_rel_error < 1e-4, "cross attention {rep:?}");
}
