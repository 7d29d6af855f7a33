use m3et::nn::{grad_check_module, Ctx, ParamStore};
use m3et::ssm::{
    discretize, selective_scan_ref, ssd_apply, ssd_materialize, ssd_materialize_steps, ssm_conv, ssm_kernel, ssm_scan,
    SelectiveSsm, SsmParams, StepParams,
};
use m3et::{Graph, Rng, Tensor};
use proptest::prelude::*;

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn static_params() -> impl Strategy<Value = (SsmParams<f64>, Vec<f64>)> {
    (1usize..=8, 1usize..=64).prop_flat_map(|(n, l)| {
        (
            prop::collection::vec(-3.0f64..-0.01, n),
            prop::collection::vec(-1.0f64..1.0, n),
            prop::collection::vec(-1.0f64..1.0, n),
            0.01f64..1.0,
            prop::collection::vec(-1.0f64..1.0, l),
        )
            .prop_map(|(a, b, c, delta, x)| (SsmParams { a, b, c, delta }, x))
    })
}

fn step_params() -> impl Strategy<Value = (StepParams<f64>, Vec<f64>)> {
    (1usize..=8, 1usize..=64).prop_flat_map(|(n, l)| {
        (
            prop::collection::vec(-3.0f64..0.0, n),
            prop::collection::vec(0.01f64..1.0, l),
            prop::collection::vec(-1.0f64..1.0, l * n),
            prop::collection::vec(-1.0f64..1.0, l * n),
            prop::collection::vec(-1.0f64..1.0, l),
        )
            .prop_map(move |(a, delta, b, c, x)| {
                (
                    StepParams {
                        a,
                        delta,
                        b: Tensor::new([l, n], b).unwrap(),
                        c: Tensor::new([l, n], c).unwrap(),
                    },
                    x,
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn three_static_forms_agree((p, x) in static_params()) {
        let scan = ssm_scan(&x, &p).unwrap();
        let conv = ssm_conv(&x, &p).unwrap();
        let m = ssd_materialize(&p, x.len()).unwrap();
        let ssd = ssd_apply(&m, &x).unwrap();
        prop_assert!(max_diff(&scan, &conv) < 1e-10);
        prop_assert!(max_diff(&scan, &ssd) < 1e-10);
    }

    #[test]
    fn per_step_matrix_matches_recurrence((p, x) in step_params()) {
        let scan = selective_scan_ref(&x, &p).unwrap();
        let m = ssd_materialize_steps(&p).unwrap();
        prop_assert!(max_diff(&scan, &ssd_apply(&m, &x).unwrap()) < 1e-10);
        for j in 0..x.len() {
            for i in j + 1..x.len() {
                prop_assert_eq!(m.at(&[j, i]), 0.0);
            }
        }
    }

    #[test]
    fn negative_a_is_stable((p, _x) in static_params()) {
        let d = discretize(&p).unwrap();
        prop_assert!(d.a_bar.iter().all(|&a| a > 0.0 && a < 1.0));
        // per-state impulse response shrinks in magnitude
        for s in 0..p.state_size() {
            let single = SsmParams { a: vec![p.a[s]], b: vec![p.b[s]], c: vec![p.c[s]], delta: p.delta };
            let k = ssm_kernel(&single, 16).unwrap();
            for w in k.windows(2) {
                prop_assert!(w[1].abs() <= w[0].abs());
            }
        }
    }

    #[test]
    fn static_is_constant_step_special_case((p, x) in static_params()) {
        let l = x.len();
        let n = p.state_size();
        let steps = StepParams {
            a: p.a.clone(),
            delta: vec![p.delta; l],
            b: Tensor::from_fn([l, n], |i| p.b[i % n]),
            c: Tensor::from_fn([l, n], |i| p.c[i % n]),
        };
        let a = ssm_scan(&x, &p).unwrap();
        let b = selective_scan_ref(&x, &steps).unwrap();
        prop_assert!(max_diff(&a, &b) < 1e-12);
    }
}

/// The graph op over `D` channels equals `D` independent per-step scans.
#[test]
fn graph_scan_matches_per_channel_matrix_form() {
    let mut rng = Rng::new(9);
    for _ in 0..100 {
        let (l, d, n) = (1 + rng.below(32), 1 + rng.below(4), 1 + rng.below(8));
        let x = Tensor::<f64>::from_fn([l, d], |_| rng.normal());
        let delta = Tensor::<f64>::from_fn([l, d], |_| 0.01 + rng.uniform());
        let a = Tensor::<f64>::from_fn([d, n], |_| -3.0 * rng.uniform());
        let b = Tensor::<f64>::from_fn([l, n], |_| rng.normal());
        let c = Tensor::<f64>::from_fn([l, n], |_| rng.normal());
        let mut g = Graph::new();
        let vs: Vec<_> = [&x, &delta, &a, &b, &c].iter().map(|t| g.constant((*t).clone()).unwrap()).collect();
        let y = g.selective_scan(vs[0], vs[1], vs[2], vs[3], vs[4]).unwrap();
        let y = g.value(y).clone();
        for ch in 0..d {
            let steps = StepParams {
                a: a.row(ch).to_vec(),
                delta: (0..l).map(|t| delta.at(&[t, ch])).collect(),
                b: b.clone(),
                c: c.clone(),
            };
            let xs: Vec<f64> = (0..l).map(|t| x.at(&[t, ch])).collect();
            let m = ssd_materialize_steps(&steps).unwrap();
            let want = ssd_apply(&m, &xs).unwrap();
            let got: Vec<f64> = (0..l).map(|t| y.at(&[t, ch])).collect();
            assert!(max_diff(&got, &want) < 1e-10);
        }
    }
}

#[test]
fn selective_module_reduces_to_static() {
    let mut rng = Rng::new(1);
    let mut store = ParamStore::<f64>::new();
    let ssm = SelectiveSsm::new(&mut store, "ssm", 3, 2, &mut rng).unwrap();
    for lin in [&ssm.s_b, &ssm.s_c, &ssm.s_delta] {
        store.set(lin.weight, Tensor::zeros(store.get(lin.weight).shape().to_vec())).unwrap();
    }
    store.set(ssm.s_b.bias.unwrap(), Tensor::from_f64([2], &[0.5, -1.0]).unwrap()).unwrap();
    store.set(ssm.s_c.bias.unwrap(), Tensor::from_f64([2], &[2.0, 0.25]).unwrap()).unwrap();
    let x = Tensor::<f64>::from_fn([7, 3], |_| rng.normal());
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, false, Rng::new(0));
    let xv = ctx.g.constant(x.clone()).unwrap();
    let y = ssm.forward(&mut ctx, xv).unwrap();
    let y = ctx.g.value(y).clone();
    // softplus(P) with zero s_delta weight and bias
    let delta = (1.0 + store.get(ssm.p).data()[0].exp()).ln();
    assert!((delta - 0.1).abs() < 1e-12);
    for ch in 0..3 {
        let p = SsmParams {
            a: vec![-1.0, -2.0],
            b: vec![0.5, -1.0],
            c: vec![2.0, 0.25],
            delta,
        };
        let xs: Vec<f64> = (0..7).map(|t| x.at(&[t, ch])).collect();
        let want = ssm_scan(&xs, &p).unwrap();
        let got: Vec<f64> = (0..7).map(|t| y.at(&[t, ch])).collect();
        assert!(max_diff(&got, &want) < 1e-12);
    }
}

#[test]
fn step_sizes_positive_for_extreme_inputs() {
    let mut rng = Rng::new(2);
    let mut store = ParamStore::<f64>::new();
    let ssm = SelectiveSsm::new(&mut store, "ssm", 4, 3, &mut rng).unwrap();
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, false, Rng::new(0));
    let x = ctx.g.constant(Tensor::from_fn([6, 4], |i| (i as f64 - 12.0) * 300.0)).unwrap();
    let d = ssm.step_sizes(&mut ctx, x).unwrap();
    assert!(ctx.g.value(d).data().iter().all(|&v| v > 0.0));
}

#[test]
fn selective_module_gradients() {
    let mut rng = Rng::new(3);
    let mut store = ParamStore::<f64>::new();
    let ssm = SelectiveSsm::new(&mut store, "ssm", 3, 2, &mut rng).unwrap();
    // larger weights so the input dependence is visible to the check
    for lin in [&ssm.s_b, &ssm.s_c, &ssm.s_delta] {
        let shape = store.get(lin.weight).shape().to_vec();
        store.set(lin.weight, Tensor::from_fn(shape, |_| rng.normal() * 0.5)).unwrap();
    }
    let x = Tensor::from_fn([4, 3], |_| rng.normal());
    let w = Tensor::from_fn([4, 3], |_| rng.normal());
    let rep = grad_check_module(
        &store,
        &[x],
        |ctx, v| {
            let y = ssm.forward(ctx, v[0])?;
            let w = ctx.g.constant(w.clone())?;
            let p = ctx.g.mul(y, w)?;
            ctx.g.sum(p)
        },
        None,
        0,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
}
