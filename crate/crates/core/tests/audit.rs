use m3et::audit::{audit_config, calibrate_semseg_embed, compare, count_built};
use m3et::model::{Ablation, M3et, ModelConfig};

fn check_built(cfg: &ModelConfig) {
    let report = audit_config(cfg, "built").unwrap();
    let (_, store) = M3et::init::<f32>(cfg, 0).unwrap();
    let built = count_built(&store, &report).unwrap();
    for (b, (name, n)) in report.blocks.iter().zip(&built) {
        assert_eq!(&b.name, name);
        assert_eq!(b.params, *n, "block {name}");
    }
    assert_eq!(report.total_params(), store.numel() as u64);
}

#[test]
fn built_model_matches_config_count() {
    for base in [ModelConfig::toy(), ModelConfig::desk()] {
        for a in Ablation::ALL {
            check_built(&base.ablate(a));
        }
        check_built(&base.clone().with_compact_decoder());
        check_built(&ModelConfig {
            mamba_inner_ssm: true,
            ..base.clone()
        });
    }
}

#[test]
fn full_scale_config_builds_to_its_count() {
    check_built(&ModelConfig::full_scale());
}

#[test]
fn full_geometry_figures() {
    let full = audit_config(&ModelConfig::full_scale(), "full").unwrap();
    let nm = audit_config(&ModelConfig::full_scale().ablate(Ablation::NoMamba), "no_mamba").unwrap();
    let c = compare(&nm, &full).unwrap();
    println!("{}", full.table());
    println!("{}", c.summary());
    for a in Ablation::ALL {
        let r = audit_config(&ModelConfig::full_scale().ablate(a), a.name()).unwrap();
        println!("{:<20} params {:>12} flops {:>14}", a.name(), r.total_params(), r.total_flops());
    }
    let (e, t) = calibrate_semseg_embed(&ModelConfig::full_scale(), 65_390_000, 64).unwrap();
    println!("calibrated width {e} total {t}");
    assert!(nm.total_flops() > full.total_flops());
    assert!(nm.total_params() > full.total_params());
}
