use std::sync::OnceLock;

use proptest::prelude::*;

use super::*;
use crate::cloud::{synth_dataset, Dataset, Split, SynthSpec};
use crate::model::{train, Hyper, ModelKind, Optimizer, TrainConfig};

struct Fixture {
    pn: Model,
    dg: Model,
    test: Dataset,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = SynthSpec::new(4, 8, 64, 21);
        let data = synth_dataset(&spec, Split::Train).unwrap();
        let test = synth_dataset(&SynthSpec::new(4, 2, 64, 21), Split::Test).unwrap();
        let cfg = TrainConfig {
            epochs: 12,
            batch_size: 8,
            learning_rate: 0.005,
            optimizer: Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            schedule: Default::default(),
            seed: 4,
        };
        let pn = Hyper {
            point_widths: vec![16, 32],
            head_widths: vec![16],
            ..Hyper::pointnet(4)
        };
        let dg = Hyper {
            edge_widths: vec![8],
            point_widths: vec![16],
            head_widths: vec![16],
            knn_k: 4,
            ..Hyper::dgcnn(4)
        };
        Fixture {
            pn: train(&data, &pn, &cfg).unwrap().0,
            dg: train(&data, &dg, &cfg).unwrap().0,
            test,
        }
    })
}

fn quick() -> AttackConfig {
    AttackConfig {
        iterations: 8,
        binary_steps: 2,
        inner_iterations: 10,
        ..AttackConfig::default()
    }
}

fn small_budget() -> AttackBudget {
    AttackBudget {
        n_add: 8,
        n_drop: 12,
        ..AttackBudget::default()
    }
}

fn run(name: &str, model: &Model, item: usize, budget: &AttackBudget, cfg: &AttackConfig) -> AdvExample {
    let f = fixture();
    let reg = AttackRegistry::default();
    reg.get(name)
        .unwrap()
        .generate(&AttackInput {
            surrogate: Surrogate::new("s", model),
            item,
            target: &f.test.items[item],
            budget,
            config: cfg,
            seed: 77 + item as u64,
        })
        .unwrap()
}

fn bits(c: &PointCloud) -> Vec<u64> {
    c.flat().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn registry_knows_every_attack() {
    let reg = AttackRegistry::default();
    assert_eq!(reg.names(), vec!["add", "cw", "drop", "fgm", "ifgm", "knn", "pgd"]);
    assert!(matches!(reg.get("sia"), Err(Error::Config(_))));
}

#[test]
fn every_attack_respects_its_budget_on_both_architectures() {
    let f = fixture();
    for model in [&f.pn, &f.dg] {
        for name in AttackRegistry::default().names() {
            for item in 0..3 {
                let ex = run(name, model, item, &small_budget(), &quick());
                check_budget(&ex).unwrap();
                let pred = model.predict(&ex.adversarial).unwrap();
                assert_eq!(ex.surrogate_success, pred != ex.original.label, "{name}");
            }
        }
    }
}

#[test]
fn zero_budgets_return_the_original() {
    let f = fixture();
    let zero = AttackBudget {
        linf_radius: 0.0,
        n_add: 0,
        n_drop: 0,
        max_queries: None,
    };
    for name in ["fgm", "ifgm", "pgd", "cw", "knn", "add", "drop"] {
        let ex = run(name, &f.pn, 1, &zero, &quick());
        assert_eq!(bits(&ex.adversarial), bits(&ex.original.cloud), "{name}");
    }
}

#[test]
fn fgm_moves_every_coordinate_by_rho_or_zero() {
    let f = fixture();
    let ex = run("fgm", &f.pn, 0, &AttackBudget::default(), &quick());
    let rho = 0.16;
    for (a, o) in ex.adversarial.flat().iter().zip(ex.original.cloud.flat()) {
        let d = (a - o).abs();
        assert!(d == 0.0 || (d - rho).abs() < 1e-15, "{d}");
    }
}

#[test]
fn ifgm_single_full_step_is_fgm() {
    let f = fixture();
    let b = AttackBudget::default();
    let cfg = AttackConfig {
        iterations: 1,
        step: Some(b.linf_radius),
        ..quick()
    };
    for model in [&f.pn, &f.dg] {
        for item in 0..4 {
            let a = run("fgm", model, item, &b, &cfg);
            let i = run("ifgm", model, item, &b, &cfg);
            assert_eq!(bits(&a.adversarial), bits(&i.adversarial));
        }
    }
}

#[test]
fn knn_without_weight_is_cw() {
    let f = fixture();
    let cfg = AttackConfig {
        knn_weight: 0.0,
        ..quick()
    };
    for item in 0..3 {
        let a = run("cw", &f.pn, item, &AttackBudget::default(), &cfg);
        let b = run("knn", &f.pn, item, &AttackBudget::default(), &cfg);
        assert_eq!(bits(&a.adversarial), bits(&b.adversarial));
        assert_eq!(a.queries, b.queries);
    }
}

#[test]
fn attacks_are_deterministic() {
    let f = fixture();
    for name in ["pgd", "knn", "add", "drop"] {
        let a = run(name, &f.dg, 2, &small_budget(), &quick());
        let b = run(name, &f.dg, 2, &small_budget(), &quick());
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn query_cap_is_honoured_and_recorded() {
    let f = fixture();
    for cap in [1, 2, 5] {
        let b = AttackBudget {
            max_queries: Some(cap),
            ..small_budget()
        };
        for name in AttackRegistry::default().names() {
            let ex = run(name, &f.pn, 0, &b, &quick());
            assert!(ex.queries <= cap, "{name} used {} > {cap}", ex.queries);
            check_budget(&ex).unwrap();
        }
    }
    let ex = run("ifgm", &f.pn, 0, &small_budget(), &quick());
    assert!(ex.queries >= 2 && ex.queries <= quick().iterations + 1);
}

#[test]
fn cw_with_huge_lambda_stays_near_the_original() {
    let f = fixture();
    let cfg = AttackConfig {
        lambda: 1e9,
        binary_steps: 1,
        ..quick()
    };
    let ex = run("cw", &f.pn, 0, &AttackBudget::default(), &cfg);
    let worst = ex
        .adversarial
        .flat()
        .iter()
        .zip(ex.original.cloud.flat())
        .map(|(a, o)| (a - o).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 3.0 * cfg.learning_rate, "{worst}");
}

#[test]
fn drop_rejects_oversized_budgets() {
    let f = fixture();
    let reg = AttackRegistry::default();
    let b = AttackBudget {
        n_drop: 64,
        ..AttackBudget::default()
    };
    let r = reg.get("drop").unwrap().generate(&AttackInput {
        surrogate: Surrogate::new("s", &f.pn),
        item: 0,
        target: &f.test.items[0],
        budget: &b,
        config: &quick(),
        seed: 0,
    });
    assert!(matches!(r, Err(Error::Precondition(_))));
}

#[test]
fn saliency_matches_hand_computation() {
    // Median center of these three points is (1, 0, 0).
    let pts = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 3.0, 0.0, 0.0];
    let g = [1.0, 0.0, 0.0, 5.0, 5.0, 5.0, -1.0, 0.0, 0.0];
    let s = drop_saliency(&pts, &g, 1.0);
    assert_eq!(s, vec![1.0, 0.0, 4.0]);
}

#[test]
fn adversarial_sets_round_trip() {
    let f = fixture();
    let examples: Vec<AdvExample> = ["pgd", "add", "drop"]
        .iter()
        .enumerate()
        .map(|(i, n)| run(n, &f.pn, i, &small_budget(), &quick()))
        .collect();
    for ex in &examples {
        let dir = tempfile::tempdir().unwrap();
        save_adv_set(dir.path(), std::slice::from_ref(ex)).unwrap();
        assert_eq!(&load_adv_set(dir.path()).unwrap()[0], ex);
    }
}

#[test]
fn attack_set_matches_sequential_generation() {
    let f = fixture();
    let reg = AttackRegistry::default();
    let cfg = quick();
    let b = small_budget();
    let items = &f.test.items[..4];
    let set = attack_set(reg.get("pgd").unwrap(), Surrogate::new("s", &f.pn), items, &b, &cfg, 3).unwrap();
    for (i, ex) in set.iter().enumerate() {
        let one = reg
            .get("pgd")
            .unwrap()
            .generate(&AttackInput {
                surrogate: Surrogate::new("s", &f.pn),
                item: i,
                target: &items[i],
                budget: &b,
                config: &cfg,
                seed: derive_seed(cfg.seed, 3, i as u64),
            })
            .unwrap();
        assert_eq!(ex, &one);
    }
}

#[test]
fn surrogate_kind_matters_for_add_init() {
    let f = fixture();
    assert_eq!(f.pn.kind(), ModelKind::PointNetMini);
    // Both architectures produce a valid add example.
    for m in [&f.pn, &f.dg] {
        check_budget(&run("add", m, 3, &small_budget(), &quick())).unwrap();
    }
}

proptest! {
    #[test]
    fn projection_is_exact(
        orig in prop::collection::vec(-100.0f64..100.0, 1..30),
        shift in prop::collection::vec(-1.0f64..1.0, 30),
        rho in 0.0f64..0.5,
    ) {
        let mut x: Vec<f64> = orig.iter().zip(&shift).map(|(o, s)| o + s).collect();
        project_linf(&mut x, &orig, rho);
        for (a, o) in x.iter().zip(&orig) {
            prop_assert!((a - o).abs() <= rho);
        }
    }

    #[test]
    fn projection_keeps_interior_points(
        orig in prop::collection::vec(-1.0f64..1.0, 1..30),
        frac in 0.0f64..0.99,
    ) {
        let rho = 0.16;
        let mut x: Vec<f64> = orig.iter().map(|o| o + frac * rho).collect();
        let before = x.clone();
        project_linf(&mut x, &orig, rho);
        prop_assert_eq!(x, before);
    }
}
