use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::attack::{AttackBudget, AttackConfig};
use crate::cloud::{synth_dataset, Dataset, LabeledCloud, Split, SynthSpec};
use crate::error::Error;
use crate::model::{Hyper, Optimizer, TrainConfig};
use crate::seed::rng;

fn sphere_with_outliers(seed: u64) -> (PointCloud, Vec<usize>) {
    let mut r = rng(seed);
    let mut pts = Vec::new();
    for _ in 0..100 {
        let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut r));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        pts.push(v.map(|c| c / n));
    }
    let mut planted = Vec::new();
    for i in 0..10 {
        let t = i as f64 * 0.6283;
        let phi = (i as f64 * 0.37).sin();
        pts.push([10.0 * t.cos() * phi.cos(), 10.0 * t.sin() * phi.cos(), 10.0 * phi.sin()]);
        planted.push(100 + i);
    }
    (PointCloud::from_points(&pts).unwrap(), planted)
}

/// Straightforward re-implementation used as the oracle.
fn sor_oracle(c: &PointCloud, k: usize, alpha: f64) -> Vec<usize> {
    let pts: Vec<[f64; 3]> = c.points().collect();
    let n = pts.len();
    let d: Vec<f64> = (0..n)
        .map(|i| {
            let mut ds: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let (a, b) = (pts[i], pts[j]);
                    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
                })
                .collect();
            ds.sort_by(f64::total_cmp);
            ds[..k].iter().sum::<f64>() / k as f64
        })
        .collect();
    let mu = d.iter().sum::<f64>() / n as f64;
    let sd = (d.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    (0..n).filter(|&i| d[i] > mu + alpha * sd).collect()
}

#[test]
fn sor_removes_exactly_the_planted_outliers() {
    for seed in 0..5 {
        let (c, planted) = sphere_with_outliers(seed);
        assert_eq!(sor_oracle(&c, 2, 1.1), planted);
        let out = sor(&c, 2, 1.1).unwrap();
        assert_eq!(out.len(), 100);
        let kept: Vec<usize> = (0..100).collect();
        assert_eq!(out, c.select(&kept).unwrap());
    }
}

#[test]
fn sor_keeps_uniform_spacing() {
    // Every cube corner has three neighbours at distance exactly 1, so all
    // d_i are equal and sigma is 0.
    let corners: Vec<[f64; 3]> = (0..8)
        .map(|i| [(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64])
        .collect();
    let c = PointCloud::from_points(&corners).unwrap();
    assert_eq!(sor(&c, 2, 1.1).unwrap(), c);
    assert_eq!(sor(&c, 3, 0.0).unwrap(), c);
    assert!(matches!(sor(&c, 8, 1.1), Err(Error::Precondition(_))));
}

#[test]
fn sor_never_empties() {
    let c = PointCloud::from_points(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]).unwrap();
    let out = sor(&c, 1, -10.0).unwrap();
    assert_eq!(out.len(), 1);
}

#[test]
fn srs_examples() {
    let spec = SynthSpec::new(2, 1, 1024, 0);
    let c = synth_dataset(&spec, Split::Train).unwrap().items[0].cloud.clone();
    assert_eq!(srs(&c, 0, 3).unwrap(), c);
    let a = srs(&c, 500, 3).unwrap();
    assert_eq!(a.len(), 524);
    assert!(a.is_subset_of(&c));
    assert_eq!(a, srs(&c, 500, 3).unwrap());
    assert_ne!(a, srs(&c, 500, 4).unwrap());
    assert!(srs(&c, 1024, 3).is_err());
}

#[test]
fn registry_builds_stages_from_params() {
    let reg = PreprocessRegistry::default();
    let s = reg.build("sor", &serde_json::json!({"k": 3})).unwrap();
    assert_eq!(s.name(), "sor");
    assert!(reg.build("srs", &serde_json::Value::Null).is_ok());
    assert!(matches!(reg.build("dup-net", &serde_json::Value::Null), Err(Error::Config(_))));
    assert!(matches!(reg.build("sor", &serde_json::json!({"q": 1})), Err(Error::Config(_))));
}

struct Collapse;

impl Reconstruction for Collapse {
    fn name(&self) -> String {
        "collapse".into()
    }
    fn reconstruct(&self, _cloud: &PointCloud) -> crate::Result<Vec<f64>> {
        Ok(Vec::new())
    }
}

fn tiny() -> (Dataset, Hyper, TrainConfig) {
    let data = synth_dataset(&SynthSpec::new(3, 6, 48, 2), Split::Train).unwrap();
    let hyper = Hyper {
        point_widths: vec![8, 16],
        head_widths: vec![8],
        ..Hyper::pointnet(3)
    };
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 6,
        learning_rate: 0.005,
        optimizer: Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        schedule: Default::default(),
        seed: 8,
    };
    (data, hyper, cfg)
}

fn cheap(mut spec: AttackSpec) -> AttackSpec {
    spec.config = AttackConfig {
        iterations: 3,
        inner_iterations: 3,
        ..AttackConfig::default()
    };
    spec
}

#[test]
fn pipeline_applies_stages_in_order_without_mutating() {
    let (data, hyper, cfg) = tiny();
    let (model, _) = crate::model::train(&data, &hyper, &cfg).unwrap();
    let c = &data.items[0].cloud;
    let before = c.clone();
    let none = DefensePipeline::new(vec![], &model);
    assert_eq!(apply_pipeline(&none, c, 0).unwrap(), model.predict(c).unwrap());
    let p = DefensePipeline::new(vec![Box::new(Srs { n_drop: 10 }), Box::new(Sor::default())], &model);
    let a = apply_pipeline(&p, c, 5).unwrap();
    assert_eq!(a, apply_pipeline(&p, c, 5).unwrap());
    assert_eq!(&before, c);
    let bad = DefensePipeline::new(vec![Box::new(ReconstructionStage(Collapse))], &model);
    assert!(matches!(apply_pipeline(&bad, c, 0), Err(Error::Pipeline { .. })));
}

#[test]
fn hybrid_with_single_pgd_is_adversarial_training() {
    let (data, hyper, cfg) = tiny();
    let pgd = cheap(AttackSpec::training_pgd());
    let (at, at_log) = adversarial_training(&data, &hyper, &cfg, &pgd).unwrap();
    let spec = HybridSpec { attacks: vec![pgd] };
    let (ht, ht_log) = hybrid_training(&data, &hyper, &cfg, &spec).unwrap();
    assert_eq!(at.params, ht.params);
    let bits = |m: &Model| m.params.iter().flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&at), bits(&ht));
    assert_eq!(at_log, ht_log);
    assert_eq!(at.meta["recipe"], "adversarial");
    assert_eq!(ht.meta["recipe"], "hybrid");
    assert_eq!(at_log.epochs[0].n_examples, 2 * data.len());
}

#[test]
fn hybrid_default_runs_and_records_its_recipe() {
    let (data, hyper, cfg) = tiny();
    let spec = HybridSpec {
        attacks: vec![
            cheap(AttackSpec::new("add", AttackBudget { n_add: 8, ..AttackBudget::default() })),
            cheap(AttackSpec::new("drop", AttackBudget { n_drop: 8, ..AttackBudget::default() })),
            cheap(AttackSpec::training_pgd()),
        ],
    };
    let (a, _) = hybrid_training(&data, &hyper, &cfg, &spec).unwrap();
    let (b, _) = hybrid_training(&data, &hyper, &cfg, &spec).unwrap();
    assert_eq!(a, b);
    let back: Vec<AttackSpec> = serde_json::from_str(&a.meta["attacks"]).unwrap();
    assert_eq!(back, spec.attacks);
    assert_eq!(a.meta["regeneration"], "per-epoch");
    let mut buf = Vec::new();
    crate::model::write_model(&a, &mut buf).unwrap();
    assert_eq!(crate::model::parse_model(buf.as_slice(), "mem").unwrap(), a);
}

#[test]
fn zero_budget_adversarial_training_doubles_the_data() {
    let (data, hyper, cfg) = tiny();
    let zero = cheap(AttackSpec::new(
        "pgd",
        AttackBudget {
            linf_radius: 0.0,
            ..AttackBudget::default()
        },
    ));
    let (_, log) = adversarial_training(&data, &hyper, &cfg, &zero).unwrap();
    assert!(log.epochs.iter().all(|e| e.n_examples == 2 * data.len()));
}

fn labelled(counts: &[usize]) -> Dataset {
    let c = PointCloud::from_flat(vec![0.0; 3]).unwrap();
    let mut items = Vec::new();
    for (label, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            items.push(LabeledCloud { cloud: c.clone(), label });
        }
    }
    let names = (0..counts.len()).map(|i| format!("c{i}")).collect();
    Dataset::new(items, names, Split::Train).unwrap()
}

#[test]
fn partition_sizes() {
    let count = |assign: &[usize], d: &Dataset, class: usize| -> Vec<usize> {
        let mut sizes = vec![0; 3];
        for (i, it) in d.items.iter().enumerate() {
            if it.label == class {
                sizes[assign[i]] += 1;
            }
        }
        sizes
    };
    let d = labelled(&[90, 91, 92]);
    let a = hybrid_partition(&d, 3).unwrap();
    assert_eq!(count(&a, &d, 0), vec![30, 30, 30]);
    assert_eq!(count(&a, &d, 1), vec![31, 30, 30]);
    assert_eq!(count(&a, &d, 2), vec![31, 31, 30]);
    assert!(matches!(hybrid_partition(&labelled(&[5, 2]), 3), Err(Error::Precondition(_))));
}

proptest! {
    #[test]
    fn preprocessing_outputs_are_subsets(
        coords in prop::collection::vec(-1.0f64..1.0, 3 * 8..3 * 60),
        drop_frac in 0.0f64..0.9,
        seed in 0u64..1000,
    ) {
        let c = PointCloud::from_flat(coords[..coords.len() / 3 * 3].to_vec()).unwrap();
        let n_drop = ((c.len() as f64) * drop_frac) as usize;
        let s = srs(&c, n_drop, seed).unwrap();
        prop_assert_eq!(s.len(), c.len() - n_drop);
        prop_assert!(s.is_subset_of(&c));
        let o = sor(&c, 2, 1.1).unwrap();
        prop_assert!(o.is_subset_of(&c) && !o.is_empty());
        prop_assert_eq!(&o, &sor(&c, 2, 1.1).unwrap());
    }

    #[test]
    fn srs_preserves_survivor_order(n in 5usize..50, seed in 0u64..100) {
        let c = PointCloud::from_flat((0..3 * n).map(|i| i as f64).collect()).unwrap();
        let out = srs(&c, n / 2, seed).unwrap();
        let xs: Vec<f64> = out.points().map(|p| p[0]).collect();
        prop_assert!(xs.windows(2).all(|w| w[0] < w[1]));
    }
}
