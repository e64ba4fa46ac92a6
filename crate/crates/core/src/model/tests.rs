use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::finite_diff_check;
use crate::cloud::{synth_dataset, Split, SynthSpec};

fn random_cloud(n: usize, seed: u64) -> PointCloud {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::from_flat((0..3 * n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn small_hyper(kind: ModelKind) -> Hyper {
    match kind {
        ModelKind::PointNetMini => Hyper {
            point_widths: vec![8, 16],
            head_widths: vec![8],
            ..Hyper::pointnet(4)
        },
        ModelKind::DgcnnMini => Hyper {
            edge_widths: vec![8],
            point_widths: vec![16],
            head_widths: vec![8],
            knn_k: 4,
            ..Hyper::dgcnn(4)
        },
    }
}

fn permuted(c: &PointCloud, seed: u64) -> PointCloud {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..c.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    c.select(&idx).unwrap()
}

#[test]
fn permutation_invariance_both_architectures() {
    for kind in [ModelKind::PointNetMini, ModelKind::DgcnnMini] {
        let m = Model::init(small_hyper(kind), 1).unwrap();
        for s in 0..5 {
            let c = random_cloud(40, s);
            let a = m.logits(&c).unwrap();
            let b = m.logits(&permuted(&c, s + 100)).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9, "{kind:?}");
            }
        }
    }
}

#[test]
fn zero_head_gives_uniform_logits() {
    let mut m = Model::init(small_hyper(ModelKind::PointNetMini), 2).unwrap();
    for name in ["out.w", "out.b"] {
        for v in m.param_mut(name).unwrap().data_mut() {
            *v = 0.0;
        }
    }
    let z = m.logits(&random_cloud(10, 3)).unwrap();
    assert!(z.iter().all(|&v| v == z[0]));
}

#[test]
fn argmax_ties_to_lowest() {
    assert_eq!(argmax(&[1.0, 3.0, 2.0]), 1);
    assert_eq!(argmax(&[2.0, 2.0, 1.0]), 0);
    let m = Model::init(small_hyper(ModelKind::DgcnnMini), 5).unwrap();
    for s in 0..5 {
        let c = random_cloud(20, s);
        assert_eq!(m.predict(&c).unwrap(), argmax(&m.logits(&c).unwrap()));
    }
}

#[test]
fn dgcnn_rejects_too_few_points() {
    let m = Model::init(small_hyper(ModelKind::DgcnnMini), 5).unwrap();
    assert!(matches!(m.logits(&random_cloud(4, 0)), Err(Error::Precondition(_))));
    assert!(m.logits(&random_cloud(5, 0)).is_ok());
}

#[test]
fn critical_points_contract() {
    let m = Model::init(small_hyper(ModelKind::PointNetMini), 7).unwrap();
    let one = random_cloud(1, 0);
    assert_eq!(m.critical_points(&one).unwrap().into_iter().collect::<Vec<_>>(), vec![0]);

    let c = random_cloud(200, 1);
    let crit = m.critical_points(&c).unwrap();
    assert!(crit.len() <= m.hyper.pooled_width());
    let keep: Vec<usize> = crit.iter().copied().collect();
    let reduced = c.select(&keep).unwrap();
    let (a, b) = (m.logits(&c).unwrap(), m.logits(&reduced).unwrap());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-9);
    }

    let dg = Model::init(small_hyper(ModelKind::DgcnnMini), 7).unwrap();
    assert!(matches!(dg.critical_points(&c), Err(Error::UnsupportedArchitecture { .. })));
}

#[test]
fn input_gradients_match_finite_differences() {
    for kind in [ModelKind::PointNetMini, ModelKind::DgcnnMini] {
        let m = Model::init(small_hyper(kind), 11).unwrap();
        for s in 0..3 {
            let c = random_cloud(16, s);
            let f = |t: &mut Tape, x: Value| {
                let params = m.bind(t, false);
                let out = m.forward_on(t, &params, x)?;
                t.cross_entropy(out.logits, 1)
            };
            let r = finite_diff_check(f, &c.to_tensor(), 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-3, "{kind:?} {r:?}");
            assert!(r.checked > 0);
        }
    }
}

#[test]
fn format_round_trip_is_bitwise() {
    for kind in [ModelKind::PointNetMini, ModelKind::DgcnnMini] {
        let mut m = Model::init(small_hyper(kind), 13).unwrap();
        m.meta.insert("recipe".into(), "plain".into());
        m.meta.insert("note".into(), "two words".into());
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        let back = parse_model(buf.as_slice(), "mem").unwrap();
        assert_eq!(back, m);
        let bits = |m: &Model| m.params.iter().flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
    }
}

#[test]
fn format_rejects_mismatched_blocks() {
    let m = Model::init(small_hyper(ModelKind::PointNetMini), 13).unwrap();
    let mut buf = Vec::new();
    write_model(&m, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap().replace("point_widths 8 16", "point_widths 8 17");
    assert!(matches!(parse_model(text.as_bytes(), "mem"), Err(Error::Parse { .. })));
    assert!(parse_model("garbage\n".as_bytes(), "mem").is_err());
}

fn tiny_data() -> crate::cloud::Dataset {
    synth_dataset(&SynthSpec::new(4, 6, 64, 3), Split::Train).unwrap()
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let data = tiny_data();
    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 4,
        learning_rate: 0.01,
        seed: 9,
        ..TrainConfig::default()
    };
    let hyper = small_hyper(ModelKind::PointNetMini);
    let (a, log) = train(&data, &hyper, &cfg).unwrap();
    let (b, _) = train(&data, &hyper, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(log.epochs.last().unwrap().loss < log.epochs[0].loss, "{log:?}");
}

#[test]
fn training_errors() {
    let data = tiny_data();
    let hyper = small_hyper(ModelKind::PointNetMini);
    let bad = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    assert!(train(&data, &hyper, &bad).is_err());
    let huge = TrainConfig {
        epochs: 3,
        learning_rate: 1e200,
        ..TrainConfig::default()
    };
    let r = train(&data, &hyper, &huge);
    assert!(matches!(r, Err(Error::Divergence { .. })), "{:?}", r.map(|(_, l)| l));
    let m = Model::init(hyper, 0).unwrap();
    assert!(fit(m, &[], |_, _| Ok(vec![]), &TrainConfig::default()).is_err());
}

#[test]
fn cosine_schedule_factors() {
    use super::Schedule;
    assert_eq!(Schedule::Constant.factor(3, 10), 1.0);
    assert_eq!(Schedule::Cosine.factor(0, 10), 1.0);
    assert!((Schedule::Cosine.factor(5, 10) - 0.5).abs() < 1e-15);
    assert!(Schedule::Cosine.factor(9, 10) > 0.0);
}
