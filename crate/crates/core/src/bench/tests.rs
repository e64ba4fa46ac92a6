use super::*;
use crate::bench::config::apply_override;

const TINY: &str = r#"
seed = 5
surrogate = "s"
attacks = ["fgm", { preset = "drop", budget = { n_drop = 8 } }]
defenses = ["none", "sor"]

[attack_presets.fgm]
attack = "fgm"

[attack_presets.drop]
attack = "drop"
config = { drop_rounds = 2 }

[defense_presets.none]

[[defense_presets.sor.stages]]
stage = "sor"
params = { k = 2, alpha = 1.1 }

[dataset]
kind = "synthetic"
n_classes = 3
train_per_class = 6
test_per_class = 2
points_per_cloud = 40
seed = 3

[train]
epochs = 2
batch_size = 6
learning_rate = 0.005
optimizer = { kind = "adam", beta1 = 0.9, beta2 = 0.999, eps = 1e-8 }

[[surrogates]]
id = "s"
kind = "pointnet-mini"
point_widths = [8, 16]
head_widths = [8]
seed = 1

[[surrogates]]
id = "t"
kind = "pointnet-mini"
point_widths = [8, 12]
head_widths = [8]
seed = 2

[[victims]]
id = "v"
kind = "pointnet-mini"
point_widths = [8, 16]
head_widths = [8]
seed = 9

[transfer]
attacks = ["fgm"]
items = 4
"#;

fn tiny() -> BenchConfig {
    BenchConfig::from_toml_str(TINY).unwrap()
}

#[test]
fn presets_expand_and_override() {
    let c = tiny();
    assert_eq!(c.attacks[0].name, "fgm");
    assert_eq!(c.attacks[1].name, "drop");
    assert_eq!(c.attacks[1].budget.n_drop, 8);
    assert_eq!(c.attacks[1].config.drop_rounds, 2);
    assert_eq!(c.defenses[1].stages[0].stage, "sor");
    let mut tree: toml::Table = TINY.parse().unwrap();
    apply_override(&mut tree, "train.epochs=7").unwrap();
    apply_override(&mut tree, "surrogate=t").unwrap();
    let c = BenchConfig::from_tree(tree).unwrap();
    assert_eq!((c.train.epochs, c.surrogate.as_str()), (7, "t"));
}

#[test]
fn invalid_configs_are_config_errors() {
    for (bad, good) in [
        ("\"fgm\", {", "\"fgmx\", {"),
        ("[[victims]]\nid = \"v\"", "[[unused]]\nid = \"v\""),
        ("surrogate = \"s\"", "surrogate = \"nobody\""),
        ("stage = \"sor\"", "stage = \"dup-net\""),
    ] {
        let text = TINY.replace(bad, good);
        let err = BenchConfig::from_toml_str(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{good}: {err}");
    }
}

#[test]
fn one_attack_one_defense_one_victim_has_two_cells() {
    let mut c = tiny();
    c.attacks.truncate(1);
    c.defenses.truncate(1);
    c.transfer = None;
    let r = run_grid(&c).unwrap();
    assert_eq!(r.cells.len(), 2);
    assert_eq!(r.cells[0].attack, CLEAN);
    r.check_complete().unwrap();
}

#[test]
fn grid_is_complete_deterministic_and_reports_are_stable() {
    let c = tiny();
    let run = run_grid_with(&c, &Store::memory()).unwrap();
    let r = &run.result;
    r.check_complete().unwrap();
    assert_eq!(r.cells.len(), 2 * 3);
    assert!(r.attack_sets.iter().all(|s| s.budget_violations == 0 && s.n == 6));
    for c in &r.cells {
        assert_eq!(c.summary, Summary::of(&c.records).unwrap());
        assert!((c.summary.acc + c.summary.asr - 1.0).abs() < 1e-12);
    }
    let t = r.transfer_for("fgm").unwrap();
    assert_eq!(t.matrix.len(), 2);
    assert_eq!(t.records.len(), 2 * 2 * 4);
    // The primary surrogate's transfer set is the prefix of its grid set.
    assert_eq!(run.transfer_sets[0].1[0].examples, run.attack_sets[0].examples[..4]);

    let again = run_grid(&c).unwrap();
    assert_eq!(r.to_json().unwrap(), again.to_json().unwrap());
    assert_eq!(GridResult::from_json(&r.to_json().unwrap()).unwrap(), *r);

    let csv = summary_csv(r).unwrap();
    assert_eq!(csv.lines().count(), r.cells.len() + 1);
    assert!(csv.starts_with("defense,victim,attack,acc,asr,mean_dh,mean_dc,n\n"));
    let n_records: usize = r.cells.iter().map(|c| c.records.len()).sum::<usize>() + t.records.len();
    assert_eq!(records_jsonl(r).unwrap().lines().count(), n_records);
    let dir = tempfile::tempdir().unwrap();
    let files = emit_reports(r, &ReportFormat::ALL, dir.path()).unwrap();
    let first: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    emit_reports(r, &ReportFormat::ALL, dir.path()).unwrap();
    let second: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
    assert_eq!(first, second);
}

#[test]
fn grid_is_independent_of_thread_count() {
    let c = tiny();
    let run = |n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
            .install(|| run_grid(&c).unwrap().to_json().unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn leaderboard_sorts_attacks_by_average_asr() {
    let r = run_grid(&tiny()).unwrap();
    let table = leaderboard_table(&r);
    let header = table.lines().nth(2).unwrap();
    let cols: Vec<&str> = header.split_whitespace().collect();
    let avg = |a: &str| {
        let cells: Vec<_> = r.cells.iter().filter(|c| c.attack == a).collect();
        cells.iter().map(|c| c.summary.asr).sum::<f64>() / cells.len() as f64
    };
    let attacks = &cols[3..cols.len() - 1];
    assert_eq!(attacks.len(), 2);
    assert!(avg(attacks[0]) >= avg(attacks[1]));
    assert!(table.contains("Avg.ASR"));
    assert!(table.contains("Transfer ASR (%) of fgm"));
}

#[test]
fn disk_cache_round_trips_bitwise() {
    let c = tiny();
    let dir = tempfile::tempdir().unwrap();
    let cold = run_grid_with(&c, &Store::on_disk(dir.path())).unwrap();
    assert!(dir.path().join("models").read_dir().unwrap().count() >= 3);
    let warm = run_grid_with(&c, &Store::on_disk(dir.path())).unwrap();
    assert_eq!(cold.result.to_json().unwrap(), warm.result.to_json().unwrap());
    assert_eq!(cold.attack_sets, warm.attack_sets);
}

#[test]
fn evaluation_from_saved_sets_matches_the_grid() {
    let mut c = tiny();
    c.transfer = None;
    let run = run_grid_with(&c, &Store::memory()).unwrap();
    let reloaded = evaluate_sets(&c, &run.attack_sets, &Store::memory()).unwrap();
    assert_eq!(reloaded.cells, run.result.cells);
}

#[test]
fn ablation_variants_and_cache_sharing() {
    let mut c = tiny();
    c.defenses.push(DefenseSpec {
        name: "sor+ht".into(),
        stages: c.defenses[1].stages.clone(),
        training: Recipe::Adversarial {
            attack: crate::defense::AttackSpec {
                config: crate::attack::AttackConfig {
                    iterations: 2,
                    ..Default::default()
                },
                ..crate::defense::AttackSpec::training_pgd()
            },
        },
    });
    let names = |t: &[&str]| {
        let t: Vec<String> = t.iter().map(|s| s.to_string()).collect();
        ablation_variants(&c, &t).unwrap().into_iter().map(|d| d.name).collect::<Vec<_>>()
    };
    assert_eq!(names(&[]), vec!["sor+ht"]);
    assert_eq!(names(&["sor", "adversarial"]), vec!["sor+ht", "adversarial", "sor", "none"]);
    assert!(ablation_variants(&c, &["hybrid".to_string()]).is_err());

    let store = Store::memory();
    let grids = ablation_run(&c, &["sor".to_string()], &store).unwrap();
    assert_eq!(grids.len(), 2);
    let victim = |g: &GridResult| g.provenance.models.iter().find(|m| m.role == "victim").unwrap().clone();
    // Removing a pre-processing stage leaves the trained victim untouched.
    assert_eq!(victim(&grids[0]), victim(&grids[1]));
    assert_eq!(grids[0].attack_sets, grids[1].attack_sets);
}
