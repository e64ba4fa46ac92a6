//! The benchmark protocol: train, attack against the surrogate only,
//! evaluate every defense × victim on every attack set, report.
//!
//! Phases are separated by type. [`attack_phase`] receives a
//! [`Surrogate`] and test items; victims only exist as [`Victim`] values,
//! which expose their model to the evaluation phase and nothing else.
//!
//! Seeds (all through [`derive_seed`]):
//!
//! * attack column `a`: stream `derive_seed(seed, name_hash(a), 0)`, item
//!   `i` gets `derive_seed(config.seed, stream, i)`;
//! * defense pipelines: `derive_seed(seed, name_hash("defense/victim/column"), item)`.

mod ablation;
mod config;
mod report;
mod store;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{attack_set, check_budget, AdvExample, AttackRegistry, Family, Surrogate};
use crate::cloud::{Dataset, LabeledCloud, PointCloud, Split};
use crate::defense::{DefensePipeline, PreprocessRegistry, Recipe};
use crate::error::{Error, Result};
use crate::metrics::{attack_success_rate, defense_accuracy, distances, transfer_matrix, EvalRecord};
use crate::model::{Model, TrainLog};
use crate::seed::{derive_seed, name_hash};

pub use ablation::{ablation_run, ablation_variants};
pub use config::{
    apply_override, merge, BenchConfig, DatasetSpec, DefenseSpec, ModelSpec, NamedAttack, StageSpec, TrainSpec,
    TransferSpec,
};
pub use report::{emit_reports, leaderboard_table, records_jsonl, summary_csv, ReportFormat};
pub use store::{content_key, fingerprint, Store};

/// Column name of the unattacked test set.
pub const CLEAN: &str = "clean";

const KEY_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub acc: f64,
    pub asr: f64,
    /// Means over records whose distances are meaningful; 0 if none are.
    pub mean_dh: f64,
    pub mean_dc: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(records: &[EvalRecord]) -> Result<Self> {
        let live: Vec<&EvalRecord> = records.iter().filter(|r| !r.degenerate_distance).collect();
        let mean = |f: fn(&EvalRecord) -> f64| {
            if live.is_empty() {
                0.0
            } else {
                live.iter().map(|r| f(r)).sum::<f64>() / live.len() as f64
            }
        };
        Ok(Self {
            acc: defense_accuracy(records)?,
            asr: attack_success_rate(records)?,
            mean_dh: mean(|r| r.hausdorff),
            mean_dc: mean(|r| r.chamfer),
            n: records.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub defense: String,
    pub victim: String,
    pub attack: String,
    pub summary: Summary,
    pub records: Vec<EvalRecord>,
}

/// Generation statistics of one attack set, from the surrogate's side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSetSummary {
    pub attack: String,
    pub family: Family,
    pub surrogate: String,
    pub n: usize,
    pub surrogate_asr: f64,
    pub mean_queries: f64,
    pub budget_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub attack: String,
    /// Matrix rows.
    pub surrogates: Vec<String>,
    /// Matrix columns.
    pub victims: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub records: Vec<EvalRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub id: String,
    pub role: String,
    pub recipe: Recipe,
    pub key: String,
    pub n_params: usize,
    pub train_log: TrainLog,
    /// Undefended accuracy on the clean test split.
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub software: String,
    pub config: BenchConfig,
    pub seed: u64,
    pub classes: Vec<String>,
    pub train_items: usize,
    pub test_items: usize,
    pub train_fingerprint: String,
    pub test_fingerprint: String,
    pub models: Vec<ModelRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<Cell>,
    pub attack_sets: Vec<AttackSetSummary>,
    pub transfer: Vec<TransferResult>,
    pub provenance: Provenance,
}

impl GridResult {
    pub fn cell(&self, defense: &str, victim: &str, attack: &str) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.defense == defense && c.victim == victim && c.attack == attack)
    }

    pub fn transfer_for(&self, attack: &str) -> Option<&TransferResult> {
        self.transfer.iter().find(|t| t.attack == attack)
    }

    /// Canonical serialization; byte-identical for identical runs.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Checks that every configured cell is present and that each summary
    /// equals its recomputation from the records.
    pub fn check_complete(&self) -> Result<()> {
        let cfg = &self.provenance.config;
        for d in &cfg.defenses {
            for v in &cfg.victims {
                for a in std::iter::once(CLEAN).chain(cfg.attacks.iter().map(|a| a.name.as_str())) {
                    let cell = self.cell(&d.name, &v.id, a).ok_or_else(|| {
                        Error::Precondition(format!("missing cell ({}, {}, {a})", d.name, v.id))
                    })?;
                    if cell.records.is_empty() || Summary::of(&cell.records)? != cell.summary {
                        return Err(Error::Precondition(format!(
                            "cell ({}, {}, {a}) summary does not match its records",
                            d.name, v.id
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A trained model that attacks never see.
pub struct Victim {
    id: String,
    recipe: Recipe,
    model: Model,
}

impl Victim {
    pub fn id(&self) -> &str {
        &self.id
    }
    pub fn recipe(&self) -> &Recipe {
        &self.recipe
    }
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::model::save_model(&self.model, path)
    }
}

/// One attack column's adversarial examples.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackSet {
    pub name: String,
    pub examples: Vec<AdvExample>,
}

/// Train and test splits of the configured dataset.
pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
}

impl Data {
    pub fn load(config: &BenchConfig) -> Result<Self> {
        let data = Self {
            train: config.dataset.load(Split::Train)?,
            test: config.dataset.load(Split::Test)?,
        };
        if data.train.class_names != data.test.class_names {
            return Err(Error::Config("train and test splits disagree on classes".into()));
        }
        Ok(data)
    }
}

/// Everything `run_grid` produces, including the raw adversarial examples.
pub struct GridRun {
    pub result: GridResult,
    pub attack_sets: Vec<AttackSet>,
    pub transfer_sets: Vec<(String, Vec<AttackSet>)>,
}

pub struct Trained {
    pub surrogates: Vec<(String, Model)>,
    pub victims: Vec<Victim>,
    pub records: Vec<ModelRecord>,
}

impl Trained {
    pub fn surrogate(&self, id: &str) -> Result<Surrogate<'_>> {
        self.surrogates
            .iter()
            .find(|(s, _)| s == id)
            .map(|(s, m)| Surrogate::new(s, m))
            .ok_or_else(|| Error::Config(format!("unknown surrogate {id:?}")))
    }

    fn victim(&self, id: &str, recipe: &Recipe) -> &Victim {
        self.victims
            .iter()
            .find(|v| v.id == id && &v.recipe == recipe)
            .expect("every (victim, recipe) pair is trained")
    }
}

fn model_key(config: &BenchConfig, data: &Data, spec: &ModelSpec, recipe: &Recipe) -> Result<String> {
    let n = data.train.n_classes();
    content_key(&serde_json::json!({
        "version": KEY_VERSION,
        "train_data": fingerprint(&data.train.items),
        "hyper": spec.hyper(n),
        "train": spec.train_config(&config.train),
        "recipe": recipe,
    }))
}

/// Distinct training recipes used by the defenses, in first-use order.
pub fn recipes(config: &BenchConfig) -> Vec<Recipe> {
    let mut out: Vec<Recipe> = Vec::new();
    for d in &config.defenses {
        if !out.contains(&d.training) {
            out.push(d.training.clone());
        }
    }
    out
}

/// Trains the surrogates (`with_surrogates`) and every victim under every
/// recipe the defenses use.
pub fn train_phase(config: &BenchConfig, data: &Data, store: &Store, with_surrogates: bool) -> Result<Trained> {
    let n = data.train.n_classes();
    let mut jobs: Vec<(&ModelSpec, &'static str, Recipe)> = Vec::new();
    if with_surrogates {
        jobs.extend(config.surrogates.iter().map(|s| (s, "surrogate", Recipe::Plain)));
    }
    for r in recipes(config) {
        jobs.extend(config.victims.iter().map(|v| (v, "victim", r.clone())));
    }
    let trained: Vec<(Model, ModelRecord)> = jobs
        .par_iter()
        .map(|(spec, role, recipe)| {
            let key = model_key(config, data, spec, recipe)?;
            let (model, log) = store.model(&key, || {
                log::info!("training {role} {} ({})", spec.id, recipe.name());
                recipe.train(&data.train, &spec.hyper(n), &spec.train_config(&config.train))
            })?;
            let correct: usize = data
                .test
                .items
                .par_iter()
                .map(|it| Ok(usize::from(model.predict(&it.cloud)? == it.label)))
                .sum::<Result<usize>>()?;
            let record = ModelRecord {
                id: spec.id.clone(),
                role: role.to_string(),
                recipe: recipe.clone(),
                key,
                n_params: model.n_params(),
                train_log: log,
                test_accuracy: correct as f64 / data.test.len().max(1) as f64,
            };
            Ok((model, record))
        })
        .collect::<Result<_>>()?;
    let mut out = Trained {
        surrogates: Vec::new(),
        victims: Vec::new(),
        records: Vec::new(),
    };
    for (model, record) in trained {
        if record.role == "surrogate" {
            out.surrogates.push((record.id.clone(), model));
        } else {
            out.victims.push(Victim {
                id: record.id.clone(),
                recipe: record.recipe.clone(),
                model,
            });
        }
        out.records.push(record);
    }
    Ok(out)
}

fn attack_stream(global_seed: u64, column: &str) -> u64 {
    derive_seed(global_seed, name_hash(column), 0)
}

/// Generates every attack column against `surrogate` alone.
pub fn attack_phase(
    surrogate: Surrogate<'_>,
    surrogate_key: &str,
    attacks: &[NamedAttack],
    items: &[LabeledCloud],
    global_seed: u64,
    store: &Store,
) -> Result<Vec<AttackSet>> {
    let registry = AttackRegistry::default();
    attacks
        .iter()
        .map(|a| {
            let attack = registry.get(&a.attack)?;
            let stream = attack_stream(global_seed, &a.name);
            let key = content_key(&serde_json::json!({
                "version": KEY_VERSION,
                "surrogate": surrogate_key,
                "surrogate_id": surrogate.id,
                "attack": a.spec(),
                "stream": stream,
                "items": fingerprint(items),
            }))?;
            let examples = store.attack_set(&key, || {
                log::info!("attack {} on surrogate {} ({} items)", a.name, surrogate.id, items.len());
                let mut set = attack_set(attack, surrogate, items, &a.budget, &a.config, stream)?;
                for ex in &mut set {
                    ex.attack = a.name.clone();
                }
                Ok(set)
            })?;
            Ok(AttackSet {
                name: a.name.clone(),
                examples,
            })
        })
        .collect()
}

pub fn summarize_set(set: &AttackSet) -> AttackSetSummary {
    let n = set.examples.len();
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    AttackSetSummary {
        attack: set.name.clone(),
        family: set.examples.first().map_or(Family::Shift, |e| e.family),
        surrogate: set.examples.first().map_or_else(String::new, |e| e.surrogate.clone()),
        n,
        surrogate_asr: frac(set.examples.iter().filter(|e| e.surrogate_success).count()),
        mean_queries: frac(set.examples.iter().map(|e| e.queries).sum()),
        budget_violations: set.examples.iter().filter(|e| check_budget(e).is_err()).count(),
    }
}

/// One evaluation input.
struct Probe<'a> {
    item: usize,
    original: &'a LabeledCloud,
    input: &'a PointCloud,
    surrogate: &'a str,
    degenerate: bool,
}

fn probes<'a>(column: &str, set: Option<&'a AttackSet>, clean: &'a [LabeledCloud]) -> Vec<Probe<'a>> {
    match set {
        None => clean
            .iter()
            .enumerate()
            .map(|(item, c)| Probe {
                item,
                original: c,
                input: &c.cloud,
                surrogate: "none",
                degenerate: true,
            })
            .collect(),
        Some(s) => {
            debug_assert_eq!(s.name, column);
            s.examples
                .iter()
                .map(|e| Probe {
                    item: e.item,
                    original: &e.original,
                    input: &e.adversarial,
                    surrogate: &e.surrogate,
                    degenerate: e.family == Family::Drop,
                })
                .collect()
        }
    }
}

fn record(
    probe: &Probe<'_>,
    column: &str,
    defense: &str,
    victim: &str,
    predicted: usize,
) -> EvalRecord {
    let (hausdorff, chamfer) = if std::ptr::eq(probe.input, &probe.original.cloud) {
        (0.0, 0.0)
    } else {
        distances(&probe.original.cloud, probe.input)
    };
    EvalRecord {
        item: probe.item,
        attack: column.to_string(),
        surrogate: probe.surrogate.to_string(),
        defense: defense.to_string(),
        victim: victim.to_string(),
        label: probe.original.label,
        predicted,
        hausdorff,
        chamfer,
        degenerate_distance: probe.degenerate,
        success: predicted != probe.original.label,
    }
}

/// Evaluates every defense × victim on the clean set and every attack set.
pub fn evaluate_phase(
    config: &BenchConfig,
    victims: &Trained,
    sets: &[AttackSet],
    clean: &[LabeledCloud],
) -> Result<Vec<Cell>> {
    let registry = PreprocessRegistry::default();
    let mut columns: Vec<(&str, Option<&AttackSet>)> = vec![(CLEAN, None)];
    for a in &config.attacks {
        let set = sets
            .iter()
            .find(|s| s.name == a.name)
            .ok_or_else(|| Error::Config(format!("no attack set for column {:?}", a.name)))?;
        columns.push((&a.name, Some(set)));
    }
    let column_probes: Vec<Vec<Probe<'_>>> = columns.iter().map(|(c, s)| probes(c, *s, clean)).collect();
    let mut pipelines = Vec::new();
    let mut cells = Vec::new();
    for d in &config.defenses {
        for v in &config.victims {
            let stages = d
                .stages
                .iter()
                .map(|s| registry.build(&s.stage, &s.params))
                .collect::<Result<Vec<_>>>()?;
            let victim = victims.victim(&v.id, &d.training);
            pipelines.push(DefensePipeline::new(stages, &victim.model));
            for (ci, (column, _)) in columns.iter().enumerate() {
                cells.push((pipelines.len() - 1, &d.name, &v.id, ci, *column));
            }
        }
    }
    let tasks: Vec<(usize, usize)> = cells
        .iter()
        .enumerate()
        .flat_map(|(k, c)| (0..column_probes[c.3].len()).map(move |i| (k, i)))
        .collect();
    let records: Vec<EvalRecord> = tasks
        .par_iter()
        .map(|&(k, i)| {
            let (p, defense, victim, ci, column) = cells[k];
            let probe = &column_probes[ci][i];
            let seed = derive_seed(
                config.seed,
                name_hash(&format!("{defense}/{victim}/{column}")),
                probe.item as u64,
            );
            let predicted = pipelines[p].model.predict(&pipelines[p].preprocess(probe.input, seed)?)?;
            Ok(record(probe, column, defense, victim, predicted))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(cells.len());
    let mut it = records.into_iter();
    for (_, defense, victim, ci, column) in &cells {
        let recs: Vec<EvalRecord> = it.by_ref().take(column_probes[*ci].len()).collect();
        out.push(Cell {
            defense: defense.to_string(),
            victim: victim.to_string(),
            attack: column.to_string(),
            summary: Summary::of(&recs)?,
            records: recs,
        });
    }
    Ok(out)
}

/// White-box and transfer ASR among the surrogates, undefended.
fn transfer_phase(
    config: &BenchConfig,
    trained: &Trained,
    primary_sets: &[AttackSet],
    items: &[LabeledCloud],
    store: &Store,
) -> Result<(Vec<TransferResult>, Vec<(String, Vec<AttackSet>)>)> {
    let Some(t) = &config.transfer else {
        return Ok((Vec::new(), Vec::new()));
    };
    let n = t.items.unwrap_or(items.len()).min(items.len());
    let items = &items[..n];
    let attacks: Vec<NamedAttack> = t
        .attacks
        .iter()
        .map(|name| config.attacks.iter().find(|a| &a.name == name).cloned().expect("validated"))
        .collect();
    let ids: Vec<&str> = trained.surrogates.iter().map(|(s, _)| s.as_str()).collect();
    let mut per_surrogate: Vec<(String, Vec<AttackSet>)> = Vec::new();
    for (id, _) in &trained.surrogates {
        let sets = if id == &config.surrogate {
            attacks
                .iter()
                .map(|a| {
                    let full = primary_sets.iter().find(|s| s.name == a.name).expect("generated");
                    AttackSet {
                        name: a.name.clone(),
                        examples: full.examples[..n].to_vec(),
                    }
                })
                .collect()
        } else {
            let key = &trained.records.iter().find(|r| &r.id == id).expect("record").key;
            attack_phase(trained.surrogate(id)?, key, &attacks, items, config.seed, store)?
        };
        per_surrogate.push((id.clone(), sets));
    }
    let mut results = Vec::new();
    for a in &attacks {
        let mut recs = Vec::new();
        for (sid, sets) in &per_surrogate {
            let set = sets.iter().find(|s| s.name == a.name).expect("generated");
            let ps = probes(&a.name, Some(set), items);
            for (vid, model) in &trained.surrogates {
                let preds: Vec<usize> = ps
                    .par_iter()
                    .map(|p| model.predict(p.input))
                    .collect::<Result<_>>()?;
                for (p, pred) in ps.iter().zip(preds) {
                    let mut r = record(p, &a.name, "none", vid, pred);
                    r.surrogate = sid.clone();
                    recs.push(r);
                }
            }
        }
        let matrix = transfer_matrix(&ids, &ids, &a.name, &recs)?;
        results.push(TransferResult {
            attack: a.name.clone(),
            surrogates: ids.iter().map(|s| s.to_string()).collect(),
            victims: ids.iter().map(|s| s.to_string()).collect(),
            matrix,
            records: recs,
        });
    }
    Ok((results, per_surrogate))
}

fn provenance(config: &BenchConfig, data: &Data, trained: &Trained) -> Provenance {
    Provenance {
        software: format!("pcbench-core {}", env!("CARGO_PKG_VERSION")),
        config: config.clone(),
        seed: config.seed,
        classes: data.train.class_names.clone(),
        train_items: data.train.len(),
        test_items: data.test.len(),
        train_fingerprint: fingerprint(&data.train.items),
        test_fingerprint: fingerprint(&data.test.items),
        models: trained.records.clone(),
    }
}

/// The full protocol with an in-memory store.
pub fn run_grid(config: &BenchConfig) -> Result<GridResult> {
    Ok(run_grid_with(config, &Store::memory())?.result)
}

pub fn run_grid_with(config: &BenchConfig, store: &Store) -> Result<GridRun> {
    config.validate()?;
    let data = Data::load(config)?;
    let trained = train_phase(config, &data, store, true)?;
    let surrogate = trained.surrogate(&config.surrogate)?;
    let key = &trained
        .records
        .iter()
        .find(|r| r.id == config.surrogate)
        .expect("surrogate trained")
        .key;
    let sets = attack_phase(surrogate, key, &config.attacks, &data.test.items, config.seed, store)?;
    log::info!("evaluating {} defenses x {} victims", config.defenses.len(), config.victims.len());
    let cells = evaluate_phase(config, &trained, &sets, &data.test.items)?;
    let (transfer, transfer_sets) = transfer_phase(config, &trained, &sets, &data.test.items, store)?;
    let result = GridResult {
        cells,
        attack_sets: sets.iter().map(summarize_set).collect(),
        transfer,
        provenance: provenance(config, &data, &trained),
    };
    Ok(GridRun {
        result,
        attack_sets: sets,
        transfer_sets,
    })
}

/// Evaluation against attack sets produced elsewhere (e.g. loaded from
/// disk). Surrogates are not trained and no transfer matrix is computed.
pub fn evaluate_sets(config: &BenchConfig, sets: &[AttackSet], store: &Store) -> Result<GridResult> {
    config.validate()?;
    let data = Data::load(config)?;
    let trained = train_phase(config, &data, store, false)?;
    let cells = evaluate_phase(config, &trained, sets, &data.test.items)?;
    Ok(GridResult {
        cells,
        attack_sets: sets.iter().map(summarize_set).collect(),
        transfer: Vec::new(),
        provenance: provenance(config, &data, &trained),
    })
}

#[cfg(test)]
mod tests;
