use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{AttackBudget, AttackConfig, AttackInput, AttackRegistry, Surrogate};
use crate::cloud::{Dataset, LabeledCloud};
use crate::error::{ensure, Result};
use crate::model::{fit, initial_model, train, Hyper, Model, TrainConfig, TrainLog};
use crate::seed::derive_seed;

/// An attack by registry name with its budget and settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub attack: String,
    #[serde(default)]
    pub budget: AttackBudget,
    #[serde(default)]
    pub config: AttackConfig,
}

impl AttackSpec {
    pub fn new(attack: &str, budget: AttackBudget) -> Self {
        Self {
            attack: attack.into(),
            budget,
            config: AttackConfig::default(),
        }
    }

    /// PGD at ℓ∞ = 0.20, the adversarial-training default.
    pub fn training_pgd() -> Self {
        Self::new(
            "pgd",
            AttackBudget {
                linf_radius: 0.20,
                ..AttackBudget::default()
            },
        )
    }
}

/// Attacks for hybrid training, one per part of each class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridSpec {
    pub attacks: Vec<AttackSpec>,
}

impl Default for HybridSpec {
    fn default() -> Self {
        Self {
            attacks: vec![
                AttackSpec::new(
                    "add",
                    AttackBudget {
                        n_add: 200,
                        ..AttackBudget::default()
                    },
                ),
                AttackSpec::new(
                    "drop",
                    AttackBudget {
                        n_drop: 300,
                        ..AttackBudget::default()
                    },
                ),
                AttackSpec::training_pgd(),
            ],
        }
    }
}

/// How a model is trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "recipe", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Recipe {
    Plain,
    Adversarial { attack: AttackSpec },
    Hybrid(HybridSpec),
}

impl Recipe {
    pub fn name(&self) -> &'static str {
        match self {
            Recipe::Plain => "plain",
            Recipe::Adversarial { .. } => "adversarial",
            Recipe::Hybrid(_) => "hybrid",
        }
    }

    pub fn train(&self, dataset: &Dataset, hyper: &Hyper, cfg: &TrainConfig) -> Result<(Model, TrainLog)> {
        match self {
            Recipe::Plain => train(dataset, hyper, cfg),
            Recipe::Adversarial { attack } => adversarial_training(dataset, hyper, cfg, attack),
            Recipe::Hybrid(spec) => hybrid_training(dataset, hyper, cfg, spec),
        }
    }
}

const ADV_STREAM: u64 = 0x4144_5654;

/// Seed for the adversarial copy of item `i` in `epoch`.
fn item_seed(cfg: &TrainConfig, epoch: usize, i: usize) -> u64 {
    derive_seed(derive_seed(cfg.seed, ADV_STREAM, 0), epoch as u64, i as u64)
}

/// Attacks `items[i]` with `specs[assign[i]]` against `model`.
fn generate(
    registry: &AttackRegistry,
    specs: &[AttackSpec],
    assign: &[usize],
    items: &[LabeledCloud],
    model: &Model,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<LabeledCloud>> {
    let attacks: Vec<_> = specs.iter().map(|s| registry.get(&s.attack)).collect::<Result<_>>()?;
    items
        .par_iter()
        .enumerate()
        .map(|(i, target)| {
            let spec = &specs[assign[i]];
            let ex = attacks[assign[i]].generate(&AttackInput {
                surrogate: Surrogate::new("training", model),
                item: i,
                target,
                budget: &spec.budget,
                config: &spec.config,
                seed: item_seed(cfg, epoch, i),
            })?;
            Ok(LabeledCloud {
                cloud: ex.adversarial,
                label: target.label,
            })
        })
        .collect()
}

fn record(model: &mut Model, recipe: &str, attacks: &[AttackSpec]) -> Result<()> {
    model.meta.insert("recipe".into(), recipe.into());
    model.meta.insert("attacks".into(), serde_json::to_string(attacks)?);
    model.meta.insert("regeneration".into(), "per-epoch".into());
    Ok(())
}

/// Trains on the clean data plus one adversarial copy of every item,
/// regenerated against the current model at the start of each epoch.
pub fn adversarial_training(
    dataset: &Dataset,
    hyper: &Hyper,
    cfg: &TrainConfig,
    attack: &AttackSpec,
) -> Result<(Model, TrainLog)> {
    let registry = AttackRegistry::default();
    registry.get(&attack.attack)?;
    let model = initial_model(dataset, hyper, cfg)?;
    let specs = std::slice::from_ref(attack);
    let assign = vec![0; dataset.len()];
    let (mut model, log) = fit(
        model,
        &dataset.items,
        |epoch, m| generate(&registry, specs, &assign, &dataset.items, m, cfg, epoch),
        cfg,
    )?;
    record(&mut model, "adversarial", specs)?;
    Ok((model, log))
}

/// Attack index for every dataset item.
///
/// Within each class, items (in dataset order) are split into `k`
/// contiguous parts whose sizes differ by at most one; the first
/// `n mod k` parts get the extra item.
pub fn hybrid_partition(dataset: &Dataset, k: usize) -> Result<Vec<usize>> {
    ensure(k >= 1, || "hybrid training needs at least one attack".into())?;
    let mut assign = vec![0; dataset.len()];
    for (class, members) in dataset.indices_by_class().iter().enumerate() {
        let n = members.len();
        ensure(n >= k, || {
            format!("class {class} has {n} samples, fewer than the {k} hybrid parts")
        })?;
        let mut start = 0;
        for part in 0..k {
            let size = n / k + usize::from(part < n % k);
            for &i in &members[start..start + size] {
                assign[i] = part;
            }
            start += size;
        }
    }
    Ok(assign)
}

/// Adversarial training where each class's items are shared out among
/// several attacks.
pub fn hybrid_training(
    dataset: &Dataset,
    hyper: &Hyper,
    cfg: &TrainConfig,
    spec: &HybridSpec,
) -> Result<(Model, TrainLog)> {
    let registry = AttackRegistry::default();
    for a in &spec.attacks {
        registry.get(&a.attack)?;
    }
    let assign = hybrid_partition(dataset, spec.attacks.len())?;
    let model = initial_model(dataset, hyper, cfg)?;
    let (mut model, log) = fit(
        model,
        &dataset.items,
        |epoch, m| generate(&registry, &spec.attacks, &assign, &dataset.items, m, cfg, epoch),
        cfg,
    )?;
    record(&mut model, "hybrid", &spec.attacks)?;
    Ok((model, log))
}
