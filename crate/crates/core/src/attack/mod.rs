//! Untargeted adversarial attacks against a surrogate classifier.
//!
//! Three families are covered: shifting coordinates (`fgm`, `ifgm`, `pgd`,
//! `cw`, `knn`), adding points (`add`) and dropping points (`drop`). Every
//! attack implements [`Attack`] and is looked up by name in an
//! [`AttackRegistry`].

mod io;
mod points;
mod shift;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Value};
use crate::cloud::{LabeledCloud, PointCloud};
use crate::error::{ensure, Error, Result};
use crate::model::{argmax, Model};
use crate::seed::derive_seed;

pub use io::{load_adv_set, save_adv_set};
pub use points::{drop_saliency, AddPoints, DropPoints};
pub use shift::{project_linf, CwPerturb, Fgm, Ifgm, KnnAttack, Pgd};

/// The kind of edit an attack makes to a cloud.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Shift,
    Add,
    Drop,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Shift => "shift",
            Family::Add => "add",
            Family::Drop => "drop",
        }
    }
}

/// Constraints an adversarial example must satisfy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackBudget {
    /// Per-coordinate bound for shift attacks.
    pub linf_radius: f64,
    pub n_add: usize,
    pub n_drop: usize,
    /// Cap on surrogate evaluations; `None` means unlimited (counted only).
    pub max_queries: Option<usize>,
}

impl Default for AttackBudget {
    fn default() -> Self {
        Self {
            linf_radius: 0.16,
            n_add: 100,
            n_drop: 200,
            max_queries: None,
        }
    }
}

impl AttackBudget {
    pub fn validate(&self) -> Result<()> {
        ensure(self.linf_radius >= 0.0 && self.linf_radius.is_finite(), || {
            format!("linf_radius must be finite and >= 0, got {}", self.linf_radius)
        })?;
        ensure(self.max_queries != Some(0), || "max_queries must be at least 1".into())
    }
}

/// Optimizer settings shared by the attacks. Each attack reads the fields it
/// needs and ignores the rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Sign-gradient steps for `ifgm` and `pgd`.
    pub iterations: usize,
    /// Sign-gradient step size; `None` means `linf_radius / 10`.
    pub step: Option<f64>,
    /// Distance weight. The starting value of the binary search for `cw` and
    /// `knn`; the fixed weight for `add`.
    pub lambda: f64,
    /// Factor applied to `lambda` between binary-search steps.
    pub lambda_factor: f64,
    pub binary_steps: usize,
    /// Margin confidence of the C&W loss.
    pub kappa: f64,
    /// Inner optimization steps for `cw`, `knn` and `add`.
    pub inner_iterations: usize,
    /// Adam learning rate of the inner optimization.
    pub learning_rate: f64,
    pub knn_weight: f64,
    pub knn_k: usize,
    pub drop_rounds: usize,
    /// Exponent of the radial factor in the drop saliency.
    pub saliency_alpha: f64,
    /// Half-width of the uniform jitter on initial added points.
    pub add_jitter: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            step: None,
            lambda: 10.0,
            lambda_factor: 2.0,
            binary_steps: 5,
            kappa: 0.0,
            inner_iterations: 200,
            learning_rate: 0.01,
            knn_weight: 3.0,
            knn_k: 5,
            drop_rounds: 5,
            saliency_alpha: 1.0,
            add_jitter: 0.01,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.iterations >= 1, || "iterations must be at least 1".into())?;
        ensure(self.step.is_none_or(|s| s > 0.0 && s.is_finite()), || {
            "step must be positive".into()
        })?;
        ensure(self.lambda >= 0.0 && self.lambda.is_finite(), || "lambda must be >= 0".into())?;
        ensure(self.lambda_factor > 0.0, || "lambda_factor must be positive".into())?;
        ensure(self.binary_steps >= 1, || "binary_steps must be at least 1".into())?;
        ensure(self.kappa >= 0.0, || "kappa must be >= 0".into())?;
        ensure(self.inner_iterations >= 1, || "inner_iterations must be at least 1".into())?;
        ensure(self.learning_rate > 0.0, || "learning_rate must be positive".into())?;
        ensure(self.knn_weight >= 0.0, || "knn_weight must be >= 0".into())?;
        ensure(self.knn_k >= 1, || "knn_k must be at least 1".into())?;
        ensure(self.drop_rounds >= 1, || "drop_rounds must be at least 1".into())?;
        ensure(self.add_jitter >= 0.0, || "add_jitter must be >= 0".into())
    }

    pub fn step_for(&self, budget: &AttackBudget) -> f64 {
        self.step.unwrap_or(budget.linf_radius / 10.0)
    }
}

/// The only model an attack may see.
///
/// Victims and defenses live elsewhere; the benchmark hands attack code a
/// `Surrogate` and nothing else.
#[derive(Clone, Copy, Debug)]
pub struct Surrogate<'a> {
    pub id: &'a str,
    pub model: &'a Model,
}

impl<'a> Surrogate<'a> {
    pub fn new(id: &'a str, model: &'a Model) -> Self {
        Self { id, model }
    }
}

/// One adversarial example and its bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct AdvExample {
    pub item: usize,
    pub original: LabeledCloud,
    pub adversarial: PointCloud,
    pub attack: String,
    pub family: Family,
    pub surrogate: String,
    pub budget: AttackBudget,
    /// Surrogate evaluations spent (forward or forward+backward each count 1).
    pub queries: usize,
    pub surrogate_success: bool,
}

/// Counts surrogate evaluations and enforces `max_queries`.
pub struct Oracle<'a> {
    model: &'a Model,
    limit: Option<usize>,
    used: usize,
}

impl<'a> Oracle<'a> {
    pub fn new(model: &'a Model, budget: &AttackBudget) -> Self {
        Self {
            model,
            limit: budget.max_queries,
            used: 0,
        }
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn used(&self) -> usize {
        self.used
    }

    /// Whether another evaluation fits in the budget while still leaving one
    /// for the final verdict.
    pub fn can_query(&self) -> bool {
        self.limit.is_none_or(|l| self.used + 1 < l)
    }

    fn charge(&mut self) -> Result<()> {
        if self.limit.is_some_and(|l| self.used >= l) {
            return Err(Error::Precondition("query budget exhausted".into()));
        }
        self.used += 1;
        Ok(())
    }

    pub fn logits(&mut self, cloud: &PointCloud) -> Result<Vec<f64>> {
        self.charge()?;
        self.model.logits(cloud)
    }

    /// Input gradient of `loss(tape, points, logits)` and the logits.
    pub fn gradient<F>(&mut self, cloud: &PointCloud, loss: F) -> Result<(Vec<f64>, Vec<f64>)>
    where
        F: FnOnce(&mut Tape, Value, Value) -> Result<Value>,
    {
        self.charge()?;
        self.model.input_gradient_with(cloud, loss)
    }

    /// Critical points of the surrogate, when its architecture has them.
    pub fn critical_points(&mut self, cloud: &PointCloud) -> Result<Vec<usize>> {
        let set = self.model.critical_points(cloud)?;
        self.charge()?;
        Ok(set.into_iter().collect())
    }

    /// Untargeted verdict: the surrogate no longer predicts `label`.
    pub fn success(&mut self, cloud: &PointCloud, label: usize) -> Result<bool> {
        Ok(argmax(&self.logits(cloud)?) != label)
    }
}

/// Everything an attack needs besides its own settings.
pub struct AttackInput<'a> {
    pub surrogate: Surrogate<'a>,
    pub item: usize,
    pub target: &'a LabeledCloud,
    pub budget: &'a AttackBudget,
    pub config: &'a AttackConfig,
    /// Seed for this item; derive it from the item index, never from order.
    pub seed: u64,
}

pub trait Attack: Send + Sync {
    fn name(&self) -> &'static str;
    fn family(&self) -> Family;
    /// The adversarial cloud and the evaluations spent on it.
    fn perturb(&self, input: &AttackInput<'_>, oracle: &mut Oracle<'_>) -> Result<PointCloud>;

    fn generate(&self, input: &AttackInput<'_>) -> Result<AdvExample> {
        input.budget.validate()?;
        input.config.validate()?;
        let model = input.surrogate.model;
        if input.target.label >= model.n_classes() {
            return Err(Error::Index {
                what: "label",
                index: input.target.label,
                len: model.n_classes(),
            });
        }
        let mut oracle = Oracle::new(model, input.budget);
        let adversarial = self.perturb(input, &mut oracle)?;
        let surrogate_success = oracle.success(&adversarial, input.target.label)?;
        Ok(AdvExample {
            item: input.item,
            original: input.target.clone(),
            adversarial,
            attack: self.name().to_string(),
            family: self.family(),
            surrogate: input.surrogate.id.to_string(),
            budget: input.budget.clone(),
            queries: oracle.used(),
            surrogate_success,
        })
    }
}

/// Attacks addressable by name.
pub struct AttackRegistry {
    attacks: BTreeMap<&'static str, Box<dyn Attack>>,
}

impl Default for AttackRegistry {
    fn default() -> Self {
        let mut r = Self {
            attacks: BTreeMap::new(),
        };
        r.register(Box::new(Fgm));
        r.register(Box::new(Ifgm));
        r.register(Box::new(Pgd));
        r.register(Box::new(CwPerturb));
        r.register(Box::new(KnnAttack));
        r.register(Box::new(AddPoints));
        r.register(Box::new(DropPoints));
        r
    }
}

impl AttackRegistry {
    pub fn register(&mut self, attack: Box<dyn Attack>) {
        self.attacks.insert(attack.name(), attack);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Attack> {
        self.attacks.get(name).map(|a| a.as_ref()).ok_or_else(|| {
            Error::Config(format!(
                "unknown attack {name:?} (known: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.attacks.keys().copied().collect()
    }
}

/// Runs `attack` on every item in parallel. Item `i` gets the seed
/// `derive_seed(config.seed, stream, i)`, so the output does not depend on
/// scheduling.
pub fn attack_set(
    attack: &dyn Attack,
    surrogate: Surrogate<'_>,
    items: &[LabeledCloud],
    budget: &AttackBudget,
    config: &AttackConfig,
    stream: u64,
) -> Result<Vec<AdvExample>> {
    let done = AtomicUsize::new(0);
    let out = items
        .par_iter()
        .enumerate()
        .map(|(i, target)| {
            let ex = attack.generate(&AttackInput {
                surrogate,
                item: i,
                target,
                budget,
                config,
                seed: derive_seed(config.seed, stream, i as u64),
            });
            let n = done.fetch_add(1, Ordering::Relaxed) + 1;
            if n.is_multiple_of(32) {
                log::debug!("{} on {}: {n}/{}", attack.name(), surrogate.id, items.len());
            }
            ex
        })
        .collect();
    out
}

/// Checks the family invariant of an example exactly.
pub fn check_budget(ex: &AdvExample) -> Result<()> {
    let orig = ex.original.cloud.flat();
    let adv = ex.adversarial.flat();
    let fail = |msg: String| Err(Error::Precondition(format!("{} item {}: {msg}", ex.attack, ex.item)));
    match ex.family {
        Family::Shift => {
            if adv.len() != orig.len() {
                return fail(format!("size changed {} -> {}", orig.len() / 3, adv.len() / 3));
            }
            let worst = adv.iter().zip(orig).map(|(a, o)| (a - o).abs()).fold(0.0, f64::max);
            if worst > ex.budget.linf_radius {
                return fail(format!("linf {worst} exceeds {}", ex.budget.linf_radius));
            }
        }
        Family::Add => {
            if adv.len() != orig.len() + 3 * ex.budget.n_add {
                return fail(format!("expected {} added points", ex.budget.n_add));
            }
            if adv[..orig.len()].iter().zip(orig).any(|(a, o)| a.to_bits() != o.to_bits()) {
                return fail("original prefix modified".into());
            }
        }
        Family::Drop => {
            if ex.adversarial.len() + ex.budget.n_drop != ex.original.cloud.len() {
                return fail(format!("expected {} dropped points", ex.budget.n_drop));
            }
            if !ex.adversarial.is_subset_of(&ex.original.cloud) {
                return fail("output is not a subset of the original".into());
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
