//! Declarative grid configuration.
//!
//! A config is one TOML file. Loading happens in three passes over the raw
//! TOML tree before anything is typed:
//!
//! 1. `include = ["a.toml", ...]`: each listed file (relative to the
//!    including file) is loaded recursively and deep-merged underneath the
//!    including file. Tables merge key by key; any other value, arrays
//!    included, is replaced by the later file.
//! 2. Overrides (`key.path=value`, from the command line) are applied.
//! 3. Presets: entries of `attacks` and `defenses` may be a bare string,
//!    naming a block in `[attack_presets]` / `[defense_presets]`, or a
//!    table with `preset = "..."` whose remaining keys are deep-merged over
//!    that block. An entry's `name` defaults to the preset name.
//!
//! ```toml
//! include = ["presets.toml"]
//! seed = 7
//! surrogate = "pn-s"
//! attacks = ["fgm", "pgd", { preset = "cw", name = "cw-fast", config = { binary_steps = 2 } }]
//! defenses = ["none", "sor"]
//!
//! [dataset]
//! kind = "synthetic"
//! n_classes = 8
//! train_per_class = 30
//! test_per_class = 16
//! points_per_cloud = 1024
//! seed = 1
//!
//! [train]
//! epochs = 15
//!
//! [[surrogates]]
//! id = "pn-s"
//! kind = "pointnet-mini"
//! seed = 11
//!
//! [[victims]]
//! id = "pn-v"
//! kind = "pointnet-mini"
//! point_widths = [48, 96]
//! seed = 21
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackBudget, AttackConfig, AttackRegistry};
use crate::cloud::{load_dataset_dir, synth_dataset, Dataset, Rotation, Split, SynthSpec};
use crate::defense::{AttackSpec, PreprocessRegistry, Recipe};
use crate::error::{Error, Result};
use crate::model::{Hyper, ModelKind, Optimizer, Schedule, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        n_classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        points_per_cloud: usize,
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        oversample: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scale_jitter: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        noise: Option<f64>,
        #[serde(default)]
        rotation: Rotation,
    },
    /// A directory written by `save_dataset_dir`.
    Directory { path: PathBuf },
}

impl DatasetSpec {
    fn synth(&self, split: Split) -> Option<SynthSpec> {
        let DatasetSpec::Synthetic {
            n_classes,
            train_per_class,
            test_per_class,
            points_per_cloud,
            seed,
            oversample,
            scale_jitter,
            noise,
            rotation,
        } = self
        else {
            return None;
        };
        let n = match split {
            Split::Train => *train_per_class,
            Split::Test => *test_per_class,
        };
        let mut s = SynthSpec::new(*n_classes, n, *points_per_cloud, *seed);
        s.oversample = oversample.unwrap_or(s.oversample);
        s.scale_jitter = scale_jitter.unwrap_or(s.scale_jitter);
        s.noise = noise.unwrap_or(s.noise);
        s.rotation = *rotation;
        Some(s)
    }

    pub fn load(&self, split: Split) -> Result<Dataset> {
        match self {
            DatasetSpec::Directory { path } => load_dataset_dir(path, split),
            _ => synth_dataset(&self.synth(split).expect("synthetic"), split),
        }
    }
}

/// Optimization settings shared by every model unless a model overrides them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub schedule: Schedule,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            optimizer: d.optimizer,
            schedule: d.schedule,
        }
    }
}

impl TrainSpec {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer.clone(),
            schedule: self.schedule,
            seed,
        }
    }
}

/// A classifier to train. Omitted widths take the architecture defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub id: String,
    pub kind: ModelKind,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_widths: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point_widths: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_widths: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knn_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSpec>,
}

impl ModelSpec {
    pub fn hyper(&self, n_classes: usize) -> Hyper {
        let base = match self.kind {
            ModelKind::PointNetMini => Hyper::pointnet(n_classes),
            ModelKind::DgcnnMini => Hyper::dgcnn(n_classes),
        };
        Hyper {
            edge_widths: self.edge_widths.clone().unwrap_or(base.edge_widths),
            point_widths: self.point_widths.clone().unwrap_or(base.point_widths),
            head_widths: self.head_widths.clone().unwrap_or(base.head_widths),
            knn_k: self.knn_k.unwrap_or(base.knn_k),
            ..base
        }
    }

    pub fn train_config(&self, global: &TrainSpec) -> TrainConfig {
        self.train.as_ref().unwrap_or(global).with_seed(self.seed)
    }
}

/// An attack column: a registry attack under a column name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedAttack {
    pub name: String,
    pub attack: String,
    #[serde(default)]
    pub budget: AttackBudget,
    #[serde(default)]
    pub config: AttackConfig,
}

impl NamedAttack {
    pub fn spec(&self) -> AttackSpec {
        AttackSpec {
            attack: self.attack.clone(),
            budget: self.budget.clone(),
            config: self.config.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub stage: String,
    #[serde(default)]
    pub params: serde_json::Value,
}

/// A defense row: pre-processing stages in front of a victim trained with
/// `training`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSpec {
    pub name: String,
    #[serde(default)]
    pub stages: Vec<StageSpec>,
    #[serde(default = "plain")]
    pub training: Recipe,
}

fn plain() -> Recipe {
    Recipe::Plain
}

impl DefenseSpec {
    /// Names of the toggleable components: stage names, then the recipe
    /// name unless it is `plain`.
    pub fn components(&self) -> Vec<String> {
        let mut out: Vec<String> = self.stages.iter().map(|s| s.stage.clone()).collect();
        if self.training != Recipe::Plain {
            out.push(self.training.name().to_string());
        }
        out
    }
}

/// White-box versus transfer evaluation among the surrogates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSpec {
    /// Attack column names to evaluate.
    pub attacks: Vec<String>,
    /// Evaluate on the first `items` test items only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: TrainSpec,
    /// Id of the surrogate that generates the grid's attack sets.
    pub surrogate: String,
    pub surrogates: Vec<ModelSpec>,
    pub victims: Vec<ModelSpec>,
    pub attacks: Vec<NamedAttack>,
    pub defenses: Vec<DefenseSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer: Option<TransferSpec>,
    /// Output directory; the command line or environment may supply it.
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
}

fn unique<'a>(what: &str, names: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for n in names {
        if n.is_empty() || n == "clean" || n == "none" && what != "defense" {
            return Err(Error::Config(format!("{what} name {n:?} is reserved or empty")));
        }
        if !seen.insert(n) {
            return Err(Error::Config(format!("duplicate {what} name {n:?}")));
        }
    }
    Ok(())
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.attacks.is_empty() {
            return cfg("at least one attack is required".into());
        }
        if self.victims.is_empty() {
            return cfg("at least one victim is required".into());
        }
        if self.defenses.is_empty() {
            return cfg("at least one defense is required (use a stage-free \"none\")".into());
        }
        unique("attack", self.attacks.iter().map(|a| a.name.as_str()))?;
        unique("defense", self.defenses.iter().map(|d| d.name.as_str()))?;
        unique("model", self.surrogates.iter().chain(&self.victims).map(|m| m.id.as_str()))?;
        if !self.surrogates.iter().any(|s| s.id == self.surrogate) {
            return cfg(format!("surrogate {:?} is not among [[surrogates]]", self.surrogate));
        }
        let attacks = AttackRegistry::default();
        for a in &self.attacks {
            attacks.get(&a.attack)?;
            a.budget.validate()?;
            a.config.validate()?;
        }
        let stages = PreprocessRegistry::default();
        for d in &self.defenses {
            for s in &d.stages {
                stages.build(&s.stage, &s.params)?;
            }
            let specs: &[AttackSpec] = match &d.training {
                Recipe::Plain => &[],
                Recipe::Adversarial { attack } => std::slice::from_ref(attack),
                Recipe::Hybrid(h) => &h.attacks,
            };
            for s in specs {
                attacks.get(&s.attack)?;
                s.budget.validate()?;
                s.config.validate()?;
            }
        }
        let n_classes = match &self.dataset {
            DatasetSpec::Synthetic { n_classes, .. } => *n_classes,
            DatasetSpec::Directory { .. } => 2,
        };
        for m in self.surrogates.iter().chain(&self.victims) {
            m.hyper(n_classes.max(2)).validate()?;
            m.train_config(&self.train).validate()?;
        }
        self.train.with_seed(0).validate()?;
        if let Some(t) = &self.transfer {
            for name in &t.attacks {
                if !self.attacks.iter().any(|a| &a.name == name) {
                    return cfg(format!("transfer attack {name:?} is not an attack column"));
                }
            }
            if t.items == Some(0) {
                return cfg("transfer.items must be positive".into());
            }
        }
        Ok(())
    }

    /// Loads, merges includes, applies `overrides`, expands presets and
    /// validates.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let mut tree = load_tree(path, &mut Vec::new())?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        Self::from_tree(tree)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let tree: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        if tree.contains_key("include") {
            return Err(Error::Config("include needs a file path; use BenchConfig::load".into()));
        }
        Self::from_tree(tree)
    }

    pub(crate) fn from_tree(mut tree: toml::Table) -> Result<Self> {
        expand_presets(&mut tree, "attacks", "attack_presets")?;
        expand_presets(&mut tree, "defenses", "defense_presets")?;
        tree.remove("attack_presets");
        tree.remove("defense_presets");
        let cfg: BenchConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_table(path: &Path) -> Result<toml::Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", path.display(), e.message())))
}

fn load_tree(path: &Path, stack: &mut Vec<PathBuf>) -> Result<toml::Table> {
    let canon = fs::canonicalize(path).map_err(|e| Error::io(path, e))?;
    if stack.contains(&canon) {
        return Err(Error::Config(format!("include cycle through {}", path.display())));
    }
    stack.push(canon);
    let mut own = read_table(path)?;
    let mut merged = toml::Table::new();
    if let Some(inc) = own.remove("include") {
        let list = match inc {
            toml::Value::String(s) => vec![s],
            toml::Value::Array(a) => a
                .into_iter()
                .map(|v| match v {
                    toml::Value::String(s) => Ok(s),
                    other => Err(Error::Config(format!("include entries must be strings, got {other}"))),
                })
                .collect::<Result<_>>()?,
            other => return Err(Error::Config(format!("include must be a string or array, got {other}"))),
        };
        let base = path.parent().unwrap_or(Path::new("."));
        for rel in list {
            let sub = load_tree(&base.join(rel), stack)?;
            merge(&mut merged, sub);
        }
    }
    merge(&mut merged, own);
    stack.pop();
    Ok(merged)
}

/// Deep-merges `top` over `base`.
pub fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies `a.b.c=value`. The value is parsed as a TOML value, falling back
/// to a plain string.
pub fn apply_override(tree: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut node = tree;
    for p in path {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override {key:?}: {p:?} is not a table"))),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn expand_presets(tree: &mut toml::Table, list: &str, presets: &str) -> Result<()> {
    let Some(entries) = tree.get(list).cloned() else {
        return Ok(());
    };
    let toml::Value::Array(entries) = entries else {
        return Err(Error::Config(format!("{list} must be an array")));
    };
    let table = match tree.get(presets) {
        Some(toml::Value::Table(t)) => t.clone(),
        Some(_) => return Err(Error::Config(format!("{presets} must be a table"))),
        None => toml::Table::new(),
    };
    let lookup = |name: &str| -> Result<toml::Table> {
        match table.get(name) {
            Some(toml::Value::Table(t)) => Ok(t.clone()),
            _ => Err(Error::Config(format!("unknown preset {name:?} in {list}"))),
        }
    };
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let resolved = match e {
            toml::Value::String(name) => {
                let mut t = lookup(&name)?;
                t.entry("name").or_insert(toml::Value::String(name));
                t
            }
            toml::Value::Table(mut t) => match t.remove("preset") {
                Some(toml::Value::String(name)) => {
                    let mut base = lookup(&name)?;
                    base.remove("name");
                    merge(&mut base, t);
                    base.entry("name").or_insert(toml::Value::String(name));
                    base
                }
                Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
                None => t,
            },
            other => return Err(Error::Config(format!("{list} entries must be tables or preset names, got {other}"))),
        };
        out.push(toml::Value::Table(resolved));
    }
    tree.insert(list.into(), toml::Value::Array(out));
    Ok(())
}
