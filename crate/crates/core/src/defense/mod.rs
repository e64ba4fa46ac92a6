//! Input pre-processing defenses, robust training recipes and pipelines.

mod preprocess;
mod training;

use std::collections::BTreeMap;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::model::Model;

pub use preprocess::{sor, srs, Reconstruction, ReconstructionStage, Sor, Srs};
pub use training::{
    adversarial_training, hybrid_partition, hybrid_training, AttackSpec, HybridSpec, Recipe,
};

/// A stage that rewrites a cloud before classification.
pub trait Preprocess: Send + Sync {
    fn name(&self) -> String;
    /// New coordinates (flat `· × 3`); may be empty, which the pipeline
    /// reports as an error.
    fn apply(&self, cloud: &PointCloud, seed: u64) -> Result<Vec<f64>>;
}

type Factory = fn(&serde_json::Value) -> Result<Box<dyn Preprocess>>;

/// Pre-processing stages addressable by name, built from JSON-like params.
pub struct PreprocessRegistry {
    factories: BTreeMap<&'static str, Factory>,
}

fn parse<T: serde::de::DeserializeOwned>(what: &str, params: &serde_json::Value) -> Result<T> {
    let params = if params.is_null() {
        serde_json::Value::Object(Default::default())
    } else {
        params.clone()
    };
    serde_json::from_value(params).map_err(|e| Error::Config(format!("{what}: {e}")))
}

impl Default for PreprocessRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("srs", |p| Ok(Box::new(parse::<Srs>("srs", p)?)));
        r.register("sor", |p| {
            let s: Sor = parse("sor", p)?;
            s.validate()?;
            Ok(Box::new(s))
        });
        r
    }
}

impl PreprocessRegistry {
    pub fn register(&mut self, name: &'static str, factory: Factory) {
        self.factories.insert(name, factory);
    }

    pub fn build(&self, name: &str, params: &serde_json::Value) -> Result<Box<dyn Preprocess>> {
        let f = self.factories.get(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown pre-processing stage {name:?} (known: {})",
                self.factories.keys().copied().collect::<Vec<_>>().join(", ")
            ))
        })?;
        f(params)
    }
}

/// Pre-processing stages followed by a (possibly robustly trained) model.
pub struct DefensePipeline<'m> {
    pub stages: Vec<Box<dyn Preprocess>>,
    pub model: &'m Model,
}

impl<'m> DefensePipeline<'m> {
    pub fn new(stages: Vec<Box<dyn Preprocess>>, model: &'m Model) -> Self {
        Self { stages, model }
    }

    /// Runs every stage left to right. Stage `i` gets seed
    /// `seed + i`; the input is never modified.
    pub fn preprocess(&self, cloud: &PointCloud, seed: u64) -> Result<PointCloud> {
        let mut current = cloud.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            let out = stage.apply(&current, seed.wrapping_add(i as u64))?;
            if out.is_empty() {
                return Err(Error::Pipeline { stage: stage.name() });
            }
            current = PointCloud::from_flat(out)?;
        }
        Ok(current)
    }
}

/// Pre-processes `cloud` and classifies the result.
pub fn apply_pipeline(pipeline: &DefensePipeline<'_>, cloud: &PointCloud, seed: u64) -> Result<usize> {
    pipeline.model.predict(&pipeline.preprocess(cloud, seed)?)
}

#[cfg(test)]
mod tests;
