//! Component ablations of one defense.

use crate::defense::Recipe;
use crate::error::{Error, Result};

use super::{run_grid_with, BenchConfig, DefenseSpec, GridResult, Store};

fn base<'c>(config: &'c BenchConfig, toggles: &[String]) -> Result<&'c DefenseSpec> {
    let covers = |d: &&DefenseSpec| toggles.iter().all(|t| d.components().contains(t));
    let mut candidates: Vec<&DefenseSpec> = config.defenses.iter().filter(covers).collect();
    // Stable: the first defense with the most components wins.
    candidates.sort_by_key(|d| std::cmp::Reverse(d.components().len()));
    candidates.first().copied().ok_or_else(|| {
        Error::Config(format!("no configured defense has all of the components {toggles:?}"))
    })
}

/// The defense variants of an ablation: for every subset of `toggles`
/// (in binary-counter order, the empty subset first), the base defense with
/// those components removed. The base is the configured defense with the
/// most components among those containing every toggle.
pub fn ablation_variants(config: &BenchConfig, toggles: &[String]) -> Result<Vec<DefenseSpec>> {
    let base = base(config, toggles)?;
    let mut out = Vec::new();
    for mask in 0..1usize << toggles.len() {
        let removed: Vec<&String> = toggles.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, t)| t).collect();
        let mut d = base.clone();
        d.stages.retain(|s| !removed.contains(&&s.stage));
        if removed.iter().any(|t| *t == d.training.name()) {
            d.training = Recipe::Plain;
        }
        if mask != 0 {
            let parts = d.components();
            d.name = if parts.is_empty() { "none".into() } else { parts.join("+") };
        }
        out.push(d);
    }
    Ok(out)
}

/// One grid per ablation variant, sharing `store` so that variants with
/// the same training recipe reuse the same trained victims and every
/// variant reuses the surrogate's attack sets. Transfer evaluation is
/// skipped.
pub fn ablation_run(config: &BenchConfig, toggles: &[String], store: &Store) -> Result<Vec<GridResult>> {
    config.validate()?;
    ablation_variants(config, toggles)?
        .into_iter()
        .map(|d| {
            let mut c = config.clone();
            c.defenses = vec![d];
            c.transfer = None;
            Ok(run_grid_with(&c, store)?.result)
        })
        .collect()
}
