use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloud::{load_xyz, save_xyz, LabeledCloud};
use crate::error::{Error, Result};

use super::{AdvExample, AttackBudget, Family};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    item: usize,
    label: usize,
    attack: String,
    family: Family,
    surrogate: String,
    budget: AttackBudget,
    queries: usize,
    success: bool,
    adversarial: String,
    original: String,
}

const MANIFEST: &str = "manifest.jsonl";

/// Writes `adv/<item>.xyz`, `orig/<item>.xyz` and a JSON-lines manifest.
pub fn save_adv_set(dir: &Path, examples: &[AdvExample]) -> Result<()> {
    for sub in ["adv", "orig"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = String::new();
    for ex in examples {
        let adversarial = format!("adv/{:05}.xyz", ex.item);
        let original = format!("orig/{:05}.xyz", ex.item);
        save_xyz(&ex.adversarial, &dir.join(&adversarial))?;
        save_xyz(&ex.original.cloud, &dir.join(&original))?;
        let line = ManifestLine {
            item: ex.item,
            label: ex.original.label,
            attack: ex.attack.clone(),
            family: ex.family,
            surrogate: ex.surrogate.clone(),
            budget: ex.budget.clone(),
            queries: ex.queries,
            success: ex.surrogate_success,
            adversarial,
            original,
        };
        manifest.push_str(&serde_json::to_string(&line)?);
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn load_adv_set(dir: &Path) -> Result<Vec<AdvExample>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(AdvExample {
            item: m.item,
            original: LabeledCloud {
                cloud: load_xyz(&dir.join(&m.original))?,
                label: m.label,
            },
            adversarial: load_xyz(&dir.join(&m.adversarial))?,
            attack: m.attack,
            family: m.family,
            surrogate: m.surrogate,
            budget: m.budget,
            queries: m.queries,
            surrogate_success: m.success,
        });
    }
    Ok(out)
}
