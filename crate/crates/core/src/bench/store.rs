//! Content-addressed cache for trained models and attack sets.
//!
//! Keys are SHA-256 digests of the canonical JSON of everything that
//! determines the artifact (dataset fingerprint, architecture, training
//! config and recipe; or surrogate key, attack spec, seed stream and item
//! fingerprint). Entries live in memory for the lifetime of the store and,
//! when a directory is given, on disk as `models/<key>.model` (+ `.log.json`)
//! and `attacks/<key>/`. Both formats round-trip bitwise, so a hit and a
//! miss yield identical results.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::attack::{load_adv_set, save_adv_set, AdvExample};
use crate::cloud::LabeledCloud;
use crate::error::{Error, Result};
use crate::model::{load_model, save_model, Model, TrainLog};

pub fn content_key<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(&serde_json::to_value(value)?)?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Digest of labels and exact coordinate bits.
pub fn fingerprint(items: &[LabeledCloud]) -> String {
    let mut h = Sha256::new();
    for it in items {
        h.update((it.label as u64).to_le_bytes());
        h.update((it.cloud.len() as u64).to_le_bytes());
        for v in it.cloud.flat() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Default)]
pub struct Store {
    dir: Option<PathBuf>,
    models: Mutex<BTreeMap<String, (Model, TrainLog)>>,
    sets: Mutex<BTreeMap<String, Vec<AdvExample>>>,
}

impl Store {
    /// Memory-only store.
    pub fn memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            ..Self::default()
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn model<F>(&self, key: &str, train: F) -> Result<(Model, TrainLog)>
    where
        F: FnOnce() -> Result<(Model, TrainLog)>,
    {
        if let Some(hit) = self.models.lock().expect("store lock").get(key) {
            return Ok(hit.clone());
        }
        let paths = self.dir.as_ref().map(|d| {
            let m = d.join("models");
            (m.join(format!("{key}.model")), m.join(format!("{key}.log.json")))
        });
        let entry = match &paths {
            Some((mp, lp)) if mp.exists() && lp.exists() => {
                log::info!("model cache hit {}", &key[..12]);
                let text = fs::read_to_string(lp).map_err(|e| Error::io(lp, e))?;
                (load_model(mp)?, serde_json::from_str(&text)?)
            }
            _ => {
                let (model, log) = train()?;
                if let Some((mp, lp)) = &paths {
                    save_model(&model, mp)?;
                    fs::write(lp, serde_json::to_string(&log)?).map_err(|e| Error::io(lp, e))?;
                }
                (model, log)
            }
        };
        self.models.lock().expect("store lock").insert(key.into(), entry.clone());
        Ok(entry)
    }

    pub fn attack_set<F>(&self, key: &str, generate: F) -> Result<Vec<AdvExample>>
    where
        F: FnOnce() -> Result<Vec<AdvExample>>,
    {
        if let Some(hit) = self.sets.lock().expect("store lock").get(key) {
            return Ok(hit.clone());
        }
        let dir = self.dir.as_ref().map(|d| d.join("attacks").join(key));
        let set = match &dir {
            Some(d) if d.join("manifest.jsonl").exists() => {
                log::info!("attack-set cache hit {}", &key[..12]);
                load_adv_set(d)?
            }
            _ => {
                let set = generate()?;
                if let Some(d) = &dir {
                    let tmp = d.with_extension("partial");
                    if tmp.exists() {
                        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
                    }
                    save_adv_set(&tmp, &set)?;
                    fs::rename(&tmp, d).map_err(|e| Error::io(d, e))?;
                }
                set
            }
        };
        self.sets.lock().expect("store lock").insert(key.into(), set.clone());
        Ok(set)
    }
}
