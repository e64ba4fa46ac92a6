use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::cloud::{Dataset, LabeledCloud};
use crate::error::{ensure, Error, Result};
use crate::seed::{derive_seed, rng};

use super::{argmax, Hyper, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Sgd { momentum: 0.9 }
    }
}

/// Per-epoch learning-rate multiplier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    #[default]
    Constant,
    /// `0.5 · (1 + cos(π · epoch / epochs))`, epochs counted from 0.
    Cosine,
}

impl Schedule {
    pub fn factor(self, epoch: usize, epochs: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default, skip_serializing_if = "is_constant")]
    pub schedule: Schedule,
    pub seed: u64,
}

fn is_constant(s: &Schedule) -> bool {
    *s == Schedule::Constant
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            learning_rate: 0.01,
            optimizer: Optimizer::default(),
            schedule: Schedule::Constant,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.epochs >= 1, || "epochs must be at least 1".into())?;
        ensure(self.batch_size >= 1, || "batch_size must be at least 1".into())?;
        ensure(self.learning_rate > 0.0 && self.learning_rate.is_finite(), || {
            format!("learning rate must be positive, got {}", self.learning_rate)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub n_examples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

struct OptState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: i32,
}

impl OptState {
    fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    fn apply(&mut self, model: &mut Model, grads: &[Vec<f64>], cfg: &TrainConfig, lr: f64) {
        self.step += 1;
        for (pi, param) in model.params.iter_mut().enumerate() {
            let data = param.tensor.data_mut();
            let g = &grads[pi];
            match cfg.optimizer {
                Optimizer::Sgd { momentum } => {
                    let v = &mut self.first[pi];
                    for i in 0..data.len() {
                        v[i] = momentum * v[i] + g[i];
                        data[i] -= lr * v[i];
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let (m, s) = (&mut self.first[pi], &mut self.second[pi]);
                    let c1 = 1.0 - beta1.powi(self.step);
                    let c2 = 1.0 - beta2.powi(self.step);
                    for i in 0..data.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        s[i] = beta2 * s[i] + (1.0 - beta2) * g[i] * g[i];
                        data[i] -= lr * (m[i] / c1) / ((s[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Cross-entropy loss, correctness and parameter gradients for one example.
fn example_gradient(model: &Model, item: &LabeledCloud) -> Result<(f64, bool, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true);
    let x = tape.constant(item.cloud.to_tensor());
    let f = model.forward_on(&mut tape, &params, x)?;
    let correct = argmax(tape.value(f.logits).data()) == item.label;
    let loss = tape.cross_entropy(f.logits, item.label)?;
    let value = tape.value(loss).data()[0];
    let mut g = tape.backward(loss)?;
    Ok((value, correct, params.into_iter().map(|p| g.take(p)).collect()))
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// Mini-batch training on `base ∪ augment(epoch, model)` for every epoch.
///
/// `augment` runs at the start of each epoch against the current model and
/// returns extra examples for that epoch only. Per-example gradients are
/// computed in parallel and summed in batch order, so results do not depend
/// on the thread count.
pub fn fit<A>(mut model: Model, base: &[LabeledCloud], mut augment: A, cfg: &TrainConfig) -> Result<(Model, TrainLog)>
where
    A: FnMut(usize, &Model) -> Result<Vec<LabeledCloud>>,
{
    cfg.validate()?;
    ensure(!base.is_empty(), || "cannot train on an empty dataset".into())?;
    if let Some(bad) = base.iter().find(|it| it.label >= model.n_classes()) {
        return Err(Error::Index {
            what: "training label",
            index: bad.label,
            len: model.n_classes(),
        });
    }
    let mut state = OptState::new(&model);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let extra = augment(epoch, &model)?;
        let pool: Vec<&LabeledCloud> = base.iter().chain(extra.iter()).collect();
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng(derive_seed(cfg.seed, SHUFFLE_STREAM, epoch as u64)));

        let lr = cfg.learning_rate * cfg.schedule.factor(epoch, cfg.epochs);
        let mut total_loss = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, bool, Vec<Vec<f64>>)>> =
                batch.par_iter().map(|&i| example_gradient(&model, pool[i])).collect();
            let mut sum: Option<Vec<Vec<f64>>> = None;
            for r in results {
                let (loss, ok, grads) = r?;
                total_loss += loss;
                correct += usize::from(ok);
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = sum.expect("nonempty batch");
            let scale = 1.0 / batch.len() as f64;
            for g in grads.iter_mut().flatten() {
                *g *= scale;
            }
            state.apply(&mut model, &grads, cfg, lr);
        }
        let mean_loss = total_loss / pool.len() as f64;
        let params_finite = model.params.iter().all(|p| p.tensor.data().iter().all(|v| v.is_finite()));
        if !mean_loss.is_finite() || !params_finite {
            return Err(Error::Divergence {
                epoch: epoch + 1,
                loss: mean_loss,
            });
        }
        log::debug!(
            "{} epoch {}: loss {:.4} acc {:.3}",
            model.kind().name(),
            epoch + 1,
            mean_loss,
            correct as f64 / pool.len() as f64
        );
        log.epochs.push(EpochLog {
            epoch: epoch + 1,
            loss: mean_loss,
            accuracy: correct as f64 / pool.len() as f64,
            n_examples: pool.len(),
        });
    }
    model.meta.insert("train_config".into(), serde_json::to_string(cfg)?);
    Ok((model, log))
}

const INIT_STREAM: u64 = 0x494e_4954;

/// The untrained model every recipe starts from: Glorot init seeded by
/// `derive_seed(cfg.seed, INIT_STREAM, 0)`.
pub fn initial_model(dataset: &Dataset, hyper: &Hyper, cfg: &TrainConfig) -> Result<Model> {
    ensure(hyper.n_classes == dataset.n_classes(), || {
        format!(
            "model has {} classes but the dataset has {}",
            hyper.n_classes,
            dataset.n_classes()
        )
    })?;
    Model::init(hyper.clone(), derive_seed(cfg.seed, INIT_STREAM, 0))
}

/// Plain supervised training with mean cross-entropy.
pub fn train(dataset: &Dataset, hyper: &Hyper, cfg: &TrainConfig) -> Result<(Model, TrainLog)> {
    let model = initial_model(dataset, hyper, cfg)?;
    let (mut model, log) = fit(model, &dataset.items, |_, _| Ok(Vec::new()), cfg)?;
    model.meta.insert("recipe".into(), "plain".into());
    Ok((model, log))
}
