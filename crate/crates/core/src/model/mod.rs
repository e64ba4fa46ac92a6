//! Small differentiable point-cloud classifiers and their training loop.
//!
//! Two architectures share one parameter layout:
//!
//! * `PointNetMini`: shared per-point MLP, global max-pool, MLP head.
//! * `DgcnnMini`: one EdgeConv block (edge feature `[x_i, x_j - x_i]`, edge
//!   MLP, max over the `k` neighbours), a per-point MLP, global max-pool and
//!   the same head. The kNN graph is rebuilt from the input coordinates on
//!   every forward pass and treated as constant for differentiation.

mod format;
mod train;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Value};
use crate::cloud::PointCloud;
use crate::error::{ensure, Error, Result};
use crate::geometry;
use crate::seed::rng;

pub use format::{load_model, parse_model, save_model, write_model};
pub use train::{fit, initial_model, train, EpochLog, Optimizer, Schedule, TrainConfig, TrainLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[serde(rename = "pointnet-mini")]
    PointNetMini,
    DgcnnMini,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::PointNetMini => "pointnet-mini",
            ModelKind::DgcnnMini => "dgcnn-mini",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pointnet-mini" => Ok(ModelKind::PointNetMini),
            "dgcnn-mini" => Ok(ModelKind::DgcnnMini),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyper {
    pub kind: ModelKind,
    pub n_classes: usize,
    /// Edge MLP widths (DGCNN only; its input is the 6-wide edge feature).
    #[serde(default)]
    pub edge_widths: Vec<usize>,
    /// Per-point MLP widths; the last one is the pooled feature size.
    pub point_widths: Vec<usize>,
    /// Hidden widths of the classifier head (the output layer is implied).
    pub head_widths: Vec<usize>,
    /// Neighbourhood size of the EdgeConv graph (DGCNN only).
    #[serde(default)]
    pub knn_k: usize,
}

impl Hyper {
    pub fn pointnet(n_classes: usize) -> Self {
        Self {
            kind: ModelKind::PointNetMini,
            n_classes,
            edge_widths: vec![],
            point_widths: vec![32, 64, 128],
            head_widths: vec![64],
            knn_k: 0,
        }
    }

    pub fn dgcnn(n_classes: usize) -> Self {
        Self {
            kind: ModelKind::DgcnnMini,
            n_classes,
            edge_widths: vec![32, 32],
            point_widths: vec![128],
            head_widths: vec![64],
            knn_k: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.n_classes >= 2, || "a classifier needs at least 2 classes".into())?;
        ensure(!self.point_widths.is_empty(), || "point_widths must be nonempty".into())?;
        let all = self.edge_widths.iter().chain(&self.point_widths).chain(&self.head_widths);
        ensure(all.clone().all(|&w| w > 0), || "layer widths must be positive".into())?;
        match self.kind {
            ModelKind::PointNetMini => ensure(self.edge_widths.is_empty() && self.knn_k == 0, || {
                "pointnet-mini takes no edge layers or knn_k".into()
            }),
            ModelKind::DgcnnMini => ensure(!self.edge_widths.is_empty() && self.knn_k >= 1, || {
                "dgcnn-mini needs edge_widths and knn_k >= 1".into()
            }),
        }
    }

    /// `(name, fan_in, fan_out)` for every dense layer, in forward order.
    fn layers(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut width = 3;
        if self.kind == ModelKind::DgcnnMini {
            width = 6;
            for (i, &w) in self.edge_widths.iter().enumerate() {
                out.push((format!("edge.{i}"), width, w));
                width = w;
            }
        }
        for (i, &w) in self.point_widths.iter().enumerate() {
            out.push((format!("point.{i}"), width, w));
            width = w;
        }
        for (i, &w) in self.head_widths.iter().enumerate() {
            out.push((format!("head.{i}"), width, w));
            width = w;
        }
        out.push(("out".to_string(), width, self.n_classes));
        out
    }

    pub fn pooled_width(&self) -> usize {
        *self.point_widths.last().expect("validated")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// A classifier: hyperparameters, named parameters and free-form metadata
/// (training recipe, seeds) carried through serialization.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub hyper: Hyper,
    pub params: Vec<Param>,
    pub meta: BTreeMap<String, String>,
}

/// Output of a forward pass recorded on a tape.
pub struct Forward {
    pub logits: Value,
    /// Per pooled channel, the point index that won the global max-pool.
    pub global_argmax: Vec<usize>,
}

impl Model {
    /// Glorot-uniform weights `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(hyper: Hyper, seed: u64) -> Result<Self> {
        use rand::Rng;
        hyper.validate()?;
        let mut r = rng(seed);
        let mut params = Vec::new();
        for (name, fan_in, fan_out) in hyper.layers() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| r.gen_range(-bound..bound)).collect();
            params.push(Param {
                name: format!("{name}.w"),
                tensor: Tensor::matrix(fan_in, fan_out, w)?,
            });
            params.push(Param {
                name: format!("{name}.b"),
                tensor: Tensor::zeros(&[fan_out]),
            });
        }
        Ok(Self {
            hyper,
            params,
            meta: BTreeMap::new(),
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.hyper.kind
    }

    pub fn n_classes(&self) -> usize {
        self.hyper.n_classes
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Records the parameters on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Value> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.tensor.clone())
                } else {
                    tape.constant(p.tensor.clone())
                }
            })
            .collect()
    }

    pub fn min_points(&self) -> usize {
        match self.kind() {
            ModelKind::PointNetMini => 1,
            ModelKind::DgcnnMini => self.hyper.knn_k + 1,
        }
    }

    /// Forward pass on a tape. `points` must be an `N × 3` matrix.
    pub fn forward_on(&self, tape: &mut Tape, params: &[Value], points: Value) -> Result<Forward> {
        let n = tape.shape(points)[0];
        ensure(n >= self.min_points(), || {
            format!(
                "{} needs at least {} points, got {n}",
                self.kind().name(),
                self.min_points()
            )
        })?;
        let mut p = params.iter().copied();
        let mut layer = |tape: &mut Tape, x: Value, relu: bool| -> Result<Value> {
            let (w, b) = (p.next().expect("weight"), p.next().expect("bias"));
            let y = tape.dense(x, w, b)?;
            Ok(if relu { tape.relu(y) } else { y })
        };

        let mut h = points;
        if self.kind() == ModelKind::DgcnnMini {
            let k = self.hyper.knn_k;
            let nbr_idx = geometry::knn(tape.value(points).data(), k);
            let ctr_idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
            let nbr = tape.gather_rows(points, &nbr_idx)?;
            let ctr = tape.gather_rows(points, &ctr_idx)?;
            let rel = tape.sub(nbr, ctr)?;
            let mut e = tape.concat_cols(ctr, rel)?;
            for _ in &self.hyper.edge_widths {
                e = layer(tape, e, true)?;
            }
            h = tape.group_max(e, k)?;
        }
        for _ in &self.hyper.point_widths {
            h = layer(tape, h, true)?;
        }
        let (pooled, global_argmax) = tape.max_over_points(h)?;
        let mut z = tape.reshape(pooled, &[1, self.hyper.pooled_width()])?;
        for _ in &self.hyper.head_widths {
            z = layer(tape, z, true)?;
        }
        z = layer(tape, z, false)?;
        let logits = tape.reshape(z, &[self.n_classes()])?;
        Ok(Forward {
            logits,
            global_argmax,
        })
    }

    /// Raw logits with no gradient bookkeeping.
    pub fn logits(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(cloud.to_tensor());
        let f = self.forward_on(&mut tape, &params, x)?;
        Ok(tape.value(f.logits).data().to_vec())
    }

    pub fn predict(&self, cloud: &PointCloud) -> Result<usize> {
        Ok(argmax(&self.logits(cloud)?))
    }

    /// Indices of points that win at least one channel of the global max-pool.
    pub fn critical_points(&self, cloud: &PointCloud) -> Result<BTreeSet<usize>> {
        if self.kind() != ModelKind::PointNetMini {
            return Err(Error::UnsupportedArchitecture {
                kind: self.kind().name().into(),
                op: "critical_points",
            });
        }
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.constant(cloud.to_tensor());
        let f = self.forward_on(&mut tape, &params, x)?;
        Ok(f.global_argmax.into_iter().collect())
    }

    /// Gradient of a scalar loss of the logits with respect to the input
    /// coordinates, plus the logits themselves.
    pub fn input_gradient<F>(&self, cloud: &PointCloud, loss: F) -> Result<(Vec<f64>, Vec<f64>)>
    where
        F: FnOnce(&mut Tape, Value) -> Result<Value>,
    {
        self.input_gradient_with(cloud, |t, _, logits| loss(t, logits))
    }

    /// Like [`Model::input_gradient`], but the loss may also use the input
    /// points (for distance penalties).
    pub fn input_gradient_with<F>(&self, cloud: &PointCloud, loss: F) -> Result<(Vec<f64>, Vec<f64>)>
    where
        F: FnOnce(&mut Tape, Value, Value) -> Result<Value>,
    {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let x = tape.leaf(cloud.to_tensor());
        let f = self.forward_on(&mut tape, &params, x)?;
        let logits = tape.value(f.logits).data().to_vec();
        let l = loss(&mut tape, x, f.logits)?;
        let mut g = tape.backward(l)?;
        Ok((g.take(x), logits))
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
