//! Point-cloud types, geometry utilities, synthetic data and file I/O.

mod io;
mod ops;
mod synth;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use io::{load_dataset_dir, load_xyz, parse_xyz, save_dataset_dir, save_xyz, write_xyz};
pub use ops::{fps, knn_indices, normalize_unit_sphere};
pub use synth::{synth_dataset, Primitive, Rotation, SynthSpec};

/// Ordered set of `N ≥ 1` points in 3D with finite coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    coords: Vec<f64>,
}

impl PointCloud {
    /// Builds a cloud from a flat `[x0, y0, z0, x1, ...]` list.
    pub fn from_flat(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() || !coords.len().is_multiple_of(3) {
            return Err(Error::Precondition(format!(
                "a point cloud needs a positive multiple of 3 coordinates, got {}",
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Precondition("point cloud has a non-finite coordinate".into()));
        }
        Ok(Self { coords })
    }

    pub fn from_points(points: &[[f64; 3]]) -> Result<Self> {
        Self::from_flat(points.iter().flatten().copied().collect())
    }

    pub fn len(&self) -> usize {
        self.coords.len() / 3
    }

    /// Always false; clouds hold at least one point.
    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn flat(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.coords
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let p = &self.coords[3 * i..3 * i + 3];
        [p[0], p[1], p[2]]
    }

    pub fn points(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.coords.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Sub-cloud with the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let n = self.len();
        let mut out = Vec::with_capacity(indices.len() * 3);
        for &i in indices {
            if i >= n {
                return Err(Error::Index {
                    what: "point cloud",
                    index: i,
                    len: n,
                });
            }
            out.extend_from_slice(&self.coords[3 * i..3 * i + 3]);
        }
        Self::from_flat(out)
    }

    /// Concatenation `self ∪ other`, keeping `self` as the prefix.
    pub fn append(&self, other: &PointCloud) -> Self {
        let mut coords = self.coords.clone();
        coords.extend_from_slice(&other.coords);
        Self { coords }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.len(), 3], self.coords.clone())
    }

    /// True iff every point of `self` appears bitwise in `other`.
    pub fn is_subset_of(&self, other: &PointCloud) -> bool {
        let key = |p: [f64; 3]| p.map(f64::to_bits);
        let pool: std::collections::HashSet<[u64; 3]> = other.points().map(key).collect();
        self.points().all(|p| pool.contains(&key(p)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<LabeledCloud>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn new(items: Vec<LabeledCloud>, class_names: Vec<String>, split: Split) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Precondition("dataset is empty".into()));
        }
        if let Some(bad) = items.iter().find(|it| it.label >= class_names.len()) {
            return Err(Error::Index {
                what: "class label",
                index: bad.label,
                len: class_names.len(),
            });
        }
        Ok(Self {
            items,
            class_names,
            split,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Item indices grouped by label, each group in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_classes()];
        for (i, it) in self.items.iter().enumerate() {
            groups[it.label].push(i);
        }
        groups
    }
}
