use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{ensure, Result};
use crate::geometry;

use super::Preprocess;

/// Removes `n_drop` points uniformly at random; survivors keep their order.
pub fn srs(cloud: &PointCloud, n_drop: usize, seed: u64) -> Result<PointCloud> {
    let n = cloud.len();
    ensure(n_drop < n, || format!("srs cannot drop {n_drop} of {n} points"))?;
    let mut gone = vec![false; n];
    for i in sample(&mut crate::seed::rng(seed), n, n_drop) {
        gone[i] = true;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| !gone[i]).collect();
    cloud.select(&keep)
}

/// Statistical outlier removal.
///
/// `d_i` is the mean Euclidean distance from point `i` to its `k` nearest
/// neighbours; a point is removed iff `d_i > mean + alpha · std` with the
/// sample standard deviation. If that would remove every point, the point
/// with the smallest `d_i` is kept.
pub fn sor(cloud: &PointCloud, k: usize, alpha: f64) -> Result<PointCloud> {
    let n = cloud.len();
    ensure(k >= 1 && k < n, || format!("sor needs 0 < k < N (k={k}, N={n})"))?;
    let nbrs = geometry::knn(cloud.flat(), k);
    let d: Vec<f64> = (0..n)
        .map(|i| {
            let p = geometry::point(cloud.flat(), i);
            nbrs[i * k..(i + 1) * k]
                .iter()
                .map(|&j| geometry::sq_dist(p, geometry::point(cloud.flat(), j)).sqrt())
                .sum::<f64>()
                / k as f64
        })
        .collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let threshold = mean + alpha * var.sqrt();
    let mut keep: Vec<usize> = (0..n).filter(|&i| d[i] <= threshold).collect();
    if keep.is_empty() {
        let best = (0..n).min_by(|&a, &b| d[a].total_cmp(&d[b])).expect("n >= 2");
        keep.push(best);
    }
    cloud.select(&keep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Srs {
    pub n_drop: usize,
}

impl Default for Srs {
    fn default() -> Self {
        Self { n_drop: 500 }
    }
}

impl Preprocess for Srs {
    fn name(&self) -> String {
        "srs".into()
    }
    fn apply(&self, cloud: &PointCloud, seed: u64) -> Result<Vec<f64>> {
        Ok(srs(cloud, self.n_drop, seed)?.into_flat())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sor {
    pub k: usize,
    pub alpha: f64,
}

impl Default for Sor {
    fn default() -> Self {
        Self { k: 2, alpha: 1.1 }
    }
}

impl Sor {
    pub fn validate(&self) -> Result<()> {
        ensure(self.k >= 1, || "sor k must be at least 1".into())?;
        ensure(self.alpha.is_finite(), || "sor alpha must be finite".into())
    }
}

impl Preprocess for Sor {
    fn name(&self) -> String {
        "sor".into()
    }
    fn apply(&self, cloud: &PointCloud, _seed: u64) -> Result<Vec<f64>> {
        Ok(sor(cloud, self.k, self.alpha)?.into_flat())
    }
}

/// Extension point for learned surface reconstruction (upsampling or
/// implicit-surface resampling). No implementation ships with the crate.
pub trait Reconstruction: Send + Sync {
    fn name(&self) -> String;
    fn reconstruct(&self, cloud: &PointCloud) -> Result<Vec<f64>>;
}

/// Adapts a [`Reconstruction`] into a pipeline stage.
pub struct ReconstructionStage<R>(pub R);

impl<R: Reconstruction> Preprocess for ReconstructionStage<R> {
    fn name(&self) -> String {
        self.0.name()
    }
    fn apply(&self, cloud: &PointCloud, _seed: u64) -> Result<Vec<f64>> {
        self.0.reconstruct(cloud)
    }
}
