//! Imperceptibility distances and effectiveness rates.
//!
//! Distances are squared and one-directional: for every adversarial point,
//! the squared distance to its nearest original point, then the maximum
//! (Hausdorff) or the mean (Chamfer) over adversarial points.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{ensure, Error, Result};
use crate::geometry;

fn nearest_sq(x: &PointCloud, xhat: &PointCloud) -> Vec<f64> {
    geometry::nearest(xhat.flat(), x.flat()).into_iter().map(|(_, d)| d).collect()
}

/// `max_{x̂ ∈ X̂} min_{x ∈ X} |x - x̂|²`.
pub fn hausdorff(x: &PointCloud, xhat: &PointCloud) -> f64 {
    nearest_sq(x, xhat).into_iter().fold(0.0, f64::max)
}

/// `(1/|X̂|) Σ_{x̂ ∈ X̂} min_{x ∈ X} |x - x̂|²`.
pub fn chamfer(x: &PointCloud, xhat: &PointCloud) -> f64 {
    let d = nearest_sq(x, xhat);
    d.iter().sum::<f64>() / d.len() as f64
}

/// Both distances from one nearest-neighbour sweep.
pub fn distances(x: &PointCloud, xhat: &PointCloud) -> (f64, f64) {
    let d = nearest_sq(x, xhat);
    let h = d.iter().copied().fold(0.0, f64::max);
    (h, d.iter().sum::<f64>() / d.len() as f64)
}

/// Outcome of one example on one (defense, victim) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub item: usize,
    pub attack: String,
    pub surrogate: String,
    pub defense: String,
    pub victim: String,
    pub label: usize,
    pub predicted: usize,
    pub hausdorff: f64,
    pub chamfer: f64,
    /// Distances are zero by construction (clean inputs and drop attacks),
    /// so they say nothing about imperceptibility.
    pub degenerate_distance: bool,
    pub success: bool,
}

impl EvalRecord {
    pub fn is_correct(&self) -> bool {
        self.predicted == self.label
    }
}

fn nonempty(records: &[EvalRecord]) -> Result<()> {
    ensure(!records.is_empty(), || "no records to aggregate".into())
}

/// Fraction of records whose attack succeeded.
pub fn attack_success_rate(records: &[EvalRecord]) -> Result<f64> {
    nonempty(records)?;
    Ok(records.iter().filter(|r| r.success).count() as f64 / records.len() as f64)
}

/// Fraction of records classified correctly.
pub fn defense_accuracy(records: &[EvalRecord]) -> Result<f64> {
    nonempty(records)?;
    Ok(records.iter().filter(|r| r.is_correct()).count() as f64 / records.len() as f64)
}

/// ASR of `attack` for every (surrogate, victim) pair, from undefended
/// records. Rows follow `surrogates`, columns follow `victims`.
pub fn transfer_matrix(
    surrogates: &[&str],
    victims: &[&str],
    attack: &str,
    records: &[EvalRecord],
) -> Result<Vec<Vec<f64>>> {
    let mut cells: BTreeMap<(&str, &str), (usize, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.attack == attack && r.defense == "none") {
        let c = cells.entry((r.surrogate.as_str(), r.victim.as_str())).or_default();
        c.0 += usize::from(r.success);
        c.1 += 1;
    }
    surrogates
        .iter()
        .map(|s| {
            victims
                .iter()
                .map(|v| match cells.get(&(*s, *v)) {
                    Some(&(hit, n)) => Ok(hit as f64 / n as f64),
                    None => Err(Error::Coverage {
                        surrogate: s.to_string(),
                        victim: v.to_string(),
                    }),
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(v: &[f64]) -> PointCloud {
        PointCloud::from_flat(v.to_vec()).unwrap()
    }

    fn record(success: bool) -> EvalRecord {
        EvalRecord {
            item: 0,
            attack: "pgd".into(),
            surrogate: "s".into(),
            defense: "none".into(),
            victim: "v".into(),
            label: 1,
            predicted: if success { 0 } else { 1 },
            hausdorff: 0.0,
            chamfer: 0.0,
            degenerate_distance: false,
            success,
        }
    }

    #[test]
    fn distance_examples() {
        let a = cloud(&[0.0, 0.0, 0.0]);
        let b = cloud(&[1.0, 0.0, 0.0]);
        assert_eq!(hausdorff(&a, &a), 0.0);
        assert_eq!(hausdorff(&a, &b), 1.0);
        let pair = cloud(&[0.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        assert_eq!(chamfer(&pair, &b), 1.0);
        assert_eq!(chamfer(&b, &b), 0.0);
    }

    #[test]
    fn rates_are_complementary() {
        let all: Vec<_> = (0..4).map(|_| record(true)).collect();
        assert_eq!(attack_success_rate(&all).unwrap(), 1.0);
        assert_eq!(defense_accuracy(&all).unwrap(), 0.0);
        let mixed = vec![record(true), record(false), record(false)];
        let asr = attack_success_rate(&mixed).unwrap();
        assert_eq!(asr + defense_accuracy(&mixed).unwrap(), 1.0);
        assert!(attack_success_rate(&[]).is_err());
        assert!(defense_accuracy(&[]).is_err());
    }

    #[test]
    fn transfer_matrix_shape_and_coverage() {
        let mut recs = vec![record(true), record(false)];
        assert_eq!(transfer_matrix(&["s"], &["v"], "pgd", &recs).unwrap(), vec![vec![0.5]]);
        let mut other = record(true);
        other.victim = "w".into();
        recs.push(other);
        let m = transfer_matrix(&["s"], &["v", "w"], "pgd", &recs).unwrap();
        assert_eq!(m, vec![vec![0.5, 1.0]]);
        assert!(matches!(
            transfer_matrix(&["s", "t"], &["v"], "pgd", &recs),
            Err(Error::Coverage { .. })
        ));
    }

    proptest! {
        #[test]
        fn permutation_invariant_and_ordered(
            a in prop::collection::vec(-1.0f64..1.0, 3..60),
            b in prop::collection::vec(-1.0f64..1.0, 3..60),
        ) {
            let x = cloud(&a[..a.len() / 3 * 3]);
            let y = cloud(&b[..b.len() / 3 * 3]);
            let rev = |c: &PointCloud| c.select(&(0..c.len()).rev().collect::<Vec<_>>()).unwrap();
            let (h, c) = distances(&x, &y);
            prop_assert!(c <= h && c >= 0.0);
            prop_assert_eq!(h, hausdorff(&rev(&x), &rev(&y)));
            prop_assert!((c - chamfer(&rev(&x), &rev(&y))).abs() < 1e-15);
            prop_assert_eq!(hausdorff(&x, &x), 0.0);
        }
    }
}
