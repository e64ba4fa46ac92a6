use rand::Rng;

use crate::cloud::PointCloud;
use crate::error::{ensure, Error, Result};
use crate::geometry::median_center;
use crate::seed::rng;

use super::shift::{Adam, Best};
use super::{Attack, AttackInput, Family, Oracle};

/// Appends `n_add` optimized points.
///
/// The new points start on the surrogate's critical points (or on random
/// original points when the architecture has none) with a small uniform
/// jitter, then minimize `margin + λ · chamfer(Z → X)` over their coordinates
/// only.
pub struct AddPoints;

impl Attack for AddPoints {
    fn name(&self) -> &'static str {
        "add"
    }
    fn family(&self) -> Family {
        Family::Add
    }
    fn perturb(&self, input: &AttackInput<'_>, oracle: &mut Oracle<'_>) -> Result<PointCloud> {
        let cfg = input.config;
        let cloud = &input.target.cloud;
        let label = input.target.label;
        let n_add = input.budget.n_add;
        if n_add == 0 {
            return Ok(cloud.clone());
        }
        let orig = cloud.flat();
        let n = cloud.len();
        let candidates = match oracle.can_query().then(|| oracle.critical_points(cloud)) {
            Some(Ok(c)) => c,
            Some(Err(Error::UnsupportedArchitecture { .. })) | None => (0..n).collect(),
            Some(Err(e)) => return Err(e),
        };
        let mut r = rng(input.seed);
        let mut z = Vec::with_capacity(3 * n_add);
        for _ in 0..n_add {
            let p = cloud.point(candidates[r.gen_range(0..candidates.len())]);
            for c in p {
                let j = if cfg.add_jitter > 0.0 {
                    r.gen_range(-cfg.add_jitter..=cfg.add_jitter)
                } else {
                    0.0
                };
                z.push(c + j);
            }
        }

        let tail: Vec<usize> = (n..n + n_add).collect();
        let mut best = Best::default();
        let mut opt = Adam::new(z.len(), cfg.learning_rate);
        let mut full = orig.to_vec();
        for _ in 0..cfg.inner_iterations {
            if !oracle.can_query() {
                break;
            }
            full.truncate(orig.len());
            full.extend_from_slice(&z);
            let mut distance = 0.0;
            let (g, logits) = oracle.gradient(&PointCloud::from_flat(full.clone())?, |t, pts, logits| {
                let margin = t.cw_margin_loss(logits, label, cfg.kappa)?;
                let added = t.gather_rows(pts, &tail)?;
                let d = t.chamfer_to(added, orig)?;
                distance = t.value(d).data()[0];
                let d = t.scale(d, cfg.lambda);
                t.add(margin, d)
            })?;
            best.offer(&z, &logits, label, distance);
            opt.step(&mut z, &g[orig.len()..]);
        }
        let z = best.into_best().unwrap_or(z);
        let mut out = orig.to_vec();
        out.extend_from_slice(&z);
        PointCloud::from_flat(out)
    }
}

/// Per-point saliency `-<g_i, x_i - c> · |x_i - c|^alpha` around the median
/// center `c`; high values mark points whose removal should raise the loss.
pub fn drop_saliency(points: &[f64], grad: &[f64], alpha: f64) -> Vec<f64> {
    let c = median_center(points);
    points
        .chunks_exact(3)
        .zip(grad.chunks_exact(3))
        .map(|(p, g)| {
            let r = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
            let dot = g[0] * r[0] + g[1] * r[1] + g[2] * r[2];
            let norm = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            -dot * norm.powf(alpha)
        })
        .collect()
}

/// Removes `n_drop` points over several saliency rounds.
pub struct DropPoints;

impl Attack for DropPoints {
    fn name(&self) -> &'static str {
        "drop"
    }
    fn family(&self) -> Family {
        Family::Drop
    }
    fn perturb(&self, input: &AttackInput<'_>, oracle: &mut Oracle<'_>) -> Result<PointCloud> {
        let cfg = input.config;
        let cloud = &input.target.cloud;
        let label = input.target.label;
        let n_drop = input.budget.n_drop;
        ensure(n_drop < cloud.len(), || {
            format!("cannot drop {n_drop} of {} points", cloud.len())
        })?;
        let min_left = oracle.model().min_points();
        ensure(cloud.len() - n_drop >= min_left, || {
            format!("dropping {n_drop} points leaves fewer than {min_left}")
        })?;
        let rounds = cfg.drop_rounds;
        let mut kept: Vec<usize> = (0..cloud.len()).collect();
        let mut saliency = vec![0.0; kept.len()];
        for round in 0..rounds {
            let m = n_drop / rounds + usize::from(round < n_drop % rounds);
            if m == 0 {
                continue;
            }
            let current = cloud.select(&kept)?;
            if oracle.can_query() {
                let (g, _) = oracle.gradient(&current, |t, _, logits| t.cross_entropy(logits, label))?;
                saliency = drop_saliency(current.flat(), &g, cfg.saliency_alpha);
            }
            let mut order: Vec<usize> = (0..kept.len()).collect();
            order.sort_by(|&a, &b| saliency[b].total_cmp(&saliency[a]).then(a.cmp(&b)));
            let mut gone = vec![false; kept.len()];
            for &i in &order[..m] {
                gone[i] = true;
            }
            let mut next_kept = Vec::with_capacity(kept.len() - m);
            let mut next_sal = Vec::with_capacity(kept.len() - m);
            for (i, &k) in kept.iter().enumerate() {
                if !gone[i] {
                    next_kept.push(k);
                    next_sal.push(saliency[i]);
                }
            }
            kept = next_kept;
            saliency = next_sal;
        }
        cloud.select(&kept)
    }
}
