use rand::Rng;

use crate::cloud::PointCloud;
use crate::error::{ensure, Result};
use crate::model::argmax;
use crate::seed::rng;

use super::{Attack, AttackInput, Family, Oracle};

/// Projects `x` onto the ℓ∞ ball of radius `rho` around `orig`, in place.
///
/// The comparison `|x - orig| <= rho` is made exactly as it will later be
/// checked: after clamping, any coordinate whose rounded difference still
/// exceeds `rho` is stepped one ulp toward `orig`.
pub fn project_linf(x: &mut [f64], orig: &[f64], rho: f64) {
    for (v, &o) in x.iter_mut().zip(orig) {
        let mut c = v.clamp(o - rho, o + rho);
        while (c - o).abs() > rho {
            c = if c > o { c.next_down() } else { c.next_up() };
        }
        *v = c;
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sign-gradient ascent on the cross-entropy from `start`, projecting after
/// every step. Stops early on an all-zero gradient.
fn sign_steps(
    oracle: &mut Oracle<'_>,
    start: Vec<f64>,
    input: &AttackInput<'_>,
    step: f64,
    iterations: usize,
) -> Result<PointCloud> {
    let orig = input.target.cloud.flat();
    let label = input.target.label;
    let rho = input.budget.linf_radius;
    let mut x = start;
    for _ in 0..iterations {
        if !oracle.can_query() {
            break;
        }
        let cloud = PointCloud::from_flat(x.clone())?;
        let (g, _) = oracle.gradient(&cloud, |t, _, logits| t.cross_entropy(logits, label))?;
        if g.iter().all(|&v| v == 0.0) {
            break;
        }
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi += step * sign(*gi);
        }
        project_linf(&mut x, orig, rho);
    }
    PointCloud::from_flat(x)
}

/// Single sign step of size `linf_radius`.
pub struct Fgm;

impl Attack for Fgm {
    fn name(&self) -> &'static str {
        "fgm"
    }
    fn family(&self) -> Family {
        Family::Shift
    }
    fn perturb(&self, input: &AttackInput<'_>, oracle: &mut Oracle<'_>) -> Result<PointCloud> {
        let start = input.target.cloud.flat().to_vec();
        sign_steps(oracle, start, input, input.budget.linf_radius, 1)
    }
}

/// Iterated sign steps with projection, starting at the clean cloud.
pub struct Ifgm;

impl Attack for Ifgm {
    fn name(&self) -> &'static str {
        "ifgm"
    }
    fn family(&self) -> Family {
        Family::Shift
    }
    fn perturb(&self, input: &AttackInput<'_>, oracle: &mut Oracle<'_>) -> Result<PointCloud> {
        let start = input.target.cloud.flat().to_vec();
        let step = input.config.step_for(input.budget);
        sign_steps(oracle, start, input, step, input.config.iterations)
    }
}

/// [`Ifgm`] from a uniform random start inside the ball.
pub struct Pgd;

impl Attack for Pgd {
    fn name(&self) -> &'static str {
        "pgd"
    }
    fn family(&self) -> Family {
        Family::Shift
    }
    fn perturb(&self, input: &AttackInput<'_>, oracle: &mut Oracle<'_>) -> Result<PointCloud> {
        let orig = input.target.cloud.flat();
        let rho = input.budget.linf_radius;
        let mut r = rng(input.seed);
        let mut start: Vec<f64> = orig
            .iter()
            .map(|&o| if rho > 0.0 { o + r.gen_range(-rho..=rho) } else { o })
            .collect();
        project_linf(&mut start, orig, rho);
        let step = input.config.step_for(input.budget);
        sign_steps(oracle, start, input, step, input.config.iterations)
    }
}

pub(super) struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub(super) fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    pub(super) fn step(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g[i] * g[i];
            x[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Best iterate seen so far: the successful one with the smallest distance,
/// or failing that the one with the lowest margin.
#[derive(Default)]
pub(super) struct Best {
    success: Option<(f64, Vec<f64>)>,
    fallback: Option<(f64, Vec<f64>)>,
}

impl Best {
    pub(super) fn offer(&mut self, x: &[f64], logits: &[f64], label: usize, distance: f64) -> bool {
        let hit = argmax(logits) != label;
        if hit {
            if self.success.as_ref().is_none_or(|(d, _)| distance < *d) {
                self.success = Some((distance, x.to_vec()));
            }
        } else if self.success.is_none() {
            let runner_up = logits
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != label)
                .map(|(_, &z)| z)
                .fold(f64::NEG_INFINITY, f64::max);
            let margin = logits[label] - runner_up;
            if self.fallback.as_ref().is_none_or(|(m, _)| margin < *m) {
                self.fallback = Some((margin, x.to_vec()));
            }
        }
        hit
    }

    pub(super) fn into_best(self) -> Option<Vec<f64>> {
        self.success.or(self.fallback).map(|(_, x)| x)
    }
}

/// Margin loss plus `λ · chamfer(X̂ → X)` and optionally a kNN compactness
/// term, minimized with Adam under a per-step ℓ∞ projection. An outer binary
/// search adapts λ.
fn cw_search(input: &AttackInput<'_>, oracle: &mut Oracle<'_>, knn_weight: f64) -> Result<PointCloud> {
    let cfg = input.config;
    let orig = input.target.cloud.flat();
    let label = input.target.label;
    let rho = input.budget.linf_radius;
    let n = input.target.cloud.len();
    if knn_weight > 0.0 {
        ensure(cfg.knn_k < n, || format!("knn attack needs k < N (k={}, N={n})", cfg.knn_k))?;
    }
    let mut best = Best::default();
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut lambda = cfg.lambda;
    'search: for _ in 0..cfg.binary_steps {
        let mut x = orig.to_vec();
        let mut opt = Adam::new(x.len(), cfg.learning_rate);
        let mut hit = false;
        for _ in 0..cfg.inner_iterations {
            if !oracle.can_query() {
                break 'search;
            }
            let cloud = PointCloud::from_flat(x.clone())?;
            let mut distance = 0.0;
            let (g, logits) = oracle.gradient(&cloud, |t, pts, logits| {
                let margin = t.cw_margin_loss(logits, label, cfg.kappa)?;
                let d = t.chamfer_to(pts, orig)?;
                distance = t.value(d).data()[0];
                let d = t.scale(d, lambda);
                let mut loss = t.add(margin, d)?;
                if knn_weight > 0.0 {
                    let k = t.knn_mean_distance(pts, cfg.knn_k)?;
                    let k = t.scale(k, knn_weight);
                    loss = t.add(loss, k)?;
                }
                Ok(loss)
            })?;
            hit |= best.offer(&x, &logits, label, distance);
            opt.step(&mut x, &g);
            project_linf(&mut x, orig, rho);
        }
        if hit {
            lo = lambda;
            lambda = if hi.is_finite() { 0.5 * (lo + hi) } else { lambda * cfg.lambda_factor };
        } else {
            hi = lambda;
            lambda = if lo > 0.0 { 0.5 * (lo + hi) } else { lambda / cfg.lambda_factor };
        }
    }
    PointCloud::from_flat(best.into_best().unwrap_or_else(|| orig.to_vec()))
}

/// C&W-style minimal-distance perturbation.
pub struct CwPerturb;

impl Attack for CwPerturb {
    fn name(&self) -> &'static str {
        "cw"
    }
    fn family(&self) -> Family {
        Family::Shift
    }
    fn perturb(&self, input: &AttackInput<'_>, oracle: &mut Oracle<'_>) -> Result<PointCloud> {
        cw_search(input, oracle, 0.0)
    }
}

/// [`CwPerturb`] with an extra penalty on the mean kNN distance inside the
/// adversarial cloud.
pub struct KnnAttack;

impl Attack for KnnAttack {
    fn name(&self) -> &'static str {
        "knn"
    }
    fn family(&self) -> Family {
        Family::Shift
    }
    fn perturb(&self, input: &AttackInput<'_>, oracle: &mut Oracle<'_>) -> Result<PointCloud> {
        cw_search(input, oracle, input.config.knn_weight)
    }
}
