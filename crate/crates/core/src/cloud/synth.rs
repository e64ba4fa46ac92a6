//! Procedural primitive shapes standing in for a mesh dataset.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::seed::{derive_seed, rng};

use super::{fps, normalize_unit_sphere, Dataset, LabeledCloud, PointCloud, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Primitive {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    PlanePair,
    HelixTube,
    Capsule,
}

impl Primitive {
    pub const ALL: [Primitive; 8] = [
        Primitive::Sphere,
        Primitive::Cube,
        Primitive::Cylinder,
        Primitive::Cone,
        Primitive::Torus,
        Primitive::PlanePair,
        Primitive::HelixTube,
        Primitive::Capsule,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Sphere => "sphere",
            Primitive::Cube => "cube",
            Primitive::Cylinder => "cylinder",
            Primitive::Cone => "cone",
            Primitive::Torus => "torus",
            Primitive::PlanePair => "plane-pair",
            Primitive::HelixTube => "helix-tube",
            Primitive::Capsule => "capsule",
        }
    }

    /// One point drawn (approximately) uniformly over the surface area.
    pub fn sample<R: Rng>(self, rng: &mut R) -> [f64; 3] {
        match self {
            Primitive::Sphere => unit_vector(rng),
            Primitive::Cube => {
                let face = rng.gen_range(0..6);
                let (u, v) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let s = if face % 2 == 0 { 1.0 } else { -1.0 };
                match face / 2 {
                    0 => [s, u, v],
                    1 => [u, s, v],
                    _ => [u, v, s],
                }
            }
            Primitive::Cylinder => {
                // radius 0.5, height 2: lateral 2π, caps 2 · π/4.
                let (r, h) = (0.5, 2.0);
                let lateral = 2.0 * PI * r * h;
                let caps = 2.0 * PI * r * r;
                if rng.gen_range(0.0..lateral + caps) < lateral {
                    let t = rng.gen_range(0.0..2.0 * PI);
                    [r * t.cos(), r * t.sin(), rng.gen_range(-h / 2.0..h / 2.0)]
                } else {
                    let [x, y] = disk(rng, r);
                    let z = if rng.gen_bool(0.5) { h / 2.0 } else { -h / 2.0 };
                    [x, y, z]
                }
            }
            Primitive::Cone => {
                // base radius 1 at z = -1, apex at z = 1.
                let (r, h) = (1.0f64, 2.0f64);
                let lateral = PI * r * (r * r + h * h).sqrt();
                let base = PI * r * r;
                if rng.gen_range(0.0..lateral + base) < lateral {
                    // Radius fraction ∝ sqrt(u) gives uniform area density.
                    let f: f64 = rng.gen_range(0.0f64..1.0).sqrt();
                    let t = rng.gen_range(0.0..2.0 * PI);
                    [f * r * t.cos(), f * r * t.sin(), 1.0 - f * h]
                } else {
                    let [x, y] = disk(rng, r);
                    [x, y, -1.0]
                }
            }
            Primitive::Torus => {
                let (big, small) = (1.0, 0.35);
                loop {
                    let u = rng.gen_range(0.0..2.0 * PI);
                    let v: f64 = rng.gen_range(0.0..2.0 * PI);
                    let w = (big + small * v.cos()) / (big + small);
                    if rng.gen_range(0.0..1.0) < w {
                        let ring = big + small * v.cos();
                        break [ring * u.cos(), ring * u.sin(), small * v.sin()];
                    }
                }
            }
            Primitive::PlanePair => {
                let z = if rng.gen_bool(0.5) { 0.45 } else { -0.45 };
                [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), z]
            }
            Primitive::HelixTube => {
                let (coil, tube, turns, height) = (0.7, 0.15, 2.0, 2.0);
                let s = rng.gen_range(0.0..1.0);
                let a = 2.0 * PI * turns * s;
                let c = [coil * a.cos(), coil * a.sin(), height * (s - 0.5)];
                // Tube cross-section in the plane spanned by the radial and z axes.
                let phi = rng.gen_range(0.0..2.0 * PI);
                let radial = [a.cos(), a.sin(), 0.0];
                [
                    c[0] + tube * phi.cos() * radial[0],
                    c[1] + tube * phi.cos() * radial[1],
                    c[2] + tube * phi.sin(),
                ]
            }
            Primitive::Capsule => {
                let (r, len) = (0.5, 1.2);
                let lateral = 2.0 * PI * r * len;
                let ends = 4.0 * PI * r * r;
                if rng.gen_range(0.0..lateral + ends) < lateral {
                    let t = rng.gen_range(0.0..2.0 * PI);
                    [r * t.cos(), r * t.sin(), rng.gen_range(-len / 2.0..len / 2.0)]
                } else {
                    let u = unit_vector(rng);
                    let shift = if u[2] >= 0.0 { len / 2.0 } else { -len / 2.0 };
                    [r * u[0], r * u[1], r * u[2] + shift]
                }
            }
        }
    }
}

fn unit_vector<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            break [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

fn disk<R: Rng>(rng: &mut R, r: f64) -> [f64; 2] {
    let rad = r * rng.gen_range(0.0f64..1.0).sqrt();
    let t = rng.gen_range(0.0..2.0 * PI);
    [rad * t.cos(), rad * t.sin()]
}

/// Uniform random rotation from a normalized Gaussian quaternion.
fn random_rotation<R: Rng>(rng: &mut R) -> [[f64; 3]; 3] {
    let q: [f64; 4] = loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            break q.map(|v| v / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Orientation randomization applied to each sampled shape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rotation {
    None,
    /// Uniform angle about the z axis; shapes stay upright.
    #[default]
    Upright,
    /// Uniform over SO(3).
    Full,
}

fn upright_rotation<R: Rng>(rng: &mut R) -> [[f64; 3]; 3] {
    let (s, c) = rng.gen_range(0.0..2.0 * PI).sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Parameters of the synthetic primitive dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub n_per_class: usize,
    pub points_per_cloud: usize,
    pub seed: u64,
    /// Raw surface samples per cloud before FPS, as a multiple of
    /// `points_per_cloud`.
    #[serde(default = "default_oversample")]
    pub oversample: usize,
    /// Per-axis scale jitter: each axis is scaled by `1 ± scale_jitter`.
    #[serde(default = "default_scale_jitter")]
    pub scale_jitter: f64,
    /// Std. dev. of isotropic Gaussian noise added to every raw sample.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub rotation: Rotation,
}

fn default_oversample() -> usize {
    2
}
fn default_scale_jitter() -> f64 {
    0.15
}
fn default_noise() -> f64 {
    0.01
}

impl SynthSpec {
    pub fn new(n_classes: usize, n_per_class: usize, points_per_cloud: usize, seed: u64) -> Self {
        Self {
            n_classes,
            n_per_class,
            points_per_cloud,
            seed,
            oversample: default_oversample(),
            scale_jitter: default_scale_jitter(),
            noise: default_noise(),
            rotation: Rotation::default(),
        }
    }
}

/// Samples `n_classes × n_per_class` labelled clouds.
///
/// Items are interleaved by class (`item = i · n_classes + class`). Each
/// cloud is drawn from its own seed `derive_seed(seed, split, item)`, so
/// the whole dataset is reproducible and independent of generation order.
pub fn synth_dataset(spec: &SynthSpec, split: Split) -> Result<Dataset> {
    ensure((2..=8).contains(&spec.n_classes), || {
        format!("synthetic data supports 2..=8 classes, got {}", spec.n_classes)
    })?;
    ensure(spec.n_per_class >= 1, || "n_per_class must be at least 1".into())?;
    ensure(spec.points_per_cloud >= 1 && spec.oversample >= 1, || {
        "points_per_cloud and oversample must be positive".into()
    })?;
    let split_tag = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let raw_n = spec.points_per_cloud * spec.oversample;
    let mut items = Vec::with_capacity(spec.n_classes * spec.n_per_class);
    for i in 0..spec.n_per_class {
        for class in 0..spec.n_classes {
            let item = (i * spec.n_classes + class) as u64;
            let mut r = rng(derive_seed(spec.seed, split_tag, item));
            let shape = Primitive::ALL[class];
            let rot = match spec.rotation {
                Rotation::None => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
                Rotation::Upright => upright_rotation(&mut r),
                Rotation::Full => random_rotation(&mut r),
            };
            let scale: [f64; 3] = std::array::from_fn(|_| 1.0 + r.gen_range(-spec.scale_jitter..=spec.scale_jitter));
            let mut raw = Vec::with_capacity(raw_n * 3);
            for _ in 0..raw_n {
                let p = shape.sample(&mut r);
                let s = [p[0] * scale[0], p[1] * scale[1], p[2] * scale[2]];
                for row in &rot {
                    let noise: f64 = StandardNormal.sample(&mut r);
                    raw.push(row[0] * s[0] + row[1] * s[1] + row[2] * s[2] + spec.noise * noise);
                }
            }
            let raw = PointCloud::from_flat(raw)?;
            let picked = fps(&raw, spec.points_per_cloud, 0)?;
            let cloud = normalize_unit_sphere(&raw.select(&picked)?);
            items.push(LabeledCloud { cloud, label: class });
        }
    }
    let names = Primitive::ALL[..spec.n_classes].iter().map(|p| p.name().to_string()).collect();
    Dataset::new(items, names, split)
}
