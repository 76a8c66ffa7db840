//! Synthetic shape generation, the OOD corruption suite, XYZ file I/O,
//! dataset splits and batching.
//!
//! The benchmark is a pure function of its seed: per-sample RNG streams are
//! derived from (global seed, split, class, index), so regeneration is
//! bit-identical and parallel generation would match serial.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{normalize_cloud, GeometryError, PointCloud};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("need at least {min} points, requested {got}")]
    BadCount { min: usize, got: usize },
    #[error("corruption left fewer than 8 points")]
    TooFewPoints,
    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad benchmark config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Mix a stream of identifiers into a single 64-bit seed (splitmix64).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut state = 0x9e37_79b9_7f4a_7c15_u64;
    for &p in parts {
        state = state.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        state = z ^ (z >> 31);
    }
    state
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Plane,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Cone,
        ShapeKind::Torus,
        ShapeKind::Plane,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cone => "cone",
            ShapeKind::Torus => "torus",
            ShapeKind::Plane => "plane",
        }
    }
}

impl FromStr for ShapeKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ShapeKind::ALL
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| format!("unknown shape `{s}`"))
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Target,
}

#[derive(Debug, Clone)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub label: usize,
    pub domain_tag: DomainTag,
    pub sample_id: String,
    pub seed: u64,
    pub corruption_mode: String,
}

fn unit_gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Sample `n` points uniformly from the surface of the given shape, prior to
/// unit-ball normalization.
pub fn sample_surface(kind: ShapeKind, n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(n);
    match kind {
        ShapeKind::Sphere => {
            for _ in 0..n {
                let v = [
                    unit_gaussian(rng),
                    unit_gaussian(rng),
                    unit_gaussian(rng),
                ];
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
                pts.push([v[0] / norm, v[1] / norm, v[2] / norm]);
            }
        }
        ShapeKind::Cube => {
            // Six faces of [-1, 1]^3, equal area.
            for _ in 0..n {
                let face = rng.gen_range(0..6usize);
                let u = rng.gen_range(-1.0..1.0);
                let v = rng.gen_range(-1.0..1.0);
                pts.push(match face {
                    0 => [1.0, u, v],
                    1 => [-1.0, u, v],
                    2 => [u, 1.0, v],
                    3 => [u, -1.0, v],
                    4 => [u, v, 1.0],
                    _ => [u, v, -1.0],
                });
            }
        }
        ShapeKind::Cylinder => {
            // Radius 1, height 2, lateral surface plus caps, area-weighted.
            let lateral = std::f64::consts::TAU * 2.0;
            let caps = 2.0 * std::f64::consts::PI;
            for _ in 0..n {
                if rng.gen_range(0.0..lateral + caps) < lateral {
                    let a = rng.gen_range(0.0..std::f64::consts::TAU);
                    let z = rng.gen_range(-1.0..1.0);
                    pts.push([a.cos(), a.sin(), z]);
                } else {
                    let a = rng.gen_range(0.0..std::f64::consts::TAU);
                    let r = rng.gen_range(0.0_f64..1.0).sqrt();
                    let z = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    pts.push([r * a.cos(), r * a.sin(), z]);
                }
            }
        }
        ShapeKind::Cone => {
            // Base radius 1 at z = -1, apex at z = 1, lateral plus base.
            let slant = (1.0_f64 + 4.0).sqrt();
            let lateral = std::f64::consts::PI * slant;
            let base = std::f64::consts::PI;
            for _ in 0..n {
                if rng.gen_range(0.0..lateral + base) < lateral {
                    let a = rng.gen_range(0.0..std::f64::consts::TAU);
                    // Uniform over the lateral surface: radius ~ sqrt(u).
                    let r = rng.gen_range(0.0_f64..1.0).sqrt();
                    let z = 1.0 - 2.0 * r;
                    pts.push([r * a.cos(), r * a.sin(), z]);
                } else {
                    let a = rng.gen_range(0.0..std::f64::consts::TAU);
                    let r = rng.gen_range(0.0_f64..1.0).sqrt();
                    pts.push([r * a.cos(), r * a.sin(), -1.0]);
                }
            }
        }
        ShapeKind::Torus => {
            // Major radius 1, minor radius 0.4; rejection in the minor angle
            // keeps the surface measure uniform.
            let r_minor = 0.4;
            for _ in 0..n {
                let u = rng.gen_range(0.0..std::f64::consts::TAU);
                let v = loop {
                    let v = rng.gen_range(0.0..std::f64::consts::TAU);
                    let w = rng.gen_range(0.0..1.0 + r_minor);
                    if w < 1.0 + r_minor * v.cos() {
                        break v;
                    }
                };
                let ring = 1.0 + r_minor * v.cos();
                pts.push([ring * u.cos(), ring * u.sin(), r_minor * v.sin()]);
            }
        }
        ShapeKind::Plane => {
            // Unit square in z = 0 with a small deterministic warp so the
            // class is not degenerate after normalization.
            for _ in 0..n {
                let x = rng.gen_range(-1.0..1.0);
                let y = rng.gen_range(-1.0..1.0);
                pts.push([x, y, 0.0]);
            }
        }
    }
    pts
}

/// Generate one labeled cloud: `n` surface points, normalized to the unit
/// ball. The label is the shape's index in [`ShapeKind::ALL`].
pub fn generate_shape(kind: ShapeKind, n: usize, seed: u64) -> Result<LabeledCloud, DataError> {
    if n < 8 {
        return Err(DataError::BadCount { min: 8, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = sample_surface(kind, n, &mut rng);
    let cloud = normalize_cloud(&PointCloud::new(pts)?)?;
    let label = ShapeKind::ALL.iter().position(|k| k == &kind).unwrap();
    Ok(LabeledCloud {
        cloud,
        label,
        domain_tag: DomainTag::Source,
        sample_id: format!("{kind}_{seed:016x}"),
        seed,
        corruption_mode: "none".into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum CorruptionMode {
    /// Remove `fraction` of the points on one side of a seeded random plane.
    HalfSpaceCrop { fraction: f64 },
    /// Zero-mean Gaussian noise with the given standard deviation.
    GaussianJitter { sigma: f64 },
    /// Drop points with probability increasing up to `bias` along a seeded
    /// axis.
    NonuniformDensity { bias: f64 },
    /// Append uniform points in `[-range, range]^3`.
    Outliers { count: usize, range: f64 },
}

impl CorruptionMode {
    pub fn name(&self) -> &'static str {
        match self {
            CorruptionMode::HalfSpaceCrop { .. } => "crop",
            CorruptionMode::GaussianJitter { .. } => "jitter",
            CorruptionMode::NonuniformDensity { .. } => "density",
            CorruptionMode::Outliers { .. } => "outliers",
        }
    }

    pub fn is_identity(&self) -> bool {
        match self {
            CorruptionMode::HalfSpaceCrop { fraction } => *fraction == 0.0,
            CorruptionMode::GaussianJitter { sigma } => *sigma == 0.0,
            CorruptionMode::NonuniformDensity { bias } => *bias == 0.0,
            CorruptionMode::Outliers { count, .. } => *count == 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionSpec {
    pub mode: CorruptionMode,
    pub seed: u64,
}

fn random_direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-6 && norm <= 1.0 {
            return [v[0] / norm, v[1] / norm, v[2] / norm];
        }
    }
}

pub fn corrupt(cloud: &PointCloud, spec: &CorruptionSpec) -> Result<PointCloud, DataError> {
    if spec.mode.is_identity() {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = cloud.len();
    let out = match &spec.mode {
        CorruptionMode::HalfSpaceCrop { fraction } => {
            if !(0.0..1.0).contains(fraction) {
                return Err(DataError::BadConfig(format!(
                    "crop fraction must be in [0, 1), got {fraction}"
                )));
            }
            let dir = random_direction(&mut rng);
            let proj: Vec<f64> = cloud
                .points()
                .iter()
                .map(|p| p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2])
                .collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| proj[a].total_cmp(&proj[b]).then(a.cmp(&b)));
            let keep = ((n as f64 * (1.0 - fraction)).round() as usize).max(8).min(n);
            let mut kept: Vec<usize> = order[..keep].to_vec();
            kept.sort_unstable();
            PointCloud::new(kept.iter().map(|&i| cloud.point(i)).collect())?
        }
        CorruptionMode::GaussianJitter { sigma } => {
            let pts = cloud
                .points()
                .iter()
                .map(|p| {
                    [
                        p[0] + sigma * unit_gaussian(&mut rng),
                        p[1] + sigma * unit_gaussian(&mut rng),
                        p[2] + sigma * unit_gaussian(&mut rng),
                    ]
                })
                .collect();
            PointCloud::new(pts)?
        }
        CorruptionMode::NonuniformDensity { bias } => {
            if !(0.0..=1.0).contains(bias) {
                return Err(DataError::BadConfig(format!(
                    "density bias must be in [0, 1], got {bias}"
                )));
            }
            let dir = random_direction(&mut rng);
            let proj: Vec<f64> = cloud
                .points()
                .iter()
                .map(|p| p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2])
                .collect();
            let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-9);
            let mut kept = Vec::new();
            for (i, &p) in proj.iter().enumerate() {
                let drop_p = bias * (p - lo) / span;
                if rng.gen_range(0.0..1.0) >= drop_p {
                    kept.push(cloud.point(i));
                }
            }
            if kept.len() < 8 {
                return Err(DataError::TooFewPoints);
            }
            PointCloud::new(kept)?
        }
        CorruptionMode::Outliers { count, range } => {
            let mut pts = cloud.points().to_vec();
            for _ in 0..*count {
                pts.push([
                    rng.gen_range(-range..*range),
                    rng.gen_range(-range..*range),
                    rng.gen_range(-range..*range),
                ]);
            }
            PointCloud::new(pts)?
        }
    };
    if out.len() < 8 {
        return Err(DataError::TooFewPoints);
    }
    Ok(out)
}

/// One point per line, three decimal fields separated by single spaces;
/// `#`-prefixed comment lines ignored; LF line endings.
pub fn save_xyz(cloud: &PointCloud, path: &Path) -> Result<(), DataError> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    for p in cloud.points() {
        writeln!(f, "{:.6} {:.6} {:.6}", p[0], p[1], p[2])?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_xyz(path: &Path) -> Result<PointCloud, DataError> {
    let text = fs::read_to_string(path)?;
    let mut pts = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(' ').filter(|s| !s.is_empty()).collect();
        if fields.len() != 3 {
            return Err(DataError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let mut p = [0.0; 3];
        for (k, f) in fields.iter().enumerate() {
            p[k] = f.parse::<f64>().map_err(|e| DataError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        }
        pts.push(p);
    }
    if pts.is_empty() {
        return Err(DataError::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: "no points".into(),
        });
    }
    Ok(PointCloud::new(pts)?)
}

/// Severity knobs for the target-domain corruption suite. Modes with zero
/// severity are skipped; if every mode is zero the test split equals the
/// train distribution (sanity mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSuite {
    pub crop_fraction: f64,
    pub jitter_sigma: f64,
    pub density_bias: f64,
    pub outlier_count: usize,
    pub outlier_range: f64,
}

impl Default for CorruptionSuite {
    fn default() -> Self {
        Self {
            crop_fraction: 0.5,
            jitter_sigma: 0.05,
            density_bias: 0.95,
            outlier_count: 32,
            outlier_range: 1.5,
        }
    }
}

impl CorruptionSuite {
    pub fn active_modes(&self) -> Vec<CorruptionMode> {
        let all = [
            CorruptionMode::HalfSpaceCrop {
                fraction: self.crop_fraction,
            },
            CorruptionMode::GaussianJitter {
                sigma: self.jitter_sigma,
            },
            CorruptionMode::NonuniformDensity {
                bias: self.density_bias,
            },
            CorruptionMode::Outliers {
                count: self.outlier_count,
                range: self.outlier_range,
            },
        ];
        all.into_iter().filter(|m| !m.is_identity()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub classes: Vec<ShapeKind>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points_per_cloud: usize,
    pub corruption: CorruptionSuite,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            classes: vec![
                ShapeKind::Sphere,
                ShapeKind::Cube,
                ShapeKind::Cylinder,
                ShapeKind::Torus,
            ],
            train_per_class: 100,
            test_per_class: 50,
            points_per_cloud: 256,
            corruption: CorruptionSuite::default(),
        }
    }
}

const TRAIN_STREAM: u64 = 0;
const TEST_STREAM: u64 = 1;

/// Clean source-domain train split and corrupted target-domain test split.
/// Train and test use disjoint seed streams.
pub fn build_benchmark(
    config: &BenchmarkConfig,
    seed: u64,
) -> Result<(Vec<LabeledCloud>, Vec<LabeledCloud>), DataError> {
    if config.classes.is_empty() {
        return Err(DataError::BadConfig("no classes".into()));
    }
    if config.points_per_cloud < 8 {
        return Err(DataError::BadConfig("points_per_cloud must be >= 8".into()));
    }
    let modes = config.corruption.active_modes();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class_idx, &kind) in config.classes.iter().enumerate() {
        for i in 0..config.train_per_class {
            let s = derive_seed(&[seed, TRAIN_STREAM, class_idx as u64, i as u64]);
            let mut sample = generate_shape(kind, config.points_per_cloud, s)?;
            sample.label = class_idx;
            sample.domain_tag = DomainTag::Source;
            sample.sample_id = format!("train_{kind}_{i:04}");
            train.push(sample);
        }
        for i in 0..config.test_per_class {
            let s = derive_seed(&[seed, TEST_STREAM, class_idx as u64, i as u64]);
            let mut sample = generate_shape(kind, config.points_per_cloud, s)?;
            sample.label = class_idx;
            sample.domain_tag = DomainTag::Target;
            sample.sample_id = format!("test_{kind}_{i:04}");
            if !modes.is_empty() {
                let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(&[s, 2]));
                let mode = modes[pick.gen_range(0..modes.len())].clone();
                let spec = CorruptionSpec {
                    mode: mode.clone(),
                    seed: derive_seed(&[s, 3]),
                };
                sample.cloud = corrupt(&sample.cloud, &spec)?;
                sample.corruption_mode = mode.name().into();
            }
            sample.seed = s;
            test.push(sample);
        }
    }
    Ok((train, test))
}

/// Write the benchmark under `<root>/<split>/<class>/<sample_id>.xyz` plus a
/// `manifest.csv`.
pub fn save_benchmark(
    root: &Path,
    config: &BenchmarkConfig,
    train: &[LabeledCloud],
    test: &[LabeledCloud],
) -> Result<(), DataError> {
    let mut manifest = String::from("sample_id,split,class_index,class_name,corruption_mode,seed\n");
    for (split, samples) in [("train", train), ("test", test)] {
        for s in samples {
            let class_name = config.classes[s.label].name();
            let dir = root.join(split).join(class_name);
            fs::create_dir_all(&dir)?;
            save_xyz(&s.cloud, &dir.join(format!("{}.xyz", s.sample_id)))?;
            manifest.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.sample_id, split, s.label, class_name, s.corruption_mode, s.seed
            ));
        }
    }
    fs::write(root.join("manifest.csv"), manifest)?;
    Ok(())
}

/// Load a previously saved benchmark via its manifest.
pub fn load_benchmark(root: &Path) -> Result<(Vec<LabeledCloud>, Vec<LabeledCloud>), DataError> {
    let manifest_path = root.join("manifest.csv");
    let text = fs::read_to_string(&manifest_path)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(DataError::Parse {
                path: manifest_path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected 6 columns, got {}", fields.len()),
            });
        }
        let parse_err = |msg: String| DataError::Parse {
            path: manifest_path.display().to_string(),
            line: lineno + 1,
            msg,
        };
        let sample_id = fields[0].to_string();
        let split = fields[1];
        let label: usize = fields[2].parse().map_err(|_| {
            parse_err(format!("bad class_index `{}`", fields[2]))
        })?;
        let class_name = fields[3];
        let seed: u64 = fields[5]
            .parse()
            .map_err(|_| parse_err(format!("bad seed `{}`", fields[5])))?;
        let path = root
            .join(split)
            .join(class_name)
            .join(format!("{sample_id}.xyz"));
        let cloud = load_xyz(&path)?;
        let sample = LabeledCloud {
            cloud,
            label,
            domain_tag: if split == "train" {
                DomainTag::Source
            } else {
                DomainTag::Target
            },
            sample_id,
            seed,
            corruption_mode: fields[4].to_string(),
        };
        if split == "train" {
            train.push(sample);
        } else {
            test.push(sample);
        }
    }
    Ok((train, test))
}

/// Seeded shuffle into batches; the last partial batch is kept.
pub fn batcher(
    n_samples: usize,
    batch_size: usize,
    epoch_seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1);
    let mut idx: Vec<usize> = (0..n_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[epoch_seed, epoch as u64]));
    // Fisher-Yates.
    for i in (1..n_samples).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}
