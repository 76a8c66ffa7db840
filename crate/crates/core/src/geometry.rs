//! Point-cloud containers, augmentation transforms, farthest point sampling,
//! radius neighborhoods, and a non-differentiable Chamfer distance oracle.
//!
//! All operations are pure functions over immutable inputs; randomized
//! operations take explicit seeds.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("non-finite coordinate encountered")]
    NonFinite,
    #[error("transform is singular (|det| = {det:e} <= 1e-9)")]
    SingularTransform { det: f64 },
    #[error("bad transform-distribution config: {0}")]
    BadConfig(String),
    #[error("transform selection produced an empty cloud")]
    EmptyResult,
    #[error("requested {m} samples from a cloud of {n} points")]
    BadCount { m: usize, n: usize },
    #[error("radius threshold must be positive, got {0}")]
    BadRadius(f64),
}

/// N×3 point cloud, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyResult);
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        self.points[i]
    }
}

/// Invertible affine transform: `x -> x * matrix + translation` (row vectors).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTransform {
    pub matrix: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl ParamTransform {
    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn rotation_z(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            matrix: [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn rotation_y(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            matrix: [[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]],
            translation: [0.0; 3],
        }
    }

    pub fn rotation_x(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]],
            translation: [0.0; 3],
        }
    }

    pub fn scaling(s: f64) -> Self {
        Self {
            matrix: [[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]],
            translation: [0.0; 3],
        }
    }

    pub fn det(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [
            p[0] * m[0][0] + p[1] * m[1][0] + p[2] * m[2][0] + self.translation[0],
            p[0] * m[0][1] + p[1] * m[1][1] + p[2] * m[2][1] + self.translation[1],
            p[0] * m[0][2] + p[1] * m[1][2] + p[2] * m[2][2] + self.translation[2],
        ]
    }

    /// Compose: apply `self` first, then `other`.
    pub fn then(&self, other: &ParamTransform) -> ParamTransform {
        let mut matrix = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    matrix[i][j] += self.matrix[i][k] * other.matrix[k][j];
                }
            }
        }
        let translation = other.apply_point(self.translation);
        ParamTransform { matrix, translation }
    }
}

/// Augmentation with no matrix form and no inverse: point dropping or resampling.
#[derive(Debug, Clone, PartialEq)]
pub enum NonParamKind {
    /// Keep ceil(keep_ratio * N) points without replacement, original order.
    DropRandom { keep_ratio: f64 },
    /// Draw `target_count` points with replacement.
    Resample { target_count: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonParamTransform {
    pub kind: NonParamKind,
    pub seed: u64,
}

impl NonParamTransform {
    pub fn keep_all() -> Self {
        Self {
            kind: NonParamKind::DropRandom { keep_ratio: 1.0 },
            seed: 0,
        }
    }
}

/// Per-anchor neighbor index lists under a squared-distance threshold.
#[derive(Debug, Clone)]
pub struct NeighborhoodSet {
    /// Indices into the cloud, one list per anchor.
    pub neighbors: Vec<Vec<usize>>,
    /// Squared-distance threshold used to build the set.
    pub radius_sq: f64,
    /// Anchors whose neighborhood was empty and fell back to the single
    /// nearest point.
    pub fallback: Vec<bool>,
}

/// M×3 anchor coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    anchors: Vec<[f64; 3]>,
}

impl AnchorSet {
    pub fn new(anchors: Vec<[f64; 3]>) -> Result<Self, GeometryError> {
        if anchors.is_empty() {
            return Err(GeometryError::EmptyResult);
        }
        if anchors.iter().flatten().any(|c| !c.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self { anchors })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn anchors(&self) -> &[[f64; 3]] {
        &self.anchors
    }

    pub fn anchor(&self, i: usize) -> [f64; 3] {
        self.anchors[i]
    }
}

fn dist_sq(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Center at the centroid and scale so the farthest point has norm 1.
/// Degenerate clouds (all points coincident) are only centered.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<PointCloud, GeometryError> {
    let n = cloud.len() as f64;
    let mut centroid = [0.0; 3];
    for p in cloud.points() {
        for k in 0..3 {
            centroid[k] += p[k];
        }
    }
    for c in &mut centroid {
        *c /= n;
    }
    let mut centered: Vec<[f64; 3]> = cloud
        .points()
        .iter()
        .map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]])
        .collect();
    let max_norm = centered
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0_f64, f64::max);
    if max_norm > 1e-12 {
        for p in &mut centered {
            for c in p.iter_mut() {
                *c /= max_norm;
            }
        }
    }
    PointCloud::new(centered)
}

pub fn apply_param_transform(
    cloud: &PointCloud,
    t: &ParamTransform,
) -> Result<PointCloud, GeometryError> {
    let det = t.det();
    if det.abs() <= 1e-9 {
        return Err(GeometryError::SingularTransform { det });
    }
    PointCloud::new(cloud.points().iter().map(|&p| t.apply_point(p)).collect())
}

/// Inverse transform such that `invert(t)` applied after `t` is the identity.
pub fn invert_param_transform(t: &ParamTransform) -> Result<ParamTransform, GeometryError> {
    let det = t.det();
    if det.abs() <= 1e-9 {
        return Err(GeometryError::SingularTransform { det });
    }
    let m = &t.matrix;
    let inv_det = 1.0 / det;
    let mut inv = [[0.0; 3]; 3];
    inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) * inv_det;
    inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det;
    inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det;
    inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) * inv_det;
    inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det;
    inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det;
    inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) * inv_det;
    inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det;
    inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det;
    // x' = x*M + t  =>  x = (x' - t) * M^-1, so inverse translation = -t * M^-1.
    let tr = t.translation;
    let inv_tr = [
        -(tr[0] * inv[0][0] + tr[1] * inv[1][0] + tr[2] * inv[2][0]),
        -(tr[0] * inv[0][1] + tr[1] * inv[1][1] + tr[2] * inv[2][1]),
        -(tr[0] * inv[0][2] + tr[1] * inv[1][2] + tr[2] * inv[2][2]),
    ];
    Ok(ParamTransform {
        matrix: inv,
        translation: inv_tr,
    })
}

/// Sampling ranges for parameterized transforms. Rotation half-ranges are in
/// radians (angle drawn from `[-half, half]` per axis); scale is uniform in
/// `[scale_min, scale_max]`; translation direction is uniform on the sphere
/// with magnitude in `[0, translation_max]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransformDistribution {
    pub rot_x_half: f64,
    pub rot_y_half: f64,
    pub rot_z_half: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub translation_max: f64,
}

impl TransformDistribution {
    pub fn identity() -> Self {
        Self {
            rot_x_half: 0.0,
            rot_y_half: 0.0,
            rot_z_half: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            translation_max: 0.0,
        }
    }

    fn validate(&self) -> Result<(), GeometryError> {
        if self.rot_x_half < 0.0 || self.rot_y_half < 0.0 || self.rot_z_half < 0.0 {
            return Err(GeometryError::BadConfig(
                "rotation half-range must be >= 0".into(),
            ));
        }
        if self.scale_min > self.scale_max {
            return Err(GeometryError::BadConfig("empty scale range".into()));
        }
        if self.scale_min <= 0.0 && self.scale_max >= 0.0 {
            return Err(GeometryError::BadConfig(
                "scale range must not include 0".into(),
            ));
        }
        if self.translation_max < 0.0 {
            return Err(GeometryError::BadConfig(
                "translation magnitude must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

fn uniform_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

pub fn sample_param_transform(
    config: &TransformDistribution,
    rng_seed: u64,
) -> Result<ParamTransform, GeometryError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let ax = uniform_in(&mut rng, -config.rot_x_half, config.rot_x_half);
    let ay = uniform_in(&mut rng, -config.rot_y_half, config.rot_y_half);
    let az = uniform_in(&mut rng, -config.rot_z_half, config.rot_z_half);
    let s = uniform_in(&mut rng, config.scale_min, config.scale_max);
    let mag = uniform_in(&mut rng, 0.0, config.translation_max);
    let mut t = ParamTransform::rotation_x(ax)
        .then(&ParamTransform::rotation_y(ay))
        .then(&ParamTransform::rotation_z(az))
        .then(&ParamTransform::scaling(s));
    if mag > 0.0 {
        // Rejection-sample a direction from the unit ball.
        let dir = loop {
            let v: [f64; 3] = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if norm > 1e-6 && norm <= 1.0 {
                break [v[0] / norm, v[1] / norm, v[2] / norm];
            }
        };
        t.translation = [dir[0] * mag, dir[1] * mag, dir[2] * mag];
    }
    Ok(t)
}

pub fn apply_nonparam_transform(
    cloud: &PointCloud,
    t: &NonParamTransform,
) -> Result<PointCloud, GeometryError> {
    let n = cloud.len();
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    match &t.kind {
        NonParamKind::DropRandom { keep_ratio } => {
            if !(*keep_ratio > 0.0 && *keep_ratio <= 1.0) {
                return Err(GeometryError::BadConfig(format!(
                    "keep_ratio must be in (0, 1], got {keep_ratio}"
                )));
            }
            let keep = ((keep_ratio * n as f64).ceil() as usize).clamp(1, n);
            if keep == n {
                return Ok(cloud.clone());
            }
            // Partial Fisher-Yates; kept indices sorted so point order is stable.
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..keep {
                let j = rng.gen_range(i..n);
                idx.swap(i, j);
            }
            let mut kept = idx[..keep].to_vec();
            kept.sort_unstable();
            PointCloud::new(kept.iter().map(|&i| cloud.point(i)).collect())
        }
        NonParamKind::Resample { target_count } => {
            if *target_count == 0 {
                return Err(GeometryError::EmptyResult);
            }
            let pts = (0..*target_count)
                .map(|_| cloud.point(rng.gen_range(0..n)))
                .collect();
            PointCloud::new(pts)
        }
    }
}

/// The overall augmentation: non-parameterized after parameterized.
pub fn compose_augment(
    cloud: &PointCloud,
    t1: &ParamTransform,
    t2: &NonParamTransform,
) -> Result<PointCloud, GeometryError> {
    apply_nonparam_transform(&apply_param_transform(cloud, t1)?, t2)
}

/// Greedy farthest point sampling. At each step the point maximizing the
/// minimum distance to the selected set is added; ties break to the lowest
/// index.
pub fn farthest_point_sample(
    cloud: &PointCloud,
    m: usize,
    start_index: usize,
) -> Result<AnchorSet, GeometryError> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(GeometryError::BadCount { m, n });
    }
    if start_index >= n {
        return Err(GeometryError::BadCount { m: start_index, n });
    }
    let mut selected = Vec::with_capacity(m);
    let mut min_dist = vec![f64::INFINITY; n];
    let mut current = start_index;
    for _ in 0..m {
        selected.push(cloud.point(current));
        let cur_pt = cloud.point(current);
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for j in 0..n {
            let d = dist_sq(cur_pt, cloud.point(j));
            if d < min_dist[j] {
                min_dist[j] = d;
            }
            if min_dist[j] > best_d {
                best_d = min_dist[j];
                best = j;
            }
        }
        current = best;
    }
    AnchorSet::new(selected)
}

/// Neighborhoods `N_i = { j : ||a_i - x_j||^2 < r }`. The threshold applies to
/// the squared distance; use [`metric_radius_to_threshold`] to convert a
/// metric radius. Empty neighborhoods fall back to the single nearest point
/// and are flagged.
pub fn radius_neighbors(
    anchors: &AnchorSet,
    cloud: &PointCloud,
    r: f64,
) -> Result<NeighborhoodSet, GeometryError> {
    if r <= 0.0 {
        return Err(GeometryError::BadRadius(r));
    }
    let mut neighbors = Vec::with_capacity(anchors.len());
    let mut fallback = Vec::with_capacity(anchors.len());
    for &a in anchors.anchors() {
        let mut list = Vec::new();
        let mut nearest = 0;
        let mut nearest_d = f64::INFINITY;
        for (j, &x) in cloud.points().iter().enumerate() {
            let d = dist_sq(a, x);
            if d < r {
                list.push(j);
            }
            if d < nearest_d {
                nearest_d = d;
                nearest = j;
            }
        }
        if list.is_empty() {
            list.push(nearest);
            fallback.push(true);
        } else {
            fallback.push(false);
        }
        neighbors.push(list);
    }
    Ok(NeighborhoodSet {
        neighbors,
        radius_sq: r,
        fallback,
    })
}

/// Convert a metric radius to the squared-distance threshold used by
/// [`radius_neighbors`].
pub fn metric_radius_to_threshold(rho: f64) -> f64 {
    rho * rho
}

/// Symmetric Chamfer distance between anchors and a cloud:
/// mean of per-anchor nearest squared distances plus mean of per-point
/// nearest squared distances.
pub fn chamfer_distance(a: &AnchorSet, x: &PointCloud) -> f64 {
    let term_a: f64 = a
        .anchors()
        .iter()
        .map(|&ai| {
            x.points()
                .iter()
                .map(|&xj| dist_sq(ai, xj))
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / a.len() as f64;
    let term_x: f64 = x
        .points()
        .iter()
        .map(|&xi| {
            a.anchors()
                .iter()
                .map(|&aj| dist_sq(aj, xi))
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / x.len() as f64;
    term_a + term_x
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    #[test]
    fn normalize_centers_and_scales() {
        let c = cloud(&[[5.0, 5.0, 5.0]]);
        let out = normalize_cloud(&c).unwrap();
        assert_eq!(out.point(0), [0.0, 0.0, 0.0]);

        // Cube corners at +-2: centered already, max norm becomes 1.
        let mut corners = Vec::new();
        for &x in &[-2.0, 2.0] {
            for &y in &[-2.0, 2.0] {
                for &z in &[-2.0, 2.0] {
                    corners.push([x, y, z]);
                }
            }
        }
        let out = normalize_cloud(&cloud(&corners)).unwrap();
        let max_norm = out
            .points()
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0_f64, f64::max);
        assert!((max_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nonfinite_rejected() {
        assert_eq!(
            PointCloud::new(vec![[f64::NAN, 0.0, 0.0]]).unwrap_err(),
            GeometryError::NonFinite
        );
    }

    #[test]
    fn param_transform_basics() {
        let c = cloud(&[[1.0, 0.0, 0.0]]);
        let id = ParamTransform::identity();
        assert_eq!(apply_param_transform(&c, &id).unwrap(), c);

        let rot = ParamTransform::rotation_z(std::f64::consts::FRAC_PI_2);
        let out = apply_param_transform(&c, &rot).unwrap();
        assert!((out.point(0)[0]).abs() < 1e-12);
        assert!((out.point(0)[1] - 1.0).abs() < 1e-12);

        let sc = ParamTransform::scaling(2.0);
        let out = apply_param_transform(&cloud(&[[1.0, 1.0, 1.0]]), &sc).unwrap();
        assert_eq!(out.point(0), [2.0, 2.0, 2.0]);
    }

    #[test]
    fn singular_transform_rejected() {
        let t = ParamTransform {
            matrix: [[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        };
        assert!(matches!(
            apply_param_transform(&cloud(&[[1.0, 0.0, 0.0]]), &t),
            Err(GeometryError::SingularTransform { .. })
        ));
        assert!(invert_param_transform(&t).is_err());
    }

    #[test]
    fn inverse_is_matrix_inverse() {
        let t = ParamTransform {
            matrix: [[1.0, 2.0, 0.5], [-0.3, 1.5, 0.2], [0.7, -0.1, 2.0]],
            translation: [0.3, -0.4, 0.1],
        };
        let inv = invert_param_transform(&t).unwrap();
        let prod = t.then(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((prod.matrix[i][j] - expect).abs() < 1e-9);
            }
            assert!(prod.translation[i].abs() < 1e-9);
        }
    }

    #[test]
    fn sample_transform_deterministic_and_in_range() {
        let dist = TransformDistribution::identity();
        let t = sample_param_transform(&dist, 7).unwrap();
        assert_eq!(t, ParamTransform::identity());

        let dist = TransformDistribution {
            rot_x_half: 0.4,
            rot_y_half: 0.4,
            rot_z_half: std::f64::consts::PI,
            scale_min: 0.5,
            scale_max: 1.5,
            translation_max: 0.2,
        };
        let a = sample_param_transform(&dist, 42).unwrap();
        let b = sample_param_transform(&dist, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_param_transform(&dist, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sample_transform_bad_config() {
        let mut dist = TransformDistribution::identity();
        dist.scale_min = 1.5;
        dist.scale_max = 0.5;
        assert!(matches!(
            sample_param_transform(&dist, 0),
            Err(GeometryError::BadConfig(_))
        ));
        dist.scale_min = -0.5;
        dist.scale_max = 0.5;
        assert!(matches!(
            sample_param_transform(&dist, 0),
            Err(GeometryError::BadConfig(_))
        ));
    }

    #[test]
    fn rotation_angle_monte_carlo_mean() {
        // z-angle drawn from [-pi, pi]; |angle| should average pi/2 within 10%.
        let dist = TransformDistribution {
            rot_x_half: 0.0,
            rot_y_half: 0.0,
            rot_z_half: std::f64::consts::PI,
            scale_min: 1.0,
            scale_max: 1.0,
            translation_max: 0.0,
        };
        let mut sum = 0.0;
        let n = 1000;
        for seed in 0..n {
            let t = sample_param_transform(&dist, seed).unwrap();
            // Recover |theta| from the trace of the z-rotation block.
            let angle = t.matrix[0][0].clamp(-1.0, 1.0).acos();
            sum += angle;
        }
        let mean = sum / n as f64;
        let half = std::f64::consts::FRAC_PI_2;
        assert!((mean - half).abs() < 0.1 * half, "mean angle {mean}");
    }

    #[test]
    fn drop_random_counts_and_membership() {
        let pts: Vec<[f64; 3]> = (0..100).map(|i| [i as f64, 0.0, 0.0]).collect();
        let c = cloud(&pts);
        let keep_all = NonParamTransform::keep_all();
        assert_eq!(apply_nonparam_transform(&c, &keep_all).unwrap(), c);

        let half = NonParamTransform {
            kind: NonParamKind::DropRandom { keep_ratio: 0.5 },
            seed: 3,
        };
        let out = apply_nonparam_transform(&c, &half).unwrap();
        assert_eq!(out.len(), 50);
        for p in out.points() {
            assert!(pts.contains(p));
        }
    }

    #[test]
    fn resample_membership() {
        let pts: Vec<[f64; 3]> = (0..100).map(|i| [i as f64, 1.0, 2.0]).collect();
        let c = cloud(&pts);
        let t = NonParamTransform {
            kind: NonParamKind::Resample { target_count: 200 },
            seed: 11,
        };
        let out = apply_nonparam_transform(&c, &t).unwrap();
        assert_eq!(out.len(), 200);
        for p in out.points() {
            assert!(pts.contains(p));
        }
    }

    #[test]
    fn compose_order_matters() {
        // Rotation then resample differs from resample then rotation when the
        // resample duplicates points: the composed output must be a multiset
        // of rotated input points.
        let c = cloud(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]]);
        let rot = ParamTransform::rotation_z(std::f64::consts::FRAC_PI_2);
        let drop = NonParamTransform {
            kind: NonParamKind::DropRandom { keep_ratio: 0.5 },
            seed: 5,
        };
        let out = compose_augment(&c, &rot, &drop).unwrap();
        assert_eq!(out.len(), 2);
        let rotated = apply_param_transform(&c, &rot).unwrap();
        for p in out.points() {
            assert!(rotated
                .points()
                .iter()
                .any(|q| dist_sq(*p, *q) < 1e-18));
        }
        // Other order: dropping first then rotating yields rotated subset too,
        // but the two pipelines select different point sets in general.
        let dropped = apply_nonparam_transform(&c, &drop).unwrap();
        let other = apply_param_transform(&dropped, &rot).unwrap();
        assert_eq!(other.len(), 2);
    }

    #[test]
    fn fps_small_cases() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let a = farthest_point_sample(&c, 2, 0).unwrap();
        assert_eq!(a.anchors(), &[[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);

        let a = farthest_point_sample(&c, 1, 2).unwrap();
        assert_eq!(a.anchors(), &[[2.0, 0.0, 0.0]]);

        let a = farthest_point_sample(&c, 4, 0).unwrap();
        assert_eq!(a.len(), 4);

        assert!(matches!(
            farthest_point_sample(&c, 5, 0),
            Err(GeometryError::BadCount { .. })
        ));
    }

    /// Brute-force re-implementation of the greedy FPS rule.
    fn fps_oracle(cloud: &PointCloud, m: usize, start: usize) -> Vec<usize> {
        let mut sel = vec![start];
        while sel.len() < m {
            let mut best = usize::MAX;
            let mut best_d = f64::NEG_INFINITY;
            for j in 0..cloud.len() {
                let d = sel
                    .iter()
                    .map(|&s| dist_sq(cloud.point(s), cloud.point(j)))
                    .fold(f64::INFINITY, f64::min);
                if d > best_d {
                    best_d = d;
                    best = j;
                }
            }
            sel.push(best);
        }
        sel
    }

    proptest! {
        #[test]
        fn fps_matches_oracle(
            pts in proptest::collection::vec(
                [(-1.0..1.0f64), (-1.0..1.0f64), (-1.0..1.0f64)], 1..10),
            m in 1usize..5,
            start in 0usize..10,
        ) {
            let c = PointCloud::new(pts).unwrap();
            let m = m.min(c.len());
            let start = start % c.len();
            let got = farthest_point_sample(&c, m, start).unwrap();
            let want = fps_oracle(&c, m, start);
            for (g, &w) in got.anchors().iter().zip(&want) {
                prop_assert_eq!(*g, c.point(w));
            }
        }

        #[test]
        fn round_trip_transform(
            pts in proptest::collection::vec(
                [(-1.0..1.0f64), (-1.0..1.0f64), (-1.0..1.0f64)], 1..8),
            seed in 0u64..1000,
        ) {
            let c = PointCloud::new(pts).unwrap();
            let dist = TransformDistribution {
                rot_x_half: 1.0, rot_y_half: 1.0, rot_z_half: 3.0,
                scale_min: 0.5, scale_max: 2.0, translation_max: 0.5,
            };
            let t = sample_param_transform(&dist, seed).unwrap();
            let inv = invert_param_transform(&t).unwrap();
            let rt = apply_param_transform(&apply_param_transform(&c, &t).unwrap(), &inv).unwrap();
            for (a, b) in rt.points().iter().zip(c.points()) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn chamfer_matches_brute_force(
            a_pts in proptest::collection::vec(
                [(-1.0..1.0f64), (-1.0..1.0f64), (-1.0..1.0f64)], 1..8),
            x_pts in proptest::collection::vec(
                [(-1.0..1.0f64), (-1.0..1.0f64), (-1.0..1.0f64)], 1..8),
        ) {
            let a = a_pts;
            let x = x_pts;
            let anchors = AnchorSet::new(a.clone()).unwrap();
            let cloud = PointCloud::new(x.clone()).unwrap();
            let got = chamfer_distance(&anchors, &cloud);

            // Double-loop brute force.
            let mut t1 = 0.0;
            for &ai in &a {
                let mut best = f64::INFINITY;
                for &xj in &x {
                    let d = dist_sq(ai, xj);
                    if d < best { best = d; }
                }
                t1 += best;
            }
            let mut t2 = 0.0;
            for &xi in &x {
                let mut best = f64::INFINITY;
                for &aj in &a {
                    let d = dist_sq(aj, xi);
                    if d < best { best = d; }
                }
                t2 += best;
            }
            let want = t1 / a.len() as f64 + t2 / x.len() as f64;
            prop_assert!((got - want).abs() < 1e-12);
        }

        #[test]
        fn chamfer_permutation_invariant(
            pts in proptest::collection::vec(
                [(-1.0..1.0f64), (-1.0..1.0f64), (-1.0..1.0f64)], 2..8),
        ) {
            let mut rev = pts.clone();
            rev.reverse();
            let a = AnchorSet::new(pts.clone()).unwrap();
            let a_rev = AnchorSet::new(rev).unwrap();
            let x = PointCloud::new(pts).unwrap();
            prop_assert!((chamfer_distance(&a, &x)).abs() < 1e-15);
            prop_assert!((chamfer_distance(&a_rev, &x)).abs() < 1e-15);
        }

        #[test]
        fn nonparam_never_invents_points(
            pts in proptest::collection::vec(
                [(-1.0..1.0f64), (-1.0..1.0f64), (-1.0..1.0f64)], 1..20),
            seed in 0u64..100,
            keep in 0.01f64..1.0,
        ) {
            let c = PointCloud::new(pts.clone()).unwrap();
            let t = NonParamTransform {
                kind: NonParamKind::DropRandom { keep_ratio: keep }, seed,
            };
            let out = apply_nonparam_transform(&c, &t).unwrap();
            for p in out.points() {
                prop_assert!(pts.contains(p));
            }
        }
    }

    #[test]
    fn chamfer_hand_case() {
        let a = AnchorSet::new(vec![[0.0, 0.0, 0.0]]).unwrap();
        let x = cloud(&[[1.0, 0.0, 0.0]]);
        assert!((chamfer_distance(&a, &x) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn radius_neighbors_literal_threshold() {
        // Threshold compares the SQUARED distance to r.
        let anchors = AnchorSet::new(vec![[0.0, 0.0, 0.0]]).unwrap();
        let c = cloud(&[[0.3, 0.0, 0.0], [0.9, 0.0, 0.0]]);
        let nbrs = radius_neighbors(&anchors, &c, 0.25).unwrap();
        assert_eq!(nbrs.neighbors[0], vec![0]);
        assert!(!nbrs.fallback[0]);

        let all = radius_neighbors(&anchors, &c, 1e6).unwrap();
        assert_eq!(all.neighbors[0], vec![0, 1]);
    }

    #[test]
    fn radius_neighbors_fallback() {
        let anchors = AnchorSet::new(vec![[10.0, 0.0, 0.0]]).unwrap();
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let nbrs = radius_neighbors(&anchors, &c, 0.01).unwrap();
        assert_eq!(nbrs.neighbors[0], vec![1]);
        assert!(nbrs.fallback[0]);
        assert!(radius_neighbors(&anchors, &c, 0.0).is_err());
    }
}
