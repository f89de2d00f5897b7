//! Synthetic object-centric scenes: procedural textured solids rendered from
//! a hemisphere of viewpoints, split into two camera blocks, each block
//! perturbed by a random rigid transform so the blocks live in different
//! coordinate frames.

pub mod io;
pub mod render;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::geom::{CameraPose, Intrinsics, RigidTransform};
use crate::{Error, Result};

/// Half side length of the scene bounding cube (unit cube centered at origin).
pub const SCENE_HALF_EXTENT: f64 = 0.5;

/// Fixed background color composited behind every rendered ray.
pub const BACKGROUND: [f32; 3] = [1.0, 1.0, 1.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Cuboid { min: [f64; 3], max: [f64; 3] },
    /// Capped cylinder with its axis along z.
    Cylinder { center: [f64; 3], radius: f64, half_height: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Albedo {
    Solid([f64; 3]),
    /// 3D checkerboard in world coordinates.
    Checker { a: [f64; 3], b: [f64; 3], cell: f64 },
    /// Stripes perpendicular to the given axis.
    Stripes { a: [f64; 3], b: [f64; 3], period: f64, axis: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: Albedo,
}

/// Triangle mesh with optional per-vertex colors (for real assets).
#[derive(Debug, Clone, Default)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

#[derive(Debug, Clone)]
pub enum Geometry {
    Primitives(Vec<Primitive>),
    Mesh(TriMesh),
}

/// A renderable object normalized to the unit cube.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub geometry: Geometry,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let eps = 1e-9;
        let inside = |p: &[f64; 3]| p.iter().all(|v| v.abs() <= SCENE_HALF_EXTENT + eps);
        match &self.geometry {
            Geometry::Primitives(prims) => {
                if prims.is_empty() {
                    return Err(Error::invalid("scene has no primitives"));
                }
                for p in prims {
                    let ok = match p.shape {
                        Shape::Sphere { center, radius } => {
                            center.iter().all(|v| v.abs() + radius <= SCENE_HALF_EXTENT + eps)
                        }
                        Shape::Cuboid { min, max } => {
                            inside(&min) && inside(&max) && min.iter().zip(&max).all(|(a, b)| a < b)
                        }
                        Shape::Cylinder { center, radius, half_height } => {
                            center[0].abs() + radius <= SCENE_HALF_EXTENT + eps
                                && center[1].abs() + radius <= SCENE_HALF_EXTENT + eps
                                && center[2].abs() + half_height <= SCENE_HALF_EXTENT + eps
                        }
                    };
                    if !ok {
                        return Err(Error::invalid("primitive outside the unit bounding box"));
                    }
                }
            }
            Geometry::Mesh(mesh) => {
                if mesh.faces.is_empty() {
                    return Err(Error::invalid("mesh has no faces"));
                }
                if !mesh.vertices.iter().all(inside) {
                    return Err(Error::invalid("mesh vertex outside the unit bounding box"));
                }
            }
        }
        Ok(())
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Samples a procedural composite of 2-5 colored primitives with distinct
/// albedo patterns, all inside the unit cube.
pub fn random_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n: usize = rng.random_range(2..=5);
    let hue0: f64 = rng.random_range(0.0..1.0);
    let mut prims = Vec::with_capacity(n);
    for i in 0..n {
        let base = hsv_to_rgb(
            hue0 + i as f64 * 0.371,
            rng.random_range(0.75..1.0),
            rng.random_range(0.65..0.95),
        );
        let alt = hsv_to_rgb(
            hue0 + i as f64 * 0.371 + 0.5,
            rng.random_range(0.6..0.9),
            rng.random_range(0.35..0.6),
        );
        let albedo = match rng.random_range(0..3) {
            0 => Albedo::Solid(base),
            1 => Albedo::Checker { a: base, b: alt, cell: rng.random_range(0.05..0.12) },
            _ => Albedo::Stripes {
                a: base,
                b: alt,
                period: rng.random_range(0.06..0.15),
                axis: rng.random_range(0..3),
            },
        };
        // First primitive is large and near the center so the object reads as
        // one connected solid; later ones attach around it.
        let scale = if i == 0 { rng.random_range(0.16..0.24) } else { rng.random_range(0.08..0.16) };
        let place = |rng: &mut ChaCha12Rng, extent: f64| -> [f64; 3] {
            let room = SCENE_HALF_EXTENT - extent;
            let spread = if i == 0 { 0.35 } else { 1.0 };
            std::array::from_fn(|_| rng.random_range(-room * spread..room * spread))
        };
        let shape = match rng.random_range(0..3) {
            0 => {
                let c = place(&mut rng, scale);
                Shape::Sphere { center: c, radius: scale }
            }
            1 => {
                let hx = scale;
                let hy = scale * rng.random_range(0.5..1.0);
                let hz = scale * rng.random_range(0.5..1.0);
                let c = [
                    rng.random_range(-(SCENE_HALF_EXTENT - hx)..SCENE_HALF_EXTENT - hx),
                    rng.random_range(-(SCENE_HALF_EXTENT - hy)..SCENE_HALF_EXTENT - hy),
                    rng.random_range(-(SCENE_HALF_EXTENT - hz)..SCENE_HALF_EXTENT - hz),
                ];
                Shape::Cuboid {
                    min: [c[0] - hx, c[1] - hy, c[2] - hz],
                    max: [c[0] + hx, c[1] + hy, c[2] + hz],
                }
            }
            _ => {
                let r = scale * rng.random_range(0.5..0.9);
                let hh = scale;
                let c = [
                    rng.random_range(-(SCENE_HALF_EXTENT - r)..SCENE_HALF_EXTENT - r),
                    rng.random_range(-(SCENE_HALF_EXTENT - r)..SCENE_HALF_EXTENT - r),
                    rng.random_range(-(SCENE_HALF_EXTENT - hh)..SCENE_HALF_EXTENT - hh),
                ];
                Shape::Cylinder { center: c, radius: r, half_height: hh }
            }
        };
        prims.push(Primitive { shape, albedo });
    }
    let spec = SceneSpec { geometry: Geometry::Primitives(prims) };
    debug_assert!(spec.validate().is_ok());
    spec
}

/// One image block with its poses and the transform back to the shared frame.
#[derive(Debug, Clone)]
pub struct BlockDataset {
    pub images: Vec<ndarray::Array3<f32>>,
    pub poses: Vec<CameraPose>,
    pub intrinsics: Intrinsics,
    /// Maps block-local coordinates to the original shared frame.
    pub gt_transform: RigidTransform,
}

impl BlockDataset {
    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.poses.len() {
            return Err(Error::invalid("image/pose count mismatch"));
        }
        if self.poses.is_empty() {
            return Err(Error::invalid("empty block"));
        }
        self.intrinsics.validate()?;
        self.gt_transform.validate()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrajectoryConfig {
    pub radius_min: f64,
    pub radius_max: f64,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            radius_min: 2.2,
            radius_max: 2.8,
            elevation_min_deg: 10.0,
            elevation_max_deg: 70.0,
        }
    }
}

/// Poses looking at the origin from an upper-hemisphere shell. Azimuths follow
/// the golden angle so any contiguous arc stays well spread; radius and
/// elevation are jittered inside the configured bands. Deterministic per seed.
pub fn generate_trajectory(
    n_views: usize,
    seed: u64,
    cfg: &TrajectoryConfig,
) -> Result<Vec<CameraPose>> {
    if n_views < 4 {
        return Err(Error::invalid(format!("n_views must be >= 4, got {n_views}")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    let mut poses = Vec::with_capacity(n_views);
    for i in 0..n_views {
        let azimuth = i as f64 * golden + rng.random_range(-0.05..0.05);
        let elev = rng
            .random_range(cfg.elevation_min_deg..cfg.elevation_max_deg)
            .to_radians();
        let radius = rng.random_range(cfg.radius_min..cfg.radius_max);
        let center = Vector3::new(
            radius * elev.cos() * azimuth.cos(),
            radius * elev.cos() * azimuth.sin(),
            radius * elev.sin(),
        );
        poses.push(CameraPose::look_at(center, Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0))?);
    }
    Ok(poses)
}

/// KMeans over camera centers (k-means++ init, Lloyd iterations, ties broken
/// toward the lower cluster index). Returns a partition of pose indices into
/// `k` non-empty clusters.
pub fn kmeans_split(poses: &[CameraPose], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if poses.len() < k {
        return Err(Error::invalid(format!("{} poses but k = {k}", poses.len())));
    }
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    let pts: Vec<Vector3<f64>> = poses.iter().map(|p| p.center).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centers: Vec<Vector3<f64>> = Vec::with_capacity(k);
    centers.push(pts[rng.random_range(0..pts.len())]);
    while centers.len() < k {
        let d2: Vec<f64> = pts
            .iter()
            .map(|p| centers.iter().map(|c| (p - c).norm_squared()).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..pts.len())
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = pts.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        };
        centers.push(pts[next]);
    }

    let mut assign = vec![0usize; pts.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = (p - center).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        // refill empty clusters with the point farthest from its center
        for c in 0..k {
            if !assign.iter().any(|&a| a == c) {
                let (mut far_i, mut far_d) = (usize::MAX, -1.0);
                for (i, p) in pts.iter().enumerate() {
                    let d = (p - centers[assign[i]]).norm_squared();
                    if d > far_d && assign.iter().filter(|&&a| a == assign[i]).count() > 1 {
                        far_d = d;
                        far_i = i;
                    }
                }
                if far_i != usize::MAX {
                    assign[far_i] = c;
                    changed = true;
                }
            }
        }
        for c in 0..k {
            let members: Vec<usize> = (0..pts.len()).filter(|&i| assign[i] == c).collect();
            if !members.is_empty() {
                let sum: Vector3<f64> = members.iter().map(|&i| pts[i]).sum();
                centers[c] = sum / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }

    let clusters: Vec<Vec<usize>> =
        (0..k).map(|c| (0..pts.len()).filter(|&i| assign[i] == c).collect()).collect();
    debug_assert!(clusters.iter().all(|c| !c.is_empty()));
    Ok(clusters)
}

/// Left-multiplies every pose of the block by a random rigid transform
/// (rotation uniform on SO(3), translation uniform in [-0.5, 0.5]^3) and
/// returns the transform mapping the new block-local frame back to the
/// original shared frame. With `force_identity` the block is returned as-is
/// together with an identity transform.
pub fn apply_random_rigid(
    block: &BlockDataset,
    seed: u64,
    force_identity: bool,
) -> (BlockDataset, RigidTransform) {
    let t = if force_identity {
        RigidTransform::identity()
    } else {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        RigidTransform::sample(&mut rng, SCENE_HALF_EXTENT)
    };
    let gt = t.inverse();
    let mut out = block.clone();
    out.poses = block.poses.iter().map(|p| t.apply_to_pose(p)).collect();
    out.gt_transform = block.gt_transform.compose(&gt);
    (out, gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_respects_radius_band_and_count() {
        let cfg = TrajectoryConfig::default();
        let poses = generate_trajectory(120, 0, &cfg).unwrap();
        assert_eq!(poses.len(), 120);
        for p in &poses {
            let r = p.center.norm();
            assert!(r >= cfg.radius_min - 1e-9 && r <= cfg.radius_max + 1e-9, "radius {r}");
            assert!(p.center.z > 0.0, "below hemisphere");
        }
    }

    #[test]
    fn trajectory_rotations_orthonormal_for_minimum_views() {
        let poses = generate_trajectory(4, 0, &TrajectoryConfig::default()).unwrap();
        assert_eq!(poses.len(), 4);
        for p in &poses {
            p.validate().unwrap();
        }
    }

    #[test]
    fn trajectory_is_deterministic_per_seed() {
        let cfg = TrajectoryConfig::default();
        let a = generate_trajectory(16, 42, &cfg).unwrap();
        let b = generate_trajectory(16, 42, &cfg).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.to_row_major(), pb.to_row_major(), "not bitwise identical");
        }
    }

    #[test]
    fn trajectory_rejects_too_few_views() {
        assert!(generate_trajectory(3, 0, &TrajectoryConfig::default()).is_err());
    }

    #[test]
    fn kmeans_recovers_antipodal_clusters() {
        let mut poses = Vec::new();
        for i in 0..10 {
            let jitter = i as f64 * 0.01;
            poses.push(
                CameraPose::look_at(
                    Vector3::new(2.0 + jitter, 0.1 * jitter, 1.0),
                    Vector3::zeros(),
                    Vector3::z(),
                )
                .unwrap(),
            );
            poses.push(
                CameraPose::look_at(
                    Vector3::new(-2.0 - jitter, -0.1 * jitter, 1.0),
                    Vector3::zeros(),
                    Vector3::z(),
                )
                .unwrap(),
            );
        }
        let clusters = kmeans_split(&poses, 2, 0).unwrap();
        assert_eq!(clusters.len(), 2);
        for c in &clusters {
            let signs: Vec<f64> = c.iter().map(|&i| poses[i].center.x.signum()).collect();
            assert!(signs.windows(2).all(|w| w[0] == w[1]), "mixed cluster");
        }
    }

    #[test]
    fn kmeans_partitions_every_index_once() {
        let poses = generate_trajectory(120, 7, &TrajectoryConfig::default()).unwrap();
        let clusters = kmeans_split(&poses, 2, 7).unwrap();
        let mut seen = vec![false; poses.len()];
        for c in &clusters {
            assert!(!c.is_empty());
            for &i in c {
                assert!(!seen[i], "index {i} appears twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn kmeans_identical_centers_yields_valid_partition() {
        let pose = CameraPose::look_at(Vector3::new(2.0, 0.0, 1.0), Vector3::zeros(), Vector3::z())
            .unwrap();
        let poses = vec![pose; 6];
        let clusters = kmeans_split(&poses, 2, 3).unwrap();
        assert_eq!(clusters.len(), 2);
        assert!(clusters.iter().all(|c| !c.is_empty()));
        let total: usize = clusters.iter().map(|c| c.len()).sum();
        assert_eq!(total, 6);
    }

    #[test]
    fn kmeans_rejects_fewer_poses_than_k() {
        let pose = CameraPose::look_at(Vector3::new(2.0, 0.0, 1.0), Vector3::zeros(), Vector3::z())
            .unwrap();
        assert!(kmeans_split(&[pose], 2, 0).is_err());
    }

    fn tiny_block() -> BlockDataset {
        let poses = generate_trajectory(5, 1, &TrajectoryConfig::default()).unwrap();
        BlockDataset {
            images: vec![ndarray::Array3::zeros((4, 4, 3)); 5],
            poses,
            intrinsics: Intrinsics::centered(4, 4, 4.0),
            gt_transform: RigidTransform::identity(),
        }
    }

    #[test]
    fn random_rigid_identity_flag_changes_nothing() {
        let block = tiny_block();
        let (out, gt) = apply_random_rigid(&block, 9, true);
        assert_eq!(gt.to_row_major(), RigidTransform::identity().to_row_major());
        for (a, b) in block.poses.iter().zip(&out.poses) {
            assert_eq!(a.to_row_major(), b.to_row_major());
        }
    }

    #[test]
    fn random_rigid_round_trips_poses() {
        let block = tiny_block();
        let (out, gt) = apply_random_rigid(&block, 11, false);
        for (orig, moved) in block.poses.iter().zip(&out.poses) {
            let back = gt.apply_to_pose(moved);
            assert!((back.rotation - orig.rotation).abs().max() < 1e-9);
            assert!((back.center - orig.center).norm() < 1e-9);
        }
    }

    #[test]
    fn random_rigid_preserves_pairwise_center_distances() {
        let block = tiny_block();
        let (out, _) = apply_random_rigid(&block, 13, false);
        for i in 0..block.poses.len() {
            for j in i + 1..block.poses.len() {
                let before = (block.poses[i].center - block.poses[j].center).norm();
                let after = (out.poses[i].center - out.poses[j].center).norm();
                assert!((before - after).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn random_scenes_stay_inside_unit_cube() {
        for seed in 0..30 {
            random_scene(seed).validate().unwrap();
        }
    }
}
