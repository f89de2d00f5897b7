//! Minimal deterministic ray tracer for the synthetic scenes: nearest-hit
//! primitive intersection, flat albedo shading, constant background.

use ndarray::Array3;
use rayon::prelude::*;

use super::{Albedo, Geometry, Primitive, SceneSpec, Shape, TriMesh, BACKGROUND};
use crate::geom::{CameraPose, Intrinsics};
use crate::{Error, Result};

const T_EPS: f64 = 1e-9;

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn at(o: [f64; 3], d: [f64; 3], t: f64) -> [f64; 3] {
    [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]
}

impl Shape {
    /// Nearest positive intersection parameter, if any.
    pub fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        match *self {
            Shape::Sphere { center, radius } => {
                let oc = sub(o, center);
                let b = dot(oc, d);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = -b - sq;
                let t1 = -b + sq;
                if t0 > T_EPS {
                    Some(t0)
                } else if t1 > T_EPS {
                    Some(t1)
                } else {
                    None
                }
            }
            Shape::Cuboid { min, max } => {
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / d[a];
                    let (t0, t1) = {
                        let t0 = (min[a] - o[a]) * inv;
                        let t1 = (max[a] - o[a]) * inv;
                        if t0 < t1 {
                            (t0, t1)
                        } else {
                            (t1, t0)
                        }
                    };
                    t_near = t_near.max(t0);
                    t_far = t_far.min(t1);
                    if t_near > t_far {
                        return None;
                    }
                }
                if t_near > T_EPS {
                    Some(t_near)
                } else if t_far > T_EPS {
                    Some(t_far)
                } else {
                    None
                }
            }
            Shape::Cylinder { center, radius, half_height } => {
                let zmin = center[2] - half_height;
                let zmax = center[2] + half_height;
                let mut best: Option<f64> = None;
                let mut consider = |t: f64| {
                    if t > T_EPS && best.is_none_or(|b| t < b) {
                        best = Some(t);
                    }
                };
                // lateral surface
                let ox = o[0] - center[0];
                let oy = o[1] - center[1];
                let a = d[0] * d[0] + d[1] * d[1];
                if a > 1e-15 {
                    let b = ox * d[0] + oy * d[1];
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        for t in [(-b - sq) / a, (-b + sq) / a] {
                            let z = o[2] + t * d[2];
                            if z >= zmin && z <= zmax {
                                consider(t);
                            }
                        }
                    }
                }
                // caps
                if d[2].abs() > 1e-15 {
                    for zc in [zmin, zmax] {
                        let t = (zc - o[2]) / d[2];
                        let p = at(o, d, t);
                        let dx = p[0] - center[0];
                        let dy = p[1] - center[1];
                        if dx * dx + dy * dy <= radius * radius {
                            consider(t);
                        }
                    }
                }
                best
            }
        }
    }
}

impl Albedo {
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        match *self {
            Albedo::Solid(c) => c,
            Albedo::Checker { a, b, cell } => {
                let parity = (0..3)
                    .map(|i| (p[i] / cell).floor() as i64)
                    .sum::<i64>()
                    .rem_euclid(2);
                if parity == 0 {
                    a
                } else {
                    b
                }
            }
            Albedo::Stripes { a, b, period, axis } => {
                if ((p[axis] / period).floor() as i64).rem_euclid(2) == 0 {
                    a
                } else {
                    b
                }
            }
        }
    }
}

fn intersect_mesh(mesh: &TriMesh, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3])> {
    let mut best: Option<(f64, [f64; 3])> = None;
    for face in &mesh.faces {
        let v0 = mesh.vertices[face[0]];
        let v1 = mesh.vertices[face[1]];
        let v2 = mesh.vertices[face[2]];
        // Moeller-Trumbore
        let e1 = sub(v1, v0);
        let e2 = sub(v2, v0);
        let pvec = cross(d, e2);
        let det = dot(e1, pvec);
        if det.abs() < 1e-15 {
            continue;
        }
        let inv_det = 1.0 / det;
        let tvec = sub(o, v0);
        let u = dot(tvec, pvec) * inv_det;
        if !(0.0..=1.0).contains(&u) {
            continue;
        }
        let qvec = cross(tvec, e1);
        let v = dot(d, qvec) * inv_det;
        if v < 0.0 || u + v > 1.0 {
            continue;
        }
        let t = dot(e2, qvec) * inv_det;
        if t > T_EPS && best.is_none_or(|(bt, _)| t < bt) {
            let color = if mesh.colors.len() == mesh.vertices.len() {
                let (c0, c1, c2) = (mesh.colors[face[0]], mesh.colors[face[1]], mesh.colors[face[2]]);
                let w0 = 1.0 - u - v;
                std::array::from_fn(|i| w0 * c0[i] + u * c1[i] + v * c2[i])
            } else {
                [0.6, 0.6, 0.6]
            };
            best = Some((t, color));
        }
    }
    best
}

/// Color of the nearest surface hit by the ray, if the scene is hit at all.
pub fn trace(scene: &SceneSpec, o: [f64; 3], d: [f64; 3]) -> Option<[f64; 3]> {
    match &scene.geometry {
        Geometry::Primitives(prims) => {
            let mut best: Option<(f64, &Primitive)> = None;
            for prim in prims {
                if let Some(t) = prim.shape.intersect(o, d) {
                    if best.is_none_or(|(bt, _)| t < bt) {
                        best = Some((t, prim));
                    }
                }
            }
            best.map(|(t, prim)| prim.albedo.sample(at(o, d, t)))
        }
        Geometry::Mesh(mesh) => intersect_mesh(mesh, o, d).map(|(_, c)| c),
    }
}

/// Renders one RGB image per pose; a pure function of its inputs.
pub fn render_views(
    scene: &SceneSpec,
    poses: &[CameraPose],
    intr: &Intrinsics,
) -> Result<Vec<Array3<f32>>> {
    scene.validate()?;
    intr.validate()?;
    if poses.is_empty() {
        return Err(Error::invalid("no poses to render"));
    }
    for p in poses {
        if p.center.norm() < 1e-12 {
            return Err(Error::invalid("degenerate pose: camera center at origin"));
        }
    }
    Ok(poses.par_iter().map(|pose| render_single(scene, pose, intr)).collect())
}

pub fn render_single(scene: &SceneSpec, pose: &CameraPose, intr: &Intrinsics) -> Array3<f32> {
    let (h, w) = (intr.height as usize, intr.width as usize);
    let mut img = Array3::<f32>::zeros((h, w, 3));
    let o = [pose.center.x, pose.center.y, pose.center.z];
    for i in 0..h {
        for j in 0..w {
            let dir = pose.pixel_ray(intr, j as f64 + 0.5, i as f64 + 0.5);
            let color = trace(scene, o, [dir.x, dir.y, dir.z]);
            let rgb = match color {
                Some(c) => [c[0] as f32, c[1] as f32, c[2] as f32],
                None => BACKGROUND,
            };
            for (ch, &v) in rgb.iter().enumerate() {
                img[[i, j, ch]] = v;
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SCENE_HALF_EXTENT;
    use nalgebra::Vector3;

    fn look_from(x: f64, y: f64, z: f64) -> CameraPose {
        CameraPose::look_at(Vector3::new(x, y, z), Vector3::zeros(), Vector3::z()).unwrap()
    }

    #[test]
    fn red_sphere_fills_center_pixel() {
        let scene = SceneSpec {
            geometry: Geometry::Primitives(vec![Primitive {
                shape: Shape::Sphere { center: [0.0; 3], radius: 0.45 },
                albedo: Albedo::Solid([1.0, 0.0, 0.0]),
            }]),
        };
        let intr = Intrinsics::centered(32, 32, 32.0);
        let img = render_views(&scene, &[look_from(0.0, -1.2, 0.3)], &intr).unwrap();
        let c = &img[0];
        let px = [c[[16, 16, 0]], c[[16, 16, 1]], c[[16, 16, 2]]];
        assert!((px[0] - 1.0).abs() < 1.0 / 255.0);
        assert!(px[1].abs() < 1.0 / 255.0 && px[2].abs() < 1.0 / 255.0);
    }

    #[test]
    fn empty_scene_is_all_background() {
        let scene = SceneSpec {
            geometry: Geometry::Mesh(TriMesh {
                vertices: vec![[0.0; 3], [0.1, 0.0, 0.0], [0.0, 0.1, 0.0]],
                colors: vec![],
                faces: vec![[0, 1, 2]],
            }),
        };
        // camera behind the triangle plane looking away: no hits
        let intr = Intrinsics::centered(16, 16, 16.0);
        let pose = CameraPose::look_at(
            Vector3::new(0.0, 0.0, -2.0),
            Vector3::new(0.0, 0.0, -4.0),
            Vector3::y(),
        )
        .unwrap();
        let img = render_single(&scene, &pose, &intr);
        for v in img.iter() {
            assert!((v - BACKGROUND[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn offset_sphere_lands_right_of_principal_point() {
        // Pinhole oracle: project the sphere center with the camera matrices
        // (u = cx + fx * x_cam / -z_cam) and compare against the rendered
        // silhouette centroid.
        let sphere_c = Vector3::new(0.3, 0.0, 0.0);
        let scene = SceneSpec {
            geometry: Geometry::Primitives(vec![Primitive {
                shape: Shape::Sphere { center: [sphere_c.x, sphere_c.y, sphere_c.z], radius: 0.15 },
                albedo: Albedo::Solid([0.0, 0.0, 1.0]),
            }]),
        };
        let intr = Intrinsics::centered(64, 64, 64.0);
        let pose = look_from(0.0, -2.5, 0.4);
        let img = render_single(&scene, &pose, &intr);
        let mut sum_u = 0.0;
        let mut count = 0.0;
        for i in 0..64 {
            for j in 0..64 {
                if (img[[i, j, 2]] - 1.0).abs() < 1e-6 && img[[i, j, 0]] < 0.5 {
                    sum_u += j as f64 + 0.5;
                    count += 1.0;
                }
            }
        }
        assert!(count > 0.0, "sphere not visible");
        let centroid_u = sum_u / count;
        let p_cam = pose.rotation.transpose() * (sphere_c - pose.center);
        let expected_u = intr.cx + intr.fx * (p_cam.x / -p_cam.z);
        assert!(centroid_u > intr.cx, "centroid {centroid_u} not right of cx");
        assert!((centroid_u - expected_u).abs() < 2.0, "centroid {centroid_u} vs {expected_u}");
    }

    #[test]
    fn cylinder_and_cuboid_intersections_agree_with_containment() {
        // shoot a grid of rays and verify every reported hit lies on the shape
        let shapes = [
            Shape::Cuboid { min: [-0.2, -0.1, -0.3], max: [0.2, 0.3, 0.1] },
            Shape::Cylinder { center: [0.1, 0.0, 0.0], radius: 0.2, half_height: 0.25 },
        ];
        for shape in shapes {
            for k in 0..200 {
                let ang = k as f64 * 0.1;
                let o = [1.5 * ang.cos(), 1.5 * ang.sin(), 0.4 * (k % 7) as f64 / 7.0];
                let target = [0.05 * (k % 3) as f64, 0.0, 0.0];
                let d = sub(target, o);
                let n = dot(d, d).sqrt();
                let d = [d[0] / n, d[1] / n, d[2] / n];
                if let Some(t) = shape.intersect(o, d) {
                    let p = at(o, d, t);
                    let on = match shape {
                        Shape::Cuboid { min, max } => (0..3).all(|a| {
                            p[a] >= min[a] - 1e-7 && p[a] <= max[a] + 1e-7
                        }),
                        Shape::Cylinder { center, radius, half_height } => {
                            let dx = p[0] - center[0];
                            let dy = p[1] - center[1];
                            dx * dx + dy * dy <= radius * radius + 1e-7
                                && (p[2] - center[2]).abs() <= half_height + 1e-7
                        }
                        _ => unreachable!(),
                    };
                    assert!(on, "hit off surface: {p:?}");
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let scene = crate::scene::random_scene(5);
        let intr = Intrinsics::centered(24, 24, 24.0);
        let pose = look_from(1.8, 0.4, 1.0);
        let a = render_single(&scene, &pose, &intr);
        let b = render_single(&scene, &pose, &intr);
        assert_eq!(a, b);
        // object must be visible and inside the cube's projection
        let non_bg = a
            .outer_iter()
            .flat_map(|row| row.outer_iter().map(|px| px[0]).collect::<Vec<_>>())
            .filter(|&v| (v - BACKGROUND[0]).abs() > 1e-6)
            .count();
        assert!(non_bg > 0, "scene invisible");
        let _ = SCENE_HALF_EXTENT;
    }
}
