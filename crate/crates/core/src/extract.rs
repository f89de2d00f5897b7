//! Conversion of a trained field into the registration network's input: a
//! dense 7-channel voxel grid `[X, C, alpha]` plus a bit mask combining
//! occupancy, a density threshold and a surface-field visibility threshold.
//!
//! The surface field along a ray is `S(t) = T(t - delta) * (1 - exp(-2 sigma_t
//! delta))`: the probability of traveling to just before `t` unhindered times
//! the probability of a hit inside the `2 delta` window around `t` under
//! locally constant density.

use ndarray::{Array2, Array4};
use rayon::prelude::*;

use crate::geom::CameraPose;
use crate::nerf::NerfBlock;
use crate::{Error, Result};

pub const DEFAULT_SIGMA_THRESHOLD: f64 = 0.7;
pub const DEFAULT_SURFACE_THRESHOLD: f64 = 0.5;
/// Marching steps from the camera to the query depth for transmittance.
pub const SURFACE_MARCH_STEPS: usize = 256;
pub const GRID_CHANNELS: usize = 7;

/// Density seen along one ray, with whatever transmittance evaluation the
/// backing field supports (exact for synthetic densities, marched for NeRFs).
pub trait RayDensity {
    fn sigma(&self, t: f64) -> f64;
    /// Transmittance from the ray origin to parameter `t`.
    fn transmittance_to(&self, t: f64) -> f64;
}

/// Piecewise-constant density along a ray: `values[i]` on
/// `[breakpoints[i], breakpoints[i+1])`, zero outside. Its transmittance is
/// exact, which makes it the reference field for quadrature tests.
#[derive(Debug, Clone)]
pub struct PiecewiseDensity {
    pub breakpoints: Vec<f64>,
    pub values: Vec<f64>,
}

impl PiecewiseDensity {
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>) -> Self {
        assert_eq!(breakpoints.len(), values.len() + 1);
        assert!(breakpoints.windows(2).all(|w| w[0] < w[1]));
        assert!(values.iter().all(|&v| v >= 0.0));
        PiecewiseDensity { breakpoints, values }
    }
}

impl RayDensity for PiecewiseDensity {
    fn sigma(&self, t: f64) -> f64 {
        for (i, v) in self.values.iter().enumerate() {
            if t >= self.breakpoints[i] && t < self.breakpoints[i + 1] {
                return *v;
            }
        }
        0.0
    }

    fn transmittance_to(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        for (i, v) in self.values.iter().enumerate() {
            let lo = self.breakpoints[i];
            if t <= lo {
                break;
            }
            let hi = self.breakpoints[i + 1].min(t);
            acc += v * (hi - lo);
        }
        (-acc).exp()
    }
}

/// A ray through a frozen NeRF: density queried from the field, transmittance
/// marched with `SURFACE_MARCH_STEPS` uniform steps and occupancy pruning.
pub struct MarchedRay<'a> {
    pub block: &'a NerfBlock,
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub n_steps: usize,
}

impl<'a> MarchedRay<'a> {
    pub fn new(block: &'a NerfBlock, origin: [f64; 3], direction: [f64; 3]) -> Self {
        MarchedRay { block, origin, direction, n_steps: SURFACE_MARCH_STEPS }
    }

    fn point_at(&self, t: f64) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + t * self.direction[a])
    }
}

impl RayDensity for MarchedRay<'_> {
    fn sigma(&self, t: f64) -> f64 {
        let p = self.point_at(t);
        let pts = Array2::from_shape_vec((1, 3), vec![p[0] as f32, p[1] as f32, p[2] as f32])
            .expect("shape");
        self.block.sigma_batch(&pts)[0] as f64
    }

    fn transmittance_to(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        let step = t / self.n_steps as f64;
        let mut positions = Vec::new();
        for k in 0..self.n_steps {
            let s = (k as f64 + 0.5) * step;
            let p = self.point_at(s);
            let p32 = [p[0] as f32, p[1] as f32, p[2] as f32];
            if self.block.occupancy.occupied_at(p32) {
                positions.extend_from_slice(&p32);
            }
        }
        if positions.is_empty() {
            return 1.0;
        }
        let n = positions.len() / 3;
        let pts = Array2::from_shape_vec((n, 3), positions).expect("shape");
        let sigmas = self.block.sigma_batch(&pts);
        let acc: f64 = sigmas.iter().map(|&s| s as f64 * step).sum();
        (-acc).exp()
    }
}

/// Closed-form surface field at depth `t` with window half-width `delta`.
pub fn surface_field(density: &impl RayDensity, t: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0) || t <= delta {
        return Err(Error::invalid(format!(
            "surface field needs t > delta > 0 (t={t}, delta={delta})"
        )));
    }
    let trans = density.transmittance_to(t - delta);
    let sigma = density.sigma(t);
    Ok(surface_field_value(trans, sigma, delta))
}

/// `S = T * (1 - exp(-2 sigma delta))`, clamped into [0, 1].
pub fn surface_field_value(transmittance: f64, sigma: f64, delta: f64) -> f64 {
    (transmittance * (1.0 - (-2.0 * sigma * delta).exp())).clamp(0.0, 1.0)
}

/// Alpha compositing value `1 - exp(-sigma delta)`.
pub fn alpha_composite_value(sigma: f64, delta: f64) -> f64 {
    debug_assert!(sigma >= 0.0 && delta > 0.0);
    1.0 - (-sigma * delta).exp()
}

/// Maximum surface field over one ray per training camera through `x`.
/// Cameras coincident with `x` (or closer than `delta`) are skipped; all
/// skipped is an error.
pub fn view_max_surface_field(
    block: &NerfBlock,
    x: [f64; 3],
    poses: &[CameraPose],
    delta: f64,
) -> Result<f64> {
    if poses.is_empty() {
        return Err(Error::invalid("no training poses"));
    }
    let mut best: Option<f64> = None;
    for pose in poses {
        let c = [pose.center.x, pose.center.y, pose.center.z];
        let diff = [x[0] - c[0], x[1] - c[1], x[2] - c[2]];
        let dist = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
        if dist < 1e-9 || dist <= delta {
            continue;
        }
        let dir = [diff[0] / dist, diff[1] / dist, diff[2] / dist];
        let ray = MarchedRay::new(block, c, dir);
        let s = surface_field(&ray, dist, delta)?;
        best = Some(best.map_or(s, |b: f64| b.max(s)));
    }
    best.ok_or_else(|| Error::invalid("every camera coincides with the query point"))
}

/// Mean radiance over one viewing ray per camera (direction from the camera
/// center toward `x`). Same skip rule as [`view_max_surface_field`].
pub fn view_averaged_radiance(
    block: &NerfBlock,
    x: [f64; 3],
    poses: &[CameraPose],
) -> Result<[f64; 3]> {
    if poses.is_empty() {
        return Err(Error::invalid("no training poses"));
    }
    let mut acc = [0.0f64; 3];
    let mut count = 0usize;
    for pose in poses {
        let c = [pose.center.x, pose.center.y, pose.center.z];
        let diff = [x[0] - c[0], x[1] - c[1], x[2] - c[2]];
        let dist = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
        if dist < 1e-9 {
            continue;
        }
        let q = block.query(x, [diff[0] / dist, diff[1] / dist, diff[2] / dist]);
        for a in 0..3 {
            acc[a] += q.color[a];
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("every camera coincides with the query point"));
    }
    Ok(std::array::from_fn(|a| acc[a] / count as f64))
}

/// Cell-center lattice over `bbox`, x fastest, matching the binary layout.
pub fn voxel_centers(resolution: [usize; 3], bbox: [[f64; 3]; 2]) -> Result<Array2<f64>> {
    if resolution.iter().any(|&r| r == 0) {
        return Err(Error::invalid("zero voxel resolution"));
    }
    let [nx, ny, nz] = resolution;
    let cell: [f64; 3] = std::array::from_fn(|a| (bbox[1][a] - bbox[0][a]) / resolution[a] as f64);
    let mut out = Array2::zeros((nx * ny * nz, 3));
    let mut row = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let idx = [x, y, z];
                for a in 0..3 {
                    out[[row, a]] = bbox[0][a] + (idx[a] as f64 + 0.5) * cell[a];
                }
                row += 1;
            }
        }
    }
    Ok(out)
}

/// Density threshold mask: bit set exactly when `sigma > sigma_t`.
pub fn density_mask(sigmas: &[f32], sigma_t: f64) -> Vec<bool> {
    sigmas.iter().map(|&s| (s as f64) > sigma_t).collect()
}

/// Surface-field threshold mask: bit set exactly when `s > eta`.
pub fn surface_mask(values: &[f64], eta: f64) -> Vec<bool> {
    values.iter().map(|&s| s > eta).collect()
}

/// The extracted hand-off between a NeRF and the registration network.
#[derive(Debug, Clone)]
pub struct VoxelGridSample {
    /// `[nz, ny, nx, 7]`, channels `[X (3), C (3), alpha]`.
    pub grid: Array4<f32>,
    /// Flat mask, x fastest; true marks voxels that carry features.
    pub mask: Vec<bool>,
    pub resolution: [usize; 3],
    pub bbox: [[f64; 3]; 2],
    /// Set when the combined mask came out empty.
    pub empty_mask_warning: bool,
}

impl VoxelGridSample {
    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn voxel_edge(&self) -> f64 {
        (self.bbox[1][0] - self.bbox[0][0]) / self.resolution[0] as f64
    }

    /// Coordinates of masked voxel centers, x-fastest order.
    pub fn masked_points(&self) -> Vec<[f64; 3]> {
        let [nx, ny, _] = self.resolution;
        let mut out = Vec::with_capacity(self.mask_count());
        for (flat, &m) in self.mask.iter().enumerate() {
            if m {
                let x = flat % nx;
                let y = (flat / nx) % ny;
                let z = flat / (nx * ny);
                out.push([
                    self.grid[[z, y, x, 0]] as f64,
                    self.grid[[z, y, x, 1]] as f64,
                    self.grid[[z, y, x, 2]] as f64,
                ]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExtractConfig {
    pub resolution: [usize; 3],
    pub sigma_threshold: f64,
    pub surface_threshold: f64,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            resolution: [64, 64, 64],
            sigma_threshold: DEFAULT_SIGMA_THRESHOLD,
            surface_threshold: DEFAULT_SURFACE_THRESHOLD,
        }
    }
}

/// Extracts the voxel grid and the combined mask
/// `M = M_occ ∩ M_df ∩ M_sf` from a trained block.
pub fn extract_voxel_grid(block: &NerfBlock, cfg: &ExtractConfig) -> Result<VoxelGridSample> {
    let bbox = [[-1.0; 3], [1.0; 3]];
    let [nx, ny, nz] = cfg.resolution;
    let n = nx * ny * nz;
    let centers = voxel_centers(cfg.resolution, bbox)?;
    let delta = (bbox[1][0] - bbox[0][0]) / nx as f64; // one voxel edge

    // occupancy + density masks over the full lattice
    let centers32 = centers.mapv(|v| v as f32);
    let sigmas = block.sigma_batch(&centers32);
    let m_occ: Vec<bool> = (0..n)
        .map(|i| {
            block
                .occupancy
                .occupied_at([centers32[[i, 0]], centers32[[i, 1]], centers32[[i, 2]]])
        })
        .collect();
    let m_df = density_mask(sigmas.as_slice().expect("contiguous"), cfg.sigma_threshold);

    let candidates: Vec<usize> = (0..n).filter(|&i| m_occ[i] && m_df[i]).collect();

    // view-max surface field and view-averaged radiance for the candidates
    let poses = &block.poses;
    let results: Vec<(f64, [f64; 3])> = candidates
        .par_iter()
        .map(|&i| {
            let x = [centers[[i, 0]], centers[[i, 1]], centers[[i, 2]]];
            let s = view_max_surface_field(block, x, poses, delta).unwrap_or(0.0);
            let c = if s > cfg.surface_threshold {
                view_averaged_radiance(block, x, poses).unwrap_or([0.0; 3])
            } else {
                [0.0; 3]
            };
            (s, c)
        })
        .collect();

    let mut mask = vec![false; n];
    let mut grid = Array4::<f32>::zeros((nz, ny, nx, GRID_CHANNELS));
    for flat in 0..n {
        let x = flat % nx;
        let y = (flat / nx) % ny;
        let z = flat / (nx * ny);
        for a in 0..3 {
            grid[[z, y, x, a]] = centers[[flat, a]] as f32;
        }
    }
    for (&flat, &(s, c)) in candidates.iter().zip(&results) {
        if s > cfg.surface_threshold {
            mask[flat] = true;
            let x = flat % nx;
            let y = (flat / nx) % ny;
            let z = flat / (nx * ny);
            for a in 0..3 {
                grid[[z, y, x, 3 + a]] = c[a] as f32;
            }
            grid[[z, y, x, 6]] = alpha_composite_value(sigmas[flat] as f64, delta) as f32;
        }
    }
    let empty = !mask.iter().any(|&m| m);
    Ok(VoxelGridSample { grid, mask, resolution: cfg.resolution, bbox, empty_mask_warning: empty })
}

pub mod format {
    //! "DRGV" voxel-grid binary format: magic, u32 version=1, u32 dims x,y,z,
    //! u32 channels=7, 6xf64 bounding box, f32 LE payload x-fastest, then the
    //! bit-packed mask (x-fastest, 8 voxels per byte, zero padded).

    use super::*;
    use std::path::Path;

    pub const MAGIC: [u8; 4] = *b"DRGV";
    pub const VERSION: u32 = 1;

    pub fn write(sample: &VoxelGridSample) -> Vec<u8> {
        let [nx, ny, nz] = sample.resolution;
        let n = nx * ny * nz;
        let mut out = Vec::with_capacity(16 + 48 + n * GRID_CHANNELS * 4 + n.div_ceil(8));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in [nx, ny, nz] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(GRID_CHANNELS as u32).to_le_bytes());
        for corner in sample.bbox {
            for v in corner {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let payload = sample.grid.as_slice().expect("standard layout");
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let mut packed = vec![0u8; n.div_ceil(8)];
        for (i, &m) in sample.mask.iter().enumerate() {
            if m {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&packed);
        out
    }

    pub fn read(bytes: &[u8]) -> Result<VoxelGridSample> {
        let take = |o: &mut usize, n: usize| -> Result<&[u8]> {
            if *o + n > bytes.len() {
                return Err(Error::Format("truncated voxel grid".into()));
            }
            let s = &bytes[*o..*o + n];
            *o += n;
            Ok(s)
        };
        let mut o = 0usize;
        if take(&mut o, 4)? != MAGIC {
            return Err(Error::Format("bad voxel grid magic".into()));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
        let version = u32_at(take(&mut o, 4)?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported voxel grid version {version}")));
        }
        let nx = u32_at(take(&mut o, 4)?) as usize;
        let ny = u32_at(take(&mut o, 4)?) as usize;
        let nz = u32_at(take(&mut o, 4)?) as usize;
        let channels = u32_at(take(&mut o, 4)?) as usize;
        if channels != GRID_CHANNELS {
            return Err(Error::Format(format!("expected 7 channels, got {channels}")));
        }
        let mut bbox = [[0.0; 3]; 2];
        for corner in bbox.iter_mut() {
            for v in corner.iter_mut() {
                *v = f64::from_le_bytes(take(&mut o, 8)?.try_into().expect("8 bytes"));
            }
        }
        let n = nx * ny * nz;
        let raw = take(&mut o, n * GRID_CHANNELS * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let grid = Array4::from_shape_vec((nz, ny, nx, GRID_CHANNELS), data)
            .map_err(|e| Error::Format(e.to_string()))?;
        let packed = take(&mut o, n.div_ceil(8))?;
        if o != bytes.len() {
            return Err(Error::Format("trailing bytes in voxel grid".into()));
        }
        let mask: Vec<bool> = (0..n).map(|i| (packed[i / 8] >> (i % 8)) & 1 == 1).collect();
        let empty = !mask.iter().any(|&m| m);
        Ok(VoxelGridSample {
            grid,
            mask,
            resolution: [nx, ny, nz],
            bbox,
            empty_mask_warning: empty,
        })
    }

    pub fn save(sample: &VoxelGridSample, path: &Path) -> Result<()> {
        std::fs::write(path, write(sample)).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<VoxelGridSample> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        read(&bytes)
    }
}
