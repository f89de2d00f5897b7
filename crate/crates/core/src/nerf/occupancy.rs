//! Single-resolution bit occupancy grid over `[-1, 1]^3`.
//!
//! Each cell keeps a running density estimate; its bit is set exactly when the
//! estimate exceeds the occupancy threshold. Maintenance happens every
//! `UPDATE_EVERY` training steps: all estimates decay by `DECAY` and the cells
//! scheduled for this sweep are refreshed with `max(decayed, sigma)` at a
//! jittered cell center. The first sweep visits every cell; later sweeps visit
//! a quarter of the cells round-robin, which keeps CPU maintenance cost
//! bounded while every cell is still refreshed regularly.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::{Error, Result};

pub const DEFAULT_RESOLUTION: usize = 128;
pub const OCCUPANCY_THRESHOLD: f32 = 0.01;
pub const DECAY: f32 = 0.95;
pub const UPDATE_EVERY: u64 = 16;
/// Fresh cells start just above the threshold: everything is marchable until
/// real measurements arrive, and a never-confirmed cell decays below the
/// threshold within ~45 sweeps.
pub const INITIAL_ESTIMATE: f32 = 0.02;
/// Resolution of the serialized bit array in checkpoints.
pub const CHECKPOINT_RESOLUTION: usize = 128;

#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    pub resolution: usize,
    /// Per-sweep estimate decay; [`DECAY`] unless a training profile tightens
    /// it to make empty space prune sooner on slow hardware.
    pub decay: f32,
    estimate: Vec<f32>,
    bits: Vec<u64>,
    sweeps: u64,
}

impl OccupancyGrid {
    /// New grid with optimistic estimates (everything occupied).
    pub fn new(resolution: usize) -> Self {
        let n = resolution.pow(3);
        let mut g = OccupancyGrid {
            resolution,
            decay: DECAY,
            estimate: vec![INITIAL_ESTIMATE; n],
            bits: vec![0; n.div_ceil(64)],
            sweeps: 0,
        };
        g.refresh_bits();
        g
    }

    pub fn n_cells(&self) -> usize {
        self.resolution.pow(3)
    }

    #[inline]
    pub fn bit(&self, flat: usize) -> bool {
        (self.bits[flat / 64] >> (flat % 64)) & 1 == 1
    }

    fn set_bit(&mut self, flat: usize, value: bool) {
        let word = &mut self.bits[flat / 64];
        if value {
            *word |= 1 << (flat % 64);
        } else {
            *word &= !(1 << (flat % 64));
        }
    }

    /// Flat cell index (x fastest) of a point in `[-1, 1]^3`.
    #[inline]
    pub fn cell_of(&self, p: [f32; 3]) -> Option<usize> {
        let r = self.resolution as f32;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            if !(-1.0..=1.0).contains(&p[a]) {
                return None;
            }
            idx[a] = (((p[a] + 1.0) * 0.5 * r) as usize).min(self.resolution - 1);
        }
        Some((idx[2] * self.resolution + idx[1]) * self.resolution + idx[0])
    }

    #[inline]
    pub fn occupied_at(&self, p: [f32; 3]) -> bool {
        self.cell_of(p).is_some_and(|c| self.bit(c))
    }

    /// Center of a flat cell index.
    pub fn cell_center(&self, flat: usize) -> [f32; 3] {
        let r = self.resolution;
        let x = flat % r;
        let y = (flat / r) % r;
        let z = flat / (r * r);
        let cell = 2.0 / r as f32;
        [
            -1.0 + (x as f32 + 0.5) * cell,
            -1.0 + (y as f32 + 0.5) * cell,
            -1.0 + (z as f32 + 0.5) * cell,
        ]
    }

    pub fn occupied_fraction(&self) -> f64 {
        let set: u64 = self.bits.iter().map(|w| w.count_ones() as u64).sum();
        set as f64 / self.n_cells() as f64
    }

    fn refresh_bits(&mut self) {
        for flat in 0..self.n_cells() {
            self.set_bit(flat, self.estimate[flat] > OCCUPANCY_THRESHOLD);
        }
    }

    /// One maintenance sweep against a batched density evaluator.
    /// `sigma_eval` receives `[k, 3]` positions and returns `k` densities.
    pub fn update<E>(&mut self, sigma_eval: E, seed: u64)
    where
        E: Fn(&Array2<f32>) -> Array1<f32>,
    {
        let full = self.sweeps == 0;
        let phase = (self.sweeps % 4) as usize;
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ self.sweeps.wrapping_mul(0x9e3779b97f4a7c15));
        let decay = self.decay;
        for e in self.estimate.iter_mut() {
            *e *= decay;
        }
        let visited: Vec<usize> = (0..self.n_cells())
            .filter(|flat| full || flat % 4 == phase)
            .collect();
        let cell = 2.0 / self.resolution as f32;
        let mut positions = Array2::<f32>::zeros((visited.len(), 3));
        for (row, &flat) in visited.iter().enumerate() {
            let c = self.cell_center(flat);
            for a in 0..3 {
                positions[[row, a]] =
                    (c[a] + rng.random_range(-0.5..0.5) * cell).clamp(-1.0, 1.0);
            }
        }
        let sigmas = sigma_eval(&positions);
        assert_eq!(sigmas.len(), visited.len());
        for (&flat, &s) in visited.iter().zip(sigmas.iter()) {
            if s > self.estimate[flat] {
                self.estimate[flat] = s;
            }
        }
        self.refresh_bits();
        self.sweeps += 1;
    }

    /// Bit-packed occupancy at the checkpoint resolution (128^3), x fastest,
    /// 8 cells per byte LSB-first, zero padded. If the native resolution
    /// differs, bits are resampled by cell-center lookup.
    pub fn to_checkpoint_bits(&self) -> Vec<u8> {
        let r = CHECKPOINT_RESOLUTION;
        let n = r * r * r;
        let mut out = vec![0u8; n.div_ceil(8)];
        for z in 0..r {
            for y in 0..r {
                for x in 0..r {
                    let flat = (z * r + y) * r + x;
                    let occupied = if self.resolution == r {
                        self.bit(flat)
                    } else {
                        let cell = 2.0 / r as f32;
                        let p = [
                            -1.0 + (x as f32 + 0.5) * cell,
                            -1.0 + (y as f32 + 0.5) * cell,
                            -1.0 + (z as f32 + 0.5) * cell,
                        ];
                        self.occupied_at(p)
                    };
                    if occupied {
                        out[flat / 8] |= 1 << (flat % 8);
                    }
                }
            }
        }
        out
    }

    /// Serialized running estimates (little-endian f32, x fastest).
    pub fn estimate_bytes(&self) -> Vec<u8> {
        self.estimate.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_parts(resolution: usize, estimate_bytes: &[u8], sweeps: u64) -> Result<Self> {
        let n = resolution.pow(3);
        if estimate_bytes.len() != n * 4 {
            return Err(Error::Format(format!(
                "occupancy estimate size {} != {}",
                estimate_bytes.len(),
                n * 4
            )));
        }
        let estimate: Vec<f32> = estimate_bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut g =
            OccupancyGrid { resolution, decay: DECAY, estimate, bits: vec![0; n.div_ceil(64)], sweeps };
        g.refresh_bits();
        Ok(g)
    }

    pub fn sweeps(&self) -> u64 {
        self.sweeps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn const_field(value: f32) -> impl Fn(&Array2<f32>) -> Array1<f32> {
        move |pts| Array1::from_elem(pts.nrows(), value)
    }

    #[test]
    fn zero_field_clears_all_bits_after_100_updates() {
        let mut g = OccupancyGrid::new(16);
        for _ in 0..100 {
            g.update(const_field(0.0), 7);
        }
        assert_eq!(g.occupied_fraction(), 0.0);
    }

    #[test]
    fn dense_field_sets_all_bits_after_first_update() {
        let mut g = OccupancyGrid::new(16);
        // force estimates low first so the set is attributable to the sweep
        for e in g.estimate.iter_mut() {
            *e = 0.0;
        }
        g.refresh_bits();
        assert_eq!(g.occupied_fraction(), 0.0);
        g.update(const_field(10.0), 7);
        assert_eq!(g.occupied_fraction(), 1.0, "first sweep must visit every cell");
    }

    #[test]
    fn sphere_field_converges_to_sphere_volume() {
        // density 10 inside a radius-0.6 sphere, 0 outside
        let sphere = |pts: &Array2<f32>| {
            Array1::from_iter(pts.rows().into_iter().map(|p| {
                let r2 = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
                if r2 < 0.36 {
                    10.0
                } else {
                    0.0
                }
            }))
        };
        let mut g = OccupancyGrid::new(32);
        for _ in 0..50 {
            g.update(sphere, 3);
        }
        let occupied = g.occupied_fraction() * 8.0; // box volume 8
        let sphere_vol = 4.0 / 3.0 * std::f64::consts::PI * 0.6f64.powi(3);
        let rel = (occupied - sphere_vol).abs() / sphere_vol;
        assert!(rel < 0.2, "occupied {occupied} vs sphere {sphere_vol} (rel {rel})");
    }

    #[test]
    fn checkpoint_bits_round_trip_native_resolution() {
        let mut g = OccupancyGrid::new(128);
        for e in g.estimate.iter_mut() {
            *e = 0.0;
        }
        g.estimate[0] = 1.0;
        g.estimate[129] = 1.0;
        g.refresh_bits();
        let bits = g.to_checkpoint_bits();
        assert_eq!(bits.len(), 128usize.pow(3) / 8);
        assert_eq!(bits[0] & 1, 1);
        assert_eq!((bits[129 / 8] >> (129 % 8)) & 1, 1);
        let ones: u32 = bits.iter().map(|b| b.count_ones()).sum();
        assert_eq!(ones, 2);
    }

    #[test]
    fn estimates_round_trip_through_bytes() {
        let mut g = OccupancyGrid::new(8);
        g.update(const_field(0.5), 1);
        let back = OccupancyGrid::from_parts(8, &g.estimate_bytes(), g.sweeps()).unwrap();
        assert_eq!(back.estimate, g.estimate);
        assert_eq!(back.bits, g.bits);
    }
}
