//! Per-block NeRF training: photometric L2 on sampled rays, Adam with the
//! staged learning-rate decay, occupancy maintenance every 16 steps.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::nn::{Adam, Bind, ParamStore};
use crate::scene::{BlockDataset, BACKGROUND};
use crate::{Error, Result};

use super::occupancy::{OccupancyGrid, DEFAULT_RESOLUTION, UPDATE_EVERY};
use super::render::{march_and_prune, mse_loss, psnr, render_rays};
use super::{field_forward, init_field_params, NerfBlock, NerfConfig};

#[derive(Debug, Clone)]
pub struct NerfTrainConfig {
    pub field: NerfConfig,
    pub n_iters: usize,
    pub lr: f64,
    pub lr_decay_steps: Vec<usize>,
    pub lr_decay_factor: f64,
    pub batch_rays: usize,
    pub n_samples: usize,
    pub occupancy_resolution: usize,
    pub occupancy_decay: f32,
    pub seed: u64,
}

impl Default for NerfTrainConfig {
    fn default() -> Self {
        NerfTrainConfig {
            field: NerfConfig::default(),
            n_iters: 10_000,
            lr: 1e-2,
            lr_decay_steps: vec![5000, 7500, 9000],
            lr_decay_factor: 0.33,
            batch_rays: 4096,
            n_samples: 1024,
            occupancy_resolution: DEFAULT_RESOLUTION,
            occupancy_decay: super::occupancy::DECAY,
            seed: 0,
        }
    }
}

impl NerfTrainConfig {
    /// Learning rate used by the update at `step` (0-based): the base rate
    /// multiplied once per decay boundary already reached.
    pub fn lr_at(&self, step: usize) -> f64 {
        let mut lr = self.lr;
        for &d in &self.lr_decay_steps {
            if step >= d {
                lr *= self.lr_decay_factor;
            }
        }
        lr
    }
}

/// One training-log line, serialized as JSON per step.
#[derive(Debug, Serialize)]
pub struct NerfLogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

struct RayData {
    origins: Vec<[f32; 3]>,
    dirs: Vec<[f32; 3]>,
    rgb: Vec<[f32; 3]>,
}

fn build_rays(data: &BlockDataset) -> RayData {
    let (h, w) = (data.intrinsics.height as usize, data.intrinsics.width as usize);
    let n = data.images.len() * h * w;
    let mut rays = RayData {
        origins: Vec::with_capacity(n),
        dirs: Vec::with_capacity(n),
        rgb: Vec::with_capacity(n),
    };
    for (img, pose) in data.images.iter().zip(&data.poses) {
        let o = [pose.center.x as f32, pose.center.y as f32, pose.center.z as f32];
        for i in 0..h {
            for j in 0..w {
                let d = pose.pixel_ray(&data.intrinsics, j as f64 + 0.5, i as f64 + 0.5);
                rays.origins.push(o);
                rays.dirs.push([d.x as f32, d.y as f32, d.z as f32]);
                rays.rgb.push([img[[i, j, 0]], img[[i, j, 1]], img[[i, j, 2]]]);
            }
        }
    }
    rays
}

/// Trains one NeRF block. Emits one JSON log line per step through `log`.
pub fn train_block(
    data: &BlockDataset,
    cfg: &NerfTrainConfig,
    mut log: Option<&mut dyn std::io::Write>,
) -> Result<NerfBlock> {
    data.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut store: ParamStore<f32> = ParamStore::new();
    init_field_params(&mut store, &mut rng, &cfg.field);
    let mut occupancy = OccupancyGrid::new(cfg.occupancy_resolution);
    occupancy.decay = cfg.occupancy_decay;
    let mut opt: Adam<f32> = Adam::new(0.0);
    opt.sparse_prefixes.push("field.hash.".into());

    let rays = build_rays(data);
    let n_rays = rays.origins.len();
    let bg = [BACKGROUND[0], BACKGROUND[1], BACKGROUND[2]];

    for step in 0..cfg.n_iters {
        if step as u64 % UPDATE_EVERY == 0 {
            // frozen view of the current field for occupancy maintenance
            let block_view = NerfBlock {
                cfg: cfg.field,
                store: clone_store(&store),
                occupancy: OccupancyGrid::new(1),
                poses: vec![],
                intrinsics: data.intrinsics,
            };
            occupancy.update(|pts| block_view.sigma_batch(pts), cfg.seed);
        }

        // sample a ray batch and march it
        let batch: Vec<usize> =
            (0..cfg.batch_rays).map(|_| rng.random_range(0..n_rays)).collect();
        let marched: Vec<_> = batch
            .par_iter()
            .map(|&ri| {
                let mut jrng = ChaCha12Rng::seed_from_u64(
                    cfg.seed ^ (step as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ (ri as u64),
                );
                let o = rays.origins[ri];
                let d = rays.dirs[ri];
                march_and_prune(
                    [o[0] as f64, o[1] as f64, o[2] as f64],
                    [d[0] as f64, d[1] as f64, d[2] as f64],
                    &occupancy,
                    cfg.n_samples,
                    Some(&mut jrng),
                )
            })
            .collect();

        let total: usize = marched.iter().map(|m| m.ts.len()).sum();
        let mut positions = Array2::<f32>::zeros((total, 3));
        let mut dirs = Array2::<f32>::zeros((total, 3));
        let mut deltas = Vec::with_capacity(total);
        let mut offsets = Vec::with_capacity(cfg.batch_rays + 1);
        offsets.push(0usize);
        let mut row = 0;
        for (m, &ri) in marched.iter().zip(&batch) {
            let pos = m.positions();
            for (k, _) in m.ts.iter().enumerate() {
                for a in 0..3 {
                    positions[[row, a]] = pos[[k, a]];
                    dirs[[row, a]] = rays.dirs[ri][a];
                }
                deltas.push(m.step);
                row += 1;
            }
            offsets.push(row);
        }
        let mut targets = ArrayD::<f32>::zeros(IxDyn(&[cfg.batch_rays, 3]));
        for (r, &ri) in batch.iter().enumerate() {
            for c in 0..3 {
                targets[[r, c]] = rays.rgb[ri][c];
            }
        }

        let lr = cfg.lr_at(step);
        let loss_value = {
            let tape: Tape<f32> = Tape::new();
            let bind = Bind::new(&tape, &store);
            let p = tape.constant(positions.into_dyn());
            let d = tape.constant(dirs.into_dyn());
            let (sigma, rgb) = field_forward(&bind, &cfg.field, p, d);
            let rendered = render_rays(
                &tape,
                sigma,
                rgb,
                std::rc::Rc::new(deltas),
                std::rc::Rc::new(offsets),
                bg,
            );
            let loss = mse_loss(&tape, rendered, targets);
            let loss_value = tape.scalar_value(loss) as f64;
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "photometric loss at step {step}: {loss_value}"
                )));
            }
            let mut grads = tape.backward(loss, &[]);
            let named = bind.collect_grads(&mut grads);
            drop(grads);
            drop(tape);
            opt.step(&mut store, &named, lr);
            loss_value
        };

        if let Some(w) = log.as_deref_mut() {
            let rec = NerfLogRecord { step, loss: loss_value, lr };
            serde_json::to_writer(&mut *w, &rec)?;
            writeln!(w).map_err(|e| Error::io("train log", e))?;
        }
    }

    Ok(NerfBlock {
        cfg: cfg.field,
        store,
        occupancy,
        poses: data.poses.clone(),
        intrinsics: data.intrinsics,
    })
}

fn clone_store(store: &ParamStore<f32>) -> ParamStore<f32> {
    // cheap: Rc-backed tensors are shared, not copied
    let mut out = ParamStore::new();
    for (name, value) in store.iter() {
        out.insert(name, value.clone());
    }
    out
}

/// Mean PSNR over the block's training views, rendered deterministically.
pub fn training_view_psnr(block: &NerfBlock, data: &BlockDataset, n_samples: usize) -> f64 {
    let mut se = 0.0f64;
    let mut n = 0usize;
    for (img, pose) in data.images.iter().zip(&data.poses) {
        let rendered = block.render_view(pose, n_samples);
        debug_assert_eq!(rendered.dim(), img.dim());
        for (a, b) in rendered.iter().zip(img.iter()) {
            let d = (*a - *b) as f64;
            se += d * d;
            n += 1;
        }
    }
    psnr(se / n as f64)
}
