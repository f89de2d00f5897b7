// Scratch benchmark for NeRF training throughput; not part of the test suite.
use nerfalign::geom::{Intrinsics, RigidTransform};
use nerfalign::nerf::train::{train_block, training_view_psnr, NerfTrainConfig};
use nerfalign::nerf::NerfConfig;
use nerfalign::scene::{generate_trajectory, random_scene, render::render_views, BlockDataset, TrajectoryConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_views: usize = args.get(1).and_then(|v| v.parse().ok()).unwrap_or(20);
    let res: u32 = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(96);
    let iters: usize = args.get(3).and_then(|v| v.parse().ok()).unwrap_or(300);
    let batch: usize = args.get(4).and_then(|v| v.parse().ok()).unwrap_or(1024);
    let n_samples: usize = args.get(5).and_then(|v| v.parse().ok()).unwrap_or(128);
    let table_log2: usize = args.get(6).and_then(|v| v.parse().ok()).unwrap_or(15);
    let occ_res: usize = args.get(7).and_then(|v| v.parse().ok()).unwrap_or(64);
    let decay: f32 = args.get(8).and_then(|v| v.parse().ok()).unwrap_or(0.95);

    let t0 = Instant::now();
    let scene = random_scene(42);
    let poses = generate_trajectory(n_views, 0, &TrajectoryConfig::default()).unwrap();
    let intr = Intrinsics::centered(res, res, res as f64 * 1.25);
    let images = render_views(&scene, &poses, &intr).unwrap();
    let data = BlockDataset { images, poses, intrinsics: intr, gt_transform: RigidTransform::identity() };
    println!("render {:?}", t0.elapsed());

    let cfg = NerfTrainConfig {
        field: NerfConfig {
            table_size: 1 << table_log2,
            ..NerfConfig::default()
        },
        n_iters: iters,
        batch_rays: batch,
        n_samples,
        occupancy_resolution: occ_res,
        occupancy_decay: decay,
        seed: 7,
        ..NerfTrainConfig::default()
    };
    let t1 = Instant::now();
    let block = train_block(&data, &cfg, None).unwrap();
    let train_time = t1.elapsed();
    println!(
        "train {iters} iters: {:?} ({:.1} ms/iter), occ fraction {:.4}",
        train_time,
        train_time.as_secs_f64() * 1000.0 / iters as f64,
        block.occupancy.occupied_fraction()
    );
    let t2 = Instant::now();
    let psnr = training_view_psnr(&block, &data, n_samples);
    println!("psnr {:.2} dB (eval {:?})", psnr, t2.elapsed());
}
