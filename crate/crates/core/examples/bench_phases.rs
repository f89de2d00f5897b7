// Scratch phase timing for the NeRF training step; not part of the test suite.
use ndarray::{Array2, ArrayD};
use nerfalign::autodiff::Tape;
use nerfalign::nerf::hash::{bind_tables, hash_encode};
use nerfalign::nerf::render::render_rays;
use nerfalign::nerf::{field_forward, init_field_params, NerfConfig};
use nerfalign::nn::{Adam, Bind, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::time::Instant;

fn main() {
    bench_dot();
    let m: usize = std::env::args().nth(1).and_then(|v| v.parse().ok()).unwrap_or(49152);
    let cfg = NerfConfig { table_size: 1 << 14, ..NerfConfig::default() };
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut store: ParamStore<f32> = ParamStore::new();
    init_field_params(&mut store, &mut rng, &cfg);
    let positions =
        Array2::<f32>::from_shape_fn((m, 3), |_| rng.random_range(-1.0f32..1.0)).into_dyn();
    let dirs = Array2::<f32>::from_shape_fn((m, 3), |_| 0.577f32).into_dyn();
    let n_rays = m / 96;
    let offsets: Vec<usize> = (0..=n_rays).map(|r| r * 96).collect();
    let deltas = vec![0.01f32; m];
    let targets = ArrayD::<f32>::zeros(ndarray::IxDyn(&[n_rays, 3]));

    for trial in 0..3 {
        let t0 = Instant::now();
        let tape: Tape<f32> = Tape::new();
        let bind = Bind::new(&tape, &store);
        let p = tape.constant(positions.clone());
        let d = tape.constant(dirs.clone());
        let t_enc = Instant::now();
        let tables = bind_tables(&bind, &cfg.hash());
        let enc = hash_encode(&tape, &cfg.hash(), p, &tables);
        let enc_time = t_enc.elapsed();
        let _ = enc;
        let t_fwd = Instant::now();
        let (sigma, rgb) = field_forward(&bind, &cfg, p, d);
        let fwd_time = t_fwd.elapsed();
        let t_rend = Instant::now();
        let rendered = render_rays(
            &tape,
            sigma,
            rgb,
            std::rc::Rc::new(deltas.clone()),
            std::rc::Rc::new(offsets.clone()),
            [1.0, 1.0, 1.0],
        );
        let diff = tape.sub(rendered, tape.constant(targets.clone()));
        let sq = tape.mul(diff, diff);
        let loss = tape.mean_all(sq);
        let rend_time = t_rend.elapsed();
        let t_bwd = Instant::now();
        let mut grads = tape.backward(loss, &[]);
        let named = bind.collect_grads(&mut grads);
        let bwd_time = t_bwd.elapsed();
        drop(grads);
        drop(tape);
        let t_opt = Instant::now();
        let mut opt: Adam<f32> = Adam::new(0.0);
        opt.sparse_prefixes.push("field.hash.".into());
        opt.step(&mut store, &named, 1e-2);
        let opt_time = t_opt.elapsed();
        println!(
            "trial {trial}: total {:?} | enc(dup) {:?} fwd {:?} render {:?} bwd {:?} opt {:?}",
            t0.elapsed(),
            enc_time,
            fwd_time,
            rend_time,
            bwd_time,
            opt_time
        );
    }
}

#[allow(dead_code)]
fn bench_dot() {
    for (n, k, m) in [(49152usize, 32usize, 64usize), (49152, 67, 64), (262144, 32, 64)] {
        let a = Array2::<f32>::from_elem((n, k), 0.5);
        let b = Array2::<f32>::from_elem((k, m), 0.25);
        let t = Instant::now();
        let mut acc = 0.0f32;
        for _ in 0..5 {
            let c = a.dot(&b);
            acc += c[[0, 0]];
        }
        let dt = t.elapsed().as_secs_f64() / 5.0;
        let gf = (2.0 * n as f64 * k as f64 * m as f64) / dt / 1e9;
        println!("dot ({n},{k},{m}): {:.1} ms  {:.1} GFLOP/s  ({acc})", dt * 1000.0, gf);
    }
}
