//! Multi-level hash-grid positional encoder.
//!
//! Each level covers the `[-1, 1]^3` field bounding box with a virtual grid of
//! strictly increasing resolution; levels fine enough that a dense table would
//! exceed the table budget fall back to XOR spatial hashing with the primes
//! (1, 2654435761, 805459861). Features are trilinearly interpolated from the
//! 8 surrounding corners and concatenated over levels.

use ndarray::{Array2, ArrayD, Ix2};
use rayon::prelude::*;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{fl, Real, Tape, Var};
use crate::nn::{init, ParamStore};

pub const HASH_PRIMES: [u32; 3] = [1, 2654435761, 805459861];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HashGridConfig {
    pub n_levels: usize,
    pub table_size: usize,
    pub feature_dim: usize,
    pub base_resolution: usize,
    pub finest_resolution: usize,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        HashGridConfig {
            n_levels: 16,
            table_size: 1 << 19,
            feature_dim: 2,
            base_resolution: 16,
            finest_resolution: 512,
        }
    }
}

impl HashGridConfig {
    /// Per-level grid resolutions, geometric from base to finest, strictly
    /// increasing.
    pub fn level_resolutions(&self) -> Vec<usize> {
        let l = self.n_levels;
        assert!(l >= 2, "need at least two levels");
        let growth =
            ((self.finest_resolution as f64).ln() - (self.base_resolution as f64).ln()) / (l - 1) as f64;
        let mut out = Vec::with_capacity(l);
        let mut prev = 0usize;
        for i in 0..l {
            let r = (self.base_resolution as f64 * (growth * i as f64).exp() + 1e-9).floor() as usize;
            let r = r.max(prev + 1);
            out.push(r);
            prev = r;
        }
        out
    }

    /// Entries actually allocated for a level: dense `(n+1)^3` when it fits in
    /// the table budget, the full table otherwise.
    pub fn level_entries(&self, resolution: usize) -> usize {
        let dense = (resolution + 1).pow(3);
        dense.min(self.table_size)
    }

    pub fn output_dim(&self) -> usize {
        self.n_levels * self.feature_dim
    }

    pub fn param_name(level: usize) -> String {
        format!("field.hash.l{level:02}")
    }

    /// Registers per-level tables initialized uniform in [-1e-4, 1e-4].
    pub fn init_params<F: Real>(&self, store: &mut ParamStore<F>, rng: &mut ChaCha12Rng) {
        for (l, res) in self.level_resolutions().into_iter().enumerate() {
            let entries = self.level_entries(res);
            store.insert(
                &Self::param_name(l),
                init::uniform(rng, &[entries, self.feature_dim], -1e-4, 1e-4),
            );
        }
    }
}

/// Corner entry index for integer grid coordinates at one level.
#[inline]
fn corner_entry(ix: usize, iy: usize, iz: usize, resolution: usize, entries: usize) -> usize {
    let dense = (resolution + 1).pow(3);
    if dense <= entries {
        (iz * (resolution + 1) + iy) * (resolution + 1) + ix
    } else {
        let h = (ix as u32).wrapping_mul(HASH_PRIMES[0])
            ^ (iy as u32).wrapping_mul(HASH_PRIMES[1])
            ^ (iz as u32).wrapping_mul(HASH_PRIMES[2]);
        (h as usize) % entries
    }
}

/// 8 corner entries and trilinear weights for a point in `[-1, 1]^3`.
/// Points outside are clamped to the box surface.
#[inline]
pub fn corners<F: Real>(
    p: [F; 3],
    resolution: usize,
    entries: usize,
) -> ([usize; 8], [F; 8]) {
    let mut i0 = [0usize; 3];
    let mut frac = [F::zero(); 3];
    for a in 0..3 {
        let unit = (p[a] + F::one()) * fl::<F>(0.5);
        let scaled = (unit * fl::<F>(resolution as f64))
            .max(F::zero())
            .min(fl::<F>(resolution as f64 - 1e-6));
        let lo = scaled.floor();
        i0[a] = lo.to_f64() as usize;
        frac[a] = scaled - lo;
    }
    let mut idx = [0usize; 8];
    let mut w = [F::zero(); 8];
    for c in 0..8 {
        let (cx, cy, cz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
        idx[c] = corner_entry(i0[0] + cx, i0[1] + cy, i0[2] + cz, resolution, entries);
        let wx = if cx == 0 { F::one() - frac[0] } else { frac[0] };
        let wy = if cy == 0 { F::one() - frac[1] } else { frac[1] };
        let wz = if cz == 0 { F::one() - frac[2] } else { frac[2] };
        w[c] = wx * wy * wz;
    }
    (idx, w)
}

/// Derivatives of the 8 trilinear weights w.r.t. the point coordinates,
/// including the box-to-grid scale factor. Zero outside the box (clamped).
#[inline]
fn corner_weight_grads<F: Real>(p: [F; 3], resolution: usize) -> ([F; 3], [[F; 3]; 8]) {
    let mut frac = [F::zero(); 3];
    let mut dscale = [F::zero(); 3];
    for a in 0..3 {
        let unit = (p[a] + F::one()) * fl::<F>(0.5);
        let raw = unit * fl::<F>(resolution as f64);
        let clamped = raw.max(F::zero()).min(fl::<F>(resolution as f64 - 1e-6));
        frac[a] = clamped - clamped.floor();
        // d(scaled)/d(p) — zero where the clamp saturates
        dscale[a] = if raw > F::zero() && raw < fl::<F>(resolution as f64 - 1e-6) {
            fl::<F>(resolution as f64 * 0.5)
        } else {
            F::zero()
        };
    }
    let mut grads = [[F::zero(); 3]; 8];
    for c in 0..8 {
        let (cx, cy, cz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
        let wx = if cx == 0 { F::one() - frac[0] } else { frac[0] };
        let wy = if cy == 0 { F::one() - frac[1] } else { frac[1] };
        let wz = if cz == 0 { F::one() - frac[2] } else { frac[2] };
        let sx = if cx == 0 { -F::one() } else { F::one() };
        let sy = if cy == 0 { -F::one() } else { F::one() };
        let sz = if cz == 0 { -F::one() } else { F::one() };
        grads[c] = [sx * wy * wz * dscale[0], wx * sy * wz * dscale[1], wx * wy * sz * dscale[2]];
    }
    (frac, grads)
}

/// Non-tape batched encode for frozen-field queries.
pub fn encode_frozen<F: Real>(
    cfg: &HashGridConfig,
    tables: &[&ArrayD<F>],
    points: &Array2<F>,
) -> Array2<F> {
    assert_eq!(cfg.feature_dim, 2, "fast path assumes 2 features per entry");
    let resolutions = cfg.level_resolutions();
    let m = points.nrows();
    let dim = cfg.output_dim();
    let table_slices: Vec<(&[F], usize)> = tables
        .iter()
        .map(|t| (t.as_slice().expect("contiguous table"), t.shape()[0]))
        .collect();
    let pts = points.as_slice().expect("contiguous points");
    let mut out = Array2::<F>::zeros((m, dim));
    let os = out.as_slice_mut().expect("contiguous output");
    let chunk_rows = 4096;
    os.par_chunks_mut(chunk_rows * dim)
        .zip(pts.par_chunks(chunk_rows * 3))
        .for_each(|(oc, pc)| {
            for (orow, prow) in oc.chunks_mut(dim).zip(pc.chunks(3)) {
                let p = [prow[0], prow[1], prow[2]];
                for (l, &res) in resolutions.iter().enumerate() {
                    let (table, entries) = table_slices[l];
                    let (idx, w) = corners(p, res, entries);
                    let mut f0 = F::zero();
                    let mut f1 = F::zero();
                    for c in 0..8 {
                        let base = idx[c] * 2;
                        f0 += w[c] * table[base];
                        f1 += w[c] * table[base + 1];
                    }
                    orow[l * 2] = f0;
                    orow[l * 2 + 1] = f1;
                }
            }
        });
    out
}

/// Encode with the spatial Jacobian `d(features)/d(position)` (`[m, dim, 3]`),
/// for field-gradient queries on a frozen checkpoint.
pub fn encode_frozen_with_grad<F: Real>(
    cfg: &HashGridConfig,
    tables: &[&ArrayD<F>],
    points: &Array2<F>,
) -> (Array2<F>, Vec<[[F; 3]; 32]>) {
    let resolutions = cfg.level_resolutions();
    let m = points.nrows();
    let fd = cfg.feature_dim;
    assert!(cfg.output_dim() <= 32, "jacobian buffer supports up to 32 dims");
    let mut out = Array2::<F>::zeros((m, cfg.output_dim()));
    let mut jac = vec![[[F::zero(); 3]; 32]; m];
    for r in 0..m {
        let p = [points[[r, 0]], points[[r, 1]], points[[r, 2]]];
        for (l, &res) in resolutions.iter().enumerate() {
            let table = tables[l].view().into_dimensionality::<Ix2>().expect("table rank");
            let entries = table.nrows();
            let (idx, w) = corners(p, res, entries);
            let (_, wg) = corner_weight_grads(p, res);
            for c in 0..8 {
                let src = table.row(idx[c]);
                for f in 0..fd {
                    out[[r, l * fd + f]] += w[c] * src[f];
                    for a in 0..3 {
                        jac[r][l * fd + f][a] += wg[c][a] * src[f];
                    }
                }
            }
        }
    }
    (out, jac)
}

/// Tape op: encode `positions` (constant `[m, 3]`) against the per-level
/// tables; differentiable w.r.t. the tables via scatter-add.
pub fn hash_encode<F: Real>(
    tape: &Tape<F>,
    cfg: &HashGridConfig,
    positions: Var,
    tables: &[Var],
) -> Var {
    assert_eq!(tables.len(), cfg.n_levels);
    let vpos = tape.value(positions);
    let table_vals: Vec<_> = tables.iter().map(|&t| tape.value(t)).collect();
    let table_refs: Vec<&ArrayD<F>> = table_vals.iter().map(|t| t.as_ref()).collect();
    let pts = vpos.view().into_dimensionality::<Ix2>().expect("positions rank").to_owned();
    let out = encode_frozen(cfg, &table_refs, &pts);

    let cfg = *cfg;
    let mut parents = vec![positions];
    parents.extend_from_slice(tables);
    tape.push_custom(
        out.into_dyn(),
        parents,
        Box::new(move |args| {
            let resolutions = cfg.level_resolutions();
            let fd = cfg.feature_dim;
            let dim = cfg.output_dim();
            let pts = args.parents[0].as_slice().expect("contiguous positions");
            let go = args.out_grad.as_slice().expect("contiguous grad");
            let m = pts.len() / 3;
            // positions are constants; per-level scatter in parallel
            let mut grads: Vec<Option<ArrayD<F>>> = vec![None];
            let level_grads: Vec<Option<ArrayD<F>>> = (0..cfg.n_levels)
                .into_par_iter()
                .map(|l| {
                    if !args.needs[1 + l] {
                        return None;
                    }
                    let res = resolutions[l];
                    let entries = args.parents[1 + l].shape()[0];
                    let mut g = Array2::<F>::zeros((entries, fd));
                    let gs = g.as_slice_mut().expect("contiguous");
                    for r in 0..m {
                        let p = [pts[r * 3], pts[r * 3 + 1], pts[r * 3 + 2]];
                        let (idx, w) = corners(p, res, entries);
                        let g0 = go[r * dim + l * 2];
                        let g1 = go[r * dim + l * 2 + 1];
                        for c in 0..8 {
                            let base = idx[c] * 2;
                            gs[base] += w[c] * g0;
                            gs[base + 1] += w[c] * g1;
                        }
                    }
                    Some(g.into_dyn())
                })
                .collect();
            grads.extend(level_grads);
            grads
        }),
    )
}

/// Convenience: bind all level tables of a store onto a tape.
pub fn bind_tables<F: Real>(bind: &crate::nn::Bind<'_, F>, cfg: &HashGridConfig) -> Vec<Var> {
    (0..cfg.n_levels).map(|l| bind.var(&HashGridConfig::param_name(l))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::fd_check;
    use rand::{Rng, SeedableRng};

    #[test]
    fn default_config_matches_architecture_contract() {
        let cfg = HashGridConfig::default();
        assert_eq!(cfg.n_levels, 16);
        assert_eq!(cfg.table_size, 1 << 19);
        assert_eq!(cfg.feature_dim, 2);
        assert_eq!(cfg.output_dim(), 32);
        let res = cfg.level_resolutions();
        assert_eq!(res[0], 16);
        assert_eq!(*res.last().unwrap(), 512);
        assert!(res.windows(2).all(|w| w[0] < w[1]), "not strictly increasing: {res:?}");
    }

    #[test]
    fn dense_levels_index_without_collisions() {
        let cfg = HashGridConfig::default();
        let res = cfg.level_resolutions()[0]; // 16 -> dense 17^3
        let entries = cfg.level_entries(res);
        assert_eq!(entries, 17usize.pow(3));
        let mut seen = vec![false; entries];
        for z in 0..=res {
            for y in 0..=res {
                for x in 0..=res {
                    let e = corner_entry(x, y, z, res, entries);
                    assert!(!seen[e], "dense collision at {x},{y},{z}");
                    seen[e] = true;
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn interpolation_is_exact_at_corners_and_inside_hull() {
        let cfg = HashGridConfig {
            n_levels: 2,
            table_size: 1 << 14,
            feature_dim: 2,
            base_resolution: 4,
            finest_resolution: 8,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut store: ParamStore<f64> = ParamStore::new();
        cfg.init_params(&mut store, &mut rng);
        let t0 = store.rc(&HashGridConfig::param_name(0));
        let t1 = store.rc(&HashGridConfig::param_name(1));
        // at grid corner (0,0,0) of level 0 (p = -1,-1,-1 clamps epsilon in) the
        // feature approaches table entry 0
        let pts = Array2::from_shape_vec((1, 3), vec![-1.0, -1.0, -1.0]).unwrap();
        let feats = encode_frozen(&cfg, &[t0.as_ref(), t1.as_ref()], &pts);
        assert!((feats[[0, 0]] - t0[[0, 0]]).abs() < 1e-9);
        // interpolated values stay within min/max of corner features
        for _ in 0..50 {
            let p = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            let pts = Array2::from_shape_vec((1, 3), p.to_vec()).unwrap();
            let feats = encode_frozen(&cfg, &[t0.as_ref(), t1.as_ref()], &pts);
            let entries = t0.shape()[0];
            let (idx, w) = corners(p, 4, entries);
            assert!((w.iter().copied().sum::<f64>() - 1.0).abs() < 1e-12);
            let lo = idx.iter().map(|&i| t0[[i, 0]]).fold(f64::INFINITY, f64::min);
            let hi = idx.iter().map(|&i| t0[[i, 0]]).fold(f64::NEG_INFINITY, f64::max);
            assert!(feats[[0, 0]] >= lo - 1e-12 && feats[[0, 0]] <= hi + 1e-12);
        }
    }

    #[test]
    fn hash_encode_table_grads_pass_fd() {
        let cfg = HashGridConfig {
            n_levels: 2,
            table_size: 64,
            feature_dim: 2,
            base_resolution: 3,
            finest_resolution: 6,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let pts: Vec<f64> = (0..9).map(|_| rng.random_range(-0.95..0.95)).collect();
        let pts = ArrayD::from_shape_vec(ndarray::IxDyn(&[3, 3]), pts).unwrap();
        let res = cfg.level_resolutions();
        let e0 = cfg.level_entries(res[0]);
        let table0: ArrayD<f64> =
            init::uniform(&mut ChaCha12Rng::seed_from_u64(2), &[e0, 2], -0.5, 0.5);
        let e1 = cfg.level_entries(res[1]);
        let table1: ArrayD<f64> =
            init::uniform(&mut ChaCha12Rng::seed_from_u64(3), &[e1, 2], -0.5, 0.5);
        let worst = fd_check(&table0, 1e-6, |t, tbl0| {
            let p = t.constant(pts.clone());
            let tbl1 = t.constant(table1.clone());
            let enc = hash_encode(t, &cfg, p, &[tbl0, tbl1]);
            let e2 = t.mul(enc, enc);
            t.sum_all(e2)
        });
        assert!(worst < 1e-6, "hash table fd: {worst}");
    }

    #[test]
    fn spatial_jacobian_matches_finite_differences() {
        let cfg = HashGridConfig {
            n_levels: 3,
            table_size: 1 << 12,
            feature_dim: 2,
            base_resolution: 4,
            finest_resolution: 16,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let mut store: ParamStore<f64> = ParamStore::new();
        cfg.init_params(&mut store, &mut rng);
        // scale tables up so gradients are meaningfully nonzero
        for l in 0..3 {
            let name = HashGridConfig::param_name(l);
            store.get_mut(&name).mapv_inplace(|v| v * 1e4);
        }
        let tables: Vec<&ArrayD<f64>> =
            (0..3).map(|l| store.get(&HashGridConfig::param_name(l))).collect();
        let h = 1e-6;
        for k in 0..20 {
            let p = [
                rng.random_range(-0.9..0.9),
                rng.random_range(-0.9..0.9),
                rng.random_range(-0.9..0.9),
            ];
            let pts = Array2::from_shape_vec((1, 3), p.to_vec()).unwrap();
            let (_, jac) = encode_frozen_with_grad(&cfg, &tables, &pts);
            for a in 0..3 {
                let mut pp = p;
                pp[a] += h;
                let mut pm = p;
                pm[a] -= h;
                let fp = encode_frozen(&cfg, &tables, &Array2::from_shape_vec((1, 3), pp.to_vec()).unwrap());
                let fm = encode_frozen(&cfg, &tables, &Array2::from_shape_vec((1, 3), pm.to_vec()).unwrap());
                for f in 0..cfg.output_dim() {
                    let fd = (fp[[0, f]] - fm[[0, f]]) / (2.0 * h);
                    let an = jac[0][f][a];
                    // FD across a cell boundary is invalid; skip near-boundary axes
                    if (fd - an).abs() > 1e-4 * (1.0 + an.abs()) {
                        let unit = (p[a] + 1.0) * 0.5 * cfg.level_resolutions()[f / 2] as f64;
                        let dist = (unit - unit.round()).abs();
                        assert!(dist < 1e-3, "point {k} axis {a} f {f}: fd {fd} vs {an}");
                    }
                }
            }
        }
    }
}
