//! Ray marching and volume rendering.
//!
//! Transmittance uses the discrete form `T_n = exp(-sum_{k<n} sigma_k delta_k)`
//! with `T_1 = 1`; a pixel color is the weight `T_n (1 - exp(-sigma_n delta_n))`
//! applied to each sample radiance, optionally composited over a constant
//! background with the leftover transmittance.

use ndarray::{Array1, Array2, ArrayD, Ix1, Ix2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Real, Tape, Var};
use crate::nerf::occupancy::OccupancyGrid;
use crate::{Error, Result};

/// Samples along one ray: strictly increasing depths with a shared step size.
#[derive(Debug, Clone)]
pub struct RaySamples {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
    pub ts: Vec<f32>,
    /// Uniform marching step; the interval length `delta` of every sample.
    pub step: f32,
}

impl RaySamples {
    pub fn validate(&self) -> Result<()> {
        let n2: f64 = self.direction.iter().map(|v| v * v).sum();
        if (n2.sqrt() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("ray direction not unit length"));
        }
        if self.step <= 0.0 {
            return Err(Error::invalid("non-positive step"));
        }
        if self.ts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("depths not strictly increasing"));
        }
        Ok(())
    }

    pub fn positions(&self) -> Array2<f32> {
        let mut out = Array2::zeros((self.ts.len(), 3));
        for (i, &t) in self.ts.iter().enumerate() {
            for a in 0..3 {
                out[[i, a]] = (self.origin[a] + t as f64 * self.direction[a]) as f32;
            }
        }
        out
    }
}

/// `T_n = exp(-sum_{k<n} sigma_k delta_k)` for n = 1..=K+1; `T_1 = 1`.
pub fn transmittance(sigmas: &[f64], deltas: &[f64]) -> Result<Vec<f64>> {
    if sigmas.len() != deltas.len() {
        return Err(Error::invalid("sigma/delta length mismatch"));
    }
    if sigmas.iter().any(|&s| s < 0.0) {
        return Err(Error::invalid("negative density"));
    }
    if deltas.iter().any(|&d| d <= 0.0) {
        return Err(Error::invalid("non-positive interval"));
    }
    let mut out = Vec::with_capacity(sigmas.len() + 1);
    let mut acc = 0.0;
    out.push(1.0);
    for (&s, &d) in sigmas.iter().zip(deltas) {
        acc += s * d;
        out.push((-acc).exp());
    }
    Ok(out)
}

/// Pure volume rendering of one ray (Eq. (3) plus optional background).
/// Returns the composited color and whether any sample contributed.
pub fn compose_ray(
    sigmas: &[f64],
    deltas: &[f64],
    colors: &[[f64; 3]],
    background: [f64; 3],
) -> Result<([f64; 3], bool)> {
    if sigmas.len() != colors.len() {
        return Err(Error::invalid("sigma/color length mismatch"));
    }
    if sigmas.is_empty() {
        return Ok((background, false));
    }
    let t = transmittance(sigmas, deltas)?;
    let mut out = [0.0; 3];
    for n in 0..sigmas.len() {
        let w = t[n] * (1.0 - (-sigmas[n] * deltas[n]).exp());
        for c in 0..3 {
            out[c] += w * colors[n][c];
        }
    }
    let t_end = t[sigmas.len()];
    for c in 0..3 {
        out[c] += t_end * background[c];
    }
    Ok((out, true))
}

/// Intersection of a ray with the `[-1, 1]^3` field box: `(t_near, t_far)`.
pub fn ray_box_intersect(origin: [f64; 3], dir: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-12 {
            if origin[a].abs() > 1.0 {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (lo, hi) = {
            let lo = (-1.0 - origin[a]) * inv;
            let hi = (1.0 - origin[a]) * inv;
            if lo < hi {
                (lo, hi)
            } else {
                (hi, lo)
            }
        };
        t0 = t0.max(lo);
        t1 = t1.min(hi);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

/// Uniformly places up to `n_samples` depths across the ray's box span, then
/// prunes samples whose occupancy cell bit is clear. `jitter` shifts each
/// sample inside its stratum (training); without it samples sit at stratum
/// midpoints (deterministic evaluation).
pub fn march_and_prune(
    origin: [f64; 3],
    direction: [f64; 3],
    grid: &OccupancyGrid,
    n_samples: usize,
    jitter: Option<&mut ChaCha12Rng>,
) -> RaySamples {
    let mut out =
        RaySamples { origin, direction, ts: Vec::new(), step: 1.0 };
    let Some((t0, t1)) = ray_box_intersect(origin, direction) else {
        return out;
    };
    if n_samples == 0 || t1 <= t0 {
        return out;
    }
    let step = (t1 - t0) / n_samples as f64;
    out.step = step as f32;
    let mut rng = jitter;
    out.ts.reserve(n_samples / 4);
    for k in 0..n_samples {
        let frac = match rng.as_deref_mut() {
            Some(r) => r.random_range(0.0..1.0),
            None => 0.5,
        };
        let t = t0 + (k as f64 + frac) * step;
        let p = [
            (origin[0] + t * direction[0]) as f32,
            (origin[1] + t * direction[1]) as f32,
            (origin[2] + t * direction[2]) as f32,
        ];
        if grid.occupied_at(p) {
            out.ts.push(t as f32);
        }
    }
    out
}

/// Differentiable batched rendering: flattened per-sample densities and colors
/// are composited into per-ray colors over a constant background.
///
/// `offsets[r]..offsets[r+1]` selects ray `r`'s samples; `deltas` holds every
/// sample's interval length.
pub fn render_rays<F: Real>(
    tape: &Tape<F>,
    sigma: Var,
    rgb: Var,
    deltas: std::rc::Rc<Vec<F>>,
    offsets: std::rc::Rc<Vec<usize>>,
    background: [F; 3],
) -> Var {
    let vs = tape.value(sigma);
    let vc = tape.value(rgb);
    let s = vs.view().into_dimensionality::<Ix1>().expect("sigma rank");
    let c = vc.view().into_dimensionality::<Ix2>().expect("rgb rank");
    let n_rays = offsets.len() - 1;
    assert_eq!(s.len(), *offsets.last().expect("offsets"), "offsets cover samples");
    assert_eq!(s.len(), deltas.len());

    let mut out = Array2::<F>::zeros((n_rays, 3));
    for r in 0..n_rays {
        let (lo, hi) = (offsets[r], offsets[r + 1]);
        let mut trans = F::one();
        let mut acc = [F::zero(); 3];
        for i in lo..hi {
            let alpha = F::one() - (-s[i] * deltas[i]).exp();
            let w = trans * alpha;
            for ch in 0..3 {
                acc[ch] += w * c[[i, ch]];
            }
            trans *= F::one() - alpha;
        }
        for ch in 0..3 {
            out[[r, ch]] = acc[ch] + trans * background[ch];
        }
    }

    let deltas_b = std::rc::Rc::clone(&deltas);
    let offsets_b = std::rc::Rc::clone(&offsets);
    tape.push_custom(
        out.into_dyn(),
        vec![sigma, rgb],
        Box::new(move |args| {
            let s = args.parents[0].view().into_dimensionality::<Ix1>().expect("sigma rank");
            let c = args.parents[1].view().into_dimensionality::<Ix2>().expect("rgb rank");
            let go = args.out_grad.view().into_dimensionality::<Ix2>().expect("grad rank");
            let n_rays = offsets_b.len() - 1;
            let mut gs = Array1::<F>::zeros(s.len());
            let mut gc = Array2::<F>::zeros(c.dim());
            for r in 0..n_rays {
                let (lo, hi) = (offsets_b[r], offsets_b[r + 1]);
                // forward recompute of transmittances
                let mut trans = Vec::with_capacity(hi - lo + 1);
                trans.push(F::one());
                for i in lo..hi {
                    let alpha = F::one() - (-s[i] * deltas_b[i]).exp();
                    trans.push(trans[i - lo] * (F::one() - alpha));
                }
                let t_end = trans[hi - lo];
                // dC/dc_n = w_n
                for i in lo..hi {
                    let alpha = F::one() - (-s[i] * deltas_b[i]).exp();
                    let w = trans[i - lo] * alpha;
                    for ch in 0..3 {
                        gc[[i, ch]] = w * go[[r, ch]];
                    }
                }
                // dC/dsigma_n = delta_n (T_{n+1} c_n - suffix_n)
                // suffix_n = sum_{m>n} w_m c_m + T_end * bg
                let mut suffix = [F::zero(); 3];
                for ch in 0..3 {
                    suffix[ch] = t_end * background[ch];
                }
                for i in (lo..hi).rev() {
                    let alpha = F::one() - (-s[i] * deltas_b[i]).exp();
                    let w = trans[i - lo] * alpha;
                    let t_next = trans[i - lo + 1];
                    let mut acc = F::zero();
                    for ch in 0..3 {
                        acc += go[[r, ch]] * (t_next * c[[i, ch]] - suffix[ch]);
                    }
                    gs[i] = deltas_b[i] * acc;
                    for ch in 0..3 {
                        suffix[ch] += w * c[[i, ch]];
                    }
                }
            }
            vec![Some(gs.into_dyn()), Some(gc.into_dyn())]
        }),
    )
}

/// Photometric mean squared error between rendered and target colors.
pub fn mse_loss<F: Real>(tape: &Tape<F>, rendered: Var, targets: ArrayD<F>) -> Var {
    let t = tape.constant(targets);
    let diff = tape.sub(rendered, t);
    let sq = tape.mul(diff, diff);
    tape.mean_all(sq)
}

pub fn psnr(mse: f64) -> f64 {
    -10.0 * mse.log10()
}
