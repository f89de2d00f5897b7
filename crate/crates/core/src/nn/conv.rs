//! 3D convolution and interpolation ops on the tape.
//!
//! Dense voxel tensors use the layout `[nz, ny, nx, c]` so that x is the
//! fastest spatial index and channels are innermost, matching the voxel-grid
//! binary format. Convolutions are 3x3x3 with zero padding, realized as 27
//! shifted matrix products; weights are stored flat as `[27 * c_in, c_out]`.

use std::rc::Rc;

use ndarray::{Array2, ArrayD, ArrayView2, Ix4, IxDyn, Slice};

use crate::autodiff::{fl, par_matmul, Real, Tape, Var};

/// Per-axis output range and input start for one kernel offset.
/// `s` is the offset minus one (in -1..=1), `n` the input size.
fn axis_range(n: usize, out_n: usize, stride: usize, s: isize) -> Option<(usize, usize, usize)> {
    // valid out index o: 0 <= stride*o + s < n
    let o0 = if s < 0 { (-s as usize).div_ceil(stride) } else { 0 };
    let last_in = n as isize - 1 - s;
    if last_in < 0 {
        return None;
    }
    let o1 = ((last_in as usize) / stride + 1).min(out_n);
    if o0 >= o1 {
        return None;
    }
    let in_start = (stride * o0) as isize + s;
    Some((o0, o1, in_start as usize))
}

fn out_dim(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Gathers the strided input region for one offset as a `[n_region, c]` matrix.
fn region_matrix<F: Real>(
    x: &ArrayD<F>,
    ranges: &[(usize, usize, usize); 3],
    stride: usize,
    c: usize,
) -> Array2<F> {
    let counts = [ranges[0].1 - ranges[0].0, ranges[1].1 - ranges[1].0, ranges[2].1 - ranges[2].0];
    let v = x.view().into_dimensionality::<Ix4>().expect("rank-4 input");
    let sl = v
        .slice_axis_move(ndarray::Axis(0), Slice::new(ranges[0].2 as isize, None, stride as isize))
        .slice_axis_move(ndarray::Axis(1), Slice::new(ranges[1].2 as isize, None, stride as isize))
        .slice_axis_move(ndarray::Axis(2), Slice::new(ranges[2].2 as isize, None, stride as isize))
        .slice_axis_move(ndarray::Axis(0), Slice::from(0..counts[0]))
        .slice_axis_move(ndarray::Axis(1), Slice::from(0..counts[1]))
        .slice_axis_move(ndarray::Axis(2), Slice::from(0..counts[2]));
    let owned = sl.to_owned();
    owned
        .into_shape_with_order((counts[0] * counts[1] * counts[2], c))
        .expect("region reshape")
}

/// 3x3x3 convolution with zero padding. `stride` is 1 or 2.
pub fn conv3d<F: Real>(tape: &Tape<F>, x: Var, w: Var, b: Var, stride: usize) -> Var {
    assert!(stride == 1 || stride == 2);
    let vx = tape.value(x);
    let vw = tape.value(w);
    let vb = tape.value(b);
    let (nz, ny, nx, cin) = {
        let s = vx.shape();
        (s[0], s[1], s[2], s[3])
    };
    let cout = vb.len();
    assert_eq!(vw.shape(), [27 * cin, cout], "conv weight shape");
    let (oz, oy, ox) = (out_dim(nz, stride), out_dim(ny, stride), out_dim(nx, stride));

    let w2 = vw.view().into_dimensionality::<ndarray::Ix2>().expect("weight rank");
    let mut out = ArrayD::<F>::zeros(IxDyn(&[oz, oy, ox, cout]));
    {
        let bias = vb.view().into_dimensionality::<ndarray::Ix1>().expect("bias rank");
        let mut flat = out
            .view_mut()
            .into_shape_with_order((oz * oy * ox, cout))
            .expect("out reshape");
        for mut row in flat.rows_mut() {
            row.assign(&bias);
        }
    }
    for k in 0..27 {
        let (sz, sy, sx) = (k / 9 - 1, (k / 3) % 3 - 1, k % 3 - 1);
        let (Some(rz), Some(ry), Some(rx)) = (
            axis_range(nz, oz, stride, sz),
            axis_range(ny, oy, stride, sy),
            axis_range(nx, ox, stride, sx),
        ) else {
            continue;
        };
        let ranges = [rz, ry, rx];
        let xm = region_matrix(&vx, &ranges, stride, cin);
        let wk: ArrayView2<'_, F> =
            w2.slice_axis(ndarray::Axis(0), Slice::from(k as usize * cin..(k as usize + 1) * cin));
        let res = par_matmul(xm.view(), wk);
        let counts = [rz.1 - rz.0, ry.1 - ry.0, rx.1 - rx.0];
        let res4 = res
            .into_shape_with_order((counts[0], counts[1], counts[2], cout))
            .expect("result reshape");
        let mut ov = out.view_mut().into_dimensionality::<Ix4>().expect("rank 4");
        let mut dst = ov
            .slice_axis_mut(ndarray::Axis(0), Slice::from(rz.0..rz.1))
            .slice_axis_move(ndarray::Axis(1), Slice::from(ry.0..ry.1))
            .slice_axis_move(ndarray::Axis(2), Slice::from(rx.0..rx.1));
        dst += &res4;
    }

    tape.push_custom(
        out,
        vec![x, w, b],
        Box::new(move |args| {
            let vx = &args.parents[0];
            let vw = &args.parents[1];
            let go = args.out_grad;
            let s = vx.shape();
            let (nz, ny, nx, cin) = (s[0], s[1], s[2], s[3]);
            let cout = go.shape()[3];
            let (oz, oy, ox) = (go.shape()[0], go.shape()[1], go.shape()[2]);
            let w2 = vw.view().into_dimensionality::<ndarray::Ix2>().expect("weight rank");

            let gb = args.needs[2].then(|| {
                let flat = go
                    .view()
                    .into_shape_with_order((oz * oy * ox, cout))
                    .expect("grad reshape");
                flat.sum_axis(ndarray::Axis(0)).into_dyn()
            });
            let mut gw = args.needs[1].then(|| Array2::<F>::zeros((27 * cin, cout)));
            let mut gx = args.needs[0].then(|| ArrayD::<F>::zeros(IxDyn(&[nz, ny, nx, cin])));

            for k in 0..27 {
                let (sz, sy, sx) = (k / 9 - 1, (k / 3) % 3 - 1, k % 3 - 1);
                let (Some(rz), Some(ry), Some(rx)) = (
                    axis_range(nz, oz, stride, sz),
                    axis_range(ny, oy, stride, sy),
                    axis_range(nx, ox, stride, sx),
                ) else {
                    continue;
                };
                let ranges = [rz, ry, rx];
                let counts = [rz.1 - rz.0, ry.1 - ry.0, rx.1 - rx.0];
                let n_region = counts[0] * counts[1] * counts[2];
                let gslice = go
                    .slice_axis(ndarray::Axis(0), Slice::from(rz.0..rz.1))
                    .slice_axis_move(ndarray::Axis(1), Slice::from(ry.0..ry.1))
                    .slice_axis_move(ndarray::Axis(2), Slice::from(rx.0..rx.1))
                    .to_owned();
                let gm = gslice.into_shape_with_order((n_region, cout)).expect("grad reshape");
                if let Some(gw) = gw.as_mut() {
                    let xm = region_matrix(vx, &ranges, stride, cin);
                    let gwk = par_matmul(xm.t(), gm.view());
                    let mut dst = gw.slice_axis_mut(
                        ndarray::Axis(0),
                        Slice::from(k as usize * cin..(k as usize + 1) * cin),
                    );
                    dst += &gwk;
                }
                if let Some(gx) = gx.as_mut() {
                    let wk = w2.slice_axis(
                        ndarray::Axis(0),
                        Slice::from(k as usize * cin..(k as usize + 1) * cin),
                    );
                    let gxk = par_matmul(gm.view(), wk.t());
                    let gxk4 = gxk
                        .into_shape_with_order((counts[0], counts[1], counts[2], cin))
                        .expect("reshape");
                    let mut gv = gx.view_mut().into_dimensionality::<Ix4>().expect("rank 4");
                    let mut dst = gv
                        .slice_axis_mut(
                            ndarray::Axis(0),
                            Slice::new(ranges[0].2 as isize, None, stride as isize),
                        )
                        .slice_axis_move(
                            ndarray::Axis(1),
                            Slice::new(ranges[1].2 as isize, None, stride as isize),
                        )
                        .slice_axis_move(
                            ndarray::Axis(2),
                            Slice::new(ranges[2].2 as isize, None, stride as isize),
                        );
                    let mut dst = dst
                        .slice_axis_mut(ndarray::Axis(0), Slice::from(0..counts[0]))
                        .slice_axis_move(ndarray::Axis(1), Slice::from(0..counts[1]))
                        .slice_axis_move(ndarray::Axis(2), Slice::from(0..counts[2]));
                    dst += &gxk4;
                }
            }
            vec![gx, gw.map(|g| g.into_dyn()), gb]
        }),
    )
}

/// 1x1x1 convolution: a per-voxel linear map.
pub fn conv1x1<F: Real>(tape: &Tape<F>, x: Var, w: Var, b: Var) -> Var {
    let shape = tape.shape(x);
    let (sp, cin) = (shape[0] * shape[1] * shape[2], shape[3]);
    let cout = tape.shape(w)[1];
    let flat = tape.reshape(x, &[sp, cin]);
    let y = tape.add_bias(tape.matmul(flat, w), b);
    tape.reshape(y, &[shape[0], shape[1], shape[2], cout])
}

/// Per-channel instance normalization where the statistics come from the
/// voxels flagged in `mask` (flat spatial order); the affine result is applied
/// to every voxel.
pub fn instance_norm_masked<F: Real>(
    tape: &Tape<F>,
    x: Var,
    mask: Rc<Vec<bool>>,
    gamma: Var,
    beta: Var,
    eps: F,
) -> Var {
    let vx = tape.value(x);
    let shape = vx.shape().to_vec();
    let c = shape[3];
    let sp = shape[0] * shape[1] * shape[2];
    assert_eq!(mask.len(), sp, "mask length mismatch");
    let n_masked = mask.iter().filter(|&&m| m).count().max(1);
    let xf = vx.view().into_shape_with_order((sp, c)).expect("flatten");
    let mut mu = vec![F::zero(); c];
    let mut var = vec![F::zero(); c];
    for (row, &m) in xf.rows().into_iter().zip(mask.iter()) {
        if m {
            for (acc, &v) in mu.iter_mut().zip(row.iter()) {
                *acc += v;
            }
        }
    }
    let inv_n = F::one() / fl::<F>(n_masked as f64);
    for v in mu.iter_mut() {
        *v *= inv_n;
    }
    for (row, &m) in xf.rows().into_iter().zip(mask.iter()) {
        if m {
            for ((acc, &v), &mu) in var.iter_mut().zip(row.iter()).zip(mu.iter()) {
                *acc += (v - mu) * (v - mu);
            }
        }
    }
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v * inv_n + eps).sqrt()).collect();

    let vg = tape.value(gamma);
    let vb = tape.value(beta);
    let g1 = vg.as_slice().expect("gamma contiguous");
    let b1 = vb.as_slice().expect("beta contiguous");
    let mut out = ArrayD::<F>::zeros(IxDyn(&shape));
    {
        let mut of = out.view_mut().into_shape_with_order((sp, c)).expect("flatten");
        for (mut orow, xrow) in of.rows_mut().into_iter().zip(xf.rows()) {
            for (j, (o, &v)) in orow.iter_mut().zip(xrow.iter()).enumerate() {
                *o = (v - mu[j]) * inv_std[j] * g1[j] + b1[j];
            }
        }
    }
    let mu = Rc::new(mu);
    let inv_std = Rc::new(inv_std);
    tape.push_custom(
        out,
        vec![x, gamma, beta],
        Box::new(move |args| {
            let vx = &args.parents[0];
            let g1 = args.parents[1].as_slice().expect("gamma contiguous");
            let go = args.out_grad.view().into_shape_with_order((sp, c)).expect("flatten");
            let xf = vx.view().into_shape_with_order((sp, c)).expect("flatten");
            let inv_nf = F::one() / fl::<F>(n_masked as f64);
            // reductions
            let mut s1 = vec![F::zero(); c]; // sum dy
            let mut s2 = vec![F::zero(); c]; // sum dy*(x-mu)
            let mut dgamma = vec![F::zero(); c];
            let mut dbeta = vec![F::zero(); c];
            for (grow, xrow) in go.rows().into_iter().zip(xf.rows()) {
                for (j, (&g, &v)) in grow.iter().zip(xrow.iter()).enumerate() {
                    let centered = v - mu[j];
                    s1[j] += g;
                    s2[j] += g * centered;
                    dgamma[j] += g * centered * inv_std[j];
                    dbeta[j] += g;
                }
            }
            let gx = args.needs[0].then(|| {
                let mut gx = ArrayD::<F>::zeros(vx.raw_dim());
                {
                    let mut gf =
                        gx.view_mut().into_shape_with_order((sp, c)).expect("flatten");
                    for ((mut grow, (gorow, xrow)), &m) in gf
                        .rows_mut()
                        .into_iter()
                        .zip(go.rows().into_iter().zip(xf.rows()))
                        .zip(mask.iter())
                    {
                        for (j, (o, (&g, &v))) in
                            grow.iter_mut().zip(gorow.iter().zip(xrow.iter())).enumerate()
                        {
                            let mut d = g1[j] * inv_std[j] * g;
                            if m {
                                let is = inv_std[j];
                                d -= g1[j] * is * s1[j] * inv_nf;
                                d -= g1[j] * is * is * is * (v - mu[j]) * s2[j] * inv_nf;
                            }
                            *o = d;
                        }
                    }
                }
                gx
            });
            vec![
                gx,
                Some(ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).expect("dgamma")),
                Some(ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).expect("dbeta")),
            ]
        }),
    )
}

/// Precomputed trilinear sampling plan: for each query, the 8 flat spatial
/// indices of the surrounding voxels and their weights.
pub struct InterpPlan<F> {
    pub idx: Vec<[usize; 8]>,
    pub w: Vec<[F; 8]>,
}

impl<F: Real> InterpPlan<F> {
    /// Builds a plan for sampling a `[dims]` grid (cell-centered over `bbox`)
    /// at the given points. Points are clamped to the grid support.
    pub fn new(points: &[[f64; 3]], dims: [usize; 3], bbox_min: [f64; 3], bbox_max: [f64; 3]) -> Self {
        let mut idx = Vec::with_capacity(points.len());
        let mut w = Vec::with_capacity(points.len());
        for p in points {
            let mut i0 = [0usize; 3];
            let mut i1 = [0usize; 3];
            let mut f = [0.0f64; 3];
            for a in 0..3 {
                let extent = bbox_max[a] - bbox_min[a];
                let cell = extent / dims[a] as f64;
                let u = ((p[a] - bbox_min[a]) / cell - 0.5).clamp(0.0, (dims[a] - 1) as f64);
                let lo = u.floor().min((dims[a] - 1) as f64);
                i0[a] = lo as usize;
                i1[a] = (i0[a] + 1).min(dims[a] - 1);
                f[a] = u - lo;
            }
            // flat index convention: ((z * ny) + y) * nx + x, points are (x, y, z)
            let flat = |x: usize, y: usize, z: usize| (z * dims[1] + y) * dims[0] + x;
            let mut ids = [0usize; 8];
            let mut ws = [F::zero(); 8];
            for corner in 0..8 {
                let (cx, cy, cz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
                let xi = if cx == 0 { i0[0] } else { i1[0] };
                let yi = if cy == 0 { i0[1] } else { i1[1] };
                let zi = if cz == 0 { i0[2] } else { i1[2] };
                let wx = if cx == 0 { 1.0 - f[0] } else { f[0] };
                let wy = if cy == 0 { 1.0 - f[1] } else { f[1] };
                let wz = if cz == 0 { 1.0 - f[2] } else { f[2] };
                ids[corner] = flat(xi, yi, zi);
                ws[corner] = fl(wx * wy * wz);
            }
            idx.push(ids);
            w.push(ws);
        }
        InterpPlan { idx, w }
    }
}

/// Samples a `[nz, ny, nx, c]` grid at planned points, producing `[n, c]`.
pub fn interp_at_points<F: Real>(tape: &Tape<F>, grid: Var, plan: Rc<InterpPlan<F>>) -> Var {
    let vg = tape.value(grid);
    let shape = vg.shape().to_vec();
    let c = shape[3];
    let sp = shape[0] * shape[1] * shape[2];
    let gf = vg.view().into_shape_with_order((sp, c)).expect("flatten");
    let n = plan.idx.len();
    let mut out = Array2::<F>::zeros((n, c));
    for (i, (ids, ws)) in plan.idx.iter().zip(plan.w.iter()).enumerate() {
        let mut row = out.row_mut(i);
        for corner in 0..8 {
            let src = gf.row(ids[corner]);
            let wt = ws[corner];
            for (o, &v) in row.iter_mut().zip(src.iter()) {
                *o += wt * v;
            }
        }
    }
    let plan2 = Rc::clone(&plan);
    tape.push_custom(
        out.into_dyn(),
        vec![grid],
        Box::new(move |args| {
            let go = args.out_grad.view().into_dimensionality::<ndarray::Ix2>().expect("rank 2");
            let mut gg = ArrayD::<F>::zeros(args.parents[0].raw_dim());
            {
                let mut gf = gg.view_mut().into_shape_with_order((sp, c)).expect("flatten");
                for (i, (ids, ws)) in plan2.idx.iter().zip(plan2.w.iter()).enumerate() {
                    let src = go.row(i);
                    for corner in 0..8 {
                        let mut dst = gf.row_mut(ids[corner]);
                        let wt = ws[corner];
                        for (o, &v) in dst.iter_mut().zip(src.iter()) {
                            *o += wt * v;
                        }
                    }
                }
            }
            vec![Some(gg)]
        }),
    )
}

/// Trilinear resize of a `[nz, ny, nx, c]` grid to `to` spatial dims
/// (half-pixel centers on both sides).
pub fn trilinear_resize<F: Real>(tape: &Tape<F>, x: Var, to: [usize; 3]) -> Var {
    let shape = tape.shape(x);
    let from = [shape[0], shape[1], shape[2]];
    // Query points are the centers of the destination voxels expressed in the
    // source grid's cell-center coordinates; reuse the interp plan on a unit box.
    let mut points = Vec::with_capacity(to[0] * to[1] * to[2]);
    for z in 0..to[0] {
        for y in 0..to[1] {
            for xq in 0..to[2] {
                let u = |i: usize, n: usize| (i as f64 + 0.5) / n as f64;
                points.push([u(xq, to[2]), u(y, to[1]), u(z, to[0])]);
            }
        }
    }
    // dims for the plan are (nx, ny, nz) per its (x, y, z) convention
    let plan = Rc::new(InterpPlan::<F>::new(
        &points,
        [from[2], from[1], from[0]],
        [0.0; 3],
        [1.0; 3],
    ));
    let flat = interp_at_points(tape, x, plan);
    tape.reshape(flat, &[to[0], to[1], to[2], shape[3]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::fd_check;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randn(rng: &mut ChaCha12Rng, shape: &[usize]) -> ArrayD<f64> {
        Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct triple-loop convolution oracle.
    fn conv_oracle(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        b: &ArrayD<f64>,
        stride: usize,
    ) -> ArrayD<f64> {
        let s = x.shape();
        let (nz, ny, nx, cin) = (s[0], s[1], s[2], s[3]);
        let cout = b.len();
        let (oz, oy, ox) = (nz.div_ceil(stride), ny.div_ceil(stride), nx.div_ceil(stride));
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[oz, oy, ox, cout]));
        for z in 0..oz {
            for y in 0..oy {
                for xq in 0..ox {
                    for co in 0..cout {
                        let mut acc = b[[co]];
                        for k in 0..27usize {
                            let (dz, dy, dx) =
                                (k / 9 as usize, (k / 3) % 3, k % 3);
                            let iz = (stride * z) as isize + dz as isize - 1;
                            let iy = (stride * y) as isize + dy as isize - 1;
                            let ix = (stride * xq) as isize + dx as isize - 1;
                            if iz < 0 || iy < 0 || ix < 0 {
                                continue;
                            }
                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                            if iz >= nz || iy >= ny || ix >= nx {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += x[[iz, iy, ix, ci]] * w[[k * cin + ci, co]];
                            }
                        }
                        out[[z, y, xq, co]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3d_matches_loop_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        for stride in [1usize, 2] {
            let x = randn(&mut rng, &[5, 4, 6, 3]);
            let w = randn(&mut rng, &[27 * 3, 2]);
            let b = randn(&mut rng, &[2]);
            let tape: Tape<f64> = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            let y = conv3d(&tape, xv, wv, bv, stride);
            let expect = conv_oracle(&x, &w, &b, stride);
            let got = tape.value(y);
            assert_eq!(got.shape(), expect.shape());
            let err = (&*got - &expect).iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            assert!(err < 1e-12, "stride {stride} mismatch {err}");
        }
    }

    #[test]
    fn conv3d_grads_pass_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x0 = randn(&mut rng, &[3, 3, 4, 2]);
        let w0 = randn(&mut rng, &[27 * 2, 2]);
        let b0 = randn(&mut rng, &[2]);
        for stride in [1usize, 2] {
            // input gradient
            let worst = fd_check(&x0, 1e-6, |t, x| {
                let w = t.constant(w0.clone());
                let b = t.constant(b0.clone());
                let y = conv3d(t, x, w, b, stride);
                let y2 = t.mul(y, y);
                t.sum_all(y2)
            });
            assert!(worst < 1e-5, "conv dx stride {stride}: {worst}");
            // weight gradient
            let worst = fd_check(&w0, 1e-6, |t, w| {
                let x = t.constant(x0.clone());
                let b = t.constant(b0.clone());
                let y = conv3d(t, x, w, b, stride);
                let y2 = t.mul(y, y);
                t.sum_all(y2)
            });
            assert!(worst < 1e-5, "conv dw stride {stride}: {worst}");
        }
    }

    #[test]
    fn instance_norm_masked_stats_and_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x0 = randn(&mut rng, &[2, 3, 2, 4]);
        let mask: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
        let mask = Rc::new(mask);
        // masked voxels should be standardized when gamma=1, beta=0
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(x0.clone());
        let g = tape.constant(ArrayD::ones(IxDyn(&[4])));
        let b = tape.constant(ArrayD::zeros(IxDyn(&[4])));
        let y = instance_norm_masked(&tape, x, Rc::clone(&mask), g, b, 1e-9);
        let vy = tape.value(y);
        let yf = vy.view().into_shape_with_order((12, 4)).unwrap();
        for ch in 0..4 {
            let vals: Vec<f64> = yf
                .rows()
                .into_iter()
                .zip(mask.iter())
                .filter(|(_, &m)| m)
                .map(|(r, _)| r[ch])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "channel {ch} var {var}");
        }
        // gradient check through masked stats
        let gamma0 = randn(&mut rng, &[4]);
        let beta0 = randn(&mut rng, &[4]);
        let worst = fd_check(&x0, 1e-6, |t, x| {
            let g = t.leaf(gamma0.clone());
            let b = t.leaf(beta0.clone());
            let y = instance_norm_masked(t, x, Rc::clone(&mask), g, b, 1e-5);
            let y2 = t.mul(y, y);
            t.sum_all(y2)
        });
        assert!(worst < 1e-5, "instance norm fd: {worst}");
    }

    #[test]
    fn interp_at_points_hits_cell_centers_exactly() {
        let tape: Tape<f64> = Tape::new();
        let mut grid = ArrayD::<f64>::zeros(IxDyn(&[2, 2, 2, 1]));
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    grid[[z, y, x, 0]] = (z * 4 + y * 2 + x) as f64;
                }
            }
        }
        let g = tape.constant(grid);
        // center of voxel (x=1, y=0, z=1) on [-1,1]^3 with dims 2 is (0.5, -0.5, 0.5)
        let plan = Rc::new(InterpPlan::<f64>::new(
            &[[0.5, -0.5, 0.5]],
            [2, 2, 2],
            [-1.0; 3],
            [1.0; 3],
        ));
        let out = interp_at_points(&tape, g, plan);
        assert!((tape.value(out)[[0, 0]] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn interp_and_resize_grads_pass_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x0 = randn(&mut rng, &[2, 3, 3, 2]);
        let pts: Vec<[f64; 3]> =
            (0..5).map(|_| std::array::from_fn(|_| rng.random_range(-0.9..0.9))).collect();
        let plan = Rc::new(InterpPlan::<f64>::new(&pts, [3, 3, 2], [-1.0; 3], [1.0; 3]));
        let worst = fd_check(&x0, 1e-6, |t, x| {
            let y = interp_at_points(t, x, Rc::clone(&plan));
            let y2 = t.mul(y, y);
            t.sum_all(y2)
        });
        assert!(worst < 1e-5, "interp fd: {worst}");
        let worst = fd_check(&x0, 1e-6, |t, x| {
            let y = trilinear_resize(t, x, [4, 6, 6]);
            let y2 = t.mul(y, y);
            t.sum_all(y2)
        });
        assert!(worst < 1e-5, "resize fd: {worst}");
    }

    #[test]
    fn resize_preserves_constant_fields() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.constant(ArrayD::from_elem(IxDyn(&[2, 2, 2, 3]), 0.7));
        let y = trilinear_resize(&tape, x, [5, 4, 3]);
        let v = tape.value(y);
        assert_eq!(v.shape(), &[5, 4, 3, 3]);
        assert!(v.iter().all(|&e| (e - 0.7).abs() < 1e-12));
    }
}
