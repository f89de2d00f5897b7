//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; calling
//! [`Tape::backward`] on a scalar node walks the list in reverse and
//! accumulates gradients. Values are held behind `Arc` so parameter tensors can
//! enter the graph without copies. The op set is intentionally small: exactly
//! what the fields, the backbone, the transformer and the losses need.
//!
//! Generic over `f32` (training) and `f64` (finite-difference checks).

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Axis, Ix1, Ix2, IxDyn, Slice};
use rayon::prelude::*;

/// Scalar element type for tape tensors.
pub trait Real:
    ndarray::NdFloat + num_traits::FromPrimitive + std::iter::Sum + Send + Sync + 'static
{
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shorthand for converting an `f64` literal into the tape scalar type.
pub fn fl<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("f64 conversion")
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Arguments available to a backward function.
pub struct BackArgs<'a, F: Real> {
    pub out_grad: &'a ArrayD<F>,
    pub out_value: &'a ArrayD<F>,
    pub parents: &'a [Arc<ArrayD<F>>],
    /// Which parents need a gradient; entries with `false` may be skipped.
    pub needs: &'a [bool],
}

type GradFn<F> = Box<dyn Fn(&BackArgs<'_, F>) -> Vec<Option<ArrayD<F>>>>;

struct Node<F: Real> {
    value: Arc<ArrayD<F>>,
    parents: Vec<usize>,
    grad_fn: Option<GradFn<F>>,
    needs_grad: bool,
}

/// Records a single forward computation.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node<F>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: ArrayD<F>) -> Var {
        self.push_node(Node {
            value: Arc::new(value),
            parents: vec![],
            grad_fn: None,
            needs_grad: false,
        })
    }

    /// Leaf that accumulates a gradient (network inputs under test).
    pub fn leaf(&self, value: ArrayD<F>) -> Var {
        self.push_node(Node { value: Arc::new(value), parents: vec![], grad_fn: None, needs_grad: true })
    }

    /// Leaf sharing storage with a parameter tensor.
    pub fn param(&self, value: Arc<ArrayD<F>>) -> Var {
        self.push_node(Node { value, parents: vec![], grad_fn: None, needs_grad: true })
    }

    /// Registers a custom op node. `grad_fn` must return one entry per parent.
    pub fn push_custom(&self, value: ArrayD<F>, parents: Vec<Var>, grad_fn: GradFn<F>) -> Var {
        let needs = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].needs_grad)
        };
        self.push_node(Node {
            value: Arc::new(value),
            parents: parents.into_iter().map(|v| v.0).collect(),
            grad_fn: if needs { Some(grad_fn) } else { None },
            needs_grad: needs,
        })
    }

    pub fn value(&self, v: Var) -> Arc<ArrayD<F>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn scalar_value(&self, v: Var) -> F {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        *val.iter().next().expect("empty tensor")
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Runs reverse accumulation from a scalar `loss` node. Returns a gradient
    /// table indexed by node; entries for nodes without gradients are `None`.
    /// Intermediate gradients are freed as soon as they have been consumed,
    /// except for leaves and nodes listed in `keep`.
    pub fn backward(&self, loss: Var, keep: &[Var]) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<ArrayD<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(nodes[loss.0].value.shape()));
        let keep_flags: Vec<bool> = {
            let mut flags = vec![false; nodes.len()];
            for v in keep {
                flags[v.0] = true;
            }
            flags
        };
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !nodes[i].needs_grad {
                continue;
            }
            let Some(grad_fn) = nodes[i].grad_fn.as_ref() else {
                continue; // leaf: retain accumulated grad
            };
            let parent_vals: Vec<Arc<ArrayD<F>>> =
                nodes[i].parents.iter().map(|&p| Arc::clone(&nodes[p].value)).collect();
            let needs: Vec<bool> = nodes[i].parents.iter().map(|&p| nodes[p].needs_grad).collect();
            let out_grad = grads[i].take().expect("grad present");
            let args = BackArgs {
                out_grad: &out_grad,
                out_value: &nodes[i].value,
                parents: &parent_vals,
                needs: &needs,
            };
            let contribs = (grad_fn)(&args);
            assert_eq!(contribs.len(), nodes[i].parents.len(), "grad_fn arity mismatch");
            for (slot, contrib) in nodes[i].parents.iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                if !nodes[*slot].needs_grad {
                    continue;
                }
                match &mut grads[*slot] {
                    Some(acc) => *acc += &c,
                    none => *none = Some(c),
                }
            }
            if keep_flags[i] {
                grads[i] = Some(out_grad);
            }
        }
        Gradients { grads }
    }
}

/// Gradient table produced by [`Tape::backward`].
pub struct Gradients<F: Real> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn take(&mut self, v: Var) -> Option<ArrayD<F>> {
        self.grads[v.0].take()
    }

    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads[v.0].as_ref()
    }
}

/// Row-chunked parallel matrix multiply; deterministic (each output element is
/// produced by exactly one sequential kernel call).
pub fn par_matmul<F: Real>(a: ArrayView2<'_, F>, b: ArrayView2<'_, F>) -> Array2<F> {
    let (n, k) = a.dim();
    let m = b.dim().1;
    assert_eq!(k, b.dim().0, "matmul inner dims: {:?} x {:?}", a.dim(), b.dim());
    let flops = n.saturating_mul(k).saturating_mul(m);
    if flops < (1 << 20) || n < 4 {
        return a.dot(&b);
    }
    let mut out = Array2::zeros((n, m));
    let chunk = n.div_ceil(rayon::current_num_threads() * 4).max(1);
    out.axis_chunks_iter_mut(Axis(0), chunk)
        .into_par_iter()
        .enumerate()
        .for_each(|(ci, mut oc)| {
            let lo = ci * chunk;
            let hi = (lo + oc.nrows()).min(n);
            oc.assign(&a.slice_axis(Axis(0), Slice::from(lo..hi)).dot(&b));
        });
    out
}

fn as2<F: Real>(a: &ArrayD<F>) -> ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("expected rank-2 tensor")
}

const PAR_CHUNK: usize = 1 << 16;

/// Parallel elementwise map over a contiguous tensor (deterministic: each
/// element depends only on its own input).
pub fn par_unary<F: Real>(src: &ArrayD<F>, f: impl Fn(F) -> F + Sync) -> ArrayD<F> {
    let Some(s) = src.as_slice() else {
        return src.mapv(&f);
    };
    if s.len() < PAR_CHUNK {
        return src.mapv(&f);
    }
    let mut out = ArrayD::zeros(src.raw_dim());
    out.as_slice_mut()
        .expect("fresh array is contiguous")
        .par_chunks_mut(PAR_CHUNK)
        .zip(s.par_chunks(PAR_CHUNK))
        .for_each(|(oc, sc)| {
            for (o, &v) in oc.iter_mut().zip(sc) {
                *o = f(v);
            }
        });
    out
}

/// Parallel elementwise combine of two same-shaped contiguous tensors.
pub fn par_binary<F: Real>(a: &ArrayD<F>, b: &ArrayD<F>, f: impl Fn(F, F) -> F + Sync) -> ArrayD<F> {
    let (Some(sa), Some(sb)) = (a.as_slice(), b.as_slice()) else {
        let mut out = a.clone();
        ndarray::Zip::from(&mut out).and(b).for_each(|o, &v| *o = f(*o, v));
        return out;
    };
    let mut out = ArrayD::zeros(a.raw_dim());
    let os = out.as_slice_mut().expect("fresh array is contiguous");
    if sa.len() < PAR_CHUNK {
        for ((o, &x), &y) in os.iter_mut().zip(sa).zip(sb) {
            *o = f(x, y);
        }
    } else {
        os.par_chunks_mut(PAR_CHUNK)
            .zip(sa.par_chunks(PAR_CHUNK).zip(sb.par_chunks(PAR_CHUNK)))
            .for_each(|(oc, (ac, bc))| {
                for ((o, &x), &y) in oc.iter_mut().zip(ac).zip(bc) {
                    *o = f(x, y);
                }
            });
    }
    out
}

impl<F: Real> Tape<F> {
    /// Elementwise sum; shapes must match.
    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = par_binary(&va, &vb, |x, y| x + y);
        self.push_custom(
            out,
            vec![a, b],
            Box::new(|args| vec![Some(args.out_grad.clone()), Some(args.out_grad.clone())]),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let out = par_binary(&va, &vb, |x, y| x - y);
        self.push_custom(
            out,
            vec![a, b],
            Box::new(|args| vec![Some(args.out_grad.clone()), Some(-args.out_grad.clone())]),
        )
    }

    /// Elementwise product; shapes must match.
    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = par_binary(&va, &vb, |x, y| x * y);
        self.push_custom(
            out,
            vec![a, b],
            Box::new(|args| {
                vec![
                    args.needs[0].then(|| par_binary(args.out_grad, &args.parents[1], |g, v| g * v)),
                    args.needs[1].then(|| par_binary(args.out_grad, &args.parents[0], |g, v| g * v)),
                ]
            }),
        )
    }

    pub fn scale(&self, a: Var, s: F) -> Var {
        let out = &*self.value(a) * s;
        self.push_custom(out, vec![a], Box::new(move |args| vec![Some(args.out_grad * s)]))
    }

    pub fn add_scalar(&self, a: Var, s: F) -> Var {
        let out = &*self.value(a) + s;
        self.push_custom(out, vec![a], Box::new(|args| vec![Some(args.out_grad.clone())]))
    }

    /// `x [.., d] + b [d]`, broadcasting over leading axes.
    pub fn add_bias(&self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let d = *vx.shape().last().expect("rank >= 1");
        assert_eq!(vb.shape(), [d], "bias shape mismatch");
        let out = &*vx + &vb.view().into_dimensionality::<Ix1>().expect("bias rank");
        self.push_custom(
            out,
            vec![x, b],
            Box::new(move |args| {
                let gb = args.needs[1].then(|| {
                    let flat =
                        args.out_grad.view().into_shape_with_order((args.out_grad.len() / d, d)).expect("flatten");
                    flat.sum_axis(Axis(0)).into_dyn()
                });
                vec![Some(args.out_grad.clone()), gb]
            }),
        )
    }

    /// 2-D matrix product.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let out = par_matmul(as2(&va), as2(&vb)).into_dyn();
        self.push_custom(
            out,
            vec![a, b],
            Box::new(|args| {
                let g = as2(args.out_grad);
                let ga = args.needs[0]
                    .then(|| par_matmul(g, as2(&args.parents[1]).t()).into_dyn());
                let gb = args.needs[1]
                    .then(|| par_matmul(as2(&args.parents[0]).t(), g).into_dyn());
                vec![ga, gb]
            }),
        )
    }

    /// Fused dense layer `x W + b` (one node, one output buffer).
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        self.linear_impl(x, w, b, false)
    }

    /// Fused dense layer with ReLU applied in place.
    pub fn linear_relu(&self, x: Var, w: Var, b: Var) -> Var {
        self.linear_impl(x, w, b, true)
    }

    fn linear_impl(&self, x: Var, w: Var, b: Var, relu: bool) -> Var {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let mut out = par_matmul(as2(&vx), as2(&vw));
        let bias = vb.view().into_dimensionality::<Ix1>().expect("bias rank");
        let m = out.ncols();
        let chunk_len = (PAR_CHUNK - PAR_CHUNK % m.max(1)).max(m.max(1));
        out.as_slice_mut()
            .expect("contiguous")
            .par_chunks_mut(chunk_len)
            .for_each(|chunk| {
                let bs = bias.as_slice().expect("contiguous bias");
                for row in chunk.chunks_mut(m) {
                    for (o, &bv) in row.iter_mut().zip(bs) {
                        *o += bv;
                        if relu && *o < F::zero() {
                            *o = F::zero();
                        }
                    }
                }
            });
        self.push_custom(
            out.into_dyn(),
            vec![x, w, b],
            Box::new(move |args| {
                // mask the upstream grad by the relu state first
                let g = if relu {
                    par_binary(args.out_grad, args.out_value, |g, y| {
                        if y > F::zero() {
                            g
                        } else {
                            F::zero()
                        }
                    })
                } else {
                    args.out_grad.clone()
                };
                let g2 = as2(&g);
                let gx = args.needs[0]
                    .then(|| par_matmul(g2, as2(&args.parents[1]).t()).into_dyn());
                let gw = args.needs[1]
                    .then(|| par_matmul(as2(&args.parents[0]).t(), g2).into_dyn());
                let gb = args.needs[2].then(|| g2.sum_axis(Axis(0)).into_dyn());
                vec![gx, gw, gb]
            }),
        )
    }

    pub fn transpose2(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = as2(&va).t().to_owned().into_dyn();
        self.push_custom(
            out,
            vec![a],
            Box::new(|args| vec![Some(as2(args.out_grad).t().to_owned().into_dyn())]),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = par_unary(&self.value(a), |v| if v > F::zero() { v } else { F::zero() });
        self.push_custom(
            out,
            vec![a],
            Box::new(|args| {
                let g = par_binary(args.out_grad, &args.parents[0], |g, x| {
                    if x > F::zero() { g } else { F::zero() }
                });
                vec![Some(g)]
            }),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = par_unary(&self.value(a), |v| F::one() / (F::one() + (-v).exp()));
        self.push_custom(
            out,
            vec![a],
            Box::new(|args| {
                let g = par_binary(args.out_grad, args.out_value, |g, y| g * y * (F::one() - y));
                vec![Some(g)]
            }),
        )
    }

    /// `min(exp(x), cap)`; gradient is `exp(x)` below the cap, 0 above.
    pub fn exp_capped(&self, a: Var, cap: F) -> Var {
        let out = par_unary(&self.value(a), |v| v.exp().min(cap));
        self.push_custom(
            out,
            vec![a],
            Box::new(move |args| {
                let g = par_binary(args.out_grad, &args.parents[0], |g, x| {
                    let e = x.exp();
                    if e < cap { g * e } else { F::zero() }
                });
                vec![Some(g)]
            }),
        )
    }

    pub fn ln(&self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.ln());
        self.push_custom(
            out,
            vec![a],
            Box::new(|args| {
                let mut g = args.out_grad.clone();
                ndarray::Zip::from(&mut g).and(&*args.parents[0]).for_each(|g, &x| *g = *g / x);
                vec![Some(g)]
            }),
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the interval.
    pub fn clamp(&self, a: Var, lo: F, hi: F) -> Var {
        let out = self.value(a).mapv(|v| v.max(lo).min(hi));
        self.push_custom(
            out,
            vec![a],
            Box::new(move |args| {
                let mut g = args.out_grad.clone();
                ndarray::Zip::from(&mut g).and(&*args.parents[0]).for_each(|g, &x| {
                    if x <= lo || x >= hi {
                        *g = F::zero();
                    }
                });
                vec![Some(g)]
            }),
        )
    }

    pub fn abs(&self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.abs());
        self.push_custom(
            out,
            vec![a],
            Box::new(|args| {
                let mut g = args.out_grad.clone();
                ndarray::Zip::from(&mut g).and(&*args.parents[0]).for_each(|g, &x| {
                    *g = *g * if x > F::zero() { F::one() } else if x < F::zero() { -F::one() } else { F::zero() };
                });
                vec![Some(g)]
            }),
        )
    }

    /// Softmax along the last axis.
    pub fn softmax_lastdim(&self, a: Var) -> Var {
        let va = self.value(a);
        let d = *va.shape().last().expect("rank >= 1");
        let mut out = va.as_ref().clone();
        {
            let mut flat = out.view_mut().into_shape_with_order((va.len() / d, d)).expect("flatten");
            for mut row in flat.rows_mut() {
                let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
                row.mapv_inplace(|v| (v - mx).exp());
                let s = row.sum();
                row.mapv_inplace(|v| v / s);
            }
        }
        self.push_custom(
            out,
            vec![a],
            Box::new(move |args| {
                let y = args.out_value;
                let mut g = args.out_grad.clone();
                let n = y.len() / d;
                let yf = y.view().into_shape_with_order((n, d)).expect("flatten");
                let mut gf = g.view_mut().into_shape_with_order((n, d)).expect("flatten");
                for (mut grow, yrow) in gf.rows_mut().into_iter().zip(yf.rows()) {
                    let dot = grow.iter().zip(yrow.iter()).map(|(&g, &y)| g * y).sum::<F>();
                    for (g, &y) in grow.iter_mut().zip(yrow.iter()) {
                        *g = y * (*g - dot);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Log-softmax along the last axis (numerically stable).
    pub fn log_softmax_lastdim(&self, a: Var) -> Var {
        let va = self.value(a);
        let d = *va.shape().last().expect("rank >= 1");
        let mut out = va.as_ref().clone();
        {
            let mut flat = out.view_mut().into_shape_with_order((va.len() / d, d)).expect("flatten");
            for mut row in flat.rows_mut() {
                let mx = row.iter().cloned().fold(F::neg_infinity(), F::max);
                let lse = row.iter().map(|&v| (v - mx).exp()).sum::<F>().ln() + mx;
                row.mapv_inplace(|v| v - lse);
            }
        }
        self.push_custom(
            out,
            vec![a],
            Box::new(move |args| {
                let mut g = args.out_grad.clone();
                let n = g.len() / d;
                let yf = args.out_value.view().into_shape_with_order((n, d)).expect("flatten");
                let mut gf = g.view_mut().into_shape_with_order((n, d)).expect("flatten");
                for (mut grow, yrow) in gf.rows_mut().into_iter().zip(yf.rows()) {
                    let gsum = grow.sum();
                    for (g, &ly) in grow.iter_mut().zip(yrow.iter()) {
                        *g = *g - ly.exp() * gsum;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push_custom(
            ArrayD::from_elem(IxDyn(&[]), s),
            vec![a],
            Box::new(|args| {
                let g = args.out_grad.iter().next().copied().expect("scalar grad");
                vec![Some(ArrayD::from_elem(args.parents[0].shape(), g))]
            }),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = fl::<F>(va.len() as f64);
        let s = va.sum() / n;
        self.push_custom(
            ArrayD::from_elem(IxDyn(&[]), s),
            vec![a],
            Box::new(move |args| {
                let g = args.out_grad.iter().next().copied().expect("scalar grad") / n;
                vec![Some(ArrayD::from_elem(args.parents[0].shape(), g))]
            }),
        )
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn slice_lastdim(&self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let rank = va.ndim();
        let out = va
            .slice_axis(Axis(rank - 1), Slice::from(start..start + len))
            .to_owned();
        self.push_custom(
            out,
            vec![a],
            Box::new(move |args| {
                let mut g = ArrayD::zeros(args.parents[0].shape());
                let rank = g.ndim();
                g.slice_axis_mut(Axis(rank - 1), Slice::from(start..start + len))
                    .assign(args.out_grad);
                vec![Some(g)]
            }),
        )
    }

    /// Concatenation along the last axis.
    pub fn concat_lastdim(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<_> = parts.iter().map(|&v| self.value(v)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let rank = vals[0].ndim();
        let out = ndarray::concatenate(Axis(rank - 1), &views).expect("concat shapes");
        let widths: Vec<usize> = vals.iter().map(|v| *v.shape().last().expect("rank")).collect();
        self.push_custom(
            out,
            parts.to_vec(),
            Box::new(move |args| {
                let rank = args.out_grad.ndim();
                let mut offset = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let g = args
                            .out_grad
                            .slice_axis(Axis(rank - 1), Slice::from(offset..offset + w))
                            .to_owned();
                        offset += w;
                        Some(g)
                    })
                    .collect()
            }),
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let out = va
            .view()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch")
            .to_owned();
        self.push_custom(
            out,
            vec![a],
            Box::new(|args| {
                let back = args
                    .out_grad
                    .view()
                    .into_shape_with_order(args.parents[0].raw_dim())
                    .expect("reshape back")
                    .to_owned();
                vec![Some(back)]
            }),
        )
    }

    /// Gathers rows of a rank-2 tensor.
    pub fn gather_rows(&self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let va = self.value(a);
        let src = as2(&va);
        let d = src.ncols();
        let mut out = Array2::zeros((idx.len(), d));
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).assign(&src.row(i));
        }
        self.push_custom(
            out.into_dyn(),
            vec![a],
            Box::new(move |args| {
                let mut g = Array2::zeros(as2(&args.parents[0]).dim());
                let go = as2(args.out_grad);
                for (o, &i) in idx.iter().enumerate() {
                    let mut row = g.row_mut(i);
                    row += &go.row(o);
                }
                vec![Some(g.into_dyn())]
            }),
        )
    }

    /// Mean-pools rows into `n_seg` segments. `seg[i]` is the segment of input
    /// row `i`; every segment must be non-empty.
    pub fn segment_mean(&self, a: Var, seg: Arc<Vec<usize>>, n_seg: usize) -> Var {
        let va = self.value(a);
        let src = as2(&va);
        assert_eq!(src.nrows(), seg.len());
        let d = src.ncols();
        let mut out = Array2::<F>::zeros((n_seg, d));
        let mut counts = vec![0usize; n_seg];
        for (row, &s) in src.rows().into_iter().zip(seg.iter()) {
            let mut acc = out.row_mut(s);
            acc += &row;
            counts[s] += 1;
        }
        let inv: Vec<F> = counts
            .iter()
            .map(|&c| {
                assert!(c > 0, "empty segment in segment_mean");
                F::one() / fl::<F>(c as f64)
            })
            .collect();
        for (mut row, &w) in out.rows_mut().into_iter().zip(inv.iter()) {
            row *= w;
        }
        let inv = Arc::new(inv);
        self.push_custom(
            out.into_dyn(),
            vec![a],
            Box::new(move |args| {
                let go = as2(args.out_grad);
                let mut g = Array2::zeros((seg.len(), go.ncols()));
                for (mut row, &s) in g.rows_mut().into_iter().zip(seg.iter()) {
                    row.assign(&go.row(s));
                    row *= inv[s];
                }
                vec![Some(g.into_dyn())]
            }),
        )
    }

    /// Euclidean norm of each row of an `[n, d]` tensor.
    pub fn row_norm(&self, a: Var) -> Var {
        let va = self.value(a);
        let src = as2(&va);
        let out: Array1<F> =
            src.rows().into_iter().map(|r| r.iter().map(|&v| v * v).sum::<F>().sqrt()).collect();
        self.push_custom(
            out.into_dyn(),
            vec![a],
            Box::new(|args| {
                let src = as2(&args.parents[0]);
                let norms = args.out_value.view().into_dimensionality::<Ix1>().expect("rank 1");
                let go = args.out_grad.view().into_dimensionality::<Ix1>().expect("rank 1");
                let mut g = Array2::zeros(src.dim());
                for ((mut grow, xrow), (&n, &og)) in
                    g.rows_mut().into_iter().zip(src.rows()).zip(norms.iter().zip(go.iter()))
                {
                    if n > F::zero() {
                        grow.assign(&xrow);
                        grow *= og / n;
                    }
                }
                vec![Some(g.into_dyn())]
            }),
        )
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let vx = self.value(x);
        let d = *vx.shape().last().expect("rank >= 1");
        let n = vx.len() / d;
        let xf = vx.view().into_shape_with_order((n, d)).expect("flatten");
        let mut xhat = Array2::<F>::zeros((n, d));
        let mut inv_std = Array1::<F>::zeros(n);
        for (i, row) in xf.rows().into_iter().enumerate() {
            let mu = row.sum() / fl::<F>(d as f64);
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / fl::<F>(d as f64);
            let is = F::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for (o, &v) in xhat.row_mut(i).iter_mut().zip(row.iter()) {
                *o = (v - mu) * is;
            }
        }
        let vg = self.value(gamma);
        let vb = self.value(beta);
        let g1 = vg.view().into_dimensionality::<Ix1>().expect("gamma rank");
        let b1 = vb.view().into_dimensionality::<Ix1>().expect("beta rank");
        let mut out = xhat.clone();
        for mut row in out.rows_mut() {
            for ((o, &g), &b) in row.iter_mut().zip(g1.iter()).zip(b1.iter()) {
                *o = *o * g + b;
            }
        }
        let xhat = Arc::new(xhat);
        let inv_std = Arc::new(inv_std);
        let out = out.into_shape_with_order(vx.raw_dim()).expect("reshape").to_owned();
        self.push_custom(
            out,
            vec![x, gamma, beta],
            Box::new(move |args| {
                let go = args.out_grad.view().into_shape_with_order((n, d)).expect("flatten");
                let g1 = args.parents[1].view().into_dimensionality::<Ix1>().expect("gamma");
                let mut dx = Array2::<F>::zeros((n, d));
                let mut dgamma = Array1::<F>::zeros(d);
                let mut dbeta = Array1::<F>::zeros(d);
                let dn = fl::<F>(d as f64);
                for i in 0..n {
                    let gorow = go.row(i);
                    let xh = xhat.row(i);
                    // accumulate affine grads
                    for ((dg, db), (&g, &xh)) in
                        dgamma.iter_mut().zip(dbeta.iter_mut()).zip(gorow.iter().zip(xh.iter()))
                    {
                        *dg += g * xh;
                        *db += g;
                    }
                    // dxhat = go * gamma
                    let dxhat: Vec<F> =
                        gorow.iter().zip(g1.iter()).map(|(&g, &ga)| g * ga).collect();
                    let sum_dxhat = dxhat.iter().copied().sum::<F>();
                    let sum_dxhat_xhat =
                        dxhat.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>();
                    let is = inv_std[i];
                    for ((o, &dxh), &xh) in
                        dx.row_mut(i).iter_mut().zip(dxhat.iter()).zip(xh.iter())
                    {
                        *o = is * (dxh - sum_dxhat / dn - xh * sum_dxhat_xhat / dn);
                    }
                }
                vec![
                    Some(dx.into_shape_with_order(args.parents[0].raw_dim()).expect("reshape").to_owned()),
                    Some(dgamma.into_dyn()),
                    Some(dbeta.into_dyn()),
                ]
            }),
        )
    }
}

/// Central finite-difference utilities for gradient tests.
pub mod check {
    use super::*;

    /// Compares the tape gradient of `f` w.r.t. `x0` against central finite
    /// differences. `f` must build a scalar loss from the leaf it is given.
    /// Returns the worst relative error over all coordinates.
    pub fn fd_check<F, Build>(x0: &ArrayD<F>, h: F, build: Build) -> f64
    where
        F: Real,
        Build: Fn(&Tape<F>, Var) -> Var,
    {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let loss = build(&tape, x);
        let mut grads = tape.backward(loss, &[]);
        let analytic = grads.take(x).expect("input gradient");

        let mut worst: f64 = 0.0;
        let mut flat = x0.clone();
        for i in 0..flat.len() {
            let orig = flat.as_slice_mut().expect("contiguous")[i];
            let eval = |v: F, flat: &mut ArrayD<F>| -> F {
                flat.as_slice_mut().expect("contiguous")[i] = v;
                let t = Tape::new();
                let x = t.leaf(flat.clone());
                let l = build(&t, x);
                t.scalar_value(l)
            };
            let fp = eval(orig + h, &mut flat);
            let fm = eval(orig - h, &mut flat);
            flat.as_slice_mut().expect("contiguous")[i] = orig;
            let fd = (fp - fm).to_f64() / (2.0 * h.to_f64());
            let an = analytic.as_slice().expect("contiguous")[i].to_f64();
            let denom = an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max((an - fd).abs() / denom);
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::check::fd_check;
    use super::*;
    use ndarray::{array, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn randn(rng: &mut ChaCha12Rng, shape: &[usize]) -> ArrayD<f64> {
        Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matmul_matches_manual() {
        let t: Tape<f64> = Tape::new();
        let a = t.constant(array![[1.0, 2.0], [3.0, 4.0]].into_dyn());
        let b = t.constant(array![[5.0], [6.0]].into_dyn());
        let c = t.matmul(a, b);
        let v = t.value(c);
        assert_eq!(v.as_slice().unwrap(), &[17.0, 39.0]);
    }

    #[test]
    fn par_matmul_matches_dot() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let a = Array2::from_shape_fn((257, 64), |_| rng.random_range(-1.0f32..1.0));
        let b = Array2::from_shape_fn((64, 129), |_| rng.random_range(-1.0f32..1.0));
        let fast = par_matmul(a.view(), b.view());
        let slow = a.dot(&b);
        assert!(fast.iter().zip(slow.iter()).all(|(x, y)| (x - y).abs() < 1e-5));
    }

    #[test]
    fn elementwise_grads_pass_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let x0 = randn(&mut rng, &[4, 3]);
        for (name, f) in [
            ("relu", 0usize),
            ("sigmoid", 1),
            ("abs", 2),
            ("softmax", 3),
            ("log_softmax", 4),
            ("exp_capped", 5),
        ] {
            let worst = fd_check(&x0, 1e-6, |t, x| {
                let y = match f {
                    0 => t.relu(x),
                    1 => t.sigmoid(x),
                    2 => t.abs(x),
                    3 => t.softmax_lastdim(x),
                    4 => t.log_softmax_lastdim(x),
                    _ => t.exp_capped(x, 10.0),
                };
                let y2 = t.mul(y, y);
                t.sum_all(y2)
            });
            assert!(worst < 1e-5, "{name} grad check failed: {worst}");
        }
    }

    #[test]
    fn matmul_and_bias_grads_pass_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x0 = randn(&mut rng, &[5, 4]);
        let w = randn(&mut rng, &[4, 3]);
        let b = randn(&mut rng, &[3]);
        let worst = fd_check(&x0, 1e-6, |t, x| {
            let w = t.leaf(w.clone());
            let b = t.leaf(b.clone());
            let h = t.add_bias(t.matmul(x, w), b);
            t.mean_all(t.relu(h))
        });
        assert!(worst < 1e-6, "matmul chain fd: {worst}");
    }

    #[test]
    fn fused_linear_grads_pass_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let x0 = randn(&mut rng, &[5, 4]);
        let w = randn(&mut rng, &[4, 3]);
        let b = randn(&mut rng, &[3]);
        for relu in [false, true] {
            for target in 0..3 {
                let worst = fd_check(
                    if target == 0 { &x0 } else if target == 1 { &w } else { &b },
                    1e-6,
                    |t, leaf| {
                        let x = if target == 0 { leaf } else { t.constant(x0.clone()) };
                        let wv = if target == 1 { leaf } else { t.constant(w.clone()) };
                        let bv = if target == 2 { leaf } else { t.constant(b.clone()) };
                        let y = if relu { t.linear_relu(x, wv, bv) } else { t.linear(x, wv, bv) };
                        let y2 = t.mul(y, y);
                        t.sum_all(y2)
                    },
                );
                assert!(worst < 1e-5, "linear relu={relu} target {target}: {worst}");
            }
        }
    }

    #[test]
    fn layer_norm_grads_pass_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x0 = randn(&mut rng, &[6, 8]);
        let gamma = randn(&mut rng, &[8]);
        let beta = randn(&mut rng, &[8]);
        let worst = fd_check(&x0, 1e-6, |t, x| {
            let g = t.leaf(gamma.clone());
            let b = t.leaf(beta.clone());
            let y = t.layer_norm(x, g, b, 1e-5);
            let y2 = t.mul(y, y);
            t.sum_all(y2)
        });
        assert!(worst < 1e-5, "layer_norm fd: {worst}");
    }

    #[test]
    fn gather_segment_slice_concat_grads_pass_fd() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x0 = randn(&mut rng, &[6, 4]);
        let idx = Arc::new(vec![0usize, 2, 2, 5, 1]);
        let seg = Arc::new(vec![0usize, 0, 1, 1, 1]);
        let worst = fd_check(&x0, 1e-6, |t, x| {
            let g = t.gather_rows(x, Arc::clone(&idx));
            let m = t.segment_mean(g, Arc::clone(&seg), 2);
            let a = t.slice_lastdim(m, 0, 2);
            let b = t.slice_lastdim(m, 2, 2);
            let c = t.concat_lastdim(&[a, b]);
            let n = t.row_norm(c);
            t.sum_all(n)
        });
        assert!(worst < 1e-5, "gather/segment fd: {worst}");
    }

    #[test]
    fn backward_accumulates_shared_nodes() {
        let t: Tape<f64> = Tape::new();
        let x = t.leaf(array![2.0].into_dyn());
        let y = t.mul(x, x); // x^2
        let z = t.add(y, y); // 2x^2, dz/dx = 4x = 8
        let loss = t.sum_all(z);
        let mut grads = t.backward(loss, &[]);
        let g = grads.take(x).unwrap();
        assert!((g[[0]] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let t: Tape<f64> = Tape::new();
        let x = t.leaf(array![1.0, 2.0].into_dyn());
        let c = t.constant(array![3.0, 4.0].into_dyn());
        let loss = t.sum_all(t.mul(x, c));
        let mut grads = t.backward(loss, &[]);
        assert!(grads.take(c).is_none());
        assert_eq!(grads.take(x).unwrap().as_slice().unwrap(), &[3.0, 4.0]);
    }
}
