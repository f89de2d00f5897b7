//! Network building blocks shared by the field and registration models:
//! parameter storage, initializers, linear layers, Adam/AdamW and the
//! checkpoint archive format.

pub mod archive;
pub mod conv;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{fl, Gradients, Real, Tape, Var};

/// Named parameter tensors. Iteration order is the lexicographic name order,
/// which keeps optimizer updates and serialization deterministic.
pub struct ParamStore<F: Real> {
    params: BTreeMap<String, Arc<ArrayD<F>>>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<F>) {
        let prev = self.params.insert(name.to_string(), Arc::new(value));
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn rc(&self, name: &str) -> Arc<ArrayD<F>> {
        Arc::clone(self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> &ArrayD<F> {
        self.params.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Mutable access; only valid when no tape holds the parameter.
    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<F> {
        Arc::make_mut(
            self.params.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}")),
        )
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn n_scalars(&self) -> usize {
        self.params.values().map(|v| v.len()).sum()
    }
}

/// Binds parameters from a store onto a tape for one forward pass, caching the
/// `Var` per name so shared weights map to a single node.
pub struct Bind<'t, F: Real> {
    pub tape: &'t Tape<F>,
    store: &'t ParamStore<F>,
    vars: RefCell<BTreeMap<String, Var>>,
}

impl<'t, F: Real> Bind<'t, F> {
    pub fn new(tape: &'t Tape<F>, store: &'t ParamStore<F>) -> Self {
        Bind { tape, store, vars: RefCell::new(BTreeMap::new()) }
    }

    pub fn var(&self, name: &str) -> Var {
        if let Some(&v) = self.vars.borrow().get(name) {
            return v;
        }
        let v = self.tape.param(self.store.rc(name));
        self.vars.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Extracts the gradients of all bound parameters by name.
    pub fn collect_grads(&self, grads: &mut Gradients<F>) -> BTreeMap<String, ArrayD<F>> {
        let mut out = BTreeMap::new();
        for (name, var) in self.vars.borrow().iter() {
            if let Some(g) = grads.take(*var) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

pub mod init {
    use super::*;

    pub fn uniform<F: Real>(
        rng: &mut ChaCha12Rng,
        shape: &[usize],
        lo: f64,
        hi: f64,
    ) -> ArrayD<F> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| fl(rng.random_range(lo..hi)))
    }

    /// Fan-in scaled uniform, the default for linear layers.
    pub fn fan_in<F: Real>(rng: &mut ChaCha12Rng, n_in: usize, n_out: usize) -> ArrayD<F> {
        let bound = 1.0 / (n_in as f64).sqrt();
        uniform(rng, &[n_in, n_out], -bound, bound)
    }

    /// Xavier/Glorot uniform, used for attention projections.
    pub fn xavier<F: Real>(rng: &mut ChaCha12Rng, n_in: usize, n_out: usize) -> ArrayD<F> {
        let bound = (6.0 / (n_in + n_out) as f64).sqrt();
        uniform(rng, &[n_in, n_out], -bound, bound)
    }

    pub fn zeros<F: Real>(shape: &[usize]) -> ArrayD<F> {
        ArrayD::zeros(IxDyn(shape))
    }

    pub fn ones<F: Real>(shape: &[usize]) -> ArrayD<F> {
        ArrayD::ones(IxDyn(shape))
    }
}

/// A dense layer `x W + b` registered under `<name>.weight` / `<name>.bias`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha12Rng,
        name: &str,
        n_in: usize,
        n_out: usize,
    ) -> Self {
        store.insert(&format!("{name}.weight"), init::fan_in(rng, n_in, n_out));
        let bound = 1.0 / (n_in as f64).sqrt();
        store.insert(&format!("{name}.bias"), init::uniform(rng, &[n_out], -bound, bound));
        Linear { name: name.to_string(), n_in, n_out }
    }

    /// Same layout but weights from Xavier and bias zero.
    pub fn new_xavier<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha12Rng,
        name: &str,
        n_in: usize,
        n_out: usize,
    ) -> Self {
        store.insert(&format!("{name}.weight"), init::xavier(rng, n_in, n_out));
        store.insert(&format!("{name}.bias"), init::zeros(&[n_out]));
        Linear { name: name.to_string(), n_in, n_out }
    }

    /// All-zero layer: the residual-head trick for outputs that must start at
    /// a baseline value.
    pub fn new_zeroed<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        n_in: usize,
        n_out: usize,
    ) -> Self {
        store.insert(&format!("{name}.weight"), init::zeros(&[n_in, n_out]));
        store.insert(&format!("{name}.bias"), init::zeros(&[n_out]));
        Linear { name: name.to_string(), n_in, n_out }
    }

    pub fn forward<F: Real>(&self, bind: &Bind<'_, F>, x: Var) -> Var {
        let w = bind.var(&format!("{}.weight", self.name));
        let b = bind.var(&format!("{}.bias", self.name));
        bind.tape.linear(x, w, b)
    }

    pub fn forward_relu<F: Real>(&self, bind: &Bind<'_, F>, x: Var) -> Var {
        let w = bind.var(&format!("{}.weight", self.name));
        let b = bind.var(&format!("{}.bias", self.name));
        bind.tape.linear_relu(x, w, b)
    }
}

/// Adam with optional decoupled weight decay (AdamW when `weight_decay > 0`).
///
/// Parameters whose name matches one of `sparse_prefixes` get row-sparse
/// updates: rows whose gradient is entirely zero are skipped, as in the
/// sparse Adam variants commonly paired with hash-table encodings.
pub struct Adam<F: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub sparse_prefixes: Vec<String>,
    t: u64,
    m: BTreeMap<String, ArrayD<F>>,
    v: BTreeMap<String, ArrayD<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(weight_decay: f64) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            sparse_prefixes: vec![],
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn set_step_count(&mut self, t: u64) {
        self.t = t;
    }

    /// Applies one update. `grads` may cover any subset of the store.
    pub fn step(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &BTreeMap<String, ArrayD<F>>,
        lr: f64,
    ) {
        self.t += 1;
        let b1 = fl::<F>(self.beta1);
        let b2 = fl::<F>(self.beta2);
        let eps = fl::<F>(self.eps);
        let bc1 = fl::<F>(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = fl::<F>(1.0 - self.beta2.powi(self.t as i32));
        let lr_f = fl::<F>(lr);
        let wd = fl::<F>(self.weight_decay * lr);
        for (name, g) in grads {
            let sparse = self.sparse_prefixes.iter().any(|p| name.starts_with(p.as_str()));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.shape()));
            let p = store.get_mut(name);
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for {name}");
            let ps = p.as_slice_mut().expect("contiguous param");
            let gs = g.as_slice().expect("contiguous grad");
            let ms = m.as_slice_mut().expect("contiguous m");
            let vs = v.as_slice_mut().expect("contiguous v");
            if sparse {
                // Row granularity = innermost axis.
                let row = *g.shape().last().unwrap_or(&1);
                let update_row = |lo: usize, hi: usize,
                                  ps: &mut [F], ms: &mut [F], vs: &mut [F]| {
                    for i in lo..hi {
                        let gi = gs[i];
                        ms[i] = b1 * ms[i] + (F::one() - b1) * gi;
                        vs[i] = b2 * vs[i] + (F::one() - b2) * gi * gi;
                        let mh = ms[i] / bc1;
                        let vh = vs[i] / bc2;
                        ps[i] = ps[i] - lr_f * mh / (vh.sqrt() + eps) - wd * ps[i];
                    }
                };
                for r in 0..gs.len() / row {
                    let lo = r * row;
                    let hi = lo + row;
                    if gs[lo..hi].iter().any(|&x| x != F::zero()) {
                        update_row(lo, hi, ps, ms, vs);
                    }
                }
            } else {
                for i in 0..gs.len() {
                    let gi = gs[i];
                    ms[i] = b1 * ms[i] + (F::one() - b1) * gi;
                    vs[i] = b2 * vs[i] + (F::one() - b2) * gi * gi;
                    let mh = ms[i] / bc1;
                    let vh = vs[i] / bc2;
                    ps[i] = ps[i] - lr_f * mh / (vh.sqrt() + eps) - wd * ps[i];
                }
            }
        }
    }

    /// Optimizer state export for resumable checkpoints.
    pub fn state(&self) -> impl Iterator<Item = (String, &ArrayD<F>)> {
        self.m
            .iter()
            .map(|(k, v)| (format!("opt.m.{k}"), v))
            .chain(self.v.iter().map(|(k, v)| (format!("opt.v.{k}"), v)))
    }

    pub fn load_state(&mut self, name: &str, value: ArrayD<F>) {
        if let Some(rest) = name.strip_prefix("opt.m.") {
            self.m.insert(rest.to_string(), value);
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            self.v.insert(rest.to_string(), value);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_converges_on_quadratic() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("x", ArrayD::from_elem(IxDyn(&[3]), 5.0));
        let mut opt = Adam::new(0.0);
        for _ in 0..500 {
            let g = store.get("x").clone(); // d/dx (x^2/2) = x
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), g);
            opt.step(&mut store, &grads, 0.05);
        }
        assert!(store.get("x").iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn sparse_rows_with_zero_grad_are_untouched() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("tbl", ArrayD::from_elem(IxDyn(&[4, 2]), 1.0));
        let mut opt = Adam::new(0.0);
        opt.sparse_prefixes.push("tbl".into());
        let mut g = ArrayD::zeros(IxDyn(&[4, 2]));
        g[[1, 0]] = 1.0;
        let mut grads = BTreeMap::new();
        grads.insert("tbl".to_string(), g);
        opt.step(&mut store, &grads, 0.1);
        let p = store.get("tbl");
        assert_eq!(p[[0, 0]], 1.0);
        assert_eq!(p[[2, 1]], 1.0);
        assert!(p[[1, 0]] < 1.0);
    }

    #[test]
    fn linear_forward_matches_manual() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut store: ParamStore<f64> = ParamStore::new();
        let lin = Linear::new(&mut store, &mut rng, "l", 2, 3);
        let tape = Tape::new();
        let bind = Bind::new(&tape, &store);
        let x = tape.constant(ndarray::array![[1.0, 2.0]].into_dyn());
        let y = lin.forward(&bind, x);
        let w = store.get("l.weight");
        let b = store.get("l.bias");
        let v = tape.value(y);
        for j in 0..3 {
            let expect = w[[0, j]] + 2.0 * w[[1, j]] + b[[j]];
            assert!((v[[0, j]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_bind_var_accumulates_both_uses() {
        // One parameter used twice must produce summed gradients.
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", ArrayD::from_elem(IxDyn(&[1]), 3.0));
        let tape = Tape::new();
        let bind = Bind::new(&tape, &store);
        let w1 = bind.var("w");
        let w2 = bind.var("w");
        assert_eq!(w1, w2);
        let y = tape.mul(w1, w2); // w^2 -> dy/dw = 2w = 6
        let loss = tape.sum_all(y);
        let mut grads = tape.backward(loss, &[]);
        let g = bind.collect_grads(&mut grads);
        assert!((g["w"][[0]] - 6.0).abs() < 1e-12);
    }
}
