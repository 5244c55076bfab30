//! Parameter storage, parameterised layers and the AdamW optimizer.

use cms_tensor::{Gradients, Tape, Tensor, Var};
use indexmap::IndexMap;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Index of a parameter in registration order.
pub type ParamId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

impl ParamEntry {
    pub fn new(value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self {
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
        }
    }
}

/// Ordered name → parameter map. Registration order is part of the
/// checkpoint format, so it must not depend on anything but the config.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: ParamEntry) -> ParamId {
        let name = name.into();
        assert!(
            !self.entries.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.entries.insert_full(name, entry).0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id).expect("parameter id").0
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Puts every value on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            tape,
            vars: self
                .entries
                .values()
                .map(|e| tape.leaf(e.value.clone()))
                .collect(),
        }
    }

    /// Puts every value on `tape` as a constant (inference only).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            tape,
            vars: self
                .entries
                .values()
                .map(|e| tape.constant(e.value.clone()))
                .collect(),
        }
    }

    /// Adds the gradients of every bound parameter into its gradient slot.
    pub fn accumulate(&mut self, bound: &Bound<'_>, grads: &mut Gradients) -> Result<()> {
        for (entry, &var) in self.entries.values_mut().zip(&bound.vars) {
            let g = grads.take(var);
            entry.grad.add_assign(&g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Fails on the first entry whose name or shape differs from `other`.
    pub fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        for (i, (name, entry)) in self.entries.iter().enumerate() {
            let Some((oname, oentry)) = other.entries.get_index(i) else {
                return Err(Error::Topology {
                    name: name.clone(),
                    msg: "missing from checkpoint".into(),
                });
            };
            if oname != name {
                return Err(Error::Topology {
                    name: name.clone(),
                    msg: format!("checkpoint has {oname:?} in this position"),
                });
            }
            if oentry.value.shape() != entry.value.shape() {
                return Err(Error::Topology {
                    name: name.clone(),
                    msg: format!(
                        "shape {:?} in checkpoint, {:?} expected",
                        oentry.value.shape(),
                        entry.value.shape()
                    ),
                });
            }
        }
        if other.len() > self.len() {
            return Err(Error::Topology {
                name: other.name(self.len()).to_string(),
                msg: "not part of this model".into(),
            });
        }
        Ok(())
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Wraps handles already on `tape`, in store order.
    pub fn from_vars(tape: &'t Tape, vars: Vec<Var<'t>>) -> Self {
        Self { tape, vars }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// How a freshly registered parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform(-a, a) with `a = 1/sqrt(fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

/// Registers parameters in order and draws their initial values from one
/// seeded stream.
pub struct ParamBuilder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let value = match init {
            Init::FanIn(fan_in) => {
                let a = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-a, a);
                Tensor::from_fn(shape, |_| dist.sample(&mut self.rng))
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
        };
        self.store.insert(name, ParamEntry::new(value))
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

/// Same-padded convolution with an odd square kernel.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub k: usize,
}

impl ConvLayer {
    pub fn register(
        b: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
    ) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd");
        let kernel = b.register(
            format!("{name}.kernel"),
            &[cout, cin, k, k],
            Init::FanIn(cin * k * k),
        );
        let bias = bias.then(|| b.register(format!("{name}.bias"), &[cout], Init::Zeros));
        Self { kernel, bias, k }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.conv2d(p.var(self.kernel), self.bias.map(|b| p.var(b)))?)
    }
}

/// Per-sample normalisation over `(C, H, W)` with per-channel gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn register(b: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        Self {
            gain: b.register(format!("{name}.gain"), &[channels], Init::Ones),
            bias: b.register(format!("{name}.bias"), &[channels], Init::Zeros),
            eps: Self::EPS,
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.layer_norm(p.var(self.gain), p.var(self.bias), self.eps)?)
    }
}

/// AdamW with bias correction and decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
        }
    }

    /// Applies one update from the accumulated gradients and clears them.
    ///
    /// A non-finite gradient aborts before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some((name, _)) = store.iter().find(|(_, e)| !e.grad.is_finite()) {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let shrink = 1.0 - self.lr * self.weight_decay;
        for (_, e) in store.iter_mut() {
            let ParamEntry { value, grad, m, v } = e;
            for i in 0..value.len() {
                let g = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = (mi / c1) / ((vi / c2).sqrt() + self.eps);
                let w = &mut value.data_mut()[i];
                *w = *w * shrink - self.lr * update;
            }
        }
        store.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let mut e = ParamEntry::new(Tensor::full(&[3], w));
        e.grad = Tensor::full(&[3], g);
        s.insert("w", e);
        s
    }

    #[test]
    fn zero_gradient_with_decay_is_pure_shrink() {
        let mut s = single(2.0, 0.0);
        let mut opt = AdamW::new(0.01, 0.1);
        opt.step(&mut s).unwrap();
        assert_eq!(s.get(0).value.data(), &[2.0 * (1.0 - 0.01 * 0.1); 3]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut s = single(-0.75, 0.0);
        let mut opt = AdamW::new(0.01, 0.0);
        for _ in 0..5 {
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.get(0).value.data(), &[-0.75; 3]);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let mut s = single(0.0, 0.5);
        let mut opt = AdamW::new(0.001, 0.0);
        opt.step(&mut s).unwrap();
        // m = 0.05, v = 0.00025; corrected m = 0.5, v = 0.25
        let m_hat = 0.05 / (1.0 - 0.9);
        let v_hat = 0.00025 / (1.0 - 0.999);
        let expect = -0.001 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        for &w in s.get(0).value.data() {
            assert!((w - expect).abs() < 1e-9);
            assert!((w + 0.001).abs() < 1e-9);
        }
        assert!(s.get(0).grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut s = single(1.0, f64::NAN);
        let before = s.clone();
        let mut opt = AdamW::new(0.01, 0.1);
        assert!(matches!(opt.step(&mut s), Err(Error::NonFiniteGradient(n)) if n == "w"));
        assert_eq!(opt.step, 0);
        assert_eq!(s.get(0).value, before.get(0).value);
    }

    #[test]
    fn init_is_seeded_and_biases_zero() {
        let build = |seed| {
            let mut b = ParamBuilder::new(seed);
            ConvLayer::register(&mut b, "c", 3, 4, 5, true);
            b.finish()
        };
        assert_eq!(build(9), build(9));
        assert_ne!(build(9), build(10));
        let s = build(9);
        assert!(s
            .by_name("c.bias")
            .unwrap()
            .value
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let a = 1.0 / (75f64).sqrt();
        assert!(s
            .by_name("c.kernel")
            .unwrap()
            .value
            .data()
            .iter()
            .all(|v| v.abs() <= a));
    }

    #[test]
    fn uniform_init_spread_matches_law() {
        let mut b = ParamBuilder::new(4);
        ConvLayer::register(&mut b, "big", 64, 64, 5, false);
        let s = b.finish();
        let w = &s.get(0).value;
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let a = 1.0 / (64.0f64 * 25.0).sqrt();
        let expect = a / 3f64.sqrt();
        assert!((std - expect).abs() / expect < 0.1, "std {std} vs {expect}");
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut b = ParamBuilder::new(0);
        let ln = LayerNorm::register(&mut b, "ln", 2);
        let s = b.finish();
        let tape = Tape::new();
        let p = s.bind(&tape);
        let x = tape.constant(Tensor::full(&[2, 2, 3, 3], 4.2));
        let y = ln.forward(&p, x).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_matches_hand_formula() {
        let mut b = ParamBuilder::new(0);
        let ln = LayerNorm::register(&mut b, "ln", 2);
        let s = b.finish();
        let tape = Tape::new();
        let p = s.bind(&tape);
        let vals = vec![0.3, -1.2, 2.5, 0.0, 1.1, -0.4, 0.9, 3.3];
        let x = tape.constant(Tensor::new(&[1, 2, 2, 2], vals.clone()).unwrap());
        let y = ln.forward(&p, x).unwrap().value();
        let mean = vals.iter().sum::<f64>() / 8.0;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        for (o, v) in y.data().iter().zip(&vals) {
            assert!((o - (v - mean) / (var + 1e-5).sqrt()).abs() < 1e-12);
        }
        let m: f64 = y.data().iter().sum::<f64>() / 8.0;
        assert!(m.abs() < 1e-10);
        let var_out = y.data().iter().map(|v| v * v).sum::<f64>() / 8.0;
        assert!((var_out - var / (var + 1e-5)).abs() < 1e-8);
    }

    #[test]
    fn layout_mismatch_names_parameter() {
        let mut a = ParamBuilder::new(0);
        ConvLayer::register(&mut a, "x", 2, 2, 3, true);
        let mut b = ParamBuilder::new(0);
        ConvLayer::register(&mut b, "x", 2, 3, 3, true);
        let err = a.finish().check_same_layout(&b.finish()).unwrap_err();
        assert!(
            matches!(err, Error::Topology { ref name, .. } if name == "x.kernel"),
            "{err}"
        );
    }
}
