//! Minimal differentiable numeric substrate: named f64 parameter tensors,
//! a reverse-mode tape over dense vector primitives, Gaussian
//! initialization and the ADAM update.
//!
//! Everything is 64-bit and single-threaded per store; parallelism happens
//! one level up (independent model replicas, per-dialog gradient buffers).

mod tape;

pub use tape::{NodeId, Tape};

use crate::error::{Error, Result};
use crate::rng::seeded_rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

/// Index of a named tensor in a `ParamStore`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// One named parameter tensor, row-major. Vectors are `rows x 1`.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// ADAM moment estimates; shapes mirror the tensors in the owning store.
#[derive(Debug, Clone)]
struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

/// All trainable weights for one model plus optimizer state.
#[derive(Debug, Clone)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    by_name: HashMap<String, ParamId>,
    adam: AdamState,
}

/// Gradient buffer aligned index-for-index with a `ParamStore`. Kept
/// separate from the store so per-dialog gradients can be accumulated in
/// parallel and reduced in a fixed order.
#[derive(Debug, Clone)]
pub struct Gradients {
    g: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            g: store.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.g {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Gradients) {
        assert_eq!(self.g.len(), other.g.len(), "gradient buffer mismatch");
        for (a, b) in self.g.iter_mut().zip(&other.g) {
            assert_eq!(a.len(), b.len(), "gradient tensor shape mismatch");
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.g[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.g[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.g
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients so the global norm does not exceed `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for t in &mut self.g {
                for x in t.iter_mut() {
                    *x *= s;
                }
            }
        }
        norm
    }
}

/// How to fill one tensor at initialization time.
#[derive(Debug, Clone)]
pub enum Init {
    /// Zero-mean Gaussian with standard deviation `sqrt(2 / fan_in)`.
    Gaussian { fan_in: usize },
    Constant(f64),
}

/// Declarative initialization plan: tensors are created and filled in the
/// order given, which fixes the RNG consumption order.
#[derive(Debug, Clone)]
pub struct InitSpec {
    pub tensors: Vec<(String, usize, usize, Init)>,
}

impl InitSpec {
    pub fn new() -> Self {
        InitSpec { tensors: Vec::new() }
    }

    pub fn gaussian(mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> Self {
        assert!(fan_in >= 1, "fan_in must be >= 1 for {name}");
        self.tensors
            .push((name.to_string(), rows, cols, Init::Gaussian { fan_in }));
        self
    }

    pub fn constant(mut self, name: &str, rows: usize, cols: usize, value: f64) -> Self {
        self.tensors
            .push((name.to_string(), rows, cols, Init::Constant(value)));
        self
    }
}

impl Default for InitSpec {
    fn default() -> Self {
        Self::new()
    }
}

/// Hyperparameters for `adam_step`; defaults are the standard ones.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            tensors: Vec::new(),
            by_name: HashMap::new(),
            adam: AdamState {
                m: Vec::new(),
                v: Vec::new(),
                step: 0,
            },
        }
    }

    /// Build a store from an init plan, deterministically under `seed`.
    pub fn init(spec: &InitSpec, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        for (name, rows, cols, init) in &spec.tensors {
            let n = rows * cols;
            let value = match init {
                Init::Gaussian { fan_in } => {
                    let std = (2.0 / *fan_in as f64).sqrt();
                    let dist = Normal::new(0.0, std).expect("valid normal");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                Init::Constant(c) => vec![*c; n],
            };
            store.push(name, *rows, *cols, value);
        }
        store
    }

    pub fn push(&mut self, name: &str, rows: usize, cols: usize, value: Vec<f64>) -> ParamId {
        assert_eq!(value.len(), rows * cols, "tensor {name} has wrong length");
        assert!(
            !self.by_name.contains_key(name),
            "duplicate tensor name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.tensors.push(Tensor {
            name: name.to_string(),
            rows,
            cols,
            value,
        });
        self.by_name.insert(name.to_string(), id);
        self.adam.m.push(vec![0.0; rows * cols]);
        self.adam.v.push(vec![0.0; rows * cols]);
        id
    }

    pub fn id(&self, name: &str) -> ParamId {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown tensor {name}"))
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    /// Tensors in creation order (the serialization order).
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// One ADAM update with bias-corrected moments. Rejects non-finite
    /// gradients before touching any state, naming the offending tensor.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        assert_eq!(
            grads.g.len(),
            self.tensors.len(),
            "gradient buffer does not match store"
        );
        for (t, g) in self.tensors.iter().zip(&grads.g) {
            assert_eq!(g.len(), t.len(), "gradient shape mismatch for {}", t.name);
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in tensor {}",
                    t.name
                )));
            }
        }
        self.adam.step += 1;
        let t = self.adam.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, tensor) in self.tensors.iter_mut().enumerate() {
            let m = &mut self.adam.m[i];
            let v = &mut self.adam.v[i];
            let g = &grads.g[i];
            for j in 0..tensor.value.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                tensor.value[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Numerically stable softmax (max-subtraction form).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[target]` without forming the probabilities.
pub fn log_softmax_loss(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    log_sum + max - logits[target]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax(&[0.0; 4]);
        for x in &p {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_sums_to_one_and_is_open_interval() {
        let p = softmax(&[3.0, -1.0, 0.5, 2.2, -7.0]);
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn fused_loss_matches_log_of_softmax() {
        let logits = [1.5, -2.0, 0.3, 29.0, -30.0];
        for target in 0..logits.len() {
            let direct = -softmax(&logits)[target].ln();
            let fused = log_softmax_loss(&logits, target);
            assert!((direct - fused).abs() < 1e-12, "target {target}");
        }
    }

    #[test]
    fn gaussian_init_has_requested_std() {
        let spec = InitSpec::new().gaussian("w", 300, 100, 300);
        let store = ParamStore::init(&spec, 42);
        let t = store.tensor(store.id("w"));
        let n = t.value.len() as f64;
        let mean: f64 = t.value.iter().sum::<f64>() / n;
        let var: f64 = t.value.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let want = (2.0f64 / 300.0).sqrt();
        assert!((var.sqrt() - want).abs() < want * 0.1, "std {} vs {}", var.sqrt(), want);
        assert!(mean.abs() < 0.01);
    }

    #[test]
    fn constant_init_is_exact() {
        let spec = InitSpec::new().constant("b", 100, 1, 1.0);
        let store = ParamStore::init(&spec, 0);
        assert!(store
            .tensor(store.id("b"))
            .value
            .iter()
            .all(|&x| x == 1.0));
    }

    #[test]
    fn init_is_deterministic_under_seed() {
        let spec = InitSpec::new()
            .gaussian("a", 10, 10, 10)
            .constant("b", 10, 1, 0.0)
            .gaussian("c", 5, 3, 5);
        let s1 = ParamStore::init(&spec, 123);
        let s2 = ParamStore::init(&spec, 123);
        let s3 = ParamStore::init(&spec, 124);
        for (a, b) in s1.tensors().iter().zip(s2.tensors()) {
            assert_eq!(a.value, b.value);
        }
        assert_ne!(s1.tensor(s1.id("a")).value, s3.tensor(s3.id("a")).value);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let spec = InitSpec::new().constant("w", 3, 1, 1.0);
        let mut store = ParamStore::init(&spec, 0);
        let mut grads = Gradients::zeros_like(&store);
        grads.get_mut(store.id("w")).iter_mut().for_each(|g| *g = 1.0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        store.adam_step(&grads, &cfg).unwrap();
        for &w in &store.tensor(store.id("w")).value {
            // bias correction makes m_hat / sqrt(v_hat) = 1 on step one
            assert!((w - (1.0 - 0.1)).abs() < 1e-9, "w = {w}");
        }
        assert_eq!(store.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_leaves_params_and_increments_step() {
        let spec = InitSpec::new().gaussian("w", 4, 4, 4);
        let mut store = ParamStore::init(&spec, 9);
        let before = store.tensor(store.id("w")).value.clone();
        let grads = Gradients::zeros_like(&store);
        store.adam_step(&grads, &AdamConfig::default()).unwrap();
        assert_eq!(store.tensor(store.id("w")).value, before);
        assert_eq!(store.step_count(), 1);
    }

    #[test]
    fn adam_with_zero_lr_is_bit_identical() {
        let spec = InitSpec::new().gaussian("w", 4, 4, 4);
        let mut store = ParamStore::init(&spec, 9);
        let before = store.tensor(store.id("w")).value.clone();
        let mut grads = Gradients::zeros_like(&store);
        grads.get_mut(store.id("w")).iter_mut().for_each(|g| *g = 0.37);
        let cfg = AdamConfig {
            lr: 0.0,
            ..AdamConfig::default()
        };
        store.adam_step(&grads, &cfg).unwrap();
        assert_eq!(store.tensor(store.id("w")).value, before);
    }

    #[test]
    fn adam_rejects_non_finite_gradients_by_name() {
        let spec = InitSpec::new().constant("fine", 2, 1, 0.0).constant("bad", 2, 1, 0.0);
        let mut store = ParamStore::init(&spec, 0);
        let mut grads = Gradients::zeros_like(&store);
        grads.get_mut(store.id("bad"))[1] = f64::NAN;
        let err = store.adam_step(&grads, &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("bad"), "{err}");
        assert_eq!(store.step_count(), 0);
    }

    #[test]
    fn adam_descends_on_quadratic() {
        // f(w) = w^2, grad 2w, from w = 1
        let spec = InitSpec::new().constant("w", 1, 1, 1.0);
        let mut store = ParamStore::init(&spec, 0);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut prev = 1.0f64;
        for _ in 0..3 {
            let w = store.tensor(store.id("w")).value[0];
            let mut grads = Gradients::zeros_like(&store);
            grads.get_mut(store.id("w"))[0] = 2.0 * w;
            store.adam_step(&grads, &cfg).unwrap();
            let now = store.tensor(store.id("w")).value[0];
            assert!(now < prev, "w did not decrease: {now} >= {prev}");
            assert!(now > -0.5);
            prev = now;
        }
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let spec = InitSpec::new().constant("w", 2, 1, 0.0);
        let store = ParamStore::init(&spec, 0);
        let mut grads = Gradients::zeros_like(&store);
        grads.get_mut(store.id("w")).copy_from_slice(&[3.0, 4.0]);
        let before = grads.clip_global_norm(2.5);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((grads.global_norm() - 2.5).abs() < 1e-12);
        // below the limit nothing changes
        let before = grads.clip_global_norm(10.0);
        assert!((before - 2.5).abs() < 1e-12);
        assert!((grads.global_norm() - 2.5).abs() < 1e-12);
    }
}
