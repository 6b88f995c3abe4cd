//! Embedding network, growable normalized classifier head, frozen teacher
//! snapshots and the momentum SGD used to train them.
//!
//! The network is `x → relu(x·W1 + b1) → ·W2 + b2 → l2-normalize`. The head
//! stores one weight row per registered class; rows are l2-normalized before
//! every use, so logits are cosine similarities scaled by `1/T`.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{contract, dimension, Result};
use crate::rng;
use crate::tape::{GradTape, Gradients, ParamId, Var, NORM_EPS};
use crate::tensor::{kernels, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparameters {
    /// Weight of the neighbor-session model-coherence term.
    pub alpha: f64,
    /// Weight of the inter-session data-coherence term.
    pub beta: f64,
    pub margin: f64,
    pub temperature: f64,
    pub batch_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs_per_session: usize,
    pub seed: u64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            alpha: 10.0,
            beta: 1.0,
            margin: 0.1,
            temperature: 0.05,
            batch_size: 32,
            embed_dim: 16,
            hidden_dim: 64,
            learning_rate: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs_per_session: 30,
            seed: 0,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(contract(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.margin >= 0.0) {
            return Err(contract(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(contract("alpha and beta must be >= 0"));
        }
        if self.batch_size < 2 {
            return Err(contract(format!("batch size must be >= 2, got {}", self.batch_size)));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(contract("embed_dim and hidden_dim must be positive"));
        }
        Ok(())
    }
}

/// The feature extractor `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl EmbeddingNet {
    /// Kaiming-style uniform weights, zero biases.
    pub fn init(input_dim: usize, hidden_dim: usize, embed_dim: usize, seed: u64) -> Self {
        let mut rng = rng::derive(seed, rng::stream::MODEL_INIT);
        let mut layer = |fan_in: usize, fan_out: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(vec![fan_in, fan_out], data).expect("layer shape")
        };
        let w1 = layer(input_dim, hidden_dim);
        let w2 = layer(hidden_dim, embed_dim);
        EmbeddingNet {
            w1,
            b1: Tensor::zeros(&[hidden_dim]),
            w2,
            b2: Tensor::zeros(&[embed_dim]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.shape()[1]
    }

    /// Normalized embeddings for every row of `xs`.
    pub fn embed_batch(&self, xs: &Tensor) -> Result<Tensor> {
        let (_, c) = xs.dims2();
        if c != self.input_dim() || xs.shape().len() != 2 {
            return Err(dimension(format!(
                "inputs of shape {:?}, model expects {} features",
                xs.shape(),
                self.input_dim()
            )));
        }
        let h = kernels::matmul(xs, &self.w1)?;
        let h = kernels::relu(&kernels::add_row_bias(&h, &self.b1)?);
        let e = kernels::add_row_bias(&kernels::matmul(&h, &self.w2)?, &self.b2)?;
        Ok(kernels::l2_normalize_rows(&e, NORM_EPS))
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(dimension(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let xs = Tensor::new(vec![1, x.len()], x.to_vec())?;
        Ok(self.embed_batch(&xs)?.into_data())
    }

    /// Pre-activation of the hidden layer; used to keep gradient checks
    /// away from ReLU kinks.
    pub fn hidden_preactivation(&self, xs: &Tensor) -> Result<Tensor> {
        kernels::add_row_bias(&kernels::matmul(xs, &self.w1)?, &self.b1)
    }
}

/// Normalized-softmax head: one weight row per registered class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub weights: Tensor,
    pub registry: Vec<u32>,
}

impl ClassifierHead {
    pub fn empty(embed_dim: usize) -> Self {
        ClassifierHead { weights: Tensor::zeros(&[0, embed_dim]), registry: Vec::new() }
    }

    pub fn num_classes(&self) -> usize {
        self.registry.len()
    }

    pub fn position_map(&self) -> HashMap<u32, usize> {
        self.registry.iter().enumerate().map(|(i, &c)| (c, i)).collect()
    }

    /// Positions of `classes` in the registry.
    pub fn label_indices(&self, classes: &[u32]) -> Result<Vec<usize>> {
        let pos = self.position_map();
        classes
            .iter()
            .map(|c| pos.get(c).copied().ok_or_else(|| contract(format!("class {c} is not registered"))))
            .collect()
    }

    /// Row-normalized weights.
    pub fn normalized(&self) -> Tensor {
        kernels::l2_normalize_rows(&self.weights, NORM_EPS)
    }
}

/// Trainable model: embedding network plus classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub net: EmbeddingNet,
    pub head: ClassifierHead,
    pub hyper: Hyperparameters,
}

/// Tape handles for one forward pass of a [`ModelState`].
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub classifier: Var,
}

pub const PARAM_W1: ParamId = ParamId(0);
pub const PARAM_B1: ParamId = ParamId(1);
pub const PARAM_W2: ParamId = ParamId(2);
pub const PARAM_B2: ParamId = ParamId(3);
pub const PARAM_CLASSIFIER: ParamId = ParamId(4);
pub const PARAM_NAMES: [&str; 5] = ["w1", "b1", "w2", "b2", "classifier"];

impl ModelState {
    pub fn new(input_dim: usize, hyper: Hyperparameters) -> Result<Self> {
        hyper.validate()?;
        if input_dim == 0 {
            return Err(contract("input_dim must be positive"));
        }
        let net = EmbeddingNet::init(input_dim, hyper.hidden_dim, hyper.embed_dim, hyper.seed);
        let head = ClassifierHead::empty(hyper.embed_dim);
        Ok(ModelState { net, head, hyper })
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.net.embed(x)
    }

    pub fn embed_batch(&self, xs: &Tensor) -> Result<Tensor> {
        self.net.embed_batch(xs)
    }

    pub fn class_registry(&self) -> &[u32] {
        &self.head.registry
    }

    /// Adds one head row per new class. Rows are drawn from a per-class
    /// seeded uniform(-0.05, 0.05) and normalized; existing rows are not
    /// touched.
    pub fn register_classes(&mut self, new_ids: &BTreeSet<u32>) -> Result<()> {
        if new_ids.is_empty() {
            return Ok(());
        }
        let known = self.head.position_map();
        if let Some(dup) = new_ids.iter().find(|c| known.contains_key(c)) {
            return Err(contract(format!("class {dup} is already registered")));
        }
        let d = self.net.embed_dim();
        let mut data = self.head.weights.data().to_vec();
        for &c in new_ids {
            let mut rng = rng::derive_indexed(self.hyper.seed, rng::stream::HEAD_INIT, c as u64);
            let row: Vec<f64> = (0..d).map(|_| rng.random_range(-0.05..0.05)).collect();
            let n = crate::tensor::norm(&row).max(NORM_EPS);
            data.extend(row.iter().map(|v| v / n));
            self.head.registry.push(c);
        }
        self.head.weights = Tensor::new(vec![self.head.registry.len(), d], data)?;
        Ok(())
    }

    pub fn snapshot(&self, session: usize) -> ModelSnapshot {
        ModelSnapshot { inner: Arc::new(self.clone()), session }
    }

    /// Registers all parameters on `tape` in [`ParamId`] order.
    pub fn bind(&self, tape: &mut GradTape) -> ModelVars {
        let (w1, _) = tape.param(self.net.w1.clone());
        let (b1, _) = tape.param(self.net.b1.clone());
        let (w2, _) = tape.param(self.net.w2.clone());
        let (b2, _) = tape.param(self.net.b2.clone());
        let (classifier, _) = tape.param(self.head.weights.clone());
        ModelVars { w1, b1, w2, b2, classifier }
    }

    pub fn params(&self) -> [&Tensor; 5] {
        [&self.net.w1, &self.net.b1, &self.net.w2, &self.net.b2, &self.head.weights]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.net.w1,
            &mut self.net.b1,
            &mut self.net.w2,
            &mut self.net.b2,
            &mut self.head.weights,
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Normalized embeddings of `xs` recorded on `tape`.
pub fn embed_on_tape(tape: &mut GradTape, vars: &ModelVars, xs: Var) -> Result<Var> {
    let h = tape.matmul(xs, vars.w1)?;
    let h = tape.add_row_bias(h, vars.b1)?;
    let h = tape.relu(h);
    let e = tape.matmul(h, vars.w2)?;
    let e = tape.add_row_bias(e, vars.b2)?;
    Ok(tape.l2_normalize_rows(e, NORM_EPS))
}

/// Scaled cosine logits `ŵᵀf / T` for each row of `embeddings`.
pub fn logits_on_tape(tape: &mut GradTape, vars: &ModelVars, embeddings: Var, temperature: f64) -> Result<Var> {
    let w = tape.l2_normalize_rows(vars.classifier, NORM_EPS);
    let wt = tape.transpose(w)?;
    let cos = tape.matmul(embeddings, wt)?;
    Ok(tape.scale(cos, 1.0 / temperature))
}

/// Frozen copy of a model, used as the teacher of the next session.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    inner: Arc<ModelState>,
    session: usize,
}

impl ModelSnapshot {
    pub fn session(&self) -> usize {
        self.session
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.inner.net.embed(x)
    }

    pub fn embed_batch(&self, xs: &Tensor) -> Result<Tensor> {
        self.inner.net.embed_batch(xs)
    }

    pub fn state(&self) -> &ModelState {
        &self.inner
    }
}

/// SGD with momentum and L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(hyper: &Hyperparameters) -> Self {
        Sgd {
            learning_rate: hyper.learning_rate,
            momentum: hyper.momentum,
            weight_decay: hyper.weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut ModelState, grads: &Gradients) {
        let params = model.params_mut();
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        for (i, p) in params.into_iter().enumerate() {
            let g = grads.get(ParamId(i));
            let vel = &mut self.velocity[i];
            if vel.shape() != p.shape() {
                // head grew: keep old rows' momentum, new rows start at rest
                let mut grown = Tensor::zeros(p.shape());
                grown.data_mut()[..vel.len()].copy_from_slice(vel.data());
                *vel = grown;
            }
            for ((w, v), gi) in p.data_mut().iter_mut().zip(vel.data_mut()).zip(g.data()) {
                let step = gi + self.weight_decay * *w;
                *v = self.momentum * *v + step;
                *w -= self.learning_rate * *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model() -> ModelState {
        let hyper = Hyperparameters { embed_dim: 6, hidden_dim: 10, seed: 3, ..Default::default() };
        ModelState::new(5, hyper).unwrap()
    }

    fn ids(r: std::ops::Range<u32>) -> BTreeSet<u32> {
        r.collect()
    }

    #[test]
    fn embed_is_unit_norm_and_deterministic() {
        let m = small_model();
        for k in 0..20 {
            let x: Vec<f64> = (0..5).map(|i| ((i * 7 + k) as f64).sin() * 3.0).collect();
            let a = m.embed(&x).unwrap();
            let b = m.embed(&x).unwrap();
            assert_eq!(a, b);
            assert!((crate::tensor::norm(&a) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn embed_rejects_wrong_dim() {
        let m = small_model();
        assert!(matches!(m.embed(&[1.0, 2.0]), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn embed_is_locally_lipschitz() {
        let m = small_model();
        let x = vec![0.3, -0.7, 1.1, 0.2, -0.4];
        let base = m.embed(&x).unwrap();
        let mut ratios = Vec::new();
        for h in [1e-3, 1e-4, 1e-5, 1e-6] {
            let xp: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + h * (i as f64 - 2.0)).collect();
            let dx = crate::tensor::norm(&x.iter().zip(&xp).map(|(a, b)| a - b).collect::<Vec<_>>());
            let e = m.embed(&xp).unwrap();
            ratios.push(crate::tensor::squared_distance(&base, &e).sqrt() / dx);
        }
        // change / ‖δ‖ settles to the directional Jacobian norm
        let last = ratios[3];
        assert!(ratios.iter().all(|r| r.is_finite() && *r < 100.0));
        assert!((ratios[2] - last).abs() < 1e-3 * last.max(1.0));
    }

    #[test]
    fn register_empty_set_is_noop() {
        let mut m = small_model();
        let before = m.clone();
        m.register_classes(&BTreeSet::new()).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn head_growth_preserves_old_rows_bitwise() {
        let mut m = small_model();
        m.register_classes(&ids(0..20)).unwrap();
        let before: Vec<u64> = m.head.weights.data().iter().map(|v| v.to_bits()).collect();
        m.register_classes(&ids(20..40)).unwrap();
        assert_eq!(m.head.num_classes(), 40);
        let after: Vec<u64> = m.head.weights.data()[..before.len()].iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
        for row in m.head.weights.rows() {
            assert!((crate::tensor::norm(row) - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn duplicate_registration_fails() {
        let mut m = small_model();
        m.register_classes(&ids(0..3)).unwrap();
        let err = m.register_classes(&ids(2..5)).unwrap_err();
        assert!(matches!(err, crate::Error::Contract(_)));
        assert_eq!(m.head.num_classes(), 3);
    }

    #[test]
    fn snapshot_is_immune_to_training() {
        let mut m = small_model();
        m.register_classes(&ids(0..3)).unwrap();
        let snap = m.snapshot(1);
        let x = vec![0.1, 0.2, -0.3, 0.4, 0.5];
        let before = snap.embed(&x).unwrap();
        assert_eq!(before, m.embed(&x).unwrap());

        let mut opt = Sgd::new(&m.hyper);
        let xs = Tensor::from_rows(&[x.clone(), vec![1.0, -1.0, 0.5, 0.0, 0.2]]).unwrap();
        for _ in 0..10 {
            let mut tape = GradTape::new();
            let vars = m.bind(&mut tape);
            let xv = tape.constant(xs.clone());
            let e = embed_on_tape(&mut tape, &vars, xv).unwrap();
            let l = logits_on_tape(&mut tape, &vars, e, 0.05).unwrap();
            let loss = tape.softmax_cross_entropy(l, &[0, 1]).unwrap();
            let g = tape.backward(loss).unwrap();
            opt.step(&mut m, &g);
        }
        assert_ne!(m.embed(&x).unwrap(), before);
        assert_eq!(snap.embed(&x).unwrap(), before);
        let snap2 = m.snapshot(2);
        assert_eq!(snap2.embed(&x).unwrap(), m.embed(&x).unwrap());
    }

    #[test]
    fn tape_forward_matches_inference() {
        let mut m = small_model();
        m.register_classes(&ids(0..4)).unwrap();
        let xs = Tensor::from_rows(&[[0.5, -0.2, 0.1, 0.9, -1.0], [0.0, 0.3, 0.3, -0.6, 0.2]]).unwrap();
        let mut tape = GradTape::new();
        let vars = m.bind(&mut tape);
        let xv = tape.constant(xs.clone());
        let e = embed_on_tape(&mut tape, &vars, xv).unwrap();
        assert_eq!(tape.value(e), &m.embed_batch(&xs).unwrap());
    }
}
