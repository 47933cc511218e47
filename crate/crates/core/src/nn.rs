//! A small dense-network engine with hand-written reverse-mode gradients.
//!
//! Batches are column-major: a batch of `B` inputs of width `n` is an `n × B`
//! matrix. Hidden layers use ReLU, the output layer is linear.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Real;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Power iterations always run per normalization call, before the
/// convergence test kicks in.
pub const MIN_POWER_ITERS: usize = 3;
const MAX_POWER_ITERS: usize = 2000;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("forward cache does not belong to the current network weights")]
    StaleCache,
    #[error("checkpoint format version {found}, expected {CHECKPOINT_VERSION}")]
    SchemaMismatch { found: u32 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T: Real> {
    /// `out × in`
    pub weight: DMatrix<T>,
    pub bias: DVector<T>,
    /// Warm-start vector for power iteration (length `out`).
    pub u: DVector<T>,
}

impl<T: Real> Layer<T> {
    pub fn new(weight: DMatrix<T>, bias: DVector<T>) -> Self {
        let out = weight.nrows();
        let u = DVector::from_element(out, T::one() / T::from_count(out.max(1)).sqrt());
        Self { weight, bias, u }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug)]
pub struct Mlp<T: Real> {
    pub layers: Vec<Layer<T>>,
    /// Cap on every layer's largest singular value.
    pub spectral_bound: Option<T>,
    /// Changes whenever the weights change; ties forward caches to weights.
    revision: u64,
}

impl<T: Real> Clone for Mlp<T> {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            spectral_bound: self.spectral_bound,
            revision: fresh_id(),
        }
    }
}

impl<T: Real> PartialEq for Mlp<T> {
    fn eq(&self, other: &Self) -> bool {
        // power-iteration vectors are a cache, not part of the function
        self.spectral_bound == other.spectral_bound
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight == b.weight && a.bias == b.bias)
    }
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Real> {
    /// Input to each layer (`inputs[0]` is the network input).
    inputs: Vec<DMatrix<T>>,
    /// Pre-activation of each layer.
    pre: Vec<DMatrix<T>>,
    revision: u64,
}

impl<T: Real> ForwardCache<T> {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].ncols()
    }
}

/// Per-layer weight and bias gradients, shaped like the owning [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Real> {
    pub weights: Vec<DMatrix<T>>,
    pub biases: Vec<DVector<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        Self {
            weights: net
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.fan_out(), l.fan_in()))
                .collect(),
            biases: net.layers.iter().map(|l| DVector::zeros(l.fan_out())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for w in &mut self.weights {
            *w *= s;
        }
        for b in &mut self.biases {
            *b *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.finite()))
    }

    pub fn shape_matches(&self, net: &Mlp<T>) -> bool {
        self.weights.len() == net.layers.len()
            && self
                .weights
                .iter()
                .zip(&self.biases)
                .zip(&net.layers)
                .all(|((w, b), l)| w.shape() == l.weight.shape() && b.len() == l.bias.len())
    }
}

fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

impl<T: Real> Mlp<T> {
    pub fn from_layers(layers: Vec<Layer<T>>, spectral_bound: Option<T>) -> Result<Self, NnError> {
        for pair in layers.windows(2) {
            if pair[1].fan_in() != pair[0].fan_out() {
                return Err(NnError::DimMismatch {
                    expected: pair[0].fan_out(),
                    got: pair[1].fan_in(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.fan_out() {
                return Err(NnError::DimMismatch {
                    expected: l.fan_out(),
                    got: l.bias.len(),
                });
            }
        }
        if layers.is_empty() {
            return Err(NnError::Malformed("network needs at least one layer".into()));
        }
        Ok(Self {
            layers,
            spectral_bound,
            revision: fresh_id(),
        })
    }

    /// He-uniform weights (`U(±√(6/fan_in))`), zero biases.
    pub fn he_uniform<R: Rng + ?Sized>(dims: &[usize], spectral_bound: Option<T>, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need at least input and output widths");
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / fan_in as f64).sqrt();
                let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| T::lit(rng.random_range(-limit..limit)));
                Layer::new(weight, DVector::zeros(fan_out))
            })
            .collect();
        Self::from_layers(layers, spectral_bound).expect("chained dims")
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Layer::new(DMatrix::zeros(w[1], w[0]), DVector::zeros(w[1])))
            .collect();
        Self::from_layers(layers, None).expect("chained dims")
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.fan_out()).unwrap_or(0)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.fan_out()));
        d
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Marks the weights as modified, invalidating outstanding caches.
    pub fn touch(&mut self) {
        self.revision = fresh_id();
    }

    /// Mutable access to the weights; invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        self.touch();
        &mut self.layers
    }

    /// Batched forward pass without recording activations.
    pub fn infer(&self, x: &DMatrix<T>) -> Result<DMatrix<T>, NnError> {
        self.check_input(x.nrows())?;
        let last = self.layers.len() - 1;
        let mut a = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.weight * &a;
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            if i < last {
                z.apply(|v| *v = relu(*v));
            }
            a = z;
        }
        Ok(a)
    }

    pub fn infer_one(&self, x: &DVector<T>) -> Result<DVector<T>, NnError> {
        let out = self.infer(&DMatrix::from_column_slice(x.len(), 1, x.as_slice()))?;
        Ok(out.column(0).into_owned())
    }

    /// Batched forward pass recording activations for [`Self::backward`].
    pub fn forward(&self, x: &DMatrix<T>) -> Result<(DMatrix<T>, ForwardCache<T>), NnError> {
        self.check_input(x.nrows())?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.weight * &a;
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            inputs.push(a);
            a = if i < last { z.map(relu) } else { z.clone() };
            pre.push(z);
        }
        Ok((
            a,
            ForwardCache {
                inputs,
                pre,
                revision: self.revision,
            },
        ))
    }

    pub fn forward_one(&self, x: &DVector<T>) -> Result<(DVector<T>, ForwardCache<T>), NnError> {
        let (out, cache) = self.forward(&DMatrix::from_column_slice(x.len(), 1, x.as_slice()))?;
        Ok((out.column(0).into_owned(), cache))
    }

    /// Reverse pass for the contraction `Σ grad_out ⊙ output`. Returns the
    /// parameter gradients (summed over the batch) and the input gradient.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_out: &DMatrix<T>,
    ) -> Result<(Gradients<T>, DMatrix<T>), NnError> {
        if cache.revision != self.revision {
            return Err(NnError::StaleCache);
        }
        if grad_out.nrows() != self.output_dim() || grad_out.ncols() != cache.batch_size() {
            return Err(NnError::DimMismatch {
                expected: self.output_dim(),
                got: grad_out.nrows(),
            });
        }
        let n = self.layers.len();
        let mut weights = vec![DMatrix::zeros(0, 0); n];
        let mut biases = vec![DVector::zeros(0); n];
        let mut delta = grad_out.clone();
        for i in (0..n).rev() {
            if i < n - 1 {
                delta.zip_apply(&cache.pre[i], |d, z| {
                    if z <= T::zero() {
                        *d = T::zero();
                    }
                });
            }
            weights[i] = &delta * cache.inputs[i].transpose();
            biases[i] = delta.column_sum();
            delta = self.layers[i].weight.tr_mul(&delta);
        }
        Ok((Gradients { weights, biases }, delta))
    }

    /// Caps every layer's largest singular value at `spectral_bound`.
    ///
    /// σ_max is estimated by power iteration warm-started from the stored
    /// vectors: at least [`MIN_POWER_ITERS`] iterations, then until the
    /// estimate stops changing. Layers already within the bound are left
    /// untouched.
    pub fn spectral_normalize(&mut self) {
        let Some(bound) = self.spectral_bound else {
            return;
        };
        let mut changed = false;
        for layer in &mut self.layers {
            let sigma = power_iteration(&layer.weight, &mut layer.u);
            if sigma > bound {
                layer.weight *= bound / sigma;
                changed = true;
            }
        }
        if changed {
            self.touch();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|x| x.finite()))
    }

    fn check_input(&self, rows: usize) -> Result<(), NnError> {
        if rows != self.input_dim() {
            return Err(NnError::DimMismatch {
                expected: self.input_dim(),
                got: rows,
            });
        }
        Ok(())
    }
}

/// Largest singular value of `w`, refining the left singular vector guess `u`.
pub fn power_iteration<T: Real>(w: &DMatrix<T>, u: &mut DVector<T>) -> T {
    let tiny = T::lit(1e-300_f64.max(f64::MIN_POSITIVE));
    if u.len() != w.nrows() || u.norm() <= tiny {
        *u = DVector::from_element(w.nrows(), T::one());
    }
    let mut sigma = T::zero();
    for it in 0..MAX_POWER_ITERS {
        let mut v = w.tr_mul(u);
        let vn = v.norm();
        if vn <= tiny {
            return T::zero();
        }
        v /= vn;
        let mut wu = w * &v;
        let next = wu.norm();
        if next <= tiny {
            return T::zero();
        }
        wu /= next;
        *u = wu;
        let converged = (next - sigma).abs() <= T::default_epsilon() * T::lit(8.0) * next;
        sigma = next;
        if it + 1 >= MIN_POWER_ITERS && converged {
            break;
        }
    }
    sigma
}

/// Softmax cross-entropy of one logit vector against class `k`, with its
/// gradient `softmax(logits) − e_k`.
pub fn cross_entropy<T: Real>(logits: &DVector<T>, k: usize) -> (T, DVector<T>) {
    assert!(k < logits.len(), "class index out of range");
    let max = logits.max();
    let exps = logits.map(|z| (z - max).exp());
    let sum = exps.sum();
    let loss = sum.ln() + max - logits[k];
    let mut grad = exps / sum;
    grad[k] -= T::one();
    (loss, grad)
}

/// Summed cross-entropy over a batch of logit columns.
pub fn cross_entropy_batch<T: Real>(logits: &DMatrix<T>, labels: &[usize]) -> (T, DMatrix<T>) {
    assert_eq!(logits.ncols(), labels.len());
    let mut grad = DMatrix::zeros(logits.nrows(), logits.ncols());
    let mut total = T::zero();
    for (j, &k) in labels.iter().enumerate() {
        let (l, g) = cross_entropy(&logits.column(j).into_owned(), k);
        total += l;
        grad.set_column(j, &g);
    }
    (total, grad)
}

/// Fraction of columns whose arg-max equals the label.
pub fn accuracy<T: Real>(logits: &DMatrix<T>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(j, &k)| logits.column(*j).imax() == k)
        .count();
    hits as f64 / labels.len() as f64
}

/// SGD with classical momentum.
#[derive(Debug, Clone)]
pub struct Sgd<T: Real> {
    pub lr: T,
    pub momentum: T,
    velocity: Option<Gradients<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: T, momentum: T) -> Self {
        Self {
            lr,
            momentum,
            velocity: None,
        }
    }

    /// `v ← μ v + g`, `θ ← θ − lr · v`.
    pub fn step(&mut self, net: &mut Mlp<T>, grads: &Gradients<T>) {
        assert!(grads.shape_matches(net), "gradient shape mismatch");
        let vel = self.velocity.get_or_insert_with(|| Gradients::zeros_like(net));
        vel.scale(self.momentum);
        vel.add_assign(grads);
        for (layer, (gw, gb)) in net.layers.iter_mut().zip(vel.weights.iter().zip(&vel.biases)) {
            layer.weight -= gw * self.lr;
            layer.bias -= gb * self.lr;
        }
        net.touch();
    }
}

/// On-disk network: dimensions, row-major weights, spectral bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub format_version: u32,
    pub layer_dims: Vec<usize>,
    /// One row-major `out × in` array per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub spectral_bound: Option<f64>,
}

impl<T: Real> Mlp<T> {
    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        MlpCheckpoint {
            format_version: CHECKPOINT_VERSION,
            layer_dims: self.dims(),
            weights: self
                .layers
                .iter()
                .map(|l| l.weight.transpose().iter().map(|x| x.as_f64()).collect())
                .collect(),
            biases: self
                .layers
                .iter()
                .map(|l| l.bias.iter().map(|x| x.as_f64()).collect())
                .collect(),
            spectral_bound: self.spectral_bound.map(|b| b.as_f64()),
        }
    }

    pub fn from_checkpoint(ck: &MlpCheckpoint) -> Result<Self, NnError> {
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(NnError::SchemaMismatch {
                found: ck.format_version,
            });
        }
        let n = ck.layer_dims.len().saturating_sub(1);
        if n == 0 || ck.weights.len() != n || ck.biases.len() != n {
            return Err(NnError::Malformed("layer count disagrees with dims".into()));
        }
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let (fan_in, fan_out) = (ck.layer_dims[i], ck.layer_dims[i + 1]);
            if ck.weights[i].len() != fan_in * fan_out || ck.biases[i].len() != fan_out {
                return Err(NnError::Malformed(format!("layer {i} has the wrong number of values")));
            }
            let weight = DMatrix::from_row_iterator(fan_out, fan_in, ck.weights[i].iter().map(|&x| T::lit(x)));
            let bias = DVector::from_iterator(fan_out, ck.biases[i].iter().map(|&x| T::lit(x)));
            layers.push(Layer::new(weight, bias));
        }
        Self::from_layers(layers, ck.spectral_bound.map(T::lit))
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let text = std::fs::read_to_string(path)?;
        let ck: MlpCheckpoint = serde_json::from_str(&text)?;
        Self::from_checkpoint(&ck)
    }
}
