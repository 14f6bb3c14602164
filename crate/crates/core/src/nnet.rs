//! A small message-passing network with hand-written reverse mode.
//!
//! ```text
//! h_i^0 = relu(W_in a_i)
//! m_i   = sum over bonded j of W_msg^t [h_j^{t-1} ; e_ij]
//! h_i^t = relu(W_self^t h_i^{t-1} + m_i)            t = 1..T
//! g     = sum_i h_i^T
//! logit = w_r2 . relu(W_r1 g) + b_r2
//! ```
//!
//! The only bias is the output bias, so the network is positively homogeneous
//! up to it: an all-zero feature tensor of any shape predicts `sigmoid(b_r2)`
//! and the logit is linear along the straight path from that baseline.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{featurize, Dataset, FeatureTensor, Split, FEATURIZATION_VERSION};
use crate::metrics::{roc_auc, MetricsError};
use crate::molgraph::parse_smiles;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum NnetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training split needs both classes")]
    SingleClassDataset,
    #[error("non-finite loss at step {step} (last finite loss {last_finite:?})")]
    NonFiniteLoss { step: usize, last_finite: Option<f64> },
    #[error("split {0} needs both classes")]
    SingleClassSplit(Split),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("example {id}: {message}")]
    Example { id: String, message: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("checkpoint i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        Matrix {
            rows,
            cols,
            data: (0..rows * cols).map(|_| T::of(dist.sample(rng))).collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out += M[:, offset..offset + x.len()] x`.
    fn mul_add(&self, x: &[T], offset: usize, out: &mut [T]) {
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols + offset..r * self.cols + offset + x.len()];
            let mut acc = T::zero();
            for (&w, &v) in row.iter().zip(x) {
                acc += w * v;
            }
            *o += acc;
        }
    }

    /// `out += M[:, offset..offset + out.len()]^T d`.
    fn mul_add_t(&self, d: &[T], offset: usize, out: &mut [T]) {
        for (r, &dr) in d.iter().enumerate() {
            if dr.is_zero() {
                continue;
            }
            let row = &self.data[r * self.cols + offset..r * self.cols + offset + out.len()];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += w * dr;
            }
        }
    }

    /// `M[:, offset..offset + x.len()] += d x^T`.
    fn add_outer(&mut self, d: &[T], x: &[T], offset: usize) {
        for (r, &dr) in d.iter().enumerate() {
            if dr.is_zero() {
                continue;
            }
            let row = &mut self.data[r * self.cols + offset..r * self.cols + offset + x.len()];
            for (w, &v) in row.iter_mut().zip(x) {
                *w += dr * v;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub d_atom: usize,
    pub d_pair: usize,
    pub hidden: usize,
    pub message_steps: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            d_atom: crate::dataset::D_ATOM,
            d_pair: crate::dataset::D_PAIR,
            hidden: 32,
            message_steps: 3,
        }
    }
}

/// Network weights. Matrices map input to output as `out = W x`, so `W_in`
/// is stored `[h x d_atom]` and `W_msg^t` is `[h x (h + d_pair)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub hyper: Hyperparams,
    pub w_in: Matrix<T>,
    pub w_msg: Vec<Matrix<T>>,
    pub w_self: Vec<Matrix<T>>,
    pub w_r1: Matrix<T>,
    pub w_r2: Vec<T>,
    pub b_r2: T,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(hyper: Hyperparams) -> Self {
        let h = hyper.hidden;
        ModelParams {
            hyper,
            w_in: Matrix::zeros(h, hyper.d_atom),
            w_msg: (0..hyper.message_steps).map(|_| Matrix::zeros(h, h + hyper.d_pair)).collect(),
            w_self: (0..hyper.message_steps).map(|_| Matrix::zeros(h, h)).collect(),
            w_r1: Matrix::zeros(h, h),
            w_r2: vec![T::zero(); h],
            b_r2: T::zero(),
        }
    }

    /// Glorot-uniform weights, zero output bias.
    pub fn init(hyper: Hyperparams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = hyper.hidden;
        let w_in = Matrix::glorot(h, hyper.d_atom, &mut rng);
        let mut w_msg = Vec::new();
        let mut w_self = Vec::new();
        for _ in 0..hyper.message_steps {
            w_msg.push(Matrix::glorot(h, h + hyper.d_pair, &mut rng));
            w_self.push(Matrix::glorot(h, h, &mut rng));
        }
        let w_r1 = Matrix::glorot(h, h, &mut rng);
        let w_r2 = Matrix::<T>::glorot(1, h, &mut rng).data;
        ModelParams {
            hyper,
            w_in,
            w_msg,
            w_self,
            w_r1,
            w_r2,
            b_r2: T::zero(),
        }
    }

    /// Every parameter in a fixed order; the checkpoint and optimizer layout.
    pub fn flat(&self) -> Vec<T> {
        let mut v = self.w_in.data.clone();
        for t in 0..self.hyper.message_steps {
            v.extend_from_slice(&self.w_msg[t].data);
            v.extend_from_slice(&self.w_self[t].data);
        }
        v.extend_from_slice(&self.w_r1.data);
        v.extend_from_slice(&self.w_r2);
        v.push(self.b_r2);
        v
    }

    fn slots_mut(&mut self) -> Vec<&mut T> {
        let mut v: Vec<&mut T> = self.w_in.data.iter_mut().collect();
        for (m, s) in self.w_msg.iter_mut().zip(self.w_self.iter_mut()) {
            v.extend(m.data.iter_mut());
            v.extend(s.data.iter_mut());
        }
        v.extend(self.w_r1.data.iter_mut());
        v.extend(self.w_r2.iter_mut());
        v.push(&mut self.b_r2);
        v
    }

    pub fn from_flat(hyper: Hyperparams, values: &[T]) -> Option<Self> {
        let mut p = Self::zeros(hyper);
        let mut slots = p.slots_mut();
        if slots.len() != values.len() {
            return None;
        }
        for (s, &v) in slots.iter_mut().zip(values) {
            **s = v;
        }
        drop(slots);
        Some(p)
    }

    pub fn n_params(&self) -> usize {
        self.flat().len()
    }

    /// `self += scale * other`, entrywise.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (s, &o) in self.slots_mut().into_iter().zip(other.flat().iter()) {
            *s += scale * o;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let values: Vec<U> = self.flat().iter().map(|v| U::of(v.as_f64())).collect();
        ModelParams::from_flat(self.hyper, &values).expect("same layout")
    }

    fn check_shape(&self, x: &FeatureTensor<T>) -> Result<(), NnetError> {
        let ok = x.d_atom == self.hyper.d_atom
            && x.d_pair == self.hyper.d_pair
            && x.atom_features.len() == x.n_atoms * x.d_atom
            && x.pair_features.len() == x.pair_index.len() * x.d_pair
            && x.pair_index.iter().all(|&(i, j)| i < x.n_atoms && j < x.n_atoms);
        if ok {
            Ok(())
        } else {
            Err(NnetError::ShapeMismatch(format!(
                "tensor d_atom={} d_pair={} n_atoms={} vs model d_atom={} d_pair={}",
                x.d_atom, x.d_pair, x.n_atoms, self.hyper.d_atom, self.hyper.d_pair
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction<T> {
    pub probability: T,
    pub logit: T,
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn relu<T: Scalar>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

// Activations kept for the backward pass.
struct Tape<T> {
    // Pre-activations z^t (t = 0..=T), n x h each; h^t = relu(z^t).
    z: Vec<Vec<T>>,
    g: Vec<T>,
    u: Vec<T>,
    logit: T,
}

fn forward_tape<T: Scalar>(p: &ModelParams<T>, x: &FeatureTensor<T>) -> Tape<T> {
    let h = p.hyper.hidden;
    let n = x.n_atoms;
    let steps = p.hyper.message_steps;
    let mut z = Vec::with_capacity(steps + 1);
    let mut g = vec![T::zero(); h];
    if !x.is_zero() {
        let mut z0 = vec![T::zero(); n * h];
        for i in 0..n {
            p.w_in.mul_add(x.atom_row(i), 0, &mut z0[i * h..(i + 1) * h]);
        }
        z.push(z0);
        for t in 0..steps {
            let mut prev = z[t].clone();
            relu(&mut prev);
            let mut zt = vec![T::zero(); n * h];
            for i in 0..n {
                p.w_self[t].mul_add(&prev[i * h..(i + 1) * h], 0, &mut zt[i * h..(i + 1) * h]);
            }
            for (k, &(a, b)) in x.pair_index.iter().enumerate() {
                let e = x.pair_row(k);
                for (dst, src) in [(a, b), (b, a)] {
                    let out = &mut zt[dst * h..(dst + 1) * h];
                    p.w_msg[t].mul_add(&prev[src * h..(src + 1) * h], 0, out);
                    p.w_msg[t].mul_add(e, h, out);
                }
            }
            z.push(zt);
        }
        let last = &z[steps];
        for i in 0..n {
            for (gk, &v) in g.iter_mut().zip(&last[i * h..(i + 1) * h]) {
                if v > T::zero() {
                    *gk += v;
                }
            }
        }
    }
    let mut u = vec![T::zero(); h];
    p.w_r1.mul_add(&g, 0, &mut u);
    let mut logit = p.b_r2;
    for (&w, &v) in p.w_r2.iter().zip(&u) {
        if v > T::zero() {
            logit += w * v;
        }
    }
    Tape { z, g, u, logit }
}

pub fn forward<T: Scalar>(params: &ModelParams<T>, x: &FeatureTensor<T>) -> Result<Prediction<T>, NnetError> {
    params.check_shape(x)?;
    let logit = forward_tape(params, x).logit;
    Ok(Prediction {
        probability: sigmoid(logit),
        logit,
    })
}

/// Gradients of `d logit` propagated to parameters and/or inputs.
fn backward<T: Scalar>(
    p: &ModelParams<T>,
    x: &FeatureTensor<T>,
    tape: &Tape<T>,
    want_params: bool,
    want_inputs: bool,
) -> (Option<ModelParams<T>>, Option<FeatureTensor<T>>) {
    let h = p.hyper.hidden;
    let n = x.n_atoms;
    let steps = p.hyper.message_steps;
    let mut pg = want_params.then(|| ModelParams::zeros(p.hyper));
    let mut ig = want_inputs.then(|| x.zeros_like());

    let r: Vec<T> = tape.u.iter().map(|&v| v.max(T::zero())).collect();
    let du: Vec<T> = tape
        .u
        .iter()
        .zip(&p.w_r2)
        .map(|(&v, &w)| if v > T::zero() { w } else { T::zero() })
        .collect();
    if let Some(g) = pg.as_mut() {
        g.b_r2 = T::one();
        g.w_r2 = r;
        g.w_r1.add_outer(&du, &tape.g, 0);
    }
    if tape.z.is_empty() {
        // All-zero input: every graph activation and its gradient vanish.
        return (pg, ig);
    }
    let mut dg = vec![T::zero(); h];
    p.w_r1.mul_add_t(&du, 0, &mut dg);

    let mut dh = vec![T::zero(); n * h];
    for i in 0..n {
        dh[i * h..(i + 1) * h].copy_from_slice(&dg);
    }
    for t in (0..steps).rev() {
        let zt = &tape.z[t + 1];
        let dz: Vec<T> = dh
            .iter()
            .zip(zt)
            .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
            .collect();
        let mut prev = tape.z[t].clone();
        relu(&mut prev);
        let mut dprev = vec![T::zero(); n * h];
        for i in 0..n {
            let dzi = &dz[i * h..(i + 1) * h];
            p.w_self[t].mul_add_t(dzi, 0, &mut dprev[i * h..(i + 1) * h]);
            if let Some(g) = pg.as_mut() {
                g.w_self[t].add_outer(dzi, &prev[i * h..(i + 1) * h], 0);
            }
        }
        for (k, &(a, b)) in x.pair_index.iter().enumerate() {
            for (dst, src) in [(a, b), (b, a)] {
                let dzi = &dz[dst * h..(dst + 1) * h];
                p.w_msg[t].mul_add_t(dzi, 0, &mut dprev[src * h..(src + 1) * h]);
                if let Some(g) = pg.as_mut() {
                    g.w_msg[t].add_outer(dzi, &prev[src * h..(src + 1) * h], 0);
                    g.w_msg[t].add_outer(dzi, x.pair_row(k), h);
                }
                if let Some(ig) = ig.as_mut() {
                    let d = x.d_pair;
                    p.w_msg[t].mul_add_t(dzi, h, &mut ig.pair_features[k * d..(k + 1) * d]);
                }
            }
        }
        dh = dprev;
    }
    let z0 = &tape.z[0];
    for i in 0..n {
        let dz0: Vec<T> = dh[i * h..(i + 1) * h]
            .iter()
            .zip(&z0[i * h..(i + 1) * h])
            .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
            .collect();
        if let Some(g) = pg.as_mut() {
            g.w_in.add_outer(&dz0, x.atom_row(i), 0);
        }
        if let Some(ig) = ig.as_mut() {
            let d = x.d_atom;
            p.w_in.mul_add_t(&dz0, 0, &mut ig.atom_features[i * d..(i + 1) * d]);
        }
    }
    (pg, ig)
}

fn scale_tensor<T: Scalar>(t: &mut FeatureTensor<T>, s: T) {
    for v in t.atom_features.iter_mut().chain(t.pair_features.iter_mut()) {
        *v *= s;
    }
}

/// Binary cross-entropy from a logit, computed stably.
pub fn bce_with_logit<T: Scalar>(logit: T, target: T) -> T {
    logit.max(T::zero()) - logit * target + (T::one() + (-logit.abs()).exp()).ln()
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    /// d loss / d params for the binary cross-entropy loss.
    pub params: ModelParams<T>,
    /// d F / d x, where F is the predicted probability.
    pub inputs: FeatureTensor<T>,
    pub loss: T,
    pub prediction: Prediction<T>,
}

pub fn gradients<T: Scalar>(params: &ModelParams<T>, x: &FeatureTensor<T>, target: bool) -> Result<Gradients<T>, NnetError> {
    params.check_shape(x)?;
    let tape = forward_tape(params, x);
    let (pg, ig) = backward(params, x, &tape, true, true);
    let (mut pg, mut ig) = (pg.expect("requested"), ig.expect("requested"));
    let prob = sigmoid(tape.logit);
    let y = if target { T::one() } else { T::zero() };
    let zero = ModelParams::zeros(params.hyper);
    let mut scaled = zero;
    scaled.add_scaled(&pg, prob - y);
    pg = scaled;
    scale_tensor(&mut ig, prob * (T::one() - prob));
    Ok(Gradients {
        params: pg,
        inputs: ig,
        loss: bce_with_logit(tape.logit, y),
        prediction: Prediction {
            probability: prob,
            logit: tape.logit,
        },
    })
}

/// `F(x)` and `dF/dx` only.
pub fn input_gradients<T: Scalar>(params: &ModelParams<T>, x: &FeatureTensor<T>) -> Result<(T, FeatureTensor<T>), NnetError> {
    params.check_shape(x)?;
    let tape = forward_tape(params, x);
    let (_, ig) = backward(params, x, &tape, false, true);
    let mut ig = ig.expect("requested");
    let prob = sigmoid(tape.logit);
    scale_tensor(&mut ig, prob * (T::one() - prob));
    Ok((prob, ig))
}

fn loss_and_param_grads<T: Scalar>(params: &ModelParams<T>, x: &FeatureTensor<T>, y: T) -> (T, ModelParams<T>, T) {
    let tape = forward_tape(params, x);
    let (pg, _) = backward(params, x, &tape, true, false);
    let prob = sigmoid(tape.logit);
    (bce_with_logit(tape.logit, y), pg.expect("requested"), prob - y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchScheme {
    /// One third real examples, one third zero baselines labelled 1, one
    /// third zero baselines labelled 0.
    ThreeWay,
    /// Positives, negatives and the two baseline groups in equal quarters.
    FourWay,
}

impl std::str::FromStr for BatchScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "three_way" => Ok(BatchScheme::ThreeWay),
            "four_way" => Ok(BatchScheme::FourWay),
            other => Err(format!("unknown batch scheme `{other}` (expected three_way or four_way)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub scheme: BatchScheme,
    pub hidden: usize,
    pub message_steps: usize,
    /// Real-example targets become `eps` and `1 - eps`; baselines keep 0 and 1.
    pub label_smoothing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 99,
            steps: 10_000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            scheme: BatchScheme::ThreeWay,
            hidden: 32,
            message_steps: 3,
            label_smoothing: 0.01,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), NnetError> {
        let parts = match self.scheme {
            BatchScheme::ThreeWay => 3,
            BatchScheme::FourWay => 4,
        };
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(parts) {
            return Err(NnetError::InvalidConfig(format!(
                "batch size {} is not a positive multiple of {parts}",
                self.batch_size
            )));
        }
        if self.hidden == 0 {
            return Err(NnetError::InvalidConfig("hidden width must be positive".into()));
        }
        Ok(())
    }
}

struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    fn step(&mut self, params: &mut ModelParams<T>, grads: &[T], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let lr = T::of(cfg.learning_rate);
        let eps = T::of(cfg.epsilon);
        for (k, slot) in params.slots_mut().into_iter().enumerate() {
            let g = grads[k];
            self.m[k] = b1 * self.m[k] + (T::one() - b1) * g;
            self.v[k] = b2 * self.v[k] + (T::one() - b2) * g * g;
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            *slot -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Mean minibatch loss per step.
pub type LossTrace = Vec<f64>;

/// Trains on featurized `(tensor, label)` examples. Single-threaded and
/// deterministic given the seed.
pub fn train_examples<T: Scalar>(
    examples: &[(FeatureTensor<T>, bool)],
    config: &TrainConfig,
) -> Result<(ModelParams<T>, LossTrace), NnetError> {
    config.validate()?;
    let positives: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].1).collect();
    let negatives: Vec<usize> = (0..examples.len()).filter(|&i| !examples[i].1).collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(NnetError::SingleClassDataset);
    }
    let d_atom = examples[0].0.d_atom;
    let d_pair = examples[0].0.d_pair;
    let hyper = Hyperparams {
        d_atom,
        d_pair,
        hidden: config.hidden,
        message_steps: config.message_steps,
    };
    for (x, _) in examples {
        if x.d_atom != d_atom || x.d_pair != d_pair {
            return Err(NnetError::ShapeMismatch("examples disagree on feature widths".into()));
        }
    }
    let mut params = ModelParams::<T>::init(hyper, config.seed);
    let n_params = params.n_params();
    let mut adam = Adam {
        m: vec![T::zero(); n_params],
        v: vec![T::zero(); n_params],
        t: 0,
    };
    // Separate stream from the initializer.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut trace = Vec::with_capacity(config.steps);
    let mut last_finite = None;

    for step in 0..config.steps {
        let real: Vec<usize> = match config.scheme {
            BatchScheme::ThreeWay => (0..config.batch_size / 3).map(|_| rng.gen_range(0..examples.len())).collect(),
            BatchScheme::FourWay => {
                let q = config.batch_size / 4;
                let mut v: Vec<usize> = (0..q).map(|_| positives[rng.gen_range(0..positives.len())]).collect();
                v.extend((0..q).map(|_| negatives[rng.gen_range(0..negatives.len())]));
                v
            }
        };
        let n_base = real.len() / match config.scheme {
            BatchScheme::ThreeWay => 1,
            BatchScheme::FourWay => 2,
        };
        let mut grad = vec![T::zero(); n_params];
        let mut loss_sum = T::zero();
        for &i in &real {
            let (x, label) = &examples[i];
            let eps = T::of(config.label_smoothing);
            let y = if *label { T::one() - eps } else { eps };
            let (loss, pg, scale) = loss_and_param_grads(&params, x, y);
            loss_sum += loss;
            for (g, v) in grad.iter_mut().zip(pg.flat()) {
                *g += scale * v;
            }
        }
        // Zero baselines: g = 0 whatever the borrowed shape, so one pass
        // serves every baseline example of either target.
        let base = examples[real[0]].0.zeros_like();
        let (_, pg, _) = loss_and_param_grads(&params, &base, T::zero());
        let p0 = forward(&params, &base)?;
        let nb = T::of(n_base as f64);
        let scale = nb * (p0.probability - T::one()) + nb * p0.probability;
        loss_sum += nb * (bce_with_logit(p0.logit, T::one()) + bce_with_logit(p0.logit, T::zero()));
        for (g, v) in grad.iter_mut().zip(pg.flat()) {
            *g += scale * v;
        }

        let batch = T::of(config.batch_size as f64);
        let loss = (loss_sum / batch).as_f64();
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(NnetError::NonFiniteLoss { step, last_finite });
        }
        last_finite = Some(loss);
        trace.push(loss);
        for g in &mut grad {
            *g = *g / batch;
        }
        adam.step(&mut params, &grad, config);
        if step % 500 == 0 {
            log::debug!("step {step}: loss {loss:.5}");
        }
    }
    Ok((params, trace))
}

/// Featurizes one example from its stored SMILES.
pub fn example_tensor<T: Scalar>(id: &str, smiles: &str) -> Result<FeatureTensor<T>, NnetError> {
    parse_smiles(smiles, id).map(|m| featurize(&m)).map_err(|e| NnetError::Example {
        id: id.to_string(),
        message: e.to_string(),
    })
}

/// Trains on the train split of a dataset.
pub fn train<T: Scalar>(dataset: &Dataset, config: &TrainConfig) -> Result<ModelParams<T>, NnetError> {
    train_traced(dataset, config).map(|(p, _)| p)
}

pub fn train_traced<T: Scalar>(dataset: &Dataset, config: &TrainConfig) -> Result<(ModelParams<T>, LossTrace), NnetError> {
    let examples = dataset
        .split(Split::Train)
        .map(|e| Ok((example_tensor(&e.id, &e.smiles)?, e.label)))
        .collect::<Result<Vec<_>, NnetError>>()?;
    if examples.is_empty() {
        return Err(NnetError::SingleClassDataset);
    }
    train_examples(&examples, config)
}

/// ROC AUC of predictions against labels over one split.
pub fn evaluate_model<T: Scalar>(params: &ModelParams<T>, dataset: &Dataset, split: Split) -> Result<f64, NnetError> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for e in dataset.split(split) {
        let x = example_tensor::<T>(&e.id, &e.smiles)?;
        scores.push(forward(params, &x)?.probability.as_f64());
        labels.push(e.label);
    }
    roc_auc(&scores, &labels).map_err(|err| match err {
        MetricsError::SingleClass | MetricsError::EmptyInput => NnetError::SingleClassSplit(split),
        other => NnetError::ShapeMismatch(other.to_string()),
    })
}

const MAGIC: &[u8; 8] = b"BLMPNN\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    checkpoint_version: u32,
    featurization_version: u32,
    hyper: Hyperparams,
    n_params: usize,
}

/// Layout: 8-byte magic, u32 LE header length, JSON header, then every
/// parameter as an f64 LE in [`ModelParams::flat`] order.
pub fn checkpoint_bytes<T: Scalar>(params: &ModelParams<T>) -> Vec<u8> {
    let flat = params.flat();
    let header = serde_json::to_vec(&CheckpointHeader {
        checkpoint_version: CHECKPOINT_VERSION,
        featurization_version: FEATURIZATION_VERSION,
        hyper: params.hyper,
        n_params: flat.len(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + 8 * flat.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in flat {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    out
}

pub fn params_from_checkpoint<T: Scalar>(bytes: &[u8], path: &Path) -> Result<ModelParams<T>, NnetError> {
    let bad = |message: &str| NnetError::Checkpoint {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|_| bad("truncated"))?;
    let len = u32::from_le_bytes(len) as usize;
    if r.len() < len {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&r[..len]).map_err(|e| bad(&format!("bad header: {e}")))?;
    r = &r[len..];
    if header.checkpoint_version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {}", header.checkpoint_version)));
    }
    if header.featurization_version != FEATURIZATION_VERSION {
        return Err(bad(&format!(
            "featurization version {} does not match this build ({FEATURIZATION_VERSION})",
            header.featurization_version
        )));
    }
    if r.len() != 8 * header.n_params {
        return Err(bad("parameter block has the wrong length"));
    }
    let values: Vec<T> = r
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    ModelParams::from_flat(header.hyper, &values).ok_or_else(|| bad("parameter count does not match hyperparameters"))
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<(), NnetError> {
    let io = |source| NnetError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&checkpoint_bytes(params)).map_err(io)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelParams<T>, NnetError> {
    let bytes = fs::read(path).map_err(|source| NnetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    params_from_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::parse_smiles;

    fn tensor(s: &str) -> FeatureTensor<f64> {
        featurize(&parse_smiles(s, "t").unwrap())
    }

    fn small_hyper() -> Hyperparams {
        Hyperparams {
            hidden: 8,
            message_steps: 2,
            ..Hyperparams::default()
        }
    }

    #[test]
    fn zero_params_give_half() {
        let p = ModelParams::<f64>::zeros(Hyperparams::default());
        let pred = forward(&p, &tensor("CCO")).unwrap();
        assert_eq!(pred.logit, 0.0);
        assert_eq!(pred.probability, 0.5);
    }

    #[test]
    fn baseline_is_topology_independent() {
        let p = ModelParams::<f64>::init(Hyperparams::default(), 5);
        let a = forward(&p, &tensor("CCO").zeros_like()).unwrap();
        let b = forward(&p, &tensor("c1ccccc1CCN").zeros_like()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch() {
        let p = ModelParams::<f64>::init(small_hyper(), 1);
        let mut x = tensor("CC");
        x.d_atom = 3;
        assert!(matches!(forward(&p, &x), Err(NnetError::ShapeMismatch(_))));
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let p = ModelParams::<f64>::init(small_hyper(), 11);
        let x = tensor("OCc1ccccc1C(=O)N");
        let g = gradients(&p, &x, true).unwrap();
        let flat = p.flat();
        let gflat = g.params.flat();
        let h = 1e-6;
        for k in (0..flat.len()).step_by(37) {
            let mut plus = flat.clone();
            plus[k] += h;
            let mut minus = flat.clone();
            minus[k] -= h;
            let lp = gradients(&ModelParams::from_flat(p.hyper, &plus).unwrap(), &x, true).unwrap().loss;
            let lm = gradients(&ModelParams::from_flat(p.hyper, &minus).unwrap(), &x, true).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - gflat[k]).abs() <= 1e-6 + 1e-4 * fd.abs(), "param {k}: fd {fd} analytic {}", gflat[k]);
        }
    }

    #[test]
    fn duplicated_batch_doubles_gradients() {
        let p = ModelParams::<f64>::init(small_hyper(), 2);
        let x = tensor("CCN");
        let g = gradients(&p, &x, false).unwrap();
        let mut twice = ModelParams::zeros(p.hyper);
        twice.add_scaled(&g.params, 1.0);
        twice.add_scaled(&g.params, 1.0);
        for (a, b) in twice.flat().iter().zip(g.params.flat()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = ModelParams::<f64>::init(Hyperparams::default(), 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&p, &path).unwrap();
        let q: ModelParams<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        let x = tensor("CC(=O)Oc1ccccc1");
        assert_eq!(forward(&p, &x).unwrap().logit.to_bits(), forward(&q, &x).unwrap().logit.to_bits());

        let mut bytes = checkpoint_bytes(&p);
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[12..12 + len].to_vec()).unwrap();
        let patched = header.replace("\"featurization_version\":1", "\"featurization_version\":7");
        assert_eq!(patched.len(), header.len());
        bytes.splice(12..12 + len, patched.into_bytes());
        assert!(matches!(params_from_checkpoint::<f64>(&bytes, &path), Err(NnetError::Checkpoint { .. })));
    }

    #[test]
    fn invalid_batch_size() {
        let ex = vec![(tensor("CC"), true), (tensor("CO"), false)];
        let cfg = TrainConfig {
            batch_size: 10,
            steps: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(train_examples(&ex, &cfg), Err(NnetError::InvalidConfig(_))));
        let cfg = TrainConfig { steps: 1, ..TrainConfig::default() };
        let single = vec![(tensor("CC"), true)];
        assert!(matches!(train_examples(&single, &cfg), Err(NnetError::SingleClassDataset)));
    }
}
