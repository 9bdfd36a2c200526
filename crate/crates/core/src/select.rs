//! Similarity-guided layer selection.
//!
//! After the saturated layer `l*`, exactly one of the `K = L - l*` remaining
//! blocks is run. Training labels mark the candidate whose output is most
//! cosine-similar to `X^{l*}`; a three-layer MLP over the first token of
//! `X^{l*}` learns to predict that label under a mean-absolute-error loss.
//! Gradients are derived by hand; [`gradient_check`] compares them against
//! central finite differences in double precision.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::backbone::{apply_block, forward_all, forward_prefix, BackboneWeights, ExecTrace, LayerFeatures};
use crate::config::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{gemm, matmul_transposed, MatRef, Tensor};

/// Learning rate used for full-scale training runs of the selector.
pub const FULL_SCALE_LR: f32 = 4e-5;
pub const DEFAULT_LR: f32 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct SelectorMlp {
    /// `hidden × D`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `hidden × hidden`
    pub w2: Tensor,
    pub b2: Tensor,
    /// `K × hidden`
    pub w3: Tensor,
    pub b3: Tensor,
}

impl SelectorMlp {
    /// Uniform `±1/sqrt(fan_in)` weights, zero biases.
    pub fn init(input: usize, hidden: usize, choices: usize, rng: &mut SeededRng) -> Self {
        let mut layer = |out: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f32).sqrt();
            Tensor::from_fn(&[out, fan_in], |_| rng.uniform_f32(-bound, bound))
        };
        let w1 = layer(hidden, input);
        let w2 = layer(hidden, hidden);
        let w3 = layer(choices, hidden);
        SelectorMlp {
            w1,
            b1: Tensor::zeros(&[hidden]),
            w2,
            b2: Tensor::zeros(&[hidden]),
            w3,
            b3: Tensor::zeros(&[choices]),
        }
    }

    /// Like [`SelectorMlp::init`] with each weight bound multiplied by a per-layer gain.
    pub fn init_with_gains(input: usize, hidden: usize, choices: usize, gains: [f32; 3], rng: &mut SeededRng) -> Self {
        let mut mlp = Self::init(input, hidden, choices, rng);
        for (w, g) in [&mut mlp.w1, &mut mlp.w2, &mut mlp.w3].into_iter().zip(gains) {
            w.data_mut().iter_mut().for_each(|v| *v *= g);
        }
        mlp
    }

    /// Points each output row along the gap between the class-conditional
    /// means of the hidden features, with the bias at their midpoint, so the
    /// logit gap between the two means equals `separation`.
    pub fn warm_start_head(&mut self, data: &SelectorDataset, separation: f32) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Argument("empty dataset".into()));
        }
        if data.input_dim() != self.input_dim() || data.choices() != self.choices() {
            return shape_err("dataset does not match selector shape");
        }
        let feats = hidden_features(self, &data.z)?;
        let h = self.hidden();
        for k in 0..self.choices() {
            let (mut pos, mut neg) = (vec![0.0f64; h], vec![0.0f64; h]);
            let (mut n_pos, mut n_neg) = (0usize, 0usize);
            for i in 0..data.len() {
                let (acc, n) = if data.y.row(i)[k] == 1.0 {
                    (&mut pos, &mut n_pos)
                } else {
                    (&mut neg, &mut n_neg)
                };
                acc.iter_mut().zip(feats.row(i)).for_each(|(a, &f)| *a += f as f64);
                *n += 1;
            }
            if n_pos == 0 || n_neg == 0 {
                continue;
            }
            pos.iter_mut().for_each(|v| *v /= n_pos as f64);
            neg.iter_mut().for_each(|v| *v /= n_neg as f64);
            let gap: Vec<f64> = pos.iter().zip(&neg).map(|(p, n)| p - n).collect();
            let norm2: f64 = gap.iter().map(|g| g * g).sum();
            if norm2 == 0.0 {
                continue;
            }
            let scale = separation as f64 / norm2;
            let mid: f64 = gap.iter().zip(pos.iter().zip(&neg)).map(|(g, (p, n))| g * (p + n) / 2.0).sum();
            for (w, g) in self.w3.data_mut()[k * h..(k + 1) * h].iter_mut().zip(&gap) {
                *w = (scale * g) as f32;
            }
            self.b3.data_mut()[k] = (-scale * mid) as f32;
        }
        Ok(())
    }

    pub fn zeros(input: usize, hidden: usize, choices: usize) -> Self {
        SelectorMlp {
            w1: Tensor::zeros(&[hidden, input]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, hidden]),
            b2: Tensor::zeros(&[hidden]),
            w3: Tensor::zeros(&[choices, hidden]),
            b3: Tensor::zeros(&[choices]),
        }
    }

    pub fn for_config(cfg: &ModelConfig, rng: &mut SeededRng) -> Self {
        Self::init(cfg.embed_dim, cfg.selector_hidden, cfg.choices(), rng)
    }

    pub fn input_dim(&self) -> usize {
        self.w1.dims()[1]
    }

    pub fn hidden(&self) -> usize {
        self.w1.dims()[0]
    }

    pub fn choices(&self) -> usize {
        self.w3.dims()[0]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn named(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("fc1.weight", &self.w1),
            ("fc1.bias", &self.b1),
            ("fc2.weight", &self.w2),
            ("fc2.bias", &self.b2),
            ("fc3.weight", &self.w3),
            ("fc3.bias", &self.b3),
        ]
    }

    pub(crate) fn expected_dims(input: usize, hidden: usize, choices: usize) -> [Vec<usize>; 6] {
        [
            vec![hidden, input],
            vec![hidden],
            vec![hidden, hidden],
            vec![hidden],
            vec![choices, hidden],
            vec![choices],
        ]
    }

    pub(crate) fn from_parts(parts: Vec<Tensor>) -> Result<Self> {
        let [w1, b1, w2, b2, w3, b3]: [Tensor; 6] = parts.try_into().expect("six selector tensors");
        let mlp = SelectorMlp { w1, b1, w2, b2, w3, b3 };
        let want = Self::expected_dims(mlp.input_dim(), mlp.hidden(), mlp.choices());
        for (t, dims) in mlp.tensors().iter().zip(&want) {
            if t.dims() != dims.as_slice() {
                return shape_err(format!("selector tensor {:?}, expected {dims:?}", t.dims()));
            }
        }
        Ok(mlp)
    }

    /// Pre-sigmoid outputs `M(z)`.
    pub fn logits(&self, z: &[f32]) -> Result<Vec<f32>> {
        if z.len() != self.input_dim() {
            return shape_err(format!(
                "selector input of length {}, expected {}",
                z.len(),
                self.input_dim()
            ));
        }
        Ok(forward(&self.view(), z).a3)
    }

    fn view(&self) -> Params<'_, f32> {
        Params {
            w1: self.w1.data(),
            b1: self.b1.data(),
            w2: self.w2.data(),
            b2: self.b2.data(),
            w3: self.w3.data(),
            b3: self.b3.data(),
            input: self.input_dim(),
            hidden: self.hidden(),
            choices: self.choices(),
        }
    }
}

/// Selector output: probabilities per candidate and the 1-based argmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionDecision {
    pub probabilities: Vec<f32>,
    pub chosen_k: usize,
    pub tie_broken: bool,
}

/// First maximum wins; reports whether another entry equalled it.
pub(crate) fn argmax_first<T: PartialOrd + Copy>(values: &[T]) -> (usize, bool) {
    let mut best = 0;
    let mut tie = false;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
            tie = false;
        } else if v == values[best] {
            tie = true;
        }
    }
    (best, tie)
}

pub fn select_layer(z: &[f32], mlp: &SelectorMlp) -> Result<SelectionDecision> {
    let logits = mlp.logits(z)?;
    Ok(decide(logits.iter().map(|&a| sigmoid(a)).collect()))
}

pub(crate) fn decide(probabilities: Vec<f32>) -> SelectionDecision {
    let (best, tie_broken) = argmax_first(&probabilities);
    SelectionDecision {
        probabilities,
        chosen_k: best + 1,
        tie_broken,
    }
}

/// One-hot target over the `K` candidate blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelVector {
    pub y: Vec<f32>,
    pub tie_broken: bool,
}

impl LabelVector {
    pub fn one_hot(k: usize, choices: usize) -> Self {
        assert!(k >= 1 && k <= choices, "label k={k} outside 1..={choices}");
        let mut y = vec![0.0; choices];
        y[k - 1] = 1.0;
        LabelVector { y, tie_broken: false }
    }

    pub fn from_values(y: Vec<f32>) -> Result<Self> {
        let ones = y.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Argument(format!("label {y:?} is not one-hot")));
        }
        Ok(LabelVector { y, tie_broken: false })
    }

    /// 1-based index of the hot entry.
    pub fn k(&self) -> usize {
        self.y.iter().position(|&v| v == 1.0).expect("one-hot") + 1
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CosineMode {
    /// Cosine of the two token matrices flattened to `N·D` vectors.
    #[default]
    Flattened,
    /// Mean over tokens of the per-token cosine.
    PerTokenMean,
}

fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub fn layer_cosine(a: &LayerFeatures, b: &LayerFeatures) -> Result<f64> {
    layer_cosine_with(a, b, CosineMode::Flattened)
}

pub fn layer_cosine_with(a: &LayerFeatures, b: &LayerFeatures, mode: CosineMode) -> Result<f64> {
    if a.tokens.dims() != b.tokens.dims() {
        return shape_err(format!(
            "cosine of {:?} and {:?}",
            a.tokens.dims(),
            b.tokens.dims()
        ));
    }
    let degenerate = || Error::Degenerate("cosine of an all-zero feature".into());
    match mode {
        CosineMode::Flattened => cosine(a.tokens.data(), b.tokens.data()).ok_or_else(degenerate),
        CosineMode::PerTokenMean => {
            let n = a.tokens.rows();
            let mut sum = 0.0;
            for t in 0..n {
                sum += cosine(a.tokens.row(t), b.tokens.row(t)).ok_or_else(degenerate)?;
            }
            Ok(sum / n as f64)
        }
    }
}

/// Where training-time candidate features come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// Candidates are `T^{l*+k}(X^{l*})`, as at inference.
    #[default]
    Direct,
    /// Candidates are `X^{l*+k}` from the full sequential pass.
    Sequential,
}

/// `[X^{l*}, cand_1, …, cand_K]`, each tagged with its layer index.
pub fn candidate_features(
    x0: &LayerFeatures,
    cfg: &ModelConfig,
    w: &BackboneWeights,
    source: LabelSource,
) -> Result<Vec<LayerFeatures>> {
    match source {
        LabelSource::Sequential => {
            let all = forward_all(x0, cfg, w)?;
            Ok(all.into_iter().skip(cfg.saturated_layer - 1).collect())
        }
        LabelSource::Direct => {
            let mut trace = ExecTrace::default();
            let saturated = forward_prefix(x0, cfg, w, &mut trace)?;
            let mut out = Vec::with_capacity(cfg.choices() + 1);
            for k in 1..=cfg.choices() {
                out.push(apply_block(&saturated, cfg.saturated_layer + k, cfg, w, &mut trace)?);
            }
            out.insert(0, saturated);
            Ok(out)
        }
    }
}

/// Cosine of each candidate against the saturated features, `k = 1..=K`.
pub fn candidate_cosines(
    features: &[LayerFeatures],
    saturated_layer: usize,
    depth: usize,
    mode: CosineMode,
) -> Result<Vec<f64>> {
    let find = |layer: usize| {
        features
            .iter()
            .find(|f| f.layer_index == layer)
            .ok_or_else(|| Error::Argument(format!("features for layer {layer} missing")))
    };
    if saturated_layer == 0 || saturated_layer >= depth {
        return Err(Error::Argument(format!(
            "saturated layer {saturated_layer} outside 1..{depth}"
        )));
    }
    let reference = find(saturated_layer)?;
    (saturated_layer + 1..=depth)
        .map(|layer| layer_cosine_with(reference, find(layer)?, mode))
        .collect()
}

/// One-hot label on the most similar candidate; ties go to the smallest `k`.
pub fn similarity_labels(
    features: &[LayerFeatures],
    saturated_layer: usize,
    depth: usize,
    mode: CosineMode,
) -> Result<LabelVector> {
    let cosines = candidate_cosines(features, saturated_layer, depth, mode)?;
    let (best, tie) = argmax_first(&cosines);
    let mut label = LabelVector::one_hot(best + 1, cosines.len());
    label.tie_broken = tie;
    Ok(label)
}

/// `(1/K) Σ |ŷ_k − y_k|`.
pub fn sim_loss(probabilities: &[f32], label: &LabelVector) -> Result<f32> {
    if probabilities.len() != label.len() {
        return Err(Error::Argument(format!(
            "{} probabilities for a label of length {}",
            probabilities.len(),
            label.len()
        )));
    }
    let total: f64 = probabilities
        .iter()
        .zip(&label.y)
        .map(|(&p, &y)| (p as f64 - y as f64).abs())
        .sum();
    Ok((total / label.len() as f64) as f32)
}

pub fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn sign<T: Float>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Borrowed parameter buffers in row-major `out × in` layout.
#[derive(Clone, Copy)]
struct Params<'a, T> {
    w1: &'a [T],
    b1: &'a [T],
    w2: &'a [T],
    b2: &'a [T],
    w3: &'a [T],
    b3: &'a [T],
    input: usize,
    hidden: usize,
    choices: usize,
}

struct Activations<T> {
    a1: Vec<T>,
    h1: Vec<T>,
    a2: Vec<T>,
    h2: Vec<T>,
    a3: Vec<T>,
    yhat: Vec<T>,
}

fn affine<T: Float>(w: &[T], b: &[T], x: &[T]) -> Vec<T> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| {
            w[o * n_in..(o + 1) * n_in]
                .iter()
                .zip(x)
                .fold(bias, |acc, (&wv, &xv)| acc + wv * xv)
        })
        .collect()
}

fn relu<T: Float>(v: &[T]) -> Vec<T> {
    v.iter().map(|&x| x.max(T::zero())).collect()
}

fn forward<T: Float>(p: &Params<'_, T>, z: &[T]) -> Activations<T> {
    let a1 = affine(p.w1, p.b1, z);
    let h1 = relu(&a1);
    let a2 = affine(p.w2, p.b2, &h1);
    let h2 = relu(&a2);
    let a3 = affine(p.w3, p.b3, &h2);
    let yhat = a3.iter().map(|&a| sigmoid(a)).collect();
    Activations { a1, h1, a2, h2, a3, yhat }
}

fn loss_of<T: Float>(yhat: &[T], y: &[T]) -> T {
    let k = T::from(y.len()).unwrap();
    yhat.iter().zip(y).fold(T::zero(), |acc, (&p, &t)| acc + (p - t).abs()) / k
}

/// Gradients in the same layout as the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub w3: Vec<T>,
    pub b3: Vec<T>,
}

impl<T> Gradients<T> {
    pub fn parts(&self) -> [&[T]; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }
}

fn backprop<T: Float>(p: &Params<'_, T>, z: &[T], y: &[T]) -> (T, Gradients<T>) {
    let act = forward(p, z);
    let k = T::from(p.choices).unwrap();
    let (hid, inp, ch) = (p.hidden, p.input, p.choices);
    // dL/da3 = sign(ŷ − y)/K · ŷ(1 − ŷ)
    let d3: Vec<T> = act
        .yhat
        .iter()
        .zip(y)
        .map(|(&q, &t)| sign(q - t) / k * q * (T::one() - q))
        .collect();
    let outer = |delta: &[T], x: &[T]| -> Vec<T> {
        delta.iter().flat_map(|&d| x.iter().map(move |&v| d * v)).collect()
    };
    let back = |w: &[T], delta: &[T], pre: &[T], n_in: usize| -> Vec<T> {
        (0..n_in)
            .map(|i| {
                if pre[i] > T::zero() {
                    delta
                        .iter()
                        .enumerate()
                        .fold(T::zero(), |acc, (o, &d)| acc + w[o * n_in + i] * d)
                } else {
                    T::zero()
                }
            })
            .collect()
    };
    let d2 = back(p.w3, &d3, &act.a2, hid);
    let d1 = back(p.w2, &d2, &act.a1, hid);
    debug_assert_eq!(d3.len(), ch);
    debug_assert_eq!(z.len(), inp);
    let grads = Gradients {
        w1: outer(&d1, z),
        b1: d1.clone(),
        w2: outer(&d2, &act.h1),
        b2: d2.clone(),
        w3: outer(&d3, &act.h2),
        b3: d3,
    };
    (loss_of(&act.yhat, y), grads)
}

/// Exact gradients of `sim_loss(σ(M(z)), y)` for a single sample.
pub fn mlp_gradients(z: &[f32], mlp: &SelectorMlp, label: &LabelVector) -> Result<Gradients<f32>> {
    check_sample(mlp, z, label)?;
    Ok(backprop(&mlp.view(), z, &label.y).1)
}

fn check_sample(mlp: &SelectorMlp, z: &[f32], label: &LabelVector) -> Result<()> {
    if z.len() != mlp.input_dim() || label.len() != mlp.choices() {
        return shape_err(format!(
            "sample (z: {}, y: {}) for selector {}→{}",
            z.len(),
            label.len(),
            mlp.input_dim(),
            mlp.choices()
        ));
    }
    Ok(())
}

/// Selector training set: one row of `z` and one one-hot row of `y` per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectorDataset {
    pub z: Tensor,
    pub y: Tensor,
}

impl SelectorDataset {
    pub fn new(z: Tensor, y: Tensor) -> Result<Self> {
        if z.rank() != 2 || y.rank() != 2 || z.rows() != y.rows() {
            return shape_err(format!("dataset z {:?} / y {:?}", z.dims(), y.dims()));
        }
        for r in 0..y.rows() {
            LabelVector::from_values(y.row(r).to_vec())?;
        }
        Ok(SelectorDataset { z, y })
    }

    pub fn from_samples(samples: &[(Vec<f32>, LabelVector)]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Argument("empty dataset".into()))?;
        let (d, k) = (first.0.len(), first.1.len());
        let mut z = Vec::with_capacity(samples.len() * d);
        let mut y = Vec::with_capacity(samples.len() * k);
        for (zi, yi) in samples {
            if zi.len() != d || yi.len() != k {
                return shape_err("ragged dataset");
            }
            z.extend_from_slice(zi);
            y.extend_from_slice(&yi.y);
        }
        Self::new(Tensor::new(&[samples.len(), d], z)?, Tensor::new(&[samples.len(), k], y)?)
    }

    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.z.cols()
    }

    pub fn choices(&self) -> usize {
        self.y.cols()
    }

    pub fn label(&self, i: usize) -> LabelVector {
        LabelVector {
            y: self.y.row(i).to_vec(),
            tie_broken: false,
        }
    }

    fn subset(&self, idx: &[usize]) -> Result<SelectorDataset> {
        let mut z = Vec::with_capacity(idx.len() * self.input_dim());
        let mut y = Vec::with_capacity(idx.len() * self.choices());
        for &i in idx {
            z.extend_from_slice(self.z.row(i));
            y.extend_from_slice(self.y.row(i));
        }
        Ok(SelectorDataset {
            z: Tensor::new(&[idx.len(), self.input_dim()], z)?,
            y: Tensor::new(&[idx.len(), self.choices()], y)?,
        })
    }
}

/// Mean loss and mean gradients over a batch, via matrix products.
pub fn batch_gradients(mlp: &SelectorMlp, batch: &SelectorDataset) -> Result<(f32, SelectorMlp)> {
    if batch.input_dim() != mlp.input_dim() || batch.choices() != mlp.choices() {
        return shape_err("batch does not match selector shape");
    }
    let b = batch.len();
    let (hid, k) = (mlp.hidden(), mlp.choices());
    let fwd = |x: &Tensor, w: &Tensor, bias: &Tensor| -> Result<Tensor> {
        matmul_transposed(x, w)?.add_row_vector(bias)
    };
    let a1 = fwd(&batch.z, &mlp.w1, &mlp.b1)?;
    let h1 = a1.map(|v| v.max(0.0));
    let a2 = fwd(&h1, &mlp.w2, &mlp.b2)?;
    let h2 = a2.map(|v| v.max(0.0));
    let a3 = fwd(&h2, &mlp.w3, &mlp.b3)?;
    let yhat = a3.map(sigmoid);
    let mut loss = 0.0f64;
    let scale = 1.0 / (k as f32 * b as f32);
    let mut d3 = vec![0.0f32; b * k];
    for ((d, &q), &t) in d3.iter_mut().zip(yhat.data()).zip(batch.y.data()) {
        loss += (q as f64 - t as f64).abs();
        *d = sign(q - t) * scale * q * (1.0 - q);
    }
    let loss = (loss / (b * k) as f64) as f32;

    // dW = Δᵀ·X, dX = Δ·W masked by the ReLU pattern
    let grad_w = |delta: &[f32], width: usize, x: &Tensor| -> Result<Tensor> {
        let mut out = vec![0.0; width * x.cols()];
        gemm(MatRef::dense(delta, b, width).t(), MatRef::of(x), 0.0, &mut out);
        Tensor::new(&[width, x.cols()], out)
    };
    let col_sum = |delta: &[f32], width: usize| -> Result<Tensor> {
        let mut out = vec![0.0f32; width];
        for row in delta.chunks_exact(width) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        Tensor::new(&[width], out)
    };
    let back = |delta: &[f32], width: usize, w: &Tensor, pre: &Tensor| -> Vec<f32> {
        let mut out = vec![0.0; b * w.cols()];
        gemm(MatRef::dense(delta, b, width), MatRef::of(w), 0.0, &mut out);
        out.iter_mut()
            .zip(pre.data())
            .for_each(|(g, &a)| if a <= 0.0 { *g = 0.0 });
        out
    };
    let d2 = back(&d3, k, &mlp.w3, &a2);
    let d1 = back(&d2, hid, &mlp.w2, &a1);
    let grads = SelectorMlp {
        w1: grad_w(&d1, hid, &batch.z)?,
        b1: col_sum(&d1, hid)?,
        w2: grad_w(&d2, hid, &h1)?,
        b2: col_sum(&d2, hid)?,
        w3: grad_w(&d3, k, &h2)?,
        b3: col_sum(&d3, k)?,
    };
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub epochs: usize,
    pub seed: u64,
    /// `None` for full-batch descent.
    pub batch_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: DEFAULT_LR,
            epochs: 100,
            seed: 0,
            batch_size: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub mlp: SelectorMlp,
    /// Mean minibatch loss of each epoch.
    pub loss_curve: Vec<f32>,
}

/// Plain gradient descent on the mean similarity loss.
pub fn train_selector(dataset: &SelectorDataset, mlp: &SelectorMlp, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Argument("empty dataset".into()));
    }
    let mut mlp = mlp.clone();
    let mut rng = SeededRng::new(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let batch = cfg.batch_size.unwrap_or(dataset.len()).clamp(1, dataset.len());
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        if batch < dataset.len() {
            // Fisher-Yates
            for i in (1..order.len()).rev() {
                order.swap(i, rng.below(i + 1));
            }
        }
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(batch) {
            let (loss, grads) = if chunk.len() == dataset.len() {
                batch_gradients(&mlp, dataset)?
            } else {
                batch_gradients(&mlp, &dataset.subset(chunk)?)?
            };
            epoch_loss += loss as f64 * chunk.len() as f64;
            for (p, g) in mlp.tensors_mut().into_iter().zip(grads.tensors()) {
                p.data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(v, d)| *v -= cfg.lr * d);
            }
        }
        loss_curve.push((epoch_loss / dataset.len() as f64) as f32);
    }
    Ok(TrainOutcome { mlp, loss_curve })
}

/// Mean similarity loss over every sample.
pub fn dataset_loss(mlp: &SelectorMlp, data: &SelectorDataset) -> Result<f32> {
    let logits = matmul_transposed(&hidden_features(mlp, &data.z)?, &mlp.w3)?.add_row_vector(&mlp.b3)?;
    let total: f64 = logits
        .data()
        .iter()
        .zip(data.y.data())
        .map(|(&a, &y)| (sigmoid(a) as f64 - y as f64).abs())
        .sum();
    Ok((total / logits.len() as f64) as f32)
}

/// Second hidden layer activations for each row of `z`.
pub fn hidden_features(mlp: &SelectorMlp, z: &Tensor) -> Result<Tensor> {
    let h1 = matmul_transposed(z, &mlp.w1)?.add_row_vector(&mlp.b1)?.map(|v| v.max(0.0));
    Ok(matmul_transposed(&h1, &mlp.w2)?.add_row_vector(&mlp.b2)?.map(|v| v.max(0.0)))
}

/// Fraction of samples whose selector argmax equals the label.
pub fn selection_accuracy(mlp: &SelectorMlp, data: &SelectorDataset) -> Result<f64> {
    let mut hits = 0usize;
    for i in 0..data.len() {
        let decision = select_layer(data.z.row(i), mlp)?;
        if decision.chosen_k == data.label(i).k() {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Linearly separable selection problem: the label is the argmax of `A·z`.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub projection: Tensor,
}

impl SyntheticTask {
    pub fn new(input: usize, choices: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed);
        let mut projection = Tensor::from_fn(&[choices, input], |_| rng.normal() as f32);
        // unit rows keep the classes balanced under isotropic z
        let cols = projection.cols();
        for row in projection.data_mut().chunks_exact_mut(cols) {
            let norm = row.iter().map(|&v| v * v).sum::<f32>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        SyntheticTask { projection }
    }

    pub fn label(&self, z: &[f32]) -> LabelVector {
        let scores: Vec<f64> = (0..self.projection.rows())
            .map(|r| {
                self.projection
                    .row(r)
                    .iter()
                    .zip(z)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum()
            })
            .collect();
        let (best, _) = argmax_first(&scores);
        LabelVector::one_hot(best + 1, scores.len())
    }

    pub fn sample(&self, n: usize, seed: u64) -> SelectorDataset {
        let mut rng = SeededRng::new(seed);
        let d = self.projection.cols();
        let samples: Vec<(Vec<f32>, LabelVector)> = (0..n)
            .map(|_| {
                let z: Vec<f32> = (0..d).map(|_| rng.normal() as f32).collect();
                let y = self.label(&z);
                (z, y)
            })
            .collect();
        SelectorDataset::from_samples(&samples).expect("well-formed synthetic samples")
    }
}

/// End-to-end learnability run on a [`SyntheticTask`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub input: usize,
    pub hidden: usize,
    pub choices: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
    /// Multipliers on the `±1/sqrt(fan_in)` bound of the two hidden layers.
    pub hidden_gains: [f32; 2],
    /// Logit gap used by [`SelectorMlp::warm_start_head`].
    pub head_separation: f32,
    pub train: TrainConfig,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let he = 6f32.sqrt();
        SyntheticConfig {
            input: 16,
            hidden: 160,
            choices: 4,
            train_samples: 2000,
            test_samples: 500,
            seed: 0,
            hidden_gains: [0.1 * he, 0.3 * he],
            head_separation: 4.0,
            train: TrainConfig {
                lr: 0.2,
                epochs: 500,
                seed: 0,
                batch_size: Some(50),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub loss_curve: Vec<f32>,
    /// Largest epoch-to-epoch increase of the loss curve (negative if strictly decreasing).
    pub max_loss_increase: f32,
}

pub fn run_synthetic(cfg: &SyntheticConfig) -> Result<(SelectorMlp, SyntheticReport)> {
    let task = SyntheticTask::new(cfg.input, cfg.choices, cfg.seed);
    let train = task.sample(cfg.train_samples, cfg.seed.wrapping_add(1));
    let test = task.sample(cfg.test_samples, cfg.seed.wrapping_add(2));
    let mut rng = SeededRng::new(cfg.seed.wrapping_add(3));
    let [g1, g2] = cfg.hidden_gains;
    let mut mlp = SelectorMlp::init_with_gains(cfg.input, cfg.hidden, cfg.choices, [g1, g2, 1.0], &mut rng);
    mlp.warm_start_head(&train, cfg.head_separation)?;
    let out = train_selector(&train, &mlp, &cfg.train)?;
    let max_loss_increase = out
        .loss_curve
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f32::NEG_INFINITY, f32::max);
    let report = SyntheticReport {
        train_accuracy: selection_accuracy(&out.mlp, &train)?,
        test_accuracy: selection_accuracy(&out.mlp, &test)?,
        loss_curve: out.loss_curve,
        max_loss_increase,
    };
    Ok((out.mlp, report))
}

/// Double-precision copy of the selector parameters, flattened.
#[derive(Clone, Debug)]
pub struct ShadowMlp {
    parts: [Vec<f64>; 6],
    input: usize,
    hidden: usize,
    choices: usize,
}

impl ShadowMlp {
    pub fn from_mlp(mlp: &SelectorMlp) -> Self {
        let parts = mlp.tensors().map(|t| t.data().iter().map(|&v| v as f64).collect());
        ShadowMlp {
            parts,
            input: mlp.input_dim(),
            hidden: mlp.hidden(),
            choices: mlp.choices(),
        }
    }

    fn view(&self) -> Params<'_, f64> {
        Params {
            w1: &self.parts[0],
            b1: &self.parts[1],
            w2: &self.parts[2],
            b2: &self.parts[3],
            w3: &self.parts[4],
            b3: &self.parts[5],
            input: self.input,
            hidden: self.hidden,
            choices: self.choices,
        }
    }

    pub fn loss(&self, z: &[f64], y: &[f64]) -> f64 {
        loss_of(&forward(&self.view(), z).yhat, y)
    }

    pub fn gradients(&self, z: &[f64], y: &[f64]) -> Gradients<f64> {
        backprop(&self.view(), z, y).1
    }

    /// Signs of every ReLU input and of every `ŷ − y`; the loss is smooth
    /// between two parameter settings that share this pattern.
    fn kink_pattern(&self, z: &[f64], y: &[f64]) -> Vec<i8> {
        let act = forward(&self.view(), z);
        let s = |v: f64| (v > 0.0) as i8 - (v < 0.0) as i8;
        act.a1
            .iter()
            .chain(&act.a2)
            .map(|&v| s(v))
            .chain(act.yhat.iter().zip(y).map(|(&q, &t)| s(q - t)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub points: usize,
    pub input: usize,
    pub hidden: usize,
    pub choices: usize,
    pub step: f64,
    /// Coordinates sampled per parameter tensor at each point; the first
    /// point always checks every coordinate.
    pub coords_per_tensor: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 0,
            points: 100,
            input: 16,
            hidden: 160,
            choices: 4,
            step: 1e-3,
            coords_per_tensor: 24,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckReport {
    pub points: usize,
    pub checked: usize,
    /// Coordinates whose ±step probe crossed a ReLU or |·| kink.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    /// Largest disagreement between the single-precision batched gradients
    /// and the double-precision analytic ones.
    pub max_f32_rel_error: f64,
}

fn rel_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-12 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Compares hand-derived gradients against central differences at random points.
pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(cfg.seed);
    let mut report = GradCheckReport {
        points: cfg.points,
        checked: 0,
        skipped_kinks: 0,
        max_rel_error: 0.0,
        max_f32_rel_error: 0.0,
    };
    for point in 0..cfg.points {
        let mut mlp = SelectorMlp::init(cfg.input, cfg.hidden, cfg.choices, &mut rng);
        for b in [&mut mlp.b1, &mut mlp.b2, &mut mlp.b3] {
            b.data_mut().iter_mut().for_each(|v| *v = rng.uniform_f32(-0.3, 0.3));
        }
        let z: Vec<f32> = (0..cfg.input).map(|_| rng.normal() as f32).collect();
        let label = LabelVector::one_hot(rng.below(cfg.choices) + 1, cfg.choices);
        let z64: Vec<f64> = z.iter().map(|&v| v as f64).collect();
        let y64: Vec<f64> = label.y.iter().map(|&v| v as f64).collect();

        let shadow = ShadowMlp::from_mlp(&mlp);
        let analytic = shadow.gradients(&z64, &y64);
        let base_pattern = shadow.kink_pattern(&z64, &y64);

        let single = SelectorDataset::new(
            Tensor::new(&[1, cfg.input], z.clone())?,
            Tensor::new(&[1, cfg.choices], label.y.clone())?,
        )?;
        let (_, batched) = batch_gradients(&mlp, &single)?;
        for (g32, g64) in batched.tensors().iter().zip(analytic.parts()) {
            for (&a, &b) in g32.data().iter().zip(g64) {
                // absolute floor for entries that are tiny in single precision
                let err = (a as f64 - b).abs() / b.abs().max(1e-6);
                report.max_f32_rel_error = report.max_f32_rel_error.max(err);
            }
        }

        for part in 0..6 {
            let len = shadow.parts[part].len();
            let coords: Vec<usize> = if point == 0 || len <= cfg.coords_per_tensor {
                (0..len).collect()
            } else {
                (0..cfg.coords_per_tensor).map(|_| rng.below(len)).collect()
            };
            for i in coords {
                let mut plus = shadow.clone();
                plus.parts[part][i] += cfg.step;
                let mut minus = shadow.clone();
                minus.parts[part][i] -= cfg.step;
                if plus.kink_pattern(&z64, &y64) != base_pattern
                    || minus.kink_pattern(&z64, &y64) != base_pattern
                {
                    report.skipped_kinks += 1;
                    continue;
                }
                let numeric = (plus.loss(&z64, &y64) - minus.loss(&z64, &y64)) / (2.0 * cfg.step);
                let err = rel_error(analytic.parts()[part][i], numeric);
                report.max_rel_error = report.max_rel_error.max(err);
                report.checked += 1;
            }
        }
    }
    Ok(report)
}

/// Summary of one selector training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainReport {
    pub samples: usize,
    pub input_dim: usize,
    pub choices: usize,
    pub epochs: usize,
    pub lr: f32,
    pub initial_loss: f32,
    pub final_loss: f32,
    pub train_accuracy: f64,
}

impl TrainReport {
    pub fn new(data: &SelectorDataset, cfg: &TrainConfig, before: &SelectorMlp, after: &SelectorMlp) -> Result<Self> {
        Ok(TrainReport {
            samples: data.len(),
            input_dim: data.input_dim(),
            choices: data.choices(),
            epochs: cfg.epochs,
            lr: cfg.lr,
            initial_loss: dataset_loss(before, data)?,
            final_loss: dataset_loss(after, data)?,
            train_accuracy: selection_accuracy(after, data)?,
        })
    }
}
