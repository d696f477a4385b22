//! The fusion network: per-modality projection, modality dropout, additive
//! attention over the four modality slots and a linear classifier head.
//!
//! ```text
//! e_S, e_I, e_T, e_V ──(modality dropout: e_m ← 0 with prob p1, train only)
//!   └─ h_m = tanh(W_m e_m + b_m)
//!        └─ s_m = u · tanh(W_a h_m + b_a),  α = softmax(s)
//!             └─ f = Σ α_m h_m ──(element dropout, train only)── logits = W_c f + b_c
//! ```
//!
//! A missing modality is fed as the zero vector, exactly like a dropped one,
//! so the dropout path and the missing-data path are the same computation.

use rand::RngExt;
use rand_pcg::Pcg32;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::TensorContainer;
use crate::dataset::{DatasetError, Modality, NUM_CLASSES};
use crate::numerics::{self, cast_vec, dot, Linear, Matrix, NumericsError, Scalar};

pub const NUM_SLOTS: usize = 4;

/// Maximum number of mask redraws when every present modality was dropped.
pub const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("sample has no modality embeddings")]
    NoModalities,
    #[error("modality {modality}: expected embedding of width {expected}, got {got}")]
    DimMismatch {
        modality: Modality,
        expected: usize,
        got: usize,
    },
    #[error("{name} must lie in [0, 1), got {value}")]
    InvalidRate { name: &'static str, value: f64 },
    #[error("forward cache does not match the parameters")]
    CacheMismatch,
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, FusionError>;

/// Pooled sentence-level embeddings, one optional slot per modality.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModalityEmbeddings<T = f32> {
    slots: [Option<Vec<T>>; NUM_SLOTS],
}

impl<T: Scalar> ModalityEmbeddings<T> {
    pub fn new() -> Self {
        Self {
            slots: [None, None, None, None],
        }
    }

    pub fn with(mut self, modality: Modality, embedding: Vec<T>) -> Self {
        self.slots[modality.index()] = Some(embedding);
        self
    }

    pub fn set(&mut self, modality: Modality, embedding: Option<Vec<T>>) {
        self.slots[modality.index()] = embedding;
    }

    pub fn get(&self, modality: Modality) -> Option<&[T]> {
        self.slots[modality.index()].as_deref()
    }

    pub fn present(&self) -> [bool; NUM_SLOTS] {
        std::array::from_fn(|i| self.slots[i].is_some())
    }

    pub fn count_present(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    /// Replaces modality `m`'s embedding with the zero vector of the same width.
    pub fn zeroed(mut self, modality: Modality) -> Self {
        if let Some(v) = &mut self.slots[modality.index()] {
            v.iter_mut().for_each(|x| *x = T::zero());
        }
        self
    }

    pub fn cast<U: Scalar>(&self) -> ModalityEmbeddings<U> {
        ModalityEmbeddings {
            slots: std::array::from_fn(|i| self.slots[i].as_ref().map(|v| cast_vec(v))),
        }
    }

    pub fn map_slots(&self, mut f: impl FnMut(Modality, &[T]) -> Vec<T>) -> Self {
        let mut out = Self::new();
        for m in Modality::ALL {
            if let Some(v) = self.get(m) {
                out.set(m, Some(f(m, v)));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Pooled embedding width per slot in `S, I, T, V` order; 0 marks an unused slot.
    pub input_dims: [usize; NUM_SLOTS],
    pub hidden: usize,
    /// Scale surviving embeddings by `1/(1-p1)` after modality dropout.
    #[serde(default)]
    pub rescale_survivors: bool,
    /// Redraw the modality mask when every present modality was dropped.
    #[serde(default = "default_true")]
    pub redraw_all_dropped: bool,
}

fn default_true() -> bool {
    true
}

impl FusionConfig {
    pub fn new(input_dims: [usize; NUM_SLOTS], hidden: usize) -> Self {
        Self {
            input_dims,
            hidden,
            rescale_survivors: false,
            redraw_all_dropped: true,
        }
    }
}

/// Trainable state of the fusion network. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T = f32> {
    /// `hidden × input_dims[m]` projection per slot.
    pub projections: [Linear<T>; NUM_SLOTS],
    /// `hidden × hidden` attention scorer.
    pub attention: Linear<T>,
    /// Attention context vector `u`.
    pub context: Vec<T>,
    /// `NUM_CLASSES × hidden` classifier head.
    pub classifier: Linear<T>,
}

/// Flat access to every trainable tensor, in a fixed order.
pub trait ParamSet<T> {
    fn slices(&self) -> Vec<&[T]>;
    fn slices_mut(&mut self) -> Vec<&mut [T]>;

    fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn flatten(&self) -> Vec<T>
    where
        T: Copy,
    {
        self.slices().concat()
    }

    fn assign_flat(&mut self, flat: &[T])
    where
        T: Copy,
    {
        let mut at = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[at..at + s.len()]);
            at += s.len();
        }
        assert_eq!(at, flat.len(), "flat parameter vector has the wrong length");
    }
}

/// Uniform Glorot initialisation `U(−a, a)`, `a = sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot<T: Scalar>(rng: &mut Pcg32, fan_in: usize, fan_out: usize, n: usize) -> Vec<T> {
    if fan_in + fan_out == 0 {
        return vec![T::zero(); n];
    }
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| T::of(rng.random_range(-a..=a))).collect()
}

pub(crate) fn glorot_linear<T: Scalar>(rng: &mut Pcg32, input: usize, output: usize) -> Linear<T> {
    Linear {
        weight: Matrix::new(output, input, glorot(rng, input, output, input * output)).expect("sized by construction"),
        bias: vec![T::zero(); output],
    }
}

impl<T: Scalar> FusionParams<T> {
    /// Glorot-uniform weights with zero biases, drawn in a fixed order.
    pub fn init(config: &FusionConfig, rng: &mut Pcg32) -> Self {
        let h = config.hidden;
        let projections = std::array::from_fn(|i| glorot_linear(rng, config.input_dims[i], h));
        let attention = glorot_linear(rng, h, h);
        let context = glorot(rng, h, 1, h);
        let classifier = glorot_linear(rng, h, NUM_CLASSES);
        Self {
            projections,
            attention,
            context,
            classifier,
        }
    }

    pub fn zeros(config: &FusionConfig) -> Self {
        let h = config.hidden;
        Self {
            projections: std::array::from_fn(|i| Linear::zeros(config.input_dims[i], h)),
            attention: Linear::zeros(h, h),
            context: vec![T::zero(); h],
            classifier: Linear::zeros(h, NUM_CLASSES),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.slices_mut() {
            s.iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    pub fn hidden(&self) -> usize {
        self.context.len()
    }

    pub fn input_dims(&self) -> [usize; NUM_SLOTS] {
        std::array::from_fn(|i| self.projections[i].input_dim())
    }

    pub fn cast<U: Scalar>(&self) -> FusionParams<U> {
        FusionParams {
            projections: std::array::from_fn(|i| self.projections[i].cast()),
            attention: self.attention.cast(),
            context: cast_vec(&self.context),
            classifier: self.classifier.cast(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| numerics::all_finite(s))
    }

    /// Scales every tensor in place.
    pub fn scale(&mut self, factor: T) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v = *v * factor);
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }
}

impl<T: Scalar> ParamSet<T> for FusionParams<T> {
    fn slices(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::with_capacity(13);
        for p in &self.projections {
            out.push(p.weight.data());
            out.push(&p.bias);
        }
        out.push(self.attention.weight.data());
        out.push(&self.attention.bias);
        out.push(&self.context);
        out.push(self.classifier.weight.data());
        out.push(&self.classifier.bias);
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::with_capacity(13);
        for p in &mut self.projections {
            out.push(p.weight.data_mut());
            out.push(&mut p.bias);
        }
        out.push(self.attention.weight.data_mut());
        out.push(&mut self.attention.bias);
        out.push(&mut self.context);
        out.push(self.classifier.weight.data_mut());
        out.push(&mut self.classifier.bias);
        out
    }
}

fn row(v: &[f32]) -> Matrix<f32> {
    Matrix::new(1, v.len(), v.to_vec()).expect("row vector")
}

impl FusionParams<f32> {
    /// Appends every tensor to `container` under `prefix`.
    pub fn write_tensors(&self, container: &mut TensorContainer, prefix: &str) {
        for (m, p) in Modality::ALL.iter().zip(&self.projections) {
            container.push(format!("{prefix}proj.{}.weight", m.code()), p.weight.clone());
            container.push(format!("{prefix}proj.{}.bias", m.code()), row(&p.bias));
        }
        container.push(format!("{prefix}attention.weight"), self.attention.weight.clone());
        container.push(format!("{prefix}attention.bias"), row(&self.attention.bias));
        container.push(format!("{prefix}attention.context"), row(&self.context));
        container.push(format!("{prefix}classifier.weight"), self.classifier.weight.clone());
        container.push(format!("{prefix}classifier.bias"), row(&self.classifier.bias));
    }

    /// Reads tensors written by [`Self::write_tensors`], checking them against `config`.
    pub fn read_tensors(container: &TensorContainer, prefix: &str, config: &FusionConfig) -> Result<Self> {
        let mut params = Self::zeros(config);
        let expected: Vec<(String, (usize, usize))> = {
            let mut names = Vec::new();
            for (m, p) in Modality::ALL.iter().zip(&params.projections) {
                names.push((format!("{prefix}proj.{}.weight", m.code()), p.weight.shape()));
                names.push((format!("{prefix}proj.{}.bias", m.code()), (1, p.bias.len())));
            }
            let h = config.hidden;
            names.push((format!("{prefix}attention.weight"), (h, h)));
            names.push((format!("{prefix}attention.bias"), (1, h)));
            names.push((format!("{prefix}attention.context"), (1, h)));
            names.push((format!("{prefix}classifier.weight"), (NUM_CLASSES, h)));
            names.push((format!("{prefix}classifier.bias"), (1, NUM_CLASSES)));
            names
        };
        for ((name, shape), slot) in expected.iter().zip(params.slices_mut()) {
            let t = container.get(name)?;
            if t.shape() != *shape {
                return Err(DatasetError::InvalidContainer(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                ))
                .into());
            }
            slot.copy_from_slice(t.data());
        }
        if !params.is_finite() {
            return Err(NumericsError::NonFinite { op: "read_tensors" }.into());
        }
        Ok(params)
    }
}

fn check_rate(name: &'static str, value: f64) -> Result<()> {
    if (0.0..1.0).contains(&value) {
        Ok(())
    } else {
        Err(FusionError::InvalidRate { name, value })
    }
}

/// One raw Bernoulli(`p1`) draw per present slot, in slot order. `true` = dropped.
pub fn sample_drop_mask(present: [bool; NUM_SLOTS], p1: f64, rng: &mut Pcg32) -> [bool; NUM_SLOTS] {
    let mut dropped = [false; NUM_SLOTS];
    for (d, &p) in dropped.iter_mut().zip(&present) {
        if p {
            *d = rng.random::<f64>() < p1;
        }
    }
    dropped
}

/// Draws a modality-dropout mask. With `redraw_all_dropped`, a mask that drops
/// every present modality is redrawn up to [`MAX_REDRAWS`] times, after which
/// all modalities are kept.
pub fn draw_dropout_mask(
    present: [bool; NUM_SLOTS],
    p1: f64,
    redraw_all_dropped: bool,
    rng: &mut Pcg32,
) -> Result<[bool; NUM_SLOTS]> {
    check_rate("modality dropout", p1)?;
    if p1 == 0.0 || !present.iter().any(|&p| p) {
        return Ok([false; NUM_SLOTS]);
    }
    let all_dropped = |d: &[bool; NUM_SLOTS]| present.iter().zip(d).all(|(&p, &d)| !p || d);
    let mut mask = sample_drop_mask(present, p1, rng);
    if !redraw_all_dropped {
        return Ok(mask);
    }
    let mut redraws = 0;
    while all_dropped(&mask) {
        if redraws == MAX_REDRAWS {
            return Ok([false; NUM_SLOTS]);
        }
        mask = sample_drop_mask(present, p1, rng);
        redraws += 1;
    }
    Ok(mask)
}

/// Replaces each dropped slot's embedding by the zero vector.
pub fn apply_drop_mask<T: Scalar>(
    e: &ModalityEmbeddings<T>,
    dropped: [bool; NUM_SLOTS],
    rescale_by: Option<f64>,
) -> ModalityEmbeddings<T> {
    let mut out = e.clone();
    for m in Modality::ALL {
        if dropped[m.index()] {
            out = out.zeroed(m);
        } else if let (Some(scale), Some(v)) = (rescale_by, &mut out.slots[m.index()]) {
            let s = T::of(scale);
            v.iter_mut().for_each(|x| *x = *x * s);
        }
    }
    out
}

/// Modality dropout: each present embedding is independently replaced by zeros with probability `p1`.
pub fn modality_dropout<T: Scalar>(
    e: &ModalityEmbeddings<T>,
    p1: f64,
    config: &FusionConfig,
    rng: &mut Pcg32,
) -> Result<ModalityEmbeddings<T>> {
    let mask = draw_dropout_mask(e.present(), p1, config.redraw_all_dropped, rng)?;
    let rescale = (config.rescale_survivors && p1 > 0.0).then(|| 1.0 / (1.0 - p1));
    Ok(apply_drop_mask(e, mask, rescale))
}

/// `h_m = tanh(W_m e_m + b_m)`; a missing slot is fed as the zero vector.
pub fn project_modalities<T: Scalar>(
    e: &ModalityEmbeddings<T>,
    params: &FusionParams<T>,
) -> Result<[Vec<T>; NUM_SLOTS]> {
    let inputs = effective_inputs(e, params)?;
    project_inputs(&inputs, params)
}

fn effective_inputs<T: Scalar>(e: &ModalityEmbeddings<T>, params: &FusionParams<T>) -> Result<[Vec<T>; NUM_SLOTS]> {
    let mut out: [Vec<T>; NUM_SLOTS] = Default::default();
    for m in Modality::ALL {
        let expected = params.projections[m.index()].input_dim();
        out[m.index()] = match e.get(m) {
            Some(v) if v.len() != expected => {
                return Err(FusionError::DimMismatch {
                    modality: m,
                    expected,
                    got: v.len(),
                })
            }
            Some(v) => v.to_vec(),
            None => vec![T::zero(); expected],
        };
    }
    Ok(out)
}

fn project_inputs<T: Scalar>(inputs: &[Vec<T>; NUM_SLOTS], params: &FusionParams<T>) -> Result<[Vec<T>; NUM_SLOTS]> {
    let mut out: [Vec<T>; NUM_SLOTS] = Default::default();
    for (i, x) in inputs.iter().enumerate() {
        out[i] = params.projections[i].forward(x)?.into_iter().map(T::tanh).collect();
    }
    Ok(out)
}

/// Additive attention over the four slots: returns the fused vector, the
/// attention weights and the scorer activations `tanh(W_a h_m + b_a)`.
pub fn attention_fuse<T: Scalar>(
    hiddens: &[Vec<T>; NUM_SLOTS],
    attention: &Linear<T>,
    context: &[T],
) -> Result<(Vec<T>, [T; NUM_SLOTS], [Vec<T>; NUM_SLOTS])> {
    let h = context.len();
    let mut acts: [Vec<T>; NUM_SLOTS] = Default::default();
    let mut scores = [T::zero(); NUM_SLOTS];
    for i in 0..NUM_SLOTS {
        if hiddens[i].len() != h {
            return Err(NumericsError::LengthMismatch {
                op: "attention_fuse",
                expected: h,
                got: hiddens[i].len(),
            }
            .into());
        }
        acts[i] = attention.forward(&hiddens[i])?.into_iter().map(T::tanh).collect();
        scores[i] = dot(context, &acts[i]);
    }
    let alpha_v = numerics::softmax(&scores, T::one())?;
    let alpha: [T; NUM_SLOTS] = std::array::from_fn(|i| alpha_v[i]);
    let mut fused = vec![T::zero(); h];
    for (hm, &a) in hiddens.iter().zip(&alpha) {
        for (f, &x) in fused.iter_mut().zip(hm) {
            *f = *f + a * x;
        }
    }
    Ok((fused, alpha, acts))
}

/// Activations retained by a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct FusionCache<T = f32> {
    pub inputs: [Vec<T>; NUM_SLOTS],
    pub hiddens: [Vec<T>; NUM_SLOTS],
    pub scorer: [Vec<T>; NUM_SLOTS],
    pub alpha: [T; NUM_SLOTS],
    pub fused: Vec<T>,
    /// Per-element multiplier of the element dropout (0 or `1/(1-rate)`).
    pub element_scale: Option<Vec<T>>,
    pub classifier_input: Vec<T>,
    pub dropped: [bool; NUM_SLOTS],
    pub logits: Vec<T>,
}

/// Train-mode randomness and rates.
pub struct TrainMode<'a> {
    pub modality_dropout: f64,
    pub dropout_rate: f64,
    pub modality_rng: &'a mut Pcg32,
    pub element_rng: &'a mut Pcg32,
}

pub enum Mode<'a> {
    Eval,
    Train(TrainMode<'a>),
}

/// The fusion network `g`: configuration plus parameters.
impl<T: Scalar> FusionParams<T> {
    /// Forward pass. Eval mode applies neither dropout and is deterministic.
    pub fn forward(&self, e: &ModalityEmbeddings<T>, config: &FusionConfig, mode: Mode<'_>) -> Result<FusionCache<T>> {
        match mode {
            Mode::Eval => self.forward_masked(e, [false; NUM_SLOTS], None, None),
            Mode::Train(t) => {
                check_rate("dropout rate", t.dropout_rate)?;
                let dropped = draw_dropout_mask(
                    e.present(),
                    t.modality_dropout,
                    config.redraw_all_dropped,
                    t.modality_rng,
                )?;
                let rescale =
                    (config.rescale_survivors && t.modality_dropout > 0.0).then(|| 1.0 / (1.0 - t.modality_dropout));
                let element = (t.dropout_rate > 0.0).then(|| {
                    let keep = 1.0 - t.dropout_rate;
                    let scale = T::of(1.0 / keep);
                    (0..self.hidden())
                        .map(|_| {
                            if t.element_rng.random::<f64>() < keep {
                                scale
                            } else {
                                T::zero()
                            }
                        })
                        .collect()
                });
                self.forward_masked(e, dropped, rescale, element)
            }
        }
    }

    /// Forward pass with explicit masks; the building block of both modes.
    pub fn forward_masked(
        &self,
        e: &ModalityEmbeddings<T>,
        dropped: [bool; NUM_SLOTS],
        rescale_survivors: Option<f64>,
        element_scale: Option<Vec<T>>,
    ) -> Result<FusionCache<T>> {
        if e.count_present() == 0 {
            return Err(FusionError::NoModalities);
        }
        let e = apply_drop_mask(e, dropped, rescale_survivors);
        let inputs = effective_inputs(&e, self)?;
        let hiddens = project_inputs(&inputs, self)?;
        let (fused, alpha, scorer) = attention_fuse(&hiddens, &self.attention, &self.context)?;
        let classifier_input = match &element_scale {
            Some(s) if s.len() == fused.len() => fused.iter().zip(s).map(|(&f, &k)| f * k).collect(),
            Some(_) => return Err(FusionError::CacheMismatch),
            None => fused.clone(),
        };
        let logits = self.classifier.forward(&classifier_input)?;
        if !numerics::all_finite(&logits) {
            return Err(NumericsError::NonFinite { op: "fusion_forward" }.into());
        }
        Ok(FusionCache {
            inputs,
            hiddens,
            scorer,
            alpha,
            fused,
            element_scale,
            classifier_input,
            dropped,
            logits,
        })
    }

    /// Eval-mode logits.
    pub fn logits(&self, e: &ModalityEmbeddings<T>) -> Result<Vec<T>> {
        Ok(self.forward_masked(e, [false; NUM_SLOTS], None, None)?.logits)
    }

    /// Gradients of the loss w.r.t. every parameter, given `dL/dlogits`.
    pub fn backward(&self, cache: &FusionCache<T>, grad_logits: &[T]) -> Result<FusionParams<T>> {
        let mut grads = self.zeros_like();
        self.backward_into(cache, grad_logits, &mut grads)?;
        Ok(grads)
    }

    /// Accumulating form of [`Self::backward`].
    pub fn backward_into(&self, cache: &FusionCache<T>, grad_logits: &[T], grads: &mut FusionParams<T>) -> Result<()> {
        let h = self.hidden();
        if grad_logits.len() != NUM_CLASSES || cache.fused.len() != h || cache.classifier_input.len() != h {
            return Err(FusionError::CacheMismatch);
        }
        for i in 0..NUM_SLOTS {
            if cache.inputs[i].len() != self.projections[i].input_dim() || cache.hiddens[i].len() != h {
                return Err(FusionError::CacheMismatch);
            }
        }

        let d_cls_in = self
            .classifier
            .backward(&cache.classifier_input, grad_logits, &mut grads.classifier)?;
        let d_fused: Vec<T> = match &cache.element_scale {
            Some(s) => d_cls_in.iter().zip(s).map(|(&g, &k)| g * k).collect(),
            None => d_cls_in,
        };

        // fused = Σ α_m h_m
        let mut d_hidden: [Vec<T>; NUM_SLOTS] =
            std::array::from_fn(|i| d_fused.iter().map(|&g| g * cache.alpha[i]).collect());
        let d_alpha: Vec<T> = cache.hiddens.iter().map(|hm| dot(&d_fused, hm)).collect();
        let d_scores = numerics::softmax_backward(&cache.alpha, &d_alpha);

        // s_m = u · tanh(W_a h_m + b_a)
        for i in 0..NUM_SLOTS {
            let act = &cache.scorer[i];
            for (gu, &a) in grads.context.iter_mut().zip(act) {
                *gu = *gu + d_scores[i] * a;
            }
            let d_pre: Vec<T> = self
                .context
                .iter()
                .zip(act)
                .map(|(&u, &a)| d_scores[i] * u * (T::one() - a * a))
                .collect();
            let d_h = self
                .attention
                .backward(&cache.hiddens[i], &d_pre, &mut grads.attention)?;
            for (acc, g) in d_hidden[i].iter_mut().zip(d_h) {
                *acc = *acc + g;
            }
        }

        // h_m = tanh(W_m e_m + b_m)
        for i in 0..NUM_SLOTS {
            let d_pre: Vec<T> = d_hidden[i]
                .iter()
                .zip(&cache.hiddens[i])
                .map(|(&g, &hv)| g * (T::one() - hv * hv))
                .collect();
            self.projections[i].backward(&cache.inputs[i], &d_pre, &mut grads.projections[i])?;
        }
        Ok(())
    }
}
