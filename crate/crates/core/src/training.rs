//! Supervised training of the fusion network with Adam.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::TensorContainer;
use crate::dataset::{temporal_pool, DatasetError, Modality, Sample, NUM_CLASSES};
use crate::evaluation::{waf, EvalError};
use crate::fusion::{
    FusionConfig, FusionError, FusionParams, ModalityEmbeddings, Mode, ParamSet, TrainMode, NUM_SLOTS,
};
use crate::numerics::{self, NumericsError, Scalar};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("sample {0:?} has no label")]
    MissingLabel(String),
    #[error("non-finite training loss in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("non-finite gradient in parameter tensor {tensor} at Adam step {step}")]
    NonFiniteGradient { tensor: usize, step: u64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub modality_dropout: f64,
    pub hidden: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Standardise each pooled dimension with statistics of the training split.
    pub standardize: bool,
    pub rescale_survivors: bool,
    pub redraw_all_dropped: bool,
    /// Also evaluate WAF on the training split after every epoch.
    pub record_train_waf: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 3e-4,
            dropout_rate: 0.3,
            modality_dropout: 0.3,
            hidden: 64,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            standardize: false,
            rescale_survivors: false,
            redraw_all_dropped: true,
            record_train_waf: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.hidden == 0 {
            return bad("hidden must be >= 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and >= 0");
        }
        for (name, r) in [
            ("dropout_rate", self.dropout_rate),
            ("modality_dropout", self.modality_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(TrainError::InvalidConfig(format!("{name} must lie in [0, 1)")));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::InvalidConfig(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be > 0");
        }
        Ok(())
    }

    pub fn fusion_config(&self, input_dims: [usize; NUM_SLOTS]) -> FusionConfig {
        FusionConfig {
            input_dims,
            hidden: self.hidden,
            rescale_survivors: self.rescale_survivors,
            redraw_all_dropped: self.redraw_all_dropped,
        }
    }
}

/// A sample reduced to pooled sentence-level embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledSample {
    pub id: String,
    pub label: Option<usize>,
    pub hidden_label: Option<usize>,
    pub embeddings: ModalityEmbeddings<f32>,
}

impl PooledSample {
    pub fn from_sample(sample: &Sample) -> Self {
        let mut embeddings = ModalityEmbeddings::new();
        for (m, f) in &sample.features {
            embeddings.set(*m, Some(temporal_pool(f)));
        }
        Self {
            id: sample.id.clone(),
            label: sample.label,
            hidden_label: sample.hidden_label,
            embeddings,
        }
    }

    fn require_label(&self) -> Result<usize> {
        self.label.ok_or_else(|| TrainError::MissingLabel(self.id.clone()))
    }
}

pub fn pool_all(samples: &[Sample]) -> Vec<PooledSample> {
    samples.iter().map(PooledSample::from_sample).collect()
}

/// Per-slot, per-dimension standardisation statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: [Vec<f32>; NUM_SLOTS],
    pub std: [Vec<f32>; NUM_SLOTS],
}

impl Normalizer {
    pub fn fit(samples: &[PooledSample], dims: [usize; NUM_SLOTS]) -> Self {
        let mut mean: [Vec<f32>; NUM_SLOTS] = Default::default();
        let mut std: [Vec<f32>; NUM_SLOTS] = Default::default();
        for m in Modality::ALL {
            let i = m.index();
            let rows: Vec<&[f32]> = samples.iter().filter_map(|s| s.embeddings.get(m)).collect();
            let n = rows.len().max(1) as f64;
            let mut mu = vec![0.0f64; dims[i]];
            for r in &rows {
                for (a, &v) in mu.iter_mut().zip(*r) {
                    *a += v as f64 / n;
                }
            }
            let mut var = vec![0.0f64; dims[i]];
            for r in &rows {
                for ((a, &v), &u) in var.iter_mut().zip(*r).zip(&mu) {
                    *a += (v as f64 - u).powi(2) / n;
                }
            }
            mean[i] = mu.iter().map(|&v| v as f32).collect();
            // a constant dimension is centred but not scaled
            std[i] = var
                .iter()
                .map(|&v| if v > 1e-12 { v.sqrt() as f32 } else { 1.0 })
                .collect();
        }
        Self { mean, std }
    }

    pub fn apply(&self, e: &ModalityEmbeddings<f32>) -> ModalityEmbeddings<f32> {
        e.map_slots(|m, v| {
            let i = m.index();
            v.iter()
                .zip(&self.mean[i])
                .zip(&self.std[i])
                .map(|((&x, &mu), &sd)| (x - mu) / sd)
                .collect()
        })
    }
}

/// A trained fusion network plus the preprocessing it expects.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldModel {
    pub fusion: FusionConfig,
    pub params: FusionParams<f32>,
    pub normalizer: Option<Normalizer>,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    fusion: FusionConfig,
    standardized: bool,
}

impl FoldModel {
    fn prepare(&self, e: &ModalityEmbeddings<f32>) -> ModalityEmbeddings<f32> {
        match &self.normalizer {
            Some(n) => n.apply(e),
            None => e.clone(),
        }
    }

    pub fn logits(&self, e: &ModalityEmbeddings<f32>) -> Result<Vec<f32>> {
        Ok(self.params.logits(&self.prepare(e))?)
    }

    pub fn to_container(&self) -> TensorContainer {
        let header = ModelHeader {
            fusion: self.fusion.clone(),
            standardized: self.normalizer.is_some(),
        };
        let mut c = TensorContainer::new(serde_json::to_string(&header).expect("header serializes"));
        self.params.write_tensors(&mut c, "");
        if let Some(n) = &self.normalizer {
            for m in Modality::ALL {
                let i = m.index();
                let row = |v: &Vec<f32>| numerics::Matrix::new(1, v.len(), v.clone()).expect("row");
                c.push(format!("norm.{}.mean", m.code()), row(&n.mean[i]));
                c.push(format!("norm.{}.std", m.code()), row(&n.std[i]));
            }
        }
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let header: ModelHeader = serde_json::from_str(&c.config)
            .map_err(|e| DatasetError::InvalidContainer(format!("model header: {e}")))?;
        let params = FusionParams::read_tensors(c, "", &header.fusion)?;
        let normalizer = if header.standardized {
            let mut mean: [Vec<f32>; NUM_SLOTS] = Default::default();
            let mut std: [Vec<f32>; NUM_SLOTS] = Default::default();
            for m in Modality::ALL {
                mean[m.index()] = c.get(&format!("norm.{}.mean", m.code()))?.data().to_vec();
                std[m.index()] = c.get(&format!("norm.{}.std", m.code()))?.data().to_vec();
            }
            Some(Normalizer { mean, std })
        } else {
            None
        };
        Ok(Self {
            fusion: header.fusion,
            params,
            normalizer,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        Ok(self.to_container().write(path)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&TensorContainer::read(path)?)
    }
}

/// Adam moments for any [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<P: ParamSet<T>>(params: &P) -> Self {
        let zeros: Vec<Vec<T>> = params.slices().iter().map(|s| vec![T::zero(); s.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Adam hyperparameters, split out so prompt tuning can reuse the optimizer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar, P: ParamSet<T>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<T>,
    config: AdamConfig,
) -> Result<()> {
    let grad_slices = grads.slices();
    for (i, g) in grad_slices.iter().enumerate() {
        if !numerics::all_finite(g) {
            return Err(TrainError::NonFiniteGradient {
                tensor: i,
                step: state.t + 1,
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::of(config.beta1), T::of(config.beta2));
    let c1 = T::of(1.0 - config.beta1.powi(t));
    let c2 = T::of(1.0 - config.beta2.powi(t));
    let lr = T::of(config.learning_rate);
    let eps = T::of(config.eps);
    for (((p, g), m), v) in params
        .slices_mut()
        .into_iter()
        .zip(grad_slices)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (T::one() - b1) * g[k];
            v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] = p[k] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_waf: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_waf: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: FoldModel,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_waf: f64,
}

/// Softmax of eval-mode logits, one row per sample.
pub fn predict_proba(model: &FoldModel, samples: &[PooledSample]) -> Result<Vec<[f32; NUM_CLASSES]>> {
    samples
        .iter()
        .map(|s| {
            let p = numerics::softmax(&model.logits(&s.embeddings)?, 1.0)?;
            Ok(std::array::from_fn(|i| p[i]))
        })
        .collect()
}

fn split_waf(model: &FoldModel, samples: &[PooledSample]) -> Result<f64> {
    let labels = samples
        .iter()
        .map(PooledSample::require_label)
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<usize> = predict_proba(model, samples)?
        .iter()
        .map(|p| numerics::argmax(p))
        .collect();
    Ok(waf(&preds, &labels)?.waf)
}

/// Trains one network on `train`, keeping the epoch with the best validation WAF
/// (ties resolve to the earlier epoch).
pub fn train_fold(
    train: &[PooledSample],
    val: &[PooledSample],
    config: &TrainConfig,
    input_dims: [usize; NUM_SLOTS],
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let labels = train
        .iter()
        .map(PooledSample::require_label)
        .collect::<Result<Vec<_>>>()?;
    val.iter()
        .map(PooledSample::require_label)
        .collect::<Result<Vec<_>>>()?;

    let fusion = config.fusion_config(input_dims);
    let normalizer = config.standardize.then(|| Normalizer::fit(train, input_dims));
    let inputs: Vec<ModalityEmbeddings<f32>> = train
        .iter()
        .map(|s| match &normalizer {
            Some(n) => n.apply(&s.embeddings),
            None => s.embeddings.clone(),
        })
        .collect();

    let mut model = FoldModel {
        params: FusionParams::init(&fusion, &mut stream(seed, Purpose::Init)),
        fusion,
        normalizer,
    };
    let mut shuffle_rng = stream(seed, Purpose::Shuffle);
    let mut modality_rng = stream(seed, Purpose::ModalityDropout);
    let mut element_rng = stream(seed, Purpose::ElementDropout);
    let mut adam = AdamState::new(&model.params);
    let adam_cfg = AdamConfig::from(config);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, FusionParams<f32>)> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            let mut grads = model.params.zeros_like();
            for &i in batch {
                let cache = model.params.forward(
                    &inputs[i],
                    &model.fusion,
                    Mode::Train(TrainMode {
                        modality_dropout: config.modality_dropout,
                        dropout_rate: config.dropout_rate,
                        modality_rng: &mut modality_rng,
                        element_rng: &mut element_rng,
                    }),
                )?;
                let (loss, dlogits) = numerics::cross_entropy(&cache.logits, labels[i])?;
                loss_sum += loss as f64;
                model.params.backward_into(&cache, &dlogits, &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f32);
            adam_step(&mut model.params, &grads, &mut adam, adam_cfg)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        let val_waf = split_waf(&model, val)?;
        let train_waf = if config.record_train_waf {
            Some(split_waf(&model, train)?)
        } else {
            None
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_waf,
            train_waf,
        });
        if best.as_ref().is_none_or(|(_, w, _)| val_waf > *w) {
            best = Some((epoch, val_waf, model.params.clone()));
        }
    }

    let (best_epoch, best_val_waf, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_waf,
    })
}

/// Mean cross-entropy of `samples` in eval mode.
pub fn mean_loss(model: &FoldModel, samples: &[PooledSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let (l, _) = numerics::cross_entropy(&model.logits(&s.embeddings)?, s.require_label()?)?;
        total += l as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}
