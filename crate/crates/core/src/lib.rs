//! Semi-supervised multimodal emotion recognition on pre-extracted features.
//!
//! The crate covers the whole pipeline: feature files and manifests
//! ([`dataset`]), the modality-dropout attention fusion network ([`fusion`]),
//! Adam training ([`training`]), weighted-F1 evaluation with fold ensembling
//! ([`evaluation`]), pseudo-label self-training ([`selftrain`]), a frozen
//! dual encoder with deep prompt tuning ([`prompt`]) and the LLM-ranking text
//! augmentation client ([`text_augment`]).

pub mod checkpoint;
pub mod dataset;
pub mod evaluation;
pub mod fusion;
pub mod numerics;
pub mod prompt;
pub mod rng;
pub mod selftrain;
pub mod text_augment;
pub mod training;

pub use dataset::{Dataset, FrameFeatures, Modality, Sample, LABEL_NAMES, NUM_CLASSES};
pub use evaluation::{cross_validate, ensemble_predict, waf, CvOptions, EvalReport};
pub use fusion::{FusionConfig, FusionParams, ModalityEmbeddings};
pub use numerics::{Matrix, Scalar};
pub use training::{train_fold, FoldModel, PooledSample, TrainConfig};
