//! Class-conditional Gaussian surrogates for pre-extracted features.
//!
//! Frame `t` of a sample of class `c` in modality `m` is
//! `σ_m · μ_{c,m} + z + ε_t`, with `μ_{c,m} ~ N(0, I)` fixed per dataset,
//! `z ~ N(0, I)` shared by all frames of the sample and `ε_t ~ N(0, I)`.
//! `σ_m` (the modality's informativeness) sets how far apart the class
//! means are relative to the noise; `σ_m = 0` makes the modality useless.

use std::collections::BTreeMap;

use rand::RngExt;
use rand_distr::StandardNormal;
use rand_pcg::Pcg32;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetError, FrameFeatures, Modality, Sample, NUM_CLASSES};
use crate::numerics::Matrix;
use crate::rng::{derive_seed, stream, Purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Frame feature width `C` per modality; modalities absent here are not generated.
    pub dims: BTreeMap<Modality, usize>,
    pub frames: BTreeMap<Modality, usize>,
    pub informativeness: BTreeMap<Modality, f64>,
    pub labeled_per_class: usize,
    pub unlabeled_per_class: usize,
    /// Held-out labeled samples per class, drawn by [`gen_synthetic_test`].
    #[serde(default)]
    pub test_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    /// Builds a spec where every listed modality shares `dim` and `frames`.
    pub fn uniform(
        informativeness: &[(Modality, f64)],
        dim: usize,
        frames: usize,
        labeled_per_class: usize,
        unlabeled_per_class: usize,
    ) -> Self {
        Self {
            dims: informativeness.iter().map(|&(m, _)| (m, dim)).collect(),
            frames: informativeness.iter().map(|&(m, _)| (m, frames)).collect(),
            informativeness: informativeness.iter().copied().collect(),
            labeled_per_class,
            unlabeled_per_class,
            test_per_class: 0,
            seed: 0,
        }
    }

    /// A tiny four-modality spec for unit tests.
    pub fn small() -> Self {
        Self::uniform(
            &[
                (Modality::Speech, 1.0),
                (Modality::Image, 0.5),
                (Modality::Text, 0.3),
                (Modality::Video, 0.5),
            ],
            4,
            3,
            5,
            2,
        )
    }

    /// The benchmark spec for robustness comparisons: four equally informative
    /// modalities (σ = 1), `C = 8`, `T = 4`, 50 labeled and 50 held-out test
    /// samples per class.
    pub fn standard() -> Self {
        let mut spec = Self::uniform(
            &[
                (Modality::Speech, 1.0),
                (Modality::Image, 1.0),
                (Modality::Text, 1.0),
                (Modality::Video, 1.0),
            ],
            8,
            4,
            50,
            0,
        );
        spec.test_per_class = 50;
        spec
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if self.dims.is_empty() {
            return Err(DatasetError::InvalidSpec("no modalities".into()));
        }
        if self.labeled_per_class == 0 {
            return Err(DatasetError::InvalidSpec("labeled_per_class must be >= 1".into()));
        }
        for (m, &d) in &self.dims {
            if d == 0 {
                return Err(DatasetError::InvalidSpec(format!("dims[{m}] must be >= 1")));
            }
            match self.frames.get(m) {
                Some(&t) if t >= 1 => {}
                _ => return Err(DatasetError::InvalidSpec(format!("frames[{m}] must be >= 1"))),
            }
            match self.informativeness.get(m) {
                Some(s) if s.is_finite() && *s >= 0.0 => {}
                _ => {
                    return Err(DatasetError::InvalidSpec(format!(
                        "informativeness[{m}] must be finite and >= 0"
                    )))
                }
            }
        }
        Ok(())
    }
}

fn normal(rng: &mut Pcg32) -> f64 {
    rng.sample(StandardNormal)
}

type ClassMeans = BTreeMap<Modality, Vec<Vec<f64>>>;

fn class_means(spec: &SyntheticSpec, seed: u64) -> ClassMeans {
    let mut rng = stream(seed, Purpose::Synthetic);
    spec.dims
        .iter()
        .map(|(&m, &d)| {
            let sigma = spec.informativeness[&m];
            let per_class = (0..NUM_CLASSES)
                .map(|_| (0..d).map(|_| sigma * normal(&mut rng)).collect())
                .collect();
            (m, per_class)
        })
        .collect()
}

fn draw(spec: &SyntheticSpec, means: &ClassMeans, rng: &mut Pcg32, class: usize, id: String, labeled: bool) -> Sample {
    let mut features = BTreeMap::new();
    for (&m, &d) in &spec.dims {
        let t = spec.frames[&m];
        let mu = &means[&m][class];
        let shared: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let values = Matrix::from_fn(t, d, |_, c| (mu[c] + shared[c] + normal(rng)) as f32);
        features.insert(m, FrameFeatures { modality: m, values });
    }
    Sample {
        id,
        label: labeled.then_some(class),
        hidden_label: (!labeled).then_some(class),
        features,
    }
}

fn draw_split(
    spec: &SyntheticSpec,
    means: &ClassMeans,
    seed: u64,
    tag: u64,
    prefix: &str,
    per_class: usize,
    labeled: bool,
) -> Vec<Sample> {
    let mut rng = stream(derive_seed(seed, tag), Purpose::Synthetic);
    let mut out = Vec::with_capacity(per_class * NUM_CLASSES);
    for i in 0..per_class {
        for c in 0..NUM_CLASSES {
            out.push(draw(
                spec,
                means,
                &mut rng,
                c,
                format!("{prefix}-{:05}", i * NUM_CLASSES + c),
                labeled,
            ));
        }
    }
    out
}

pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset, DatasetError> {
    spec.validate()?;
    let means = class_means(spec, seed);
    Ok(Dataset {
        labeled: draw_split(spec, &means, seed, 1, "lab", spec.labeled_per_class, true),
        unlabeled: draw_split(spec, &means, seed, 2, "unl", spec.unlabeled_per_class, false),
    })
}

/// `spec.test_per_class` labeled samples per class from the same class means
/// as [`gen_synthetic`] with the same seed, disjoint from its samples.
pub fn gen_synthetic_test(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Sample>, DatasetError> {
    spec.validate()?;
    let means = class_means(spec, seed);
    Ok(draw_split(spec, &means, seed, 3, "tst", spec.test_per_class, true))
}

/// Synthetic "videos": each frame is a `tokens_per_frame × token_dim` block of
/// content tokens, stored flattened as one row of a video-modality matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoSpec {
    pub token_dim: usize,
    pub tokens_per_frame: usize,
    pub frames: usize,
    pub per_class: usize,
    /// Scale of the class prototypes relative to unit per-token noise.
    pub separation: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for VideoSpec {
    fn default() -> Self {
        Self {
            token_dim: 16,
            tokens_per_frame: 4,
            frames: 4,
            per_class: 20,
            separation: 3.0,
            seed: 0,
        }
    }
}

pub fn gen_synthetic_videos(spec: &VideoSpec, seed: u64) -> Result<Dataset, DatasetError> {
    if spec.token_dim == 0 || spec.tokens_per_frame == 0 || spec.frames == 0 || spec.per_class == 0 {
        return Err(DatasetError::InvalidSpec("video dims and counts must be >= 1".into()));
    }
    if !(spec.separation.is_finite() && spec.separation >= 0.0) {
        return Err(DatasetError::InvalidSpec("separation must be finite and >= 0".into()));
    }
    let width = spec.token_dim * spec.tokens_per_frame;
    let mut rng = stream(seed, Purpose::Synthetic);
    let prototypes: Vec<Vec<f64>> = (0..NUM_CLASSES)
        .map(|_| (0..width).map(|_| spec.separation * normal(&mut rng)).collect())
        .collect();
    let mut dataset = Dataset::default();
    for i in 0..spec.per_class {
        for (c, proto) in prototypes.iter().enumerate() {
            let values = Matrix::from_fn(spec.frames, width, |_, k| (proto[k] + normal(&mut rng)) as f32);
            let mut features = BTreeMap::new();
            features.insert(
                Modality::Video,
                FrameFeatures {
                    modality: Modality::Video,
                    values,
                },
            );
            dataset.labeled.push(Sample {
                id: format!("vid-{:05}", i * NUM_CLASSES + c),
                label: Some(c),
                hidden_label: None,
                features,
            });
        }
    }
    Ok(dataset)
}
