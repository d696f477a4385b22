//! Weighted-average F-score, confusion matrices, k-fold cross-validation and
//! equal-weight fold ensembling.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::RngExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{stratified_kfold, Fold, Modality, NUM_CLASSES};
use crate::fusion::NUM_SLOTS;
use crate::numerics::argmax;
use crate::rng::{derive_seed, stream, Purpose};
use crate::training::{predict_proba, train_fold, EpochRecord, FoldModel, PooledSample, TrainConfig, TrainError};

pub type ConfusionMatrix = [[u64; NUM_CLASSES]; NUM_CLASSES];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("predictions ({preds}) and labels ({labels}) differ in length")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("cannot score an empty prediction set")]
    Empty,
    #[error("class index {0} out of range")]
    ClassOutOfRange(usize),
    #[error("ensemble expects {expected} models, got {got}")]
    ModelCount { expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub waf: f64,
    pub per_class_f1: [f64; NUM_CLASSES],
    /// Rows are true classes, columns predicted classes.
    pub confusion: ConfusionMatrix,
    pub n: usize,
}

fn check(preds: &[usize], labels: &[usize]) -> Result<(), EvalError> {
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(&c) = preds.iter().chain(labels).find(|&&c| c >= NUM_CLASSES) {
        return Err(EvalError::ClassOutOfRange(c));
    }
    Ok(())
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize]) -> Result<ConfusionMatrix, EvalError> {
    check(preds, labels)?;
    let mut m = [[0u64; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &t) in preds.iter().zip(labels) {
        m[t][p] += 1;
    }
    Ok(m)
}

/// Support-weighted mean of per-class F1; a class with `0/0` precision or recall scores 0.
pub fn waf(preds: &[usize], labels: &[usize]) -> Result<EvalReport, EvalError> {
    let confusion = confusion_matrix(preds, labels)?;
    let n = preds.len();
    let mut per_class_f1 = [0.0; NUM_CLASSES];
    let mut total = 0.0;
    for c in 0..NUM_CLASSES {
        let tp = confusion[c][c] as f64;
        let support: u64 = confusion[c].iter().sum();
        let predicted: u64 = (0..NUM_CLASSES).map(|r| confusion[r][c]).sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = if support == 0 { 0.0 } else { tp / support as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class_f1[c] = f1;
        total += support as f64 * f1;
    }
    Ok(EvalReport {
        waf: total / n as f64,
        per_class_f1,
        confusion,
        n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub best_epoch: usize,
    pub report: EvalReport,
    pub history: Vec<EpochRecord>,
}

/// Everything `cross_validate` produces.
#[derive(Clone, Debug)]
pub struct CvOutcome {
    pub folds: Vec<Fold>,
    pub models: Vec<FoldModel>,
    pub results: Vec<FoldResult>,
    pub mean_waf: f64,
    /// Population standard deviation of the per-fold WAFs.
    pub std_waf: f64,
}

/// The JSON-facing summary of a cross-validation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvMetrics {
    pub folds: usize,
    pub seed: u64,
    pub fold_waf: Vec<f64>,
    pub mean_waf: f64,
    pub std_waf: f64,
    pub per_fold: Vec<FoldResult>,
}

impl CvOutcome {
    pub fn metrics(&self, seed: u64) -> CvMetrics {
        CvMetrics {
            folds: self.results.len(),
            seed,
            fold_waf: self.results.iter().map(|r| r.report.waf).collect(),
            mean_waf: self.mean_waf,
            std_waf: self.std_waf,
            per_fold: self.results.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CvOptions {
    pub folds: usize,
    pub seed: u64,
    /// Upper bound on concurrently trained folds; results never depend on it.
    pub jobs: usize,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            jobs: 1,
        }
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-fold seed used for initialisation, shuffling and dropout streams.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    derive_seed(seed, fold as u64)
}

pub fn pooled_dims(samples: &[PooledSample]) -> [usize; NUM_SLOTS] {
    let mut dims = [0; NUM_SLOTS];
    for s in samples {
        for m in Modality::ALL {
            if let (0, Some(v)) = (dims[m.index()], s.embeddings.get(m)) {
                dims[m.index()] = v.len();
            }
        }
    }
    dims
}

/// Stratified k-fold cross-validation. `extra_train` samples (e.g. absorbed
/// pseudo labels) are appended to every fold's training portion and never to
/// a validation portion; folds are always split over `labeled` alone.
pub fn cross_validate(
    labeled: &[PooledSample],
    extra_train: &[PooledSample],
    config: &TrainConfig,
    options: CvOptions,
) -> Result<CvOutcome, TrainError> {
    let labels: Vec<usize> = labeled
        .iter()
        .map(|s| s.label.ok_or_else(|| TrainError::MissingLabel(s.id.clone())))
        .collect::<Result<_, _>>()?;
    let folds = stratified_kfold(
        labeled.iter().zip(&labels).map(|(s, &l)| (s.id.as_str(), l)),
        options.folds,
        options.seed,
    )?;
    let dims = pooled_dims(labeled);

    let run_fold = |f: usize| -> Result<(FoldModel, FoldResult), TrainError> {
        let val_ids: HashSet<&str> = folds[f].val.iter().map(String::as_str).collect();
        let (val, mut train): (Vec<PooledSample>, Vec<PooledSample>) =
            labeled.iter().cloned().partition(|s| val_ids.contains(s.id.as_str()));
        train.extend(extra_train.iter().cloned());
        let out = train_fold(&train, &val, config, dims, fold_seed(options.seed, f))?;
        let probs = predict_proba(&out.model, &val)?;
        let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        let truth: Vec<usize> = val.iter().map(|s| s.label.expect("labeled")).collect();
        let report = waf(&preds, &truth)?;
        Ok((
            out.model,
            FoldResult {
                fold: f,
                best_epoch: out.best_epoch,
                report,
                history: out.history,
            },
        ))
    };

    let jobs = options.jobs.max(1);
    let trained: Vec<Result<(FoldModel, FoldResult), TrainError>> = if jobs == 1 {
        (0..folds.len()).map(run_fold).collect()
    } else {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("thread pool");
        pool.install(|| (0..folds.len()).into_par_iter().map(run_fold).collect())
    };

    let mut models = Vec::with_capacity(folds.len());
    let mut results = Vec::with_capacity(folds.len());
    for r in trained {
        let (m, res) = r?;
        models.push(m);
        results.push(res);
    }
    let wafs: Vec<f64> = results.iter().map(|r| r.report.waf).collect();
    let (mean_waf, std_waf) = mean_std(&wafs);
    Ok(CvOutcome {
        folds,
        models,
        results,
        mean_waf,
        std_waf,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePrediction {
    pub preds: Vec<usize>,
    pub probs: Vec<[f32; NUM_CLASSES]>,
}

/// Equal-weight average of the models' softmax outputs; argmax ties go to the lowest class.
/// `expected_models` guards against accidentally ensembling the wrong set (normally 5).
pub fn ensemble_predict(
    models: &[FoldModel],
    samples: &[PooledSample],
    expected_models: Option<usize>,
) -> Result<EnsemblePrediction, TrainError> {
    let expected = expected_models.unwrap_or(5);
    if models.len() != expected || models.is_empty() {
        return Err(EvalError::ModelCount {
            expected,
            got: models.len(),
        }
        .into());
    }
    let weight = 1.0 / models.len() as f64;
    let mut acc = vec![[0.0f64; NUM_CLASSES]; samples.len()];
    for m in models {
        for (row, p) in acc.iter_mut().zip(predict_proba(m, samples)?) {
            for (a, v) in row.iter_mut().zip(p) {
                *a += weight * v as f64;
            }
        }
    }
    let probs: Vec<[f32; NUM_CLASSES]> = acc.iter().map(|r| std::array::from_fn(|i| r[i] as f32)).collect();
    let preds = acc.iter().map(|r| argmax(r)).collect();
    Ok(EnsemblePrediction { preds, probs })
}

/// Zeroes one randomly chosen present modality in a `fraction` of the samples
/// (only samples with at least two modalities are touched). Used to probe
/// robustness to missing modalities at test time.
pub fn with_missing_modality(samples: &[PooledSample], fraction: f64, seed: u64) -> Vec<PooledSample> {
    let mut rng = stream(seed, Purpose::Evaluation);
    let mut idx: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].embeddings.count_present() >= 2)
        .collect();
    idx.shuffle(&mut rng);
    let take = ((samples.len() as f64) * fraction).round() as usize;
    let mut out = samples.to_vec();
    for &i in idx.iter().take(take) {
        let present: Vec<Modality> = Modality::ALL
            .into_iter()
            .filter(|m| out[i].embeddings.get(*m).is_some())
            .collect();
        let m = present[rng.random_range(0..present.len())];
        out[i].embeddings = out[i].embeddings.clone().zeroed(m);
    }
    out
}
