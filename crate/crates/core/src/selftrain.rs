//! Iterative pseudo-label self-training over the fold ensemble.
//!
//! Each round the current five fold models label the unlabeled pool, the `k`
//! most confident samples per predicted class are absorbed permanently, and
//! every fold is retrained from scratch with the absorbed samples appended to
//! its training portion. Validation portions only ever contain real labels.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::dataset::NUM_CLASSES;
use crate::evaluation::{cross_validate, ensemble_predict, CvMetrics, CvOptions, CvOutcome};
use crate::numerics::argmax;
use crate::training::{FoldModel, PooledSample, Result, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoSample {
    pub id: String,
    pub label: usize,
    /// Max of the averaged probability vector the selection was made from.
    pub confidence: f64,
    /// 1-based round in which the sample was absorbed.
    pub round: usize,
}

/// Top-`k` selection per predicted class from precomputed averaged probabilities.
/// Returns indices into `ids` alongside the pseudo samples, highest confidence first
/// within each class; ties go to the lexicographically smaller id.
pub fn select_from_probs(
    ids: &[&str],
    probs: &[[f32; NUM_CLASSES]],
    k: usize,
    round: usize,
) -> Vec<(usize, PseudoSample)> {
    let mut by_class: Vec<Vec<(usize, f64)>> = vec![Vec::new(); NUM_CLASSES];
    for (i, p) in probs.iter().enumerate() {
        let c = argmax(p);
        by_class[c].push((i, p[c] as f64));
    }
    let mut out = Vec::new();
    for (c, mut cands) in by_class.into_iter().enumerate() {
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| ids[a.0].cmp(ids[b.0])));
        for (i, confidence) in cands.into_iter().take(k) {
            out.push((
                i,
                PseudoSample {
                    id: ids[i].to_string(),
                    label: c,
                    confidence,
                    round,
                },
            ));
        }
    }
    out
}

/// Labels `pool` with the equal-weight ensemble of `models`, removes the
/// selected samples from it and returns them (class order, then confidence).
pub fn select_pseudo_labels(
    models: &[FoldModel],
    pool: &mut Vec<PooledSample>,
    k: usize,
    round: usize,
) -> Result<Vec<PseudoSample>> {
    if pool.is_empty() || k == 0 {
        return Ok(Vec::new());
    }
    let ens = ensemble_predict(models, pool, Some(models.len()))?;
    let ids: Vec<&str> = pool.iter().map(|s| s.id.as_str()).collect();
    let selected = select_from_probs(&ids, &ens.probs, k, round);
    let taken: HashSet<usize> = selected.iter().map(|(i, _)| *i).collect();
    let mut i = 0;
    pool.retain(|_| {
        let keep = !taken.contains(&i);
        i += 1;
        keep
    });
    Ok(selected.into_iter().map(|(_, p)| p).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelfTrainOptions {
    /// Maximum number of pseudo-labelling rounds after round 0.
    pub rounds: usize,
    pub k: usize,
    pub cv: CvOptions,
}

impl Default for SelfTrainOptions {
    fn default() -> Self {
        Self {
            rounds: 10,
            k: 10,
            cv: CvOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub absorbed_per_class: [usize; NUM_CLASSES],
    pub absorbed_total: usize,
    pub labeled_pool: usize,
    pub unlabeled_pool: usize,
    pub fold_waf: Vec<f64>,
    pub mean_waf: f64,
    pub std_waf: f64,
    /// Accuracy of this round's selection against hidden labels, when every pool sample has one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudo_label_accuracy: Option<f64>,
    /// Accuracy of the ensemble over the whole pool it selected from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_accuracy: Option<f64>,
    /// No absorbed id appears in any validation fold and folds cover only real labels.
    pub audit_passed: bool,
}

#[derive(Clone, Debug)]
pub struct SelfTrainOutcome {
    pub cv: CvOutcome,
    pub rounds: Vec<RoundReport>,
    pub absorbed: Vec<PseudoSample>,
    pub remaining: Vec<PooledSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainMetrics {
    pub rounds: Vec<RoundReport>,
    #[serde(rename = "final")]
    pub final_cv: CvMetrics,
}

impl SelfTrainOutcome {
    pub fn metrics(&self, seed: u64) -> SelfTrainMetrics {
        SelfTrainMetrics {
            rounds: self.rounds.clone(),
            final_cv: self.cv.metrics(seed),
        }
    }
}

fn audit(cv: &CvOutcome, labeled_ids: &HashSet<&str>, absorbed_ids: &HashSet<&str>) -> bool {
    cv.folds.iter().all(|f| {
        f.val
            .iter()
            .all(|id| labeled_ids.contains(id.as_str()) && !absorbed_ids.contains(id.as_str()))
    })
}

fn accuracy(pairs: impl Iterator<Item = (usize, Option<usize>)>) -> Option<f64> {
    let mut n = 0usize;
    let mut hit = 0usize;
    for (pred, truth) in pairs {
        n += 1;
        hit += (pred == truth?) as usize;
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

pub fn self_training_loop(
    labeled: &[PooledSample],
    unlabeled: &[PooledSample],
    config: &TrainConfig,
    options: SelfTrainOptions,
) -> Result<SelfTrainOutcome> {
    let labeled_ids: HashSet<&str> = labeled.iter().map(|s| s.id.as_str()).collect();
    let mut pool: Vec<PooledSample> = unlabeled.to_vec();
    let mut absorbed: Vec<PseudoSample> = Vec::new();
    let mut extra: Vec<PooledSample> = Vec::new();

    let report = |round: usize,
                  cv: &CvOutcome,
                  per_class: [usize; NUM_CLASSES],
                  pool_len: usize,
                  extra_len: usize,
                  accs: (Option<f64>, Option<f64>),
                  audit_passed: bool| RoundReport {
        round,
        absorbed_per_class: per_class,
        absorbed_total: per_class.iter().sum(),
        labeled_pool: labeled.len() + extra_len,
        unlabeled_pool: pool_len,
        fold_waf: cv.results.iter().map(|r| r.report.waf).collect(),
        mean_waf: cv.mean_waf,
        std_waf: cv.std_waf,
        pseudo_label_accuracy: accs.0,
        pool_accuracy: accs.1,
        audit_passed,
    };

    let mut cv = cross_validate(labeled, &[], config, options.cv)?;
    let mut rounds = vec![report(
        0,
        &cv,
        [0; NUM_CLASSES],
        pool.len(),
        0,
        (None, None),
        audit(&cv, &labeled_ids, &HashSet::new()),
    )];

    for round in 1..=options.rounds {
        if pool.is_empty() {
            break;
        }
        let pool_accuracy = if pool.iter().all(|s| s.hidden_label.is_some()) {
            let ens = ensemble_predict(&cv.models, &pool, Some(cv.models.len()))?;
            accuracy(ens.preds.iter().zip(&pool).map(|(&p, s)| (p, s.hidden_label)))
        } else {
            None
        };
        let before: Vec<PooledSample> = pool.clone();
        let selected = select_pseudo_labels(&cv.models, &mut pool, options.k, round)?;
        if selected.is_empty() {
            break;
        }
        let mut per_class = [0usize; NUM_CLASSES];
        for p in &selected {
            per_class[p.label] += 1;
            let mut s = before
                .iter()
                .find(|s| s.id == p.id)
                .expect("selected from pool")
                .clone();
            s.label = Some(p.label);
            extra.push(s);
        }
        let pseudo_accuracy = pool_accuracy.and_then(|_| {
            accuracy(selected.iter().map(|p| {
                let truth = before.iter().find(|s| s.id == p.id).and_then(|s| s.hidden_label);
                (p.label, truth)
            }))
        });
        absorbed.extend(selected);

        cv = cross_validate(labeled, &extra, config, options.cv)?;
        let absorbed_ids: HashSet<&str> = absorbed.iter().map(|p| p.id.as_str()).collect();
        let audit_passed = audit(&cv, &labeled_ids, &absorbed_ids);
        rounds.push(report(
            round,
            &cv,
            per_class,
            pool.len(),
            extra.len(),
            (pseudo_accuracy, pool_accuracy),
            audit_passed,
        ));
    }

    Ok(SelfTrainOutcome {
        cv,
        rounds,
        absorbed,
        remaining: pool,
    })
}
