use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use merfuse::dataset::{
    gen_synthetic, gen_synthetic_test, gen_synthetic_videos, load_manifest, stratified_kfold, write_dataset,
    SyntheticSpec, VideoSpec,
};
use merfuse::evaluation::{fold_seed, pooled_dims, with_missing_modality, CvMetrics, CvOutcome, EvalReport};
use merfuse::prompt::{
    export_embeddings, load_prompt_bank, save_prompt_bank, train_prompts, FrozenEncoder, PromptEpoch, VideoSample,
};
use merfuse::selftrain::{self_training_loop, SelfTrainOptions};
use merfuse::text_augment::{
    augment_batch, network_requests, AugmentRecord, ChatBackend, HttpBackend, MockBackend, RetryPolicy, TranscriptRow,
};
use merfuse::training::{pool_all, EpochRecord};
use merfuse::{
    cross_validate, ensemble_predict, train_fold, waf, CvOptions, Dataset, FoldModel, PooledSample, Sample, LABEL_NAMES,
};
use serde::Serialize;

use crate::config::RunConfig;

pub const METRICS_FILE: &str = "metrics.json";
pub const RUN_CONFIG_FILE: &str = "run_config.json";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(&r)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(config: &RunConfig) -> Result<&Path> {
    let out = config.out.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn cv_options(config: &RunConfig) -> CvOptions {
    CvOptions {
        folds: config.folds,
        seed: config.seed(),
        jobs: config.jobs,
    }
}

fn save_models(out: &Path, models: &[FoldModel], config: &RunConfig) -> Result<PathBuf> {
    let dir = out.join("models");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for (i, m) in models.iter().enumerate() {
        m.save(dir.join(format!("fold{i}.mmc")))?;
    }
    write_json(&out.join(RUN_CONFIG_FILE), config)?;
    Ok(dir)
}

/// Loads `fold{i}.mmc` checkpoints in fold order.
fn load_models(dir: &Path) -> Result<Vec<FoldModel>> {
    let mut found: Vec<(usize, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading model directory {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(i) = name.strip_prefix("fold").and_then(|r| r.strip_suffix(".mmc")) {
            if let Ok(i) = i.parse() {
                found.push((i, path));
            }
        }
    }
    if found.is_empty() {
        bail!("no fold*.mmc checkpoints in {}", dir.display());
    }
    found.sort();
    found
        .into_iter()
        .map(|(_, p)| FoldModel::load(&p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

#[derive(Serialize)]
struct TestScore {
    n: usize,
    missing_fraction: f64,
    report: EvalReport,
}

/// Fold-ensemble score on a labeled set, after zeroing one modality in
/// `missing_fraction` of the samples.
fn ensemble_score(models: &[FoldModel], samples: &[Sample], config: &RunConfig) -> Result<TestScore> {
    let pooled = pool_all(samples);
    if let Some(s) = pooled.iter().find(|s| s.label.is_none()) {
        bail!("evaluation sample {:?} has no label", s.id);
    }
    let pooled = with_missing_modality(&pooled, config.missing_fraction, config.seed());
    let truth: Vec<usize> = pooled.iter().map(|s| s.label.expect("checked")).collect();
    let ens = ensemble_predict(models, &pooled, Some(models.len()))?;
    Ok(TestScore {
        n: truth.len(),
        missing_fraction: config.missing_fraction,
        report: waf(&ens.preds, &truth)?,
    })
}

fn test_score(models: &[FoldModel], config: &RunConfig) -> Result<Option<TestScore>> {
    let Some(path) = &config.test_data else {
        return Ok(None);
    };
    let test = load_dataset(path)?;
    Ok(Some(ensemble_score(models, &test.labeled, config)?))
}

#[derive(Serialize)]
struct GenDataMetrics {
    seed: u64,
    labeled: usize,
    unlabeled: usize,
    test: usize,
    manifest: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_manifest: Option<PathBuf>,
}

pub fn gen_data(config: &RunConfig, seed_flag: Option<u64>, spec: Option<&Path>, videos: Option<&Path>) -> Result<()> {
    let read = |p: &Path| fs::read_to_string(p).with_context(|| format!("reading spec {}", p.display()));
    let out = out_dir(config)?;
    let (dataset, test, seed) = match (spec, videos) {
        (Some(p), None) => {
            let spec: SyntheticSpec =
                serde_json::from_str(&read(p)?).with_context(|| format!("parsing spec {}", p.display()))?;
            let seed = seed_flag.unwrap_or(spec.seed);
            let test = gen_synthetic_test(&spec, seed)?;
            (gen_synthetic(&spec, seed)?, test, seed)
        }
        (None, Some(p)) => {
            let spec: VideoSpec =
                serde_json::from_str(&read(p)?).with_context(|| format!("parsing video spec {}", p.display()))?;
            let seed = seed_flag.unwrap_or(spec.seed);
            (gen_synthetic_videos(&spec, seed)?, Vec::new(), seed)
        }
        _ => bail!("pass exactly one of --spec or --videos"),
    };
    let manifest = write_dataset(&dataset, out)?;
    let test_manifest = if test.is_empty() {
        None
    } else {
        let test_set = Dataset {
            labeled: test.clone(),
            unlabeled: Vec::new(),
        };
        Some(write_dataset(&test_set, out.join("test"))?)
    };
    let m = GenDataMetrics {
        seed,
        labeled: dataset.labeled.len(),
        unlabeled: dataset.unlabeled.len(),
        test: test.len(),
        manifest,
        test_manifest,
    };
    write_json(&out.join(METRICS_FILE), &m)?;
    println!(
        "generated {} labeled, {} unlabeled, {} test samples -> {}",
        m.labeled,
        m.unlabeled,
        m.test,
        m.manifest.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainMetrics {
    seed: u64,
    train_size: usize,
    val_size: usize,
    best_epoch: usize,
    best_val_waf: f64,
    history: Vec<EpochRecord>,
}

/// Ids of the first stratified fold, used as the validation split.
fn holdout_ids<'a>(items: impl IntoIterator<Item = (&'a str, usize)>, config: &RunConfig) -> Result<HashSet<String>> {
    let mut folds = stratified_kfold(items, config.folds, config.seed())?;
    Ok(folds.swap_remove(0).val.into_iter().collect())
}

pub fn train(config: &RunConfig) -> Result<()> {
    let data = load_dataset(config.data()?)?;
    let pooled = pool_all(&data.labeled);
    let val_ids = holdout_ids(
        pooled.iter().map(|s| (s.id.as_str(), s.label.expect("labeled split"))),
        config,
    )?;
    let (val, train): (Vec<PooledSample>, Vec<PooledSample>) =
        pooled.iter().cloned().partition(|s| val_ids.contains(&s.id));
    let outcome = train_fold(
        &train,
        &val,
        &config.train,
        pooled_dims(&pooled),
        fold_seed(config.seed(), 0),
    )?;
    let out = out_dir(config)?;
    let dir = out.join("models");
    fs::create_dir_all(&dir)?;
    outcome.model.save(dir.join("model.mmc"))?;
    write_json(&out.join(RUN_CONFIG_FILE), config)?;
    let m = TrainMetrics {
        seed: config.seed(),
        train_size: train.len(),
        val_size: val.len(),
        best_epoch: outcome.best_epoch,
        best_val_waf: outcome.best_val_waf,
        history: outcome.history,
    };
    write_json(&out.join(METRICS_FILE), &m)?;
    println!(
        "trained on {} samples; best epoch {} with validation WAF {:.4}",
        m.train_size, m.best_epoch, m.best_val_waf
    );
    Ok(())
}

#[derive(Serialize)]
struct CvCommandMetrics {
    #[serde(flatten)]
    cv: CvMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    test: Option<TestScore>,
}

fn print_cv(label: &str, cv: &CvOutcome) {
    let folds: Vec<String> = cv.results.iter().map(|r| format!("{:.4}", r.report.waf)).collect();
    println!(
        "{label}: mean WAF {:.4} ± {:.4} over folds [{}]",
        cv.mean_waf,
        cv.std_waf,
        folds.join(", ")
    );
}

pub fn cv(config: &RunConfig) -> Result<()> {
    let data = load_dataset(config.data()?)?;
    let outcome = cross_validate(&pool_all(&data.labeled), &[], &config.train, cv_options(config))?;
    let out = out_dir(config)?;
    save_models(out, &outcome.models, config)?;
    let test = test_score(&outcome.models, config)?;
    print_cv("cv", &outcome);
    if let Some(t) = &test {
        println!("test: ensemble WAF {:.4} on {} samples", t.report.waf, t.n);
    }
    let m = CvCommandMetrics {
        cv: outcome.metrics(config.seed()),
        test,
    };
    write_json(&out.join(METRICS_FILE), &m)
}

pub fn self_train(config: &RunConfig) -> Result<()> {
    let data = load_dataset(config.data()?)?;
    let options = SelfTrainOptions {
        rounds: config.rounds,
        k: config.k,
        cv: cv_options(config),
    };
    let outcome = self_training_loop(
        &pool_all(&data.labeled),
        &pool_all(&data.unlabeled),
        &config.train,
        options,
    )?;
    let out = out_dir(config)?;
    save_models(out, &outcome.cv.models, config)?;
    write_jsonl(&out.join("pseudo_labels.jsonl"), &outcome.absorbed)?;
    write_json(&out.join(METRICS_FILE), &outcome.metrics(config.seed()))?;
    for r in &outcome.rounds {
        println!(
            "round {:>2}: absorbed {:>4}, labeled pool {:>5}, unlabeled pool {:>5}, mean WAF {:.4}, audit {}",
            r.round,
            r.absorbed_total,
            r.labeled_pool,
            r.unlabeled_pool,
            r.mean_waf,
            if r.audit_passed { "ok" } else { "FAILED" }
        );
    }
    print_cv("final", &outcome.cv);
    if outcome.rounds.iter().any(|r| !r.audit_passed) {
        bail!("validation-fold audit failed: a pseudo-labeled id reached a validation fold");
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalMetrics {
    models: usize,
    seed: u64,
    #[serde(flatten)]
    score: TestScore,
}

pub fn eval(config: &RunConfig, models_dir: &Path) -> Result<()> {
    let models = load_models(models_dir)?;
    let data = load_dataset(config.data()?)?;
    if data.labeled.is_empty() {
        bail!("manifest has no labeled samples to evaluate");
    }
    let score = ensemble_score(&models, &data.labeled, config)?;
    let out = out_dir(config)?;
    println!(
        "ensemble of {} models: WAF {:.4} on {} samples ({:.0}% with a missing modality)",
        models.len(),
        score.report.waf,
        score.n,
        100.0 * score.missing_fraction
    );
    let m = EvalMetrics {
        models: models.len(),
        seed: config.seed(),
        score,
    };
    write_json(&out.join(METRICS_FILE), &m)
}

#[derive(Serialize)]
struct Prediction<'a> {
    id: &'a str,
    label: &'static str,
    probs: [f32; 6],
}

#[derive(Serialize)]
struct PredictMetrics {
    models: usize,
    n: usize,
    class_counts: [usize; 6],
}

pub fn predict(config: &RunConfig, models_dir: &Path) -> Result<()> {
    let models = load_models(models_dir)?;
    let data = load_dataset(config.data()?)?;
    let samples: Vec<Sample> = data.labeled.into_iter().chain(data.unlabeled).collect();
    let pooled = pool_all(&samples);
    let ens = ensemble_predict(&models, &pooled, Some(models.len()))?;
    let out = out_dir(config)?;
    let rows = pooled
        .iter()
        .zip(&ens.preds)
        .zip(&ens.probs)
        .map(|((s, &p), probs)| Prediction {
            id: &s.id,
            label: LABEL_NAMES[p],
            probs: *probs,
        });
    write_jsonl(&out.join("predictions.jsonl"), rows)?;
    let mut class_counts = [0; 6];
    ens.preds.iter().for_each(|&p| class_counts[p] += 1);
    let m = PredictMetrics {
        models: models.len(),
        n: pooled.len(),
        class_counts,
    };
    write_json(&out.join(METRICS_FILE), &m)?;
    println!("predicted {} samples with {} models", m.n, m.models);
    Ok(())
}

#[derive(Serialize)]
struct PromptMetrics {
    seed: u64,
    train_size: usize,
    val_size: usize,
    encoder_digest_before: String,
    encoder_digest_after: String,
    best_epoch: usize,
    best_val_waf: f64,
    final_train_accuracy: f64,
    history: Vec<PromptEpoch>,
}

pub fn prompt_train(config: &RunConfig) -> Result<()> {
    let data = load_dataset(config.data()?)?;
    let videos = data
        .labeled
        .iter()
        .map(VideoSample::from_sample)
        .collect::<Result<Vec<_>, _>>()?;
    let val_ids = holdout_ids(
        videos.iter().map(|s| (s.id.as_str(), s.label.expect("labeled split"))),
        config,
    )?;
    let (val, train): (Vec<VideoSample>, Vec<VideoSample>) = videos.into_iter().partition(|s| val_ids.contains(&s.id));
    let encoder = FrozenEncoder::<f32>::new(&config.encoder)?;
    let outcome = train_prompts(&encoder, &config.prompt, &train, &val, &config.prompt_train)?;
    let out = out_dir(config)?;
    save_prompt_bank(out.join("prompts.mmc"), &encoder, &config.prompt, &outcome.prompts)?;
    write_json(&out.join(RUN_CONFIG_FILE), config)?;
    let m = PromptMetrics {
        seed: config.prompt_train.seed,
        train_size: train.len(),
        val_size: val.len(),
        encoder_digest_before: outcome.digest_before,
        encoder_digest_after: outcome.digest_after,
        best_epoch: outcome.best_epoch,
        best_val_waf: outcome.best_val_waf,
        final_train_accuracy: outcome.history.last().map_or(0.0, |e| e.train_accuracy),
        history: outcome.history,
    };
    write_json(&out.join(METRICS_FILE), &m)?;
    println!(
        "prompt training: {} epochs, train accuracy {:.4}, best validation WAF {:.4} (epoch {}); encoder unchanged",
        m.history.len(),
        m.final_train_accuracy,
        m.best_val_waf,
        m.best_epoch
    );
    Ok(())
}

#[derive(Serialize)]
struct ExportMetrics {
    exported: usize,
    embed_dim: usize,
    manifest: PathBuf,
}

pub fn prompt_export(config: &RunConfig, prompts_path: &Path) -> Result<()> {
    let (encoder, _, prompts) =
        load_prompt_bank(prompts_path).with_context(|| format!("loading prompts {}", prompts_path.display()))?;
    let data = load_dataset(config.data()?)?;
    let convert = |samples: &[Sample]| -> Result<Vec<Sample>> {
        let videos = samples
            .iter()
            .map(VideoSample::from_sample)
            .collect::<Result<Vec<_>, _>>()?;
        let embedded = export_embeddings(&encoder, &prompts, &videos)?;
        Ok(samples
            .iter()
            .zip(embedded)
            .map(|(s, (_, f))| Sample {
                id: s.id.clone(),
                label: s.label,
                hidden_label: s.hidden_label,
                features: [(f.modality, f)].into_iter().collect(),
            })
            .collect())
    };
    let exported = Dataset {
        labeled: convert(&data.labeled)?,
        unlabeled: convert(&data.unlabeled)?,
    };
    let out = out_dir(config)?;
    let manifest = write_dataset(&exported, out)?;
    let m = ExportMetrics {
        exported: exported.labeled.len() + exported.unlabeled.len(),
        embed_dim: encoder.config.embed_dim,
        manifest,
    };
    write_json(&out.join(METRICS_FILE), &m)?;
    println!("exported {} video embeddings -> {}", m.exported, m.manifest.display());
    Ok(())
}

#[derive(Serialize)]
struct Failure {
    id: String,
    error: String,
}

#[derive(Serialize)]
struct AugmentMetrics {
    backend: &'static str,
    n: usize,
    succeeded: usize,
    failed: usize,
    network_requests: usize,
    failures: Vec<Failure>,
}

pub fn augment_text(config: &RunConfig, input: &Path) -> Result<()> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let rows = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<TranscriptRow>(l)
                .with_context(|| format!("{}:{}: bad transcript row", input.display(), i + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    let before = network_requests();
    let (backend, name): (Box<dyn ChatBackend>, _) = if config.mock {
        (Box::new(MockBackend::new()), "mock")
    } else {
        (Box::new(HttpBackend::new(config.backend.clone())), "http")
    };
    let texts: Vec<&str> = rows.iter().map(|r| r.text.as_str()).collect();
    let results = augment_batch(&texts, backend.as_ref(), RetryPolicy::default(), config.max_in_flight);

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (row, r) in rows.iter().zip(results) {
        match r {
            Ok(t) => records.push(AugmentRecord::new(&row.id, &t)),
            Err(e) => failures.push(Failure {
                id: row.id.clone(),
                error: e.to_string(),
            }),
        }
    }
    let out = out_dir(config)?;
    write_jsonl(&out.join("augmented.jsonl"), &records)?;
    let m = AugmentMetrics {
        backend: name,
        n: rows.len(),
        succeeded: records.len(),
        failed: failures.len(),
        network_requests: network_requests() - before,
        failures,
    };
    write_json(&out.join(METRICS_FILE), &m)?;
    println!(
        "augmented {}/{} transcripts with the {} backend ({} network requests)",
        m.succeeded, m.n, m.backend, m.network_requests
    );
    if m.failed > 0 {
        bail!(
            "{} of {} transcripts failed; see {}",
            m.failed,
            m.n,
            out.join(METRICS_FILE).display()
        );
    }
    Ok(())
}

pub const SWEEP_RATES: [f64; 4] = [0.0, 0.15, 0.3, 0.5];

#[derive(Serialize)]
struct SweepRow {
    modality_dropout: f64,
    mean_waf: f64,
    std_waf: f64,
    fold_waf: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    test_waf: Option<f64>,
}

#[derive(Serialize)]
struct SweepMetrics {
    seed: u64,
    folds: usize,
    missing_fraction: f64,
    rows: Vec<SweepRow>,
}

pub fn sweep_dropout(config: &RunConfig) -> Result<()> {
    let data = load_dataset(config.data()?)?;
    let labeled = pool_all(&data.labeled);
    let test = match &config.test_data {
        Some(p) => Some(load_dataset(p)?),
        None => None,
    };
    let mut rows = Vec::new();
    for p in SWEEP_RATES {
        let mut train = config.train.clone();
        train.modality_dropout = p;
        let cv = cross_validate(&labeled, &[], &train, cv_options(config))?;
        let test_waf = match &test {
            Some(t) => Some(ensemble_score(&cv.models, &t.labeled, config)?.report.waf),
            None => None,
        };
        rows.push(SweepRow {
            modality_dropout: p,
            mean_waf: cv.mean_waf,
            std_waf: cv.std_waf,
            fold_waf: cv.results.iter().map(|r| r.report.waf).collect(),
            test_waf,
        });
    }
    let out = out_dir(config)?;
    write_json(&out.join(RUN_CONFIG_FILE), config)?;
    println!("{:>8}  {:>10}  {:>8}  {:>9}", "p1", "cv WAF", "std", "test WAF");
    for r in &rows {
        let t = r.test_waf.map_or("-".to_string(), |w| format!("{w:.4}"));
        println!(
            "{:>8.2}  {:>10.4}  {:>8.4}  {:>9}",
            r.modality_dropout, r.mean_waf, r.std_waf, t
        );
    }
    let m = SweepMetrics {
        seed: config.seed(),
        folds: config.folds,
        missing_fraction: config.missing_fraction,
        rows,
    };
    write_json(&out.join(METRICS_FILE), &m)
}
