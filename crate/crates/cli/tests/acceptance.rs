//! Acceptance criteria, one test each (`ac01` … `ac11`).

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use merfuse::checkpoint::TensorContainer;
use merfuse::dataset::{
    decode_features, encode_features, gen_synthetic, gen_synthetic_test, gen_synthetic_videos, read_feature_file,
    write_feature_file, DatasetError, SyntheticSpec, VideoSpec,
};
use merfuse::evaluation::with_missing_modality;
use merfuse::fusion::{draw_dropout_mask, modality_dropout, sample_drop_mask, Mode, ParamSet, TrainMode};
use merfuse::numerics::gradcheck::grad_check;
use merfuse::numerics::{cross_entropy, dot, layer_norm, layer_norm_backward, quick_gelu, quick_gelu_grad, Linear};
use merfuse::prompt::{
    anchor_tokens, batch_loss_and_grad, load_prompt_bank, save_prompt_bank, train_prompts, EncoderConfig,
    FrozenEncoder, PromptBank, PromptConfig, PromptTrainConfig, VideoSample,
};
use merfuse::rng::seeded;
use merfuse::selftrain::{self_training_loop, SelfTrainOptions};
use merfuse::text_augment::{
    augment_transcript, parse_label_ranking, AugmentError, AugmentedTranscript, ChatBackend, LabelRanking, MockBackend,
    RetryPolicy,
};
use merfuse::training::pool_all;
use merfuse::{
    cross_validate, ensemble_predict, waf, CvOptions, FoldModel, FusionConfig, FusionParams, Matrix, Modality,
    ModalityEmbeddings, TrainConfig,
};
use rand::{Rng, RngExt};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_merfuse");

fn merfuse(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn merfuse")
}

fn merfuse_ok(args: &[&str]) -> Output {
    let out = merfuse(args);
    assert!(
        out.status.success(),
        "merfuse {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write(path: &Path, text: &str) -> PathBuf {
    std::fs::write(path, text).unwrap();
    path.to_path_buf()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn uniform(rng: &mut impl Rng, n: usize, a: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-a..a)).collect()
}

/// A small feature dataset on disk plus a quick training config.
fn small_run(dir: &Path) -> (PathBuf, PathBuf) {
    let spec = write(
        &dir.join("spec.json"),
        r#"{"dims": {"S": 6, "I": 6, "T": 6, "V": 6}, "frames": {"S": 3, "I": 3, "T": 3, "V": 3},
            "informativeness": {"S": 1.0, "I": 0.6, "T": 0.6, "V": 0.4},
            "labeled_per_class": 10, "unlabeled_per_class": 12, "seed": 5}"#,
    );
    let data = dir.join("data");
    merfuse_ok(&["gen-data", "--spec", s(&spec), "--out", s(&data)]);
    let config = write(
        &dir.join("config.json"),
        r#"{"train": {"epochs": 6, "hidden": 16, "batch_size": 16, "learning_rate": 0.003}}"#,
    );
    (data.join("manifest.jsonl"), config)
}

#[test]
fn ac01_gradient_correctness() {
    let start = Instant::now();
    let tol = 1e-6;
    for seed in 0..20u64 {
        let mut rng = seeded(seed);

        // Linear layer: weights, bias and input together.
        let (i, o) = (5, 3);
        let x0: Vec<f64> = [uniform(&mut rng, o * i + o, 1.0), uniform(&mut rng, i, 1.0)].concat();
        let w_out = uniform(&mut rng, o, 1.0);
        let r = grad_check(
            |p| {
                let lin = Linear {
                    weight: Matrix::new(o, i, p[..o * i].to_vec()).unwrap(),
                    bias: p[o * i..o * i + o].to_vec(),
                };
                let x = &p[o * i + o..];
                let y = lin.forward(x).unwrap();
                let mut g = Linear::zeros(i, o);
                let dx = lin.backward(x, &w_out, &mut g).unwrap();
                (dot(&y, &w_out), [g.weight.into_data(), g.bias, dx].concat())
            },
            &x0,
        );
        assert!(r.passes(tol), "linear seed {seed}: {r:?}");

        // Layer norm: input, gain and shift.
        let n = 6;
        let x0 = [
            uniform(&mut rng, n, 2.0),
            uniform(&mut rng, n, 1.5),
            uniform(&mut rng, n, 1.0),
        ]
        .concat();
        let w_out = uniform(&mut rng, n, 1.0);
        let r = grad_check(
            |p| {
                let (x, g, b) = (&p[..n], &p[n..2 * n], &p[2 * n..]);
                let y = layer_norm(x, g, b, 1e-5).unwrap();
                let (dx, dg, db) = layer_norm_backward(x, g, 1e-5, &w_out).unwrap();
                (dot(&y, &w_out), [dx, dg, db].concat())
            },
            &x0,
        );
        assert!(r.passes(tol), "layer norm seed {seed}: {r:?}");

        // Softmax cross-entropy on logits.
        let label = (seed % 6) as usize;
        let r = grad_check(|z| cross_entropy(z, label).unwrap(), &uniform(&mut rng, 6, 3.0));
        assert!(r.passes(tol), "cross-entropy seed {seed}: {r:?}");

        // QuickGELU, elementwise.
        let r = grad_check(
            |x| {
                (
                    x.iter().map(|&v| quick_gelu(v)).sum(),
                    x.iter().map(|&v| quick_gelu_grad(v)).collect(),
                )
            },
            &uniform(&mut rng, 8, 4.0),
        );
        assert!(r.passes(tol), "quick-gelu seed {seed}: {r:?}");

        // Full fusion network: projections, attention, classifier, under
        // varying modality masks and element dropout.
        let cfg = FusionConfig::new([6, 4, 5, 3], 7);
        let mut params = FusionParams::<f64>::init(&cfg, &mut seeded(seed + 100));
        let shift: Vec<f64> = uniform(&mut rng, params.num_params(), 0.3);
        let flat: Vec<f64> = params.flatten().iter().zip(&shift).map(|(a, b)| a + b).collect();
        params.assign_flat(&flat);
        let mut e = ModalityEmbeddings::new();
        for m in Modality::ALL {
            if !(seed % 4 == 3 && m == Modality::Text) {
                e.set(m, Some(uniform(&mut rng, cfg.input_dims[m.index()], 1.5)));
            }
        }
        let dropped = [seed % 3 == 0, false, seed % 5 == 1, false];
        let element = (seed % 2 == 0).then(|| {
            (0..7)
                .map(|k| if k % 3 == 0 { 0.0 } else { 1.0 / 0.7 })
                .collect::<Vec<f64>>()
        });
        let r = grad_check(
            |p| {
                let mut q = params.clone();
                q.assign_flat(p);
                let cache = q.forward_masked(&e, dropped, None, element.clone()).unwrap();
                let (loss, dl) = cross_entropy(&cache.logits, label).unwrap();
                (loss, q.backward(&cache, &dl).unwrap().flatten())
            },
            &flat,
        );
        assert!(r.passes(tol), "fusion seed {seed}: {r:?}");

        // Prompt encoder: one transformer block w.r.t. its input, and the whole
        // contrastive loss w.r.t. every prompt token of both branches.
        let enc_cfg = EncoderConfig {
            layers: 2,
            width: 8,
            heads: 2,
            mlp_ratio: 2,
            token_dim: 3,
            tokens_per_frame: 2,
            embed_dim: 5,
            seed,
        };
        let enc = FrozenEncoder::<f64>::new(&enc_cfg).unwrap();
        let block = &enc.vision.blocks[1];
        let w_out = Matrix::new(4, 8, uniform(&mut rng, 32, 1.0)).unwrap();
        let r = grad_check(
            |p| {
                let x = Matrix::new(4, 8, p.to_vec()).unwrap();
                let (y, cache) = block.forward(&x).unwrap();
                (
                    dot(y.data(), w_out.data()),
                    block.backward(&cache, &w_out).unwrap().into_data(),
                )
            },
            &uniform(&mut rng, 32, 1.0),
        );
        assert!(r.passes(tol), "transformer block seed {seed}: {r:?}");

        let pc = PromptConfig {
            num_prompts: 2,
            ..PromptConfig::default()
        };
        let bank = PromptBank::<f64>::init(&enc_cfg, &pc, seed);
        let width = enc_cfg.tokens_per_frame * enc_cfg.token_dim;
        let videos: Vec<Matrix<f64>> = (0..2)
            .map(|_| Matrix::new(2, width, uniform(&mut rng, 2 * width, 1.5)).unwrap())
            .collect();
        let batch: Vec<(&Matrix<f64>, usize)> = videos.iter().zip([label, (label + 3) % 6]).collect();
        let r = grad_check(
            |p| {
                let mut b = bank.clone();
                b.assign_flat(p);
                let (l, g) = batch_loss_and_grad(&enc, &b, &batch, 0.07).unwrap();
                (l, g.flatten())
            },
            &bank.flatten(),
        );
        assert!(r.passes(tol), "prompt encoder seed {seed}: {r:?}");
    }
    assert!(start.elapsed() < Duration::from_secs(60), "took {:?}", start.elapsed());
}

#[test]
fn ac02_waf_oracle_equivalence() {
    // Reference: per-class precision/recall/F1 from raw counts, weighted by support.
    fn reference(preds: &[usize], labels: &[usize]) -> f64 {
        let n = labels.len() as f64;
        (0..6)
            .map(|c| {
                let tp = preds.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count() as f64;
                let pp = preds.iter().filter(|&&p| p == c).count() as f64;
                let support = labels.iter().filter(|&&l| l == c).count() as f64;
                let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (pp + support) };
                support / n * f1
            })
            .sum()
    }
    let mut rng = seeded(2024);
    for _ in 0..1000 {
        let n = rng.random_range(1..=200);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
        let got = waf(&preds, &labels).unwrap().waf;
        assert!((got - reference(&preds, &labels)).abs() <= 1e-12);
    }
    let hand = waf(&[0, 1, 1], &[0, 0, 1]).unwrap().waf;
    assert!((hand - 2.0 / 3.0).abs() <= 1e-12, "{hand}");
}

#[test]
fn ac03_modality_dropout_statistics() {
    let mut rng = seeded(31);
    let draws = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        let mask = sample_drop_mask([true; 4], 0.3, &mut rng);
        for (c, d) in counts.iter_mut().zip(mask) {
            *c += d as usize;
        }
    }
    for (m, &c) in counts.iter().enumerate() {
        let rate = c as f64 / draws as f64;
        assert!((0.29..=0.31).contains(&rate), "slot {m}: rate {rate}");
    }

    let cfg = FusionConfig::new([4, 4, 4, 4], 8);
    let mut e = ModalityEmbeddings::<f32>::new();
    for m in Modality::ALL {
        e.set(
            m,
            Some(uniform(&mut rng, 4, 2.0).into_iter().map(|v| v as f32).collect()),
        );
    }
    for seed in 0..100 {
        let out = modality_dropout(&e, 0.0, &cfg, &mut seeded(seed)).unwrap();
        for m in Modality::ALL {
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(out.get(m).unwrap()), bits(e.get(m).unwrap()));
        }
    }

    for m in Modality::ALL {
        let mut present = [false; 4];
        present[m.index()] = true;
        for p1 in [0.3, 0.5, 0.9, 0.99] {
            for _ in 0..2_000 {
                let mask = draw_dropout_mask(present, p1, true, &mut rng).unwrap();
                assert!(!mask[m.index()], "single modality {m:?} dropped at p1 = {p1}");
            }
        }
    }
}

#[test]
fn ac04_zeroing_matches_seeded_mask() {
    let cfg = FusionConfig::new([6, 4, 5, 3], 8);
    let params = FusionParams::<f32>::init(&cfg, &mut seeded(4));
    let mut rng = seeded(40);
    let mut e = ModalityEmbeddings::<f32>::new();
    for m in Modality::ALL {
        e.set(
            m,
            Some(
                uniform(&mut rng, cfg.input_dims[m.index()], 1.5)
                    .into_iter()
                    .map(|v| v as f32)
                    .collect(),
            ),
        );
    }
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let mut modality_rng = seeded(41);
    let mut seen = [false; 4];
    for _ in 0..400 {
        let mut element_rng = seeded(0);
        let cache = params
            .forward(
                &e,
                &cfg,
                Mode::Train(TrainMode {
                    modality_dropout: 0.5,
                    dropout_rate: 0.0,
                    modality_rng: &mut modality_rng,
                    element_rng: &mut element_rng,
                }),
            )
            .unwrap();
        let mut manual = e.clone();
        for m in Modality::ALL {
            if cache.dropped[m.index()] {
                manual = manual.zeroed(m);
                seen[m.index()] = true;
            }
        }
        assert_eq!(bits(&cache.logits), bits(&params.logits(&manual).unwrap()));
    }
    assert!(
        seen.iter().all(|&s| s),
        "every modality should be dropped at least once"
    );
}

#[test]
fn ac05_cli_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, config) = small_run(dir.path());
    let run = |name: &str, jobs: &str| {
        let out = dir.path().join(name);
        merfuse_ok(&[
            "cv",
            "--config",
            s(&config),
            "--data",
            s(&manifest),
            "--seed",
            "7",
            "--jobs",
            jobs,
            "--out",
            s(&out),
        ]);
        out
    };
    let a = run("a", "1");
    let b = run("b", "1");
    let c = run("c", "4");
    let bytes = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(bytes(&a, "metrics.json"), bytes(&b, "metrics.json"));
    assert_eq!(read_json(a.join("metrics.json")), read_json(c.join("metrics.json")));
    for f in 0..5 {
        let model = format!("models/fold{f}.mmc");
        assert_eq!(bytes(&a, &model), bytes(&b, &model));
        assert_eq!(bytes(&a, &model), bytes(&c, &model));
    }
    let waf = read_json(a.join("metrics.json"))["mean_waf"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&waf));
    // the exact configuration is stored next to the models
    assert_eq!(read_json(a.join("run_config.json"))["train"]["seed"], 7);
}

/// Mean fold-ensemble WAF over seeds 0..5 on the standard spec, with 20% of the
/// test samples missing one modality.
fn robustness_waf(p1: f64) -> f64 {
    let spec = SyntheticSpec::standard();
    let config = TrainConfig {
        learning_rate: 6e-4,
        modality_dropout: p1,
        ..TrainConfig::default()
    };
    let mut total = 0.0;
    for seed in 0..5 {
        let data = gen_synthetic(&spec, seed).unwrap();
        let test = with_missing_modality(&pool_all(&gen_synthetic_test(&spec, seed).unwrap()), 0.2, seed);
        let truth: Vec<usize> = test.iter().map(|s| s.label.unwrap()).collect();
        let cv = cross_validate(
            &pool_all(&data.labeled),
            &[],
            &config,
            CvOptions {
                seed,
                ..CvOptions::default()
            },
        )
        .unwrap();
        let ens = ensemble_predict(&cv.models, &test, None).unwrap();
        total += waf(&ens.preds, &truth).unwrap().waf;
    }
    total / 5.0
}

#[test]
fn ac06_dropout_rate_trend() {
    let start = Instant::now();
    let w0 = robustness_waf(0.0);
    let w3 = robustness_waf(0.3);
    let w5 = robustness_waf(0.5);
    println!("ensemble WAF by p1: 0.0 -> {w0:.4}, 0.3 -> {w3:.4}, 0.5 -> {w5:.4}");
    assert!(w3 >= w0, "WAF(0.3) = {w3} < WAF(0) = {w0}");
    assert!(w3 >= w5, "WAF(0.3) = {w3} < WAF(0.5) = {w5}");
    assert!(start.elapsed() < Duration::from_secs(600), "took {:?}", start.elapsed());
}

#[test]
fn ac07_self_training_gain() {
    let spec = SyntheticSpec::uniform(
        &[
            (Modality::Speech, 0.5),
            (Modality::Image, 0.5),
            (Modality::Text, 0.5),
            (Modality::Video, 0.5),
        ],
        8,
        4,
        10,
        100,
    );
    let config = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 32,
        hidden: 32,
        ..TrainConfig::default()
    };
    let (mut first, mut last) = (0.0, 0.0);
    for seed in 0..3 {
        let data = gen_synthetic(&spec, seed).unwrap();
        let options = SelfTrainOptions {
            cv: CvOptions {
                seed,
                ..CvOptions::default()
            },
            ..SelfTrainOptions::default()
        };
        let out = self_training_loop(&pool_all(&data.labeled), &pool_all(&data.unlabeled), &config, options).unwrap();
        assert!(
            out.rounds.iter().all(|r| r.audit_passed),
            "seed {seed}: validation audit failed"
        );
        // independent audit: no absorbed id in any validation fold of the final round
        for fold in &out.cv.folds {
            for id in &fold.val {
                assert!(id.starts_with("lab-"), "seed {seed}: {id} in a validation fold");
            }
        }
        let (r0, rl) = (out.rounds.first().unwrap(), out.rounds.last().unwrap());
        println!(
            "seed {seed}: round 0 WAF {:.4} -> round {} WAF {:.4}",
            r0.mean_waf, rl.round, rl.mean_waf
        );
        first += r0.mean_waf;
        last += rl.mean_waf;
    }
    assert!(
        last >= first,
        "final-round mean {} < round-0 mean {}",
        last / 3.0,
        first / 3.0
    );
}

#[test]
fn ac08_self_training_bookkeeping() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, config) = small_run(dir.path());
    let cv = dir.path().join("cv");
    let st = dir.path().join("st");
    merfuse_ok(&[
        "cv",
        "--config",
        s(&config),
        "--data",
        s(&manifest),
        "--seed",
        "3",
        "--out",
        s(&cv),
    ]);
    merfuse_ok(&[
        "self-train",
        "--config",
        s(&config),
        "--data",
        s(&manifest),
        "--seed",
        "3",
        "--rounds",
        "0",
        "--out",
        s(&st),
    ]);
    let st_metrics = read_json(st.join("metrics.json"));
    assert_eq!(st_metrics["final"], read_json(cv.join("metrics.json")));
    assert_eq!(st_metrics["rounds"].as_array().unwrap().len(), 1);
    for f in 0..5 {
        let model = format!("models/fold{f}.mmc");
        assert_eq!(
            std::fs::read(cv.join(&model)).unwrap(),
            std::fs::read(st.join(&model)).unwrap()
        );
    }

    let k = 3;
    let data = gen_synthetic(&SyntheticSpec::small(), 9).unwrap();
    let mut spec = SyntheticSpec::small();
    spec.labeled_per_class = 6;
    spec.unlabeled_per_class = 8;
    let data2 = gen_synthetic(&spec, 9).unwrap();
    let config = TrainConfig {
        epochs: 4,
        hidden: 8,
        ..TrainConfig::default()
    };
    for (labeled, unlabeled) in [(&data.labeled, &data.unlabeled), (&data2.labeled, &data2.unlabeled)] {
        let options = SelfTrainOptions {
            rounds: 6,
            k,
            cv: CvOptions {
                seed: 1,
                ..CvOptions::default()
            },
        };
        let out = self_training_loop(&pool_all(labeled), &pool_all(unlabeled), &config, options).unwrap();
        assert_eq!(out.rounds[0].unlabeled_pool, unlabeled.len());
        for w in out.rounds.windows(2) {
            let (prev, cur) = (&w[0], &w[1]);
            assert!(cur.absorbed_total <= 6 * k);
            assert!(cur.absorbed_per_class.iter().all(|&c| c <= k));
            assert_eq!(cur.absorbed_per_class.iter().sum::<usize>(), cur.absorbed_total);
            assert_eq!(cur.unlabeled_pool, prev.unlabeled_pool - cur.absorbed_total);
            assert_eq!(cur.labeled_pool, prev.labeled_pool + cur.absorbed_total);
        }
        let absorbed: usize = out.rounds.iter().map(|r| r.absorbed_total).sum();
        assert_eq!(absorbed, out.absorbed.len());
        assert_eq!(out.remaining.len() + absorbed, unlabeled.len());
    }
}

#[test]
fn ac09_prompt_encoder_invariants() {
    let enc_cfg = EncoderConfig::default();
    let encoder = FrozenEncoder::<f32>::new(&enc_cfg).unwrap();

    // no prompts: identical to the prompt-free encoder
    let none = PromptConfig {
        num_prompts: 0,
        ..PromptConfig::default()
    };
    let empty = PromptBank::<f32>::init(&enc_cfg, &none, 0);
    let close = |a: &[f32], b: &[f32]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-6);
    let mut rng = seeded(7);
    for _ in 0..20 {
        let frame: Vec<f32> = uniform(&mut rng, enc_cfg.tokens_per_frame * enc_cfg.token_dim, 2.0)
            .into_iter()
            .map(|v| v as f32)
            .collect();
        let (a, _) = encoder.encode_frame(&frame, &empty.vision).unwrap();
        assert!(close(&a, &encoder.encode_frame_plain(&frame).unwrap()));
    }
    for c in 0..6 {
        let (a, _) = encoder.encode_text(&anchor_tokens(c), &empty.text).unwrap();
        assert!(close(&a, &encoder.encode_text_plain(&anchor_tokens(c)).unwrap()));
    }

    // separable desk-scale set: training reaches 95% train accuracy, weights stay frozen
    let data = gen_synthetic_videos(&VideoSpec::default(), 0).unwrap();
    let videos: Vec<VideoSample> = data
        .labeled
        .iter()
        .map(|s| VideoSample::from_sample(s).unwrap())
        .collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, v) in videos.into_iter().enumerate() {
        if i % 5 == 0 {
            val.push(v)
        } else {
            train.push(v)
        }
    }
    let before = encoder.digest();
    let start = Instant::now();
    let config = PromptTrainConfig {
        target_train_accuracy: Some(0.95),
        ..PromptTrainConfig::default()
    };
    let outcome = train_prompts(&encoder, &PromptConfig::default(), &train, &val, &config).unwrap();
    let best = outcome.history.iter().map(|e| e.train_accuracy).fold(0.0, f64::max);
    println!(
        "prompt training: {} epochs, train accuracy {best:.3}, {:?}",
        outcome.history.len(),
        start.elapsed()
    );
    assert!(best >= 0.95, "train accuracy {best}");
    assert!(start.elapsed() < Duration::from_secs(120));
    assert_eq!(encoder.digest(), before);
    assert_eq!(outcome.digest_before, outcome.digest_after);
    assert_eq!(encoder, FrozenEncoder::<f32>::new(&enc_cfg).unwrap());
}

#[test]
fn ac10_file_format_fidelity() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = seeded(10);
    let specials = [0.0f32, -0.0, f32::MIN_POSITIVE, 1e-45, f32::MAX, -f32::MAX, 1.0 / 3.0];
    let values: Vec<f32> = (0..5 * 7)
        .map(|i| {
            specials
                .get(i)
                .copied()
                .unwrap_or_else(|| rng.random_range(-1e3f32..1e3))
        })
        .collect();
    let m = Matrix::new(5, 7, values).unwrap();
    let features = merfuse::FrameFeatures::new(Modality::Image, m.clone()).unwrap();
    let path = dir.path().join("x.mmf");
    write_feature_file(&path, &features).unwrap();
    let back = read_feature_file(&path, Modality::Image).unwrap();
    let bits = |m: &Matrix<f32>| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back.values), bits(&m));
    assert_eq!(back.values.shape(), (5, 7));
    assert_eq!(encode_features(&back.values), std::fs::read(&path).unwrap());

    let good = encode_features(&m);
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(matches!(
        decode_features(&bad_magic, Modality::Image),
        Err(DatasetError::BadMagic { .. })
    ));
    let mut bad_version = good.clone();
    bad_version[4] = 9;
    assert_eq!(
        decode_features(&bad_version, Modality::Image).unwrap_err(),
        DatasetError::UnsupportedVersion(9)
    );
    assert!(matches!(
        decode_features(&good[..good.len() - 4], Modality::Image),
        Err(DatasetError::Truncated { .. })
    ));
    assert!(matches!(
        decode_features(&good[..10], Modality::Image),
        Err(DatasetError::Truncated {
            expected: 16,
            found: 10
        })
    ));
    let mut trailing = good.clone();
    trailing.push(0);
    assert!(matches!(
        decode_features(&trailing, Modality::Image),
        Err(DatasetError::TrailingBytes { .. })
    ));
    let mut zero_dim = good.clone();
    zero_dim[8..12].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(
        decode_features(&zero_dim, Modality::Image),
        Err(DatasetError::EmptyDimension { frames: 0, .. })
    ));
    let bad_path = dir.path().join("bad.mmf");
    std::fs::write(&bad_path, &bad_magic).unwrap();
    match read_feature_file(&bad_path, Modality::Image).unwrap_err() {
        DatasetError::InFile { path, source } => {
            assert_eq!(path, bad_path);
            assert!(matches!(*source, DatasetError::BadMagic { .. }));
        }
        e => panic!("unexpected {e:?}"),
    }

    // model checkpoints: bit-exact through the container
    let data = gen_synthetic(&SyntheticSpec::small(), 1).unwrap();
    let config = TrainConfig {
        epochs: 2,
        hidden: 8,
        ..TrainConfig::default()
    };
    let cv = cross_validate(&pool_all(&data.labeled), &[], &config, CvOptions::default()).unwrap();
    let ckpt = dir.path().join("fold0.mmc");
    cv.models[0].save(&ckpt).unwrap();
    let loaded = FoldModel::load(&ckpt).unwrap();
    assert_eq!(loaded.to_container().encode(), std::fs::read(&ckpt).unwrap());
    assert_eq!(
        loaded.params.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        cv.models[0]
            .params
            .flatten()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    );
    let probe = pool_all(&data.labeled);
    let a = ensemble_predict(&cv.models[..1], &probe, Some(1)).unwrap();
    let b = ensemble_predict(std::slice::from_ref(&loaded), &probe, Some(1)).unwrap();
    assert_eq!(a, b);

    let bytes = std::fs::read(&ckpt).unwrap();
    assert!(matches!(
        TensorContainer::decode(&bytes[..bytes.len() - 1]),
        Err(DatasetError::Truncated { .. })
    ));
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"MMF1");
    assert!(matches!(
        TensorContainer::decode(&bad),
        Err(DatasetError::BadMagic { .. })
    ));
    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert_eq!(
        TensorContainer::decode(&bad).unwrap_err(),
        DatasetError::UnsupportedVersion(2)
    );

    // prompt banks round-trip too
    let enc_cfg = EncoderConfig::default();
    let encoder = FrozenEncoder::<f32>::new(&enc_cfg).unwrap();
    let bank = PromptBank::<f32>::init(&enc_cfg, &PromptConfig::default(), 3);
    let bank_path = dir.path().join("prompts.mmc");
    save_prompt_bank(&bank_path, &encoder, &PromptConfig::default(), &bank).unwrap();
    let (enc2, pc2, bank2) = load_prompt_bank(&bank_path).unwrap();
    assert_eq!(enc2, encoder);
    assert_eq!(pc2, PromptConfig::default());
    assert_eq!(
        bank2.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        bank.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );

    // malformed inputs surface as structured CLI errors
    let cli_error = |manifest: &str| {
        let path = write(&dir.path().join("m.jsonl"), manifest);
        let out = merfuse(&["cv", "--data", s(&path), "--out", s(&dir.path().join("o"))]);
        assert_eq!(out.status.code(), Some(1));
        let err: Value = serde_json::from_slice(&out.stderr).unwrap();
        assert_eq!(err["error"]["command"], "cv");
        err["error"]["causes"][0].as_str().unwrap().to_string()
    };
    let cause = cli_error("{\"id\": \"a\", \"label\": \"happiness\", \"features\": {\"I\": \"bad.mmf\"}}\n");
    assert!(cause.contains("bad magic"), "{cause}");
    let cause = cli_error("{\"id\": \"a\", \"label\": \"joy\", \"features\": {\"I\": \"x.mmf\"}}\n");
    assert!(cause.contains("unknown label"), "{cause}");
    let out = merfuse(&["cv", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ac11_text_augment_hermetic() {
    let texts = [
        "I can't believe it!",
        "pipes | inside | text",
        "back\\slash and \\| both",
        " | text: nested separator",
        "multi\nline",
        "emoji 😀 and ünïcødé",
        "",
    ];
    let mut rng = seeded(11);
    let alphabet: Vec<char> = "ab |\\:tex,\n".chars().collect();
    let random: Vec<String> = (0..300)
        .map(|_| {
            (0..rng.random_range(0..24))
                .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                .collect()
        })
        .collect();
    for (i, text) in texts.iter().map(|t| t.to_string()).chain(random).enumerate() {
        let mut order = [0, 1, 2, 3, 4, 5];
        order.rotate_left(i % 6);
        let t = AugmentedTranscript {
            text,
            ranking: LabelRanking::new(order).unwrap(),
        };
        assert_eq!(AugmentedTranscript::parse(&t.render()).unwrap(), t);
    }

    let prompt = "Rank the emotions.\nText: I am thrilled and a bit scared";
    let (a, b) = (MockBackend::new(), MockBackend::new());
    let first = a.complete(prompt).unwrap();
    assert_eq!(first, a.complete(prompt).unwrap());
    assert_eq!(first, b.complete(prompt).unwrap());
    let t1 = augment_transcript("so happy today", &a, RetryPolicy::default()).unwrap();
    let t2 = augment_transcript("so happy today", &b, RetryPolicy::default()).unwrap();
    assert_eq!(t1, t2);

    let dup = parse_label_ranking("happiness,happiness,sadness,anger,worry,surprise");
    assert!(matches!(dup, Err(AugmentError::DuplicateLabel { .. })), "{dup:?}");

    // under --mock the configured endpoint is never contacted
    let dir = tempfile::tempdir().unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let endpoint = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let config = write(
        &dir.path().join("c.json"),
        &format!(r#"{{"backend": {{"endpoint": "{endpoint}", "timeout_secs": 2}}}}"#),
    );
    let input = write(
        &dir.path().join("in.jsonl"),
        "{\"id\": \"1\", \"text\": \"this is outrageous\"}\n{\"id\": \"2\", \"text\": \"a calm | quiet day\"}\n",
    );
    let run = |out: &str| {
        let out = dir.path().join(out);
        merfuse_ok(&[
            "augment-text",
            "--mock",
            "--config",
            s(&config),
            "--input",
            s(&input),
            "--out",
            s(&out),
        ]);
        out
    };
    let (o1, o2) = (run("o1"), run("o2"));
    let metrics = read_json(o1.join("metrics.json"));
    assert_eq!(metrics["network_requests"], 0);
    assert_eq!(metrics["succeeded"], 2);
    assert_eq!(
        std::fs::read(o1.join("augmented.jsonl")).unwrap(),
        std::fs::read(o2.join("augmented.jsonl")).unwrap()
    );
    assert!(matches!(listener.accept(), Err(e) if e.kind() == std::io::ErrorKind::WouldBlock));
}
