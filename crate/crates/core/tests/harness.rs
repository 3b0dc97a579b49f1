mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use common::fixtures::{tiny_config, tiny_spec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidcap::afs::{frame_dissimilarity, Metric};
use vidcap::decoder::{GenerationRequest, Strategy};
use vidcap::harness::{
    batch_loss, clip_gradients, evaluate_records, generate_synthetic_dataset, harmonic_mean,
    plan_dataset, render_video, score_predictions, select_best, Color, EvalPoint, Motion, Phase,
    Prediction, Sample, Shape, SyntheticSpec, TrainConfig, TrainedModel, Trainer,
};
use vidcap::tensor::Tensor;
use vidcap::text::{CaptionRecord, Split};
use vidcap::Error;

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn dataset(spec: &SyntheticSpec) -> (tempfile::TempDir, Vec<CaptionRecord>) {
    let dir = tempfile::tempdir().unwrap();
    let records = generate_synthetic_dataset(spec, dir.path()).unwrap();
    (dir, records)
}

#[test]
fn single_combination_renders_and_captions() {
    let spec = SyntheticSpec {
        videos: 1,
        shapes: vec![Shape::Square],
        colors: vec![Color::Red],
        motions: vec![Motion::Left],
        templates: 3,
        ..SyntheticSpec::default()
    };
    let (dir, records) = dataset(&spec);
    assert_eq!(records[0].captions[0], "a red square moves left");
    assert_eq!(records[0].captions.len(), 3);
    let clip = vidcap::video::VideoClip::load(dir.path().join(&records[0].video)).unwrap();
    assert_eq!((clip.frames, clip.height, clip.width), (16, 16, 16));
    let frame = clip.frame(0);
    assert!(frame.chunks(3).all(|p| p[1] == 0.0 && p[2] == 0.0));
    assert!(frame.chunks(3).any(|p| p[0] == 1.0));
    // the square moves left over the second half
    let centroid = |t: usize| {
        let (mut sx, mut s) = (0.0, 0.0);
        for (i, p) in clip.frame(t).chunks(3).enumerate() {
            sx += (i % 16) as f64 * p[0] as f64;
            s += p[0] as f64;
        }
        sx / s
    };
    assert_eq!(centroid(0), centroid(7));
    assert!(centroid(15) < centroid(8) && centroid(8) < centroid(7));
}

#[test]
fn first_combinations_are_distinct_and_splits_ordered() {
    let spec = SyntheticSpec {
        videos: 40,
        val: 5,
        test: 3,
        ..SyntheticSpec::default()
    };
    let plans = plan_dataset(&spec).unwrap();
    let combos: std::collections::HashSet<_> = plans[..36]
        .iter()
        .map(|p| (p.shape, p.color, p.motion))
        .collect();
    assert_eq!(combos.len(), 36);
    let splits: Vec<Split> = plans.iter().map(|p| p.split).collect();
    assert!(splits[..32].iter().all(|&s| s == Split::Train));
    assert!(splits[32..37].iter().all(|&s| s == Split::Val));
    assert!(splits[37..].iter().all(|&s| s == Split::Test));
}

#[test]
fn regeneration_is_byte_identical() {
    let spec = tiny_spec(10, 5);
    let (a, _) = dataset(&spec);
    let (b, _) = dataset(&spec);
    let ta = read_tree(a.path());
    assert_eq!(ta.len(), 10 + 5);
    assert_eq!(ta, read_tree(b.path()));
    let (c, _) = dataset(&SyntheticSpec { seed: 6, ..spec });
    assert_ne!(ta, read_tree(c.path()));
}

#[test]
fn dissimilarity_is_zero_before_motion_and_positive_after() {
    let spec = SyntheticSpec {
        videos: 20,
        motions: vec![Motion::Left, Motion::Up, Motion::Static],
        ..Default::default()
    };
    let start = spec.motion_start();
    for plan in plan_dataset(&spec).unwrap() {
        let clip = render_video(&spec, &plan);
        let d = frame_dissimilarity::<f64>(&clip, Metric::Mad).unwrap();
        let d = d.values();
        assert!(d[..start - 1].iter().all(|&x| x == 0.0), "{:?}", plan.id);
        if plan.motion == Motion::Static {
            assert!(d.iter().all(|&x| x == 0.0));
        } else {
            assert!(
                d[start - 1..].iter().all(|&x| x > 0.0),
                "{}: {d:?}",
                plan.id
            );
        }
    }
}

#[test]
fn synthetic_spec_validation() {
    let bad = [
        SyntheticSpec {
            videos: 0,
            ..Default::default()
        },
        SyntheticSpec {
            static_prefix: 1.0,
            ..Default::default()
        },
        SyntheticSpec {
            templates: 4,
            ..Default::default()
        },
        SyntheticSpec {
            val: 10,
            test: 6,
            ..Default::default()
        },
        SyntheticSpec {
            colors: vec![],
            ..Default::default()
        },
    ];
    for spec in bad {
        assert!(
            matches!(plan_dataset(&spec), Err(Error::Config(_))),
            "{spec:?}"
        );
    }
    let text = r#"{"videos": 4, "frames": 8, "height": 8, "width": 8, "shapes": ["circle"], "colors": ["blue"],
        "motions": ["up"], "static_prefix": 0.5, "templates": 1, "seed": 1, "val": 0, "test": 0, "noise": 1}"#;
    assert!(serde_json::from_str::<SyntheticSpec>(text).is_err());
}

fn trainer(config: &TrainConfig, videos: usize) -> (tempfile::TempDir, Trainer) {
    let (dir, records) = dataset(&tiny_spec(videos, 3));
    let t = Trainer::new(config, &records, dir.path()).unwrap();
    (dir, t)
}

/// Mean BCE of `probs` against binary `labels`.
fn bce_from_probs(probs: &Tensor<f64>, labels: &Tensor<f64>) -> f64 {
    let terms: f64 = probs
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&p, &y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
        .sum();
    terms / probs.len() as f64
}

#[test]
fn loss_composition_holds_for_any_lambda() {
    let (_dir, t) = trainer(&tiny_config(0, 0), 8);
    let samples: Vec<Sample<'_>> = (0..t.data.len())
        .map(|v| Sample {
            clip: &t.data.clips[v],
            words: &t.data.captions[v][v % 2],
            labels: &t.data.labels[v],
        })
        .collect();
    let base = batch_loss(&t.model, &t.store, &samples, Phase::EndToEnd, 0.0, 0.0, 1).unwrap();
    assert_eq!(base.total, base.ce.unwrap());

    // independent evaluation-mode terms; every dropout rate is zero
    let inv = 1.0 / samples.len() as f64;
    let (mut ce, mut bce) = (0.0, 0.0);
    for s in &samples {
        ce += t.model.caption_ce(&t.store, s.clip, s.words).unwrap() * inv;
        bce += bce_from_probs(&t.model.encode(&t.store, s.clip).unwrap().0, s.labels) * inv;
    }
    assert!((base.ce.unwrap() - ce).abs() < 1e-12);
    assert!((base.bce - bce).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let lambdas: Vec<f64> = [0.1, 1.0]
        .into_iter()
        .chain((0..5).map(|_| rng.random_range(0.0..10.0)))
        .collect();
    for lambda in lambdas {
        let out = batch_loss(
            &t.model,
            &t.store,
            &samples,
            Phase::EndToEnd,
            lambda,
            0.0,
            1,
        )
        .unwrap();
        let ce = out.ce.unwrap();
        assert!(
            (out.total - (ce + lambda * out.bce)).abs() < 1e-12,
            "lambda {lambda}"
        );
        assert_eq!(ce, base.ce.unwrap());
        assert_eq!(out.bce, base.bce);
    }
    let pre = batch_loss(
        &t.model,
        &t.store,
        &samples,
        Phase::SemanticPretrain,
        0.1,
        0.0,
        1,
    )
    .unwrap();
    assert!(pre.ce.is_none());
    assert!((pre.total - base.bce).abs() < 1e-12);
}

#[test]
fn pretrain_only_moves_the_concept_head() {
    let (_dir, mut t) = trainer(&tiny_config(3, 0), 6);
    let before = t.store.clone();
    t.run_next_phase().unwrap();
    let mut head_moved = false;
    for (i, name) in before.names().iter().enumerate() {
        let same = before.tensors()[i] == t.store.tensors()[i];
        if name.starts_with("concept.") {
            head_moved |= !same;
        } else {
            assert!(same, "{name} changed during pretraining");
        }
    }
    assert!(head_moved);
    assert!(t.log.iter().all(|s| s.ce.is_none()));
}

#[test]
fn clip_gradients_bounds_the_global_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for scale in [1e-3, 1.0, 100.0] {
        let mut grads: Vec<Option<Tensor<f64>>> = vec![
            Some(Tensor::randn(vec![3, 4], scale, &mut rng)),
            None,
            Some(Tensor::randn(vec![7], scale, &mut rng)),
        ];
        let original = grads.clone();
        let norm = |g: &[Option<Tensor<f64>>]| {
            g.iter()
                .flatten()
                .flat_map(|t| t.data().iter())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
        };
        let (before, after) = clip_gradients(&mut grads, 0.05);
        assert!((before - norm(&original)).abs() < 1e-12 * before.max(1.0));
        assert!(norm(&grads) <= 0.05 + 1e-12);
        assert!((after - norm(&grads)).abs() < 1e-15);
        assert!(grads[1].is_none());
        if before <= 0.05 {
            assert_eq!(grads, original);
        }
    }
}

#[test]
fn every_training_step_is_clipped() {
    let (_dir, mut t) = trainer(&tiny_config(5, 25), 6);
    t.run().unwrap();
    assert_eq!(t.log.len(), 30);
    assert!(t.log.iter().any(|s| s.grad_norm > 0.05));
    for s in &t.log {
        assert!(
            s.clipped_norm <= 0.05 + 1e-12,
            "step {}: {}",
            s.step,
            s.clipped_norm
        );
        if let Some(ce) = s.ce {
            assert!((s.total - (ce + 0.1 * s.bce)).abs() < 1e-12);
        }
    }
    assert!(t.log.windows(2).all(|w| w[1].step == w[0].step + 1));
}

#[test]
fn checkpoint_round_trip_at_stored_precision() {
    let (dir, mut t) = trainer(&tiny_config(2, 4), 6);
    t.run().unwrap();
    let mut model = t.final_model();
    let ckpt = tempfile::tempdir().unwrap();
    model.save(ckpt.path()).unwrap();
    let loaded = TrainedModel::load(ckpt.path()).unwrap();
    model.store.round_to_f32();
    assert_eq!(loaded.store.names(), model.store.names());
    assert_eq!(loaded.store.tensors(), model.store.tensors());
    assert_eq!(loaded.vocab.words(), model.vocab.words());
    assert_eq!(loaded.config, model.config);
    let clip = vidcap::video::VideoClip::load(dir.path().join("videos/v0000.vvid")).unwrap();
    let (p0, m0) = model
        .model
        .encode(&model.store, &model.select(&clip).unwrap())
        .unwrap();
    let (p1, m1) = loaded
        .model
        .encode(&loaded.store, &loaded.select(&clip).unwrap())
        .unwrap();
    assert_eq!((p0, m0), (p1, m1));
    let req = GenerationRequest::default();
    assert_eq!(
        model.caption(&clip, &req).unwrap(),
        loaded.caption(&clip, &req).unwrap()
    );

    let manifest = fs::read_to_string(ckpt.path().join("manifest.json")).unwrap();
    let names: Vec<String> = serde_json::from_str::<serde_json::Value>(&manifest).unwrap()
        ["params"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["name"].as_str().unwrap().to_string())
        .collect();
    assert!(names.windows(2).all(|w| w[0] < w[1]));

    let params = ckpt.path().join("params.bin");
    let bytes = fs::read(&params).unwrap();
    fs::write(&params, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(
        TrainedModel::load(ckpt.path()),
        Err(Error::Data(_))
    ));
    fs::remove_file(&params).unwrap();
    assert!(matches!(
        TrainedModel::load(ckpt.path()),
        Err(Error::Data(_))
    ));
}

#[test]
fn select_best_examples() {
    let p = |step, bleu4, cider_d| EvalPoint {
        step,
        bleu4,
        cider_d,
    };
    assert_eq!(select_best(&[]), None);
    assert_eq!(select_best(&[p(7, 0.0, 0.0)]), Some(7));
    assert_eq!(select_best(&[p(1, 50.0, 5.0), p(2, 100.0, 0.0)]), Some(1));
    assert_eq!(harmonic_mean(40.0, 60.0), 48.0);
    assert_eq!(select_best(&[p(1, 45.0, 4.5), p(2, 40.0, 6.0)]), Some(2));
    assert_eq!(select_best(&[p(3, 40.0, 6.0), p(4, 60.0, 4.0)]), Some(3));
    assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
}

#[test]
fn configs_reject_unknown_keys_and_bad_phase_order() {
    let desk = serde_json::to_value(TrainConfig::desk()).unwrap();
    let mut extra = desk.clone();
    extra["momentum"] = serde_json::json!(0.9);
    assert!(serde_json::from_value::<TrainConfig>(extra).is_err());
    let mut nested = desk.clone();
    nested["encoder"]["dropout"] = serde_json::json!(0.1);
    assert!(serde_json::from_value::<TrainConfig>(nested).is_err());
    let mut missing = desk.clone();
    missing.as_object_mut().unwrap().remove("lambda");
    assert!(serde_json::from_value::<TrainConfig>(missing).is_err());

    let mut c = TrainConfig::desk();
    c.phases.reverse();
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = TrainConfig::desk();
    c.lambda = -0.1;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = TrainConfig::desk();
    c.max_caption_len = 31;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    TrainConfig::full_scale().validate().unwrap();
}

#[test]
fn shipped_configs_match_presets() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    assert_eq!(
        TrainConfig::load(root.join("desk.json")).unwrap(),
        TrainConfig::desk()
    );
    assert_eq!(
        TrainConfig::load(root.join("overfit.json")).unwrap(),
        TrainConfig::overfit()
    );
    let spec: SyntheticSpec =
        serde_json::from_str(&fs::read_to_string(root.join("overfit_data.json")).unwrap()).unwrap();
    assert_eq!(spec.videos, 16);
    spec.validate().unwrap();
}

#[test]
fn evaluation_contracts() {
    let (dir, mut t) = trainer(&tiny_config(2, 6), 8);
    t.run().unwrap();
    let model = t.final_model();
    let records: Vec<CaptionRecord> =
        vidcap::text::read_jsonl(dir.path().join("corpus.jsonl")).unwrap();
    let req = |strategy, beam_width| GenerationRequest {
        strategy,
        beam_width,
        ..GenerationRequest::default()
    };
    let greedy = evaluate_records(
        &model,
        &records,
        dir.path(),
        &req(Strategy::Greedy, 1),
        false,
    )
    .unwrap();
    let beam1 =
        evaluate_records(&model, &records, dir.path(), &req(Strategy::Beam, 1), false).unwrap();
    assert_eq!(greedy.predictions, beam1.predictions);
    let a = evaluate_records(&model, &records, dir.path(), &req(Strategy::Beam, 3), true).unwrap();
    let b = evaluate_records(&model, &records, dir.path(), &req(Strategy::Beam, 3), true).unwrap();
    assert_eq!(
        serde_json::to_string(&a.report).unwrap(),
        serde_json::to_string(&b.report).unwrap()
    );
    assert_eq!(a.predictions, b.predictions);
    assert_eq!(a.report.failed, 0);

    fs::remove_file(dir.path().join(&records[1].video)).unwrap();
    let partial =
        evaluate_records(&model, &records, dir.path(), &req(Strategy::Beam, 3), false).unwrap();
    assert_eq!(partial.report.failed, 1);
    assert_eq!(partial.errors.len(), 1);
    assert_eq!(partial.errors[0].0, records[1].id);
    assert_eq!(partial.predictions.len(), records.len() - 1);

    let rescored = score_predictions(&partial.predictions, &records, &records, false).unwrap();
    assert_eq!(rescored.failed, 1);
    assert_eq!(rescored.bleu4, partial.report.bleu4);
    let dup = [
        partial.predictions.clone(),
        partial.predictions[..1].to_vec(),
    ]
    .concat();
    assert!(score_predictions(&dup, &records, &records, false).is_err());
    let stray = [Prediction {
        id: "nope".into(),
        caption: "a".into(),
    }];
    assert!(score_predictions(&stray, &records, &records, false).is_err());
}

/// Mean teacher-forced CE over every training caption.
fn training_ce(t: &Trainer) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (clip, caps) in t.data.clips.iter().zip(&t.data.captions) {
        for words in caps {
            total += t.model.caption_ce(&t.store, clip, words).unwrap();
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn training_lowers_teacher_forced_ce_across_seeds() {
    let spec: SyntheticSpec = serde_json::from_str(
        &fs::read_to_string(
            Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/overfit_data.json"),
        )
        .unwrap(),
    )
    .unwrap();
    let (dir, records) = dataset(&spec);
    let seeds = 20;
    let mut improved = 0;
    for seed in 0..seeds {
        let mut config = TrainConfig::overfit();
        config.seed = seed;
        config.phases.retain(|p| p.phase == Phase::EndToEnd);
        config.phases[0].steps = 200;
        config.eval_split = Split::Val;
        let mut t = Trainer::new(&config, &records, dir.path()).unwrap();
        let initial = training_ce(&t);
        t.run().unwrap();
        improved += usize::from(training_ce(&t) < initial);
    }
    assert!(
        improved * 100 >= 95 * seeds as usize,
        "{improved}/{seeds} seeds improved"
    );
}
