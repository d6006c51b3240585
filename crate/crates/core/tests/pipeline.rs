use exaggerator_core::blackbox::{train_oracle, train_reference_classifier, ClassifierConfig, ConvClassifier};
use exaggerator_core::evalsuite::{compatibility_curve, confounding_summary, self_consistency};
use exaggerator_core::explain::{explain, saliency_from_extremes, sweep, Explainer};
use exaggerator_core::synthdata::{generate_synthetic, load_dataset, FactorRange, LoadOptions, SynthFactorSpec};
use exaggerator_core::trainer::{load_bundle, save_bundle, train_explainer, TrainOutputs};
use exaggerator_core::{BlackBox, LabeledImageDataset, TrainConfig};

fn data() -> LabeledImageDataset {
    generate_synthetic(&SynthFactorSpec {
        image_size: 16,
        samples: 200,
        seed: 4,
        jitter: 1.0,
        target: FactorRange {
            name: "radius".into(),
            lo: 2.0,
            hi: 6.0,
        },
        ..Default::default()
    })
    .unwrap()
}

fn classifier_cfg() -> ClassifierConfig {
    ClassifierConfig {
        channels: [4, 4, 4],
        epochs: 25,
        batch_size: 16,
        ..Default::default()
    }
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        delta: 0.25,
        steps: 6,
        batch_size: 8,
        base_channels: 2,
        down_steps: 1,
        gen_blocks: 1,
        disc_channels: 2,
        disc_blocks: 1,
        calibration_batches: 2,
        checkpoint_interval: 3,
        ..Default::default()
    }
}

#[test]
fn dataset_round_trips_through_disk() {
    let ds = data();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = load_dataset(dir.path(), &dir.path().join("attributes.csv"), &LoadOptions { size: 16, ..Default::default() }).unwrap();
    assert_eq!(back.images.data(), ds.images.data());
    assert_eq!(back.attributes, ds.attributes);
}

#[test]
fn train_save_load_explain() {
    let ds = data();
    let clf = train_reference_classifier(&ds, "target", &classifier_cfg()).unwrap();
    assert!(clf.manifest.validation_accuracy > 0.8, "{}", clf.manifest.validation_accuracy);

    let dir = tempfile::tempdir().unwrap();
    let outputs = |name: &str| TrainOutputs {
        metrics: Some(dir.path().join(format!("{name}.csv"))),
        checkpoints: Some(dir.path().join(format!("{name}-ckpt"))),
    };
    let a = train_explainer(&ds, &clf, &train_cfg(), &outputs("a")).unwrap();
    let b = train_explainer(&ds, &clf, &train_cfg(), &outputs("b")).unwrap();
    let (ma, mb) = (
        std::fs::read(dir.path().join("a.csv")).unwrap(),
        std::fs::read(dir.path().join("b.csv")).unwrap(),
    );
    assert_eq!(ma, mb);
    assert!(dir.path().join("a-ckpt/step-000003").exists());
    assert!(dir.path().join("a-ckpt/step-000006").exists());

    let saved = dir.path().join("bundle");
    save_bundle(&a, &saved).unwrap();
    let loaded = load_bundle(&saved).unwrap();
    let probe = ds.images.select(&[0, 1, 2]);
    assert_eq!(a.generate_all_bins(&probe).unwrap().data(), loaded.generate_all_bins(&probe).unwrap().data());
    assert_eq!(a.generate_all_bins(&probe).unwrap().data(), b.generate_all_bins(&probe).unwrap().data());

    let (out, post) = explain(&loaded, &clf, &probe, 0.5).unwrap();
    assert_eq!(out.shape(), probe.shape());
    assert_eq!(post.len(), 3);
    assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));

    let s = sweep(&loaded, &clf, &ds.images.select(&[5])).unwrap();
    assert_eq!(s.len(), loaded.spec().bins());
    let sal = saliency_from_extremes(&loaded, &ds.images.select(&[5])).unwrap();
    assert_eq!(sal.values.len(), 16 * 16);

    let queries = ds.images.select(&(0..12).collect::<Vec<_>>());
    let c = compatibility_curve(&loaded, &clf, &queries).unwrap();
    assert_eq!(c.bins.len(), 4);
    assert_eq!(c.queries, 12);
    let sc = self_consistency(&loaded, &clf, &queries).unwrap();
    assert!(sc.reconstruction.is_finite() && sc.cycle.is_finite());
}

#[test]
fn oracle_sees_the_background() {
    let ds = data();
    let oracle = train_oracle(&ds, "confounder", &classifier_cfg(), 0.9).unwrap();
    let queries = ds.images.select(&(0..10).collect::<Vec<_>>());
    let labels: Vec<u8> = (0..10).map(|i| ds.attributes[i][0]).collect();
    // an untrained explainer still produces a well-formed summary
    let bundle = exaggerator_core::ExplainerBundle::new(&train_cfg().net_config([1, 16, 16]).unwrap(), 0.25, 0).unwrap();
    let summary = confounding_summary(&bundle, &oracle, 0.9, &queries, &labels).unwrap();
    assert!((0.0..=1.0).contains(&summary.overall));
    assert!(oracle.classifier.manifest.validation_accuracy >= 0.9);
}

#[test]
fn classifiers_round_trip() {
    let ds = data();
    let clf = train_reference_classifier(&ds, "target", &classifier_cfg()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    clf.save(dir.path()).unwrap();
    let back = ConvClassifier::<f32>::load(dir.path()).unwrap();
    let x = ds.images.select(&[0, 1, 2, 3]);
    assert_eq!(clf.predict_posterior(&x).unwrap(), back.predict_posterior(&x).unwrap());
    assert_eq!(back.manifest, clf.manifest);
}
