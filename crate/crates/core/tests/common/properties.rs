//! Structural invariants as proptest properties. Each check returns the
//! shrunk counterexample on failure.

use std::fs;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rdi_core::analysis::{accuracy_decomposition, PredictionRecord};
use rdi_core::config::ExperimentConfig;
use rdi_core::data::{build_schedule, generate_synthetic, IndexOnlyDataset, SyntheticSpec};
use rdi_core::experiment::run_experiment;
use rdi_core::model::{cosine_logits, global_pool, predict, predict_in_range, Architecture, Backbone, BackboneConfig};
use rdi_core::protocol::{init_classifier, run_incremental, IncrementalOptions, PrototypePooling};
use rdi_core::rdi::{ali_mask, alr_mask, extend_with_dummy};
use rdi_core::types::{CosineClassifier, FeatureMap, PooledFeature};

pub type Check = Result<(), String>;

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Check {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn map_and_classifier() -> impl Strategy<Value = (FeatureMap, CosineClassifier, usize)> {
    (1usize..=4, 1usize..=4, 1usize..=6, 1usize..=5).prop_flat_map(|(h, w, d, n)| {
        (
            prop::collection::vec(-2.0f64..2.0, h * w * d),
            prop::collection::vec(0.1f64..2.0, d * n),
            prop::collection::vec(prop::bool::ANY, d * n),
            0..n,
        )
            .prop_map(move |(values, mags, signs, y)| {
                let weights = mags.iter().zip(signs).map(|(m, s)| if s { *m } else { -m }).collect();
                (
                    FeatureMap::new(h, w, d, values).unwrap(),
                    CosineClassifier::from_columns_flat(d, n, weights, 16.0).unwrap(),
                    y,
                )
            })
    })
}

pub fn mask_partition() -> Check {
    run(256, (map_and_classifier(), -1.2f64..1.2), |((map, clf, y), rho)| {
        let alr = alr_mask(&map, &clf, y, rho).unwrap();
        let ali = ali_mask(&alr).unwrap();
        for (a, b) in alr.bits().iter().zip(ali.bits()) {
            prop_assert_eq!(u8::from(*a) + u8::from(*b), 1);
        }
        prop_assert_eq!(alr.support() + ali.support(), map.patch_count());
        Ok(())
    })
}

pub fn threshold_monotonicity() -> Check {
    run(256, (map_and_classifier(), -1.2f64..1.2, 0.0f64..1.0), |((map, clf, y), lo, delta)| {
        let loose = alr_mask(&map, &clf, y, lo).unwrap();
        let tight = alr_mask(&map, &clf, y, lo + delta).unwrap();
        for (l, t) in loose.bits().iter().zip(tight.bits()) {
            prop_assert!(!*t || *l);
        }
        Ok(())
    })
}

/// Prediction ignores the dummy column, even for a feature aligned with it.
pub fn dummy_exclusion() -> Check {
    run(256, (map_and_classifier(), any::<u64>(), prop::bool::ANY), |((map, clf, _), seed, aim)| {
        let with_dummy = extend_with_dummy(&clf, seed).unwrap();
        let dummy = with_dummy.dummy_index().unwrap();
        let f = if aim {
            PooledFeature::raw(with_dummy.column(dummy).to_vec())
        } else {
            global_pool(&map)
        };
        prop_assume!(!f.is_zero());
        prop_assert_eq!(cosine_logits(&with_dummy, &f).unwrap().len(), dummy + 1);
        let p = predict(&with_dummy, &f).unwrap();
        prop_assert!(p < dummy);
        prop_assert_eq!(p, predict(&clf, &f).unwrap());
        Ok(())
    })
}

/// AA is the sample-weighted mean of BA and NA, and NN >= NA, for
/// predictions made the way the evaluator makes them.
pub fn accuracy_identities() -> Check {
    let strategy = (
        any::<u64>(),
        prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..40),
        1usize..=3,
    );
    run(256, strategy, |(seed, features, session)| {
        let schedule = build_schedule(&IndexOnlyDataset::new("toy", 9, 3, 2), 3, 3, 2, 1, seed).unwrap();
        let clf = init_classifier(4, 9, 16.0, seed).unwrap();
        let seen = schedule.classes_seen(session).len();
        let base = schedule.base_count();
        let records: Vec<PredictionRecord> = features
            .iter()
            .enumerate()
            .filter(|(_, f)| f.iter().any(|&x| x != 0.0))
            .map(|(i, f)| {
                let truth = i % seen;
                PredictionRecord {
                    truth,
                    full: predict_in_range(&clf, f, 0..seen).unwrap(),
                    novel_only: (truth >= base).then(|| predict_in_range(&clf, f, base..seen).unwrap()),
                }
            })
            .collect();
        prop_assume!(records.iter().any(|r| r.truth >= base));
        let acc = accuracy_decomposition(&records, &schedule, session).unwrap();
        let (na, nn) = (acc.na.unwrap(), acc.nn.unwrap());
        let weighted = (acc.ba * acc.base_samples as f64 + na * acc.novel_samples as f64)
            / (acc.base_samples + acc.novel_samples) as f64;
        prop_assert!((acc.aa - weighted).abs() < 1e-12);
        prop_assert!(nn >= na);
        Ok(())
    })
}

pub fn tiny_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        image_size: 16,
        class_count: 5,
        samples_per_class: 4,
        test_samples_per_class: 2,
        signal_patch_size: 6,
        nuisance_patch_size: 6,
        seed,
        ..SyntheticSpec::default()
    }
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig::new(Architecture::SmallConv4, 16).with_widths(vec![4, 4, 8, 8])
}

pub fn frozen_backbone() -> Check {
    run(8, any::<u64>(), |seed| {
        let data = generate_synthetic(&tiny_spec(seed)).unwrap();
        let schedule = build_schedule(&data, 3, 2, 1, 2, seed).unwrap();
        let backbone = Backbone::new(tiny_backbone(), seed).unwrap();
        let before = backbone.param_hash();
        let clf = init_classifier(backbone.feature_dim(), 3, 16.0, seed).unwrap();
        let clf = extend_with_dummy(&clf, seed).unwrap();
        let options = IncrementalOptions {
            prototype_pooling: PrototypePooling::Global,
            threshold: 0.0,
        };
        let outcome = run_incremental(&backbone, &clf, &data, &schedule, &options).unwrap();
        prop_assert_eq!(outcome.states.len(), 3);
        for s in &outcome.states {
            prop_assert_eq!(&s.backbone_hash, &before);
        }
        prop_assert_eq!(backbone.param_hash(), before);
        Ok(())
    })
}

/// Two full runs of one config and seed write byte-identical metrics.csv.
pub fn run_determinism() -> Check {
    run(3, 0u64..1000, |seed| {
        let mut cfg = ExperimentConfig {
            name: "det".into(),
            seed,
            model: tiny_backbone(),
            ..ExperimentConfig::default()
        };
        cfg.data.base_classes = 3;
        cfg.data.sessions = 2;
        cfg.data.way = 1;
        cfg.data.shot = 2;
        cfg.data.synthetic = tiny_spec(0);
        cfg.protocol.base_epochs = 2;
        cfg.protocol.rdi_epochs = 2;
        cfg.protocol.batch_size = 4;
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = run_experiment(&cfg, a.path()).unwrap();
        let rb = run_experiment(&cfg, b.path()).unwrap();
        let ma = fs::read(ra.dir.join("metrics.csv")).unwrap();
        let mb = fs::read(rb.dir.join("metrics.csv")).unwrap();
        prop_assert_eq!(ma, mb);
        Ok(())
    })
}

pub fn all_checks() -> Vec<(&'static str, Check)> {
    vec![
        ("mask partition", mask_partition()),
        ("threshold monotonicity", threshold_monotonicity()),
        ("dummy exclusion", dummy_exclusion()),
        ("frozen backbone", frozen_backbone()),
        ("AA weighted mean, NN >= NA", accuracy_identities()),
        ("run determinism", run_determinism()),
    ]
}
