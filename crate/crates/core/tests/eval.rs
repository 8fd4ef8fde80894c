mod common;

use std::collections::{HashMap, HashSet};

use chrono::{Days, NaiveDate};
use dexvec::eval::*;
use dexvec::nn::{init_params, Architecture, Tensor};
use dexvec::par::Exec;
use dexvec::synth;
use proptest::prelude::*;

fn record(i: usize, label: Label, day: u64) -> SampleRecord {
    SampleRecord {
        id: format!("id{i:05}"),
        image_path: String::new(),
        label,
        dex_date: NaiveDate::from_ymd_opt(2018, 1, 1).unwrap() + Days::new(day),
        obfuscated_of: None,
    }
}

fn arb_records(max: usize) -> impl Strategy<Value = Vec<SampleRecord>> {
    prop::collection::vec((any::<bool>(), 0u64..1500), 10..max).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (m, day))| record(i, if m { Label::Malware } else { Label::Goodware }, day))
            .collect()
    })
}

fn all_ids(plan: &SplitPlan) -> HashSet<&String> {
    plan.train.iter().chain(&plan.valid).chain(&plan.test).collect()
}

proptest! {
    #[test]
    fn holdout_is_disjoint_and_covering(records in arb_records(400), seed in any::<u64>(), reps in 1usize..4) {
        let plans = make_holdout_splits(&records, seed, reps).unwrap();
        prop_assert_eq!(plans.len(), reps);
        let expected: HashSet<&String> = records.iter().map(|r| &r.id).collect();
        for plan in &plans {
            prop_assert!(plan.is_disjoint());
            prop_assert_eq!(all_ids(plan), expected.clone());
            let n = records.len() as f64;
            prop_assert!((plan.train.len() as f64 - 0.8 * n).abs() <= 1.0);
            prop_assert!((plan.valid.len() as f64 - 0.1 * n).abs() <= 1.0);
            prop_assert!((plan.test.len() as f64 - 0.1 * n).abs() <= 1.0);
        }
    }

    #[test]
    fn temporal_split_respects_time(records in arb_records(300), cutoff_day in 100u64..1400, seed in any::<u64>()) {
        let cutoff = NaiveDate::from_ymd_opt(2018, 1, 1).unwrap() + Days::new(cutoff_day);
        let dates: HashMap<&String, NaiveDate> = records.iter().map(|r| (&r.id, r.dex_date)).collect();
        match make_temporal_split(&records, cutoff, seed) {
            Ok(plan) => {
                prop_assert!(plan.is_disjoint());
                prop_assert_eq!(all_ids(&plan).len(), records.len());
                let latest_train = plan.train.iter().chain(&plan.valid).map(|id| dates[id]).max().unwrap();
                let earliest_test = plan.test.iter().map(|id| dates[id]).min().unwrap();
                prop_assert!(latest_train < earliest_test);
                let before = records.iter().filter(|r| r.dex_date < cutoff).count();
                prop_assert_eq!(plan.test.len(), records.len() - before);
            }
            Err(EvalError::EmptySide { before, after }) => prop_assert!(before == 0 || after == 0),
            Err(e) => prop_assert!(false, "{}", e),
        }
    }

    #[test]
    fn augmentation_is_sound(
        records in arb_records(200),
        has_variant in prop::collection::vec(any::<bool>(), 200),
        fraction in 0.0f64..=1.0,
        mode in 0u8..3,
        seed in any::<u64>(),
    ) {
        let obf: Vec<SampleRecord> = records
            .iter()
            .zip(&has_variant)
            .filter(|(_, &v)| v)
            .map(|(r, _)| SampleRecord { id: format!("{}-o", r.id), obfuscated_of: Some(r.id.clone()), ..r.clone() })
            .collect();
        let test = [ObfuscatedTest::Base, ObfuscatedTest::Obfuscated, ObfuscatedTest::AllObfuscated][mode as usize];
        let opts = AugmentOptions { fraction, test, seed, ..AugmentOptions::default() };
        let plan = make_augmented_split(&records, &obf, &opts).unwrap();
        prop_assert!(plan.is_disjoint());
        let base_of: HashMap<&str, &str> =
            obf.iter().map(|r| (r.id.as_str(), r.obfuscated_of.as_deref().unwrap())).collect();
        let train_valid: HashSet<&str> = plan.train.iter().chain(&plan.valid).map(String::as_str).collect();
        for (part, name) in [(&plan.train, "train"), (&plan.valid, "valid")] {
            let own: HashSet<&str> = part.iter().map(String::as_str).collect();
            for id in part {
                if let Some(base) = base_of.get(id.as_str()) {
                    prop_assert!(own.contains(base), "{} variant {} away from its base", name, id);
                }
            }
        }
        for id in &plan.test {
            match test {
                ObfuscatedTest::Base => {
                    prop_assert!(!base_of.contains_key(id.as_str()));
                    prop_assert!(!train_valid.contains(id.as_str()));
                }
                ObfuscatedTest::Obfuscated => {
                    let base = base_of[id.as_str()];
                    prop_assert!(!train_valid.contains(base));
                }
                ObfuscatedTest::AllObfuscated => {
                    prop_assert!(base_of.contains_key(id.as_str()));
                    prop_assert!(!train_valid.contains(id.as_str()));
                }
            }
        }
    }

    #[test]
    fn metric_identities(tp in 0u64..50, fp in 0u64..50, tn in 0u64..50, fn_ in 0u64..50) {
        prop_assume!(tp + fp + tn + fn_ > 0);
        let r = MetricsReport::from_confusion(Confusion::new(tp, fp, tn, fn_), 0.5);
        if let (Some(p), Some(rec), Some(f1)) = (r.precision, r.recall, r.f1) {
            prop_assert!((f1 - 2.0 / (1.0 / p + 1.0 / rec)).abs() < 1e-12);
        }
        let acc = r.accuracy.unwrap();
        let class_acc: Vec<f64> = [(tp, tp + fn_), (tn, tn + fp)]
            .iter()
            .filter(|(_, d)| *d > 0)
            .map(|(n, d)| *n as f64 / *d as f64)
            .collect();
        let lo = class_acc.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = class_acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo - 1e-12 <= acc && acc <= hi + 1e-12);
        for v in r.values().into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn auc_is_mann_whitney(data in prop::collection::vec((0u8..20, any::<bool>()), 2..300)) {
        let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 20.0).collect();
        let labels: Vec<Label> =
            data.iter().map(|(_, m)| if *m { Label::Malware } else { Label::Goodware }).collect();
        prop_assume!(labels.iter().any(|l| l.is_malware()) && labels.iter().any(|l| !l.is_malware()));
        let curve = roc_curve(&scores, &labels).unwrap();
        prop_assert!((curve.auc - common::mann_whitney(&scores, &labels)).abs() < 1e-9);
        prop_assert_eq!(curve.points.first(), Some(&(0.0, 0.0)));
        prop_assert_eq!(curve.points.last(), Some(&(1.0, 1.0)));
        for w in curve.points.windows(2) {
            prop_assert!(w[0].0 <= w[1].0 && w[0].1 <= w[1].1);
        }
        let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(roc_curve(&transformed, &labels).unwrap().auc, curve.auc);
    }
}

// ---------------------------------------------------------------------------
// Training

fn tiny_samples(n: usize, seed: u64) -> Vec<Sample> {
    let corpus = synth::periodic_vs_uniform(seed, n, 64);
    dataset_at_width(&corpus, 64).unwrap().samples().to_vec()
}

fn tiny_arch() -> Architecture {
    Architecture::custom(64, 4, 2, [3, 4], 5).unwrap()
}

fn refs(samples: &[Sample]) -> Vec<&Sample> {
    samples.iter().collect()
}

#[test]
fn constant_validation_accuracy_stops_at_51() {
    let samples = tiny_samples(12, 1);
    let cfg = TrainConfig { lr: 1e-300, ..TrainConfig::default() };
    let out = train(init_params(3, tiny_arch()).unwrap(), &refs(&samples[..8]), &refs(&samples[8..]), &cfg).unwrap();
    assert_eq!(out.history.len(), 51);
    assert_eq!(out.best_epoch, 1);
    assert!(out.history[0].improved);
    assert!(out.history[1..].iter().all(|h| !h.improved));
}

#[test]
fn best_epoch_parameters_are_returned() {
    let samples = tiny_samples(60, 2);
    for seed in 0..3 {
        let cfg = TrainConfig { max_epochs: 40, patience: 10, batch_size: 8, lr: 0.01, seed, ..TrainConfig::default() };
        let (train_set, valid_set) = (refs(&samples[..40]), refs(&samples[40..]));
        let out = train(init_params(seed, tiny_arch()).unwrap(), &train_set, &valid_set, &cfg).unwrap();
        let best = out.history.iter().map(|h| h.valid_accuracy).fold(0.0, f64::max);
        assert_eq!(out.best_valid_accuracy, best);
        assert_eq!(out.history[out.best_epoch - 1].valid_accuracy, best);
        let again = evaluate(&out.network, &valid_set, 0.5, Exec::Sequential).unwrap();
        assert_eq!(again.accuracy, Some(best));
        assert_eq!(out.optimizer.step as usize, out.best_epoch * 5);
    }
}

#[test]
fn separable_toy_corpus_is_learned() {
    let corpus = synth::periodic_vs_uniform(5, 40, 1024);
    let ds = dataset_at_width(&corpus, 1024).unwrap();
    let all = refs(ds.samples());
    let cfg = TrainConfig { stop_on_perfect_validation: true, batch_size: 8, ..TrainConfig::default() };
    let out = train(init_params(5, Architecture::new(1024).unwrap()).unwrap(), &all, &all, &cfg).unwrap();
    assert_eq!(out.best_valid_accuracy, 1.0);
    assert!(out.history.len() < 200);
}

#[test]
fn training_is_deterministic_across_exec_modes() {
    let samples = tiny_samples(40, 3);
    let run = |exec| {
        let cfg = TrainConfig { max_epochs: 6, batch_size: 7, lr: 0.01, seed: 9, exec, ..TrainConfig::default() };
        train(init_params(9, tiny_arch()).unwrap(), &refs(&samples[..30]), &refs(&samples[30..]), &cfg).unwrap()
    };
    let (a, b, c) = (run(Exec::Parallel), run(Exec::Parallel), run(Exec::Sequential));
    assert_eq!(a.history, b.history);
    assert_eq!(a.network, b.network);
    assert_eq!(a.history, c.history);
    assert_eq!(a.network, c.network);
    assert_eq!(a.optimizer, c.optimizer);
}

#[test]
fn non_finite_input_names_the_epoch() {
    let mut samples = tiny_samples(10, 4);
    samples[0].image = Tensor::from_vec(vec![64], vec![f64::NAN; 64]);
    let cfg = TrainConfig { max_epochs: 3, ..TrainConfig::default() };
    let err = train(init_params(1, tiny_arch()).unwrap(), &refs(&samples[..6]), &refs(&samples[6..]), &cfg).unwrap_err();
    assert!(matches!(err, EvalError::Training { epoch: 1, .. }), "{err}");
}

#[test]
fn config_is_validated() {
    let samples = tiny_samples(10, 4);
    let cfg = TrainConfig { batch_size: 0, ..TrainConfig::default() };
    let err = train(init_params(1, tiny_arch()).unwrap(), &refs(&samples[..6]), &refs(&samples[6..]), &cfg);
    assert!(matches!(err, Err(EvalError::InvalidConfig(_))));
    let cfg = TrainConfig::default();
    let err = train(init_params(1, tiny_arch()).unwrap(), &refs(&samples[..6]), &[], &cfg);
    assert!(matches!(err, Err(EvalError::EmptyPartition("valid"))));
}

#[test]
fn single_width_ablation_is_the_plain_protocol() {
    let corpus = synth::periodic_vs_uniform(8, 30, 2048);
    let cfg = TrainConfig { max_epochs: 3, ..TrainConfig::default() };
    let opts = AblationOptions { widths: vec![1024], repetitions: 2, seed: 4, same_padding_fallback: false };
    let rows = resize_ablation(&opts, &cfg, |w| dataset_at_width(&corpus, w)).unwrap();
    assert_eq!(rows.len(), 1);
    let plain =
        run_holdout_protocol(&dataset_at_width(&corpus, 1024).unwrap(), Architecture::new(1024).unwrap(), &cfg, 2, 4)
            .unwrap();
    assert_eq!(rows[0].result.reports(), plain.reports());
    assert_eq!(rows[0].result.runs[1].outcome.network, plain.runs[1].outcome.network);
    let table = AblationTable(&rows).to_string();
    assert_eq!(table.lines().count(), 2, "{table}");
    assert_eq!(table.lines().next().unwrap().split_whitespace().count(), 5);
}

#[test]
fn narrow_widths_need_the_fallback() {
    assert!(ablation_architecture(256, false).is_err());
    let arch = ablation_architecture(256, true).unwrap();
    assert_eq!(arch.flat_features().unwrap(), 128);
    assert_eq!(ablation_architecture(16384, true).unwrap(), Architecture::new(16384).unwrap());
}
