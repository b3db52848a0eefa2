use std::collections::HashSet;
use std::path::PathBuf;

use atx_core::attention::{attention_loss, AttentionTap, Task, DEFAULT_NORM_EPS};
use atx_core::data::{
    augment, split_by_patient, AugmentConfig, DatasetManifest, DecodedImage, Mode, RawLabel, Record, RecordLabels, SplitName, SplitSizes,
};
use atx_core::metrics::{roc_auc, weighted_f1, CiMethod, RepetitionSummary};
use atx_core::tensor::Tensor;
use atx_core::train::{lr_schedule, select_best};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn planes() -> impl Strategy<Value = (Vec<usize>, Vec<f64>, Vec<f64>)> {
    (1usize..3, 1usize..4, 1usize..5, 1usize..5).prop_flat_map(|(n, c, h, w)| {
        let len = n * c * h * w;
        (Just(vec![n, c, h, w]), prop::collection::vec(-3.0f64..3.0, len), prop::collection::vec(-3.0f64..3.0, len))
    })
}

fn loss(shape: &[usize], s: &[f64], t: &[f64]) -> f64 {
    let s = AttentionTap::student(Tensor::new(shape, s.to_vec()).unwrap()).unwrap();
    let t = AttentionTap::teacher(Tensor::new(shape, t.to_vec()).unwrap()).unwrap();
    attention_loss(&s, &t, DEFAULT_NORM_EPS).unwrap()
}

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                den += 1.0;
                num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    num / den
}

fn manifest(records_per_patient: &[usize]) -> DatasetManifest {
    let mut records = Vec::new();
    for (p, &k) in records_per_patient.iter().enumerate() {
        for r in 0..k {
            records.push(Record {
                image_path: PathBuf::from(format!("{p}_{r}.png")),
                patient_id: format!("p{p}"),
                labels: RecordLabels::Multilabel(vec![if (p + r) % 3 == 0 { RawLabel::Positive } else { RawLabel::Negative }]),
            });
        }
    }
    DatasetManifest { task: Task::MultilabelBinary, class_names: vec!["a".into()], records, root: PathBuf::new() }
}

proptest! {
    #[test]
    fn attention_loss_in_range_and_symmetric_in_scale((shape, s, t) in planes(), k in 1e-3f64..1e3) {
        let base = loss(&shape, &s, &t);
        prop_assert!((0.0..=2.0 + 1e-12).contains(&base));
        let scaled: Vec<f64> = s.iter().map(|v| v * k).collect();
        prop_assert!((loss(&shape, &scaled, &t) - base).abs() < 1e-9);
        prop_assert!(loss(&shape, &t, &t).abs() < 1e-9);
    }

    #[test]
    fn auc_matches_pairwise(pairs in prop::collection::vec((0u8..6, any::<bool>()), 2..40)) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let auc = roc_auc(&scores, &labels).unwrap();
        prop_assert!((auc - pairwise_auc(&scores, &labels)).abs() < 1e-12);
        // flipping the scores mirrors the AUC
        let neg: Vec<f64> = scores.iter().map(|v| -v).collect();
        prop_assert!((roc_auc(&neg, &labels).unwrap() - (1.0 - auc)).abs() < 1e-12);
    }

    #[test]
    fn weighted_f1_is_one_on_perfect_predictions(truth in prop::collection::vec(0usize..4, 1..30)) {
        prop_assert_eq!(weighted_f1(&truth, &truth, 4).unwrap(), 1.0);
    }

    #[test]
    fn lr_schedule_is_stepwise_halving(epoch in 0usize..200, period in 1usize..40) {
        let lr = lr_schedule(epoch, 1.0, period);
        prop_assert_eq!(lr, 0.5f64.powi((epoch / period) as i32));
        prop_assert!(lr_schedule(epoch + 1, 1.0, period) <= lr);
    }

    #[test]
    fn select_best_picks_earliest_maximum(values in prop::collection::vec(prop::sample::select(vec![0.1, 0.5, 0.9, f64::NAN]), 1..20)) {
        prop_assume!(values.iter().any(|v| v.is_finite()));
        let (epoch, best) = select_best(&values).unwrap();
        let max = values.iter().copied().filter(|v| v.is_finite()).fold(f64::MIN, f64::max);
        prop_assert_eq!(best, max);
        prop_assert_eq!(epoch, values.iter().position(|&v| v == max).unwrap());
    }

    #[test]
    fn patient_splits_are_disjoint_and_nest(counts in prop::collection::vec(1usize..4, 20..80), seed in any::<u64>()) {
        let m = manifest(&counts);
        let s = split_by_patient(&m, SplitSizes::Fractions { train: 0.6, validation: 0.2, test: 0.2 }, seed);
        prop_assume!(s.is_ok());
        let s = s.unwrap();
        let names = [SplitName::Train, SplitName::Validation, SplitName::Test];
        let sets: Vec<HashSet<&String>> = names.iter().map(|&n| s.patients(n).iter().collect()).collect();
        prop_assert!(sets[0].is_disjoint(&sets[1]) && sets[0].is_disjoint(&sets[2]) && sets[1].is_disjoint(&sets[2]));
        let total: usize = names.iter().map(|&n| s.records(n).len()).sum();
        prop_assert_eq!(total, m.records.len());
        let n = s.train.len();
        let small: HashSet<usize> = s.train_subset(&m, (n / 3).max(1)).unwrap().into_iter().collect();
        let big: HashSet<usize> = s.train_subset(&m, n).unwrap().into_iter().collect();
        prop_assert!(small.is_subset(&big));
        for &r in &small {
            prop_assert!(sets[0].contains(&m.records[r].patient_id));
        }
    }

    #[test]
    fn augmentation_stays_in_normalised_range(w in 4usize..24, h in 4usize..24, gray in any::<bool>(), seed in any::<u64>()) {
        let ch = if gray { 1 } else { 3 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<u8> = (0..w * h * ch).map(|i| ((i as u64 * 2654435761) ^ seed) as u8).collect();
        let img = DecodedImage::new(w, h, ch, data).unwrap();
        let cfg = AugmentConfig::with_size(8);
        let (lo, hi) = cfg.output_bounds();
        for mode in [Mode::Train, Mode::Eval] {
            let t = augment(&img, mode, &cfg, &mut rng).unwrap();
            prop_assert_eq!(t.shape(), &[3, 8, 8]);
            prop_assert!(t.data().iter().all(|&v| (v as f64) >= lo - 1e-5 && (v as f64) <= hi + 1e-5));
        }
    }

    #[test]
    fn repetition_summary_brackets_the_mean(values in prop::collection::vec(0.0f64..1.0, 2..8)) {
        let s = RepetitionSummary::from_values(values.clone(), CiMethod::Normal).unwrap();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        prop_assert!((s.mean - mean).abs() < 1e-12);
        prop_assert!(s.half_width >= 0.0);
    }
}
