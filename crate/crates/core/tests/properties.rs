use std::collections::BTreeMap;

use condiff::data::{split_subjectwise, ImageRecord, Label, SplitFractions};
use condiff::embedding_classifier::{decide, triplet_loss};
use condiff::explain::{normalized_masks, softmax};
use condiff::metrics::{classification_metrics, ConfusionCounts};
use condiff::pipeline::condition_gap;
use condiff::samplers::ddim_timesteps;
use condiff::schedules::make_linear_schedule;
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn record(id: usize, subject: usize, label: Label) -> ImageRecord {
    ImageRecord {
        id: format!("r{id}"),
        image: Array3::zeros((1, 1, 1)),
        label,
        subject_id: format!("s{subject}"),
        magnification: None,
    }
}

proptest! {
    #[test]
    fn alpha_bar_decreases_within_unit_interval(t in 1usize..400, lo in 1e-5f64..1e-3, span in 0.0f64..0.05) {
        let hi = if t == 1 { lo } else { lo + span };
        let s = make_linear_schedule(t, lo, hi).unwrap();
        let ab = s.alpha_bars();
        prop_assert!(ab.iter().all(|&a| a > 0.0 && a < 1.0));
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.posterior_sigmas_sq().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn strength_maps_into_the_chain(t in 1usize..2000, t0 in 1e-6f64..=1.0) {
        let s = make_linear_schedule(t, 1e-4, if t == 1 { 1e-4 } else { 0.02 }).unwrap();
        let step = s.step_for_strength(t0).unwrap();
        prop_assert!((1..=t).contains(&step));
        prop_assert_eq!(s.step_for_strength(1.0).unwrap(), t);
    }

    #[test]
    fn ddim_steps_descend_to_zero(start in 1usize..1000, steps in 1usize..200) {
        let ts = ddim_timesteps(start, steps.min(start));
        prop_assert_eq!(ts[0], start);
        prop_assert_eq!(*ts.last().unwrap(), 0);
        prop_assert!(ts.windows(2).all(|w| w[1] < w[0]));
        prop_assert_eq!(ts.len(), steps.min(start) + 1);
    }

    #[test]
    fn metrics_stay_in_unit_interval(tp in 0u64..500, fp in 0u64..500, tn in 0u64..500, fn_ in 0u64..500) {
        let m = classification_metrics(ConfusionCounts { tp, fp, tn, fn_ });
        for v in [m.accuracy, m.sensitivity, m.specificity, m.ppv, m.f1].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(m.accuracy.is_some(), tp + fp + tn + fn_ > 0);
        prop_assert_eq!(m.sensitivity.is_some(), tp + fn_ > 0);
    }

    #[test]
    fn decision_picks_the_nearer_label(a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let d = BTreeMap::from([(Label::NoInfection, a), (Label::Infection, b)]);
        let want = if b < a { Label::Infection } else { Label::NoInfection };
        prop_assert_eq!(decide(&d).unwrap(), want);
    }

    #[test]
    fn triplet_loss_is_nonnegative_and_zero_when_separated(
        v in prop::collection::vec(-1.0f64..1.0, 9),
        margin in 0.0f64..2.0,
    ) {
        let a = Array2::from_shape_vec((3, 3), v).unwrap();
        let far = a.mapv(|x| x + 10.0);
        prop_assert!(triplet_loss(a.view(), far.view(), a.view(), margin).unwrap() >= margin);
        prop_assert_eq!(triplet_loss(a.view(), a.view(), far.view(), margin).unwrap(), 0.0);
    }

    #[test]
    fn gap_is_symmetric_and_nonnegative(v in prop::collection::vec(-1.0f32..1.0, 24)) {
        let a: Vec<Array3<f32>> = v[..12].chunks(6).map(|c| Array3::from_shape_vec((1, 2, 3), c.to_vec()).unwrap()).collect();
        let b: Vec<Array3<f32>> = v[12..].chunks(6).map(|c| Array3::from_shape_vec((1, 2, 3), c.to_vec()).unwrap()).collect();
        let ab = condition_gap(&[a.clone(), b.clone()]).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, condition_gap(&[b, a.clone()]).unwrap());
        prop_assert_eq!(condition_gap(&[a.clone(), a]).unwrap(), 0.0);
    }

    #[test]
    fn masks_and_weights_are_normalized(v in prop::collection::vec(-5.0f64..5.0, 2 * 3 * 4), out in 2usize..12) {
        let acts = Array3::from_shape_vec((2, 3, 4), v).unwrap();
        for m in normalized_masks(&acts, out, out) {
            prop_assert_eq!(m.dim(), (out, out));
            prop_assert!(m.iter().all(|&x| (-1e-12..=1.0 + 1e-12).contains(&x)));
        }
        let w = softmax(acts.as_slice().unwrap());
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn split_keeps_subjects_whole(
        sizes in prop::collection::vec((1usize..5, any::<bool>()), 3..25),
        seed in any::<u64>(),
        stratify in any::<bool>(),
    ) {
        let mut records = Vec::new();
        for (s, &(n, infected)) in sizes.iter().enumerate() {
            let label = if infected { Label::Infection } else { Label::NoInfection };
            for _ in 0..n {
                records.push(record(records.len(), s, label));
            }
        }
        let total = records.len();
        let split = split_subjectwise(records, SplitFractions::default(), seed, stratify).unwrap();
        let mut owner = BTreeMap::new();
        let mut count = 0;
        for (p, part) in split.partitions().iter().enumerate() {
            prop_assert!(!part.is_empty());
            for r in part.iter() {
                count += 1;
                prop_assert_eq!(*owner.entry(r.subject_id.clone()).or_insert(p), p);
            }
        }
        prop_assert_eq!(count, total);
    }
}
