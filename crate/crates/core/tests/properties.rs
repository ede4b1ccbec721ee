use std::collections::BTreeSet;
use std::f64::consts::PI;

use proptest::prelude::*;

use splitmixer::checkpoint::{Checkpoint, TrainState};
use splitmixer::data::{decode_cifar, encode_cifar, hflip, Dataset, EpochPlan, CIFAR_RECORD};
use splitmixer::mixing::{interleave_permutation, overlap_width, segment_bounds, Fraction, MixVariant, MixerSpec};
use splitmixer::model::{Model, ModelConfig, Variant};
use splitmixer::train::{EpochMetrics, OneCycle};

proptest! {
    #[test]
    fn segments_partition_the_channels(h in 2usize..600, s in 2usize..12) {
        prop_assume!(s <= h);
        let ranges = segment_bounds(h, s).unwrap();
        prop_assert_eq!(ranges.len(), s);
        prop_assert_eq!(ranges[0].start, 0);
        prop_assert_eq!(ranges[s - 1].end, h);
        for pair in ranges.windows(2) {
            prop_assert_eq!(pair[0].end, pair[1].start);
            prop_assert_eq!(pair[0].len(), h / s);
        }
    }

    #[test]
    fn overlapping_plans_cover_with_two_ranges(h in 8usize..512, i in 2i64..10) {
        let alpha = Fraction::new(i, 2 * i - 1);
        let m = overlap_width(h, alpha);
        prop_assume!(2 * m > h && m < h);
        for block in 0..2 {
            let plan = MixerSpec { variant: MixVariant::V, h, alpha: Some(alpha), segments: None, block_index: block }
                .plan()
                .unwrap();
            prop_assert_eq!(plan.ranges.len(), 2);
            prop_assert_eq!(plan.ranges[0].clone(), 0..m);
            prop_assert_eq!(plan.ranges[1].clone(), h - m..h);
        }
    }

    #[test]
    fn interleave_is_a_bijection(d in 1usize..40, s in 1usize..9) {
        let h = d * s;
        let perm = interleave_permutation(h, s).unwrap();
        let seen: BTreeSet<usize> = perm.iter().copied().collect();
        prop_assert_eq!(seen.len(), h);
        prop_assert_eq!(*seen.iter().next_back().unwrap(), h - 1);
        for i in 0..s {
            for j in 0..d {
                prop_assert_eq!(perm[j * s + i], i * d + j);
            }
        }
    }

    #[test]
    fn epoch_order_is_a_permutation_in_full_batches(n in 1usize..300, bs in 1usize..70, seed: u64) {
        let plan = EpochPlan::shuffled(n, bs, seed, true).unwrap();
        let mut sorted = plan.order.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(plan.batch_count(), n.div_ceil(bs));
        let again = EpochPlan::shuffled(n, bs, seed, true).unwrap();
        prop_assert_eq!(&again.order, &plan.order);
        prop_assert_eq!(&again.flips, &plan.flips);
    }

    #[test]
    fn flipping_twice_is_identity(w in 1usize..20, rows in 1usize..10, pixels in prop::collection::vec(0.0f32..1.0, 200)) {
        let mut img: Vec<f32> = pixels.into_iter().cycle().take(w * rows).collect();
        let orig = img.clone();
        hflip(&mut img, w);
        for r in 0..rows {
            prop_assert_eq!(img[r * w], orig[r * w + w - 1]);
        }
        hflip(&mut img, w);
        prop_assert_eq!(img, orig);
    }

    #[test]
    fn cifar_records_round_trip(records in prop::collection::vec((0u8..10, prop::collection::vec(any::<u8>(), 3072)), 1..4)) {
        let mut bytes = Vec::with_capacity(records.len() * CIFAR_RECORD);
        for (label, pixels) in &records {
            bytes.push(*label);
            bytes.extend_from_slice(pixels);
        }
        let data = decode_cifar(&bytes).unwrap();
        prop_assert_eq!(data.len(), records.len());
        prop_assert!(data.image(0).iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(encode_cifar(&data).unwrap(), bytes);
    }

    #[test]
    fn schedule_stays_positive_and_peaks_once(total in 2usize..3000, max_lr in 1e-4f64..1.0) {
        let s = OneCycle::new(max_lr, total);
        let peak = s.peak_step();
        prop_assert_eq!(peak, (0.3 * total as f64).floor() as usize);
        prop_assert_eq!(s.lr(peak).unwrap(), max_lr);
        prop_assert_eq!(s.lr(0).unwrap(), if peak == 0 { max_lr } else { max_lr / 25.0 });
        // Steepest slope of a half-cosine from a to b over n steps is pi |b - a| / 2n.
        let rise = if peak > 0 { PI * (max_lr - s.initial_lr()) / (2.0 * peak as f64) } else { 0.0 };
        let tail = total - 1 - peak;
        let fall = if tail > 0 { PI * (max_lr - s.final_lr()) / (2.0 * tail as f64) } else { 0.0 };
        let bound = rise.max(fall) * (1.0 + 1e-9);
        let mut prev = s.lr(0).unwrap();
        for t in 0..total {
            let lr = s.lr(t).unwrap();
            prop_assert!(lr > 0.0 && lr <= max_lr);
            prop_assert!((lr - prev).abs() <= bound, "step {} jumps {}", t, (lr - prev).abs());
            prev = lr;
        }
        prop_assert!(s.lr(total).is_err());
    }

    #[test]
    fn checkpoints_round_trip_byte_for_byte(seed: u64, variant in 0usize..6, epoch in 0usize..5, acc in 0.0f64..1.0) {
        let v = match variant {
            5 => Variant::ConvMixer,
            i => Variant::Split([MixVariant::I, MixVariant::II, MixVariant::III, MixVariant::IV, MixVariant::V][i]),
        };
        let mut config = ModelConfig::new(v, 8, 2);
        config.k = 3;
        let model = Model::<f32>::build(config, seed).unwrap();
        let history = (1..=epoch)
            .map(|e| EpochMetrics { epoch: e, loss: acc * e as f64, train_acc: acc, test_acc: None, lr: 1e-3, seconds: 0.0 })
            .collect();
        let state = TrainState { epoch, total_steps: 10 * epoch as u64, best_acc: acc, history };
        let bytes = Checkpoint::capture(&model, None, &state).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.to_bytes(), &bytes);
        prop_assert_eq!(back.state.best_acc.to_bits(), acc.to_bits());
        let restored: Model<f32> = back.to_model().unwrap();
        prop_assert_eq!(restored, model);
        // Any truncation is rejected.
        let cut = (seed as usize) % bytes.len();
        prop_assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
    }
}

#[test]
fn dataset_rejects_bad_labels() {
    assert!(Dataset::new(vec![0.0; 4], vec![3], 2, [1, 2, 2]).is_err());
    assert!(Dataset::new(vec![0.0; 4], vec![1], 2, [1, 2, 2]).is_ok());
}
