use std::collections::BTreeMap;

use megphone::data::{PhonemeWindow, SignalMatrix, Split};
use megphone::sampling::{
    average_group, balance_labels, epoch_groups, eval_groups, group_average, make_batches, Group, SamplingPlan,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn counts(labels: &[usize], idx: &[usize]) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for &i in idx {
        *m.entry(labels[i]).or_insert(0) += 1;
    }
    m
}

fn labels_from_histogram(hist: &[usize]) -> Vec<usize> {
    // interleave classes so that indices of a class are not contiguous
    let mut out = Vec::new();
    let max = hist.iter().copied().max().unwrap_or(0);
    for round in 0..max {
        for (k, &n) in hist.iter().enumerate() {
            if round < n {
                out.push(k);
            }
        }
    }
    out
}

fn window(value: f32, label: usize, c: usize, t: usize) -> PhonemeWindow {
    PhonemeWindow::new(SignalMatrix::new(c, t, vec![value; c * t]).unwrap(), label, Split::Train, "s").unwrap()
}

#[test]
fn duplicates_come_only_from_their_own_class() {
    let labels = [0, 1, 2, 0, 0, 1, 0, 0];
    let idx = balance_labels(&labels, 4);
    assert_eq!(counts(&labels, &idx).values().copied().collect::<Vec<_>>(), vec![5, 5, 5]);
    let originals: Vec<usize> = (0..labels.len()).collect();
    assert_eq!(&idx[..labels.len()], &originals[..]);
    let class1 = [1, 5];
    let class2 = [2];
    let mut seen = (0, 0);
    for &i in &idx[labels.len()..] {
        match labels[i] {
            1 => {
                assert!(class1.contains(&i));
                seen.0 += 1;
            }
            2 => {
                assert!(class2.contains(&i));
                seen.1 += 1;
            }
            other => panic!("class {other} was already the largest"),
        }
    }
    assert_eq!(seen, (3, 4));
}

#[test]
fn identical_members_average_to_themselves() {
    let ws: Vec<_> = (0..100).map(|_| window(1.25, 3, 4, 6)).collect();
    let refs: Vec<&PhonemeWindow> = ws.iter().collect();
    let g = Group {
        label: 3,
        members: (0..100).collect(),
    };
    let s = average_group(&refs, &g);
    assert_eq!(s.data, ws[0].data);
    assert_eq!((s.label, s.group_size), (3, 100));
}

#[test]
fn averaging_one_hundred_noise_windows_shrinks_std_tenfold() {
    let (c, t) = (16, 50);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let ws: Vec<PhonemeWindow> = (0..1000)
        .map(|_| {
            let d = (0..c * t).map(|_| StandardNormal.sample(&mut rng)).collect();
            PhonemeWindow::new(SignalMatrix::new(c, t, d).unwrap(), 0, Split::Train, "n").unwrap()
        })
        .collect();
    let refs: Vec<&PhonemeWindow> = ws.iter().collect();
    let plan = SamplingPlan {
        group_size: 100,
        ..Default::default()
    };
    let samples: Vec<_> = group_average(&refs, &plan, 0).collect();
    assert_eq!(samples.len(), 10);
    let vals: Vec<f64> = samples.iter().flat_map(|s| s.data.data().iter().map(|&v| v as f64)).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
    assert!((std - 0.1).abs() < 0.01, "std {std}");
}

#[test]
fn grouped_samples_are_exact_member_means() {
    let ws: Vec<_> = (0..23).map(|i| window(i as f32 * 0.37 - 2.0, i % 3, 2, 3)).collect();
    let refs: Vec<&PhonemeWindow> = ws.iter().collect();
    let plan = SamplingPlan {
        group_size: 3,
        repeats: 2,
        ..Default::default()
    };
    for s in group_average(&refs, &plan, 1) {
        assert!(s.member_indices.iter().all(|&i| ws[i].label == s.label));
        let want = s.member_indices.iter().map(|&i| ws[i].data.data()[0] as f64).sum::<f64>() / 3.0;
        assert!(s.data.data().iter().all(|&v| (v as f64 - want).abs() < 1e-6));
    }
}

#[test]
fn repeats_redraw_the_partition() {
    let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
    let pool: Vec<usize> = (0..40).collect();
    let plan = SamplingPlan {
        group_size: 5,
        repeats: 2,
        ..Default::default()
    };
    let groups = epoch_groups(&labels, &pool, &plan, 0);
    assert_eq!(groups.len(), 16);
    assert_ne!(groups[..8], groups[8..]);
    assert_ne!(groups, epoch_groups(&labels, &pool, &plan, 1));
    assert_eq!(groups, epoch_groups(&labels, &pool, &plan, 0));
}

#[test]
fn evaluation_partition_is_fixed() {
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    assert_eq!(eval_groups(&labels, 4), eval_groups(&labels, 4));
    assert_eq!(eval_groups(&labels, 4).len(), 6);
}

#[test]
fn same_seed_same_batches() {
    let a = make_batches((0..50).collect::<Vec<_>>(), 8, 3, &[0]).unwrap();
    let b = make_batches((0..50).collect::<Vec<_>>(), 8, 3, &[0]).unwrap();
    assert_eq!(a, b);
    assert!(make_batches(vec![1], 0, 0, &[]).is_err());
}

fn long_tail() -> impl Strategy<Value = Vec<usize>> {
    (1usize..40, 2usize..12, 0.3f64..0.95).prop_map(|(head, k, ratio)| {
        (0..k).map(|i| ((head as f64) * ratio.powi(i as i32)).ceil().max(1.0) as usize).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn balancing_lifts_every_class_to_the_maximum(hist in long_tail(), seed in any::<u64>()) {
        let labels = labels_from_histogram(&hist);
        let idx = balance_labels(&labels, seed);
        let max = *hist.iter().max().unwrap();
        let c = counts(&labels, &idx);
        prop_assert_eq!(c.len(), hist.len());
        prop_assert!(c.values().all(|&n| n == max));
        prop_assert_eq!(&idx[..labels.len()], &(0..labels.len()).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn stream_length_follows_floor_rule(hist in long_tail(), g in 1usize..7, r in 1usize..4, seed in any::<u64>()) {
        let labels = labels_from_histogram(&hist);
        let pool: Vec<usize> = (0..labels.len()).collect();
        let plan = SamplingPlan { group_size: g, repeats: r, balance: false, seed };
        let groups = epoch_groups(&labels, &pool, &plan, 0);
        prop_assert_eq!(groups.len(), r * hist.iter().map(|n| n / g).sum::<usize>());
        prop_assert!(groups.iter().all(|gr| gr.members.len() == g && gr.members.iter().all(|&i| labels[i] == gr.label)));
    }

    #[test]
    fn balanced_grouped_labels_are_uniform(hist in long_tail(), g in 1usize..5, seed in any::<u64>()) {
        let mut hist = hist;
        let max = hist.iter().copied().max().unwrap();
        hist[0] = max.div_ceil(g) * g;
        let labels = labels_from_histogram(&hist);
        let pool = balance_labels(&labels, seed);
        let plan = SamplingPlan { group_size: g, repeats: 1, balance: true, seed };
        let groups = epoch_groups(&labels, &pool, &plan, 0);
        let mut per = vec![0usize; hist.len()];
        for gr in &groups {
            per[gr.label] += 1;
        }
        prop_assert!(per.iter().all(|&n| n == hist[0] / g));
    }

    #[test]
    fn batches_cover_input_multiset(items in proptest::collection::vec(0u8..20, 0..80), bs in 1usize..17, seed in any::<u64>()) {
        let batches = make_batches(items.clone(), bs, seed, &[1, 2]).unwrap();
        prop_assert_eq!(batches.len(), items.len().div_ceil(bs));
        prop_assert!(batches.iter().rev().skip(1).all(|b| b.len() == bs));
        let mut flat: Vec<u8> = batches.into_iter().flatten().collect();
        let mut want = items;
        flat.sort_unstable();
        want.sort_unstable();
        prop_assert_eq!(flat, want);
    }
}
