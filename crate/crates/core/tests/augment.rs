use megphone::augment::{
    amplitude_scale, apply_pipeline, channel_dropout, drop_count, frequency_band_perturb, gaussian_noise, random_bands,
    random_channels, random_mask, random_shift, temporal_mask, temporal_shift, AugmentConfig, BandScale,
};
use megphone::data::SignalMatrix;
use megphone_tensor::{instance_norm, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const FS: f64 = 250.0;

fn random_window(c: usize, t: usize, seed: u64) -> SignalMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SignalMatrix::new(c, t, (0..c * t).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

fn band_energy(row: &[f32], lo: f64, hi: f64) -> f64 {
    let n = row.len();
    let mut e = 0.0;
    for k in 0..n {
        let f = k.min(n - k) as f64 * FS / n as f64;
        if f < lo || f >= hi {
            continue;
        }
        let (mut re, mut im) = (0.0, 0.0);
        for (j, &v) in row.iter().enumerate() {
            let a = -2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
            re += v as f64 * a.cos();
            im += v as f64 * a.sin();
        }
        e += re * re + im * im;
    }
    e
}

#[test]
fn each_augmentation_fires_thirty_percent_of_the_time() {
    let cfg = AugmentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut fired = [0usize; 6];
    let base = random_window(8, 125, 2);
    for _ in 0..10_000 {
        let mut x = base.clone();
        for (n, f) in fired.iter_mut().zip(apply_pipeline(&mut x, &cfg, &mut rng)) {
            *n += f as usize;
        }
    }
    for n in fired {
        let rate = n as f64 / 1e4;
        assert!((rate - 0.3).abs() <= 0.02, "rate {rate}");
    }
}

#[test]
fn zero_probability_pipeline_is_identity_and_seeded_runs_agree() {
    let x = random_window(6, 125, 3);
    let off = AugmentConfig {
        p_apply: 0.0,
        ..Default::default()
    };
    let mut y = x.clone();
    apply_pipeline(&mut y, &off, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(x, y);
    let on = AugmentConfig {
        p_apply: 1.0,
        ..Default::default()
    };
    let (mut a, mut b) = (x.clone(), x.clone());
    apply_pipeline(&mut a, &on, &mut ChaCha8Rng::seed_from_u64(9));
    apply_pipeline(&mut b, &on, &mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(a, b);
    assert_ne!(a, x);
    assert!(a.all_finite());
}

#[test]
fn noise_std_is_one_percent_of_window_std() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_window(10, 125, 5);
    let xs = x.data();
    let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / xs.len() as f64;
    let sx = (xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
    let mut per_channel = vec![0.0f64; 10];
    let mut total = 0.0;
    let draws = 10_000;
    for _ in 0..draws / 100 {
        let mut y = x.clone();
        gaussian_noise(&mut y, 0.01, &mut rng);
        for c in 0..10 {
            for (a, b) in y.row(c).iter().zip(x.row(c)) {
                let d = (*a as f64 - *b as f64) / sx;
                per_channel[c] += d * d;
                total += d * d;
            }
        }
    }
    let n = (draws / 100 * 10 * 125) as f64;
    let std = (total / n).sqrt();
    assert!((std - 0.01).abs() < 0.002, "std {std}");
    for s in per_channel {
        let cs = (s / (n / 10.0)).sqrt();
        assert!((cs - std).abs() < 0.2 * std);
    }
    let mut z = SignalMatrix::zeros(3, 4);
    gaussian_noise(&mut z, 0.01, &mut rng);
    assert_eq!(z, SignalMatrix::zeros(3, 4));
}

#[test]
fn channel_dropout_zeroes_thirty_of_306_uniformly() {
    let cfg = AugmentConfig::default();
    assert_eq!(drop_count(0.1, 306), 30);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = SignalMatrix::new(306, 5, vec![1.0; 306 * 5]).unwrap();
    let mut hits = vec![0usize; 306];
    for _ in 0..10_000 {
        let chans = random_channels(&cfg, 306, &mut rng);
        for &c in &chans {
            hits[c] += 1;
        }
        let mut y = x.clone();
        channel_dropout(&mut y, &chans);
        let zero_rows = (0..306).filter(|&c| y.row(c).iter().all(|&v| v == 0.0)).count();
        assert_eq!(zero_rows, 30);
    }
    for h in hits {
        let rate = h as f64 / 1e4;
        assert!((rate - 30.0 / 306.0).abs() < 0.01, "rate {rate}");
    }
    let none = AugmentConfig {
        channel_drop_frac: 0.0,
        ..Default::default()
    };
    assert!(random_channels(&none, 306, &mut rng).is_empty());
}

#[test]
fn mask_is_capped_and_leaves_the_rest_untouched() {
    let cfg = AugmentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_window(4, 125, 8);
    for _ in 0..2000 {
        let (start, len) = random_mask(&cfg, 125, &mut rng);
        assert!((1..=20).contains(&len) && start + len <= 125);
        let mut y = x.clone();
        temporal_mask(&mut y, start, len);
        for c in 0..4 {
            for t in 0..125 {
                let v = y.row(c)[t];
                if (start..start + len).contains(&t) {
                    assert_eq!(v, 0.0);
                } else {
                    assert_eq!(v.to_bits(), x.row(c)[t].to_bits());
                }
            }
        }
    }
}

#[test]
fn amplitude_ratio_is_constant() {
    let x = random_window(5, 30, 9);
    let mut y = x.clone();
    amplitude_scale(&mut y, 1.07);
    let ratios: Vec<f64> = x.data().iter().zip(y.data()).filter(|(a, _)| **a != 0.0).map(|(a, b)| *b as f64 / *a as f64).collect();
    assert!(ratios.iter().all(|r| (r - 1.07).abs() < 1e-6));
    let mut z = x.clone();
    amplitude_scale(&mut z, 1.0);
    assert_eq!(z, x);
}

#[test]
fn unit_band_scales_are_identity_and_zero_stays_zero() {
    let cfg = AugmentConfig {
        band_scale_range: [1.0, 1.0],
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random_window(6, 125, 11);
    for _ in 0..50 {
        let bands = random_bands(&cfg, &mut rng);
        assert!((1..=3).contains(&bands.len()));
        let mut y = x.clone();
        frequency_band_perturb(&mut y, &bands, FS);
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
    let mut z = SignalMatrix::zeros(2, 125);
    frequency_band_perturb(&mut z, &[BandScale { lo_hz: 0.0, hi_hz: 50.0, scale: 1.2 }], FS);
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_scaled_band_loses_its_energy() {
    let x = random_window(3, 125, 12);
    let mut y = x.clone();
    frequency_band_perturb(&mut y, &[BandScale { lo_hz: 20.0, hi_hz: 30.0, scale: 0.0 }], FS);
    for c in 0..3 {
        let before = band_energy(x.row(c), 20.0, 30.0);
        let after = band_energy(y.row(c), 20.0, 30.0);
        assert!(after < 1e-8 * before, "{after} vs {before}");
        let outside_before = band_energy(x.row(c), 30.0, 125.0);
        let outside_after = band_energy(y.row(c), 30.0, 125.0);
        assert!((outside_before - outside_after).abs() < 1e-4 * outside_before);
    }
}

fn instance_normalized(x: &SignalMatrix) -> Vec<f32> {
    let tape = Tape::<f32>::new();
    let v = tape.constant(Tensor::new(vec![1, x.channels(), x.times()], x.data().to_vec()).unwrap());
    instance_norm(v, 1e-5).unwrap().value().data().to_vec()
}

#[test]
fn instance_norm_absorbs_amplitude_but_not_shift() {
    let x = random_window(4, 125, 13);
    let base = instance_normalized(&x);
    let mut scaled = x.clone();
    amplitude_scale(&mut scaled, 0.93);
    for (a, b) in base.iter().zip(instance_normalized(&scaled)) {
        assert!((a - b).abs() < 1e-4);
    }
    let mut shifted = x.clone();
    temporal_shift(&mut shifted, 3);
    let diff = base.iter().zip(instance_normalized(&shifted)).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(diff > 1e-2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shift_preserves_channel_multisets(seed in any::<u64>()) {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_window(5, 125, seed);
        let s = random_shift(&cfg, &mut rng);
        prop_assert!(s.abs() <= 10);
        let mut y = x.clone();
        temporal_shift(&mut y, s);
        for c in 0..5 {
            let mut a: Vec<u32> = x.row(c).iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u32> = y.row(c).iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn pipeline_preserves_shape_and_finiteness(seed in any::<u64>(), p in 0.0f64..=1.0) {
        let cfg = AugmentConfig { p_apply: p, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = random_window(12, 125, rng.random());
        apply_pipeline(&mut x, &cfg, &mut rng);
        prop_assert_eq!((x.channels(), x.times()), (12, 125));
        prop_assert!(x.all_finite());
    }
}
