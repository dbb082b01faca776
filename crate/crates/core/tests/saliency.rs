use megphone::data::{apply_standardization_policy, generate_synthetic, Split, SyntheticParams};
use megphone::inventory::PhonemeInventory;
use megphone::models::{BlockNorm, InputNorm, Model, ModelSpec};
use megphone::saliency::{
    aggregate, class_saliency, cross_split_similarity, hcluster, paired_scores, pearson, render_clustermap,
    row_minmax, saliency_from_taps, saliency_scores, spearman, summarize_similarity, upgma, write_matrix_csv,
    write_tree_csv, Axis, Metric, SaliencyConfig, SaliencyMatrix,
};
use megphone::Error;
use megphone_tensor::{linear, Tape, TapRegistry, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn linear_model_saliency_is_mean_abs_weight_row() {
    let (b, d, k) = (5, 9, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = rand_vec(&mut rng, k * d);
    let x = rand_vec(&mut rng, b * d);
    let labels = [0, 3, 1, 3, 2];
    let tape = Tape::<f32>::new();
    let xv = tape.leaf(Tensor::from_f64(vec![b, d], &x).unwrap(), true);
    let wv = tape.param(Tensor::from_f64(vec![k, d], &w).unwrap());
    let z = linear(xv, wv, None).unwrap();
    let mut taps = TapRegistry::new();
    taps.record("x", xv).unwrap();
    let s = saliency_from_taps(&tape, &taps, z, &labels).unwrap();
    for (i, &y) in labels.iter().enumerate() {
        let want = w[y * d..(y + 1) * d].iter().map(|v| v.abs()).sum::<f64>() / d as f64;
        assert!((s[i][0] - want).abs() < 1e-6);
    }
}

#[test]
fn untapped_forward_is_a_usage_error() {
    let tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::zeros(vec![1, 2]), true);
    let err = saliency_from_taps(&tape, &TapRegistry::new(), x, &[0]).unwrap_err();
    assert!(matches!(err, Error::Usage(_)));
}

struct TwoLayer {
    d: usize,
    h: usize,
    k: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
}

impl TwoLayer {
    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        (0..self.h)
            .map(|j| (self.b1[j] + (0..self.d).map(|i| self.w1[j * self.d + i] * x[i]).sum::<f64>()).max(0.0))
            .collect()
    }

    fn head(&self, h: &[f64], y: usize) -> f64 {
        (0..self.h).map(|j| self.w2[y * self.h + j] * h[j]).sum()
    }

    fn saliency(&self, tape: &Tape<f32>, xs: &[f64], labels: &[usize]) -> Vec<Vec<f64>> {
        let b = labels.len();
        let x = tape.leaf(Tensor::from_f64(vec![b, self.d], xs).unwrap(), true);
        let w1 = tape.param(Tensor::from_f64(vec![self.h, self.d], &self.w1).unwrap());
        let b1 = tape.param(Tensor::from_f64(vec![self.h], &self.b1).unwrap());
        let w2 = tape.param(Tensor::from_f64(vec![self.k, self.h], &self.w2).unwrap());
        let hidden = linear(x, w1, Some(b1)).unwrap().relu();
        let z = linear(hidden, w2, None).unwrap();
        let mut taps = TapRegistry::new();
        taps.record("input", x).unwrap();
        taps.record("hidden", hidden).unwrap();
        saliency_from_taps(tape, &taps, z, labels).unwrap()
    }
}

fn central_diff(f: impl Fn(&[f64]) -> f64, at: &[f64]) -> Vec<f64> {
    let step = 1e-6;
    (0..at.len())
        .map(|i| {
            let mut p = at.to_vec();
            let mut m = at.to_vec();
            p[i] += step;
            m[i] -= step;
            (f(&p) - f(&m)) / (2.0 * step)
        })
        .collect()
}

#[test]
fn two_layer_saliency_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = TwoLayer {
        d: 6,
        h: 5,
        k: 3,
        w1: rand_vec(&mut rng, 30),
        b1: rand_vec(&mut rng, 5),
        w2: rand_vec(&mut rng, 15),
    };
    let labels = [2, 0, 1, 2];
    let xs = rand_vec(&mut rng, 4 * 6);
    let got = net.saliency(&Tape::new(), &xs, &labels);
    for (i, &y) in labels.iter().enumerate() {
        let x = &xs[i * 6..(i + 1) * 6];
        let gx = central_diff(|v| net.head(&net.hidden(v), y), x);
        let gh = central_diff(|v| net.head(v, y), &net.hidden(x));
        let want = [
            gx.iter().map(|v| v.abs()).sum::<f64>() / 6.0,
            gh.iter().map(|v| v.abs()).sum::<f64>() / 5.0,
        ];
        for l in 0..2 {
            assert!((got[i][l] - want[l]).abs() <= 1e-3 * want[l].abs().max(1e-6), "{i} {l}");
        }
    }
}

#[test]
fn dead_rectifiers_give_zero_saliency() {
    let tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::from_f64(vec![1, 3], &[0.5, -0.2, 0.3]).unwrap(), true);
    let w1 = tape.param(Tensor::from_f64(vec![4, 3], &[0.1; 12]).unwrap());
    let b1 = tape.param(Tensor::from_f64(vec![4], &[-10.0; 4]).unwrap());
    let w2 = tape.param(Tensor::from_f64(vec![2, 4], &[1.0; 8]).unwrap());
    let pre = linear(x, w1, Some(b1)).unwrap();
    let z = linear(pre.relu(), w2, None).unwrap();
    let mut taps = TapRegistry::new();
    taps.record("input", x).unwrap();
    taps.record("pre", pre).unwrap();
    let s = saliency_from_taps(&tape, &taps, z, &[1]).unwrap();
    assert_eq!(s, vec![vec![0.0, 0.0]]);
}

fn brute_aggregate(scores: &[Vec<f64>], labels: &[usize], l: usize, k: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; l * k];
    for layer in 0..l {
        for class in 0..k {
            let mut sum = 0.0;
            let mut n = 0;
            for i in 0..labels.len() {
                if labels[i] == class {
                    sum += scores[i][layer];
                    n += 1;
                }
            }
            if n > 0 {
                out[layer * k + class] = sum / n as f64;
            }
        }
    }
    out
}

fn same_with_nan(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x.is_nan() && y.is_nan()) || (x - y).abs() <= tol)
}

#[test]
fn class_saliency_on_a_model_equals_brute_force_aggregation() {
    let p = SyntheticParams {
        n_classes: 6,
        n_per_class: 2,
        eval_per_class: Some(3),
        channels: 8,
        seed: 4,
        ..Default::default()
    };
    let mut ds = generate_synthetic(&p).unwrap();
    apply_standardization_policy(&mut ds).unwrap();
    let spec = ModelSpec {
        hidden_dim: 8,
        group_norm_groups: 4,
        n_blocks: 2,
        in_channels: 8,
        input_norm: InputNorm::Instance,
        block_norm: BlockNorm::Batch,
        ..Default::default()
    };
    let model = Model::build(spec, 3).unwrap();
    let val = ds.split(Split::Validation);
    let symbols = PhonemeInventory::default().symbols().to_vec();
    let cfg = SaliencyConfig {
        max_per_class: None,
        batch_size: 5,
    };
    let s = class_saliency(&model, &val, &symbols, &cfg).unwrap();
    assert_eq!(s.layer_names, model.tap_names());
    let scores = saliency_scores(&model, &val, 64).unwrap();
    let labels: Vec<usize> = val.iter().map(|w| w.label).collect();
    let want = brute_aggregate(&scores, &labels, s.n_layers(), 39);
    assert!(same_with_nan(&s.values, &want, 1e-9));
    assert!(s.values[6..39].iter().all(|v| v.is_nan()));
    assert!(s.values.iter().filter(|v| !v.is_nan()).all(|v| v.is_finite() && *v > 0.0));
}

#[test]
fn aggregation_examples() {
    let scores = vec![vec![1.0, 2.0], vec![3.0, 5.0], vec![7.0, 11.0]];
    let labels = [0, 1, 2];
    assert_eq!(aggregate(&scores, &labels, 2, 3), vec![1.0, 3.0, 7.0, 2.0, 5.0, 11.0]);
    let doubled: Vec<Vec<f64>> = scores.iter().chain(&scores).cloned().collect();
    assert_eq!(aggregate(&doubled, &[0, 1, 2, 0, 1, 2], 2, 3), aggregate(&scores, &labels, 2, 3));
}

fn brute_upgma(points: &[Vec<f64>]) -> Vec<(Vec<usize>, f64)> {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
    let mut out = Vec::new();
    while clusters.len() > 1 {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let mut total = 0.0;
                for &a in &clusters[i] {
                    for &b in &clusters[j] {
                        total += dist(&points[a], &points[b]);
                    }
                }
                let avg = total / (clusters[i].len() * clusters[j].len()) as f64;
                if avg < best.0 {
                    best = (avg, i, j);
                }
            }
        }
        let (h, i, j) = best;
        let b = clusters.remove(j);
        let mut a = clusters.remove(i);
        a.extend(b);
        a.sort_unstable();
        out.push((a.clone(), h));
        clusters.push(a);
    }
    out
}

#[test]
fn upgma_matches_brute_force_linkage_on_8x8() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let m = rand_vec(&mut rng, 64);
        for axis in [Axis::Rows, Axis::Columns] {
            let tree = hcluster(&m, 8, 8, axis);
            let points: Vec<Vec<f64>> = match axis {
                Axis::Rows => (0..8).map(|r| m[r * 8..(r + 1) * 8].to_vec()).collect(),
                Axis::Columns => (0..8).map(|c| (0..8).map(|r| m[r * 8 + c]).collect()).collect(),
            };
            let want = brute_upgma(&points);
            assert_eq!(tree.merges.len(), 7);
            for (i, (members, h)) in want.iter().enumerate() {
                assert!((tree.merges[i].height - h).abs() < 1e-12);
                assert_eq!(&tree.members(8 + i), members);
            }
            assert!(tree.merges.windows(2).all(|w| w[0].height <= w[1].height + 1e-12));
        }
    }
}

#[test]
fn block_matrix_splits_into_its_blocks_at_the_top() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a_rows = [0, 2, 5, 7];
    let rows: Vec<Vec<f64>> = (0..8)
        .map(|r| {
            let base = if a_rows.contains(&r) { [1.0, 1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0, 1.0] };
            base.iter().map(|v| v + rng.random_range(-0.05..0.05)).collect()
        })
        .collect();
    let tree = upgma(&rows);
    let (mut l, mut r) = tree.top_split().unwrap();
    if l.contains(&1) {
        std::mem::swap(&mut l, &mut r);
    }
    assert_eq!(l, a_rows.to_vec());
    assert_eq!(r, vec![1, 3, 4, 6]);
    let order = tree.leaf_order();
    let mut sorted = order.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..8).collect::<Vec<_>>());
}

#[test]
fn instance_norm_saliency_is_stable_across_standardizations() {
    let p = SyntheticParams {
        n_classes: 4,
        n_per_class: 2,
        eval_per_class: Some(12),
        channels: 8,
        seed: 8,
        ..Default::default()
    };
    let mut ds = generate_synthetic(&p).unwrap();
    apply_standardization_policy(&mut ds).unwrap();
    let (val, test) = (ds.split(Split::Validation), ds.split(Split::Test));
    let symbols = PhonemeInventory::default().symbols().to_vec();
    let cfg = SaliencyConfig::default();
    let spec = |input_norm| ModelSpec {
        hidden_dim: 8,
        group_norm_groups: 4,
        n_blocks: 3,
        in_channels: 8,
        input_norm,
        ..Default::default()
    };
    let mut means = Vec::new();
    for norm in [InputNorm::Instance, InputNorm::None] {
        let model = Model::build(spec(norm), 1).unwrap();
        for metric in [Metric::Pearson, Metric::Spearman] {
            let sim = cross_split_similarity(&model, &val, &test, metric, &symbols, &cfg).unwrap();
            assert_eq!(sim.values.len(), model.tap_names().len() * 39);
            assert!(sim.values.iter().all(|v| v.is_nan() || v.abs() <= 1.0));
            means.push(summarize_similarity(&sim.values).mean);
        }
    }
    assert!(means[0] >= 0.999 && means[1] >= 0.999, "{means:?}");
    assert!(means[2] < means[0] && means[3] < means[1], "{means:?}");
}

#[test]
fn unpaired_splits_are_rejected() {
    let p = SyntheticParams {
        n_classes: 3,
        n_per_class: 2,
        channels: 8,
        ..Default::default()
    };
    let ds = generate_synthetic(&p).unwrap();
    let model = Model::build(
        ModelSpec {
            hidden_dim: 8,
            group_norm_groups: 4,
            n_blocks: 1,
            in_channels: 8,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let (train, val) = (ds.split(Split::Train), ds.split(Split::Validation));
    let cfg = SaliencyConfig::default();
    assert!(matches!(paired_scores(&model, &train, &val, &cfg), Err(Error::Pairing(_))));
    let shuffled: Vec<_> = val.iter().rev().copied().collect();
    assert!(matches!(paired_scores(&model, &val, &shuffled, &cfg), Err(Error::Pairing(_))));
}

fn matrix(values: Vec<f64>, rows: usize, cols: usize) -> SaliencyMatrix {
    SaliencyMatrix {
        values,
        layer_names: (0..rows).map(|i| format!("l<{i}>")).collect(),
        phoneme_symbols: (0..cols).map(|i| format!("p{i}")).collect(),
        normalized: false,
    }
}

#[test]
fn exports_write_na_for_missing_and_escape_svg_labels() {
    let m = matrix(vec![1.0, f64::NAN, 3.0, 4.0, 5.0, 6.0], 2, 3);
    let mut buf = Vec::new();
    write_matrix_csv(&mut buf, &m.values, &m.layer_names, &m.phoneme_symbols).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "layer,p0,p1,p2");
    assert!(text.lines().nth(1).unwrap().contains(",NA,"));

    let rows = hcluster(&m.values, 2, 3, Axis::Rows);
    let cols = hcluster(&m.values, 2, 3, Axis::Columns);
    let mut tree_csv = Vec::new();
    write_tree_csv(&mut tree_csv, &cols, &m.phoneme_symbols).unwrap();
    assert_eq!(String::from_utf8(tree_csv).unwrap().lines().count(), 3);

    let svg = render_clustermap(&row_minmax(&m), &rows, &cols, "a & b");
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(svg.contains("l&lt;0&gt;") && svg.contains("a &amp; b"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn minmax_is_idempotent_and_keeps_row_argmax(vals in proptest::collection::vec(-5.0f64..5.0, 12)) {
        let m = matrix(vals.clone(), 3, 4);
        let once = row_minmax(&m);
        let twice = row_minmax(&once);
        prop_assert!(same_with_nan(&once.values, &twice.values, 1e-12));
        for r in 0..3 {
            let row = once.row(r);
            let argmax = |xs: &[f64]| (0..xs.len()).fold(0, |b, i| if xs[i] > xs[b] { i } else { b });
            prop_assert_eq!(argmax(row), argmax(&vals[r * 4..(r + 1) * 4]));
            let (lo, hi) = row.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            prop_assert!(lo == 0.0 && (hi == 1.0 || hi == 0.0));
        }
    }

    #[test]
    fn correlation_invariances(a in proptest::collection::vec(-10.0f64..10.0, 3..30), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let mut dedup = a.clone();
        dedup.sort_by(f64::total_cmp);
        dedup.dedup();
        prop_assume!(dedup.len() == a.len());
        let b: Vec<f64> = a.iter().map(|v| scale * v + shift).collect();
        prop_assert!((pearson(&a, &b).unwrap() - 1.0).abs() < 1e-9);
        let cubed: Vec<f64> = a.iter().map(|v| v.powi(3) + v.exp()).collect();
        prop_assert!((spearman(&a, &cubed).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -v.powi(3)).collect();
        prop_assert!((spearman(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        prop_assert!((pearson(&a, &a.iter().map(|v| -v).collect::<Vec<_>>()).unwrap() + 1.0).abs() < 1e-9);
    }
}
