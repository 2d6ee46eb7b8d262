use proptest::prelude::*;

use super::idx::encode_idx;
use super::*;
use crate::losses::ce_loss;
use crate::net::{sgd_step, DenseNet, Matrix, SgdConfig, Velocity};

fn gaussian(num_classes: usize, radius: f64, seed: u64) -> GaussianSpec {
    GaussianSpec {
        num_classes,
        feature_dim: 16,
        train_per_class: 100,
        test_per_class: 50,
        radius,
        noise_std: 1.0,
        seed,
    }
}

#[test]
fn far_clusters_are_linearly_separable() {
    let (train, test) = gen_synthetic(&gaussian(2, 8.0, 3)).unwrap();
    let mut probe = DenseNet::mlp(16, &[], 2, 1).unwrap();
    let cfg = SgdConfig {
        learning_rate: 0.1,
        momentum: 0.0,
        ..SgdConfig::default()
    };
    let mut v = Velocity::new(&probe);
    for _ in 0..50 {
        let trace = probe.forward_trace(train.samples()).unwrap();
        let loss = ce_loss(trace.logits(), train.labels()).unwrap();
        let g = probe.backward_trace(&trace, &loss.grad_logits).unwrap();
        sgd_step(&mut probe, &g, &cfg, &mut v).unwrap();
    }
    let logits = probe.forward(test.samples()).unwrap();
    let correct = test
        .labels()
        .iter()
        .enumerate()
        .filter(|&(r, &y)| {
            let row = logits.row(r);
            (row[1] > row[0]) == (y == 1)
        })
        .count();
    assert!(correct as f64 / test.len() as f64 >= 0.99, "{correct}");
}

#[test]
fn synthetic_is_deterministic_and_balanced() {
    let spec = gaussian(4, 3.0, 9);
    let (a, b) = gen_synthetic(&spec).unwrap();
    assert_eq!(gen_synthetic(&spec).unwrap(), (a.clone(), b.clone()));
    assert_eq!(a.class_counts(), vec![100; 4]);
    assert_eq!(b.class_counts(), vec![50; 4]);
    assert_ne!(a.samples().row(0), b.samples().row(0));
    let mut bad = spec;
    bad.feature_dim = 1;
    assert!(gen_synthetic(&bad).is_err());
}

#[test]
fn idx_fixture_round_trip() {
    let set = ImageSet {
        rows: 2,
        cols: 3,
        pixels: vec![0, 255, 128, 1, 2, 3, 10, 20, 30, 40, 50, 60],
        labels: vec![7, 2],
    };
    let (images, labels) = encode_idx(&set);
    assert_eq!(&images[..4], &[0, 0, 8, 3]);
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
    std::fs::write(&ip, &images).unwrap();
    std::fs::write(&lp, &labels).unwrap();
    let ds = load_idx(&ip, &lp).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.dim(), 6);
    assert_eq!(ds.labels(), &[7, 2]);
    for (got, px) in ds.samples().as_slice().iter().zip(&set.pixels) {
        assert_eq!(*got, f64::from(*px) / 255.0);
    }
}

#[test]
fn idx_errors_fail_closed() {
    let set = ImageSet {
        rows: 2,
        cols: 2,
        pixels: vec![1; 8],
        labels: vec![0, 1],
    };
    let (images, labels) = encode_idx(&set);
    let err = parse_idx(&images[..images.len() - 1], &labels).unwrap_err();
    assert!(matches!(err, crate::Error::Parse { .. }), "{err}");
    let mut bad = images.clone();
    bad[3] = 0x01;
    assert!(matches!(
        parse_idx(&bad, &labels),
        Err(crate::Error::Parse { offset: 0, .. })
    ));
    let mut short = labels.clone();
    short[7] = 1;
    short.pop();
    assert!(matches!(
        parse_idx(&images, &short),
        Err(crate::Error::Parse { offset: 4, .. })
    ));
    assert!(parse_idx(&images[..10], &labels).is_err());
}

#[test]
fn idx_header_arithmetic_for_full_size_file() {
    let set = ImageSet {
        rows: 28,
        cols: 28,
        pixels: vec![0; 60_000 * 784],
        labels: vec![0; 60_000],
    };
    let (images, labels) = encode_idx(&set);
    let parsed = parse_idx(&images, &labels).unwrap();
    assert_eq!(parsed.len(), 60_000);
    assert_eq!(parsed.rows * parsed.cols, 784);
}

#[test]
fn split_into_two_tasks() {
    let (train, test) = gen_synthetic(&gaussian(8, 3.0, 1)).unwrap();
    let seq = split_tasks(&train, &test, 2, None).unwrap();
    seq.validate().unwrap();
    assert_eq!(seq.tasks[0].classes.iter(), 0..4);
    assert_eq!(seq.tasks[1].classes.iter(), 4..8);
    assert_eq!(seq.class_map, (0..8).collect::<Vec<_>>());
    assert!(split_tasks(&train, &test, 3, None).is_err());

    let shuffled = split_tasks(&train, &test, 4, Some(5)).unwrap();
    shuffled.validate().unwrap();
    let mut sorted = shuffled.class_map.clone();
    sorted.sort();
    assert_eq!(sorted, (0..8).collect::<Vec<_>>());
}

#[test]
fn task_union_equals_original_up_to_remap() {
    let (train, test) = gen_synthetic(&gaussian(8, 3.0, 2)).unwrap();
    let seq = split_tasks(&train, &test, 4, Some(17)).unwrap();
    let key = |row: &[f64], y: usize| {
        let mut k: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        k.push(y as u64);
        k
    };
    let mut original: Vec<_> = train
        .samples()
        .row_iter()
        .zip(train.labels())
        .map(|(r, &y)| key(r, y))
        .collect();
    let mut union: Vec<_> = seq
        .tasks
        .iter()
        .flat_map(|t| {
            t.train
                .samples()
                .row_iter()
                .zip(t.train.labels())
                .map(|(r, &y)| key(r, seq.class_map[y]))
                .collect::<Vec<_>>()
        })
        .collect();
    original.sort();
    union.sort();
    assert_eq!(original, union);
}

#[test]
fn benchmark_build_checks_divisibility() {
    let spec = BenchmarkSpec {
        num_tasks: 3,
        ..BenchmarkSpec::default()
    };
    assert!(spec.build(0).is_err());
    let seq = BenchmarkSpec::default().build(0).unwrap();
    assert_eq!(seq.len(), 2);
    assert_eq!(seq, BenchmarkSpec::default().build(0).unwrap());
}

#[test]
fn glyph_benchmark_loads_through_idx() {
    let seq = BenchmarkSpec::glyphs().build(1).unwrap();
    assert_eq!(seq.len(), 5);
    assert_eq!(seq.input_dim(), 144);
    assert!(seq.tasks[0]
        .train
        .samples()
        .as_slice()
        .iter()
        .all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn csv_rejects_bad_header() {
    let err = read_csv("x,f0\n1,2\n".as_bytes(), None, Split::Train).unwrap_err();
    assert!(matches!(err, crate::Error::Parse { .. }));
    let err = read_csv("label,f0\n1,abc\n".as_bytes(), None, Split::Train).unwrap_err();
    assert!(err.to_string().contains("abc"), "{err}");
}

proptest! {
    #[test]
    fn csv_round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..40), dim in 1usize..4) {
        let rows = values.len() / dim;
        prop_assume!(rows > 0);
        let data = values[..rows * dim].to_vec();
        let labels: Vec<usize> = (0..rows).map(|i| i % 3).collect();
        let ds = LabeledDataset::new(Matrix::from_vec(rows, dim, data).unwrap(), labels, 3, Split::Test).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), Some(3), Split::Test).unwrap();
        prop_assert_eq!(back, ds);
    }
}
