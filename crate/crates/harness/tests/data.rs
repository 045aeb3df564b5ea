use modnorm_harness::data::{
    load_cifar10, markov_tokens, parse_cifar_batch, synthetic_task, CIFAR_RECORDS_PER_FILE,
    CIFAR_RECORD_BYTES,
};
use modnorm_harness::HarnessError;
use nalgebra::DMatrix;
use std::path::Path;

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

#[test]
fn synthetic_examples_have_unit_rms() {
    let s = synthetic_task(10, 32, 200, 50, 3).unwrap();
    assert_eq!((s.train.len(), s.test.len()), (200, 50));
    for i in 0..s.train.len() {
        let r = rms(&s.train.example(i));
        assert!((r - 1.0).abs() < 0.1, "example {i} has rms {r}");
    }
    assert!(s.train.targets().iter().all(|t| *t < 10));
}

#[test]
fn synthetic_is_deterministic_in_seed() {
    let a = synthetic_task(4, 8, 20, 5, 11).unwrap();
    let b = synthetic_task(4, 8, 20, 5, 11).unwrap();
    let c = synthetic_task(4, 8, 20, 5, 12).unwrap();
    assert_eq!(a.train.example(7), b.train.example(7));
    assert_eq!(a.test.targets(), b.test.targets());
    assert_ne!(a.train.example(7), c.train.example(7));
}

#[test]
fn synthetic_rejects_empty_sizes() {
    assert!(matches!(
        synthetic_task(0, 8, 1, 1, 0),
        Err(HarnessError::Data(_))
    ));
    assert!(synthetic_task(2, 8, 1, 0, 0).is_err());
}

fn design(d: &modnorm_harness::data::Dataset) -> DMatrix<f64> {
    let n = d.len();
    let k = d.example_shape().iter().product::<usize>();
    DMatrix::from_fn(n, k + 1, |i, j| if j == k { 1.0 } else { d.example(i)[j] })
}

#[test]
fn least_squares_probe_beats_chance() {
    let classes = 10;
    let s = synthetic_task(classes, 32, 2000, 1000, 5).unwrap();
    let x = design(&s.train);
    let y = DMatrix::from_fn(s.train.len(), classes, |i, c| {
        if s.train.targets()[i] == c {
            1.0
        } else {
            0.0
        }
    });
    let gram = x.transpose() * &x + DMatrix::identity(x.ncols(), x.ncols()) * 1e-6;
    let w = gram.cholesky().unwrap().solve(&(x.transpose() * y));
    let scores = design(&s.test) * w;
    let correct = (0..s.test.len())
        .filter(|&i| scores.row(i).transpose().argmax().0 == s.test.targets()[i])
        .count();
    let acc = correct as f64 / s.test.len() as f64;
    assert!(acc > 2.0 / classes as f64, "probe accuracy {acc}");
}

#[test]
fn markov_tokens_are_one_hot_with_next_token_targets() {
    let s = markov_tokens(7, 5, 30, 10, 2).unwrap();
    assert_eq!(s.train.example_shape(), &[5, 7]);
    let (x, t) = s.train.batch(&[0, 1]).unwrap();
    assert_eq!(x.shape(), &[2, 5, 7]);
    assert_eq!(t.len(), 10);
    let ex = s.train.example(0);
    for (pos, row) in ex.chunks(7).enumerate() {
        assert_eq!(row.iter().filter(|v| **v == 1.0).count(), 1);
        assert_eq!(row.iter().sum::<f64>(), 1.0);
        if pos + 1 < 5 {
            let next = ex[(pos + 1) * 7..(pos + 2) * 7]
                .iter()
                .position(|v| *v == 1.0)
                .unwrap();
            assert_eq!(t[pos], next);
        }
    }
}

fn write_batch(path: &Path, records: usize, label: impl Fn(usize) -> u8) {
    let mut raw = vec![0u8; records * CIFAR_RECORD_BYTES];
    for (i, rec) in raw.chunks_mut(CIFAR_RECORD_BYTES).enumerate() {
        rec[0] = label(i);
        for (j, p) in rec[1..].iter_mut().enumerate() {
            *p = ((i * 7 + j * 13) % 256) as u8;
        }
    }
    std::fs::write(path, raw).unwrap();
}

#[test]
fn cifar_batch_parses_and_normalizes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.bin");
    write_batch(&p, CIFAR_RECORDS_PER_FILE, |i| (i % 10) as u8);
    let (bytes, scale, labels) = parse_cifar_batch(&p).unwrap();
    assert_eq!(labels.len(), CIFAR_RECORDS_PER_FILE);
    assert_eq!(labels[13], 3);
    let img: Vec<f64> = bytes[..3072].iter().map(|b| *b as f64 * scale[0]).collect();
    assert!((rms(&img) - 1.0).abs() < 1e-12);
}

#[test]
fn truncated_cifar_batch_reports_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.bin");
    write_batch(&p, 3, |_| 0);
    let msg = parse_cifar_batch(&p).unwrap_err().to_string();
    assert!(
        msg.contains(&(CIFAR_RECORD_BYTES * CIFAR_RECORDS_PER_FILE).to_string()),
        "{msg}"
    );
    assert!(msg.contains(&(3 * CIFAR_RECORD_BYTES).to_string()), "{msg}");
}

#[test]
fn cifar_label_out_of_range_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("b.bin");
    write_batch(&p, CIFAR_RECORDS_PER_FILE, |i| if i == 42 { 10 } else { 1 });
    let msg = parse_cifar_batch(&p).unwrap_err().to_string();
    assert!(msg.contains("label 10"), "{msg}");
}

#[test]
fn cifar_directory_loads_standard_splits() {
    let dir = tempfile::tempdir().unwrap();
    for i in 1..=5 {
        write_batch(
            &dir.path().join(format!("data_batch_{i}.bin")),
            CIFAR_RECORDS_PER_FILE,
            |r| (r % 10) as u8,
        );
    }
    assert!(load_cifar10(dir.path()).is_err());
    write_batch(
        &dir.path().join("test_batch.bin"),
        CIFAR_RECORDS_PER_FILE,
        |r| (r % 10) as u8,
    );
    let s = load_cifar10(dir.path()).unwrap();
    assert_eq!((s.train.len(), s.test.len()), (50_000, 10_000));
    assert_eq!(s.train.example_shape(), &[3, 32, 32]);
    assert!(s.test.targets().iter().all(|t| *t < 10));
}
