mod common;

use common::*;
use planting::gradcore::ops;
use planting::Tensor4;
use rand::Rng;

#[test]
fn conv_matches_naive_on_random_shapes() {
    let mut r = rng(100);
    for _ in 0..120 {
        let dims = [
            r.gen_range(1..4),
            r.gen_range(1..5),
            r.gen_range(1..10),
            r.gen_range(1..10),
        ];
        let co = r.gen_range(1..6);
        let x = random_tensor(dims, &mut r);
        let w = random_tensor([co, dims[1], 3, 3], &mut r);
        let b = random_tensor([co, 1, 1, 1], &mut r);
        let got = ops::conv2d(&x, &w, &b).unwrap();
        assert!(
            max_abs_diff(&got, &naive_conv(&x, &w, &b)) < 1e-12,
            "{dims:?} -> {co}"
        );
    }
}

#[test]
fn maxpool_matches_naive_on_random_shapes() {
    let mut r = rng(101);
    for _ in 0..120 {
        let dims = [
            r.gen_range(1..4),
            r.gen_range(1..5),
            2 * r.gen_range(1..6),
            2 * r.gen_range(1..6),
        ];
        let x = random_tensor(dims, &mut r);
        let (got, _) = ops::maxpool2x2(&x).unwrap();
        assert!(max_abs_diff(&got, &naive_maxpool(&x)) < 1e-12, "{dims:?}");
    }
}

#[test]
fn linear_matches_naive_on_random_shapes() {
    let mut r = rng(102);
    for _ in 0..120 {
        let dims = [
            r.gen_range(1..5),
            r.gen_range(1..4),
            r.gen_range(1..4),
            r.gen_range(1..4),
        ];
        let fan_in = dims[1] * dims[2] * dims[3];
        let out = r.gen_range(1..8);
        let x = random_tensor(dims, &mut r);
        let w = random_tensor([out, fan_in, 1, 1], &mut r);
        let b = random_tensor([out, 1, 1, 1], &mut r);
        let got = ops::linear(&x, &w, &b).unwrap();
        assert!(
            max_abs_diff(&got, &naive_linear(&x, &w, &b)) < 1e-12,
            "{dims:?} -> {out}"
        );
    }
}

#[test]
fn cross_entropy_matches_explicit_exponentials() {
    let mut r = rng(103);
    for _ in 0..100 {
        let n = r.gen_range(1..6);
        let k = r.gen_range(2..12);
        let logits =
            Tensor4::from_rows(n, k, (0..n * k).map(|_| r.gen_range(-5.0..5.0)).collect()).unwrap();
        let targets: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let (loss, _) = ops::softmax_cross_entropy(&logits, &targets).unwrap();
        assert!((loss - naive_cross_entropy(&logits, &targets)).abs() < 1e-10);
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut r = rng(104);
    for _ in 0..100 {
        let k = r.gen_range(1..20);
        let row: Vec<f64> = (0..k).map(|_| r.gen_range(-50.0..50.0)).collect();
        let p = ops::softmax(&row);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
