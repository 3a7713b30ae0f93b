use midus::memory::{flat_index, split_index};
use midus::numerics::{matmul, rms_norm, softmax, topk};
use midus::{Rng, Tensor};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

#[test]
fn matmul_small_cases() {
    let a = matmul(&Tensor::<f64>::eye(2), &t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
    assert_eq!(a.data(), &[1., 2., 3., 4.]);
    let b = matmul(&t(&[1, 2], &[1., 0.]), &t(&[2, 1], &[0., 5.])).unwrap();
    assert_eq!(b.data(), &[0.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::new(1);
    let a: Tensor<f32> = rng.normal_tensor(&[5, 7], 1.0);
    let b: Tensor<f32> = rng.normal_tensor(&[7, 3], 1.0);
    let c = matmul(&a, &b).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            let mut want = 0.0f64;
            for p in 0..7 {
                want += a.row(i)[p] as f64 * b.row(p)[j] as f64;
            }
            assert!((c.row(i)[j] as f64 - want).abs() < 1e-6 * 10.0_f64.max(want.abs()));
        }
    }
}

#[test]
fn matmul_rejects_mismatch() {
    assert!(matmul(&Tensor::<f32>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).is_err());
}

#[test]
fn softmax_cases() {
    assert_eq!(softmax(&t(&[1, 2], &[0., 0.])).unwrap().data(), &[0.5, 0.5]);
    let p = softmax(&Tensor::<f32>::from_f64(&[1, 2], &[1e4, 0.]).unwrap()).unwrap();
    assert!(p.is_finite());
    assert!((p.data()[0] - 1.0).abs() < 1e-6 && p.data()[1] < 1e-6);

    let mut rng = Rng::new(2);
    let x: Tensor<f64> = rng.normal_tensor(&[3, 9], 2.0);
    let p = softmax(&x).unwrap();
    for r in 0..3 {
        let z: f64 = x.row(r).iter().map(|v| v.exp()).sum();
        for (pv, xv) in p.row(r).iter().zip(x.row(r)) {
            assert!((pv - xv.exp() / z).abs() < 1e-6);
        }
    }
}

#[test]
fn rms_norm_cases() {
    let eps = 1e-5;
    let (y, _) = rms_norm(&Tensor::<f64>::ones(&[1, 4]), &Tensor::ones(&[4]), eps).unwrap();
    let want = 1.0 / (1.0 + eps).sqrt();
    assert!(y.data().iter().all(|&v| (v - want).abs() < 1e-15));
    let (z, _) = rms_norm(&t(&[1, 3], &[1., -2., 3.]), &Tensor::zeros(&[3]), eps).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));

    let mut rng = Rng::new(3);
    let x: Tensor<f64> = rng.normal_tensor(&[2, 6], 1.0);
    let g: Tensor<f64> = rng.normal_tensor(&[6], 1.0);
    let (y, _) = rms_norm(&x, &g, eps).unwrap();
    for r in 0..2 {
        let ms = x.row(r).iter().map(|v| v * v).sum::<f64>() / 6.0;
        for c in 0..6 {
            assert!((y.row(r)[c] - x.row(r)[c] / (ms + eps).sqrt() * g.data()[c]).abs() < 1e-6);
        }
    }
}

#[test]
fn topk_cases() {
    assert_eq!(topk(&[1.0f64, 1.0, 0.0], 1).unwrap(), vec![(0, 1.0)]);
    assert_eq!(topk(&[3.0f64, 1.0, 2.0], 2).unwrap(), vec![(0, 3.0), (2, 2.0)]);
    assert!(topk(&[1.0f64], 2).is_err());
}

#[test]
fn topk_matches_full_sort_for_every_k() {
    let mut rng = Rng::new(4);
    // coarse values force plenty of ties
    let v: Vec<f64> = (0..100).map(|_| rng.below(20) as f64).collect();
    let mut sorted: Vec<(usize, f64)> = v.iter().copied().enumerate().collect();
    sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 1..=100 {
        assert_eq!(topk(&v, k).unwrap(), sorted[..k].to_vec(), "k = {k}");
    }
}

#[test]
fn flat_index_cases() {
    assert_eq!(flat_index(0, 0, 64).unwrap(), 0);
    assert_eq!(flat_index(1, 2, 64).unwrap(), 66);
    assert!(flat_index(64, 0, 64).is_err());
    for n in [1, 3, 8] {
        for idx in 0..n * n {
            let (i, j) = split_index(idx, n);
            assert_eq!((i, j), (idx / n, idx % n));
            assert_eq!(flat_index(i, j, n).unwrap(), idx);
        }
    }
}

#[test]
fn streams_are_reproducible() {
    let a: Tensor<f64> = Rng::new(9).stream(2).normal_tensor(&[4], 1.0);
    let b: Tensor<f64> = Rng::new(9).stream(2).normal_tensor(&[4], 1.0);
    let c: Tensor<f64> = Rng::new(9).stream(3).normal_tensor(&[4], 1.0);
    assert_eq!(a, b);
    assert_ne!(a, c);
}
