mod common;

use common::*;
use fsol::kernels::Conv2dGeometry;
use fsol::tensor::ops::{adaptive_avg_pool, bilinear_upsample, binary, leaky_relu, BinaryKind};
use fsol::tensor::{GradTape, Tensor};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn elementwise_examples() {
    let a = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
    let b = Tensor::new(&[2], vec![3.0, 4.0]).unwrap();
    assert_eq!(binary(&a, &b, BinaryKind::Add).unwrap().data(), &[4.0, 6.0]);

    let mut r = rng(1);
    let f = rand_tensor(&mut r, &[1, 3, 4, 4]);
    let w = rand_tensor(&mut r, &[1, 1, 4, 4]);
    let s = binary(&f, &w, BinaryKind::Add).unwrap();
    assert_eq!(s.shape(), &[1, 3, 4, 4]);
    for c in 0..3 {
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(s.get(&[0, c, y, x]), f.get(&[0, c, y, x]) + w.get(&[0, 0, y, x]));
            }
        }
    }
    assert!(binary(&f, &rand_tensor(&mut r, &[1, 2, 4, 4]), BinaryKind::Add).is_err());
    assert!(binary(&w, &f, BinaryKind::Add).is_err());
}

#[test]
fn times_zero_has_zero_value_and_gradient() {
    let mut tape = GradTape::new();
    let x = tape.leaf(Tensor::new(&[3], vec![1.0, -2.0, 5.0]).unwrap().with_grad());
    let z = tape.constant(Tensor::zeros(&[3]).unwrap());
    let y = tape.mul(x, z).unwrap();
    assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    let l = tape.sum(y);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn pooling_examples() {
    let mut r = rng(2);
    let x = rand_tensor(&mut r, &[1, 1, 3, 3]);
    assert_eq!(adaptive_avg_pool(&x, (3, 3)).unwrap(), x);
    let ones = Tensor::<f64>::ones(&[1, 1, 6, 6]).unwrap();
    assert!(adaptive_avg_pool(&ones, (3, 3)).unwrap().data().iter().all(|v| *v == 1.0));

    // 5 → 3 bins: [0,2), [1,4), [3,5).
    let ramp = Tensor::from_fn(&[1, 1, 5, 5], |i| (i[2] * 5 + i[3]) as f64).unwrap();
    let bins = [(0usize, 2usize), (1, 4), (3, 5)];
    let got = adaptive_avg_pool(&ramp, (3, 3)).unwrap();
    for (oy, &(y0, y1)) in bins.iter().enumerate() {
        for (ox, &(x0, x1)) in bins.iter().enumerate() {
            let mut s = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    s += (y * 5 + x) as f64;
                }
            }
            let want = s / ((y1 - y0) * (x1 - x0)) as f64;
            assert!((got.get(&[0, 0, oy, ox]) - want).abs() < 1e-12);
        }
    }
    assert!(adaptive_avg_pool(&Tensor::<f64>::ones(&[3, 3]).unwrap(), (3, 3)).is_err());
}

#[test]
fn upsample_examples() {
    let c = Tensor::full(&[1, 2, 3, 3], 0.25f64).unwrap();
    assert!(bilinear_upsample(&c, (7, 11)).unwrap().data().iter().all(|v| (*v - 0.25).abs() < 1e-15));

    let x = Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
    let y = bilinear_upsample(&x, (2, 4)).unwrap();
    assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);

    let big = Tensor::<f32>::zeros(&[1, 1, 128, 128]).unwrap();
    assert_eq!(bilinear_upsample(&big, (512, 512)).unwrap().shape(), &[1, 1, 512, 512]);
    assert!(bilinear_upsample(&x, (1, 4)).is_err());
}

#[test]
fn leaky_relu_examples() {
    let x = Tensor::new(&[2], vec![5.0f64, -2.0]).unwrap();
    let y = leaky_relu(&x, 0.01);
    assert_eq!(y.data()[0], 5.0);
    assert!((y.data()[1] + 0.02).abs() < 1e-15);

    let h = 1e-5;
    let f = |v: f64| leaky_relu(&Tensor::new(&[1], vec![v]).unwrap(), 0.01).data()[0];
    let numeric = (f(-1.0 + h) - f(-1.0 - h)) / (2.0 * h);
    assert!((numeric - 0.01).abs() < 1e-9);
    let mut tape = GradTape::new();
    let v = tape.leaf(Tensor::new(&[1], vec![-1.0f64]).unwrap().with_grad());
    let y = tape.leaky_relu(v, 0.01);
    let l = tape.sum(y);
    tape.backward(l).unwrap();
    assert!((tape.grad(v).unwrap()[0] - 0.01).abs() < 1e-15);
}

#[test]
fn backward_examples() {
    let mut tape = GradTape::new();
    let x = tape.leaf(Tensor::<f64>::ones(&[2, 3]).unwrap().with_grad());
    let l = tape.sum(x);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);

    let mut tape = GradTape::new();
    let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad());
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);

    let mut tape = GradTape::<f64>::new();
    let x = tape.leaf(Tensor::ones(&[2]).unwrap().with_grad());
    assert!(tape.backward(x).is_err());
    let y = tape.scale(x, 2.0);
    assert!(tape.backward(y).is_err());
}

#[test]
fn conv_relu_sum_matches_finite_differences() {
    let mut r = rng(3);
    let inputs = vec![rand_tensor(&mut r, &[1, 2, 5, 5]), rand_tensor(&mut r, &[3, 2, 3, 3])];
    let err = fd_check(
        &inputs,
        |t, v| {
            let y = t.conv2d(v[0], v[1], None, Conv2dGeometry::same(3)).unwrap();
            t.leaky_relu(y, 0.01)
        },
        20,
        1e-5,
        &mut r,
    );
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut r = rng(4);
        let x = rand_tensor(&mut r, &[1, 2, 6, 6]);
        let w = rand_tensor(&mut r, &[2, 2, 3, 3]);
        let mut t = GradTape::new();
        let (xv, wv) = (t.constant(x), t.constant(w));
        let y = t.conv2d(xv, wv, None, Conv2dGeometry::same(3)).unwrap();
        let y = t.bilinear_upsample(y, (12, 12)).unwrap();
        t.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn broadcast_gradient_sums_over_channels(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (c, h, w) = (r.gen_range(1..=4), r.gen_range(1..=5), r.gen_range(1..=5));
        let a = rand_tensor(&mut r, &[1, c, h, w]);
        let b = rand_tensor(&mut r, &[1, 1, h, w]);
        let g = rand_tensor(&mut r, &[1, c, h, w]);
        let mut tape = GradTape::new();
        let av = tape.leaf(a.clone().with_grad());
        let bv = tape.leaf(b.clone().with_grad());
        let gv = tape.constant(g.clone());
        let s = tape.mul(av, bv).unwrap();
        let p = tape.mul(s, gv).unwrap();
        let l = tape.sum(p);
        tape.backward(l).unwrap();
        let gb = tape.grad(bv).unwrap();
        for y in 0..h {
            for x in 0..w {
                let want: f64 = (0..c).map(|k| g.get(&[0, k, y, x]) * a.get(&[0, k, y, x])).sum();
                prop_assert!((gb[y * w + x] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grads_accumulate_until_zeroed(v in proptest::collection::vec(-5.0f64..5.0, 1..8)) {
        let mut t = Tensor::new(&[v.len()], v.clone()).unwrap().with_grad();
        t.accumulate_grad(&v).unwrap();
        t.accumulate_grad(&v).unwrap();
        let doubled: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        prop_assert_eq!(t.grad().unwrap(), &doubled[..]);
        t.zero_grad();
        prop_assert!(t.grad().unwrap().iter().all(|g| *g == 0.0));
    }
}
