mod common;

use common::*;
use fsol::kernels::corr::Branch::{Deformation, Gradient};
use fsol::kernels::{
    ccdc_hv, conv2d, conv3d_dual, corr2d_depthwise, deform_conv2d, CcdcSpec, Conv2dGeometry, ConvSpec, DeformField,
    DualStack,
};
use fsol::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn spec(w: Tensor<f64>, pad: usize) -> ConvSpec<f64> {
    ConvSpec::new(w, None, Conv2dGeometry { stride: 1, padding: pad }).unwrap()
}

fn delta(co: usize, ci: usize) -> Tensor<f64> {
    Tensor::from_fn(&[co, ci, 3, 3], |i| if i[0] == i[1] && i[2] == 1 && i[3] == 1 { 1.0 } else { 0.0 }).unwrap()
}

#[test]
fn conv_of_ones_is_nine() {
    let x = Tensor::ones(&[1, 1, 3, 3]).unwrap();
    let y = conv2d(&x, &spec(Tensor::ones(&[1, 1, 3, 3]).unwrap(), 0)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data(), &[9.0]);
}

#[test]
fn delta_kernel_is_identity() {
    let mut r = rng(1);
    let x = rand_tensor(&mut r, &[1, 3, 5, 4]);
    let y = conv2d(&x, &spec(delta(3, 3), 1)).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv_matches_nested_loops() {
    let mut r = rng(2);
    let x = rand_tensor(&mut r, &[1, 4, 6, 6]);
    let w = rand_tensor(&mut r, &[2, 4, 3, 3]);
    let b = rand_tensor(&mut r, &[2]);
    let s = ConvSpec::new(w.clone(), Some(b.clone()), Conv2dGeometry { stride: 1, padding: 1 }).unwrap();
    let got = conv2d(&x, &s).unwrap();
    assert!(max_abs(&got, &conv2d_oracle(&x, &w, Some(b.data()), 1, 1)) < 1e-12);
}

fn conv2d_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, s: usize, p: usize) -> Tensor<f64> {
    common::conv2d(x, w, b, s, p)
}

#[test]
fn conv_rejects_channel_mismatch_and_empty_output() {
    let x = Tensor::<f64>::ones(&[1, 2, 4, 4]).unwrap();
    assert!(conv2d(&x, &spec(Tensor::ones(&[1, 3, 3, 3]).unwrap(), 1)).is_err());
    let x = Tensor::<f64>::ones(&[1, 1, 2, 2]).unwrap();
    assert!(conv2d(&x, &spec(Tensor::ones(&[1, 1, 3, 3]).unwrap(), 0)).is_err());
}

#[test]
fn identity_field_reduces_deform_to_conv() {
    let mut r = rng(3);
    let x = rand_tensor(&mut r, &[1, 3, 7, 6]);
    let s = spec(rand_tensor(&mut r, &[2, 3, 3, 3]), 1);
    let field = DeformField::identity(1, 9, (7, 6)).unwrap();
    assert_eq!(deform_conv2d(&x, &s, &field).unwrap(), conv2d(&x, &s).unwrap());
}

#[test]
fn unit_column_offset_shifts_interior() {
    let mut r = rng(4);
    let x = rand_tensor(&mut r, &[1, 2, 8, 8]);
    let s = spec(rand_tensor(&mut r, &[2, 2, 3, 3]), 1);
    let mut field = DeformField::identity(1, 9, (8, 8)).unwrap();
    for k in 0..9 {
        for y in 0..8 {
            for xx in 0..8 {
                field.offsets.set(&[0, 2 * k + 1, y, xx], 1.0);
            }
        }
    }
    let got = deform_conv2d(&x, &s, &field).unwrap();
    // Input shifted left by one column: x'(y, j) = x(y, j + 1).
    let shifted = Tensor::from_fn(&[1, 2, 8, 8], |i| if i[3] < 7 { x.get(&[i[0], i[1], i[2], i[3] + 1]) } else { 0.0 }).unwrap();
    let want = conv2d(&shifted, &s).unwrap();
    for o in 0..2 {
        for y in 1..7 {
            for j in 1..6 {
                let (a, b) = (got.get(&[0, o, y, j]), want.get(&[0, o, y, j]));
                assert!((a - b).abs() < 1e-12, "({o},{y},{j}) {a} vs {b}");
            }
        }
    }
}

#[test]
fn half_pixel_row_offset_on_column_ramp() {
    // x(i, j) = j is constant along rows, so a row offset of 0.5 changes
    // nothing away from the top and bottom edges; on a row ramp it adds
    // exactly 0.5 per unit of kernel mass.
    let s = spec(Tensor::ones(&[1, 1, 3, 3]).unwrap(), 1);
    let mut field = DeformField::identity(1, 9, (6, 6)).unwrap();
    for k in 0..9 {
        for y in 0..6 {
            for xx in 0..6 {
                field.offsets.set(&[0, 2 * k, y, xx], 0.5);
            }
        }
    }
    let cols = Tensor::from_fn(&[1, 1, 6, 6], |i| i[3] as f64).unwrap();
    let rows = Tensor::from_fn(&[1, 1, 6, 6], |i| i[2] as f64).unwrap();
    let yc = deform_conv2d(&cols, &s, &field).unwrap();
    let yr = deform_conv2d(&rows, &s, &field).unwrap();
    for y in 1..4 {
        for j in 1..5 {
            assert!((yc.get(&[0, 0, y, j]) - 9.0 * j as f64).abs() < 1e-12);
            assert!((yr.get(&[0, 0, y, j]) - 9.0 * (y as f64 + 0.5)).abs() < 1e-12);
        }
    }
}

#[test]
fn deform_rejects_bad_fields() {
    let x = Tensor::<f64>::ones(&[1, 1, 4, 4]).unwrap();
    let s = spec(Tensor::ones(&[1, 1, 3, 3]).unwrap(), 1);
    let small = DeformField::identity(1, 9, (3, 4)).unwrap();
    assert!(deform_conv2d(&x, &s, &small).is_err());
    let mut nan = DeformField::identity(1, 9, (4, 4)).unwrap();
    nan.offsets.set(&[0, 3, 1, 1], f64::NAN);
    assert!(deform_conv2d(&x, &s, &nan).is_err());
}

#[test]
fn ccdc_examples() {
    let mut r = rng(5);
    let w = rand_tensor(&mut r, &[3, 2, 5]);
    let c = Tensor::full(&[1, 2, 5, 5], 1.7).unwrap();
    let y = ccdc_hv(&c, &CcdcSpec::new(w.clone(), None, 1.0).unwrap()).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));

    let x = rand_tensor(&mut r, &[1, 2, 5, 5]);
    let full = Tensor::from_fn(&[3, 2, 3, 3], |i| {
        CROSS
            .iter()
            .position(|&(dy, dx)| (dy + 1) as usize == i[2] && (dx + 1) as usize == i[3])
            .map_or(0.0, |k| w.get(&[i[0], i[1], k]))
    })
    .unwrap();
    let y0 = ccdc_hv(&x, &CcdcSpec::new(w.clone(), None, 0.0).unwrap()).unwrap();
    assert!(max_abs(&y0, &conv2d(&x, &spec(full, 1)).unwrap()) < 1e-12);

    let yh = ccdc_hv(&x, &CcdcSpec::new(w.clone(), None, 0.5).unwrap()).unwrap();
    assert!(max_abs(&yh, &ccdc(&x, &w, None, 0.5)) < 1e-12);
}

#[test]
fn ccdc_rejects_bad_theta_and_shape() {
    let w = Tensor::<f64>::ones(&[1, 1, 5]).unwrap();
    assert!(CcdcSpec::new(w.clone(), None, 1.5).is_err());
    assert!(CcdcSpec::new(w, None, -0.1).is_err());
    assert!(CcdcSpec::new(Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap(), None, 0.5).is_err());
}

#[test]
fn depthwise_corr_examples() {
    let mut r = rng(6);
    let q = rand_tensor(&mut r, &[1, 3, 6, 5]);
    let d = Tensor::from_fn(&[1, 3, 3, 3], |i| if i[2] == 1 && i[3] == 1 { 1.0 } else { 0.0 }).unwrap();
    assert_eq!(corr2d_depthwise(&q, &d).unwrap(), q);
    let z = corr2d_depthwise(&q, &Tensor::zeros(&[1, 3, 3, 3]).unwrap()).unwrap();
    assert!(z.data().iter().all(|v| *v == 0.0));
    let k = rand_tensor(&mut r, &[1, 3, 3, 3]);
    assert!(max_abs(&corr2d_depthwise(&q, &k).unwrap(), &corr(&q, &k)) < 1e-12);
    assert!(corr2d_depthwise(&q, &Tensor::zeros(&[1, 2, 3, 3]).unwrap()).is_err());
}

fn dual(qd: &Tensor<f64>, qc: &Tensor<f64>, kd: &Tensor<f64>, kc: &Tensor<f64>) -> Tensor<f64> {
    conv3d_dual(&DualStack::new([(Deformation, qd), (Gradient, qc)], [(Deformation, kd), (Gradient, kc)]).unwrap()).unwrap()
}

#[test]
fn dual_stack_examples() {
    let mut r = rng(7);
    let (qd, qc) = (rand_tensor(&mut r, &[1, 4, 8, 8]), rand_tensor(&mut r, &[1, 4, 8, 8]));
    let (kd, kc) = (rand_tensor(&mut r, &[1, 4, 3, 3]), rand_tensor(&mut r, &[1, 4, 3, 3]));
    let zq = Tensor::zeros(&[1, 4, 8, 8]).unwrap();
    let zk = Tensor::zeros(&[1, 4, 3, 3]).unwrap();
    assert!(max_abs(&dual(&qd, &zq, &kd, &zk), &corr(&qd, &kd)) <= 1e-12);
    let once = corr2d_depthwise(&qd, &kd).unwrap();
    assert!(max_abs(&dual(&qd, &qd, &kd, &kd), &once.scale(2.0)) <= 1e-12);
    let want = Tensor::new(
        &[1, 4, 8, 8],
        corr(&qd, &kd).data().iter().zip(corr(&qc, &kc).data()).map(|(a, b)| a + b).collect(),
    )
    .unwrap();
    assert!(max_abs(&dual(&qd, &qc, &kd, &kc), &want) < 1e-12);
}

#[test]
fn dual_stack_rejects_swapped_order_and_channels() {
    let q = Tensor::<f64>::ones(&[1, 2, 4, 4]).unwrap();
    let k = Tensor::<f64>::ones(&[1, 2, 3, 3]).unwrap();
    assert!(DualStack::new([(Deformation, &q), (Gradient, &q)], [(Gradient, &k), (Deformation, &k)]).is_err());
    let k3 = Tensor::<f64>::ones(&[1, 3, 3, 3]).unwrap();
    assert!(DualStack::new([(Deformation, &q), (Gradient, &q)], [(Deformation, &k3), (Gradient, &k3)]).is_err());
}

#[test]
fn deform_matches_bilinear_oracle() {
    let mut r = rng(8);
    for _ in 0..20 {
        let (ci, co) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let (h, w) = (r.gen_range(3..=7), r.gen_range(3..=7));
        let x = rand_tensor(&mut r, &[1, ci, h, w]);
        let wt = rand_tensor(&mut r, &[co, ci, 3, 3]);
        let offsets = Tensor::rand_uniform(&[1, 18, h, w], -2.5, 2.5, &mut r).unwrap();
        let masks = Tensor::rand_uniform(&[1, 9, h, w], 0.0, 1.0, &mut r).unwrap();
        let field = DeformField { offsets: offsets.clone(), masks: masks.clone() };
        let got = deform_conv2d(&x, &spec(wt.clone(), 1), &field).unwrap();
        assert!(max_abs(&got, &deform(&x, &wt, None, &offsets, &masks, 1, 1)) < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn operators_are_linear_in_weights(seed in any::<u64>(), alpha in -3.0f64..3.0) {
        let mut r = rng(seed);
        let (ci, co, h, w) = (r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(3..=8), r.gen_range(3..=8));
        let x = rand_tensor(&mut r, &[1, ci, h, w]);
        let wt = rand_tensor(&mut r, &[co, ci, 3, 3]);
        let a = conv2d(&x, &spec(wt.scale(alpha), 1)).unwrap();
        prop_assert!(max_abs(&a, &conv2d(&x, &spec(wt.clone(), 1)).unwrap().scale(alpha)) <= 1e-12);

        let field = DeformField {
            offsets: Tensor::rand_uniform(&[1, 18, h, w], -1.5, 1.5, &mut r).unwrap(),
            masks: Tensor::rand_uniform(&[1, 9, h, w], 0.0, 1.0, &mut r).unwrap(),
        };
        let a = deform_conv2d(&x, &spec(wt.scale(alpha), 1), &field).unwrap();
        let b = deform_conv2d(&x, &spec(wt, 1), &field).unwrap().scale(alpha);
        prop_assert!(max_abs(&a, &b) <= 1e-12);

        let wc = rand_tensor(&mut r, &[co, ci, 5]);
        let theta = r.gen_range(0.0..=1.0);
        let a = ccdc_hv(&x, &CcdcSpec::new(wc.scale(alpha), None, theta).unwrap()).unwrap();
        let b = ccdc_hv(&x, &CcdcSpec::new(wc, None, theta).unwrap()).unwrap().scale(alpha);
        prop_assert!(max_abs(&a, &b) <= 1e-12);

        let k = rand_tensor(&mut r, &[1, ci, 3, 3]);
        let a = corr2d_depthwise(&x, &k.scale(alpha)).unwrap();
        prop_assert!(max_abs(&a, &corr2d_depthwise(&x, &k).unwrap().scale(alpha)) <= 1e-12);
    }

    #[test]
    fn ccdc_matches_oracle(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (ci, co, h, w) = (r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=8), r.gen_range(1..=8));
        let x = rand_tensor(&mut r, &[1, ci, h, w]);
        let wt = rand_tensor(&mut r, &[co, ci, 5]);
        let b = rand_tensor(&mut r, &[co]);
        let theta = r.gen_range(0.0..=1.0);
        let got = ccdc_hv(&x, &CcdcSpec::new(wt.clone(), Some(b.clone()), theta).unwrap()).unwrap();
        prop_assert!(max_abs(&got, &ccdc(&x, &wt, Some(b.data()), theta)) < 1e-12);
    }
}
