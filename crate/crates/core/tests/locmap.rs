mod common;

use common::*;
use fsol::locmap::{
    decode_peaks, encode_location_map, from_pgm16, read_pgm16, to_pgm16, write_pgm16, DecoderConfig, GtEncoder,
    LocationMap, ThresholdMode,
};
use fsol::metrics::Point;
use proptest::prelude::*;
use rand::Rng;

fn bump(h: usize, w: usize, centres: &[(usize, usize)], amp: f64, sigma: f64) -> LocationMap {
    let mut v = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            for &(cx, cy) in centres {
                let d2 = (x as f64 - cx as f64).powi(2) + (y as f64 - cy as f64).powi(2);
                v[y * w + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    LocationMap::new(h, w, v).unwrap()
}

/// Distance to the nearest site, by scanning every site.
fn nearest(x: usize, y: usize, pts: &[Point]) -> f64 {
    pts.iter().map(|p| (x as f64 - p.x).hypot(y as f64 - p.y)).fold(f64::INFINITY, f64::min)
}

#[test]
fn empty_points_give_zero_map() {
    let m = encode_location_map(&[], (16, 12), &GtEncoder::default()).unwrap();
    assert!(m.values().iter().all(|v| *v == 0.0));
}

#[test]
fn annotated_pixel_is_one_and_values_decay() {
    let p = Point::new(20.0, 20.0);
    let m = encode_location_map(&[p], (48, 48), &GtEncoder::default()).unwrap();
    assert_eq!(m.get(20, 20), 1.0);
    let along = [m.get(21, 20), m.get(22, 20), m.get(24, 20)];
    assert!(1.0 > along[0] && along[0] > along[1] && along[1] > along[2]);
    // D = 1: 1 / (1^(0.77) + 1) = 0.5.
    assert!((along[0] - 0.5).abs() < 1e-15);
    let d4: f64 = 4.0;
    assert!((along[2] - 1.0 / (d4.powf(0.02 * 4.0 + 0.75) + 1.0)).abs() < 1e-15);
}

#[test]
fn fidt_matches_brute_force_distances() {
    let mut r = rng(20);
    let pts = separated(&mut r, 32, 6, 3.0, 0);
    let m = encode_location_map(&pts, (32, 32), &GtEncoder::default()).unwrap();
    for y in 0..32 {
        for x in 0..32 {
            let d = nearest(x, y, &pts);
            let want = 1.0 / (d.powf(0.02 * d + 0.75) + 1.0);
            assert!((m.get(x, y) - want).abs() < 1e-12, "({x},{y})");
            assert!((0.0..=1.0).contains(&m.get(x, y)));
        }
    }
}

#[test]
fn out_of_bounds_point_is_rejected() {
    let e = encode_location_map(&[Point::new(1.0, 1.0), Point::new(40.0, 2.0)], (32, 32), &GtEncoder::default());
    let msg = e.unwrap_err().to_string();
    assert!(msg.contains('1'), "{msg}");
}

#[test]
fn decoder_examples() {
    let cfg = DecoderConfig::default();
    assert!(decode_peaks(&LocationMap::zeros(10, 10).unwrap(), &cfg).is_empty());
    let one = bump(64, 64, &[(20, 30)], 1.0, 2.0);
    assert_eq!(decode_peaks(&one, &cfg), vec![Point::new(20.0, 30.0)]);
    let two = bump(64, 64, &[(20, 30), (30, 30)], 1.0, 2.0);
    assert_eq!(sorted(decode_peaks(&two, &cfg)), vec![(20, 30), (30, 30)]);
}

#[test]
fn plateau_keeps_smallest_coordinate() {
    let mut v = vec![0.0; 36];
    for (x, y) in [(2, 2), (3, 2), (2, 3), (3, 3)] {
        v[y * 6 + x] = 0.8;
    }
    let m = LocationMap::new(6, 6, v).unwrap();
    assert_eq!(decode_peaks(&m, &DecoderConfig::default()), vec![Point::new(2.0, 2.0)]);
}

#[test]
fn presets_and_floor() {
    assert_eq!(DecoderConfig::default().threshold, 100.0 / 255.0);
    assert_eq!(DecoderConfig::dense().threshold, 40.0 / 255.0);
    assert_eq!(DecoderConfig::sparse().threshold, 60.0 / 255.0);
    assert_eq!(DecoderConfig::default().floor, 0.06);
    // A lone weak peak passes the relative test but not the floor.
    let weak = bump(16, 16, &[(8, 8)], 0.05, 1.5);
    assert!(decode_peaks(&weak, &DecoderConfig::default()).is_empty());
    let abs = DecoderConfig { mode: ThresholdMode::Absolute, ..DecoderConfig::default() };
    let mid = bump(16, 16, &[(8, 8)], 0.3, 1.5);
    assert!(decode_peaks(&mid, &abs).is_empty());
    assert_eq!(decode_peaks(&mid, &DecoderConfig::default()).len(), 1);
}

#[test]
fn pgm_roundtrip_is_bit_exact() {
    let mut r = rng(21);
    let vals: Vec<f64> = (0..12 * 9).map(|_| r.gen_range(0..=65535u32) as f64 / 65535.0).collect();
    let m = LocationMap::new(9, 12, vals).unwrap();
    let back = from_pgm16(&to_pgm16(&m)).unwrap();
    assert_eq!(back, m);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pgm");
    write_pgm16(&m, &path).unwrap();
    assert_eq!(read_pgm16(&path).unwrap(), m);
    assert!(from_pgm16(b"P5\n2 2\n255\n....").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_decode_roundtrip(seed in any::<u64>()) {
        let mut r = rng(seed);
        let count = r.gen_range(0..15);
        let pts = separated(&mut r, 64, count, 5.0, 3);
        let m = encode_location_map(&pts, (64, 64), &GtEncoder::default()).unwrap();
        for cfg in [DecoderConfig::default(), DecoderConfig::dense(), DecoderConfig::sparse()] {
            prop_assert_eq!(sorted(decode_peaks(&m, &cfg)), sorted(pts.clone()));
        }
    }

    #[test]
    fn raising_threshold_never_adds_detections(seed in any::<u64>()) {
        let mut r = rng(seed);
        let v: Vec<f64> = (0..24 * 24).map(|_| r.gen_range(0.0..1.0)).collect();
        let m = LocationMap::new(24, 24, v).unwrap();
        let mut prev = sorted(decode_peaks(&m, &DecoderConfig { threshold: 0.01, ..DecoderConfig::default() }));
        for t in [0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
            let cur = sorted(decode_peaks(&m, &DecoderConfig { threshold: t, ..DecoderConfig::default() }));
            prop_assert!(cur.iter().all(|p| prev.contains(p)));
            prev = cur;
        }
    }

    #[test]
    fn scaling_preserves_relative_candidates(seed in any::<u64>(), alpha in 0.05f64..=1.0) {
        let mut r = rng(seed);
        let v: Vec<f64> = (0..20 * 20).map(|_| r.gen_range(0.0..1.0)).collect();
        let m = LocationMap::new(20, 20, v).unwrap();
        let no_floor = DecoderConfig { floor: 0.0, ..DecoderConfig::default() };
        prop_assert_eq!(
            sorted(decode_peaks(&m, &no_floor)),
            sorted(decode_peaks(&m.scaled(alpha), &no_floor))
        );
        // With the floor, scaling can only remove detections.
        let full = sorted(decode_peaks(&m, &DecoderConfig::default()));
        let scaled = sorted(decode_peaks(&m.scaled(alpha), &DecoderConfig::default()));
        prop_assert!(scaled.iter().all(|p| full.contains(p)));
    }
}
