use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn desk_cfg() -> PhantomConfig {
    PhantomConfig {
        size: 32,
        count: 6,
        ..PhantomConfig::default()
    }
}

fn sphere(c: f64, r: f64, activity: f64, roi: Option<usize>) -> Organ {
    Organ {
        center: [c; 3],
        semi_axes: [r; 3],
        activity,
        roi,
    }
}

fn constant(d: usize, v: f32) -> Volume {
    Volume::cube(d, vec![v; d * d * d]).unwrap()
}

#[test]
fn empty_phantom_is_background() {
    let spec = PhantomSpec {
        size: 8,
        background: 20.0,
        organs: vec![],
        rois: 4,
    };
    let (a, m) = render_phantom(&spec).unwrap();
    assert!(a.data.iter().all(|&v| v == 20.0));
    assert!(m.data.iter().all(|&b| b == 0));
}

#[test]
fn sphere_voxel_count_matches_enumeration() {
    let spec = PhantomSpec {
        size: 21,
        background: 20.0,
        organs: vec![sphere(10.0, 5.0, 100.0, Some(0))],
        rois: 1,
    };
    let (a, m) = render_phantom(&spec).unwrap();
    let mut oracle = 0;
    for z in -5i32..=5 {
        for y in -5i32..=5 {
            for x in -5i32..=5 {
                if z * z + y * y + x * x <= 25 {
                    oracle += 1;
                }
            }
        }
    }
    assert_eq!(m.count(0), oracle);
    assert!((oracle as f64 - 4.0 / 3.0 * std::f64::consts::PI * 125.0).abs() < 30.0);
    assert_eq!(a.data[(10 * 21 + 10) * 21 + 10], 120.0);
}

#[test]
fn overlapping_rois_are_rejected() {
    let spec = PhantomSpec {
        size: 21,
        background: 20.0,
        organs: vec![sphere(10.0, 5.0, 100.0, Some(0)), sphere(12.0, 5.0, 100.0, Some(1))],
        rois: 2,
    };
    assert!(matches!(render_phantom(&spec), Err(Error::Config(_))));
}

#[test]
fn random_specs_keep_roi_voxels_above_background() {
    let cfg = desk_cfg();
    for seed in 0..5 {
        let spec = random_spec(&cfg, 4, &mut rng(seed)).unwrap();
        let (a, m) = render_phantom(&spec).unwrap();
        for r in 0..4 {
            assert!(m.count(r) > 20, "roi {r} has {} voxels", m.count(r));
            for (v, &b) in a.data.iter().zip(m.channel(r)) {
                if b == 1 {
                    assert!(*v > spec.background as f32);
                }
            }
        }
        assert!(spec.organs.iter().all(|o| o.activity + spec.background <= cfg.activity_max + 1e-9));
    }
}

#[test]
fn zero_activity_gives_zero_counts() {
    let y = simulate_full_dose(&constant(8, 0.0), 3, &mut rng(1));
    assert!(y.data.iter().all(|&v| v == 0.0));
}

#[test]
fn full_dose_preserves_mean_and_poisson_variance() {
    let a = constant(22, 100.0);
    let counts = poisson_counts(&a, 1.0, &mut rng(2));
    let n = counts.data.len() as f64;
    let mean = counts.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = counts.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    assert!((mean - 100.0).abs() < 3.0 * (100.0 / n).sqrt());
    assert!((var / 100.0 - 1.0).abs() < 0.1);
    let y = boxcar(&counts, 3);
    let ymean = y.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    assert!((ymean - 100.0).abs() < 0.5);
}

#[test]
fn thinning_scales_variance_by_drf() {
    let a = constant(22, 600.0);
    let full = poisson_counts(&a, 1.0, &mut rng(3));
    let low = thinned_counts(&a, 6, true, &mut rng(4));
    let stats = |v: &Volume| {
        let n = v.data.len() as f64;
        let m = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
        (m, v.data.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n)
    };
    let (mf, vf) = stats(&full);
    let (ml, vl) = stats(&low);
    assert!((vl - 3600.0).abs() / 3600.0 < 0.1);
    assert!((vl / vf - 6.0).abs() < 0.6);
    assert!((ml - mf).abs() / mf < 0.02);
}

#[test]
fn boxcar_preserves_constants() {
    let v = constant(5, 7.5);
    assert!(boxcar(&v, 3).data.iter().all(|&x| (x - 7.5).abs() < 1e-6));
}

#[test]
fn two_low_dose_draws_differ() {
    let a = constant(8, 300.0);
    let x1 = simulate_low_dose(&a, 6, true, 3, &mut rng(5));
    let x2 = simulate_low_dose(&a, 6, true, 3, &mut rng(6));
    assert_ne!(x1.data, x2.data);
}

#[test]
fn resize_cases() {
    let ramp = Volume::new(1, [3, 4, 5], (0..60).map(|i| (i % 5) as f32 * 2.0).collect()).unwrap();
    assert_eq!(resize_volume(&ramp, [3, 4, 5]).unwrap(), ramp);
    let r = resize_volume(&ramp, [6, 7, 9]).unwrap();
    for z in 0..6 {
        for y in 0..7 {
            for x in 0..9 {
                let expect = 8.0 * x as f32 / 8.0;
                assert!((r.data[(z * 7 + y) * 9 + x] - expect).abs() < 1e-5);
            }
        }
    }
    let c = resize_volume(&constant(4, 3.0), [7, 7, 7]).unwrap();
    assert!(c.data.iter().all(|&v| (v - 3.0).abs() < 1e-6));
    assert!(resize_volume(&ramp, [1, 4, 4]).is_err());
}

#[test]
fn resize_is_exact_on_trilinear_functions() {
    let f = |z: f32, y: f32, x: f32| 1.0 + 2.0 * z - y + 0.5 * x + 0.25 * z * y * x;
    let mut data = Vec::new();
    for z in 0..4 {
        for y in 0..4 {
            for x in 0..4 {
                data.push(f(z as f32, y as f32, x as f32));
            }
        }
    }
    let r = resize_volume(&Volume::cube(4, data).unwrap(), [7, 7, 7]).unwrap();
    for z in 0..7 {
        for y in 0..7 {
            for x in 0..7 {
                let (a, b, c) = (z as f32 * 0.5, y as f32 * 0.5, x as f32 * 0.5);
                assert!((r.data[(z * 7 + y) * 7 + x] - f(a, b, c)).abs() < 1e-4);
            }
        }
    }
}

#[test]
fn dataset_is_deterministic_and_split_by_spec() {
    let cfg = PhantomConfig {
        size: 16,
        count: 10,
        ..PhantomConfig::default()
    };
    let a = generate_triplets(&cfg, 4, 7).unwrap();
    let b = generate_triplets(&cfg, 4, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.iter().filter(|t| t.split == Split::Test).count(), 2);
    for t in &a {
        assert_eq!(t.x.dims, t.y.dims);
        let other = a.iter().filter(|u| u.spec_hash == t.spec_hash);
        assert!(other.clone().all(|u| u.split == t.split));
        assert_eq!(other.count(), 2);
    }
    assert_ne!(a[0].x, a[1].x);
    assert_eq!(a[0].y, a[1].y);
}

#[test]
fn dataset_round_trips_through_disk() {
    let cfg = PhantomConfig {
        size: 16,
        count: 4,
        test_fraction: 0.5,
        ..PhantomConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let written = build_dataset(dir.path(), &cfg, 4, 1).unwrap();
    let mut read = load_split(dir.path(), Split::Train).unwrap();
    read.extend(load_split(dir.path(), Split::Test).unwrap());
    assert_eq!(read, written);
    assert!(dir.path().join("test/case_0003/s.pmsk").exists());
}
