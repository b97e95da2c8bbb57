use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Direct six-nested-loop convolution (per sample, per channel pair).
fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], spec: ConvSpec) -> Tensor<f64> {
    let [n, ci, d, h, wd] = x.dims5("t").unwrap();
    let co = w.shape()[0];
    let k = spec.kernel;
    let o = [d, h, wd].map(|e| spec.out_extent(e).unwrap());
    let mut out = Tensor::zeros(&[n, co, o[0], o[1], o[2]]);
    for s in 0..n {
        for oc in 0..co {
            for oz in 0..o[0] {
                for oy in 0..o[1] {
                    for ox in 0..o[2] {
                        let mut acc = b[oc];
                        for ic in 0..ci {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (oz * spec.stride + kz) as isize - spec.pad_lo as isize;
                                        let iy = (oy * spec.stride + ky) as isize - spec.pad_lo as isize;
                                        let ix = (ox * spec.stride + kx) as isize - spec.pad_lo as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let xv = x.data()[(((s * ci + ic) * d + iz as usize) * h + iy as usize) * wd + ix as usize];
                                        let wv = w.data()[(((oc * ci + ic) * k + kz) * k + ky) * k + kx];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out.data_mut()[(((s * co + oc) * o[0] + oz) * o[1] + oy) * o[2] + ox] = acc;
                    }
                }
            }
        }
    }
    out
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Gradient oracle: <gout, conv(x)> is linear in x and in w, so each gradient
/// entry is the change of that inner product under a unit perturbation.
fn naive_grads(x: &Tensor<f64>, w: &Tensor<f64>, gout: &Tensor<f64>, spec: ConvSpec) -> (Vec<f64>, Vec<f64>) {
    let co = w.shape()[0];
    let zb = vec![0.0; co];
    let dot = |xx: &Tensor<f64>, ww: &Tensor<f64>| -> f64 {
        naive(xx, ww, &zb, spec).data().iter().zip(gout.data()).map(|(a, b)| a * b).sum()
    };
    let base = dot(x, w);
    let gx = (0..x.numel())
        .map(|i| {
            let mut xx = x.clone();
            xx.data_mut()[i] += 1.0;
            dot(&xx, w) - base
        })
        .collect();
    let gw = (0..w.numel())
        .map(|i| {
            let mut ww = w.clone();
            ww.data_mut()[i] += 1.0;
            dot(x, &ww) - base
        })
        .collect();
    (gx, gw)
}

#[test]
fn ones_under_full_overlap_sum_to_27() {
    let x = Tensor::<f32>::full(&[1, 1, 3, 3, 3], 1.0);
    let w = Tensor::<f32>::full(&[1, 1, 3, 3, 3], 1.0);
    let b = Tensor::<f32>::zeros(&[1]);
    let y = conv3d_forward(&x, &w, Some(&b), ConvSpec::new(3, 1, 1)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 3, 3]);
    assert_eq!(y.data()[13], 27.0);
    // corner sees a 2x2x2 overlap
    assert_eq!(y.data()[0], 8.0);
}

#[test]
fn identity_kernel_reproduces_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for size in [4usize, 16, 20] {
        let x: Tensor<f32> = rand_tensor(&mut rng, &[2, 1, size, size, size]).cast();
        let mut w = Tensor::<f32>::zeros(&[1, 1, 3, 3, 3]);
        w.data_mut()[13] = 1.0;
        let y = conv3d_forward(&x, &w, None, ConvSpec::new(3, 1, 1)).unwrap();
        assert_eq!(y.data(), x.data());
    }
}

#[test]
fn random_conv_matches_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[1, 2, 4, 4, 4]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let spec = ConvSpec::new(3, 1, 1);
    let got = conv3d_forward(&x, &w, Some(&b), spec).unwrap();
    let want = naive(&x, &w, b.data(), spec);
    assert_eq!(got.shape(), want.shape());
    assert!(max_rel(got.data(), want.data()) < 1e-6);
}

#[test]
fn strides_and_paddings_match_nested_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cases = [
        (ConvSpec::new(3, 1, 0), 5usize),
        (ConvSpec::new(3, 1, 1), 5),
        (ConvSpec::new(3, 2, 0), 7),
        (ConvSpec::new(3, 2, 1), 6),
        (ConvSpec::new(4, 2, 1), 8),
        (ConvSpec::asymmetric(2, 1, 1, 0), 5),
        (ConvSpec::new(1, 1, 0), 3),
    ];
    for (spec, size) in cases {
        let x = rand_tensor(&mut rng, &[2, 3, size, size + 1, size]);
        let w = rand_tensor(&mut rng, &[2, 3, spec.kernel, spec.kernel, spec.kernel]);
        let b = rand_tensor(&mut rng, &[2]);
        let got = conv3d_forward(&x, &w, Some(&b), spec).unwrap();
        let want = naive(&x, &w, b.data(), spec);
        assert_eq!(got.shape(), want.shape(), "{spec:?}");
        assert!(max_rel(got.data(), want.data()) < 1e-6, "{spec:?}");
    }
}

#[test]
fn backward_matches_linear_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for spec in [ConvSpec::new(3, 1, 1), ConvSpec::new(3, 2, 1), ConvSpec::asymmetric(2, 1, 1, 0), ConvSpec::new(4, 2, 1)] {
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4, 4]);
        let w = rand_tensor(&mut rng, &[3, 2, spec.kernel, spec.kernel, spec.kernel]);
        let y = conv3d_forward(&x, &w, None, spec).unwrap();
        let gout = rand_tensor(&mut rng, y.shape());
        let grads = conv3d_backward(&x, &w, gout.data(), spec, true, true).unwrap();
        let (gx, gw) = naive_grads(&x, &w, &gout, spec);
        assert!(max_rel(grads.input.as_ref().unwrap(), &gx) < 1e-9, "{spec:?}");
        assert!(max_rel(grads.weight.as_ref().unwrap(), &gw) < 1e-9, "{spec:?}");
        let gb: Vec<f64> = (0..3)
            .map(|c| gout.data()[c * y.numel() / 3..(c + 1) * y.numel() / 3].iter().sum())
            .collect();
        assert!(max_rel(&grads.bias, &gb) < 1e-12);
    }
}

#[test]
fn channel_mismatch_is_a_shape_error() {
    let x = Tensor::<f32>::zeros(&[1, 2, 4, 4, 4]);
    let w = Tensor::<f32>::zeros(&[1, 3, 3, 3, 3]);
    assert!(matches!(
        conv3d_forward(&x, &w, None, ConvSpec::new(3, 1, 1)),
        Err(Error::Shape { .. })
    ));
    let tiny = Tensor::<f32>::zeros(&[1, 3, 1, 1, 1]);
    assert!(conv3d_forward(&tiny, &w, None, ConvSpec::new(3, 1, 0)).is_err());
}

/// The SIMD kernels against the portable route, in f32, at sizes that hit
/// full 32-wide chunks, 16-wide chunks and masked tails.
#[test]
fn simd_route_agrees_with_portable_route() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cases = [
        (ConvSpec::new(3, 1, 1), [3usize, 5, 8, 8, 32]),
        (ConvSpec::new(3, 1, 1), [9, 11, 4, 5, 16]),
        (ConvSpec::new(3, 1, 1), [2, 3, 3, 4, 21]),
        (ConvSpec::asymmetric(2, 1, 1, 0), [4, 16, 4, 4, 16]),
        (ConvSpec::new(1, 1, 0), [6, 4, 3, 3, 17]),
    ];
    for (spec, [ci, co, d, h, w]) in cases {
        let x: Tensor<f32> = rand_tensor(&mut rng, &[2, ci, d, h, w]).cast();
        let wt: Tensor<f32> = rand_tensor(&mut rng, &[co, ci, spec.kernel, spec.kernel, spec.kernel]).cast();
        let b: Tensor<f32> = rand_tensor(&mut rng, &[co]).cast();
        let fast = conv3d_forward(&x, &wt, Some(&b), spec).unwrap();
        let slow = conv3d_forward_portable(&x, &wt, Some(&b), spec).unwrap();
        let tol = 1e-5 * (ci * spec.kernel.pow(3)) as f32;
        for (a, e) in fast.data().iter().zip(slow.data()) {
            assert!((a - e).abs() <= tol, "{spec:?}: {a} vs {e}");
        }
        let gout: Tensor<f32> = rand_tensor(&mut rng, fast.shape()).cast();
        let gf = conv3d_backward(&x, &wt, gout.data(), spec, true, true).unwrap();
        let gs = conv3d_backward_portable(&x, &wt, gout.data(), spec).unwrap();
        let close = |a: &[f32], b: &[f32], scale: f32| {
            a.iter().zip(b).all(|(u, v)| (u - v).abs() <= 1e-5 * scale * v.abs().max(1.0))
        };
        assert!(close(gf.input.as_ref().unwrap(), gs.input.as_ref().unwrap(), (co * 27) as f32), "{spec:?} input");
        assert!(close(gf.weight.as_ref().unwrap(), gs.weight.as_ref().unwrap(), x.numel() as f32), "{spec:?} weight");
    }
}
