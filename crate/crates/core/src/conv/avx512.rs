//! Direct stride-1 convolution kernels for AVX-512.
//!
//! Inputs are pre-padded `[C, Dp, Hp, Wp]` volumes. Weights are packed as
//! `[out_block][in][k^3][8]` so one block of eight output channels reads a
//! contiguous run per tap.

use std::arch::x86_64::*;
use std::sync::OnceLock;

const CB: usize = 8;
const LANES: usize = 16;

pub fn available() -> bool {
    static AVAILABLE: OnceLock<bool> = OnceLock::new();
    *AVAILABLE.get_or_init(|| {
        std::env::var_os("DOSEGAN_NO_SIMD").is_none() && is_x86_feature_detected!("avx512f")
    })
}

/// Packs `w[out][in][k^3]` into 8-wide output blocks. With `transpose_flip`,
/// roles swap (`in` becomes the output) and taps are mirrored, which yields
/// the weights of the input-gradient correlation.
pub fn pack_weights(w: &[f32], co: usize, ci: usize, k: usize, transpose_flip: bool) -> Vec<f32> {
    let k3 = k * k * k;
    let (nout, nin) = if transpose_flip { (ci, co) } else { (co, ci) };
    let blocks = nout.div_ceil(CB);
    let mut packed = vec![0.0f32; blocks * nin * k3 * CB];
    for b in 0..blocks {
        for i in 0..nin {
            for t in 0..k3 {
                for j in 0..CB {
                    let o = b * CB + j;
                    if o >= nout {
                        continue;
                    }
                    let v = if transpose_flip {
                        w[(i * ci + o) * k3 + (k3 - 1 - t)]
                    } else {
                        w[(o * ci + i) * k3 + t]
                    };
                    packed[((b * nin + i) * k3 + t) * CB + j] = v;
                }
            }
        }
    }
    packed
}

#[inline]
fn lane_mask(remaining: isize) -> __mmask16 {
    if remaining >= LANES as isize {
        0xFFFF
    } else if remaining <= 0 {
        0
    } else {
        ((1u32 << remaining) - 1) as __mmask16
    }
}

#[allow(clippy::too_many_arguments)]
pub fn forward_s1(
    xp: &[f32],
    cin: usize,
    pdims: [usize; 3],
    packed: &[f32],
    cout: usize,
    k: usize,
    bias: &[f32],
    out: &mut [f32],
    odims: [usize; 3],
) {
    let [dp, hp, wp] = pdims;
    let [od, oh, ow] = odims;
    assert_eq!(dp - k + 1, od);
    assert_eq!(hp - k + 1, oh);
    assert_eq!(wp - k + 1, ow);
    assert_eq!(xp.len(), cin * dp * hp * wp);
    assert_eq!(out.len(), cout * od * oh * ow);
    assert_eq!(packed.len(), cout.div_ceil(CB) * cin * k * k * k * CB);
    assert!(bias.len() >= cout);
    assert!(available());
    // SAFETY: extents asserted above; the feature was detected at runtime.
    unsafe {
        if ow > LANES {
            forward_kernel::<2>(xp, cin, pdims, packed, cout, k, bias, out, odims);
        } else {
            forward_kernel::<1>(xp, cin, pdims, packed, cout, k, bias, out, odims);
        }
    }
}

#[target_feature(enable = "avx512f")]
#[allow(clippy::too_many_arguments)]
unsafe fn forward_kernel<const NV: usize>(
    xp: &[f32],
    cin: usize,
    [dp, hp, wp]: [usize; 3],
    packed: &[f32],
    cout: usize,
    k: usize,
    bias: &[f32],
    out: &mut [f32],
    [od, oh, ow]: [usize; 3],
) {
    let k3 = k * k * k;
    let chunk = LANES * NV;
    let xptr = xp.as_ptr();
    for b in 0..cout.div_ceil(CB) {
        let valid = (cout - b * CB).min(CB);
        let wblk = packed.as_ptr().add(b * cin * k3 * CB);
        for z in 0..od {
            for y in 0..oh {
                let mut x0 = 0;
                while x0 < ow {
                    let mut masks = [0 as __mmask16; 2];
                    for (v, m) in masks.iter_mut().enumerate().take(NV) {
                        *m = lane_mask(ow as isize - (x0 + v * LANES) as isize);
                    }
                    let mut acc = [_mm512_setzero_ps(); 16];
                    for j in 0..CB {
                        let bv = _mm512_set1_ps(if j < valid { bias[b * CB + j] } else { 0.0 });
                        for v in 0..NV {
                            acc[j * NV + v] = bv;
                        }
                    }
                    for c in 0..cin {
                        for kz in 0..k {
                            for ky in 0..k {
                                let row = xptr.add(((c * dp + z + kz) * hp + y + ky) * wp + x0);
                                let wk = wblk.add(((c * k + kz) * k + ky) * k * CB);
                                for kx in 0..k {
                                    let mut inp = [_mm512_setzero_ps(); 2];
                                    for v in 0..NV {
                                        inp[v] = _mm512_maskz_loadu_ps(
                                            masks[v],
                                            row.add(kx + v * LANES),
                                        );
                                    }
                                    let wt = wk.add(kx * CB);
                                    for j in 0..CB {
                                        let wv = _mm512_set1_ps(*wt.add(j));
                                        for v in 0..NV {
                                            acc[j * NV + v] =
                                                _mm512_fmadd_ps(wv, inp[v], acc[j * NV + v]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    for j in 0..valid {
                        let o = out
                            .as_mut_ptr()
                            .add((((b * CB + j) * od + z) * oh + y) * ow + x0);
                        for v in 0..NV {
                            _mm512_mask_storeu_ps(o.add(v * LANES), masks[v], acc[j * NV + v]);
                        }
                    }
                    x0 += chunk;
                }
            }
        }
    }
    let _ = wp;
}

/// Accumulates `gw[co][ci][k^3] += sum_v gout[co][v] * xp[ci][v + tap]`.
#[allow(clippy::too_many_arguments)]
pub fn weight_grad_s1(
    xp: &[f32],
    cin: usize,
    pdims: [usize; 3],
    gout: &[f32],
    cout: usize,
    odims: [usize; 3],
    k: usize,
    gw: &mut [f32],
) {
    let [dp, hp, wp] = pdims;
    let [od, oh, ow] = odims;
    assert!(k <= 3);
    assert_eq!(dp - k + 1, od);
    assert_eq!(hp - k + 1, oh);
    assert_eq!(wp - k + 1, ow);
    assert_eq!(xp.len(), cin * dp * hp * wp);
    assert_eq!(gout.len(), cout * od * oh * ow);
    assert_eq!(gw.len(), cout * cin * k * k * k);
    assert!(available());
    // SAFETY: extents asserted above; the feature was detected at runtime.
    unsafe { weight_grad_kernel(xp, cin, pdims, gout, cout, odims, k, gw) }
}

#[target_feature(enable = "avx512f")]
#[allow(clippy::too_many_arguments)]
unsafe fn weight_grad_kernel(
    xp: &[f32],
    cin: usize,
    [dp, hp, wp]: [usize; 3],
    gout: &[f32],
    cout: usize,
    [od, oh, ow]: [usize; 3],
    k: usize,
    gw: &mut [f32],
) {
    let k3 = k * k * k;
    let zero_row = vec![0.0f32; ow + LANES];
    for b in 0..cout.div_ceil(CB) {
        let valid = (cout - b * CB).min(CB);
        for c in 0..cin {
            for kz in 0..k {
                for ky in 0..k {
                    let mut acc = [_mm512_setzero_ps(); CB * 3];
                    for z in 0..od {
                        for y in 0..oh {
                            let row = xp.as_ptr().add(((c * dp + z + kz) * hp + y + ky) * wp);
                            let mut grow = [zero_row.as_ptr(); CB];
                            for (j, g) in grow.iter_mut().enumerate().take(valid) {
                                *g = gout.as_ptr().add((((b * CB + j) * od + z) * oh + y) * ow);
                            }
                            let mut x0 = 0;
                            while x0 < ow {
                                let m = lane_mask(ow as isize - x0 as isize);
                                let mut inp = [_mm512_setzero_ps(); 3];
                                for (kx, iv) in inp.iter_mut().enumerate().take(k) {
                                    *iv = _mm512_maskz_loadu_ps(m, row.add(x0 + kx));
                                }
                                for j in 0..CB {
                                    let gv = _mm512_maskz_loadu_ps(m, grow[j].add(x0));
                                    for kx in 0..3 {
                                        if kx < k {
                                            acc[j * 3 + kx] =
                                                _mm512_fmadd_ps(gv, inp[kx], acc[j * 3 + kx]);
                                        }
                                    }
                                }
                                x0 += LANES;
                            }
                        }
                    }
                    for j in 0..valid {
                        for kx in 0..k {
                            let idx = ((b * CB + j) * cin + c) * k3 + (kz * k + ky) * k + kx;
                            gw[idx] += _mm512_reduce_add_ps(acc[j * 3 + kx]);
                        }
                    }
                }
            }
        }
    }
}
