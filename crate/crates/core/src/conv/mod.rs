//! 3D convolution kernels.
//!
//! Two routes compute the same thing. The portable route lowers each sample
//! to im2col tiles (bounded to about a million elements) followed by GEMM,
//! and serves any element type, stride and padding. On x86-64 with AVX-512,
//! stride-1 `f32` convolutions go through the direct kernels in [`avx512`],
//! which keep an 8-channel by 16/32-voxel output block in registers.

#[cfg(target_arch = "x86_64")]
mod avx512;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Cubic kernel geometry. Padding may differ before and after each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad_lo: usize,
    pub pad_hi: usize,
}

impl ConvSpec {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            pad_lo: padding,
            pad_hi: padding,
        }
    }

    pub const fn asymmetric(kernel: usize, stride: usize, pad_lo: usize, pad_hi: usize) -> Self {
        Self {
            kernel,
            stride,
            pad_lo,
            pad_hi,
        }
    }

    pub fn out_extent(&self, n: usize) -> Option<usize> {
        let padded = n + self.pad_lo + self.pad_hi;
        if self.kernel == 0 || self.stride == 0 || padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    ci: usize,
    co: usize,
    inp: [usize; 3],
    out: [usize; 3],
    spec: ConvSpec,
}

impl Geometry {
    fn new<T: Element>(x: &Tensor<T>, w: &Tensor<T>, spec: ConvSpec) -> Result<Self> {
        let [n, ci, d, h, wd] = x.dims5("conv3d")?;
        let k = spec.kernel;
        let (co, wci) = match *w.shape() {
            [co, wci, a, b, c] if a == k && b == k && c == k => (co, wci),
            _ => {
                return Err(Error::shape(
                    "conv3d",
                    format!("weight {:?} is not [Co, C, {k}, {k}, {k}]", w.shape()),
                ))
            }
        };
        if wci != ci {
            return Err(Error::shape(
                "conv3d",
                format!("input has {ci} channels, weight expects {wci}"),
            ));
        }
        let mut out = [0; 3];
        for (o, &e) in out.iter_mut().zip(&[d, h, wd]) {
            *o = spec.out_extent(e).ok_or_else(|| {
                Error::shape(
                    "conv3d",
                    format!("extent {e} with padding {spec:?} is smaller than the kernel"),
                )
            })?;
        }
        Ok(Self {
            n,
            ci,
            co,
            inp: [d, h, wd],
            out,
            spec,
        })
    }

    fn in_vox(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_vox(&self) -> usize {
        self.out.iter().product()
    }

    fn k3(&self) -> usize {
        self.spec.kernel.pow(3)
    }

    fn fast_eligible(&self) -> bool {
        self.spec.stride == 1 && self.out[2] >= 8 && self.spec.pad_lo < self.spec.kernel
            && self.spec.pad_hi < self.spec.kernel
    }
}

pub fn conv3d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    forward_impl(x, w, bias, spec, true)
}

fn forward_impl<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
    allow_fast: bool,
) -> Result<Tensor<T>> {
    let g = Geometry::new(x, w, spec)?;
    if let Some(b) = bias {
        if b.shape() != [g.co] {
            return Err(Error::shape(
                "conv3d",
                format!("bias {:?} does not match {} output channels", b.shape(), g.co),
            ));
        }
    }
    let mut out = vec![T::zero(); g.n * g.co * g.out_vox()];

    #[cfg(target_arch = "x86_64")]
    if allow_fast && g.fast_eligible() && avx512::available() {
        if let (Some(xs), Some(ws), Some(os)) =
            (T::as_f32(x.data()), T::as_f32(w.data()), T::as_f32_mut(&mut out))
        {
            let bs = bias.and_then(|b| T::as_f32(b.data()));
            fast_forward(&g, xs, ws, bs, os);
            return Tensor::from_vec(&[g.n, g.co, g.out[0], g.out[1], g.out[2]], out);
        }
    }

    let k3ci = g.ci * g.k3();
    let tiles = ZTiles::new(&g);
    let mut cols = vec![T::zero(); k3ci * tiles.max_cols];
    for s in 0..g.n {
        let xs = &x.data()[s * g.ci * g.in_vox()..(s + 1) * g.ci * g.in_vox()];
        let os = &mut out[s * g.co * g.out_vox()..(s + 1) * g.co * g.out_vox()];
        for (z0, z1) in tiles.iter() {
            let ncols = (z1 - z0) * g.out[1] * g.out[2];
            let off = z0 * g.out[1] * g.out[2];
            im2col(&g, xs, z0, z1, &mut cols[..k3ci * ncols]);
            T::gemm(
                g.co,
                k3ci,
                ncols,
                w.data(),
                (k3ci as isize, 1),
                &cols,
                (ncols as isize, 1),
                T::zero(),
                &mut os[off..],
                (g.out_vox() as isize, 1),
            );
        }
        if let Some(b) = bias {
            for (c, row) in os.chunks_mut(g.out_vox()).enumerate() {
                let bv = b.data()[c];
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    Tensor::from_vec(&[g.n, g.co, g.out[0], g.out[1], g.out[2]], out)
}

/// Gradients of a convolution given the upstream gradient `gout`.
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Vec<T>,
}

pub fn conv3d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &[T],
    spec: ConvSpec,
    need_input: bool,
    need_weight: bool,
) -> Result<ConvGrads<T>> {
    backward_impl(x, w, gout, spec, need_input, need_weight, true)
}

fn backward_impl<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &[T],
    spec: ConvSpec,
    need_input: bool,
    need_weight: bool,
    allow_fast: bool,
) -> Result<ConvGrads<T>> {
    let g = Geometry::new(x, w, spec)?;
    if gout.len() != g.n * g.co * g.out_vox() {
        return Err(Error::shape("conv3d backward", "upstream gradient length"));
    }
    let mut bias = vec![T::zero(); g.co];
    for s in 0..g.n {
        for c in 0..g.co {
            let row = &gout[(s * g.co + c) * g.out_vox()..(s * g.co + c + 1) * g.out_vox()];
            bias[c] = bias[c] + row.iter().copied().sum::<T>();
        }
    }
    let mut gx = need_input.then(|| vec![T::zero(); x.numel()]);
    let mut gw = need_weight.then(|| vec![T::zero(); w.numel()]);

    #[cfg(target_arch = "x86_64")]
    if allow_fast && g.fast_eligible() && avx512::available() {
        if let (Some(xs), Some(ws), Some(gs)) =
            (T::as_f32(x.data()), T::as_f32(w.data()), T::as_f32(gout))
        {
            if let Some(gx) = gx.as_mut() {
                fast_input_grad(&g, ws, gs, T::as_f32_mut(gx).expect("f32 buffer"));
            }
            if let Some(gw) = gw.as_mut() {
                if g.spec.kernel <= 3 {
                    fast_weight_grad(&g, xs, gs, T::as_f32_mut(gw).expect("f32 buffer"));
                } else {
                    gemm_weight_grad(&g, x.data(), gout, gw);
                }
            }
            return Ok(ConvGrads {
                input: gx,
                weight: gw,
                bias,
            });
        }
    }

    if let Some(gw) = gw.as_mut() {
        gemm_weight_grad(&g, x.data(), gout, gw);
    }
    if let Some(gx) = gx.as_mut() {
        let k3ci = g.ci * g.k3();
        let tiles = ZTiles::new(&g);
        let mut cols = vec![T::zero(); k3ci * tiles.max_cols];
        for s in 0..g.n {
            let gs = &gout[s * g.co * g.out_vox()..(s + 1) * g.co * g.out_vox()];
            let xs = &mut gx[s * g.ci * g.in_vox()..(s + 1) * g.ci * g.in_vox()];
            for (z0, z1) in tiles.iter() {
                let ncols = (z1 - z0) * g.out[1] * g.out[2];
                let off = z0 * g.out[1] * g.out[2];
                // cols = W^T (K x Co) * gout (Co x ncols)
                T::gemm(
                    k3ci,
                    g.co,
                    ncols,
                    w.data(),
                    (1, k3ci as isize),
                    &gs[off..],
                    (g.out_vox() as isize, 1),
                    T::zero(),
                    &mut cols[..k3ci * ncols],
                    (ncols as isize, 1),
                );
                col2im(&g, &cols[..k3ci * ncols], z0, z1, xs);
            }
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias,
    })
}

fn gemm_weight_grad<T: Element>(g: &Geometry, x: &[T], gout: &[T], gw: &mut [T]) {
    let k3ci = g.ci * g.k3();
    let tiles = ZTiles::new(g);
    let mut cols = vec![T::zero(); k3ci * tiles.max_cols];
    for s in 0..g.n {
        let xs = &x[s * g.ci * g.in_vox()..(s + 1) * g.ci * g.in_vox()];
        let gs = &gout[s * g.co * g.out_vox()..(s + 1) * g.co * g.out_vox()];
        for (z0, z1) in tiles.iter() {
            let ncols = (z1 - z0) * g.out[1] * g.out[2];
            let off = z0 * g.out[1] * g.out[2];
            im2col(g, xs, z0, z1, &mut cols[..k3ci * ncols]);
            // gw (Co x K) += gout (Co x ncols) * cols^T (ncols x K)
            T::gemm(
                g.co,
                ncols,
                k3ci,
                &gs[off..],
                (g.out_vox() as isize, 1),
                &cols,
                (1, ncols as isize),
                T::one(),
                gw,
                (k3ci as isize, 1),
            );
        }
    }
}

/// Output z-planes grouped so one im2col tile stays near a million elements.
struct ZTiles {
    depth: usize,
    per_tile: usize,
    max_cols: usize,
}

impl ZTiles {
    fn new(g: &Geometry) -> Self {
        const TARGET: usize = 1 << 20;
        let plane = g.out[1] * g.out[2];
        let per_tile = (TARGET / (g.ci * g.k3() * plane).max(1)).clamp(1, g.out[0]);
        Self {
            depth: g.out[0],
            per_tile,
            max_cols: per_tile * plane,
        }
    }

    fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.depth)
            .step_by(self.per_tile)
            .map(move |z0| (z0, (z0 + self.per_tile).min(self.depth)))
    }
}

/// Source index along one axis, or `None` when the tap lands in padding.
#[inline]
fn src(o: usize, kk: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let p = o * stride + kk;
    (p >= pad && p - pad < extent).then(|| p - pad)
}

fn im2col<T: Element>(g: &Geometry, x: &[T], z0: usize, z1: usize, cols: &mut [T]) {
    let k = g.spec.kernel;
    let [d, h, w] = g.inp;
    let [_, ho, wo] = g.out;
    let ncols = (z1 - z0) * ho * wo;
    let (s, p) = (g.spec.stride, g.spec.pad_lo);
    let mut row = 0;
    for c in 0..g.ci {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    let mut i = 0;
                    for oz in z0..z1 {
                        let iz = src(oz, kz, s, p, d);
                        for oy in 0..ho {
                            let iy = src(oy, ky, s, p, h);
                            for ox in 0..wo {
                                dst[i] = match (iz, iy, src(ox, kx, s, p, w)) {
                                    (Some(iz), Some(iy), Some(ix)) => xc[(iz * h + iy) * w + ix],
                                    _ => T::zero(),
                                };
                                i += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &Geometry, cols: &[T], z0: usize, z1: usize, x: &mut [T]) {
    let k = g.spec.kernel;
    let [d, h, w] = g.inp;
    let [_, ho, wo] = g.out;
    let ncols = (z1 - z0) * ho * wo;
    let (s, p) = (g.spec.stride, g.spec.pad_lo);
    let mut row = 0;
    for c in 0..g.ci {
        let xc = &mut x[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let srcrow = &cols[row * ncols..(row + 1) * ncols];
                    let mut i = 0;
                    for oz in z0..z1 {
                        let iz = src(oz, kz, s, p, d);
                        for oy in 0..ho {
                            let iy = src(oy, ky, s, p, h);
                            for ox in 0..wo {
                                if let (Some(iz), Some(iy), Some(ix)) =
                                    (iz, iy, src(ox, kx, s, p, w))
                                {
                                    let t = &mut xc[(iz * h + iy) * w + ix];
                                    *t = *t + srcrow[i];
                                }
                                i += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Copies `[C, D, H, W]` into a zero buffer with the given low/high padding.
fn pad_volume(src: &[f32], c: usize, ext: [usize; 3], lo: usize, hi: usize) -> (Vec<f32>, [usize; 3]) {
    let [d, h, w] = ext;
    let p = [d + lo + hi, h + lo + hi, w + lo + hi];
    let mut out = vec![0.0f32; c * p[0] * p[1] * p[2]];
    for ch in 0..c {
        for z in 0..d {
            for y in 0..h {
                let s = ((ch * d + z) * h + y) * w;
                let t = ((ch * p[0] + z + lo) * p[1] + y + lo) * p[2] + lo;
                out[t..t + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }
    (out, p)
}

#[cfg(target_arch = "x86_64")]
fn fast_forward(g: &Geometry, x: &[f32], w: &[f32], bias: Option<&[f32]>, out: &mut [f32]) {
    let k = g.spec.kernel;
    let packed = avx512::pack_weights(w, g.co, g.ci, k, false);
    let zeros = vec![0.0; g.co];
    let bias = bias.unwrap_or(&zeros);
    for s in 0..g.n {
        let xs = &x[s * g.ci * g.in_vox()..(s + 1) * g.ci * g.in_vox()];
        let (xp, pdims) = pad_volume(xs, g.ci, g.inp, g.spec.pad_lo, g.spec.pad_hi);
        let os = &mut out[s * g.co * g.out_vox()..(s + 1) * g.co * g.out_vox()];
        avx512::forward_s1(&xp, g.ci, pdims, &packed, g.co, k, bias, os, g.out);
    }
}

#[cfg(target_arch = "x86_64")]
fn fast_input_grad(g: &Geometry, w: &[f32], gout: &[f32], gx: &mut [f32]) {
    // Stride-1 transpose convolution is a correlation of the re-padded
    // upstream gradient with flipped, channel-transposed weights.
    let k = g.spec.kernel;
    let packed = avx512::pack_weights(w, g.co, g.ci, k, true);
    let zeros = vec![0.0; g.ci];
    let (lo, hi) = (k - 1 - g.spec.pad_lo, k - 1 - g.spec.pad_hi);
    for s in 0..g.n {
        let gs = &gout[s * g.co * g.out_vox()..(s + 1) * g.co * g.out_vox()];
        let (gp, pdims) = pad_volume(gs, g.co, g.out, lo, hi);
        let xs = &mut gx[s * g.ci * g.in_vox()..(s + 1) * g.ci * g.in_vox()];
        avx512::forward_s1(&gp, g.co, pdims, &packed, g.ci, k, &zeros, xs, g.inp);
    }
}

#[cfg(target_arch = "x86_64")]
fn fast_weight_grad(g: &Geometry, x: &[f32], gout: &[f32], gw: &mut [f32]) {
    let k = g.spec.kernel;
    for s in 0..g.n {
        let xs = &x[s * g.ci * g.in_vox()..(s + 1) * g.ci * g.in_vox()];
        let (xp, pdims) = pad_volume(xs, g.ci, g.inp, g.spec.pad_lo, g.spec.pad_hi);
        let gs = &gout[s * g.co * g.out_vox()..(s + 1) * g.co * g.out_vox()];
        avx512::weight_grad_s1(&xp, g.ci, pdims, gs, g.co, g.out, k, gw);
    }
}

/// Portable im2col route only; used to cross-check the SIMD kernels.
#[doc(hidden)]
pub fn conv3d_forward_portable<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    forward_impl(x, w, bias, spec, false)
}

#[doc(hidden)]
pub fn conv3d_backward_portable<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &[T],
    spec: ConvSpec,
) -> Result<ConvGrads<T>> {
    backward_impl(x, w, gout, spec, true, true, false)
}

/// Whether the direct SIMD kernels are active on this machine.
pub fn simd_active() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        avx512::available()
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

#[cfg(test)]
mod tests;
