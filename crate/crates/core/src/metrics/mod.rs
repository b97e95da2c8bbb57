//! Image-quality and overlap metrics, reports and the Unet-score harness.

mod harness;
mod report;

use crate::error::{Error, Result};
use crate::volume::Volume;

pub use harness::UnetScore;
pub use report::{CaseMetrics, RegionMetrics, Report, ReportRow};

pub const PSNR_CAP: f64 = 200.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check(a: &Volume, b: &Volume, op: &'static str) -> Result<()> {
    if a.dims != b.dims || a.channels != b.channels {
        return Err(Error::shape(op, format!("{:?}x{} vs {:?}x{}", a.dims, a.channels, b.dims, b.channels)));
    }
    Ok(())
}

fn range_of<'a>(v: impl Iterator<Item = &'a f32>) -> f64 {
    let (lo, hi) = v.fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    (hi - lo) as f64
}

/// Per-case ground-truth range, `max(y) - min(y)`.
pub fn data_range(y: &Volume) -> f64 {
    range_of(y.data.iter())
}

fn pairs<'a>(a: &'a Volume, b: &'a Volume, mask: Option<&'a [u8]>) -> impl Iterator<Item = (f64, f64)> + 'a {
    a.data
        .iter()
        .zip(&b.data)
        .enumerate()
        .filter(move |(i, _)| mask.map_or(true, |m| m[*i] != 0))
        .map(|(_, (&p, &q))| (p as f64, q as f64))
}

fn moments(a: &Volume, b: &Volume, mask: Option<&[u8]>) -> Result<(usize, f64, f64, f64)> {
    let (mut n, mut abs, mut sum, mut sq) = (0usize, 0.0, 0.0, 0.0);
    for (p, q) in pairs(a, b, mask) {
        let d = p - q;
        n += 1;
        abs += d.abs();
        sum += d;
        sq += d * d;
    }
    if n == 0 {
        return Err(Error::Data("metric over an empty region".into()));
    }
    let n_f = n as f64;
    Ok((n, abs / n_f, sum / n_f, sq / n_f))
}

fn psnr_from(mse: f64, range: f64) -> f64 {
    if mse < 1e-20 {
        PSNR_CAP
    } else {
        (10.0 * (range * range / mse).log10()).min(PSNR_CAP)
    }
}

/// `10 log10(range^2 / MSE)`, capped at 200 dB.
pub fn psnr(yhat: &Volume, y: &Volume, range: Option<f64>) -> Result<f64> {
    check(yhat, y, "psnr")?;
    let r = range.unwrap_or_else(|| data_range(y));
    if !(r > 0.0) {
        return Err(Error::Numeric("psnr needs a positive data range".into()));
    }
    let (_, _, _, mse) = moments(yhat, y, None)?;
    Ok(psnr_from(mse, r))
}

pub fn mse(yhat: &Volume, y: &Volume) -> Result<f64> {
    check(yhat, y, "mse")?;
    Ok(moments(yhat, y, None)?.3)
}

pub fn mae(yhat: &Volume, y: &Volume) -> Result<f64> {
    check(yhat, y, "mae")?;
    Ok(moments(yhat, y, None)?.1)
}

/// Root-mean-square error over the ground-truth range.
pub fn nrmse(yhat: &Volume, y: &Volume) -> Result<f64> {
    check(yhat, y, "nrmse")?;
    let r = data_range(y);
    if !(r > 0.0) {
        return Err(Error::Numeric("nrmse of a constant reference".into()));
    }
    Ok(moments(yhat, y, None)?.3.sqrt() / r)
}

/// Mean of `yhat - y`.
pub fn bias(yhat: &Volume, y: &Volume) -> Result<f64> {
    check(yhat, y, "bias")?;
    Ok(moments(yhat, y, None)?.2)
}

/// Population variance of `yhat - y`.
pub fn variance(yhat: &Volume, y: &Volume) -> Result<f64> {
    check(yhat, y, "variance")?;
    let (_, _, m, sq) = moments(yhat, y, None)?;
    Ok((sq - m * m).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Psnr,
    Ssim,
    Mae,
    Nrmse,
    Bias,
    Variance,
}

/// Metric restricted to voxels where `mask` is set; the data range is that of
/// `y` over the mask.
pub fn masked_metric(metric: Metric, yhat: &Volume, y: &Volume, mask: &[u8]) -> Result<f64> {
    check(yhat, y, "masked metric")?;
    if mask.len() != y.data.len() {
        return Err(Error::shape("masked metric", "mask and volume sizes differ"));
    }
    if mask.iter().all(|&b| b == 0) {
        return Err(Error::Data("empty mask".into()));
    }
    let range = range_of(y.data.iter().zip(mask).filter(|(_, &m)| m != 0).map(|(v, _)| v));
    if metric == Metric::Ssim {
        return ssim3d_masked(yhat, y, range, mask);
    }
    let (_, mae, mean, mse) = moments(yhat, y, Some(mask))?;
    match metric {
        Metric::Psnr => {
            if !(range > 0.0) {
                return Err(Error::Numeric("masked psnr over a constant region".into()));
            }
            Ok(psnr_from(mse, range))
        }
        Metric::Mae => Ok(mae),
        Metric::Nrmse => {
            if !(range > 0.0) {
                return Err(Error::Numeric("masked nrmse over a constant region".into()));
            }
            Ok(mse.sqrt() / range)
        }
        Metric::Bias => Ok(mean),
        Metric::Variance => Ok((mse - mean * mean).max(0.0)),
        Metric::Ssim => unreachable!(),
    }
}

/// Normalized 1D Gaussian taps.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut t = [0.0; SSIM_WINDOW];
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.map(|v| v / s)
}

/// Separable filtering of a `[Z, Y, X]` field with edge-replicating padding.
fn filter_replicate(src: &[f64], dims: [usize; 3], taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut cur = src.to_vec();
    for axis in 0..3 {
        let mut out = vec![0.0; cur.len()];
        let stride = match axis {
            0 => dims[1] * dims[2],
            1 => dims[2],
            _ => 1,
        };
        let len = dims[axis] as isize;
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let at = [z, y, x][axis] as isize;
                    let i = (z * dims[1] + y) * dims[2] + x;
                    let base = i as isize - at * stride as isize;
                    out[i] = taps
                        .iter()
                        .enumerate()
                        .map(|(k, &t)| {
                            let j = (at + k as isize - r).clamp(0, len - 1);
                            t * cur[(base + j * stride as isize) as usize]
                        })
                        .sum();
                }
            }
        }
        cur = out;
    }
    cur
}

/// Local SSIM at every voxel, windows padded by edge replication.
pub fn ssim_map(a: &Volume, b: &Volume, range: f64) -> Result<Vec<f64>> {
    check(a, b, "ssim")?;
    if a.channels != 1 {
        return Err(Error::shape("ssim", "expects single-channel volumes"));
    }
    let taps = gaussian_taps();
    let d = a.dims;
    let x: Vec<f64> = a.data.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.data.iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_replicate(&x, d, &taps);
    let my = filter_replicate(&y, d, &taps);
    let mxx = filter_replicate(&prod(&x, &x), d, &taps);
    let myy = filter_replicate(&prod(&y, &y), d, &taps);
    let mxy = filter_replicate(&prod(&x, &y), d, &taps);
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    Ok((0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let sxx = mxx[i] - ux * ux;
            let syy = myy[i] - uy * uy;
            let sxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * sxy + c2)) / ((ux * ux + uy * uy + c1) * (sxx + syy + c2))
        })
        .collect())
}

/// Mean local SSIM, 7^3 Gaussian window with sigma 1.5.
pub fn ssim3d(yhat: &Volume, y: &Volume, range: Option<f64>) -> Result<f64> {
    let r = range.unwrap_or_else(|| data_range(y));
    let map = ssim_map(yhat, y, r)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// Mean local SSIM over the voxels of `mask`.
pub fn ssim3d_masked(yhat: &Volume, y: &Volume, range: f64, mask: &[u8]) -> Result<f64> {
    let map = ssim_map(yhat, y, range)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (v, &m) in map.iter().zip(mask) {
        if m != 0 {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data("empty mask".into()));
    }
    Ok(sum / n as f64)
}

/// `2|a & b| / (|a| + |b|)`, 1 when both are empty.
pub fn dice(a: &[u8], b: &[u8]) -> f64 {
    let (mut inter, mut sa, mut sb) = (0usize, 0usize, 0usize);
    for (&p, &q) in a.iter().zip(b) {
        inter += usize::from(p != 0 && q != 0);
        sa += usize::from(p != 0);
        sb += usize::from(q != 0);
    }
    if sa + sb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (sa + sb) as f64
    }
}
