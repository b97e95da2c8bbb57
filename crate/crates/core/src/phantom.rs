//! Ellipsoid activity phantoms and count-domain dose simulation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{self, config::PhantomConfig};
use crate::volume::{Mask, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct Organ {
    /// `[z, y, x]` in voxels.
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// Mean counts per voxel added on top of whatever lies beneath.
    pub activity: f64,
    pub roi: Option<usize>,
}

impl Organ {
    fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z as f64, y as f64, x as f64];
        let r: f64 = (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.semi_axes[i]).powi(2))
            .sum();
        r <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub size: usize,
    pub background: f64,
    pub organs: Vec<Organ>,
    pub rois: usize,
}

impl PhantomSpec {
    /// Short hex digest identifying the spec.
    pub fn hash(&self) -> String {
        let mut text = format!("{} {} {}", self.size, self.background, self.rois);
        for o in &self.organs {
            let _ = write!(text, ";{:?} {:?} {} {:?}", o.center, o.semi_axes, o.activity, o.roi);
        }
        let h = format!("{:x}", Sha256::digest(text.as_bytes()));
        h[..16].to_string()
    }
}

/// Noiseless activity and per-ROI masks.
pub fn render_phantom(spec: &PhantomSpec) -> Result<(Volume, Mask)> {
    let d = spec.size;
    if d == 0 {
        return Err(Error::Config("phantom size must be positive".into()));
    }
    for o in &spec.organs {
        if o.semi_axes.iter().any(|&a| !(a > 0.0)) || !(o.activity > 0.0) {
            return Err(Error::Config("organs need positive semi-axes and activity".into()));
        }
        if o.roi.is_some_and(|r| r >= spec.rois) {
            return Err(Error::Config(format!("ROI label {:?} outside {} channels", o.roi, spec.rois)));
        }
        let fits = (0..3).all(|i| o.center[i] - o.semi_axes[i] >= -0.5 && o.center[i] + o.semi_axes[i] <= d as f64 - 0.5);
        if !fits {
            return Err(Error::Config(format!("organ at {:?} does not fit a {d}^3 grid", o.center)));
        }
    }
    let n = d * d * d;
    let mut act = vec![spec.background as f32; n];
    let mut mask = vec![0u8; spec.rois.max(1) * n];
    for z in 0..d {
        for y in 0..d {
            for x in 0..d {
                let i = (z * d + y) * d + x;
                let mut owner: Option<usize> = None;
                for o in spec.organs.iter().filter(|o| o.contains(z, y, x)) {
                    act[i] += o.activity as f32;
                    if let Some(r) = o.roi {
                        if owner.is_some_and(|prev| prev != r) {
                            return Err(Error::Config(format!("ROI organs overlap at voxel ({z}, {y}, {x})")));
                        }
                        owner = Some(r);
                        mask[r * n + i] = 1;
                    }
                }
            }
        }
    }
    Ok((Volume::cube(d, act)?, Mask::new(spec.rois.max(1), [d, d, d], mask)?))
}

/// Draws a four-organ phantom. ROI slots: 0 large uniform, 1 with an
/// unlabelled internal structure, 2 mid-size, 3 small and bright.
pub fn random_spec<R: Rng>(cfg: &PhantomConfig, rois: usize, rng: &mut R) -> Result<PhantomSpec> {
    let d = cfg.size as f64;
    let (lo, hi) = (cfg.activity_min - cfg.background, cfg.activity_max - cfg.background);
    let span = |rng: &mut R, a: f64, b: f64| lo + (hi - lo) * rng.gen_range(a..=b);
    let jitter = |rng: &mut R, c: [f64; 3]| c.map(|v| (v + rng.gen_range(-0.03..=0.03)) * d);
    let axes = |rng: &mut R, a: [f64; 3]| a.map(|v| v * d * rng.gen_range(0.9..=1.1));
    let label = |slot: usize| (slot < rois).then_some(slot);
    for _ in 0..64 {
        let mut organs = vec![
            Organ {
                center: jitter(rng, [0.55, 0.5, 0.33]),
                semi_axes: axes(rng, [0.16, 0.2, 0.15]),
                activity: span(rng, 0.0, 0.3),
                roi: label(0),
            },
            Organ {
                center: jitter(rng, [0.2, 0.5, 0.5]),
                semi_axes: axes(rng, [0.12, 0.15, 0.15]),
                activity: span(rng, 0.2, 0.5),
                roi: label(1),
            },
            Organ {
                center: jitter(rng, [0.55, 0.5, 0.74]),
                semi_axes: axes(rng, [0.1, 0.08, 0.08]),
                activity: span(rng, 0.3, 0.7),
                roi: label(2),
            },
            Organ {
                center: jitter(rng, [0.82, 0.5, 0.5]),
                semi_axes: axes(rng, [0.07, 0.07, 0.07]),
                activity: span(rng, 0.75, 1.0),
                roi: label(3),
            },
        ];
        let brain = organs[1].clone();
        organs.push(Organ {
            center: brain.center,
            semi_axes: brain.semi_axes.map(|a| a * 0.45),
            activity: 0.5 * brain.activity,
            roi: None,
        });
        let spec = PhantomSpec {
            size: cfg.size,
            background: cfg.background,
            organs,
            rois,
        };
        match render_phantom(&spec) {
            Ok(_) => return Ok(spec),
            Err(Error::Config(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Config(format!("could not place organs in a {}^3 grid", cfg.size)))
}

/// Independent Poisson draws with mean `activity * factor` per voxel.
pub fn poisson_counts<R: Rng>(activity: &Volume, factor: f64, rng: &mut R) -> Volume {
    let data = activity
        .data
        .iter()
        .map(|&a| {
            let lambda = a as f64 * factor;
            if lambda > 0.0 {
                Poisson::new(lambda).expect("positive mean").sample(rng) as f32
            } else {
                0.0
            }
        })
        .collect();
    Volume {
        data,
        ..activity.clone()
    }
}

/// Separable boxcar mean of odd `width`, renormalized where the window
/// leaves the volume.
pub fn boxcar(v: &Volume, width: usize) -> Volume {
    if width <= 1 {
        return v.clone();
    }
    let r = width / 2;
    let [dz, dy, dx] = v.dims;
    let mut out = v.clone();
    for c in 0..v.channels {
        let base = c * v.voxels();
        for (axis, stride, len) in [(0, dy * dx, dz), (1, dx, dy), (2, 1, dx)] {
            let src = out.data[base..base + v.voxels()].to_vec();
            for i in 0..v.voxels() {
                let pos = match axis {
                    0 => i / (dy * dx),
                    1 => (i / dx) % dy,
                    _ => i % dx,
                };
                let a = pos.saturating_sub(r);
                let b = (pos + r).min(len - 1);
                let start = i - (pos - a) * stride;
                let sum: f32 = (0..=b - a).map(|k| src[start + k * stride]).sum();
                out.data[base + i] = sum / (b - a + 1) as f32;
            }
        }
    }
    out
}

/// Poisson sampling at full dose, then smoothing.
pub fn simulate_full_dose<R: Rng>(activity: &Volume, smoothing: usize, rng: &mut R) -> Volume {
    boxcar(&poisson_counts(activity, 1.0, rng), smoothing)
}

/// Pre-smoothing low-dose counts: Poisson at `activity / drf`, optionally
/// multiplied back by `drf`.
pub fn thinned_counts<R: Rng>(activity: &Volume, drf: u32, rescale: bool, rng: &mut R) -> Volume {
    let k = drf as f32;
    let counts = poisson_counts(activity, 1.0 / drf as f64, rng);
    if rescale {
        counts.map(|c| c * k)
    } else {
        counts
    }
}

pub fn simulate_low_dose<R: Rng>(activity: &Volume, drf: u32, rescale: bool, smoothing: usize, rng: &mut R) -> Volume {
    boxcar(&thinned_counts(activity, drf, rescale, rng), smoothing)
}

/// Trilinear resampling with corner voxels aligned.
pub fn resize_volume(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    if target.iter().any(|&t| t < 2) {
        return Err(Error::Config(format!("resize target {target:?} needs extents >= 2")));
    }
    if target == v.dims {
        return Ok(v.clone());
    }
    let [sz, sy, sx] = v.dims;
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f32) {
        if n_in == 1 {
            return (0, 0, 0.0);
        }
        let p = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let i0 = (p.floor() as usize).min(n_in - 2);
        (i0, i0 + 1, (p - i0 as f64) as f32)
    };
    let [tz, ty, tx] = target;
    let mut data = Vec::with_capacity(v.channels * tz * ty * tx);
    for c in 0..v.channels {
        let src = v.channel(c);
        let at = |z: usize, y: usize, x: usize| src[(z * sy + y) * sx + x];
        for z in 0..tz {
            let (z0, z1, fz) = coord(z, tz, sz);
            for y in 0..ty {
                let (y0, y1, fy) = coord(y, ty, sy);
                for x in 0..tx {
                    let (x0, x1, fx) = coord(x, tx, sx);
                    let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
                    let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                    let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                    let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                    let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                    let v = lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz);
                    data.push(v);
                }
            }
        }
    }
    let mut out = Volume::new(v.channels, target, data)?;
    out.spacing = [0, 1, 2].map(|i| v.spacing[i] * (v.dims[i].max(2) - 1) as f32 / (target[i] - 1) as f32);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Low-dose `x`, full-dose `y` and ROI masks `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub case: usize,
    pub split: Split,
    pub spec_hash: String,
    pub x: Volume,
    pub y: Volume,
    pub s: Mask,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Generates `cfg.count` triplets. Consecutive groups of
/// `samples_per_spec` cases share one phantom and its full-dose volume, and
/// the trailing phantoms form the test split.
pub fn generate_triplets(cfg: &PhantomConfig, rois: usize, seed: u64) -> Result<Vec<Triplet>> {
    let per = cfg.samples_per_spec;
    let n_specs = cfg.count.div_ceil(per);
    let n_test = (n_specs as f64 * cfg.test_fraction).round() as usize;
    let mut out = Vec::with_capacity(cfg.count);
    for spec_idx in 0..n_specs {
        let mut rng = stream_rng(seed, spec_idx as u64);
        let spec = random_spec(cfg, rois, &mut rng)?;
        let (activity, s) = render_phantom(&spec)?;
        let y = simulate_full_dose(&activity, cfg.smoothing, &mut rng);
        let hash = spec.hash();
        let split = if spec_idx >= n_specs - n_test { Split::Test } else { Split::Train };
        for case in spec_idx * per..((spec_idx + 1) * per).min(cfg.count) {
            let mut rng = stream_rng(seed, (1 << 32) | case as u64);
            let x = simulate_low_dose(&activity, cfg.drf, cfg.rescale, cfg.smoothing, &mut rng);
            out.push(Triplet {
                case,
                split,
                spec_hash: hash.clone(),
                x,
                y: y.clone(),
                s: s.clone(),
            });
        }
    }
    Ok(out)
}

pub const MANIFEST: &str = "manifest.tsv";

fn case_dir(root: &Path, split: Split, case: usize) -> PathBuf {
    root.join(split.name()).join(format!("case_{case:04}"))
}

/// Writes triplets under `root/{train,test}/case_NNNN/` plus the manifest.
pub fn write_dataset(root: &Path, triplets: &[Triplet]) -> Result<()> {
    let mut manifest = String::from("case\tsplit\tspec_hash\n");
    for t in triplets {
        let dir = case_dir(root, t.split, t.case);
        fs::create_dir_all(&dir)?;
        io::write_pvol(dir.join("x.pvol"), &t.x)?;
        io::write_pvol(dir.join("y.pvol"), &t.y)?;
        io::write_pmsk(dir.join("s.pmsk"), &t.s)?;
        let _ = writeln!(manifest, "case_{:04}\t{}\t{}", t.case, t.split.name(), t.spec_hash);
    }
    fs::write(root.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn build_dataset(root: &Path, cfg: &PhantomConfig, rois: usize, seed: u64) -> Result<Vec<Triplet>> {
    let triplets = generate_triplets(cfg, rois, seed)?;
    write_dataset(root, &triplets)?;
    Ok(triplets)
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub case: usize,
    pub split: Split,
    pub spec_hash: String,
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Data(format!("{}:{}: malformed manifest row", path.display(), i + 1));
        let mut f = line.split('\t');
        let case = f
            .next()
            .and_then(|c| c.strip_prefix("case_"))
            .and_then(|c| c.parse().ok())
            .ok_or_else(bad)?;
        let split = match f.next() {
            Some("train") => Split::Train,
            Some("test") => Split::Test,
            _ => return Err(bad()),
        };
        let spec_hash = f.next().ok_or_else(bad)?.to_string();
        rows.push(ManifestEntry { case, split, spec_hash });
    }
    Ok(rows)
}

/// SHA-256 over the manifest and every listed file, hex.
pub fn dataset_digest(root: &Path) -> Result<String> {
    let mut h = Sha256::new();
    h.update(fs::read(root.join(MANIFEST))?);
    for e in read_manifest(root)? {
        let dir = case_dir(root, e.split, e.case);
        for f in ["x.pvol", "y.pvol", "s.pmsk"] {
            h.update(fs::read(dir.join(f))?);
        }
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Loads every triplet of `split` listed in the manifest.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<Triplet>> {
    read_manifest(root)?
        .into_iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let dir = case_dir(root, split, e.case);
            Ok(Triplet {
                case: e.case,
                split,
                spec_hash: e.spec_hash,
                x: io::read_pvol(dir.join("x.pvol"))?,
                y: io::read_pvol(dir.join("y.pvol"))?,
                s: io::read_pmsk(dir.join("s.pmsk"))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
