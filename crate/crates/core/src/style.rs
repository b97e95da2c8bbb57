//! Style modulation: mapping network, noise injection and AdaIN.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// Floor added to the standard deviation wherever it divides.
pub const EPS_SIGMA: f64 = 1e-5;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}

/// Per-(instance, channel) mean and population standard deviation.
pub fn channel_stats<T: Element>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::shape("channel_stats", format!("expected [N, C, ...], got {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let inv = T::one() / T::lit(s as f64);
    let mut mu = Vec::with_capacity(n * c);
    let mut sigma = Vec::with_capacity(n * c);
    for row in x.data().chunks(s) {
        let m = row.iter().copied().sum::<T>() * inv;
        let v = row.iter().map(|&a| (a - m) * (a - m)).sum::<T>() * inv;
        mu.push(m);
        sigma.push(v.sqrt());
    }
    Ok((Tensor::from_vec(&[n, c], mu)?, Tensor::from_vec(&[n, c], sigma)?))
}

/// Samples one zero-mean Gaussian field per instance, `[N, 1, spatial]`.
pub fn sample_noise<T: Element, R: Rng + ?Sized>(n: usize, spatial: usize, sigma_z: f64, rng: &mut R) -> Vec<T> {
    let normal = Normal::new(0.0, sigma_z).expect("finite noise std");
    (0..n * spatial).map(|_| T::lit(normal.sample(rng))).collect()
}

/// `f + P * Z` in train mode, `f` itself in test mode.
pub fn inject_noise<T: Element, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    f: Var,
    p: Var,
    mode: Mode,
    sigma_z: f64,
    rng: &mut R,
) -> Result<Var> {
    match mode {
        Mode::Test => Ok(f),
        Mode::Train => {
            let shape = g.shape(f);
            let n = shape[0];
            let s = shape[2..].iter().product();
            let z = sample_noise(n, s, sigma_z, rng);
            g.noise_inject(f, p, z)
        }
    }
}

/// `gamma * (f - mu) / (sigma + eps) + beta` per instance and channel.
pub fn adain<T: Element>(g: &mut Graph<T>, f: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = g.instance_norm(f, T::lit(EPS_SIGMA))?;
    g.channel_affine(n, Some(gamma), Some(beta))
}

/// Layer-specific affine map from the style vector to `(gamma, beta)`.
#[derive(Debug, Clone, Copy)]
pub struct StyleAffine {
    pub a: ParamId,
    pub bias: ParamId,
    pub channels: usize,
}

impl StyleAffine {
    /// Weights `N(0, 0.01)`, gamma-bias 1, beta-bias 0.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, width: usize, channels: usize, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0f32, 0.01).expect("valid std");
        let a = (0..width * 2 * channels).map(|_| normal.sample(rng)).collect();
        let a = store.add(format!("{name}.a"), Tensor::from_vec(&[width, 2 * channels], a)?)?;
        let mut b = vec![1.0f32; channels];
        b.extend(std::iter::repeat(0.0).take(channels));
        let bias = store.add(format!("{name}.b"), Tensor::from_vec(&[2 * channels], b)?)?;
        Ok(Self { a, bias, channels })
    }

    /// Splits `w A + b` into `(gamma, beta)`, each `[N, C]`.
    pub fn factors<T: Element>(&self, g: &mut Graph<T>, p: &Bound, w: Var) -> Result<(Var, Var)> {
        style_factors(g, w, p.var(self.a), p.var(self.bias), self.channels)
    }
}

pub fn style_factors<T: Element>(g: &mut Graph<T>, w: Var, a: Var, bias: Var, channels: usize) -> Result<(Var, Var)> {
    let width = g.shape(a).get(1).copied().unwrap_or(0);
    if width != 2 * channels {
        return Err(Error::Config(format!(
            "style affine produces {width} factors, host layer needs {}",
            2 * channels
        )));
    }
    let out = g.linear(w, a, Some(bias))?;
    let gamma = g.narrow(out, 0, channels)?;
    let beta = g.narrow(out, channels, channels)?;
    Ok((gamma, beta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingConfig {
    pub channels: [usize; 4],
    pub width: usize,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 64, 128],
            width: 512,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvParams {
    w: ParamId,
    b: ParamId,
    spec: ConvSpec,
}

/// Four `[2^3 conv, stride-2 3^3 conv]` blocks followed by one linear layer.
#[derive(Debug, Clone)]
pub struct MappingNetwork {
    convs: Vec<ConvParams>,
    linear_w: ParamId,
    linear_b: ParamId,
    pub config: MappingConfig,
    pub size: usize,
}

const WIDEN: ConvSpec = ConvSpec::asymmetric(2, 1, 1, 0);
const HALVE: ConvSpec = ConvSpec::new(3, 2, 1);

impl MappingNetwork {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, size: usize, config: MappingConfig, rng: &mut R) -> Result<Self> {
        if size == 0 || size % 16 != 0 {
            return Err(Error::Config(format!("volume size {size} is not divisible by 16")));
        }
        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, &c) in config.channels.iter().enumerate() {
            for (j, (spec, ci)) in [(WIDEN, cin), (HALVE, c)].into_iter().enumerate() {
                let k = spec.kernel;
                let name = format!("{prefix}.block{i}.conv{j}");
                let w = store.add_fan_in(format!("{name}.w"), &[c, ci, k, k, k], ci * k * k * k, rng)?;
                let b = store.add_filled(format!("{name}.b"), &[c], 0.0)?;
                convs.push(ConvParams { w, b, spec });
            }
            cin = c;
        }
        let side = size / 16;
        let flat = cin * side * side * side;
        let linear_w = store.add_fan_in(format!("{prefix}.linear.w"), &[flat, config.width], flat, rng)?;
        let linear_b = store.add_filled(format!("{prefix}.linear.b"), &[config.width], 0.0)?;
        Ok(Self {
            convs,
            linear_w,
            linear_b,
            config,
            size,
        })
    }

    /// `x [N, 1, D, D, D] -> W [N, width]`; the input is standardized per volume first.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 5 || shape[2..].iter().any(|&d| d != self.size) {
            return Err(Error::Config(format!(
                "mapping network built for {0}^3 volumes, got {shape:?}",
                self.size
            )));
        }
        let slope = T::lit(LEAKY_SLOPE);
        let mut h = g.instance_norm(x, T::lit(EPS_SIGMA))?;
        for c in &self.convs {
            h = g.conv3d(h, p.var(c.w), Some(p.var(c.b)), c.spec)?;
            h = g.leaky_relu(h, slope);
        }
        let h = g.flatten(h)?;
        let w = g.linear(h, p.var(self.linear_w), Some(p.var(self.linear_b)))?;
        Ok(g.leaky_relu(w, slope))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn stats_of_known_rows() {
        let x = Tensor::from_vec(&[1, 2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 5.0, 5.0, 5.0]).unwrap();
        let (mu, sd) = channel_stats::<f64>(&x).unwrap();
        assert_eq!(mu.data(), &[2.5, 5.0]);
        assert!((sd.data()[0] - 1.25f64.sqrt()).abs() < 1e-15);
        assert_eq!(sd.data()[1], 0.0);
    }

    #[test]
    fn zero_style_vector_gives_bias_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let aff = StyleAffine::new(&mut store, "a", 512, 8, &mut rng).unwrap();
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g, false);
        let w = g.constant(Tensor::zeros(&[3, 512]));
        let (gamma, beta) = aff.factors(&mut g, &p, w).unwrap();
        assert_eq!(g.shape(gamma), &[3, 8]);
        assert!(g.value(gamma).data().iter().all(|&v| v == 1.0));
        assert!(g.value(beta).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mapping_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let m = MappingNetwork::new(&mut store, "map", 32, MappingConfig::default(), &mut rng).unwrap();
        assert_eq!(store.by_name("map.linear.w").unwrap().shape(), &[1024, 512]);
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g, false);
        let mut data: Vec<f32> = (0..32 * 32 * 32).map(|i| (i % 7) as f32).collect();
        data.extend_from_within(..);
        let x = g.constant(Tensor::from_vec(&[2, 1, 32, 32, 32], data).unwrap());
        let w = m.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(w), &[2, 512]);
        let v = g.value(w).data();
        assert_eq!(v[..512], v[512..]);
        assert!(MappingNetwork::new(&mut ParamStore::new(), "m", 24, MappingConfig::default(), &mut rng).is_err());
    }
}
