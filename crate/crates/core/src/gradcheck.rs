//! Finite-difference verification of analytic gradients in 64-bit precision.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::conv::ConvSpec;
use crate::error::Result;
use crate::losses;
use crate::style::{self, LEAKY_SLOPE};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(1, |numeric|)` over checked entries.
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Options for [`check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Entries probed per input; larger inputs are subsampled.
    pub max_probes: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            max_probes: 64,
            seed: 0,
        }
    }
}

/// Builds the scalar function `build(inputs)` on a fresh graph and compares
/// the gradient of every input against central differences.
pub fn check<F>(inputs: &[Tensor<f64>], opts: GradCheckOptions, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data().iter().sum())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let seed = vec![1.0; g.value(out).numel()];
    g.backward_with(out, seed)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad_tensor(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let idx: Vec<usize> = if n <= opts.max_probes {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.max_probes).into_vec()
        };
        for i in idx {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + opts.step;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - opts.step;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[k].data()[i];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err: worst,
        checked,
    })
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// A named differentiable function and the point it is checked at.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values with `|v|` in `[0.2, 1)`, clear of kinks at zero.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, v).expect("shape")
}

fn binary(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.4)))).collect()).expect("shape")
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        inputs,
        build: Box::new(build),
    }
}

/// Every differentiable op, loss and modulation path at a random point.
pub fn suite(seed: u64) -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut r;
    let v = [2, 3, 4, 3, 5];
    let noise: Vec<f64> = (0..2 * 60).map(|_| r.gen_range(-1.0..1.0)).collect();
    let conv_x = uniform(r, &[2, 2, 5, 4, 6], -1.0, 1.0);
    vec![
        case("add", vec![signed(r, &v), signed(r, &v)], |g, x| g.add(x[0], x[1])),
        case("sub", vec![signed(r, &v), signed(r, &v)], |g, x| g.sub(x[0], x[1])),
        case("mul", vec![signed(r, &v), signed(r, &v)], |g, x| g.mul(x[0], x[1])),
        case("div", vec![signed(r, &v), uniform(r, &v, 0.5, 2.0)], |g, x| g.div(x[0], x[1])),
        case("scale", vec![signed(r, &v)], |g, x| Ok(g.scale(x[0], -1.7))),
        case("add_scalar", vec![signed(r, &v)], |g, x| Ok(g.add_scalar(x[0], 0.3))),
        case("neg", vec![signed(r, &v)], |g, x| Ok(g.neg(x[0]))),
        case("leaky_relu", vec![signed(r, &v)], |g, x| Ok(g.leaky_relu(x[0], LEAKY_SLOPE))),
        case("sigmoid", vec![uniform(r, &v, -3.0, 3.0)], |g, x| Ok(g.sigmoid(x[0]))),
        case("softplus", vec![uniform(r, &v, -4.0, 4.0)], |g, x| Ok(g.softplus(x[0]))),
        case("abs", vec![signed(r, &v)], |g, x| Ok(g.abs(x[0]))),
        case("ln", vec![uniform(r, &v, 0.5, 2.0)], |g, x| Ok(g.ln(x[0]))),
        case("sqrt", vec![uniform(r, &v, 0.5, 2.0)], |g, x| Ok(g.sqrt(x[0]))),
        case("square", vec![signed(r, &v)], |g, x| Ok(g.square(x[0]))),
        case("clamp", vec![uniform(r, &v, -2.0, 2.0)], |g, x| Ok(g.clamp(x[0], -1.0, 1.0))),
        case("sum", vec![signed(r, &v)], |g, x| Ok(g.sum(x[0]))),
        case("mean", vec![signed(r, &v)], |g, x| Ok(g.mean(x[0]))),
        case("spatial_mean", vec![signed(r, &v)], |g, x| g.spatial_mean(x[0])),
        case("spatial_sum", vec![signed(r, &v)], |g, x| g.spatial_sum(x[0])),
        case("reshape", vec![signed(r, &v)], |g, x| {
            let y = g.reshape(x[0], &[6, 60])?;
            let w = g.constant(Tensor::from_vec(&[6, 60], (0..360).map(|i| (i % 7) as f64).collect())?);
            g.mul(y, w)
        }),
        case("linear", vec![signed(r, &[3, 5]), signed(r, &[5, 4]), signed(r, &[4])], |g, x| {
            g.linear(x[0], x[1], Some(x[2]))
        }),
        case("concat_narrow", vec![signed(r, &v), signed(r, &[2, 2, 4, 3, 5])], |g, x| {
            let c = g.concat(&[x[0], x[1]])?;
            let n = g.narrow(c, 2, 2)?;
            Ok(g.square(n))
        }),
        case("channel_affine", vec![signed(r, &v), signed(r, &[2, 3]), signed(r, &[2, 3])], |g, x| {
            let y = g.channel_affine(x[0], Some(x[1]), Some(x[2]))?;
            Ok(g.square(y))
        }),
        case("instance_norm", vec![uniform(r, &v, -1.0, 1.0)], move |g, x| {
            let y = g.instance_norm(x[0], style::EPS_SIGMA)?;
            let w = g.constant(Tensor::from_vec(&v, (0..360).map(|i| ((i * 13) % 11) as f64 - 5.0).collect())?);
            g.mul(y, w)
        }),
        case("noise_inject", vec![signed(r, &v), signed(r, &[3])], move |g, x| {
            let y = g.noise_inject(x[0], x[1], noise.clone())?;
            Ok(g.square(y))
        }),
        case("conv3d", vec![conv_x.clone(), signed(r, &[3, 2, 3, 3, 3]), signed(r, &[3])], |g, x| {
            let y = g.conv3d(x[0], x[1], Some(x[2]), ConvSpec::new(3, 1, 1))?;
            let sq = g.square(y);
            Ok(g.mean(sq))
        }),
        case("conv3d_strided", vec![conv_x.clone(), signed(r, &[2, 2, 4, 4, 4])], |g, x| {
            let y = g.conv3d(x[0], x[1], None, ConvSpec::new(4, 2, 1))?;
            let sq = g.square(y);
            Ok(g.mean(sq))
        }),
        case("conv3d_asymmetric", vec![conv_x, signed(r, &[2, 2, 2, 2, 2])], |g, x| {
            let y = g.conv3d(x[0], x[1], None, ConvSpec::asymmetric(2, 1, 1, 0))?;
            let sq = g.square(y);
            Ok(g.mean(sq))
        }),
        case("maxpool3d", vec![uniform(r, &[1, 2, 4, 4, 6], -1.0, 1.0)], |g, x| {
            let y = g.maxpool3d(x[0])?;
            Ok(g.square(y))
        }),
        case("upsample_nearest2", vec![signed(r, &[1, 2, 2, 3, 2])], |g, x| {
            let y = g.upsample_nearest2(x[0])?;
            let w = g.constant(Tensor::from_vec(&[1, 2, 4, 6, 4], (0..192).map(|i| (i % 5) as f64).collect())?);
            g.mul(y, w)
        }),
        case("adain", vec![uniform(r, &v, -1.0, 1.0), signed(r, &[2, 3]), signed(r, &[2, 3])], |g, x| {
            let y = style::adain(g, x[0], x[1], x[2])?;
            Ok(g.square(y))
        }),
        case("style_factors", vec![signed(r, &[2, 4]), signed(r, &[4, 6]), signed(r, &[6])], |g, x| {
            let (gamma, beta) = style::style_factors(g, x[0], x[1], x[2], 3)?;
            let p = g.mul(gamma, beta)?;
            Ok(g.square(p))
        }),
        case("modulated_block", vec![uniform(r, &v, -1.0, 1.0), signed(r, &[3, 3, 3, 3, 3]), signed(r, &[2, 3]), signed(r, &[2, 3])], |g, x| {
            let c = g.conv3d(x[0], x[1], None, ConvSpec::new(3, 1, 1))?;
            let a = style::adain(g, c, x[2], x[3])?;
            Ok(g.leaky_relu(a, LEAKY_SLOPE))
        }),
        case("adv_loss_critic", vec![signed(r, &[4]), signed(r, &[4])], |g, x| Ok(losses::adv_loss_critic(g, x[0], x[1]))),
        case("adv_loss_generator", vec![signed(r, &[4])], |g, x| Ok(losses::adv_loss_generator(g, x[0]))),
        case("content_l1", vec![signed(r, &v), signed(r, &v)], |g, x| losses::content_l1(g, x[0], x[1])),
        case("bce_loss", vec![uniform(r, &v, 0.05, 0.95), binary(r, &v)], |g, x| losses::bce_loss(g, x[0], x[1])),
        case("dice_loss", vec![uniform(r, &v, 0.05, 0.95), binary(r, &v)], |g, x| losses::dice_loss(g, x[0], x[1], 1e-6)),
        case("seg_loss", vec![uniform(r, &v, 0.05, 0.95), binary(r, &v)], |g, x| losses::seg_loss(g, x[0], x[1])),
        case("bce_with_logits", vec![uniform(r, &v, -4.0, 4.0), binary(r, &v)], |g, x| losses::bce_with_logits(g, x[0], x[1])),
        case("seg_loss_logits", vec![uniform(r, &v, -4.0, 4.0), binary(r, &v)], |g, x| losses::seg_loss_logits(g, x[0], x[1])),
        case("total_generator_loss", vec![signed(r, &[2]), signed(r, &v), signed(r, &v), uniform(r, &v, 0.05, 0.95)], |g, x| {
            let adv = losses::adv_loss_generator(g, x[0]);
            let content = losses::content_l1(g, x[1], x[2])?;
            let t = g.constant(g.value(x[2]).map(|v| f64::from(u8::from(v > 0.0))));
            let seg = losses::seg_loss(g, x[3], t)?;
            let w = losses::LossWeights::default();
            losses::total_generator_loss(g, adv, content, Some(seg), &w)
        }),
    ]
}

/// Runs [`suite`] and returns each case's result.
pub fn run_suite(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    suite(seed)
        .into_iter()
        .map(|c| {
            let opts = GradCheckOptions {
                seed,
                ..Default::default()
            };
            Ok((c.name, check(&c.inputs, opts, &c.build)?))
        })
        .collect()
}
