use super::{Graph, Var};
use crate::conv::{self, ConvSpec};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub(super) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    SpatialSum(Var, T),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat(Vec<Var>),
    Narrow {
        x: Var,
        start: usize,
    },
    ChannelAffine {
        x: Var,
        scale: Option<Var>,
        shift: Option<Var>,
    },
    InstanceNorm {
        x: Var,
        mean: Vec<T>,
        sigma: Vec<T>,
        eps: T,
    },
    NoiseInject {
        f: Var,
        p: Var,
        z: Vec<T>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    MaxPool(Var, Vec<u32>),
    Upsample(Var),
}

fn same_shape<T: Element>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", g.shape(a), g.shape(b)),
        ));
    }
    Ok(())
}

/// `(N, C, spatial)` view of a rank>=2 tensor.
fn ncs(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("expected rank >= 2, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl<T: Element> Graph<T> {
    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.value(x).map(f);
        let rg = self.requires_grad(x);
        self.push(out, rg, op)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        same_shape(self, name, a, b)?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_vec(av.shape(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    /// Elementwise `max(x, slope * x)` for `slope` in `[0, 1)`.
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(x, Op::LeakyRelu(x, slope), |v| if v > T::zero() { v } else { v * slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| T::one() / (T::one() + (-v).exp()))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), |v| v.max(T::zero()) + (-v.abs()).exp().ln_1p())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), |v| v.ln())
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.max(lo).min(hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    fn spatial_reduce(&mut self, x: Var, mean: bool) -> Result<Var> {
        let (n, c, s) = ncs(self.shape(x), "spatial reduction")?;
        let factor = if mean { T::one() / T::lit(s as f64) } else { T::one() };
        let data = self
            .value(x)
            .data()
            .chunks(s)
            .map(|row| row.iter().copied().sum::<T>() * factor)
            .collect();
        let out = Tensor::from_vec(&[n, c], data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::SpatialSum(x, factor)))
    }

    /// `[N, C, ...] -> [N, C]` mean over all trailing axes.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        self.spatial_reduce(x, true)
    }

    /// `[N, C, ...] -> [N, C]` sum over all trailing axes.
    pub fn spatial_sum(&mut self, x: Var) -> Result<Var> {
        self.spatial_reduce(x, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::Reshape(x)))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// `x [N, F] . w [F, O] + b [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, f) = match *self.shape(x) {
            [n, f] => (n, f),
            ref s => return Err(Error::shape("linear", format!("input {s:?} is not [N, F]"))),
        };
        let o = match *self.shape(w) {
            [wf, o] if wf == f => o,
            ref s => return Err(Error::shape("linear", format!("weight {s:?} does not take {f} features"))),
        };
        let mut out = match b {
            Some(b) => {
                if self.shape(b) != [o] {
                    return Err(Error::shape("linear", format!("bias {:?} vs {o} outputs", self.shape(b))));
                }
                let bv = self.value(b).data();
                (0..n).flat_map(|_| bv.iter().copied()).collect()
            }
            None => vec![T::zero(); n * o],
        };
        T::gemm(
            n,
            f,
            o,
            self.value(x).data(),
            (f as isize, 1),
            self.value(w).data(),
            (o as isize, 1),
            T::one(),
            &mut out,
            (o as isize, 1),
        );
        let out = Tensor::from_vec(&[n, o], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        let rg = self.any_grad(&ins);
        Ok(self.push(out, rg, Op::Linear { x, w, b }))
    }

    /// Concatenation along the channel axis (axis 1).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let (n, _, s) = ncs(self.shape(first), "concat")?;
        let tail = self.shape(first)[2..].to_vec();
        let mut channels = 0;
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != tail.len() + 2 || sh[0] != n || sh[2..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} does not match {:?} outside the channel axis", sh, self.shape(first)),
                ));
            }
            channels += sh[1];
        }
        let mut data = Vec::with_capacity(n * channels * s);
        for i in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                data.extend_from_slice(&self.value(p).data()[i * c * s..(i + 1) * c * s]);
            }
        }
        let mut shape = vec![n, channels];
        shape.extend(tail);
        let out = Tensor::from_vec(&shape, data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, rg, Op::Concat(parts.to_vec())))
    }

    /// Channels `start..start + len` of `x`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c, s) = ncs(self.shape(x), "narrow")?;
        if len == 0 || start + len > c {
            return Err(Error::shape("narrow", format!("channels {start}..{} of {c}", start + len)));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len * s);
        for i in 0..n {
            data.extend_from_slice(&src[(i * c + start) * s..(i * c + start + len) * s]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[1] = len;
        let out = Tensor::from_vec(&shape, data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::Narrow { x, start }))
    }

    /// `x[n, c, ...] * scale[n, c] + shift[n, c]`, broadcasting per-channel
    /// vectors over the spatial axes.
    pub fn channel_affine(&mut self, x: Var, scale: Option<Var>, shift: Option<Var>) -> Result<Var> {
        let (n, c, s) = ncs(self.shape(x), "channel_affine")?;
        for v in scale.iter().chain(shift.iter()) {
            if self.shape(*v) != [n, c] {
                return Err(Error::shape(
                    "channel_affine",
                    format!("per-channel factor {:?} vs [{n}, {c}]", self.shape(*v)),
                ));
            }
        }
        let xv = self.value(x).data();
        let sc = scale.map(|v| self.value(v).data());
        let sh = shift.map(|v| self.value(v).data());
        let mut data = Vec::with_capacity(xv.len());
        for (j, row) in xv.chunks(s).enumerate() {
            let a = sc.map_or(T::one(), |d| d[j]);
            let b = sh.map_or(T::zero(), |d| d[j]);
            data.extend(row.iter().map(|&v| v * a + b));
        }
        let out = Tensor::from_vec(self.shape(x), data)?;
        let mut ins = vec![x];
        ins.extend(scale);
        ins.extend(shift);
        let rg = self.any_grad(&ins);
        Ok(self.push(out, rg, Op::ChannelAffine { x, scale, shift }))
    }

    /// Per-(instance, channel) standardization `(x - mu) / (sigma + eps)`
    /// with population standard deviation.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let (_, _, s) = ncs(self.shape(x), "instance_norm")?;
        let xv = self.value(x);
        let inv_s = T::one() / T::lit(s as f64);
        let mut mean = Vec::new();
        let mut sigma = Vec::new();
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(s) {
            let mu = row.iter().copied().sum::<T>() * inv_s;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_s;
            let sd = var.sqrt();
            let d = T::one() / (sd + eps);
            data.extend(row.iter().map(|&v| (v - mu) * d));
            mean.push(mu);
            sigma.push(sd);
        }
        let out = Tensor::from_vec(xv.shape(), data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::InstanceNorm { x, mean, sigma, eps }))
    }

    /// `f[n, c, v] + p[c] * z[n, v]` with one noise field per instance shared
    /// by all channels.
    pub fn noise_inject(&mut self, f: Var, p: Var, z: Vec<T>) -> Result<Var> {
        let (n, c, s) = ncs(self.shape(f), "noise_inject")?;
        if self.shape(p) != [c] {
            return Err(Error::shape("noise_inject", format!("scales {:?} vs {c} channels", self.shape(p))));
        }
        if z.len() != n * s {
            return Err(Error::shape("noise_inject", "noise field must be [N, 1, spatial]"));
        }
        let fv = self.value(f).data();
        let pv = self.value(p).data();
        let mut data = Vec::with_capacity(fv.len());
        for i in 0..n {
            let zi = &z[i * s..(i + 1) * s];
            for ch in 0..c {
                let row = &fv[(i * c + ch) * s..(i * c + ch + 1) * s];
                data.extend(row.iter().zip(zi).map(|(&a, &b)| a + pv[ch] * b));
            }
        }
        let out = Tensor::from_vec(self.shape(f), data)?;
        let rg = self.any_grad(&[f, p]);
        Ok(self.push(out, rg, Op::NoiseInject { f, p, z }))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = conv::conv3d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        let rg = self.any_grad(&ins);
        Ok(self.push(out, rg, Op::Conv { x, w, b, spec }))
    }

    /// 2x2x2 max pooling with stride 2; odd trailing planes are dropped.
    /// Gradient goes to the first maximal element of each window.
    pub fn maxpool3d(&mut self, x: Var) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5("maxpool3d")?;
        let (od, oh, ow) = (d / 2, h / 2, w / 2);
        if od == 0 || oh == 0 || ow == 0 {
            return Err(Error::shape("maxpool3d", format!("extent below 2 in {:?}", self.shape(x))));
        }
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(n * c * od * oh * ow);
        let mut arg = Vec::with_capacity(data.capacity());
        for plane in 0..n * c {
            let base = plane * d * h * w;
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = T::zero();
                        let mut bi = usize::MAX;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let i = ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx;
                                    let v = xv[base + i];
                                    if bi == usize::MAX || v > best {
                                        best = v;
                                        bi = i;
                                    }
                                }
                            }
                        }
                        data.push(best);
                        arg.push(bi as u32);
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, od, oh, ow], data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::MaxPool(x, arg)))
    }

    /// Nearest-neighbour upsampling by 2 along each spatial axis.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5("upsample")?;
        let xv = self.value(x).data();
        let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
        let mut data = Vec::with_capacity(n * c * od * oh * ow);
        for plane in 0..n * c {
            let base = plane * d * h * w;
            for z in 0..od {
                for y in 0..oh {
                    let row = &xv[base + ((z / 2) * h + y / 2) * w..][..w];
                    for &v in row {
                        data.push(v);
                        data.push(v);
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[n, c, od, oh, ow], data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, rg, Op::Upsample(x)))
    }
}

fn zip_map<T: Element>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Input-gradient contributions of node `i` given its upstream gradient.
pub(super) fn backward<T: Element>(g: &Graph<T>, i: usize, grad: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
    let node = &g.nodes[i];
    let out = node.value.data();
    let val = |v: Var| g.value(v).data();
    let wants = |v: Var| g.requires_grad(v);
    let mut res = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            res.push((*a, grad.to_vec()));
            res.push((*b, grad.to_vec()));
        }
        Op::Sub(a, b) => {
            res.push((*a, grad.to_vec()));
            res.push((*b, grad.iter().map(|&v| -v).collect()));
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                res.push((*a, zip_map(grad, val(*b), |g, y| g * y)));
            }
            if wants(*b) {
                res.push((*b, zip_map(grad, val(*a), |g, x| g * x)));
            }
        }
        Op::Div(a, b) => {
            if wants(*a) {
                res.push((*a, zip_map(grad, val(*b), |g, y| g / y)));
            }
            if wants(*b) {
                let q = zip_map(grad, out, |g, o| g * o);
                res.push((*b, zip_map(&q, val(*b), |q, y| -q / y)));
            }
        }
        Op::Scale(x, s) => res.push((*x, grad.iter().map(|&v| v * *s).collect())),
        Op::AddScalar(x) => res.push((*x, grad.to_vec())),
        Op::LeakyRelu(x, slope) => res.push((
            *x,
            zip_map(grad, val(*x), |g, v| if v > T::zero() { g } else { g * *slope }),
        )),
        Op::Sigmoid(x) => res.push((*x, zip_map(grad, out, |g, o| g * o * (T::one() - o)))),
        Op::Softplus(x) => res.push((*x, zip_map(grad, val(*x), |g, v| g / (T::one() + (-v).exp())))),
        Op::Abs(x) => res.push((*x, zip_map(grad, val(*x), |g, v| g * sign(v)))),
        Op::Ln(x) => res.push((*x, zip_map(grad, val(*x), |g, v| g / v))),
        Op::Sqrt(x) => res.push((*x, zip_map(grad, out, |g, o| g / (o + o)))),
        Op::Square(x) => res.push((*x, zip_map(grad, val(*x), |g, v| g * (v + v)))),
        Op::Clamp(x, lo, hi) => res.push((
            *x,
            zip_map(grad, val(*x), |g, v| if v >= *lo && v <= *hi { g } else { T::zero() }),
        )),
        Op::Sum(x) => res.push((*x, vec![grad[0]; g.value(*x).numel()])),
        Op::Mean(x) => {
            let n = g.value(*x).numel();
            res.push((*x, vec![grad[0] / T::lit(n as f64); n]));
        }
        Op::SpatialSum(x, factor) => {
            let (_, _, s) = ncs(g.shape(*x), "spatial reduction")?;
            let gx = grad.iter().flat_map(|&v| std::iter::repeat(v * *factor).take(s)).collect();
            res.push((*x, gx));
        }
        Op::Reshape(x) => res.push((*x, grad.to_vec())),
        Op::Linear { x, w, b } => {
            let (n, f) = (g.shape(*x)[0], g.shape(*x)[1]);
            let o = g.shape(*w)[1];
            if wants(*x) {
                let mut gx = vec![T::zero(); n * f];
                T::gemm(n, o, f, grad, (o as isize, 1), val(*w), (1, o as isize), T::zero(), &mut gx, (f as isize, 1));
                res.push((*x, gx));
            }
            if wants(*w) {
                let mut gw = vec![T::zero(); f * o];
                T::gemm(f, n, o, val(*x), (1, f as isize), grad, (o as isize, 1), T::zero(), &mut gw, (o as isize, 1));
                res.push((*w, gw));
            }
            if let Some(b) = b {
                let mut gb = vec![T::zero(); o];
                for row in grad.chunks(o) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                res.push((*b, gb));
            }
        }
        Op::Concat(parts) => {
            let n = node.value.shape()[0];
            let (_, total, s) = ncs(node.value.shape(), "concat")?;
            let mut offset = 0;
            for &p in parts {
                let c = g.shape(p)[1];
                if wants(p) {
                    let mut gp = Vec::with_capacity(n * c * s);
                    for k in 0..n {
                        gp.extend_from_slice(&grad[(k * total + offset) * s..(k * total + offset + c) * s]);
                    }
                    res.push((p, gp));
                }
                offset += c;
            }
        }
        Op::Narrow { x, start } => {
            let (n, c, s) = ncs(g.shape(*x), "narrow")?;
            let len = node.value.shape()[1];
            let mut gx = vec![T::zero(); n * c * s];
            for k in 0..n {
                gx[(k * c + start) * s..(k * c + start + len) * s]
                    .copy_from_slice(&grad[k * len * s..(k + 1) * len * s]);
            }
            res.push((*x, gx));
        }
        Op::ChannelAffine { x, scale, shift } => {
            let (_, _, s) = ncs(g.shape(*x), "channel_affine")?;
            if wants(*x) {
                let gx = match scale {
                    Some(sc) => {
                        let scv = val(*sc);
                        grad.chunks(s)
                            .enumerate()
                            .flat_map(|(j, row)| row.iter().map(move |&v| v * scv[j]))
                            .collect()
                    }
                    None => grad.to_vec(),
                };
                res.push((*x, gx));
            }
            if let Some(sc) = scale.filter(|v| wants(*v)) {
                let gs = grad
                    .chunks(s)
                    .zip(val(*x).chunks(s))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                    .collect();
                res.push((sc, gs));
            }
            if let Some(sh) = shift.filter(|v| wants(*v)) {
                res.push((sh, grad.chunks(s).map(|r| r.iter().copied().sum()).collect()));
            }
        }
        Op::InstanceNorm { x, mean, sigma, eps } => {
            let (_, _, s) = ncs(g.shape(*x), "instance_norm")?;
            let inv_m = T::one() / T::lit(s as f64);
            let mut gx = Vec::with_capacity(grad.len());
            for (j, (gr, xr)) in grad.chunks(s).zip(val(*x).chunks(s)).enumerate() {
                let mu = mean[j];
                let sd = sigma[j];
                let den = sd + *eps;
                let gmean = gr.iter().copied().sum::<T>() * inv_m;
                // d sigma / dx_j = (x_j - mu) / (M sigma); vanishes for constant rows.
                let coupling = if sd > T::zero() {
                    gr.iter().zip(xr).map(|(&a, &b)| a * (b - mu)).sum::<T>() * inv_m / (sd * den * den)
                } else {
                    T::zero()
                };
                gx.extend(gr.iter().zip(xr).map(|(&a, &b)| (a - gmean) / den - (b - mu) * coupling));
            }
            res.push((*x, gx));
        }
        Op::NoiseInject { f, p, z } => {
            let (n, c, s) = ncs(g.shape(*f), "noise_inject")?;
            if wants(*f) {
                res.push((*f, grad.to_vec()));
            }
            if wants(*p) {
                let mut gp = vec![T::zero(); c];
                for k in 0..n {
                    let zk = &z[k * s..(k + 1) * s];
                    for (ch, acc) in gp.iter_mut().enumerate() {
                        let row = &grad[(k * c + ch) * s..(k * c + ch + 1) * s];
                        *acc = *acc + row.iter().zip(zk).map(|(&a, &b)| a * b).sum();
                    }
                }
                res.push((*p, gp));
            }
        }
        Op::Conv { x, w, b, spec } => {
            let gr = conv::conv3d_backward(g.value(*x), g.value(*w), grad, *spec, wants(*x), wants(*w))?;
            if let Some(gx) = gr.input {
                res.push((*x, gx));
            }
            if let Some(gw) = gr.weight {
                res.push((*w, gw));
            }
            if let Some(b) = b {
                res.push((*b, gr.bias));
            }
        }
        Op::MaxPool(x, arg) => {
            let [_, _, d, h, w] = g.value(*x).dims5("maxpool3d")?;
            let per_plane = node.value.numel() / (g.shape(*x)[0] * g.shape(*x)[1]);
            let mut gx = vec![T::zero(); g.value(*x).numel()];
            for (o, (&gv, &a)) in grad.iter().zip(arg).enumerate() {
                let plane = o / per_plane;
                let t = &mut gx[plane * d * h * w + a as usize];
                *t = *t + gv;
            }
            res.push((*x, gx));
        }
        Op::Upsample(x) => {
            let [_, _, d, h, w] = g.value(*x).dims5("upsample")?;
            let (oh, ow) = (2 * h, 2 * w);
            let mut gx = vec![T::zero(); g.value(*x).numel()];
            for (o, &gv) in grad.iter().enumerate() {
                let xx = o % ow;
                let y = (o / ow) % oh;
                let rest = o / (ow * oh);
                let z = rest % (2 * d);
                let plane = rest / (2 * d);
                let t = &mut gx[((plane * d + z / 2) * h + y / 2) * w + xx / 2];
                *t = *t + gv;
            }
            res.push((*x, gx));
        }
    }
    Ok(res)
}

fn sign<T: Element>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
