//! Generator, critic and segmentation networks.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::style::{self, MappingConfig, MappingNetwork, Mode, StyleAffine, EPS_SIGMA, LEAKY_SLOPE};
use crate::tensor::{Element, Tensor};

const SAME3: ConvSpec = ConvSpec::new(3, 1, 1);
const POINT: ConvSpec = ConvSpec::new(1, 1, 0);

/// Stochastic state threaded through a forward pass.
pub struct Pass<'a> {
    pub mode: Mode,
    pub sigma_z: f64,
    pub rng: &'a mut dyn RngCore,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
    spec: ConvSpec,
}

impl Conv {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, spec: ConvSpec, rng: &mut R) -> Result<Self> {
        let k = spec.kernel;
        let fan_in = cin * k * k * k;
        let w = store.add_fan_in(format!("{name}.w"), &[cout, cin, k, k, k], fan_in, rng)?;
        let b = store.add_filled(format!("{name}.b"), &[cout], 0.0)?;
        Ok(Self { w, b, spec })
    }

    fn apply<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv3d(x, p.var(self.w), Some(p.var(self.b)), self.spec)
    }

    /// Starts a single-output conv as a copy of input channel `ch`.
    fn init_passthrough(&self, store: &mut ParamStore, ch: usize) {
        let w = store.get_mut(self.w);
        let k = self.spec.kernel;
        let c = k / 2;
        w.data_mut().fill(0.0);
        w.data_mut()[((ch * k + c) * k + c) * k + c] = 1.0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Dcitn,
    Unet,
}

/// Normalization applied after every backbone convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    None,
    Instance,
    AdaIn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub size: usize,
    pub backbone: Backbone,
    pub norm: Norm,
    pub noise: bool,
    pub stem_channels: usize,
    pub growth: usize,
    pub dense_layers: usize,
    pub unet_channels: [usize; 3],
    pub mapping: MappingConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            size: 64,
            backbone: Backbone::Dcitn,
            norm: Norm::AdaIn,
            noise: true,
            stem_channels: 16,
            growth: 8,
            dense_layers: 4,
            unet_channels: [16, 32, 64],
            mapping: MappingConfig::default(),
        }
    }
}

/// Noise scale and style affine attached to one backbone convolution.
#[derive(Debug, Clone, Copy)]
struct Site {
    noise: Option<ParamId>,
    affine: Option<StyleAffine>,
}

#[derive(Debug, Clone, Copy)]
struct Modulation {
    norm: Norm,
}

impl Modulation {
    fn site<R: Rng>(&self, cfg: &GeneratorConfig, store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Result<Site> {
        let noise = if cfg.noise {
            Some(store.add_filled(format!("g.mod.{name}.noise"), &[c], 1.0)?)
        } else {
            None
        };
        let affine = if cfg.norm == Norm::AdaIn {
            Some(StyleAffine::new(store, &format!("g.mod.{name}.style"), cfg.mapping.width, c, rng)?)
        } else {
            None
        };
        Ok(Site { noise, affine })
    }

    /// noise, then normalization, then LeakyReLU.
    fn apply<T: Element>(&self, g: &mut Graph<T>, p: &Bound, site: &Site, f: Var, w: Option<Var>, pass: &mut Pass) -> Result<Var> {
        let mut h = f;
        if let Some(n) = site.noise {
            h = style::inject_noise(g, h, p.var(n), pass.mode, pass.sigma_z, &mut *pass.rng)?;
        }
        h = match (self.norm, site.affine, w) {
            (Norm::None, ..) => h,
            (Norm::Instance, ..) => g.instance_norm(h, T::lit(EPS_SIGMA))?,
            (Norm::AdaIn, Some(aff), Some(w)) => {
                let (gamma, beta) = aff.factors(g, p, w)?;
                style::adain(g, h, gamma, beta)?
            }
            (Norm::AdaIn, ..) => return Err(Error::Config("AdaIN site without style input".into())),
        };
        Ok(g.leaky_relu(h, T::lit(LEAKY_SLOPE)))
    }
}

/// Three-level Unet shared by the synthesis backbone and the segmenter.
#[derive(Debug, Clone)]
struct Unet {
    enc: [Conv; 3],
    dec: [Conv; 2],
    head: Conv,
    head_sees_input: bool,
    sites: Option<[Site; 5]>,
}

impl Unet {
    fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        ch: [usize; 3],
        outputs: usize,
        head_sees_input: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let enc = [
            Conv::new(store, &format!("{prefix}.enc0"), 1, ch[0], SAME3, rng)?,
            Conv::new(store, &format!("{prefix}.enc1"), ch[0], ch[1], SAME3, rng)?,
            Conv::new(store, &format!("{prefix}.enc2"), ch[1], ch[2], SAME3, rng)?,
        ];
        let dec = [
            Conv::new(store, &format!("{prefix}.dec1"), ch[2] + ch[1], ch[1], SAME3, rng)?,
            Conv::new(store, &format!("{prefix}.dec0"), ch[1] + ch[0], ch[0], SAME3, rng)?,
        ];
        let head_in = ch[0] + usize::from(head_sees_input);
        let head = Conv::new(store, &format!("{prefix}.head"), head_in, outputs, POINT, rng)?;
        if head_sees_input {
            head.init_passthrough(store, ch[0]);
        }
        Ok(Self {
            enc,
            dec,
            head,
            head_sees_input,
            sites: None,
        })
    }

    fn site_channels(&self, ch: [usize; 3]) -> [(&'static str, usize); 5] {
        [("enc0", ch[0]), ("enc1", ch[1]), ("enc2", ch[2]), ("dec1", ch[1]), ("dec0", ch[0])]
    }

    fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        mut modulate: impl FnMut(&mut Graph<T>, usize, Var) -> Result<Var>,
    ) -> Result<Var> {
        let e0 = self.enc[0].apply(g, p, x)?;
        let e0 = modulate(g, 0, e0)?;
        let d = g.maxpool3d(e0)?;
        let e1 = self.enc[1].apply(g, p, d)?;
        let e1 = modulate(g, 1, e1)?;
        let d = g.maxpool3d(e1)?;
        let e2 = self.enc[2].apply(g, p, d)?;
        let e2 = modulate(g, 2, e2)?;
        let u = g.upsample_nearest2(e2)?;
        let c = g.concat(&[u, e1])?;
        let d1 = self.dec[0].apply(g, p, c)?;
        let d1 = modulate(g, 3, d1)?;
        let u = g.upsample_nearest2(d1)?;
        let c = g.concat(&[u, e0])?;
        let d0 = self.dec[1].apply(g, p, c)?;
        let d0 = modulate(g, 4, d0)?;
        let h = if self.head_sees_input { g.concat(&[d0, x])? } else { d0 };
        self.head.apply(g, p, h)
    }
}

#[derive(Debug, Clone)]
enum Synthesis {
    Dcitn {
        stem: Conv,
        dense: Vec<Conv>,
        proj: Conv,
        sites: Vec<Site>,
    },
    Unet(Unet),
}

/// Style-based generator; the plain and instance-norm variants are the
/// ablations with the style path removed.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamStore,
    mapping: Option<MappingNetwork>,
    synthesis: Synthesis,
}

/// Prefix of backbone convolution parameters.
pub const BACKBONE_PREFIX: &str = "g.backbone.";

impl Generator {
    pub fn new<R: Rng>(config: GeneratorConfig, rng: &mut R) -> Result<Self> {
        if config.size == 0 || config.size % 16 != 0 {
            return Err(Error::Config(format!("volume size {} is not divisible by 16", config.size)));
        }
        let mut params = ParamStore::new();
        let mapping = if config.norm == Norm::AdaIn {
            Some(MappingNetwork::new(&mut params, "g.map", config.size, config.mapping.clone(), rng)?)
        } else {
            None
        };
        let m = Modulation { norm: config.norm };
        let synthesis = match config.backbone {
            Backbone::Dcitn => {
                let s = config.stem_channels;
                let k = config.growth;
                let stem = Conv::new(&mut params, "g.backbone.stem", 1, s, SAME3, rng)?;
                let mut sites = vec![m.site(&config, &mut params, "stem", s, rng)?];
                let mut dense = Vec::new();
                for j in 0..config.dense_layers {
                    let cin = s + j * k;
                    dense.push(Conv::new(&mut params, &format!("g.backbone.dense{j}"), cin, k, SAME3, rng)?);
                    sites.push(m.site(&config, &mut params, &format!("dense{j}"), k, rng)?);
                }
                let cat = 1 + s + config.dense_layers * k;
                let proj = Conv::new(&mut params, "g.backbone.proj", cat, 1, SAME3, rng)?;
                proj.init_passthrough(&mut params, 0);
                Synthesis::Dcitn { stem, dense, proj, sites }
            }
            Backbone::Unet => {
                let ch = config.unet_channels;
                let mut u = Unet::new(&mut params, "g.backbone", ch, 1, true, rng)?;
                let mut sites = Vec::new();
                for (name, c) in u.site_channels(ch) {
                    sites.push(m.site(&config, &mut params, name, c, rng)?);
                }
                u.sites = Some(sites.try_into().expect("five unet sites"));
                Synthesis::Unet(u)
            }
        };
        Ok(Self {
            config,
            params,
            mapping,
            synthesis,
        })
    }

    /// Trainable scalars in the backbone convolutions.
    pub fn backbone_count(&self) -> usize {
        self.params.count_prefix(BACKBONE_PREFIX)
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, x: Var, pass: &mut Pass) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let s = self.config.size;
        if shape.len() != 5 || shape[1] != 1 || shape[2..] != [s, s, s] {
            return Err(Error::Config(format!("generator built for [N, 1, {s}, {s}, {s}], got {shape:?}")));
        }
        let w = match &self.mapping {
            Some(m) => Some(m.forward(g, p, x)?),
            None => None,
        };
        let m = Modulation { norm: self.config.norm };
        match &self.synthesis {
            Synthesis::Dcitn { stem, dense, proj, sites } => {
                let h = stem.apply(g, p, x)?;
                let h = m.apply(g, p, &sites[0], h, w, pass)?;
                let mut feats = vec![h];
                for (conv, site) in dense.iter().zip(&sites[1..]) {
                    let inp = if feats.len() == 1 { feats[0] } else { g.concat(&feats)? };
                    let h = conv.apply(g, p, inp)?;
                    feats.push(m.apply(g, p, site, h, w, pass)?);
                }
                let mut all = vec![x];
                all.extend(feats);
                let cat = g.concat(&all)?;
                proj.apply(g, p, cat)
            }
            Synthesis::Unet(u) => {
                let sites = u.sites.expect("generator unet carries sites");
                u.forward(g, p, x, |g, i, f| m.apply(g, p, &sites[i], f, w, pass))
            }
        }
    }

    /// Test-mode translation of a batch `[N, 1, D, D, D]`.
    pub fn translate(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut pass = Pass {
            mode: Mode::Test,
            sigma_z: 0.0,
            rng: &mut rng,
        };
        let y = self.forward(&mut g, &p, xv, &mut pass)?;
        Ok(g.value(y).clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticConfig {
    pub channels: [usize; 4],
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            channels: [32, 64, 128, 256],
        }
    }
}

/// Sigmoid-free patch critic scoring the candidate volume alone.
#[derive(Debug, Clone)]
pub struct Critic {
    pub params: ParamStore,
    stages: Vec<Conv>,
    out: Conv,
}

impl Critic {
    pub fn new<R: Rng>(config: &CriticConfig, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut stages = Vec::new();
        let mut cin = 1;
        for (i, &c) in config.channels.iter().enumerate() {
            stages.push(Conv::new(&mut params, &format!("d.stage{i}"), cin, c, ConvSpec::new(4, 2, 1), rng)?);
            cin = c;
        }
        let out = Conv::new(&mut params, "d.out", cin, 1, SAME3, rng)?;
        Ok(Self { params, stages, out })
    }

    /// Patch map before averaging, `[N, 1, d, d, d]`.
    pub fn patch_map<T: Element>(&self, g: &mut Graph<T>, p: &Bound, v: Var) -> Result<Var> {
        let mut h = v;
        for s in &self.stages {
            h = s.apply(g, p, h)?;
            h = g.leaky_relu(h, T::lit(LEAKY_SLOPE));
        }
        self.out.apply(g, p, h)
    }

    /// One unbounded score per instance, `[N]`.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, v: Var) -> Result<Var> {
        let map = self.patch_map(g, p, v)?;
        let m = g.spatial_mean(map)?;
        let n = g.shape(m)[0];
        g.reshape(m, &[n])
    }

    /// Projects every parameter into `[-c, c]`.
    pub fn clip(&mut self, c: f32) {
        for (_, t) in self.params.iter_mut() {
            for v in t.data_mut() {
                *v = v.clamp(-c, c);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegNetConfig {
    pub rois: usize,
    pub channels: [usize; 3],
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            rois: 4,
            channels: [16, 32, 64],
        }
    }
}

/// Unet producing one independent sigmoid probability channel per ROI.
#[derive(Debug, Clone)]
pub struct SegNet {
    pub config: SegNetConfig,
    pub params: ParamStore,
    unet: Unet,
}

impl SegNet {
    pub fn new<R: Rng>(config: SegNetConfig, prefix: &str, rng: &mut R) -> Result<Self> {
        if config.rois == 0 {
            return Err(Error::Config("segmentation needs at least one ROI".into()));
        }
        let mut params = ParamStore::new();
        let unet = Unet::new(&mut params, prefix, config.channels, config.rois, false, rng)?;
        Ok(Self { config, params, unet })
    }

    pub fn logits<T: Element>(&self, g: &mut Graph<T>, p: &Bound, v: Var) -> Result<Var> {
        let shape = g.shape(v);
        if shape.len() != 5 || shape[2..].iter().any(|d| d % 4 != 0) {
            return Err(Error::shape("segnet", format!("needs [N, 1, D, H, W] with extents divisible by 4, got {shape:?}")));
        }
        let slope = T::lit(LEAKY_SLOPE);
        self.unet.forward(g, p, v, |g, _, f| Ok(g.leaky_relu(f, slope)))
    }

    /// Probabilities `[N, R, D, H, W]`.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, v: Var) -> Result<Var> {
        let l = self.logits(g, p, v)?;
        Ok(g.sigmoid(l))
    }

    pub fn predict(&self, v: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(v.clone());
        let s = self.forward(&mut g, &p, x)?;
        Ok(g.value(s).clone())
    }
}

#[cfg(test)]
mod tests;
