//! TOML run configuration.
//!
//! Every key is optional; omitted keys take the defaults listed by
//! [`Config::reference`]. Unknown keys are rejected with their line number.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::networks::{Backbone, Norm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub size: usize,
    pub count: usize,
    pub samples_per_spec: usize,
    pub test_fraction: f64,
    pub drf: u32,
    pub rescale: bool,
    pub background: f64,
    pub activity_min: f64,
    pub activity_max: f64,
    pub smoothing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub norm: Norm,
    pub noise: bool,
    pub sg: bool,
    pub stem_channels: usize,
    pub growth: usize,
    pub dense_layers: usize,
    pub unet_channels: [usize; 3],
    pub mapping_channels: [usize; 4],
    pub style_width: usize,
    pub critic_channels: [usize; 4],
    pub seg_channels: [usize; 3],
    pub rois: usize,
    pub intensity_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub clip_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub alpha: f64,
    pub rho: f64,
    pub floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phases: Vec<u32>,
    pub loops: u32,
    pub scale: u32,
    pub batch_size: usize,
    pub n_critic: u32,
    pub sigma_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub harness_epochs: u32,
    pub harness_alpha: f64,
    pub threshold: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            phantom: PhantomConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 64,
            count: 50,
            samples_per_spec: 2,
            test_fraction: 0.2,
            drf: 6,
            rescale: true,
            background: 20.0,
            activity_min: 100.0,
            activity_max: 600.0,
            smoothing: 3,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Dcitn,
            norm: Norm::AdaIn,
            noise: true,
            sg: true,
            stem_channels: 16,
            growth: 8,
            dense_layers: 4,
            unet_channels: [16, 32, 64],
            mapping_channels: [16, 32, 64, 128],
            style_width: 512,
            critic_channels: [32, 64, 128, 256],
            seg_channels: [16, 32, 64],
            rois: 4,
            intensity_scale: 500.0,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 100.0,
            lambda2: 1.0,
            clip_c: 0.01,
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            rho: 0.99,
            floor: 1e-8,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phases: vec![1200, 100, 300, 100],
            loops: 1,
            scale: 1,
            batch_size: 2,
            n_critic: 1,
            sigma_z: 0.01,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            harness_epochs: 40,
            harness_alpha: 1e-3,
            threshold: 0.5,
        }
    }
}

fn tv<T: Serialize>(v: &T) -> String {
    toml::Value::try_from(v).expect("serializable").to_string()
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl Config {
    /// Parses and validates configuration text; `path` only labels errors.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::ConfigParse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            msg: e.message().trim().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, hex.
    pub fn digest(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Phase budgets after dividing by `train.scale`, at least one epoch each.
    pub fn scaled_phases(&self) -> Vec<u32> {
        let s = self.train.scale.max(1);
        let one_loop: Vec<u32> = self.train.phases.iter().map(|&e| (e / s).max(1)).collect();
        (0..self.train.loops).flat_map(|_| one_loop.iter().copied()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed {} exceeds {}", self.seed, i64::MAX));
        }
        let p = &self.phantom;
        if p.size == 0 || p.size % 16 != 0 {
            return bad(format!("phantom.size {} is not divisible by 16", p.size));
        }
        if p.count == 0 || p.samples_per_spec == 0 {
            return bad("phantom.count and phantom.samples_per_spec must be at least 1".into());
        }
        if !(0.0..1.0).contains(&p.test_fraction) {
            return bad("phantom.test_fraction must lie in [0, 1)".into());
        }
        if p.drf == 0 {
            return bad("phantom.drf must be at least 1".into());
        }
        if !(p.background >= 0.0 && p.activity_min > p.background && p.activity_max >= p.activity_min) {
            return bad("phantom activities need 0 <= background < activity_min <= activity_max".into());
        }
        if p.smoothing == 0 || p.smoothing % 2 == 0 {
            return bad("phantom.smoothing must be an odd width".into());
        }
        let m = &self.model;
        if !(1..=4).contains(&m.rois) {
            return bad(format!("model.rois {} outside 1..=4", m.rois));
        }
        if !(m.intensity_scale > 0.0) {
            return bad("model.intensity_scale must be positive".into());
        }
        let widths = [m.stem_channels, m.growth, m.dense_layers, m.style_width];
        let lists = m.unet_channels.iter().chain(&m.mapping_channels).chain(&m.critic_channels).chain(&m.seg_channels);
        if widths.iter().chain(lists).any(|&w| w == 0) {
            return bad("model widths and depths must be positive".into());
        }
        let l = &self.loss;
        if !(l.lambda1 >= 0.0 && l.lambda2 >= 0.0 && l.clip_c > 0.0) {
            return bad("loss weights must be non-negative and clip_c positive".into());
        }
        let o = &self.optim;
        if !(o.alpha > 0.0 && (0.0..1.0).contains(&o.rho) && o.floor > 0.0) {
            return bad("optim needs alpha > 0, rho in [0, 1), floor > 0".into());
        }
        let t = &self.train;
        if t.phases.is_empty() || t.loops == 0 || t.scale == 0 || t.batch_size == 0 || t.n_critic == 0 {
            return bad("train.phases, loops, scale, batch_size and n_critic must be non-empty/positive".into());
        }
        if !(t.sigma_z > 0.0) {
            return bad("train.sigma_z must be positive".into());
        }
        let e = &self.eval;
        if e.harness_epochs == 0 || !(e.harness_alpha > 0.0) || !(0.0..1.0).contains(&e.threshold) {
            return bad("eval needs harness_epochs >= 1, harness_alpha > 0, threshold in (0, 1)".into());
        }
        Ok(())
    }

    /// Documented default configuration, itself a valid config file.
    pub fn reference() -> String {
        let d = Config::default();
        let (p, m, l, o, t, e) = (&d.phantom, &d.model, &d.loss, &d.optim, &d.train, &d.eval);
        format!(
            "# dosegan configuration reference. Every key is optional.\n\
             \n\
             # master seed for initialization, data and noise\n\
             seed = {seed}\n\
             \n\
             [phantom]\n\
             size = {size}                # grid edge D, divisible by 16\n\
             count = {count}              # number of triplets\n\
             samples_per_spec = {sps}      # low-dose draws sharing one phantom\n\
             test_fraction = {tf}        # fraction of phantoms held out\n\
             drf = {drf}                   # dose reduction factor\n\
             rescale = {rescale}            # multiply thinned counts back by drf\n\
             background = {bg}          # counts per voxel\n\
             activity_min = {amin}       # organ activity range, counts per voxel\n\
             activity_max = {amax}\n\
             smoothing = {sm}             # boxcar width after Poisson sampling\n\
             \n\
             [model]\n\
             backbone = {bb}        # \"dcitn\" or \"unet\"\n\
             norm = {norm}           # \"none\", \"instance\" or \"adain\"\n\
             noise = {noise}               # learned-scale noise injection\n\
             sg = {sg}                  # segmentation guidance\n\
             stem_channels = {stem}\n\
             growth = {growth}                # dense growth rate k\n\
             dense_layers = {dl}\n\
             unet_channels = {uc}\n\
             mapping_channels = {mc}\n\
             style_width = {sw}\n\
             critic_channels = {cc}\n\
             seg_channels = {sc}\n\
             rois = {rois}                  # ROI channels, 1 to 4\n\
             intensity_scale = {is}     # counts per network unit\n\
             \n\
             [loss]\n\
             lambda1 = {l1}             # content weight\n\
             lambda2 = {l2}               # segmentation weight\n\
             clip_c = {c}               # critic weight clip\n\
             \n\
             [optim]\n\
             alpha = {alpha}              # RMSProp learning rate\n\
             rho = {rho}\n\
             floor = {floor}\n\
             \n\
             [train]\n\
             phases = {phases}  # GAN, S, GAN, S epochs\n\
             loops = {loops}\n\
             scale = {scale}                 # divides every phase budget\n\
             batch_size = {bs}\n\
             n_critic = {nc}              # critic updates per generator update\n\
             sigma_z = {sz}            # noise std\n\
             \n\
             [eval]\n\
             harness_epochs = {he}       # Unet-score harness training epochs\n\
             harness_alpha = {ha}\n\
             threshold = {th}           # probability to mask threshold\n",
            seed = d.seed,
            size = p.size,
            count = p.count,
            sps = p.samples_per_spec,
            tf = tv(&p.test_fraction),
            drf = p.drf,
            rescale = p.rescale,
            bg = tv(&p.background),
            amin = tv(&p.activity_min),
            amax = tv(&p.activity_max),
            sm = p.smoothing,
            bb = tv(&m.backbone),
            norm = tv(&m.norm),
            noise = m.noise,
            sg = m.sg,
            stem = m.stem_channels,
            growth = m.growth,
            dl = m.dense_layers,
            uc = tv(&m.unet_channels),
            mc = tv(&m.mapping_channels),
            sw = m.style_width,
            cc = tv(&m.critic_channels),
            sc = tv(&m.seg_channels),
            rois = m.rois,
            is = tv(&m.intensity_scale),
            l1 = tv(&l.lambda1),
            l2 = tv(&l.lambda2),
            c = tv(&l.clip_c),
            alpha = tv(&o.alpha),
            rho = tv(&o.rho),
            floor = tv(&o.floor),
            phases = tv(&t.phases),
            loops = t.loops,
            scale = t.scale,
            bs = t.batch_size,
            nc = t.n_critic,
            sz = tv(&t.sigma_z),
            he = e.harness_epochs,
            ha = tv(&e.harness_alpha),
            th = tv(&e.threshold),
        )
    }
}
