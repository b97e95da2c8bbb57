//! Alternating GAN / segmentation training with RMSProp and weight clipping.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::io::{Checkpoint, Config, OptimizerGroup, ScheduleState};
use crate::losses::{self, LossWeights};
use crate::metrics;
use crate::networks::{Critic, CriticConfig, Generator, GeneratorConfig, Pass, SegNet, SegNetConfig};
use crate::optim::{clip_weights, RmsProp, RmsPropConfig};
use crate::phantom::Triplet;
use crate::style::{MappingConfig, Mode};
use crate::tensor::Tensor;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseKind {
    Gan,
    Seg,
}

impl fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhaseKind::Gan => "gan",
            PhaseKind::Seg => "seg",
        })
    }
}

/// Ordered phase budgets, alternating GAN and S starting with GAN.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub phases: Vec<(PhaseKind, u32)>,
}

impl Schedule {
    pub fn alternating(budgets: &[u32]) -> Self {
        let phases = budgets
            .iter()
            .enumerate()
            .map(|(i, &e)| (if i % 2 == 0 { PhaseKind::Gan } else { PhaseKind::Seg }, e))
            .collect();
        Self { phases }
    }

    /// Scaled budgets from `config`; S phases get zero epochs without
    /// segmentation guidance.
    pub fn from_config(config: &Config) -> Self {
        let mut s = Self::alternating(&config.scaled_phases());
        if !config.model.sg {
            for p in &mut s.phases {
                if p.0 == PhaseKind::Seg {
                    p.1 = 0;
                }
            }
        }
        s
    }

    /// Cumulative epoch count at the end of each phase.
    pub fn boundaries(&self) -> Vec<u32> {
        self.phases
            .iter()
            .scan(0, |acc, &(_, e)| {
                *acc += e;
                Some(*acc)
            })
            .collect()
    }

    pub fn total(&self) -> u32 {
        self.phases.iter().map(|p| p.1).sum()
    }

    /// Epochs completed before `phase` began.
    pub fn start_of(&self, phase: usize) -> u32 {
        self.phases[..phase.min(self.phases.len())].iter().map(|p| p.1).sum()
    }
}

/// One epoch's summary.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// Global 1-based epoch.
    pub epoch: u32,
    pub phase: usize,
    pub kind: PhaseKind,
    pub loss_adv: Option<f64>,
    pub loss_content: Option<f64>,
    pub loss_seg: f64,
    pub loss_critic: Option<f64>,
    pub psnr_val: Option<f64>,
    pub clip_events: usize,
    /// Largest `|p|` over critic parameters seen right after any update.
    pub critic_max_abs: f32,
}

impl EpochStats {
    /// `epoch phase loss_adv loss_content loss_seg psnr_val`.
    pub fn log_line(&self) -> String {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
        format!(
            "{} {}{} {} {} {:.6} {}",
            self.epoch,
            self.kind,
            self.phase + 1,
            f(self.loss_adv),
            f(self.loss_content),
            self.loss_seg,
            f(self.psnr_val)
        )
    }
}

pub const LOG_HEADER: &str = "epoch phase loss_adv loss_content loss_seg psnr_val";

/// Triplets in network units, one `[1, C, D, D, D]` tensor each.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub x: Vec<Tensor<f32>>,
    pub y: Vec<Tensor<f32>>,
    pub s: Vec<Tensor<f32>>,
    pub y_counts: Vec<Volume>,
    pub scale: f32,
}

impl TrainData {
    pub fn new(triplets: &[Triplet], rois: usize, scale: f64) -> Result<Self> {
        let k = 1.0 / scale as f32;
        let mut d = Self {
            x: Vec::new(),
            y: Vec::new(),
            s: Vec::new(),
            y_counts: Vec::new(),
            scale: scale as f32,
        };
        for t in triplets {
            if t.s.channels < rois {
                return Err(Error::Data(format!("case {} has {} mask channels, need {rois}", t.case, t.s.channels)));
            }
            d.x.push(t.x.map(|v| v * k).to_tensor());
            d.y.push(t.y.map(|v| v * k).to_tensor());
            let v = t.s.voxels();
            let [z, yy, x] = t.s.dims;
            let s: Vec<f32> = t.s.data[..rois * v].iter().map(|&b| b as f32).collect();
            d.s.push(Tensor::from_vec(&[1, rois, z, yy, x], s)?);
            d.y_counts.push(t.y.clone());
        }
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Concatenates single-instance tensors along the batch axis.
pub fn stack(items: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = items.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let mut shape = first.shape().to_vec();
    shape[0] = items.iter().map(|t| t.shape()[0]).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for t in items {
        if t.shape()[1..] != first.shape()[1..] {
            return Err(Error::shape("stack", "instances differ in shape"));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(&shape, data)
}

fn epoch_rng(seed: u64, phase: usize, epoch: u32) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((phase as u64 + 1) << 32) | epoch as u64);
    r
}

fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(u64::MAX - stream);
    r
}

pub fn generator_config(cfg: &Config) -> GeneratorConfig {
    let m = &cfg.model;
    GeneratorConfig {
        size: cfg.phantom.size,
        backbone: m.backbone,
        norm: m.norm,
        noise: m.noise,
        stem_channels: m.stem_channels,
        growth: m.growth,
        dense_layers: m.dense_layers,
        unet_channels: m.unet_channels,
        mapping: MappingConfig {
            channels: m.mapping_channels,
            width: m.style_width,
        },
    }
}

pub fn segnet_config(cfg: &Config) -> SegNetConfig {
    SegNetConfig {
        rois: cfg.model.rois,
        channels: cfg.model.seg_channels,
    }
}

pub fn rmsprop_config(cfg: &Config, alpha: f64) -> RmsPropConfig {
    RmsPropConfig {
        alpha: alpha as f32,
        rho: cfg.optim.rho as f32,
        floor: cfg.optim.floor as f32,
    }
}

/// One S update on `(input, s)` batches; returns the loss.
pub fn seg_step(seg: &mut SegNet, opt: &mut RmsProp, input: &Tensor<f32>, s: &Tensor<f32>) -> Result<f64> {
    let mut g = Graph::<f32>::new();
    let p = seg.params.bind(&mut g, true);
    let x = g.constant(input.clone());
    let t = g.constant(s.clone());
    let logits = seg.logits(&mut g, &p, x)?;
    let loss = losses::seg_loss_logits(&mut g, logits, t)?;
    g.backward(loss)?;
    let grads = p.grads(&g);
    opt.step(&mut seg.params, &grads)?;
    Ok(g.scalar(loss) as f64)
}

/// Generator, critic and segmenter with their optimizers and schedule position.
pub struct Trainer {
    pub config: Config,
    pub generator: Generator,
    pub critic: Critic,
    pub segnet: SegNet,
    pub opt_g: RmsProp,
    pub opt_d: RmsProp,
    pub opt_s: RmsProp,
    pub state: ScheduleState,
    pub schedule: Schedule,
    train: TrainData,
    val: Option<TrainData>,
    seg_inputs: Option<Vec<Tensor<f32>>>,
    last_psnr: Option<f64>,
}

impl Trainer {
    pub fn new(config: Config, train: &[Triplet], val: &[Triplet]) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let generator = Generator::new(generator_config(&config), &mut init_rng(seed, 0))?;
        let critic = Critic::new(
            &CriticConfig {
                channels: config.model.critic_channels,
            },
            &mut init_rng(seed, 1),
        )?;
        let segnet = SegNet::new(segnet_config(&config), "s", &mut init_rng(seed, 2))?;
        let rms = rmsprop_config(&config, config.optim.alpha);
        let opt_g = RmsProp::new(rms, &generator.params);
        let opt_d = RmsProp::new(rms, &critic.params);
        let opt_s = RmsProp::new(rms, &segnet.params);
        let mut critic = critic;
        clip_weights(&mut critic.params, config.loss.clip_c as f32);
        let scale = config.model.intensity_scale;
        let rois = config.model.rois;
        let train = TrainData::new(train, rois, scale)?;
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let val = if val.is_empty() { None } else { Some(TrainData::new(val, rois, scale)?) };
        Ok(Self {
            schedule: Schedule::from_config(&config),
            state: ScheduleState {
                phase: 0,
                epoch: 0,
                seed,
            },
            config,
            generator,
            critic,
            segnet,
            opt_g,
            opt_d,
            opt_s,
            train,
            val,
            seg_inputs: None,
            last_psnr: None,
        })
    }

    /// Restores networks, optimizers and position from `ckpt`. `config`
    /// may differ from the saved one only in options that leave the
    /// parameter tables unchanged.
    pub fn resume(ckpt: &Checkpoint, config: Config, train: &[Triplet], val: &[Triplet]) -> Result<Self> {
        let mut t = Self::new(config, train, val)?;
        ckpt.restore_store(&mut t.generator.params)?;
        ckpt.restore_store(&mut t.critic.params)?;
        ckpt.restore_store(&mut t.segnet.params)?;
        for (name, opt, store) in [
            ("g", &mut t.opt_g, &t.generator.params),
            ("d", &mut t.opt_d, &t.critic.params),
            ("s", &mut t.opt_s, &t.segnet.params),
        ] {
            let group = ckpt
                .optimizer(name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks optimizer `{name}`")))?;
            let restored = group.to_rmsprop();
            let fits = restored.state.len() == store.len()
                && restored.state.iter().zip(store.iter()).all(|(s, (_, p))| s.len() == p.numel());
            if !fits {
                return Err(Error::Data(format!("optimizer `{name}` does not match the parameters")));
            }
            opt.state = restored.state;
        }
        t.state = ckpt.schedule;
        t.state.seed = t.config.seed;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        c.push_store(&self.generator.params);
        c.push_store(&self.critic.params);
        c.push_store(&self.segnet.params);
        c.optimizers = vec![
            OptimizerGroup::from_rmsprop("g", &self.opt_g),
            OptimizerGroup::from_rmsprop("d", &self.opt_d),
            OptimizerGroup::from_rmsprop("s", &self.opt_s),
        ];
        c.schedule = self.state;
        c.config = self.config.to_toml();
        c
    }

    pub fn done(&mut self) -> bool {
        self.next_epoch().is_none()
    }

    fn advance_past_empty(&mut self) {
        while let Some(&(_, budget)) = self.schedule.phases.get(self.state.phase as usize) {
            if self.state.epoch < budget {
                break;
            }
            self.state.phase += 1;
            self.state.epoch = 0;
            self.seg_inputs = None;
        }
    }

    /// Position of the next epoch as `(phase, global epoch)`, if any.
    pub fn next_epoch(&mut self) -> Option<(usize, u32)> {
        self.advance_past_empty();
        let phase = self.state.phase as usize;
        (phase < self.schedule.phases.len()).then(|| (phase, self.schedule.start_of(phase) + self.state.epoch + 1))
    }

    fn seg_guided(&self, phase: usize) -> bool {
        self.config.model.sg
            && self.config.loss.lambda2 > 0.0
            && self.schedule.phases[..phase].iter().any(|&(k, e)| k == PhaseKind::Seg && e > 0)
    }

    fn weights(&self, phase: usize) -> LossWeights {
        LossWeights {
            lambda1: self.config.loss.lambda1,
            lambda2: if self.seg_guided(phase) { self.config.loss.lambda2 } else { 0.0 },
            clip_c: self.config.loss.clip_c,
        }
    }

    fn batches(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.train.len()).collect();
        idx.shuffle(rng);
        idx.chunks(self.config.train.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Runs the next epoch of the schedule.
    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let (phase, epoch) = self
            .next_epoch()
            .ok_or_else(|| Error::Config("schedule already complete".into()))?;
        let kind = self.schedule.phases[phase].0;
        let mut rng = epoch_rng(self.state.seed, phase, self.state.epoch);
        let stats = match kind {
            PhaseKind::Gan => self.gan_epoch(phase, epoch, &mut rng)?,
            PhaseKind::Seg => self.seg_epoch(phase, epoch, &mut rng)?,
        };
        self.state.epoch += 1;
        self.advance_past_empty();
        Ok(stats)
    }

    fn gan_epoch(&mut self, phase: usize, epoch: u32, rng: &mut ChaCha8Rng) -> Result<EpochStats> {
        let w = self.weights(phase);
        let c = w.clip_c as f32;
        let sigma_z = self.config.train.sigma_z;
        let mut sums = [0.0f64; 4];
        let mut clip_events = 0;
        let mut critic_max = 0.0f32;
        let batches = self.batches(rng);
        for b in &batches {
            let x = stack(&b.iter().map(|&i| &self.train.x[i]).collect::<Vec<_>>())?;
            let y = stack(&b.iter().map(|&i| &self.train.y[i]).collect::<Vec<_>>())?;

            let mut g = Graph::<f32>::new();
            let pg = self.generator.params.bind(&mut g, true);
            let xv = g.constant(x);
            let mut pass = Pass {
                mode: Mode::Train,
                sigma_z,
                rng: &mut *rng,
            };
            let yhat = self.generator.forward(&mut g, &pg, xv, &mut pass)?;

            let mut loss_d = 0.0;
            for _ in 0..self.config.train.n_critic {
                let mut gd = Graph::<f32>::new();
                let pd = self.critic.params.bind(&mut gd, true);
                let real = gd.constant(y.clone());
                let fake = gd.constant(g.value(yhat).clone());
                let sr = self.critic.forward(&mut gd, &pd, real)?;
                let sf = self.critic.forward(&mut gd, &pd, fake)?;
                let l = losses::adv_loss_critic(&mut gd, sr, sf);
                gd.backward(l)?;
                loss_d = gd.scalar(l) as f64;
                self.opt_d.step(&mut self.critic.params, &pd.grads(&gd))?;
                clip_weights(&mut self.critic.params, c);
                clip_events += 1;
                for (_, t) in self.critic.params.iter() {
                    critic_max = critic_max.max(t.max_abs());
                }
            }

            let pd = self.critic.params.bind(&mut g, false);
            let scores = self.critic.forward(&mut g, &pd, yhat)?;
            let adv = losses::adv_loss_generator(&mut g, scores);
            let yv = g.constant(y);
            let content = losses::content_l1(&mut g, yhat, yv)?;
            let seg = if w.lambda2 > 0.0 {
                let s = stack(&b.iter().map(|&i| &self.train.s[i]).collect::<Vec<_>>())?;
                let ps = self.segnet.params.bind(&mut g, false);
                let logits = self.segnet.logits(&mut g, &ps, yhat)?;
                let sv = g.constant(s);
                Some(losses::seg_loss_logits(&mut g, logits, sv)?)
            } else {
                None
            };
            let total = losses::total_generator_loss(&mut g, adv, content, seg, &w)?;
            g.backward(total)?;
            self.opt_g.step(&mut self.generator.params, &pg.grads(&g))?;

            sums[0] += g.scalar(adv) as f64;
            sums[1] += g.scalar(content) as f64;
            sums[2] += seg.map_or(0.0, |s| g.scalar(s) as f64);
            sums[3] += loss_d;
        }
        let n = batches.len() as f64;
        self.last_psnr = self.validation_psnr()?;
        Ok(EpochStats {
            epoch,
            phase,
            kind: PhaseKind::Gan,
            loss_adv: Some(sums[0] / n),
            loss_content: Some(sums[1] / n),
            loss_seg: sums[2] / n,
            loss_critic: Some(sums[3] / n),
            psnr_val: self.last_psnr,
            clip_events,
            critic_max_abs: critic_max,
        })
    }

    /// Frozen test-mode generator outputs for every training case.
    fn ensure_seg_inputs(&mut self) -> Result<()> {
        if self.seg_inputs.is_none() {
            let v = self
                .train
                .x
                .iter()
                .map(|x| self.generator.translate(x))
                .collect::<Result<Vec<_>>>()?;
            self.seg_inputs = Some(v);
        }
        Ok(())
    }

    fn seg_epoch(&mut self, phase: usize, epoch: u32, rng: &mut ChaCha8Rng) -> Result<EpochStats> {
        self.ensure_seg_inputs()?;
        let inputs = self.seg_inputs.as_ref().expect("cached");
        let batches = self.batches(rng);
        let mut sum = 0.0;
        for b in &batches {
            let x = stack(&b.iter().map(|&i| &inputs[i]).collect::<Vec<_>>())?;
            let s = stack(&b.iter().map(|&i| &self.train.s[i]).collect::<Vec<_>>())?;
            sum += seg_step(&mut self.segnet, &mut self.opt_s, &x, &s)?;
        }
        if self.last_psnr.is_none() {
            self.last_psnr = self.validation_psnr()?;
        }
        Ok(EpochStats {
            epoch,
            phase,
            kind: PhaseKind::Seg,
            loss_adv: None,
            loss_content: None,
            loss_seg: sum / batches.len() as f64,
            loss_critic: None,
            psnr_val: self.last_psnr,
            clip_events: 0,
            critic_max_abs: 0.0,
        })
    }

    /// Translates `x` (counts) to counts.
    pub fn translate_counts(&self, x: &Volume) -> Result<Volume> {
        translate_counts(&self.generator, x, self.config.model.intensity_scale)
    }

    fn validation_psnr(&self) -> Result<Option<f64>> {
        let Some(val) = &self.val else {
            return Ok(None);
        };
        let mut sum = 0.0;
        for (x, y) in val.x.iter().zip(&val.y_counts) {
            let yhat = self.generator.translate(x)?;
            let yhat = Volume::from_tensor(&yhat, 0)?.map(|v| v * val.scale);
            sum += metrics::psnr(&yhat, y, None)?;
        }
        Ok(Some(sum / val.len() as f64))
    }

    /// Runs every remaining epoch. Writes `phaseN.sgck` into `ckpt_dir` at
    /// each phase boundary and one log line per epoch.
    pub fn run_schedule(
        &mut self,
        ckpt_dir: Option<&Path>,
        mut log: Option<&mut dyn Write>,
        mut on_epoch: impl FnMut(&EpochStats),
    ) -> Result<Vec<EpochStats>> {
        if let Some(d) = ckpt_dir {
            fs::create_dir_all(d)?;
        }
        let mut all = Vec::new();
        while self.next_epoch().is_some() {
            let before = self.state.phase;
            let stats = self.run_epoch()?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", stats.log_line())?;
                w.flush()?;
            }
            on_epoch(&stats);
            all.push(stats);
            if self.state.phase != before {
                if let Some(d) = ckpt_dir {
                    let ck = self.checkpoint();
                    ck.save(d.join(format!("phase{}.sgck", before + 1)))?;
                    ck.save(d.join("latest.sgck"))?;
                }
                log::info!(
                    "phase {} complete at epoch {}",
                    before + 1,
                    self.schedule.boundaries()[before as usize]
                );
            }
        }
        Ok(all)
    }
}

/// Configuration and generator stored in a checkpoint.
pub fn generator_from_checkpoint(ckpt: &Checkpoint) -> Result<(Config, Generator)> {
    let config = Config::parse(&ckpt.config, Path::new("<checkpoint>"))?;
    let mut generator = Generator::new(generator_config(&config), &mut init_rng(config.seed, 0))?;
    ckpt.restore_store(&mut generator.params)?;
    Ok((config, generator))
}

/// Test-mode translation of a count-space volume.
pub fn translate_counts(generator: &Generator, x: &Volume, scale: f64) -> Result<Volume> {
    let k = scale as f32;
    let t = x.map(|v| v / k).to_tensor();
    let y = generator.translate(&t)?;
    Ok(Volume::from_tensor(&y, 0)?.map(|v| v * k))
}

#[cfg(test)]
mod tests;
