use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dice;
use crate::error::{Error, Result};
use crate::io::Config;
use crate::networks::SegNet;
use crate::optim::RmsProp;
use crate::phantom::Triplet;
use crate::tensor::Tensor;
use crate::training::{rmsprop_config, seg_step, segnet_config, stack, TrainData};
use crate::volume::{Mask, Volume};

/// Segmenter trained on full-dose `(y, s)` pairs, then used frozen to score
/// generated volumes by per-ROI dice.
pub struct UnetScore {
    net: SegNet,
    trained: bool,
    scale: f32,
    threshold: f32,
    rois: usize,
}

impl UnetScore {
    pub fn new(config: &Config) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u64::MAX - 16);
        Ok(Self {
            net: SegNet::new(segnet_config(config), "h", &mut rng)?,
            trained: false,
            scale: config.model.intensity_scale as f32,
            threshold: config.eval.threshold as f32,
            rois: config.model.rois,
        })
    }

    /// Trains on `train`'s ground-truth volumes and masks; returns the
    /// per-epoch mean loss.
    pub fn train(&mut self, config: &Config, train: &[Triplet]) -> Result<Vec<f64>> {
        let data = TrainData::new(train, self.rois, config.model.intensity_scale)?;
        if data.is_empty() {
            return Err(Error::Data("harness needs training cases".into()));
        }
        let mut opt = RmsProp::new(rmsprop_config(config, config.eval.harness_alpha), &self.net.params);
        let mut idx: Vec<usize> = (0..data.len()).collect();
        let mut losses = Vec::new();
        for epoch in 0..config.eval.harness_epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream((u64::MAX - 32) ^ epoch as u64);
            idx.shuffle(&mut rng);
            let mut sum = 0.0;
            let chunks: Vec<&[usize]> = idx.chunks(config.train.batch_size).collect();
            for b in &chunks {
                let y = stack(&b.iter().map(|&i| &data.y[i]).collect::<Vec<_>>())?;
                let s = stack(&b.iter().map(|&i| &data.s[i]).collect::<Vec<_>>())?;
                sum += seg_step(&mut self.net, &mut opt, &y, &s)?;
            }
            losses.push(sum / chunks.len() as f64);
        }
        self.trained = true;
        Ok(losses)
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn net(&self) -> &SegNet {
        &self.net
    }

    /// Binary masks predicted for a count-space volume.
    pub fn segment(&self, v: &Volume) -> Result<Mask> {
        if !self.trained {
            return Err(Error::Data("Unet-score harness has not been trained".into()));
        }
        let k = 1.0 / self.scale;
        let t: Tensor<f32> = v.map(|x| x * k).to_tensor();
        let p = Volume::from_tensor(&self.net.predict(&t)?, 0)?;
        let th = self.threshold;
        Ok(Mask {
            channels: p.channels,
            dims: p.dims,
            data: p.data.iter().map(|&q| u8::from(q >= th)).collect(),
        })
    }

    /// Dice of the frozen harness's masks for `v` against `s`, per ROI.
    pub fn score(&self, v: &Volume, s: &Mask) -> Result<Vec<f64>> {
        let pred = self.segment(v)?;
        if s.channels < self.rois || s.dims != pred.dims {
            return Err(Error::shape("unet score", "reference mask does not match the harness output"));
        }
        Ok((0..self.rois).map(|r| dice(pred.channel(r), s.channel(r))).collect())
    }
}
