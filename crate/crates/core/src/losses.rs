//! Adversarial, content and segmentation objectives.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Element;

pub const PROB_CLAMP: f64 = 1e-7;
pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub clip_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 100.0,
            lambda2: 1.0,
            clip_c: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("lambda1 and lambda2 must be non-negative".into()));
        }
        if !(self.clip_c > 0.0) {
            return Err(Error::Config("clip_c must be positive".into()));
        }
        Ok(())
    }
}

/// `-mean(real) + mean(fake)`, minimized by the critic.
pub fn adv_loss_critic<T: Element>(g: &mut Graph<T>, real: Var, fake: Var) -> Var {
    let r = g.mean(real);
    let f = g.mean(fake);
    let d = g.sub(f, r).expect("scalars");
    d
}

/// `-mean(fake)`, minimized by the generator.
pub fn adv_loss_generator<T: Element>(g: &mut Graph<T>, fake: Var) -> Var {
    let f = g.mean(fake);
    g.neg(f)
}

/// Mean absolute voxel difference.
pub fn content_l1<T: Element>(g: &mut Graph<T>, yhat: Var, y: Var) -> Result<Var> {
    let d = g.sub(yhat, y)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Binary cross-entropy averaged over voxels and channels.
pub fn bce_loss<T: Element>(g: &mut Graph<T>, shat: Var, s: Var) -> Result<Var> {
    let lo = T::lit(PROB_CLAMP);
    let p = g.clamp(shat, lo, T::one() - lo);
    let lp = g.ln(p);
    let q = g.neg(p);
    let q = g.add_scalar(q, T::one());
    let lq = g.ln(q);
    let ns = g.neg(s);
    let ns = g.add_scalar(ns, T::one());
    let a = g.mul(s, lp)?;
    let b = g.mul(ns, lq)?;
    let t = g.add(a, b)?;
    let m = g.mean(t);
    Ok(g.neg(m))
}

/// Binary cross-entropy of `sigmoid(logits)` computed from the logits, so
/// the gradient `sigmoid(l) - s` never vanishes.
pub fn bce_with_logits<T: Element>(g: &mut Graph<T>, logits: Var, s: Var) -> Result<Var> {
    let sp = g.softplus(logits);
    let sl = g.mul(s, logits)?;
    let t = g.sub(sp, sl)?;
    Ok(g.mean(t))
}

/// Soft Dice loss per instance and channel, averaged.
pub fn dice_loss<T: Element>(g: &mut Graph<T>, shat: Var, s: Var, eps: f64) -> Result<Var> {
    let inter = g.mul(shat, s)?;
    let inter = g.spatial_sum(inter)?;
    let num = g.scale(inter, T::lit(2.0));
    let ps = g.spatial_sum(shat)?;
    let ts = g.spatial_sum(s)?;
    let den = g.add(ps, ts)?;
    let den = g.add_scalar(den, T::lit(eps));
    let ratio = g.div(num, den)?;
    let one_minus = g.neg(ratio);
    let one_minus = g.add_scalar(one_minus, T::one());
    Ok(g.mean(one_minus))
}

/// BCE plus Dice.
pub fn seg_loss<T: Element>(g: &mut Graph<T>, shat: Var, s: Var) -> Result<Var> {
    let b = bce_loss(g, shat, s)?;
    let d = dice_loss(g, shat, s, DICE_EPS)?;
    g.add(b, d)
}

/// BCE plus Dice from segmenter logits.
pub fn seg_loss_logits<T: Element>(g: &mut Graph<T>, logits: Var, s: Var) -> Result<Var> {
    let b = bce_with_logits(g, logits, s)?;
    let p = g.sigmoid(logits);
    let d = dice_loss(g, p, s, DICE_EPS)?;
    g.add(b, d)
}

/// `adv + lambda1 * content + lambda2 * seg`; the segmentation term is
/// dropped when absent or when `lambda2` is zero.
pub fn total_generator_loss<T: Element>(
    g: &mut Graph<T>,
    adv: Var,
    content: Var,
    seg: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let c = g.scale(content, T::lit(w.lambda1));
    let mut total = g.add(adv, c)?;
    if let Some(s) = seg.filter(|_| w.lambda2 != 0.0) {
        let s = g.scale(s, T::lit(w.lambda2));
        total = g.add(total, s)?;
    }
    Ok(total)
}
