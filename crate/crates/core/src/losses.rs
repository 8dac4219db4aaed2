//! Soft dice, weighted dice, bottleneck Euclidean and combined losses, each
//! with its analytic gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smoothing term added to the numerator and denominator of both dice forms.
pub const DICE_EPS: f64 = 1e-6;

fn check_same_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: lengths {a} and {b} differ")));
    }
    Ok(())
}

fn check_unit_range(what: &str, values: &[f64]) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("{what} value {v} lies outside [0, 1]")));
    }
    Ok(())
}

/// `1 - (2Σ w·p·t + ε) / (Σ w·p + Σ w·t + ε)` and its gradient with respect
/// to `p`. `w = None` means unit weights.
fn dice_core(pred: &[f64], target: &[f64], weight: Option<&[f64]>, grad: Option<&mut [f64]>) -> Result<f64> {
    check_same_len("dice prediction/target", pred.len(), target.len())?;
    check_unit_range("prediction", pred)?;
    check_unit_range("target", target)?;
    if let Some(w) = weight {
        check_same_len("dice weight map", w.len(), pred.len())?;
        check_unit_range("weight", w)?;
    }
    let wt = |i: usize| weight.map_or(1.0, |w| w[i]);
    let (mut inter, mut sum) = (0.0, 0.0);
    for i in 0..pred.len() {
        let w = wt(i);
        inter += w * pred[i] * target[i];
        sum += w * (pred[i] + target[i]);
    }
    let num = 2.0 * inter + DICE_EPS;
    let den = sum + DICE_EPS;
    if let Some(g) = grad {
        let den2 = den * den;
        for i in 0..pred.len() {
            let w = wt(i);
            g[i] = -(2.0 * w * target[i] * den - num * w) / den2;
        }
    }
    Ok(1.0 - num / den)
}

pub fn dice_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    dice_core(pred, target, None, None)
}

/// Loss and gradient with respect to `pred`.
pub fn dice_loss_grad(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut g = vec![0.0; pred.len()];
    let l = dice_core(pred, target, None, Some(&mut g))?;
    Ok((l, g))
}

pub fn weighted_dice_loss(pred: &[f64], target: &[f64], weight: &[f64]) -> Result<f64> {
    dice_core(pred, target, Some(weight), None)
}

pub fn weighted_dice_loss_grad(pred: &[f64], target: &[f64], weight: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut g = vec![0.0; pred.len()];
    let l = dice_core(pred, target, Some(weight), Some(&mut g))?;
    Ok((l, g))
}

/// Whether the bottleneck loss sums or averages the squared differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EuclideanForm {
    #[default]
    Mean,
    Sum,
}

impl EuclideanForm {
    fn scale(self, n: usize) -> f64 {
        match self {
            EuclideanForm::Mean => 1.0 / n.max(1) as f64,
            EuclideanForm::Sum => 1.0,
        }
    }
}

fn check_codes(t1: &[f64], t2: &[f64]) -> Result<()> {
    if t1.len() != t2.len() {
        return Err(Error::config(format!(
            "bottleneck codes of length {} and {} cannot be compared; the encoder and segmenter specs disagree",
            t1.len(),
            t2.len()
        )));
    }
    Ok(())
}

pub fn euclidean_loss(t1: &[f64], t2: &[f64], form: EuclideanForm) -> Result<f64> {
    check_codes(t1, t2)?;
    let s: f64 = t1.iter().zip(t2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s * form.scale(t1.len()))
}

/// Loss and gradient with respect to `t2` (the gradient with respect to
/// `t1` is its negation).
pub fn euclidean_loss_grad(t1: &[f64], t2: &[f64], form: EuclideanForm) -> Result<(f64, Vec<f64>)> {
    let l = euclidean_loss(t1, t2, form)?;
    let k = 2.0 * form.scale(t1.len());
    Ok((l, t1.iter().zip(t2).map(|(a, b)| k * (b - a)).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w1: 0.5, w2: 0.5 }
    }
}

impl LossWeights {
    pub fn new(w1: f64, w2: f64) -> Result<Self> {
        let w = LossWeights { w1, w2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| (0.0..=1.0).contains(&v);
        if !ok(self.w1) || !ok(self.w2) || (self.w1 + self.w2 - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "loss weights w1={} and w2={} must lie in [0, 1] and sum to 1",
                self.w1, self.w2
            )));
        }
        Ok(())
    }
}

pub fn total_loss(dice: f64, euclid: f64, weights: &LossWeights) -> f64 {
    weights.w1 * dice + weights.w2 * euclid
}

/// Batch-mean dice loss over `[N, 1, H, W]` maps, computed per sample, and
/// its gradient with respect to `pred`.
pub fn batch_dice(pred: &Tensor, target: &Tensor, weight: Option<&Tensor>) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() || weight.is_some_and(|w| w.shape() != pred.shape()) {
        return Err(Error::shape(format!(
            "dice over {:?} against {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.batch();
    let mut grad = Tensor::zeros(pred.shape());
    let mut total = 0.0;
    for i in 0..n {
        let g = grad.sample_mut(i);
        total += dice_core(pred.sample(i), target.sample(i), weight.map(|w| w.sample(i)), Some(g))?;
        g.iter_mut().for_each(|v| *v /= n as f64);
    }
    Ok((total / n as f64, grad))
}

/// Batch-mean Euclidean loss between per-sample codes, and its gradient with
/// respect to `t2`.
pub fn batch_euclidean(t1: &Tensor, t2: &Tensor, form: EuclideanForm) -> Result<(f64, Tensor)> {
    if t1.shape() != t2.shape() {
        return Err(Error::config(format!(
            "bottleneck codes {:?} and {:?} differ; the encoder and segmenter specs disagree",
            t1.shape(),
            t2.shape()
        )));
    }
    let n = t1.batch();
    let mut grad = Tensor::zeros(t2.shape());
    let mut total = 0.0;
    for i in 0..n {
        let (l, g) = euclidean_loss_grad(t1.sample(i), t2.sample(i), form)?;
        total += l;
        grad.sample_mut(i)
            .iter_mut()
            .zip(g)
            .for_each(|(d, v)| *d = v / n as f64);
    }
    Ok((total / n as f64, grad))
}
