//! Composite BCE-Dice-Lovász segmentation loss with analytic gradients.
//!
//! All losses take raw logits `s_i` over the pixels of a single instance mask.
//! BCE and Dice see probabilities `σ(s_i)`; the Lovász hinge uses the logits
//! directly as margin scores. The composite is
//!
//! ```text
//! L = w_bce·BCE + w_dice·w_c·Dice + w_lovasz·w_c·Lovász
//! ```
//!
//! with `w_c` the normalized inverse-frequency weight of the instance class.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dataset::ClassId;
use crate::geometry::{resize_bilinear, BinaryMask, SoftMask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0} logits for a {1}x{2} target")]
    ShapeMismatch(usize, usize, usize),
    #[error("no class weight for class {0}")]
    UnknownClass(usize),
    #[error("empty input")]
    Empty,
}

pub type Result<T> = std::result::Result<T, LossError>;

/// A loss value together with its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Graded {
    pub value: f64,
    pub gradient: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossInput {
    pub width: usize,
    pub height: usize,
    /// Row-major, unbounded.
    pub logits: Vec<f64>,
    pub target: BinaryMask,
    pub class_id: usize,
}

impl LossInput {
    pub fn new(logits: Vec<f64>, target: BinaryMask, class_id: usize) -> Result<Self> {
        check_shape(&logits, &target)?;
        Ok(Self {
            width: target.width(),
            height: target.height(),
            logits,
            target,
            class_id,
        })
    }

    /// Build an input whose target comes at a different resolution than the
    /// prediction: the target is resampled bilinearly to the logit grid and
    /// re-binarized at 0.5.
    pub fn with_resampled_target(
        logits: Vec<f64>,
        width: usize,
        height: usize,
        target: &BinaryMask,
        class_id: usize,
    ) -> Result<Self> {
        let soft = resize_bilinear(&SoftMask::from_binary(target), width, height)
            .map_err(|_| LossError::ShapeMismatch(logits.len(), width, height))?;
        Self::new(logits, soft.threshold(0.5), class_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    pub lovasz: f64,
    /// Raw inverse-frequency weights; normalized to sum to one when used.
    pub class_weights: BTreeMap<usize, f64>,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            bce: 0.25,
            dice: 0.50,
            lovasz: 0.25,
            class_weights: BTreeMap::from([
                (ClassId::Brain.index(), 0.1),
                (ClassId::Csp.index(), 0.9),
                (ClassId::Lv.index(), 0.7),
            ]),
            epsilon: 1.0,
        }
    }
}

impl LossWeights {
    pub fn normalized_class_weights(&self) -> BTreeMap<usize, f64> {
        let sum: f64 = self.class_weights.values().sum();
        self.class_weights
            .iter()
            .map(|(&c, &w)| (c, if sum > 0.0 { w / sum } else { 0.0 }))
            .collect()
    }

    pub fn class_weight(&self, class_id: usize) -> Result<f64> {
        self.normalized_class_weights()
            .get(&class_id)
            .copied()
            .ok_or(LossError::UnknownClass(class_id))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
    pub lovasz: f64,
    /// Normalized weight applied to the Dice and Lovász terms.
    pub class_weight: f64,
    pub gradient: Vec<f64>,
}

fn check_shape(logits: &[f64], target: &BinaryMask) -> Result<()> {
    if logits.len() != target.width() * target.height() {
        return Err(LossError::ShapeMismatch(
            logits.len(),
            target.width(),
            target.height(),
        ));
    }
    if logits.is_empty() {
        return Err(LossError::Empty);
    }
    Ok(())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn label(target: &BinaryMask, i: usize) -> f64 {
    if target.bits()[i] {
        1.0
    } else {
        0.0
    }
}

/// Mean binary cross-entropy of `σ(s)` against the target.
///
/// Uses `max(s,0) − s·y + ln(1 + e^{−|s|})`, which never takes the log of a
/// saturated probability.
pub fn bce(logits: &[f64], target: &BinaryMask) -> Result<Graded> {
    check_shape(logits, target)?;
    let n = logits.len() as f64;
    let mut value = 0.0;
    let mut gradient = Vec::with_capacity(logits.len());
    for (i, &s) in logits.iter().enumerate() {
        let y = label(target, i);
        value += s.max(0.0) - s * y + (-s.abs()).exp().ln_1p();
        gradient.push((sigmoid(s) - y) / n);
    }
    Ok(Graded {
        value: value / n,
        gradient,
    })
}

/// `1 − (2Σŷy + ε) / (Σŷ + Σy + ε)` with `ŷ = σ(s)`.
pub fn dice_loss(logits: &[f64], target: &BinaryMask, epsilon: f64) -> Result<Graded> {
    check_shape(logits, target)?;
    let probs: Vec<f64> = logits.iter().map(|&s| sigmoid(s)).collect();
    let (mut inter, mut pred, mut truth) = (0.0, 0.0, 0.0);
    for (i, &p) in probs.iter().enumerate() {
        let y = label(target, i);
        inter += p * y;
        pred += p;
        truth += y;
    }
    let num = 2.0 * inter + epsilon;
    let den = pred + truth + epsilon;
    let gradient = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let y = label(target, i);
            let d_prob = -(2.0 * y * den - num) / (den * den);
            d_prob * p * (1.0 - p)
        })
        .collect();
    Ok(Graded {
        value: 1.0 - num / den,
        gradient,
    })
}

/// Per-position increments of the Jaccard loss along a sorted order.
///
/// `sorted_labels[k]` is the ground truth of the pixel with the k-th largest
/// error. Entry k is `J(first k+1) − J(first k)` where `J(M) = |M| / |F ∪ M|`
/// and `F` is the foreground set.
pub fn jaccard_increments(sorted_labels: &[bool]) -> Vec<f64> {
    let positives = sorted_labels.iter().filter(|&&y| y).count() as f64;
    let mut increments = Vec::with_capacity(sorted_labels.len());
    let (mut seen_pos, mut seen_neg) = (0.0, 0.0);
    let mut previous = 0.0;
    for &y in sorted_labels {
        if y {
            seen_pos += 1.0;
        } else {
            seen_neg += 1.0;
        }
        let intersection = positives - seen_pos;
        let union = positives + seen_neg;
        let jaccard = 1.0 - intersection / union;
        increments.push(jaccard - previous);
        previous = jaccard;
    }
    increments
}

/// Pixel order by decreasing error; equal errors keep pixel order.
fn descending_order(errors: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
    order
}

/// The Lovász extension of the Jaccard loss evaluated at an arbitrary error
/// vector (no hinge applied).
pub fn lovasz_extension(errors: &[f64], target: &BinaryMask) -> Result<f64> {
    check_shape(errors, target)?;
    let order = descending_order(errors);
    let sorted: Vec<bool> = order.iter().map(|&i| target.bits()[i]).collect();
    let increments = jaccard_increments(&sorted);
    Ok(order
        .iter()
        .zip(&increments)
        .map(|(&i, &dj)| errors[i] * dj)
        .sum())
}

/// Lovász hinge with margin errors `m_i = 1 − (2y_i − 1)·s_i`.
pub fn lovasz_hinge(logits: &[f64], target: &BinaryMask) -> Result<Graded> {
    check_shape(logits, target)?;
    let signs: Vec<f64> = (0..logits.len())
        .map(|i| 2.0 * label(target, i) - 1.0)
        .collect();
    let errors: Vec<f64> = logits
        .iter()
        .zip(&signs)
        .map(|(&s, &g)| 1.0 - g * s)
        .collect();
    let order = descending_order(&errors);
    let sorted: Vec<bool> = order.iter().map(|&i| target.bits()[i]).collect();
    let increments = jaccard_increments(&sorted);

    let mut value = 0.0;
    let mut gradient = vec![0.0; logits.len()];
    for (&i, &dj) in order.iter().zip(&increments) {
        if errors[i] > 0.0 {
            value += errors[i] * dj;
            gradient[i] = -signs[i] * dj;
        }
    }
    Ok(Graded { value, gradient })
}

pub fn composite_loss(input: &LossInput, weights: &LossWeights) -> Result<LossValue> {
    let class_weight = weights.class_weight(input.class_id)?;
    let b = bce(&input.logits, &input.target)?;
    let d = dice_loss(&input.logits, &input.target, weights.epsilon)?;
    let l = lovasz_hinge(&input.logits, &input.target)?;
    let wd = weights.dice * class_weight;
    let wl = weights.lovasz * class_weight;
    let gradient = (0..input.logits.len())
        .map(|i| weights.bce * b.gradient[i] + wd * d.gradient[i] + wl * l.gradient[i])
        .collect();
    Ok(LossValue {
        total: weights.bce * b.value + wd * d.value + wl * l.value,
        bce: b.value,
        dice: d.value,
        lovasz: l.value,
        class_weight,
        gradient,
    })
}

/// Which loss a gradient check exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossOp {
    Bce,
    Dice,
    Lovasz,
    Composite,
}

impl LossOp {
    pub fn evaluate(self, input: &LossInput, weights: &LossWeights) -> Result<Graded> {
        match self {
            LossOp::Bce => bce(&input.logits, &input.target),
            LossOp::Dice => dice_loss(&input.logits, &input.target, weights.epsilon),
            LossOp::Lovasz => lovasz_hinge(&input.logits, &input.target),
            LossOp::Composite => composite_loss(input, weights).map(|v| Graded {
                value: v.total,
                gradient: v.gradient,
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossOp::Bce => "bce",
            LossOp::Dice => "dice",
            LossOp::Lovasz => "lovasz",
            LossOp::Composite => "composite",
        }
    }
}

/// Floor on the denominator of the relative error, so entries that are zero
/// on both sides compare as equal.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-7;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Max relative error between an analytic gradient and central finite
/// differences taken over every coordinate of `point`.
pub fn gradcheck_fn<F>(f: F, point: &[f64], step: f64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(point);
    let mut probe = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let plus = f(&probe).0;
        probe[i] = point[i] - step;
        let minus = f(&probe).0;
        probe[i] = point[i];
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

pub fn gradcheck(op: LossOp, input: &LossInput, weights: &LossWeights, step: f64) -> Result<f64> {
    op.evaluate(input, weights)?;
    let eval = |logits: &[f64]| {
        let probe = LossInput {
            logits: logits.to_vec(),
            ..input.clone()
        };
        let g = op.evaluate(&probe, weights).expect("shape checked above");
        (g.value, g.gradient)
    };
    Ok(gradcheck_fn(eval, &input.logits, step))
}

/// Smallest distance from any hinge error to zero or to another error.
///
/// The Lovász hinge is piecewise linear with kinks exactly there, so finite
/// differences are only meaningful when this gap exceeds the step.
pub fn hinge_kink_gap(logits: &[f64], target: &BinaryMask) -> f64 {
    let mut errors: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &s)| 1.0 - (2.0 * label(target, i) - 1.0) * s)
        .collect();
    errors.sort_by(|a, b| a.total_cmp(b));
    let mut gap = errors.iter().map(|e| e.abs()).fold(f64::INFINITY, f64::min);
    for w in errors.windows(2) {
        gap = gap.min(w[1] - w[0]);
    }
    gap
}
