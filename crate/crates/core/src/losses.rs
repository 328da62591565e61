//! Training objectives: contrastive (single- and double-margin), triplet,
//! and weighted cross-entropy, each returning its value together with the
//! exact gradient.
//!
//! Pairwise losses are functions of the scalar embedding distance d; the
//! chain rule back to the two embeddings lives here as well
//! ([`pair_distance_backward`]). Squared hinges are differentiable at the
//! kink with derivative 0, so every gradient below is exact, not a
//! subgradient choice.

use crate::error::{Error, Result};
use crate::numerics::euclidean_distance;

/// Similarity label of an image pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairLabel {
    /// Same class (y = 1).
    Similar,
    /// Different classes (y = 0).
    Dissimilar,
}

impl PairLabel {
    pub fn from_same_class(same: bool) -> Self {
        if same {
            PairLabel::Similar
        } else {
            PairLabel::Dissimilar
        }
    }

    /// y as a float: 1 for similar, 0 for dissimilar.
    pub fn indicator(self) -> f64 {
        match self {
            PairLabel::Similar => 1.0,
            PairLabel::Dissimilar => 0.0,
        }
    }
}

/// Margins of the double-margin contrastive loss: positives are penalized
/// only beyond `alpha1`, negatives only inside `alpha2`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MarginConfig {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl MarginConfig {
    /// Requires 0 <= alpha1 < alpha2 <= 2 (unit-vector distances live in
    /// [0, 2]).
    pub fn new(alpha1: f64, alpha2: f64) -> Result<Self> {
        if !(alpha1.is_finite() && alpha2.is_finite()) || alpha1 < 0.0 || alpha1 >= alpha2 || alpha2 > 2.0 {
            return Err(Error::BadMargins { alpha1, alpha2 });
        }
        Ok(Self { alpha1, alpha2 })
    }

    /// Margin preset that works well once distance distributions resemble
    /// trained models: (0.8, 1.2).
    pub fn preset() -> Self {
        Self { alpha1: 0.8, alpha2: 1.2 }
    }
}

fn check_distance(d: f64) -> Result<()> {
    if !d.is_finite() || d < 0.0 {
        return Err(Error::NegativeDistance { got: d });
    }
    Ok(())
}

/// Single-margin contrastive loss
/// `L = 1/2 [ y d^2 + (1-y) max(alpha - d, 0)^2 ]`.
///
/// Returns (loss, dL/dd).
pub fn single_margin_loss(d: f64, y: PairLabel, alpha: f64) -> Result<(f64, f64)> {
    check_distance(d)?;
    if !(alpha > 0.0) {
        return Err(Error::BadMargins { alpha1: 0.0, alpha2: alpha });
    }
    match y {
        PairLabel::Similar => Ok((0.5 * d * d, d)),
        PairLabel::Dissimilar => {
            let slack = (alpha - d).max(0.0);
            Ok((0.5 * slack * slack, -slack))
        }
    }
}

/// Double-margin contrastive loss
/// `L = 1/2 [ y max(d - alpha1, 0)^2 + (1-y) max(alpha2 - d, 0)^2 ]`.
///
/// With alpha1 = 0 this reduces exactly to the single-margin loss with
/// alpha = alpha2, in both value and gradient.
pub fn double_margin_loss(d: f64, y: PairLabel, m: &MarginConfig) -> Result<(f64, f64)> {
    check_distance(d)?;
    match y {
        PairLabel::Similar => {
            let slack = (d - m.alpha1).max(0.0);
            Ok((0.5 * slack * slack, slack))
        }
        PairLabel::Dissimilar => {
            let slack = (m.alpha2 - d).max(0.0);
            Ok((0.5 * slack * slack, -slack))
        }
    }
}

/// Triplet loss on squared distances:
/// `L = 1/2 max(d_ap^2 - d_an^2 + margin, 0)`.
///
/// Returns (loss, dL/dd_ap, dL/dd_an).
pub fn triplet_loss(d_ap: f64, d_an: f64, margin: f64) -> Result<(f64, f64, f64)> {
    check_distance(d_ap)?;
    check_distance(d_an)?;
    let slack = d_ap * d_ap - d_an * d_an + margin;
    if slack > 0.0 {
        Ok((0.5 * slack, d_ap, -d_an))
    } else {
        Ok((0.0, 0.0, 0.0))
    }
}

/// Default triplet margin: small relative to the [0, 4] range of squared
/// unit-sphere distances.
pub const TRIPLET_MARGIN_DEFAULT: f64 = 0.1;

/// Per-class loss weights, all strictly positive.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0; classes])
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Inverse-frequency class weights, normalized so a balanced dataset gets
/// all-ones: `w[k] = (sum(counts) / K) / counts[k]`.
pub fn class_weights_from_counts(counts: &[usize]) -> Result<ClassWeights> {
    if counts.is_empty() {
        return Err(Error::SingleClassDataset);
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class: k as u32 });
    }
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    Ok(ClassWeights(counts.iter().map(|&c| mean / c as f64).collect()))
}

/// Weighted cross-entropy over logits, stabilized by max-subtraction.
///
/// Returns (loss, dL/dlogits) with
/// `loss = w[target] * -log softmax(logits)[target]` and
/// `grad = w[target] * (softmax(logits) - onehot(target))`.
pub fn weighted_cross_entropy(
    logits: &[f64],
    target: usize,
    weights: &ClassWeights,
) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::BadTarget { target, classes: logits.len() });
    }
    if weights.len() != logits.len() {
        return Err(Error::DimMismatch { expected: logits.len(), got: weights.len() });
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFiniteValue { context: "logits".into() });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let log_sum_exp = sum_exp.ln() + max;
    let w = weights.get(target);
    let loss = w * (log_sum_exp - logits[target]);
    let grad = logits
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let p = (l - max).exp() / sum_exp;
            w * (p - if k == target { 1.0 } else { 0.0 })
        })
        .collect();
    Ok((loss, grad))
}

/// Chain from a pairwise-loss gradient dL/dd to the two embeddings:
/// `dL/df_p = dL/dd * (f_p - f_q) / d` and the negation for f_q.
///
/// Pairs closer than 1e-9 get zero gradients; the direction is undefined
/// there.
pub fn pair_distance_backward(
    f_p: &[f64],
    f_q: &[f64],
    dloss_dd: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = euclidean_distance(f_p, f_q)?;
    if d < 1e-9 {
        return Ok((vec![0.0; f_p.len()], vec![0.0; f_q.len()]));
    }
    let scale = dloss_dd / d;
    let g_p: Vec<f64> = f_p.iter().zip(f_q).map(|(p, q)| scale * (p - q)).collect();
    let g_q: Vec<f64> = g_p.iter().map(|g| -g).collect();
    Ok((g_p, g_q))
}
