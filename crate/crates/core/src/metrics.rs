//! Accuracy, feature drift and indicator sparsity.

use alloc::vec::Vec;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::dataset::Samples;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::objectives::LossParts;
use crate::rng::{purpose, stream};
use crate::tensor::Tensor;

pub const DEFAULT_PROBE_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Classes of earlier sessions.
    Old,
    /// Classes introduced in the current session.
    Novel,
    All,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Old => "old",
            Split::Novel => "novel",
            Split::All => "all",
        }
    }
}

/// One evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub session: usize,
    pub epoch: usize,
    pub split: Split,
    pub acc: f64,
    /// Mean drift in radians, `[0, π]`.
    pub drift: f64,
    /// Mean indicator value per branch.
    pub sparsity: Vec<f64>,
    pub tau: Vec<f64>,
    pub loss_total: f64,
    pub loss: LossParts,
}

/// Fraction of positions where the prediction equals the label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            lhs: alloc::vec![predictions.len()],
            rhs: alloc::vec![labels.len()],
        });
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Mean of the indicator entries.
pub fn sparsity(alpha: &[f64]) -> Result<f64> {
    if alpha.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(alpha.iter().sum::<f64>() / alpha.len() as f64)
}

/// `max_i |α_i − round(α_i)|`: distance of an indicator from the nearest
/// hypercube vertex.
pub fn vertex_distance(alpha: &[f64]) -> f64 {
    alpha
        .iter()
        .map(|a| libm::fabs(a - libm::round(*a)))
        .fold(0.0, f64::max)
}

/// Angle between two vectors after unit normalization.
///
/// The cosine is clamped to `[-1, 1]`, so identical directions give exactly 0.
pub fn angle(a: &[f64], b: &[f64]) -> f64 {
    let na = libm::sqrt(a.iter().map(|v| v * v).sum());
    let nb = libm::sqrt(b.iter().map(|v| v * v).sum());
    if na == 0.0 || nb == 0.0 {
        return core::f64::consts::FRAC_PI_2;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    libm::acos((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = libm::sqrt(v.iter().map(|x| x * x).sum());
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

/// Fixed inputs and their unit-normalized session-0 features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    inputs: Tensor,
    reference: Vec<Vec<f64>>,
}

impl ProbeSet {
    /// Draws up to `size` probes from `test` and caches the model's current
    /// features for them.
    pub fn build(model: &ModelState, test: &Samples, size: usize, seed: u64) -> Result<Self> {
        let x = test.matrix().ok_or(Error::EmptyDataset)?;
        let n = x.shape()[0];
        let take = size.min(n);
        if take == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut rng = stream(seed, purpose::PROBE);
        let mut rows = sample(&mut rng, n, take).into_vec();
        rows.sort_unstable();
        let inputs = x.select_rows(&rows);
        let feats = model.features(&inputs)?;
        let reference = (0..take).map(|r| unit(feats.row(r))).collect();
        Ok(Self { inputs, reference })
    }

    pub fn len(&self) -> usize {
        self.reference.len()
    }
    pub fn is_empty(&self) -> bool {
        self.reference.is_empty()
    }
    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }
    pub fn reference(&self) -> &[Vec<f64>] {
        &self.reference
    }
}

/// Mean angle between the cached session-0 features and `model`'s current
/// features on the probe inputs.
pub fn drift(probe: Option<&ProbeSet>, model: &ModelState) -> Result<f64> {
    let probe = probe.ok_or(Error::MissingProbe)?;
    let feats = model.features(&probe.inputs)?;
    drift_against(probe, &feats)
}

/// Drift for features computed elsewhere (one row per probe).
pub fn drift_against(probe: &ProbeSet, features: &Tensor) -> Result<f64> {
    if features.outer_len() != probe.len() {
        return Err(Error::ShapeMismatch {
            op: "drift",
            lhs: features.shape().to_vec(),
            rhs: alloc::vec![probe.len()],
        });
    }
    let total: f64 = probe
        .reference
        .iter()
        .enumerate()
        .map(|(r, f0)| angle(f0, features.row(r)))
        .sum();
    Ok(total / probe.len() as f64)
}
