//! Losses and their mode-dependent composition.
//!
//! | mode     | objective                              |
//! |----------|----------------------------------------|
//! | baseline | `L_c + λ₁·L_d`                         |
//! | ne       | `L_c + λ₁·L_d` (with an ungated branch) |
//! | nc       | `L_c + λ₁·L_d + λ₂·(L_1 + L_2)`        |
//! | sa       | `L_c + λ₁·L_d + λ₂·L_R`                |
//!
//! The base session always trains on `L_c` alone.

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::model::IndicatorMode;
use crate::tensor::Tensor;

pub const DEFAULT_PUSH_TARGET: f64 = 10.0;
pub const DEFAULT_TEMPERATURE: f64 = 2.0;

/// Training mode of the novel sessions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Fine-tuning with distillation, no expansion.
    Baseline,
    /// Expansion without compression.
    Ne,
    /// Expansion with learnable indicator logits.
    Nc,
    /// Expansion with self-activated indicators and a learnable retention rate.
    Sa,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::Ne, Mode::Nc, Mode::Sa];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Ne => "ne",
            Mode::Nc => "nc",
            Mode::Sa => "sa",
        }
    }

    /// Indicator of the branch this mode adds, `None` when it adds no branch.
    pub fn indicator_mode(self) -> Option<IndicatorMode> {
        match self {
            Mode::Baseline => None,
            Mode::Ne => Some(IndicatorMode::None),
            Mode::Nc => Some(IndicatorMode::Learnable),
            Mode::Sa => Some(IndicatorMode::SelfActivated),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl core::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(alloc::format!("unknown mode {s:?}")))
    }
}

/// Scalar loss values; parts a mode does not use are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub classification: f64,
    pub distillation: f64,
    pub push: f64,
    pub budget: f64,
    pub retention: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossParts {
    /// Regularizer weighted by λ₂ in the total.
    pub fn regularizer(&self) -> f64 {
        self.push + self.budget + self.retention
    }

    /// Total objective of `mode` in `session`.
    pub fn total(&self, mode: Mode, session: usize) -> Result<f64> {
        let parts = [
            ("classification", self.classification),
            ("distillation", self.distillation),
            ("push", self.push),
            ("budget", self.budget),
            ("retention", self.retention),
        ];
        for (name, v) in parts {
            if !v.is_finite() {
                return Err(Error::InvalidConfig(alloc::format!("loss part {name} is not finite")));
            }
        }
        if session == 0 {
            return Ok(self.classification);
        }
        let unused = |name: &'static str| Error::InconsistentParts {
            part: name,
            mode: mode.name(),
        };
        match mode {
            Mode::Baseline | Mode::Ne => {
                if self.push != 0.0 {
                    return Err(unused("push"));
                }
                if self.budget != 0.0 {
                    return Err(unused("budget"));
                }
                if self.retention != 0.0 {
                    return Err(unused("retention"));
                }
            }
            Mode::Nc if self.retention != 0.0 => return Err(unused("retention")),
            Mode::Sa if self.push != 0.0 => return Err(unused("push")),
            Mode::Sa if self.budget != 0.0 => return Err(unused("budget")),
            _ => {}
        }
        Ok(self.classification + self.lambda1 * self.distillation + self.lambda2 * self.regularizer())
    }
}

/// Batch-mean cross-entropy `−log softmax(logits)[y]`.
pub fn cross_entropy(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let v = tape.value(logits);
    if v.rank() != 2 || v.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: v.shape().to_vec(),
            rhs: alloc::vec![labels.len()],
        });
    }
    let (rows, width) = (v.shape()[0], v.shape()[1]);
    let mut onehot = alloc::vec![0.0; rows * width];
    for (r, &y) in labels.iter().enumerate() {
        if y >= width {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: width,
            });
        }
        onehot[r * width + y] = 1.0;
    }
    let target = tape.input(Tensor::from_parts(alloc::vec![rows, width], onehot));
    let logp = tape.log_softmax(logits)?;
    let picked = tape.mul(target, logp)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / rows as f64)
}

/// Batch-mean `−Σ_k softmax(frozen/T)_k · log softmax(current/T)_k`.
///
/// `current` holds the current logits of the classes the frozen model knows.
pub fn distillation(tape: &mut Tape, current: NodeId, frozen: &Tensor, temperature: f64) -> Result<NodeId> {
    let cur = tape.value(current);
    if cur.shape() != frozen.shape() || cur.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "distillation",
            lhs: cur.shape().to_vec(),
            rhs: frozen.shape().to_vec(),
        });
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidConfig(alloc::format!(
            "distillation temperature must be positive, got {temperature}"
        )));
    }
    let rows = cur.shape()[0];
    let mut target = Vec::with_capacity(frozen.numel());
    for r in 0..rows {
        let row = frozen.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| libm::exp((v - m) / temperature)).collect();
        let z: f64 = e.iter().sum();
        target.extend(e.iter().map(|v| v / z));
    }
    let target = tape.input(Tensor::from_parts(frozen.shape().to_vec(), target));
    let soft = tape.scale(current, 1.0 / temperature)?;
    let logp = tape.log_softmax(soft)?;
    let weighted = tape.mul(target, logp)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -1.0 / rows as f64)
}

/// `Σ_i (|s_i| − N)²`, pushing indicator logits towards `±N`.
pub fn l1_push(tape: &mut Tape, s: NodeId, target: f64) -> Result<NodeId> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::InvalidConfig(alloc::format!(
            "push target must be positive, got {target}"
        )));
    }
    let a = tape.abs(s)?;
    let d = tape.add_scalar(a, -target)?;
    let sq = tape.square(d)?;
    tape.sum(sq)
}

/// `max(0, mean(α) − τ)` where `tau` is a `[1]` node.
pub fn l2_budget(tape: &mut Tape, alpha: NodeId, tau: NodeId) -> Result<NodeId> {
    let m = tape.mean(alpha)?;
    let gap = tape.sub(m, tau)?;
    tape.relu(gap)
}

/// The retention hinge with a trainable `τ`; same value as [`l2_budget`],
/// and `∂/∂τ = −1` while the hinge is active.
pub fn retention_loss(tape: &mut Tape, alpha: NodeId, tau: NodeId) -> Result<NodeId> {
    l2_budget(tape, alpha, tau)
}

/// Loss nodes of one step; unused parts are `None`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossNodes {
    pub classification: Option<NodeId>,
    pub distillation: Option<NodeId>,
    pub push: Option<NodeId>,
    pub budget: Option<NodeId>,
    pub retention: Option<NodeId>,
}

/// Builds the total objective on the tape.
pub fn total_objective(
    tape: &mut Tape,
    mode: Mode,
    session: usize,
    parts: &LossNodes,
    lambda1: f64,
    lambda2: f64,
) -> Result<NodeId> {
    let lc = parts.classification.ok_or(Error::InconsistentParts {
        part: "classification",
        mode: mode.name(),
    })?;
    if session == 0 {
        return Ok(lc);
    }
    let unused = |name| Error::InconsistentParts {
        part: name,
        mode: mode.name(),
    };
    match mode {
        Mode::Baseline | Mode::Ne if parts.push.is_some() => return Err(unused("push")),
        Mode::Baseline | Mode::Ne if parts.budget.is_some() => return Err(unused("budget")),
        Mode::Baseline | Mode::Ne if parts.retention.is_some() => return Err(unused("retention")),
        Mode::Nc if parts.retention.is_some() => return Err(unused("retention")),
        Mode::Sa if parts.push.is_some() => return Err(unused("push")),
        Mode::Sa if parts.budget.is_some() => return Err(unused("budget")),
        _ => {}
    }
    let mut total = lc;
    if let Some(ld) = parts.distillation {
        let w = tape.scale(ld, lambda1)?;
        total = tape.add(total, w)?;
    }
    for reg in [parts.push, parts.budget, parts.retention].into_iter().flatten() {
        let w = tape.scale(reg, lambda2)?;
        total = tape.add(total, w)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn scalar(tape: &Tape, n: NodeId) -> f64 {
        tape.value(n).item().unwrap()
    }

    fn ce(logits: &[f64], y: usize) -> f64 {
        let mut t = Tape::new();
        let l = t.input(Tensor::matrix(1, logits.len(), logits.to_vec()).unwrap());
        let n = cross_entropy(&mut t, l, &[y]).unwrap();
        scalar(&t, n)
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((ce(&[0.0, 0.0], 0) - core::f64::consts::LN_2).abs() < 1e-15);
        assert!(ce(&[100.0, 0.0], 0) < 1e-40);
        // ln(e + e^-1 + e^0.5) − 0.5
        let oracle = libm::log(libm::exp(1.0) + libm::exp(-1.0) + libm::exp(0.5)) - 0.5;
        assert!((ce(&[1.0, -1.0, 0.5], 2) - oracle).abs() < 1e-14);
        assert!((oracle - 1.0549569196419906).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut t = Tape::new();
        let l = t.input(Tensor::zeros(&[1, 3]));
        assert_eq!(
            cross_entropy(&mut t, l, &[3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        );
    }

    #[test]
    fn distillation_examples() {
        let mut t = Tape::new();
        let cur = t.param(Tensor::zeros(&[1, 2]));
        let ld = distillation(&mut t, cur, &Tensor::zeros(&[1, 2]), 1.0).unwrap();
        assert!((scalar(&t, ld) - core::f64::consts::LN_2).abs() < 1e-15);
        let g = t.backward(ld).unwrap();
        assert!(g[&cur].data().iter().all(|v| v.abs() <= 1e-10));

        let mut t = Tape::new();
        let cur = t.input(Tensor::matrix(1, 2, vec![0.0, 100.0]).unwrap());
        let frozen = Tensor::matrix(1, 2, vec![100.0, 0.0]).unwrap();
        let ld = distillation(&mut t, cur, &frozen, 1.0).unwrap();
        assert!((scalar(&t, ld) - 100.0).abs() < 1e-9);

        let mut t = Tape::new();
        let cur = t.input(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            distillation(&mut t, cur, &Tensor::zeros(&[1, 2]), 1.0),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    fn push_and_grad(s: &[f64]) -> (f64, Vec<f64>) {
        let mut t = Tape::new();
        let p = t.param(Tensor::vector(s.to_vec()).unwrap());
        let l = l1_push(&mut t, p, 10.0).unwrap();
        let g = t.backward(l).unwrap();
        (scalar(&t, l), g[&p].data().to_vec())
    }

    #[test]
    fn push_examples() {
        assert_eq!(push_and_grad(&[10.0, -10.0]).0, 0.0);
        let (v, g) = push_and_grad(&[5.0]);
        assert_eq!(v, 25.0);
        assert_eq!(g, vec![-10.0]);
        let (v, g) = push_and_grad(&[-5.0]);
        assert_eq!(v, 25.0);
        assert_eq!(g, vec![10.0]);
        // Subgradient at the origin is zero.
        assert_eq!(push_and_grad(&[0.0]).1, vec![0.0]);
    }

    fn budget(alpha: &[f64], tau: f64) -> (f64, f64) {
        let mut t = Tape::new();
        let a = t.input(Tensor::vector(alpha.to_vec()).unwrap());
        let tau = t.param(Tensor::scalar(tau));
        let l = retention_loss(&mut t, a, tau).unwrap();
        let g = t.backward(l).unwrap();
        (scalar(&t, l), g[&tau].data()[0])
    }

    #[test]
    fn budget_examples() {
        assert_eq!(budget(&[1.0; 4], 0.5).0, 0.5);
        assert_eq!(budget(&[0.3; 4], 0.5), (0.0, 0.0));
        let (v, g) = budget(&[0.9, 0.9], 0.5);
        assert!((v - 0.4).abs() < 1e-15);
        assert_eq!(g, -1.0);
        assert_eq!(budget(&[0.5, 0.5], 0.5), (0.0, 0.0));
    }

    #[test]
    fn budget_slope_through_sigmoid() {
        let mut t = Tape::new();
        let s = t.param(Tensor::zeros(&[4]));
        let a = t.sigmoid(s).unwrap();
        let tau = t.input(Tensor::scalar(0.1));
        let l = l2_budget(&mut t, a, tau).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g[&s].data().iter().all(|v| (v - 0.0625).abs() < 1e-15));
    }

    #[test]
    fn totals() {
        let parts = LossParts {
            classification: 1.0,
            distillation: 0.5,
            retention: 0.2,
            lambda1: 1.0,
            lambda2: 1.0,
            ..Default::default()
        };
        assert!((parts.total(Mode::Sa, 1).unwrap() - 1.7).abs() < 1e-15);
        for m in Mode::ALL {
            assert_eq!(parts.total(m, 0).unwrap(), 1.0);
        }
        assert!(matches!(
            parts.total(Mode::Nc, 1),
            Err(Error::InconsistentParts { part: "retention", .. })
        ));
        let nc = LossParts {
            classification: 0.7,
            distillation: 0.3,
            push: 12.5,
            budget: 0.05,
            lambda1: 0.5,
            lambda2: 0.01,
            ..Default::default()
        };
        let hand = 0.7 + 0.5 * 0.3 + 0.01 * (12.5 + 0.05);
        assert!((nc.total(Mode::Nc, 2).unwrap() - hand).abs() < 1e-12);
    }

    #[test]
    fn tape_total_matches_scalar_total() {
        let mut t = Tape::new();
        let lc = t.input(Tensor::scalar(0.7));
        let ld = t.input(Tensor::scalar(0.3));
        let l1 = t.input(Tensor::scalar(12.5));
        let l2 = t.input(Tensor::scalar(0.05));
        let nodes = LossNodes {
            classification: Some(lc),
            distillation: Some(ld),
            push: Some(l1),
            budget: Some(l2),
            retention: None,
        };
        let total = total_objective(&mut t, Mode::Nc, 1, &nodes, 0.5, 0.01).unwrap();
        assert!((scalar(&t, total) - (0.7 + 0.15 + 0.01 * 12.55)).abs() < 1e-12);
        let base = total_objective(&mut t, Mode::Nc, 0, &nodes, 0.5, 0.01).unwrap();
        assert_eq!(scalar(&t, base), 0.7);
        assert!(total_objective(&mut t, Mode::Sa, 1, &nodes, 0.5, 0.01).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("xx".parse::<Mode>().is_err());
    }
}
