//! Labeled data and the session protocol.
//!
//! Session datasets relabel classes by their position in the session order:
//! the base classes become `0..base`, the first novel session's classes come
//! next, and so on. Classifier blocks are appended in the same order, so a
//! label is directly a logit column.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{purpose, stream};
use crate::tensor::Tensor;

/// Held-out test fraction per class, rounded down, never fewer than
/// [`MIN_TEST_PER_CLASS`].
pub const TEST_FRACTION: f64 = 0.25;
pub const MIN_TEST_PER_CLASS: usize = 5;

/// Features with dense class labels `0..classes`, every class present.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    features: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledSet {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rank() != 2 || features.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "labeled_set",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let mut seen = vec![false; classes];
        for &l in &labels {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidConfig(alloc::format!(
                "class {missing} has no samples"
            )));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
    pub fn classes(&self) -> usize {
        self.classes
    }
    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Sample indices of each class, in row order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

/// Samples of a subset of classes. Unlike [`LabeledSet`] the label range is
/// not required to be covered, and the set may be empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub features: Option<Tensor>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn empty() -> Self {
        Self {
            features: None,
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Features as a `[n, d]` matrix; `None` when empty.
    pub fn matrix(&self) -> Option<&Tensor> {
        self.features.as_ref()
    }

    fn gather(set: &LabeledSet, rows: &[usize], relabel: &[usize]) -> Self {
        if rows.is_empty() {
            return Self::empty();
        }
        Self {
            features: Some(set.features.select_rows(rows)),
            labels: rows.iter().map(|&r| relabel[set.labels[r]]).collect(),
        }
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        match &self.features {
            Some(f) if !rows.is_empty() => Self {
                features: Some(f.select_rows(rows)),
                labels: rows.iter().map(|&r| self.labels[r]).collect(),
            },
            _ => Self::empty(),
        }
    }
}

/// Isotropic Gaussian classes around means placed uniformly on a sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub mean_radius: f64,
    pub within_std: f64,
    pub seed: u64,
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(alloc::format!("blob spec: {m}")));
        if self.classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.dim < 2 {
            return bad("need input dimension of at least 2");
        }
        if self.samples_per_class == 0 {
            return bad("need at least one sample per class");
        }
        if !(self.mean_radius > 0.0 && self.mean_radius.is_finite()) {
            return bad("mean radius must be positive");
        }
        if !(self.within_std > 0.0 && self.within_std.is_finite()) {
            return bad("within-class deviation must be positive");
        }
        Ok(())
    }
}

/// Draws `samples_per_class` points for each class, grouped by class.
pub fn generate_blobs(spec: &BlobSpec) -> Result<LabeledSet> {
    spec.validate()?;
    let mut mean_rng = stream(spec.seed, purpose::BLOB_MEANS);
    let mut noise_rng = stream(spec.seed, purpose::BLOB_NOISE);
    let d = spec.dim;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
    while means.len() < spec.classes {
        let g: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut mean_rng)).collect();
        let norm = libm::sqrt(g.iter().map(|v| v * v).sum());
        if norm < 1e-12 {
            continue;
        }
        let m: Vec<f64> = g.iter().map(|v| v / norm * spec.mean_radius).collect();
        if means.iter().any(|o| o == &m) {
            continue;
        }
        means.push(m);
    }
    let n = spec.classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for (c, m) in means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            for &mv in m {
                let z: f64 = StandardNormal.sample(&mut noise_rng);
                data.push(mv + spec.within_std * z);
            }
            labels.push(c);
        }
    }
    LabeledSet::new(Tensor::matrix(n, d, data)?, labels, spec.classes)
}

/// Protocol shape: base classes, then `sessions` novel sessions of `ways`
/// classes with `shots` training samples each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub base_classes: usize,
    pub ways: usize,
    pub shots: usize,
    pub sessions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    /// Training data `D^(t)`, labels in the session-ordered index space.
    pub train: Samples,
    /// Session-ordered class ids introduced in this session.
    pub classes: core::ops::Range<usize>,
    /// Test samples of every class seen through this session.
    pub cumulative_test: Samples,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionStream {
    pub protocol: Protocol,
    pub sessions: Vec<Session>,
    /// `class_order[k]` is the original label of session-ordered class `k`.
    pub class_order: Vec<usize>,
    pub dim: usize,
}

impl SessionStream {
    pub fn len(&self) -> usize {
        self.sessions.len()
    }
    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }
    /// Number of classes seen through session `t`.
    pub fn seen_classes(&self, t: usize) -> usize {
        self.sessions[t].classes.end
    }
}

/// Slices a labeled set into the session protocol.
///
/// The class-to-session assignment is a seeded permutation. Every class loses
/// `max(⌊n/4⌋, 5)` samples to its test split; base classes keep all remaining
/// samples for training, novel classes keep a seeded `shots`-subset.
pub fn split_sessions(set: &LabeledSet, protocol: Protocol, seed: u64) -> Result<SessionStream> {
    let Protocol {
        base_classes,
        ways,
        shots,
        sessions,
    } = protocol;
    if base_classes == 0 {
        return Err(Error::InvalidConfig("base session needs at least one class".into()));
    }
    if sessions > 0 && (ways == 0 || shots == 0) {
        return Err(Error::InvalidConfig("novel sessions need ways ≥ 1 and shots ≥ 1".into()));
    }
    let required = base_classes + ways * sessions;
    if required > set.classes() {
        return Err(Error::Insufficient {
            what: "classes for base + ways·sessions",
            required,
            available: set.classes(),
        });
    }
    let mut rng = stream(seed, purpose::SPLIT);
    let mut order: Vec<usize> = (0..set.classes()).collect();
    order.shuffle(&mut rng);
    order.truncate(required);
    let mut relabel = vec![usize::MAX; set.classes()];
    for (k, &c) in order.iter().enumerate() {
        relabel[c] = k;
    }

    let by_class = set.class_indices();
    let mut train_rows: Vec<Vec<usize>> = Vec::with_capacity(required);
    let mut test_rows: Vec<Vec<usize>> = Vec::with_capacity(required);
    for (k, &c) in order.iter().enumerate() {
        let mut rows = by_class[c].clone();
        rows.shuffle(&mut rng);
        let n = rows.len();
        let n_test = core::cmp::max((n as f64 * TEST_FRACTION) as usize, MIN_TEST_PER_CLASS);
        let need_train = if k < base_classes { 1 } else { shots };
        if n < n_test + need_train {
            return Err(Error::Insufficient {
                what: "samples per class (test holdout + training)",
                required: n_test + need_train,
                available: n,
            });
        }
        let mut test: Vec<usize> = rows[..n_test].to_vec();
        let mut train: Vec<usize> = rows[n_test..].to_vec();
        if k >= base_classes {
            train.truncate(shots);
        }
        test.sort_unstable();
        train.sort_unstable();
        test_rows.push(test);
        train_rows.push(train);
    }

    let mut out = Vec::with_capacity(sessions + 1);
    let mut cumulative_test: Vec<usize> = Vec::new();
    for t in 0..=sessions {
        let range = if t == 0 {
            0..base_classes
        } else {
            let start = base_classes + (t - 1) * ways;
            start..start + ways
        };
        let train: Vec<usize> = range.clone().flat_map(|k| train_rows[k].iter().copied()).collect();
        cumulative_test.extend(range.clone().flat_map(|k| test_rows[k].iter().copied()));
        out.push(Session {
            train: Samples::gather(set, &train, &relabel),
            classes: range,
            cumulative_test: Samples::gather(set, &cumulative_test, &relabel),
        });
    }
    Ok(SessionStream {
        protocol,
        sessions: out,
        class_order: order,
        dim: set.dim(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(classes: usize, n: usize) -> LabeledSet {
        generate_blobs(&BlobSpec {
            classes,
            dim: 4,
            samples_per_class: n,
            mean_radius: 4.0,
            within_std: 1.0,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn blobs_are_deterministic_and_grouped() {
        let spec = BlobSpec {
            classes: 4,
            dim: 8,
            samples_per_class: 30,
            mean_radius: 4.0,
            within_std: 1.0,
            seed: 7,
        };
        let a = generate_blobs(&spec).unwrap();
        let b = generate_blobs(&spec).unwrap();
        assert_eq!(a, b);
        for c in a.class_indices() {
            assert_eq!(c.len(), 30);
        }
    }

    #[test]
    fn tiny_noise_stays_on_mean() {
        let spec = BlobSpec {
            classes: 3,
            dim: 5,
            samples_per_class: 10,
            mean_radius: 2.0,
            within_std: 1e-9,
            seed: 11,
        };
        let set = generate_blobs(&spec).unwrap();
        for idx in set.class_indices() {
            let first = set.features().row(idx[0]).to_vec();
            for &i in &idx {
                for (a, b) in set.features().row(i).iter().zip(&first) {
                    assert!((a - b).abs() < 2e-6);
                }
            }
            let r: f64 = first.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((r - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_specs_rejected() {
        let ok = BlobSpec {
            classes: 2,
            dim: 2,
            samples_per_class: 1,
            mean_radius: 1.0,
            within_std: 1.0,
            seed: 0,
        };
        assert!(generate_blobs(&ok).is_ok());
        for bad in [
            BlobSpec { classes: 1, ..ok.clone() },
            BlobSpec { dim: 1, ..ok.clone() },
            BlobSpec { mean_radius: 0.0, ..ok.clone() },
            BlobSpec { within_std: -1.0, ..ok.clone() },
        ] {
            assert!(matches!(generate_blobs(&bad), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn cifar_shaped_protocol() {
        let set = blobs(100, 20);
        let s = split_sessions(
            &set,
            Protocol { base_classes: 60, ways: 5, shots: 5, sessions: 8 },
            0,
        )
        .unwrap();
        assert_eq!(s.len(), 9);
        for t in 1..9 {
            assert_eq!(s.sessions[t].train.len(), 25);
        }
        assert_eq!(s.sessions[0].train.len(), 60 * 15);
    }

    #[test]
    fn cub_shaped_protocol() {
        let set = blobs(200, 12);
        let s = split_sessions(
            &set,
            Protocol { base_classes: 100, ways: 10, shots: 5, sessions: 10 },
            0,
        )
        .unwrap();
        assert_eq!(s.len(), 11);
        assert_eq!(s.seen_classes(10), 200);
    }

    #[test]
    fn zero_sessions_is_base_only() {
        let set = blobs(6, 20);
        let s = split_sessions(
            &set,
            Protocol { base_classes: 6, ways: 2, shots: 5, sessions: 0 },
            3,
        )
        .unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.sessions[0].cumulative_test.len(), 6 * 5);
    }

    #[test]
    fn insufficient_classes_or_samples() {
        let set = blobs(10, 20);
        let err = split_sessions(
            &set,
            Protocol { base_classes: 8, ways: 2, shots: 5, sessions: 2 },
            0,
        )
        .unwrap_err();
        assert_eq!(
            err,
            Error::Insufficient { what: "classes for base + ways·sessions", required: 12, available: 10 }
        );
        let set = blobs(10, 9);
        let err = split_sessions(
            &set,
            Protocol { base_classes: 8, ways: 2, shots: 5, sessions: 1 },
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Insufficient { required: 10, available: 9, .. }));
    }
}
