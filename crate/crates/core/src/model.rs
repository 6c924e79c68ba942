//! The expandable network.
//!
//! A trunk of dense layers maps the input to a penultimate activation `h` and
//! then linearly to the feature `f ∈ R^c`. Each novel session may add a
//! branch: a dense layer from `h` to an extra feature `f′ ∈ R^c`, gated per
//! node by an indicator `α ∈ [0,1]^c` and fused by addition,
//!
//! ```text
//! f″ = γ·f + Σ_u α_u ⊙ f′_u
//! ```
//!
//! The classifier is a sequence of per-session dense blocks from `R^c` to the
//! logits of that session's classes; the logits of all seen classes are their
//! concatenation.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::objectives::Mode;
use crate::rng::{purpose, stream, Rng};
use crate::tensor::Tensor;

/// Initial retention rate of a fresh branch.
pub const INITIAL_TAU: f64 = 0.5;
/// Half-width of the uniform draw for branch weights.
pub const BRANCH_WEIGHT_SCALE: f64 = 1e-3;
/// Half-width of the uniform draw for learnable indicator logits.
pub const INDICATOR_INIT_SCALE: f64 = 0.01;

/// Initialization of a fresh branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpansionInit {
    /// Half-width of the uniform draw for branch weights.
    pub weight_scale: f64,
    /// Self-activated branches start at bias `ln((1/c)/(1 − 1/c))`, so that
    /// `α ≈ 1/c` at β = 1. Otherwise the bias is 0 and `α ≈ 1/2`.
    pub reciprocal_bias: bool,
}

impl Default for ExpansionInit {
    fn default() -> Self {
        Self {
            weight_scale: BRANCH_WEIGHT_SCALE,
            reciprocal_bias: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Widths of the ReLU layers; the last one is the penultimate activation.
    pub hidden_dims: Vec<usize>,
    /// Dimension `c` of the trunk feature, of every branch output and of
    /// every indicator.
    pub feature_dim: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "architecture dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Width of the activation feeding the feature layer and the branches.
    pub fn penultimate_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }
}

/// Dense layer `y = x·W + b` with `W: [in, out]` and `b: [out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    fn glorot(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        let a = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        Self::uniform(rng, fan_in, fan_out, a, 0.0)
    }

    fn uniform(rng: &mut Rng, fan_in: usize, fan_out: usize, a: f64, bias: f64) -> Self {
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-a..a))
            .collect();
        Self {
            weight: Tensor::from_parts(vec![fan_in, fan_out], w),
            bias: Tensor::full(&[fan_out], bias),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }
    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// How a branch's indicator is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndicatorMode {
    /// No gating: `α ≡ 1`.
    None,
    /// `α = σ(s)` for a learnable vector `s`, shared by all inputs.
    Learnable,
    /// `α = σ(β·f′)`, computed per input from the branch output.
    SelfActivated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchState {
    pub layer: Dense,
    pub mode: IndicatorMode,
    /// Indicator logits `s`, shape `[1, c]`; present iff the mode is learnable.
    pub indicator: Option<Tensor>,
    /// Retention rate in `[0, 1]`.
    pub tau: f64,
    /// β used when this branch is evaluated outside its own training loop.
    pub beta: f64,
    /// Session that created the branch.
    pub session: usize,
}

/// Identifies one parameter block of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamRef {
    TrunkWeight(usize),
    TrunkBias(usize),
    ClassifierWeight(usize),
    ClassifierBias(usize),
    BranchWeight(usize),
    BranchBias(usize),
    BranchIndicator(usize),
    BranchTau(usize),
}

impl ParamRef {
    /// Checkpoint key of the block.
    pub fn key(&self) -> String {
        match self {
            ParamRef::TrunkWeight(i) => format!("trunk.W{i}"),
            ParamRef::TrunkBias(i) => format!("trunk.b{i}"),
            ParamRef::ClassifierWeight(t) => format!("classifier.{t}.W"),
            ParamRef::ClassifierBias(t) => format!("classifier.{t}.b"),
            ParamRef::BranchWeight(t) => format!("branch.{t}.W"),
            ParamRef::BranchBias(t) => format!("branch.{t}.b"),
            ParamRef::BranchIndicator(t) => format!("branch.{t}.s"),
            ParamRef::BranchTau(t) => format!("branch.{t}.tau"),
        }
    }

    pub fn is_trunk(&self) -> bool {
        matches!(self, ParamRef::TrunkWeight(_) | ParamRef::TrunkBias(_))
    }
    pub fn is_classifier(&self) -> bool {
        matches!(self, ParamRef::ClassifierWeight(_) | ParamRef::ClassifierBias(_))
    }
    /// Branch index for branch-owned blocks.
    pub fn branch(&self) -> Option<usize> {
        match self {
            ParamRef::BranchWeight(u)
            | ParamRef::BranchBias(u)
            | ParamRef::BranchIndicator(u)
            | ParamRef::BranchTau(u) => Some(*u),
            _ => None,
        }
    }
}

/// All learnable parameters plus the frozen copy used for distillation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub arch: Architecture,
    /// Weight of the trunk feature in the fusion.
    pub gamma: f64,
    /// ReLU layers followed by the linear feature layer.
    pub trunk: Vec<Dense>,
    /// One block per session, `[c, |C^(t)|]`.
    pub classifier: Vec<Dense>,
    pub branches: Vec<BranchState>,
    /// Model as it was before the latest expansion.
    pub snapshot: Option<Box<ModelState>>,
    pub sessions_completed: usize,
    pub expansion: ExpansionInit,
}

/// Tape nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub hidden: NodeId,
    pub trunk_feature: NodeId,
    /// `f″`, or the trunk feature when the model has no branch.
    pub fused: NodeId,
    pub logits: NodeId,
    /// Per-session logit blocks; `logits` is their concatenation.
    pub block_logits: Vec<NodeId>,
    pub branches: Vec<BranchNodes>,
}

#[derive(Debug, Clone)]
pub struct BranchNodes {
    /// `f′`, shape `[B, c]`.
    pub feature: NodeId,
    /// Learnable logits `s`, shape `[1, c]`.
    pub indicator_logits: Option<NodeId>,
    /// `α`: `[B, c]` when self-activated, `[1, c]` when learnable.
    pub alpha: Option<NodeId>,
    /// `τ`, shape `[1]`.
    pub tau: NodeId,
    /// β the branch was evaluated with.
    pub beta: f64,
}

/// Parameter blocks placed on a tape.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    nodes: BTreeMap<ParamRef, NodeId>,
}

impl Bindings {
    pub fn node(&self, r: ParamRef) -> NodeId {
        self.nodes[&r]
    }
    pub fn iter(&self) -> impl Iterator<Item = (ParamRef, NodeId)> + '_ {
        self.nodes.iter().map(|(r, n)| (*r, *n))
    }
}

/// `σ(β·f′)` on the tape; β carries no gradient.
pub fn self_activation(tape: &mut Tape, branch_feature: NodeId, beta: f64) -> Result<NodeId> {
    let z = tape.scale(branch_feature, beta)?;
    tape.sigmoid(z)
}

/// `ln((1/c) / (1 − 1/c))`: the branch bias making `σ(f′) = 1/c` at β = 1.
pub fn reciprocal_indicator_bias(c: usize) -> f64 {
    let p = 1.0 / c as f64;
    libm::log(p / (1.0 - p))
}

impl ModelState {
    /// Fresh session-0 network with `base_classes` outputs.
    pub fn init(arch: Architecture, base_classes: usize, gamma: f64, seed: u64) -> Result<Self> {
        arch.validate()?;
        if base_classes == 0 {
            return Err(Error::InvalidConfig("need at least one base class".into()));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma must be positive, got {gamma}")));
        }
        let mut rng = stream(seed, purpose::INIT);
        let mut trunk = Vec::with_capacity(arch.hidden_dims.len() + 1);
        let mut fan_in = arch.input_dim;
        for &h in &arch.hidden_dims {
            trunk.push(Dense::glorot(&mut rng, fan_in, h));
            fan_in = h;
        }
        trunk.push(Dense::glorot(&mut rng, fan_in, arch.feature_dim));
        let classifier = vec![Dense::glorot(&mut rng, arch.feature_dim, base_classes)];
        Ok(Self {
            arch,
            gamma,
            trunk,
            classifier,
            branches: Vec::new(),
            snapshot: None,
            sessions_completed: 0,
            expansion: ExpansionInit::default(),
        })
    }

    /// Number of classes the classifier covers.
    pub fn seen_classes(&self) -> usize {
        self.classifier.iter().map(Dense::outputs).sum()
    }

    /// Index of the session currently being trained.
    pub fn current_session(&self) -> usize {
        self.sessions_completed
    }

    /// Prepares the model for a novel session.
    ///
    /// Takes the distillation snapshot, appends a classifier block for
    /// `new_classes` and, unless `mode` is the baseline, a fresh branch.
    pub fn expand(&mut self, new_classes: usize, mode: Mode, seed: u64) -> Result<()> {
        let t = self.sessions_completed;
        if t == 0 {
            return Err(Error::InvalidConfig(
                "the base session must be completed before expanding".into(),
            ));
        }
        if self.classifier.len() > t {
            return Err(Error::AlreadyExpanded(t));
        }
        if new_classes == 0 {
            return Err(Error::InvalidConfig("a novel session needs new classes".into()));
        }
        let mut frozen = self.clone();
        frozen.snapshot = None;
        let c = self.arch.feature_dim;
        let mut rng = stream(seed, purpose::EXPAND + t as u64);
        if let Some(indicator_mode) = mode.indicator_mode() {
            let bias = match indicator_mode {
                IndicatorMode::SelfActivated if self.expansion.reciprocal_bias => {
                    reciprocal_indicator_bias(c)
                }
                _ => 0.0,
            };
            let layer = Dense::uniform(
                &mut rng,
                self.arch.penultimate_dim(),
                c,
                self.expansion.weight_scale,
                bias,
            );
            let indicator = (indicator_mode == IndicatorMode::Learnable).then(|| {
                let s = (0..c)
                    .map(|_| rng.random_range(-INDICATOR_INIT_SCALE..INDICATOR_INIT_SCALE))
                    .collect();
                Tensor::from_parts(vec![1, c], s)
            });
            self.branches.push(BranchState {
                layer,
                mode: indicator_mode,
                indicator,
                tau: INITIAL_TAU,
                beta: 1.0,
                session: t,
            });
        }
        self.classifier.push(Dense::glorot(&mut rng, c, new_classes));
        self.snapshot = Some(Box::new(frozen));
        Ok(())
    }

    /// Marks the current session as finished.
    pub fn complete_session(&mut self) {
        self.sessions_completed += 1;
    }

    /// Whether branch `u` is being trained in the current session.
    pub fn branch_is_open(&self, u: usize) -> bool {
        self.branches[u].session >= self.sessions_completed
    }

    pub fn param_refs(&self) -> Vec<ParamRef> {
        let mut refs = Vec::new();
        for i in 0..self.trunk.len() {
            refs.push(ParamRef::TrunkWeight(i));
            refs.push(ParamRef::TrunkBias(i));
        }
        for t in 0..self.classifier.len() {
            refs.push(ParamRef::ClassifierWeight(t));
            refs.push(ParamRef::ClassifierBias(t));
        }
        for (u, b) in self.branches.iter().enumerate() {
            refs.push(ParamRef::BranchWeight(u));
            refs.push(ParamRef::BranchBias(u));
            if b.indicator.is_some() {
                refs.push(ParamRef::BranchIndicator(u));
            }
            refs.push(ParamRef::BranchTau(u));
        }
        refs
    }

    pub fn param(&self, r: ParamRef) -> Tensor {
        match r {
            ParamRef::TrunkWeight(i) => self.trunk[i].weight.clone(),
            ParamRef::TrunkBias(i) => self.trunk[i].bias.clone(),
            ParamRef::ClassifierWeight(t) => self.classifier[t].weight.clone(),
            ParamRef::ClassifierBias(t) => self.classifier[t].bias.clone(),
            ParamRef::BranchWeight(u) => self.branches[u].layer.weight.clone(),
            ParamRef::BranchBias(u) => self.branches[u].layer.bias.clone(),
            ParamRef::BranchIndicator(u) => self.branches[u]
                .indicator
                .clone()
                .expect("indicator present for learnable branch"),
            ParamRef::BranchTau(u) => Tensor::scalar(self.branches[u].tau),
        }
    }

    /// Overwrites a parameter block; shapes must match.
    pub fn set_param(&mut self, r: ParamRef, value: Tensor) -> Result<()> {
        let slot: &mut Tensor = match r {
            ParamRef::TrunkWeight(i) => &mut self.trunk[i].weight,
            ParamRef::TrunkBias(i) => &mut self.trunk[i].bias,
            ParamRef::ClassifierWeight(t) => &mut self.classifier[t].weight,
            ParamRef::ClassifierBias(t) => &mut self.classifier[t].bias,
            ParamRef::BranchWeight(u) => &mut self.branches[u].layer.weight,
            ParamRef::BranchBias(u) => &mut self.branches[u].layer.bias,
            ParamRef::BranchIndicator(u) => match &mut self.branches[u].indicator {
                Some(s) => s,
                None => return Err(Error::NotLearnable { branch: u }),
            },
            ParamRef::BranchTau(u) => {
                let v = value.item().ok_or_else(|| Error::ShapeMismatch {
                    op: "set_param",
                    lhs: vec![1],
                    rhs: value.shape().to_vec(),
                })?;
                self.branches[u].tau = v;
                return Ok(());
            }
        };
        if !slot.same_shape(&value) {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Places every parameter on the tape; blocks for which `trainable`
    /// returns false become constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamRef) -> bool) -> Bindings {
        let nodes = self
            .param_refs()
            .into_iter()
            .map(|r| {
                let v = self.param(r);
                let id = if trainable(r) { tape.param(v) } else { tape.input(v) };
                (r, id)
            })
            .collect();
        Bindings { nodes }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.shape()[1] != self.arch.input_dim {
            return Err(Error::InputDim {
                expected: self.arch.input_dim,
                actual: *x.shape().last().unwrap_or(&0),
            });
        }
        Ok(())
    }

    fn trunk_on(&self, tape: &mut Tape, b: &Bindings, x: NodeId) -> Result<(NodeId, NodeId)> {
        let mut h = x;
        let last = self.trunk.len() - 1;
        for i in 0..last {
            let z = tape.matmul(h, b.node(ParamRef::TrunkWeight(i)))?;
            let z = tape.bias_add(z, b.node(ParamRef::TrunkBias(i)))?;
            h = tape.relu(z)?;
        }
        let f = tape.matmul(h, b.node(ParamRef::TrunkWeight(last)))?;
        let f = tape.bias_add(f, b.node(ParamRef::TrunkBias(last)))?;
        Ok((h, f))
    }

    fn classify_on(&self, tape: &mut Tape, b: &Bindings, feature: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        let mut blocks = Vec::with_capacity(self.classifier.len());
        for t in 0..self.classifier.len() {
            let z = tape.matmul(feature, b.node(ParamRef::ClassifierWeight(t)))?;
            blocks.push(tape.bias_add(z, b.node(ParamRef::ClassifierBias(t)))?);
        }
        let logits = if blocks.len() == 1 {
            blocks[0]
        } else {
            tape.concat(&blocks)?
        };
        Ok((logits, blocks))
    }

    /// Trunk and classifier only: `logits = g(f(x))`.
    pub fn forward_base_on(&self, tape: &mut Tape, b: &Bindings, x: NodeId) -> Result<ForwardNodes> {
        let (hidden, f) = self.trunk_on(tape, b, x)?;
        let (logits, block_logits) = self.classify_on(tape, b, f)?;
        Ok(ForwardNodes {
            hidden,
            trunk_feature: f,
            fused: f,
            logits,
            block_logits,
            branches: Vec::new(),
        })
    }

    /// Gated fusion over all branches.
    ///
    /// The branch of the session in training uses `β = 1 + epoch`; branches
    /// of completed sessions use the β stored when their session ended.
    pub fn forward_session_on(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        x: NodeId,
        epoch: usize,
    ) -> Result<ForwardNodes> {
        if self.branches.is_empty() {
            return Err(Error::NoBranch);
        }
        let betas: Vec<f64> = (0..self.branches.len())
            .map(|u| {
                if self.branch_is_open(u) {
                    1.0 + epoch as f64
                } else {
                    self.branches[u].beta
                }
            })
            .collect();
        self.forward_with_betas_on(tape, b, x, &betas)
    }

    /// Gated fusion with an explicit β per branch.
    pub fn forward_with_betas_on(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        x: NodeId,
        betas: &[f64],
    ) -> Result<ForwardNodes> {
        if betas.len() != self.branches.len() {
            return Err(Error::Arity {
                op: "fusion",
                expected: self.branches.len(),
                actual: betas.len(),
            });
        }
        let (hidden, f) = self.trunk_on(tape, b, x)?;
        let rows = tape.value(x).shape()[0];
        let mut fused = tape.scale(f, self.gamma)?;
        let mut branch_nodes = Vec::with_capacity(self.branches.len());
        let mut ones = None;
        for (u, branch) in self.branches.iter().enumerate() {
            let z = tape.matmul(hidden, b.node(ParamRef::BranchWeight(u)))?;
            let feature = tape.bias_add(z, b.node(ParamRef::BranchBias(u)))?;
            let beta = betas[u];
            let (indicator_logits, alpha, gated) = match branch.mode {
                IndicatorMode::None => (None, None, feature),
                IndicatorMode::SelfActivated => {
                    let alpha = self_activation(tape, feature, beta)?;
                    let gated = tape.mul(alpha, feature)?;
                    (None, Some(alpha), gated)
                }
                IndicatorMode::Learnable => {
                    let s = b.node(ParamRef::BranchIndicator(u));
                    let alpha = tape.sigmoid(s)?;
                    let ones = *ones.get_or_insert_with(|| tape.input(Tensor::full(&[rows, 1], 1.0)));
                    let rows_alpha = tape.matmul(ones, alpha)?;
                    let gated = tape.mul(rows_alpha, feature)?;
                    (Some(s), Some(alpha), gated)
                }
            };
            fused = tape.add(fused, gated)?;
            branch_nodes.push(BranchNodes {
                feature,
                indicator_logits,
                alpha,
                tau: b.node(ParamRef::BranchTau(u)),
                beta,
            });
        }
        let (logits, block_logits) = self.classify_on(tape, b, fused)?;
        Ok(ForwardNodes {
            hidden,
            trunk_feature: f,
            fused,
            logits,
            block_logits,
            branches: branch_nodes,
        })
    }

    /// `(f, logits)` of the trunk-classifier composition, every parameter
    /// trainable on the returned tape.
    pub fn forward_base(&self, x: &Tensor) -> Result<(Tape, ForwardNodes)> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| true);
        let xi = tape.input(x.clone());
        let nodes = self.forward_base_on(&mut tape, &b, xi)?;
        Ok((tape, nodes))
    }

    /// `(f″, logits, α per branch)` at the given epoch of the current session.
    pub fn forward_session(&self, x: &Tensor, epoch: usize) -> Result<(Tape, ForwardNodes)> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| true);
        let xi = tape.input(x.clone());
        let nodes = self.forward_session_on(&mut tape, &b, xi, epoch)?;
        Ok((tape, nodes))
    }

    /// Inference with stored βs; no parameter is trainable.
    pub fn evaluate(&self, x: &Tensor) -> Result<(Tape, ForwardNodes)> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| false);
        let xi = tape.input(x.clone());
        let nodes = if self.branches.is_empty() {
            self.forward_base_on(&mut tape, &b, xi)?
        } else {
            let betas: Vec<f64> = self.branches.iter().map(|br| br.beta).collect();
            self.forward_with_betas_on(&mut tape, &b, xi, &betas)?
        };
        Ok((tape, nodes))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (tape, n) = self.evaluate(x)?;
        Ok(tape.value(n.logits).clone())
    }

    /// Fused features (trunk features before any expansion).
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let (tape, n) = self.evaluate(x)?;
        Ok(tape.value(n.fused).clone())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    /// Indicator values per branch at the stored βs, broadcast to `[B, c]`
    /// (all ones for ungated branches).
    pub fn indicators(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (tape, n) = self.evaluate(x)?;
        let rows = x.shape()[0];
        let c = self.arch.feature_dim;
        Ok(n.branches
            .iter()
            .map(|bn| match bn.alpha {
                None => Tensor::full(&[rows, c], 1.0),
                Some(a) => {
                    let v = tape.value(a);
                    if v.shape()[0] == rows {
                        v.clone()
                    } else {
                        let data = (0..rows).flat_map(|_| v.data().iter().copied()).collect();
                        Tensor::from_parts(vec![rows, c], data)
                    }
                }
            })
            .collect())
    }

    /// `σ(s)` of a learnable branch, differentiable with respect to `s`.
    pub fn learnable_indicator(&self, tape: &mut Tape, b: &Bindings, branch: usize) -> Result<NodeId> {
        match self.branches.get(branch) {
            Some(br) if br.mode == IndicatorMode::Learnable => {
                tape.sigmoid(b.node(ParamRef::BranchIndicator(branch)))
            }
            _ => Err(Error::NotLearnable { branch }),
        }
    }

    /// Logits of the pre-expansion snapshot, without gradient recording.
    pub fn frozen_forward(&self, x: &Tensor) -> Result<Tensor> {
        self.snapshot.as_ref().ok_or(Error::NoSnapshot)?.logits(x)
    }
}

/// Index of the largest entry of each row (first on ties).
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.outer_len())
        .map(|r| {
            let row = t.row(r);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::sigmoid;

    fn arch() -> Architecture {
        Architecture {
            input_dim: 8,
            hidden_dims: vec![32, 32],
            feature_dim: 16,
        }
    }

    fn input(rows: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, 99);
        let data = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, d, data).unwrap()
    }

    fn zeroed(m: &mut ModelState) {
        for r in m.param_refs() {
            let shape = m.param(r).shape().to_vec();
            if !matches!(r, ParamRef::BranchTau(_)) {
                m.set_param(r, Tensor::zeros(&shape)).unwrap();
            }
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelState::init(arch(), 4, 0.8, 5).unwrap();
        let b = ModelState::init(arch(), 4, 0.8, 5).unwrap();
        let c = ModelState::init(arch(), 4, 0.8, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.classifier[0].weight.shape(), &[16, 4]);
    }

    #[test]
    fn initial_logits_are_small() {
        let m = ModelState::init(arch(), 4, 0.8, 1).unwrap();
        let logits = m.logits(&input(20, 8, 2)).unwrap();
        assert_eq!(logits.shape(), &[20, 4]);
        assert!(logits.data().iter().all(|v| v.abs() < 5.0));
    }

    #[test]
    fn zero_model_gives_zero_feature_and_logits() {
        let mut m = ModelState::init(arch(), 4, 0.8, 1).unwrap();
        zeroed(&mut m);
        let (tape, n) = m.forward_base(&input(3, 8, 1)).unwrap();
        assert!(tape.value(n.trunk_feature).data().iter().all(|v| *v == 0.0));
        assert!(tape.value(n.logits).data().iter().all(|v| *v == 0.0));
        assert_eq!(tape.value(n.logits).shape(), &[3, 4]);
    }

    #[test]
    fn single_layer_trunk_matches_hand_arithmetic() {
        let a = Architecture {
            input_dim: 2,
            hidden_dims: vec![],
            feature_dim: 2,
        };
        let mut m = ModelState::init(a, 2, 1.0, 0).unwrap();
        m.set_param(ParamRef::TrunkWeight(0), Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap())
            .unwrap();
        m.set_param(ParamRef::TrunkBias(0), Tensor::vector(vec![0.25, -1.0]).unwrap())
            .unwrap();
        m.set_param(ParamRef::ClassifierWeight(0), Tensor::matrix(2, 2, vec![2.0, 0.0, -1.0, 1.0]).unwrap())
            .unwrap();
        m.set_param(ParamRef::ClassifierBias(0), Tensor::vector(vec![0.1, 0.2]).unwrap())
            .unwrap();
        let x = [0.3, -0.7];
        // Naive oracle.
        let f = [
            x[0] * 1.0 + x[1] * 0.5 + 0.25,
            x[0] * -2.0 + x[1] * 3.0 - 1.0,
        ];
        let y = [f[0] * 2.0 - f[1] + 0.1, f[0] * 0.0 + f[1] * 1.0 + 0.2];
        let (tape, n) = m.forward_base(&Tensor::matrix(1, 2, x.to_vec()).unwrap()).unwrap();
        for (a, b) in tape.value(n.trunk_feature).data().iter().zip(f) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in tape.value(n.logits).data().iter().zip(y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn input_dimension_checked() {
        let m = ModelState::init(arch(), 4, 0.8, 1).unwrap();
        assert!(matches!(
            m.forward_base(&Tensor::zeros(&[2, 7])),
            Err(Error::InputDim { expected: 8, actual: 7 })
        ));
    }

    #[test]
    fn expansion_bias_sets_initial_indicator() {
        let a = Architecture {
            input_dim: 4,
            hidden_dims: vec![8],
            feature_dim: 64,
        };
        let mut m = ModelState::init(a, 3, 0.8, 1).unwrap();
        m.complete_session();
        m.expand(2, Mode::Sa, 9).unwrap();
        let bias = m.branches[0].layer.bias.data()[0];
        assert!((bias - (-4.143134726391533)).abs() < 1e-12);
        assert!((sigmoid(bias) - 1.0 / 64.0).abs() < 1e-15);
        let alpha = &m.indicators(&input(5, 4, 3)).unwrap()[0];
        assert!(alpha.data().iter().all(|v| (v - 1.0 / 64.0).abs() < 1e-3));
    }

    #[test]
    fn expansion_grows_classifier_and_rejects_repeat() {
        let mut m = ModelState::init(arch(), 60, 0.8, 1).unwrap();
        assert!(m.expand(5, Mode::Sa, 1).is_err());
        m.complete_session();
        m.expand(5, Mode::Sa, 1).unwrap();
        assert_eq!(m.seen_classes(), 65);
        assert_eq!(m.expand(5, Mode::Sa, 1), Err(Error::AlreadyExpanded(1)));
        assert_eq!(m.logits(&input(2, 8, 1)).unwrap().shape(), &[2, 65]);
    }

    #[test]
    fn ne_branch_has_no_indicator() {
        let mut m = ModelState::init(arch(), 4, 0.8, 1).unwrap();
        m.complete_session();
        m.expand(2, Mode::Ne, 1).unwrap();
        assert_eq!(m.branches[0].mode, IndicatorMode::None);
        assert!(m.branches[0].indicator.is_none());
        let alpha = &m.indicators(&input(3, 8, 1)).unwrap()[0];
        assert!(alpha.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn learnable_indicator_values_and_slope() {
        let mut m = ModelState::init(arch(), 4, 0.8, 1).unwrap();
        m.complete_session();
        m.expand(2, Mode::Nc, 1).unwrap();
        m.set_param(ParamRef::BranchIndicator(0), Tensor::zeros(&[1, 16])).unwrap();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, |_| true);
        let alpha = m.learnable_indicator(&mut tape, &b, 0).unwrap();
        assert!(tape.value(alpha).data().iter().all(|v| *v == 0.5));
        let first = tape.add_scalar(alpha, 0.0).unwrap();
        let s = tape.sum(first).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g[&b.node(ParamRef::BranchIndicator(0))].data().iter().all(|v| *v == 0.25));

        let mut m2 = m.clone();
        m2.set_param(ParamRef::BranchIndicator(0), Tensor::full(&[1, 16], 10.0)).unwrap();
        let mut tape = Tape::new();
        let b = m2.bind(&mut tape, |_| true);
        let alpha = m2.learnable_indicator(&mut tape, &b, 0).unwrap();
        assert!((tape.value(alpha).data()[0] - 0.9999546021312976).abs() < 1e-15);

        let mut sa = ModelState::init(arch(), 4, 0.8, 1).unwrap();
        sa.complete_session();
        sa.expand(2, Mode::Sa, 1).unwrap();
        let mut tape = Tape::new();
        let b = sa.bind(&mut tape, |_| true);
        assert_eq!(
            sa.learnable_indicator(&mut tape, &b, 0),
            Err(Error::NotLearnable { branch: 0 })
        );
    }

    #[test]
    fn self_activation_values() {
        let mut tape = Tape::new();
        let f = tape.input(Tensor::vector(vec![0.0, 1.0, -0.5]).unwrap());
        let a = self_activation(&mut tape, f, 3.0).unwrap();
        let v = tape.value(a).data();
        assert_eq!(v[0], 0.5);
        // σ(−1.5) from a 30-digit evaluation.
        assert!((v[2] - 0.182425523806356).abs() < 1e-14);
        let a100 = self_activation(&mut tape, f, 100.0).unwrap();
        // 1 − 1e-40 rounds to 1 in f64; saturation means exactly 1 here.
        assert_eq!(tape.value(a100).data()[1], 1.0);
        assert_eq!(tape.value(a100).data()[0], 0.5);
    }

    #[test]
    fn hand_computed_fusion() {
        let a = Architecture {
            input_dim: 1,
            hidden_dims: vec![1],
            feature_dim: 4,
        };
        let mut m = ModelState::init(a, 2, 0.8, 1).unwrap();
        m.complete_session();
        m.expand(1, Mode::Nc, 1).unwrap();
        // h = relu(1·x) = 1 for x = 1.
        m.set_param(ParamRef::TrunkWeight(0), Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        m.set_param(ParamRef::TrunkBias(0), Tensor::zeros(&[1])).unwrap();
        m.set_param(ParamRef::TrunkWeight(1), Tensor::matrix(1, 4, vec![1.0; 4]).unwrap()).unwrap();
        m.set_param(ParamRef::TrunkBias(1), Tensor::zeros(&[4])).unwrap();
        m.set_param(ParamRef::BranchWeight(0), Tensor::matrix(1, 4, vec![2.0, 0.0, -1.0, 3.0]).unwrap())
            .unwrap();
        m.set_param(ParamRef::BranchBias(0), Tensor::zeros(&[4])).unwrap();
        // α = (1, 0, 1, 0) up to σ(±60) rounding.
        m.set_param(
            ParamRef::BranchIndicator(0),
            Tensor::matrix(1, 4, vec![60.0, -60.0, 60.0, -60.0]).unwrap(),
        )
        .unwrap();
        let f = m.features(&Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
        for (a, b) in f.data().iter().zip([2.8, 0.8, -0.2, 0.8]) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_session_requires_branch() {
        let m = ModelState::init(arch(), 4, 0.8, 1).unwrap();
        assert!(matches!(m.forward_session(&input(1, 8, 0), 0), Err(Error::NoBranch)));
        assert_eq!(m.frozen_forward(&input(1, 8, 0)), Err(Error::NoSnapshot));
    }

    #[test]
    fn snapshot_is_isolated_and_matches_pre_expansion() {
        let mut m = ModelState::init(arch(), 4, 0.8, 3).unwrap();
        m.complete_session();
        let x = input(6, 8, 4);
        let before = m.logits(&x).unwrap();
        m.expand(2, Mode::Sa, 3).unwrap();
        let frozen = m.frozen_forward(&x).unwrap();
        assert!(frozen.max_abs_diff(&before) <= 1e-12);
        m.set_param(ParamRef::TrunkWeight(0), Tensor::zeros(&[8, 32])).unwrap();
        assert_eq!(m.frozen_forward(&x).unwrap(), frozen);

        let mut z = ModelState::init(arch(), 4, 0.8, 3).unwrap();
        zeroed(&mut z);
        z.complete_session();
        z.expand(1, Mode::Baseline, 0).unwrap();
        assert!(z.frozen_forward(&x).unwrap().data().iter().all(|v| *v == 0.0));
    }
}
