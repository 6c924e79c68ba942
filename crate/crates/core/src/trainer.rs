//! The session protocol: base training, then per-session expansion and
//! mode-dependent incremental training with the β schedule and the
//! novel-reaches-old stopping rule.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Samples, Session, SessionStream};
use crate::error::{Error, Result};
use crate::graph::{sgd_step, NodeId, Tape};
use crate::metrics::{self, MetricRow, ProbeSet, Split};
use crate::model::{argmax_rows, Architecture, Bindings, ExpansionInit, ModelState, ParamRef};
use crate::objectives::{self, LossNodes, LossParts, Mode};
use crate::rng::{purpose, stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseHyper {
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub lr_decay_epoch: usize,
    pub lr1: f64,
}

impl Default for BaseHyper {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: 128,
            lr0: 0.1,
            lr_decay_epoch: 60,
            lr1: 0.01,
        }
    }
}

impl BaseHyper {
    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.lr_decay_epoch {
            self.lr0
        } else {
            self.lr1
        }
    }
}

/// Which parameter groups a novel session updates. Branches of earlier
/// sessions are always frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Trainable {
    pub trunk: bool,
    pub classifier: bool,
    pub branch: bool,
    pub indicator: bool,
    pub tau: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Self {
            trunk: true,
            classifier: true,
            branch: true,
            indicator: true,
            tau: true,
        }
    }
}

impl Trainable {
    /// Only the retention rate moves.
    pub fn tau_only() -> Self {
        Self {
            trunk: false,
            classifier: false,
            branch: false,
            indicator: false,
            tau: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionHyper {
    pub lr: f64,
    pub max_epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Target magnitude `N` of the learnable indicator logits.
    pub push_target: f64,
    pub temperature: f64,
    /// Stop at the first epoch where novel-class accuracy reaches old-class
    /// accuracy.
    pub stop_when_novel_reaches_old: bool,
    pub trainable: Trainable,
}

impl Default for SessionHyper {
    fn default() -> Self {
        Self {
            lr: 0.01,
            max_epochs: 200,
            lambda1: 1.0,
            lambda2: 1.0,
            push_target: objectives::DEFAULT_PUSH_TARGET,
            temperature: objectives::DEFAULT_TEMPERATURE,
            stop_when_novel_reaches_old: true,
            trainable: Trainable::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub base: BaseHyper,
    pub session: SessionHyper,
    pub gamma: f64,
    pub expansion: ExpansionInit,
    pub probe_size: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            base: BaseHyper::default(),
            session: SessionHyper::default(),
            gamma: 0.8,
            expansion: ExpansionInit::default(),
            probe_size: metrics::DEFAULT_PROBE_SIZE,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(alloc::format!("hyper-parameters: {m}")));
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.base.lr0) || !positive(self.base.lr1) || !positive(self.session.lr) {
            return bad("learning rates must be positive");
        }
        if self.base.batch == 0 {
            return bad("batch size must be at least 1");
        }
        if self.base.epochs > 0 && self.base.lr_decay_epoch >= self.base.epochs {
            return bad("lr decay epoch must precede the last base epoch");
        }
        if self.session.lambda1 < 0.0 || self.session.lambda2 < 0.0 {
            return bad("regularization factors must be nonnegative");
        }
        if !positive(self.session.temperature) || !positive(self.session.push_target) {
            return bad("temperature and push target must be positive");
        }
        if !(self.expansion.weight_scale >= 0.0 && self.expansion.weight_scale.is_finite()) {
            return bad("branch weight scale must be nonnegative");
        }
        if !positive(self.gamma) {
            return bad("gamma must be positive");
        }
        if self.probe_size == 0 {
            return bad("probe size must be at least 1");
        }
        Ok(())
    }
}

/// Log row of one base epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub test_acc: Option<f64>,
}

/// Log row of one novel-session epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEpoch {
    pub epoch: usize,
    pub beta: f64,
    pub loss_total: f64,
    pub loss: LossParts,
    pub acc_all: f64,
    pub acc_old: f64,
    pub acc_novel: f64,
    pub drift: Option<f64>,
    /// Mean indicator per branch on the session's training inputs.
    pub sparsity: Vec<f64>,
    pub tau: Vec<f64>,
    /// `max |α − round(α)|` of the session's branch on its training inputs.
    pub vertex_distance: Option<f64>,
}

/// Final accuracy row of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionFinal {
    pub session: usize,
    pub epochs_run: usize,
    pub acc_all: f64,
    pub acc_old: Option<f64>,
    pub acc_novel: Option<f64>,
    pub drift: f64,
    pub sparsity: Vec<f64>,
    pub tau: Vec<f64>,
    pub vertex_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub seed: u64,
    pub hyper: HyperParams,
    pub arch: Architecture,
    pub rows: Vec<MetricRow>,
    pub finals: Vec<SessionFinal>,
}

/// Gradient step on every trainable node; τ is clamped to `[0, 1]`.
fn apply_sgd(
    model: &mut ModelState,
    tape: &Tape,
    bindings: &Bindings,
    grads: &BTreeMap<NodeId, Tensor>,
    lr: f64,
) -> Result<()> {
    let mut params = BTreeMap::new();
    let mut g = BTreeMap::new();
    for (r, id) in bindings.iter() {
        if let Some(grad) = grads.get(&id) {
            params.insert(r, tape.value(id).clone());
            g.insert(r, grad.clone());
        }
    }
    if params.is_empty() {
        return Ok(());
    }
    for (r, v) in sgd_step(&params, &g, lr)? {
        let v = match r {
            ParamRef::BranchTau(_) => Tensor::scalar(v.data()[0].clamp(0.0, 1.0)),
            _ => v,
        };
        model.set_param(r, v)?;
    }
    Ok(())
}

fn accuracy_on(model: &ModelState, set: &Samples) -> Result<Option<f64>> {
    match set.matrix() {
        None => Ok(None),
        Some(x) => Ok(Some(metrics::accuracy(&model.predict(x)?, &set.labels)?)),
    }
}

/// Trains the session-0 network on `L_c` with mini-batch SGD.
///
/// Batches are reshuffled every epoch from the hyper-parameter seed; the
/// learning rate drops from `lr0` to `lr1` at `lr_decay_epoch`.
pub fn train_base(
    model: &mut ModelState,
    train: &Samples,
    test: Option<&Samples>,
    hyper: &HyperParams,
) -> Result<Vec<BaseEpoch>> {
    train_base_observed(model, train, test, hyper, |_, _| Ok(()))
}

fn train_base_observed(
    model: &mut ModelState,
    train: &Samples,
    test: Option<&Samples>,
    hyper: &HyperParams,
    mut observe: impl FnMut(usize, &ModelState) -> Result<()>,
) -> Result<Vec<BaseEpoch>> {
    let x = train.matrix().ok_or(Error::EmptyDataset)?;
    if !model.branches.is_empty() || model.sessions_completed > 0 {
        return Err(Error::InvalidConfig(
            "base training needs a fresh session-0 model".into(),
        ));
    }
    let n = train.len();
    let mut rng = stream(hyper.seed, purpose::SHUFFLE);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(hyper.base.epochs);
    for epoch in 0..hyper.base.epochs {
        let lr = hyper.base.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(hyper.base.batch) {
            let xb = x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let mut tape = Tape::new();
            let b = model.bind(&mut tape, |_| true);
            let xi = tape.input(xb);
            let nodes = model.forward_base_on(&mut tape, &b, xi)?;
            let loss = objectives::cross_entropy(&mut tape, nodes.logits, &yb)?;
            loss_sum += tape.value(loss).data()[0] * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            apply_sgd(model, &tape, &b, &grads, lr)?;
        }
        let test_acc = match test {
            Some(t) => accuracy_on(model, t)?,
            None => None,
        };
        observe(epoch, model)?;
        log.push(BaseEpoch {
            epoch,
            lr,
            loss: loss_sum / n as f64,
            test_acc,
        });
    }
    Ok(log)
}

fn is_trainable(model: &ModelState, mode: Mode, flags: &Trainable, r: ParamRef) -> bool {
    match r {
        ParamRef::TrunkWeight(_) | ParamRef::TrunkBias(_) => flags.trunk,
        ParamRef::ClassifierWeight(_) | ParamRef::ClassifierBias(_) => flags.classifier,
        ParamRef::BranchWeight(u) | ParamRef::BranchBias(u) => model.branch_is_open(u) && flags.branch,
        ParamRef::BranchIndicator(u) => model.branch_is_open(u) && flags.indicator,
        // τ is learnable only under the retention hinge.
        ParamRef::BranchTau(u) => model.branch_is_open(u) && flags.tau && mode == Mode::Sa,
    }
}

/// Observed quantities of one session evaluation.
struct Evaluation {
    acc_all: f64,
    acc_old: f64,
    acc_novel: f64,
    drift: Option<f64>,
    sparsity: Vec<f64>,
    tau: Vec<f64>,
    vertex_distance: Option<f64>,
}

fn evaluate_session(model: &ModelState, session: &Session, probe: Option<&ProbeSet>) -> Result<Evaluation> {
    let test = &session.cumulative_test;
    let x = test.matrix().ok_or(Error::EmptyDataset)?;
    let pred = model.predict(x)?;
    let split_acc = |keep: &dyn Fn(usize) -> bool| -> Result<f64> {
        let (p, l): (Vec<usize>, Vec<usize>) = pred
            .iter()
            .zip(&test.labels)
            .filter(|(_, l)| keep(**l))
            .map(|(p, l)| (*p, *l))
            .unzip();
        if p.is_empty() {
            Ok(0.0)
        } else {
            metrics::accuracy(&p, &l)
        }
    };
    let start = session.classes.start;
    let acc_old = split_acc(&|l| l < start)?;
    let acc_novel = split_acc(&|l| session.classes.contains(&l))?;
    let acc_all = metrics::accuracy(&pred, &test.labels)?;
    let drift = match probe {
        Some(p) => Some(metrics::drift(Some(p), model)?),
        None => None,
    };
    let (sparsity, vertex_distance) = match session.train.matrix() {
        Some(tx) if !model.branches.is_empty() => {
            let alphas = model.indicators(tx)?;
            let sp = alphas
                .iter()
                .map(|a| metrics::sparsity(a.data()))
                .collect::<Result<Vec<_>>>()?;
            let open = model.branches.len() - 1;
            let vd = model
                .branch_is_open(open)
                .then(|| metrics::vertex_distance(alphas[open].data()));
            (sp, vd)
        }
        _ => (Vec::new(), None),
    };
    Ok(Evaluation {
        acc_all,
        acc_old,
        acc_novel,
        drift,
        sparsity,
        tau: model.branches.iter().map(|b| b.tau).collect(),
        vertex_distance,
    })
}

/// Trains one novel session on its full `N·K` batch.
///
/// Each epoch is one step at `β = 1 + epoch`, followed by an evaluation on
/// the cumulative test set. Training stops at `max_epochs` or, when enabled,
/// at the first epoch whose novel-class accuracy reaches the old-class
/// accuracy. The session's branch keeps the β of its last epoch.
pub fn train_session(
    model: &mut ModelState,
    session: &Session,
    hyper: &HyperParams,
    mode: Mode,
    probe: Option<&ProbeSet>,
) -> Result<Vec<SessionEpoch>> {
    let t = model.current_session();
    if t == 0 {
        return Err(Error::InvalidConfig("novel sessions start at index 1".into()));
    }
    if model.classifier.len() != t + 1 {
        return Err(Error::InvalidConfig(alloc::format!(
            "session {t} has not been expanded"
        )));
    }
    let open_branch = model
        .branches
        .last()
        .filter(|b| b.session == t)
        .map(|_| model.branches.len() - 1);
    if mode != Mode::Baseline && open_branch.is_none() {
        return Err(Error::NoBranch);
    }
    let x = session.train.matrix().ok_or(Error::EmptyDataset)?;
    let labels = &session.train.labels;
    let frozen = model.frozen_forward(x)?;
    let sh = &hyper.session;
    let mut log = Vec::new();

    for epoch in 0..sh.max_epochs {
        let beta = 1.0 + epoch as f64;
        let mut tape = Tape::new();
        let flags = sh.trainable;
        let b = model.bind(&mut tape, |r| is_trainable(model, mode, &flags, r));
        let xi = tape.input(x.clone());
        let nodes = if model.branches.is_empty() {
            model.forward_base_on(&mut tape, &b, xi)?
        } else {
            model.forward_session_on(&mut tape, &b, xi, epoch)?
        };
        let lc = objectives::cross_entropy(&mut tape, nodes.logits, labels)?;
        let old_blocks = &nodes.block_logits[..t];
        let old_logits = if old_blocks.len() == 1 {
            old_blocks[0]
        } else {
            tape.concat(old_blocks)?
        };
        let ld = objectives::distillation(&mut tape, old_logits, &frozen, sh.temperature)?;
        let mut parts = LossNodes {
            classification: Some(lc),
            distillation: Some(ld),
            ..Default::default()
        };
        if let Some(u) = open_branch {
            let bn = &nodes.branches[u];
            match mode {
                Mode::Nc => {
                    let s = bn.indicator_logits.ok_or(Error::NotLearnable { branch: u })?;
                    let alpha = bn.alpha.ok_or(Error::NotLearnable { branch: u })?;
                    parts.push = Some(objectives::l1_push(&mut tape, s, sh.push_target)?);
                    parts.budget = Some(objectives::l2_budget(&mut tape, alpha, bn.tau)?);
                }
                Mode::Sa => {
                    let alpha = bn.alpha.ok_or(Error::NoBranch)?;
                    parts.retention = Some(objectives::retention_loss(&mut tape, alpha, bn.tau)?);
                }
                _ => {}
            }
        }
        let total = objectives::total_objective(&mut tape, mode, t, &parts, sh.lambda1, sh.lambda2)?;
        let value = |n: Option<NodeId>| n.map_or(0.0, |n| tape.value(n).data()[0]);
        let loss = LossParts {
            classification: value(parts.classification),
            distillation: value(parts.distillation),
            push: value(parts.push),
            budget: value(parts.budget),
            retention: value(parts.retention),
            lambda1: sh.lambda1,
            lambda2: sh.lambda2,
        };
        let loss_total = tape.value(total).data()[0];
        let grads = tape.backward(total)?;
        apply_sgd(model, &tape, &b, &grads, sh.lr)?;
        if let Some(u) = open_branch {
            model.branches[u].beta = beta;
        }

        let ev = evaluate_session(model, session, probe)?;
        let stop = sh.stop_when_novel_reaches_old && ev.acc_novel >= ev.acc_old;
        log.push(SessionEpoch {
            epoch,
            beta,
            loss_total,
            loss,
            acc_all: ev.acc_all,
            acc_old: ev.acc_old,
            acc_novel: ev.acc_novel,
            drift: ev.drift,
            sparsity: ev.sparsity,
            tau: ev.tau,
            vertex_distance: ev.vertex_distance,
        });
        if stop {
            break;
        }
    }
    Ok(log)
}

/// Runs the whole protocol: base session, then expansion (except for the
/// baseline) and training of every novel session, evaluating after each
/// epoch.
pub fn run_protocol(
    stream_: &SessionStream,
    arch: &Architecture,
    hyper: &HyperParams,
    mode: Mode,
) -> Result<RunReport> {
    run_protocol_with_model(stream_, arch, hyper, mode).map(|(_, r)| r)
}

/// As [`run_protocol`], also returning the final model.
pub fn run_protocol_with_model(
    stream_: &SessionStream,
    arch: &Architecture,
    hyper: &HyperParams,
    mode: Mode,
) -> Result<(ModelState, RunReport)> {
    hyper.validate()?;
    if arch.input_dim != stream_.dim {
        return Err(Error::InputDim {
            expected: arch.input_dim,
            actual: stream_.dim,
        });
    }
    let seed = hyper.seed;
    let base = stream_.sessions.first().ok_or(Error::EmptyDataset)?;
    let mut model = ModelState::init(arch.clone(), base.classes.len(), hyper.gamma, seed)?;
    model.expansion = hyper.expansion;
    let mut rows = Vec::new();
    let mut finals = Vec::new();

    // Session 0: drift of every epoch is measured against the final base
    // model, so probe features are kept per epoch.
    let base_test = &base.cumulative_test;
    let mut probe_inputs: Option<Tensor> = None;
    let mut epoch_features: Vec<Tensor> = Vec::new();
    let probe_rows = ProbeSet::build(&model, base_test, hyper.probe_size, seed)?;
    let base_log = train_base_observed(&mut model, &base.train, Some(base_test), hyper, |_, m| {
        let x = probe_inputs.get_or_insert_with(|| probe_rows.inputs().clone());
        epoch_features.push(m.features(x)?);
        Ok(())
    })?;
    let probe = ProbeSet::build(&model, base_test, hyper.probe_size, seed)?;
    for (e, f) in base_log.iter().zip(&epoch_features) {
        rows.push(MetricRow {
            session: 0,
            epoch: e.epoch,
            split: Split::All,
            acc: e.test_acc.unwrap_or(0.0),
            drift: metrics::drift_against(&probe, f)?,
            sparsity: Vec::new(),
            tau: Vec::new(),
            loss_total: e.loss,
            loss: LossParts {
                classification: e.loss,
                ..Default::default()
            },
        });
    }
    finals.push(SessionFinal {
        session: 0,
        epochs_run: base_log.len(),
        acc_all: accuracy_on(&model, base_test)?.unwrap_or(0.0),
        acc_old: None,
        acc_novel: None,
        drift: metrics::drift(Some(&probe), &model)?,
        sparsity: Vec::new(),
        tau: Vec::new(),
        vertex_distance: None,
    });
    model.complete_session();

    for (t, session) in stream_.sessions.iter().enumerate().skip(1) {
        model.expand(session.classes.len(), mode, seed)?;
        let log = train_session(&mut model, session, hyper, mode, Some(&probe))?;
        for e in &log {
            for (split, acc) in [
                (Split::Old, e.acc_old),
                (Split::Novel, e.acc_novel),
                (Split::All, e.acc_all),
            ] {
                rows.push(MetricRow {
                    session: t,
                    epoch: e.epoch,
                    split,
                    acc,
                    drift: e.drift.unwrap_or(0.0),
                    sparsity: e.sparsity.clone(),
                    tau: e.tau.clone(),
                    loss_total: e.loss_total,
                    loss: e.loss,
                });
            }
        }
        let ev = evaluate_session(&model, session, Some(&probe))?;
        finals.push(SessionFinal {
            session: t,
            epochs_run: log.len(),
            acc_all: ev.acc_all,
            acc_old: Some(ev.acc_old),
            acc_novel: Some(ev.acc_novel),
            drift: ev.drift.unwrap_or(0.0),
            sparsity: ev.sparsity,
            tau: ev.tau,
            vertex_distance: ev.vertex_distance,
        });
        model.complete_session();
    }
    let report = RunReport {
        mode,
        seed,
        hyper: hyper.clone(),
        arch: arch.clone(),
        rows,
        finals,
    };
    Ok((model, report))
}

/// Argmax predictions of `model` on a sample set.
pub fn predictions(model: &ModelState, set: &Samples) -> Result<Vec<usize>> {
    match set.matrix() {
        Some(x) => Ok(argmax_rows(&model.logits(x)?)),
        None => Ok(vec![]),
    }
}
