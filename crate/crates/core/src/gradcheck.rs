//! Finite-difference oracles for the closed-form indicator gradients and a
//! Taylor-remainder test of the first-order indicator update
//! `Δα ≈ G₁ + G₂ + G₃`.
//!
//! Relative errors use `|a − b| / max(|a|, |b|, 1e-8 / tol)`, so a check at
//! tolerance `tol` demands relative agreement for large gradients and an
//! absolute agreement of `1e-8` near zero.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sgd_step, sigmoid, sigmoid_slope, NodeId, Tape};
use crate::model::{Architecture, IndicatorMode, ModelState, ParamRef};
use crate::objectives::{self, Mode};
use crate::rng::{purpose, stream, Rng as StreamRng};
use crate::tensor::Tensor;

/// Central-difference step used by the checks.
pub const FD_STEP: f64 = 1e-5;
/// Absolute agreement demanded near zero.
pub const ABS_FLOOR: f64 = 1e-8;
/// Indicator logits closer than this to 0 are excluded (kink of `|s|`).
pub const KINK_MARGIN: f64 = 1e-3;

pub const TOL_PUSH: f64 = 1e-6;
pub const TOL_BUDGET: f64 = 1e-6;
pub const TOL_FUSION: f64 = 1e-5;
pub const TOL_OPS: f64 = 1e-6;
/// Allowed `|ratio − 4| / 4` of the Taylor remainder under halving.
pub const TOL_TAYLOR: f64 = 0.125;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub points: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub notes: String,
}

impl CheckReport {
    pub fn new(name: &str, points: usize, max_rel_err: f64, tolerance: f64, notes: String) -> Self {
        Self {
            name: name.into(),
            points,
            max_rel_err,
            tolerance,
            pass: max_rel_err < tolerance,
            notes,
        }
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8 / tol)`.
pub fn rel_err(a: f64, b: f64, tolerance: f64) -> f64 {
    let scale = libm::fabs(a).max(libm::fabs(b)).max(ABS_FLOOR / tolerance);
    libm::fabs(a - b) / scale
}

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` per coordinate.
pub fn fd_gradient(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidConfig(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteEvaluation { index: i });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

fn scalar_of(tape: &Tape, n: NodeId) -> f64 {
    tape.value(n).data()[0]
}

// ---------------------------------------------------------------- (i) push

fn push_value(s: f64, target: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::scalar(s));
    let l = objectives::l1_push(&mut tape, p, target)?;
    Ok(scalar_of(&tape, l))
}

/// `∂L_1/∂s_i = 2(|s_i| − N)·sign(s_i)` against finite differences and the
/// tape, one coordinate at a time. Points within the kink margin are skipped.
pub fn check_push_gradient(samples: &[f64], target: f64, tolerance: f64) -> Result<CheckReport> {
    let mut worst = 0.0f64;
    let mut tested = 0;
    for &s in samples {
        if libm::fabs(s) < KINK_MARGIN {
            continue;
        }
        let analytic = 2.0 * (libm::fabs(s) - target) * s.signum();
        let fd = fd_gradient(|v| push_value(v[0], target), &[s], FD_STEP)?[0];
        let mut tape = Tape::new();
        let p = tape.param(Tensor::scalar(s));
        let l = objectives::l1_push(&mut tape, p, target)?;
        let ad = tape.backward_to(l, &[p])?[0].data()[0];
        worst = worst.max(rel_err(analytic, fd, tolerance)).max(rel_err(analytic, ad, tolerance));
        tested += 1;
    }
    let notes = format!("N = {target}; {} point(s) inside the kink margin skipped", samples.len() - tested);
    Ok(CheckReport::new("push_gradient", tested, worst, tolerance, notes))
}

// -------------------------------------------------------------- (ii) budget

fn budget_value(s: &[f64], tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::new(vec![1, s.len()], s.to_vec())?);
    let alpha = tape.sigmoid(p)?;
    let t = tape.input(Tensor::scalar(tau));
    let l = objectives::l2_budget(&mut tape, alpha, t)?;
    Ok(scalar_of(&tape, l))
}

/// Outcome of one budget configuration.
enum BudgetCase {
    Excluded,
    Active(f64),
    Inactive(f64),
}

fn budget_case(s: &[f64], tau: f64, tolerance: f64) -> Result<BudgetCase> {
    let c = s.len() as f64;
    let mean = s.iter().map(|v| sigmoid(*v)).sum::<f64>() / c;
    if libm::fabs(mean - tau) < 10.0 * FD_STEP {
        return Ok(BudgetCase::Excluded);
    }
    let fd = fd_gradient(|v| budget_value(v, tau), s, FD_STEP)?;
    let mut tape = Tape::new();
    let p = tape.param(Tensor::new(vec![1, s.len()], s.to_vec())?);
    let alpha = tape.sigmoid(p)?;
    let t = tape.input(Tensor::scalar(tau));
    let l = objectives::l2_budget(&mut tape, alpha, t)?;
    let ad = tape.backward_to(l, &[p])?.remove(0);
    if mean > tau {
        let mut worst = 0.0f64;
        for i in 0..s.len() {
            let analytic = sigmoid_slope(s[i]) / c;
            worst = worst
                .max(rel_err(analytic, fd[i], tolerance))
                .max(rel_err(analytic, ad.data()[i], tolerance));
        }
        Ok(BudgetCase::Active(worst))
    } else {
        let exact = fd.iter().chain(ad.data()).all(|g| *g == 0.0);
        Ok(BudgetCase::Inactive(if exact { 0.0 } else { 1.0 }))
    }
}

fn budget_report(cases: impl IntoIterator<Item = Result<BudgetCase>>, tolerance: f64) -> Result<CheckReport> {
    let (mut active, mut inactive, mut excluded, mut worst) = (0, 0, 0, 0.0f64);
    for case in cases {
        match case? {
            BudgetCase::Excluded => excluded += 1,
            BudgetCase::Active(e) => {
                active += 1;
                worst = worst.max(e);
            }
            BudgetCase::Inactive(e) => {
                inactive += 1;
                worst = worst.max(e);
            }
        }
    }
    let notes = format!("{active} active, {inactive} inactive, {excluded} in the boundary band");
    Ok(CheckReport::new("budget_gradient", active + inactive, worst, tolerance, notes))
}

/// `∂L_2/∂s_i = σ(s_i)(1 − σ(s_i))/c` on the active side of the hinge and
/// exactly 0 on the inactive side. Configurations whose mean indicator lies
/// within `10h` of `τ` are skipped.
pub fn check_budget_gradient(samples: &[Vec<f64>], tau: f64, tolerance: f64) -> Result<CheckReport> {
    budget_report(samples.iter().map(|s| budget_case(s, tau, tolerance)), tolerance)
}

// -------------------------------------------------------------- (iii) fusion

/// `∂L_c/∂s` of a learnable-indicator model computed three ways.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreeWay {
    /// Assembled from `∂L_c/∂f″`, `f′` and `σ′(s)`.
    pub analytic: Vec<f64>,
    pub autodiff: Vec<f64>,
    pub finite_difference: Vec<f64>,
}

fn learnable_branch(model: &ModelState) -> Result<()> {
    match model.branches.as_slice() {
        [b] if b.mode == IndicatorMode::Learnable => Ok(()),
        [] => Err(Error::NoBranch),
        _ => Err(Error::NotLearnable { branch: 0 }),
    }
}

fn fusion_loss(model: &ModelState, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, |_| false);
    let xi = tape.input(x.clone());
    let n = model.forward_with_betas_on(&mut tape, &b, xi, &[model.branches[0].beta])?;
    let l = objectives::cross_entropy(&mut tape, n.logits, labels)?;
    Ok(scalar_of(&tape, l))
}

pub fn fusion_gradients(model: &ModelState, x: &Tensor, labels: &[usize]) -> Result<ThreeWay> {
    learnable_branch(model)?;
    let s_ref = ParamRef::BranchIndicator(0);
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, |r| r == s_ref);
    let xi = tape.input(x.clone());
    let n = model.forward_with_betas_on(&mut tape, &b, xi, &[model.branches[0].beta])?;
    let lc = objectives::cross_entropy(&mut tape, n.logits, labels)?;
    let s_node = b.node(s_ref);
    let mut g = tape.backward_to(lc, &[n.fused, s_node])?;
    let autodiff = g.pop().expect("two targets").into_data();
    let d_fused = g.pop().expect("two targets");
    let feature = tape.value(n.branches[0].feature);
    let s = tape.value(s_node).data().to_vec();
    let c = s.len();
    let rows = feature.outer_len();
    let analytic = (0..c)
        .map(|i| {
            let upstream: f64 = (0..rows).map(|r| d_fused.at(r, i) * feature.at(r, i)).sum();
            upstream * sigmoid_slope(s[i])
        })
        .collect();
    let finite_difference = fd_gradient(
        |v| {
            let mut m = model.clone();
            m.set_param(s_ref, Tensor::new(vec![1, c], v.to_vec())?)?;
            fusion_loss(&m, x, labels)
        },
        &s,
        FD_STEP,
    )?;
    Ok(ThreeWay {
        analytic,
        autodiff,
        finite_difference,
    })
}

fn three_way_error(g: &ThreeWay, tolerance: f64) -> f64 {
    (0..g.analytic.len())
        .map(|i| {
            let (a, d, f) = (g.analytic[i], g.autodiff[i], g.finite_difference[i]);
            rel_err(a, d, tolerance).max(rel_err(a, f, tolerance)).max(rel_err(d, f, tolerance))
        })
        .fold(0.0, f64::max)
}

/// Three-way agreement of `∂L_c/∂s_i = (∂L_c/∂f″)·f′_i·σ′(s_i)` for a model
/// with one learnable-indicator branch.
pub fn check_fusion_gradient(model: &ModelState, x: &Tensor, labels: &[usize], tolerance: f64) -> Result<CheckReport> {
    let g = fusion_gradients(model, x, labels)?;
    let notes = String::from("analytic vs autodiff vs finite differences");
    Ok(CheckReport::new(
        "fusion_gradient",
        g.analytic.len(),
        three_way_error(&g, tolerance),
        tolerance,
        notes,
    ))
}

// ------------------------------------------------------- (iv)-(vii) Taylor

/// One indicator coordinate of a tentative step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionSample {
    pub coordinate: usize,
    /// Branch output `f′_i` before the step.
    pub feature: f64,
    /// Measured change after the β increment and one SGD step on the branch.
    pub delta_alpha: f64,
    /// β-increment term `ζ(βf′_i)·f′_i·Δβ`.
    pub g1: f64,
    /// Classification term.
    pub g2: f64,
    /// Retention term; zero when the hinge is inactive.
    pub g3: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub samples: Vec<DecompositionSample>,
    pub hinge_active: bool,
    /// Euclidean norm of the residuals.
    pub residual_norm: f64,
    /// Euclidean norm of the measured change.
    pub delta_norm: f64,
    /// Residual norm when the classification term is read with an inner
    /// product over all coordinates instead of coordinate-wise.
    pub vector_reading_residual_norm: f64,
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    libm::sqrt(v.map(|x| x * x).sum())
}

fn sa_branch(model: &ModelState) -> Result<()> {
    match model.branches.as_slice() {
        [b] if b.mode == IndicatorMode::SelfActivated => Ok(()),
        [] => Err(Error::NoBranch),
        _ => Err(Error::InvalidConfig(
            "the decomposition needs exactly one self-activated branch".into(),
        )),
    }
}

fn alpha_at(model: &ModelState, x: &Tensor, beta: f64) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, |_| false);
    let xi = tape.input(x.clone());
    let n = model.forward_with_betas_on(&mut tape, &b, xi, &[beta])?;
    let a = n.branches[0].alpha.ok_or(Error::NoBranch)?;
    Ok(tape.value(a).data().to_vec())
}

/// First-order decomposition of the indicator change caused by `β → β + Δβ`
/// and one SGD step of size `lr` on the branch parameters under
/// `L_c + λ₂·L_R`, for a single input.
///
/// With `f′ = h·W′ + b′` the step moves `f′_i` by
/// `−lr·(‖h‖² + 1)·∂L/∂f′_i`, which gives
/// `G₁ = ζ_i·f′_i·Δβ`,
/// `G₂ = −lr·β·ζ_i·(‖h‖² + 1)·(∂L_c/∂f″_i)·(β·ζ_i·f′_i + σ_i)` and
/// `G₃ = −lr·λ₂·β²·ζ_i²·(‖h‖² + 1)/c` while `mean α > τ`, where
/// `σ_i = σ(βf′_i)` and `ζ_i = σ_i(1 − σ_i)`.
#[allow(clippy::too_many_arguments)]
pub fn decompose_delta_alpha(
    model: &ModelState,
    x: &Tensor,
    label: usize,
    beta: f64,
    delta_beta: f64,
    lr: f64,
    lambda2: f64,
) -> Result<Decomposition> {
    sa_branch(model)?;
    if x.rank() != 2 || x.shape()[0] != 1 {
        return Err(Error::InvalidConfig("the decomposition takes a single input row".into()));
    }
    if !(0.0..=0.1).contains(&delta_beta) || !(lr > 0.0 && lr <= 1e-3) {
        return Err(Error::InvalidConfig(format!(
            "steps outside the first-order regime: Δβ = {delta_beta}, lr = {lr}"
        )));
    }
    let (w_ref, b_ref) = (ParamRef::BranchWeight(0), ParamRef::BranchBias(0));
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, |r| r == w_ref || r == b_ref);
    let xi = tape.input(x.clone());
    let n = model.forward_with_betas_on(&mut tape, &b, xi, &[beta])?;
    let lc = objectives::cross_entropy(&mut tape, n.logits, &[label])?;
    let bn = &n.branches[0];
    let alpha_node = bn.alpha.ok_or(Error::NoBranch)?;
    let retention = objectives::retention_loss(&mut tape, alpha_node, bn.tau)?;
    let weighted = tape.scale(retention, lambda2)?;
    let total = tape.add(lc, weighted)?;
    let grads = tape.backward_to(total, &[b.node(w_ref), b.node(b_ref)])?;
    let d_fused = tape.backward_to(lc, &[n.fused])?.remove(0);

    let h = tape.value(n.hidden).data();
    let lift = h.iter().map(|v| v * v).sum::<f64>() + 1.0;
    let fp = tape.value(bn.feature).data().to_vec();
    let alpha = tape.value(alpha_node).data().to_vec();
    let c = fp.len();
    let active = scalar_of(&tape, retention) > 0.0;

    let zeta: Vec<f64> = fp.iter().map(|f| sigmoid_slope(beta * f)).collect();
    let chain: Vec<f64> = (0..c)
        .map(|i| d_fused.data()[i] * (beta * zeta[i] * fp[i] + alpha[i]))
        .collect();
    let g1: Vec<f64> = (0..c).map(|i| zeta[i] * fp[i] * delta_beta).collect();
    let g2: Vec<f64> = (0..c).map(|i| -lr * beta * zeta[i] * lift * chain[i]).collect();
    let g3: Vec<f64> = (0..c)
        .map(|i| {
            if active {
                -lr * lambda2 * beta * beta * zeta[i] * zeta[i] * lift / c as f64
            } else {
                0.0
            }
        })
        .collect();
    let chain_dot: f64 = chain.iter().sum();
    let g2_vector: Vec<f64> = (0..c).map(|i| -lr * beta * zeta[i] * lift * chain_dot).collect();

    let mut params = alloc::collections::BTreeMap::new();
    let mut g = alloc::collections::BTreeMap::new();
    params.insert(w_ref, model.param(w_ref));
    params.insert(b_ref, model.param(b_ref));
    g.insert(w_ref, grads[0].clone());
    g.insert(b_ref, grads[1].clone());
    let mut stepped = model.clone();
    for (r, v) in sgd_step(&params, &g, lr)? {
        stepped.set_param(r, v)?;
    }
    let after = alpha_at(&stepped, x, beta + delta_beta)?;

    let samples: Vec<DecompositionSample> = (0..c)
        .map(|i| {
            let delta_alpha = after[i] - alpha[i];
            DecompositionSample {
                coordinate: i,
                feature: fp[i],
                delta_alpha,
                g1: g1[i],
                g2: g2[i],
                g3: g3[i],
                residual: delta_alpha - (g1[i] + g2[i] + g3[i]),
            }
        })
        .collect();
    if samples.iter().any(|s| !(s.delta_alpha.is_finite() && s.residual.is_finite())) {
        return Err(Error::NonFiniteEvaluation { index: 0 });
    }
    let residual_norm = norm(samples.iter().map(|s| s.residual));
    let delta_norm = norm(samples.iter().map(|s| s.delta_alpha));
    let vector_reading_residual_norm = norm(samples.iter().map(|s| s.delta_alpha - (s.g1 + g2_vector[s.coordinate] + s.g3)));
    Ok(Decomposition {
        samples,
        hinge_active: active,
        residual_norm,
        delta_norm,
        vector_reading_residual_norm,
    })
}

/// Decompositions at `(Δβ, lr)` and `(Δβ/2, lr/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorCheck {
    pub full: Decomposition,
    pub half: Decomposition,
    /// Residual norm at the full step over the residual norm at the half step;
    /// close to 4 for a second-order remainder.
    pub ratio: f64,
}

/// Runs [`decompose_delta_alpha`] at two resolutions.
///
/// Fails with [`Error::StepTooLarge`] when the residual exceeds half of the
/// measured change at the full step.
#[allow(clippy::too_many_arguments)]
pub fn taylor_check(
    model: &ModelState,
    x: &Tensor,
    label: usize,
    beta: f64,
    delta_beta: f64,
    lr: f64,
    lambda2: f64,
) -> Result<TaylorCheck> {
    let full = decompose_delta_alpha(model, x, label, beta, delta_beta, lr, lambda2)?;
    if full.residual_norm > 0.5 * full.delta_norm {
        return Err(Error::StepTooLarge {
            ratio: full.residual_norm / full.delta_norm,
        });
    }
    let half = decompose_delta_alpha(model, x, label, beta, delta_beta / 2.0, lr / 2.0, lambda2)?;
    let ratio = full.residual_norm / half.residual_norm;
    Ok(TaylorCheck { full, half, ratio })
}

// ------------------------------------------------------------------ sweeps

fn uniform_tensor(rng: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite draws")
}

const SWEEP_ARCH_INPUT: usize = 6;
const SWEEP_ARCH_HIDDEN: usize = 10;
const SWEEP_C: usize = 8;

/// Small one-branch model with randomized branch parameters.
fn sweep_model(rng: &mut StreamRng, mode: Mode, seed: u64) -> Result<ModelState> {
    let arch = Architecture {
        input_dim: SWEEP_ARCH_INPUT,
        hidden_dims: vec![SWEEP_ARCH_HIDDEN],
        feature_dim: SWEEP_C,
    };
    let mut m = ModelState::init(arch, 3, 0.8, seed)?;
    m.complete_session();
    m.expand(2, mode, seed)?;
    m.set_param(
        ParamRef::BranchWeight(0),
        uniform_tensor(rng, &[SWEEP_ARCH_HIDDEN, SWEEP_C], -0.5, 0.5),
    )?;
    m.set_param(ParamRef::BranchBias(0), uniform_tensor(rng, &[SWEEP_C], -1.0, 1.0))?;
    if mode == Mode::Nc {
        m.set_param(ParamRef::BranchIndicator(0), uniform_tensor(rng, &[1, SWEEP_C], -4.0, 4.0))?;
    }
    m.set_param(ParamRef::BranchTau(0), Tensor::scalar(rng.random_range(0.05..0.95)))?;
    Ok(m)
}

/// [`check_push_gradient`] over `points` logits drawn from `[−20, 20]` outside
/// the kink margin.
pub fn push_sweep(seed: u64, points: usize, tolerance: f64) -> Result<CheckReport> {
    let mut rng = stream(seed, purpose::GRADCHECK);
    let mut samples = Vec::with_capacity(points);
    while samples.len() < points {
        let s: f64 = rng.random_range(-20.0..20.0);
        if libm::fabs(s) >= KINK_MARGIN {
            samples.push(s);
        }
    }
    // The minimum of each half-parabola.
    samples.extend([objectives::DEFAULT_PUSH_TARGET, -objectives::DEFAULT_PUSH_TARGET]);
    check_push_gradient(&samples, objectives::DEFAULT_PUSH_TARGET, tolerance)
}

/// [`check_budget_gradient`] over `configs` tested configurations of random width
/// `2..=16`, logits in `[−6, 6]` and `τ` in `[0.2, 0.8]`.
pub fn budget_sweep(seed: u64, configs: usize, tolerance: f64) -> Result<CheckReport> {
    let mut rng = stream(seed, purpose::GRADCHECK + 1);
    let mut cases = Vec::new();
    let mut tested = 0;
    while tested < configs {
        let c = rng.random_range(2..=16);
        let s: Vec<f64> = (0..c).map(|_| rng.random_range(-6.0..6.0)).collect();
        let tau = rng.random_range(0.2..0.8);
        let case = budget_case(&s, tau, tolerance)?;
        if !matches!(case, BudgetCase::Excluded) {
            tested += 1;
        }
        cases.push(Ok(case));
    }
    budget_report(cases, tolerance)
}

/// [`check_fusion_gradient`] over `models` random learnable-indicator models
/// (8 coordinates each) on random 5-sample batches.
pub fn fusion_sweep(seed: u64, models: usize, tolerance: f64) -> Result<CheckReport> {
    let mut rng = stream(seed, purpose::GRADCHECK + 2);
    let mut worst = 0.0f64;
    let mut points = 0;
    for k in 0..models {
        let m = sweep_model(&mut rng, Mode::Nc, seed.wrapping_add(k as u64))?;
        let x = uniform_tensor(&mut rng, &[5, SWEEP_ARCH_INPUT], -2.0, 2.0);
        let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..m.seen_classes())).collect();
        let g = fusion_gradients(&m, &x, &labels)?;
        worst = worst.max(three_way_error(&g, tolerance));
        points += g.analytic.len();
    }
    let notes = format!("{models} model(s), analytic vs autodiff vs finite differences");
    Ok(CheckReport::new("fusion_gradient", points, worst, tolerance, notes))
}

/// Aggregate of the Taylor test over random self-activated models.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorSweep {
    pub report: CheckReport,
    pub ratios: Vec<f64>,
    /// Coordinates tested with the hinge active.
    pub active_samples: usize,
    /// Active-hinge coordinates with `G₃ > 0`.
    pub g3_sign_violations: usize,
    /// Coordinates with `f′_i ≠ 0` where `sign(G₁) ≠ sign(f′_i)·sign(Δβ)`.
    pub g1_sign_violations: usize,
}

/// Taylor test over `models` random 8-dimensional self-activated models at
/// `Δβ = 0.05`, `lr = 1e-4`, `λ₂ = 1`, `β ∈ [1, 3]`.
///
/// The report's error is `max |ratio − 4| / 4`; a sign violation of G₁ or G₃
/// forces the error to 1.
pub fn taylor_sweep(seed: u64, models: usize) -> Result<TaylorSweep> {
    let (delta_beta, lr, lambda2) = (0.05, 1e-4, 1.0);
    let mut rng = stream(seed, purpose::GRADCHECK + 3);
    let mut ratios = Vec::with_capacity(models);
    let (mut active_samples, mut g3_bad, mut g1_bad) = (0, 0, 0);
    let mut vector_worse = 0;
    for k in 0..models {
        let m = sweep_model(&mut rng, Mode::Sa, seed.wrapping_add(k as u64))?;
        let x = uniform_tensor(&mut rng, &[1, SWEEP_ARCH_INPUT], -1.0, 1.0);
        let label = rng.random_range(0..m.seen_classes());
        let beta = rng.random_range(1.0..3.0);
        let t = taylor_check(&m, &x, label, beta, delta_beta, lr, lambda2)?;
        for s in &t.full.samples {
            if t.full.hinge_active {
                active_samples += 1;
                if s.g3 > 0.0 {
                    g3_bad += 1;
                }
            }
            if s.feature != 0.0 && s.g1.signum() != s.feature.signum() * f64::signum(delta_beta) {
                g1_bad += 1;
            }
        }
        if t.full.vector_reading_residual_norm > t.full.residual_norm {
            vector_worse += 1;
        }
        ratios.push(t.ratio);
    }
    let mut worst = ratios.iter().map(|r| libm::fabs(r - 4.0) / 4.0).fold(0.0, f64::max);
    if g3_bad + g1_bad > 0 {
        worst = worst.max(1.0);
    }
    let notes = format!(
        "{active_samples} active-hinge coordinate(s), {g3_bad} with G3 > 0; \
         vector reading of G2 leaves a larger residual in {vector_worse}/{models} model(s)"
    );
    Ok(TaylorSweep {
        report: CheckReport::new("taylor_decomposition", models, worst, TOL_TAYLOR, notes),
        ratios,
        active_samples,
        g3_sign_violations: g3_bad,
        g1_sign_violations: g1_bad,
    })
}

// -------------------------------------------------------------- op kinds

#[derive(Clone, Copy)]
enum Domain {
    Any,
    /// `[0.5, 2]`.
    Positive,
    /// `|x| ∈ [0.05, 2]`.
    AwayFromZero,
    /// `[−0.8, 0.8]`.
    Interior,
}

type Builder = fn(&mut Tape, &[NodeId]) -> Result<NodeId>;

struct OpCase {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    domain: Domain,
    build: Builder,
}

const OP_CASES: &[OpCase] = &[
    OpCase { name: "matmul", shapes: &[&[3, 4], &[4, 2]], domain: Domain::Any, build: |t, p| t.matmul(p[0], p[1]) },
    OpCase { name: "add", shapes: &[&[3, 4], &[3, 4]], domain: Domain::Any, build: |t, p| t.add(p[0], p[1]) },
    OpCase { name: "mul", shapes: &[&[3, 4], &[3, 4]], domain: Domain::Any, build: |t, p| t.mul(p[0], p[1]) },
    OpCase { name: "scale", shapes: &[&[3, 4]], domain: Domain::Any, build: |t, p| t.scale(p[0], -1.7) },
    OpCase { name: "add_scalar", shapes: &[&[3, 4]], domain: Domain::Any, build: |t, p| t.add_scalar(p[0], 0.3) },
    OpCase { name: "bias_add", shapes: &[&[3, 4], &[4]], domain: Domain::Any, build: |t, p| t.bias_add(p[0], p[1]) },
    OpCase { name: "relu", shapes: &[&[4, 4]], domain: Domain::AwayFromZero, build: |t, p| t.relu(p[0]) },
    OpCase { name: "sigmoid", shapes: &[&[4, 4]], domain: Domain::Any, build: |t, p| t.sigmoid(p[0]) },
    OpCase { name: "softmax", shapes: &[&[3, 5]], domain: Domain::Any, build: |t, p| t.softmax(p[0]) },
    OpCase { name: "log_softmax", shapes: &[&[3, 5]], domain: Domain::Any, build: |t, p| t.log_softmax(p[0]) },
    OpCase { name: "ln", shapes: &[&[4, 4]], domain: Domain::Positive, build: |t, p| t.ln(p[0]) },
    OpCase { name: "abs", shapes: &[&[4, 4]], domain: Domain::AwayFromZero, build: |t, p| t.abs(p[0]) },
    OpCase { name: "square", shapes: &[&[4, 4]], domain: Domain::Any, build: |t, p| t.square(p[0]) },
    OpCase { name: "sqrt", shapes: &[&[4, 4]], domain: Domain::Positive, build: |t, p| t.sqrt(p[0]) },
    OpCase { name: "acos", shapes: &[&[4, 4]], domain: Domain::Interior, build: |t, p| t.acos(p[0]) },
    OpCase { name: "sum", shapes: &[&[4, 4]], domain: Domain::Any, build: |t, p| t.sum(p[0]) },
    OpCase { name: "mean", shapes: &[&[4, 4]], domain: Domain::Any, build: |t, p| t.mean(p[0]) },
    OpCase { name: "concat", shapes: &[&[2, 3], &[2, 2], &[2, 1]], domain: Domain::Any, build: |t, p| t.concat(p) },
];

/// Names of the op kinds covered by [`check_ops`].
pub fn op_case_names() -> Vec<&'static str> {
    OP_CASES.iter().map(|c| c.name).collect()
}

fn draw(rng: &mut StreamRng, domain: Domain) -> f64 {
    match domain {
        Domain::Any => rng.random_range(-2.0..2.0),
        Domain::Positive => rng.random_range(0.5..2.0),
        Domain::AwayFromZero => {
            let m: f64 = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) { m } else { -m }
        }
        Domain::Interior => rng.random_range(-0.8..0.8),
    }
}

/// `sum(op(inputs) ⊙ w)` for fixed random `w`.
fn op_loss(case: &OpCase, inputs: &[Tensor], w: Option<&Tensor>) -> Result<(Tape, Vec<NodeId>, NodeId, Tensor)> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let out = (case.build)(&mut tape, &ids)?;
    let shape = tape.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = match w {
        Some(w) => w.clone(),
        None => {
            // Deterministic, non-degenerate weights.
            let data = (0..n).map(|i| 0.7 - 0.37 * (i % 5) as f64 + 0.11 * (i / 5) as f64).collect();
            Tensor::new(shape, data)?
        }
    };
    let wi = tape.input(w.clone());
    let prod = tape.mul(out, wi)?;
    let loss = tape.sum(prod)?;
    Ok((tape, ids, loss, w))
}

/// Every op kind's reverse-mode gradient against central differences on
/// random inputs, `trials` draws per op.
pub fn check_ops(seed: u64, trials: usize, tolerance: f64) -> Result<CheckReport> {
    let mut rng = stream(seed, purpose::GRADCHECK + 4);
    let mut worst = 0.0f64;
    let mut worst_op = "";
    let mut points = 0;
    for case in OP_CASES {
        for _ in 0..trials {
            let inputs: Vec<Tensor> = case
                .shapes
                .iter()
                .map(|s| {
                    let n = s.iter().product();
                    let data = (0..n).map(|_| draw(&mut rng, case.domain)).collect();
                    Tensor::new(s.to_vec(), data)
                })
                .collect::<Result<_>>()?;
            let (tape, ids, loss, w) = op_loss(case, &inputs, None)?;
            let grads = tape.backward_to(loss, &ids)?;
            for (k, input) in inputs.iter().enumerate() {
                let fd = fd_gradient(
                    |v| {
                        let mut perturbed = inputs.clone();
                        perturbed[k] = Tensor::new(input.shape().to_vec(), v.to_vec())?;
                        let (t, _, l, _) = op_loss(case, &perturbed, Some(&w))?;
                        Ok(scalar_of(&t, l))
                    },
                    input.data(),
                    FD_STEP,
                )?;
                for (a, f) in grads[k].data().iter().zip(&fd) {
                    let e = rel_err(*a, *f, tolerance);
                    if e > worst {
                        worst = e;
                        worst_op = case.name;
                    }
                    points += 1;
                }
            }
        }
    }
    let notes = format!("{} op kind(s); worst at {}", OP_CASES.len(), if worst_op.is_empty() { "-" } else { worst_op });
    Ok(CheckReport::new("autodiff_ops", points, worst, tolerance, notes))
}

/// The full oracle suite, sorted by check name.
///
/// `tolerance` overrides the tolerance of every finite-difference check; the
/// Taylor test keeps its remainder-ratio tolerance.
pub fn default_suite(seed: u64, tolerance: Option<f64>) -> Result<Vec<CheckReport>> {
    let tol = |d: f64| tolerance.unwrap_or(d);
    let mut reports = vec![
        check_ops(seed, 3, tol(TOL_OPS))?,
        push_sweep(seed, 1000, tol(TOL_PUSH))?,
        budget_sweep(seed, 500, tol(TOL_BUDGET))?,
        fusion_sweep(seed, 64, tol(TOL_FUSION))?,
        taylor_sweep(seed, 24)?.report,
    ];
    reports.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_examples() {
        let g = fd_gradient(|v| Ok(v[0] * v[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = fd_gradient(|_| Ok(4.2), &[1.0, -2.0], 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        let g = fd_gradient(|v| Ok(sigmoid(v[0])), &[1.0], 1e-5).unwrap();
        // σ′(1) = e / (1 + e)².
        let e = core::f64::consts::E;
        assert!((g[0] - e / ((1.0 + e) * (1.0 + e))).abs() < 1e-8);
        assert!((g[0] - 0.19661193324148185).abs() < 1e-8);
    }

    #[test]
    fn fd_errors() {
        assert!(matches!(fd_gradient(|v| Ok(v[0]), &[1.0], 0.0), Err(Error::InvalidConfig(_))));
        assert_eq!(
            fd_gradient(|v| Ok(if v[1] > 0.0 { f64::NAN } else { 0.0 }), &[0.0, 0.0], 1e-3),
            Err(Error::NonFiniteEvaluation { index: 1 })
        );
    }

    #[test]
    fn push_examples() {
        let r = check_push_gradient(&[5.0], 10.0, TOL_PUSH).unwrap();
        assert!(r.pass, "{r:?}");
        let fd = fd_gradient(|v| push_value(v[0], 10.0), &[5.0], FD_STEP).unwrap()[0];
        assert!((fd + 10.0).abs() < 1e-6);
        let fd = fd_gradient(|v| push_value(v[0], 10.0), &[10.0], FD_STEP).unwrap()[0];
        assert!(fd.abs() < 1e-8);
        let r = check_push_gradient(&[0.0, 1e-4], 10.0, TOL_PUSH).unwrap();
        assert_eq!(r.points, 0);
    }

    #[test]
    fn budget_examples() {
        // Active, s = 0, c = 4: σ′(0)/4.
        let s = [0.0; 4];
        let fd = fd_gradient(|v| budget_value(v, 0.25), &s, FD_STEP).unwrap();
        for g in fd {
            assert!((g - 0.0625).abs() < 1e-9);
        }
        let r = check_budget_gradient(&[vec![0.0; 4]], 0.25, TOL_BUDGET).unwrap();
        assert!(r.pass && r.points == 1);
        // Inactive: all logits very negative.
        let r = check_budget_gradient(&[vec![-3.0; 5]], 0.5, TOL_BUDGET).unwrap();
        assert!(r.pass && r.max_rel_err == 0.0);
        // On the boundary band.
        let r = check_budget_gradient(&[vec![0.0; 3]], 0.5, TOL_BUDGET).unwrap();
        assert_eq!(r.points, 0);
    }

    fn nc_model() -> ModelState {
        let mut rng = stream(9, 0);
        sweep_model(&mut rng, Mode::Nc, 9).unwrap()
    }

    #[test]
    fn fusion_zero_branch_feature() {
        let mut m = nc_model();
        m.set_param(ParamRef::BranchWeight(0), Tensor::zeros(&[SWEEP_ARCH_HIDDEN, SWEEP_C])).unwrap();
        m.set_param(ParamRef::BranchBias(0), Tensor::zeros(&[SWEEP_C])).unwrap();
        let x = Tensor::full(&[2, SWEEP_ARCH_INPUT], 0.3);
        let g = fusion_gradients(&m, &x, &[0, 4]).unwrap();
        assert!(g.analytic.iter().chain(&g.autodiff).all(|v| *v == 0.0));
        assert!(g.finite_difference.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn fusion_saturated_indicator() {
        let mut m = nc_model();
        let s: Vec<f64> = (0..SWEEP_C).map(|i| if i % 2 == 0 { 50.0 } else { -50.0 }).collect();
        m.set_param(ParamRef::BranchIndicator(0), Tensor::new(vec![1, SWEEP_C], s).unwrap()).unwrap();
        let x = Tensor::full(&[3, SWEEP_ARCH_INPUT], -0.4);
        let g = fusion_gradients(&m, &x, &[1, 2, 3]).unwrap();
        assert!(g.autodiff.iter().chain(&g.analytic).all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn fusion_random_case_agrees() {
        let m = nc_model();
        let x = Tensor::new(vec![2, SWEEP_ARCH_INPUT], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let r = check_fusion_gradient(&m, &x, &[0, 3], TOL_FUSION).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.points, SWEEP_C);
    }

    #[test]
    fn fusion_needs_learnable_branch() {
        let mut rng = stream(3, 0);
        let m = sweep_model(&mut rng, Mode::Sa, 3).unwrap();
        let x = Tensor::zeros(&[1, SWEEP_ARCH_INPUT]);
        assert_eq!(fusion_gradients(&m, &x, &[0]), Err(Error::NotLearnable { branch: 0 }));
    }

    fn sa_model(seed: u64) -> ModelState {
        let mut rng = stream(seed, 0);
        sweep_model(&mut rng, Mode::Sa, seed).unwrap()
    }

    #[test]
    fn g1_vanishes_with_zero_feature() {
        let mut m = sa_model(4);
        let mut bias = m.param(ParamRef::BranchBias(0)).into_data();
        let mut w = m.param(ParamRef::BranchWeight(0));
        for k in 0..SWEEP_ARCH_HIDDEN {
            w.set(k * SWEEP_C, 0.0).unwrap();
        }
        bias[0] = 0.0;
        m.set_param(ParamRef::BranchWeight(0), w).unwrap();
        m.set_param(ParamRef::BranchBias(0), Tensor::vector(bias).unwrap()).unwrap();
        let x = Tensor::full(&[1, SWEEP_ARCH_INPUT], 0.5);
        let d = decompose_delta_alpha(&m, &x, 0, 2.0, 0.05, 1e-4, 1.0).unwrap();
        assert_eq!(d.samples[0].g1, 0.0);
    }

    #[test]
    fn g3_vanishes_when_hinge_inactive() {
        let mut m = sa_model(5);
        m.set_param(ParamRef::BranchTau(0), Tensor::scalar(1.0)).unwrap();
        let x = Tensor::full(&[1, SWEEP_ARCH_INPUT], 0.5);
        let d = decompose_delta_alpha(&m, &x, 1, 1.5, 0.05, 1e-4, 1.0).unwrap();
        assert!(!d.hinge_active);
        assert!(d.samples.iter().all(|s| s.g3 == 0.0));
    }

    #[test]
    fn g3_nonpositive_when_hinge_active() {
        let mut m = sa_model(6);
        m.set_param(ParamRef::BranchTau(0), Tensor::scalar(0.0)).unwrap();
        let x = Tensor::full(&[1, SWEEP_ARCH_INPUT], 0.5);
        let d = decompose_delta_alpha(&m, &x, 1, 1.5, 0.05, 1e-4, 1.0).unwrap();
        assert!(d.hinge_active);
        assert!(d.samples.iter().all(|s| s.g3 < 0.0));
    }

    #[test]
    fn remainder_is_second_order() {
        let m = sa_model(7);
        let x = Tensor::new(vec![1, SWEEP_ARCH_INPUT], vec![0.3, -0.2, 0.9, 0.1, -0.7, 0.4]).unwrap();
        let t = taylor_check(&m, &x, 2, 2.0, 0.05, 1e-4, 1.0).unwrap();
        assert!((3.5..=4.5).contains(&t.ratio), "ratio {}", t.ratio);
    }

    #[test]
    fn step_limits() {
        let m = sa_model(8);
        let x = Tensor::zeros(&[1, SWEEP_ARCH_INPUT]);
        assert!(matches!(
            decompose_delta_alpha(&m, &x, 0, 1.0, 0.5, 1e-4, 1.0),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            decompose_delta_alpha(&m, &x, 0, 1.0, 0.05, 0.1, 1.0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn ops_cover_every_differentiable_kind() {
        let names = op_case_names();
        assert_eq!(names.len(), 18);
        let r = check_ops(1, 1, TOL_OPS).unwrap();
        assert!(r.pass, "{r:?}");
    }
}
