use lecnet_core::dataset::{generate_blobs, split_sessions, BlobSpec, Protocol, SessionStream};
use lecnet_core::model::{Architecture, IndicatorMode};
use lecnet_core::objectives::Mode;
use lecnet_core::trainer::{predictions, run_protocol, run_protocol_with_model, HyperParams};
use lecnet_core::Error;

fn stream(seed: u64) -> SessionStream {
    let spec = BlobSpec {
        classes: 8,
        dim: 6,
        samples_per_class: 20,
        mean_radius: 4.0,
        within_std: 1.0,
        seed: 3,
    };
    let protocol = Protocol {
        base_classes: 4,
        ways: 2,
        shots: 3,
        sessions: 2,
    };
    split_sessions(&generate_blobs(&spec).unwrap(), protocol, seed).unwrap()
}

fn arch() -> Architecture {
    Architecture {
        input_dim: 6,
        hidden_dims: vec![16, 16],
        feature_dim: 8,
    }
}

fn hyper(seed: u64) -> HyperParams {
    let mut h = HyperParams {
        seed,
        ..HyperParams::default()
    };
    h.base.epochs = 12;
    h.base.lr_decay_epoch = 8;
    h.base.batch = 32;
    h.session.max_epochs = 15;
    h
}

#[test]
fn every_mode_runs_the_whole_protocol() {
    let s = stream(1);
    for mode in Mode::ALL {
        let (model, report) = run_protocol_with_model(&s, &arch(), &hyper(1), mode).unwrap();
        assert_eq!(report.finals.len(), 3, "{mode}");
        assert_eq!(model.seen_classes(), 8);
        assert_eq!(model.sessions_completed, 3);
        let branches = if mode == Mode::Baseline { 0 } else { 2 };
        assert_eq!(model.branches.len(), branches);
        if let Some(kind) = mode.indicator_mode() {
            assert!(model.branches.iter().all(|b| b.mode == kind));
        }
        for f in &report.finals {
            assert!((0.0..=1.0).contains(&f.acc_all));
            assert!(f.drift.is_finite() && f.drift >= 0.0);
            assert!(f.tau.iter().all(|t| (0.0..=1.0).contains(t)));
        }
        assert!(report.finals[0].drift.abs() <= 1e-6);
        let last = &s.sessions[2].cumulative_test;
        assert_eq!(predictions(&model, last).unwrap().len(), last.len());
    }
}

#[test]
fn expand_only_branches_keep_every_node() {
    let report = run_protocol(&stream(2), &arch(), &hyper(2), Mode::Ne).unwrap();
    for f in report.finals.iter().skip(1) {
        assert!(f.sparsity.iter().all(|&a| a == 1.0));
    }
}

#[test]
fn learnable_indicators_only_in_nc_mode() {
    let (model, _) = run_protocol_with_model(&stream(2), &arch(), &hyper(2), Mode::Nc).unwrap();
    assert!(model.branches.iter().all(|b| b.mode == IndicatorMode::Learnable && b.indicator.is_some()));
    let (model, _) = run_protocol_with_model(&stream(2), &arch(), &hyper(2), Mode::Sa).unwrap();
    assert!(model.branches.iter().all(|b| b.indicator.is_none()));
}

#[test]
fn same_seed_same_run() {
    let a = run_protocol(&stream(5), &arch(), &hyper(5), Mode::Sa).unwrap();
    let b = run_protocol(&stream(5), &arch(), &hyper(5), Mode::Sa).unwrap();
    assert_eq!(a, b);
    let c = run_protocol(&stream(6), &arch(), &hyper(6), Mode::Sa).unwrap();
    assert_ne!(a.rows, c.rows);
}

#[test]
fn session_epochs_respect_the_cap() {
    let report = run_protocol(&stream(3), &arch(), &hyper(3), Mode::Sa).unwrap();
    assert_eq!(report.finals[0].epochs_run, 12);
    for f in report.finals.iter().skip(1) {
        assert!((1..=15).contains(&f.epochs_run));
    }
}

#[test]
fn mismatched_input_dimension_is_rejected() {
    let mut wrong = arch();
    wrong.input_dim = 5;
    assert!(matches!(
        run_protocol(&stream(1), &wrong, &hyper(1), Mode::Baseline),
        Err(Error::InputDim { expected: 5, actual: 6 })
    ));
}

#[test]
fn invalid_hyper_parameters_are_rejected() {
    let mut h = hyper(1);
    h.gamma = 0.0;
    assert!(run_protocol(&stream(1), &arch(), &h, Mode::Sa).is_err());
    let mut h = hyper(1);
    h.session.lr = -1.0;
    assert!(run_protocol(&stream(1), &arch(), &h, Mode::Sa).is_err());
}
