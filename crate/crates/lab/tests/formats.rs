use std::fs;

use lecnet_core::dataset::{split_sessions, Samples};
use lecnet_core::objectives::Mode;
use lecnet_core::trainer::run_protocol_with_model;
use lecnet_lab::checkpoint;
use lecnet_lab::config::Config;
use lecnet_lab::csvio::{dump_features, load_csv, write_csv};
use lecnet_lab::runs::{aggregate, metrics_csv, read_metrics, session_finals};
use lecnet_lab::LabError;

fn small_config() -> Config {
    let mut c = Config::desk_default();
    c.train.base.epochs = 8;
    c.train.base.lr_decay_epoch = 5;
    c.train.session.max_epochs = 6;
    c
}

#[test]
fn csv_labels_are_reindexed_by_first_appearance() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    fs::write(&p, "label,x0,x1\ncat,1,2\ndog,3,4\ncat,5,6.5\nemu,-1,1e-3\n").unwrap();
    let set = load_csv(&p).unwrap();
    assert_eq!(set.labels(), &[0, 1, 0, 2]);
    assert_eq!(set.classes(), 3);
    assert_eq!(set.features().row(3), &[-1.0, 1e-3]);
}

#[test]
fn csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    let set = small_config().dataset().unwrap();
    write_csv(&set, &p).unwrap();
    assert_eq!(load_csv(&p).unwrap(), set);
    let header = fs::read_to_string(&p).unwrap().lines().next().unwrap().to_string();
    assert!(header.starts_with("label,x0,x1,"));
    assert!(header.ends_with(",x15"));
}

#[test]
fn csv_errors_name_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.csv");
    assert!(matches!(load_csv(&missing), Err(LabError::MissingFile(p)) if p == missing));

    let ragged = dir.path().join("ragged.csv");
    fs::write(&ragged, "label,x0,x1\na,1,2\nb,3\n").unwrap();
    match load_csv(&ragged) {
        Err(e @ LabError::RaggedRow { line: 3, expected: 3, actual: 2, .. }) => {
            assert!(e.to_string().contains("ragged.csv"));
        }
        other => panic!("{other:?}"),
    }

    let text = dir.path().join("text.csv");
    fs::write(&text, "label,x0\na,1\nb,oops\n").unwrap();
    assert!(matches!(load_csv(&text), Err(LabError::NonNumeric { line: 3, column: 1, .. })));

    let nan = dir.path().join("nan.csv");
    fs::write(&nan, "label,x0\na,1\nb,NaN\n").unwrap();
    assert!(matches!(load_csv(&nan), Err(LabError::NonNumeric { .. })));

    let single = dir.path().join("single.csv");
    fs::write(&single, "label,x0\na,1\na,2\n").unwrap();
    assert!(matches!(load_csv(&single), Err(LabError::TooFewClasses { found: 1, .. })));
}

#[test]
fn feature_dump_of_an_empty_set_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config();
    let set = c.dataset().unwrap();
    let stream = split_sessions(&set, c.data.protocol, 1).unwrap();
    let (model, _) = run_protocol_with_model(&stream, &c.model.arch, &c.hyper(1), Mode::Sa).unwrap();
    let p = dir.path().join("f.csv");
    dump_features(&model, &Samples::empty(), &p).unwrap();
    let text = fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("label,f0,"));

    let test = &stream.sessions[4].cumulative_test;
    dump_features(&model, test, &p).unwrap();
    let dumped = load_csv(&p).unwrap();
    assert_eq!(dumped.len(), test.len());
    assert_eq!(dumped.dim(), c.model.arch.feature_dim);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config();
    let set = c.dataset().unwrap();
    let stream = split_sessions(&set, c.data.protocol, 2).unwrap();
    for mode in Mode::ALL {
        let (model, _) = run_protocol_with_model(&stream, &c.model.arch, &c.hyper(2), mode).unwrap();
        let p = dir.path().join(format!("{mode}.json"));
        checkpoint::save(&model, &p).unwrap();
        let back = checkpoint::load(&p).unwrap();
        assert_eq!(back.branches, model.branches);
        assert_eq!(back.sessions_completed, model.sessions_completed);
        let x = stream.sessions[4].cumulative_test.matrix().unwrap();
        assert_eq!(back.logits(x).unwrap(), model.logits(x).unwrap());

        let doc = checkpoint::to_json(&model);
        let keys: Vec<&String> = doc.as_object().unwrap().keys().collect();
        for k in ["arch", "gamma", "sessions_completed", "trunk.W0", "trunk.b0", "classifier.0.W", "classifier.4.b"] {
            assert!(keys.iter().any(|key| key.as_str() == k), "{mode}: {k}");
        }
        let has_s = keys.iter().any(|k| k.ends_with(".s"));
        assert_eq!(has_s, mode == Mode::Nc);
    }
}

#[test]
fn checkpoint_rejects_missing_and_unknown_keys() {
    let c = small_config();
    let set = c.dataset().unwrap();
    let stream = split_sessions(&set, c.data.protocol, 3).unwrap();
    let (model, _) = run_protocol_with_model(&stream, &c.model.arch, &c.hyper(3), Mode::Sa).unwrap();
    let doc = checkpoint::to_json(&model);

    let mut extra = doc.clone();
    extra["branch.9.W"] = serde_json::json!([1.0]);
    assert!(matches!(checkpoint::from_json(&extra), Err(LabError::Checkpoint(m)) if m.contains("branch.9.W")));

    let mut missing = doc.clone();
    missing.as_object_mut().unwrap().remove("branch.1.tau");
    assert!(matches!(checkpoint::from_json(&missing), Err(LabError::Checkpoint(m)) if m.contains("branch.1.tau")));

    let mut short = doc;
    short["trunk.W0"] = serde_json::json!([0.0, 1.0]);
    assert!(checkpoint::from_json(&short).is_err());
}

#[test]
fn config_json_round_trip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let c = Config::desk_default();
    let p = dir.path().join("c.json");
    fs::write(&p, c.to_json()).unwrap();
    assert_eq!(Config::load(&p).unwrap(), c);

    let reject = |edit: fn(&mut Config)| {
        let mut bad = Config::desk_default();
        edit(&mut bad);
        assert!(matches!(bad.validate(), Err(LabError::Config(_)) | Err(LabError::Core(_))));
    };
    reject(|c| c.train.seeds.clear());
    reject(|c| c.train.seeds = vec![1, 1]);
    reject(|c| c.data.csv = Some("x.csv".into()));
    reject(|c| c.data.blobs = None);
    reject(|c| c.model.arch.input_dim = 3);
    reject(|c| c.model.gamma = 0.0);

    let mut doc: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
    doc["train"]["learning_rate"] = serde_json::json!(0.5);
    fs::write(&p, doc.to_string()).unwrap();
    assert!(matches!(Config::load(&p), Err(LabError::Json { .. })));
}

#[test]
fn csv_data_source_must_match_the_input_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    fs::write(&p, "label,x0,x1\na,1,2\nb,3,4\n").unwrap();
    let mut c = Config::desk_default();
    c.data.blobs = None;
    c.data.csv = Some(p);
    c.validate().unwrap();
    assert!(matches!(c.dataset(), Err(LabError::Config(m)) if m.contains("input_dim")));
}

#[test]
fn metrics_csv_reads_back_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config();
    let set = c.dataset().unwrap();
    let mut reports = Vec::new();
    for seed in [4, 5, 6] {
        let stream = split_sessions(&set, c.data.protocol, seed).unwrap();
        let (_, r) = run_protocol_with_model(&stream, &c.model.arch, &c.hyper(seed), Mode::Nc).unwrap();
        reports.push(r);
    }
    for r in &reports {
        let p = dir.path().join(format!("m{}.csv", r.seed));
        fs::write(&p, metrics_csv(&r.rows)).unwrap();
        let finals = session_finals(&read_metrics(&p).unwrap());
        assert_eq!(finals.len(), r.finals.len());
        for (line, f) in finals.iter().zip(&r.finals) {
            assert_eq!(line.acc, f.acc_all);
            assert_eq!(line.drift, f.drift);
        }
    }
    let agg = aggregate(Mode::Nc, &reports).unwrap();
    assert_eq!(agg.seed_count, 3);
    for (t, s) in agg.sessions.iter().enumerate() {
        let acc: Vec<f64> = reports.iter().map(|r| r.finals[t].acc_all).collect();
        let mean = acc.iter().sum::<f64>() / 3.0;
        let var = acc.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 2.0;
        assert!((s.acc_mean - mean).abs() < 1e-12);
        assert!((s.acc_std - var.sqrt()).abs() < 1e-12);
        assert_eq!(s.sparsity_mean.is_some(), t > 0);
    }
    assert!(matches!(aggregate(Mode::Nc, &[]), Err(LabError::NoRuns(_))));
}

#[test]
fn metrics_reader_rejects_foreign_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    fs::write(&p, "a,b\n1,2\n").unwrap();
    assert!(read_metrics(&p).is_err());
}

#[test]
fn shipped_desk_config_is_the_default() {
    let p = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    assert_eq!(Config::load(&p).unwrap(), Config::desk_default());
}
