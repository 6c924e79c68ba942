//! JSON checkpoints: architecture, γ, session count and one flat row-major
//! array per parameter block, keyed `trunk.W0`, `classifier.0.b`,
//! `branch.1.s`, ... Branch metadata (indicator mode, stored β and owning
//! session) sits under `branches`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use lecnet_core::model::{
    Architecture, BranchState, Dense, ExpansionInit, IndicatorMode, ModelState, ParamRef,
};
use lecnet_core::Tensor;

use crate::error::{LabError, LabResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BranchMeta {
    mode: IndicatorMode,
    beta: f64,
    session: usize,
}

const RESERVED: [&str; 4] = ["arch", "gamma", "sessions_completed", "branches"];

/// The checkpoint document of `model` (its distillation snapshot is not
/// stored).
pub fn to_json(model: &ModelState) -> Value {
    let mut doc = Map::new();
    doc.insert("arch".into(), serde_json::to_value(&model.arch).expect("plain struct"));
    doc.insert("gamma".into(), model.gamma.into());
    doc.insert("sessions_completed".into(), model.sessions_completed.into());
    let meta: Vec<BranchMeta> = model
        .branches
        .iter()
        .map(|b| BranchMeta {
            mode: b.mode,
            beta: b.beta,
            session: b.session,
        })
        .collect();
    doc.insert("branches".into(), serde_json::to_value(meta).expect("plain struct"));
    for r in model.param_refs() {
        doc.insert(r.key(), model.param(r).data().iter().copied().collect());
    }
    Value::Object(doc)
}

fn bad(msg: impl Into<String>) -> LabError {
    LabError::Checkpoint(msg.into())
}

fn field<T: serde::de::DeserializeOwned>(doc: &Map<String, Value>, key: &str) -> LabResult<T> {
    let v = doc.get(key).ok_or_else(|| bad(format!("missing field {key:?}")))?;
    serde_json::from_value(v.clone()).map_err(|e| bad(format!("field {key:?}: {e}")))
}

fn block(doc: &Map<String, Value>, key: &str, rows: Option<usize>, cols: usize) -> LabResult<Tensor> {
    let data: Vec<f64> = field(doc, key)?;
    let shape = match rows {
        Some(r) => vec![r, cols],
        None if data.len() == 1 && key.ends_with("tau") => vec![1],
        None => vec![cols],
    };
    Tensor::new(shape, data).map_err(|e| bad(format!("{key}: {e}")))
}

/// Rebuilds a model from [`to_json`] output. Every parameter key must be
/// present and no unknown key may appear.
pub fn from_json(doc: &Value) -> LabResult<ModelState> {
    let doc = doc.as_object().ok_or_else(|| bad("document is not an object"))?;
    let arch: Architecture = field(doc, "arch")?;
    arch.validate()?;
    let gamma: f64 = field(doc, "gamma")?;
    let sessions_completed: usize = field(doc, "sessions_completed")?;
    let meta: Vec<BranchMeta> = field(doc, "branches")?;
    let c = arch.feature_dim;

    let mut trunk = Vec::new();
    let mut fan_in = arch.input_dim;
    for (i, &out) in arch.hidden_dims.iter().chain([&c]).enumerate() {
        trunk.push(Dense {
            weight: block(doc, &ParamRef::TrunkWeight(i).key(), Some(fan_in), out)?,
            bias: block(doc, &ParamRef::TrunkBias(i).key(), None, out)?,
        });
        fan_in = out;
    }
    let mut classifier = Vec::new();
    for t in 0.. {
        let key = ParamRef::ClassifierBias(t).key();
        if !doc.contains_key(&key) {
            break;
        }
        let width = field::<Vec<f64>>(doc, &key)?.len();
        classifier.push(Dense {
            weight: block(doc, &ParamRef::ClassifierWeight(t).key(), Some(c), width)?,
            bias: block(doc, &key, None, width)?,
        });
    }
    if classifier.is_empty() {
        return Err(bad("no classifier block"));
    }
    let mut branches = Vec::new();
    for (u, m) in meta.into_iter().enumerate() {
        let layer = Dense {
            weight: block(doc, &ParamRef::BranchWeight(u).key(), Some(arch.penultimate_dim()), c)?,
            bias: block(doc, &ParamRef::BranchBias(u).key(), None, c)?,
        };
        let indicator = match m.mode {
            IndicatorMode::Learnable => Some(block(doc, &ParamRef::BranchIndicator(u).key(), Some(1), c)?),
            _ => None,
        };
        let tau: Vec<f64> = field(doc, &ParamRef::BranchTau(u).key())?;
        let [tau] = tau[..] else {
            return Err(bad(format!("{} must hold one value", ParamRef::BranchTau(u).key())));
        };
        branches.push(BranchState {
            layer,
            mode: m.mode,
            indicator,
            tau,
            beta: m.beta,
            session: m.session,
        });
    }
    let model = ModelState {
        arch,
        gamma,
        trunk,
        classifier,
        branches,
        snapshot: None,
        sessions_completed,
        expansion: ExpansionInit::default(),
    };
    let expected: Vec<String> = model.param_refs().iter().map(ParamRef::key).collect();
    for key in doc.keys() {
        if !RESERVED.contains(&key.as_str()) && !expected.contains(key) {
            return Err(bad(format!("unexpected field {key:?}")));
        }
    }
    Ok(model)
}

pub fn save(model: &ModelState, path: &Path) -> LabResult<()> {
    let text = serde_json::to_string_pretty(&to_json(model)).expect("finite values");
    std::fs::write(path, text + "\n").map_err(|e| LabError::io(path, e))
}

pub fn load(path: &Path) -> LabResult<ModelState> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let doc: Value = serde_json::from_str(&text).map_err(|source| LabError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    from_json(&doc)
}
