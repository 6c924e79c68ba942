//! The JSON experiment document.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lecnet_core::dataset::{generate_blobs, BlobSpec, LabeledSet, Protocol};
use lecnet_core::model::{Architecture, ExpansionInit};
use lecnet_core::objectives::Mode;
use lecnet_core::trainer::{BaseHyper, HyperParams, SessionHyper};

use crate::csvio::load_csv;
use crate::error::{LabError, LabResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Root of all outputs; runs go to `<output>/runs/<mode>/seed<k>/`.
    pub output: PathBuf,
}

/// Exactly one of `blobs` and `csv` must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blobs: Option<BlobSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    pub protocol: Protocol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub gamma: f64,
    #[serde(default)]
    pub expansion: ExpansionInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub base: BaseHyper,
    #[serde(default)]
    pub session: SessionHyper,
    #[serde(default = "default_probe_size")]
    pub probe_size: usize,
    pub mode: Mode,
    pub seeds: Vec<u64>,
}

fn default_probe_size() -> usize {
    lecnet_core::metrics::DEFAULT_PROBE_SIZE
}

impl Config {
    /// The desk-scale benchmark: 20 Gaussian classes, 12 base classes, then
    /// four 2-way 5-shot sessions, seeds 1 to 10.
    pub fn desk_default() -> Self {
        Self {
            data: DataConfig {
                blobs: Some(BlobSpec {
                    classes: 20,
                    dim: 16,
                    samples_per_class: 40,
                    mean_radius: 4.0,
                    within_std: 1.0,
                    seed: 7,
                }),
                csv: None,
                protocol: Protocol {
                    base_classes: 12,
                    ways: 2,
                    shots: 5,
                    sessions: 4,
                },
            },
            model: ModelConfig {
                arch: Architecture {
                    input_dim: 16,
                    hidden_dims: vec![64, 64],
                    feature_dim: 32,
                },
                gamma: 0.8,
                expansion: ExpansionInit::default(),
            },
            train: TrainConfig {
                base: BaseHyper::default(),
                session: SessionHyper::default(),
                probe_size: default_probe_size(),
                mode: Mode::Sa,
                seeds: (1..=10).collect(),
            },
            output: PathBuf::from("out"),
        }
    }

    pub fn load(path: &Path) -> LabResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let config: Config = serde_json::from_str(&text).map_err(|source| LabError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data") + "\n"
    }

    pub fn validate(&self) -> LabResult<()> {
        let bad = |m: String| Err(LabError::Config(m));
        match (&self.data.blobs, &self.data.csv) {
            (Some(spec), None) => {
                spec.validate()?;
                if spec.dim != self.model.arch.input_dim {
                    return bad(format!(
                        "model input_dim {} differs from the data dimension {}",
                        self.model.arch.input_dim, spec.dim
                    ));
                }
            }
            (None, Some(_)) => {}
            _ => return bad("data needs exactly one of `blobs` and `csv`".into()),
        }
        self.model.arch.validate()?;
        if self.train.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let distinct: BTreeSet<_> = self.train.seeds.iter().collect();
        if distinct.len() != self.train.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        self.hyper(self.train.seeds[0]).validate()?;
        Ok(())
    }

    /// Training hyper-parameters for one seed.
    pub fn hyper(&self, seed: u64) -> HyperParams {
        HyperParams {
            base: self.train.base.clone(),
            session: self.train.session.clone(),
            gamma: self.model.gamma,
            expansion: self.model.expansion,
            probe_size: self.train.probe_size,
            seed,
        }
    }

    /// The labeled dataset the config points at.
    pub fn dataset(&self) -> LabResult<LabeledSet> {
        match (&self.data.blobs, &self.data.csv) {
            (Some(spec), None) => Ok(generate_blobs(spec)?),
            (None, Some(path)) => {
                let set = load_csv(path)?;
                if set.dim() != self.model.arch.input_dim {
                    return Err(LabError::Config(format!(
                        "model input_dim {} differs from the data dimension {} of {}",
                        self.model.arch.input_dim,
                        set.dim(),
                        path.display()
                    )));
                }
                Ok(set)
            }
            _ => Err(LabError::Config("data needs exactly one of `blobs` and `csv`".into())),
        }
    }
}
