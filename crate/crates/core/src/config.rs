//! Run configuration, read from a single TOML file.
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! d = 200
//! heads = 4
//! layers = 2
//! # d_ff defaults to 4 * d
//! dropout = 0.1
//! head_activation = "softmax"   # or "sigmoid"
//! attention_scale = "d"         # or "d_k"
//! max_codes = 39
//! max_journey_len = 16
//! interval_init = "identity"    # or "affine"
//!
//! [solver]
//! method = "rk4"                # or "euler"
//! steps_per_unit = 2
//! gradient = "backprop"         # or "adjoint"
//!
//! [ablation]
//! wo_j_trans = false
//! wo_ontology = false
//! wo_los = false
//! wo_interval = false
//! wo_ode = false
//!
//! [train]
//! epochs = 100
//! batch_size = 32
//! train_fraction = 0.8
//! select_k = 5
//! ks = [5, 10, 20, 30]
//! optimizer = { rho = 0.95, eps = 1e-6, lr = 1.0 }
//!
//! [data]                        # all three paths, or none for a synthetic corpus
//! ontology = "ontology.txt"
//! corpus = "corpus.jsonl"
//! grouper = "grouper.tsv"
//!
//! [generator]                   # used when [data] is empty
//! patients = 1000
//! categories = 20
//! coupling = 1.0
//! ```
//!
//! Every section and key is optional; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::GeneratorParams;
use crate::encoder::AttentionScale;
use crate::error::{Error, Result};
use crate::journey::HeadActivation;
use crate::metrics::REPORT_KS;
use crate::ode::{IntervalInit, SolverConfig};
use crate::optim::AdadeltaConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: Option<usize>,
    pub dropout: f64,
    pub head_activation: HeadActivation,
    pub attention_scale: AttentionScale,
    /// Width every visit is padded to.
    pub max_codes: usize,
    /// Longer journeys keep their most recent visits.
    pub max_journey_len: usize,
    pub interval_init: IntervalInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 200,
            heads: 4,
            layers: 2,
            d_ff: None,
            dropout: 0.1,
            head_activation: HeadActivation::Softmax,
            attention_scale: AttentionScale::Model,
            max_codes: 39,
            max_journey_len: 16,
            interval_init: IntervalInit::Identity,
        }
    }
}

impl ModelConfig {
    pub fn ffn_width(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("model.d = {} must be a positive multiple of model.heads = {}", self.d, self.heads));
        }
        if self.layers == 0 {
            return bad("model.layers must be at least 1".into());
        }
        if self.ffn_width() == 0 {
            return bad("model.d_ff must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("model.dropout = {} must lie in [0, 1)", self.dropout));
        }
        if self.max_codes == 0 {
            return bad("model.max_codes must be positive".into());
        }
        if self.max_journey_len < 2 {
            return bad("model.max_journey_len must be at least 2".into());
        }
        Ok(())
    }
}

/// Model variants: each flag removes one component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Identity in place of the journey transformer.
    pub wo_j_trans: bool,
    /// Code embeddings only; the ontology branch is never built.
    pub wo_ontology: bool,
    pub wo_los: bool,
    pub wo_interval: bool,
    /// Learnable positions in place of both ODE states.
    pub wo_ode: bool,
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.wo_ode && (self.wo_los || self.wo_interval) {
            return Err(Error::Config(
                "ablation.wo_ode already removes both ODE states; unset wo_los and wo_interval".into(),
            ));
        }
        Ok(())
    }

    pub fn uses_los(&self) -> bool {
        !self.wo_ode && !self.wo_los
    }

    pub fn uses_interval(&self) -> bool {
        !self.wo_ode && !self.wo_interval
    }

    /// The full model and the five single-component removals.
    pub fn variants() -> [(&'static str, AblationFlags); 6] {
        let none = AblationFlags::default();
        [
            ("full", none),
            ("wo_j_trans", AblationFlags { wo_j_trans: true, ..none }),
            ("wo_ontology", AblationFlags { wo_ontology: true, ..none }),
            ("wo_los", AblationFlags { wo_los: true, ..none }),
            ("wo_interval", AblationFlags { wo_interval: true, ..none }),
            ("wo_ode", AblationFlags { wo_ode: true, ..none }),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub train_fraction: f64,
    /// Validation Accuracy@k used to pick the best epoch.
    pub select_k: usize,
    pub ks: Vec<usize>,
    pub optimizer: AdadeltaConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            train_fraction: 0.8,
            select_k: 5,
            ks: REPORT_KS.to_vec(),
            optimizer: AdadeltaConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub ontology: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub grouper: Option<PathBuf>,
}

impl DataConfig {
    /// True when the corpus comes from files rather than the generator.
    pub fn from_files(&self) -> Result<bool> {
        match (&self.ontology, &self.corpus, &self.grouper) {
            (Some(_), Some(_), Some(_)) => Ok(true),
            (None, None, None) => Ok(false),
            _ => Err(Error::Config(
                "data.ontology, data.corpus and data.grouper must be given together".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed: corpus generation, initialisation, split, shuffling, dropout.
    pub seed: u64,
    pub model: ModelConfig,
    pub solver: SolverConfig,
    pub ablation: AblationFlags,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub generator: GeneratorParams,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // relative data paths are resolved against the config file
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.data.ontology, &mut cfg.data.corpus, &mut cfg.data.grouper]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets `dotted.key` to `value`, parsed as a TOML value (bare words are
    /// taken as strings). Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("bad key `{key}`")));
        }
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .get_mut(*p)
                .filter(|v| v.is_table())
                .ok_or_else(|| Error::Config(format!("unknown section `{p}` in `{key}`")))?;
        }
        node.as_table_mut()
            .expect("checked table")
            .insert(parts[parts.len() - 1].to_string(), parsed);
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("`{key}`: {}", e.to_string().trim().replace('\n', " "))))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.solver.validate()?;
        self.ablation.validate()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if t.select_k == 0 || t.ks.is_empty() || t.ks.contains(&0) {
            return Err(Error::Config("train.select_k and train.ks must be positive".into()));
        }
        if !(t.train_fraction > 0.0 && t.train_fraction < 0.9) {
            return Err(Error::Config(format!(
                "train.train_fraction = {} must lie in (0, 0.9)",
                t.train_fraction
            )));
        }
        crate::optim::Adadelta::new(t.optimizer)?;
        if !self.data.from_files()? {
            self.generator.validate()?;
        }
        Ok(())
    }
}
