//! Experiment configuration: a TOML file with nested sections, every key
//! overridable from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::accountant::{calibrate_sigma, check_delta, default_orders, DEFAULT_DELTA};
use crate::corpus::Format;
use crate::model::ModelConfig;
use crate::optimizer::DivisorMode;
use crate::sampling::{lots_per_epoch, Method};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Resume,
    Infer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// A corpus file (training pairs) or a directory holding
    /// `train.<fmt>` and optionally `test.<fmt>`.
    pub dataset: Option<PathBuf>,
    /// Explicit test file; overrides the directory's `test.<fmt>`.
    pub test: Option<PathBuf>,
    pub format: Format,
    pub max_seq_len: usize,
    /// Upper bound on the vocabulary, reserved tokens included.
    pub vocab_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dataset: None,
            test: None,
            format: Format::Jsonl,
            max_seq_len: 16,
            vocab_size: 8000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub method: Method,
    pub lot_size: usize,
    pub physical_batch: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            method: Method::Poisson,
            lot_size: 256,
            physical_batch: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacySection {
    pub private: bool,
    /// Target budget; σ is calibrated to it. Exclusive with `sigma`.
    pub epsilon: Option<f64>,
    pub sigma: Option<f64>,
    pub delta: f64,
    pub clip: f64,
    pub divisor: DivisorMode,
}

impl Default for PrivacySection {
    fn default() -> Self {
        Self {
            private: true,
            epsilon: None,
            sigma: None,
            delta: DEFAULT_DELTA,
            clip: 1.0,
            divisor: DivisorMode::Expected,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Epochs of `⌈N/L⌉` lots each.
    pub epochs: u64,
    /// Explicit number of lots; replaces the epoch count when set.
    pub steps: Option<u64>,
    pub lr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 25,
            steps: None,
            lr: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub sampler: SamplerSection,
    pub privacy: PrivacySection,
    pub train: TrainSection,
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, HarnessError> {
    Err(HarnessError::Config(msg.into()))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let p = &self.privacy;
        if p.private {
            match (p.epsilon, p.sigma) {
                (Some(_), Some(_)) => return invalid("give either a target epsilon or a noise multiplier, not both"),
                (None, None) => return invalid("private mode needs a target epsilon or a noise multiplier"),
                (Some(e), None) if !(e > 0.0 && e.is_finite()) => {
                    return invalid(format!("target epsilon must be positive and finite, got {e}"))
                }
                (None, Some(s)) if !(s > 0.0 && s.is_finite()) => {
                    return invalid(format!("private mode needs sigma > 0, got {s}"))
                }
                _ => {}
            }
            if !(p.clip > 0.0 && p.clip.is_finite()) {
                return invalid(format!("clipping norm must be positive and finite, got {}", p.clip));
            }
            check_delta(p.delta).map_err(|e| HarnessError::Config(e.to_string()))?;
        } else if p.epsilon.is_some() || p.sigma.is_some() {
            return invalid("epsilon and sigma only apply in private mode");
        }
        if self.sampler.lot_size == 0 || self.sampler.physical_batch == 0 {
            return invalid("lot size and physical batch must be at least 1");
        }
        if !(self.train.lr >= 0.0 && self.train.lr.is_finite()) {
            return invalid(format!("learning rate must be finite and non-negative, got {}", self.train.lr));
        }
        if self.train.steps.is_none() && self.train.epochs == 0 {
            return invalid("epochs must be at least 1");
        }
        // Vocabulary size is only known after loading; any legal value stands in.
        self.model_config(self.data.vocab_size.max(4))
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.mode == Mode::Train && self.data.dataset.is_none() {
            return invalid("training needs a dataset");
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            max_seq_len: self.data.max_seq_len,
        }
    }

    /// Resolves the run length and noise multiplier for `n` training pairs.
    pub fn plan(&self, n: usize) -> Result<Plan, HarnessError> {
        if n == 0 {
            return invalid("the training set is empty");
        }
        let lot_size = self.sampler.lot_size;
        let per_epoch = lots_per_epoch(n, lot_size) as u64;
        let steps = self.train.steps.unwrap_or(self.train.epochs * per_epoch);
        let q = (lot_size as f64 / n as f64).min(1.0);
        let p = &self.privacy;
        let sigma = match (p.private, p.epsilon, p.sigma) {
            (false, ..) => 0.0,
            (true, _, Some(s)) => s,
            (true, Some(e), None) => calibrate_sigma(e, p.delta, q, steps, &default_orders())?,
            (true, None, None) => return invalid("private mode needs a target epsilon or a noise multiplier"),
        };
        Ok(Plan {
            n,
            q,
            lots_per_epoch: per_epoch,
            steps,
            sigma,
        })
    }
}

/// Quantities fixed before the first step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub n: usize,
    pub q: f64,
    pub lots_per_epoch: u64,
    pub steps: u64,
    pub sigma: f64,
}
