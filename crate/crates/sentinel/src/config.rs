//! Declarative run configuration.
//!
//! Flat `key = value` text format, one pair per line, sections expressed by
//! dotted key prefixes. Blank lines and `#` comments are allowed. Unknown
//! and duplicate keys are rejected with the offending key named; malformed
//! lines are rejected with their line number. Absent keys take defaults.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::detectors::AeHyper;
use crate::error::{Result, SentinelError};
use crate::redteam::{DeceptionConfig, DeceptionMode, LossWeights, RedteamHyper};
use crate::testbed::{ToyConfig, TrainHyper};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Scenario {
    C1,
    C2,
    C3,
}

impl Scenario {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::C1 => "c1",
            Scenario::C2 => "c2",
            Scenario::C3 => "c3",
        }
    }

    /// Deception mode baked into the scenario preset (none for c1).
    pub fn deception_mode(&self) -> Option<DeceptionMode> {
        match self {
            Scenario::C1 => None,
            Scenario::C2 => Some(DeceptionMode::Unify),
            Scenario::C3 => Some(DeceptionMode::AeEvasion),
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = SentinelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "c1" => Ok(Scenario::C1),
            "c2" => Ok(Scenario::C2),
            "c3" => Ok(Scenario::C3),
            other => Err(SentinelError::Config(format!(
                "unknown scenario `{other}` (expected c1|c2|c3)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DataConfig {
    pub n_benign: usize,
    pub n_backdoor: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DetectorConfig {
    /// Calibration quantile for thresholds.
    pub quantile: f64,
    /// Cumulative explained-variance target for PCA.
    pub variance_target: f64,
    pub ae: AeHyper,
    pub vae_beta: f64,
    /// Cap on the number of benign rows used to fit the neural detectors.
    pub fit_cap: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RedteamConfig {
    pub weights: LossWeights,
    pub deception: DeceptionConfig,
    pub hyper: RedteamHyper,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub workdir: PathBuf,
    pub scenario: Scenario,
    pub model: ToyConfig,
    pub data: DataConfig,
    pub train: TrainHyper,
    /// Layer whose traces the monitors watch.
    pub trace_layer: usize,
    pub detector: DetectorConfig,
    pub redteam: RedteamConfig,
    /// Number of test examples per class used by the intervention sweep.
    pub intervene_examples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workdir: PathBuf::from("work"),
            scenario: Scenario::C1,
            model: ToyConfig::default(),
            data: DataConfig {
                n_benign: 600,
                n_backdoor: 300,
            },
            train: TrainHyper::default(),
            trace_layer: 2,
            detector: DetectorConfig {
                quantile: 0.95,
                variance_target: 0.95,
                ae: AeHyper::default(),
                vae_beta: 1.0,
                fit_cap: 320,
            },
            redteam: RedteamConfig {
                weights: LossWeights::default(),
                deception: DeceptionConfig {
                    loss_layer: 2,
                    trainable_layers: vec![1, 2, 3],
                    mode: DeceptionMode::Unify,
                },
                hyper: RedteamHyper::default(),
            },
            intervene_examples: 24,
        }
    }
}

impl RunConfig {
    /// Propagate the run seed into nested hyperparameter blocks and the
    /// scenario's deception mode into the red-team block.
    pub fn finalize(&mut self) {
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        self.detector.ae.seed = self.seed;
        self.redteam.hyper.seed = self.seed;
        if let Some(mode) = self.scenario.deception_mode() {
            self.redteam.deception.mode = mode;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| SentinelError::Config(e.to_string()))?;
        if !(0.0 < self.detector.quantile && self.detector.quantile < 1.0) {
            return Err(SentinelError::Config(format!(
                "detector.q must lie in (0, 1), got {}",
                self.detector.quantile
            )));
        }
        if self.trace_layer >= self.model.n_layers {
            return Err(SentinelError::Config(format!(
                "trace.layer {} out of range (model.n_layers = {})",
                self.trace_layer, self.model.n_layers
            )));
        }
        self.redteam
            .deception
            .validate(self.model.n_layers)
            .map_err(|e| SentinelError::Config(e.to_string()))?;
        Ok(())
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| {
        SentinelError::Config(format!(
            "line {line}: cannot parse value `{value}` for key `{key}`"
        ))
    })
}

fn parse_layer_list(key: &str, value: &str, line: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in value.split(',') {
        out.push(parse_value::<usize>(key, part, line)?);
    }
    Ok(out)
}

/// Parse a config file, applying defaults for absent keys.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        SentinelError::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen: BTreeSet<String> = BTreeSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(SentinelError::Config(format!(
                "line {line_no}: malformed line `{raw}` (expected key = value)"
            )));
        };
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(SentinelError::Config(format!(
                "line {line_no}: duplicate key `{key}`"
            )));
        }
        apply_key(&mut cfg, key, value, line_no)?;
    }
    cfg.finalize();
    cfg.validate()?;
    Ok(cfg)
}

fn apply_key(cfg: &mut RunConfig, key: &str, value: &str, line: usize) -> Result<()> {
    match key {
        "seed" => cfg.seed = parse_value(key, value, line)?,
        "workdir" => cfg.workdir = PathBuf::from(value),
        "scenario" => cfg.scenario = parse_value(key, value, line)?,

        "model.vocab_size" => cfg.model.vocab_size = parse_value(key, value, line)?,
        "model.seq_len" => cfg.model.seq_len = parse_value(key, value, line)?,
        "model.d_model" => cfg.model.d_model = parse_value(key, value, line)?,
        "model.n_heads" => cfg.model.n_heads = parse_value(key, value, line)?,
        "model.n_layers" => cfg.model.n_layers = parse_value(key, value, line)?,
        "model.trigger_token" => cfg.model.trigger_token = parse_value(key, value, line)?,
        "model.harmful_token" => cfg.model.harmful_token = parse_value(key, value, line)?,

        "data.n_benign" => cfg.data.n_benign = parse_value(key, value, line)?,
        "data.n_backdoor" => cfg.data.n_backdoor = parse_value(key, value, line)?,

        "train.learning_rate" => cfg.train.learning_rate = parse_value(key, value, line)?,
        "train.steps" => cfg.train.steps = parse_value(key, value, line)?,
        "train.batch_size" => cfg.train.batch_size = parse_value(key, value, line)?,
        "train.weight_decay" => cfg.train.weight_decay = parse_value(key, value, line)?,

        "trace.layer" => cfg.trace_layer = parse_value(key, value, line)?,

        "detector.q" => cfg.detector.quantile = parse_value(key, value, line)?,
        "detector.variance_target" => cfg.detector.variance_target = parse_value(key, value, line)?,
        "detector.ae_learning_rate" => {
            cfg.detector.ae.learning_rate = parse_value(key, value, line)?
        }
        "detector.ae_epochs" => cfg.detector.ae.epochs = parse_value(key, value, line)?,
        "detector.ae_patience" => cfg.detector.ae.patience = parse_value(key, value, line)?,
        "detector.vae_beta" => cfg.detector.vae_beta = parse_value(key, value, line)?,
        "detector.fit_cap" => cfg.detector.fit_cap = parse_value(key, value, line)?,

        "redteam.mode" => cfg.redteam.deception.mode = parse_value(key, value, line)?,
        "redteam.loss_layer" => cfg.redteam.deception.loss_layer = parse_value(key, value, line)?,
        "redteam.train_layers" => {
            cfg.redteam.deception.trainable_layers = parse_layer_list(key, value, line)?
        }
        "redteam.w_unify" => cfg.redteam.weights.w_unify = parse_value(key, value, line)?,
        "redteam.w_pred" => cfg.redteam.weights.w_pred = parse_value(key, value, line)?,
        "redteam.w_dae" => cfg.redteam.weights.w_dae = parse_value(key, value, line)?,
        "redteam.w_anchor" => cfg.redteam.weights.w_anchor = parse_value(key, value, line)?,
        "redteam.learning_rate" => cfg.redteam.hyper.learning_rate = parse_value(key, value, line)?,
        "redteam.steps" => cfg.redteam.hyper.steps = parse_value(key, value, line)?,
        "redteam.batch_size" => cfg.redteam.hyper.batch_size = parse_value(key, value, line)?,
        "redteam.adapter_rank" => cfg.redteam.hyper.adapter_rank = parse_value(key, value, line)?,
        "redteam.adapter_alpha" => cfg.redteam.hyper.adapter_alpha = parse_value(key, value, line)?,

        "intervene.examples" => cfg.intervene_examples = parse_value(key, value, line)?,

        other => {
            return Err(SentinelError::Config(format!(
                "line {line}: unknown key `{other}`"
            )))
        }
    }
    Ok(())
}
