//! Staged pipeline: data generation, backdoor training, trace extraction,
//! detector fitting, scoring, red-team fine-tuning, interventions, and
//! report emission.
//!
//! Stages run in a fixed order and communicate only through artifacts on
//! disk, so a stage list split across invocations reproduces a single
//! combined run byte for byte. Every stage appends a manifest line (stage,
//! input hashes, output hashes, wall time); before running, a stage's
//! inputs are re-hashed against the manifest to detect tampering.
//!
//! Scenario presets: c1 evaluates the backdoored model directly; c2 adds
//! unify-mode deception before a fresh blue-team pass; c3 adds
//! autoencoder-evasion deception against the frozen attention monitor and
//! reports the frozen vs retrained monitor comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, Scenario};
use crate::detectors::{
    calibrate_threshold, fit_autoencoder, fit_gram, fit_mahalanobis_default, fit_pca, fit_vae,
    read_detector, stack_features, write_detector, DetectorKind, DetectorParams, FittedDetector,
    ALL_DETECTORS,
};
use crate::error::{Result, SentinelError};
use crate::evaluation::{auroc, build_report, EvaluationReport, ScoreNormalizer, ScoredSample};
use crate::interventions::{position_spike_ratio, sweep, InterventionMode};
use crate::linalg::Matrix;
use crate::redteam::{finetune_deceptive, write_trajectories};
use crate::rng::SplitRng;
use crate::testbed::{
    gen_dataset, read_checkpoint, train_backdoor, write_checkpoint, LabeledExample, ToyModel,
};
use crate::traces::{read_traces, write_traces, Label, Split, TraceKind, TraceSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Gen,
    Train,
    Extract,
    Fit,
    Score,
    Redteam,
    Intervene,
    Evaluate,
}

pub const STAGE_ORDER: [Stage; 8] = [
    Stage::Gen,
    Stage::Train,
    Stage::Extract,
    Stage::Fit,
    Stage::Score,
    Stage::Redteam,
    Stage::Intervene,
    Stage::Evaluate,
];

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Train => "train",
            Stage::Extract => "extract",
            Stage::Fit => "fit",
            Stage::Score => "score",
            Stage::Redteam => "redteam",
            Stage::Intervene => "intervene",
            Stage::Evaluate => "evaluate",
        }
    }

    fn index(&self) -> usize {
        STAGE_ORDER.iter().position(|s| s == self).expect("listed")
    }
}

impl std::str::FromStr for Stage {
    type Err = SentinelError;
    fn from_str(s: &str) -> Result<Self> {
        STAGE_ORDER
            .iter()
            .find(|st| st.as_str() == s)
            .copied()
            .ok_or_else(|| {
                SentinelError::Config(format!(
                    "unknown stage `{s}` (expected gen|train|extract|fit|score|redteam|intervene|evaluate)"
                ))
            })
    }
}

/// Parse a comma-separated stage list; `all` expands to the scenario preset.
pub fn parse_stages(spec: &str, scenario: Scenario) -> Result<Vec<Stage>> {
    if spec == "all" {
        return Ok(default_stages(scenario));
    }
    let mut stages = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        stages.push(part.parse()?);
    }
    validate_stage_list(&stages, scenario)?;
    Ok(stages)
}

pub fn default_stages(scenario: Scenario) -> Vec<Stage> {
    match scenario {
        Scenario::C1 => vec![
            Stage::Gen,
            Stage::Train,
            Stage::Extract,
            Stage::Fit,
            Stage::Score,
            Stage::Intervene,
            Stage::Evaluate,
        ],
        Scenario::C2 | Scenario::C3 => vec![
            Stage::Gen,
            Stage::Train,
            Stage::Extract,
            Stage::Fit,
            Stage::Score,
            Stage::Redteam,
            Stage::Intervene,
            Stage::Evaluate,
        ],
    }
}

fn validate_stage_list(stages: &[Stage], scenario: Scenario) -> Result<()> {
    for w in stages.windows(2) {
        if w[1].index() <= w[0].index() {
            return Err(SentinelError::Config(format!(
                "stage list must follow the canonical order without duplicates: `{}` before `{}`",
                w[0].as_str(),
                w[1].as_str()
            )));
        }
    }
    if stages.contains(&Stage::Redteam) && scenario == Scenario::C1 {
        return Err(SentinelError::Config(
            "stage `redteam` is not applicable to scenario c1".into(),
        ));
    }
    Ok(())
}

/// Filters for single-stage CLI invocations.
#[derive(Debug, Clone, Default)]
pub struct StageOptions {
    pub extract_layer: Option<usize>,
    pub extract_kind: Option<TraceKind>,
    pub fit_detector: Option<DetectorKind>,
    pub intervene_mode: Option<InterventionMode>,
    pub intervene_layers: Option<Vec<usize>>,
}

// ---------------------------------------------------------------------------
// Artifact names
// ---------------------------------------------------------------------------

pub const DATASET_FILE: &str = "dataset.json";
pub const BASE_MODEL_FILE: &str = "model_base.snmd";
pub const TRAIN_METRICS_FILE: &str = "train_metrics.json";
pub const DECEPTIVE_MODEL_FILE: &str = "model_deceptive.snmd";
pub const REDTEAM_LOSSES_FILE: &str = "redteam_losses.csv";
pub const DECEPTIVE_METRICS_FILE: &str = "deceptive_metrics.json";
pub const SWEEP_FILE: &str = "intervention_sweep.csv";
pub const SPIKE_FILE: &str = "intervention_spike.json";
pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const MONITOR_REPORT_BASE: &str = "monitor_c3";

pub fn traces_file(model: &str, kind: TraceKind) -> String {
    format!("traces_{model}_{}.sntr", kind.as_str())
}

pub fn detector_file(model: &str, kind: TraceKind, det: DetectorKind) -> String {
    format!("detector_{model}_{}_{}.sndt", kind.as_str(), det.as_str())
}

pub fn scores_file(model: &str, kind: TraceKind) -> String {
    format!("scores_{model}_{}.json", kind.as_str())
}

pub fn report_file(scenario: Scenario, kind: TraceKind, ext: &str) -> String {
    format!("report_{}_{}.{ext}", scenario.as_str(), kind.as_str())
}

const BOTH_KINDS: [TraceKind; 2] = [TraceKind::Attention, TraceKind::Activation];

fn producer_of(name: &str) -> &'static str {
    if name == DATASET_FILE {
        "gen"
    } else if name == BASE_MODEL_FILE || name == TRAIN_METRICS_FILE {
        "train"
    } else if name.starts_with("traces_base") {
        "extract"
    } else if name.starts_with("detector_base") {
        "fit"
    } else if name.starts_with("scores_base") {
        "score"
    } else if name == DECEPTIVE_MODEL_FILE || name == REDTEAM_LOSSES_FILE {
        "redteam"
    } else {
        "evaluate"
    }
}

// ---------------------------------------------------------------------------
// Scored-sample records
// ---------------------------------------------------------------------------

/// One scored trace: label and split plus per-detector scores and flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub label: Label,
    pub split: Split,
    pub scores: BTreeMap<String, f64>,
    pub flags: BTreeMap<String, bool>,
}

impl ScoredRecord {
    fn as_sample(&self) -> ScoredSample {
        ScoredSample {
            label: self.label,
            scores: self.scores.clone(),
            flags: self.flags.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

struct Manifest {
    path: PathBuf,
    /// Latest recorded hash per artifact name.
    latest: BTreeMap<String, String>,
}

impl Manifest {
    fn load(workdir: &Path) -> Result<Manifest> {
        let path = workdir.join(MANIFEST_FILE);
        let mut latest = BTreeMap::new();
        if path.exists() {
            for line in std::fs::read_to_string(&path)?.lines() {
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() != 4 {
                    continue;
                }
                for part in cols[2].split(',').filter(|p| !p.is_empty()) {
                    if let Some((name, hash)) = part.split_once('=') {
                        latest.insert(name.to_string(), hash.to_string());
                    }
                }
            }
        }
        Ok(Manifest { path, latest })
    }

    fn verify_inputs(
        &self,
        stage: Stage,
        workdir: &Path,
        inputs: &[String],
    ) -> Result<Vec<(String, String)>> {
        let mut hashed = Vec::new();
        for name in inputs {
            let path = workdir.join(name);
            if !path.exists() {
                return Err(SentinelError::MissingArtifact {
                    stage: stage.as_str().to_string(),
                    path: path.display().to_string(),
                    produced_by: producer_of(name).to_string(),
                });
            }
            let hash = hash_file(&path)?;
            if let Some(recorded) = self.latest.get(name) {
                if recorded != &hash {
                    return Err(SentinelError::InvalidArgument(format!(
                        "artifact `{name}` no longer matches the hash recorded in the manifest (tampered or stale)"
                    )));
                }
            }
            hashed.push((name.clone(), hash));
        }
        Ok(hashed)
    }

    fn append(
        &mut self,
        stage: Stage,
        inputs: &[(String, String)],
        outputs: &[(String, String)],
        wall_ms: u128,
    ) -> Result<()> {
        let mut line = String::new();
        let join = |pairs: &[(String, String)]| {
            pairs
                .iter()
                .map(|(n, h)| format!("{n}={h}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        write!(
            line,
            "{}\t{}\t{}\t{}",
            stage.as_str(),
            join(inputs),
            join(outputs),
            wall_ms
        )
        .expect("string write");
        line.push('\n');
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        f.write_all(line.as_bytes())?;
        for (n, h) in outputs {
            self.latest.insert(n.clone(), h.clone());
        }
        Ok(())
    }
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").expect("string write");
    }
    s
}

// ---------------------------------------------------------------------------
// Stage implementations
// ---------------------------------------------------------------------------

fn read_dataset(path: &Path) -> Result<Vec<LabeledExample>> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json.as_bytes())?;
    Ok(())
}

fn stage_gen(cfg: &RunConfig, workdir: &Path) -> Result<Vec<String>> {
    let dataset = gen_dataset(&cfg.model, cfg.data.n_benign, cfg.data.n_backdoor, cfg.seed)?;
    write_json(&workdir.join(DATASET_FILE), &dataset)?;
    Ok(vec![DATASET_FILE.to_string()])
}

fn stage_train(cfg: &RunConfig, workdir: &Path) -> Result<Vec<String>> {
    let dataset = read_dataset(&workdir.join(DATASET_FILE))?;
    let model = ToyModel::init(&cfg.model)?;
    let (model, report) = train_backdoor(model, &dataset, &cfg.train)?;
    write_checkpoint(&workdir.join(BASE_MODEL_FILE), &model)?;
    write_json(&workdir.join(TRAIN_METRICS_FILE), &report)?;
    Ok(vec![
        BASE_MODEL_FILE.to_string(),
        TRAIN_METRICS_FILE.to_string(),
    ])
}

fn extract_kinds(opts: &StageOptions) -> Vec<TraceKind> {
    match opts.extract_kind {
        Some(kind) => vec![kind],
        None => BOTH_KINDS.to_vec(),
    }
}

fn stage_extract(cfg: &RunConfig, workdir: &Path, opts: &StageOptions) -> Result<Vec<String>> {
    let dataset = read_dataset(&workdir.join(DATASET_FILE))?;
    let model = read_checkpoint(&workdir.join(BASE_MODEL_FILE))?;
    let layer = opts.extract_layer.unwrap_or(cfg.trace_layer);
    let mut outputs = Vec::new();
    for kind in extract_kinds(opts) {
        let set = model.extract_traces(&dataset, layer, kind)?;
        let name = traces_file("base", kind);
        write_traces(&workdir.join(&name), &set)?;
        outputs.push(name);
    }
    Ok(outputs)
}

/// Fit one detector variant on benign-train features and calibrate its
/// threshold on benign-calibration scores.
fn fit_one(kind: DetectorKind, traces: &TraceSet, cfg: &RunConfig) -> Result<FittedDetector> {
    let train: Vec<&crate::traces::TraceRecord> = traces
        .records
        .iter()
        .filter(|r| r.label == Label::Benign && r.split == Split::Train)
        .collect();
    let calib: Vec<&crate::traces::TraceRecord> = traces
        .records
        .iter()
        .filter(|r| r.label == Label::Benign && r.split == Split::Calibration)
        .collect();
    if train.is_empty() || calib.is_empty() {
        return Err(SentinelError::InvalidArgument(
            "detector fitting needs benign train and calibration traces".into(),
        ));
    }

    let params = match kind {
        DetectorKind::Mahalanobis => {
            let features = stack_features(&train)?;
            DetectorParams::Mahalanobis(fit_mahalanobis_default(&features)?)
        }
        DetectorKind::Pca => {
            let features = stack_features(&train)?;
            DetectorParams::Pca(fit_pca(&features, cfg.detector.variance_target)?)
        }
        DetectorKind::Ae | DetectorKind::Vae => {
            let capped: Vec<&crate::traces::TraceRecord> =
                train.iter().take(cfg.detector.fit_cap).copied().collect();
            let features = stack_features(&capped)?;
            let calib_features = stack_features(&calib)?;
            if kind == DetectorKind::Ae {
                DetectorParams::Ae(fit_autoencoder(
                    &features,
                    &calib_features,
                    &cfg.detector.ae,
                )?)
            } else {
                DetectorParams::Vae(fit_vae(
                    &features,
                    &calib_features,
                    &cfg.detector.ae,
                    cfg.detector.vae_beta,
                )?)
            }
        }
        DetectorKind::Gram => {
            let payloads: Vec<&Matrix> = train.iter().map(|r| &r.payload).collect();
            DetectorParams::Gram(fit_gram(&payloads)?)
        }
    };
    let calib_payloads: Vec<&Matrix> = calib.iter().map(|r| &r.payload).collect();
    calibrate_threshold(params, &calib_payloads, cfg.detector.quantile)
}

fn fit_suite(
    traces: &TraceSet,
    cfg: &RunConfig,
    which: &[DetectorKind],
) -> Result<Vec<FittedDetector>> {
    use rayon::prelude::*;
    which
        .par_iter()
        .map(|&kind| fit_one(kind, traces, cfg))
        .collect()
}

fn stage_fit(cfg: &RunConfig, workdir: &Path, opts: &StageOptions) -> Result<Vec<String>> {
    let which: Vec<DetectorKind> = match opts.fit_detector {
        Some(kind) => vec![kind],
        None => ALL_DETECTORS.to_vec(),
    };
    let mut outputs = Vec::new();
    for kind in BOTH_KINDS {
        let traces = read_traces(&workdir.join(traces_file("base", kind)))?;
        let fitted = fit_suite(&traces, cfg, &which)?;
        for det in fitted {
            let name = detector_file("base", kind, det.kind());
            write_detector(&workdir.join(&name), &det)?;
            outputs.push(name);
        }
    }
    Ok(outputs)
}

/// Score calibration- and test-split traces with a detector suite.
fn score_suite(traces: &TraceSet, detectors: &[FittedDetector]) -> Result<Vec<ScoredRecord>> {
    use rayon::prelude::*;
    let subjects: Vec<&crate::traces::TraceRecord> = traces
        .records
        .iter()
        .filter(|r| r.split != Split::Train)
        .collect();
    subjects
        .par_iter()
        .map(|rec| {
            let mut scores = BTreeMap::new();
            let mut flags = BTreeMap::new();
            for det in detectors {
                let s = det.score(&rec.payload)?;
                scores.insert(det.kind().as_str().to_string(), s);
                flags.insert(det.kind().as_str().to_string(), s > det.threshold);
            }
            Ok(ScoredRecord {
                label: rec.label,
                split: rec.split,
                scores,
                flags,
            })
        })
        .collect()
}

fn load_suite(workdir: &Path, model: &str, kind: TraceKind) -> Result<Vec<FittedDetector>> {
    ALL_DETECTORS
        .iter()
        .map(|&d| read_detector(&workdir.join(detector_file(model, kind, d))))
        .collect()
}

fn stage_score(workdir: &Path) -> Result<Vec<String>> {
    let mut outputs = Vec::new();
    for kind in BOTH_KINDS {
        let traces = read_traces(&workdir.join(traces_file("base", kind)))?;
        let detectors = load_suite(workdir, "base", kind)?;
        let records = score_suite(&traces, &detectors)?;
        let name = scores_file("base", kind);
        write_json(&workdir.join(&name), &records)?;
        outputs.push(name);
    }
    Ok(outputs)
}

fn stage_redteam(cfg: &RunConfig, workdir: &Path) -> Result<Vec<String>> {
    let dataset = read_dataset(&workdir.join(DATASET_FILE))?;
    let model = read_checkpoint(&workdir.join(BASE_MODEL_FILE))?;

    let monitor = if cfg.scenario == Scenario::C3 {
        let det = read_detector(&workdir.join(detector_file(
            "base",
            TraceKind::Attention,
            DetectorKind::Ae,
        )))?;
        match det.params {
            DetectorParams::Ae(p) => Some(p),
            _ => unreachable!("ae detector file holds ae params"),
        }
    } else {
        None
    };

    let (adapted, trajectory) = finetune_deceptive(
        &model,
        &dataset,
        &cfg.redteam.deception,
        &cfg.redteam.weights,
        &cfg.redteam.hyper,
        monitor.as_ref(),
    )?;
    write_checkpoint(&workdir.join(DECEPTIVE_MODEL_FILE), &adapted)?;
    write_trajectories(&workdir.join(REDTEAM_LOSSES_FILE), &trajectory)?;
    Ok(vec![
        DECEPTIVE_MODEL_FILE.to_string(),
        REDTEAM_LOSSES_FILE.to_string(),
    ])
}

/// Held-out behavior of the deceptive model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeceptiveMetrics {
    pub clean_accuracy: f64,
    pub trigger_success: f64,
}

/// Per-layer trigger-position spike statistics in mean mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpikeLayer {
    pub layer: usize,
    pub backdoor_ratio: f64,
    pub benign_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpikeReport {
    pub per_layer: Vec<SpikeLayer>,
    pub most_sensitive_layer: usize,
    pub backdoor_ratio: f64,
    pub benign_ratio: f64,
}

pub fn spike_report(
    model: &ToyModel,
    dataset: &[LabeledExample],
    n_examples: usize,
    seed: u64,
) -> Result<SpikeReport> {
    let backdoor: Vec<(LabeledExample, usize)> = dataset
        .iter()
        .filter(|e| e.is_backdoor && e.split == Split::Test)
        .take(n_examples)
        .map(|e| {
            let pos = e.trigger_pos.expect("backdoor example has trigger");
            (e.clone(), pos)
        })
        .collect();
    let mut rng = SplitRng::for_label(seed, "intervene-designated");
    let benign: Vec<(LabeledExample, usize)> = dataset
        .iter()
        .filter(|e| !e.is_backdoor && e.split == Split::Test)
        .take(n_examples)
        .map(|e| {
            let pos = rng.gen_range(1, model.config.seq_len - 1);
            (e.clone(), pos)
        })
        .collect();
    if backdoor.is_empty() || benign.is_empty() {
        return Err(SentinelError::InvalidArgument(
            "spike report needs backdoor and benign test examples".into(),
        ));
    }

    let mut per_layer = Vec::new();
    for layer in 0..model.config.n_layers {
        let backdoor_ratio = position_spike_ratio(model, &backdoor, layer, InterventionMode::Mean)?;
        let benign_ratio = position_spike_ratio(model, &benign, layer, InterventionMode::Mean)?;
        per_layer.push(SpikeLayer {
            layer,
            backdoor_ratio,
            benign_ratio,
        });
    }
    let best = per_layer
        .iter()
        .max_by(|a, b| a.backdoor_ratio.partial_cmp(&b.backdoor_ratio).unwrap())
        .expect("n_layers > 0");
    Ok(SpikeReport {
        most_sensitive_layer: best.layer,
        backdoor_ratio: best.backdoor_ratio,
        benign_ratio: best.benign_ratio,
        per_layer,
    })
}

fn stage_intervene(cfg: &RunConfig, workdir: &Path, opts: &StageOptions) -> Result<Vec<String>> {
    let dataset = read_dataset(&workdir.join(DATASET_FILE))?;
    let model = read_checkpoint(&workdir.join(BASE_MODEL_FILE))?;

    let layers: Vec<usize> = opts
        .intervene_layers
        .clone()
        .unwrap_or_else(|| (0..cfg.model.n_layers).collect());
    let modes: Vec<InterventionMode> = match opts.intervene_mode {
        Some(m) => vec![m],
        None => vec![InterventionMode::Mean, InterventionMode::Zero],
    };

    let backdoor_test: Vec<LabeledExample> = dataset
        .iter()
        .filter(|e| e.is_backdoor && e.split == Split::Test)
        .take(cfg.intervene_examples)
        .cloned()
        .collect();
    let grid = sweep(&model, &backdoor_test, &layers, &modes)?;
    let sweep_path = workdir.join(SWEEP_FILE);
    let mut w = csv::Writer::from_path(&sweep_path)?;
    w.write_record(["layer", "position", "mode", "mean_diff"])?;
    for cell in &grid {
        w.write_record([
            cell.layer.to_string(),
            cell.position.to_string(),
            cell.mode.as_str().to_string(),
            cell.mean_diff.to_string(),
        ])?;
    }
    w.flush()?;
    drop(w);

    let spike = spike_report(&model, &dataset, cfg.intervene_examples, cfg.seed)?;
    write_json(&workdir.join(SPIKE_FILE), &spike)?;
    Ok(vec![SWEEP_FILE.to_string(), SPIKE_FILE.to_string()])
}

/// Normalizers fitted on benign calibration scores, per detector.
fn normalizers_from(records: &[ScoredRecord]) -> Result<BTreeMap<String, ScoreNormalizer>> {
    let mut per_detector: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for rec in records {
        if rec.split != Split::Calibration || rec.label != Label::Benign {
            continue;
        }
        for (name, &s) in &rec.scores {
            per_detector.entry(name.clone()).or_default().push(s);
        }
    }
    let mut out = BTreeMap::new();
    for (name, scores) in per_detector {
        out.insert(name, ScoreNormalizer::fit(&scores)?);
    }
    Ok(out)
}

/// Build the challenge report for one trace kind from scored records.
pub fn report_from_records(
    scenario: Scenario,
    kind: TraceKind,
    records: &[ScoredRecord],
) -> Result<EvaluationReport> {
    let normalizers = normalizers_from(records)?;
    let samples: Vec<ScoredSample> = records
        .iter()
        .filter(|r| r.split == Split::Test)
        .map(|r| r.as_sample())
        .collect();
    let order: Vec<String> = ALL_DETECTORS
        .iter()
        .map(|d| d.as_str().to_string())
        .collect();
    build_report(
        scenario.as_str(),
        kind.as_str(),
        &order,
        &samples,
        &normalizers,
    )
}

/// Monitor-evasion comparison: the c1-fitted attention autoencoder frozen
/// vs retrained on the deceptive model's benign traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorReport {
    /// AUROC of the attention AE on the base (pre-deception) traces.
    pub baseline_auroc: f64,
    /// AUROC of the frozen base AE on the deceptive model's traces.
    pub frozen_auroc: f64,
    /// AUROC of a freshly retrained AE on the deceptive model's traces.
    pub retrained_auroc: f64,
}

impl MonitorReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["monitor", "auroc"])?;
        w.write_record(["baseline_ae", &self.baseline_auroc.to_string()])?;
        w.write_record(["frozen_ae", &self.frozen_auroc.to_string()])?;
        w.write_record(["retrained_ae", &self.retrained_auroc.to_string()])?;
        w.flush()?;
        Ok(())
    }
}

fn detector_auroc(records: &[ScoredRecord], name: &str) -> Result<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for r in records.iter().filter(|r| r.split == Split::Test) {
        let s = r.scores.get(name).ok_or_else(|| {
            SentinelError::InvalidArgument(format!("missing detector score `{name}`"))
        })?;
        scores.push(*s);
        labels.push(r.label);
    }
    auroc(&scores, &labels)
}

fn stage_evaluate(cfg: &RunConfig, workdir: &Path) -> Result<Vec<String>> {
    let mut outputs = Vec::new();
    match cfg.scenario {
        Scenario::C1 => {
            for kind in BOTH_KINDS {
                let records: Vec<ScoredRecord> = serde_json::from_str(&std::fs::read_to_string(
                    workdir.join(scores_file("base", kind)),
                )?)?;
                let report = report_from_records(cfg.scenario, kind, &records)?;
                let csv_name = report_file(cfg.scenario, kind, "csv");
                let json_name = report_file(cfg.scenario, kind, "json");
                report.write_csv(&workdir.join(&csv_name))?;
                report.write_json(&workdir.join(&json_name))?;
                outputs.push(csv_name);
                outputs.push(json_name);
            }
        }
        Scenario::C2 | Scenario::C3 => {
            let dataset = read_dataset(&workdir.join(DATASET_FILE))?;
            let deceptive = read_checkpoint(&workdir.join(DECEPTIVE_MODEL_FILE))?;

            // Behavior retention of the deceptive model on held-out data.
            let benign_test: Vec<LabeledExample> = dataset
                .iter()
                .filter(|e| !e.is_backdoor && e.split == Split::Test)
                .cloned()
                .collect();
            let backdoor_test: Vec<LabeledExample> = dataset
                .iter()
                .filter(|e| e.is_backdoor && e.split == Split::Test)
                .cloned()
                .collect();
            let metrics = DeceptiveMetrics {
                clean_accuracy: crate::testbed::accuracy(&deceptive, &benign_test)?,
                trigger_success: crate::testbed::accuracy(&deceptive, &backdoor_test)?,
            };
            write_json(&workdir.join(DECEPTIVE_METRICS_FILE), &metrics)?;
            outputs.push(DECEPTIVE_METRICS_FILE.to_string());

            for kind in BOTH_KINDS {
                // Blue team refits on the deployed (deceptive) model.
                let set = deceptive.extract_traces(&dataset, cfg.trace_layer, kind)?;
                let tname = traces_file("dec", kind);
                write_traces(&workdir.join(&tname), &set)?;
                outputs.push(tname.clone());
                let set = read_traces(&workdir.join(&tname))?;

                let fitted = fit_suite(&set, cfg, &ALL_DETECTORS)?;
                for det in &fitted {
                    let dname = detector_file("dec", kind, det.kind());
                    write_detector(&workdir.join(&dname), det)?;
                    outputs.push(dname);
                }
                let records = score_suite(&set, &fitted)?;
                let sname = scores_file("dec", kind);
                write_json(&workdir.join(&sname), &records)?;
                outputs.push(sname);

                let report = report_from_records(cfg.scenario, kind, &records)?;
                let csv_name = report_file(cfg.scenario, kind, "csv");
                let json_name = report_file(cfg.scenario, kind, "json");
                report.write_csv(&workdir.join(&csv_name))?;
                report.write_json(&workdir.join(&json_name))?;
                outputs.push(csv_name);
                outputs.push(json_name);

                if cfg.scenario == Scenario::C3 && kind == TraceKind::Attention {
                    let base_records: Vec<ScoredRecord> = serde_json::from_str(
                        &std::fs::read_to_string(workdir.join(scores_file("base", kind)))?,
                    )?;
                    let baseline_auroc = detector_auroc(&base_records, "ae")?;

                    let frozen = read_detector(&workdir.join(detector_file(
                        "base",
                        kind,
                        DetectorKind::Ae,
                    )))?;
                    let frozen_records = score_suite(&set, std::slice::from_ref(&frozen))?;
                    let frozen_auroc = detector_auroc(&frozen_records, "ae")?;
                    let retrained_auroc = detector_auroc(&records, "ae")?;

                    let monitor = MonitorReport {
                        baseline_auroc,
                        frozen_auroc,
                        retrained_auroc,
                    };
                    let csv_name = format!("{MONITOR_REPORT_BASE}.csv");
                    let json_name = format!("{MONITOR_REPORT_BASE}.json");
                    monitor.write_csv(&workdir.join(&csv_name))?;
                    write_json(&workdir.join(&json_name), &monitor)?;
                    outputs.push(csv_name);
                    outputs.push(json_name);
                }
            }
        }
    }
    Ok(outputs)
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

fn stage_inputs(cfg: &RunConfig, stage: Stage) -> Vec<String> {
    match stage {
        Stage::Gen => vec![],
        Stage::Train => vec![DATASET_FILE.to_string()],
        Stage::Extract => vec![DATASET_FILE.to_string(), BASE_MODEL_FILE.to_string()],
        Stage::Fit => BOTH_KINDS.iter().map(|&k| traces_file("base", k)).collect(),
        Stage::Score => {
            let mut v: Vec<String> = BOTH_KINDS.iter().map(|&k| traces_file("base", k)).collect();
            for kind in BOTH_KINDS {
                for det in ALL_DETECTORS {
                    v.push(detector_file("base", kind, det));
                }
            }
            v
        }
        Stage::Redteam => {
            let mut v = vec![DATASET_FILE.to_string(), BASE_MODEL_FILE.to_string()];
            if cfg.scenario == Scenario::C3 {
                v.push(detector_file(
                    "base",
                    TraceKind::Attention,
                    DetectorKind::Ae,
                ));
            }
            v
        }
        Stage::Intervene => vec![DATASET_FILE.to_string(), BASE_MODEL_FILE.to_string()],
        Stage::Evaluate => match cfg.scenario {
            Scenario::C1 => BOTH_KINDS.iter().map(|&k| scores_file("base", k)).collect(),
            Scenario::C2 => vec![DATASET_FILE.to_string(), DECEPTIVE_MODEL_FILE.to_string()],
            Scenario::C3 => vec![
                DATASET_FILE.to_string(),
                DECEPTIVE_MODEL_FILE.to_string(),
                scores_file("base", TraceKind::Attention),
                detector_file("base", TraceKind::Attention, DetectorKind::Ae),
            ],
        },
    }
}

/// Run one stage inside the manifest framework.
pub fn run_stage(cfg: &RunConfig, stage: Stage, opts: &StageOptions) -> Result<()> {
    let workdir = &cfg.workdir;
    std::fs::create_dir_all(workdir)?;
    let mut manifest = Manifest::load(workdir)?;
    let inputs = manifest.verify_inputs(stage, workdir, &stage_inputs(cfg, stage))?;

    let start = Instant::now();
    let output_names = match stage {
        Stage::Gen => stage_gen(cfg, workdir)?,
        Stage::Train => stage_train(cfg, workdir)?,
        Stage::Extract => stage_extract(cfg, workdir, opts)?,
        Stage::Fit => stage_fit(cfg, workdir, opts)?,
        Stage::Score => stage_score(workdir)?,
        Stage::Redteam => stage_redteam(cfg, workdir)?,
        Stage::Intervene => stage_intervene(cfg, workdir, opts)?,
        Stage::Evaluate => stage_evaluate(cfg, workdir)?,
    };
    let wall_ms = start.elapsed().as_millis();

    let mut outputs = Vec::new();
    for name in output_names {
        let hash = hash_file(&workdir.join(&name))?;
        outputs.push((name, hash));
    }
    manifest.append(stage, &inputs, &outputs, wall_ms)?;
    Ok(())
}

/// Run a stage list in order. An empty list is a no-op.
pub fn run_pipeline(cfg: &RunConfig, stages: &[Stage], opts: &StageOptions) -> Result<()> {
    validate_stage_list(stages, cfg.scenario)?;
    for &stage in stages {
        run_stage(cfg, stage, opts)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_list_order_enforced() {
        assert!(parse_stages("gen,train", Scenario::C1).is_ok());
        assert!(parse_stages("train,gen", Scenario::C1).is_err());
        assert!(parse_stages("gen,gen", Scenario::C1).is_err());
        assert!(parse_stages("redteam", Scenario::C1).is_err());
        assert!(parse_stages("redteam", Scenario::C2).is_ok());
    }

    #[test]
    fn all_expands_to_scenario_preset() {
        let stages = parse_stages("all", Scenario::C1).unwrap();
        assert!(!stages.contains(&Stage::Redteam));
        let stages = parse_stages("all", Scenario::C3).unwrap();
        assert!(stages.contains(&Stage::Redteam));
    }

    #[test]
    fn missing_artifact_names_producing_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig {
            workdir: dir.path().to_path_buf(),
            ..Default::default()
        };
        cfg.finalize();
        let err = run_stage(&cfg, Stage::Train, &StageOptions::default()).unwrap_err();
        match err {
            SentinelError::MissingArtifact { produced_by, .. } => {
                assert_eq!(produced_by, "gen");
            }
            other => panic!("expected MissingArtifact, got {other}"),
        }
    }

    #[test]
    fn empty_stage_list_is_noop() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig {
            workdir: dir.path().to_path_buf(),
            ..Default::default()
        };
        cfg.finalize();
        run_pipeline(&cfg, &[], &StageOptions::default()).unwrap();
        assert!(!dir.path().join(MANIFEST_FILE).exists());
    }

    #[test]
    fn manifest_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig {
            workdir: dir.path().to_path_buf(),
            ..Default::default()
        };
        cfg.finalize();
        run_stage(&cfg, Stage::Gen, &StageOptions::default()).unwrap();
        // Corrupt the dataset after its hash was recorded.
        let path = dir.path().join(DATASET_FILE);
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push(' ');
        std::fs::write(&path, text).unwrap();
        let err = run_stage(&cfg, Stage::Train, &StageOptions::default()).unwrap_err();
        assert!(err.to_string().contains("manifest"));
    }
}
