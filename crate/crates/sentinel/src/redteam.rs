//! Red-team deception training.
//!
//! Attaches low-rank adapters to chosen layers of the backdoored model and
//! optimizes, with heavy weighting, either the unifying loss (one minus the
//! mean cosine similarity between benign and backdoor normalized attention
//! patterns at the loss layer) or the autoencoder-evasion loss (mean
//! absolute difference of a frozen monitor's reconstruction losses on
//! benign vs backdoor features), alongside the prediction loss on both
//! classes and an anchor term that holds benign representations near the
//! frozen base model.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::detectors::{ae_reconstruct, AeParams};
use crate::error::{Result, SentinelError};
use crate::linalg::Matrix;
use crate::rng::SplitRng;
use crate::testbed::{LabeledExample, StageMode, ToyModel};
use crate::traces::Split;

pub use crate::testbed::LowRankAdapter;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_unify: f64,
    pub w_pred: f64,
    pub w_dae: f64,
    pub w_anchor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_unify: 1e5,
            w_pred: 1.0,
            w_dae: 1e5,
            w_anchor: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_unify < 0.0 || self.w_pred < 0.0 || self.w_dae < 0.0 || self.w_anchor < 0.0 {
            return Err(SentinelError::InvalidArgument(
                "loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DeceptionMode {
    Unify,
    AeEvasion,
}

impl DeceptionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DeceptionMode::Unify => "unify",
            DeceptionMode::AeEvasion => "ae-evasion",
        }
    }
}

impl std::str::FromStr for DeceptionMode {
    type Err = SentinelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unify" => Ok(DeceptionMode::Unify),
            "ae-evasion" | "ae_evasion" => Ok(DeceptionMode::AeEvasion),
            other => Err(SentinelError::InvalidArgument(format!(
                "unknown deception mode `{other}` (expected unify|ae-evasion)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeceptionConfig {
    /// Layer whose traces the deception loss is evaluated on.
    pub loss_layer: usize,
    /// Layers that receive trainable adapters.
    pub trainable_layers: Vec<usize>,
    pub mode: DeceptionMode,
}

impl DeceptionConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.loss_layer >= n_layers {
            return Err(SentinelError::InvalidArgument(format!(
                "loss_layer {} out of range (n_layers = {n_layers})",
                self.loss_layer
            )));
        }
        if self.trainable_layers.is_empty() {
            return Err(SentinelError::InvalidArgument(
                "trainable_layers must be nonempty".into(),
            ));
        }
        for &l in &self.trainable_layers {
            if l >= n_layers {
                return Err(SentinelError::InvalidArgument(format!(
                    "trainable layer {l} out of range (n_layers = {n_layers})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedteamHyper {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub adapter_rank: usize,
    pub adapter_alpha: f64,
    pub seed: u64,
}

impl Default for RedteamHyper {
    fn default() -> Self {
        RedteamHyper {
            learning_rate: 5e-5,
            steps: 3000,
            batch_size: 4,
            adapter_rank: 4,
            adapter_alpha: 8.0,
            seed: 0,
        }
    }
}

/// One logged optimization step: the active deception loss, the weighted
/// total, and the per-class prediction losses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub deception: f64,
    pub total: f64,
    pub pred_normal: f64,
    pub pred_backdoor: f64,
}

pub fn write_trajectories(path: &std::path::Path, points: &[TrajectoryPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "deception", "total", "pred_normal", "pred_backdoor"])?;
    for p in points {
        w.write_record([
            p.step.to_string(),
            p.deception.to_string(),
            p.total.to_string(),
            p.pred_normal.to_string(),
            p.pred_backdoor.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cosine_flat(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(SentinelError::ShapeMismatch(format!(
            "unifying loss: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let na = a.frobenius_norm();
    let nb = b.frobenius_norm();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

/// One minus the mean cosine similarity between paired benign and backdoor
/// normalized attention patterns. Range [0, 2]; zero-norm patterns
/// contribute similarity 0.
pub fn unifying_loss(benign: &[Matrix], backdoor: &[Matrix]) -> Result<f64> {
    if benign.len() != backdoor.len() || benign.is_empty() {
        return Err(SentinelError::InvalidArgument(format!(
            "unifying loss: batch sizes {} vs {}",
            benign.len(),
            backdoor.len()
        )));
    }
    let mut total = 0.0;
    for (a, b) in benign.iter().zip(backdoor) {
        total += cosine_flat(a, b)?;
    }
    Ok(1.0 - total / benign.len() as f64)
}

/// Mean cross-entropy of the target token at the final prompt position.
pub fn prediction_loss(model: &ToyModel, batch: &[LabeledExample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(SentinelError::InvalidArgument(
            "prediction loss: empty batch".into(),
        ));
    }
    let mut total = 0.0;
    for ex in batch {
        let cap = model.forward_capture(&ex.prompt)?;
        let row = cap.logits.row(cap.logits.rows() - 1);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[ex.target];
    }
    Ok(total / batch.len() as f64)
}

/// Unnormalized reconstruction loss of the frozen monitor.
fn monitor_recon_loss(monitor: &AeParams, x: &[f64]) -> Result<f64> {
    let recon = ae_reconstruct(monitor, x)?;
    Ok(x.iter().zip(&recon).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Mean absolute difference between the frozen monitor's reconstruction
/// losses on paired benign and backdoor feature rows.
pub fn ae_evasion_loss(
    monitor: &AeParams,
    benign: &[Vec<f64>],
    backdoor: &[Vec<f64>],
) -> Result<f64> {
    if benign.len() != backdoor.len() || benign.is_empty() {
        return Err(SentinelError::InvalidArgument(format!(
            "ae evasion loss: batch sizes {} vs {}",
            benign.len(),
            backdoor.len()
        )));
    }
    let mut total = 0.0;
    for (x, xh) in benign.iter().zip(backdoor) {
        total += (monitor_recon_loss(monitor, x)? - monitor_recon_loss(monitor, xh)?).abs();
    }
    Ok(total / benign.len() as f64)
}

/// Mean squared distance between the current and frozen-base models'
/// loss-layer residual representations on a benign batch, per element.
pub fn anchor_loss(
    model: &ToyModel,
    base: &ToyModel,
    benign: &[LabeledExample],
    loss_layer: usize,
) -> Result<f64> {
    if model.config != base.config {
        return Err(SentinelError::InvalidArgument(
            "anchor loss: model configs differ".into(),
        ));
    }
    if benign.is_empty() {
        return Err(SentinelError::InvalidArgument(
            "anchor loss: empty batch".into(),
        ));
    }
    let mut total = 0.0;
    for ex in benign {
        let cur = model.forward_capture(&ex.prompt)?;
        let ref_cap = base.forward_capture(&ex.prompt)?;
        let a = &cur.residuals[loss_layer];
        let b = &ref_cap.residuals[loss_layer];
        let width = (a.rows() * a.cols()) as f64;
        let sq: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        total += sq / width;
    }
    Ok(total / benign.len() as f64)
}

/// Node handles of one deception-training step's losses.
pub struct DeceptionLosses {
    pub deception: NodeId,
    pub pred_normal: NodeId,
    pub pred_backdoor: NodeId,
    pub anchor: NodeId,
    pub total: NodeId,
}

/// Build one step's losses on a tape against staged parameter nodes: the
/// active deception loss, per-class prediction losses, the anchor term, and
/// their weighted total.
#[allow(clippy::too_many_arguments)]
pub fn build_deception_losses(
    model: &ToyModel,
    base: &ToyModel,
    tape: &mut Tape,
    graph: &crate::testbed::ModelGraph,
    config: &DeceptionConfig,
    weights: &LossWeights,
    monitor: Option<&AeParams>,
    benign: &[&LabeledExample],
    backdoor: &[&LabeledExample],
) -> Result<DeceptionLosses> {
    if benign.is_empty() || benign.len() != backdoor.len() {
        return Err(SentinelError::InvalidArgument(format!(
            "deception losses: batch sizes {} vs {}",
            benign.len(),
            backdoor.len()
        )));
    }
    let last = model.config.seq_len - 1;
    let layer = config.loss_layer;
    let n = benign.len() as f64;

    let mut ce_normal: Option<NodeId> = None;
    let mut ce_backdoor: Option<NodeId> = None;
    let mut anchor_acc: Option<NodeId> = None;
    let mut benign_patterns = Vec::with_capacity(benign.len());
    let mut backdoor_patterns = Vec::with_capacity(backdoor.len());

    let add_in = |tape: &mut Tape, acc: &mut Option<NodeId>, v: NodeId| -> Result<()> {
        *acc = Some(match *acc {
            Some(a) => tape.add(a, v)?,
            None => v,
        });
        Ok(())
    };

    for ex in benign {
        let fwd = model.build_forward(tape, graph, &ex.prompt, None)?;
        let ce = tape.cross_entropy_row(fwd.logits, last, ex.target)?;
        add_in(tape, &mut ce_normal, ce)?;
        let norm = tape.row_minmax_norm(fwd.attn_scores[layer]);
        benign_patterns.push(norm);

        // Anchor: squared distance to the frozen base model's representation.
        let base_res = base.forward_capture(&ex.prompt)?.residuals[layer].clone();
        let width = (base_res.rows() * base_res.cols()) as f64;
        let base_const = tape.constant(base_res);
        let diff = tape.sub(fwd.residuals[layer], base_const)?;
        let sq = tape.mul(diff, diff)?;
        let sum = tape.sum_all(sq);
        let per = tape.scale(sum, 1.0 / width);
        add_in(tape, &mut anchor_acc, per)?;
    }
    for ex in backdoor {
        let fwd = model.build_forward(tape, graph, &ex.prompt, None)?;
        let ce = tape.cross_entropy_row(fwd.logits, last, ex.target)?;
        add_in(tape, &mut ce_backdoor, ce)?;
        let norm = tape.row_minmax_norm(fwd.attn_scores[layer]);
        backdoor_patterns.push(norm);
    }

    let pred_normal = tape.scale(ce_normal.expect("benign batch nonempty"), 1.0 / n);
    let pred_backdoor = tape.scale(ce_backdoor.expect("backdoor batch nonempty"), 1.0 / n);
    let anchor = tape.scale(anchor_acc.expect("benign batch nonempty"), 1.0 / n);

    let deception = match config.mode {
        DeceptionMode::Unify => {
            let mut cos_acc: Option<NodeId> = None;
            for (&a, &b) in benign_patterns.iter().zip(&backdoor_patterns) {
                let c = tape.cosine_sim(a, b)?;
                add_in(tape, &mut cos_acc, c)?;
            }
            let mean_cos = tape.scale(cos_acc.expect("pairs nonempty"), 1.0 / n);
            let one = tape.constant(Matrix::from_vec(1, 1, vec![1.0])?);
            tape.sub(one, mean_cos)?
        }
        DeceptionMode::AeEvasion => {
            let monitor = monitor.ok_or_else(|| {
                SentinelError::InvalidArgument(
                    "ae-evasion mode requires a fitted frozen monitor".into(),
                )
            })?;
            let mut dae_acc: Option<NodeId> = None;
            for (&a, &b) in benign_patterns.iter().zip(&backdoor_patterns) {
                let la = monitor_loss_node(tape, monitor, a)?;
                let lb = monitor_loss_node(tape, monitor, b)?;
                let diff = tape.sub(la, lb)?;
                let term = tape.abs(diff);
                add_in(tape, &mut dae_acc, term)?;
            }
            tape.scale(dae_acc.expect("pairs nonempty"), 1.0 / n)
        }
    };

    let w_mode = match config.mode {
        DeceptionMode::Unify => weights.w_unify,
        DeceptionMode::AeEvasion => weights.w_dae,
    };
    let mut total = tape.scale(deception, w_mode);
    let wpn = tape.scale(pred_normal, weights.w_pred);
    total = tape.add(total, wpn)?;
    let wpb = tape.scale(pred_backdoor, weights.w_pred);
    total = tape.add(total, wpb)?;
    let wa = tape.scale(anchor, weights.w_anchor);
    total = tape.add(total, wa)?;

    Ok(DeceptionLosses {
        deception,
        pred_normal,
        pred_backdoor,
        anchor,
        total,
    })
}

/// Frozen-monitor reconstruction loss of one normalized attention pattern,
/// on the tape so gradients flow into the model side only.
fn monitor_loss_node(tape: &mut Tape, monitor: &AeParams, pattern: NodeId) -> Result<NodeId> {
    let (rows, cols) = tape.value(pattern).shape();
    let x = tape.reshape(pattern, 1, rows * cols)?;
    let w1 = tape.constant(monitor.w1.clone());
    let b1 = tape.constant(monitor.b1.clone());
    let w2 = tape.constant(monitor.w2.clone());
    let b2 = tape.constant(monitor.b2.clone());
    let w3 = tape.constant(monitor.w3.clone());
    let b3 = tape.constant(monitor.b3.clone());
    let w4 = tape.constant(monitor.w4.clone());
    let b4 = tape.constant(monitor.b4.clone());

    let h1 = {
        let lin = tape.matmul(x, w1)?;
        let lin = tape.add_row(lin, b1)?;
        tape.relu(lin)
    };
    let z = {
        let lin = tape.matmul(h1, w2)?;
        tape.add_row(lin, b2)?
    };
    let h2 = {
        let lin = tape.matmul(z, w3)?;
        let lin = tape.add_row(lin, b3)?;
        tape.relu(lin)
    };
    let recon = {
        let lin = tape.matmul(h2, w4)?;
        tape.add_row(lin, b4)?
    };
    let diff = tape.sub(x, recon)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.sum_all(sq))
}

/// Fine-tune adapters against the deception objective. Only adapter factors
/// receive updates; base parameters stay bitwise unchanged. Returns the
/// adapted model and the per-step loss trajectory.
pub fn finetune_deceptive(
    model: &ToyModel,
    dataset: &[LabeledExample],
    config: &DeceptionConfig,
    weights: &LossWeights,
    hyper: &RedteamHyper,
    monitor: Option<&AeParams>,
) -> Result<(ToyModel, Vec<TrajectoryPoint>)> {
    config.validate(model.config.n_layers)?;
    weights.validate()?;
    if config.mode == DeceptionMode::AeEvasion && monitor.is_none() {
        return Err(SentinelError::InvalidArgument(
            "ae-evasion mode requires a fitted frozen monitor".into(),
        ));
    }

    let benign_pool: Vec<&LabeledExample> = dataset
        .iter()
        .filter(|e| !e.is_backdoor && e.split == Split::Train)
        .collect();
    let backdoor_pool: Vec<&LabeledExample> = dataset
        .iter()
        .filter(|e| e.is_backdoor && e.split == Split::Train)
        .collect();
    if benign_pool.is_empty() || backdoor_pool.is_empty() {
        return Err(SentinelError::InvalidArgument(
            "deception training needs benign and backdoor train examples".into(),
        ));
    }

    let base = model.clone();
    let mut adapted = model.clone();
    adapted.attach_adapters(
        &config.trainable_layers,
        hyper.adapter_rank,
        hyper.adapter_alpha,
        hyper.seed,
    )?;

    let (mut opt, names) = crate::testbed::build_optimizer(
        &adapted,
        StageMode::TrainAdapters,
        hyper.learning_rate,
        hyper.steps,
        0.0,
    )?;

    let mut rng = SplitRng::for_label(hyper.seed, "redteam");
    let mut benign_order: Vec<usize> = Vec::new();
    let mut backdoor_order: Vec<usize> = Vec::new();
    let draw = |rng: &mut SplitRng, order: &mut Vec<usize>, pool_len: usize| -> usize {
        if order.is_empty() {
            *order = (0..pool_len).collect();
            rng.shuffle(order);
        }
        order.pop().expect("refilled")
    };

    let mut trajectory = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let benign_batch: Vec<&LabeledExample> = (0..hyper.batch_size)
            .map(|_| benign_pool[draw(&mut rng, &mut benign_order, benign_pool.len())])
            .collect();
        let backdoor_batch: Vec<&LabeledExample> = (0..hyper.batch_size)
            .map(|_| backdoor_pool[draw(&mut rng, &mut backdoor_order, backdoor_pool.len())])
            .collect();

        let mut tape = Tape::new();
        let graph = adapted.stage(&mut tape, StageMode::TrainAdapters)?;
        let losses = build_deception_losses(
            &adapted,
            &base,
            &mut tape,
            &graph,
            config,
            weights,
            monitor,
            &benign_batch,
            &backdoor_batch,
        )?;
        let total_val = tape.scalar(losses.total);
        if !total_val.is_finite() {
            return Err(SentinelError::Diverged(format!(
                "deception loss became non-finite at step {step}"
            )));
        }
        trajectory.push(TrajectoryPoint {
            step,
            deception: tape.scalar(losses.deception),
            total: total_val,
            pred_normal: tape.scalar(losses.pred_normal),
            pred_backdoor: tape.scalar(losses.pred_backdoor),
        });

        let grads = tape.backward(losses.total)?;
        let grad_refs: Vec<&Matrix> = graph
            .trainable
            .iter()
            .map(|(_, id)| grads.get(*id).expect("adapter gradient"))
            .collect();
        let mut updated: Vec<Matrix> = graph
            .trainable
            .iter()
            .map(|(_, id)| tape.value(*id).clone())
            .collect();
        {
            let mut refs: Vec<&mut Matrix> = updated.iter_mut().collect();
            opt.step(&mut refs, &grad_refs);
        }
        for (name, new_value) in names.iter().zip(updated) {
            adapted.with_param_mut(name, |m| *m = new_value);
        }
    }
    Ok((adapted, trajectory))
}
