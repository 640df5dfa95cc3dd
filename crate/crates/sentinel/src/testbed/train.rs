//! Backdoor implantation: AdamW with cosine-annealed learning rate on the
//! next-token cross-entropy of the synthetic task.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Result, SentinelError};
use crate::linalg::Matrix;
use crate::rng::SplitRng;
use crate::traces::Split;

use super::model::{argmax, StageMode};
use super::{LabeledExample, ToyModel};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: 5e-5,
            steps: 2000,
            batch_size: 4,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub clean_accuracy: f64,
    pub trigger_success: f64,
}

/// Decoupled-weight-decay Adam over a fixed list of named parameters.
pub struct AdamW {
    lr_max: f64,
    total_steps: usize,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(
        shapes: &[(usize, usize)],
        decay: Vec<bool>,
        lr: f64,
        total_steps: usize,
        weight_decay: f64,
    ) -> Self {
        AdamW {
            lr_max: lr,
            total_steps,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            decay,
        }
    }

    /// Cosine-annealed learning rate for the current step.
    pub fn current_lr(&self) -> f64 {
        let t = self.t.min(self.total_steps) as f64;
        let total = self.total_steps.max(1) as f64;
        0.5 * self.lr_max * (1.0 + (std::f64::consts::PI * t / total).cos())
    }

    /// One update. `params` and `grads` are index-aligned with the shapes
    /// this optimizer was built from.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) {
        let lr = self.current_lr();
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let g = grads[i].data();
            let w = params[i].data_mut();
            let wd = if self.decay[i] {
                self.weight_decay
            } else {
                0.0
            };
            for j in 0..w.len() {
                let gj = g[j];
                m.data_mut()[j] = self.beta1 * m.data()[j] + (1.0 - self.beta1) * gj;
                v.data_mut()[j] = self.beta2 * v.data()[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m.data()[j] / bc1;
                let vhat = v.data()[j] / bc2;
                w[j] -= lr * (mhat / (vhat.sqrt() + self.eps) + wd * w[j]);
            }
        }
    }
}

/// Optimizer whose slot order matches the `trainable` list a `stage` call
/// produces for the given mode, with decay flags looked up by name.
pub(crate) fn build_optimizer(
    model: &ToyModel,
    mode: StageMode,
    lr: f64,
    total_steps: usize,
    weight_decay: f64,
) -> Result<(AdamW, Vec<String>)> {
    let mut probe = Tape::new();
    let graph = model.stage(&mut probe, mode)?;
    let decay_by_name: std::collections::BTreeMap<String, bool> = model
        .named_params()
        .into_iter()
        .map(|(n, _, d)| (n, d))
        .collect();
    let mut shapes = Vec::new();
    let mut decay = Vec::new();
    let mut names = Vec::new();
    for (name, id) in &graph.trainable {
        shapes.push(probe.value(*id).shape());
        decay.push(decay_by_name.get(name).copied().unwrap_or(true));
        names.push(name.clone());
    }
    Ok((
        AdamW::new(&shapes, decay, lr, total_steps, weight_decay),
        names,
    ))
}

/// Mean next-token cross-entropy of a batch at the final prompt position,
/// built on an existing tape against staged parameter nodes.
pub(crate) fn batch_loss_node(
    model: &ToyModel,
    tape: &mut Tape,
    graph: &super::model::ModelGraph,
    batch: &[&LabeledExample],
) -> Result<NodeId> {
    let mut acc: Option<NodeId> = None;
    let last = model.config.seq_len - 1;
    for ex in batch {
        let fwd = model.build_forward(tape, graph, &ex.prompt, None)?;
        let ce = tape.cross_entropy_row(fwd.logits, last, ex.target)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, ce)?,
            None => ce,
        });
    }
    let total = acc.ok_or_else(|| SentinelError::InvalidArgument("empty batch".into()))?;
    Ok(tape.scale(total, 1.0 / batch.len() as f64))
}

/// Fraction of examples whose argmax prediction equals the target.
pub fn accuracy(model: &ToyModel, examples: &[LabeledExample]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    use rayon::prelude::*;
    let hits: Result<Vec<bool>> = examples
        .par_iter()
        .map(|ex| {
            let cap = model.forward_capture(&ex.prompt)?;
            let last = cap.logits.row(cap.logits.rows() - 1);
            Ok(argmax(last) == ex.target)
        })
        .collect();
    let hits = hits?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Train the backdoor into a fresh model: mixed benign/backdoor batches,
/// AdamW, cosine schedule. Returns the held-out clean accuracy and trigger
/// success alongside the trained model. Deterministic in the seed.
pub fn train_backdoor(
    mut model: ToyModel,
    dataset: &[LabeledExample],
    hyper: &TrainHyper,
) -> Result<(ToyModel, TrainReport)> {
    let train: Vec<&LabeledExample> = dataset.iter().filter(|e| e.split == Split::Train).collect();
    if train.iter().all(|e| e.is_backdoor) || train.iter().all(|e| !e.is_backdoor) {
        return Err(SentinelError::InvalidArgument(
            "training set must mix benign and backdoor examples".into(),
        ));
    }

    let (mut opt, names) = build_optimizer(
        &model,
        StageMode::TrainBase,
        hyper.learning_rate,
        hyper.steps,
        hyper.weight_decay,
    )?;

    let mut rng = SplitRng::for_label(hyper.seed, "train-backdoor");
    let mut order: Vec<usize> = Vec::new();
    let mut final_loss = f64::NAN;

    for step in 0..hyper.steps {
        let mut batch = Vec::with_capacity(hyper.batch_size);
        for _ in 0..hyper.batch_size {
            if order.is_empty() {
                order = (0..train.len()).collect();
                rng.shuffle(&mut order);
            }
            batch.push(train[order.pop().expect("refilled")]);
        }

        let mut tape = Tape::new();
        let graph = model.stage(&mut tape, StageMode::TrainBase)?;
        let loss = batch_loss_node(&model, &mut tape, &graph, &batch)?;
        let loss_val = tape.scalar(loss);
        if !loss_val.is_finite() {
            return Err(SentinelError::Diverged(format!(
                "training loss became non-finite at step {step}"
            )));
        }
        final_loss = loss_val;

        let grads = tape.backward(loss)?;
        let grad_refs: Vec<&Matrix> = graph
            .trainable
            .iter()
            .map(|(_, id)| grads.get(*id).expect("param gradient defined"))
            .collect();
        debug_assert_eq!(graph.trainable.len(), names.len());

        // Apply updates through the named accessor so base order stays pinned.
        let mut updated: Vec<Matrix> = Vec::with_capacity(names.len());
        {
            let mut param_copies: Vec<Matrix> = graph
                .trainable
                .iter()
                .map(|(_, id)| tape.value(*id).clone())
                .collect();
            let mut refs: Vec<&mut Matrix> = param_copies.iter_mut().collect();
            opt.step(&mut refs, &grad_refs);
            updated.append(&mut param_copies);
        }
        for (name, new_value) in names.iter().zip(updated) {
            model.with_param_mut(name, |m| *m = new_value);
        }
    }

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
    let report = TrainReport {
        steps: hyper.steps,
        final_loss,
        clean_accuracy: accuracy(&model, &benign_test)?,
        trigger_success: accuracy(&model, &backdoor_test)?,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testbed::{gen_dataset, ToyConfig};

    fn tiny_config() -> ToyConfig {
        ToyConfig {
            vocab_size: 12,
            seq_len: 6,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            trigger_token: 10,
            harmful_token: 11,
            seed: 0,
        }
    }

    #[test]
    fn single_step_decreases_single_example_loss() {
        let cfg = tiny_config();
        let model = ToyModel::init(&cfg).unwrap();
        let data = gen_dataset(&cfg, 10, 10, 0).unwrap();
        let ex = data[0].clone();

        let eval_loss = |m: &ToyModel| -> f64 {
            let mut tape = Tape::new();
            let graph = m.stage(&mut tape, StageMode::TrainBase).unwrap();
            let loss = batch_loss_node(m, &mut tape, &graph, &[&ex]).unwrap();
            tape.scalar(loss)
        };
        let before = eval_loss(&model);

        let mut one = [ex.clone()];
        one[0].split = Split::Train;
        // Need one backdoor and one benign example in the pool; duplicate
        // the target example so the sampled batch is always that example.
        let mut pool = vec![one[0].clone(), one[0].clone()];
        pool[1].is_backdoor = !pool[1].is_backdoor;
        let hyper = TrainHyper {
            steps: 1,
            batch_size: 2,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            seed: 0,
        };
        let (trained, _) = train_backdoor(model, &pool, &hyper).unwrap();
        let after = eval_loss(&trained);
        assert!(
            after < before,
            "loss should decrease: before {before}, after {after}"
        );
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let cfg = tiny_config();
        let data = gen_dataset(&cfg, 16, 8, 0).unwrap();
        let hyper = TrainHyper {
            steps: 12,
            ..Default::default()
        };
        let run = || {
            let model = ToyModel::init(&cfg).unwrap();
            train_backdoor(model, &data, &hyper).unwrap().0
        };
        let a = run();
        let b = run();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn all_benign_pool_rejected() {
        let cfg = tiny_config();
        let mut data = gen_dataset(&cfg, 10, 5, 0).unwrap();
        data.retain(|e| !e.is_backdoor);
        let model = ToyModel::init(&cfg).unwrap();
        assert!(train_backdoor(model, &data, &TrainHyper::default()).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let mut opt = AdamW::new(&[(1, 1)], vec![false], 1.0, 100, 0.0);
        assert!((opt.current_lr() - 1.0).abs() < 1e-12);
        opt.t = 50;
        assert!((opt.current_lr() - 0.5).abs() < 1e-12);
        opt.t = 100;
        assert!(opt.current_lr().abs() < 1e-12);
    }
}
