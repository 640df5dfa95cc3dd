//! Causal verification by activation patching.
//!
//! One intervention replaces the residual-stream vector entering a chosen
//! layer at a chosen token position (mean mode: the mean of the other
//! positions' vectors; zero mode: the zero vector) and measures the L1
//! change in the final-position logits.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SentinelError};
use crate::testbed::{LabeledExample, ToyModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterventionMode {
    Mean,
    Zero,
}

impl InterventionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            InterventionMode::Mean => "mean",
            InterventionMode::Zero => "zero",
        }
    }
}

impl std::str::FromStr for InterventionMode {
    type Err = SentinelError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(InterventionMode::Mean),
            "zero" => Ok(InterventionMode::Zero),
            other => Err(SentinelError::InvalidArgument(format!(
                "unknown intervention mode `{other}` (expected mean|zero)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterventionSpec {
    pub layer: usize,
    pub position: usize,
    pub mode: InterventionMode,
}

impl InterventionSpec {
    pub fn validate(&self, cfg: &crate::testbed::ToyConfig) -> Result<()> {
        if self.layer >= cfg.n_layers {
            return Err(SentinelError::InvalidArgument(format!(
                "intervention layer {} out of range (n_layers = {})",
                self.layer, cfg.n_layers
            )));
        }
        if self.position >= cfg.seq_len {
            return Err(SentinelError::InvalidArgument(format!(
                "intervention position {} out of range (seq_len = {})",
                self.position, cfg.seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct InterventionResult {
    /// Final-position logits of the unmodified pass.
    pub original_logits: Vec<f64>,
    /// Final-position logits after the substitution.
    pub modified_logits: Vec<f64>,
    /// Sum over the vocabulary of absolute logit differences.
    pub logit_diff: f64,
}

/// Run one intervention and measure the aggregate logit change.
pub fn intervene(
    model: &ToyModel,
    tokens: &[usize],
    spec: &InterventionSpec,
) -> Result<InterventionResult> {
    spec.validate(&model.config)?;
    let base = model.forward_capture(tokens)?;
    let patched = model.forward_capture_with(tokens, Some(spec))?;

    let last = base.logits.rows() - 1;
    let original: Vec<f64> = base.logits.row(last).to_vec();
    let modified: Vec<f64> = patched.logits.row(last).to_vec();
    let logit_diff: f64 = original
        .iter()
        .zip(&modified)
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(InterventionResult {
        original_logits: original,
        modified_logits: modified,
        logit_diff,
    })
}

/// One cell of a sweep grid: mean logit difference over the examples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub layer: usize,
    pub position: usize,
    pub mode: InterventionMode,
    pub mean_diff: f64,
}

/// Sweep every (layer, position, mode) cell, averaging the logit difference
/// over the examples.
pub fn sweep(
    model: &ToyModel,
    examples: &[LabeledExample],
    layers: &[usize],
    modes: &[InterventionMode],
) -> Result<Vec<SweepCell>> {
    if examples.is_empty() {
        return Err(SentinelError::InvalidArgument(
            "sweep: empty example set".into(),
        ));
    }
    let seq_len = model.config.seq_len;
    for ex in examples {
        if ex.prompt.len() != seq_len {
            return Err(SentinelError::InvalidArgument(
                "sweep: examples must share the model sequence length".into(),
            ));
        }
    }
    let mut cells: Vec<(usize, usize, InterventionMode)> = Vec::new();
    for &mode in modes {
        for &layer in layers {
            for position in 0..seq_len {
                cells.push((layer, position, mode));
            }
        }
    }
    use rayon::prelude::*;
    let grid: Result<Vec<SweepCell>> = cells
        .par_iter()
        .map(|&(layer, position, mode)| {
            let spec = InterventionSpec {
                layer,
                position,
                mode,
            };
            let mut total = 0.0;
            for ex in examples {
                total += intervene(model, &ex.prompt, &spec)?.logit_diff;
            }
            Ok(SweepCell {
                layer,
                position,
                mode,
                mean_diff: total / examples.len() as f64,
            })
        })
        .collect();
    grid
}

/// Trigger-position sensitivity of one layer in one mode.
///
/// For each example the statistic is the logit difference at its designated
/// position divided by the median difference over the other interior
/// positions; the returned value averages the numerators and medians
/// separately (mean designated diff / median other diff). Backdoor examples
/// use their trigger position; benign examples use the supplied fallback
/// sampling of designated positions so the two distributions are comparable.
pub fn position_spike_ratio(
    model: &ToyModel,
    examples: &[(LabeledExample, usize)],
    layer: usize,
    mode: InterventionMode,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(SentinelError::InvalidArgument(
            "position_spike_ratio: empty example set".into(),
        ));
    }
    let seq_len = model.config.seq_len;
    use rayon::prelude::*;
    let per_example: Result<Vec<(f64, Vec<f64>)>> = examples
        .par_iter()
        .map(|(ex, designated)| {
            let mut designated_diff = 0.0;
            let mut others = Vec::with_capacity(seq_len.saturating_sub(3));
            // Interior positions only, matching where triggers are planted.
            for position in 1..seq_len - 1 {
                let spec = InterventionSpec {
                    layer,
                    position,
                    mode,
                };
                let diff = intervene(model, &ex.prompt, &spec)?.logit_diff;
                if position == *designated {
                    designated_diff = diff;
                } else {
                    others.push(diff);
                }
            }
            Ok((designated_diff, others))
        })
        .collect();
    let per_example = per_example?;

    let mean_designated: f64 =
        per_example.iter().map(|(d, _)| d).sum::<f64>() / per_example.len() as f64;
    let mut all_others: Vec<f64> = per_example
        .iter()
        .flat_map(|(_, o)| o.iter().copied())
        .collect();
    all_others.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_other = median_sorted(&all_others);
    if median_other == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(mean_designated / median_other)
}

fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}
