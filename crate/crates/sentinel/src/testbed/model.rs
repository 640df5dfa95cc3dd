//! The toy decoder-only transformer.
//!
//! Pre-norm blocks with multi-head causal self-attention and a ReLU MLP
//! (hidden 4*d_model), learned positional embeddings, learned layer-norm
//! affines, and a linear unembedding. Every forward pass is built on the
//! differentiation tape; inference simply never calls backward, so captured
//! and capture-free passes share one code path and produce identical logits.
//!
//! Captured attention per layer is the raw head-averaged `Q * K^T` score
//! matrix, taken before the causal mask and softmax. Captured activations
//! are the residual stream at the output of each block.

use std::collections::BTreeMap;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Result, SentinelError};
use crate::interventions::{InterventionMode, InterventionSpec};
use crate::linalg::Matrix;
use crate::rng::SplitRng;
use crate::traces::{rowwise_minmax_normalize, TraceKind, TraceRecord, TraceSet};

use super::{LabeledExample, ToyConfig};

/// Weight sites that receive low-rank adapters during deception training.
pub const ADAPTER_SITES: [&str; 4] = ["wq", "wk", "wv", "w_in"];

const MASK_NEG: f64 = -1e30;

/// Additive low-rank weight delta `(alpha / rank) * B * A` with `B`
/// zero-initialized so the initial delta vanishes.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    /// `rank x d_out`, small random init.
    pub a: Matrix,
    /// `d_in x rank`, zero init.
    pub b: Matrix,
    pub rank: usize,
    pub alpha: f64,
}

impl LowRankAdapter {
    pub fn init(d_in: usize, d_out: usize, rank: usize, alpha: f64, rng: &mut SplitRng) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        let a =
            Matrix::from_fn(rank, d_out, |_, _| std * rng.standard_normal()).expect("finite init");
        LowRankAdapter {
            a,
            b: Matrix::zeros(d_in, rank),
            rank,
            alpha,
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn delta(&self) -> Result<Matrix> {
        Ok(self.b.matmul(&self.a)?.scale(self.scaling()))
    }
}

/// Adapters for one block, covering the attention projections and the MLP
/// input weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAdapters {
    pub wq: LowRankAdapter,
    pub wk: LowRankAdapter,
    pub wv: LowRankAdapter,
    pub w_in: LowRankAdapter,
}

impl LayerAdapters {
    pub fn init(cfg: &ToyConfig, rank: usize, alpha: f64, rng: &mut SplitRng) -> Self {
        let d = cfg.d_model;
        LayerAdapters {
            wq: LowRankAdapter::init(d, d, rank, alpha, rng),
            wk: LowRankAdapter::init(d, d, rank, alpha, rng),
            wv: LowRankAdapter::init(d, d, rank, alpha, rng),
            w_in: LowRankAdapter::init(d, 4 * d, rank, alpha, rng),
        }
    }

    fn site(&self, name: &str) -> &LowRankAdapter {
        match name {
            "wq" => &self.wq,
            "wk" => &self.wk,
            "wv" => &self.wv,
            "w_in" => &self.w_in,
            _ => unreachable!("unknown adapter site {name}"),
        }
    }

    fn site_mut(&mut self, name: &str) -> &mut LowRankAdapter {
        match name {
            "wq" => &mut self.wq,
            "wk" => &mut self.wk,
            "wv" => &mut self.wv,
            "w_in" => &mut self.w_in,
            _ => unreachable!("unknown adapter site {name}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Matrix,
    pub ln1_beta: Matrix,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_gamma: Matrix,
    pub ln2_beta: Matrix,
    pub w_in: Matrix,
    pub b_in: Matrix,
    pub w_out: Matrix,
    pub b_out: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tok_embed: Matrix,
    pub pos_embed: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_ln_gamma: Matrix,
    pub final_ln_beta: Matrix,
    pub unembed: Matrix,
}

/// The toy transformer: base parameters plus optional per-layer adapters.
/// Base weights stay untouched while adapters train; the effective weight
/// is `base + (alpha/rank) * B * A`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ToyConfig,
    pub params: ModelParams,
    pub adapters: BTreeMap<usize, LayerAdapters>,
}

/// How model parameters enter a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageMode {
    /// All base parameters are trainable leaves (adapters must be absent).
    TrainBase,
    /// Base parameters are constants; adapter factors are trainable leaves.
    TrainAdapters,
    /// Everything is constant; adapter deltas are folded into the weights.
    Inference,
}

struct LayerNodes {
    ln1_gamma: NodeId,
    ln1_beta: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    ln2_gamma: NodeId,
    ln2_beta: NodeId,
    w_in: NodeId,
    b_in: NodeId,
    w_out: NodeId,
    b_out: NodeId,
}

/// Parameter nodes staged on a tape, with effective (adapter-folded) weights.
pub struct ModelGraph {
    tok_embed: NodeId,
    pos_embed: NodeId,
    layers: Vec<LayerNodes>,
    final_ln_gamma: NodeId,
    final_ln_beta: NodeId,
    unembed: NodeId,
    /// Trainable leaves in declaration order, named as in the checkpoint.
    pub trainable: Vec<(String, NodeId)>,
}

/// Values captured by one forward pass.
pub struct ForwardNodes {
    /// `seq_len x vocab` logits for every position.
    pub logits: NodeId,
    /// Per layer: head-averaged raw `Q * K^T` scores, `seq_len x seq_len`.
    pub attn_scores: Vec<NodeId>,
    /// Per layer: residual stream at the block output, `seq_len x d_model`.
    pub residuals: Vec<NodeId>,
}

/// Plain-value capture result for inference callers.
pub struct CaptureResult {
    pub logits: Matrix,
    pub attn_scores: Vec<Matrix>,
    pub residuals: Vec<Matrix>,
}

impl ToyModel {
    /// Fresh model with GPT-style small random init, deterministic in the seed.
    pub fn init(config: &ToyConfig) -> Result<ToyModel> {
        config.validate()?;
        let mut rng = SplitRng::for_label(config.seed, "model-init");
        let d = config.d_model;
        let v = config.vocab_size;
        let std = 0.02;
        // Residual-writing projections get the usual depth-scaled init.
        let out_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut gauss = |rows: usize, cols: usize, s: f64| -> Matrix {
            Matrix::from_fn(rows, cols, |_, _| s * rng.standard_normal()).expect("finite init")
        };

        let tok_embed = gauss(v, d, std);
        let pos_embed = gauss(config.seq_len, d, std);
        let mut layers = Vec::new();
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                ln1_gamma: Matrix::from_vec(1, d, vec![1.0; d])?,
                ln1_beta: Matrix::zeros(1, d),
                wq: gauss(d, d, std),
                wk: gauss(d, d, std),
                wv: gauss(d, d, std),
                wo: gauss(d, d, out_std),
                ln2_gamma: Matrix::from_vec(1, d, vec![1.0; d])?,
                ln2_beta: Matrix::zeros(1, d),
                w_in: gauss(d, 4 * d, std),
                b_in: Matrix::zeros(1, 4 * d),
                w_out: gauss(4 * d, d, out_std),
                b_out: Matrix::zeros(1, d),
            });
        }
        let final_ln_gamma = Matrix::from_vec(1, d, vec![1.0; d])?;
        let unembed = gauss(d, v, std);
        Ok(ToyModel {
            config: config.clone(),
            params: ModelParams {
                tok_embed,
                pos_embed,
                layers,
                final_ln_gamma,
                final_ln_beta: Matrix::zeros(1, d),
                unembed,
            },
            adapters: BTreeMap::new(),
        })
    }

    /// Attach zero-delta adapters to the given layers.
    pub fn attach_adapters(
        &mut self,
        layers: &[usize],
        rank: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<()> {
        let mut rng = SplitRng::for_label(seed, "adapter-init");
        for &l in layers {
            if l >= self.config.n_layers {
                return Err(SentinelError::InvalidArgument(format!(
                    "adapter layer {l} out of range (n_layers = {})",
                    self.config.n_layers
                )));
            }
            self.adapters
                .insert(l, LayerAdapters::init(&self.config, rank, alpha, &mut rng));
        }
        Ok(())
    }

    /// Named base parameters in declaration order with their decay flags.
    pub fn named_params(&self) -> Vec<(String, &Matrix, bool)> {
        let mut out: Vec<(String, &Matrix, bool)> = vec![
            ("tok_embed".into(), &self.params.tok_embed, false),
            ("pos_embed".into(), &self.params.pos_embed, false),
        ];
        for (l, lp) in self.params.layers.iter().enumerate() {
            out.push((format!("layer{l}.ln1_gamma"), &lp.ln1_gamma, false));
            out.push((format!("layer{l}.ln1_beta"), &lp.ln1_beta, false));
            out.push((format!("layer{l}.wq"), &lp.wq, true));
            out.push((format!("layer{l}.wk"), &lp.wk, true));
            out.push((format!("layer{l}.wv"), &lp.wv, true));
            out.push((format!("layer{l}.wo"), &lp.wo, true));
            out.push((format!("layer{l}.ln2_gamma"), &lp.ln2_gamma, false));
            out.push((format!("layer{l}.ln2_beta"), &lp.ln2_beta, false));
            out.push((format!("layer{l}.w_in"), &lp.w_in, true));
            out.push((format!("layer{l}.b_in"), &lp.b_in, false));
            out.push((format!("layer{l}.w_out"), &lp.w_out, true));
            out.push((format!("layer{l}.b_out"), &lp.b_out, false));
        }
        out.push(("final_ln_gamma".into(), &self.params.final_ln_gamma, false));
        out.push(("final_ln_beta".into(), &self.params.final_ln_beta, false));
        out.push(("unembed".into(), &self.params.unembed, true));
        for (l, ad) in &self.adapters {
            for site in ADAPTER_SITES {
                out.push((format!("adapter{l}.{site}.a"), &ad.site(site).a, true));
                out.push((format!("adapter{l}.{site}.b"), &ad.site(site).b, true));
            }
        }
        out
    }

    /// Apply an update to a named parameter (base or adapter factor).
    pub fn with_param_mut(&mut self, name: &str, f: impl FnOnce(&mut Matrix)) {
        let m = self.param_mut(name);
        f(m);
    }

    fn param_mut(&mut self, name: &str) -> &mut Matrix {
        if let Some(rest) = name.strip_prefix("adapter") {
            let (layer, site_part) = rest.split_once('.').expect("adapter param name");
            let l: usize = layer.parse().expect("adapter layer index");
            let (site, factor) = site_part.split_once('.').expect("adapter site name");
            let ad = self.adapters.get_mut(&l).expect("adapter layer present");
            return match factor {
                "a" => &mut ad.site_mut(site).a,
                "b" => &mut ad.site_mut(site).b,
                _ => unreachable!("unknown adapter factor {factor}"),
            };
        }
        if let Some(rest) = name.strip_prefix("layer") {
            let (layer, field) = rest.split_once('.').expect("layer param name");
            let l: usize = layer.parse().expect("layer index");
            let lp = &mut self.params.layers[l];
            return match field {
                "ln1_gamma" => &mut lp.ln1_gamma,
                "ln1_beta" => &mut lp.ln1_beta,
                "wq" => &mut lp.wq,
                "wk" => &mut lp.wk,
                "wv" => &mut lp.wv,
                "wo" => &mut lp.wo,
                "ln2_gamma" => &mut lp.ln2_gamma,
                "ln2_beta" => &mut lp.ln2_beta,
                "w_in" => &mut lp.w_in,
                "b_in" => &mut lp.b_in,
                "w_out" => &mut lp.w_out,
                "b_out" => &mut lp.b_out,
                _ => unreachable!("unknown layer field {field}"),
            };
        }
        match name {
            "tok_embed" => &mut self.params.tok_embed,
            "pos_embed" => &mut self.params.pos_embed,
            "final_ln_gamma" => &mut self.params.final_ln_gamma,
            "final_ln_beta" => &mut self.params.final_ln_beta,
            "unembed" => &mut self.params.unembed,
            _ => unreachable!("unknown param {name}"),
        }
    }

    /// Stage parameters on a tape according to the mode.
    pub fn stage(&self, tape: &mut Tape, mode: StageMode) -> Result<ModelGraph> {
        self.stage_impl(tape, mode, None)
    }

    /// Stage like `stage`, but take trainable leaves from `provided` (in
    /// `trainable` order) instead of creating them. Lets gradient checking
    /// evaluate the model's losses at externally managed parameter values.
    pub fn stage_with_params(
        &self,
        tape: &mut Tape,
        mode: StageMode,
        provided: &[NodeId],
    ) -> Result<ModelGraph> {
        self.stage_impl(tape, mode, Some(provided))
    }

    fn stage_impl(
        &self,
        tape: &mut Tape,
        mode: StageMode,
        provided: Option<&[NodeId]>,
    ) -> Result<ModelGraph> {
        if mode == StageMode::TrainBase && !self.adapters.is_empty() {
            return Err(SentinelError::InvalidArgument(
                "base training with adapters attached is not supported".into(),
            ));
        }

        // Tracks trainable leaves in declaration order; when `provided` is
        // set, leaves are consumed from it instead of being created, so a
        // caller can evaluate losses at externally managed values.
        struct Stager<'p> {
            provided: Option<&'p [NodeId]>,
            next: usize,
            trainable: Vec<(String, NodeId)>,
        }
        impl Stager<'_> {
            fn train_leaf(&mut self, tape: &mut Tape, name: String, m: &Matrix) -> Result<NodeId> {
                let id = match self.provided {
                    Some(list) => {
                        let id = *list.get(self.next).ok_or_else(|| {
                            SentinelError::InvalidArgument(format!(
                                "stage_with_params: missing node for `{name}`"
                            ))
                        })?;
                        self.next += 1;
                        if tape.value(id).shape() != m.shape() {
                            return Err(SentinelError::ShapeMismatch(format!(
                                "stage_with_params: `{name}` expects {:?}, got {:?}",
                                m.shape(),
                                tape.value(id).shape()
                            )));
                        }
                        id
                    }
                    None => tape.param(m.clone()),
                };
                self.trainable.push((name, id));
                Ok(id)
            }

            fn leaf(
                &mut self,
                tape: &mut Tape,
                name: String,
                m: &Matrix,
                train: bool,
            ) -> Result<NodeId> {
                if train {
                    self.train_leaf(tape, name, m)
                } else {
                    Ok(tape.constant(m.clone()))
                }
            }
        }

        let mut st = Stager {
            provided,
            next: 0,
            trainable: Vec::new(),
        };
        let base_train = mode == StageMode::TrainBase;

        let tok_embed = st.leaf(tape, "tok_embed".into(), &self.params.tok_embed, base_train)?;
        let pos_embed = st.leaf(tape, "pos_embed".into(), &self.params.pos_embed, base_train)?;

        let mut layers = Vec::new();
        // Leaves are declared in the same order as `named_params` so that
        // `trainable` lines up with optimizer state across steps.
        for (l, lp) in self.params.layers.iter().enumerate() {
            let eff =
                |st: &mut Stager, tape: &mut Tape, site: &str, base: &Matrix| -> Result<NodeId> {
                    let adapter = self.adapters.get(&l).map(|ad| ad.site(site));
                    match (mode, adapter) {
                        (StageMode::TrainAdapters, Some(ad)) => {
                            let base_id = tape.constant(base.clone());
                            let a_id =
                                st.train_leaf(tape, format!("adapter{l}.{site}.a"), &ad.a)?;
                            let b_id =
                                st.train_leaf(tape, format!("adapter{l}.{site}.b"), &ad.b)?;
                            let ba = tape.matmul(b_id, a_id)?;
                            let delta = tape.scale(ba, ad.scaling());
                            tape.add(base_id, delta)
                        }
                        (_, Some(ad)) => {
                            let folded = base.add(&ad.delta()?)?;
                            Ok(tape.constant(folded))
                        }
                        (StageMode::TrainBase, None) => {
                            st.train_leaf(tape, format!("layer{l}.{site}"), base)
                        }
                        (_, None) => Ok(tape.constant(base.clone())),
                    }
                };

            let ln1_gamma = st.leaf(
                tape,
                format!("layer{l}.ln1_gamma"),
                &lp.ln1_gamma,
                base_train,
            )?;
            let ln1_beta = st.leaf(tape, format!("layer{l}.ln1_beta"), &lp.ln1_beta, base_train)?;
            let wq = eff(&mut st, tape, "wq", &lp.wq)?;
            let wk = eff(&mut st, tape, "wk", &lp.wk)?;
            let wv = eff(&mut st, tape, "wv", &lp.wv)?;
            let wo = st.leaf(tape, format!("layer{l}.wo"), &lp.wo, base_train)?;
            let ln2_gamma = st.leaf(
                tape,
                format!("layer{l}.ln2_gamma"),
                &lp.ln2_gamma,
                base_train,
            )?;
            let ln2_beta = st.leaf(tape, format!("layer{l}.ln2_beta"), &lp.ln2_beta, base_train)?;
            let w_in = eff(&mut st, tape, "w_in", &lp.w_in)?;
            let b_in = st.leaf(tape, format!("layer{l}.b_in"), &lp.b_in, base_train)?;
            let w_out = st.leaf(tape, format!("layer{l}.w_out"), &lp.w_out, base_train)?;
            let b_out = st.leaf(tape, format!("layer{l}.b_out"), &lp.b_out, base_train)?;

            layers.push(LayerNodes {
                ln1_gamma,
                ln1_beta,
                wq,
                wk,
                wv,
                wo,
                ln2_gamma,
                ln2_beta,
                w_in,
                b_in,
                w_out,
                b_out,
            });
        }
        let final_ln_gamma = st.leaf(
            tape,
            "final_ln_gamma".into(),
            &self.params.final_ln_gamma,
            base_train,
        )?;
        let final_ln_beta = st.leaf(
            tape,
            "final_ln_beta".into(),
            &self.params.final_ln_beta,
            base_train,
        )?;
        let unembed = st.leaf(tape, "unembed".into(), &self.params.unembed, base_train)?;

        if let Some(list) = provided {
            if st.next != list.len() {
                return Err(SentinelError::InvalidArgument(format!(
                    "stage_with_params: {} nodes provided, {} consumed",
                    list.len(),
                    st.next
                )));
            }
        }

        Ok(ModelGraph {
            tok_embed,
            pos_embed,
            layers,
            final_ln_gamma,
            final_ln_beta,
            unembed,
            trainable: st.trainable,
        })
    }

    /// Build one forward pass on the tape. An optional intervention replaces
    /// a single residual-stream row entering its target layer before that
    /// block runs.
    pub fn build_forward(
        &self,
        tape: &mut Tape,
        graph: &ModelGraph,
        tokens: &[usize],
        intervention: Option<&InterventionSpec>,
    ) -> Result<ForwardNodes> {
        let cfg = &self.config;
        if tokens.len() != cfg.seq_len {
            return Err(SentinelError::InvalidArgument(format!(
                "token sequence length {} != seq_len {}",
                tokens.len(),
                cfg.seq_len
            )));
        }
        if let Some(spec) = intervention {
            spec.validate(cfg)?;
        }
        let len = cfg.seq_len;
        let n_heads = cfg.n_heads;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let tok = tape.embed_gather(graph.tok_embed, tokens)?;
        let mut x = tape.add(tok, graph.pos_embed)?;

        let mask = tape.constant(causal_mask(len));
        let mut attn_scores = Vec::with_capacity(cfg.n_layers);
        let mut residuals = Vec::with_capacity(cfg.n_layers);

        for (l, ln) in graph.layers.iter().enumerate() {
            if let Some(spec) = intervention {
                if spec.layer == l {
                    x = apply_patch(tape, x, spec)?;
                }
            }

            let h = tape.layer_norm_rows(x, ln.ln1_gamma, ln.ln1_beta)?;
            let q = tape.matmul(h, ln.wq)?;
            let k = tape.matmul(h, ln.wk)?;
            let v = tape.matmul(h, ln.wv)?;

            let mut head_ctx = Vec::with_capacity(n_heads);
            let mut score_sum: Option<NodeId> = None;
            for hd in 0..n_heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let kt = tape.transpose(kh);
                let raw = tape.matmul(qh, kt)?;
                score_sum = Some(match score_sum {
                    Some(s) => tape.add(s, raw)?,
                    None => raw,
                });
                let scaled = tape.scale(raw, scale);
                let masked = tape.add(scaled, mask)?;
                let probs = tape.softmax_rows(masked);
                head_ctx.push(tape.matmul(probs, vh)?);
            }
            let avg_scores = tape.scale(score_sum.expect("n_heads > 0"), 1.0 / n_heads as f64);
            attn_scores.push(avg_scores);

            let ctx = tape.concat_cols(&head_ctx)?;
            let attn_out = tape.matmul(ctx, ln.wo)?;
            x = tape.add(x, attn_out)?;

            let h2 = tape.layer_norm_rows(x, ln.ln2_gamma, ln.ln2_beta)?;
            let pre = tape.matmul(h2, ln.w_in)?;
            let pre_b = tape.add_row(pre, ln.b_in)?;
            let act = tape.relu(pre_b);
            let down = tape.matmul(act, ln.w_out)?;
            let mlp = tape.add_row(down, ln.b_out)?;
            x = tape.add(x, mlp)?;
            residuals.push(x);
        }

        let hf = tape.layer_norm_rows(x, graph.final_ln_gamma, graph.final_ln_beta)?;
        let logits = tape.matmul(hf, graph.unembed)?;
        Ok(ForwardNodes {
            logits,
            attn_scores,
            residuals,
        })
    }

    /// Forward pass returning logits plus per-layer attention scores and
    /// residual activations as plain matrices.
    pub fn forward_capture(&self, tokens: &[usize]) -> Result<CaptureResult> {
        self.forward_capture_with(tokens, None)
    }

    pub(crate) fn forward_capture_with(
        &self,
        tokens: &[usize],
        intervention: Option<&InterventionSpec>,
    ) -> Result<CaptureResult> {
        let mut tape = Tape::new();
        let graph = self.stage(&mut tape, StageMode::Inference)?;
        let fwd = self.build_forward(&mut tape, &graph, tokens, intervention)?;
        Ok(CaptureResult {
            logits: tape.value(fwd.logits).clone(),
            attn_scores: fwd
                .attn_scores
                .iter()
                .map(|&id| tape.value(id).clone())
                .collect(),
            residuals: fwd
                .residuals
                .iter()
                .map(|&id| tape.value(id).clone())
                .collect(),
        })
    }

    /// Next-token prediction: argmax of the final-position logits.
    pub fn predict(&self, tokens: &[usize]) -> Result<usize> {
        let cap = self.forward_capture(tokens)?;
        let last = cap.logits.row(cap.logits.rows() - 1);
        Ok(argmax(last))
    }

    /// Extract one kind of trace at one layer for every example.
    /// Attention payloads are row-wise min-max normalized score matrices;
    /// activation payloads are the final-token residual vector.
    pub fn extract_traces(
        &self,
        examples: &[LabeledExample],
        layer: usize,
        kind: TraceKind,
    ) -> Result<TraceSet> {
        if layer >= self.config.n_layers {
            return Err(SentinelError::InvalidArgument(format!(
                "trace layer {layer} out of range (n_layers = {})",
                self.config.n_layers
            )));
        }
        use rayon::prelude::*;
        let records: Result<Vec<TraceRecord>> = examples
            .par_iter()
            .map(|ex| {
                let cap = self.forward_capture(&ex.prompt)?;
                let payload = match kind {
                    TraceKind::Attention => rowwise_minmax_normalize(&cap.attn_scores[layer]),
                    TraceKind::Activation => {
                        let res = &cap.residuals[layer];
                        Matrix::row_vector(res.row(res.rows() - 1))?
                    }
                };
                Ok(TraceRecord {
                    label: if ex.is_backdoor {
                        crate::traces::Label::Backdoor
                    } else {
                        crate::traces::Label::Benign
                    },
                    split: ex.split,
                    kind,
                    layer: layer as u16,
                    payload,
                })
            })
            .collect();
        let mut set = TraceSet::new(records?);
        set.meta.insert("layer".into(), layer.to_string());
        set.meta.insert("kind".into(), kind.as_str().into());
        Ok(set)
    }
}

fn causal_mask(len: usize) -> Matrix {
    Matrix::from_fn(len, len, |i, j| if j > i { MASK_NEG } else { 0.0 }).expect("mask finite")
}

fn apply_patch(tape: &mut Tape, x: NodeId, spec: &InterventionSpec) -> Result<NodeId> {
    let current = tape.value(x).clone();
    let (rows, cols) = current.shape();
    let replacement: Vec<f64> = match spec.mode {
        InterventionMode::Zero => vec![0.0; cols],
        InterventionMode::Mean => {
            let mut mean = vec![0.0; cols];
            if rows > 1 {
                for i in 0..rows {
                    if i == spec.position {
                        continue;
                    }
                    for (m, v) in mean.iter_mut().zip(current.row(i)) {
                        *m += v;
                    }
                }
                let denom = (rows - 1) as f64;
                mean.iter_mut().for_each(|m| *m /= denom);
            }
            mean
        }
    };
    let keep = Matrix::from_fn(
        rows,
        cols,
        |i, _| if i == spec.position { 0.0 } else { 1.0 },
    )?;
    let mut repl = Matrix::zeros(rows, cols);
    repl.row_mut(spec.position).copy_from_slice(&replacement);
    let keep_id = tape.constant(keep);
    let repl_id = tape.constant(repl);
    let masked = tape.mul(x, keep_id)?;
    tape.add(masked, repl_id)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
