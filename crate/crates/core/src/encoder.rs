//! Small pre-norm transformer encoder with optional Boolean attention.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attend, boolean_bias, key_padding_mask, learned_gate, scope_context, BoolAttnDims, BoolAttnLayerParams,
    GateDecision, GateParams, LayerBias,
};
use crate::cue::{CuePrediction, CuePredictorParams};
use crate::error::{Error, Result};
use crate::init::{Init, ParamBuilder};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Var};
use crate::operators::{OperatorEmbeddingTable, OperatorKind, NUM_OPERATORS};

/// Token id reserved for padding.
pub const PAD: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub operator_dim: usize,
    pub conv_kernel: usize,
    /// Output channels of the scope convolution before the per-token head.
    pub scope_channels: usize,
    pub bias_ffn_dim: usize,
    /// Hidden width of the learned-gate classifier.
    pub gate_hidden: usize,
    pub window: usize,
    pub sigma: f32,
    pub theta: f32,
    pub gumbel_temperature: f32,
    pub gate_temperature: f32,
    /// Std-like scale of the embedding initialization.
    pub embedding_init: f32,
    /// Whether the encoder owns Boolean attention modules.
    pub boolattn: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            hidden: 64,
            layers: 2,
            heads: 4,
            head_dim: 16,
            ffn_dim: 128,
            max_len: 64,
            operator_dim: 10,
            conv_kernel: 3,
            scope_channels: 8,
            bias_ffn_dim: 16,
            gate_hidden: 16,
            window: 5,
            sigma: 2.0,
            theta: 0.5,
            gumbel_temperature: 1.0,
            gate_temperature: 0.1,
            embedding_init: 0.002,
            boolattn: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.hidden != self.heads * self.head_dim {
            return bad(format!("hidden {} != heads {} x head_dim {}", self.hidden, self.heads, self.head_dim));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if self.layers == 0 || self.heads == 0 || self.vocab_size == 0 || self.max_len == 0 || self.scope_channels == 0 || self.gate_hidden == 0 {
            return bad("layers, heads, vocab_size, max_len scope_channels and gate_hidden must be positive".into());
        }
        if !(self.sigma > 0.0 && self.gumbel_temperature > 0.0 && self.gate_temperature > 0.0) {
            return bad("sigma and temperatures must be positive".into());
        }
        Ok(())
    }

    fn boolattn_dims(&self) -> BoolAttnDims {
        BoolAttnDims {
            hidden: self.hidden,
            operator_dim: self.operator_dim,
            scope_channels: self.scope_channels,
            conv_kernel: self.conv_kernel,
            bias_ffn_dim: self.bias_ffn_dim,
            sigma: self.sigma,
            theta: self.theta,
        }
    }
}

/// Padded token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Row-major `[B, L]`, padded with [`PAD`].
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub len: usize,
}

impl Batch {
    /// Pads every sequence to the longest one. Empty sequences are rejected.
    pub fn new(seqs: &[Vec<usize>]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument("batch needs at least one non-empty sequence".into()));
        }
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(PAD, len - s.len()));
        }
        Ok(Self { ids, lengths: seqs.iter().map(Vec::len).collect(), len })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    /// `[B, L]` with 1 on real tokens.
    pub fn token_mask(&self) -> Tensor {
        let data = self
            .lengths
            .iter()
            .flat_map(|&n| (0..self.len).map(move |j| if j < n { 1.0 } else { 0.0 }))
            .collect();
        Tensor::new(vec![self.size(), self.len], data).expect("mask shape")
    }
}

/// How operator gates are decided for a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum GateInput {
    /// Externally supplied labels, one `[and, or, not]` triple per row.
    Oracle(Vec<[bool; NUM_OPERATORS]>),
    Learned,
    /// Boolean attention disabled: plain self-attention.
    Off,
}

/// Cue positions used by the bias predictor.
#[derive(Clone, Debug, PartialEq)]
pub enum CueSource {
    /// Thresholded first-layer predictions.
    Predicted,
    /// `positions[op][b]`, bypassing the predictor's hard decisions.
    Given(Vec<Vec<Vec<usize>>>),
}

pub struct ForwardOptions<'a> {
    pub gates: GateInput,
    pub cues: CueSource,
    /// Gumbel-Sigmoid scope sampling when set; deterministic otherwise.
    pub rng: Option<&'a mut Rng>,
}

impl ForwardOptions<'_> {
    pub fn eval(gates: GateInput) -> Self {
        Self { gates, cues: CueSource::Predicted, rng: None }
    }
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Post-softmax attention `[B, heads, L, L]`.
    pub attention: Var,
    pub boolean: Option<LayerBias>,
}

#[derive(Clone, Debug)]
pub struct EncodedSequence {
    /// `[B, L, d_h]`
    pub hidden: Var,
    /// Mean over real tokens, `[B, d_h]`.
    pub pooled: Var,
    /// First-layer cue predictions, shared by every layer.
    pub cues: Option<CuePrediction>,
    pub gates: Option<GateDecision>,
    pub layers: Vec<LayerTrace>,
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn build(b: &mut ParamBuilder<'_>, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.param(&format!("{prefix}.gamma"), &[d], Init::Const(1.0))?,
            beta: b.param(&format!("{prefix}.beta"), &[d], Init::Const(0.0))?,
        })
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(store, self.gamma), g.param(store, self.beta));
        g.layer_norm(x, gm, bt)
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn build(b: &mut ParamBuilder<'_>, prefix: &str, din: usize, dout: usize) -> Result<Self> {
        Ok(Self {
            w: b.param(&format!("{prefix}.w"), &[din, dout], Init::FanIn(din))?,
            b: b.param(&format!("{prefix}.b"), &[dout], Init::Const(0.0))?,
        })
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

#[derive(Clone, Debug)]
struct Layer {
    norm1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    norm2: Norm,
    ffn1: Linear,
    ffn2: Linear,
    boolattn: Option<BoolAttnLayerParams>,
}

/// Modules shared across layers.
#[derive(Clone, Debug)]
pub struct BoolAttnShared {
    pub operators: OperatorEmbeddingTable,
    pub cue: CuePredictorParams,
    pub gate: GateParams,
}

/// Encoder weights plus the parameter ids that address them.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub store: ParamStore,
    token: ParamId,
    position: ParamId,
    layers: Vec<Layer>,
    final_norm: Norm,
    shared: Option<BoolAttnShared>,
}

/// Whether a parameter name belongs to the Boolean attention modules.
pub fn is_boolattn_param(name: &str) -> bool {
    name.split('.').any(|part| part == "boolattn")
}

/// Parameters updated during pretraining: Boolean modules and embeddings.
/// Active operators without a cue fall back to zero relative positions.
fn warn_missing_cues(gates: &GateDecision, positions: &[Vec<Vec<usize>>]) {
    for (row, hard) in gates.hard.iter().enumerate() {
        for op in OperatorKind::ALL {
            if hard[op.code()] && positions[op.code()].get(row).map_or(true, Vec::is_empty) {
                warn!("{op} gated on in batch row {row} without a cue; using zero relative positions");
            }
        }
    }
}

pub fn is_pretrain_trainable(name: &str) -> bool {
    is_boolattn_param(name) || name.starts_with("embeddings.")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub base: usize,
    pub boolattn: usize,
}

impl ParamCounts {
    pub fn overhead(&self) -> f64 {
        self.boolattn as f64 / self.base as f64
    }
}

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut enc = Self::build(config, &mut ParamBuilder::Fresh { store: &mut store, rng })?;
        enc.store = store;
        Ok(enc)
    }

    /// Re-attaches ids to a store with the expected names and shapes.
    pub fn from_store(config: EncoderConfig, store: ParamStore) -> Result<Self> {
        let mut builder = ParamBuilder::Bind { store: &store, bound: 0 };
        let mut enc = Self::build(config, &mut builder)?;
        if let ParamBuilder::Bind { bound, .. } = builder {
            if bound != store.len() {
                return Err(Error::Checkpoint(format!("expected {bound} parameters, found {}", store.len())));
            }
        }
        enc.store = store;
        Ok(enc)
    }

    fn build(config: EncoderConfig, b: &mut ParamBuilder<'_>) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let emb = Init::Uniform(config.embedding_init * 3f32.sqrt());
        let token = b.param("embeddings.token", &[config.vocab_size, d], emb)?;
        let position = b.param("embeddings.position", &[config.max_len, d], emb)?;
        let shared = if config.boolattn {
            Some(BoolAttnShared {
                operators: OperatorEmbeddingTable::build(b, "boolattn.operators", config.operator_dim, d)?,
                cue: CuePredictorParams::build(b, "boolattn.cue", d)?,
                gate: GateParams::build(b, "boolattn.gate", d, config.gate_hidden)?,
            })
        } else {
            None
        };
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("layers.{i}");
            layers.push(Layer {
                norm1: Norm::build(b, &format!("{p}.norm1"), d)?,
                q: Linear::build(b, &format!("{p}.attn.q"), d, d)?,
                k: Linear::build(b, &format!("{p}.attn.k"), d, d)?,
                v: Linear::build(b, &format!("{p}.attn.v"), d, d)?,
                out: Linear::build(b, &format!("{p}.attn.out"), d, d)?,
                norm2: Norm::build(b, &format!("{p}.norm2"), d)?,
                ffn1: Linear::build(b, &format!("{p}.ffn1"), d, config.ffn_dim)?,
                ffn2: Linear::build(b, &format!("{p}.ffn2"), config.ffn_dim, d)?,
                boolattn: if config.boolattn {
                    Some(BoolAttnLayerParams::build(b, &format!("{p}.boolattn"), config.boolattn_dims())?)
                } else {
                    None
                },
            });
        }
        let final_norm = Norm::build(b, "final_norm", d)?;
        Ok(Self { config, store: ParamStore::new(), token, position, layers, final_norm, shared })
    }

    pub fn shared(&self) -> Option<&BoolAttnShared> {
        self.shared.as_ref()
    }

    pub fn param_counts(&self) -> ParamCounts {
        let mut c = ParamCounts { base: 0, boolattn: 0 };
        for (name, t) in self.store.iter() {
            if is_boolattn_param(name) {
                c.boolattn += t.len();
            } else {
                c.base += t.len();
            }
        }
        c
    }

    /// Freezes everything except Boolean modules and embeddings.
    pub fn freeze_for_pretraining(&mut self) {
        self.store.freeze_except(is_pretrain_trainable);
    }

    pub fn unfreeze(&mut self) {
        self.store.freeze_except(|_| true);
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch, opts: ForwardOptions<'_>) -> Result<EncodedSequence> {
        self.forward_with(&self.store, g, batch, opts)
    }

    /// [`Encoder::forward`] reading weights from `store`, which must share this encoder's layout.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        batch: &Batch,
        mut opts: ForwardOptions<'_>,
    ) -> Result<EncodedSequence> {
        let cfg = &self.config;
        let (bsz, len, d) = (batch.size(), batch.len, cfg.hidden);
        if len > cfg.max_len {
            return Err(Error::SequenceTooLong { len, max: cfg.max_len });
        }
        let boolean = self.shared.is_some() && opts.gates != GateInput::Off;
        if let GateInput::Oracle(rows) = &opts.gates {
            if rows.len() != bsz {
                return Err(Error::InvalidArgument(format!("{} gate rows for batch of {bsz}", rows.len())));
            }
        }

        let table = g.param(store, self.token);
        let tok = g.gather_rows(table, &batch.ids)?;
        let tok = g.reshape(tok, vec![bsz, len, d])?;
        let pos_table = g.param(store, self.position);
        let pos = g.narrow(pos_table, 0, 0, len)?;
        let mut x = g.add(tok, pos)?;

        let mask_t = batch.token_mask();
        let token_mask = g.constant(mask_t.clone());
        let pool_weights = g.constant(Tensor::from_fn([bsz, len, 1], |i| {
            mask_t.data()[i] / batch.lengths[i / len] as f32
        }));
        let padding = key_padding_mask(g, &batch.lengths, len);

        let mut cues: Option<CuePrediction> = None;
        let mut positions: Vec<Vec<Vec<usize>>> = Vec::new();
        let mut gates: Option<GateDecision> = None;
        let mut traces = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let h = layer.norm1.apply(g, store, x)?;
            let mut s_boolean = None;
            let mut layer_bias = None;
            if boolean {
                let shared = self.shared.as_ref().expect("boolean modules present");
                if li == 0 {
                    let c = shared.cue.predict(g, store, &shared.operators, h, &batch.lengths)?;
                    positions = match &opts.cues {
                        CueSource::Predicted => c.hard_positions.clone(),
                        CueSource::Given(p) => p.clone(),
                    };
                    cues = Some(c);
                    gates = Some(match &opts.gates {
                        GateInput::Oracle(rows) => GateDecision::oracle(g, rows),
                        _ => {
                            let m = g.mul(h, pool_weights)?;
                            let pooled = g.sum_axis(m, 1)?;
                            let logits = shared.gate.logits(g, store, pooled)?;
                            learned_gate(g, logits, cfg.gate_temperature)?
                        }
                    });
                    if let Some(gd) = &gates {
                        warn_missing_cues(gd, &positions);
                    }
                }
                let params = layer.boolattn.as_ref().expect("boolean layer params");
                let mut ctx = scope_context(cfg.heads, cfg.gumbel_temperature, opts.rng.as_deref_mut(), token_mask);
                let lb = boolean_bias(
                    g,
                    store,
                    params,
                    &shared.operators,
                    &mut ctx,
                    h,
                    cues.as_ref().expect("cues computed on layer 0"),
                    &positions,
                    gates.as_ref().expect("gates computed on layer 0"),
                    cfg.window,
                )?;
                s_boolean = lb.s_boolean;
                layer_bias = Some(lb);
            }
            let split = |g: &mut Graph, t: Var| -> Result<Var> {
                let t = g.reshape(t, vec![bsz, len, cfg.heads, cfg.head_dim])?;
                g.permute(t, &[0, 2, 1, 3])
            };
            let q = layer.q.apply(g, store, h)?;
            let q = split(g, q)?;
            let k = layer.k.apply(g, store, h)?;
            let k = split(g, k)?;
            let v = layer.v.apply(g, store, h)?;
            let v = split(g, v)?;
            let att = attend(g, q, k, v, s_boolean, Some(padding))?;
            let merged = g.permute(att.output, &[0, 2, 1, 3])?;
            let merged = g.reshape(merged, vec![bsz, len, d])?;
            let o = layer.out.apply(g, store, merged)?;
            x = g.add(x, o)?;
            let h2 = layer.norm2.apply(g, store, x)?;
            let f = layer.ffn1.apply(g, store, h2)?;
            let f = g.gelu(f);
            let f = layer.ffn2.apply(g, store, f)?;
            x = g.add(x, f)?;
            traces.push(LayerTrace { attention: att.weights, boolean: layer_bias });
        }
        let hidden = self.final_norm.apply(g, store, x)?;
        let weighted = g.mul(hidden, pool_weights)?;
        let pooled = g.sum_axis(weighted, 1)?;
        Ok(EncodedSequence { hidden, pooled, cues, gates, layers: traces })
    }

    /// Eval-mode pooled vectors as host rows.
    pub fn embed(&self, batch: &Batch, gates: GateInput) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch, ForwardOptions::eval(gates))?;
        Ok(g.value(out.pooled).chunks(self.config.hidden).map(<[f32]>::to_vec).collect())
    }
}

/// Dot product of two pooled vectors.
pub fn similarity(q: &[f32], d: &[f32]) -> f32 {
    q.iter().zip(d).map(|(a, b)| a * b).sum()
}
