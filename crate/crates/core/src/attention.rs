//! Boolean attention: per-operator biases folded into scaled dot-product attention.

use serde::{Deserialize, Serialize};

use crate::bias::{BiasPredictorParams, BooleanBias};
use crate::cue::CuePrediction;
use crate::error::{shape_mismatch, Error, Result};
use crate::init::{Init, ParamBuilder};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Var};
use crate::operators::{OperatorEmbeddingTable, OperatorKind, NUM_OPERATORS};
use crate::scope::{ScopeContext, ScopePredictorParams, ScopeResult};

/// Hard threshold applied to learned gate probabilities.
pub const GATE_THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    Oracle,
    Learned,
}

impl std::str::FromStr for GateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(GateMode::Oracle),
            "learned" => Ok(GateMode::Learned),
            other => Err(Error::InvalidArgument(format!("unknown gate mode `{other}`"))),
        }
    }
}

/// Which operators are switched on for each batch row.
#[derive(Clone, Debug)]
pub struct GateDecision {
    pub mode: GateMode,
    /// `[B, 3]` in `{0, 1}`; straight-through in learned mode.
    pub values: Var,
    /// `[B, 3]` sigmoid probabilities, learned mode only.
    pub probs: Option<Var>,
    /// `[B, 3]` temperature-scaled logits behind `probs`.
    pub scaled_logits: Option<Var>,
    /// Host copy of `values`.
    pub hard: Vec<[bool; NUM_OPERATORS]>,
}

impl GateDecision {
    pub fn oracle(g: &mut Graph, labels: &[[bool; NUM_OPERATORS]]) -> Self {
        let data = labels.iter().flatten().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let values = g.constant(Tensor::new(vec![labels.len(), NUM_OPERATORS], data).expect("gate shape"));
        Self { mode: GateMode::Oracle, values, probs: None, scaled_logits: None, hard: labels.to_vec() }
    }

    pub fn any_active(&self, op: OperatorKind) -> bool {
        self.hard.iter().any(|row| row[op.code()])
    }

    /// The gate of `op` per row, shaped `[B, 1, 1, 1]` for broadcasting over attention scores.
    pub fn column(&self, g: &mut Graph, op: OperatorKind) -> Result<Var> {
        let col = g.narrow(self.values, 1, op.code(), 1)?;
        g.reshape(col, vec![self.hard.len(), 1, 1, 1])
    }
}

/// `S_op = G_op · Scope_op · Bias_op`, shape `[B, heads, L, L]`.
///
/// The bias of key token `j` is applied wherever the scope mask admits `j`:
/// AND/OR only for query-key pairs inside the mutual scope, NOT for every query.
pub fn operator_bias(g: &mut Graph, gate: Var, scope: &ScopeResult, bias: Var) -> Result<Var> {
    let bs = g.shape(bias).to_vec();
    if bs.len() != 2 {
        return Err(shape_mismatch("operator_bias", &bs, &[]));
    }
    let (batch, len) = (bs[0], bs[1]);
    let key_bias = g.reshape(bias, vec![batch, 1, 1, len])?;
    let s = if scope.op.is_pairwise() {
        let mutual = scope
            .mutual_mask
            .ok_or_else(|| Error::InvalidArgument(format!("missing mutual mask for {}", scope.op)))?;
        g.mul(mutual, key_bias)?
    } else {
        let unary = scope
            .unary_mask
            .ok_or_else(|| Error::InvalidArgument(format!("missing unary mask for {}", scope.op)))?;
        let heads = g.shape(unary)[1];
        let keys = g.reshape(unary, vec![batch, heads, 1, len])?;
        let per_key = g.mul(keys, key_bias)?;
        let rows = g.constant(Tensor::full([1, 1, len, 1], 1.0));
        g.mul(per_key, rows)?
    };
    g.mul(s, gate)
}

/// `S_Boolean = S_and + S_or − S_not`.
pub fn combine(g: &mut Graph, s_and: Var, s_or: Var, s_not: Var) -> Result<Var> {
    let (a, o, n) = (g.shape(s_and).to_vec(), g.shape(s_or).to_vec(), g.shape(s_not).to_vec());
    if a != o {
        return Err(shape_mismatch("combine", &a, &o));
    }
    if a != n {
        return Err(shape_mismatch("combine", &a, &n));
    }
    let pos = g.add(s_and, s_or)?;
    g.sub(pos, s_not)
}

/// Output of [`attend`].
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    /// `[B, heads, L, head_dim]`
    pub output: Var,
    /// Post-softmax weights `[B, heads, L, L]`.
    pub weights: Var,
}

/// Additive `[B, 1, 1, L]` mask: 0 on real keys, −∞ on padding.
pub fn key_padding_mask(g: &mut Graph, lengths: &[usize], len: usize) -> Var {
    let data = lengths
        .iter()
        .flat_map(|&n| (0..len).map(move |j| if j < n { 0.0 } else { f32::NEG_INFINITY }))
        .collect();
    g.constant(Tensor::new(vec![lengths.len(), 1, 1, len], data).expect("mask shape"))
}

/// `softmax(QKᵀ/√d + S_Boolean + padding) V`.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var, s_boolean: Option<Var>, padding: Option<Var>) -> Result<Attention> {
    let qs = g.shape(q).to_vec();
    if qs.len() != 4 || g.shape(k) != qs.as_slice() || g.shape(v) != qs.as_slice() {
        return Err(shape_mismatch("attend", &qs, g.shape(k)));
    }
    let head_dim = qs[3];
    if head_dim == 0 {
        return Err(Error::InvalidArgument("head_dim must be positive".into()));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (head_dim as f32).sqrt());
    if let Some(s) = s_boolean {
        scores = g.add(scores, s)?;
    }
    if let Some(m) = padding {
        scores = g.add(scores, m)?;
    }
    let weights = g.softmax(scores);
    let output = g.matmul(weights, v)?;
    Ok(Attention { output, weights })
}

/// FFN classifier over the pooled first-layer representation.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl GateParams {
    pub(crate) fn build(b: &mut ParamBuilder<'_>, prefix: &str, hidden: usize, width: usize) -> Result<Self> {
        Ok(Self {
            w1: b.param(&format!("{prefix}.w1"), &[hidden, width], Init::FanIn(hidden))?,
            b1: b.param(&format!("{prefix}.b1"), &[width], Init::Const(0.0))?,
            w2: b.param(&format!("{prefix}.w2"), &[width, NUM_OPERATORS], Init::FanIn(width))?,
            b2: b.param(&format!("{prefix}.b2"), &[NUM_OPERATORS], Init::Const(0.0))?,
        })
    }

    /// Raw logits `[B, 3]`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, pooled: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (g.param(store, self.w1), g.param(store, self.b1), g.param(store, self.w2), g.param(store, self.b2));
        let a = g.matmul(pooled, w1)?;
        let a = g.add(a, b1)?;
        let a = g.gelu(a);
        let y = g.matmul(a, w2)?;
        g.add(y, b2)
    }
}

/// Independent per-operator sigmoids of `logits / τ`, hardened at 0.5 with
/// straight-through gradients. Operators are not mutually exclusive.
pub fn learned_gate(g: &mut Graph, logits: Var, temperature: f32) -> Result<GateDecision> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("gate temperature must be positive, got {temperature}")));
    }
    let scaled = g.scale(logits, 1.0 / temperature);
    let probs = g.sigmoid(scaled);
    let th = g.constant(Tensor::scalar(GATE_THRESHOLD));
    let values = g.ste_threshold(probs, th)?;
    let hard = g
        .value(probs)
        .chunks(NUM_OPERATORS)
        .map(|row| std::array::from_fn(|i| row[i] > GATE_THRESHOLD))
        .collect();
    Ok(GateDecision { mode: GateMode::Learned, values, probs: Some(probs), scaled_logits: Some(scaled), hard })
}

/// Scope and bias predictors owned by one encoder layer.
#[derive(Clone, Debug)]
pub struct BoolAttnLayerParams {
    pub scope: ScopePredictorParams,
    pub bias: BiasPredictorParams,
}

/// Hyperparameters of the per-layer Boolean modules.
#[derive(Clone, Copy, Debug)]
pub struct BoolAttnDims {
    pub hidden: usize,
    pub operator_dim: usize,
    pub scope_channels: usize,
    pub conv_kernel: usize,
    pub bias_ffn_dim: usize,
    pub sigma: f32,
    pub theta: f32,
}

impl BoolAttnLayerParams {
    pub(crate) fn build(b: &mut ParamBuilder<'_>, prefix: &str, dims: BoolAttnDims) -> Result<Self> {
        Ok(Self {
            scope: ScopePredictorParams::build(
                b,
                &format!("{prefix}.scope"),
                dims.hidden,
                dims.scope_channels,
                dims.conv_kernel,
                dims.operator_dim,
                dims.theta,
            )?,
            bias: BiasPredictorParams::build(b, &format!("{prefix}.bias"), dims.hidden, dims.bias_ffn_dim, dims.operator_dim, dims.sigma)?,
        })
    }
}

/// Everything one layer computed for one operator.
#[derive(Clone, Copy, Debug)]
pub struct OperatorTrace {
    pub scope: ScopeResult,
    pub bias: BooleanBias,
    /// `S_op`, `[B, heads, L, L]`.
    pub contribution: Var,
}

/// `S_Boolean` of one layer and its per-operator parts.
#[derive(Clone, Debug)]
pub struct LayerBias {
    /// `[B, heads, L, L]`, or `None` when every operator was skipped.
    pub s_boolean: Option<Var>,
    pub operators: Vec<OperatorTrace>,
}

/// Builds `S_Boolean` for one layer from its input `h`.
///
/// In oracle mode operators whose gate is off for every row are skipped, so
/// an all-off gate leaves attention untouched.
#[allow(clippy::too_many_arguments)]
pub fn boolean_bias(
    g: &mut Graph,
    store: &ParamStore,
    layer: &BoolAttnLayerParams,
    operators: &OperatorEmbeddingTable,
    ctx: &mut ScopeContext<'_>,
    h: Var,
    cues: &CuePrediction,
    cue_positions: &[Vec<Vec<usize>>],
    gates: &GateDecision,
    window: usize,
) -> Result<LayerBias> {
    let hs = g.shape(h).to_vec();
    let (batch, len) = (hs[0], hs[1]);
    let mut parts: [Option<Var>; NUM_OPERATORS] = [None; NUM_OPERATORS];
    let mut traces = Vec::new();
    for op in OperatorKind::ALL {
        if gates.mode == GateMode::Oracle && !gates.any_active(op) {
            continue;
        }
        let e = operators.embedding(g, store, op)?;
        let scope = layer.scope.predict(g, store, ctx, h, cues.probs(op), op, e)?;
        let bias = layer.bias.predict(g, store, h, &cue_positions[op.code()], window, op, e)?;
        let gate = gates.column(g, op)?;
        let contribution = operator_bias(g, gate, &scope, bias.gated)?;
        parts[op.code()] = Some(contribution);
        traces.push(OperatorTrace { scope, bias, contribution });
    }
    if traces.is_empty() {
        return Ok(LayerBias { s_boolean: None, operators: traces });
    }
    let zero = g.constant(Tensor::zeros([batch, ctx.heads, len, len]));
    let [a, o, n] = parts.map(|p| p.unwrap_or(zero));
    let s_boolean = Some(combine(g, a, o, n)?);
    Ok(LayerBias { s_boolean, operators: traces })
}

/// Scope settings for one forward pass; Gumbel sampling is on iff `rng` is given.
pub fn scope_context<'a>(heads: usize, gumbel_temperature: f32, rng: Option<&'a mut Rng>, token_mask: Var) -> ScopeContext<'a> {
    ScopeContext { heads, gumbel_temperature, training: rng.is_some(), rng, token_mask }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scope::mutualize;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn scope_with(g: &mut Graph, hard: &[f32], op: OperatorKind, heads: usize) -> ScopeResult {
        let m = g.constant(t(&[1, hard.len()], hard.to_vec()));
        let e = mutualize(g, m, heads, op).unwrap();
        ScopeResult {
            op,
            logits: m,
            probs: m,
            hard_mask: m,
            mutual_mask: op.is_pairwise().then_some(e),
            unary_mask: (!op.is_pairwise()).then_some(e),
        }
    }

    fn s_op(hard: &[f32], bias: &[f32], op: OperatorKind, gate: f32) -> Vec<f32> {
        let mut g = Graph::new();
        let scope = scope_with(&mut g, hard, op, 1);
        let b = g.constant(t(&[1, bias.len()], bias.to_vec()));
        let gv = g.constant(t(&[1, 1, 1, 1], vec![gate]));
        let s = operator_bias(&mut g, gv, &scope, b).unwrap();
        g.value(s).to_vec()
    }

    #[test]
    fn closed_gate_gives_zero() {
        assert!(s_op(&[1.0, 1.0, 0.0], &[1.0, 2.0, 3.0], OperatorKind::And, 0.0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_mask_constant_bias() {
        for op in OperatorKind::ALL {
            assert_eq!(s_op(&[1.0; 3], &[0.4; 3], op, 1.0), vec![0.4; 9]);
        }
    }

    #[test]
    fn and_mask_oracle() {
        let got = s_op(&[1.0, 0.0, 1.0], &[2.0, 5.0, 3.0], OperatorKind::And, 1.0);
        assert_eq!(got, vec![2., 0., 3., 0., 0., 0., 2., 0., 3.]);
    }

    #[test]
    fn not_bias_reaches_every_query() {
        let got = s_op(&[0.0, 1.0, 1.0], &[2.0, 5.0, 3.0], OperatorKind::Not, 1.0);
        assert_eq!(got, vec![0., 5., 3., 0., 5., 3., 0., 5., 3.]);
    }

    #[test]
    fn missing_mask_is_an_error() {
        let mut g = Graph::new();
        let mut scope = scope_with(&mut g, &[1.0], OperatorKind::Or, 1);
        scope.mutual_mask = None;
        let b = g.constant(Tensor::zeros([1, 1]));
        let one = g.constant(Tensor::full([1, 1, 1, 1], 1.0));
        assert!(operator_bias(&mut g, one, &scope, b).is_err());
    }

    #[test]
    fn combine_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros([1, 1, 2, 2]));
        let n = g.constant(t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let c = combine(&mut g, z, z, z).unwrap();
        assert_eq!(g.value(c), &[0.0; 4]);
        let c = combine(&mut g, z, z, n).unwrap();
        assert_eq!(g.value(c), &[-1.0, -2.0, -3.0, -4.0]);
        let bad = g.constant(Tensor::zeros([1, 1, 2, 3]));
        assert!(combine(&mut g, z, z, bad).is_err());
    }

    #[test]
    fn combine_random_oracle() {
        let mut rng = Rng::new(9);
        let a = Tensor::uniform([1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let o = Tensor::uniform([1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let n = Tensor::uniform([1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let expect: Vec<f32> = (0..18).map(|i| a.data()[i] + o.data()[i] - n.data()[i]).collect();
        let mut g = Graph::new();
        let (av, ov, nv) = (g.constant(a), g.constant(o), g.constant(n));
        let c = combine(&mut g, av, ov, nv).unwrap();
        assert_eq!(g.value(c), expect.as_slice());
    }

    #[test]
    fn zero_query_key_averages_values() {
        let mut rng = Rng::new(2);
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros([1, 1, 3, 2]));
        let vt = Tensor::uniform([1, 1, 3, 2], -1.0, 1.0, &mut rng);
        let v = g.constant(vt.clone());
        let a = attend(&mut g, z, z, v, None, None).unwrap();
        for row in g.value(a.output).chunks(2) {
            for c in 0..2 {
                let mean = (vt.data()[c] + vt.data()[2 + c] + vt.data()[4 + c]) / 3.0;
                assert!((row[c] - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_boolean_bias_is_plain_attention() {
        let mut rng = Rng::new(3);
        let mut g = Graph::new();
        let q = g.constant(Tensor::uniform([2, 2, 4, 3], -1.0, 1.0, &mut rng));
        let k = g.constant(Tensor::uniform([2, 2, 4, 3], -1.0, 1.0, &mut rng));
        let v = g.constant(Tensor::uniform([2, 2, 4, 3], -1.0, 1.0, &mut rng));
        let s = g.constant(Tensor::zeros([2, 2, 4, 4]));
        let plain = attend(&mut g, q, k, v, None, None).unwrap();
        let biased = attend(&mut g, q, k, v, Some(s), None).unwrap();
        assert_eq!(g.value(plain.output), g.value(biased.output));
        for row in g.value(plain.weights).chunks(4) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn positive_key_bias_raises_weight() {
        let mut rng = Rng::new(4);
        let mut g = Graph::new();
        let q = g.constant(Tensor::uniform([1, 1, 4, 2], -1.0, 1.0, &mut rng));
        let k = g.constant(Tensor::uniform([1, 1, 4, 2], -1.0, 1.0, &mut rng));
        let v = g.constant(Tensor::uniform([1, 1, 4, 2], -1.0, 1.0, &mut rng));
        let s = g.constant(Tensor::from_fn([1, 1, 4, 4], |i| if i % 4 == 2 { 10.0 } else { 0.0 }));
        let plain = attend(&mut g, q, k, v, None, None).unwrap();
        let biased = attend(&mut g, q, k, v, Some(s), None).unwrap();
        for i in 0..4 {
            assert!(g.value(biased.weights)[i * 4 + 2] > g.value(plain.weights)[i * 4 + 2]);
        }
    }

    #[test]
    fn padding_keys_get_no_weight() {
        let mut rng = Rng::new(5);
        let mut g = Graph::new();
        let q = g.constant(Tensor::uniform([1, 1, 3, 2], -1.0, 1.0, &mut rng));
        let m = key_padding_mask(&mut g, &[2], 3);
        let a = attend(&mut g, q, q, q, None, Some(m)).unwrap();
        for row in g.value(a.weights).chunks(3) {
            assert_eq!(row[2], 0.0);
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
        }
    }

    fn gate(logits: Vec<f32>) -> GateDecision {
        let mut g = Graph::new();
        let n = logits.len() / 3;
        let l = g.constant(t(&[n, 3], logits));
        learned_gate(&mut g, l, 0.1).unwrap()
    }

    #[test]
    fn learned_gate_examples() {
        assert_eq!(gate(vec![0.0; 3]).hard, vec![[false; 3]]);
        assert_eq!(gate(vec![0.5, -0.5, 0.5]).hard, vec![[true, false, true]]);
        // probs [0.9, 0.8, 0.1] at τ = 0.1
        let logit = |p: f32| 0.1 * (p / (1.0 - p)).ln();
        assert_eq!(gate(vec![logit(0.9), logit(0.8), logit(0.1)]).hard, vec![[true, true, false]]);
    }

    #[test]
    fn oracle_gate_column() {
        let mut g = Graph::new();
        let d = GateDecision::oracle(&mut g, &[[true, false, false], [false, false, true]]);
        assert!(d.any_active(OperatorKind::And));
        assert!(!d.any_active(OperatorKind::Or));
        let c = d.column(&mut g, OperatorKind::Not).unwrap();
        assert_eq!(g.shape(c), &[2, 1, 1, 1]);
        assert_eq!(g.value(c), &[0.0, 1.0]);
    }
}
