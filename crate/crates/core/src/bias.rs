//! Position-aware, operator-gated attention bias magnitudes.

use log::debug;

use crate::error::{shape_mismatch, Result};
use crate::init::{Init, ParamBuilder};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::operators::{OperatorKind, NUM_OPERATORS};

/// Offset of every token to the nearest cue of `op`.
///
/// NOT only affects following tokens, so offsets are `max(0, i − c)` and the
/// nearest preceding cue wins. AND/OR use the closest cue on either side
/// (earlier cue on ties), clipped to `[−window, window]`. Rows without cues
/// get all zeros.
pub fn relative_positions(cue_positions: &[Vec<usize>], len: usize, op: OperatorKind, window: usize) -> Tensor {
    let d = window as i64;
    let mut out = Vec::with_capacity(cue_positions.len() * len);
    for (row, cues) in cue_positions.iter().enumerate() {
        if cues.is_empty() {
            debug!("no {op} cue in batch row {row}; using zero relative positions");
            out.extend(std::iter::repeat_n(0.0, len));
            continue;
        }
        for i in 0..len as i64 {
            let r = match op {
                OperatorKind::Not => cues.iter().map(|&c| i - c as i64).filter(|&r| r >= 0).min().unwrap_or(0),
                _ => {
                    let c = *cues.iter().min_by_key(|&&c| ((i - c as i64).abs(), c)).unwrap_or(&0) as i64;
                    (i - c).clamp(-d, d)
                }
            };
            out.push(r as f32);
        }
    }
    Tensor::new(vec![cue_positions.len(), len], out).expect("row-major size")
}

/// `w(r) = exp(−r²/(2σ²))` with `σ = exp(log_sigma)`.
pub fn gaussian_weight(g: &mut Graph, r: Var, log_sigma: Var) -> Result<Var> {
    let r2 = g.mul(r, r)?;
    let inv_var = g.scale(log_sigma, -2.0);
    let inv_var = g.exp(inv_var);
    let z = g.mul(r2, inv_var)?;
    let z = g.scale(z, -0.5);
    Ok(g.exp(z))
}

/// Two-layer GELU FFN applied per token.
#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    /// `[d_h + 1, d_ffn]`
    pub w1: Var,
    pub b1: Var,
    /// `[d_ffn, 1]`
    pub w2: Var,
    pub b2: Var,
}

/// `b = FFN([H; w])`. `h: [B, L, d_h]`, `w: [B, L]`; returns `[B, L]`.
pub fn bias_scores(g: &mut Graph, h: Var, w: Var, ffn: FfnVars) -> Result<Var> {
    let hs = g.shape(h).to_vec();
    if hs.len() != 3 || g.shape(w) != [hs[0], hs[1]] {
        return Err(shape_mismatch("bias_scores", &hs, g.shape(w)));
    }
    let w3 = g.reshape(w, vec![hs[0], hs[1], 1])?;
    let x = g.concat_last(h, w3)?;
    let a = g.matmul(x, ffn.w1)?;
    let a = g.add(a, ffn.b1)?;
    let a = g.gelu(a);
    let y = g.matmul(a, ffn.w2)?;
    let y = g.add(y, ffn.b2)?;
    g.reshape(y, vec![hs[0], hs[1]])
}

/// `softplus(b · σ(W_op·e_op))`. `w_op: [1, d_o]`, `e_op: [d_o]`.
pub fn gate_bias(g: &mut Graph, b: Var, w_op: Var, e_op: Var) -> Result<Var> {
    let d_o = g.shape(e_op)[0];
    let col = g.reshape(e_op, vec![d_o, 1])?;
    let logit = g.matmul(w_op, col)?;
    let logit = g.reshape(logit, vec![1])?;
    let gate = g.sigmoid(logit);
    let gated = g.mul(b, gate)?;
    Ok(g.softplus(gated))
}

#[derive(Clone, Debug)]
pub struct BiasPredictorParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    /// `[1]`, stores `ln σ`.
    pub log_sigma: ParamId,
    /// `[3, d_o]`, one gate row per operator.
    pub w_op: ParamId,
}

/// Per-operator bias of one layer.
#[derive(Clone, Copy, Debug)]
pub struct BooleanBias {
    pub op: OperatorKind,
    /// Gaussian positional weights `[B, L]`.
    pub weights: Var,
    /// FFN output `b`, `[B, L]`.
    pub raw: Var,
    /// `softplus(b′)`, `[B, L]`, non-negative.
    pub gated: Var,
}

impl BiasPredictorParams {
    pub(crate) fn build(
        b: &mut ParamBuilder<'_>,
        prefix: &str,
        hidden: usize,
        ffn_dim: usize,
        operator_dim: usize,
        sigma: f32,
    ) -> Result<Self> {
        Ok(Self {
            w1: b.param(&format!("{prefix}.ffn.w1"), &[hidden + 1, ffn_dim], Init::FanIn(hidden + 1))?,
            b1: b.param(&format!("{prefix}.ffn.b1"), &[ffn_dim], Init::Const(0.0))?,
            w2: b.param(&format!("{prefix}.ffn.w2"), &[ffn_dim, 1], Init::FanIn(ffn_dim))?,
            b2: b.param(&format!("{prefix}.ffn.b2"), &[1], Init::Const(0.0))?,
            log_sigma: b.param(&format!("{prefix}.log_sigma"), &[1], Init::Const(sigma.ln()))?,
            w_op: b.param(&format!("{prefix}.w_op"), &[NUM_OPERATORS, operator_dim], Init::Uniform(0.1))?,
        })
    }

    pub fn sigma(&self, store: &ParamStore) -> f32 {
        store.get(self.log_sigma).data()[0].exp()
    }

    /// Bias of `op` given the cue positions detected on the first layer.
    pub fn predict(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h: Var,
        cue_positions: &[Vec<usize>],
        window: usize,
        op: OperatorKind,
        op_embedding: Var,
    ) -> Result<BooleanBias> {
        let len = g.shape(h)[1];
        let r = relative_positions(cue_positions, len, op, window);
        let r = g.constant(r);
        let log_sigma = g.param(store, self.log_sigma);
        let weights = gaussian_weight(g, r, log_sigma)?;
        let ffn = FfnVars {
            w1: g.param(store, self.w1),
            b1: g.param(store, self.b1),
            w2: g.param(store, self.w2),
            b2: g.param(store, self.b2),
        };
        let raw = bias_scores(g, h, weights, ffn)?;
        let w_all = g.param(store, self.w_op);
        let w_op = g.narrow(w_all, 0, op.code(), 1)?;
        let gated = gate_bias(g, raw, w_op, op_embedding)?;
        Ok(BooleanBias { op, weights, raw, gated })
    }
}
