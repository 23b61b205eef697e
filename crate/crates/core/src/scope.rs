//! Operator scope prediction: which tokens an operator governs.
//!
//! A same-length convolution over `[H; p_c]` captures the neighbourhood of each
//! cue, FiLM conditioning on the operator embedding specializes it per
//! operator, and a straight-through threshold turns probabilities into a
//! binary mask. AND/OR scopes are expanded to a pairwise mask; NOT keeps a
//! per-token column.

use crate::error::{shape_mismatch, Result};
use crate::init::{Init, ParamBuilder};
use crate::numerics::{gumbel_sigmoid, Graph, ParamId, ParamStore, Rng, Tensor, Var};
use crate::operators::{OperatorKind, NUM_OPERATORS};

/// Affine maps producing FiLM scale and shift from an operator embedding.
#[derive(Clone, Copy, Debug)]
pub struct FilmVars {
    /// `[C, d_o]`
    pub w_gamma: Var,
    /// `[C]`
    pub b_gamma: Var,
    pub w_beta: Var,
    pub b_beta: Var,
}

fn affine(g: &mut Graph, w: Var, b: Var, o: Var) -> Result<Var> {
    let d_o = g.value(o).len();
    let col = g.reshape(o, vec![d_o, 1])?;
    let y = g.matmul(w, col)?;
    let c = g.shape(y)[0];
    let y = g.reshape(y, vec![c])?;
    g.add(y, b)
}

/// `γ·Conv1D([H; p_c]) + β`, projected to one logit per token when the
/// convolution has more than one output channel.
///
/// `h: [B, L, d_h]`, `p_c: [B, L]`, `conv_w: [C, d_h + 1, k]`, `conv_b: [C]`,
/// `head: ([C, 1], [1])` required iff `C > 1`, `o: [d_o]`. Returns `[B, L]`.
pub fn scope_logits(
    g: &mut Graph,
    h: Var,
    p_c: Var,
    conv_w: Var,
    conv_b: Var,
    film: FilmVars,
    head: Option<(Var, Var)>,
    o: Var,
) -> Result<Var> {
    let hs = g.shape(h).to_vec();
    if hs.len() != 3 || g.shape(p_c) != [hs[0], hs[1]] {
        return Err(shape_mismatch("scope_logits", &hs, g.shape(p_c)));
    }
    let (batch, len) = (hs[0], hs[1]);
    let pc = g.reshape(p_c, vec![batch, len, 1])?;
    let x = g.concat_last(h, pc)?;
    let s = g.conv1d(x, conv_w, conv_b)?;
    let gamma = affine(g, film.w_gamma, film.b_gamma, o)?;
    let beta = affine(g, film.w_beta, film.b_beta, o)?;
    let s = g.mul(s, gamma)?;
    let s = g.add(s, beta)?;
    let channels = g.shape(s)[2];
    let s = match head {
        Some((w, b)) => {
            let y = g.matmul(s, w)?;
            g.add(y, b)?
        }
        None if channels == 1 => s,
        None => return Err(shape_mismatch("scope_logits head", &[channels], &[1])),
    };
    g.reshape(s, vec![batch, len])
}

/// Training: relaxed Bernoulli sample via Gumbel-Sigmoid. Evaluation: `σ(logits)`.
pub fn scope_probs(g: &mut Graph, logits: Var, temperature: f32, rng: Option<&mut Rng>, training: bool) -> Result<Var> {
    match (training, rng) {
        (true, Some(rng)) => gumbel_sigmoid(g, logits, temperature, rng),
        (true, None) => Err(crate::Error::InvalidArgument("training-mode scope sampling needs an rng".into())),
        (false, _) => Ok(g.sigmoid(logits)),
    }
}

/// Binary scope mask `I(P > θ)` with straight-through gradients.
pub fn harden(g: &mut Graph, probs: Var, theta: Var) -> Result<Var> {
    g.ste_threshold(probs, theta)
}

/// Expands a `[B, L]` hard scope over `heads` attention heads.
///
/// AND/OR: outer product `S·Sᵀ`, shape `[B, heads, L, L]`.
/// NOT: the mask itself as a column, shape `[B, heads, L, 1]`.
pub fn mutualize(g: &mut Graph, hard: Var, heads: usize, op: OperatorKind) -> Result<Var> {
    let s = g.shape(hard).to_vec();
    if s.len() != 2 {
        return Err(shape_mismatch("mutualize", &s, &[]));
    }
    let (batch, len) = (s[0], s[1]);
    let ones = g.constant(Tensor::full([1, heads, 1, 1], 1.0));
    if op.is_pairwise() {
        let col = g.reshape(hard, vec![batch, 1, len, 1])?;
        let row = g.reshape(hard, vec![batch, 1, 1, len])?;
        let outer = g.mul(col, row)?;
        g.mul(outer, ones)
    } else {
        let col = g.reshape(hard, vec![batch, 1, len, 1])?;
        g.mul(col, ones)
    }
}

/// Scope of one operator over a batch.
#[derive(Clone, Copy, Debug)]
pub struct ScopeResult {
    pub op: OperatorKind,
    /// Post-FiLM logits `[B, L]`.
    pub logits: Var,
    /// Scope probabilities `[B, L]` (Gumbel-relaxed during training).
    pub probs: Var,
    /// `{0, 1}` mask `[B, L]`, zero at padding.
    pub hard_mask: Var,
    /// `[B, heads, L, L]`, AND/OR only.
    pub mutual_mask: Option<Var>,
    /// `[B, heads, L, 1]`, NOT only.
    pub unary_mask: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ScopePredictorParams {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub head: Option<(ParamId, ParamId)>,
    pub w_gamma: ParamId,
    pub b_gamma: ParamId,
    pub w_beta: ParamId,
    pub b_beta: ParamId,
    /// One threshold per operator, `[3]`.
    pub theta: ParamId,
}

/// Sampling and shape settings shared by every scope evaluation of a forward pass.
pub struct ScopeContext<'a> {
    pub heads: usize,
    pub gumbel_temperature: f32,
    pub training: bool,
    pub rng: Option<&'a mut Rng>,
    /// `[B, L]` with 1 on real tokens, 0 on padding.
    pub token_mask: Var,
}

impl ScopePredictorParams {
    pub(crate) fn build(
        b: &mut ParamBuilder<'_>,
        prefix: &str,
        hidden: usize,
        channels: usize,
        kernel: usize,
        operator_dim: usize,
        theta_init: f32,
    ) -> Result<Self> {
        let fan = (hidden + 1) * kernel;
        let head = if channels > 1 {
            Some((
                b.param(&format!("{prefix}.head.w"), &[channels, 1], Init::FanIn(channels))?,
                b.param(&format!("{prefix}.head.b"), &[1], Init::Const(0.0))?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv_w: b.param(&format!("{prefix}.conv.w"), &[channels, hidden + 1, kernel], Init::FanIn(fan))?,
            conv_b: b.param(&format!("{prefix}.conv.b"), &[channels], Init::Const(0.0))?,
            head,
            w_gamma: b.param(&format!("{prefix}.film.w_gamma"), &[channels, operator_dim], Init::Uniform(0.1))?,
            b_gamma: b.param(&format!("{prefix}.film.b_gamma"), &[channels], Init::Const(1.0))?,
            w_beta: b.param(&format!("{prefix}.film.w_beta"), &[channels, operator_dim], Init::Uniform(0.1))?,
            b_beta: b.param(&format!("{prefix}.film.b_beta"), &[channels], Init::Const(0.0))?,
            theta: b.param(&format!("{prefix}.theta"), &[NUM_OPERATORS], Init::Const(theta_init))?,
        })
    }

    pub fn theta(&self, g: &mut Graph, store: &ParamStore, op: OperatorKind) -> Result<Var> {
        let all = g.param(store, self.theta);
        g.narrow(all, 0, op.code(), 1)
    }

    /// Full scope pipeline for one operator.
    #[allow(clippy::too_many_arguments)]
    pub fn predict(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ctx: &mut ScopeContext<'_>,
        h: Var,
        p_c: Var,
        op: OperatorKind,
        op_embedding: Var,
    ) -> Result<ScopeResult> {
        let film = FilmVars {
            w_gamma: g.param(store, self.w_gamma),
            b_gamma: g.param(store, self.b_gamma),
            w_beta: g.param(store, self.w_beta),
            b_beta: g.param(store, self.b_beta),
        };
        let conv_w = g.param(store, self.conv_w);
        let conv_b = g.param(store, self.conv_b);
        let head = self.head.map(|(w, b)| (g.param(store, w), g.param(store, b)));
        // Padding must not leak into real tokens through the convolution window.
        let hs = g.shape(h).to_vec();
        let m3 = g.reshape(ctx.token_mask, vec![hs[0], hs[1], 1])?;
        let h = g.mul(h, m3)?;
        let p_c = g.mul(p_c, ctx.token_mask)?;
        let logits = scope_logits(g, h, p_c, conv_w, conv_b, film, head, op_embedding)?;
        let probs = scope_probs(g, logits, ctx.gumbel_temperature, ctx.rng.as_deref_mut(), ctx.training)?;
        let theta = self.theta(g, store, op)?;
        let hard = harden(g, probs, theta)?;
        let hard_mask = g.mul(hard, ctx.token_mask)?;
        let expanded = mutualize(g, hard_mask, ctx.heads, op)?;
        let (mutual_mask, unary_mask) = if op.is_pairwise() {
            (Some(expanded), None)
        } else {
            (None, Some(expanded))
        };
        Ok(ScopeResult {
            op,
            logits,
            probs,
            hard_mask,
            mutual_mask,
            unary_mask,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{self, Tolerance};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    struct Setup {
        h: Tensor,
        pc: Tensor,
        conv_w: Tensor,
        conv_b: Tensor,
        w_gamma: Tensor,
        b_gamma: Tensor,
        w_beta: Tensor,
        b_beta: Tensor,
        o: Tensor,
    }

    impl Setup {
        fn logits(&self) -> Vec<f32> {
            let mut g = Graph::new();
            let c = |g: &mut Graph, x: &Tensor| g.constant(x.clone());
            let (h, pc, w, b, o) = (c(&mut g, &self.h), c(&mut g, &self.pc), c(&mut g, &self.conv_w), c(&mut g, &self.conv_b), c(&mut g, &self.o));
            let film = FilmVars {
                w_gamma: c(&mut g, &self.w_gamma),
                b_gamma: c(&mut g, &self.b_gamma),
                w_beta: c(&mut g, &self.w_beta),
                b_beta: c(&mut g, &self.b_beta),
            };
            let y = scope_logits(&mut g, h, pc, w, b, film, None, o).unwrap();
            g.value(y).to_vec()
        }
    }

    fn single_channel(seed: u64) -> Setup {
        let mut rng = Rng::new(seed);
        Setup {
            h: Tensor::uniform([1, 4, 2], -1.0, 1.0, &mut rng),
            pc: Tensor::uniform([1, 4], 0.0, 1.0, &mut rng),
            conv_w: Tensor::uniform([1, 3, 3], -1.0, 1.0, &mut rng),
            conv_b: Tensor::uniform([1], -1.0, 1.0, &mut rng),
            w_gamma: Tensor::zeros([1, 2]),
            b_gamma: Tensor::scalar(1.0),
            w_beta: Tensor::zeros([1, 2]),
            b_beta: Tensor::scalar(0.0),
            o: Tensor::uniform([2], -1.0, 1.0, &mut rng),
        }
    }

    #[test]
    fn zero_conv_yields_beta() {
        let mut s = single_channel(1);
        s.conv_w = Tensor::zeros([1, 3, 3]);
        s.conv_b = Tensor::scalar(0.0);
        s.w_gamma = t(&[1, 2], vec![0.7, -3.0]);
        s.b_beta = Tensor::scalar(-0.4);
        s.w_beta = Tensor::zeros([1, 2]);
        assert!(s.logits().iter().all(|&v| (v + 0.4).abs() < 1e-7));
    }

    #[test]
    fn identity_film_equals_raw_conv() {
        let s = single_channel(2);
        let mut g = Graph::new();
        let pc = g.constant(s.pc.clone().reshape([1, 4, 1]).unwrap());
        let h = g.constant(s.h.clone());
        let x = g.concat_last(h, pc).unwrap();
        let (w, b) = (g.constant(s.conv_w.clone()), g.constant(s.conv_b.clone()));
        let raw = g.conv1d(x, w, b).unwrap();
        assert_eq!(s.logits(), g.value(raw).to_vec());
    }

    #[test]
    fn hand_computed_small_case() {
        // L=4, d_h=1, k=3; x channels = [h, p_c]
        let s = Setup {
            h: t(&[1, 4, 1], vec![1.0, 0.0, -1.0, 2.0]),
            pc: t(&[1, 4], vec![0.0, 1.0, 0.0, 0.0]),
            conv_w: t(&[1, 2, 3], vec![0.5, 1.0, -0.5, 0.0, 2.0, 1.0]),
            conv_b: Tensor::scalar(0.1),
            w_gamma: t(&[1, 1], vec![1.0]),
            b_gamma: Tensor::scalar(0.5),
            w_beta: t(&[1, 1], vec![0.0]),
            b_beta: Tensor::scalar(-1.0),
            o: t(&[1], vec![1.5]),
        };
        // γ = 1.5·1 + 0.5 = 2, β = −1.
        // raw[l] = 0.1 + 0.5·h[l−1] + 1·h[l] − 0.5·h[l+1] + 0·p[l−1] + 2·p[l] + 1·p[l+1]
        let hs = [1.0f32, 0.0, -1.0, 2.0];
        let ps = [0.0f32, 1.0, 0.0, 0.0];
        let at = |v: &[f32], i: isize| if i < 0 || i > 3 { 0.0 } else { v[i as usize] };
        let expect: Vec<f32> = (0..4isize)
            .map(|l| {
                let raw = 0.1 + 0.5 * at(&hs, l - 1) + at(&hs, l) - 0.5 * at(&hs, l + 1)
                    + 2.0 * at(&ps, l)
                    + at(&ps, l + 1);
                2.0 * raw - 1.0
            })
            .collect();
        let got = s.logits();
        for (a, e) in got.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-6, "{got:?} vs {expect:?}");
        }
    }

    #[test]
    fn probs_eval_and_training() {
        let mut g = Graph::new();
        let z = g.constant(t(&[1, 2], vec![0.0, 20.0]));
        let p = scope_probs(&mut g, z, 1.0, None, false).unwrap();
        assert_eq!(g.value(p)[0], 0.5);
        assert!((g.value(p)[1] - 1.0).abs() < 1e-6);
        let draw = || {
            let mut g = Graph::new();
            let z = g.constant(Tensor::zeros([1, 6]));
            let mut rng = Rng::new(31);
            let p = scope_probs(&mut g, z, 1.0, Some(&mut rng), true).unwrap();
            g.value(p).to_vec()
        };
        assert_eq!(draw(), draw());
        assert!(scope_probs(&mut g, z, 1.0, None, true).is_err());
    }

    #[test]
    fn harden_examples() {
        let mut g = Graph::new();
        let p = g.constant(t(&[1, 2], vec![0.9, 0.1]));
        let th = g.constant(Tensor::scalar(0.5));
        let h = harden(&mut g, p, th).unwrap();
        assert_eq!(g.value(h), &[1.0, 0.0]);
        let zero = g.constant(Tensor::scalar(0.0));
        let p = g.constant(t(&[1, 3], vec![0.01, 0.5, 0.99]));
        let h = harden(&mut g, p, zero).unwrap();
        assert_eq!(g.value(h), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn theta_initialized_at_half() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let p = ScopePredictorParams::build(&mut ParamBuilder::Fresh { store: &mut store, rng: &mut rng }, "s", 4, 4, 3, 10, 0.5).unwrap();
        assert_eq!(store.get(p.theta).data(), &[0.5, 0.5, 0.5]);
    }

    fn mutual(hard: &[f32], op: OperatorKind, heads: usize) -> (Vec<usize>, Vec<f32>) {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, hard.len()], hard.to_vec()));
        let m = mutualize(&mut g, x, heads, op).unwrap();
        (g.shape(m).to_vec(), g.value(m).to_vec())
    }

    #[test]
    fn mutualize_examples() {
        let (shape, v) = mutual(&[1.0, 0.0, 1.0], OperatorKind::And, 1);
        assert_eq!(shape, vec![1, 1, 3, 3]);
        assert_eq!(v, vec![1., 0., 1., 0., 0., 0., 1., 0., 1.]);
        let (_, v) = mutual(&[0.0; 3], OperatorKind::Or, 2);
        assert!(v.iter().all(|&x| x == 0.0));
        let (shape, v) = mutual(&[1.0, 1.0], OperatorKind::Not, 2);
        assert_eq!(shape, vec![1, 2, 2, 1]);
        assert_eq!(v, vec![1.0; 4]);
    }

    #[test]
    fn scope_parameter_gradients_match_finite_differences() {
        let mut rng = Rng::new(12);
        let mut store = ParamStore::new();
        let p = ScopePredictorParams::build(&mut ParamBuilder::Fresh { store: &mut store, rng: &mut rng }, "s", 3, 2, 3, 4, 0.5).unwrap();
        let h = Tensor::uniform([1, 4, 3], -1.0, 1.0, &mut rng);
        let pc = Tensor::uniform([1, 4], 0.0, 1.0, &mut rng);
        let o = Tensor::uniform([4], -1.0, 1.0, &mut rng);
        let ids = [p.conv_w, p.conv_b, p.w_gamma, p.b_gamma, p.w_beta, p.b_beta, p.head.unwrap().0, p.head.unwrap().1, p.theta];
        let out = gradcheck::check_params(&mut store, &ids, true, Tolerance::default(), |g, s| {
            let mask = g.constant(Tensor::full([1, 4], 1.0));
            let mut ctx = ScopeContext { heads: 2, gumbel_temperature: 1.0, training: false, rng: None, token_mask: mask };
            let (hv, pv, ov) = (g.constant(h.clone()), g.constant(pc.clone()), g.constant(o.clone()));
            let r = p.predict(g, s, &mut ctx, hv, pv, OperatorKind::And, ov)?;
            let a = gradcheck::probe(g, r.mutual_mask.unwrap(), 1)?;
            let b = gradcheck::probe(g, r.logits, 2)?;
            g.add(a, b)
        })
        .unwrap();
        for o in out {
            // θ only receives gradient for the AND slot.
            assert!(o.passed(), "{} {:?}", o.name, o.worst);
        }
    }

    proptest! {
        #[test]
        fn mutual_mask_is_outer_product(bits in proptest::collection::vec(proptest::bool::ANY, 1..7)) {
            let hard: Vec<f32> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let n = hard.len();
            let (_, v) = mutual(&hard, OperatorKind::And, 1);
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(v[i * n + j], hard[i] * hard[j]);
                    prop_assert_eq!(v[i * n + j], v[j * n + i]);
                    prop_assert_eq!(v[i * n + j] == 1.0, bits[i] && bits[j]);
                }
            }
        }

        #[test]
        fn harden_is_monotone(p in proptest::collection::vec(0f32..1f32, 1..8), bump in 0f32..0.5, th in 0f32..1f32) {
            let n = p.len();
            let raised: Vec<f32> = p.iter().map(|&x| (x + bump).min(1.0)).collect();
            let mut g = Graph::new();
            let a = g.constant(t(&[1, n], p));
            let b = g.constant(t(&[1, n], raised));
            let th = g.constant(Tensor::scalar(th));
            let ha = harden(&mut g, a, th).unwrap();
            let hb = harden(&mut g, b, th).unwrap();
            for (x, y) in g.value(ha).iter().zip(g.value(hb)) {
                prop_assert!(y >= x);
            }
        }
    }
}
