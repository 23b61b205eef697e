//! Per-token Boolean cue detection, run once on the first layer's input.

use crate::error::{shape_mismatch, Result};
use crate::init::{Init, ParamBuilder};
use crate::numerics::{Graph, ParamId, ParamStore, Var};
use crate::operators::{OperatorEmbeddingTable, OperatorKind, NUM_OPERATORS};

/// Probability above which a token counts as a detected cue.
pub const CUE_THRESHOLD: f32 = 0.5;

/// `p_c = σ(W_c·(H + o') + b_c)`, one probability per token.
///
/// `h: [B, L, d_h]`, `o_proj: [d_h]`, `w_c: [1, d_h]`, `b_c: [1]`; returns `[B, L]`.
pub fn predict_cues(g: &mut Graph, h: Var, o_proj: Var, w_c: Var, b_c: Var) -> Result<Var> {
    let hs = g.shape(h).to_vec();
    let ws = g.shape(w_c).to_vec();
    if hs.len() != 3 || ws != [1, hs[2]] || g.shape(o_proj) != [hs[2]] {
        return Err(shape_mismatch("predict_cues", &hs, &ws));
    }
    let shifted = g.add(h, o_proj)?;
    let wt = g.transpose(w_c)?;
    let score = g.matmul(shifted, wt)?;
    let score = g.reshape(score, vec![hs[0], hs[1]])?;
    let score = g.add(score, b_c)?;
    Ok(g.sigmoid(score))
}

/// Indices with `prob > threshold`, per batch row, ascending. Only the first
/// `lengths[b]` positions of row `b` are considered.
pub fn extract_positions(probs: &[f32], lengths: &[usize], len: usize, threshold: f32) -> Vec<Vec<usize>> {
    lengths
        .iter()
        .enumerate()
        .map(|(b, &n)| {
            (0..n.min(len))
                .filter(|&l| probs[b * len + l] > threshold)
                .collect()
        })
        .collect()
}

/// Cue probabilities of every operator and the hard positions derived from them.
#[derive(Clone, Debug)]
pub struct CuePrediction {
    /// One `[B, L]` probability map per operator, indexed by operator code.
    pub probs: Vec<Var>,
    /// `hard_positions[op][b]` lists the detected cue indices of row `b`.
    pub hard_positions: Vec<Vec<Vec<usize>>>,
}

impl CuePrediction {
    pub fn positions(&self, op: OperatorKind) -> &[Vec<usize>] {
        &self.hard_positions[op.code()]
    }

    pub fn probs(&self, op: OperatorKind) -> Var {
        self.probs[op.code()]
    }
}

#[derive(Clone, Debug)]
pub struct CuePredictorParams {
    pub w_c: ParamId,
    pub b_c: ParamId,
}

impl CuePredictorParams {
    pub(crate) fn build(b: &mut ParamBuilder<'_>, prefix: &str, hidden: usize) -> Result<Self> {
        Ok(Self {
            w_c: b.param(&format!("{prefix}.w_c"), &[1, hidden], Init::FanIn(hidden))?,
            b_c: b.param(&format!("{prefix}.b_c"), &[1], Init::Const(0.0))?,
        })
    }

    /// Runs the predictor once per operator.
    pub fn predict(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        operators: &OperatorEmbeddingTable,
        h: Var,
        lengths: &[usize],
    ) -> Result<CuePrediction> {
        let len = g.shape(h)[1];
        let w_c = g.param(store, self.w_c);
        let b_c = g.param(store, self.b_c);
        let mut probs = Vec::with_capacity(NUM_OPERATORS);
        let mut hard_positions = Vec::with_capacity(NUM_OPERATORS);
        for op in OperatorKind::ALL {
            let o_proj = operators.project(g, store, op)?;
            let p = predict_cues(g, h, o_proj, w_c, b_c)?;
            hard_positions.push(extract_positions(g.value(p), lengths, len, CUE_THRESHOLD));
            probs.push(p);
        }
        Ok(CuePrediction { probs, hard_positions })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Rng, Tensor};
    use proptest::prelude::*;

    fn run(h: Tensor, o: Tensor, w: Tensor, b: f32) -> Vec<f32> {
        let mut g = Graph::new();
        let (h, o, w) = (g.constant(h), g.constant(o), g.constant(w));
        let b = g.constant(Tensor::scalar(b));
        let p = predict_cues(&mut g, h, o, w, b).unwrap();
        g.value(p).to_vec()
    }

    #[test]
    fn zero_weights_give_half() {
        let mut rng = Rng::new(0);
        let h = Tensor::uniform([2, 3, 4], -1.0, 1.0, &mut rng);
        let p = run(h, Tensor::zeros([4]), Tensor::zeros([1, 4]), 0.0);
        assert_eq!(p, vec![0.5; 6]);
    }

    #[test]
    fn large_bias_saturates() {
        let p = run(Tensor::zeros([1, 3, 2]), Tensor::zeros([2]), Tensor::zeros([1, 2]), 100.0);
        assert!(p.iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn hand_computed_two_token_case() {
        // token 0: (1,2)+(0.5,−1) = (1.5,1) · (2,−1) = 2 ; +0.5 → σ(2.5)
        // token 1: (−1,0)+(0.5,−1) = (−0.5,−1) · (2,−1) = 0 ; +0.5 → σ(0.5)
        let h = Tensor::new([1, 2, 2], vec![1.0, 2.0, -1.0, 0.0]).unwrap();
        let o = Tensor::new([2], vec![0.5, -1.0]).unwrap();
        let w = Tensor::new([1, 2], vec![2.0, -1.0]).unwrap();
        let p = run(h, o, w, 0.5);
        let s = |x: f32| 1.0 / (1.0 + (-x).exp());
        assert!((p[0] - s(2.5)).abs() < 1e-6);
        assert!((p[1] - s(0.5)).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::zeros([1, 2, 3]));
        let o = g.constant(Tensor::zeros([3]));
        let w = g.constant(Tensor::zeros([1, 4]));
        let b = g.constant(Tensor::scalar(0.0));
        assert!(predict_cues(&mut g, h, o, w, b).is_err());
    }

    #[test]
    fn extraction_examples() {
        assert_eq!(extract_positions(&[0.1, 0.9, 0.4], &[3], 3, 0.5), vec![vec![1]]);
        assert_eq!(extract_positions(&[0.0; 3], &[3], 3, 0.5), vec![Vec::<usize>::new()]);
        assert_eq!(extract_positions(&[0.6, 0.6], &[2], 2, 0.5), vec![vec![0, 1]]);
        // padding beyond the row length is ignored
        assert_eq!(extract_positions(&[0.9, 0.9, 0.9], &[2], 3, 0.5), vec![vec![0, 1]]);
    }

    proptest! {
        #[test]
        fn permutation_equivariant(seed in 0u64..200, shift in 0usize..5) {
            let mut rng = Rng::new(seed);
            let (l, d) = (5, 3);
            let h = Tensor::uniform([1, l, d], -2.0, 2.0, &mut rng);
            let o = Tensor::uniform([d], -1.0, 1.0, &mut rng);
            let w = Tensor::uniform([1, d], -1.0, 1.0, &mut rng);
            let base = run(h.clone(), o.clone(), w.clone(), 0.3);
            let perm: Vec<usize> = (0..l).map(|i| (i + shift) % l).collect();
            let permuted = Tensor::from_fn([1, l, d], |i| h.data()[perm[i / d] * d + i % d]);
            let out = run(permuted, o, w, 0.3);
            for i in 0..l {
                prop_assert_eq!(out[i].to_bits(), base[perm[i]].to_bits());
            }
        }

        #[test]
        fn constant_shift_moves_into_projection(seed in 0u64..200) {
            let mut rng = Rng::new(seed);
            let h = Tensor::uniform([2, 3, 4], -1.0, 1.0, &mut rng);
            let o = Tensor::uniform([4], -1.0, 1.0, &mut rng);
            let v = Tensor::uniform([4], -1.0, 1.0, &mut rng);
            let w = Tensor::uniform([1, 4], -1.0, 1.0, &mut rng);
            let shifted_h = Tensor::from_fn([2, 3, 4], |i| h.data()[i] + v.data()[i % 4]);
            let shifted_o = Tensor::from_fn([4], |i| o.data()[i] + v.data()[i]);
            let a = run(shifted_h, o, w.clone(), -0.2);
            let b = run(h, shifted_o, w, -0.2);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn probabilities_strictly_inside_unit_interval(seed in 0u64..200) {
            let mut rng = Rng::new(seed);
            let h = Tensor::uniform([1, 4, 3], -3.0, 3.0, &mut rng);
            let o = Tensor::uniform([3], -1.0, 1.0, &mut rng);
            let w = Tensor::uniform([1, 3], -1.0, 1.0, &mut rng);
            let p = run(h, o, w, 0.0);
            prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
