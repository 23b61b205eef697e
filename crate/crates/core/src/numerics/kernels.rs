//! Slice-level kernels shared by the graph's forward and backward passes.

use crate::error::{shape_mismatch, Result};

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    acc.iter().sum::<f32>() + tail
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[derive(Clone, Debug)]
enum Layout {
    Same,
    /// `b` equals the trailing dims of the output, `a` equals the output.
    BSuffix(usize),
    /// `a` equals the trailing dims of the output, `b` equals the output.
    ASuffix(usize),
    General,
}

/// Index plan for a numpy-style broadcasting binary op.
#[derive(Clone, Debug)]
pub(crate) struct Broadcast {
    pub out: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    layout: Layout,
}

impl Broadcast {
    pub fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            out.push(match (x, y) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(shape_mismatch(op, a, b)),
            });
        }
        let masked = |p: &[usize]| {
            let s = strides(p);
            p.iter()
                .zip(s)
                .map(|(&d, st)| if d == 1 { 0 } else { st })
                .collect::<Vec<_>>()
        };
        let is_suffix = |small: &[usize]| {
            let n = small.len();
            n <= out.len() && small == &out[out.len() - n..]
        };
        let layout = if a == b {
            Layout::Same
        } else if a == out.as_slice() && is_suffix(b) {
            Layout::BSuffix(b.iter().product())
        } else if b == out.as_slice() && is_suffix(a) {
            Layout::ASuffix(a.iter().product())
        } else {
            Layout::General
        };
        Ok(Self {
            a_strides: masked(&pa),
            b_strides: masked(&pb),
            out,
            layout,
        })
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let total: usize = self.out.iter().product();
        match self.layout {
            Layout::Same => (0..total).for_each(|i| f(i, i, i)),
            Layout::BSuffix(n) => (0..total).for_each(|i| f(i, i, i % n)),
            Layout::ASuffix(n) => (0..total).for_each(|i| f(i, i % n, i)),
            Layout::General => {
                let rank = self.out.len();
                let mut idx = vec![0usize; rank];
                let (mut ai, mut bi) = (0usize, 0usize);
                for o in 0..total {
                    f(o, ai, bi);
                    for d in (0..rank).rev() {
                        idx[d] += 1;
                        ai += self.a_strides[d];
                        bi += self.b_strides[d];
                        if idx[d] < self.out[d] {
                            break;
                        }
                        ai -= self.a_strides[d] * idx[d];
                        bi -= self.b_strides[d] * idx[d];
                        idx[d] = 0;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_variants_agree() {
        let (m, k, n) = (3, 11, 5);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.91).cos()).collect();
        let expect = naive(&a, &b, m, k, n);
        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm_nt(&a, &bt, &mut c2, m, k, n);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c3 = vec![0.0; m * n];
        gemm_tn(&at, &b, &mut c3, k, m, n);
        for i in 0..m * n {
            assert!((c[i] - expect[i]).abs() < 1e-5);
            assert!((c2[i] - expect[i]).abs() < 1e-5);
            assert!((c3[i] - expect[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn broadcast_general_indices() {
        let plan = Broadcast::new("t", &[2, 1, 3], &[4, 1]).unwrap();
        assert_eq!(plan.out, vec![2, 4, 3]);
        let mut seen = Vec::new();
        plan.for_each(|o, a, b| seen.push((o, a, b)));
        assert_eq!(seen.len(), 24);
        // out[1, 2, 1] = a[1, 0, 1] op b[2, 0]
        assert_eq!(seen[12 + 6 + 1], (19, 4, 2));
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        assert!(Broadcast::new("t", &[2, 3], &[4]).is_err());
    }
}
