//! Tape-based reverse-mode differentiation over dense `f32` tensors.
//!
//! A [`Graph`] records every operation in creation order, so reverse creation
//! order is a valid topological order for the backward sweep. Parameters enter
//! the tape through [`Graph::param`] and receive their gradients back through
//! [`Graph::backward`].

use std::collections::HashMap;

use crate::error::{shape_mismatch, Error, Result};
use crate::numerics::kernels::{self, Broadcast};
use crate::numerics::tensor::numel;
use crate::numerics::{ParamId, ParamStore, Tensor};

/// Temperature of the sigmoid surrogate that carries gradient to a threshold.
pub const STE_SURROGATE_TEMPERATURE: f32 = 0.1;

/// Probability clamp used by binary cross-entropy.
pub const BCE_EPS: f32 = 1e-7;

const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f32),
    AddScalar(Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        shared_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    /// `map[out_index] = in_index`
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat {
        a: Var,
        b: Var,
        na: usize,
        nb: usize,
    },
    Narrow {
        x: Var,
        axis_len: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
        width: usize,
    },
    SumAll(Var),
    SumAxis {
        x: Var,
        axis_len: usize,
        inner: usize,
    },
    Sigmoid(Var),
    Softplus(Var),
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        batch: usize,
        len: usize,
        cin: usize,
        cout: usize,
        k: usize,
    },
    Ste {
        p: Var,
        theta: Var,
        relaxed: bool,
    },
    Bce {
        p: Var,
        target: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Recorded computation. Confined to one thread; build a fresh graph per step.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u64, ParamId), Var>,
    relax_ste: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// In relaxed mode every straight-through threshold evaluates its smooth
    /// surrogate `σ((p − θ)/0.1)` in the forward pass as well, which makes the
    /// whole graph differentiable for finite-difference checking.
    pub fn relaxed() -> Self {
        Self {
            relax_ste: true,
            ..Self::default()
        }
    }

    pub fn is_relaxed(&self) -> bool {
        self.relax_ste
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> Result<f32> {
        match self.value(v) {
            [x] => Ok(*x),
            _ => Err(Error::NonScalarLoss(self.shape(v).to_vec())),
        }
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    /// Differentiable free input whose gradient is read from [`Gradients`].
    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Brings a stored parameter onto the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.store_id(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Param,
            t.requires_grad(),
        );
        self.params.insert(key, v);
        v
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        make: impl FnOnce(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let plan = Broadcast::new(name, self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; numel(&plan.out)];
        {
            let (x, y) = (self.value(a), self.value(b));
            plan.for_each(|o, i, j| out[o] = f(x[i], y[j]));
        }
        let shape = plan.out.clone();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, out, make(a, b, plan), ng))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let data = self.value(x).iter().map(|v| v * c).collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.ng(x));
        self.push(shape, data, Op::Scale(x, c), ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Var {
        let data = self.value(x).iter().map(|v| v + c).collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.ng(x));
        self.push(shape, data, Op::AddScalar(x), ng)
    }

    /// Matrix product over the last two axes.
    ///
    /// `a: [..., m, k]` times either a shared `b: [k, n]` or a batched
    /// `b: [..., k, n]` with the same leading dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_mismatch("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(shape_mismatch("matmul", &sa, &sb));
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != *lead {
            return Err(shape_mismatch("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (x, y) = (self.value(a), self.value(b));
            if shared_b {
                kernels::gemm_nn(x, y, &mut out, batch * m, k, n);
            } else {
                for i in 0..batch {
                    kernels::gemm_nn(
                        &x[i * m * k..(i + 1) * m * k],
                        &y[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                shared_b,
                m,
                k,
                n,
            },
            ng,
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(shape_mismatch("permute", &shape, axes));
        }
        let in_strides = kernels::strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let total = numel(&shape);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; shape.len()];
        let mut src = 0usize;
        for _ in 0..total {
            map.push(src);
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                src += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                src -= strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        let data = {
            let v = self.value(x);
            map.iter().map(|&i| v[i]).collect()
        };
        let ng = self.ng(x);
        Ok(self.push(out_shape, data, Op::Permute(x, map), ng))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(shape_mismatch("transpose", self.shape(x), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).len() {
            return Err(shape_mismatch("reshape", self.shape(x), &shape));
        }
        let data = self.value(x).to_vec();
        let ng = self.ng(x);
        Ok(self.push(shape, data, Op::Reshape(x), ng))
    }

    /// Concatenation along the last axis; leading dims must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_mismatch("concat", &sa, &sb));
        }
        let (na, nb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = numel(&sa[..sa.len() - 1]);
        let mut out = Vec::with_capacity(rows * (na + nb));
        {
            let (x, y) = (self.value(a), self.value(b));
            for r in 0..rows {
                out.extend_from_slice(&x[r * na..(r + 1) * na]);
                out.extend_from_slice(&y[r * nb..(r + 1) * nb]);
            }
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = na + nb;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, out, Op::Concat { a, b, na, nb }, ng))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_mismatch("narrow", &shape, &[axis, start, len]));
        }
        let axis_len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let outer = numel(&shape[..axis]);
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let v = self.value(x);
            for o in 0..outer {
                let base = o * axis_len * inner + start * inner;
                out.extend_from_slice(&v[base..base + len * inner]);
            }
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(
            new_shape,
            out,
            Op::Narrow {
                x,
                axis_len,
                start,
                len,
                inner,
            },
            ng,
        ))
    }

    /// Row lookup: `table: [V, w]`, result `[ids.len(), w]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(shape_mismatch("gather_rows", &shape, &[]));
        }
        let (rows, width) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: rows });
        }
        let mut out = Vec::with_capacity(ids.len() * width);
        {
            let v = self.value(table);
            for &i in ids {
                out.extend_from_slice(&v[i * width..(i + 1) * width]);
            }
        }
        let ng = self.ng(table);
        Ok(self.push(
            vec![ids.len(), width],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                width,
            },
            ng,
        ))
    }

    /// Sum of all elements, accumulated in `f64`; result has shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|&v| f64::from(v)).sum();
        let ng = self.ng(x);
        self.push(vec![1], vec![s as f32], Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f32)
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_mismatch("sum_axis", &shape, &[axis]));
        }
        let axis_len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let outer = numel(&shape[..axis]);
        let mut out = vec![0f32; outer * inner];
        {
            let v = self.value(x);
            for o in 0..outer {
                for i in 0..inner {
                    let mut acc = 0f64;
                    for a in 0..axis_len {
                        acc += f64::from(v[(o * axis_len + a) * inner + i]);
                    }
                    out[o * inner + i] = acc as f32;
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let ng = self.ng(x);
        Ok(self.push(new_shape, out, Op::SumAxis { x, axis_len, inner }, ng))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let data = self.value(x).iter().map(|&v| f(v)).collect();
        let (shape, ng) = (self.shape(x).to_vec(), self.ng(x));
        self.push(shape, data, op, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| gelu(v).0, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f32::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f32::ln, Op::Ln(x))
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0).sqrt(), Op::Sqrt(x))
    }

    fn rowwise(&mut self, x: Var, f: impl Fn(&[f32], &mut [f32]), op: Op) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&1);
        let mut out = vec![0f32; self.value(x).len()];
        {
            let v = self.value(x);
            for (src, dst) in v.chunks(n).zip(out.chunks_mut(n)) {
                f(src, dst);
            }
        }
        let ng = self.ng(x);
        self.push(shape, out, op, ng)
    }

    /// Softmax over the last axis. Entries equal to `-inf` receive zero weight.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.rowwise(x, softmax_row, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        self.rowwise(
            x,
            |src, dst| {
                let max = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let lse = max + src.iter().map(|&v| f64::from((v - max).exp())).sum::<f64>().ln() as f32;
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s - lse;
                }
            },
            Op::LogSoftmax(x),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&0);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(shape_mismatch("layer_norm", &shape, self.shape(gamma)));
        }
        let rows = self.value(x).len() / n.max(1);
        let mut xhat = vec![0f32; rows * n];
        let mut rstd = vec![0f32; rows];
        let mut out = vec![0f32; rows * n];
        {
            let (v, g, b) = (self.value(x), self.value(gamma), self.value(beta));
            for r in 0..rows {
                let row = &v[r * n..(r + 1) * n];
                let mean = row.iter().map(|&a| f64::from(a)).sum::<f64>() / n as f64;
                let var = row.iter().map(|&a| (f64::from(a) - mean).powi(2)).sum::<f64>() / n as f64;
                let rs = 1.0 / (var + f64::from(LAYER_NORM_EPS)).sqrt();
                rstd[r] = rs as f32;
                for j in 0..n {
                    let h = ((f64::from(row[j]) - mean) * rs) as f32;
                    xhat[r * n + j] = h;
                    out[r * n + j] = h * g[j] + b[j];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Same-length 1-D cross-correlation along the sequence axis.
    ///
    /// `x: [B, L, C_in]`, `w: [C_out, C_in, k]` with odd `k`, `b: [C_out]`;
    /// the input is zero-padded by `(k − 1)/2` on both sides.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] || sb != [sw[0]] {
            return Err(shape_mismatch("conv1d", &sx, &sw));
        }
        let (batch, len, cin) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(format!("conv1d kernel size {k} must be odd")));
        }
        let pad = (k - 1) / 2;
        // Per-tap weight blocks [C_in, C_out] so every tap is one row-times-matrix product.
        let taps = conv_taps(self.value(w), cout, cin, k);
        let mut out = vec![0f32; batch * len * cout];
        {
            let (xv, bv) = (self.value(x), self.value(b));
            for bi in 0..batch {
                for l in 0..len {
                    let o = &mut out[(bi * len + l) * cout..(bi * len + l + 1) * cout];
                    o.copy_from_slice(bv);
                    for t in 0..k {
                        let Some(src) = (l + t).checked_sub(pad).filter(|&s| s < len) else {
                            continue;
                        };
                        let row = &xv[(bi * len + src) * cin..(bi * len + src + 1) * cin];
                        kernels::gemm_nn(row, &taps[t * cin * cout..(t + 1) * cin * cout], o, 1, cin, cout);
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            vec![batch, len, cout],
            out,
            Op::Conv1d {
                x,
                w,
                b,
                batch,
                len,
                cin,
                cout,
                k,
            },
            ng,
        ))
    }

    /// Hard threshold `I(p > θ)` with a straight-through backward pass.
    ///
    /// Upstream gradients reach `p` unchanged. `θ` (a one-element tensor)
    /// receives the gradient of the surrogate `σ((p − θ)/0.1)` summed over
    /// elements. On a [`Graph::relaxed`] tape the forward value is the
    /// surrogate itself and both gradients are exact.
    pub fn ste_threshold(&mut self, p: Var, theta: Var) -> Result<Var> {
        if self.value(theta).len() != 1 {
            return Err(shape_mismatch("ste_threshold", self.shape(p), self.shape(theta)));
        }
        let th = self.value(theta)[0];
        let relaxed = self.relax_ste;
        let data = self
            .value(p)
            .iter()
            .map(|&v| {
                if relaxed {
                    sigmoid((v - th) / STE_SURROGATE_TEMPERATURE)
                } else if v > th {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let shape = self.shape(p).to_vec();
        let ng = self.ng(p) || self.ng(theta);
        Ok(self.push(shape, data, Op::Ste { p, theta, relaxed }, ng))
    }

    /// Mean binary cross-entropy of probabilities `p` against `target`,
    /// with `p` clamped to `[1e-7, 1 − 1e-7]`.
    pub fn bce(&mut self, p: Var, target: &[f32]) -> Result<Var> {
        if self.value(p).len() != target.len() {
            return Err(shape_mismatch("bce", self.shape(p), &[target.len()]));
        }
        let n = target.len().max(1) as f64;
        let loss = self
            .value(p)
            .iter()
            .zip(target)
            .map(|(&pv, &y)| {
                let q = f64::from(pv.clamp(BCE_EPS, 1.0 - BCE_EPS));
                let y = f64::from(y);
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / n;
        let ng = self.ng(p);
        Ok(self.push(
            vec![1],
            vec![loss as f32],
            Op::Bce {
                p,
                target: target.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every parameter of `store` that
    /// reached the loss and has `requires_grad` accumulates its gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        self.accumulate_into(&grads, store);
        Ok(grads)
    }

    /// Adds parameter gradients from `grads` into `store`.
    pub fn accumulate_into(&self, grads: &Gradients, store: &mut ParamStore) {
        for (&(sid, id), &v) in &self.params {
            if sid != store.store_id() {
                continue;
            }
            if let Some(g) = grads.get(v) {
                let t = store.get_mut(id);
                if t.requires_grad() {
                    t.accumulate_grad(g).expect("parameter shape is fixed");
                }
            }
        }
    }

    /// Reverse sweep without touching any store.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.data.len() != 1 {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        if ln.needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let out = &node.data;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b, plan) | Op::Sub(a, b, plan) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    plan.for_each(|o, ia, _| ga[ia] += g[o]);
                }
                if let Some(gb) = slot(&self.nodes, grads, *b) {
                    plan.for_each(|o, _, ib| gb[ib] += sign * g[o]);
                }
            }
            Op::Mul(a, b, plan) => {
                let (va, vb) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                if let Some(ga) = slot(&self.nodes, grads, *a) {
                    plan.for_each(|o, ia, ib| ga[ia] += g[o] * vb[ib]);
                }
                if let Some(gb) = slot(&self.nodes, grads, *b) {
                    plan.for_each(|o, ia, ib| gb[ib] += g[o] * va[ia]);
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &u)| *d += c * u);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &u)| *d += u);
                }
            }
            &Op::MatMul {
                a,
                b,
                batch,
                shared_b,
                m,
                k,
                n,
            } => {
                let (va, vb) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                if let Some(ga) = slot(&self.nodes, grads, a) {
                    if shared_b {
                        kernels::gemm_nt(g, vb, ga, batch * m, n, k);
                    } else {
                        for t in 0..batch {
                            kernels::gemm_nt(
                                &g[t * m * n..(t + 1) * m * n],
                                &vb[t * k * n..(t + 1) * k * n],
                                &mut ga[t * m * k..(t + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                }
                if let Some(gb) = slot(&self.nodes, grads, b) {
                    if shared_b {
                        kernels::gemm_tn(va, g, gb, batch * m, k, n);
                    } else {
                        for t in 0..batch {
                            kernels::gemm_tn(
                                &va[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut gb[t * k * n..(t + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
            }
            Op::Permute(x, map) => {
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    for (o, &src) in map.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
            }
            &Op::Concat { a, b, na, nb } => {
                let rows = g.len() / (na + nb);
                if let Some(ga) = slot(&self.nodes, grads, a) {
                    for r in 0..rows {
                        for j in 0..na {
                            ga[r * na + j] += g[r * (na + nb) + j];
                        }
                    }
                }
                if let Some(gb) = slot(&self.nodes, grads, b) {
                    for r in 0..rows {
                        for j in 0..nb {
                            gb[r * nb + j] += g[r * (na + nb) + na + j];
                        }
                    }
                }
            }
            &Op::Narrow {
                x,
                axis_len,
                start,
                len,
                inner,
            } => {
                if let Some(gx) = slot(&self.nodes, grads, x) {
                    let outer = g.len() / (len * inner);
                    for o in 0..outer {
                        let dst = o * axis_len * inner + start * inner;
                        for j in 0..len * inner {
                            gx[dst + j] += g[o * len * inner + j];
                        }
                    }
                }
            }
            Op::Gather { table, ids, width } => {
                if let Some(gt) = slot(&self.nodes, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..*width {
                            gt[id * width + j] += g[r * width + j];
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::SumAxis { x, axis_len, inner } => {
                if let Some(gx) = slot(&self.nodes, grads, x) {
                    let outer = g.len() / inner;
                    for o in 0..outer {
                        for a in 0..axis_len {
                            for j in 0..inner {
                                gx[(o * axis_len + a) * inner + j] += g[o * inner + j];
                            }
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    for ((d, &u), &y) in gx.iter_mut().zip(g).zip(out) {
                        *d += u * y * (1.0 - y);
                    }
                }
            }
            Op::Softplus(x) => {
                let vx = &self.nodes[x.0].data;
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    for ((d, &u), &v) in gx.iter_mut().zip(g).zip(vx) {
                        *d += u * sigmoid(v);
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = &self.nodes[x.0].data;
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    for ((d, &u), &v) in gx.iter_mut().zip(g).zip(vx) {
                        *d += u * gelu(v).1;
                    }
                }
            }
            Op::Relu(x) => {
                let vx = &self.nodes[x.0].data;
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    for ((d, &u), &v) in gx.iter_mut().zip(g).zip(vx) {
                        if v > 0.0 {
                            *d += u;
                        }
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    for ((d, &u), &y) in gx.iter_mut().zip(g).zip(out) {
                        *d += u * y;
                    }
                }
            }
            Op::Ln(x) => {
                let vx = &self.nodes[x.0].data;
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    for ((d, &u), &v) in gx.iter_mut().zip(g).zip(vx) {
                        *d += u / v;
                    }
                }
            }
            Op::Sqrt(x) => {
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    for ((d, &u), &y) in gx.iter_mut().zip(g).zip(out) {
                        if y > 0.0 {
                            *d += u / (2.0 * y);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    let n = *node.shape.last().unwrap_or(&1);
                    for ((d, u), y) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let s: f32 = u.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[j] += y[j] * (u[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    let n = *node.shape.last().unwrap_or(&1);
                    for ((d, u), y) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let s: f32 = u.iter().sum();
                        for j in 0..n {
                            d[j] += u[j] - y[j].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.nodes[gamma.0].data.len();
                let gv = &self.nodes[gamma.0].data;
                if let Some(gg) = slot(&self.nodes, grads, *gamma) {
                    for (u, h) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += u[j] * h[j];
                        }
                    }
                }
                if let Some(gb) = slot(&self.nodes, grads, *beta) {
                    for u in g.chunks(n) {
                        for j in 0..n {
                            gb[j] += u[j];
                        }
                    }
                }
                if let Some(gx) = slot(&self.nodes, grads, *x) {
                    for (r, ((d, u), h)) in gx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                        let mut m1 = 0f64;
                        let mut m2 = 0f64;
                        for j in 0..n {
                            let dh = f64::from(u[j] * gv[j]);
                            m1 += dh;
                            m2 += dh * f64::from(h[j]);
                        }
                        let (m1, m2) = ((m1 / n as f64) as f32, (m2 / n as f64) as f32);
                        for j in 0..n {
                            d[j] += rstd[r] * (u[j] * gv[j] - m1 - h[j] * m2);
                        }
                    }
                }
            }
            &Op::Conv1d {
                x,
                w,
                b,
                batch,
                len,
                cin,
                cout,
                k,
            } => {
                let pad = (k - 1) / 2;
                if let Some(gb) = slot(&self.nodes, grads, b) {
                    for row in g.chunks(cout) {
                        gb.iter_mut().zip(row).for_each(|(d, &u)| *d += u);
                    }
                }
                let xv = &self.nodes[x.0].data;
                if self.nodes[w.0].needs_grad {
                    // Accumulate in tap layout [k][C_in][C_out], then scatter to [C_out][C_in][k].
                    let mut gt = vec![0f32; k * cin * cout];
                    for bi in 0..batch {
                        for l in 0..len {
                            let u = &g[(bi * len + l) * cout..(bi * len + l + 1) * cout];
                            for t in 0..k {
                                let Some(src) = (l + t).checked_sub(pad).filter(|&s| s < len) else {
                                    continue;
                                };
                                let row = &xv[(bi * len + src) * cin..(bi * len + src + 1) * cin];
                                kernels::gemm_tn(row, u, &mut gt[t * cin * cout..(t + 1) * cin * cout], 1, cin, cout);
                            }
                        }
                    }
                    let gw = slot(&self.nodes, grads, w).expect("needs_grad checked");
                    for o in 0..cout {
                        for c in 0..cin {
                            for t in 0..k {
                                gw[(o * cin + c) * k + t] += gt[(t * cin + c) * cout + o];
                            }
                        }
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let taps = conv_taps(&self.nodes[w.0].data, cout, cin, k);
                    let gx = slot(&self.nodes, grads, x).expect("needs_grad checked");
                    for bi in 0..batch {
                        for l in 0..len {
                            let u = &g[(bi * len + l) * cout..(bi * len + l + 1) * cout];
                            for t in 0..k {
                                let Some(src) = (l + t).checked_sub(pad).filter(|&s| s < len) else {
                                    continue;
                                };
                                let d = &mut gx[(bi * len + src) * cin..(bi * len + src + 1) * cin];
                                kernels::gemm_nt(u, &taps[t * cin * cout..(t + 1) * cin * cout], d, 1, cout, cin);
                            }
                        }
                    }
                }
            }
            &Op::Ste { p, theta, relaxed } => {
                let th = self.nodes[theta.0].data[0];
                let pv = &self.nodes[p.0].data;
                let t = STE_SURROGATE_TEMPERATURE;
                let dsur = |v: f32| {
                    let s = sigmoid((v - th) / t);
                    s * (1.0 - s) / t
                };
                if let Some(gp) = slot(&self.nodes, grads, p) {
                    for ((d, &u), &v) in gp.iter_mut().zip(g).zip(pv) {
                        *d += if relaxed { u * dsur(v) } else { u };
                    }
                }
                if let Some(gth) = slot(&self.nodes, grads, theta) {
                    let s: f64 = g.iter().zip(pv).map(|(&u, &v)| f64::from(u * dsur(v))).sum();
                    gth[0] -= s as f32;
                }
            }
            Op::Bce { p, target } => {
                let pv = &self.nodes[p.0].data;
                let n = target.len().max(1) as f32;
                if let Some(gp) = slot(&self.nodes, grads, *p) {
                    for ((d, &v), &y) in gp.iter_mut().zip(pv).zip(target) {
                        if v > BCE_EPS && v < 1.0 - BCE_EPS {
                            *d += g[0] * (v - y) / (v * (1.0 - v)) / n;
                        }
                    }
                }
            }
        }
    }
}

/// Lazily allocated gradient buffer of an input that needs one.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f32>>], v: Var) -> Option<&'a mut Vec<f32>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    let len = node.data.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn conv_taps(w: &[f32], cout: usize, cin: usize, k: usize) -> Vec<f32> {
    let mut taps = vec![0f32; k * cin * cout];
    for o in 0..cout {
        for c in 0..cin {
            for t in 0..k {
                taps[(t * cin + c) * cout + o] = w[(o * cin + c) * k + t];
            }
        }
    }
    taps
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// GELU value and derivative.
fn gelu(x: f32) -> (f32, f32) {
    const C: f32 = 0.797_884_6; // sqrt(2/π)
    let u = C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044_715 * x * x);
    (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

fn softmax_row(src: &[f32], dst: &mut [f32]) {
    let max = src.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0f64;
    for (d, &s) in dst.iter_mut().zip(src) {
        let e = if s == f32::NEG_INFINITY { 0.0 } else { (s - max).exp() };
        *d = e;
        total += f64::from(e);
    }
    let inv = (1.0 / total) as f32;
    dst.iter_mut().for_each(|d| *d *= inv);
}
