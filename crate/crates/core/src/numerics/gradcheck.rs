//! Central-difference verification of analytic gradients.

use crate::error::Result;
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    /// Finite-difference step.
    pub step: f32,
    /// Relative tolerance.
    pub rtol: f32,
    /// Absolute floor: float32 round-off in the forward pass makes tiny
    /// gradients unmeasurable at `step = 1e-3`.
    pub atol: f32,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            step: 1e-3,
            rtol: 1e-2,
            atol: 1e-3,
        }
    }
}

impl Tolerance {
    pub fn accepts(&self, analytic: f32, numeric: f32) -> bool {
        (analytic - numeric).abs() <= self.rtol * analytic.abs().max(numeric.abs()) + self.atol
    }
}

/// Result of checking every element of one tensor.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub elements: usize,
    pub failures: usize,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|)` over elements
    /// whose magnitude exceeds the absolute floor.
    pub max_rel_err: f32,
    pub worst: Option<(usize, f32, f32)>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    fn record(&mut self, tol: &Tolerance, index: usize, analytic: f32, numeric: f32) {
        self.elements += 1;
        let scale = analytic.abs().max(numeric.abs());
        if scale > tol.atol {
            let rel = (analytic - numeric).abs() / scale;
            if rel > self.max_rel_err {
                self.max_rel_err = rel;
                self.worst = Some((index, analytic, numeric));
            }
        }
        if !tol.accepts(analytic, numeric) {
            self.failures += 1;
            if self.worst.is_none() {
                self.worst = Some((index, analytic, numeric));
            }
        }
    }

    fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            elements: 0,
            failures: 0,
            max_rel_err: 0.0,
            worst: None,
        }
    }
}

/// `Σ xᵢ·wᵢ` with fixed pseudo-random weights in `[-1, 1]`, a generic scalar
/// probe for non-scalar outputs whose plain sum would hide gradients
/// (softmax rows, normalized activations).
pub fn probe(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed);
    let w = Tensor::uniform(g.shape(x).to_vec(), -1.0, 1.0, &mut rng);
    let w = g.constant(w);
    let prod = g.mul(x, w)?;
    Ok(g.sum(prod))
}

fn new_graph(relaxed: bool) -> Graph {
    if relaxed {
        Graph::relaxed()
    } else {
        Graph::new()
    }
}

/// Checks d(loss)/d(input) for free input tensors.
pub fn check_inputs(
    inputs: &[Tensor],
    relaxed: bool,
    tol: Tolerance,
    loss: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<Vec<CheckOutcome>> {
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = new_graph(relaxed);
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let l = loss(&mut g, &vars)?;
        Ok(f64::from(g.scalar_value(l)?))
    };
    let mut g = new_graph(relaxed);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let l = loss(&mut g, &vars)?;
    let grads = g.gradients(l)?;
    let mut out = Vec::new();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let mut outcome = CheckOutcome::new(format!("input[{i}]"));
        let analytic = grads.get(*v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + tol.step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - tol.step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = ((plus - minus) / (2.0 * f64::from(tol.step))) as f32;
            outcome.record(&tol, j, analytic[j], numeric);
        }
        out.push(outcome);
    }
    Ok(out)
}

/// Checks d(loss)/d(parameter) for the listed parameters of `store`.
///
/// Existing gradients in `store` are cleared.
pub fn check_params(
    store: &mut ParamStore,
    ids: &[ParamId],
    relaxed: bool,
    tol: Tolerance,
    loss: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> Result<Vec<CheckOutcome>> {
    store.zero_grad();
    let mut g = new_graph(relaxed);
    let l = loss(&mut g, store)?;
    g.backward(l, store)?;
    let analytic: Vec<Vec<f32>> = ids
        .iter()
        .map(|&id| {
            let t = store.get(id);
            t.grad().map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    store.zero_grad();
    let mut out = Vec::new();
    for (&id, analytic) in ids.iter().zip(&analytic) {
        let mut outcome = CheckOutcome::new(store.name(id));
        for j in 0..analytic.len() {
            let orig = store.get(id).data()[j];
            let mut eval = |value: f32| -> Result<f64> {
                store.get_mut(id).data_mut()[j] = value;
                let mut g = new_graph(relaxed);
                let l = loss(&mut g, store)?;
                Ok(f64::from(g.scalar_value(l)?))
            };
            let plus = eval(orig + tol.step)?;
            let minus = eval(orig - tol.step)?;
            store.get_mut(id).data_mut()[j] = orig;
            let numeric = ((plus - minus) / (2.0 * f64::from(tol.step))) as f32;
            outcome.record(&tol, j, analytic[j], numeric);
        }
        out.push(outcome);
    }
    Ok(out)
}
