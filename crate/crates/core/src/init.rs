use crate::error::{shape_mismatch, Error, Result};
use crate::numerics::{ParamId, ParamStore, Rng, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Uniform(f32),
    /// `uniform(±1/√fan_in)`.
    FanIn(usize),
    Const(f32),
}

/// Either creates fresh parameters or re-binds existing ones by name, so one
/// constructor serves both initialization and checkpoint restore.
pub(crate) enum ParamBuilder<'a> {
    Fresh { store: &'a mut ParamStore, rng: &'a mut Rng },
    Bind { store: &'a ParamStore, bound: usize },
}

impl ParamBuilder<'_> {
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        match self {
            ParamBuilder::Fresh { store, rng } => {
                let t = match init {
                    Init::Uniform(a) => Tensor::uniform(shape.to_vec(), -a, a, rng),
                    Init::FanIn(fan_in) => {
                        let a = 1.0 / (fan_in.max(1) as f32).sqrt();
                        Tensor::uniform(shape.to_vec(), -a, a, rng)
                    }
                    Init::Const(v) => Tensor::full(shape.to_vec(), v),
                };
                store.add(name, t)
            }
            ParamBuilder::Bind { store, bound } => {
                let id = store
                    .id_of(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
                if store.get(id).shape() != shape {
                    return Err(shape_mismatch("bind parameter", store.get(id).shape(), shape));
                }
                *bound += 1;
                Ok(id)
            }
        }
    }
}
