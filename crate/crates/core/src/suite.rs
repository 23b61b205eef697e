//! Finite-difference check of every Boolean-attention parameter through a full encoder layer.

use serde::Serialize;

use crate::encoder::{is_boolattn_param, Batch, CueSource, Encoder, EncoderConfig, ForwardOptions, GateInput};
use crate::error::Result;
use crate::numerics::gradcheck::{self, CheckOutcome, Tolerance};
use crate::numerics::Rng;

/// `base` shrunk until central differences over every element are cheap, B=1, L=4.
pub fn suite_config(base: EncoderConfig) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 10,
        hidden: 4,
        layers: 1,
        heads: 2,
        head_dim: 2,
        ffn_dim: 4,
        max_len: 4,
        operator_dim: 3,
        scope_channels: 2,
        bias_ffn_dim: 3,
        gate_hidden: 3,
        embedding_init: 0.5,
        boolattn: true,
        ..base
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteLine {
    /// `oracle` or `learned`.
    pub mode: &'static str,
    pub param: String,
    pub elements: usize,
    pub failures: usize,
    pub max_rel_err: f32,
}

impl SuiteLine {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Runs with all oracle gates open and with learned gates. The gate classifier
/// only receives gradient in learned mode, so it is skipped under oracle gates.
/// Scope thresholds are checked through the sigmoid surrogate.
pub fn gradient_suite(config: EncoderConfig, seed: u64, tolerance: Tolerance) -> Result<Vec<SuiteLine>> {
    let mut enc = Encoder::new(config, &mut Rng::new(seed))?;
    let len = config.max_len.min(4);
    let tokens: Vec<usize> = (0..len).map(|i| 1 + (i * 3 + seed as usize) % (config.vocab_size - 1)).collect();
    let batch = Batch::new(&[tokens])?;
    let at = |i: usize| vec![vec![i.min(len - 1)]];
    let cues = CueSource::Given(vec![at(1), at(2), at(1)]);
    let ids: Vec<_> = enc.store.ids().filter(|&id| is_boolattn_param(enc.store.name(id))).collect();
    let mut store = std::mem::take(&mut enc.store);
    let mut lines = Vec::new();
    for (mode, gates) in [("oracle", GateInput::Oracle(vec![[true; 3]])), ("learned", GateInput::Learned)] {
        let outcomes = gradcheck::check_params(&mut store, &ids, true, tolerance, |g, store| {
            let opts = ForwardOptions { gates: gates.clone(), cues: cues.clone(), rng: None };
            let out = enc.forward_with(store, g, &batch, opts)?;
            gradcheck::probe(g, out.hidden, seed.wrapping_add(3))
        })?;
        for o in outcomes {
            if mode == "oracle" && o.name.contains("boolattn.gate") {
                continue;
            }
            lines.push(line(mode, o));
        }
    }
    Ok(lines)
}

fn line(mode: &'static str, o: CheckOutcome) -> SuiteLine {
    SuiteLine { mode, param: o.name, elements: o.elements, failures: o.failures, max_rel_err: o.max_rel_err }
}
