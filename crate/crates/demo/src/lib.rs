//! wasm-bindgen exports for the static page in `www/`.
//!
//! Every export returns a JSON string. The plain-Rust functions behind them
//! are public so they can be tested natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use boolattn::bias::{gaussian_weight, relative_positions};
use boolattn::corpus::{generate_corpus, label_cues, operators_of, CorpusConfig, Vocab};
use boolattn::encoder::{Batch, CueSource, Encoder, EncoderConfig, ForwardOptions, GateInput};
use boolattn::experiment::{pretrained_encoder, ExperimentConfig};
use boolattn::numerics::{Graph, Rng, Tensor};
use boolattn::operators::{OperatorKind, NUM_OPERATORS};
use boolattn::pretrain::PretrainMetrics;
use boolattn::scope::mutualize;

type DemoResult<T> = std::result::Result<T, String>;

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("demo output serializes")
}

fn operator(name: &str) -> DemoResult<OperatorKind> {
    name.parse().map_err(|e: boolattn::Error| e.to_string())
}

fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

fn cue_positions(labels: &[Option<OperatorKind>], op: OperatorKind) -> Vec<usize> {
    labels.iter().enumerate().filter(|(_, l)| **l == Some(op)).map(|(i, _)| i).collect()
}

#[derive(Debug, Serialize)]
pub struct Curve {
    pub words: Vec<String>,
    pub cues: Vec<bool>,
    pub offsets: Vec<f32>,
    pub weights: Vec<f32>,
}

/// Offsets to the nearest `op` cue and their Gaussian weights.
pub fn position_curve(text: &str, op: &str, window: usize, sigma: f32) -> DemoResult<Curve> {
    let op = operator(op)?;
    if sigma <= 0.0 {
        return Err("sigma must be positive".into());
    }
    let ws = words(text);
    let labels = label_cues(&ws);
    let cues = cue_positions(&labels, op);
    let r = relative_positions(std::slice::from_ref(&cues), ws.len(), op, window);
    let mut g = Graph::new();
    let rv = g.constant(r.clone());
    let log_sigma = g.constant(Tensor::full([1], sigma.ln()));
    let w = gaussian_weight(&mut g, rv, log_sigma).map_err(|e| e.to_string())?;
    Ok(Curve {
        words: ws.iter().map(|w| w.to_string()).collect(),
        cues: (0..ws.len()).map(|i| cues.contains(&i)).collect(),
        offsets: r.data().to_vec(),
        weights: g.value(w).to_vec(),
    })
}

/// `[L, L]` mask of query-key pairs an operator may bias, from a 0/1 scope.
pub fn scope_pairs(scope: &[u8], op: &str) -> DemoResult<Vec<Vec<f32>>> {
    let op = operator(op)?;
    let len = scope.len();
    if len == 0 {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let hard = g.constant(Tensor::new(vec![1, len], scope.iter().map(|&s| (s != 0) as u8 as f32).collect()).map_err(|e| e.to_string())?);
    let m = mutualize(&mut g, hard, 1, op).map_err(|e| e.to_string())?;
    let v = g.value(m);
    // NOT yields one column per query; broadcast it over keys.
    Ok((0..len)
        .map(|i| (0..len).map(|j| if op.is_pairwise() { v[i * len + j] } else { v[j] }).collect())
        .collect())
}

#[derive(Debug, Serialize)]
pub struct Heatmap {
    pub words: Vec<String>,
    /// `[and, or, not]` oracle gates read off the cue words.
    pub gates: [bool; NUM_OPERATORS],
    /// Head-averaged attention, `[L, L]`, gates off.
    pub off: Vec<Vec<f32>>,
    /// Same with oracle gates and cue positions.
    pub on: Vec<Vec<f32>>,
}

#[derive(Debug, Serialize)]
pub struct ModelInfo {
    pub seed: u64,
    pub pretrained: bool,
    pub metrics: Option<PretrainMetrics>,
    pub vocabulary: Vec<String>,
}

/// A small encoder whose attention can be inspected with gates on and off.
#[wasm_bindgen]
pub struct Model {
    encoder: Encoder,
    vocab: Vocab,
    seed: u64,
    metrics: Option<PretrainMetrics>,
}

impl Model {
    pub fn create(seed: u64) -> DemoResult<Self> {
        let vocab = Vocab::default();
        let config = EncoderConfig { vocab_size: vocab.len(), ..EncoderConfig::default() };
        let encoder = Encoder::new(config, &mut Rng::new(seed)).map_err(|e| e.to_string())?;
        Ok(Self { encoder, vocab, seed, metrics: None })
    }

    /// Runs the pretraining stage on `examples` synthetic queries.
    pub fn run_pretraining(&mut self, examples: usize) -> DemoResult<PretrainMetrics> {
        let config = ExperimentConfig {
            encoder: self.encoder.config,
            pretrain_examples: examples,
            pretrain_eval_examples: 100,
            ..ExperimentConfig::default()
        };
        let (enc, metrics) = pretrained_encoder(&config, &self.vocab, &mut Rng::new(self.seed).fork(2)).map_err(|e| e.to_string())?;
        self.encoder = enc;
        self.metrics = Some(metrics);
        Ok(metrics)
    }

    pub fn info(&self) -> ModelInfo {
        let mut vocabulary: Vec<String> = (1..self.vocab.len()).map(|i| self.vocab.word(i).to_string()).collect();
        vocabulary.sort();
        ModelInfo { seed: self.seed, pretrained: self.metrics.is_some(), metrics: self.metrics, vocabulary }
    }

    /// First-layer attention for `text`.
    pub fn heatmap(&self, text: &str) -> DemoResult<Heatmap> {
        let ids = self.vocab.encode(text).map_err(|e| e.to_string())?;
        if ids.is_empty() {
            return Err("empty query".into());
        }
        let ws = words(text);
        let labels = label_cues(&ws);
        let gates = operators_of(&labels);
        let cues: Vec<Vec<Vec<usize>>> = OperatorKind::ALL.iter().map(|&op| vec![cue_positions(&labels, op)]).collect();
        let batch = Batch::new(&[ids]).map_err(|e| e.to_string())?;
        let attention = |opts: ForwardOptions<'_>| -> DemoResult<Vec<Vec<f32>>> {
            let mut g = Graph::new();
            let out = self.encoder.forward(&mut g, &batch, opts).map_err(|e| e.to_string())?;
            let w = g.value(out.layers[0].attention);
            let (heads, len) = (self.encoder.config.heads, ws.len());
            Ok((0..len)
                .map(|i| (0..len).map(|j| (0..heads).map(|h| w[(h * len + i) * len + j]).sum::<f32>() / heads as f32).collect())
                .collect())
        };
        let off = attention(ForwardOptions::eval(GateInput::Off))?;
        let on = attention(ForwardOptions { gates: GateInput::Oracle(vec![gates]), cues: CueSource::Given(cues), rng: None })?;
        Ok(Heatmap { words: ws.iter().map(|w| w.to_string()).collect(), gates, off, on })
    }
}

/// Some valid queries for the page's example list.
pub fn sample_queries(seed: u64, n: usize) -> DemoResult<Vec<String>> {
    let config = CorpusConfig { num_documents: 50, num_queries: n.max(3), val_queries: 1, test_queries: 1 };
    let corpus = generate_corpus(&config, &mut Rng::new(seed)).map_err(|e| e.to_string())?;
    Ok(corpus.queries.into_iter().take(n).map(|q| q.text).collect())
}

fn js<T: Serialize>(r: DemoResult<T>) -> std::result::Result<String, JsError> {
    r.map(|v| to_json(&v)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = positionCurve)]
pub fn position_curve_js(text: &str, op: &str, window: usize, sigma: f32) -> std::result::Result<String, JsError> {
    js(position_curve(text, op, window, sigma))
}

#[wasm_bindgen(js_name = scopePairs)]
pub fn scope_pairs_js(scope: &[u8], op: &str) -> std::result::Result<String, JsError> {
    js(scope_pairs(scope, op))
}

#[wasm_bindgen(js_name = sampleQueries)]
pub fn sample_queries_js(seed: u32, n: usize) -> std::result::Result<String, JsError> {
    js(sample_queries(seed as u64, n))
}

#[wasm_bindgen]
impl Model {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> std::result::Result<Model, JsError> {
        Self::create(seed as u64).map_err(|e| JsError::new(&e))
    }

    pub fn pretrain(&mut self, examples: usize) -> std::result::Result<String, JsError> {
        js(self.run_pretraining(examples))
    }

    #[wasm_bindgen(js_name = info)]
    pub fn info_js(&self) -> String {
        to_json(&self.info())
    }

    pub fn attention(&self, text: &str) -> std::result::Result<String, JsError> {
        js(self.heatmap(text))
    }
}
