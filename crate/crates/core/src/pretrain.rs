//! Cue, gate and triplet pretraining of the Boolean modules on frozen layers.

use serde::{Deserialize, Serialize};

use crate::corpus::{label_cues, operators_of, render, sample_attributes, template_slots, Vocab, CUE_PHRASES, NUM_TEMPLATES};
use crate::cue::CUE_THRESHOLD;
use crate::encoder::{Batch, CueSource, Encoder, ForwardOptions, GateInput};
use crate::error::{shape_mismatch, Error, Result};
use crate::numerics::{Graph, Rng, Var};
use crate::operators::{OperatorKind, NUM_OPERATORS};
use crate::optim::{AdamW, AdamWConfig};

/// Mean BCE of cue probabilities `[B, L]` against `{0, 1}` labels.
pub fn cue_loss(g: &mut Graph, p: Var, y: &[f32]) -> Result<Var> {
    if g.value(p).len() != y.len() {
        return Err(shape_mismatch("cue_loss", g.shape(p), &[y.len()]));
    }
    g.bce(p, y)
}

/// Mean BCE of gate probabilities `[B, E]` against operator labels.
pub fn gate_loss(g: &mut Graph, p: Var, y: &[f32]) -> Result<Var> {
    if g.value(p).len() != y.len() {
        return Err(shape_mismatch("gate_loss", g.shape(p), &[y.len()]));
    }
    g.bce(p, y)
}

/// [`gate_loss`] evaluated from logits, `softplus(z) − y·z`. Equal to the
/// probability form wherever the latter's clamp is inactive, and keeps a
/// gradient when a saturated gate is wrong.
pub fn gate_loss_from_logits(g: &mut Graph, z: Var, y: &[f32]) -> Result<Var> {
    if g.value(z).len() != y.len() {
        return Err(shape_mismatch("gate_loss", g.shape(z), &[y.len()]));
    }
    let yv = g.constant_from(g.shape(z).to_vec(), y.to_vec())?;
    let sp = g.softplus(z);
    let yz = g.mul(yv, z)?;
    let l = g.sub(sp, yz)?;
    Ok(g.mean(l))
}

fn euclidean(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    let s = g.sum_axis(sq, 1)?;
    Ok(g.sqrt(s))
}

/// Mean over rows of `max(0, ‖a − p‖ − ‖a − n‖ + margin)` for `[B, d]` inputs.
pub fn triplet_loss(g: &mut Graph, anchor: Var, positive: Var, negative: Var, margin: f32) -> Result<Var> {
    let dp = euclidean(g, anchor, positive)?;
    let dn = euclidean(g, anchor, negative)?;
    let diff = g.sub(dp, dn)?;
    let diff = g.add_scalar(diff, margin);
    let hinge = g.relu(diff);
    Ok(g.mean(hinge))
}

/// `L_cue + L_gate + α·L_triplet`.
pub fn pretrain_objective(g: &mut Graph, l_cue: Var, l_gate: Var, l_triplet: Var, alpha: f32) -> Result<Var> {
    let s = g.add(l_cue, l_gate)?;
    let t = g.scale(l_triplet, alpha);
    g.add(s, t)
}

/// A query with cue and operator supervision plus a triplet partner pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PretrainExample {
    pub tokens: Vec<usize>,
    /// `cue_labels[op][t]`.
    pub cue_labels: [Vec<bool>; NUM_OPERATORS],
    pub operator_labels: [bool; NUM_OPERATORS],
    /// Same meaning, different cue surface forms.
    pub positive: Vec<usize>,
    /// Same attributes, different operators.
    pub negative: Vec<usize>,
}

fn cue_labels_of(words: &[&str]) -> [Vec<bool>; NUM_OPERATORS] {
    let l = label_cues(words);
    std::array::from_fn(|code| l.iter().map(|x| x.map(OperatorKind::code) == Some(code)).collect())
}

impl PretrainExample {
    pub fn from_text(vocab: &Vocab, text: &str, positive: &str, negative: &str) -> Result<Self> {
        let words: Vec<&str> = text.split_whitespace().collect();
        Ok(Self {
            tokens: vocab.encode(text)?,
            cue_labels: cue_labels_of(&words),
            operator_labels: operators_of(&label_cues(&words)),
            positive: vocab.encode(positive)?,
            negative: vocab.encode(negative)?,
        })
    }

    /// Any-operator cue label per token.
    pub fn union_cues(&self) -> Vec<bool> {
        (0..self.tokens.len()).map(|t| self.cue_labels.iter().any(|l| l[t])).collect()
    }
}

/// Replaces each cue phrase by a random different synonym with probability
/// `prob`, then relabels cues by word matching. Operator labels never change.
pub fn augment_text(text: &str, prob: f64, rng: &mut Rng) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    let labels = label_cues(&words);
    let mut out: Vec<String> = Vec::with_capacity(words.len());
    let mut i = 0;
    while i < words.len() {
        let Some(op) = labels[i] else {
            out.push(words[i].to_string());
            i += 1;
            continue;
        };
        let mut j = i;
        // A run of one operator's labels is one phrase only if it matches a phrase exactly.
        let phrase = CUE_PHRASES
            .iter()
            .filter(|(p, o)| *o == op && words[i..].starts_with(&p.split(' ').collect::<Vec<_>>()))
            .map(|(p, _)| *p)
            .max_by_key(|p| p.split(' ').count())
            .unwrap_or(words[i]);
        j += phrase.split(' ').count();
        let alternatives: Vec<&str> = CUE_PHRASES.iter().filter(|(p, o)| *o == op && *p != phrase).map(|(p, _)| *p).collect();
        let replaced = if !alternatives.is_empty() && rng.bernoulli(prob) {
            *rng.choose(&alternatives).expect("non-empty")
        } else {
            phrase
        };
        out.extend(replaced.split(' ').map(str::to_string));
        i = j;
    }
    out.join(" ")
}

/// [`augment_text`] applied to the anchor of an example.
pub fn augment_cues(example: &PretrainExample, vocab: &Vocab, prob: f64, rng: &mut Rng) -> Result<PretrainExample> {
    let text = vocab.decode(&example.tokens);
    let augmented = augment_text(&text, prob, rng);
    let words: Vec<&str> = augmented.split_whitespace().collect();
    Ok(PretrainExample {
        tokens: vocab.encode(&augmented)?,
        cue_labels: cue_labels_of(&words),
        operator_labels: example.operator_labels,
        positive: example.positive.clone(),
        negative: example.negative.clone(),
    })
}

/// Swaps every operator word: and↔or, not→and.
fn flip_operators(text: &str) -> String {
    text.split(' ')
        .map(|w| match w {
            "and" => "or",
            "or" => "and",
            "not" => "and",
            other => other,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Random Boolean queries over the synthetic attribute vocabulary.
///
/// Anchors are augmented with probability `augment_prob` per cue; positives
/// always swap cues for synonyms where one exists; negatives flip operators
/// (single-attribute anchors get a different attribute instead).
pub fn generate_pretrain_examples(n: usize, vocab: &Vocab, augment_prob: f64, rng: &mut Rng) -> Result<Vec<PretrainExample>> {
    (0..n)
        .map(|_| {
            let template = rng.below(NUM_TEMPLATES) + 1;
            let attrs = sample_attributes(template_slots(template), rng);
            let base = render(template, &attrs);
            let negative = if template == 1 {
                let mut other = sample_attributes(1, rng);
                while other == attrs {
                    other = sample_attributes(1, rng);
                }
                render(1, &other)
            } else {
                augment_text(&flip_operators(&base), augment_prob, rng)
            };
            let anchor = augment_text(&base, augment_prob, rng);
            let positive = augment_text(&anchor, 1.0, rng);
            PretrainExample::from_text(vocab, &anchor, &positive, &negative)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f32,
    pub margin: f32,
    pub weight_decay: f32,
    pub augment_prob: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { lr: 1e-5, epochs: 1, batch_size: 1, alpha: 0.2, margin: 1.0, weight_decay: 0.01, augment_prob: 0.5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    /// Total objective per step.
    pub losses: Vec<f32>,
}

/// Losses of one pretraining batch built from `examples`: rows are anchors,
/// then positives, then negatives.
pub struct PretrainLosses {
    pub cue: Var,
    pub gate: Var,
    pub triplet: Var,
    pub total: Var,
}

fn labels_for(tokens: &[usize], vocab: &Vocab) -> ([Vec<bool>; NUM_OPERATORS], [bool; NUM_OPERATORS]) {
    let text = vocab.decode(tokens);
    let words: Vec<&str> = text.split_whitespace().collect();
    (cue_labels_of(&words), operators_of(&label_cues(&words)))
}

pub fn pretrain_losses(
    g: &mut Graph,
    encoder: &Encoder,
    examples: &[&PretrainExample],
    vocab: &Vocab,
    config: &PretrainConfig,
    rng: Option<&mut Rng>,
) -> Result<PretrainLosses> {
    let n = examples.len();
    let seqs: Vec<Vec<usize>> = examples
        .iter()
        .map(|e| e.tokens.clone())
        .chain(examples.iter().map(|e| e.positive.clone()))
        .chain(examples.iter().map(|e| e.negative.clone()))
        .collect();
    let batch = Batch::new(&seqs)?;
    let opts = ForwardOptions { gates: GateInput::Learned, cues: CueSource::Predicted, rng };
    let out = encoder.forward(g, &batch, opts)?;
    let cues = out.cues.as_ref().ok_or_else(|| Error::InvalidArgument("pretraining needs Boolean modules".into()))?;
    let gates = out.gates.as_ref().expect("learned gates");

    let mut union = vec![0.0f32; batch.size() * batch.len];
    let mut gate_y = Vec::with_capacity(batch.size() * NUM_OPERATORS);
    for (row, seq) in seqs.iter().enumerate() {
        let (cl, ops) = labels_for(seq, vocab);
        for t in 0..seq.len() {
            if cl.iter().any(|l| l[t]) {
                union[row * batch.len + t] = 1.0;
            }
        }
        gate_y.extend(ops.iter().map(|&b| if b { 1.0 } else { 0.0 }));
    }
    let mut cue_terms = Vec::with_capacity(NUM_OPERATORS);
    for op in OperatorKind::ALL {
        cue_terms.push(cue_loss(g, cues.probs(op), &union)?);
    }
    let mut cue = cue_terms[0];
    for &t in &cue_terms[1..] {
        cue = g.add(cue, t)?;
    }
    let cue = g.scale(cue, 1.0 / NUM_OPERATORS as f32);
    let gate = gate_loss_from_logits(g, gates.scaled_logits.expect("learned logits"), &gate_y)?;
    let a = g.narrow(out.pooled, 0, 0, n)?;
    let p = g.narrow(out.pooled, 0, n, n)?;
    let ng = g.narrow(out.pooled, 0, 2 * n, n)?;
    let triplet = triplet_loss(g, a, p, ng, config.margin)?;
    let total = pretrain_objective(g, cue, gate, triplet, config.alpha)?;
    Ok(PretrainLosses { cue, gate, triplet, total })
}

/// Trains only the Boolean modules and embeddings; every other parameter is
/// frozen for the duration and left bit-identical.
pub fn pretrain(
    encoder: &mut Encoder,
    examples: &[PretrainExample],
    vocab: &Vocab,
    config: &PretrainConfig,
    rng: &mut Rng,
) -> Result<PretrainReport> {
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    encoder.freeze_for_pretraining();
    let mut opt = AdamW::new(
        AdamWConfig { lr: config.lr, weight_decay: config.weight_decay, ..AdamWConfig::default() },
        &encoder.store,
    );
    let mut report = PretrainReport::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let rows: Vec<&PretrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let mut g = Graph::new();
            let losses = pretrain_losses(&mut g, encoder, &rows, vocab, config, Some(&mut *rng))?;
            report.losses.push(g.scalar_value(losses.total)?);
            g.backward(losses.total, &mut encoder.store)?;
            opt.step(&mut encoder.store);
            report.steps += 1;
        }
    }
    encoder.unfreeze();
    Ok(report)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    /// Micro-F1 of every operator's cue map against any-operator cue labels.
    pub cue_f1: f64,
    /// Fraction of correct `(row, operator)` learned gate decisions.
    pub gate_accuracy: f64,
}

pub fn evaluate_pretraining(encoder: &Encoder, examples: &[PretrainExample], batch_size: usize) -> Result<PretrainMetrics> {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    let (mut correct, mut total) = (0usize, 0usize);
    for chunk in examples.chunks(batch_size.max(1)) {
        let seqs: Vec<Vec<usize>> = chunk.iter().map(|e| e.tokens.clone()).collect();
        let batch = Batch::new(&seqs)?;
        let mut g = Graph::new();
        let out = encoder.forward(&mut g, &batch, ForwardOptions::eval(GateInput::Learned))?;
        let cues = out.cues.ok_or_else(|| Error::InvalidArgument("evaluation needs Boolean modules".into()))?;
        let gates = out.gates.expect("learned gates");
        for (row, e) in chunk.iter().enumerate() {
            let truth = e.union_cues();
            for op in OperatorKind::ALL {
                let p = g.value(cues.probs(op));
                for (t, &y) in truth.iter().enumerate() {
                    let pred = p[row * batch.len + t] > CUE_THRESHOLD;
                    match (pred, y) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fneg += 1,
                        _ => {}
                    }
                }
            }
            for k in 0..NUM_OPERATORS {
                correct += usize::from(gates.hard[row][k] == e.operator_labels[k]);
                total += 1;
            }
        }
    }
    let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64 };
    Ok(PretrainMetrics { cue_f1: f1, gate_accuracy: correct as f64 / total.max(1) as f64 })
}
