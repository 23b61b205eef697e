//! Dual-encoder retrieval: contrastive fine-tuning and ranking metrics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Query, Split, SyntheticCorpus, Vocab};
use crate::encoder::{Batch, CueSource, Encoder, EncoderConfig, ForwardOptions, GateInput};
use crate::error::{shape_mismatch, Error, Result};
use crate::numerics::{Graph, ParamStore, Rng, Var};
use crate::operators::OperatorKind;
use crate::optim::{AdamW, AdamWConfig};

/// `−ln(exp(q·p) / (exp(q·p) + Σ exp(q·nᵢ)))`, averaged over rows.
///
/// `q, pos: [B, d]`, `negs: [B, n, d]`.
pub fn contrastive_loss(g: &mut Graph, q: Var, pos: Var, negs: Var) -> Result<Var> {
    let (qs, ns) = (g.shape(q).to_vec(), g.shape(negs).to_vec());
    if qs.len() != 2 || g.shape(pos) != qs.as_slice() || ns.len() != 3 || ns[0] != qs[0] || ns[2] != qs[1] {
        return Err(shape_mismatch("contrastive_loss", &qs, &ns));
    }
    let (b, d) = (qs[0], qs[1]);
    let p3 = g.reshape(pos, vec![b, 1, d])?;
    let nt = g.transpose(negs)?;
    let q3 = g.reshape(q, vec![b, 1, d])?;
    let pos_score = g.mul(q3, p3)?;
    let pos_score = g.sum_axis(pos_score, 2)?;
    let pos_score = g.reshape(pos_score, vec![b, 1, 1])?;
    let neg_scores = g.matmul(q3, nt)?;
    let scores = concat_scores(g, pos_score, neg_scores)?;
    let lp = g.log_softmax(scores);
    let first = g.narrow(lp, 2, 0, 1)?;
    let m = g.mean(first);
    Ok(g.neg(m))
}

fn concat_scores(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    g.concat_last(a, b)
}

/// `|top-K ∩ answers| / |answers|`.
pub fn recall_at_k(ranked: &[usize], answers: &BTreeSet<usize>, k: usize) -> Result<f64> {
    if answers.is_empty() {
        return Err(Error::EmptyAnswerSet);
    }
    let hits = ranked.iter().take(k).filter(|d| answers.contains(d)).count();
    Ok(hits as f64 / answers.len() as f64)
}

/// Reciprocal rank of the first relevant document within the top 10, else 0.
pub fn mrr_at_10(ranked: &[usize], answers: &BTreeSet<usize>) -> f64 {
    ranked
        .iter()
        .take(10)
        .position(|d| answers.contains(d))
        .map_or(0.0, |r| 1.0 / (r + 1) as f64)
}

/// Document ids by descending score, ties broken by id.
pub fn rank(scores: &[f32]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids
}

/// Which gates the query encoder uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateSetting {
    /// Operator labels of each query.
    Oracle,
    Learned,
    /// Plain attention.
    Off,
}

impl std::str::FromStr for GateSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(GateSetting::Oracle),
            "learned" => Ok(GateSetting::Learned),
            "off" => Ok(GateSetting::Off),
            other => Err(Error::InvalidArgument(format!("unknown gate setting `{other}`"))),
        }
    }
}

impl GateSetting {
    pub fn input(self, queries: &[&Query]) -> GateInput {
        match self {
            GateSetting::Oracle => GateInput::Oracle(queries.iter().map(|q| q.gate_labels()).collect()),
            GateSetting::Learned => GateInput::Learned,
            GateSetting::Off => GateInput::Off,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub negatives: usize,
    pub ks: Vec<usize>,
    /// Recall cutoff used to pick the best epoch.
    pub select_k: usize,
    pub gates: GateSetting,
    pub query_max_len: usize,
    pub doc_max_len: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            lr: 3e-4,
            weight_decay: 0.01,
            negatives: 5,
            ks: vec![1, 5, 10, 20, 50],
            select_k: 20,
            gates: GateSetting::Oracle,
            query_max_len: 32,
            doc_max_len: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub queries: usize,
    pub recall: BTreeMap<usize, f64>,
    pub mrr_at_10: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub overall: Breakdown,
    pub per_template: BTreeMap<usize, Breakdown>,
    pub per_operator: BTreeMap<OperatorKind, Breakdown>,
}

impl RetrievalMetrics {
    pub fn recall(&self, k: usize) -> f64 {
        self.overall.recall.get(&k).copied().unwrap_or(0.0)
    }

    pub fn operator_mrr(&self, op: OperatorKind) -> f64 {
        self.per_operator.get(&op).map_or(0.0, |b| b.mrr_at_10)
    }
}

#[derive(Default)]
struct Accumulator {
    n: usize,
    recall: BTreeMap<usize, f64>,
    mrr: f64,
}

impl Accumulator {
    fn add(&mut self, recalls: &[(usize, f64)], mrr: f64) {
        self.n += 1;
        for &(k, r) in recalls {
            *self.recall.entry(k).or_default() += r;
        }
        self.mrr += mrr;
    }

    fn finish(self) -> Breakdown {
        let n = self.n.max(1) as f64;
        Breakdown { queries: self.n, recall: self.recall.into_iter().map(|(k, v)| (k, v / n)).collect(), mrr_at_10: self.mrr / n }
    }
}

/// Query encoder with Boolean attention and a plain document encoder.
#[derive(Clone, Debug)]
pub struct Retriever {
    pub query: Encoder,
    pub doc: Encoder,
}

const EVAL_CHUNK: usize = 128;

impl Retriever {
    /// Fresh plain document encoder matching the query encoder's sizes.
    pub fn new(query: Encoder, rng: &mut Rng) -> Result<Self> {
        let doc = Encoder::new(EncoderConfig { boolattn: false, ..query.config }, rng)?;
        Ok(Self { query, doc })
    }

    fn tokenize(vocab: &Vocab, text: &str, max_len: usize) -> Result<Vec<usize>> {
        let mut ids = vocab.encode(text)?;
        ids.truncate(max_len);
        Ok(ids)
    }

    pub fn embed_documents(&self, corpus: &SyntheticCorpus, vocab: &Vocab, max_len: usize) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(corpus.documents.len());
        for chunk in corpus.documents.chunks(EVAL_CHUNK) {
            let seqs = chunk.iter().map(|d| Self::tokenize(vocab, &d.text, max_len)).collect::<Result<Vec<_>>>()?;
            out.extend(self.doc.embed(&Batch::new(&seqs)?, GateInput::Off)?);
        }
        Ok(out)
    }

    pub fn embed_queries(&self, queries: &[&Query], vocab: &Vocab, gates: GateSetting, max_len: usize) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(EVAL_CHUNK) {
            let seqs = chunk.iter().map(|q| Self::tokenize(vocab, &q.text, max_len)).collect::<Result<Vec<_>>>()?;
            out.extend(self.query.embed(&Batch::new(&seqs)?, gates.input(chunk))?);
        }
        Ok(out)
    }

    /// Ranks the whole corpus for every query of `split`.
    pub fn evaluate(
        &self,
        corpus: &SyntheticCorpus,
        vocab: &Vocab,
        split: Split,
        config: &RetrievalConfig,
    ) -> Result<RetrievalMetrics> {
        let docs = self.embed_documents(corpus, vocab, config.doc_max_len)?;
        let queries = corpus.split(split);
        let qv = self.embed_queries(&queries, vocab, config.gates, config.query_max_len)?;
        let mut overall = Accumulator::default();
        let mut per_template: BTreeMap<usize, Accumulator> = BTreeMap::new();
        let mut per_operator: BTreeMap<OperatorKind, Accumulator> = BTreeMap::new();
        for (q, v) in queries.iter().zip(&qv) {
            let scores: Vec<f32> = docs.iter().map(|d| crate::encoder::similarity(v, d)).collect();
            let ranked = rank(&scores);
            let answers: BTreeSet<usize> = q.answer_ids.iter().copied().collect();
            let recalls = config
                .ks
                .iter()
                .map(|&k| Ok((k, recall_at_k(&ranked, &answers, k)?)))
                .collect::<Result<Vec<_>>>()?;
            let mrr = mrr_at_10(&ranked, &answers);
            overall.add(&recalls, mrr);
            per_template.entry(q.template).or_default().add(&recalls, mrr);
            for &op in &q.operators {
                per_operator.entry(op).or_default().add(&recalls, mrr);
            }
        }
        Ok(RetrievalMetrics {
            overall: overall.finish(),
            per_template: per_template.into_iter().map(|(k, a)| (k, a.finish())).collect(),
            per_operator: per_operator.into_iter().map(|(k, a)| (k, a.finish())).collect(),
        })
    }
}

/// One positive drawn uniformly from the answers, `n` negatives uniformly from the rest.
pub fn sample_training_docs(answers: &[usize], num_docs: usize, n: usize, rng: &mut Rng) -> Result<(usize, Vec<usize>)> {
    let pos = *rng.choose(answers).ok_or(Error::EmptyAnswerSet)?;
    if answers.len() >= num_docs {
        return Err(Error::InvalidArgument("every document is an answer; no negatives available".into()));
    }
    let set: BTreeSet<usize> = answers.iter().copied().collect();
    let mut negs = Vec::with_capacity(n);
    while negs.len() < n {
        let d = rng.below(num_docs);
        if !set.contains(&d) {
            negs.push(d);
        }
    }
    Ok((pos, negs))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean contrastive loss per epoch.
    pub epoch_losses: Vec<f32>,
    /// Validation Recall@`select_k` after each epoch, epoch 0 being the untrained model.
    pub validation: Vec<f64>,
    pub best_epoch: usize,
    pub test: RetrievalMetrics,
}

/// Contrastive fine-tuning with per-step positive resampling and random
/// negatives. Validation runs every epoch; the best epoch's weights are kept.
pub fn train_retriever(
    retriever: &mut Retriever,
    corpus: &SyntheticCorpus,
    vocab: &Vocab,
    config: &RetrievalConfig,
    rng: &mut Rng,
) -> Result<TrainReport> {
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    retriever.query.unfreeze();
    retriever.doc.unfreeze();
    let opt_cfg = AdamWConfig { lr: config.lr, weight_decay: config.weight_decay, ..AdamWConfig::default() };
    let mut q_opt = AdamW::new(opt_cfg, &retriever.query.store);
    let mut d_opt = AdamW::new(opt_cfg, &retriever.doc.store);
    let train = corpus.split(Split::Train);
    let num_docs = corpus.documents.len();
    let mut report = TrainReport::default();
    report.validation.push(retriever.evaluate(corpus, vocab, Split::Val, config)?.recall(config.select_k));
    let mut best: (f64, ParamStore, ParamStore) =
        (report.validation[0], retriever.query.store.clone(), retriever.doc.store.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0f32;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let qs: Vec<&Query> = chunk.iter().map(|&i| train[i]).collect();
            let q_seqs = qs
                .iter()
                .map(|q| Retriever::tokenize(vocab, &q.text, config.query_max_len))
                .collect::<Result<Vec<_>>>()?;
            let mut d_seqs = Vec::with_capacity(qs.len() * (1 + config.negatives));
            for q in &qs {
                let (pos, negs) = sample_training_docs(&q.answer_ids, num_docs, config.negatives, rng)?;
                for id in std::iter::once(pos).chain(negs) {
                    d_seqs.push(Retriever::tokenize(vocab, &corpus.documents[id].text, config.doc_max_len)?);
                }
            }
            let mut g = Graph::new();
            let opts = ForwardOptions { gates: config.gates.input(&qs), cues: CueSource::Predicted, rng: Some(&mut *rng) };
            let qo = retriever.query.forward(&mut g, &Batch::new(&q_seqs)?, opts)?;
            let d_out = retriever.doc.forward(&mut g, &Batch::new(&d_seqs)?, ForwardOptions::eval(GateInput::Off))?;
            let (b, d) = (qs.len(), retriever.doc.config.hidden);
            let docs = g.reshape(d_out.pooled, vec![b, 1 + config.negatives, d])?;
            let pos = g.narrow(docs, 1, 0, 1)?;
            let pos = g.reshape(pos, vec![b, d])?;
            let negs = g.narrow(docs, 1, 1, config.negatives)?;
            let loss = contrastive_loss(&mut g, qo.pooled, pos, negs)?;
            total += g.scalar_value(loss)?;
            steps += 1;
            let grads = g.gradients(loss)?;
            g.accumulate_into(&grads, &mut retriever.query.store);
            g.accumulate_into(&grads, &mut retriever.doc.store);
            q_opt.step(&mut retriever.query.store);
            d_opt.step(&mut retriever.doc.store);
        }
        report.epoch_losses.push(total / steps.max(1) as f32);
        let val = retriever.evaluate(corpus, vocab, Split::Val, config)?.recall(config.select_k);
        report.validation.push(val);
        log::info!("epoch {epoch}: loss {:.4} val R@{} {:.4}", total / steps.max(1) as f32, config.select_k, val);
        if val > best.0 {
            best = (val, retriever.query.store.clone(), retriever.doc.store.clone());
            report.best_epoch = epoch;
        }
    }
    retriever.query.store = best.1;
    retriever.doc.store = best.2;
    report.test = retriever.evaluate(corpus, vocab, Split::Test, config)?;
    Ok(report)
}
