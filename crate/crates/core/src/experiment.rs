//! End-to-end runs: corpus, pretraining, then retrieval fine-tuning per gate setting.

use serde::{Deserialize, Serialize};

use crate::corpus::{generate_corpus, CorpusConfig, SyntheticCorpus, Vocab};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::numerics::Rng;
use crate::operators::OperatorKind;
use crate::pretrain::{evaluate_pretraining, generate_pretrain_examples, pretrain, PretrainConfig, PretrainMetrics};
use crate::retrieval::{train_retriever, GateSetting, RetrievalConfig, Retriever, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub encoder: EncoderConfig,
    pub corpus: CorpusConfig,
    pub pretrain: PretrainConfig,
    pub pretrain_examples: usize,
    pub pretrain_eval_examples: usize,
    pub retrieval: RetrievalConfig,
    pub settings: Vec<GateSetting>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig { vocab_size: Vocab::default().len(), ..EncoderConfig::default() },
            corpus: CorpusConfig::default(),
            pretrain: PretrainConfig::default(),
            pretrain_examples: 2000,
            pretrain_eval_examples: 300,
            retrieval: RetrievalConfig::default(),
            settings: vec![GateSetting::Off, GateSetting::Oracle, GateSetting::Learned],
            seeds: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingResult {
    pub gates: GateSetting,
    pub report: TrainReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub pretrain: PretrainMetrics,
    pub settings: Vec<SettingResult>,
}

impl SeedResult {
    pub fn get(&self, gates: GateSetting) -> Option<&TrainReport> {
        self.settings.iter().find(|s| s.gates == gates).map(|s| &s.report)
    }

    pub fn recall(&self, gates: GateSetting, k: usize) -> Option<f64> {
        self.get(gates).map(|r| r.test.recall(k))
    }

    pub fn not_mrr(&self, gates: GateSetting) -> Option<f64> {
        self.get(gates).map(|r| r.test.operator_mrr(OperatorKind::Not))
    }
}

/// Every setting starts from the same pretrained query encoder and the same
/// document encoder init, and sees the same sampling stream.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
    let vocab = Vocab::default();
    let corpus = corpus_for_seed(config, seed)?;
    let (query, pretrain_metrics) = pretrained_encoder(config, &vocab, &mut pretrain_rng(seed))?;
    run_settings(config, &corpus, &vocab, query, pretrain_metrics, seed)
}

/// The corpus every command derives from `seed`.
pub fn corpus_for_seed(config: &ExperimentConfig, seed: u64) -> Result<SyntheticCorpus> {
    generate_corpus(&config.corpus, &mut Rng::new(seed).fork(1))
}

/// The pretraining stream of `seed`, as used by [`run_seed`].
pub fn pretrain_rng(seed: u64) -> Rng {
    Rng::new(seed).fork(2)
}

pub fn pretrained_encoder(config: &ExperimentConfig, vocab: &Vocab, rng: &mut Rng) -> Result<(Encoder, PretrainMetrics)> {
    let mut enc = Encoder::new(config.encoder, rng)?;
    let train = generate_pretrain_examples(config.pretrain_examples, vocab, config.pretrain.augment_prob, rng)?;
    let held_out = generate_pretrain_examples(config.pretrain_eval_examples, vocab, config.pretrain.augment_prob, rng)?;
    pretrain(&mut enc, &train, vocab, &config.pretrain, rng)?;
    let metrics = evaluate_pretraining(&enc, &held_out, 32)?;
    Ok((enc, metrics))
}

pub fn run_settings(
    config: &ExperimentConfig,
    corpus: &SyntheticCorpus,
    vocab: &Vocab,
    query: Encoder,
    pretrain: PretrainMetrics,
    seed: u64,
) -> Result<SeedResult> {
    let mut settings = Vec::with_capacity(config.settings.len());
    for &gates in &config.settings {
        let (_, report) = train_setting(config, corpus, vocab, query.clone(), gates, seed)?;
        settings.push(SettingResult { gates, report });
    }
    Ok(SeedResult { seed, pretrain, settings })
}

/// Fine-tunes one retriever; the document encoder init and sampling stream depend only on `seed`.
pub fn train_setting(
    config: &ExperimentConfig,
    corpus: &SyntheticCorpus,
    vocab: &Vocab,
    query: Encoder,
    gates: GateSetting,
    seed: u64,
) -> Result<(Retriever, TrainReport)> {
    let mut rng = Rng::new(seed).fork(3);
    let mut retriever = Retriever::new(query, &mut rng)?;
    let rcfg = RetrievalConfig { gates, ..config.retrieval.clone() };
    let report = train_retriever(&mut retriever, corpus, vocab, &rcfg, &mut rng)?;
    log::info!("seed {seed} {gates:?}: test R@20 {:.4}", report.test.recall(20));
    Ok((retriever, report))
}
