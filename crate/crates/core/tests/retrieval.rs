use boolattn::checkpoint::Checkpoint;
use boolattn::corpus::{generate_corpus, CorpusConfig, Split, Vocab};
use boolattn::encoder::{Encoder, EncoderConfig};
use boolattn::numerics::Rng;
use boolattn::retrieval::{train_retriever, GateSetting, RetrievalConfig, Retriever};

fn setup(seed: u64) -> (Retriever, boolattn::corpus::SyntheticCorpus, Vocab) {
    let vocab = Vocab::default();
    let mut rng = Rng::new(seed);
    let corpus = generate_corpus(&CorpusConfig { num_documents: 80, num_queries: 70, val_queries: 10, test_queries: 14 }, &mut rng).unwrap();
    let config = EncoderConfig { vocab_size: vocab.len(), hidden: 16, heads: 2, head_dim: 8, ffn_dim: 32, ..EncoderConfig::default() };
    let query = Encoder::new(config, &mut rng).unwrap();
    (Retriever::new(query, &mut rng).unwrap(), corpus, vocab)
}

#[test]
fn training_lowers_the_contrastive_loss() {
    for gates in [GateSetting::Off, GateSetting::Oracle, GateSetting::Learned] {
        let (mut r, corpus, vocab) = setup(1);
        let config = RetrievalConfig { epochs: 6, batch_size: 8, gates, ..RetrievalConfig::default() };
        let report = train_retriever(&mut r, &corpus, &vocab, &config, &mut Rng::new(2)).unwrap();
        assert_eq!(report.epoch_losses.len(), 6);
        assert_eq!(report.validation.len(), 7);
        let (first, last) = (report.epoch_losses[0], *report.epoch_losses.last().unwrap());
        assert!(last < first, "{gates:?}: {first} -> {last}");
        let best = report.validation.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(report.validation[report.best_epoch], best);
        let r20 = report.test.recall(20);
        assert!((0.0..=1.0).contains(&r20));
        assert_eq!(report.test.overall.queries, 14);
    }
}

#[test]
fn checkpoint_reproduces_metrics_bit_exactly() {
    let (mut r, corpus, vocab) = setup(3);
    let config = RetrievalConfig { epochs: 2, batch_size: 8, gates: GateSetting::Learned, ..RetrievalConfig::default() };
    train_retriever(&mut r, &corpus, &vocab, &config, &mut Rng::new(4)).unwrap();
    let before = r.evaluate(&corpus, &vocab, Split::Test, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    Checkpoint::from_retriever(&r, serde_json::json!({"seed": 3})).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().into_retriever().unwrap();
    let after = back.evaluate(&corpus, &vocab, Split::Test, &config).unwrap();
    assert_eq!(before, after);
    let q = corpus.split(Split::Test);
    let a = r.embed_queries(&q, &vocab, GateSetting::Learned, 32).unwrap();
    let b = back.embed_queries(&q, &vocab, GateSetting::Learned, 32).unwrap();
    let to_bits = |v: &Vec<Vec<f32>>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(to_bits(&a), to_bits(&b));
}
