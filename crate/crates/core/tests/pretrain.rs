use boolattn::corpus::Vocab;
use boolattn::encoder::{is_pretrain_trainable, Encoder, EncoderConfig};
use boolattn::numerics::{Graph, Rng};
use boolattn::pretrain::{
    generate_pretrain_examples, pretrain, pretrain_losses, PretrainConfig, PretrainExample,
};

fn encoder(vocab: &Vocab, seed: u64) -> Encoder {
    let config = EncoderConfig { vocab_size: vocab.len(), hidden: 16, heads: 2, head_dim: 8, ffn_dim: 32, ..EncoderConfig::default() };
    Encoder::new(config, &mut Rng::new(seed)).unwrap()
}

fn bits(enc: &Encoder) -> Vec<(String, Vec<u32>)> {
    enc.store.iter().map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect())).collect()
}

#[test]
fn frozen_parameters_are_bitwise_unchanged() {
    let vocab = Vocab::default();
    let mut rng = Rng::new(4);
    let mut enc = encoder(&vocab, 4);
    let examples = generate_pretrain_examples(40, &vocab, 0.5, &mut rng).unwrap();
    let before = bits(&enc);
    let report = pretrain(&mut enc, &examples, &vocab, &PretrainConfig { lr: 1e-3, ..PretrainConfig::default() }, &mut rng).unwrap();
    assert_eq!(report.steps, 40);
    let after = bits(&enc);
    let (mut frozen, mut moved) = (0, 0);
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        if is_pretrain_trainable(name) {
            moved += usize::from(a != b);
        } else {
            assert_eq!(a, b, "{name} changed");
            frozen += 1;
        }
    }
    assert!(frozen > 0 && moved > 0);
    assert!(enc.store.iter().all(|(_, t)| t.grad().is_none()));
    assert!(enc.store.iter().all(|(_, t)| t.requires_grad()));
}

#[test]
fn pretraining_reduces_the_objective() {
    let vocab = Vocab::default();
    let mut rng = Rng::new(9);
    let mut enc = encoder(&vocab, 9);
    let train = generate_pretrain_examples(300, &vocab, 0.5, &mut rng).unwrap();
    let probe = generate_pretrain_examples(40, &vocab, 0.5, &mut rng).unwrap();
    let config = PretrainConfig { lr: 1e-3, batch_size: 4, ..PretrainConfig::default() };
    let total = |enc: &Encoder| {
        let rows: Vec<&PretrainExample> = probe.iter().collect();
        let mut g = Graph::new();
        let l = pretrain_losses(&mut g, enc, &rows, &vocab, &config, None).unwrap();
        g.scalar_value(l.total).unwrap()
    };
    let start = total(&enc);
    pretrain(&mut enc, &train, &vocab, &config, &mut rng).unwrap();
    let end = total(&enc);
    assert!(end < 0.8 * start, "{start} -> {end}");
}

#[test]
fn examples_carry_consistent_labels() {
    let vocab = Vocab::default();
    let examples = generate_pretrain_examples(200, &vocab, 0.5, &mut Rng::new(1)).unwrap();
    for e in &examples {
        let union = e.union_cues();
        assert_eq!(union.len(), e.tokens.len());
        for (op, labels) in e.cue_labels.iter().enumerate() {
            assert_eq!(labels.iter().any(|&b| b), e.operator_labels[op]);
        }
        assert!(!e.positive.is_empty() && !e.negative.is_empty());
    }
}
