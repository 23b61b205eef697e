use boolattn::encoder::{
    is_boolattn_param, similarity, Batch, CueSource, Encoder, EncoderConfig, ForwardOptions, GateInput,
};
use boolattn::numerics::gradcheck::Tolerance;
use boolattn::suite::{gradient_suite, suite_config};
use boolattn::numerics::{Graph, Rng};

fn small(layers: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 20,
        hidden: 8,
        layers,
        heads: 2,
        head_dim: 4,
        ffn_dim: 16,
        max_len: 12,
        operator_dim: 4,
        scope_channels: 4,
        bias_ffn_dim: 8,
        gate_hidden: 4,
        ..EncoderConfig::default()
    }
}

fn batch() -> Batch {
    Batch::new(&[vec![3, 4, 5, 6, 7, 8, 9, 10], vec![11, 12, 2, 13, 14]]).unwrap()
}

fn hidden(enc: &Encoder, b: &Batch, gates: GateInput) -> Vec<f32> {
    let mut g = Graph::new();
    let out = enc.forward(&mut g, b, ForwardOptions::eval(gates)).unwrap();
    g.value(out.hidden).to_vec()
}

#[test]
fn gates_off_match_plain_attention() {
    for layers in [1, 2, 4] {
        let enc = Encoder::new(small(layers), &mut Rng::new(layers as u64)).unwrap();
        let b = batch();
        let closed = hidden(&enc, &b, GateInput::Oracle(vec![[false; 3]; 2]));
        let plain = hidden(&enc, &b, GateInput::Off);
        for (x, y) in closed.iter().zip(&plain) {
            assert!((x - y).abs() <= 1e-6);
        }
        let open = hidden(&enc, &b, GateInput::Oracle(vec![[true; 3]; 2]));
        assert!(open.iter().zip(&plain).any(|(x, y)| (x - y).abs() > 1e-6));
    }
}

#[test]
fn plain_config_has_no_boolean_params() {
    let enc = Encoder::new(EncoderConfig { boolattn: false, ..small(2) }, &mut Rng::new(0)).unwrap();
    assert_eq!(enc.param_counts().boolattn, 0);
    assert!(enc.store.iter().all(|(n, _)| !is_boolattn_param(n)));
}

#[test]
fn forward_is_deterministic() {
    let enc = Encoder::new(small(2), &mut Rng::new(5)).unwrap();
    let b = batch();
    let a = hidden(&enc, &b, GateInput::Learned);
    let c = hidden(&enc, &b, GateInput::Learned);
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), c.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    let again = Encoder::new(small(2), &mut Rng::new(5)).unwrap();
    assert_eq!(a, hidden(&again, &b, GateInput::Learned));
}

#[test]
fn single_token_pools_to_itself() {
    let enc = Encoder::new(small(2), &mut Rng::new(6)).unwrap();
    let mut g = Graph::new();
    let b = Batch::new(&[vec![7]]).unwrap();
    let out = enc.forward(&mut g, &b, ForwardOptions::eval(GateInput::Learned)).unwrap();
    assert_eq!(g.value(out.pooled), g.value(out.hidden));
}

#[test]
fn padding_does_not_change_real_rows() {
    let enc = Encoder::new(small(2), &mut Rng::new(7)).unwrap();
    let alone = Batch::new(&[vec![11, 12, 2, 13, 14]]).unwrap();
    let gates = |n| GateInput::Oracle(vec![[true, false, true]; n]);
    let solo = enc.embed(&alone, gates(1)).unwrap();
    let padded = enc.embed(&batch(), gates(2)).unwrap();
    for (x, y) in solo[0].iter().zip(&padded[1]) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn too_long_sequence_is_rejected() {
    let enc = Encoder::new(small(1), &mut Rng::new(0)).unwrap();
    let b = Batch::new(&[vec![1; 13]]).unwrap();
    let mut g = Graph::new();
    assert!(enc.forward(&mut g, &b, ForwardOptions::eval(GateInput::Off)).is_err());
}

#[test]
fn similarity_examples() {
    assert_eq!(similarity(&[1.0, 0.0], &[1.0, 0.0]), 1.0);
    assert_eq!(similarity(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
    let mut rng = Rng::new(1);
    let a: Vec<f32> = (0..16).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let b: Vec<f32> = (0..16).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let oracle: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
    assert!((similarity(&a, &b) as f64 - oracle).abs() < 1e-5);
}

#[test]
fn default_overhead_is_positive_and_bounded() {
    let enc = Encoder::new(EncoderConfig::default(), &mut Rng::new(0)).unwrap();
    let c = enc.param_counts();
    assert!(c.boolattn > 0);
    assert!(c.overhead() < 0.25, "overhead {}", c.overhead());
    eprintln!("base {} boolattn {} overhead {:.3}", c.base, c.boolattn, c.overhead());
}

#[test]
fn rebinding_a_store_reproduces_outputs() {
    let enc = Encoder::new(small(2), &mut Rng::new(9)).unwrap();
    let copy = Encoder::from_store(enc.config, enc.store.clone()).unwrap();
    let b = batch();
    assert_eq!(hidden(&enc, &b, GateInput::Learned), hidden(&copy, &b, GateInput::Learned));
    assert!(Encoder::from_store(small(1), enc.store.clone()).is_err());
}

#[test]
fn training_mode_sampling_is_seeded() {
    let enc = Encoder::new(small(2), &mut Rng::new(10)).unwrap();
    let b = batch();
    let run = |seed| {
        let mut rng = Rng::new(seed);
        let mut g = Graph::new();
        let opts = ForwardOptions { gates: GateInput::Oracle(vec![[true; 3]; 2]), cues: CueSource::Predicted, rng: Some(&mut rng) };
        let out = enc.forward(&mut g, &b, opts).unwrap();
        g.value(out.pooled).to_vec()
    };
    assert_eq!(run(1), run(1));
}

#[test]
fn full_layer_gradients_match_finite_differences() {
    let lines = gradient_suite(suite_config(EncoderConfig::default()), 21, Tolerance::default()).unwrap();
    for mode in ["oracle", "learned"] {
        assert!(lines.iter().any(|l| l.mode == mode));
    }
    assert!(lines.iter().any(|l| l.param.contains("boolattn.gate")));
    assert!(lines.iter().any(|l| l.param.ends_with("theta")));
    for l in &lines {
        assert!(l.elements > 0);
        assert!(l.passed(), "{} {} {} of {} failed, max rel {}", l.mode, l.param, l.failures, l.elements, l.max_rel_err);
    }
}
