use boolattn_demo::{position_curve, sample_queries, scope_pairs, Model};

#[test]
fn curve_matches_hand_computed_offsets() {
    let c = position_curve("red and round not wooden french", "not", 8, 1.0).unwrap();
    assert_eq!(c.cues, [false, false, false, true, false, false]);
    assert_eq!(c.offsets, [0.0, 0.0, 0.0, 0.0, 1.0, 2.0]);
    for (r, w) in c.offsets.iter().zip(&c.weights) {
        assert!((w - (-r * r / 2.0f32).exp()).abs() < 1e-6);
    }
    let c = position_curve("red and round or wooden", "and", 1, 2.0).unwrap();
    assert_eq!(c.offsets, [-1.0, 0.0, 1.0, 1.0, 1.0]);
    assert!(position_curve("red", "xor", 8, 1.0).is_err());
    assert!(position_curve("red", "and", 8, 0.0).is_err());
}

#[test]
fn scope_pairs_follow_the_operator() {
    let scope = [1, 0, 1];
    let and = scope_pairs(&scope, "and").unwrap();
    let not = scope_pairs(&scope, "not").unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(and[i][j], (scope[i] * scope[j]) as f32);
            assert_eq!(not[i][j], scope[j] as f32);
        }
    }
    assert!(scope_pairs(&[], "or").unwrap().is_empty());
}

#[test]
fn gates_only_change_attention_when_a_cue_is_present() {
    let model = Model::create(0).unwrap();
    let plain = model.heatmap("red round wooden").unwrap();
    assert_eq!(plain.gates, [false; 3]);
    assert_eq!(plain.off, plain.on);
    let h = model.heatmap("red and round not wooden").unwrap();
    assert_eq!(h.gates, [true, false, true]);
    assert_ne!(h.off, h.on);
    for row in h.off.iter().chain(&h.on) {
        assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
    assert!(model.heatmap("zebra").is_err());
    assert!(model.heatmap("").is_err());
}

#[test]
fn pretraining_and_samples() {
    let mut model = Model::create(1).unwrap();
    assert!(!model.info().pretrained);
    let m = model.run_pretraining(200).unwrap();
    assert!((0.0..=1.0).contains(&m.cue_f1));
    assert!(model.info().pretrained);
    let qs = sample_queries(7, 5).unwrap();
    assert_eq!(qs.len(), 5);
    for q in &qs {
        model.heatmap(q).unwrap();
    }
}
