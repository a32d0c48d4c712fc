//! Intent classification on top of a frozen, randomly initialized encoder.

use dualenc_core::encoder::RunMode;
use dualenc_core::intent::{label_set, split_80_10_10, train_intent_classifier, FeatureSet, IntentExample, IntentGrid};
use dualenc_core::model::{DualEncoder, InferenceModel};
use dualenc_core::synth::toy_intents;
use dualenc_core::{ModelConfig, SubwordVocab, VocabLimits};

fn examples() -> Vec<IntentExample> {
    toy_intents(500, 2, 4).into_iter().map(|(text, label)| IntentExample { text, label }).collect()
}

fn frozen_model(examples: &[IntentExample]) -> InferenceModel {
    let limits = VocabLimits { min_frequency: 2, oov_buckets: 8, ..VocabLimits::default() };
    let vocab = SubwordVocab::build(examples.iter().map(|e| e.text.as_str()), limits).unwrap();
    let cfg = ModelConfig {
        vocab_size: vocab.size(),
        oov_buckets: 8,
        embed_dim: 32,
        attn_dim: 8,
        ff1_dim: 64,
        max_relative_attention: vec![3, 5],
        max_seq_len: 20,
        ff2_hidden: 32,
        out_dim: 16,
        ..ModelConfig::default()
    };
    let (model, store) = DualEncoder::init(&cfg, 3).unwrap();
    InferenceModel::new(model, store.to_weights(), vocab, RunMode::FULL).unwrap()
}

fn features(m: &InferenceModel, ex: &[IntentExample], labels: &[String]) -> FeatureSet {
    let texts: Vec<&str> = ex.iter().map(|e| e.text.as_str()).collect();
    let tags: Vec<String> = ex.iter().map(|e| e.label.clone()).collect();
    FeatureSet::new(m.encode_r(&texts).unwrap(), &tags, labels).unwrap()
}

#[test]
fn separable_intents_on_random_encoder() {
    let ex = examples();
    let model = frozen_model(&ex);
    let weights_before = model.weights.clone();
    let labels = label_set(&ex);
    let split = split_80_10_10(&ex, 0);
    let grid = IntentGrid { hidden: vec![64], dropout: vec![0.0], lr: vec![0.03, 0.1], ..IntentGrid::default() };
    let (clf, _) = train_intent_classifier(&features(&model, &split.train, &labels), &features(&model, &split.dev, &labels), &labels, &grid, 1).unwrap();
    let test = features(&model, &split.test, &labels);
    let acc = clf.accuracy(test.features.view(), &test.labels);
    assert!(acc >= 0.95, "test accuracy {acc}");

    assert!(model.weights.iter().zip(weights_before.iter()).all(|(a, b)| a == b));

    let empty = model.encode_r(&[""]).unwrap();
    let (label, probs) = clf.classify(empty.row(0));
    assert!(labels.contains(&label));
    assert!((probs.iter().sum::<f32>() - 1.0).abs() < 1e-5);
}

#[test]
fn single_class_data_is_rejected() {
    let ex: Vec<IntentExample> = examples().into_iter().filter(|e| e.label == "intent_0").collect();
    let model = frozen_model(&ex);
    let labels = label_set(&ex);
    let fs = features(&model, &ex, &labels);
    assert!(train_intent_classifier(&fs, &fs, &labels, &IntentGrid::default(), 0).is_err());
}
