//! Analytic gradients of the multi-context dual encoder against central
//! differences. The single-context model is covered by the acceptance checks.

use dualenc_core::encoder::PackedBatch;
use dualenc_core::model::{DualEncoder, ObjectiveOptions, PairBatch};
use dualenc_core::objective::ScoreConfig;
use dualenc_core::params::Weights;
use dualenc_core::ModelConfig;

pub fn tiny_config(multi: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        oov_buckets: 4,
        embed_dim: 32,
        attn_dim: 8,
        ff1_dim: 48,
        max_relative_attention: vec![2, 5],
        max_seq_len: 12,
        ff2_hidden: 32,
        ff2_layers: 3,
        out_dim: 16,
        multi_context: multi,
        ..ModelConfig::default()
    }
}

fn batch(multi: bool) -> PairBatch {
    let xs: [&[u32]; 4] = [&[1, 5, 9, 2, 7], &[3, 3, 11], &[20, 4, 6, 8, 10, 12, 25], &[14]];
    let ys: [&[u32]; 4] = [&[2, 7, 13], &[17, 3, 0, 1], &[5, 19], &[22, 23, 9, 27, 4, 1]];
    let zs: [&[u32]; 4] = [&[8, 8, 1], &[], &[15, 2, 6, 9], &[26, 18]];
    PairBatch {
        x: PackedBatch::from_id_slices(xs),
        y: PackedBatch::from_id_slices(ys),
        z: multi.then(|| PackedBatch::from_id_slices(zs)),
    }
}

/// Per-tensor `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
fn group_errors(multi: bool) -> Vec<(String, f64, f64)> {
    let cfg = tiny_config(multi);
    let (model, store) = DualEncoder::init(&cfg, 11).unwrap();
    let b = batch(multi);
    let opts = ObjectiveOptions { step: 3, score: ScoreConfig { dim: cfg.out_dim, anneal_steps: 10, smoothing: 0.2 }, ..Default::default() };
    let analytic = model.loss_and_grads(&store.to_weights::<f32>(), &b, &opts).unwrap().grads;
    let base: Weights<f64> = store.to_weights();
    let h = 1e-3;
    let mut out = Vec::new();
    for (id, t) in store.ids().zip(store.tensors()) {
        let mut w = base.clone();
        let mut num = vec![0.0f64; t.numel()];
        for (i, slot) in num.iter_mut().enumerate() {
            let orig = w.vec(id)[i];
            w.vec_mut(id)[i] = orig + h;
            let plus = model.loss(&w, &b, &opts).unwrap();
            w.vec_mut(id)[i] = orig - h;
            let minus = model.loss(&w, &b, &opts).unwrap();
            w.vec_mut(id)[i] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        let a = analytic.vec(id);
        let diff: f64 = a.iter().zip(&num).map(|(&x, &y)| (x as f64 - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nn: f64 = num.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = na.max(nn);
        out.push((t.name.clone(), if denom == 0.0 { 0.0 } else { diff / denom }, nn));
    }
    out
}

fn check(multi: bool) {
    let errors = group_errors(multi);
    let mut worst = 0.0f64;
    for (name, err, norm) in &errors {
        println!("{name:<24} rel err {err:.2e} (|g| = {norm:.3e})");
        worst = worst.max(*err);
    }
    assert!(worst < 1e-4, "worst group relative error {worst:.3e}");
}

#[test]
fn multi_context_gradients_match_differences() {
    check(true);
}
