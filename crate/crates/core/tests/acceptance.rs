//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the verdict lines are always printed.
//! Criteria run in sequence; a panic inside one is reported as its failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use dualenc_core::encoder::PackedBatch;
use dualenc_core::eval::{build_pools, evaluate, mrr_scores, recall_at_k_scores};
use dualenc_core::model::{DualEncoder, InferenceModel, ObjectiveOptions, PairBatch};
use dualenc_core::multi_context::ContextJoin;
use dualenc_core::objective::{batch_loss, ScoreConfig};
use dualenc_core::params::{PrecisionClass, Weights};
use dualenc_core::quant::dequantize;
use dualenc_core::serialize::{ModelFile, TensorData};
use dualenc_core::synth::{toy_corpus, ToyCorpus, ToyTask};
use dualenc_core::train::{Corpus, IngestMode, RunOutputs, TrainConfig, Trainer};
use dualenc_core::{Ablation, ModelConfig, SubwordVocab, VocabLimits};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOY_PAIRS: usize = 5000;
const TOY_HELDOUT: usize = 500;
const TOY_BATCH: usize = 64;
const TOY_STEPS: u64 = 400;
const ABLATION_STEPS: u64 = 150;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

struct Toy {
    corpus: ToyCorpus,
    vocab: SubwordVocab,
}

impl Toy {
    fn new(history: bool) -> Self {
        let task = if history {
            ToyTask::history_task(TOY_PAIRS, TOY_HELDOUT, 7)
        } else {
            ToyTask::keyword_task(TOY_PAIRS, TOY_HELDOUT, 7)
        };
        let corpus = toy_corpus(task);
        let limits = VocabLimits { min_frequency: 5, oov_buckets: 50, ..VocabLimits::default() };
        let vocab = SubwordVocab::build(corpus.train_texts(), limits).expect("toy vocabulary");
        Self { corpus, vocab }
    }

    fn recall_at_1(&self, model: &InferenceModel, n: usize) -> f64 {
        let pools = build_pools(&self.corpus.heldout, n, 1).expect("pools");
        evaluate(&pools, model, n, &[1]).expect("evaluation").recall[&1]
    }
}

struct ToyRun {
    trainer: Trainer,
    vocab: SubwordVocab,
    elapsed: Duration,
    final_loss: Option<f64>,
}

fn train_toy(toy: &Toy, multi: bool, quantize: bool, steps: u64, ablation: Option<Ablation>) -> ToyRun {
    let mut mc = ModelConfig::small(toy.vocab.size());
    mc.oov_buckets = 50;
    mc.multi_context = multi;
    if let Some(a) = ablation {
        a.apply(&mut mc);
    }
    let vocab = toy.vocab.with_oov_buckets(mc.oov_buckets as u32).expect("vocabulary");
    let mode = if multi { IngestMode::Multi } else { IngestMode::Single };
    let corpus = Corpus::from_records(toy.corpus.train.clone(), &vocab, mode, mc.max_seq_len, ContextJoin::Plain);
    let tc = TrainConfig {
        batch_size: TOY_BATCH,
        max_steps: steps,
        anneal_steps: steps / 2,
        lr_start: 0.1,
        range_update_period: 50,
        quantize,
        log_every: 0,
        ..TrainConfig::pretrain()
    };
    let mut trainer = Trainer::new(&mc, tc).expect("trainer");
    let start = Instant::now();
    let summary = trainer.run(&corpus, RunOutputs::default()).expect("training run");
    ToyRun { trainer, vocab, elapsed: start.elapsed(), final_loss: summary.final_loss }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        oov_buckets: 4,
        embed_dim: 32,
        attn_dim: 8,
        ff1_dim: 48,
        max_relative_attention: vec![2, 5],
        max_seq_len: 12,
        ff2_hidden: 32,
        out_dim: 16,
        ..ModelConfig::default()
    }
}

fn gradient_oracle() -> Verdict {
    let start = Instant::now();
    let cfg = tiny_config();
    let (model, store) = DualEncoder::init(&cfg, 11).unwrap();
    let xs: [&[u32]; 4] = [&[1, 5, 9, 2, 7], &[3, 3, 11], &[20, 4, 6, 8, 10, 12, 25], &[14]];
    let ys: [&[u32]; 4] = [&[2, 7, 13], &[17, 3, 0, 1], &[5, 19], &[22, 23, 9, 27, 4, 1]];
    let b = PairBatch { x: PackedBatch::from_id_slices(xs), y: PackedBatch::from_id_slices(ys), z: None };
    let opts = ObjectiveOptions { step: 3, score: ScoreConfig { dim: cfg.out_dim, anneal_steps: 10, smoothing: 0.2 }, ..Default::default() };
    let analytic = model.loss_and_grads(&store.to_weights::<f32>(), &b, &opts).unwrap().grads;
    let mut w: Weights<f64> = store.to_weights();
    let h = 1e-3;
    let mut worst = (0.0f64, String::new());
    for (id, t) in store.ids().zip(store.tensors()) {
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
        let diff = a.iter().zip(&num).map(|(&x, &y)| (x as f64 - y).powi(2)).sum::<f64>().sqrt();
        let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nn = num.iter().map(|x| x * x).sum::<f64>().sqrt();
        let err = if na.max(nn) == 0.0 { 0.0 } else { diff / na.max(nn) };
        if err >= worst.0 {
            worst = (err, t.name.clone());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst.0 < 1e-4 && secs < 60.0,
        format!("{} groups, worst relative error {:.2e} ({}), {secs:.1}s", store.len(), worst.0, worst.1),
    )
}

fn loss_sanity() -> Verdict {
    let cfg = ScoreConfig { dim: 16, anneal_steps: 0, smoothing: 0.0 };
    let mut details = Vec::new();
    let mut pass = true;
    for k in [2usize, 8, 64] {
        let h = Array2::<f64>::from_elem((k, 16), 0.25);
        let per_row = batch_loss(h.view(), h.view(), 0, &cfg).unwrap().per_row();
        pass &= (per_row - (k as f64).ln()).abs() < 1e-4;
        details.push(format!("K={k}: {per_row:.6} vs {:.6}", (k as f64).ln()));
    }
    // A freshly initialized model fed identical inputs scores every pair equally.
    let mc = tiny_config();
    let (model, store) = DualEncoder::init(&mc, 5).unwrap();
    let same: Vec<&[u32]> = vec![&[3, 4, 5]; 2];
    let b = PairBatch { x: PackedBatch::from_id_slices(same.clone()), y: PackedBatch::from_id_slices(same), z: None };
    let opts = ObjectiveOptions { score: ScoreConfig { dim: mc.out_dim, anneal_steps: 0, smoothing: 0.0 }, ..Default::default() };
    let init = model.loss(&store.to_weights::<f64>(), &b, &opts).unwrap() / 2.0;
    pass &= (init - 2f64.ln()).abs() < 1e-4;
    details.push(format!("initialized model K=2: {init:.6}"));
    verdict(pass, details.join(", "))
}

fn positional_scheme() -> Verdict {
    let mc = ModelConfig { max_seq_len: 518, ..tiny_config() };
    let (model, store) = DualEncoder::init(&mc, 2).unwrap();
    let enc = &model.encoder;
    let pairs: std::collections::HashSet<(usize, usize)> = (0..517).map(|i| enc.position_rows(i)).collect();
    let wraps = enc.position_rows(517) == enc.position_rows(0);
    let ids = vec![7u32; 518];
    let x = enc.embed_with_positions(&store.to_weights::<f32>(), &PackedBatch::from_id_slices([ids.as_slice()])).unwrap();
    let rows: std::collections::HashSet<Vec<u32>> = (0..517).map(|i| x.row(i).iter().map(|v| v.to_bits()).collect()).collect();
    let same_rows = x.row(517) == x.row(0);
    verdict(
        pairs.len() == 517 && wraps && rows.len() == 517 && same_rows,
        format!("{} distinct index pairs, {} distinct embedded rows, 517 wraps to 0: {}", pairs.len(), rows.len(), wraps && same_rows),
    )
}

fn fused_reduction() -> Verdict {
    let mc = ModelConfig { max_seq_len: 60, ..ModelConfig::small(100) };
    let (model, store) = DualEncoder::init(&mc, 9).unwrap();
    let w: Weights<f32> = store.to_weights();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let seqs: Vec<Vec<u32>> = (0..100).map(|_| (0..rng.random_range(1..=60)).map(|_| rng.random_range(0..100)).collect()).collect();
    let batch = PackedBatch::from_id_slices(seqs.iter().map(Vec::as_slice));
    let x = Array2::from_shape_fn((batch.num_tokens(), mc.embed_dim), |_| rng.random_range(-2.0f32..2.0));
    let (fused, _) = model.encoder.reduce_forward(&w, x.view(), &batch);
    let naive = model.encoder.reduce_unfused(&w, x.view(), &batch);
    let worst = fused.iter().zip(naive.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    verdict(worst <= 1e-5, format!("100 sequences, max elementwise difference {worst:.2e}"))
}

fn brute_rank(scores: &[f32], rel: usize) -> usize {
    let s = scores[rel];
    1 + scores.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < rel)).count()
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut mismatches = 0;
    for m in 0..1000 {
        let rows = rng.random_range(1..30);
        let n = rng.random_range(2..120);
        let tied = m % 3 == 0;
        let scores: Vec<Vec<f32>> = (0..rows)
            .map(|_| (0..n).map(|_| if tied { rng.random_range(0..4) as f32 } else { rng.random_range(-1.0f32..1.0) }).collect())
            .collect();
        let rel: Vec<usize> = (0..rows).map(|_| rng.random_range(0..n)).collect();
        let ranks: Vec<usize> = scores.iter().zip(&rel).map(|(s, &r)| brute_rank(s, r)).collect();
        let brute_mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / rows as f64;
        if mrr_scores(&scores, &rel) != brute_mrr {
            mismatches += 1;
        }
        for k in [1, 2, 5, 10, n] {
            let brute = ranks.iter().filter(|&&r| r <= k).count() as f64 / rows as f64;
            if recall_at_k_scores(&scores, &rel, k) != brute {
                mismatches += 1;
            }
        }
    }
    verdict(mismatches == 0, format!("1000 matrices, {mismatches} mismatches"))
}

fn toy_convergence(run: &mut ToyRun, toy: &Toy) -> (Verdict, f64) {
    let m = run.trainer.inference(&run.vocab).unwrap();
    let r = toy.recall_at_1(&m, 20);
    let secs = run.elapsed.as_secs_f64();
    let pass = r >= 0.9 && run.trainer.step <= 2000 && secs < 15.0 * 60.0;
    (verdict(pass, format!("R_20@1 {r:.3} after {} steps (chance 0.05), {secs:.0}s", run.trainer.step)), r)
}

fn cosine_rows(a: &Array2<f32>, b: &Array2<f32>) -> Vec<f64> {
    a.rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| {
            let dot: f64 = x.iter().zip(y.iter()).map(|(&p, &q)| p as f64 * q as f64).sum();
            let nx = x.iter().map(|&p| (p as f64).powi(2)).sum::<f64>().sqrt();
            let ny = y.iter().map(|&q| (q as f64).powi(2)).sum::<f64>().sqrt();
            dot / (nx * ny)
        })
        .collect()
}

fn quantization_fidelity(qat: &mut ToyRun, toy: &Toy, qat_recall: f64, f32_recall: f64) -> Verdict {
    let file = qat.trainer.model_file(qat.vocab.digest()).unwrap();
    let mut worst_excess = f64::NEG_INFINITY;
    let mut checked = 0;
    for t in &file.tensors {
        if let TensorData::Codes(table) = &t.data {
            let shadow = &qat.trainer.store.get(qat.trainer.store.by_name(&t.name).unwrap()).data;
            let half = table.range.step() / 2.0;
            for (d, s) in dequantize(table).iter().zip(shadow) {
                let slack = f32::EPSILON as f64 * s.abs().max(d.abs()) as f64;
                worst_excess = worst_excess.max((*d as f64 - *s as f64).abs() - half - slack);
                checked += 1;
            }
        }
    }
    let a = checked > 0 && worst_excess <= 0.0;

    let quantized = qat.trainer.inference(&qat.vocab).unwrap();
    let shadow = qat.trainer.shadow_inference(&qat.vocab).unwrap();
    let contexts: Vec<&str> = toy.corpus.heldout.iter().map(|p| p.context.as_str()).collect();
    let responses: Vec<&str> = toy.corpus.heldout.iter().map(|p| p.response.as_str()).collect();
    let none = vec![Vec::new(); contexts.len()];
    let mut cos = cosine_rows(&quantized.encode_contexts(&contexts, &none).unwrap(), &shadow.encode_contexts(&contexts, &none).unwrap());
    cos.extend(cosine_rows(&quantized.encode_responses(&responses).unwrap(), &shadow.encode_responses(&responses).unwrap()));
    let min_cos = cos.iter().copied().fold(f64::INFINITY, f64::min);
    let b = min_cos >= 0.99;

    let gap = (qat_recall - f32_recall).abs();
    let c = gap <= 0.05;
    verdict(
        a && b && c,
        format!(
            "(a) {checked} embeddings, worst excess over half step {worst_excess:.2e}: {}; (b) min cosine {min_cos:.5} over {} inputs: {}; (c) R_20@1 quantized {qat_recall:.3} vs 32-bit {f32_recall:.3}, gap {gap:.3}: {}",
            ok(a),
            cos.len(),
            ok(b),
            ok(c)
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b { "ok" } else { "FAILED" }
}

fn serialization(qat: &mut ToyRun, toy: &Toy) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.cvrt");
    let file = qat.trainer.model_file(qat.vocab.digest()).unwrap();
    file.save(&path).unwrap();
    let loaded = ModelFile::load(&path).unwrap();
    let same_bytes = loaded.to_bytes().unwrap() == std::fs::read(&path).unwrap();
    let reloaded = loaded.into_inference(qat.vocab.clone(), Some(false)).unwrap();
    let live = qat.trainer.inference(&qat.vocab).unwrap();
    let contexts: Vec<&str> = toy.corpus.heldout.iter().map(|p| p.context.as_str()).collect();
    let responses: Vec<&str> = toy.corpus.heldout.iter().map(|p| p.response.as_str()).collect();
    let none = vec![Vec::new(); contexts.len()];
    let bits = |m: &InferenceModel| -> Vec<u32> {
        let mut v: Vec<u32> = m.encode_contexts(&contexts, &none).unwrap().iter().map(|x| x.to_bits()).collect();
        v.extend(m.encode_responses(&responses).unwrap().iter().map(|x| x.to_bits()));
        v.extend(m.encode_r(&contexts).unwrap().iter().map(|x| x.to_bits()));
        v
    };
    let identical = bits(&live) == bits(&reloaded);

    let store = &qat.trainer.store;
    let embedding = store.count_params(PrecisionClass::Embedding8);
    let network = store.count_params(PrecisionClass::Param16) + store.count_params(PrecisionClass::Activation16);
    let predicted = embedding + 2 * network;
    let actual = std::fs::metadata(&path).unwrap().len() as usize;
    let rel = (actual as f64 - predicted as f64).abs() / predicted as f64;
    verdict(
        identical && same_bytes && rel <= 0.01,
        format!(
            "encodings bit-identical: {identical}; {actual} bytes for {embedding} embedding + {network} network params ({predicted} bytes), header overhead {:.3}%",
            rel * 100.0
        ),
    )
}

fn multi_context_advantage() -> Verdict {
    let toy = Toy::new(true);
    let mut multi = train_toy(&toy, true, true, TOY_STEPS, None);
    let mut single = train_toy(&toy, false, true, TOY_STEPS, None);
    let rm = toy.recall_at_1(&multi.trainer.inference(&multi.vocab).unwrap(), 10);
    let rs = toy.recall_at_1(&single.trainer.inference(&single.vocab).unwrap(), 10);
    verdict(
        rm >= 0.8 && rs <= 0.2,
        format!("R_10@1 multi-context {rm:.3} vs single-context {rs:.3} after {TOY_STEPS} steps (chance 0.1)"),
    )
}

fn ablations(toy: &Toy) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for a in Ablation::ALL {
        let outcome = catch_unwind(AssertUnwindSafe(|| {
            let mut run = train_toy(toy, false, true, ABLATION_STEPS, Some(a));
            let r = toy.recall_at_1(&run.trainer.inference(&run.vocab).unwrap(), 20);
            (run.final_loss, run.trainer.scaler.total_skips, r)
        }));
        match outcome {
            Ok((Some(loss), skips, r)) if loss.is_finite() => parts.push(format!("{}: R_20@1 {r:.3} loss {loss:.3} skips {skips}", a.letter())),
            Ok((loss, _, _)) => {
                pass = false;
                parts.push(format!("{}: diverged (final loss {loss:?})", a.letter()));
            }
            Err(_) => {
                pass = false;
                parts.push(format!("{}: aborted", a.letter()));
            }
        }
    }
    verdict(pass, format!("{ABLATION_STEPS} steps each; {}", parts.join("; ")))
}

fn main() {
    // The libtest-style filter arguments are accepted and ignored.
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    let mut record = |name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            verdict(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((name, v));
    };

    record("gradient oracle", &mut gradient_oracle);
    record("loss sanity", &mut loss_sanity);
    record("positional scheme", &mut positional_scheme);
    record("fused reduction oracle", &mut fused_reduction);
    record("metric oracles", &mut metric_oracles);

    let toy = Toy::new(false);
    let mut qat = catch_unwind(AssertUnwindSafe(|| train_toy(&toy, false, true, TOY_STEPS, None))).ok();
    let f32_recall = catch_unwind(AssertUnwindSafe(|| {
        let mut run = train_toy(&toy, false, false, TOY_STEPS, None);
        toy.recall_at_1(&run.trainer.inference(&run.vocab).unwrap(), 20)
    }))
    .ok();
    let mut qat_recall = None;
    record("toy retrieval convergence", &mut || match qat.as_mut() {
        Some(run) => {
            let (v, r) = toy_convergence(run, &toy);
            qat_recall = Some(r);
            v
        }
        None => verdict(false, "quantization-aware toy run aborted"),
    });
    record("quantization fidelity", &mut || match (qat.as_mut(), qat_recall, f32_recall) {
        (Some(run), Some(q), Some(f)) => quantization_fidelity(run, &toy, q, f),
        _ => verdict(false, "a toy run aborted"),
    });
    record("serialization", &mut || match qat.as_mut() {
        Some(run) => serialization(run, &toy),
        None => verdict(false, "quantization-aware toy run aborted"),
    });
    record("multi-context advantage", &mut multi_context_advantage);
    record("ablations train without divergence", &mut || ablations(&toy));

    let failed = results.iter().filter(|(_, v)| !v.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
