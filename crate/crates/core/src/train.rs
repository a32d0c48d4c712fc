//! Pretraining and fine-tuning: corpus ingestion, batching, ADADELTA with a
//! cosine learning-rate schedule, gradient clipping, L2 regularization,
//! quantization-aware steps and checkpointing.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::encoder::{PackedBatch, RunMode};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalInstance, EvalReport};
use crate::model::{DualEncoder, InferenceModel, ObjectiveOptions, PairBatch};
use crate::multi_context::{build_extra_context, ContextJoin, SubObjectiveWeights};
use crate::objective::ScoreConfig;
use crate::params::{ParamStore, Weights};
use crate::quant::{LossScaler, QuantState, StepAction, DEFAULT_RANGE_UPDATE_PERIOD, LOSS_SCALE, MAX_CONSECUTIVE_SKIPS};
use crate::serialize::ModelFile;
use crate::tokenizer::SubwordVocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub l2_reg: f64,
    pub embed_grad_clip: f64,
    pub smoothing: f64,
    pub dropout: f64,
    pub max_steps: u64,
    pub anneal_steps: u64,
    /// Steps between embedding range refreshes.
    pub range_update_period: u64,
    /// Quantization-aware mixed precision; off means plain 32-bit training.
    pub quantize: bool,
    pub loss_scale: f32,
    pub max_consecutive_skips: u32,
    pub workers: usize,
    pub seed: u64,
    pub sub_weights: SubObjectiveWeights,
    pub context_join: ContextJoin,
    /// Validation every this many steps (0 disables).
    pub eval_every: u64,
    pub eval_pool_size: usize,
    /// Checkpoint every this many steps (0 means only at the end).
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            batch_size: 512,
            lr_start: 1.0,
            lr_end: 0.001,
            rho: 0.9,
            epsilon: 1e-6,
            l2_reg: 1e-5,
            embed_grad_clip: 1.0,
            smoothing: 0.2,
            dropout: 0.0,
            max_steps: 100_000,
            anneal_steps: 10_000,
            range_update_period: DEFAULT_RANGE_UPDATE_PERIOD,
            quantize: true,
            loss_scale: LOSS_SCALE,
            max_consecutive_skips: MAX_CONSECUTIVE_SKIPS,
            workers: 1,
            seed: 0,
            sub_weights: SubObjectiveWeights::default(),
            context_join: ContextJoin::Plain,
            eval_every: 0,
            eval_pool_size: 100,
            checkpoint_every: 0,
            log_every: 1,
        }
    }

    pub fn finetune() -> Self {
        Self { batch_size: 256, lr_start: 0.1, lr_end: 0.0001, dropout: 0.2, max_steps: 60_000, ..Self::pretrain() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must be in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.rho) || self.epsilon <= 0.0 {
            return Err(Error::config("rho must be in [0, 1) and epsilon positive"));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::config("smoothing must be in [0, 1)"));
        }
        if self.loss_scale <= 0.0 || self.range_update_period == 0 {
            return Err(Error::config("loss_scale and range_update_period must be positive"));
        }
        Ok(())
    }

    pub fn score_config(&self, model: &ModelConfig) -> ScoreConfig {
        ScoreConfig { dim: model.out_dim, anneal_steps: self.anneal_steps, smoothing: self.smoothing }
    }
}

/// `end + (start - end) * (1 + cos(pi * t / max_steps)) / 2`, held at `end` past `max_steps`.
pub fn cosine_lr(step: u64, max_steps: u64, start: f64, end: f64) -> f64 {
    if max_steps == 0 {
        return start;
    }
    let t = (step.min(max_steps)) as f64 / max_steps as f64;
    end + (start - end) * (1.0 + (PI * t).cos()) / 2.0
}

/// Rescale `g` in place to norm at most `max_norm`; returns the original norm.
pub fn clip_norm(g: &mut [f32], max_norm: f64) -> f64 {
    let norm = g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        g.iter_mut().for_each(|v| *v *= s);
    }
    norm
}

/// ADADELTA with squared-gradient and squared-update running averages.
#[derive(Debug, Clone, PartialEq)]
pub struct Adadelta {
    pub rho: f64,
    pub epsilon: f64,
    pub sq_grad: Vec<Vec<f32>>,
    pub sq_update: Vec<Vec<f32>>,
}

impl Adadelta {
    pub fn new(store: &ParamStore, rho: f64, epsilon: f64) -> Self {
        let zeros: Vec<Vec<f32>> = store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { rho, epsilon, sq_grad: zeros.clone(), sq_update: zeros }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Weights<f32>, lr: f64) {
        let (rho, eps) = (self.rho, self.epsilon);
        for (((t, g), eg), ex) in store.tensors_mut().iter_mut().zip(grads.iter()).zip(&mut self.sq_grad).zip(&mut self.sq_update) {
            for i in 0..t.data.len() {
                let gi = g[i] as f64;
                let acc_g = rho * eg[i] as f64 + (1.0 - rho) * gi * gi;
                let delta = ((ex[i] as f64 + eps).sqrt() / (acc_g + eps).sqrt()) * gi;
                let acc_x = rho * ex[i] as f64 + (1.0 - rho) * delta * delta;
                eg[i] = acc_g as f32;
                ex[i] = acc_x as f32;
                t.data[i] = (t.data[i] as f64 - lr * delta) as f32;
            }
        }
    }
}

/// One line of the training corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub context: String,
    pub response: String,
    /// Earlier turns, oldest first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_contexts: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IngestMode {
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub x: Vec<u32>,
    pub y: Vec<u32>,
    pub z: Option<Vec<u32>>,
}

/// Tokenized training pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub examples: Vec<Example>,
    pub mode: IngestMode,
    /// Lines that were malformed or tokenized to nothing.
    pub skipped: usize,
}

impl Corpus {
    pub fn from_records<I: IntoIterator<Item = CorpusRecord>>(
        records: I,
        vocab: &SubwordVocab,
        mode: IngestMode,
        max_len: usize,
        join: ContextJoin,
    ) -> Self {
        let mut examples = Vec::new();
        let mut skipped = 0;
        for r in records {
            match make_example(&r, vocab, mode, max_len, join) {
                Some(e) => examples.push(e),
                None => skipped += 1,
            }
        }
        Self { examples, mode, skipped }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn batches_per_epoch(&self, k: usize) -> usize {
        self.examples.len() / k
    }

    /// Index batches of epoch `epoch`: a seeded uniform shuffle cut into
    /// full batches of `k`; the remainder is dropped.
    pub fn epoch_batches(&self, k: usize, epoch: u64, seed: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0xA076_1D64_78BD_642F));
        order.shuffle(&mut rng);
        order.chunks_exact(k).map(|c| c.to_vec()).collect()
    }

    pub fn batch(&self, indices: &[usize]) -> PairBatch {
        let ex: Vec<&Example> = indices.iter().map(|&i| &self.examples[i]).collect();
        PairBatch {
            x: PackedBatch::from_id_slices(ex.iter().map(|e| e.x.as_slice())),
            y: PackedBatch::from_id_slices(ex.iter().map(|e| e.y.as_slice())),
            z: (self.mode == IngestMode::Multi)
                .then(|| PackedBatch::from_id_slices(ex.iter().map(|e| e.z.as_deref().unwrap_or(&[])))),
        }
    }
}

fn make_example(r: &CorpusRecord, vocab: &SubwordVocab, mode: IngestMode, max_len: usize, join: ContextJoin) -> Option<Example> {
    let x = vocab.tokenize_limited(&r.context, max_len).ids;
    let y = vocab.tokenize_limited(&r.response, max_len).ids;
    if x.is_empty() || y.is_empty() {
        return None;
    }
    let z = match mode {
        IngestMode::Single => None,
        IngestMode::Multi => {
            let turns = r.extra_contexts.as_deref().unwrap_or(&[]);
            Some(vocab.tokenize_limited(&build_extra_context(turns, join), max_len).ids)
        }
    };
    Some(Example { x, y, z })
}

/// Parse newline-delimited JSON records; malformed lines are skipped and counted.
pub fn read_records<R: BufRead>(reader: R) -> Result<(Vec<CorpusRecord>, usize)> {
    let mut records = Vec::new();
    let mut skipped = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CorpusRecord>(&line) {
            Ok(r) => records.push(r),
            Err(e) => {
                log::debug!("skipping malformed corpus line: {e}");
                skipped += 1;
            }
        }
    }
    Ok((records, skipped))
}

/// Read and tokenize a corpus file. Fails if no usable record remains.
pub fn ingest(path: impl AsRef<Path>, vocab: &SubwordVocab, mode: IngestMode, max_len: usize, join: ContextJoin) -> Result<Corpus> {
    let f = fs::File::open(path.as_ref())?;
    ingest_reader(BufReader::new(f), vocab, mode, max_len, join)
}

pub fn ingest_reader<R: BufRead>(reader: R, vocab: &SubwordVocab, mode: IngestMode, max_len: usize, join: ContextJoin) -> Result<Corpus> {
    let (records, bad) = read_records(reader)?;
    let mut corpus = Corpus::from_records(records, vocab, mode, max_len, join);
    corpus.skipped += bad;
    if corpus.is_empty() {
        return Err(Error::data(format!("no usable records ({} skipped)", corpus.skipped)));
    }
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    /// Weighted objective divided by the batch size.
    pub loss: f64,
    /// Immediate, extra and combined sub-losses per row, in multi-context mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sub_losses: Option<[f64; 3]>,
    pub lr: f64,
    pub scale: f64,
    pub skipped: bool,
    pub embed_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    pub skipped_steps: u64,
    pub final_loss: Option<f64>,
    pub validation: Option<EvalReport>,
}

#[derive(Debug, Serialize)]
struct MetricsLine<'a> {
    #[serde(flatten)]
    step: &'a StepReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    validation: Option<&'a EvalReport>,
}

/// Where a run writes its artifacts.
#[derive(Default)]
pub struct RunOutputs<'a> {
    pub validation: Option<(&'a SubwordVocab, &'a [EvalInstance])>,
    pub metrics: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<PathBuf>,
    pub vocab_digest: [u8; 32],
}

pub const MODEL_FILE_NAME: &str = "model.cvrt";
pub const STATE_FILE_NAME: &str = "state.bin";

pub struct Trainer {
    pub config: TrainConfig,
    pub model: DualEncoder,
    pub store: ParamStore,
    pub optimizer: Adadelta,
    pub quant: QuantState,
    pub scaler: LossScaler,
    pub step: u64,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, config: TrainConfig) -> Result<Self> {
        let (model, store) = DualEncoder::init(model_cfg, config.seed)?;
        Self::from_parts(model, store, config)
    }

    /// Start from existing shadows, e.g. a pretrained model being fine-tuned.
    pub fn from_store(model_cfg: &ModelConfig, store: ParamStore, config: TrainConfig) -> Result<Self> {
        let model = DualEncoder::from_store(model_cfg, &store)?;
        Self::from_parts(model, store, config)
    }

    fn from_parts(model: DualEncoder, store: ParamStore, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = Adadelta::new(&store, config.rho, config.epsilon);
        let quant = QuantState::new(&store);
        let mut scaler = LossScaler::new(if config.quantize { config.loss_scale } else { 1.0 });
        scaler.max_consecutive_skips = config.max_consecutive_skips;
        Ok(Self { config, model, store, optimizer, quant, scaler, step: 0 })
    }

    pub fn model_config(&self) -> &ModelConfig {
        self.model.config()
    }

    /// Weights a forward pass sees at this step.
    pub fn render(&mut self) -> Weights<f32> {
        if self.config.quantize {
            self.quant.render(&self.store)
        } else {
            self.store.to_weights()
        }
    }

    pub fn mode(&self) -> RunMode {
        RunMode { dropout: self.config.dropout, mixed: self.config.quantize }
    }

    pub fn train_step(&mut self, batch: &PairBatch) -> Result<StepReport> {
        let w = self.render();
        let opts = ObjectiveOptions {
            step: self.step,
            score: self.config.score_config(self.model.config()),
            sub_weights: self.config.sub_weights,
            mode: self.mode(),
            grad_scale: self.scaler.scale as f64,
            workers: self.config.workers,
            dropout_seed: self.config.seed ^ self.step.wrapping_mul(0xE703_7ED1_A0B4_28DB),
        };
        let out = self.model.loss_and_grads(&w, batch, &opts)?;
        let mut grads = out.grads;
        if !out.loss.is_finite() {
            grads.iter_mut().for_each(|g| g.fill(f32::NAN));
        }
        let k = batch.len() as f64;
        let lr = cosine_lr(self.step, self.config.max_steps, self.config.lr_start, self.config.lr_end);
        let mut report = StepReport {
            step: self.step,
            loss: out.loss as f64 / k,
            sub_losses: out.parts.map(|p| p.map(|v| v as f64 / k)),
            lr,
            scale: opts.score.scale(self.step),
            skipped: false,
            embed_grad_norm: 0.0,
        };
        match self.scaler.unscale(&mut grads)? {
            StepAction::Skip => report.skipped = true,
            StepAction::Apply => {
                report.embed_grad_norm = clip_norm(grads.vec_mut(self.model.encoder.embed), self.config.embed_grad_clip);
                let l2 = self.config.l2_reg as f32;
                for (g, t) in grads.iter_mut().zip(self.store.tensors()) {
                    for (gi, &wi) in g.iter_mut().zip(&t.data) {
                        *gi += l2 * wi;
                    }
                }
                self.optimizer.step(&mut self.store, &grads, lr);
            }
        }
        self.step += 1;
        if self.config.quantize && (self.step % self.config.range_update_period == 0 || self.quant.clamped_since_update > 0) {
            self.quant.update(&self.store);
        }
        Ok(report)
    }

    /// Inference model over the current weights (quantized rendering when
    /// training quantization-aware).
    pub fn inference(&mut self, vocab: &SubwordVocab) -> Result<InferenceModel> {
        let w = self.render();
        let mode = RunMode { dropout: 0.0, mixed: self.config.quantize };
        InferenceModel::new(self.model.clone(), w, vocab.clone(), mode).map(|mut m| {
            m.join = self.config.context_join;
            m
        })
    }

    /// Inference model over the 32-bit shadows.
    pub fn shadow_inference(&self, vocab: &SubwordVocab) -> Result<InferenceModel> {
        let mut m = InferenceModel::new(self.model.clone(), self.store.to_weights(), vocab.clone(), RunMode::FULL)?;
        m.join = self.config.context_join;
        Ok(m)
    }

    pub fn validate_now(&mut self, vocab: &SubwordVocab, instances: &[EvalInstance]) -> Result<EvalReport> {
        let m = self.inference(vocab)?;
        evaluate(instances, &m, self.config.eval_pool_size, &[1])
    }

    pub fn model_file(&self, vocab_digest: [u8; 32]) -> Result<ModelFile> {
        ModelFile::from_store(self.model.config(), vocab_digest, &self.store, &self.quant)
    }

    /// Train until `max_steps`, continuing from the current step counter.
    pub fn run(&mut self, corpus: &Corpus, mut out: RunOutputs<'_>) -> Result<RunSummary> {
        let k = self.config.batch_size;
        let per_epoch = corpus.batches_per_epoch(k);
        if per_epoch == 0 && self.step < self.config.max_steps {
            return Err(Error::data(format!("corpus has {} usable pairs, fewer than one batch of {k}", corpus.len())));
        }
        if self.model.config().multi_context != (corpus.mode == IngestMode::Multi) {
            return Err(Error::config("corpus mode does not match the model's multi-context flag"));
        }
        if self.step == 0 {
            self.checkpoint(&out)?;
        }
        let mut final_loss = None;
        let mut validation = None;
        let mut epoch_cache: Option<(u64, Vec<Vec<usize>>)> = None;
        while self.step < self.config.max_steps {
            let epoch = self.step / per_epoch as u64;
            if epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
                epoch_cache = Some((epoch, corpus.epoch_batches(k, epoch, self.config.seed)));
            }
            let idx = &epoch_cache.as_ref().unwrap().1[(self.step % per_epoch as u64) as usize];
            let report = self.train_step(&corpus.batch(idx))?;
            if !report.skipped {
                final_loss = Some(report.loss);
            }
            let done = self.step >= self.config.max_steps;
            let eval_due = self.config.eval_every > 0 && (self.step % self.config.eval_every == 0 || done);
            let report_val = match (&out.validation, eval_due) {
                (Some((vocab, inst)), true) => {
                    let r = self.validate_now(vocab, inst)?;
                    log::info!("step {} validation R@1 {:.4}", self.step, r.recall.get(&1).copied().unwrap_or(0.0));
                    Some(r)
                }
                _ => None,
            };
            let log_due = self.config.log_every > 0 && (report.step % self.config.log_every == 0 || done);
            if let Some(w) = out.metrics.as_mut() {
                if log_due || report_val.is_some() {
                    serde_json::to_writer(&mut *w, &MetricsLine { step: &report, validation: report_val.as_ref() })?;
                    w.write_all(b"\n")?;
                }
            }
            if report_val.is_some() {
                validation = report_val;
            }
            if self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0 && !done {
                self.checkpoint(&out)?;
            }
        }
        if let Some(w) = out.metrics.as_mut() {
            w.flush()?;
        }
        self.checkpoint(&out)?;
        Ok(RunSummary { steps: self.step, skipped_steps: self.scaler.total_skips, final_loss, validation })
    }

    fn checkpoint(&self, out: &RunOutputs<'_>) -> Result<()> {
        if let Some(dir) = &out.checkpoint_dir {
            fs::create_dir_all(dir)?;
            self.model_file(out.vocab_digest)?.save(dir.join(MODEL_FILE_NAME))?;
            self.save_state(dir.join(STATE_FILE_NAME))?;
        }
        Ok(())
    }

    /// 32-bit training state: shadows, optimizer accumulators, counters.
    pub fn save_state(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = StateMeta {
            model: self.model.config().clone(),
            step: self.step,
            quant: self.quant.clone(),
            scaler: self.scaler.clone(),
            tensors: self.store.tensors().iter().map(|t| (t.name.clone(), t.numel())).collect(),
        };
        let meta = serde_json::to_vec(&meta)?;
        let mut buf = Vec::with_capacity(16 + meta.len() + 12 * self.store.total_params());
        buf.extend_from_slice(STATE_MAGIC);
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(&meta);
        for ((t, g), x) in self.store.tensors().iter().zip(&self.optimizer.sq_grad).zip(&self.optimizer.sq_update) {
            for v in t.data.iter().chain(g).chain(x) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        f.sync_all()?;
        Ok(())
    }

    /// Resume from [`Trainer::save_state`] output with a (possibly changed) run config.
    pub fn load_state(path: impl AsRef<Path>, config: TrainConfig) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = || Error::format("training state file is truncated or corrupt");
        if bytes.len() < 8 || &bytes[..4] != STATE_MAGIC {
            return Err(Error::format("not a training state file"));
        }
        let meta_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let meta_end = 8usize.checked_add(meta_len).filter(|&e| e <= bytes.len()).ok_or_else(bad)?;
        let meta: StateMeta = serde_json::from_slice(&bytes[8..meta_end])?;
        let mut trainer = Trainer::new(&meta.model, config)?;
        if trainer.store.len() != meta.tensors.len() {
            return Err(Error::format("training state does not match the model layout"));
        }
        let mut floats = bytes[meta_end..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        if bytes[meta_end..].len() % 4 != 0 {
            return Err(bad());
        }
        for (i, (name, n)) in meta.tensors.iter().enumerate() {
            let t = &mut trainer.store.tensors_mut()[i];
            if &t.name != name || t.numel() != *n {
                return Err(Error::format(format!("state tensor {name} does not match the model layout")));
            }
            for dst in [&mut t.data, &mut trainer.optimizer.sq_grad[i], &mut trainer.optimizer.sq_update[i]] {
                for v in dst.iter_mut() {
                    *v = floats.next().ok_or_else(bad)?;
                }
            }
        }
        if floats.next().is_some() {
            return Err(bad());
        }
        trainer.step = meta.step;
        trainer.quant = meta.quant;
        let max_skips = trainer.config.max_consecutive_skips;
        trainer.scaler = LossScaler { max_consecutive_skips: max_skips, ..meta.scaler };
        Ok(trainer)
    }
}

const STATE_MAGIC: &[u8; 4] = b"CVST";

#[derive(Debug, Serialize, Deserialize)]
struct StateMeta {
    model: ModelConfig,
    step: u64,
    quant: QuantState,
    scaler: LossScaler,
    tensors: Vec<(String, usize)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::VocabLimits;

    #[test]
    fn lr_schedule_endpoints() {
        assert!((cosine_lr(0, 1000, 1.0, 0.001) - 1.0).abs() < 1e-9);
        assert!((cosine_lr(1000, 1000, 1.0, 0.001) - 0.001).abs() < 1e-9);
        assert!((cosine_lr(500, 1000, 1.0, 0.001) - 0.5005).abs() < 1e-9);
        assert!((cosine_lr(5000, 1000, 0.1, 0.0001) - 0.0001).abs() < 1e-12);
    }

    #[test]
    fn adadelta_first_step_oracle() {
        let mut store = ParamStore::new();
        let id = store.add("w", vec![2], crate::params::PrecisionClass::Param16, vec![0.5, -0.5]);
        let mut opt = Adadelta::new(&store, 0.9, 1e-6);
        let g = Weights::from_parts(vec![vec![2]], vec![vec![1.0, 0.0]]);
        opt.step(&mut store, &g, 1.0);
        let expected = -(1e-6f64 / (0.1 + 1e-6)).sqrt();
        assert!((store.get(id).data[0] as f64 - (0.5 + expected)).abs() < 1e-7);
        assert!((expected + 3.162e-3).abs() < 1e-5);
        assert!((opt.sq_grad[0][0] - 0.1).abs() < 1e-7);
        assert_eq!(store.get(id).data[1], -0.5);
        // Zero gradients leave parameters alone while the averages decay.
        let before = opt.sq_grad[0][0];
        let zero = Weights::from_parts(vec![vec![2]], vec![vec![0.0, 0.0]]);
        let w0 = store.get(id).data.clone();
        opt.step(&mut store, &zero, 1.0);
        assert_eq!(store.get(id).data, w0);
        assert!(opt.sq_grad[0][0] < before);
    }

    #[test]
    fn clipping_rescales_to_unit_norm() {
        let mut g = vec![3.0f32, 4.0];
        assert_eq!(clip_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-7 && (g[1] - 0.8).abs() < 1e-7);
        let mut small = vec![0.1f32, 0.1];
        clip_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1, 0.1]);
    }

    fn vocab() -> SubwordVocab {
        SubwordVocab::from_subwords(["hi", "there", "how", "are", "you"], VocabLimits { oov_buckets: 5, ..VocabLimits::default() }).unwrap()
    }

    #[test]
    fn ingest_counts_and_batches() {
        let v = vocab();
        let mut text = String::new();
        for i in 0..1024 {
            text.push_str(&format!("{{\"context\": \"hi {i}\", \"response\": \"you\"}}\n"));
        }
        text.push_str("{\"context\": \"hi\"}\n");
        text.push_str("not json\n");
        text.push_str("{\"context\": \"\", \"response\": \"you\"}\n");
        let c = ingest_reader(text.as_bytes(), &v, IngestMode::Single, 60, ContextJoin::Plain).unwrap();
        assert_eq!(c.len(), 1024);
        assert_eq!(c.skipped, 3);
        assert_eq!(c.epoch_batches(512, 0, 1).len(), 2);
        assert_ne!(c.epoch_batches(512, 0, 1), c.epoch_batches(512, 1, 1));
        assert!(ingest_reader("bad\n".as_bytes(), &v, IngestMode::Single, 60, ContextJoin::Plain).is_err());
    }

    #[test]
    fn missing_history_gives_empty_z() {
        let v = vocab();
        let c = ingest_reader(
            "{\"context\": \"hi\", \"response\": \"you\"}\n{\"context\": \"hi\", \"response\": \"you\", \"extra_contexts\": [\"how\", \"are\"]}\n".as_bytes(),
            &v,
            IngestMode::Multi,
            60,
            ContextJoin::Plain,
        )
        .unwrap();
        assert_eq!(c.examples[0].z, Some(vec![]));
        assert_eq!(c.examples[1].z, Some(vec![v.id_of("are").unwrap(), v.id_of("how").unwrap()]));
    }
}
