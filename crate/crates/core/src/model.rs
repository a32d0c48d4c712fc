//! The assembled dual encoder: one shared tower, one projection head per side.
//!
//! [`DualEncoder`] only records where each tensor lives in a [`ParamStore`];
//! values come from whatever [`Weights`] rendering is passed in, so the same
//! code runs the shadow model, the quantized model and the f64 oracle.

use std::ops::Range;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::encoder::{seeded_rng, Encoder, EncoderTape, PackedBatch, RunMode};
use crate::error::{Error, Result};
use crate::heads::{HeadTape, ProjectionHead, Side};
use crate::multi_context::{build_extra_context, combine_contexts, multi_context_loss, ContextJoin, SubObjectiveWeights};
use crate::numeric::Scalar;
use crate::objective::{batch_loss, ScoreConfig};
use crate::params::{ParamStore, Weights};
use crate::tokenizer::SubwordVocab;

#[derive(Debug, Clone)]
pub struct DualEncoder {
    cfg: ModelConfig,
    pub encoder: Encoder,
    pub input_head: ProjectionHead,
    pub response_head: ProjectionHead,
    pub extra_head: Option<ProjectionHead>,
}

impl DualEncoder {
    /// Fresh parameters for `cfg`, drawn from `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = seeded_rng(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::init(cfg, &mut store, &mut rng);
        let input_head = ProjectionHead::init(cfg, Side::Input, &mut store, &mut rng);
        let response_head = ProjectionHead::init(cfg, Side::Response, &mut store, &mut rng);
        let extra_head = cfg.multi_context.then(|| ProjectionHead::init(cfg, Side::ExtraContext, &mut store, &mut rng));
        Ok((Self { cfg: cfg.clone(), encoder, input_head, response_head, extra_head }, store))
    }

    pub fn from_store(cfg: &ModelConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            encoder: Encoder::from_store(cfg, store)?,
            input_head: ProjectionHead::from_store(cfg, Side::Input, store)?,
            response_head: ProjectionHead::from_store(cfg, Side::Response, store)?,
            extra_head: if cfg.multi_context { Some(ProjectionHead::from_store(cfg, Side::ExtraContext, store)?) } else { None },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn head(&self, side: Side) -> Result<&ProjectionHead> {
        match side {
            Side::Input => Ok(&self.input_head),
            Side::Response => Ok(&self.response_head),
            Side::ExtraContext => {
                self.extra_head.as_ref().ok_or_else(|| Error::config("model has no extra-context head"))
            }
        }
    }

    /// Reduced representations `r`, before any projection head.
    pub fn encode_r<T: Scalar>(&self, w: &Weights<T>, batch: &PackedBatch, mode: RunMode) -> Result<Array2<T>> {
        Ok(self.encoder.forward(w, batch, RunMode { dropout: 0.0, ..mode }, None)?.0)
    }

    /// Unit-norm encodings for one side.
    pub fn encode<T: Scalar>(&self, w: &Weights<T>, batch: &PackedBatch, side: Side, mode: RunMode) -> Result<Array2<T>> {
        let r = self.encode_r(w, batch, mode)?;
        let mut h = self.head(side)?.forward(w, r.view(), mode.mixed).h;
        zero_empty_rows(&mut h, batch);
        Ok(h)
    }

    /// Context encodings: `h_x`, or `h_xz` when extra contexts are given.
    pub fn encode_context<T: Scalar>(
        &self,
        w: &Weights<T>,
        x: &PackedBatch,
        z: Option<&PackedBatch>,
        mode: RunMode,
    ) -> Result<Array2<T>> {
        let hx = self.encode(w, x, Side::Input, mode)?;
        match z {
            None => Ok(hx),
            Some(z) => {
                let hz = self.encode(w, z, Side::ExtraContext, mode)?;
                Ok(combine_contexts(hx.view(), hz.view()).0)
            }
        }
    }

    /// Batch objective and parameter gradients.
    ///
    /// With `workers > 1` the batch is split into contiguous shards, each
    /// shard runs its forward pass on its own thread, the encodings are
    /// gathered so the loss sees all `K x K` pairs, and the shard backward
    /// passes run after the loss. Gradients are summed in shard order.
    pub fn loss_and_grads<T: Scalar>(&self, w: &Weights<T>, batch: &PairBatch, opts: &ObjectiveOptions) -> Result<LossOutput<T>> {
        let k = batch.len();
        if self.cfg.multi_context != batch.z.is_some() {
            return Err(Error::config("multi-context model and batch disagree about extra contexts"));
        }
        let shards = shard_ranges(k, opts.workers.max(1));
        let forwards: Vec<Result<ShardForward<T>>> = if shards.len() == 1 {
            vec![self.shard_forward(w, batch, 0, opts)]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = shards
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        let sub = batch.select(r.clone());
                        scope.spawn(move || self.shard_forward(w, &sub, i as u64, opts))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("shard forward panicked")).collect()
            })
        };
        let forwards = forwards.into_iter().collect::<Result<Vec<_>>>()?;

        let gather = |f: fn(&ShardForward<T>) -> ArrayView2<T>| -> Array2<T> {
            let views: Vec<_> = forwards.iter().map(f).collect();
            concatenate(Axis(0), &views).expect("shard encodings")
        };
        let hx = gather(|s| s.x.1.h.view());
        let hy = gather(|s| s.y.1.h.view());
        let (loss, parts, d_hx, d_hy, d_hz) = match &batch.z {
            None => {
                let l = batch_loss(hx.view(), hy.view(), opts.step, &opts.score)?;
                (l.loss, None, l.d_hx, l.d_hy, None)
            }
            Some(_) => {
                let hz = gather(|s| s.z.as_ref().unwrap().1.h.view());
                let l = multi_context_loss(hx.view(), hz.view(), hy.view(), opts.step, &opts.score, opts.sub_weights)?;
                (l.total, Some(l.parts), l.d_hx, l.d_hy, Some(l.d_hz))
            }
        };
        let gs = T::c(opts.grad_scale);
        let (d_hx, d_hy, d_hz) = (d_hx * gs, d_hy * gs, d_hz.map(|d| d * gs));

        let backward = |r: &Range<usize>, fw: &ShardForward<T>| -> Weights<T> {
            let sub = if shards.len() == 1 { None } else { Some(batch.select(r.clone())) };
            let b = sub.as_ref().unwrap_or(batch);
            let mut grads = Weights::zeros_like(w);
            let mut side = |head: &ProjectionHead, packed: &PackedBatch, f: &(EncoderTape<T>, HeadTape<T>), d: &Array2<T>| {
                let mut dh = d.slice(s![r.clone(), ..]).to_owned();
                zero_empty_rows(&mut dh, packed);
                let dr = head.backward(w, &f.1, dh.view(), &mut grads, opts.mode.mixed);
                self.encoder.backward(w, packed, &f.0, dr.view(), &mut grads, opts.mode);
            };
            side(&self.input_head, &b.x, &fw.x, &d_hx);
            side(&self.response_head, &b.y, &fw.y, &d_hy);
            if let (Some(zb), Some(zf), Some(dz), Some(head)) = (&b.z, &fw.z, &d_hz, &self.extra_head) {
                side(head, zb, zf, dz);
            }
            grads
        };
        let shard_grads: Vec<Weights<T>> = if shards.len() == 1 {
            vec![backward(&shards[0], &forwards[0])]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = shards
                    .iter()
                    .zip(&forwards)
                    .map(|(r, f)| {
                        let backward = &backward;
                        scope.spawn(move || backward(r, f))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("shard backward panicked")).collect()
            })
        };
        let mut iter = shard_grads.into_iter();
        let mut grads = iter.next().expect("at least one shard");
        for g in iter {
            grads.add_assign(&g);
        }
        Ok(LossOutput { loss, parts, grads })
    }

    /// Batch objective only, without the backward pass.
    pub fn loss<T: Scalar>(&self, w: &Weights<T>, batch: &PairBatch, opts: &ObjectiveOptions) -> Result<T> {
        if self.cfg.multi_context != batch.z.is_some() {
            return Err(Error::config("multi-context model and batch disagree about extra contexts"));
        }
        let f = self.shard_forward(w, batch, 0, opts)?;
        match &f.z {
            None => Ok(batch_loss(f.x.1.h.view(), f.y.1.h.view(), opts.step, &opts.score)?.loss),
            Some(z) => Ok(multi_context_loss(f.x.1.h.view(), z.1.h.view(), f.y.1.h.view(), opts.step, &opts.score, opts.sub_weights)?.total),
        }
    }

    fn shard_forward<T: Scalar>(&self, w: &Weights<T>, batch: &PairBatch, shard: u64, opts: &ObjectiveOptions) -> Result<ShardForward<T>> {
        let mut rng = (opts.mode.dropout > 0.0).then(|| seeded_rng(opts.dropout_seed ^ (shard.wrapping_mul(0x9E37_79B9_7F4A_7C15))));
        let side = |head: &ProjectionHead, packed: &PackedBatch, rng: Option<&mut ChaCha8Rng>| -> Result<(EncoderTape<T>, HeadTape<T>)> {
            let (r, tape) = self.encoder.forward(w, packed, opts.mode, rng)?;
            let mut ht = head.forward(w, r.view(), opts.mode.mixed);
            zero_empty_rows(&mut ht.h, packed);
            Ok((tape, ht))
        };
        let x = side(&self.input_head, &batch.x, rng.as_mut())?;
        let y = side(&self.response_head, &batch.y, rng.as_mut())?;
        let z = match (&batch.z, &self.extra_head) {
            (Some(zb), Some(head)) => Some(side(head, zb, rng.as_mut())?),
            _ => None,
        };
        Ok(ShardForward { x, y, z })
    }
}

struct ShardForward<T> {
    x: (EncoderTape<T>, HeadTape<T>),
    y: (EncoderTape<T>, HeadTape<T>),
    z: Option<(EncoderTape<T>, HeadTape<T>)>,
}

/// An empty sequence carries no information: its encoding is the zero
/// vector and it passes no gradient back into the head.
fn zero_empty_rows<T: Scalar>(h: &mut Array2<T>, batch: &PackedBatch) {
    for i in 0..batch.num_seqs() {
        if batch.seq_len(i) == 0 {
            h.row_mut(i).fill(T::zero());
        }
    }
}

fn shard_ranges(k: usize, workers: usize) -> Vec<Range<usize>> {
    let workers = workers.min(k.max(1));
    let base = k / workers;
    let extra = k % workers;
    let mut out = Vec::with_capacity(workers);
    let mut start = 0;
    for i in 0..workers {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

/// Settings for one evaluation of the training objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveOptions {
    pub step: u64,
    pub score: ScoreConfig,
    pub sub_weights: SubObjectiveWeights,
    pub mode: RunMode,
    /// Multiplier applied to the loss gradient before backpropagation (loss scaling).
    pub grad_scale: f64,
    pub workers: usize,
    pub dropout_seed: u64,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        Self {
            step: 0,
            score: ScoreConfig::default(),
            sub_weights: SubObjectiveWeights::default(),
            mode: RunMode::FULL,
            grad_scale: 1.0,
            workers: 1,
            dropout_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    /// Weighted total, summed over the batch rows.
    pub loss: T,
    /// Immediate, extra and combined sub-losses in multi-context mode.
    pub parts: Option<[T; 3]>,
    pub grads: Weights<T>,
}

/// Aligned inputs, responses and optional extra contexts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairBatch {
    pub x: PackedBatch,
    pub y: PackedBatch,
    pub z: Option<PackedBatch>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.x.num_seqs()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: Range<usize>) -> PairBatch {
        let pick = |p: &PackedBatch| PackedBatch::from_id_slices(rows.clone().map(|i| &p.ids()[p.range(i)]));
        PairBatch { x: pick(&self.x), y: pick(&self.y), z: self.z.as_ref().map(pick) }
    }
}

/// A frozen model with its tokenizer, for encoding raw text.
#[derive(Debug, Clone)]
pub struct InferenceModel {
    pub model: DualEncoder,
    pub weights: Weights<f32>,
    pub vocab: SubwordVocab,
    pub mode: RunMode,
    pub join: ContextJoin,
}

impl InferenceModel {
    pub fn new(model: DualEncoder, weights: Weights<f32>, vocab: SubwordVocab, mode: RunMode) -> Result<Self> {
        if vocab.total_ids() != model.config().embedding_rows() {
            return Err(Error::config(format!(
                "vocabulary addresses {} ids but the model has {} embedding rows",
                vocab.total_ids(),
                model.config().embedding_rows()
            )));
        }
        Ok(Self { model, weights, vocab, mode: RunMode { dropout: 0.0, ..mode }, join: ContextJoin::Plain })
    }

    pub fn is_multi_context(&self) -> bool {
        self.model.config().multi_context
    }

    pub fn pack<S: AsRef<str>>(&self, texts: &[S]) -> PackedBatch {
        let max = self.model.config().max_seq_len;
        let seqs: Vec<_> = texts.iter().map(|t| self.vocab.tokenize_limited(t.as_ref(), max)).collect();
        PackedBatch::from_sequences(&seqs)
    }

    pub fn encode_r<S: AsRef<str>>(&self, texts: &[S]) -> Result<Array2<f32>> {
        self.model.encode_r(&self.weights, &self.pack(texts), self.mode)
    }

    pub fn encode_side<S: AsRef<str>>(&self, texts: &[S], side: Side) -> Result<Array2<f32>> {
        self.model.encode(&self.weights, &self.pack(texts), side, self.mode)
    }

    pub fn encode_responses<S: AsRef<str>>(&self, texts: &[S]) -> Result<Array2<f32>> {
        self.encode_side(texts, Side::Response)
    }

    /// `h_x`, or `h_xz` for a multi-context model (earlier turns oldest first).
    pub fn encode_contexts<S: AsRef<str>>(&self, contexts: &[S], extra: &[Vec<String>]) -> Result<Array2<f32>> {
        let x = self.pack(contexts);
        if !self.is_multi_context() {
            return self.model.encode_context(&self.weights, &x, None, self.mode);
        }
        let z_text: Vec<String> = (0..contexts.len())
            .map(|i| extra.get(i).map(|turns| build_extra_context(turns, self.join)).unwrap_or_default())
            .collect();
        let z = self.pack(&z_text);
        self.model.encode_context(&self.weights, &x, Some(&z), self.mode)
    }
}
