//! Shared transformer tower: subword embeddings plus two periodic positional
//! tables, a stack of post-norm self-attention blocks with per-layer
//! attention caps and a learned relative-position bias, and a multi-head
//! square-root-of-N reduction to a fixed-width vector `r`.
//!
//! Sequences of a batch are packed back to back into one `[tokens, width]`
//! matrix. Position-wise layers run over the whole packed matrix; attention
//! and reduction run per sequence, so no padding positions exist anywhere.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numeric::{
    accumulate_at_b, accumulate_col_sums, gelu_fast, gelu_fast_grad, layer_norm, layer_norm_backward, orthogonal_init,
    round_f16, softmax_row_masked, LayerNormTape, Scalar,
};
use crate::params::{ParamId, ParamStore, PrecisionClass, Weights};
use crate::tokenizer::TokenSequence;

/// Token ids of several sequences laid out back to back.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PackedBatch {
    ids: Vec<u32>,
    offsets: Vec<usize>,
}

impl PackedBatch {
    pub fn from_id_slices<'a, I: IntoIterator<Item = &'a [u32]>>(seqs: I) -> Self {
        let mut ids = Vec::new();
        let mut offsets = vec![0];
        for s in seqs {
            ids.extend_from_slice(s);
            offsets.push(ids.len());
        }
        Self { ids, offsets }
    }

    pub fn from_sequences<'a, I: IntoIterator<Item = &'a TokenSequence>>(seqs: I) -> Self {
        Self::from_id_slices(seqs.into_iter().map(|s| s.ids.as_slice()))
    }

    pub fn num_seqs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_tokens(&self) -> usize {
        self.ids.len()
    }

    pub fn range(&self, seq: usize) -> Range<usize> {
        self.offsets[seq]..self.offsets[seq + 1]
    }

    pub fn seq_len(&self, seq: usize) -> usize {
        self.offsets[seq + 1] - self.offsets[seq]
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Position of every packed token inside its own sequence.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = Vec::with_capacity(self.ids.len());
        for s in 0..self.num_seqs() {
            pos.extend(0..self.seq_len(s));
        }
        pos
    }
}

/// How a forward pass is run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMode {
    /// Dropout rate after the embedding and after each self-attention layer.
    pub dropout: f64,
    /// Render activations and activation gradients in binary16 between layers.
    pub mixed: bool,
}

impl RunMode {
    pub const FULL: RunMode = RunMode { dropout: 0.0, mixed: false };
    pub const MIXED: RunMode = RunMode { dropout: 0.0, mixed: true };

    pub(crate) fn cast<T: Scalar>(&self, x: &mut Array2<T>) {
        if self.mixed {
            x.mapv_inplace(round_f16);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub rel_bias: Option<ParamId>,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: ModelConfig,
    pub embed: ParamId,
    pub pos1: ParamId,
    pub pos2: ParamId,
    pub blocks: Vec<BlockParams>,
    /// `[reduction_heads, embed_dim]` scoring vectors.
    pub reduce: ParamId,
}

#[derive(Debug, Clone)]
pub struct BlockTape<T> {
    x: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    /// Attention probabilities, one `[n, n]` matrix per (sequence, head).
    pub probs: Vec<Array2<T>>,
    ctx: Array2<T>,
    attn_drop: Option<Array2<T>>,
    ln1: LayerNormTape<T>,
    x1: Array2<T>,
    f1: Array2<T>,
    g: Array2<T>,
    ln2: LayerNormTape<T>,
}

#[derive(Debug, Clone)]
pub struct ReduceTape<T> {
    /// Softmax weights over positions, one vector per (sequence, head).
    pub weights: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct EncoderTape<T> {
    embed_drop: Option<Array2<T>>,
    pub blocks: Vec<BlockTape<T>>,
    top: Array2<T>,
    pub reduce: ReduceTape<T>,
}

fn dropout_mask<T: Scalar>(rows: usize, cols: usize, rate: f64, rng: &mut ChaCha8Rng) -> Array2<T> {
    let keep = T::c(1.0 / (1.0 - rate));
    Array2::from_shape_fn((rows, cols), |_| if rng.random::<f64>() < rate { T::zero() } else { keep })
}

impl Encoder {
    /// Register the tower's tensors in `store`.
    pub fn init(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.embed_dim;
        let emb_std = (d as f64).powf(-0.5);
        let normal = Normal::new(0.0, emb_std).unwrap();
        let mut gauss = |n: usize| -> Vec<f32> { (0..n).map(|_| normal.sample(rng) as f32).collect() };
        let embed = store.add("embed", vec![cfg.embedding_rows(), d], PrecisionClass::Embedding8, gauss(cfg.embedding_rows() * d));
        let [p1, p2] = cfg.position_periods;
        let pos1 = store.add("pos.m1", vec![p1, d], PrecisionClass::Param16, gauss(p1 * d));
        let pos2 = store.add("pos.m2", vec![p2, d], PrecisionClass::Param16, gauss(p2 * d));

        let ortho = |store: &mut ParamStore, name: String, r: usize, c: usize, rng: &mut ChaCha8Rng| {
            store.add(name, vec![r, c], PrecisionClass::Param16, orthogonal_init(r, c, rng))
        };
        let vec_of = |store: &mut ParamStore, name: String, n: usize, v: f32| {
            store.add(name, vec![n], PrecisionClass::Param16, vec![v; n])
        };
        let qk = cfg.attn_dim * cfg.attn_heads;
        let mut blocks = Vec::with_capacity(cfg.num_layers());
        for l in 0..cfg.num_layers() {
            let p = |n: &str| format!("block{l}.{n}");
            blocks.push(BlockParams {
                wq: ortho(store, p("wq"), d, qk, rng),
                wk: ortho(store, p("wk"), d, qk, rng),
                wv: ortho(store, p("wv"), d, d, rng),
                wo: ortho(store, p("wo"), d, d, rng),
                bo: vec_of(store, p("bo"), d, 0.0),
                rel_bias: cfg.relative_bias.then(|| vec_of(store, p("rel_bias"), cfg.relative_bias_len(), 0.0)),
                ln1_gain: vec_of(store, p("ln1.gain"), d, 1.0),
                ln1_bias: vec_of(store, p("ln1.bias"), d, 0.0),
                w1: ortho(store, p("w1"), d, cfg.ff1_dim, rng),
                b1: vec_of(store, p("b1"), cfg.ff1_dim, 0.0),
                w2: ortho(store, p("w2"), cfg.ff1_dim, d, rng),
                b2: vec_of(store, p("b2"), d, 0.0),
                ln2_gain: vec_of(store, p("ln2.gain"), d, 1.0),
                ln2_bias: vec_of(store, p("ln2.bias"), d, 0.0),
            });
        }
        let red = Normal::new(0.0, emb_std).unwrap();
        let reduce_vals: Vec<f32> = (0..cfg.reduction_heads * d).map(|_| red.sample(rng) as f32).collect();
        let reduce = store.add("reduce", vec![cfg.reduction_heads, d], PrecisionClass::Param16, reduce_vals);
        Self { cfg: cfg.clone(), embed, pos1, pos2, blocks, reduce }
    }

    /// Rebuild the layout for a store created by [`Encoder::init`].
    pub fn from_store(cfg: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let get = |n: String| store.by_name(&n).ok_or_else(|| Error::format(format!("missing tensor {n}")));
        let mut blocks = Vec::with_capacity(cfg.num_layers());
        for l in 0..cfg.num_layers() {
            let p = |n: &str| format!("block{l}.{n}");
            blocks.push(BlockParams {
                wq: get(p("wq"))?,
                wk: get(p("wk"))?,
                wv: get(p("wv"))?,
                wo: get(p("wo"))?,
                bo: get(p("bo"))?,
                rel_bias: if cfg.relative_bias { Some(get(p("rel_bias"))?) } else { None },
                ln1_gain: get(p("ln1.gain"))?,
                ln1_bias: get(p("ln1.bias"))?,
                w1: get(p("w1"))?,
                b1: get(p("b1"))?,
                w2: get(p("w2"))?,
                b2: get(p("b2"))?,
                ln2_gain: get(p("ln2.gain"))?,
                ln2_bias: get(p("ln2.bias"))?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            embed: get("embed".into())?,
            pos1: get("pos.m1".into())?,
            pos2: get("pos.m2".into())?,
            blocks,
            reduce: get("reduce".into())?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Row indices into the two positional tables for position `i`.
    pub fn position_rows(&self, i: usize) -> (usize, usize) {
        let [p1, p2] = self.cfg.position_periods;
        (i % p1, i % p2)
    }

    fn check_batch(&self, batch: &PackedBatch) -> Result<()> {
        let rows = self.cfg.embedding_rows();
        if let Some(&bad) = batch.ids().iter().find(|&&id| id as usize >= rows) {
            return Err(Error::data(format!(
                "token id {bad} outside the embedding table of {rows} rows (tokenizer/vocabulary mismatch)"
            )));
        }
        for s in 0..batch.num_seqs() {
            if batch.seq_len(s) > self.cfg.max_seq_len {
                return Err(Error::data(format!(
                    "sequence of {} tokens exceeds max_seq_len {}",
                    batch.seq_len(s),
                    self.cfg.max_seq_len
                )));
            }
        }
        Ok(())
    }

    /// `out[t] = E[id_t] + M1[pos_t mod p1] + M2[pos_t mod p2]`.
    pub fn embed_with_positions<T: Scalar>(&self, w: &Weights<T>, batch: &PackedBatch) -> Result<Array2<T>> {
        self.check_batch(batch)?;
        let d = self.cfg.embed_dim;
        let e = w.mat(self.embed);
        let m1 = w.mat(self.pos1);
        let m2 = w.mat(self.pos2);
        let mut x = Array2::<T>::zeros((batch.num_tokens(), d));
        for (t, (&id, pos)) in batch.ids().iter().zip(batch.positions()).enumerate() {
            let (r1, r2) = self.position_rows(pos);
            let (er, a, b) = (e.row(id as usize), m1.row(r1), m2.row(r2));
            let mut row = x.row_mut(t);
            for c in 0..d {
                row[c] = er[c] + a[c] + b[c];
            }
        }
        Ok(x)
    }

    /// Whether position `j` may be attended from `i` in `layer`.
    pub fn attends(&self, layer: usize, i: usize, j: usize) -> bool {
        i.abs_diff(j) <= self.cfg.max_relative_attention[layer]
    }

    /// Index into the relative-bias vector for offset `j - i`.
    pub fn bias_index(&self, i: usize, j: usize) -> usize {
        j + self.cfg.max_seq_len - 1 - i
    }

    /// One post-norm transformer block over a packed batch.
    pub fn block_forward<T: Scalar>(
        &self,
        w: &Weights<T>,
        layer: usize,
        x: Array2<T>,
        batch: &PackedBatch,
        mode: RunMode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<T>, BlockTape<T>) {
        let p = &self.blocks[layer];
        let heads = self.cfg.attn_heads;
        let ad = self.cfg.attn_dim;
        let vd = self.cfg.value_dim();
        let scale = T::c(1.0 / (ad as f64).sqrt());

        let mut q = x.dot(&w.mat(p.wq));
        let mut k = x.dot(&w.mat(p.wk));
        let mut v = x.dot(&w.mat(p.wv));
        mode.cast(&mut q);
        mode.cast(&mut k);
        mode.cast(&mut v);

        let bias = p.rel_bias.map(|id| w.vec(id));
        let mut ctx = Array2::<T>::zeros(x.dim());
        let mut probs = Vec::with_capacity(batch.num_seqs() * heads);
        for sq in 0..batch.num_seqs() {
            let r = batch.range(sq);
            let n = r.len();
            for h in 0..heads {
                let qh = q.slice(s![r.clone(), h * ad..(h + 1) * ad]);
                let kh = k.slice(s![r.clone(), h * ad..(h + 1) * ad]);
                let mut scores = qh.dot(&kh.t());
                let mut pm = Array2::<T>::zeros((n, n));
                for i in 0..n {
                    let mut row = scores.row_mut(i);
                    for j in 0..n {
                        row[j] = row[j] * scale;
                        if let Some(b) = bias {
                            row[j] += b[self.bias_index(i, j)];
                        }
                    }
                    let srow = row.to_vec();
                    softmax_row_masked(&srow, |j| self.attends(layer, i, j), i, pm.row_mut(i).as_slice_mut().unwrap());
                }
                let vh = v.slice(s![r.clone(), h * vd..(h + 1) * vd]);
                ctx.slice_mut(s![r.clone(), h * vd..(h + 1) * vd]).assign(&pm.dot(&vh));
                probs.push(pm);
            }
        }
        mode.cast(&mut ctx);

        let mut a = ctx.dot(&w.mat(p.wo)) + &ndarray::ArrayView1::from(w.vec(p.bo));
        mode.cast(&mut a);
        let attn_drop = match rng {
            Some(rng) if mode.dropout > 0.0 => {
                let m = dropout_mask(a.nrows(), a.ncols(), mode.dropout, rng);
                a = a * &m;
                Some(m)
            }
            _ => None,
        };
        let u = &x + &a;
        let (mut x1, ln1) = layer_norm(u.view(), w.vec(p.ln1_gain), w.vec(p.ln1_bias));
        mode.cast(&mut x1);

        let f1 = x1.dot(&w.mat(p.w1)) + &ndarray::ArrayView1::from(w.vec(p.b1));
        let mut g = f1.mapv(gelu_fast);
        mode.cast(&mut g);
        let mut f2 = g.dot(&w.mat(p.w2)) + &ndarray::ArrayView1::from(w.vec(p.b2));
        mode.cast(&mut f2);
        let u2 = &x1 + &f2;
        let (mut y, ln2) = layer_norm(u2.view(), w.vec(p.ln2_gain), w.vec(p.ln2_bias));
        mode.cast(&mut y);

        let tape = BlockTape { x, q, k, v, probs, ctx, attn_drop, ln1, x1, f1, g, ln2 };
        (y, tape)
    }

    /// Backward of [`Encoder::block_forward`]; returns the gradient at the block input.
    pub fn block_backward<T: Scalar>(
        &self,
        w: &Weights<T>,
        layer: usize,
        tape: &BlockTape<T>,
        dy: Array2<T>,
        batch: &PackedBatch,
        grads: &mut Weights<T>,
        mode: RunMode,
    ) -> Array2<T> {
        let p = &self.blocks[layer];
        let heads = self.cfg.attn_heads;
        let ad = self.cfg.attn_dim;
        let vd = self.cfg.value_dim();
        let d = self.cfg.embed_dim;
        let scale = T::c(1.0 / (ad as f64).sqrt());

        let (mut dg2, mut db2) = (vec![T::zero(); d], vec![T::zero(); d]);
        let du2 = layer_norm_backward(dy.view(), &tape.ln2, w.vec(p.ln2_gain), &mut dg2, &mut db2);
        add_into(grads.vec_mut(p.ln2_gain), &dg2);
        add_into(grads.vec_mut(p.ln2_bias), &db2);

        // feed-forward
        accumulate_at_b(tape.g.view(), du2.view(), grads.vec_mut(p.w2));
        accumulate_col_sums(du2.view(), grads.vec_mut(p.b2));
        let mut dgel = du2.dot(&w.mat(p.w2).t());
        mode.cast(&mut dgel);
        let df1 = ndarray::Zip::from(&dgel).and(&tape.f1).map_collect(|&gd, &f| gd * gelu_fast_grad(f));
        accumulate_at_b(tape.x1.view(), df1.view(), grads.vec_mut(p.w1));
        accumulate_col_sums(df1.view(), grads.vec_mut(p.b1));
        let dx1 = du2 + df1.dot(&w.mat(p.w1).t());

        let (mut dg1, mut db1) = (vec![T::zero(); d], vec![T::zero(); d]);
        let du1 = layer_norm_backward(dx1.view(), &tape.ln1, w.vec(p.ln1_gain), &mut dg1, &mut db1);
        add_into(grads.vec_mut(p.ln1_gain), &dg1);
        add_into(grads.vec_mut(p.ln1_bias), &db1);

        // attention output projection
        let da = match &tape.attn_drop {
            Some(m) => &du1 * m,
            None => du1.clone(),
        };
        accumulate_at_b(tape.ctx.view(), da.view(), grads.vec_mut(p.wo));
        accumulate_col_sums(da.view(), grads.vec_mut(p.bo));
        let mut dctx = da.dot(&w.mat(p.wo).t());
        mode.cast(&mut dctx);

        let mut dq = Array2::<T>::zeros(tape.q.dim());
        let mut dk = Array2::<T>::zeros(tape.k.dim());
        let mut dv = Array2::<T>::zeros(tape.v.dim());
        let mut dbias = p.rel_bias.map(|_| vec![T::zero(); self.cfg.relative_bias_len()]);
        for sq in 0..batch.num_seqs() {
            let r = batch.range(sq);
            let n = r.len();
            for h in 0..heads {
                let pm = &tape.probs[sq * heads + h];
                let vs = s![r.clone(), h * vd..(h + 1) * vd];
                let qs = s![r.clone(), h * ad..(h + 1) * ad];
                let dch = dctx.slice(vs);
                let dp = dch.dot(&tape.v.slice(vs).t());
                dv.slice_mut(vs).assign(&pm.t().dot(&dch));
                let mut ds = Array2::<T>::zeros((n, n));
                for i in 0..n {
                    let prow = pm.row(i);
                    let dprow = dp.row(i);
                    let dot: T = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        let val = prow[j] * (dprow[j] - dot);
                        ds[[i, j]] = val * scale;
                        if let Some(db) = dbias.as_mut() {
                            db[self.bias_index(i, j)] += val;
                        }
                    }
                }
                dq.slice_mut(qs).assign(&ds.dot(&tape.k.slice(qs)));
                dk.slice_mut(qs).assign(&ds.t().dot(&tape.q.slice(qs)));
            }
        }
        if let (Some(id), Some(db)) = (p.rel_bias, dbias) {
            add_into(grads.vec_mut(id), &db);
        }
        mode.cast(&mut dq);
        mode.cast(&mut dk);
        mode.cast(&mut dv);

        accumulate_at_b(tape.x.view(), dq.view(), grads.vec_mut(p.wq));
        accumulate_at_b(tape.x.view(), dk.view(), grads.vec_mut(p.wk));
        accumulate_at_b(tape.x.view(), dv.view(), grads.vec_mut(p.wv));
        let mut dx = du1;
        dx = dx + dq.dot(&w.mat(p.wq).t());
        dx = dx + dk.dot(&w.mat(p.wk).t());
        dx = dx + dv.dot(&w.mat(p.wv).t());
        mode.cast(&mut dx);
        dx
    }

    /// Fused reduction: per head, softmax weights over positions applied to
    /// the sequence by one vector-matrix product and scaled by `sqrt(len)`.
    /// An empty sequence reduces to zeros.
    pub fn reduce_forward<T: Scalar>(&self, w: &Weights<T>, x: ArrayView2<T>, batch: &PackedBatch) -> (Array2<T>, ReduceTape<T>) {
        let d = self.cfg.embed_dim;
        let heads = self.cfg.reduction_heads;
        let scorers = w.mat(self.reduce);
        let mut out = Array2::<T>::zeros((batch.num_seqs(), heads * d));
        let mut weights = Vec::with_capacity(batch.num_seqs() * heads);
        for sq in 0..batch.num_seqs() {
            let r = batch.range(sq);
            let n = r.len();
            let xs = x.slice(s![r, ..]);
            let root_n = T::from_usize(n).unwrap().sqrt();
            let logits = xs.dot(&scorers.t());
            for h in 0..heads {
                let col = logits.column(h).to_vec();
                let mut p = vec![T::zero(); n];
                if n > 0 {
                    softmax_row_masked(&col, |_| true, 0, &mut p);
                    let pw = ndarray::ArrayView1::from(&p);
                    let reduced = pw.dot(&xs) * root_n;
                    out.slice_mut(s![sq, h * d..(h + 1) * d]).assign(&reduced);
                }
                weights.push(p);
            }
        }
        (out, ReduceTape { weights })
    }

    /// Reference reduction: builds the attended sequence explicitly (every
    /// query row attends with the head's weights), then averages it and
    /// scales by `sqrt(len)`.
    pub fn reduce_unfused<T: Scalar>(&self, w: &Weights<T>, x: ArrayView2<T>, batch: &PackedBatch) -> Array2<T> {
        let d = self.cfg.embed_dim;
        let heads = self.cfg.reduction_heads;
        let scorers = w.mat(self.reduce);
        let mut out = Array2::<T>::zeros((batch.num_seqs(), heads * d));
        for sq in 0..batch.num_seqs() {
            let r = batch.range(sq);
            let n = r.len();
            if n == 0 {
                continue;
            }
            let xs = x.slice(s![r, ..]);
            for h in 0..heads {
                let logits: Vec<T> = (0..n).map(|i| xs.row(i).dot(&scorers.row(h))).collect();
                let mut p = vec![T::zero(); n];
                softmax_row_masked(&logits, |_| true, 0, &mut p);
                let attn = Array2::from_shape_fn((n, n), |(_, j)| p[j]);
                let attended = attn.dot(&xs);
                let mean = attended.mean_axis(Axis(0)).unwrap();
                let reduced = mean * T::from_usize(n).unwrap().sqrt();
                out.slice_mut(s![sq, h * d..(h + 1) * d]).assign(&reduced);
            }
        }
        out
    }

    fn reduce_backward<T: Scalar>(
        &self,
        w: &Weights<T>,
        x: ArrayView2<T>,
        tape: &ReduceTape<T>,
        dr: ArrayView2<T>,
        batch: &PackedBatch,
        grads: &mut Weights<T>,
    ) -> Array2<T> {
        let d = self.cfg.embed_dim;
        let heads = self.cfg.reduction_heads;
        let scorers = w.mat(self.reduce).to_owned();
        let mut dx = Array2::<T>::zeros(x.dim());
        let mut dscore = Array2::<T>::zeros((heads, d));
        for sq in 0..batch.num_seqs() {
            let r = batch.range(sq);
            let n = r.len();
            if n == 0 {
                continue;
            }
            let root_n = T::from_usize(n).unwrap().sqrt();
            let xs = x.slice(s![r.clone(), ..]);
            for h in 0..heads {
                let p = &tape.weights[sq * heads + h];
                let g = dr.slice(s![sq, h * d..(h + 1) * d]);
                // dp_i = sqrt(n) x_i . g
                let dp: Vec<T> = (0..n).map(|i| xs.row(i).dot(&g) * root_n).collect();
                let mean: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                let mut dxs = dx.slice_mut(s![r.clone(), ..]);
                for i in 0..n {
                    let dsi = p[i] * (dp[i] - mean);
                    let coef = p[i] * root_n;
                    let mut row = dxs.row_mut(i);
                    let sc = scorers.row(h);
                    for c in 0..d {
                        row[c] += coef * g[c] + dsi * sc[c];
                    }
                    let mut ds = dscore.row_mut(h);
                    let xr = xs.row(i);
                    for c in 0..d {
                        ds[c] += dsi * xr[c];
                    }
                }
            }
        }
        add_into(grads.vec_mut(self.reduce), dscore.as_slice().unwrap());
        dx
    }

    /// Full tower: token ids to `[num_seqs, reduced_dim]`.
    pub fn forward<T: Scalar>(
        &self,
        w: &Weights<T>,
        batch: &PackedBatch,
        mode: RunMode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<T>, EncoderTape<T>)> {
        let mut x = self.embed_with_positions(w, batch)?;
        mode.cast(&mut x);
        let embed_drop = match rng.as_deref_mut() {
            Some(r) if mode.dropout > 0.0 => {
                let m = dropout_mask(x.nrows(), x.ncols(), mode.dropout, r);
                x = x * &m;
                Some(m)
            }
            _ => None,
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for l in 0..self.blocks.len() {
            let (y, tape) = self.block_forward(w, l, x, batch, mode, rng.as_deref_mut());
            blocks.push(tape);
            x = y;
        }
        let (mut r, reduce) = self.reduce_forward(w, x.view(), batch);
        mode.cast(&mut r);
        Ok((r, EncoderTape { embed_drop, blocks, top: x, reduce }))
    }

    /// Accumulate parameter gradients for `dr = dLoss/dr`.
    pub fn backward<T: Scalar>(
        &self,
        w: &Weights<T>,
        batch: &PackedBatch,
        tape: &EncoderTape<T>,
        dr: ArrayView2<T>,
        grads: &mut Weights<T>,
        mode: RunMode,
    ) {
        let mut dx = self.reduce_backward(w, tape.top.view(), &tape.reduce, dr, batch, grads);
        mode.cast(&mut dx);
        for l in (0..self.blocks.len()).rev() {
            dx = self.block_backward(w, l, &tape.blocks[l], dx, batch, grads, mode);
        }
        if let Some(m) = &tape.embed_drop {
            dx = dx * m;
        }
        let d = self.cfg.embed_dim;
        for (t, (&id, pos)) in batch.ids().iter().zip(batch.positions()).enumerate() {
            let (r1, r2) = self.position_rows(pos);
            let row = dx.row(t);
            for (target, r) in [(self.embed, id as usize), (self.pos1, r1), (self.pos2, r2)] {
                let g = &mut grads.vec_mut(target)[r * d..(r + 1) * d];
                for c in 0..d {
                    g[c] += row[c];
                }
            }
        }
    }
}

pub(crate) fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += *b;
    }
}

/// Seeded generator used for initialization and dropout.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn tiny(layers: usize) -> (Encoder, ParamStore) {
        let cfg = ModelConfig {
            vocab_size: 20,
            oov_buckets: 3,
            embed_dim: 8,
            attn_dim: 4,
            ff1_dim: 12,
            max_relative_attention: vec![3, 5, 48, 48, 48, 48][..layers].to_vec(),
            ..ModelConfig::small(20)
        };
        let mut store = ParamStore::new();
        let enc = Encoder::init(&cfg, &mut store, &mut seeded_rng(1));
        (enc, store)
    }

    #[test]
    fn positional_rows_are_periodic() {
        let (enc, _) = tiny(1);
        assert_eq!(enc.position_rows(0), (0, 0));
        assert_eq!(enc.position_rows(47), (0, 3));
        let pairs: HashSet<_> = (0..517).map(|i| enc.position_rows(i)).collect();
        assert_eq!(pairs.len(), 517);
        assert_eq!(enc.position_rows(517), enc.position_rows(0));
    }

    #[test]
    fn embedding_sums_tables() {
        let (enc, store) = tiny(1);
        let w = store.to_weights::<f64>();
        let ids: Vec<u32> = (0..50).map(|i| (i % 23) as u32).collect();
        let batch = PackedBatch::from_id_slices([&ids[..]]);
        let x = enc.embed_with_positions(&w, &batch).unwrap();
        for &pos in &[0usize, 47, 11, 49] {
            let (r1, r2) = enc.position_rows(pos);
            let id = ids[pos] as usize;
            for c in 0..8 {
                let want = w.mat(enc.embed)[[id, c]] + w.mat(enc.pos1)[[r1, c]] + w.mat(enc.pos2)[[r2, c]];
                assert_eq!(x[[pos, c]], want);
            }
        }
        let bad = PackedBatch::from_id_slices([&[23u32][..]]);
        assert!(enc.embed_with_positions(&w, &bad).is_err());
    }

    #[test]
    fn caps_mask_distant_pairs() {
        let (enc, store) = tiny(3);
        assert!(!enc.attends(0, 0, 4));
        assert!(enc.attends(0, 0, 3));
        assert!(!enc.attends(2, 0, 59));
        assert!(enc.attends(2, 0, 48));
        let w = store.to_weights::<f64>();
        let ids: Vec<u32> = (0..60).map(|i| (i % 20) as u32).collect();
        let batch = PackedBatch::from_id_slices([&ids[..], &ids[..7]]);
        let (_, tape) = enc.forward(&w, &batch, RunMode::FULL, None).unwrap();
        for (l, bt) in tape.blocks.iter().enumerate() {
            for pm in &bt.probs {
                let n = pm.nrows();
                for i in 0..n {
                    let row_sum: f64 = pm.row(i).sum();
                    assert!((row_sum - 1.0).abs() < 1e-12);
                    for j in 0..n {
                        if !enc.attends(l, i, j) {
                            assert_eq!(pm[[i, j]], 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn singleton_attention_is_identity_weighting() {
        let (enc, store) = tiny(2);
        let w = store.to_weights::<f64>();
        let batch = PackedBatch::from_id_slices([&[5u32][..]]);
        let (_, tape) = enc.forward(&w, &batch, RunMode::FULL, None).unwrap();
        for bt in &tape.blocks {
            assert_eq!(bt.probs[0][[0, 0]], 1.0);
        }
    }

    #[test]
    fn bias_index_is_translation_invariant() {
        let (enc, _) = tiny(1);
        for shift in 0..10 {
            assert_eq!(enc.bias_index(2 + shift, 5 + shift), enc.bias_index(2, 5));
        }
        assert_eq!(enc.bias_index(59, 0), 0);
        assert_eq!(enc.bias_index(0, 59), 118);
    }

    #[test]
    fn reduction_singleton_and_uniform() {
        let (enc, mut store) = tiny(1);
        // zero scorers give uniform weights
        store.get_mut(enc.reduce).data.iter_mut().for_each(|v| *v = 0.0);
        let w = store.to_weights::<f64>();
        let x = Array2::from_shape_fn((5, 8), |(i, j)| (i * 8 + j) as f64 * 0.1 - 1.0);
        let batch = PackedBatch::from_id_slices([&[0u32][..], &[0, 0, 0, 0][..]]);
        let (r, _) = enc.reduce_forward(&w, x.view(), &batch);
        for c in 0..8 {
            assert_eq!(r[[0, c]], x[[0, c]]);
            assert_eq!(r[[0, 8 + c]], x[[0, c]]);
            let mean = (1..5).map(|i| x[[i, c]]).sum::<f64>() / 4.0;
            assert!((r[[1, c]] - 2.0 * mean).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_sequence_reduces_to_zero() {
        let (enc, store) = tiny(2);
        let w = store.to_weights::<f32>();
        let batch = PackedBatch::from_id_slices([&[][..], &[1u32, 2][..]]);
        let (r, _) = enc.forward(&w, &batch, RunMode::FULL, None).unwrap();
        assert!(r.row(0).iter().all(|&v| v == 0.0));
        assert!(r.row(1).iter().any(|&v| v != 0.0));
    }
}
