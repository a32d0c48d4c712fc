//! Ranked-retrieval evaluation: R_N@k and MRR.
//!
//! The rank of the relevant candidate is its 1-based position in the order
//! produced by [`rank_by_scores`] (descending score, ties by lower index).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::InferenceModel;
use crate::numeric::l2_normalize;
use crate::objective::rank_by_scores;
use crate::tokenizer::fnv1a64;

pub const DEFAULT_POOL_SIZE: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub context: String,
    /// Earlier turns, oldest first.
    #[serde(default)]
    pub extra_contexts: Vec<String>,
    pub candidates: Vec<String>,
    pub relevant_index: usize,
}

impl EvalInstance {
    fn validate(&self, n: usize) -> Result<()> {
        if n < 2 {
            return Err(Error::config("candidate pools need at least two responses"));
        }
        if self.candidates.len() != n {
            return Err(Error::data(format!("instance has {} candidates, expected {n}", self.candidates.len())));
        }
        if self.relevant_index >= n {
            return Err(Error::data(format!("relevant_index {} out of range for {n} candidates", self.relevant_index)));
        }
        Ok(())
    }
}

/// 1-based rank of `relevant` under [`rank_by_scores`].
pub fn rank_of(scores: &[f32], relevant: usize) -> usize {
    rank_by_scores(scores).iter().position(|&i| i == relevant).expect("relevant index within scores") + 1
}

pub fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

pub fn mrr_from_ranks(ranks: &[usize]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64
}

/// R@k over rows of a score matrix, one relevant column per row.
pub fn recall_at_k_scores(scores: &[Vec<f32>], relevant: &[usize], k: usize) -> f64 {
    let ranks: Vec<usize> = scores.iter().zip(relevant).map(|(s, &r)| rank_of(s, r)).collect();
    recall_from_ranks(&ranks, k)
}

pub fn mrr_scores(scores: &[Vec<f32>], relevant: &[usize]) -> f64 {
    let ranks: Vec<usize> = scores.iter().zip(relevant).map(|(s, &r)| rank_of(s, r)).collect();
    mrr_from_ranks(&ranks)
}

/// Anything that maps contexts and responses to comparable unit vectors.
pub trait RetrievalEncoder {
    fn encode_contexts(&self, instances: &[&EvalInstance]) -> Result<Array2<f32>>;
    fn encode_responses(&self, texts: &[&str]) -> Result<Array2<f32>>;
}

impl RetrievalEncoder for InferenceModel {
    fn encode_contexts(&self, instances: &[&EvalInstance]) -> Result<Array2<f32>> {
        let ctx: Vec<&str> = instances.iter().map(|i| i.context.as_str()).collect();
        let extra: Vec<Vec<String>> = instances.iter().map(|i| i.extra_contexts.clone()).collect();
        InferenceModel::encode_contexts(self, &ctx, &extra)
    }

    fn encode_responses(&self, texts: &[&str]) -> Result<Array2<f32>> {
        InferenceModel::encode_responses(self, texts)
    }
}

/// Debug encoder: a text's encoding is a pseudo-random unit vector seeded by
/// the text itself, so a context and a response are identical exactly when
/// their strings are.
#[derive(Debug, Clone, Copy)]
pub struct CopyEncoder {
    pub dim: usize,
}

impl CopyEncoder {
    fn vector(&self, text: &str) -> Vec<f32> {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(text.as_bytes()));
        let v: Vec<f32> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        l2_normalize(&v)
    }

    fn matrix<'a>(&self, texts: impl Iterator<Item = &'a str>) -> Array2<f32> {
        let rows: Vec<Vec<f32>> = texts.map(|t| self.vector(t)).collect();
        Array2::from_shape_fn((rows.len(), self.dim), |(i, j)| rows[i][j])
    }
}

impl RetrievalEncoder for CopyEncoder {
    fn encode_contexts(&self, instances: &[&EvalInstance]) -> Result<Array2<f32>> {
        Ok(self.matrix(instances.iter().map(|i| i.context.as_str())))
    }

    fn encode_responses(&self, texts: &[&str]) -> Result<Array2<f32>> {
        Ok(self.matrix(texts.iter().copied()))
    }
}

const ENCODE_CHUNK: usize = 256;

/// Rank of the relevant candidate for every instance. Candidate texts are
/// encoded once each, however many pools they appear in.
pub fn instance_ranks<E: RetrievalEncoder + ?Sized>(instances: &[EvalInstance], encoder: &E, n: usize) -> Result<Vec<usize>> {
    for inst in instances {
        inst.validate(n)?;
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut unique: Vec<&str> = Vec::new();
    for inst in instances {
        for c in &inst.candidates {
            index.entry(c.as_str()).or_insert_with(|| {
                unique.push(c.as_str());
                unique.len() - 1
            });
        }
    }
    let mut responses: Vec<Vec<f32>> = Vec::with_capacity(unique.len());
    for chunk in unique.chunks(ENCODE_CHUNK) {
        responses.extend(encoder.encode_responses(chunk)?.rows().into_iter().map(|r| r.to_vec()));
    }
    let mut ranks = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(ENCODE_CHUNK) {
        let refs: Vec<&EvalInstance> = chunk.iter().collect();
        let ctx = encoder.encode_contexts(&refs)?;
        for (inst, q) in chunk.iter().zip(ctx.rows()) {
            let scores: Vec<f32> = inst
                .candidates
                .iter()
                .map(|c| responses[index[c.as_str()]].iter().zip(q.iter()).map(|(a, b)| a * b).sum())
                .collect();
            ranks.push(rank_of(&scores, inst.relevant_index));
        }
    }
    Ok(ranks)
}

pub fn recall_at_k<E: RetrievalEncoder + ?Sized>(instances: &[EvalInstance], encoder: &E, n: usize, k: usize) -> Result<f64> {
    Ok(recall_from_ranks(&instance_ranks(instances, encoder, n)?, k))
}

pub fn mrr<E: RetrievalEncoder + ?Sized>(instances: &[EvalInstance], encoder: &E, n: usize) -> Result<f64> {
    Ok(mrr_from_ranks(&instance_ranks(instances, encoder, n)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub instances: usize,
    pub pool_size: usize,
    /// R_N@k keyed by k.
    pub recall: BTreeMap<usize, f64>,
    pub mrr: f64,
}

pub fn evaluate<E: RetrievalEncoder + ?Sized>(instances: &[EvalInstance], encoder: &E, n: usize, ks: &[usize]) -> Result<EvalReport> {
    let ranks = instance_ranks(instances, encoder, n)?;
    Ok(EvalReport {
        instances: ranks.len(),
        pool_size: n,
        recall: ks.iter().map(|&k| (k, recall_from_ranks(&ranks, k))).collect(),
        mrr: mrr_from_ranks(&ranks),
    })
}

/// Read newline-delimited JSON instances; blank lines are ignored.
pub fn load_eval_instances(path: impl AsRef<Path>) -> Result<Vec<EvalInstance>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::data(format!("eval line {}: {e}", i + 1))))
        .collect()
}

/// A held-out pair with its history, for building candidate pools.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldOutPair {
    pub context: String,
    #[serde(default)]
    pub extra_contexts: Vec<String>,
    pub response: String,
}

/// One instance per pair: its own response plus `n - 1` others drawn without
/// replacement from the remaining held-out responses, at a random position.
pub fn build_pools(pairs: &[HeldOutPair], n: usize, seed: u64) -> Result<Vec<EvalInstance>> {
    if pairs.len() < n {
        return Err(Error::data(format!("{} held-out pairs cannot fill pools of {n}", pairs.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let mut others: Vec<usize> = (0..pairs.len()).filter(|&j| j != i).collect();
        others.shuffle(&mut rng);
        let mut candidates: Vec<String> = others[..n - 1].iter().map(|&j| pairs[j].response.clone()).collect();
        let relevant_index = rand::Rng::random_range(&mut rng, 0..n);
        candidates.insert(relevant_index, p.response.clone());
        out.push(EvalInstance { context: p.context.clone(), extra_contexts: p.extra_contexts.clone(), candidates, relevant_index });
    }
    Ok(out)
}
