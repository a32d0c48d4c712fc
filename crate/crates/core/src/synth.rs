//! Synthetic conversational corpora for desk-scale experiments.
//!
//! Every pair carries a generated keyword: a made-up word shared by the
//! response and one turn of the context, surrounded by filler words drawn
//! from a small common vocabulary. Retrieving the right response means
//! learning to match keywords while ignoring the filler.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::HeldOutPair;
use crate::train::CorpusRecord;

const FILLER: &[&str] = &[
    "the", "a", "is", "it", "to", "and", "of", "in", "that", "you", "we", "they", "what", "about", "really", "think",
    "maybe", "just", "so", "well", "yes", "no", "sure", "okay", "like", "know", "good", "great", "time", "day", "some",
    "more", "very", "then", "there", "here", "this", "with", "for", "on", "at", "do", "can", "would", "could", "should",
    "have", "had", "was", "be", "been", "not", "all", "any", "how", "why", "when", "who", "one", "two",
];

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "tr", "gl", "pl"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: &[&str] = &["", "n", "r", "x", "k", "m"];

/// Distinct pronounceable nonsense words, deterministic in `seed`.
pub fn keywords(count: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::new();
    while out.len() < count {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(&mut rng).unwrap());
            w.push_str(VOWELS.choose(&mut rng).unwrap());
        }
        w.push_str(CODAS.choose(&mut rng).unwrap());
        if !FILLER.contains(&w.as_str()) && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyTask {
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub keywords: usize,
    /// Put the keyword only in an earlier turn, never the immediate context.
    pub keyword_in_history: bool,
    pub seed: u64,
}

impl ToyTask {
    pub fn keyword_task(train_pairs: usize, heldout_pairs: usize, seed: u64) -> Self {
        Self { train_pairs, heldout_pairs, keywords: 500, keyword_in_history: false, seed }
    }

    pub fn history_task(train_pairs: usize, heldout_pairs: usize, seed: u64) -> Self {
        Self { keyword_in_history: true, ..Self::keyword_task(train_pairs, heldout_pairs, seed) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyCorpus {
    pub train: Vec<CorpusRecord>,
    pub heldout: Vec<HeldOutPair>,
    pub keywords: Vec<String>,
}

impl ToyCorpus {
    /// Every text in the training split, for building a vocabulary.
    pub fn train_texts(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.train {
            out.push(r.context.clone());
            out.push(r.response.clone());
            out.extend(r.extra_contexts.iter().flatten().cloned());
        }
        out
    }
}

fn sentence(rng: &mut ChaCha8Rng, len: std::ops::RangeInclusive<usize>, keyword: Option<&str>) -> String {
    let n = rng.random_range(len);
    let mut words: Vec<&str> = (0..n).map(|_| *FILLER.choose(rng).unwrap()).collect();
    if let Some(k) = keyword {
        let at = rng.random_range(0..=words.len());
        words.insert(at, k);
    }
    words.join(" ")
}

fn record(rng: &mut ChaCha8Rng, keyword: &str, in_history: bool) -> CorpusRecord {
    let response = sentence(rng, 3..=6, Some(keyword));
    if in_history {
        let mut turns = vec![sentence(rng, 3..=6, Some(keyword))];
        turns.extend((0..rng.random_range(0..=2)).map(|_| sentence(rng, 3..=6, None)));
        turns.shuffle(rng);
        CorpusRecord { context: sentence(rng, 4..=8, None), response, extra_contexts: Some(turns) }
    } else {
        CorpusRecord { context: sentence(rng, 4..=8, Some(keyword)), response, extra_contexts: None }
    }
}

/// Generate train and held-out splits. Held-out pairs reuse the training
/// keywords in fresh filler.
pub fn toy_corpus(task: ToyTask) -> ToyCorpus {
    let kw = keywords(task.keywords, task.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed.wrapping_add(1));
    let pick = |i: usize| -> &str { &kw[i % kw.len()] };
    let train: Vec<CorpusRecord> = (0..task.train_pairs).map(|i| record(&mut rng, pick(i), task.keyword_in_history)).collect();
    let heldout = (0..task.heldout_pairs)
        .map(|_| {
            let k = rng.random_range(0..kw.len());
            let r = record(&mut rng, pick(k), task.keyword_in_history);
            HeldOutPair { context: r.context, extra_contexts: r.extra_contexts.unwrap_or_default(), response: r.response }
        })
        .collect();
    ToyCorpus { train, heldout, keywords: kw }
}

/// Utterances for intent-classification checks: each class has its own
/// marker words and at most two filler words, so every utterance is
/// dominated by a marker of its class.
pub fn toy_intents(per_class: usize, classes: usize, seed: u64) -> Vec<(String, String)> {
    let markers = keywords(classes * 3, seed ^ 0x5151);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(per_class * classes);
    for c in 0..classes {
        for _ in 0..per_class {
            let m = &markers[c * 3 + rng.random_range(0..3)];
            out.push((sentence(&mut rng, 0..=2, Some(m)), format!("intent_{c}")));
        }
    }
    out.shuffle(&mut rng);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keywords_are_distinct_and_deterministic() {
        let a = keywords(300, 1);
        let mut b = a.clone();
        b.sort();
        b.dedup();
        assert_eq!(b.len(), 300);
        assert_eq!(a, keywords(300, 1));
    }

    #[test]
    fn keyword_placement() {
        let c = toy_corpus(ToyTask::keyword_task(50, 10, 3));
        for (i, r) in c.train.iter().enumerate() {
            let k = &c.keywords[i % c.keywords.len()];
            assert!(r.context.split(' ').any(|w| w == k) && r.response.split(' ').any(|w| w == k));
        }
        let h = toy_corpus(ToyTask::history_task(50, 10, 3));
        for (i, r) in h.train.iter().enumerate() {
            let k = &h.keywords[i % h.keywords.len()];
            assert!(!r.context.split(' ').any(|w| w == k));
            assert!(r.extra_contexts.as_ref().unwrap().iter().any(|t| t.split(' ').any(|w| w == k)));
        }
    }
}
