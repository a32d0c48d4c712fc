//! Subword vocabulary induction and greedy longest-prefix tokenization.
//!
//! Text is lowercased and split into words at letter/digit-run boundaries,
//! with every other non-space character forming its own word. Each word is
//! then covered left to right by the longest matching vocabulary subword. A
//! character with no matching subword becomes a single OOV token whose id is
//! `size + fnv1a64(utf8(char)) % oov_buckets`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_SEQ_LEN: usize = 60;
pub const OOV_HASH_NAME: &str = "fnv1a64";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Limits applied while inducing a vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLimits {
    pub min_frequency: u64,
    pub max_subword_chars: usize,
    pub max_consecutive_digits: usize,
    pub iterations: usize,
    pub oov_buckets: u32,
}

impl Default for VocabLimits {
    fn default() -> Self {
        Self {
            min_frequency: 250,
            max_subword_chars: 20,
            max_consecutive_digits: 4,
            iterations: 4,
            oov_buckets: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SubwordVocab {
    subwords: Vec<String>,
    index: HashMap<String, u32>,
    longest: usize,
    limits: VocabLimits,
}

impl SubwordVocab {
    /// Vocabulary from an explicit subword list; ids follow list order.
    pub fn from_subwords<I, S>(subwords: I, limits: VocabLimits) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        if limits.oov_buckets == 0 {
            return Err(Error::config("oov_buckets must be at least 1"));
        }
        let subwords: Vec<String> = subwords.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(subwords.len());
        for (i, s) in subwords.iter().enumerate() {
            if s.is_empty() || s.contains(char::is_whitespace) {
                return Err(Error::data(format!("invalid subword {s:?} at id {i}")));
            }
            if index.insert(s.clone(), i as u32).is_some() {
                return Err(Error::data(format!("duplicate subword {s:?}")));
            }
        }
        let longest = subwords.iter().map(|s| s.chars().count()).max().unwrap_or(0);
        Ok(Self { subwords, index, longest, limits })
    }

    /// Number of real subwords; OOV bucket ids start here.
    pub fn size(&self) -> usize {
        self.subwords.len()
    }

    pub fn oov_buckets(&self) -> u32 {
        self.limits.oov_buckets
    }

    /// Size of the embedding table this vocabulary addresses.
    pub fn total_ids(&self) -> usize {
        self.size() + self.limits.oov_buckets as usize
    }

    pub fn limits(&self) -> &VocabLimits {
        &self.limits
    }

    pub fn subwords(&self) -> &[String] {
        &self.subwords
    }

    pub fn id_of(&self, subword: &str) -> Option<u32> {
        self.index.get(subword).copied()
    }

    pub fn contains(&self, subword: &str) -> bool {
        self.index.contains_key(subword)
    }

    /// Same subwords with a different OOV bucket count.
    pub fn with_oov_buckets(&self, oov_buckets: u32) -> Result<Self> {
        let mut limits = self.limits;
        limits.oov_buckets = oov_buckets;
        Self::from_subwords(self.subwords.clone(), limits)
    }

    pub fn oov_id(&self, ch: char) -> u32 {
        let mut buf = [0u8; 4];
        let bytes = ch.encode_utf8(&mut buf).as_bytes();
        let bucket = fnv1a64(bytes) % self.limits.oov_buckets as u64;
        self.size() as u32 + bucket as u32
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        self.tokenize_limited(text, DEFAULT_MAX_SEQ_LEN)
    }

    /// Tokenize and keep the first `max_len` ids.
    pub fn tokenize_limited(&self, text: &str, max_len: usize) -> TokenSequence {
        let mut ids = Vec::new();
        for word in pre_tokenize(text) {
            if ids.len() >= max_len {
                break;
            }
            self.cover_word(&word, &mut ids);
        }
        ids.truncate(max_len);
        TokenSequence { ids }
    }

    /// Subword strings for `text` (OOV characters are reported as themselves).
    pub fn pieces(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for word in pre_tokenize(text) {
            let mut ids = Vec::new();
            let spans = self.cover_word(&word, &mut ids);
            out.extend(spans.into_iter().map(|(a, b)| word[a..b].to_string()));
        }
        out
    }

    /// Greedy left-to-right cover of one word. Returns the byte spans used.
    fn cover_word(&self, word: &str, ids: &mut Vec<u32>) -> Vec<(usize, usize)> {
        let bounds: Vec<usize> = word.char_indices().map(|(i, _)| i).chain(std::iter::once(word.len())).collect();
        let n = bounds.len() - 1;
        let mut spans = Vec::new();
        let mut p = 0;
        while p < n {
            let max = self.longest.min(n - p);
            let hit = (1..=max).rev().find_map(|l| self.index.get(&word[bounds[p]..bounds[p + l]]).map(|&id| (l, id)));
            match hit {
                Some((l, id)) => {
                    ids.push(id);
                    spans.push((bounds[p], bounds[p + l]));
                    p += l;
                }
                None => {
                    let ch = word[bounds[p]..].chars().next().unwrap();
                    ids.push(self.oov_id(ch));
                    spans.push((bounds[p], bounds[p + 1]));
                    p += 1;
                }
            }
        }
        spans
    }

    /// Induce a vocabulary from corpus lines.
    ///
    /// Each iteration segments every distinct word with the current
    /// vocabulary and counts all substrings that start at a segment
    /// boundary. Candidates are retained longest first; a retained candidate
    /// discounts its own prefixes so that prefix chains of one frequent word
    /// do not all survive. Single characters are kept when they occur at least
    /// `min_frequency` times.
    pub fn build<I, S>(lines: I, limits: VocabLimits) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if limits.min_frequency < 1 {
            return Err(Error::config("min_frequency must be at least 1"));
        }
        if limits.max_subword_chars < 1 {
            return Err(Error::config("max_subword_chars must be at least 1"));
        }
        let mut word_counts: HashMap<String, u64> = HashMap::new();
        let mut lines_seen = 0usize;
        for line in lines {
            lines_seen += 1;
            for w in pre_tokenize(line.as_ref()) {
                *word_counts.entry(w).or_insert(0) += 1;
            }
        }
        if lines_seen == 0 {
            return Err(Error::data("cannot build a vocabulary from an empty corpus"));
        }
        let mut words: Vec<(String, u64)> = word_counts.into_iter().collect();
        words.sort();

        let mut char_counts: HashMap<char, u64> = HashMap::new();
        for (w, c) in &words {
            for ch in w.chars() {
                *char_counts.entry(ch).or_insert(0) += c;
            }
        }
        let alphabet: Vec<String> = char_counts
            .iter()
            .filter(|(ch, &c)| c >= limits.min_frequency && digit_run_ok(&ch.to_string(), limits.max_consecutive_digits))
            .map(|(ch, _)| ch.to_string())
            .collect();

        let mut vocab = Self::from_subwords(alphabet.clone(), limits)?;
        let mut retained: Vec<(String, u64)> = Vec::new();
        for _ in 0..limits.iterations.max(1) {
            let mut counts: HashMap<String, u64> = HashMap::new();
            for (w, c) in &words {
                let bounds: Vec<usize> = w.char_indices().map(|(i, _)| i).chain(std::iter::once(w.len())).collect();
                let n = bounds.len() - 1;
                let mut ids = Vec::new();
                for (start, _) in vocab.cover_word(w, &mut ids) {
                    let s = bounds.iter().position(|&b| b == start).unwrap();
                    for e in (s + 2)..=n.min(s + limits.max_subword_chars) {
                        let sub = &w[bounds[s]..bounds[e]];
                        if !digit_run_ok(sub, limits.max_consecutive_digits) {
                            break;
                        }
                        *counts.entry(sub.to_string()).or_insert(0) += c;
                    }
                }
            }
            let mut by_len: Vec<(usize, String)> = counts.keys().map(|k| (k.chars().count(), k.clone())).collect();
            by_len.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
            retained.clear();
            for (len, sub) in by_len {
                let c = counts[&sub];
                if c < limits.min_frequency {
                    continue;
                }
                retained.push((sub.clone(), c));
                let mut ends = sub.char_indices().map(|(i, _)| i).skip(1);
                for _ in 1..len {
                    let e = ends.next().unwrap();
                    if let Some(pc) = counts.get_mut(&sub[..e]) {
                        *pc = pc.saturating_sub(c);
                    }
                }
            }
            let mut next: Vec<String> = alphabet.clone();
            next.extend(retained.iter().map(|(s, _)| s.clone()));
            vocab = Self::from_subwords(next, limits)?;
        }

        // Final ordering: frequent first, ties lexicographic.
        let mut freq: HashMap<&str, u64> = retained.iter().map(|(s, c)| (s.as_str(), *c)).collect();
        for ch in &alphabet {
            freq.insert(ch.as_str(), char_counts[&ch.chars().next().unwrap()]);
        }
        let mut ordered: Vec<String> = vocab.subwords.clone();
        ordered.sort_by(|a, b| freq[b.as_str()].cmp(&freq[a.as_str()]).then_with(|| a.cmp(b)));
        Self::from_subwords(ordered, limits)
    }

    fn header(&self) -> String {
        let l = &self.limits;
        format!(
            "#vocab size={} oov_buckets={} hash={} min_frequency={} max_subword_chars={} max_consecutive_digits={} iterations={}",
            self.size(),
            l.oov_buckets,
            OOV_HASH_NAME,
            l.min_frequency,
            l.max_subword_chars,
            l.max_consecutive_digits,
            l.iterations
        )
    }

    /// Canonical file text: header line, then one subword per line.
    pub fn to_file_string(&self) -> String {
        let mut s = self.header();
        s.push('\n');
        for w in &self.subwords {
            let _ = writeln!(s, "{w}");
        }
        s
    }

    /// SHA-256 of the canonical file text.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_file_string().as_bytes()).into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_file_string().as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let header = lines.next().ok_or_else(|| Error::data("empty vocabulary file"))??;
        let fields: HashMap<&str, &str> = header
            .strip_prefix("#vocab ")
            .ok_or_else(|| Error::data("vocabulary header must start with '#vocab'"))?
            .split_whitespace()
            .filter_map(|kv| kv.split_once('='))
            .collect();
        let get = |k: &str| -> Result<&str> {
            fields.get(k).copied().ok_or_else(|| Error::data(format!("vocabulary header lacks {k}")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?.parse::<u64>().map_err(|_| Error::data(format!("bad {k} in vocabulary header")))
        };
        if get("hash")? != OOV_HASH_NAME {
            return Err(Error::data(format!("unsupported OOV hash {:?}", get("hash")?)));
        }
        let limits = VocabLimits {
            min_frequency: num("min_frequency")?,
            max_subword_chars: num("max_subword_chars")? as usize,
            max_consecutive_digits: num("max_consecutive_digits")? as usize,
            iterations: num("iterations")? as usize,
            oov_buckets: num("oov_buckets")? as u32,
        };
        let subwords: Vec<String> = lines.collect::<std::io::Result<_>>()?;
        let size = num("size")? as usize;
        if subwords.len() != size {
            return Err(Error::data(format!("vocabulary header says {size} subwords, file has {}", subwords.len())));
        }
        Self::from_subwords(subwords, limits)
    }
}

fn digit_run_ok(s: &str, max_run: usize) -> bool {
    let mut run = 0;
    for ch in s.chars() {
        if ch.is_ascii_digit() || ch.is_numeric() {
            run += 1;
            if run > max_run {
                return false;
            }
        } else {
            run = 0;
        }
    }
    true
}

/// Lowercase and split into words: maximal alphanumeric runs, plus each
/// other non-whitespace character on its own.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut words = Vec::new();
    let mut current = String::new();
    for ch in lower.chars() {
        if ch.is_alphanumeric() {
            current.push(ch);
            continue;
        }
        if !current.is_empty() {
            words.push(std::mem::take(&mut current));
        }
        if !ch.is_whitespace() {
            words.push(ch.to_string());
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

pub fn tokenize(text: &str, vocab: &SubwordVocab) -> TokenSequence {
    vocab.tokenize(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_limits() -> VocabLimits {
        VocabLimits { min_frequency: 1, ..VocabLimits::default() }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn pre_tokenize_splits_punctuation() {
        assert_eq!(pre_tokenize("Hello, World!  it's 2024"), vec!["hello", ",", "world", "!", "it", "'", "s", "2024"]);
        assert!(pre_tokenize("   ").is_empty());
    }

    #[test]
    fn greedy_cover() {
        let v = SubwordVocab::from_subwords(["un", "believ", "able"], small_limits()).unwrap();
        assert_eq!(v.pieces("unbelievable"), vec!["un", "believ", "able"]);
        assert_eq!(v.tokenize("unbelievable").ids, vec![0, 1, 2]);
        assert!(v.tokenize("").is_empty());
    }

    #[test]
    fn oov_character_bucket() {
        let v = SubwordVocab::from_subwords(["ab"], small_limits()).unwrap();
        let ids = v.tokenize("z").ids;
        let expected = 1 + (fnv1a64("z".as_bytes()) % 1000) as u32;
        assert_eq!(ids, vec![expected]);
        assert!(ids[0] >= 1 && ids[0] < 1001);
        // each unmatched character hashes on its own
        let ids = v.tokenize("zab€").ids;
        assert_eq!(ids, vec![expected, 0, v.oov_id('€')]);
    }

    #[test]
    fn truncation_keeps_prefix() {
        let v = SubwordVocab::from_subwords(["a"], small_limits()).unwrap();
        let text = vec!["a"; 100].join(" ");
        assert_eq!(v.tokenize(&text).len(), 60);
        assert_eq!(v.tokenize_limited(&text, 7).len(), 7);
    }

    #[test]
    fn build_retains_frequent_words() {
        let lines = vec!["hello world"; 10_000];
        let v = SubwordVocab::build(lines, VocabLimits::default()).unwrap();
        assert!(v.contains("hello") && v.contains("world"));
        assert_eq!(v.pieces("Hello World"), vec!["hello", "world"]);
    }

    #[test]
    fn build_threshold_boundary() {
        let v = SubwordVocab::build(vec!["a"; 250], VocabLimits::default()).unwrap();
        assert!(v.contains("a"));
        let v = SubwordVocab::build(vec!["a"; 249], VocabLimits::default()).unwrap();
        assert!(!v.contains("a"));
    }

    #[test]
    fn build_limits_digit_runs() {
        let mut lines = vec!["call 12345 now"; 400];
        lines.extend(vec!["x123456789y"; 400]);
        let v = SubwordVocab::build(lines, VocabLimits::default()).unwrap();
        assert!(v.subwords().iter().all(|s| digit_run_ok(s, 4)));
        assert!(!v.subwords().iter().any(|s| s.contains("12345")));
        assert!(v.contains("1234"));
    }

    #[test]
    fn build_rejects_bad_input() {
        assert!(matches!(SubwordVocab::build(Vec::<String>::new(), VocabLimits::default()), Err(Error::Data(_))));
        let bad = VocabLimits { min_frequency: 0, ..VocabLimits::default() };
        assert!(matches!(SubwordVocab::build(vec!["a"], bad), Err(Error::Config(_))));
    }

    #[test]
    fn build_respects_length_limit() {
        let long = "abcdefghijklmnopqrstuvwxyz";
        let v = SubwordVocab::build(vec![long; 300], VocabLimits::default()).unwrap();
        assert!(v.subwords().iter().all(|s| s.chars().count() <= 20));
        assert_eq!(v.pieces(long).concat(), long);
    }

    #[test]
    fn file_round_trip() {
        let v = SubwordVocab::build(vec!["the cat sat on the mat"; 300], VocabLimits::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        let back = SubwordVocab::load(&p).unwrap();
        assert_eq!(back.subwords(), v.subwords());
        assert_eq!(back.digest(), v.digest());
        assert_eq!(back.tokenize("the cat"), v.tokenize("the cat"));
    }

    fn corpus_vocab() -> SubwordVocab {
        let lines = [
            "the quick brown fox jumps over the lazy dog",
            "unbelievable things happen every day",
            "numbers like 1234 and 98765 appear",
            "café naïve résumé",
        ];
        let many: Vec<&str> = lines.iter().cycle().take(400).copied().collect();
        SubwordVocab::build(many, VocabLimits { min_frequency: 50, ..VocabLimits::default() }).unwrap()
    }

    proptest! {
        #[test]
        fn ids_always_in_range(text in "\\PC{0,200}") {
            let v = corpus_vocab();
            let seq = v.tokenize(&text);
            prop_assert!(seq.len() <= 60);
            prop_assert!(seq.ids.iter().all(|&id| (id as usize) < v.total_ids()));
            prop_assert_eq!(seq.clone(), v.tokenize(&text));
        }

        #[test]
        fn greedy_is_longest(text in "[a-z0-9 ]{0,80}") {
            let v = corpus_vocab();
            for word in pre_tokenize(&text) {
                let mut ids = Vec::new();
                let spans = v.cover_word(&word, &mut ids);
                for (start, end) in spans {
                    let rest = &word[start..];
                    let used = end - start;
                    // brute force: no longer vocabulary entry is a prefix here
                    for s in v.subwords() {
                        if rest.starts_with(s.as_str()) {
                            prop_assert!(s.len() <= used, "{s} longer than chosen piece in {word}");
                        }
                    }
                }
            }
        }
    }
}
