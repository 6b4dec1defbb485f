//! Vocabulary construction, synthetic parallel-corpus generation with
//! controlled length divergence, and TSV corpus files.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LanmtError, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Maximum supported target-minus-source length offset.
pub const MAX_OFFSET: i64 = 50;

/// A whitespace-tokenized sentence pair before vocabulary encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

/// An encoded sentence pair. Sequences carry no bos/eos markers and
/// never contain pad ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from raw pairs: reserved entries first, then
    /// all tokens with frequency >= `min_count`, ordered by frequency
    /// descending and lexicographically within ties.
    pub fn build(pairs: &[RawPair], min_count: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(LanmtError::EmptyCorpus);
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for pair in pairs {
            for tok in pair.source.iter().chain(pair.target.iter()) {
                *counts.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(tok, n)| n >= min_count && !RESERVED.contains(&tok))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(kept.into_iter().map(|(tok, _)| tok.to_string()));
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Token id, falling back to `<unk>` for unknown tokens.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or(LanmtError::IdOutOfVocab { id, vocab_size: self.size() })
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>> {
        ids.iter().map(|&id| self.token(id).map(str::to_string)).collect()
    }

    pub fn encode_pair(&self, pair: &RawPair) -> SentencePair {
        SentencePair {
            source: self.encode(&pair.source),
            target: self.encode(&pair.target),
        }
    }

    pub fn encode_pairs(&self, pairs: &[RawPair]) -> Vec<SentencePair> {
        pairs.iter().map(|p| self.encode_pair(p)).collect()
    }

    /// Writes one non-reserved token per line; line number = id - 4.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for tok in &self.tokens[RESERVED.len()..] {
            writeln!(out, "{tok}").expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(text.lines().map(str::to_string));
        Ok(Self::from_tokens(tokens))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    DigitToWord,
    ExpandContract,
    IdentityCopy,
}

/// Synthetic parallel-task description. `fertility` maps each source
/// token to its target-phrase length (0..=3); tokens in the table are
/// the source inventory for expand-contract and identity-copy.
/// `alt_prob` is the per-occurrence probability of rendering a phrase
/// with its alternative wording (equal length, different tokens),
/// which makes raw targets multimodal while keeping |y| deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub min_source_len: usize,
    pub max_source_len: usize,
    pub fertility: BTreeMap<String, usize>,
    #[serde(default)]
    pub alt_prob: f64,
    pub seed: u64,
}

const DIGIT_WORDS: [&str; 10] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

impl SyntheticTaskSpec {
    pub fn digit_to_word(min_len: usize, max_len: usize, seed: u64) -> Self {
        Self {
            kind: TaskKind::DigitToWord,
            min_source_len: min_len,
            max_source_len: max_len,
            fertility: BTreeMap::new(),
            alt_prob: 0.0,
            seed,
        }
    }

    pub fn identity_copy(min_len: usize, max_len: usize, seed: u64) -> Self {
        let fertility = ('a'..='j').map(|c| (c.to_string(), 1)).collect();
        Self {
            kind: TaskKind::IdentityCopy,
            min_source_len: min_len,
            max_source_len: max_len,
            fertility,
            alt_prob: 0.0,
            seed,
        }
    }

    /// Default expand-contract inventory: ten tokens with fertilities
    /// cycling through 0..=3, so |y| - |x| varies in both directions.
    pub fn expand_contract(min_len: usize, max_len: usize, alt_prob: f64, seed: u64) -> Self {
        let fertility = ('a'..='j')
            .enumerate()
            .map(|(i, c)| (c.to_string(), i % 4))
            .collect();
        Self {
            kind: TaskKind::ExpandContract,
            min_source_len: min_len,
            max_source_len: max_len,
            fertility,
            alt_prob,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_source_len < 1 || self.max_source_len < self.min_source_len {
            return Err(LanmtError::InvalidArgument(format!(
                "bad source length range [{}, {}]",
                self.min_source_len, self.max_source_len
            )));
        }
        if !(0.0..=1.0).contains(&self.alt_prob) {
            return Err(LanmtError::InvalidArgument(format!(
                "alt_prob {} outside [0, 1]",
                self.alt_prob
            )));
        }
        match self.kind {
            TaskKind::DigitToWord => {}
            TaskKind::ExpandContract | TaskKind::IdentityCopy => {
                if self.fertility.is_empty() {
                    return Err(LanmtError::InvalidArgument(
                        "fertility table is empty".into(),
                    ));
                }
                if let Some((tok, &f)) = self.fertility.iter().find(|&(_, &f)| f > 3) {
                    return Err(LanmtError::InvalidArgument(format!(
                        "fertility {f} for token {tok:?} exceeds cap 3"
                    )));
                }
                // the offset bound |y| - |x| <= 2·|x| <= 2·max_len must stay
                // within the supported window
                let worst = 2 * self.max_source_len as i64;
                if worst > MAX_OFFSET {
                    return Err(LanmtError::InvalidArgument(format!(
                        "max source length {} can exceed offset bound {MAX_OFFSET}",
                        self.max_source_len
                    )));
                }
            }
        }
        Ok(())
    }

    fn inventory(&self) -> Vec<&str> {
        match self.kind {
            TaskKind::DigitToWord => vec!["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"],
            _ => self.fertility.keys().map(String::as_str).collect(),
        }
    }

    /// The phrase a source token maps to. Canonical rendering derives
    /// phrase tokens from the source token; the alternative rendering
    /// has the same length with distinct tokens.
    fn phrase(&self, token: &str, alt: bool) -> Vec<String> {
        match self.kind {
            TaskKind::DigitToWord => {
                let d = token.parse::<usize>().expect("digit token");
                vec![DIGIT_WORDS[d].to_string()]
            }
            TaskKind::IdentityCopy => vec![token.to_string()],
            TaskKind::ExpandContract => {
                let f = *self.fertility.get(token).expect("token in fertility table");
                let suffix = if alt { "x" } else { "" };
                (1..=f).map(|i| format!("{token}{i}{suffix}")).collect()
            }
        }
    }

    /// Canonical target rendering for a source sentence; used for
    /// held-out references.
    pub fn canonical_target(&self, source: &[String]) -> Vec<String> {
        source.iter().flat_map(|t| self.phrase(t, false)).collect()
    }
}

/// Generates `n` pairs deterministically from the spec seed. Sources are
/// uniform over the inventory at a uniform length in the configured
/// range; expand-contract sources are resampled until the target is
/// non-empty.
pub fn generate_synthetic(spec: &SyntheticTaskSpec, n: usize) -> Result<Vec<RawPair>> {
    if n == 0 {
        return Err(LanmtError::InvalidArgument("n must be >= 1".into()));
    }
    spec.validate()?;
    let inventory = spec.inventory();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pairs = Vec::with_capacity(n);
    while pairs.len() < n {
        let len = rng.random_range(spec.min_source_len..=spec.max_source_len);
        let source: Vec<String> = (0..len)
            .map(|_| inventory[rng.random_range(0..inventory.len())].to_string())
            .collect();
        let target: Vec<String> = source
            .iter()
            .flat_map(|t| {
                let alt = spec.alt_prob > 0.0 && rng.random::<f64>() < spec.alt_prob;
                spec.phrase(t, alt)
            })
            .collect();
        if target.is_empty() {
            continue;
        }
        debug_assert!(
            (target.len() as i64 - source.len() as i64).abs() <= MAX_OFFSET,
            "offset bound violated"
        );
        pairs.push(RawPair { source, target });
    }
    Ok(pairs)
}

/// Reads a UTF-8 TSV corpus: one `source TAB target` pair per line,
/// whitespace-tokenized.
pub fn read_parallel_corpus(path: &Path) -> Result<Vec<RawPair>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(LanmtError::MalformedLine {
                line: lineno,
                reason: format!("expected 2 TAB-separated fields, found {}", fields.len()),
            });
        }
        let source: Vec<String> = fields[0].split_whitespace().map(str::to_string).collect();
        let target: Vec<String> = fields[1].split_whitespace().map(str::to_string).collect();
        if source.is_empty() || target.is_empty() {
            return Err(LanmtError::MalformedLine {
                line: lineno,
                reason: "empty source or target side".into(),
            });
        }
        pairs.push(RawPair { source, target });
    }
    Ok(pairs)
}

pub fn write_parallel_corpus(pairs: &[RawPair], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    for pair in pairs {
        writeln!(out, "{}\t{}", pair.source.join(" "), pair.target.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(src: &str, tgt: &str) -> RawPair {
        RawPair {
            source: src.split_whitespace().map(str::to_string).collect(),
            target: tgt.split_whitespace().map(str::to_string).collect(),
        }
    }

    #[test]
    fn vocab_from_two_tokens() {
        let v = Vocab::build(&[raw("a b", "b a")], 1).unwrap();
        assert_eq!(v.size(), 6);
        assert_eq!(v.token(PAD).unwrap(), "<pad>");
        assert_eq!(v.token(4).unwrap(), "a");
        assert_eq!(v.token(5).unwrap(), "b");
    }

    #[test]
    fn vocab_frequency_threshold() {
        let v = Vocab::build(&[raw("a a a", "a")], 2).unwrap();
        assert_eq!(v.size(), 5);
        assert_eq!(v.id("a"), 4);
    }

    #[test]
    fn vocab_orders_by_frequency_then_lexicographic() {
        let v = Vocab::build(&[raw("b b c", "a a z")], 1).unwrap();
        // a and b both occur twice; a precedes b lexicographically
        assert_eq!(v.token(4).unwrap(), "a");
        assert_eq!(v.token(5).unwrap(), "b");
        assert_eq!(v.token(6).unwrap(), "c");
        assert_eq!(v.token(7).unwrap(), "z");
    }

    #[test]
    fn vocab_round_trips_tokens() {
        let v = Vocab::build(&[raw("a b c", "d e f")], 1).unwrap();
        for id in 4..v.size() as u32 {
            let tok = v.token(id).unwrap().to_string();
            assert_eq!(v.id(&tok), id);
        }
        assert_eq!(v.id("never-seen"), UNK);
    }

    #[test]
    fn vocab_empty_corpus_errors() {
        assert!(matches!(Vocab::build(&[], 1), Err(LanmtError::EmptyCorpus)));
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::build(&[raw("q w e", "r t y")], 1).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(loaded.size(), v.size());
        for id in 0..v.size() as u32 {
            assert_eq!(loaded.token(id).unwrap(), v.token(id).unwrap());
        }
    }

    #[test]
    fn digit_task_maps_digits_to_words() {
        let spec = SyntheticTaskSpec::digit_to_word(3, 3, 7);
        let src: Vec<String> = ["3", "1", "4"].iter().map(|s| s.to_string()).collect();
        let tgt = spec.canonical_target(&src);
        assert_eq!(tgt, vec!["three", "one", "four"]);
    }

    #[test]
    fn expand_contract_fertility_sums() {
        let mut fertility = BTreeMap::new();
        fertility.insert("a".to_string(), 2);
        fertility.insert("b".to_string(), 0);
        let spec = SyntheticTaskSpec {
            kind: TaskKind::ExpandContract,
            min_source_len: 3,
            max_source_len: 3,
            fertility,
            alt_prob: 0.0,
            seed: 0,
        };
        let src: Vec<String> = ["a", "b", "a"].iter().map(|s| s.to_string()).collect();
        let tgt = spec.canonical_target(&src);
        assert_eq!(tgt.len(), 4);
        assert_eq!(tgt, vec!["a1", "a2", "a1", "a2"]);
    }

    #[test]
    fn identity_copy_is_identity() {
        let spec = SyntheticTaskSpec::identity_copy(2, 2, 0);
        let src: Vec<String> = ["x", "y"].iter().map(|s| s.to_string()).collect();
        assert_eq!(spec.canonical_target(&src), src);
    }

    #[test]
    fn generation_is_deterministic_and_in_offset_range() {
        let spec = SyntheticTaskSpec::expand_contract(3, 10, 0.3, 99);
        let a = generate_synthetic(&spec, 500).unwrap();
        let b = generate_synthetic(&spec, 500).unwrap();
        assert_eq!(a, b);
        for pair in &a {
            let offset = pair.target.len() as i64 - pair.source.len() as i64;
            assert!((-MAX_OFFSET..=MAX_OFFSET).contains(&offset));
            assert!(!pair.target.is_empty());
        }
        // both directions of length divergence occur
        assert!(a.iter().any(|p| p.target.len() > p.source.len()));
        assert!(a.iter().any(|p| p.target.len() < p.source.len()));
    }

    #[test]
    fn alt_phrases_keep_length_and_differ() {
        let spec = SyntheticTaskSpec::expand_contract(4, 8, 0.5, 3);
        let pairs = generate_synthetic(&spec, 200).unwrap();
        let mut saw_alt = false;
        for pair in &pairs {
            let canonical = spec.canonical_target(&pair.source);
            assert_eq!(pair.target.len(), canonical.len(), "alt must preserve length");
            if pair.target != canonical {
                saw_alt = true;
            }
        }
        assert!(saw_alt, "alt_prob=0.5 should produce variant targets");
    }

    #[test]
    fn corpus_file_round_trip() {
        let spec = SyntheticTaskSpec::digit_to_word(1, 8, 5);
        let pairs = generate_synthetic(&spec, 100).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tsv");
        write_parallel_corpus(&pairs, &path).unwrap();
        let back = read_parallel_corpus(&path).unwrap();
        assert_eq!(back, pairs);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "a b\tc d\na b c\n").unwrap();
        match read_parallel_corpus(&path) {
            Err(LanmtError::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed-line error, got {other:?}"),
        }
    }

    #[test]
    fn empty_side_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "a b\t\n").unwrap();
        assert!(matches!(
            read_parallel_corpus(&path),
            Err(LanmtError::MalformedLine { line: 1, .. })
        ));
    }

    #[test]
    fn encode_pairs_uses_dense_ids() {
        let spec = SyntheticTaskSpec::expand_contract(3, 6, 0.0, 11);
        let raws = generate_synthetic(&spec, 50).unwrap();
        let vocab = Vocab::build(&raws, 1).unwrap();
        for pair in vocab.encode_pairs(&raws) {
            for &id in pair.source.iter().chain(pair.target.iter()) {
                assert!(id != PAD && (id as usize) < vocab.size());
            }
        }
    }
}
