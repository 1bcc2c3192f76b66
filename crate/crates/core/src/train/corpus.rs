//! Corpora and the synthetic lexicon language.
//!
//! The lexicon language draws words uniformly (with replacement) from a
//! fixed list, joins them with the separator `S − 1` into an endless stream
//! `w₁ sep w₂ sep …`, and cuts a length-`D` window starting at an offset
//! drawn uniformly from `0..=max_word_len`. Because the generator is this
//! simple, the exact probability of any window is computable.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::types::{SequenceSpec, Token};

/// Bundled desk-scale corpus (`S = 16`, `D = 32`), one sequence per line.
pub const BUNDLED_CORPUS: &str = include_str!("../../data/corpus.txt");
/// The lexicon that generated [`BUNDLED_CORPUS`], one word per line.
pub const BUNDLED_LEXICON: &str = include_str!("../../data/lexicon.txt");
pub const BUNDLED_ALPHABET: usize = 16;
pub const BUNDLED_LEN: usize = 32;

pub const DEFAULT_LEXICON_SIZE: usize = 200;
pub const MIN_WORD_LEN: usize = 2;
pub const MAX_WORD_LEN: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct LexiconLanguage {
    spec: SequenceSpec,
    words: Vec<Vec<Token>>,
    max_offset: usize,
}

impl LexiconLanguage {
    /// Random lexicon of `size` distinct words with lengths in
    /// `MIN_WORD_LEN..=MAX_WORD_LEN` over symbols `0..S−1`.
    pub fn generate<R: Rng + ?Sized>(spec: SequenceSpec, size: usize, rng: &mut R) -> Result<Self> {
        let letters = spec.alphabet() - 1;
        if letters < 2 {
            return Err(Error::InvalidSpec("lexicon language needs S >= 3".into()));
        }
        let capacity: usize = (MIN_WORD_LEN..=MAX_WORD_LEN).map(|l| letters.saturating_pow(l as u32)).sum();
        if size == 0 || size > capacity / 2 {
            return Err(Error::OutOfRange(format!("cannot draw {size} distinct words")));
        }
        let mut seen = HashSet::new();
        let mut words = Vec::with_capacity(size);
        while words.len() < size {
            let len = rng.gen_range(MIN_WORD_LEN..=MAX_WORD_LEN);
            let w: Vec<Token> = (0..len).map(|_| rng.gen_range(0..letters as Token)).collect();
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }
        Self::from_words(spec, words)
    }

    pub fn from_words(spec: SequenceSpec, words: Vec<Vec<Token>>) -> Result<Self> {
        let sep = spec.alphabet() as Token - 1;
        if words.is_empty() {
            return Err(Error::Invalid("empty lexicon".into()));
        }
        for w in &words {
            if w.is_empty() || w.iter().any(|&t| t >= sep) {
                return Err(Error::Invalid(format!("word {w:?} is empty or uses the separator")));
            }
        }
        let max_offset = words.iter().map(Vec::len).max().unwrap_or(0) + 1;
        Ok(Self {
            spec,
            words,
            max_offset,
        })
    }

    /// Parses one word per line as whitespace-separated token ids.
    pub fn parse(spec: SequenceSpec, text: &str) -> Result<Self> {
        let words = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| parse_ids(l, spec.alphabet()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_words(spec, words)
    }

    pub fn bundled() -> Self {
        let spec = SequenceSpec::new(BUNDLED_ALPHABET, BUNDLED_LEN).expect("valid bundled spec");
        Self::parse(spec, BUNDLED_LEXICON).expect("bundled lexicon parses")
    }

    pub fn spec(&self) -> SequenceSpec {
        self.spec
    }

    pub fn separator(&self) -> Token {
        self.spec.alphabet() as Token - 1
    }

    pub fn words(&self) -> &[Vec<Token>] {
        &self.words
    }

    pub fn lexicon_set(&self) -> HashSet<Vec<Token>> {
        self.words.iter().cloned().collect()
    }

    pub fn to_text(&self) -> String {
        self.words.iter().map(|w| join_ids(w) + "\n").collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Token> {
        let d = self.spec.len();
        let offset = rng.gen_range(0..self.max_offset);
        let mut stream = Vec::with_capacity(offset + d + self.max_offset);
        while stream.len() < offset + d {
            stream.extend_from_slice(self.words.choose(rng).expect("non-empty lexicon"));
            stream.push(self.separator());
        }
        stream[offset..offset + d].to_vec()
    }

    /// Exact `ln p(x)` under the generator; `-inf` if `x` cannot be produced.
    pub fn log_prob(&self, x: &[Token]) -> f64 {
        let d = self.spec.len();
        if x.len() != d {
            return f64::NEG_INFINITY;
        }
        let sep = self.separator();
        let pw = 1.0 / self.words.len() as f64;
        let mut total = 0.0;
        for o in 0..self.max_offset {
            let end = o + d;
            // starts[b]: probability that a word starts at stream position b and
            // every emitted symbol inside the window so far matches x.
            let mut starts = vec![0.0; end];
            starts[0] = 1.0;
            let mut covered = 0.0;
            for b in 0..end {
                let mass = starts[b];
                if mass == 0.0 {
                    continue;
                }
                for w in &self.words {
                    let unit_len = w.len() + 1;
                    let ok = (0..unit_len).all(|k| {
                        let pos = b + k;
                        if pos < o || pos >= end {
                            return true;
                        }
                        let sym = if k < w.len() { w[k] } else { sep };
                        x[pos - o] == sym
                    });
                    if !ok {
                        continue;
                    }
                    if b + unit_len >= end {
                        covered += mass * pw;
                    } else {
                        starts[b + unit_len] += mass * pw;
                    }
                }
            }
            total += covered / self.max_offset as f64;
        }
        if total > 0.0 {
            total.ln()
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Fixed-length training sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    spec: SequenceSpec,
    sequences: Vec<Vec<Token>>,
}

/// Maps `a..=z` to `0..=25` and space to `26`.
pub fn char_to_token(c: char) -> Option<Token> {
    match c {
        'a'..='z' => Some(c as Token - 'a' as Token),
        ' ' => Some(26),
        _ => None,
    }
}

fn parse_ids(line: &str, alphabet: usize) -> Result<Vec<Token>> {
    line.split_whitespace()
        .enumerate()
        .map(|(p, s)| {
            let t: Token = s
                .parse()
                .map_err(|_| Error::Invalid(format!("'{s}' is not a token id")))?;
            if t as usize >= alphabet {
                return Err(Error::InvalidToken {
                    token: t,
                    position: p,
                    alphabet,
                });
            }
            Ok(t)
        })
        .collect()
}

pub fn join_ids(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

impl Corpus {
    pub fn new(spec: SequenceSpec, sequences: Vec<Vec<Token>>) -> Result<Self> {
        for (n, s) in sequences.iter().enumerate() {
            if s.len() != spec.len() {
                return Err(Error::Invalid(format!(
                    "sequence {n} has length {}, expected {}",
                    s.len(),
                    spec.len()
                )));
            }
            for (p, &t) in s.iter().enumerate() {
                spec.check_token(t, p)?;
            }
        }
        Ok(Self { spec, sequences })
    }

    /// One sequence per non-empty line. In char mode each line is text over
    /// `a..=z` and space; otherwise whitespace-separated token ids.
    pub fn parse(spec: SequenceSpec, text: &str, char_mode: bool) -> Result<Self> {
        if char_mode && spec.alphabet() < 27 {
            return Err(Error::InvalidSpec("char mode needs S >= 27".into()));
        }
        let mut seqs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let s = if char_mode {
                line.chars()
                    .map(|c| char_to_token(c).ok_or_else(|| Error::Invalid(format!("line {}: unsupported character {c:?}", n + 1))))
                    .collect::<Result<Vec<_>>>()?
            } else {
                parse_ids(line, spec.alphabet()).map_err(|e| Error::Invalid(format!("line {}: {e}", n + 1)))?
            };
            seqs.push(s);
        }
        Self::new(spec, seqs)
    }

    pub fn load(path: &Path, spec: SequenceSpec, char_mode: bool) -> Result<Self> {
        Self::parse(spec, &fs::read_to_string(path)?, char_mode)
    }

    pub fn bundled() -> Self {
        let spec = SequenceSpec::new(BUNDLED_ALPHABET, BUNDLED_LEN).expect("valid bundled spec");
        Self::parse(spec, BUNDLED_CORPUS, false).expect("bundled corpus parses")
    }

    pub fn generate<R: Rng + ?Sized>(lang: &LexiconLanguage, n: usize, rng: &mut R) -> Self {
        Self {
            spec: lang.spec(),
            sequences: (0..n).map(|_| lang.sample(rng)).collect(),
        }
    }

    pub fn spec(&self) -> SequenceSpec {
        self.spec
    }

    pub fn sequences(&self) -> &[Vec<Token>] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn to_text(&self) -> String {
        self.sequences.iter().map(|s| join_ids(s) + "\n").collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn log_prob_sums_to_one_on_a_small_language() {
        let spec = SequenceSpec::new(3, 4).unwrap();
        let lang = LexiconLanguage::from_words(spec, vec![vec![0], vec![1, 0], vec![1, 1]]).unwrap();
        let mut total = 0.0;
        for idx in 0..81usize {
            let x: Vec<Token> = (0..4).map(|p| ((idx / 3usize.pow(3 - p)) % 3) as Token).collect();
            total += lang.log_prob(&x).exp();
        }
        assert!((total - 1.0).abs() < 1e-12, "{total}");
    }

    #[test]
    fn log_prob_matches_sampling_frequencies() {
        let spec = SequenceSpec::new(3, 3).unwrap();
        let lang = LexiconLanguage::from_words(spec, vec![vec![0, 1], vec![1]]).unwrap();
        let mut rng = RngStream::new(1);
        let n = 200_000;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..n {
            *counts.entry(lang.sample(&mut rng)).or_insert(0usize) += 1;
        }
        for (x, c) in counts {
            let p = lang.log_prob(&x).exp();
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((c as f64 / n as f64 - p).abs() < 4.0 * se + 1e-9, "{x:?}");
        }
    }

    #[test]
    fn generated_lexicon_is_distinct_and_in_range() {
        let spec = SequenceSpec::new(16, 32).unwrap();
        let lang = LexiconLanguage::generate(spec, 200, &mut RngStream::new(3)).unwrap();
        assert_eq!(lang.lexicon_set().len(), 200);
        for w in lang.words() {
            assert!((MIN_WORD_LEN..=MAX_WORD_LEN).contains(&w.len()));
            assert!(w.iter().all(|&t| t < 15));
        }
        let back = LexiconLanguage::parse(spec, &lang.to_text()).unwrap();
        assert_eq!(back, lang);
    }

    #[test]
    fn corpus_parsing() {
        let spec = SequenceSpec::new(4, 3).unwrap();
        let c = Corpus::parse(spec, "0 1 2\n\n3 3 3\n", false).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(Corpus::parse(spec, &c.to_text(), false).unwrap(), c);
        assert!(Corpus::parse(spec, "0 1\n", false).is_err());
        assert!(Corpus::parse(spec, "0 1 4\n", false).is_err());
        let spec27 = SequenceSpec::new(27, 5).unwrap();
        let c = Corpus::parse(spec27, "ab zy\n", true).unwrap();
        assert_eq!(c.sequences()[0], vec![0, 1, 26, 25, 24]);
        assert!(Corpus::parse(spec27, "AB zy\n", true).is_err());
    }

    #[test]
    fn bundled_corpus_is_consistent_with_its_lexicon() {
        let lang = LexiconLanguage::bundled();
        let corpus = Corpus::bundled();
        assert_eq!(lang.words().len(), DEFAULT_LEXICON_SIZE);
        assert!(corpus.len() >= 1000);
        for s in corpus.sequences().iter().take(50) {
            assert!(lang.log_prob(s).is_finite());
        }
    }
}
