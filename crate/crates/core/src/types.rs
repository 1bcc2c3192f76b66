//! Sequence, ordering and probability primitives.
//!
//! Positions and ordering ranks are 0-indexed: the `i` tokens revealed first
//! sit at `perm[0..i]`, and "slot `i + 1`" in 1-indexed notation is rank `i`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;

/// Tolerance for the normalization check on probability rows.
pub const ROW_TOLERANCE: f64 = 1e-9;

/// Alphabet size `S`, sequence length `D` and the mask sentinel `S`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSpec {
    alphabet: usize,
    len: usize,
}

impl SequenceSpec {
    pub fn new(alphabet: usize, len: usize) -> Result<Self> {
        if alphabet < 2 {
            return Err(Error::InvalidSpec(format!("alphabet size {alphabet} < 2")));
        }
        if len < 1 {
            return Err(Error::InvalidSpec("sequence length must be >= 1".into()));
        }
        if alphabet >= Token::MAX as usize {
            return Err(Error::InvalidSpec(format!("alphabet size {alphabet} too large")));
        }
        Ok(Self { alphabet, len })
    }

    /// `S`.
    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    /// `D`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn mask_id(&self) -> Token {
        self.alphabet as Token
    }

    pub fn is_mask(&self, t: Token) -> bool {
        t == self.mask_id()
    }

    pub fn check_token(&self, token: Token, position: usize) -> Result<()> {
        if (token as usize) < self.alphabet {
            Ok(())
        } else {
            Err(Error::InvalidToken {
                token,
                position,
                alphabet: self.alphabet,
            })
        }
    }
}

/// A length-`D` sequence whose entries are tokens or the mask sentinel.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn new(spec: &SequenceSpec, tokens: Vec<Token>) -> Result<Self> {
        if tokens.len() != spec.len() {
            return Err(Error::LengthMismatch {
                expected: spec.len(),
                actual: tokens.len(),
            });
        }
        for (p, &t) in tokens.iter().enumerate() {
            if !spec.is_mask(t) {
                spec.check_token(t, p)?;
            }
        }
        Ok(Self { tokens })
    }

    pub fn masked(spec: &SequenceSpec) -> Self {
        Self {
            tokens: vec![spec.mask_id(); spec.len()],
        }
    }

    /// Errors unless every entry is a real token.
    pub fn new_complete(spec: &SequenceSpec, tokens: Vec<Token>) -> Result<Self> {
        for (p, &t) in tokens.iter().enumerate() {
            spec.check_token(t, p)?;
        }
        Self::new(spec, tokens)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, position: usize) -> Token {
        self.tokens[position]
    }

    pub fn into_tokens(self) -> Vec<Token> {
        self.tokens
    }
}

/// A generation order: `perm[r]` is the position revealed at rank `r`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ordering {
    perm: Vec<usize>,
}

impl Ordering {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let n = perm.len();
        let mut seen = vec![false; n];
        for &p in &perm {
            if p >= n || seen[p] {
                return Err(Error::NotAPermutation(n));
            }
            seen[p] = true;
        }
        Ok(Self { perm })
    }

    pub fn identity(len: usize) -> Self {
        Self {
            perm: (0..len).collect(),
        }
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Position at rank `r`.
    pub fn at(&self, rank: usize) -> usize {
        self.perm[rank]
    }

    /// Inverse permutation: `ranks()[p]` is the rank of position `p`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![0; self.perm.len()];
        for (rank, &p) in self.perm.iter().enumerate() {
            r[p] = rank;
        }
        r
    }

    /// Stable 64-bit FNV-1a hash, used to label orderings in CSV output.
    pub fn stable_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &p in &self.perm {
            for b in (p as u64).to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Uniform random permutation of `0..len`.
pub fn sample_ordering<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Ordering {
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(rng);
    Ordering { perm }
}

/// A partially revealed sequence: `perm[0..i]` carry values, the rest are masked.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevealState {
    spec: SequenceSpec,
    seq: TokenSequence,
    revealed: usize,
    ordering: Ordering,
}

impl RevealState {
    pub fn spec(&self) -> &SequenceSpec {
        &self.spec
    }

    pub fn seq(&self) -> &TokenSequence {
        &self.seq
    }

    pub fn tokens(&self) -> &[Token] {
        self.seq.tokens()
    }

    pub fn revealed(&self) -> usize {
        self.revealed
    }

    pub fn ordering(&self) -> &Ordering {
        &self.ordering
    }

    pub fn masked_count(&self) -> usize {
        self.spec.len() - self.revealed
    }

    pub fn is_complete(&self) -> bool {
        self.revealed == self.spec.len()
    }

    /// Revealed tokens in ordering order.
    pub fn revealed_tokens(&self) -> Vec<Token> {
        self.ordering.perm[..self.revealed]
            .iter()
            .map(|&p| self.seq.get(p))
            .collect()
    }

    /// Reveals the next `tokens.len()` ranks with the given values.
    pub fn advance(&self, tokens: &[Token]) -> Result<Self> {
        let end = self.revealed + tokens.len();
        if end > self.spec.len() {
            return Err(Error::RevealOutOfRange {
                count: end,
                len: self.spec.len(),
            });
        }
        let mut values = self.seq.tokens().to_vec();
        for (k, &t) in tokens.iter().enumerate() {
            let p = self.ordering.at(self.revealed + k);
            self.spec.check_token(t, p)?;
            values[p] = t;
        }
        Ok(Self {
            spec: self.spec,
            seq: TokenSequence { tokens: values },
            revealed: end,
            ordering: self.ordering.clone(),
        })
    }
}

/// Masks every position except `perm[0..i]`, which keep `seq`'s values.
pub fn make_reveal_state(
    spec: &SequenceSpec,
    seq: &TokenSequence,
    ordering: &Ordering,
    i: usize,
) -> Result<RevealState> {
    if seq.len() != spec.len() {
        return Err(Error::LengthMismatch {
            expected: spec.len(),
            actual: seq.len(),
        });
    }
    if ordering.len() != spec.len() {
        return Err(Error::NotAPermutation(spec.len()));
    }
    let ordering = Ordering::new(ordering.perm.clone())?;
    if i > spec.len() {
        return Err(Error::RevealOutOfRange {
            count: i,
            len: spec.len(),
        });
    }
    let mut tokens = vec![spec.mask_id(); spec.len()];
    for &p in &ordering.perm[..i] {
        let t = seq.get(p);
        spec.check_token(t, p)?;
        tokens[p] = t;
    }
    Ok(RevealState {
        spec: *spec,
        seq: TokenSequence { tokens },
        revealed: i,
        ordering,
    })
}

/// A distribution over the `S` tokens, stored in linear space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbRow {
    p: Vec<f64>,
}

impl ProbRow {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::InvalidRow("empty row".into()));
        }
        let mut sum = 0.0;
        for &v in &p {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidRow(format!("entry {v} is not a probability")));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > ROW_TOLERANCE {
            return Err(Error::InvalidRow(format!("sums to {sum}")));
        }
        Ok(Self { p })
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(w: Vec<f64>) -> Result<Self> {
        let sum: f64 = w.iter().sum();
        if !(sum > 0.0) || w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidRow("weights must be non-negative with positive sum".into()));
        }
        Ok(Self {
            p: w.into_iter().map(|v| v / sum).collect(),
        })
    }

    pub fn uniform(size: usize) -> Self {
        Self {
            p: vec![1.0 / size as f64; size],
        }
    }

    /// Softmax of logits with max subtraction.
    pub fn softmax(logits: &[f64]) -> Self {
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        Self {
            p: e.into_iter().map(|v| v / s).collect(),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn prob(&self, t: Token) -> f64 {
        self.p[t as usize]
    }

    /// Inverse-CDF draw from one uniform in `[0, 1)`.
    pub fn sample_with(&self, u: f64) -> Token {
        let target = u * self.p.iter().sum::<f64>();
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (k, &v) in self.p.iter().enumerate() {
            if v > 0.0 {
                last_positive = k;
                acc += v;
                if target < acc {
                    return k as Token;
                }
            }
        }
        last_positive as Token
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Token {
        self.sample_with(rng.gen::<f64>())
    }
}

/// `½ Σ |a − b|`.
pub fn total_variation(a: &ProbRow, b: &ProbRow) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(a.len(), b.len()));
    }
    Ok(0.5 * a.p.iter().zip(&b.p).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Accept,
    Reject,
}

/// Accept/reject outcomes aligned to ordering ranks, plus the rank at which
/// every outer (non-causal) iteration started.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTrace {
    pub events: Vec<Outcome>,
    pub outer_starts: Vec<usize>,
}

impl EventTrace {
    pub fn rejections(&self) -> usize {
        self.events.iter().filter(|e| **e == Outcome::Reject).count()
    }

    /// Events grouped by outer iteration.
    pub fn segments(&self) -> Vec<&[Outcome]> {
        let mut out = Vec::with_capacity(self.outer_starts.len());
        for (k, &start) in self.outer_starts.iter().enumerate() {
            let end = self
                .outer_starts
                .get(k + 1)
                .copied()
                .unwrap_or(self.events.len());
            out.push(&self.events[start..end]);
        }
        out
    }
}
