//! Exact tabular backend: an explicit joint over all `S^D` sequences.
//!
//! Draft rows are the exact marginal of one position given the revealed
//! tokens (optionally mixed with a uniform row so that draft and target
//! differ); target rows are the exact chain-rule conditionals given revealed
//! and drafted tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DraftTargetModel;
use crate::error::{Error, Result};
use crate::types::{ProbRow, RevealState, SequenceSpec, Token, TokenSequence};

/// Largest joint table accepted.
pub const MAX_TABLE: usize = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DraftMode {
    ExactMarginal,
    /// Draft `(1 − ε)·exact + ε/S`.
    Perturbed { epsilon: f64 },
}

impl DraftMode {
    pub const DEFAULT_EPSILON: f64 = 0.2;
}

#[derive(Clone, Debug)]
pub struct TabularModel {
    spec: SequenceSpec,
    joint: Vec<f64>,
    mode: DraftMode,
    blocks: (usize, usize),
}

fn table_size(spec: &SequenceSpec) -> Result<usize> {
    let mut n: usize = 1;
    for _ in 0..spec.len() {
        n = n
            .checked_mul(spec.alphabet())
            .filter(|&v| v <= MAX_TABLE)
            .ok_or_else(|| Error::Invalid(format!("S^D exceeds {MAX_TABLE}")))?;
    }
    Ok(n)
}

impl TabularModel {
    pub fn new(spec: SequenceSpec, joint: Vec<f64>, mode: DraftMode) -> Result<Self> {
        let n = table_size(&spec)?;
        if joint.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: joint.len(),
            });
        }
        if joint.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid("joint has negative or non-finite entries".into()));
        }
        let sum: f64 = joint.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("joint sums to {sum}")));
        }
        if let DraftMode::Perturbed { epsilon } = mode {
            if !(0.0..=1.0).contains(&epsilon) {
                return Err(Error::OutOfRange(format!("epsilon {epsilon} outside [0, 1]")));
            }
        }
        Ok(Self {
            spec,
            joint,
            mode,
            blocks: (11, 1),
        })
    }

    /// Normalizes non-negative weights into a joint.
    pub fn from_weights(spec: SequenceSpec, weights: Vec<f64>, mode: DraftMode) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err(Error::Invalid("weights must have positive sum".into()));
        }
        Self::new(spec, weights.into_iter().map(|w| w / sum).collect(), mode)
    }

    pub fn uniform(spec: SequenceSpec, mode: DraftMode) -> Result<Self> {
        let n = table_size(&spec)?;
        Self::new(spec, vec![1.0 / n as f64; n], mode)
    }

    /// Product of independent per-position marginals.
    pub fn product(spec: SequenceSpec, marginals: &[ProbRow], mode: DraftMode) -> Result<Self> {
        if marginals.len() != spec.len() {
            return Err(Error::LengthMismatch {
                expected: spec.len(),
                actual: marginals.len(),
            });
        }
        let n = table_size(&spec)?;
        let mut joint = vec![1.0; n];
        let mut x = vec![0 as Token; spec.len()];
        for (idx, v) in joint.iter_mut().enumerate() {
            decode_into(&spec, idx, &mut x);
            for (p, &t) in x.iter().enumerate() {
                *v *= marginals[p].prob(t);
            }
        }
        Self::from_weights(spec, joint, mode)
    }

    /// Random strictly positive joint: normalized `Exp(1)^sharpness` weights.
    pub fn random<R: Rng + ?Sized>(spec: SequenceSpec, rng: &mut R, sharpness: f64, mode: DraftMode) -> Result<Self> {
        let n = table_size(&spec)?;
        let w = (0..n)
            .map(|_| {
                let u: f64 = rng.gen();
                (-(1.0 - u).ln()).powf(sharpness).max(1e-300)
            })
            .collect();
        Self::from_weights(spec, w, mode)
    }

    pub fn with_block_counts(mut self, non_causal: usize, causal: usize) -> Self {
        self.blocks = (non_causal, causal);
        self
    }

    pub fn with_mode(mut self, mode: DraftMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn mode(&self) -> DraftMode {
        self.mode
    }

    pub fn joint(&self) -> &[f64] {
        &self.joint
    }

    pub fn num_sequences(&self) -> usize {
        self.joint.len()
    }

    pub fn index_of(&self, tokens: &[Token]) -> Result<usize> {
        if tokens.len() != self.spec.len() {
            return Err(Error::LengthMismatch {
                expected: self.spec.len(),
                actual: tokens.len(),
            });
        }
        let mut idx = 0usize;
        for (p, &t) in tokens.iter().enumerate() {
            self.spec.check_token(t, p)?;
            idx = idx * self.spec.alphabet() + t as usize;
        }
        Ok(idx)
    }

    pub fn sequence_at(&self, idx: usize) -> Vec<Token> {
        let mut x = vec![0; self.spec.len()];
        decode_into(&self.spec, idx, &mut x);
        x
    }

    /// `p_data(x)`.
    pub fn prob(&self, tokens: &[Token]) -> Result<f64> {
        Ok(self.joint[self.index_of(tokens)?])
    }

    /// Entropy of the joint in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .joint
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// Draws one complete sequence from the joint.
    pub fn sample_joint<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenSequence {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut idx = self.joint.len() - 1;
        for (k, &p) in self.joint.iter().enumerate() {
            acc += p;
            if u < acc {
                idx = k;
                break;
            }
        }
        TokenSequence::new_complete(&self.spec, self.sequence_at(idx)).expect("decoded index is valid")
    }

    /// `p_data(x_target | x_p = t for (p, t) in given)`.
    pub fn conditional(&self, given: &[(usize, Token)], target: usize) -> Result<ProbRow> {
        let s = self.spec.alphabet();
        let d = self.spec.len();
        let stride = |p: usize| s.pow((d - 1 - p) as u32);
        let given: Vec<(usize, usize)> = given.iter().map(|&(p, t)| (stride(p), t as usize)).collect();
        let target_stride = stride(target);
        let mut w = vec![0.0; s];
        'outer: for (idx, &v) in self.joint.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for &(st, t) in &given {
                if (idx / st) % s != t {
                    continue 'outer;
                }
            }
            w[(idx / target_stride) % s] += v;
        }
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return Err(Error::ImpossibleContext);
        }
        Ok(ProbRow::new(w.into_iter().map(|v| v / total).collect()).expect("normalized by construction"))
    }

    fn perturb(&self, exact: ProbRow) -> ProbRow {
        match self.mode {
            DraftMode::ExactMarginal => exact,
            DraftMode::Perturbed { epsilon } => {
                let s = exact.len() as f64;
                let p: Vec<f64> = exact.probs().iter().map(|&v| (1.0 - epsilon) * v + epsilon / s).collect();
                let sum: f64 = p.iter().sum();
                ProbRow::new(p.into_iter().map(|v| v / sum).collect()).expect("mixture of rows is a row")
            }
        }
    }

    /// Draft row at rank `rank` (0-indexed, `rank >= i`).
    pub fn draft_row(&self, state: &RevealState, rank: usize) -> Result<ProbRow> {
        if rank < state.revealed() || rank >= self.spec.len() {
            return Err(Error::OutOfRange(format!(
                "draft rank {rank} outside {}..{}",
                state.revealed(),
                self.spec.len()
            )));
        }
        let given = revealed_pairs(state);
        Ok(self.perturb(self.conditional(&given, state.ordering().at(rank))?))
    }

    /// Target row at rank `rank` given drafted tokens for ranks `i..rank`.
    /// At rank `i` nothing has been drafted yet and the target is the draft
    /// row itself, as in the hybrid model; later ranks use the exact
    /// conditional.
    pub fn target_row(&self, state: &RevealState, drafted: &[Token], rank: usize) -> Result<ProbRow> {
        let i = state.revealed();
        if rank < i || rank >= self.spec.len() {
            return Err(Error::OutOfRange(format!("target rank {rank} outside {i}..{}", self.spec.len())));
        }
        if rank == i {
            return self.draft_row(state, rank);
        }
        if drafted.len() < rank - i {
            return Err(Error::LengthMismatch {
                expected: rank - i,
                actual: drafted.len(),
            });
        }
        let mut given = revealed_pairs(state);
        for (k, &t) in drafted[..rank - i].iter().enumerate() {
            let p = state.ordering().at(i + k);
            self.spec.check_token(t, p)?;
            given.push((p, t));
        }
        self.conditional(&given, state.ordering().at(rank))
    }
}

fn revealed_pairs(state: &RevealState) -> Vec<(usize, Token)> {
    state.ordering().perm()[..state.revealed()]
        .iter()
        .map(|&p| (p, state.tokens()[p]))
        .collect()
}

fn decode_into(spec: &SequenceSpec, mut idx: usize, out: &mut [Token]) {
    let s = spec.alphabet();
    for p in (0..spec.len()).rev() {
        out[p] = (idx % s) as Token;
        idx /= s;
    }
}

impl DraftTargetModel for TabularModel {
    type Cache = RevealState;

    fn spec(&self) -> SequenceSpec {
        self.spec
    }

    fn block_counts(&self) -> (usize, usize) {
        self.blocks
    }

    fn draft_pass(&self, state: &RevealState, horizon: usize) -> Result<(Vec<ProbRow>, RevealState)> {
        let i = state.revealed();
        if i + horizon > self.spec.len() {
            return Err(Error::OutOfRange(format!("horizon {horizon} past the end with {i} revealed")));
        }
        let rows = (i..i + horizon)
            .map(|r| self.draft_row(state, r))
            .collect::<Result<Vec<_>>>()?;
        Ok((rows, state.clone()))
    }

    fn target_rows(
        &self,
        cache: &RevealState,
        drafted: &[Token],
        ranks: std::ops::Range<usize>,
    ) -> Result<Vec<ProbRow>> {
        ranks.map(|r| self.target_row(cache, drafted, r)).collect()
    }

    fn lazy_targets(&self) -> bool {
        true
    }
}
