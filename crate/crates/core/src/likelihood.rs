//! Exact likelihood of the full-window, single-loop speculative sampler.
//!
//! Index table (all ranks 0-indexed):
//!
//! | quantity | meaning |
//! |---|---|
//! | anchor `k` | `k` tokens revealed, the draft pass conditions on ranks `0..k` |
//! | `acc[k][r]`, `r >= k` | `log min(draft_k(x_r), target_k(x_r))` |
//! | `rej[k][r]`, `r >= k` | `log max(0, target_k(x_r) − draft_k(x_r))` |
//! | `R[k]` | log prob that ranks `0..k` equal `x` and the run is at anchor `k` |
//!
//! `R[0] = 0`; `R[d] = LSE_{k<d} R[k] + Σ_{r=k}^{d−2} acc[k][r] + rej[k][d−1]`;
//! `log p(x|σ) = LSE_{k<=D} R[k] + Σ_{r=k}^{D−1} acc[k][r]`.
//! A path that is at anchor `k` drafted every rank `>= k` from the same
//! non-causal pass, so its target rows condition on the true tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logspace::{ln, log_add, log_mul, log_sum_exp, LOG_ZERO};
use crate::models::DraftTargetModel;
use crate::types::{make_reveal_state, sample_ordering, Ordering, ProbRow, Token, TokenSequence};

/// Largest length accepted by [`brute_force_likelihood`].
pub const MAX_BRUTE_FORCE_LEN: usize = 12;
/// Largest length accepted by ordering enumeration.
pub const MAX_ENUMERATION_LEN: usize = 8;

/// `log p(token, Accept)` for one speculative step.
pub fn log_joint_accept(draft: &ProbRow, target: &ProbRow, token: Token) -> f64 {
    ln(draft.prob(token).min(target.prob(token)))
}

/// `log p(token, Reject)` for one speculative step.
pub fn log_joint_reject(draft: &ProbRow, target: &ProbRow, token: Token) -> f64 {
    ln((target.prob(token) - draft.prob(token)).max(0.0))
}

/// Draft and target probabilities of the true token at ranks `k..D`, for
/// the draft pass at anchor `k`. An impossible target context yields
/// zero target mass from that rank on.
fn anchor_probs<M: DraftTargetModel + ?Sized>(
    model: &M,
    x: &TokenSequence,
    ordering: &Ordering,
    k: usize,
) -> Result<Vec<(f64, f64)>> {
    let spec = model.spec();
    let d = spec.len();
    let state = make_reveal_state(&spec, x, ordering, k)?;
    let (draft, cache) = model.draft_pass(&state, d - k)?;
    let truth: Vec<Token> = (k..d).map(|r| x.get(ordering.at(r))).collect();
    let targets: Vec<Option<ProbRow>> = if model.lazy_targets() {
        let mut out = Vec::with_capacity(d - k);
        for r in k..d {
            match model.target_rows(&cache, &truth, r..r + 1) {
                Ok(mut rows) => out.push(rows.pop()),
                Err(Error::ImpossibleContext) => break,
                Err(e) => return Err(e),
            }
        }
        out.resize(d - k, None);
        out
    } else {
        model.target_rows(&cache, &truth, k..d)?.into_iter().map(Some).collect()
    };
    Ok(truth
        .iter()
        .zip(draft.iter().zip(&targets))
        .map(|(&t, (q, p))| (q.prob(t), p.as_ref().map_or(0.0, |p| p.prob(t))))
        .collect())
}

/// Per-anchor log accept and reject factors of the true tokens. Built with
/// exactly `D` draft passes.
#[derive(Clone, Debug, PartialEq)]
pub struct RunTables {
    /// `acc[k][r - k]` for `r` in `k..D`.
    pub acc: Vec<Vec<f64>>,
    /// `rej[k][r - k]` for `r` in `k..D`.
    pub rej: Vec<Vec<f64>>,
}

impl RunTables {
    pub fn build<M: DraftTargetModel + ?Sized>(model: &M, x: &TokenSequence, ordering: &Ordering) -> Result<Self> {
        let d = check_inputs(model, x, ordering)?;
        let mut acc = Vec::with_capacity(d);
        let mut rej = Vec::with_capacity(d);
        for k in 0..d {
            let probs = anchor_probs(model, x, ordering, k)?;
            acc.push(probs.iter().map(|&(q, p)| ln(q.min(p))).collect());
            rej.push(probs.iter().map(|&(q, p)| ln((p - q).max(0.0))).collect());
        }
        Ok(Self { acc, rej })
    }

    pub fn len(&self) -> usize {
        self.acc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acc.is_empty()
    }

    /// `cum[k][j] = Σ_{r=k}^{k+j−1} acc[k][r]`, `j` in `0..=D−k`.
    fn cumulative_accepts(&self) -> Vec<Vec<f64>> {
        self.acc
            .iter()
            .map(|row| {
                let mut c = Vec::with_capacity(row.len() + 1);
                c.push(0.0);
                for &a in row {
                    c.push(log_mul(*c.last().expect("non-empty"), a));
                }
                c
            })
            .collect()
    }

    /// `R[0..=D]`.
    pub fn anchor_log_probs(&self) -> Vec<f64> {
        let d = self.len();
        let cum = self.cumulative_accepts();
        let mut r = vec![LOG_ZERO; d + 1];
        r[0] = 0.0;
        for dd in 1..=d {
            let mut acc = LOG_ZERO;
            for k in 0..dd {
                let path = log_mul(log_mul(r[k], cum[k][dd - 1 - k]), self.rej[k][dd - 1 - k]);
                acc = log_add(acc, path);
            }
            r[dd] = acc;
        }
        r
    }

    /// Log probability that the run ends at anchor `k` (then accepts to the
    /// end), for `k` in `0..=D`.
    pub fn terminal_log_probs(&self) -> Vec<f64> {
        let d = self.len();
        let cum = self.cumulative_accepts();
        self.anchor_log_probs()
            .iter()
            .enumerate()
            .map(|(k, &rk)| if k == d { rk } else { log_mul(rk, cum[k][d - k]) })
            .collect()
    }

    pub fn log_likelihood(&self) -> f64 {
        log_sum_exp(&self.terminal_log_probs())
    }
}

fn check_inputs<M: DraftTargetModel + ?Sized>(model: &M, x: &TokenSequence, ordering: &Ordering) -> Result<usize> {
    let spec = model.spec();
    let d = spec.len();
    if x.len() != d {
        return Err(Error::LengthMismatch {
            expected: d,
            actual: x.len(),
        });
    }
    if ordering.len() != d {
        return Err(Error::NotAPermutation(d));
    }
    for (p, &t) in x.tokens().iter().enumerate() {
        if spec.is_mask(t) {
            return Err(Error::Invalid(format!("position {p} is masked")));
        }
        spec.check_token(t, p)?;
    }
    Ok(d)
}

/// `log p(x | σ)` under the speculative sampler.
pub fn sequence_likelihood<M: DraftTargetModel + ?Sized>(
    model: &M,
    x: &TokenSequence,
    ordering: &Ordering,
) -> Result<f64> {
    Ok(RunTables::build(model, x, ordering)?.log_likelihood())
}

/// Sums every accept/reject path of length `D` explicitly.
pub fn brute_force_likelihood<M: DraftTargetModel + ?Sized>(
    model: &M,
    x: &TokenSequence,
    ordering: &Ordering,
) -> Result<f64> {
    let d = check_inputs(model, x, ordering)?;
    if d > MAX_BRUTE_FORCE_LEN {
        return Err(Error::OutOfRange(format!("brute force needs D <= {MAX_BRUTE_FORCE_LEN}, got {d}")));
    }
    let probs = (0..d)
        .map(|k| anchor_probs(model, x, ordering, k))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    // Bit r of `path` set means rank r rejected.
    for path in 0u32..(1 << d) {
        let mut anchor = 0;
        let mut p = 1.0;
        for r in 0..d {
            let (q, t) = probs[anchor][r - anchor];
            if path >> r & 1 == 1 {
                p *= (t - q).max(0.0);
                anchor = r + 1;
            } else {
                p *= q.min(t);
            }
            if p == 0.0 {
                break;
            }
        }
        total += p;
    }
    Ok(ln(total))
}

/// Posterior over the total number of rejections given the emitted sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectionPosterior {
    /// `probs[n] = p(N = n | x, σ)`, `n` in `0..=D`.
    pub probs: Vec<f64>,
    /// Probability that the final rank was rejected (and resampled).
    pub last_rejected: f64,
    pub log_likelihood: f64,
}

impl RejectionPosterior {
    pub fn mean(&self) -> f64 {
        self.probs.iter().enumerate().map(|(n, p)| n as f64 * p).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.probs.iter().enumerate().map(|(n, p)| (n as f64 - m).powi(2) * p).sum()
    }

    /// Expected number of non-causal passes. Every rejection except one on
    /// the final rank starts a new pass.
    pub fn expected_outer_loops(&self) -> f64 {
        self.mean() + 1.0 - self.last_rejected
    }
}

pub fn rejection_count_posterior<M: DraftTargetModel + ?Sized>(
    model: &M,
    x: &TokenSequence,
    ordering: &Ordering,
) -> Result<RejectionPosterior> {
    let tables = RunTables::build(model, x, ordering)?;
    let d = tables.len();
    let cum = tables.cumulative_accepts();
    // pr[k][n] = log p(ranks 0..k, anchor k, n rejections so far).
    let mut pr = vec![vec![LOG_ZERO; d + 1]; d + 1];
    pr[0][0] = 0.0;
    for dd in 1..=d {
        for k in 0..dd {
            let step = log_mul(cum[k][dd - 1 - k], tables.rej[k][dd - 1 - k]);
            if step == LOG_ZERO {
                continue;
            }
            for n in 1..=dd {
                let v = log_mul(pr[k][n - 1], step);
                pr[dd][n] = log_add(pr[dd][n], v);
            }
        }
    }
    let mut fin = vec![LOG_ZERO; d + 1];
    for k in 0..=d {
        let tail = if k == d { 0.0 } else { cum[k][d - k] };
        for n in 0..=d {
            fin[n] = log_add(fin[n], log_mul(pr[k][n], tail));
        }
    }
    let logp = log_sum_exp(&fin);
    if logp == LOG_ZERO {
        return Err(Error::ZeroLikelihood);
    }
    let last = log_sum_exp(&pr[d]);
    Ok(RejectionPosterior {
        probs: fin.iter().map(|&v| (v - logp).exp()).collect(),
        last_rejected: (last - logp).exp().min(1.0),
        log_likelihood: logp,
    })
}

/// Monte Carlo estimate of `E_σ log p(x | σ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub num_orderings: usize,
}

pub fn elbo<M: DraftTargetModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &TokenSequence,
    num_orderings: usize,
    rng: &mut R,
) -> Result<ElboEstimate> {
    if num_orderings == 0 {
        return Err(Error::OutOfRange("num_orderings must be >= 1".into()));
    }
    let d = model.spec().len();
    let vals = (0..num_orderings)
        .map(|_| sequence_likelihood(model, x, &sample_ordering(rng, d)))
        .collect::<Result<Vec<_>>>()?;
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std_err = if vals.len() > 1 && mean.is_finite() {
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok(ElboEstimate {
        mean,
        std_err,
        num_orderings,
    })
}

/// Every permutation of `0..len`, in lexicographic order.
pub fn all_orderings(len: usize) -> Result<Vec<Ordering>> {
    if len > MAX_ENUMERATION_LEN {
        return Err(Error::OutOfRange(format!("enumeration needs D <= {MAX_ENUMERATION_LEN}, got {len}")));
    }
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Ordering>) {
        if prefix.len() == used.len() {
            out.push(Ordering::new(prefix.clone()).expect("permutation"));
            return;
        }
        for p in 0..used.len() {
            if !used[p] {
                used[p] = true;
                prefix.push(p);
                rec(prefix, used, out);
                prefix.pop();
                used[p] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(len), &mut vec![false; len], &mut out);
    Ok(out)
}

/// `log p(x | σ)` for every ordering, in [`all_orderings`] order.
pub fn ordering_log_likelihoods<M: DraftTargetModel + ?Sized>(model: &M, x: &TokenSequence) -> Result<Vec<f64>> {
    all_orderings(model.spec().len())?
        .iter()
        .map(|o| sequence_likelihood(model, x, o))
        .collect()
}

/// Exact ELBO and exact `log p(x)` under a uniform ordering.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactBound {
    pub elbo: f64,
    pub log_marginal: f64,
}

pub fn exact_bound<M: DraftTargetModel + ?Sized>(model: &M, x: &TokenSequence) -> Result<ExactBound> {
    let vals = ordering_log_likelihoods(model, x)?;
    let n = vals.len() as f64;
    Ok(ExactBound {
        elbo: vals.iter().sum::<f64>() / n,
        log_marginal: log_sum_exp(&vals) - n.ln(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DraftMode, PassCounter, TabularModel};
    use crate::rng::RngStream;
    use crate::sampler::spec_sample_basic;
    use crate::types::SequenceSpec;

    fn perturbed(seed: u64, s: usize, d: usize, eps: f64) -> TabularModel {
        let spec = SequenceSpec::new(s, d).unwrap();
        TabularModel::random(spec, &mut RngStream::new(seed), 2.0, DraftMode::Perturbed { epsilon: eps }).unwrap()
    }

    fn seq(m: &TabularModel, idx: usize) -> TokenSequence {
        TokenSequence::new_complete(&m.spec(), m.sequence_at(idx)).unwrap()
    }

    #[test]
    fn joint_accept_examples() {
        let a = ProbRow::new(vec![0.5, 0.5]).unwrap();
        let b = ProbRow::new(vec![0.8, 0.2]).unwrap();
        assert_eq!(log_joint_accept(&a, &a, 0), 0.5f64.ln());
        assert_eq!(log_joint_accept(&b, &a, 0), 0.5f64.ln());
        assert_eq!(log_joint_reject(&b, &a, 0), LOG_ZERO);
        assert!((log_joint_reject(&b, &a, 1) - 0.3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn normalizes_over_all_sequences() {
        let m = perturbed(1, 2, 3, 0.4);
        let ord = Ordering::new(vec![2, 0, 1]).unwrap();
        let total: f64 = (0..8)
            .map(|k| sequence_likelihood(&m, &seq(&m, k), &ord).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_position_is_the_draft() {
        let m = perturbed(2, 4, 1, 0.5);
        for k in 0..4 {
            let lp = sequence_likelihood(&m, &seq(&m, k), &Ordering::identity(1)).unwrap();
            assert!((lp.exp() - (0.5 * m.joint()[k] + 0.5 / 4.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn matches_brute_force() {
        for seed in 0..10 {
            let m = perturbed(seed, 2, 6, 0.3);
            let ord = sample_ordering(&mut RngStream::new(seed + 100), 6);
            let x = m.sample_joint(&mut RngStream::new(seed + 200));
            let a = sequence_likelihood(&m, &x, &ord).unwrap();
            let b = brute_force_likelihood(&m, &x, &ord).unwrap();
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn exact_draft_gives_the_joint() {
        // Exact marginals make the first slot after every anchor accept-only
        // and the run collapses to the chain rule.
        let spec = SequenceSpec::new(3, 3).unwrap();
        let m = TabularModel::random(spec, &mut RngStream::new(3), 1.0, DraftMode::ExactMarginal).unwrap();
        let ord = Ordering::new(vec![1, 2, 0]).unwrap();
        for k in 0..27 {
            let lp = sequence_likelihood(&m, &seq(&m, k), &ord).unwrap();
            assert!((lp.exp() - m.joint()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn uses_one_draft_pass_per_anchor() {
        let m = PassCounter::new(perturbed(4, 2, 5, 0.3));
        let x = seq(&m.inner, 7);
        RunTables::build(&m, &x, &Ordering::identity(5)).unwrap();
        assert_eq!(m.draft_passes(), 5);
    }

    #[test]
    fn zero_mass_sequences_are_log_zero() {
        let spec = SequenceSpec::new(2, 2).unwrap();
        let m = TabularModel::new(spec, vec![0.5, 0.0, 0.0, 0.5], DraftMode::Perturbed { epsilon: 0.5 }).unwrap();
        let x = seq(&m, 1);
        assert_eq!(sequence_likelihood(&m, &x, &Ordering::identity(2)).unwrap(), LOG_ZERO);
        assert!(matches!(
            rejection_count_posterior(&m, &x, &Ordering::identity(2)),
            Err(Error::ZeroLikelihood)
        ));
    }

    #[test]
    fn posterior_normalized_and_consistent() {
        let m = perturbed(5, 3, 4, 0.5);
        let ord = Ordering::new(vec![3, 1, 0, 2]).unwrap();
        for k in [0, 17, 40, 80] {
            let x = seq(&m, k);
            let post = rejection_count_posterior(&m, &x, &ord).unwrap();
            assert!((post.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let lp = sequence_likelihood(&m, &x, &ord).unwrap();
            assert!((post.log_likelihood - lp).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_draft_posterior() {
        // With exact marginals only the first slot after an anchor is safe;
        // rejections still happen later, but a one-position model never rejects.
        let spec = SequenceSpec::new(3, 1).unwrap();
        let m = TabularModel::random(spec, &mut RngStream::new(6), 1.0, DraftMode::ExactMarginal).unwrap();
        let post = rejection_count_posterior(&m, &seq(&m, 2), &Ordering::identity(1)).unwrap();
        assert_eq!(post.probs, vec![1.0, 0.0]);
        assert_eq!(post.expected_outer_loops(), 1.0);
    }

    #[test]
    fn posterior_outer_loops_match_sampler() {
        let m = perturbed(7, 2, 3, 0.6);
        let ord = Ordering::new(vec![1, 0, 2]).unwrap();
        let x = seq(&m, 5);
        let post = rejection_count_posterior(&m, &x, &ord).unwrap();
        let (mut n, mut rej, mut loops) = (0usize, 0usize, 0usize);
        for s in 0..100_000 {
            let r = spec_sample_basic(&m, s, Some(&ord)).unwrap();
            if r.sequence == x {
                n += 1;
                rej += r.trace.rejections();
                loops += r.meter.nc_passes;
            }
        }
        let mean_rej = rej as f64 / n as f64;
        let mean_loops = loops as f64 / n as f64;
        let se = (post.variance() / n as f64).sqrt();
        assert!((mean_rej - post.mean()).abs() < 4.0 * se + 1e-3, "{mean_rej} vs {}", post.mean());
        assert!((mean_loops - post.expected_outer_loops()).abs() < 4.0 * se + 1e-2);
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(all_orderings(4).unwrap().len(), 24);
        assert_eq!(all_orderings(0).unwrap().len(), 1);
        assert!(all_orderings(MAX_ENUMERATION_LEN + 1).is_err());
    }

    #[test]
    fn jensen_bound_holds() {
        let m = perturbed(8, 2, 4, 0.4);
        for k in 0..16 {
            let b = exact_bound(&m, &seq(&m, k)).unwrap();
            assert!(b.elbo <= b.log_marginal + 1e-12);
        }
    }

    #[test]
    fn elbo_estimate_tracks_exact_mean() {
        let m = perturbed(9, 2, 4, 0.4);
        let x = seq(&m, 6);
        let exact = exact_bound(&m, &x).unwrap();
        let est = elbo(&m, &x, 400, &mut RngStream::new(1)).unwrap();
        assert!((est.mean - exact.elbo).abs() < 4.0 * est.std_err + 1e-9);
    }
}
