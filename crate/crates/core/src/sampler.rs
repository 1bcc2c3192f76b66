//! Masked-diffusion and self-speculative samplers with NFE accounting.
//!
//! Seed protocol: a root seed and a sequence index give a per-sequence seed
//! ([`sequence_seed`]). Each sequence then uses independent substreams:
//! `0` for its ordering, `1` for token draws and accept/reject uniforms, `2`
//! for the masked-diffusion reveal decisions.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::DraftTargetModel;
use crate::rng::RngStream;
use crate::schedule::{NoiseSchedule, TimeGrid, WindowSpec};
use crate::types::{
    make_reveal_state, sample_ordering, EventTrace, Ordering, Outcome, ProbRow, RevealState, SequenceSpec, Token,
    TokenSequence,
};

const ORDER_STREAM: u64 = 0;
const TOKEN_STREAM: u64 = 1;
const REVEAL_STREAM: u64 = 2;

pub fn sequence_seed(root: u64, index: u64) -> u64 {
    RngStream::new(root).substream(index).next_u64()
}

/// Speculative accept/reject of one drafted token.
///
/// Accepts with probability `min(1, target/draft)`; otherwise draws from the
/// residual `∝ max(0, target − draft)`.
pub fn accept_step<R: Rng + ?Sized>(
    draft: &ProbRow,
    target: &ProbRow,
    drafted: Token,
    rng: &mut R,
) -> Result<(Outcome, Token)> {
    if draft.len() != target.len() {
        return Err(Error::DimensionMismatch(draft.len(), target.len()));
    }
    if drafted as usize >= draft.len() {
        return Err(Error::OutOfRange(format!("token {drafted} outside the alphabet")));
    }
    let q = draft.prob(drafted);
    if q <= 0.0 {
        return Err(Error::UndraftableToken(drafted));
    }
    let u: f64 = rng.gen();
    if u * q < target.prob(drafted) {
        return Ok((Outcome::Accept, drafted));
    }
    let residual: Vec<f64> = target
        .probs()
        .iter()
        .zip(draft.probs())
        .map(|(t, d)| (t - d).max(0.0))
        .collect();
    if residual.iter().sum::<f64>() <= 0.0 {
        // Only reachable through rounding when target == draft.
        return Ok((Outcome::Accept, drafted));
    }
    let row = ProbRow::from_weights(residual)?;
    Ok((Outcome::Reject, row.sample(rng)))
}

/// Block-weighted pass counter: a full pass through every block is 1 NFE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NfeMeter {
    pub nc_passes: usize,
    pub c_passes: usize,
    pub l_nc: usize,
    pub l_c: usize,
}

impl NfeMeter {
    pub fn new(l_nc: usize, l_c: usize) -> Self {
        Self {
            nc_passes: 0,
            c_passes: 0,
            l_nc,
            l_c,
        }
    }

    pub fn nfe(&self) -> f64 {
        let denom = (self.l_nc + self.l_c) as f64;
        if denom == 0.0 {
            return 0.0;
        }
        (self.nc_passes * self.l_nc + self.c_passes * self.l_c) as f64 / denom
    }

    pub fn merge(&mut self, other: &NfeMeter) {
        self.nc_passes += other.nc_passes;
        self.c_passes += other.c_passes;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleResult {
    pub sequence: TokenSequence,
    pub trace: EventTrace,
    pub meter: NfeMeter,
    pub nfe: f64,
    /// The generation order; for the masked-diffusion sampler, the order in
    /// which positions were revealed (ties broken by position).
    pub ordering: Ordering,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub window: WindowSpec,
    pub inner_loops: usize,
}

impl SamplerConfig {
    pub fn new(window: WindowSpec, inner_loops: usize) -> Result<Self> {
        if inner_loops == 0 {
            return Err(Error::OutOfRange("inner_loops must be >= 1".into()));
        }
        Ok(Self { window, inner_loops })
    }

    pub fn label(&self) -> String {
        format!("{}/N={}", self.window.label(), self.inner_loops)
    }
}

/// A sampler and its settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Family {
    Mdm { schedule: NoiseSchedule, grid: TimeGrid },
    SpecBasic,
    Spec(SamplerConfig),
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Mdm { .. } => "mdm",
            Self::SpecBasic => "spec-basic",
            Self::Spec(_) => "spec",
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Mdm { grid, .. } => format!("T={}", grid.steps()),
            Self::SpecBasic => "basic".into(),
            Self::Spec(c) => c.label(),
        }
    }
}

fn initial_state<M: DraftTargetModel + ?Sized>(
    model: &M,
    ordering: Option<&Ordering>,
    rng: &RngStream,
) -> Result<(SequenceSpec, RevealState)> {
    let spec = model.spec();
    let ord = match ordering {
        Some(o) if o.len() != spec.len() => return Err(Error::NotAPermutation(spec.len())),
        Some(o) => o.clone(),
        None => sample_ordering(&mut rng.substream(ORDER_STREAM), spec.len()),
    };
    let state = make_reveal_state(&spec, &TokenSequence::masked(&spec), &ord, 0)?;
    Ok((spec, state))
}

fn finish(state: RevealState, trace: EventTrace, meter: NfeMeter, seed: u64) -> Result<SampleResult> {
    let spec = *state.spec();
    let sequence = TokenSequence::new_complete(&spec, state.tokens().to_vec())?;
    Ok(SampleResult {
        sequence,
        trace,
        nfe: meter.nfe(),
        meter,
        ordering: state.ordering().clone(),
        seed,
    })
}

/// Verifies `drafted[from..]` against target rows for ranks `base+from..`.
/// Rewrites the first rejected token with its resample. Returns the number
/// of window slots now fixed (`from..` accepted plus the resampled slot).
#[allow(clippy::too_many_arguments)]
fn verify<M: DraftTargetModel + ?Sized>(
    model: &M,
    cache: &M::Cache,
    draft: &[ProbRow],
    drafted: &mut [Token],
    base: usize,
    from: usize,
    rng: &mut RngStream,
    trace: &mut EventTrace,
) -> Result<usize> {
    let w = drafted.len();
    let eager = if model.lazy_targets() {
        None
    } else {
        Some(model.target_rows(cache, drafted, base + from..base + w)?)
    };
    for k in from..w {
        let target = match &eager {
            Some(rows) => rows[k - from].clone(),
            None => model
                .target_rows(cache, drafted, base + k..base + k + 1)?
                .pop()
                .expect("one row requested"),
        };
        let (outcome, token) = accept_step(&draft[k], &target, drafted[k], rng)?;
        trace.events.push(outcome);
        if outcome == Outcome::Reject {
            drafted[k] = token;
            return Ok(k + 1);
        }
    }
    Ok(w)
}

/// Self-speculative sampling with a full window and one verification per
/// non-causal pass.
pub fn spec_sample_basic<M: DraftTargetModel + ?Sized>(
    model: &M,
    seed: u64,
    ordering: Option<&Ordering>,
) -> Result<SampleResult> {
    let cfg = SamplerConfig {
        window: WindowSpec::Constant { cap: model.spec().len() },
        inner_loops: 1,
    };
    spec_sample_full(model, &cfg, seed, ordering)
}

/// Windowed self-speculative sampling with up to `N` draft-verify loops per
/// non-causal pass. Draft rows and drafted tokens are fixed for the whole
/// outer iteration; each inner loop recomputes target rows after the last
/// resampled slot.
pub fn spec_sample_full<M: DraftTargetModel + ?Sized>(
    model: &M,
    cfg: &SamplerConfig,
    seed: u64,
    ordering: Option<&Ordering>,
) -> Result<SampleResult> {
    if cfg.inner_loops == 0 {
        return Err(Error::OutOfRange("inner_loops must be >= 1".into()));
    }
    let root = RngStream::new(seed);
    let (spec, mut state) = initial_state(model, ordering, &root)?;
    let mut rng = root.substream(TOKEN_STREAM);
    let (l_nc, l_c) = model.block_counts();
    let mut meter = NfeMeter::new(l_nc, l_c);
    let mut trace = EventTrace::default();
    let d = spec.len();
    while !state.is_complete() {
        let i = state.revealed();
        trace.outer_starts.push(trace.events.len());
        let w = cfg.window.window_size(i, d)?;
        let (draft, cache) = model.draft_pass(&state, w)?;
        meter.nc_passes += 1;
        if draft.len() != w {
            return Err(Error::LengthMismatch {
                expected: w,
                actual: draft.len(),
            });
        }
        let mut drafted: Vec<Token> = draft.iter().map(|r| r.sample(&mut rng)).collect();
        let mut fixed = 0;
        for _ in 0..cfg.inner_loops {
            if fixed == w {
                break;
            }
            meter.c_passes += 1;
            fixed = verify(model, &cache, &draft, &mut drafted, i, fixed, &mut rng, &mut trace)?;
        }
        state = state.advance(&drafted[..fixed])?;
    }
    finish(state, trace, meter, seed)
}

/// Masked-diffusion sampling on a time grid. Each step draws a candidate for
/// every masked position from its draft row and reveals each masked
/// position independently with the schedule's reveal probability. Reveal
/// decisions use their own stream, so they never depend on candidate
/// values. A step that reveals nothing costs no pass.
pub fn mdm_sample<M: DraftTargetModel + ?Sized>(
    model: &M,
    schedule: NoiseSchedule,
    grid: TimeGrid,
    seed: u64,
) -> Result<SampleResult> {
    let spec = model.spec();
    let d = spec.len();
    let root = RngStream::new(seed);
    let mut token_rng = root.substream(TOKEN_STREAM);
    let mut reveal_rng = root.substream(REVEAL_STREAM);
    let (l_nc, _) = model.block_counts();
    let mut meter = NfeMeter::new(l_nc, 0);
    let mut trace = EventTrace::default();
    let mut values: Vec<Option<Token>> = vec![None; d];
    let mut order: Vec<usize> = Vec::with_capacity(d);
    for k in 0..grid.steps() {
        let p = schedule.reveal_prob(grid.tau(k), grid.dtau())?;
        let masked: Vec<usize> = (0..d).filter(|&q| values[q].is_none()).collect();
        if masked.is_empty() {
            break;
        }
        let reveal: Vec<bool> = masked.iter().map(|_| reveal_rng.gen::<f64>() < p).collect();
        if !reveal.iter().any(|&r| r) {
            continue;
        }
        let mut perm = order.clone();
        perm.extend(&masked);
        let ord = Ordering::new(perm)?;
        let mut seq = vec![spec.mask_id(); d];
        for &q in &order {
            seq[q] = values[q].expect("revealed");
        }
        let state = make_reveal_state(&spec, &TokenSequence::new(&spec, seq)?, &ord, order.len())?;
        let (rows, _) = model.draft_pass(&state, masked.len())?;
        meter.nc_passes += 1;
        trace.outer_starts.push(order.len());
        let candidates: Vec<Token> = rows.iter().map(|r| r.sample(&mut token_rng)).collect();
        for (j, &q) in masked.iter().enumerate() {
            if reveal[j] {
                values[q] = Some(candidates[j]);
                order.push(q);
            }
        }
    }
    if order.len() != d {
        return Err(Error::Invalid("grid ended with masked positions".into()));
    }
    let tokens: Vec<Token> = values.into_iter().map(|v| v.expect("all revealed")).collect();
    let ord = Ordering::new(order)?;
    let state = make_reveal_state(&spec, &TokenSequence::new_complete(&spec, tokens)?, &ord, d)?;
    finish(state, trace, meter, seed)
}

pub fn sample_one<M: DraftTargetModel + ?Sized>(
    model: &M,
    family: &Family,
    seed: u64,
    ordering: Option<&Ordering>,
) -> Result<SampleResult> {
    match family {
        Family::Mdm { schedule, grid } => mdm_sample(model, *schedule, *grid, seed),
        Family::SpecBasic => spec_sample_basic(model, seed, ordering),
        Family::Spec(cfg) => spec_sample_full(model, cfg, seed, ordering),
    }
}

/// Samples `n` sequences with per-sequence seeds derived from `root`, using
/// up to `threads` workers. Output order and content do not depend on
/// `threads`.
pub fn sample_many<M: DraftTargetModel + Sync + ?Sized>(
    model: &M,
    family: &Family,
    n: usize,
    root: u64,
    ordering: Option<&Ordering>,
    threads: usize,
) -> Result<Vec<SampleResult>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n)
            .map(|k| sample_one(model, family, sequence_seed(root, k as u64), ordering))
            .collect();
    }
    let chunk = n.div_ceil(threads);
    let parts: Vec<Result<Vec<SampleResult>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                s.spawn(move || {
                    (t * chunk..((t + 1) * chunk).min(n))
                        .map(|k| sample_one(model, family, sequence_seed(root, k as u64), ordering))
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sampler thread panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
