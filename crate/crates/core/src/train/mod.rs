//! Training: masking distribution, weighted objective, AdamW and the loop.
//!
//! A training example draws a time `t ~ U(0, 1)`, keeps each position
//! independently with probability `keep_prob(t)`, and orders the kept
//! positions first (both groups uniformly shuffled). Losses of masked
//! positions are weighted by `D / (D − i)`.

pub mod corpus;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::checkpoint::{self, EXTRA_PREFIX};
use crate::models::hybrid::{is_causal_param, HybridModel, HybridParams, LossParts, MaskedExample, Tensor};
use crate::rng::RngStream;
use crate::schedule::NoiseSchedule;
use crate::types::{Ordering, ProbRow, Token};

pub use corpus::{
    join_ids, Corpus, LexiconLanguage, BUNDLED_ALPHABET, BUNDLED_LEN, DEFAULT_LEXICON_SIZE, MAX_WORD_LEN, MIN_WORD_LEN,
};

/// `D / (D − i)`; requires `i < D`.
pub fn loss_weight(len: usize, revealed: usize) -> f64 {
    debug_assert!(revealed < len);
    len as f64 / (len - revealed) as f64
}

/// Draws `(σ, i)` at time `t`.
pub fn sample_mask_config_at<R: Rng + ?Sized>(
    rng: &mut R,
    len: usize,
    sched: NoiseSchedule,
    t: f64,
) -> Result<(Ordering, usize)> {
    let keep = sched.keep_prob(t)?;
    let (mut kept, mut masked): (Vec<usize>, Vec<usize>) = (Vec::new(), Vec::new());
    for p in 0..len {
        if rng.gen::<f64>() < keep {
            kept.push(p);
        } else {
            masked.push(p);
        }
    }
    kept.shuffle(rng);
    masked.shuffle(rng);
    let i = kept.len();
    kept.extend(masked);
    Ok((Ordering::new(kept)?, i))
}

pub fn sample_mask_config<R: Rng + ?Sized>(rng: &mut R, len: usize, sched: NoiseSchedule) -> Result<(Ordering, usize)> {
    let t: f64 = rng.gen();
    sample_mask_config_at(rng, len, sched, t)
}

/// Weighted draft and target negative log-likelihoods of `x` given rows
/// for ranks `i..D`. Returns zeros when `i = D`.
pub fn loss_eq9(
    draft_rows: &[ProbRow],
    target_rows: &[ProbRow],
    x: &[Token],
    ordering: &Ordering,
    i: usize,
) -> Result<LossParts> {
    let d = x.len();
    if i == d {
        return Ok(LossParts::default());
    }
    if draft_rows.len() != d - i || target_rows.len() != d - i {
        return Err(Error::LengthMismatch {
            expected: d - i,
            actual: draft_rows.len().min(target_rows.len()),
        });
    }
    let w = loss_weight(d, i);
    let mut out = LossParts::default();
    for (k, (dr, tr)) in draft_rows.iter().zip(target_rows).enumerate() {
        let t = x[ordering.at(i + k)];
        out.noncausal -= w * dr.prob(t).ln();
        out.causal -= w * tr.prob(t).ln();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    /// Learning rate at the last step as a fraction of the peak.
    pub final_lr_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; non-positive disables.
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_every: u64,
    /// Only `φ` is updated.
    pub frozen_theta: bool,
    pub schedule: NoiseSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            warmup_steps: 200,
            peak_lr: 3e-4,
            final_lr_frac: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 500,
            frozen_theta: false,
            schedule: NoiseSchedule::Cosine,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Invalid("batch_size and eval_every must be positive".into()));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::Invalid("peak_lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.final_lr_frac) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Invalid("final_lr_frac, beta1 and beta2 must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Linear warmup to the peak, then cosine decay to `final_lr_frac · peak`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let floor = self.final_lr_frac * self.peak_lr;
        floor + (self.peak_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Losses in nats per sequence (each term `D/(D−i)`-weighted, batch mean).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub noncausal: f64,
    pub causal: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
struct AdamW {
    m: HybridParams,
    v: HybridParams,
}

pub struct Trainer {
    model: HybridModel,
    opt: AdamW,
    cfg: TrainConfig,
    step: u64,
}

/// Draws a training batch: random corpus rows with fresh masks; fully
/// revealed draws are redrawn.
pub fn make_batch<R: Rng + ?Sized>(
    rng: &mut R,
    corpus: &Corpus,
    batch_size: usize,
    sched: NoiseSchedule,
) -> Result<Vec<MaskedExample>> {
    if corpus.is_empty() {
        return Err(Error::Invalid("empty corpus".into()));
    }
    let d = corpus.spec().len();
    let mut out = Vec::with_capacity(batch_size);
    while out.len() < batch_size {
        let row = rng.gen_range(0..corpus.len());
        let (ordering, revealed) = sample_mask_config(rng, d, sched)?;
        if revealed == d {
            continue;
        }
        out.push(MaskedExample {
            tokens: corpus.sequences()[row].clone(),
            ordering,
            revealed,
        });
    }
    Ok(out)
}

/// Mean losses over `n` masked examples drawn from `seed`.
pub fn evaluate_losses(model: &HybridModel, corpus: &Corpus, n: usize, seed: u64, sched: NoiseSchedule) -> Result<LossParts> {
    let mut rng = RngStream::new(seed);
    let batch = make_batch(&mut rng, corpus, n, sched)?;
    let mut acc = LossParts::default();
    for chunk in batch.chunks(64) {
        let l = model.batch_loss(chunk, None, false)?;
        let f = chunk.len() as f64 / n as f64;
        acc.noncausal += l.noncausal * f;
        acc.causal += l.causal * f;
    }
    Ok(acc)
}

impl Trainer {
    pub fn new(model: HybridModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let zeros = model.params().zeros_like();
        Ok(Self {
            opt: AdamW {
                m: zeros.clone(),
                v: zeros,
            },
            model,
            cfg,
            step: 0,
        })
    }

    pub fn model(&self) -> &HybridModel {
        &self.model
    }

    pub fn into_model(self) -> HybridModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn batch_rng(&self, step: u64) -> RngStream {
        RngStream::new(self.cfg.seed).substream(step)
    }

    /// One optimizer step on the batch for the current step index.
    pub fn step(&mut self, corpus: &Corpus) -> Result<LossReport> {
        if corpus.spec() != self.model.config().spec() {
            return Err(Error::InvalidSpec("corpus and model specs differ".into()));
        }
        let step = self.step;
        let batch = make_batch(&mut self.batch_rng(step), corpus, self.cfg.batch_size, self.cfg.schedule)?;
        let mut grads = self.model.params().zeros_like();
        let parts = self
            .model
            .batch_loss(&batch, Some(&mut grads), self.cfg.frozen_theta)
            .map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!(
                    "{what} at step {step} (batch seed {}, substream {step})",
                    self.cfg.seed
                )),
                other => other,
            })?;
        self.apply(&mut grads);
        self.step += 1;
        Ok(LossReport {
            step,
            noncausal: parts.noncausal,
            causal: parts.causal,
            total: parts.total(),
        })
    }

    fn apply(&mut self, grads: &mut HybridParams) {
        let c = &self.cfg;
        if c.grad_clip > 0.0 {
            let norm = grads
                .tensors()
                .iter()
                .flat_map(|t| t.data.iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if norm > c.grad_clip {
                let s = c.grad_clip / norm;
                for t in grads.tensors_mut() {
                    t.data.iter_mut().for_each(|g| *g *= s);
                }
            }
        }
        let lr = c.lr_at(self.step);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let params = self.model.params_mut().tensors_mut();
        let (ms, vs) = (self.opt.m.tensors_mut(), self.opt.v.tensors_mut());
        for (((p, g), m), v) in params.iter_mut().zip(grads.tensors()).zip(ms.iter_mut()).zip(vs.iter_mut()) {
            if c.frozen_theta && !is_causal_param(&p.name) {
                continue;
            }
            let decay = if p.shape.len() == 2 { c.weight_decay } else { 0.0 };
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = c.beta1 * m.data[k] + (1.0 - c.beta1) * gk;
                v.data[k] = c.beta2 * v.data[k] + (1.0 - c.beta2) * gk * gk;
                let update = (m.data[k] / bc1) / ((v.data[k] / bc2).sqrt() + c.adam_eps);
                p.data[k] -= lr * (update + decay * p.data[k]);
            }
        }
    }

    /// Runs until `cfg.steps`, reporting the mean training loss of every
    /// `eval_every` window (and of the final partial window).
    pub fn run(&mut self, corpus: &Corpus, on_report: impl FnMut(&LossReport)) -> Result<Vec<LossReport>> {
        self.run_until(corpus, self.cfg.steps, on_report)
    }

    /// Like [`Trainer::run`] but stops after step `until` (capped at
    /// `cfg.steps`); the schedule still spans `cfg.steps`.
    pub fn run_until(
        &mut self,
        corpus: &Corpus,
        until: u64,
        mut on_report: impl FnMut(&LossReport),
    ) -> Result<Vec<LossReport>> {
        let until = until.min(self.cfg.steps);
        let mut reports = Vec::new();
        let mut acc = (0.0, 0.0, 0u64);
        while self.step < until {
            let r = self.step(corpus)?;
            acc = (acc.0 + r.noncausal, acc.1 + r.causal, acc.2 + 1);
            if self.step % self.cfg.eval_every == 0 || self.step == until {
                let n = acc.2 as f64;
                let rep = LossReport {
                    step: self.step,
                    noncausal: acc.0 / n,
                    causal: acc.1 / n,
                    total: (acc.0 + acc.1) / n,
                };
                on_report(&rep);
                reports.push(rep);
                acc = (0.0, 0.0, 0);
            }
        }
        Ok(reports)
    }

    /// Writes parameters, optimizer moments and the step counter.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut extras = Vec::new();
        for (kind, st) in [("m", &self.opt.m), ("v", &self.opt.v)] {
            for t in st.tensors() {
                extras.push(Tensor {
                    name: format!("{EXTRA_PREFIX}{kind}.{}", t.name),
                    shape: t.shape.clone(),
                    data: t.data.clone(),
                });
            }
        }
        extras.push(Tensor {
            name: format!("{EXTRA_PREFIX}step"),
            shape: vec![1],
            data: vec![self.step as f64],
        });
        checkpoint::save_hybrid(path, &self.model, extras, serde_json::to_value(&self.cfg)?)
    }

    /// Restores a checkpoint written by [`Trainer::save`]; training continues
    /// under `cfg` from the stored step.
    pub fn resume(path: &std::path::Path, cfg: TrainConfig) -> Result<Self> {
        let (model, extras) = checkpoint::load_hybrid(path)?;
        let mut tr = Self::new(model, cfg)?;
        let find = |name: &str| extras.iter().find(|t| t.name == name);
        let step = find(&format!("{EXTRA_PREFIX}step")).ok_or_else(|| Error::Format("checkpoint has no step".into()))?;
        tr.step = step.data[0] as u64;
        for (kind, st) in [("m", &mut tr.opt.m), ("v", &mut tr.opt.v)] {
            for t in st.tensors_mut() {
                let src = find(&format!("{EXTRA_PREFIX}{kind}.{}", t.name))
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks moment '{kind}.{}'", t.name)))?;
                if src.data.len() != t.data.len() {
                    return Err(Error::Format(format!("moment '{kind}.{}' has the wrong size", t.name)));
                }
                t.data.copy_from_slice(&src.data);
            }
        }
        Ok(tr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DraftTargetModel, HybridConfig};
    use crate::types::{make_reveal_state, SequenceSpec, TokenSequence};

    fn small_setup() -> (HybridModel, Corpus) {
        let spec = SequenceSpec::new(6, 8).unwrap();
        let lang = LexiconLanguage::from_words(spec, vec![vec![0, 1], vec![2, 3, 4], vec![1, 1, 0]]).unwrap();
        let corpus = Corpus::generate(&lang, 200, &mut RngStream::new(1));
        let cfg = HybridConfig {
            alphabet: 6,
            len: 8,
            hidden: 16,
            heads: 2,
            nc_blocks: 1,
            c_blocks: 1,
            mlp_ratio: 2,
        };
        (HybridModel::new(cfg, &mut RngStream::new(2)).unwrap(), corpus)
    }

    #[test]
    fn forced_times_hit_the_extremes() {
        let mut rng = RngStream::new(1);
        for _ in 0..20 {
            assert_eq!(sample_mask_config_at(&mut rng, 10, NoiseSchedule::Cosine, 0.0).unwrap().1, 10);
            assert_eq!(sample_mask_config_at(&mut rng, 10, NoiseSchedule::Cosine, 1.0).unwrap().1, 0);
        }
    }

    #[test]
    fn revealed_positions_come_first() {
        let mut rng = RngStream::new(2);
        let (ord, i) = sample_mask_config_at(&mut rng, 12, NoiseSchedule::Linear, 0.5).unwrap();
        let first: Vec<usize> = ord.perm()[..i].to_vec();
        let mut sorted = first.clone();
        sorted.sort_unstable();
        assert_eq!(ord.perm().len(), 12);
        assert!(first.iter().all(|p| sorted.contains(p)));
    }

    #[test]
    fn mean_revealed_fraction_matches_quadrature() {
        let sched = NoiseSchedule::Cosine;
        // Midpoint rule for ∫₀¹ keep_prob(t) dt.
        let n_q = 100_000;
        let quad: f64 = (0..n_q)
            .map(|k| sched.keep_prob((k as f64 + 0.5) / n_q as f64).unwrap())
            .sum::<f64>()
            / n_q as f64;
        assert!((quad - (1.0 - 2.0 / std::f64::consts::PI)).abs() < 1e-9);
        let mut rng = RngStream::new(3);
        let (d, draws) = (16, 100_000);
        let mean = (0..draws)
            .map(|_| sample_mask_config(&mut rng, d, sched).unwrap().1 as f64 / d as f64)
            .sum::<f64>()
            / draws as f64;
        assert!((mean - quad).abs() < 0.01, "{mean} vs {quad}");
    }

    #[test]
    fn loss_eq9_weighting_and_uniform_rows() {
        let x = vec![0, 1, 0, 1, 0, 1, 0, 1];
        let ord = Ordering::identity(8);
        let u = vec![ProbRow::uniform(2); 2];
        let l = loss_eq9(&u, &u, &x, &ord, 6).unwrap();
        assert!((l.noncausal - 4.0 * 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((l.noncausal - 8.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(l.noncausal, l.causal);
        assert_eq!(loss_weight(8, 6), 4.0);
        assert_eq!(loss_eq9(&[], &[], &x, &ord, 8).unwrap(), LossParts::default());
    }

    #[test]
    fn hybrid_loss_agrees_with_rowwise_objective() {
        let (mut model, corpus) = small_setup();
        for t in model.params_mut().tensors_mut() {
            for (k, v) in t.data.iter_mut().enumerate() {
                *v += 0.05 * ((k * 31 + t.name.len() * 7) % 17) as f64 / 17.0 - 0.02;
            }
        }
        let spec = model.config().spec();
        let batch = make_batch(&mut RngStream::new(4), &corpus, 6, NoiseSchedule::Cosine).unwrap();
        let fused = model.batch_loss(&batch, None, false).unwrap();
        let mut sum = LossParts::default();
        for ex in &batch {
            let seq = TokenSequence::new_complete(&spec, ex.tokens.clone()).unwrap();
            let st = make_reveal_state(&spec, &seq, &ex.ordering, ex.revealed).unwrap();
            let (draft, cache) = model.draft_pass(&st, spec.len()).unwrap();
            let drafted: Vec<Token> = (ex.revealed..spec.len()).map(|r| ex.tokens[ex.ordering.at(r)]).collect();
            let target = model.target_rows(&cache, &drafted, ex.revealed..spec.len()).unwrap();
            let l = loss_eq9(&draft, &target, &ex.tokens, &ex.ordering, ex.revealed).unwrap();
            sum.noncausal += l.noncausal / batch.len() as f64;
            sum.causal += l.causal / batch.len() as f64;
        }
        assert!((fused.noncausal - sum.noncausal).abs() < 1e-10);
        assert!((fused.causal - sum.causal).abs() < 1e-10);
    }

    #[test]
    fn one_step_moves_parameters_and_frozen_mode_keeps_theta() {
        let (model, corpus) = small_setup();
        let cfg = TrainConfig {
            steps: 1,
            batch_size: 4,
            warmup_steps: 1,
            ..Default::default()
        };
        let before = model.params().clone();
        let mut tr = Trainer::new(model.clone(), cfg.clone()).unwrap();
        tr.step(&corpus).unwrap();
        assert_ne!(tr.model().params(), &before);

        let mut tr = Trainer::new(model, TrainConfig { frozen_theta: true, ..cfg }).unwrap();
        tr.step(&corpus).unwrap();
        for (a, b) in tr.model().params().tensors().iter().zip(before.tensors()) {
            if is_causal_param(&a.name) {
                if a.name.starts_with("c.head") {
                    assert_ne!(a.data, b.data, "{}", a.name);
                }
            } else {
                assert_eq!(a.data, b.data, "{} moved while frozen", a.name);
            }
        }
    }

    #[test]
    fn resume_is_bit_identical() {
        let (model, corpus) = small_setup();
        let cfg = TrainConfig {
            steps: 6,
            batch_size: 4,
            warmup_steps: 2,
            eval_every: 3,
            seed: 9,
            ..Default::default()
        };
        let mut full = Trainer::new(model.clone(), cfg.clone()).unwrap();
        let all = full.run(&corpus, |_| {}).unwrap();

        let mut half = Trainer::new(model, TrainConfig { steps: 3, ..cfg.clone() }).unwrap();
        half.run(&corpus, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.ssmd");
        half.save(&path).unwrap();
        let mut resumed = Trainer::resume(&path, cfg).unwrap();
        let rest = resumed.run(&corpus, |_| {}).unwrap();
        assert_eq!(rest, all[1..].to_vec());
        assert_eq!(resumed.model().params(), full.model().params());
    }

    #[test]
    fn lr_schedule_shape() {
        let c = TrainConfig::default();
        assert!((c.lr_at(0) - c.peak_lr / 200.0).abs() < 1e-18);
        assert!((c.lr_at(199) - c.peak_lr).abs() < 1e-18);
        assert!((c.lr_at(c.steps) - 0.1 * c.peak_lr).abs() < 1e-15);
        assert!(c.lr_at(5000) > c.lr_at(15000));
    }

    #[test]
    fn training_reduces_loss() {
        let (model, corpus) = small_setup();
        let cfg = TrainConfig {
            steps: 150,
            batch_size: 8,
            warmup_steps: 10,
            peak_lr: 3e-3,
            ..Default::default()
        };
        let before = evaluate_losses(&model, &corpus, 128, 5, cfg.schedule).unwrap();
        let mut tr = Trainer::new(model, cfg).unwrap();
        tr.run(&corpus, |_| {}).unwrap();
        let after = evaluate_losses(tr.model(), &corpus, 128, 5, NoiseSchedule::Cosine).unwrap();
        assert!(after.total() < before.total(), "{after:?} vs {before:?}");
    }
}
