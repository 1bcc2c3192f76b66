//! Noise schedules, reveal probabilities and window functions.
//!
//! Two conventions meet here. Time `t` (or `τ`) runs from 0 (clean data) to
//! 1 (fully masked).
//!
//! - [`NoiseSchedule::mask_fraction`] is the expected proportion of masked
//!   positions at time `τ`; for the cosine schedule `m(τ) = cos(π/2·(1−τ))`.
//! - [`NoiseSchedule::keep_prob`] is the per-position probability of still
//!   holding its clean value at time `t`: `α_t = 1 − m(t)`, with `α_0 = 1`
//!   and `α_1 = 0`.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseSchedule {
    #[default]
    Cosine,
    Linear,
}

impl NoiseSchedule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            other => Err(Error::Invalid(format!("unknown schedule kind '{other}'"))),
        }
    }

    fn check_time(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(Error::OutOfRange(format!("time {t} outside [0, 1]")))
        }
    }

    /// Expected masked proportion `m(τ)`.
    pub fn mask_fraction(&self, tau: f64) -> Result<f64> {
        Self::check_time(tau)?;
        Ok(match self {
            Self::Cosine => {
                if tau == 0.0 {
                    0.0
                } else {
                    (FRAC_PI_2 * (1.0 - tau)).cos().clamp(0.0, 1.0)
                }
            }
            Self::Linear => tau,
        })
    }

    /// Keep probability `α_t = 1 − m(t)`.
    pub fn keep_prob(&self, t: f64) -> Result<f64> {
        Ok(1.0 - self.mask_fraction(t)?)
    }

    /// Probability that a position masked at `τ` is revealed when stepping to
    /// `τ − Δτ`: `(m(τ) − m(τ−Δτ)) / m(τ)`. Zero when nothing is masked.
    pub fn reveal_prob(&self, tau: f64, dtau: f64) -> Result<f64> {
        let next = tau - dtau;
        if !(dtau > 0.0) || next < -1e-12 || tau > 1.0 {
            return Err(Error::OutOfRange(format!(
                "need 0 <= tau - dtau < tau <= 1, got tau={tau}, dtau={dtau}"
            )));
        }
        let m_now = self.mask_fraction(tau)?;
        if m_now <= 0.0 {
            return Ok(0.0);
        }
        let m_next = self.mask_fraction(next.max(0.0))?;
        Ok(((m_now - m_next) / m_now).clamp(0.0, 1.0))
    }
}

/// Uniform discretization `τ ∈ {1, 1 − 1/T, …, 0}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    steps: usize,
}

impl TimeGrid {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::OutOfRange("grid needs at least one step".into()));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dtau(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// Start time of step `k` (`k = 0` is `τ = 1`).
    pub fn tau(&self, k: usize) -> f64 {
        (self.steps - k) as f64 / self.steps as f64
    }
}

/// Maximum number of tokens one non-causal pass may reveal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum WindowSpec {
    /// `W(i) = i + 1`.
    Linear,
    /// Expected reveals of a cosine-schedule masked diffusion step of size `dtau`.
    Cosine { dtau: f64 },
    /// A fixed cap.
    Constant { cap: usize },
}

impl WindowSpec {
    pub fn cosine(dtau: f64) -> Result<Self> {
        if !(dtau > 0.0 && dtau <= 1.0) {
            return Err(Error::OutOfRange(format!("window dtau {dtau} outside (0, 1]")));
        }
        Ok(Self::Cosine { dtau })
    }

    pub fn constant(cap: usize) -> Result<Self> {
        if cap == 0 {
            return Err(Error::OutOfRange("window cap must be positive".into()));
        }
        Ok(Self::Constant { cap })
    }

    /// Parses `linear`, `cosine:<dtau>` or `constant:<cap>`.
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let bad = || Error::Invalid(format!("malformed window '{s}'"));
        match (kind, arg) {
            ("linear", None) => Ok(Self::Linear),
            ("cosine", Some(a)) => Self::cosine(a.parse().map_err(|_| bad())?),
            ("constant", Some(a)) => Self::constant(a.parse().map_err(|_| bad())?),
            _ => Err(bad()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Linear => "linear".into(),
            Self::Cosine { dtau } => format!("cosine:{dtau}"),
            Self::Constant { cap } => format!("constant:{cap}"),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Cosine { .. } => "cosine",
            Self::Constant { .. } => "constant",
        }
    }

    pub fn dtau(&self) -> Option<f64> {
        match self {
            Self::Cosine { dtau } => Some(*dtau),
            _ => None,
        }
    }

    /// Window size when `i` of `len` tokens are revealed; always in `[1, len − i]`.
    pub fn window_size(&self, i: usize, len: usize) -> Result<usize> {
        if i >= len {
            return Err(Error::OutOfRange(format!(
                "window requested with {i} of {len} tokens revealed"
            )));
        }
        let remaining = len - i;
        let w = match *self {
            Self::Linear => i + 1,
            Self::Constant { cap } => cap,
            Self::Cosine { dtau } => {
                let d = len as f64;
                let mask_frac = (len - i) as f64 / d;
                // Equivalent diffusion time for the current mask proportion.
                let tau = 1.0 - mask_frac.acos() / FRAC_PI_2;
                let expected = d * ((FRAC_PI_2 * (1.0 - tau)).cos() - (FRAC_PI_2 * (1.0 - tau + dtau)).cos());
                if expected.is_finite() {
                    expected.ceil().max(1.0).min(remaining as f64) as usize
                } else {
                    1
                }
            }
        };
        Ok(w.clamp(1, remaining))
    }
}
