//! Sample-quality metrics and NFE/quality tradeoff sweeps.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{DraftTargetModel, TabularModel};
use crate::sampler::{sample_many, Family, SampleResult};
use crate::train::LexiconLanguage;
use crate::types::Token;

/// Words strictly between two separators. Edge fragments and empty words
/// are dropped.
pub fn split_words(tokens: &[Token], separator: Token) -> Vec<&[Token]> {
    let seps: Vec<usize> = (0..tokens.len()).filter(|&k| tokens[k] == separator).collect();
    seps.windows(2)
        .map(|w| &tokens[w[0] + 1..w[1]])
        .filter(|w| !w.is_empty())
        .collect()
}

/// A ratio `Σ num / Σ den` over samples with a delta-method standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioEstimate {
    pub value: f64,
    pub std_err: f64,
}

fn ratio_estimate(parts: &[(f64, f64)]) -> Option<RatioEstimate> {
    let num: f64 = parts.iter().map(|p| p.0).sum();
    let den: f64 = parts.iter().map(|p| p.1).sum();
    if den <= 0.0 {
        return None;
    }
    let value = num / den;
    let n = parts.len() as f64;
    let std_err = if parts.len() > 1 {
        let mean_den = den / n;
        let ss: f64 = parts.iter().map(|(a, b)| (a - value * b).powi(2)).sum();
        (ss / (n * (n - 1.0))).sqrt() / mean_den
    } else {
        0.0
    };
    Some(RatioEstimate { value, std_err })
}

/// Fraction of words found in the lexicon, pooled over all samples.
pub fn lexicon_accuracy<S: AsRef<[Token]>>(
    samples: &[S],
    lexicon: &HashSet<Vec<Token>>,
    separator: Token,
) -> Result<RatioEstimate> {
    let parts: Vec<(f64, f64)> = samples
        .iter()
        .map(|s| {
            let words = split_words(s.as_ref(), separator);
            let valid = words.iter().filter(|w| lexicon.contains(**w)).count();
            (valid as f64, words.len() as f64)
        })
        .collect();
    ratio_estimate(&parts).ok_or_else(|| Error::Invalid("samples contain no complete words".into()))
}

fn histogram_entropy(tokens: &[Token]) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    for &t in tokens {
        *counts.entry(t).or_insert(0usize) += 1;
    }
    let n = tokens.len() as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_err: f64,
}

impl MeanEstimate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, std_err: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std_err = if values.len() > 1 && mean.is_finite() {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            0.0
        };
        Self { mean, std_err }
    }
}

/// Mean over samples of the entropy of each sample's token histogram.
pub fn unigram_entropy<S: AsRef<[Token]>>(samples: &[S]) -> MeanEstimate {
    let v: Vec<f64> = samples
        .iter()
        .filter(|s| !s.as_ref().is_empty())
        .map(|s| histogram_entropy(s.as_ref()))
        .collect();
    MeanEstimate::of(&v)
}

/// A known data distribution that scores complete sequences.
pub trait SequenceOracle {
    /// `ln p_data(x)`; `-inf` outside the support.
    fn log_prob(&self, x: &[Token]) -> Result<f64>;
}

impl SequenceOracle for TabularModel {
    fn log_prob(&self, x: &[Token]) -> Result<f64> {
        Ok(crate::logspace::ln(self.prob(x)?))
    }
}

impl SequenceOracle for LexiconLanguage {
    fn log_prob(&self, x: &[Token]) -> Result<f64> {
        Ok(LexiconLanguage::log_prob(self, x))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleNll {
    /// Nats per token; `+inf` if any sample is outside the support.
    pub mean: f64,
    /// Standard error over the finite samples.
    pub std_err: f64,
    pub zero_probability: usize,
}

impl OracleNll {
    pub fn is_finite(&self) -> bool {
        self.zero_probability == 0
    }
}

pub fn oracle_nll<S: AsRef<[Token]>, O: SequenceOracle + ?Sized>(samples: &[S], oracle: &O) -> Result<OracleNll> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples".into()));
    }
    let mut finite = Vec::with_capacity(samples.len());
    let mut zero = 0;
    for s in samples {
        let s = s.as_ref();
        let lp = oracle.log_prob(s)?;
        if lp == f64::NEG_INFINITY {
            zero += 1;
        } else {
            finite.push(-lp / s.len() as f64);
        }
    }
    let est = MeanEstimate::of(&finite);
    Ok(OracleNll {
        mean: if zero > 0 { f64::INFINITY } else { est.mean },
        std_err: if finite.is_empty() { 0.0 } else { est.std_err },
        zero_probability: zero,
    })
}

/// What a sweep scores samples against.
pub struct EvalContext<'a> {
    pub lexicon: &'a HashSet<Vec<Token>>,
    pub separator: Token,
    pub oracle: Option<&'a dyn SequenceOracle>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub family: String,
    pub config_label: String,
    pub window_kind: String,
    pub dtau: Option<f64>,
    pub inner_loops: Option<usize>,
    pub grid_steps: Option<usize>,
    pub mean_nfe: f64,
    pub se_nfe: f64,
    /// `NaN` when no sample contained a complete word.
    pub lexicon_acc: f64,
    pub se_lexicon_acc: f64,
    pub entropy: f64,
    pub se_entropy: f64,
    /// `NaN` without an oracle, `+inf` if a sample had zero probability.
    pub oracle_nll: f64,
    pub se_oracle_nll: f64,
    pub n_samples: usize,
}

impl TradeoffPoint {
    pub fn from_samples(family: &Family, results: &[SampleResult], ctx: &EvalContext<'_>) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::Invalid("a tradeoff point needs at least one sample".into()));
        }
        let seqs: Vec<&[Token]> = results.iter().map(|r| r.sequence.tokens()).collect();
        let nfe = MeanEstimate::of(&results.iter().map(|r| r.nfe).collect::<Vec<_>>());
        let acc = lexicon_accuracy(&seqs, ctx.lexicon, ctx.separator).unwrap_or(RatioEstimate {
            value: f64::NAN,
            std_err: f64::NAN,
        });
        let ent = unigram_entropy(&seqs);
        let nll = match ctx.oracle {
            Some(o) => oracle_nll(&seqs, o)?,
            None => OracleNll {
                mean: f64::NAN,
                std_err: f64::NAN,
                zero_probability: 0,
            },
        };
        let (window_kind, dtau, inner_loops, grid_steps) = match family {
            Family::Mdm { grid, .. } => ("none".to_string(), Some(grid.dtau()), None, Some(grid.steps())),
            Family::SpecBasic => ("full".to_string(), None, Some(1), None),
            Family::Spec(c) => (c.window.kind_name().to_string(), c.window.dtau(), Some(c.inner_loops), None),
        };
        Ok(Self {
            family: family.name().to_string(),
            config_label: family.label(),
            window_kind,
            dtau,
            inner_loops,
            grid_steps,
            mean_nfe: nfe.mean,
            se_nfe: nfe.std_err,
            lexicon_acc: acc.value,
            se_lexicon_acc: acc.std_err,
            entropy: ent.mean,
            se_entropy: ent.std_err,
            oracle_nll: nll.mean,
            se_oracle_nll: nll.std_err,
            n_samples: results.len(),
        })
    }
}

/// One point per family configuration. Every configuration uses the same
/// per-sequence seeds derived from `root_seed`.
pub fn tradeoff_sweep<M: DraftTargetModel + Sync + ?Sized>(
    model: &M,
    families: &[Family],
    n_samples: usize,
    root_seed: u64,
    ctx: &EvalContext<'_>,
    threads: usize,
) -> Result<Vec<TradeoffPoint>> {
    if families.is_empty() {
        return Err(Error::Invalid("sweep needs at least one configuration".into()));
    }
    families
        .iter()
        .map(|f| {
            let results = sample_many(model, f, n_samples, root_seed, None, threads)?;
            TradeoffPoint::from_samples(f, &results, ctx)
        })
        .collect()
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub const TRADEOFF_COLUMNS: [&str; 12] = [
    "family",
    "config_label",
    "window_kind",
    "dtau",
    "inner_loops",
    "grid_steps",
    "mean_nfe",
    "se_nfe",
    "lexicon_acc",
    "entropy",
    "oracle_nll",
    "n_samples",
];

pub fn write_tradeoff_csv<W: Write>(points: &[TradeoffPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRADEOFF_COLUMNS).map_err(csv_err)?;
    for p in points {
        w.write_record([
            p.family.clone(),
            p.config_label.clone(),
            p.window_kind.clone(),
            opt(p.dtau),
            opt(p.inner_loops),
            opt(p.grid_steps),
            p.mean_nfe.to_string(),
            p.se_nfe.to_string(),
            p.lexicon_acc.to_string(),
            p.entropy.to_string(),
            p.oracle_nll.to_string(),
            p.n_samples.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Invalid(format!("csv: {e}"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    LexiconAccuracy,
    Entropy,
    OracleNll,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::LexiconAccuracy, Metric::Entropy, Metric::OracleNll];

    pub fn name(&self) -> &'static str {
        match self {
            Self::LexiconAccuracy => "lexicon_acc",
            Self::Entropy => "entropy",
            Self::OracleNll => "oracle_nll",
        }
    }

    pub fn of(&self, p: &TradeoffPoint) -> (f64, f64) {
        match self {
            Self::LexiconAccuracy => (p.lexicon_acc, p.se_lexicon_acc),
            Self::Entropy => (p.entropy, p.se_entropy),
            Self::OracleNll => (p.oracle_nll, p.se_oracle_nll),
        }
    }
}

/// `(nfe, value, se)` for one family, sorted by NFE. Points with a
/// non-finite value are skipped.
pub fn curve(points: &[TradeoffPoint], family: &str, metric: Metric) -> Vec<(f64, f64, f64)> {
    let mut c: Vec<(f64, f64, f64)> = points
        .iter()
        .filter(|p| p.family == family)
        .map(|p| {
            let (v, se) = metric.of(p);
            (p.mean_nfe, v, se)
        })
        .filter(|(x, v, _)| x.is_finite() && v.is_finite())
        .collect();
    c.sort_by(|a, b| a.0.total_cmp(&b.0));
    c
}

/// Long-format plot data: one row per point, `x = mean_nfe`.
pub fn write_curve_data<W: Write>(points: &[TradeoffPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["family", "config_label", "metric", "x", "y", "y_se"]).map_err(csv_err)?;
    for m in Metric::ALL {
        for p in points {
            let (y, se) = m.of(p);
            w.write_record([
                p.family.as_str(),
                p.config_label.as_str(),
                m.name(),
                &p.mean_nfe.to_string(),
                &y.to_string(),
                &se.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Piecewise-linear interpolation of a sorted curve; `None` outside its
/// NFE range.
pub fn interpolate(curve: &[(f64, f64, f64)], x: f64) -> Option<(f64, f64)> {
    let first = curve.first()?;
    let last = curve.last()?;
    if x < first.0 || x > last.0 {
        return None;
    }
    for w in curve.windows(2) {
        let (a, b) = (w[0], w[1]);
        if x >= a.0 && x <= b.0 {
            if b.0 == a.0 {
                return Some((a.1.max(b.1), a.2.max(b.2)));
            }
            let f = (x - a.0) / (b.0 - a.0);
            return Some((a.1 + f * (b.1 - a.1), a.2 + f * (b.2 - a.2)));
        }
    }
    Some((first.1, first.2))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPoint {
    pub nfe: f64,
    pub candidate: f64,
    pub candidate_se: f64,
    pub baseline: f64,
    pub baseline_se: f64,
}

impl MatchedPoint {
    /// Standard error of `candidate − baseline`.
    pub fn diff_se(&self) -> f64 {
        self.candidate_se.hypot(self.baseline_se)
    }

    /// `candidate >= baseline − k·se` for a higher-is-better metric.
    pub fn not_worse(&self, k: f64) -> bool {
        self.candidate >= self.baseline - k * self.diff_se()
    }
}

/// Compares two families at each grid NFE covered by both curves.
pub fn matched_comparison(
    points: &[TradeoffPoint],
    candidate: &str,
    baseline: &str,
    metric: Metric,
    grid: &[f64],
) -> Vec<MatchedPoint> {
    let c = curve(points, candidate, metric);
    let b = curve(points, baseline, metric);
    grid.iter()
        .filter_map(|&x| {
            let (cv, cse) = interpolate(&c, x)?;
            let (bv, bse) = interpolate(&b, x)?;
            Some(MatchedPoint {
                nfe: x,
                candidate: cv,
                candidate_se: cse,
                baseline: bv,
                baseline_se: bse,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::DraftMode;
    use crate::rng::RngStream;
    use crate::schedule::{NoiseSchedule, TimeGrid, WindowSpec};
    use crate::sampler::SamplerConfig;
    use crate::types::{ProbRow, SequenceSpec};
    use rand::Rng;

    const SEP: Token = 9;

    #[test]
    fn word_splitting_drops_edges() {
        assert_eq!(split_words(&[1, 2, SEP, 3, 4, SEP, SEP, 5, SEP, 6], SEP), vec![&[3, 4][..], &[5][..]]);
        assert!(split_words(&[1, 2, 3], SEP).is_empty());
    }

    #[test]
    fn accuracy_bounds() {
        let lex: HashSet<Vec<Token>> = [vec![1, 2], vec![3]].into_iter().collect();
        let s = vec![vec![SEP, 1, 2, SEP, 3, SEP], vec![0, SEP, 3, SEP, 1, 2]];
        assert_eq!(lexicon_accuracy(&s, &lex, SEP).unwrap().value, 1.0);
        assert_eq!(lexicon_accuracy(&s, &HashSet::new(), SEP).unwrap().value, 0.0);
        assert!(lexicon_accuracy(&[vec![1, 2, 3]], &lex, SEP).is_err());
    }

    #[test]
    fn accuracy_matches_coverage_on_random_words() {
        // Two-letter words over {0..8} between fixed separators; the lexicon
        // holds c = 20/81 of them.
        let lex: HashSet<Vec<Token>> = (0..20).map(|k| vec![k / 9, k % 9]).collect();
        let mut rng = RngStream::new(5);
        let s: Vec<Vec<Token>> = (0..20_000)
            .map(|_| vec![SEP, rng.gen_range(0..9), rng.gen_range(0..9), SEP])
            .collect();
        let a = lexicon_accuracy(&s, &lex, SEP).unwrap();
        let c = 20.0 / 81.0;
        assert!((a.value - c).abs() < 3.0 * (c * (1.0 - c) / 20_000.0f64).sqrt());
        assert!((a.std_err - (c * (1.0 - c) / 20_000.0f64).sqrt()).abs() < 2e-4);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(unigram_entropy(&[vec![3, 3, 3]]).mean, 0.0);
        assert!((unigram_entropy(&[vec![0, 0, 1, 1]]).mean - 2f64.ln()).abs() < 1e-15);
        assert!((unigram_entropy(&[vec![0, 1, 2, 3]]).mean - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn oracle_nll_examples() {
        let spec = SequenceSpec::new(2, 2).unwrap();
        let point = TabularModel::new(spec, vec![0.0, 1.0, 0.0, 0.0], DraftMode::ExactMarginal).unwrap();
        let n = oracle_nll(&[vec![0, 1]], &point).unwrap();
        assert_eq!((n.mean, n.zero_probability), (0.0, 0));
        let bad = oracle_nll(&[vec![0, 1], vec![1, 1]], &point).unwrap();
        assert!(bad.mean.is_infinite() && !bad.is_finite());

        let m = TabularModel::random(SequenceSpec::new(3, 3).unwrap(), &mut RngStream::new(2), 1.0, DraftMode::ExactMarginal)
            .unwrap();
        let mut rng = RngStream::new(3);
        let s: Vec<Vec<Token>> = (0..40_000).map(|_| m.sample_joint(&mut rng).into_tokens()).collect();
        let est = oracle_nll(&s, &m).unwrap();
        assert!((est.mean - m.entropy() / 3.0).abs() < 4.0 * est.std_err);
    }

    #[test]
    fn interpolation() {
        let c = vec![(1.0, 0.0, 0.1), (3.0, 1.0, 0.3)];
        assert_eq!(interpolate(&c, 2.0), Some((0.5, 0.2)));
        assert_eq!(interpolate(&c, 0.5), None);
        assert_eq!(interpolate(&c, 3.0), Some((1.0, 0.3)));
    }

    fn product_model() -> TabularModel {
        let spec = SequenceSpec::new(3, 6).unwrap();
        TabularModel::product(spec, &vec![ProbRow::new(vec![0.3, 0.2, 0.5]).unwrap(); 6], DraftMode::ExactMarginal).unwrap()
    }

    #[test]
    fn sweep_on_product_model() {
        let m = product_model();
        let lex: HashSet<Vec<Token>> = [vec![0], vec![1]].into_iter().collect();
        let ctx = EvalContext {
            lexicon: &lex,
            separator: 2,
            oracle: Some(&m),
        };
        let fams = [
            Family::Spec(SamplerConfig::new(WindowSpec::cosine(0.2).unwrap(), 1).unwrap()),
            Family::Spec(SamplerConfig::new(WindowSpec::Linear, 2).unwrap()),
            Family::SpecBasic,
            Family::Mdm {
                schedule: NoiseSchedule::Cosine,
                grid: TimeGrid::new(4).unwrap(),
            },
        ];
        let pts = tradeoff_sweep(&m, &fams, 300, 1, &ctx, 2).unwrap();
        assert_eq!(pts.len(), 4);
        // Nothing rejects, so the full window costs exactly one pass.
        assert_eq!(pts[2].mean_nfe, 1.0);
        assert!(pts.iter().all(|p| p.oracle_nll.is_finite() && p.n_samples == 300));
        let again = tradeoff_sweep(&m, &fams, 300, 1, &ctx, 1).unwrap();
        assert_eq!(pts, again);
        let mut a = Vec::new();
        write_tradeoff_csv(&pts, &mut a).unwrap();
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with(&TRADEOFF_COLUMNS.join(",")));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn more_mdm_steps_lower_oracle_nll() {
        let spec = SequenceSpec::new(2, 4).unwrap();
        let m = TabularModel::random(spec, &mut RngStream::new(4), 3.0, DraftMode::ExactMarginal).unwrap();
        let lex = HashSet::new();
        let ctx = EvalContext {
            lexicon: &lex,
            separator: 1,
            oracle: Some(&m),
        };
        let fams = [1, 80].map(|t| Family::Mdm {
            schedule: NoiseSchedule::Cosine,
            grid: TimeGrid::new(t).unwrap(),
        });
        let pts = tradeoff_sweep(&m, &fams, 4000, 2, &ctx, 1).unwrap();
        assert!(pts[1].oracle_nll < pts[0].oracle_nll - 2.0 * pts[0].se_oracle_nll);
    }

    #[test]
    fn matched_points_need_both_curves() {
        let mk = |fam: &str, nfe: f64, acc: f64| TradeoffPoint {
            family: fam.into(),
            config_label: String::new(),
            window_kind: String::new(),
            dtau: None,
            inner_loops: None,
            grid_steps: None,
            mean_nfe: nfe,
            se_nfe: 0.0,
            lexicon_acc: acc,
            se_lexicon_acc: 0.03,
            entropy: 0.0,
            se_entropy: 0.0,
            oracle_nll: 0.0,
            se_oracle_nll: 0.0,
            n_samples: 1,
        };
        let pts = vec![mk("mdm", 1.0, 0.1), mk("mdm", 8.0, 0.8), mk("spec", 3.0, 0.7), mk("spec", 6.0, 0.9)];
        let grid: Vec<f64> = (1..=8).map(f64::from).collect();
        let m = matched_comparison(&pts, "spec", "mdm", Metric::LexiconAccuracy, &grid);
        assert_eq!(m.iter().map(|p| p.nfe).collect::<Vec<_>>(), vec![3.0, 4.0, 5.0, 6.0]);
        assert!(m.iter().all(|p| p.not_worse(1.0)));
    }
}
