use anyhow::Context as _;
use ssmd_core::likelihood::{all_orderings, elbo, exact_bound, rejection_count_posterior, sequence_likelihood};
use ssmd_core::logspace::log_sum_exp;
use ssmd_core::models::DraftTargetModel;
use ssmd_core::rng::RngStream;
use ssmd_core::sampler::sequence_seed;
use ssmd_core::types::{sample_ordering, Ordering, TokenSequence};

use crate::config::Config;
use crate::io::{csv_writer, num, prepare_out_dir, read_sequences};
use crate::model::{load_model, with_model};
use crate::LikelihoodArgs;

struct Row {
    ordering_hash: String,
    logp: f64,
    elbo: f64,
    expected_rejections: f64,
}

fn posterior_mean<M: DraftTargetModel + ?Sized>(m: &M, x: &TokenSequence, o: &Ordering) -> anyhow::Result<f64> {
    match rejection_count_posterior(m, x, o) {
        Ok(p) => Ok(p.mean()),
        Err(ssmd_core::Error::ZeroLikelihood) => Ok(f64::NAN),
        Err(e) => Err(e.into()),
    }
}

fn score_one<M: DraftTargetModel + ?Sized>(m: &M, cfg: &Config, x: &TokenSequence, idx: u64) -> anyhow::Result<Row> {
    let d = m.spec().len();
    let stream = RngStream::new(sequence_seed(cfg.seed, idx));
    let ordering = if cfg.likelihood.ordering == "identity" {
        Ordering::identity(d)
    } else {
        sample_ordering(&mut stream.substream(0), d)
    };
    let est = elbo(m, x, cfg.likelihood.num_orderings, &mut stream.substream(1))?;
    Ok(Row {
        ordering_hash: format!("{:016x}", ordering.stable_hash()),
        logp: sequence_likelihood(m, x, &ordering)?,
        elbo: est.mean,
        expected_rejections: posterior_mean(m, x, &ordering)?,
    })
}

/// Marginalizes over every ordering; the rejection count is averaged with
/// weights `p(x | σ)`.
fn score_exact<M: DraftTargetModel + ?Sized>(m: &M, x: &TokenSequence) -> anyhow::Result<Row> {
    let bound = exact_bound(m, x)?;
    let orderings = all_orderings(m.spec().len())?;
    let mut logw = Vec::with_capacity(orderings.len());
    let mut means = Vec::with_capacity(orderings.len());
    for o in &orderings {
        logw.push(sequence_likelihood(m, x, o)?);
        means.push(posterior_mean(m, x, o)?);
    }
    let z = log_sum_exp(&logw);
    let expected = if z == f64::NEG_INFINITY {
        f64::NAN
    } else {
        logw.iter()
            .zip(&means)
            .filter(|(w, _)| **w > f64::NEG_INFINITY)
            .map(|(w, mu)| (w - z).exp() * mu)
            .sum()
    };
    Ok(Row {
        ordering_hash: String::new(),
        logp: bound.log_marginal,
        elbo: bound.elbo,
        expected_rejections: expected,
    })
}

pub fn likelihood(cfg: &Config, args: &LikelihoodArgs) -> anyhow::Result<()> {
    let model = load_model(cfg)?;
    let spec = cfg.sequence_spec()?;
    let seqs = read_sequences(&args.sequences, &spec)?;
    prepare_out_dir(cfg)?;
    let mut w = csv_writer(&cfg.paths.out_dir.join("likelihood.csv"), cfg)?;
    w.write_record(["sequence_index", "ordering_hash", "logp", "elbo", "expected_rejections"])?;
    for (k, x) in seqs.iter().enumerate() {
        let row = with_model!(&model, m => if args.exact_orderings {
            score_exact(m, x)
        } else {
            score_one(m, cfg, x, k as u64)
        })
        .with_context(|| format!("sequence {k}"))?;
        w.write_record([
            k.to_string(),
            row.ordering_hash,
            num(row.logp),
            num(row.elbo),
            num(row.expected_rejections),
        ])?;
    }
    w.flush()?;
    println!("scored={}", seqs.len());
    Ok(())
}
