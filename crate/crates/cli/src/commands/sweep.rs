use std::collections::HashSet;
use std::path::Path;

use anyhow::Context as _;
use serde::Deserialize;
use ssmd_core::eval::{
    matched_comparison, tradeoff_sweep, write_curve_data, write_tradeoff_csv, EvalContext, Metric, SequenceOracle,
    TradeoffPoint,
};
use ssmd_core::sampler::{Family, SamplerConfig};
use ssmd_core::schedule::{TimeGrid, WindowSpec};

use crate::config::Config;
use crate::io::{csv_writer, num, prepare_out_dir};
use crate::model::{load_language, load_model, with_model};
use crate::{SweepArgs, UsageError};

/// Sweep description. Speculative rows are the product of `windows` and
/// `inner_loops`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepSpec {
    #[serde(default = "default_samples")]
    n_samples: usize,
    #[serde(default)]
    mdm_grid_steps: Vec<usize>,
    #[serde(default)]
    windows: Vec<String>,
    #[serde(default = "default_inner_loops")]
    inner_loops: Vec<usize>,
    #[serde(default)]
    spec_basic: bool,
    /// NFE values at which the speculative and masked-diffusion curves are compared.
    #[serde(default = "default_matched")]
    matched_nfe: Vec<f64>,
}

fn default_samples() -> usize {
    200
}

fn default_inner_loops() -> Vec<usize> {
    vec![1]
}

fn default_matched() -> Vec<f64> {
    (1..=8).map(f64::from).collect()
}

fn families(spec: &SweepSpec, cfg: &Config) -> Result<Vec<Family>, UsageError> {
    let bad = |e: ssmd_core::Error| UsageError(format!("sweep: {e}"));
    let mut out = Vec::new();
    for &t in &spec.mdm_grid_steps {
        out.push(Family::Mdm {
            schedule: cfg.schedule.kind,
            grid: TimeGrid::new(t).map_err(bad)?,
        });
    }
    for w in &spec.windows {
        let w = WindowSpec::parse(w).map_err(bad)?;
        for &n in &spec.inner_loops {
            out.push(Family::Spec(SamplerConfig::new(w, n).map_err(bad)?));
        }
    }
    if spec.spec_basic {
        out.push(Family::SpecBasic);
    }
    if out.is_empty() {
        return Err(UsageError("sweep: no configurations".into()));
    }
    Ok(out)
}

fn read_spec(path: &Path) -> Result<SweepSpec, UsageError> {
    let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))
}

pub fn sweep(cfg: &Config, args: &SweepArgs) -> anyhow::Result<()> {
    let spec = read_spec(&args.sweep)?;
    let fams = families(&spec, cfg)?;
    let model = load_model(cfg)?;
    let lang = load_language(cfg)?;
    let lexicon: HashSet<Vec<u32>> = lang.as_ref().map(|l| l.lexicon_set()).unwrap_or_default();
    let oracle: Option<&dyn SequenceOracle> = match (model.tabular(), &lang) {
        (Some(t), _) => Some(t),
        (None, Some(l)) => Some(l),
        (None, None) => None,
    };
    let ctx = EvalContext {
        lexicon: &lexicon,
        separator: (cfg.spec.alphabet - 1) as u32,
        oracle,
    };
    prepare_out_dir(cfg)?;
    let points: Vec<TradeoffPoint> = with_model!(&model, m => tradeoff_sweep(
        m,
        &fams,
        spec.n_samples,
        cfg.seed,
        &ctx,
        cfg.sampler.threads,
    ))
    .context("sweep")?;
    let dir = &cfg.paths.out_dir;
    let mut buf = Vec::new();
    write_tradeoff_csv(&points, &mut buf)?;
    std::fs::write(dir.join("tradeoff.csv"), format!("# config_hash={}\n{}", cfg.hash(), String::from_utf8(buf)?))?;
    write_curve_data(&points, std::fs::File::create(dir.join("curves.csv"))?)?;
    let mut w = csv_writer(&dir.join("matched.csv"), cfg)?;
    w.write_record(["metric", "nfe", "spec", "spec_se", "mdm", "mdm_se", "diff_se"])?;
    for metric in Metric::ALL {
        for p in matched_comparison(&points, "spec", "mdm", metric, &spec.matched_nfe) {
            w.write_record([
                metric.name().to_string(),
                num(p.nfe),
                num(p.candidate),
                num(p.candidate_se),
                num(p.baseline),
                num(p.baseline_se),
                num(p.diff_se()),
            ])?;
        }
    }
    w.flush()?;
    for p in &points {
        println!(
            "{:<10} {:<24} nfe {:>7.3}  lexicon_acc {:.3}  entropy {:.3}  oracle_nll {:.3}",
            p.family, p.config_label, p.mean_nfe, p.lexicon_acc, p.entropy, p.oracle_nll
        );
    }
    Ok(())
}
