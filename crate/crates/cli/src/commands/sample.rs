use ssmd_core::sampler::sample_many;

use crate::config::Config;
use crate::io::{csv_writer, num, prepare_out_dir, write_sequences};
use crate::model::{load_model, with_model};

pub fn sample(cfg: &Config) -> anyhow::Result<()> {
    let family = cfg.family()?;
    let model = load_model(cfg)?;
    prepare_out_dir(cfg)?;
    let n = cfg.sampler.n;
    let results = with_model!(&model, m => sample_many(m, &family, n, cfg.seed, None, cfg.sampler.threads)?);
    let dir = &cfg.paths.out_dir;
    write_sequences(&dir.join("samples.txt"), results.iter().map(|r| &r.sequence))?;
    let mut w = csv_writer(&dir.join("sample_metrics.csv"), cfg)?;
    w.write_record(["seed", "ordering_hash", "nfe", "rejections", "length"])?;
    for r in &results {
        w.write_record([
            r.seed.to_string(),
            format!("{:016x}", r.ordering.stable_hash()),
            num(r.nfe),
            r.trace.rejections().to_string(),
            r.sequence.len().to_string(),
        ])?;
    }
    w.flush()?;
    if !results.is_empty() {
        let mean = results.iter().map(|r| r.nfe).sum::<f64>() / results.len() as f64;
        println!("family={} samples={} mean_nfe={mean:.4}", family.label(), results.len());
    }
    Ok(())
}
