use anyhow::Context as _;
use ssmd_core::models::HybridModel;
use ssmd_core::rng::RngStream;
use ssmd_core::train::Trainer;

use crate::config::Config;
use crate::io::{csv_writer, num, prepare_out_dir};
use crate::model::load_corpus;
use crate::TrainArgs;

pub fn train(cfg: &Config, args: &TrainArgs) -> anyhow::Result<()> {
    let corpus = load_corpus(cfg)?;
    let hcfg = cfg.hybrid_config()?;
    prepare_out_dir(cfg)?;
    let mut trainer = match &args.resume {
        Some(p) => {
            let t = Trainer::resume(p, cfg.train.clone()).with_context(|| format!("resuming from {}", p.display()))?;
            if *t.model().config() != hcfg {
                return Err(crate::UsageError(format!("model: {} was trained with a different model config", p.display())).into());
            }
            t
        }
        None => Trainer::new(HybridModel::new(hcfg, &mut RngStream::new(cfg.seed))?, cfg.train.clone())?,
    };
    let until = args.until.unwrap_or(cfg.train.steps);
    let mut w = csv_writer(&cfg.paths.out_dir.join("loss.csv"), cfg)?;
    w.write_record(["step", "noncausal", "causal", "total"])?;
    let mut write_err = None;
    let d = cfg.spec.len as f64;
    trainer.run_until(&corpus, until, |r| {
        eprintln!(
            "step {:>6}  noncausal {:.4}  causal {:.4}  (nats/token)",
            r.step,
            r.noncausal / d,
            r.causal / d
        );
        if let Err(e) = w.write_record([r.step.to_string(), num(r.noncausal), num(r.causal), num(r.total)]) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    w.flush()?;
    let ckpt = cfg.checkpoint_path();
    if let Some(dir) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    trainer.save(&ckpt).with_context(|| format!("writing {}", ckpt.display()))?;
    println!("checkpoint={}", ckpt.display());
    Ok(())
}
