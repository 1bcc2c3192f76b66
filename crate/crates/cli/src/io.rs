use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context as _};
use ssmd_core::types::{SequenceSpec, TokenSequence};

use crate::config::Config;

/// One sequence per line, space-separated token ids. Blank lines are skipped.
pub fn read_sequences(path: &Path, spec: &SequenceSpec) -> anyhow::Result<Vec<TokenSequence>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ids = line
            .split_whitespace()
            .map(|t| t.parse::<u32>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{} line {}: not a list of token ids", path.display(), k + 1))?;
        let seq = TokenSequence::new_complete(spec, ids).with_context(|| format!("{} line {}", path.display(), k + 1))?;
        out.push(seq);
    }
    Ok(out)
}

pub fn write_sequences<'a>(path: &Path, seqs: impl IntoIterator<Item = &'a TokenSequence>) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for s in seqs {
        writeln!(w, "{}", ssmd_core::train::join_ids(s.tokens()))?;
    }
    w.flush()?;
    Ok(())
}

/// A CSV writer whose first line is `# config_hash=<hash>`.
pub fn csv_writer(path: &Path, cfg: &Config) -> anyhow::Result<csv::Writer<BufWriter<File>>> {
    let mut f = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(f, "# config_hash={}", cfg.hash())?;
    Ok(csv::Writer::from_writer(f))
}

/// Creates the output directory and echoes the resolved config into it.
pub fn prepare_out_dir(cfg: &Config) -> anyhow::Result<()> {
    let dir = &cfg.paths.out_dir;
    if dir.exists() && !dir.is_dir() {
        bail!("paths.out_dir: {} is not a directory", dir.display());
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let text = format!("# config_hash={}\n{}", cfg.hash(), cfg.resolved_toml());
    std::fs::write(dir.join("config.resolved.toml"), text)?;
    Ok(())
}

/// Formats a float for CSV; non-finite values are written as `nan`,
/// `inf` and `-inf`.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        v.to_string()
    }
}
