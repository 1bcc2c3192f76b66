//! Experiment configuration: a TOML document with dotted sections, command
//! line `key=value` overrides, and a stable hash of the resolved result.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssmd_core::models::HybridConfig;
use ssmd_core::sampler::{Family, SamplerConfig};
use ssmd_core::schedule::{NoiseSchedule, TimeGrid, WindowSpec};
use ssmd_core::train::{TrainConfig, BUNDLED_ALPHABET, BUNDLED_LEN};
use ssmd_core::types::SequenceSpec;

use crate::UsageError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub spec: SpecSection,
    pub schedule: ScheduleSection,
    pub window: WindowSection,
    pub sampler: SamplerSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub likelihood: LikelihoodSection,
    pub paths: PathsSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecSection {
    #[serde(rename = "S")]
    pub alphabet: usize,
    #[serde(rename = "D")]
    pub len: usize,
}

impl Default for SpecSection {
    fn default() -> Self {
        Self {
            alphabet: BUNDLED_ALPHABET,
            len: BUNDLED_LEN,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kind: NoiseSchedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSection {
    /// `cosine`, `linear` or `constant`.
    pub kind: String,
    pub dtau: f64,
    /// Cap for `constant`; 0 means the sequence length.
    pub cap: usize,
}

impl Default for WindowSection {
    fn default() -> Self {
        Self {
            kind: "cosine".into(),
            dtau: 0.1,
            cap: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    /// `mdm`, `spec` or `spec-basic`.
    pub family: String,
    pub inner_loops: usize,
    /// Masked-diffusion time steps; 0 means the sequence length.
    pub grid_steps: usize,
    pub n: usize,
    pub threads: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            family: "spec".into(),
            inner_loops: 1,
            grid_steps: 0,
            n: 100,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `hybrid` (trained, loaded from `paths.checkpoint`) or `tabular`
    /// (random joint generated from `seed` unless a checkpoint is given).
    pub kind: String,
    pub hidden: usize,
    pub heads: usize,
    pub nc_blocks: usize,
    pub c_blocks: usize,
    pub mlp_ratio: usize,
    pub sharpness: f64,
    pub epsilon: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let h = HybridConfig::default();
        Self {
            kind: "hybrid".into(),
            hidden: h.hidden,
            heads: h.heads,
            nc_blocks: h.nc_blocks,
            c_blocks: h.c_blocks,
            mlp_ratio: h.mlp_ratio,
            sharpness: 2.0,
            epsilon: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LikelihoodSection {
    pub num_orderings: usize,
    /// `random` (one uniform ordering per sequence) or `identity`.
    pub ordering: String,
}

impl Default for LikelihoodSection {
    fn default() -> Self {
        Self {
            num_orderings: 16,
            ordering: "random".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub corpus: Option<PathBuf>,
    /// `ids` (space-separated token ids) or `chars` (`a`–`z` and space).
    pub corpus_format: String,
    pub lexicon: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            corpus: None,
            corpus_format: "ids".into(),
            lexicon: None,
            checkpoint: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Sets `a.b.c = value` inside a nested table. Values parse as TOML
/// literals and fall back to strings.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), UsageError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| UsageError(format!("override '{assignment}' is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(UsageError(format!("malformed key '{key}'")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| UsageError(format!("'{p}' in '{key}' is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl Config {
    /// Reads `path` (or starts empty), applies overrides in order, then
    /// fills `train.seed` and `train.schedule` from `seed` and
    /// `schedule.kind` unless given explicitly.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, UsageError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| UsageError(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| UsageError(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let seed = table.get("seed").cloned();
        let sched = table.get("schedule").and_then(|s| s.get("kind")).cloned();
        if let Some(train) = table
            .entry("train")
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
        {
            if let Some(s) = seed {
                train.entry("seed").or_insert(s);
            }
            if let Some(k) = sched {
                train.entry("schedule").or_insert(k);
            }
        }
        let text = toml::to_string(&table).map_err(|e| UsageError(e.to_string()))?;
        let cfg: Config = toml::from_str(&text).map_err(|e| UsageError(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let bad = |k: &str, e: String| UsageError(format!("{k}: {e}"));
        self.sequence_spec()?;
        self.window_spec()?;
        self.family()?;
        self.train.validate().map_err(|e| bad("train", e.to_string()))?;
        match self.model.kind.as_str() {
            "hybrid" => {
                self.hybrid_config()?;
            }
            "tabular" => {}
            k => return Err(bad("model.kind", format!("unknown model kind '{k}'"))),
        }
        if !matches!(self.likelihood.ordering.as_str(), "random" | "identity") {
            return Err(bad("likelihood.ordering", format!("unknown ordering '{}'", self.likelihood.ordering)));
        }
        if self.likelihood.num_orderings == 0 {
            return Err(bad("likelihood.num_orderings", "must be >= 1".into()));
        }
        if !matches!(self.paths.corpus_format.as_str(), "ids" | "chars") {
            return Err(bad("paths.corpus_format", format!("unknown format '{}'", self.paths.corpus_format)));
        }
        for (key, p) in [("paths.corpus", &self.paths.corpus), ("paths.lexicon", &self.paths.lexicon)] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(bad(key, format!("{} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn sequence_spec(&self) -> Result<SequenceSpec, UsageError> {
        SequenceSpec::new(self.spec.alphabet, self.spec.len).map_err(|e| UsageError(format!("spec: {e}")))
    }

    pub fn window_spec(&self) -> Result<WindowSpec, UsageError> {
        let w = &self.window;
        let r = match w.kind.as_str() {
            "cosine" => WindowSpec::cosine(w.dtau),
            "linear" => Ok(WindowSpec::Linear),
            "constant" => WindowSpec::constant(if w.cap == 0 { self.spec.len } else { w.cap }),
            k => return Err(UsageError(format!("window.kind: unknown window '{k}'"))),
        };
        r.map_err(|e| UsageError(format!("window: {e}")))
    }

    pub fn family(&self) -> Result<Family, UsageError> {
        let s = &self.sampler;
        match s.family.as_str() {
            "mdm" => {
                let steps = if s.grid_steps == 0 { self.spec.len } else { s.grid_steps };
                Ok(Family::Mdm {
                    schedule: self.schedule.kind,
                    grid: TimeGrid::new(steps).map_err(|e| UsageError(format!("sampler.grid_steps: {e}")))?,
                })
            }
            "spec-basic" => Ok(Family::SpecBasic),
            "spec" => Ok(Family::Spec(
                SamplerConfig::new(self.window_spec()?, s.inner_loops)
                    .map_err(|e| UsageError(format!("sampler.inner_loops: {e}")))?,
            )),
            f => Err(UsageError(format!("sampler.family: unknown family '{f}'"))),
        }
    }

    pub fn hybrid_config(&self) -> Result<HybridConfig, UsageError> {
        let m = &self.model;
        let c = HybridConfig {
            alphabet: self.spec.alphabet,
            len: self.spec.len,
            hidden: m.hidden,
            heads: m.heads,
            nc_blocks: m.nc_blocks,
            c_blocks: m.c_blocks,
            mlp_ratio: m.mlp_ratio,
        };
        c.validate().map_err(|e| UsageError(format!("model: {e}")))?;
        Ok(c)
    }

    pub fn resolved_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// FNV-1a of the resolved TOML text, as 16 hex digits. The output
    /// directory is not part of the experiment and is left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.out_dir = PathBuf::new();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in c.resolved_toml().bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.out_dir.join("model.ssmd"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = Config::load(None, &[]).unwrap();
        assert_eq!(c, Config::default());
        let back: Config = toml::from_str(&c.resolved_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_and_derived_keys() {
        let c = Config::load(
            None,
            &["seed=7".into(), "spec.D=8".into(), "window.kind=linear".into(), "schedule.kind=linear".into()],
        )
        .unwrap();
        assert_eq!((c.seed, c.train.seed, c.spec.len), (7, 7, 8));
        assert_eq!(c.train.schedule, NoiseSchedule::Linear);
        assert_eq!(c.window_spec().unwrap(), WindowSpec::Linear);
        let c = Config::load(None, &["seed=7".into(), "train.seed=3".into()]).unwrap();
        assert_eq!(c.train.seed, 3);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(Config::load(None, &["spec.Q=3".into()]).is_err());
        assert!(Config::load(None, &["nonsense".into()]).is_err());
        assert!(Config::load(None, &["window.kind=wavy".into()]).is_err());
        let e = Config::load(None, &["paths.corpus=/no/such/file".into()]).unwrap_err();
        assert!(e.0.contains("paths.corpus"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::load(None, &[]).unwrap();
        let b = Config::load(None, &["seed=1".into()]).unwrap();
        assert_eq!(a.hash(), Config::default().hash());
        assert_ne!(a.hash(), b.hash());
        let c = Config::load(None, &["paths.out_dir=elsewhere".into()]).unwrap();
        assert_eq!(a.hash(), c.hash());
    }
}
