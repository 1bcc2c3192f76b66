use anyhow::Context as _;
use ssmd_core::models::checkpoint::{load_hybrid, load_tabular, read_container, ModelKind};
use ssmd_core::models::{DraftMode, DraftTargetModel, HybridModel, TabularModel};
use ssmd_core::rng::RngStream;
use ssmd_core::train::{Corpus, LexiconLanguage, BUNDLED_ALPHABET, BUNDLED_LEN};

use crate::config::Config;
use crate::UsageError;

/// Stream of the root seed reserved for generating tabular models.
const TABULAR_STREAM: u64 = 0x7461_6275;

pub enum LoadedModel {
    Hybrid(HybridModel),
    Tabular(TabularModel),
}

/// Runs `$body` with `$m` bound to the concrete model.
macro_rules! with_model {
    ($loaded:expr, $m:ident => $body:expr) => {
        match $loaded {
            $crate::model::LoadedModel::Hybrid($m) => $body,
            $crate::model::LoadedModel::Tabular($m) => $body,
        }
    };
}
pub(crate) use with_model;

impl LoadedModel {
    pub fn tabular(&self) -> Option<&TabularModel> {
        match self {
            Self::Tabular(t) => Some(t),
            Self::Hybrid(_) => None,
        }
    }
}

/// The model named by the config: `paths.checkpoint` if set, a generated
/// tabular model for `model.kind = "tabular"`, otherwise the checkpoint
/// that `train` writes into `paths.out_dir`.
pub fn load_model(cfg: &Config) -> anyhow::Result<LoadedModel> {
    let spec = cfg.sequence_spec()?;
    let path = match (&cfg.paths.checkpoint, cfg.model.kind.as_str()) {
        (Some(p), _) => p.clone(),
        (None, "tabular") => {
            let mut rng = RngStream::new(cfg.seed).substream(TABULAR_STREAM);
            let mode = DraftMode::Perturbed {
                epsilon: cfg.model.epsilon,
            };
            let m = TabularModel::random(spec, &mut rng, cfg.model.sharpness, mode).context("generating tabular model")?;
            return Ok(LoadedModel::Tabular(m));
        }
        (None, _) => cfg.checkpoint_path(),
    };
    if !path.is_file() {
        return Err(UsageError(format!("paths.checkpoint: {} does not exist", path.display())).into());
    }
    let kind = read_container(&path)
        .with_context(|| format!("reading {}", path.display()))?
        .kind;
    let model = match kind {
        ModelKind::Hybrid => LoadedModel::Hybrid(load_hybrid(&path)?.0),
        ModelKind::Tabular => LoadedModel::Tabular(load_tabular(&path)?),
    };
    let got = with_model!(&model, m => m.spec());
    if got != spec {
        return Err(UsageError(format!(
            "spec: checkpoint has S={} D={}, config has S={} D={}",
            got.alphabet(),
            got.len(),
            spec.alphabet(),
            spec.len()
        ))
        .into());
    }
    Ok(model)
}

fn is_bundled(cfg: &Config) -> bool {
    cfg.spec.alphabet == BUNDLED_ALPHABET && cfg.spec.len == BUNDLED_LEN
}

pub fn load_corpus(cfg: &Config) -> anyhow::Result<Corpus> {
    let spec = cfg.sequence_spec()?;
    match &cfg.paths.corpus {
        Some(p) => Ok(Corpus::load(p, spec, cfg.paths.corpus_format == "chars")
            .with_context(|| format!("loading corpus {}", p.display()))?),
        None if is_bundled(cfg) => Ok(Corpus::bundled()),
        None => Err(UsageError("paths.corpus: required when spec differs from the bundled corpus".into()).into()),
    }
}

/// The lexicon language from `paths.lexicon`, or the bundled one when the
/// spec matches it.
pub fn load_language(cfg: &Config) -> anyhow::Result<Option<LexiconLanguage>> {
    let spec = cfg.sequence_spec()?;
    match &cfg.paths.lexicon {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(Some(LexiconLanguage::parse(spec, &text).with_context(|| format!("parsing {}", p.display()))?))
        }
        None if is_bundled(cfg) => Ok(Some(LexiconLanguage::bundled())),
        None => Ok(None),
    }
}
