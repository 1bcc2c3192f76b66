use ssmd_core::rng::RngStream;
use ssmd_core::train::{Corpus, LexiconLanguage};

use crate::config::Config;
use crate::io::prepare_out_dir;
use crate::CorpusArgs;

/// Lexicon from substream 0 of `seed`, corpus from substream 1. The bundled
/// data is `seed = 20240` with the default sizes.
pub fn corpus(cfg: &Config, args: &CorpusArgs) -> anyhow::Result<()> {
    let spec = cfg.sequence_spec()?;
    let root = RngStream::new(cfg.seed);
    let lang = LexiconLanguage::generate(spec, args.lexicon_size, &mut root.substream(0))?;
    let corpus = Corpus::generate(&lang, args.sequences, &mut root.substream(1));
    prepare_out_dir(cfg)?;
    let dir = &cfg.paths.out_dir;
    std::fs::write(dir.join("lexicon.txt"), lang.to_text())?;
    std::fs::write(dir.join("corpus.txt"), corpus.to_text())?;
    println!("words={} sequences={}", lang.words().len(), corpus.len());
    Ok(())
}
