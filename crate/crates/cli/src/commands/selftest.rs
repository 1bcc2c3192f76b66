//! A quick pass over the library's core invariants at small sizes.

use rand::Rng;
use ssmd_core::likelihood::{brute_force_likelihood, exact_bound, rejection_count_posterior, sequence_likelihood};
use ssmd_core::models::hybrid::gradient_check;
use ssmd_core::models::{DraftMode, DraftTargetModel, HybridConfig, HybridModel, TabularModel};
use ssmd_core::rng::RngStream;
use ssmd_core::sampler::{accept_step, spec_sample_full, NfeMeter, SamplerConfig};
use ssmd_core::schedule::WindowSpec;
use ssmd_core::train::{make_batch, Corpus, LexiconLanguage};
use ssmd_core::types::{make_reveal_state, sample_ordering, total_variation, Ordering, ProbRow, SequenceSpec, TokenSequence};

type Check = anyhow::Result<String>;
type NamedCheck = (&'static str, fn() -> Check);

fn tabular(seed: u64, s: usize, d: usize) -> anyhow::Result<TabularModel> {
    let spec = SequenceSpec::new(s, d)?;
    Ok(TabularModel::random(spec, &mut RngStream::new(seed), 2.0, DraftMode::Perturbed { epsilon: 0.4 })?)
}

fn accept_law() -> Check {
    let mut rng = RngStream::new(1);
    let draft = ProbRow::new(vec![0.5, 0.3, 0.1, 0.1])?;
    let target = ProbRow::new(vec![0.1, 0.2, 0.3, 0.4])?;
    let n = 200_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let x = draft.sample(&mut rng);
        counts[accept_step(&draft, &target, x, &mut rng)?.1 as usize] += 1;
    }
    let emp = ProbRow::new(counts.iter().map(|&c| c as f64 / n as f64).collect())?;
    let tv = total_variation(&emp, &target)?;
    anyhow::ensure!(tv < 0.01, "tv {tv}");
    Ok(format!("tv {tv:.4}"))
}

fn normalization() -> Check {
    let m = tabular(2, 2, 3)?;
    let ord = Ordering::new(vec![2, 0, 1])?;
    let mut total = 0.0;
    for k in 0..m.num_sequences() {
        let x = TokenSequence::new_complete(&m.spec(), m.sequence_at(k))?;
        total += sequence_likelihood(&m, &x, &ord)?.exp();
    }
    anyhow::ensure!((total - 1.0).abs() < 1e-9, "sum {total}");
    Ok(format!("sum {total:.12}"))
}

fn dp_vs_brute_force() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let m = tabular(seed, 3, 5)?;
        let mut rng = RngStream::new(seed + 10);
        let x = m.sample_joint(&mut rng);
        let ord = sample_ordering(&mut rng, 5);
        let a = sequence_likelihood(&m, &x, &ord)?;
        let b = brute_force_likelihood(&m, &x, &ord)?;
        worst = worst.max((a - b).abs());
    }
    anyhow::ensure!(worst < 1e-9, "max diff {worst:e}");
    Ok(format!("max diff {worst:.1e}"))
}

fn posterior() -> Check {
    let m = tabular(3, 2, 4)?;
    let x = m.sample_joint(&mut RngStream::new(4));
    let p = rejection_count_posterior(&m, &x, &Ordering::identity(4))?;
    let s: f64 = p.probs.iter().sum();
    anyhow::ensure!((s - 1.0).abs() < 1e-9, "sum {s}");
    Ok(format!("mean rejections {:.4}", p.mean()))
}

fn jensen() -> Check {
    let m = tabular(5, 2, 3)?;
    for k in 0..m.num_sequences() {
        let x = TokenSequence::new_complete(&m.spec(), m.sequence_at(k))?;
        let b = exact_bound(&m, &x)?;
        anyhow::ensure!(b.elbo <= b.log_marginal + 1e-12, "sequence {k}");
    }
    Ok("elbo <= log p(x)".into())
}

fn nfe() -> Check {
    let mut a = NfeMeter::new(11, 1);
    a.nc_passes = 1;
    a.c_passes = 1;
    let mut b = a;
    b.c_passes = 7;
    anyhow::ensure!(a.nfe() == 1.0 && b.nfe() == 1.5, "{} {}", a.nfe(), b.nfe());
    Ok("1.0 and 1.5".into())
}

fn windows() -> Check {
    let w = WindowSpec::cosine(0.083)?;
    let got = (w.window_size(0, 256)?, w.window_size(128, 256)?, WindowSpec::Linear.window_size(0, 10)?);
    anyhow::ensure!(got == (3, 30, 1), "{got:?}");
    Ok(format!("{got:?}"))
}

fn small_hybrid(seed: u64) -> anyhow::Result<(HybridModel, Corpus)> {
    let spec = SequenceSpec::new(5, 6)?;
    let lang = LexiconLanguage::from_words(spec, vec![vec![0, 1], vec![2, 3], vec![1, 2, 0]])?;
    let corpus = Corpus::generate(&lang, 50, &mut RngStream::new(seed));
    let cfg = HybridConfig {
        alphabet: 5,
        len: 6,
        hidden: 8,
        heads: 2,
        nc_blocks: 1,
        c_blocks: 1,
        mlp_ratio: 2,
    };
    Ok((HybridModel::new(cfg, &mut RngStream::new(seed))?, corpus))
}

fn zero_init_target() -> Check {
    let (m, corpus) = small_hybrid(6)?;
    let mut rng = RngStream::new(7);
    for ex in make_batch(&mut rng, &corpus, 8, Default::default())? {
        let spec = m.spec();
        let seq = TokenSequence::new(&spec, ex.tokens.clone())?;
        let state = make_reveal_state(&spec, &seq, &ex.ordering, ex.revealed)?;
        let h = spec.len() - ex.revealed;
        let (draft, cache) = m.draft_pass(&state, h)?;
        let drafted: Vec<u32> = (0..h).map(|_| rng.gen_range(0..spec.alphabet() as u32)).collect();
        let target = m.target_rows(&cache, &drafted, ex.revealed..spec.len())?;
        anyhow::ensure!(target == draft, "rows differ");
    }
    Ok("target == draft".into())
}

fn grad_check() -> Check {
    let (mut m, corpus) = small_hybrid(8)?;
    // A non-zero causal head so every block receives gradient.
    let mut rng = RngStream::new(9);
    for v in &mut m.params_mut().get_mut("c.head.w").expect("c.head.w exists").data {
        *v = rng.gen_range(-0.5..0.5);
    }
    let batch = make_batch(&mut rng, &corpus, 3, Default::default())?;
    let r = gradient_check(&m, &batch, 5, 1e-5, &mut rng)?;
    anyhow::ensure!(r.max_rel_err < 1e-4, "{} at {}", r.max_rel_err, r.worst);
    Ok(format!("{} coords, max rel err {:.1e}", r.checked, r.max_rel_err))
}

fn determinism() -> Check {
    let m = tabular(10, 3, 4)?;
    let cfg = SamplerConfig::new(WindowSpec::Linear, 2)?;
    anyhow::ensure!(spec_sample_full(&m, &cfg, 3, None)? == spec_sample_full(&m, &cfg, 3, None)?);
    Ok("identical".into())
}

pub fn selftest() -> anyhow::Result<()> {
    let checks: [NamedCheck; 10] = [
        ("accept/reject law", accept_law),
        ("likelihood normalization", normalization),
        ("likelihood vs brute force", dp_vs_brute_force),
        ("rejection posterior", posterior),
        ("ordering bound", jensen),
        ("nfe accounting", nfe),
        ("window sizes", windows),
        ("zero-init target rows", zero_init_target),
        ("gradient check", grad_check),
        ("sampler determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in checks {
        match f() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: {e:#}");
            }
        }
    }
    anyhow::ensure!(failed == 0, "{failed} selftest check(s) failed");
    Ok(())
}
