use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ssmd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssmd"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// CSV rows without the hash comment and header.
fn rows(path: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    r.records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect()
}

const TINY_TABULAR: [&str; 6] = ["--set", "model.kind=tabular", "--set", "spec.S=2", "--set", "spec.D=3"];

/// `extra[0]` is the subcommand; the tabular overrides follow it.
fn tabular_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![extra[0]];
    v.extend_from_slice(&TINY_TABULAR);
    v.extend_from_slice(&extra[1..]);
    v
}

const SMALL_MODEL: [&str; 10] = [
    "--set",
    "model.hidden=8",
    "--set",
    "model.heads=2",
    "--set",
    "train.batch_size=4",
    "--set",
    "train.eval_every=1",
    "--set",
    "train.warmup_steps=2",
];

#[test]
fn missing_corpus_names_the_key() {
    let d = tempfile::tempdir().unwrap();
    let out = ssmd(d.path(), &["train", "--set", "paths.corpus=/no/such/corpus.txt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("paths.corpus"));
}

#[test]
fn unknown_keys_and_flags_are_usage_errors() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(ssmd(d.path(), &["sample", "--set", "sampler.bogus=1"]).status.code(), Some(1));
    assert_eq!(ssmd(d.path(), &["sample", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(ssmd(d.path(), &["sample", "--window", "wavy:3"]).status.code(), Some(1));
}

#[test]
fn train_smoke_and_bit_identical_resume() {
    let d = tempfile::tempdir().unwrap();
    let full = d.path().join("full");
    let split = d.path().join("split");
    let mut args = vec!["train", "--set", "train.steps=10"];
    args.extend_from_slice(&SMALL_MODEL);
    let start = std::time::Instant::now();
    ok(&ssmd(&full, &args));
    assert!(start.elapsed().as_secs() < 60);
    assert!(full.join("model.ssmd").is_file());
    assert!(full.join("config.resolved.toml").is_file());
    let all = rows(&full.join("loss.csv"));
    assert_eq!(all.len(), 10);

    let mut first = args.clone();
    first.extend_from_slice(&["--until", "4"]);
    ok(&ssmd(&split, &first));
    let ckpt = split.join("model.ssmd");
    let mut second = args.clone();
    second.extend_from_slice(&["--resume", ckpt.to_str().unwrap()]);
    ok(&ssmd(&split, &second));
    let resumed = rows(&split.join("loss.csv"));
    assert_eq!(resumed, all[4..].to_vec());
}

#[test]
fn sample_outputs_and_degenerate_window() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("a");
    let b = d.path().join("b");
    ok(&ssmd(&a, &tabular_args(&["sample", "--family", "spec", "--window", "constant:D", "--inner-loops", "1", "--n", "25"])));
    ok(&ssmd(&b, &tabular_args(&["sample", "--family", "spec-basic", "--n", "25"])));
    let sa = std::fs::read_to_string(a.join("samples.txt")).unwrap();
    assert_eq!(sa.lines().count(), 25);
    assert_eq!(sa, std::fs::read_to_string(b.join("samples.txt")).unwrap());
    let m = rows(&a.join("sample_metrics.csv"));
    assert_eq!(m.len(), 25);
    assert!(m.iter().all(|r| r.len() == 5 && r[4] == "3"));
    let header = std::fs::read_to_string(a.join("sample_metrics.csv")).unwrap();
    assert!(header.starts_with("# config_hash="));
    assert!(header.lines().nth(1).unwrap() == "seed,ordering_hash,nfe,rejections,length");
}

#[test]
fn zero_samples_is_empty_success() {
    let d = tempfile::tempdir().unwrap();
    ok(&ssmd(d.path(), &tabular_args(&["sample", "--family", "mdm", "--n", "0"])));
    assert_eq!(std::fs::read_to_string(d.path().join("samples.txt")).unwrap(), "");
    assert!(rows(&d.path().join("sample_metrics.csv")).is_empty());
}

fn all_sequences(dir: &Path) -> PathBuf {
    let p = dir.join("all.txt");
    let text: String = (0..8).map(|k| format!("{} {} {}\n", k >> 2 & 1, k >> 1 & 1, k & 1)).collect();
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn likelihood_sums_to_one_over_all_sequences() {
    let d = tempfile::tempdir().unwrap();
    let seqs = all_sequences(d.path());
    for (sub, extra) in [("plain", None), ("exact", Some("--exact-orderings"))] {
        let out = d.path().join(sub);
        let mut args = tabular_args(&["likelihood", "--sequences", seqs.to_str().unwrap(), "--set", "likelihood.ordering=identity"]);
        if let Some(e) = extra {
            args.push(e);
        }
        ok(&ssmd(&out, &args));
        let r = rows(&out.join("likelihood.csv"));
        assert_eq!(r.len(), 8);
        let total: f64 = r.iter().map(|row| row[2].parse::<f64>().unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-9, "{sub}: {total}");
        if extra.is_some() {
            for row in &r {
                let (lp, elbo): (f64, f64) = (row[2].parse().unwrap(), row[3].parse().unwrap());
                assert!(elbo <= lp + 1e-12);
            }
        }
    }
}

#[test]
fn likelihood_rejects_out_of_range_tokens() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("bad.txt");
    std::fs::write(&p, "0 1 0\n0 2 1\n").unwrap();
    let out = ssmd(d.path(), &tabular_args(&["likelihood", "--sequences", p.to_str().unwrap()]));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

fn write_sweep(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("sweep.toml");
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn sweep_rows_and_determinism() {
    let d = tempfile::tempdir().unwrap();
    let spec = write_sweep(
        d.path(),
        "n_samples = 40\nmdm_grid_steps = [1, 2, 4]\nwindows = [\"cosine:0.1\", \"cosine:0.2\", \"cosine:0.4\"]\n",
    );
    let args = ["sweep", "--sweep", spec.to_str().unwrap(), "--set", "model.kind=tabular", "--set", "spec.S=3", "--set", "spec.D=4"];
    let a = d.path().join("a");
    let b = d.path().join("b");
    ok(&ssmd(&a, &args));
    ok(&ssmd(&b, &args));
    let r = rows(&a.join("tradeoff.csv"));
    assert_eq!(r.iter().filter(|row| row[0] == "mdm").count(), 3);
    assert_eq!(r.iter().filter(|row| row[0] == "spec").count(), 3);
    for f in ["tradeoff.csv", "curves.csv", "matched.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn malformed_sweep_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    for body in ["windows = [\"wavy\"]\n", "n_samples = \"many\"\n", "colour = 3\n", ""] {
        let spec = write_sweep(d.path(), body);
        let out = ssmd(d.path(), &tabular_args(&["sweep", "--sweep", spec.to_str().unwrap()]));
        assert_eq!(out.status.code(), Some(1), "{body:?}: {}", stderr(&out));
    }
}

#[test]
fn selftest_passes() {
    let d = tempfile::tempdir().unwrap();
    let out = ssmd(d.path(), &["selftest"]);
    ok(&out);
    let s = String::from_utf8_lossy(&out.stdout);
    assert!(s.lines().all(|l| l.starts_with("PASS")), "{s}");
}

#[test]
fn corpus_reproduces_bundled_data() {
    let d = tempfile::tempdir().unwrap();
    ok(&ssmd(d.path(), &["corpus", "--seed", "20240"]));
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data");
    for f in ["lexicon.txt", "corpus.txt"] {
        assert_eq!(
            std::fs::read_to_string(d.path().join(f)).unwrap(),
            std::fs::read_to_string(data.join(f)).unwrap(),
            "{f}"
        );
    }
}
