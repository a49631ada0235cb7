use std::fs;
use std::path::Path;
use std::process::Command;

use cotlab::training::Variant;
use cotlab_cli::pipeline::{pretrain_dir, run_dir, suite_file, Suite, TrainSummary};
use cotlab_cli::{CliError, ExperimentConfig, Lab};

fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        seeds: vec![3],
        ..ExperimentConfig::default()
    };
    c.corpus.sizes.s2tt = 120;
    c.corpus.sizes.asr = 120;
    c.corpus.sizes.t2tt = 40;
    c.corpus.sizes.test = 6;
    c.model.n_layers = 1;
    c.model.d_model = 16;
    c.model.d_ff = 32;
    c.pretrain.steps = 8;
    c.pretrain.batch_size = 4;
    c.adaptation.steps = 4;
    for r in c.recipes.values_mut() {
        r.optimizer.steps = 12;
        r.optimizer.batch_size = 4;
    }
    c.evaluation.contrastive_pairs = 4;
    c.evaluation.attribution_items = 2;
    c
}

fn lab(dir: &Path) -> Lab {
    Lab::new(tiny_config(), Some(dir.to_path_buf())).unwrap()
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    fs::read(dir.join(rel)).unwrap()
}

fn line_count(dir: &Path, rel: &str) -> usize {
    // one header line, then one record per line
    String::from_utf8(read(dir, rel)).unwrap().lines().count() - 1
}

#[test]
fn gen_is_deterministic_and_registered() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    lab(a.path()).gen().unwrap();
    lab(b.path()).gen().unwrap();
    let (ma, mb) = (lab(a.path()).store.manifest().unwrap(), lab(b.path()).store.manifest().unwrap());
    assert_eq!(ma, mb);
    for f in ["config.toml", "data/lexicon.json", "data/train.jsonl", "data/test.jsonl", "data/contrastive.jsonl"] {
        assert!(ma.files.contains_key(f), "{f} not in manifest");
    }
    let c = tiny_config();
    let s = &c.corpus.sizes;
    assert_eq!(line_count(a.path(), "data/train.jsonl"), s.s2tt + s.asr + s.t2tt);
    assert_eq!(line_count(a.path(), "data/test.jsonl"), s.test);
    assert_eq!(line_count(a.path(), "data/contrastive.jsonl"), c.evaluation.contrastive_pairs);
}

#[test]
fn variants_train_to_distinct_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let l = lab(dir.path());
    l.gen().unwrap();
    l.train(None, None).unwrap();
    let mut digests = Vec::new();
    for v in Variant::ALL {
        let summary: TrainSummary = l.store.read_json(&format!("{}/train.json", run_dir(3, v)), "train_summary").unwrap();
        assert_eq!(summary.steps, l.config.recipe(v, 3).optimizer.steps);
        assert_eq!(line_count(dir.path(), &format!("{}/metrics.jsonl", run_dir(3, v))), summary.steps);
        assert_eq!(summary.adaptation_losses.len(), l.config.adaptation.steps);
        digests.push(summary.checkpoint_sha256);
    }
    digests.sort();
    digests.dedup();
    assert_eq!(digests.len(), 3);
    assert!(dir.path().join(pretrain_dir(3)).join("train.json").exists());

    // a second call finds everything trained and changes nothing
    let before = l.store.manifest().unwrap();
    l.train(None, None).unwrap();
    assert_eq!(l.store.manifest().unwrap(), before);
}

#[test]
fn interrupted_training_resumes_to_the_same_checkpoint() {
    let (whole, split) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = lab(whole.path());
    a.gen().unwrap();
    a.train(Some(Variant::Noisy), None).unwrap();

    let b = lab(split.path());
    b.gen().unwrap();
    let dir = run_dir(3, Variant::Noisy);
    // first call stops inside pretraining, the second inside the variant run
    b.train_limited(Some(Variant::Noisy), None, Some(5)).unwrap();
    assert!(!split.path().join(&dir).exists());
    b.train_limited(Some(Variant::Noisy), None, Some(5)).unwrap();
    assert!(split.path().join(&dir).join("checkpoint.bin").exists());
    assert!(!split.path().join(&dir).join("train.json").exists());
    b.train_limited(Some(Variant::Noisy), None, Some(5)).unwrap();
    b.train_limited(Some(Variant::Noisy), None, None).unwrap();

    for f in ["checkpoint.bin", "metrics.jsonl", "train.json", "adaptation.json"] {
        let rel = format!("{dir}/{f}");
        assert_eq!(read(whole.path(), &rel), read(split.path(), &rel), "{rel} differs");
    }
}

#[test]
fn report_is_byte_stable_and_names_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let l = lab(dir.path());
    l.gen().unwrap();
    l.train(None, None).unwrap();
    l.eval(None, None, None).unwrap();
    fs::rename(
        dir.path().join(suite_file(3, Variant::Dual, Suite::Prosody)),
        dir.path().join("prosody.bak"),
    )
    .unwrap();
    match l.report() {
        Err(CliError::Missing(files)) => assert_eq!(files, vec![suite_file(3, Variant::Dual, Suite::Prosody)]),
        other => panic!("expected missing inputs, got {other:?}"),
    }
    fs::rename(
        dir.path().join("prosody.bak"),
        dir.path().join(suite_file(3, Variant::Dual, Suite::Prosody)),
    )
    .unwrap();

    l.report().unwrap();
    let first: Vec<(String, Vec<u8>)> = fs::read_dir(dir.path().join("report"))
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    assert!(first.iter().any(|(n, _)| n == "report.json"));
    l.report().unwrap();
    for (name, bytes) in &first {
        assert_eq!(&read(dir.path(), &format!("report/{name}")), bytes, "{name} changed");
    }
}

#[test]
fn eval_without_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let l = lab(dir.path());
    l.gen().unwrap();
    match l.eval(Some(Variant::Base), Some(Suite::Quality), None) {
        Err(CliError::Missing(files)) => assert_eq!(files, vec![format!("{}/checkpoint.bin", run_dir(3, Variant::Base))]),
        other => panic!("expected missing checkpoint, got {other:?}"),
    }
}

#[test]
fn binary_reports_errors_and_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cotlab"))
        .args(["--out", dir.path().to_str().unwrap(), "train"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.lines().any(|l| l.starts_with("error:") && l.contains("data/lexicon.json")), "{stderr}");
}
