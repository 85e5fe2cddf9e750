use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};

use qfvae::checkpoint::{Checkpoint, Stage};
use qfvae::corpus::read_corpus;
use qfvae::records::{SampleSet, SetKind};

const SMALL: &str = r#"
seed = 5
corpus.train_count = 8
corpus.test_count = 3
corpus.min_tokens = 4
corpus.max_tokens = 6
train.steps = 24
train.vq_warmup_steps = 8
train.log_every = 4
train.batch_size = 4
prior.steps = 12
prior.log_every = 4
sampling.samples = 3
sampling.utterances = 2
"#;

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    static NEXT: AtomicUsize = AtomicUsize::new(0);
    let p = dir.join(format!("config{}.toml", NEXT.fetch_add(1, Ordering::Relaxed)));
    fs::write(&p, format!("{SMALL}\n{extra}")).unwrap();
    p
}

fn qfvae(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qfvae"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: Output) -> String {
    assert!(
        o.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn gen_corpus_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let summary = ok(qfvae(&cfg, &a, &["gen-corpus"]));
    assert!(summary.contains("8 train, 3 test"), "{summary}");
    ok(qfvae(&cfg, &b, &["gen-corpus"]));
    for f in ["train.qfvc", "test.qfvc"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    assert_eq!(read_corpus(&a.join("train.qfvc")).unwrap().len(), 8);
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let bad_f0 = write_config(dir.path(), "corpus.f0_min = 300.0\ncorpus.f0_max = 120.0");
    assert_eq!(code(&qfvae(&bad_f0, &out, &["gen-corpus"])), 2);
    let unknown = write_config(dir.path(), "model.codebok_size = 8");
    let o = qfvae(&unknown, &out, &["gen-corpus"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("codebok_size"));
    let o = Command::new(env!("CARGO_BIN_EXE_qfvae"))
        .arg("no-such-command")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_inputs_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("empty");
    assert_eq!(code(&qfvae(&cfg, &out, &["train"])), 1);
    assert_eq!(code(&qfvae(&cfg, &out, &["evaluate"])), 1);
}

#[test]
fn baseline_pipeline_and_prior_checks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("out");
    ok(qfvae(&cfg, &out, &["gen-corpus"]));
    ok(qfvae(&cfg, &out, &["train"]));
    let ck = Checkpoint::load(&out.join("stage1.qfvk")).unwrap();
    assert_eq!(ck.stage, Stage::Stage1);
    assert!(ck.block("vq.codebook").is_none());

    let disc = write_config(dir.path(), "sampling.prior = \"ar-discrete\"");
    let o = qfvae(&disc, &out, &["fit-prior"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));

    // Scale 0 makes every sample of an utterance identical.
    let zero = write_config(dir.path(), "sampling.scale = 0.0");
    ok(qfvae(&zero, &out, &["sample"]));
    let set = SampleSet::load(&out.join("samples.qfvs")).unwrap();
    assert_eq!(set.records.len(), 6);
    for pair in set.records.windows(2) {
        if pair[0].utterance == pair[1].utterance {
            assert_eq!(pair[0].frames, pair[1].frames);
        }
    }

    ok(qfvae(&cfg, &out, &["copy-synth"]));
    let copy = SampleSet::load(&out.join("copy_synth.qfvs")).unwrap();
    assert_eq!(copy.kind, SetKind::CopySynthesis);
    assert_eq!(copy.records.len(), 3);
    let again = dir.path().join("copy_again.qfvs");
    fs::copy(out.join("copy_synth.qfvs"), &again).unwrap();
    ok(qfvae(&cfg, &out, &["copy-synth"]));
    assert_eq!(
        fs::read(&again).unwrap(),
        fs::read(out.join("copy_synth.qfvs")).unwrap()
    );

    let summary = ok(qfvae(&cfg, &out, &["evaluate"]));
    assert!(summary.contains("ffe="), "{summary}");
    let metrics = fs::read_to_string(out.join("copy_synth_metrics.txt")).unwrap();
    assert!(metrics.starts_with("#qfvae-metrics version=1"));
    assert_eq!(metrics.lines().filter(|l| l.starts_with("utt=")).count(), 3);
    assert!(metrics.lines().last().unwrap().starts_with("mean "));
    let report = ok(qfvae(&cfg, &out, &["report"]));
    assert!(
        report.contains("baseline") && report.contains("Sampling diversity"),
        "{report}"
    );
}

#[test]
fn empty_sample_set_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("out");
    ok(qfvae(&cfg, &out, &["gen-corpus"]));
    let empty = SampleSet {
        kind: SetKind::Samples,
        model: "baseline".into(),
        codebook_size: 0,
        prior: "independent".into(),
        scale: 1.0,
        temperature: 1.0,
        config_digest: "0".into(),
        records: vec![],
    };
    let path = dir.path().join("empty.qfvs");
    empty.save(&path).unwrap();
    let o = qfvae(&cfg, &out, &["evaluate", "--input", path.to_str().unwrap()]);
    assert_ne!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no records"));
}

#[test]
fn mixed_metric_versions_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    fs::write(
        &a,
        "#qfvae-metrics version=1 kind=reconstruction model=x codebook_size=0\nmean ffe=0.1 mcd=1.0\n",
    )
    .unwrap();
    fs::write(
        &b,
        "#qfvae-metrics version=2 kind=reconstruction model=y codebook_size=0\nmean ffe=0.1 mcd=1.0\n",
    )
    .unwrap();
    let o = qfvae(
        &cfg,
        dir.path(),
        &["report", "--input", a.to_str().unwrap(), "--input", b.to_str().unwrap()],
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("version"));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let full_cfg = write_config(dir.path(), "model.codebook_size = 8");
    let full = dir.path().join("full");
    ok(qfvae(&full_cfg, &full, &["gen-corpus"]));
    ok(qfvae(&full_cfg, &full, &["train"]));

    let part = dir.path().join("part");
    fs::create_dir_all(&part).unwrap();
    for f in ["train.qfvc", "test.qfvc"] {
        fs::copy(full.join(f), part.join(f)).unwrap();
    }
    // Stop before the codebook warmup ends, then resume past it.
    let short = dir.path().join("short.toml");
    fs::write(
        &short,
        format!(
            "{}\nmodel.codebook_size = 8",
            SMALL.replace("train.steps = 24", "train.steps = 6")
        ),
    )
    .unwrap();
    ok(qfvae(&short, &part, &["train"]));
    let resumed = ok(qfvae(&full_cfg, &part, &["train", "--resume"]));
    assert!(resumed.contains("from step 6 to 24"), "{resumed}");

    let a = Checkpoint::load(&full.join("stage1.qfvk")).unwrap();
    let b = Checkpoint::load(&part.join("stage1.qfvk")).unwrap();
    assert_eq!(a.blocks_digest(), b.blocks_digest());
    assert!(a.block("vq.codebook").is_some());
    let log = fs::read_to_string(full.join("train_log.txt")).unwrap();
    assert!(log.lines().any(|l| l.contains("perplexity=")), "{log}");
}

#[test]
fn quantized_model_with_discrete_prior() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "model.codebook_size = 8\nsampling.prior = \"ar-discrete\"");
    let out = dir.path().join("out");
    ok(qfvae(&cfg, &out, &["gen-corpus"]));
    ok(qfvae(&cfg, &out, &["train"]));
    let before = Checkpoint::load(&out.join("stage1.qfvk")).unwrap().blocks_digest();
    ok(qfvae(&cfg, &out, &["fit-prior"]));
    assert_eq!(
        Checkpoint::load(&out.join("stage1.qfvk")).unwrap().blocks_digest(),
        before
    );
    let prior = Checkpoint::load(&out.join("prior.qfvk")).unwrap();
    assert_eq!(prior.stage, Stage::PriorDiscrete);
    assert!(fs::read_to_string(out.join("prior_log.txt"))
        .unwrap()
        .contains("cross_entropy="));
    ok(qfvae(&cfg, &out, &["sample"]));
    let set = SampleSet::load(&out.join("samples.qfvs")).unwrap();
    assert!(set
        .records
        .iter()
        .all(|r| r.indices.as_ref().is_some_and(|ix| ix.iter().all(|k| *k < 8))));

    // A continuous prior checkpoint does not satisfy a discrete sampling config.
    let cont = write_config(
        dir.path(),
        "model.codebook_size = 8\nsampling.prior = \"ar-continuous\"",
    );
    ok(qfvae(&cont, &out, &["fit-prior"]));
    assert_eq!(
        Checkpoint::load(&out.join("prior.qfvk")).unwrap().stage,
        Stage::PriorContinuous
    );
    assert_eq!(code(&qfvae(&cfg, &out, &["sample"])), 2);
}
