use std::path::Path;
use std::process::{Command, Output};

use avo::cli::{RunManifest, RUN_MANIFEST_FILE};
use avo::datamodel::{read_units, Corpus};
use avo::training::{Checkpoint, MetricsRecord, METRICS_FILE};

fn avo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avo"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("AVO_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) {
    let out = avo(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn small_corpus(cwd: &Path, name: &str) {
    ok(
        &[
            "datagen",
            "--out",
            name,
            "--num-utts",
            "10",
            "--test-fraction",
            "0.2",
            "--seed",
            "5",
        ],
        cwd,
    );
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = avo(&["--help"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["datagen", "tokenize", "train", "infer", "eval", "gradcheck"] {
        assert!(text.contains(cmd), "help is missing {cmd}");
    }
}

#[test]
fn usage_and_validation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = avo(&["train", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--corpus"));

    assert_eq!(avo(&["frobnicate"], dir.path()).status.code(), Some(1));

    std::fs::write(
        dir.path().join("spec.json"),
        r#"{"num_utts": 4, "typo": 1}"#,
    )
    .unwrap();
    let out = avo(
        &["datagen", "--spec", "spec.json", "--out", "c"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));

    let out = avo(&["datagen", "--out", "c", "--noise", "-1"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = avo(
        &["train", "--corpus", "missing", "--out", "ckpt"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
}

#[test]
fn datagen_honours_spec_files_flags_and_env_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("spec.json"), r#"{"num_utts": 5, "vocab_size": 8}"#).unwrap();
    ok(
        &[
            "datagen",
            "--spec",
            "spec.json",
            "--num-utts",
            "3",
            "--out",
            "a",
        ],
        d,
    );
    let a = Corpus::load(d.join("a")).unwrap();
    assert_eq!((a.len(), a.metadata.vocab_size), (3, 8));

    let env_run = Command::new(env!("CARGO_BIN_EXE_avo"))
        .args(["datagen", "--num-utts", "2", "--out", "b"])
        .current_dir(d)
        .env("AVO_SEED", "77")
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(env_run.success());
    assert_eq!(Corpus::load(d.join("b")).unwrap().metadata.seed, 77);

    let manifest = RunManifest::load(d.join("b").join(RUN_MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.command, "datagen");
    assert_eq!(manifest.seeds["corpus"], 77);
    // The resolved snapshot re-parses to the config that was used.
    let spec: avo::synthdata::SynthSpec = serde_json::from_value(manifest.config).unwrap();
    assert_eq!(spec.seed, 77);
    assert_eq!(spec.num_utts, 2);
}

#[test]
fn training_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_corpus(d, "corpus");
    std::fs::write(
        d.join("model.json"),
        r#"{"d_model": 16, "text_blocks": 1, "video_blocks": 1}"#,
    )
    .unwrap();
    std::fs::write(d.join("train.json"), r#"{"batch_size": 4, "log_every": 2}"#).unwrap();
    let common = [
        "--corpus",
        "corpus",
        "--model-config",
        "model.json",
        "--train-config",
        "train.json",
    ];
    let run = |out: &str, steps: &str, extra: &[&str]| {
        let mut args = vec!["train"];
        args.extend(common);
        args.extend(["--out", out, "--max-steps", steps]);
        args.extend(extra);
        ok(&args, d);
    };
    run("full", "6", &[]);
    run("again", "6", &[]);
    run("split", "2", &[]);
    run("split", "6", &["--resume"]);

    let full = Checkpoint::load(d.join("full")).unwrap();
    let again = Checkpoint::load(d.join("again")).unwrap();
    let split = Checkpoint::load(d.join("split")).unwrap();
    assert_eq!(full.params, again.params);
    assert_eq!(full.params, split.params);
    assert_eq!(full.manifest.step, 6);
    assert_eq!(
        full.params.config().vocab_size,
        40,
        "sizes come from the corpus"
    );

    let metrics = |name: &str| -> Vec<MetricsRecord> {
        std::fs::read_to_string(d.join(name).join(METRICS_FILE))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    assert_eq!(metrics("full").len(), 3);
    assert_eq!(metrics("full"), metrics("split"));

    let manifest = RunManifest::load(d.join("full").join(RUN_MANIFEST_FILE)).unwrap();
    let resolved: avo::cli::ResolvedTrainConfig = serde_json::from_value(manifest.config).unwrap();
    assert_eq!(&resolved.model, full.params.config());
    assert_eq!(resolved.train.batch_size, 4);
}

#[test]
fn tokenize_encode_and_infer_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_corpus(d, "corpus");
    ok(
        &[
            "tokenize",
            "--fit",
            "--features",
            "corpus/utt00000.feat",
            "--k",
            "4",
            "--out",
            "cb",
        ],
        d,
    );
    ok(
        &[
            "tokenize",
            "--encode",
            "--codebook",
            "cb",
            "--features",
            "corpus/utt00001.feat",
            "--out",
            "enc/u.units",
        ],
        d,
    );
    let enc = read_units(d.join("enc/u.units")).unwrap();
    assert_eq!(enc.num_units(), 4);
    assert!(d.join("enc").join(RUN_MANIFEST_FILE).exists());

    ok(
        &[
            "train",
            "--corpus",
            "corpus",
            "--out",
            "ckpt",
            "--max-steps",
            "1",
            "--batch-size",
            "2",
        ],
        d,
    );
    // Oracle vocoder K must match the model's K.
    let out = avo(
        &[
            "infer",
            "--ckpt",
            "ckpt",
            "--phonemes",
            "corpus/utt00000.phon",
            "--video",
            "corpus/utt00000.feat",
            "--out",
            "o/u.units",
            "--vocoder",
            "oracle-sine",
            "--codebook",
            "cb",
            "--wav",
            "o/u.wav",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(1));

    ok(
        &[
            "infer",
            "--ckpt",
            "ckpt",
            "--phonemes",
            "corpus/utt00000.phon",
            "--video",
            "corpus/utt00000.feat",
            "--n",
            "2",
            "--out",
            "o/u.units",
            "--attention",
            "o/a.feat",
        ],
        d,
    );
    let corpus = Corpus::load(d.join("corpus")).unwrap();
    let units = read_units(d.join("o/u.units")).unwrap();
    assert_eq!(units.len(), 2 * corpus.utterances[0].video.len());
    let first = std::fs::read(d.join("o/u.units")).unwrap();
    ok(
        &[
            "infer",
            "--ckpt",
            "ckpt",
            "--phonemes",
            "corpus/utt00000.phon",
            "--video",
            "corpus/utt00000.feat",
            "--n",
            "2",
            "--out",
            "o/u.units",
        ],
        d,
    );
    assert_eq!(std::fs::read(d.join("o/u.units")).unwrap(), first);
}

#[test]
fn gradcheck_command_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = avo(&["gradcheck", "--out", "gc/report.json"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("passed"));
    let report: avo::training::GradCheckReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("gc/report.json")).unwrap())
            .unwrap();
    assert!(report.passed);
    // An unreachable tolerance fails with a runtime exit code.
    let out = avo(&["gradcheck", "--tolerance", "1e-30"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}
